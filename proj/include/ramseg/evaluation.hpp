#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ramseg/data_model.hpp"
#include "ramseg/embedding.hpp"
#include "ramseg/flat_index.hpp"
#include "ramseg/memory_seg.hpp"
#include "ramseg/sample_store.hpp"

namespace ramseg {

// 2|A∩B| / (|A|+|B|); two empty masks score 1.
double dice(const BinaryMask& pred, const BinaryMask& gt);

struct DiceRecord {
  std::string sample_id;
  int class_label = 0;
  double dice = 0.0;
  std::int64_t gt_pixels = 0;

  friend bool operator==(const DiceRecord&, const DiceRecord&) = default;
};

// Means over gt_pixels < threshold (small) and >= threshold (large). An empty
// stratum has no mean.
struct SizeStrata {
  std::optional<double> small_mean;
  std::optional<double> large_mean;
  std::size_t small_count = 0;
  std::size_t large_count = 0;

  friend bool operator==(const SizeStrata&, const SizeStrata&) = default;
};

inline constexpr int kDefaultSizeThreshold = 200;

std::map<int, SizeStrata> stratify_by_size(std::span<const DiceRecord> records,
                                           int threshold_px = kDefaultSizeThreshold);

// Arithmetic mean of dice per class.
std::map<int, double> class_means(std::span<const DiceRecord> records);

enum class ProtocolKind { Standard, OneShot };

struct EvalConfig {
  std::string engine = "transfer";
  std::string engine_checkpoint;
  std::string backbone = "test:0";
  std::string backbone_checkpoint;
  std::filesystem::path index_manifest;
  std::filesystem::path test_manifest;
  int k = 16;
  RetrievalStrategy strategy;
  std::vector<int> classes;  // empty: every class in the index manifest
  std::uint64_t seed = 0;
  PreprocessSpec preprocess;
  int size_threshold = kDefaultSizeThreshold;
  ProtocolKind protocol = ProtocolKind::Standard;
  std::filesystem::path episodes;  // one-shot protocol only

  friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

nlohmann::json eval_config_to_json(const EvalConfig& config);
// Relative paths resolve against base_dir.
EvalConfig eval_config_from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
EvalConfig load_eval_config(const std::filesystem::path& path);

struct StageStats {
  double mean_ms = 0.0;
  std::optional<double> stddev_ms;  // absent with a single sample

  friend bool operator==(const StageStats&, const StageStats&) = default;
};

struct EvalReport {
  EvalConfig config;
  ClassMap class_map;
  std::vector<DiceRecord> records;
  std::map<int, double> class_means;
  std::map<int, double> pooled_dice;  // 2Σ|A∩B| / Σ(|A|+|B|) over all slices
  std::map<int, SizeStrata> strata;
  std::map<std::string, StageStats> timing;
  std::vector<std::string> warnings;

  // Everything except wall-clock timings.
  bool same_results(const EvalReport& other) const;
  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

// Database and queries for one protocol run, loaded once and reusable across
// ablation cells.
struct ProtocolEnvironment {
  EnginePtr engine;
  BackbonePtr backbone;
  std::shared_ptr<FlatIndex> index;
  std::shared_ptr<SampleStore> store;
  std::vector<SampleRecord> test;
  ClassMap class_map;
  PreprocessSpec preprocess;  // the index was embedded with this
};

// Throws SubjectLeakage if a subject appears in both sets.
void check_subject_disjoint(std::span<const SampleRecord> database, std::span<const SampleRecord> test);

ProtocolEnvironment prepare_protocol(const EvalConfig& config, std::vector<SampleRecord> database,
                                     std::vector<SampleRecord> test, ClassMap class_map,
                                     EnginePtr engine = nullptr, BackbonePtr backbone = nullptr);
ProtocolEnvironment prepare_protocol(const EvalConfig& config);

// Seed for the i-th query of a run; independent streams per query.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

EvalReport run_protocol(const EvalConfig& config, const ProtocolEnvironment& env);
EvalReport run_protocol(const EvalConfig& config);

struct AblationCell {
  std::string strategy;
  int k = 0;
  EvalReport report;
};

// One report per (strategy, k). A bare "random" gets a fixed seed derived
// from the base seed and k; "random:<seed>" is used as given.
std::vector<AblationCell> run_ablation(const EvalConfig& base, const std::vector<std::string>& strategies,
                                       const std::vector<int>& k_values, const ProtocolEnvironment& env);
std::vector<AblationCell> run_ablation(const EvalConfig& base, const std::vector<std::string>& strategies,
                                       const std::vector<int>& k_values);

struct BenchmarkResult {
  int k = 0;
  int repetitions = 0;
  int warmup = 0;
  std::map<std::string, StageStats> stages;  // embed_retrieve, memory_encode, attention_decode, total, ...
};

inline constexpr int kDefaultWarmup = 3;

BenchmarkResult benchmark_pipeline(const ProtocolEnvironment& env, const ImageSlice& query, const SegmentRequest& request,
                                   int repetitions, int warmup = kDefaultWarmup);

// Mean query time of the exact index over n random unit vectors.
StageStats benchmark_retrieval(std::size_t n, int dim, int k, int repetitions, std::uint64_t seed = 0);

enum class ReportFormat { Json, Csv, Markdown };
ReportFormat parse_report_format(const std::string& name);

nlohmann::json report_to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::json& doc);
std::string report_to_csv(const EvalReport& report);
std::string report_to_markdown(const EvalReport& report);
void write_report(const EvalReport& report, const std::filesystem::path& path, ReportFormat format);
EvalReport read_report_json(const std::filesystem::path& path);

// Per-class means of several reports side by side (ablation grids).
std::string ablation_to_markdown(const std::vector<AblationCell>& cells);
nlohmann::json ablation_to_json(const std::vector<AblationCell>& cells);

}  // namespace ramseg
