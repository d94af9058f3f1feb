#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "ramseg/data_model.hpp"
#include "ramseg/embedding.hpp"
#include "ramseg/flat_index.hpp"
#include "ramseg/sample_store.hpp"
#include "ramseg/tensor.hpp"

namespace ramseg {

// Coarse feature grid plus the higher-resolution encoder levels the decoder
// consumes directly (they bypass memory attention).
struct FeatureMap {
  Tensor3 grid;
  int stride = 1;
  std::vector<Tensor3> skips;
};

struct MemoryEntry {
  Tensor3 memory_grid;
  std::string source_sample_id;
  int retrieval_rank = 0;
  int class_label = 0;
};

// Memories conditioning one binary segmentation run.
class MemoryBank {
 public:
  MemoryBank(int capacity, int class_label);

  // Throws InvalidArgument on class or capacity violations, ShapeMismatch on dims.
  void add(MemoryEntry entry, bool uniform_dims = true);

  const std::vector<MemoryEntry>& entries() const noexcept { return entries_; }
  std::vector<MemoryEntry>& entries() noexcept { return entries_; }
  int capacity() const noexcept { return capacity_; }
  int class_label() const noexcept { return class_label_; }
  bool empty() const noexcept { return entries_.empty(); }
  std::size_t size() const noexcept { return entries_.size(); }

 private:
  int capacity_;
  int class_label_;
  std::vector<MemoryEntry> entries_;
};

struct DecodedMask {
  BinaryMask mask;
  Grid<float> logits;  // native resolution
  double score = 0.0;  // mean foreground probability, 0 for an empty mask
};

inline constexpr float kLogitThreshold = 0.0f;

// Bilinearly upsamples a logit grid to height×width and binarizes at logit 0.
DecodedMask binarize_logits(const Grid<float>& logits, int height, int width);

// Engine stages. Public entry points validate contracts and delegate to the
// per-engine implementations. Instances are immutable after construction;
// whole-image runs go through one inference lane per instance.
class SegEngine {
 public:
  virtual ~SegEngine() = default;

  virtual std::string name() const = 0;
  // Encoder input for a slice.
  virtual Tensor3 prepare_input(const ImageSlice& image) const = 0;
  // Side length of the memory grid for a given input, or 0 if it follows the input.
  virtual int memory_resolution() const = 0;
  // Permutation of bank entries never changes outputs.
  virtual bool order_invariant() const { return true; }

  FeatureMap encode_image_features(const Tensor3& input) const;
  MemoryEntry encode_memory(const FeatureMap& features, const BinaryMask& mask, const std::string& source_id = {},
                            int retrieval_rank = 0, int class_label = 1) const;
  FeatureMap memory_attention(const FeatureMap& query, const MemoryBank& bank) const;
  DecodedMask decode_mask(const FeatureMap& conditioned, int height, int width) const;

  std::unique_lock<std::mutex> acquire_lane() const { return std::unique_lock(lane_); }

 protected:
  virtual void check_input(const Tensor3& input) const = 0;
  virtual FeatureMap do_encode_image(const Tensor3& input) const = 0;
  virtual Tensor3 do_encode_memory(const FeatureMap& features, const BinaryMask& mask) const = 0;
  virtual FeatureMap do_memory_attention(const FeatureMap& query, const MemoryBank& bank) const = 0;
  // Logit grid at the engine's decoder resolution.
  virtual Grid<float> do_decode(const FeatureMap& conditioned) const = 0;

 private:
  mutable std::mutex lane_;
};

using EnginePtr = std::shared_ptr<const SegEngine>;

struct ToyEngineConfig {
  int image_channels = 8;    // skip level, stride 4
  int feature_channels = 32; // stride 16
  int memory_channels = 16;
  int attention_blocks = 2;
  int mlp_hidden = 64;
};

// Seeded, randomly initialized miniature of the memory-conditioned
// architecture: patch encoder with one skip level, memory encoder, stacked
// self/cross attention blocks, and a decoder fed by the skip level.
EnginePtr make_toy_engine(std::uint64_t seed, const PreprocessSpec& spec = {}, const ToyEngineConfig& config = {});

// Oracle engine: predicts the rank-1 exemplar's mask resized (nearest) to the
// query's native dimensions.
EnginePtr make_transfer_engine();

struct EngineOptions {
  PreprocessSpec preprocess;
  std::string checkpoint;  // empty: consult RAMSEG_SAM2_CHECKPOINT
};

using EngineFactory = std::function<EnginePtr(const EngineOptions&)>;

// Names: "pretrained", "toy:<seed>", "transfer" and anything registered.
// "pretrained" needs a registered runtime; otherwise it fails with
// CheckpointMissing or RuntimeUnavailable and a remediation hint.
void register_engine(const std::string& name, EngineFactory factory);
void unregister_engine(const std::string& name);
EnginePtr make_engine(const std::string& name, const EngineOptions& options = {});

struct RetrievalStrategy {
  enum class Kind { Embedding, Random };
  Kind kind = Kind::Embedding;
  std::uint64_t seed = 0;

  static RetrievalStrategy parse(const std::string& text);  // "embedding" | "random:<seed>"
  std::string to_string() const;
  friend bool operator==(const RetrievalStrategy&, const RetrievalStrategy&) = default;
};

struct StageTimings {
  double embed_retrieve_ms = 0.0;
  double image_encode_ms = 0.0;
  double memory_encode_ms = 0.0;
  double attention_decode_ms = 0.0;
  double total_ms = 0.0;
};

struct SegmentationResult {
  std::map<int, BinaryMask> class_masks;
  std::map<int, Grid<float>> class_logits;
  std::map<int, double> class_scores;
  std::map<int, std::vector<std::string>> exemplar_ids;
  std::vector<RetrievalHit> hits;
  StageTimings timing;
  int k_used = 0;
  RetrievalStrategy strategy;
  std::uint64_t index_version = 0;
  std::vector<std::string> warnings;

  // Merged label map: overlapping pixels go to the higher logit, residual ties
  // to the smaller class id.
  Grid<std::int32_t> label_map() const;
};

struct SegmentRequest {
  int k = 16;
  std::vector<int> classes;  // empty: every class in the context's class map
  RetrievalStrategy strategy;
};

struct SegmentationContext {
  const SegEngine& engine;
  const EmbeddingBackbone& backbone;
  const FlatIndex& index;
  const SampleStore& samples;
  PreprocessSpec preprocess;
  ClassMap class_map;
};

SegmentationResult segment_image(const SegmentationContext& context, const ImageSlice& image,
                                 const SegmentRequest& request);

// Slice-by-slice; errors carry the slice index.
std::vector<SegmentationResult> segment_volume(const SegmentationContext& context, const Volume<float>& volume,
                                               const SegmentRequest& request, const std::string& subject_id = "query");

}  // namespace ramseg
