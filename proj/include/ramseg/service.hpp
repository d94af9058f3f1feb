#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "ramseg/data_model.hpp"
#include "ramseg/embedding.hpp"
#include "ramseg/flat_index.hpp"
#include "ramseg/sample_store.hpp"

namespace ramseg {

struct ServiceConfig {
  std::filesystem::path index_path;   // loaded if present, written on build
  std::filesystem::path samples_dir;  // dataset dir; manifest.json optional
  std::filesystem::path state_dir;    // spool + journal; default <samples_dir>/accepted
  std::string engine = "transfer";
  std::string engine_checkpoint;
  std::string backbone = "test:0";
  std::string backbone_checkpoint;
  int default_k = 16;
  PreprocessSpec preprocess;
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  int max_pending_segments = 8;  // queued + running; beyond this segment/retrieve answer 503
  int threads = 8;
};

// One accepted sample as recorded in journal.jsonl.
struct JournalEntry {
  std::string id;
  std::string timestamp;  // UTC, ISO 8601
  std::string source = "user-accepted";
  std::string subject_id;
  std::string image_path;  // relative to the state dir
  std::string mask_path;
};

nlohmann::json journal_entry_to_json(const JournalEntry& entry);
JournalEntry journal_entry_from_json(const nlohmann::json& doc);
std::vector<JournalEntry> read_journal(const std::filesystem::path& journal_path);

// Re-adds every journaled sample missing from the index or the store, in
// journal order. Returns the number of index insertions.
std::size_t replay_journal(const std::filesystem::path& state_dir, const EmbeddingBackbone& backbone,
                           const PreprocessSpec& preprocess, FlatIndex& index, SampleStore& store);

inline constexpr const char* kJournalFile = "journal.jsonl";
inline constexpr const char* kIndexVersionHeader = "X-Index-Version";

// JSON body for an error response.
nlohmann::json api_error_json(ErrorCode code, const std::string& message);

// OpenAPI 3 description of the HTTP interface.
nlohmann::json openapi_spec();

class Service {
 public:
  // Loads the database (index file or manifest), replays the journal and
  // constructs the engine. Does not bind.
  explicit Service(ServiceConfig config);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  // Binds and serves on a background thread; returns the bound port.
  int start();
  // Binds and serves on the calling thread until stop().
  void run();
  void stop();

  std::uint64_t index_version() const;
  std::size_t index_size() const;
  std::size_t accepted_count() const;
  const ServiceConfig& config() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace ramseg
