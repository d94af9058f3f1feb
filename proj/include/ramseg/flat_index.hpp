#pragma once

#include <cstdint>
#include <filesystem>
#include <shared_mutex>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "ramseg/embedding.hpp"

namespace ramseg {

inline constexpr double kIndexNormTolerance = 1e-4;

struct RetrievalHit {
  std::string id;
  // Squared L2 distance; -1 for hits from random sampling.
  double distance = 0.0;
  int rank = 0;

  friend bool operator==(const RetrievalHit&, const RetrievalHit&) = default;
};

struct SearchResult {
  std::vector<RetrievalHit> hits;
  std::uint64_t version = 0;
};

// Exact nearest-neighbor store over unit-norm embeddings. Rows keep insertion
// order; queries rank by squared L2 and break ties by insertion order.
// Many readers or one writer at a time; every query sees one consistent version.
class FlatIndex {
 public:
  explicit FlatIndex(int dim = kReferenceEmbeddingDim);
  FlatIndex(const FlatIndex& other);
  FlatIndex& operator=(const FlatIndex& other);
  FlatIndex(FlatIndex&& other) noexcept;
  FlatIndex& operator=(FlatIndex&& other) noexcept;

  int dim() const noexcept { return dim_; }
  std::size_t size() const;
  std::uint64_t version() const;
  std::vector<std::string> ids() const;
  bool contains(const std::string& id) const;
  // Copy of the stored row, in insertion order.
  std::vector<float> row(std::size_t position) const;

  void add(const Embedding& embedding, const std::string& id);

  std::vector<RetrievalHit> query(const Embedding& q, int k) const;
  SearchResult query_versioned(const Embedding& q, int k) const;

  // Uniform sample of k ids without replacement, deterministic per seed.
  std::vector<RetrievalHit> random_sample(int k, std::uint64_t seed) const;

  void save(const std::filesystem::path& path) const;
  static FlatIndex load(const std::filesystem::path& path);
  std::vector<std::uint8_t> serialize() const;
  static FlatIndex deserialize(std::span<const std::uint8_t> bytes);

  // Raw row storage, N×dim, for bit-level comparisons.
  std::vector<float> rows() const;

 private:
  void check_vector(std::span<const float> v, const char* what) const;

  int dim_;
  std::vector<float> rows_;
  std::vector<std::string> ids_;
  std::unordered_map<std::string, std::size_t> positions_;
  std::uint64_t version_ = 0;
  mutable std::shared_mutex mutex_;
};

struct IdentifiedEmbedding {
  std::string id;
  Embedding embedding;
};

// Empty input yields an empty index of dimension `dim_if_empty`.
FlatIndex build_index(std::span<const IdentifiedEmbedding> entries, int dim_if_empty = kReferenceEmbeddingDim);

}  // namespace ramseg
