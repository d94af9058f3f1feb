#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "ramseg/embedding.hpp"
#include "ramseg/flat_index.hpp"

namespace ramseg::testing {

// Scratch directory removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "ramseg") {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            (tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::vector<float> random_raw(std::mt19937_64& rng, int dim) {
  std::normal_distribution<float> g(0.0f, 1.0f);
  std::vector<float> v(dim);
  for (auto& x : v) x = g(rng);
  return v;
}

inline Embedding random_unit(std::mt19937_64& rng, int dim) { return normalize_embedding(random_raw(rng, dim)); }

inline Embedding axis(int dim, int which) {
  Embedding e;
  e.vector.assign(dim, 0.0f);
  e.vector[which] = 1.0f;
  return e;
}

// Linear-scan oracle: every distance from the definition, full stable sort.
inline std::vector<RetrievalHit> linear_scan(const std::vector<std::vector<float>>& rows,
                                             const std::vector<std::string>& ids, const std::vector<float>& q,
                                             int k) {
  std::vector<std::pair<double, std::size_t>> all;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    double d = 0.0;
    for (std::size_t j = 0; j < q.size(); ++j) {
      const double diff = static_cast<double>(q[j]) - rows[i][j];
      d += diff * diff;
    }
    all.emplace_back(d, i);
  }
  std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<RetrievalHit> hits;
  for (std::size_t r = 0; r < all.size() && r < static_cast<std::size_t>(k); ++r)
    hits.push_back({ids[all[r].second], all[r].first, static_cast<int>(r + 1)});
  return hits;
}

}  // namespace ramseg::testing
