#include "ramseg/flat_index.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <mutex>
#include <numeric>
#include <queue>
#include <random>

#include <json.hpp>

#include "ramseg/checksum.hpp"

namespace ramseg {

namespace {

constexpr std::array<char, 8> kMagic = {'R', 'A', 'M', 'I', 'D', 'X', '1', '\0'};
constexpr std::size_t kHeaderSize = 8 + 4 + 8;

struct Candidate {
  double distance;
  std::size_t position;
};

// Strict weak order on (distance, insertion position).
bool closer(const Candidate& a, const Candidate& b) {
  return a.distance < b.distance || (a.distance == b.distance && a.position < b.position);
}

double squared_l2(const float* a, const float* b, int dim) {
  double acc = 0.0;
  for (int i = 0; i < dim; ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    acc += d * d;
  }
  return acc;
}

template <class T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

template <class T>
T get_le(std::span<const std::uint8_t> bytes, std::size_t offset) {
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(bytes[offset + i]) << (8 * i);
  return value;
}

}  // namespace

FlatIndex::FlatIndex(int dim) : dim_(dim) {
  if (dim < 1) fail(ErrorCode::DimMismatch, "index dimension must be positive");
}

FlatIndex::FlatIndex(const FlatIndex& other) {
  std::shared_lock lock(other.mutex_);
  dim_ = other.dim_;
  rows_ = other.rows_;
  ids_ = other.ids_;
  positions_ = other.positions_;
  version_ = other.version_;
}

FlatIndex& FlatIndex::operator=(const FlatIndex& other) {
  if (this == &other) return *this;
  FlatIndex copy(other);
  *this = std::move(copy);
  return *this;
}

FlatIndex::FlatIndex(FlatIndex&& other) noexcept
    : dim_(other.dim_),
      rows_(std::move(other.rows_)),
      ids_(std::move(other.ids_)),
      positions_(std::move(other.positions_)),
      version_(other.version_) {}

FlatIndex& FlatIndex::operator=(FlatIndex&& other) noexcept {
  if (this == &other) return *this;
  std::unique_lock lock(mutex_);
  dim_ = other.dim_;
  rows_ = std::move(other.rows_);
  ids_ = std::move(other.ids_);
  positions_ = std::move(other.positions_);
  version_ = other.version_;
  return *this;
}

std::size_t FlatIndex::size() const {
  std::shared_lock lock(mutex_);
  return ids_.size();
}

std::uint64_t FlatIndex::version() const {
  std::shared_lock lock(mutex_);
  return version_;
}

std::vector<std::string> FlatIndex::ids() const {
  std::shared_lock lock(mutex_);
  return ids_;
}

bool FlatIndex::contains(const std::string& id) const {
  std::shared_lock lock(mutex_);
  return positions_.contains(id);
}

std::vector<float> FlatIndex::row(std::size_t position) const {
  std::shared_lock lock(mutex_);
  if (position >= ids_.size()) fail(ErrorCode::NotFound, "row " + std::to_string(position) + " out of range");
  auto first = rows_.begin() + static_cast<std::ptrdiff_t>(position * dim_);
  return {first, first + dim_};
}

std::vector<float> FlatIndex::rows() const {
  std::shared_lock lock(mutex_);
  return rows_;
}

void FlatIndex::check_vector(std::span<const float> v, const char* what) const {
  if (static_cast<int>(v.size()) != dim_)
    fail(ErrorCode::DimMismatch, std::string(what) + " has dim " + std::to_string(v.size()) + ", index has " +
                                     std::to_string(dim_));
  double sq = 0.0;
  for (float x : v) {
    if (!std::isfinite(x)) fail(ErrorCode::NotNormalized, std::string(what) + " has non-finite components");
    sq += static_cast<double>(x) * x;
  }
  if (std::abs(std::sqrt(sq) - 1.0) > kIndexNormTolerance)
    fail(ErrorCode::NotNormalized, std::string(what) + " has norm " + std::to_string(std::sqrt(sq)));
}

void FlatIndex::add(const Embedding& embedding, const std::string& id) {
  check_vector(embedding.vector, "embedding");
  if (id.empty()) fail(ErrorCode::InvalidArgument, "index ids must be non-empty");
  std::unique_lock lock(mutex_);
  if (positions_.contains(id)) fail(ErrorCode::DuplicateId, "id '" + id + "' already indexed");
  rows_.insert(rows_.end(), embedding.vector.begin(), embedding.vector.end());
  positions_.emplace(id, ids_.size());
  ids_.push_back(id);
  ++version_;
}

std::vector<RetrievalHit> FlatIndex::query(const Embedding& q, int k) const { return query_versioned(q, k).hits; }

SearchResult FlatIndex::query_versioned(const Embedding& q, int k) const {
  if (k < 1) fail(ErrorCode::InvalidK, "k must be >= 1, got " + std::to_string(k));
  check_vector(q.vector, "query");
  std::shared_lock lock(mutex_);
  const std::size_t n = ids_.size();
  if (n == 0) fail(ErrorCode::EmptyIndex, "index is empty");
  const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(k), n);

  // Bounded max-heap holding the best `keep` candidates seen so far.
  std::priority_queue<Candidate, std::vector<Candidate>, decltype(&closer)> heap(&closer);
  for (std::size_t i = 0; i < n; ++i) {
    const Candidate c{squared_l2(q.vector.data(), rows_.data() + i * dim_, dim_), i};
    if (heap.size() < keep) {
      heap.push(c);
    } else if (closer(c, heap.top())) {
      heap.pop();
      heap.push(c);
    }
  }
  std::vector<Candidate> best;
  best.reserve(keep);
  while (!heap.empty()) best.push_back(heap.top()), heap.pop();
  std::reverse(best.begin(), best.end());

  SearchResult result;
  result.version = version_;
  result.hits.reserve(keep);
  for (std::size_t r = 0; r < best.size(); ++r)
    result.hits.push_back({ids_[best[r].position], best[r].distance, static_cast<int>(r + 1)});
  return result;
}

std::vector<RetrievalHit> FlatIndex::random_sample(int k, std::uint64_t seed) const {
  std::shared_lock lock(mutex_);
  const auto n = ids_.size();
  if (k < 1 || static_cast<std::size_t>(k) > n)
    fail(ErrorCode::InvalidK, "random sample needs 1 <= k <= " + std::to_string(n) + ", got " + std::to_string(k));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  // Partial Fisher-Yates: only the first k positions are drawn.
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < static_cast<std::size_t>(k); ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(order[i], order[pick(rng)]);
  }
  std::vector<RetrievalHit> hits;
  hits.reserve(k);
  for (int r = 0; r < k; ++r) hits.push_back({ids_[order[r]], -1.0, r + 1});
  return hits;
}

std::vector<std::uint8_t> FlatIndex::serialize() const {
  std::shared_lock lock(mutex_);
  std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(dim_));
  put_le<std::uint64_t>(out, ids_.size());
  out.reserve(out.size() + rows_.size() * 4 + 64 * ids_.size());
  for (float v : rows_) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_le(out, bits);
  }
  const std::string ids = nlohmann::json(ids_).dump();
  put_le<std::uint64_t>(out, ids.size());
  out.insert(out.end(), ids.begin(), ids.end());
  put_le(out, crc32_checksum(out));
  return out;
}

FlatIndex FlatIndex::deserialize(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderSize + 8 + 4) fail(ErrorCode::CorruptFile, "index file truncated");
  const auto body = bytes.first(bytes.size() - 4);
  if (crc32_checksum(body) != get_le<std::uint32_t>(bytes, bytes.size() - 4))
    fail(ErrorCode::CorruptFile, "index checksum mismatch");
  if (!std::equal(kMagic.begin(), kMagic.begin() + 6, body.begin()))
    fail(ErrorCode::CorruptFile, "bad index magic");
  if (body[6] != '1' || body[7] != '\0')
    fail(ErrorCode::VersionUnsupported, "unsupported index format version");

  const auto dim = get_le<std::uint32_t>(body, 8);
  const auto count = get_le<std::uint64_t>(body, 12);
  if (dim == 0 || dim > (1u << 20)) fail(ErrorCode::CorruptFile, "implausible index dimension");
  const std::size_t row_bytes = static_cast<std::size_t>(dim) * 4;
  if (count > (body.size() - kHeaderSize) / row_bytes) fail(ErrorCode::CorruptFile, "row block truncated");
  std::size_t offset = kHeaderSize + count * row_bytes;
  if (body.size() < offset + 8) fail(ErrorCode::CorruptFile, "ids block truncated");
  const auto ids_len = get_le<std::uint64_t>(body, offset);
  offset += 8;
  if (body.size() - offset != ids_len) fail(ErrorCode::CorruptFile, "ids block length mismatch");

  FlatIndex index(static_cast<int>(dim));
  index.rows_.resize(count * dim);
  for (std::size_t i = 0; i < index.rows_.size(); ++i) {
    const auto bits = get_le<std::uint32_t>(body, kHeaderSize + 4 * i);
    std::memcpy(&index.rows_[i], &bits, 4);
  }
  nlohmann::json ids;
  try {
    ids = nlohmann::json::parse(body.begin() + static_cast<std::ptrdiff_t>(offset), body.end());
    index.ids_ = ids.get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception&) {
    fail(ErrorCode::CorruptFile, "ids block is not a JSON string array");
  }
  if (index.ids_.size() != count) fail(ErrorCode::CorruptFile, "id count does not match row count");
  for (std::size_t i = 0; i < index.ids_.size(); ++i)
    if (!index.positions_.emplace(index.ids_[i], i).second) fail(ErrorCode::CorruptFile, "duplicate id in index file");
  // Versions count insertions, so a loaded index resumes where a built one would be.
  index.version_ = count;
  return index;
}

void FlatIndex::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::IoError, "cannot write " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorCode::IoError, "write failed for " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorCode::IoError, "cannot move index into place: " + ec.message());
}

FlatIndex FlatIndex::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open index " + path.string());
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return deserialize(bytes);
}

FlatIndex build_index(std::span<const IdentifiedEmbedding> entries, int dim_if_empty) {
  if (entries.empty()) return FlatIndex(dim_if_empty);
  FlatIndex index(static_cast<int>(entries.front().embedding.dim()));
  for (const auto& e : entries) index.add(e.embedding, e.id);
  return index;
}

}  // namespace ramseg
