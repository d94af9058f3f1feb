#include "ramseg/memory_seg.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>

#include "ramseg/checkpoint.hpp"
#include "ramseg/log.hpp"

namespace ramseg {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

void check_finite(const Tensor3& t, const std::string& what) {
  for (float v : t.values())
    if (!std::isfinite(v)) fail(ErrorCode::NonFiniteOutput, what + " produced non-finite values");
}

}  // namespace

MemoryBank::MemoryBank(int capacity, int class_label) : capacity_(capacity), class_label_(class_label) {
  if (capacity < 1) fail(ErrorCode::InvalidK, "memory bank capacity must be >= 1");
}

void MemoryBank::add(MemoryEntry entry, bool uniform_dims) {
  if (entry.class_label != class_label_)
    fail(ErrorCode::InvalidArgument, "memory entry for class " + std::to_string(entry.class_label) +
                                         " added to bank of class " + std::to_string(class_label_));
  if (static_cast<int>(entries_.size()) >= capacity_)
    fail(ErrorCode::InvalidArgument, "memory bank is full (capacity " + std::to_string(capacity_) + ")");
  if (uniform_dims && !entries_.empty() && !entries_.front().memory_grid.same_shape(entry.memory_grid))
    fail(ErrorCode::ShapeMismatch, "memory entries must share dimensions");
  entries_.push_back(std::move(entry));
}

DecodedMask binarize_logits(const Grid<float>& logits, int height, int width) {
  if (logits.empty()) fail(ErrorCode::ShapeMismatch, "empty logit grid");
  DecodedMask out;
  out.logits = resize_bilinear(logits, height, width);
  out.mask = BinaryMask(height, width);
  double prob_sum = 0.0;
  std::size_t fg = 0;
  auto lv = out.logits.values();
  auto mv = out.mask.values();
  for (std::size_t i = 0; i < lv.size(); ++i) {
    if (lv[i] > kLogitThreshold) {
      mv[i] = 1;
      ++fg;
      prob_sum += 1.0 / (1.0 + std::exp(-static_cast<double>(lv[i])));
    }
  }
  out.score = fg ? prob_sum / static_cast<double>(fg) : 0.0;
  return out;
}

FeatureMap SegEngine::encode_image_features(const Tensor3& input) const {
  check_input(input);
  auto features = do_encode_image(input);
  check_finite(features.grid, name() + " image encoder");
  return features;
}

MemoryEntry SegEngine::encode_memory(const FeatureMap& features, const BinaryMask& mask, const std::string& source_id,
                                     int retrieval_rank, int class_label) const {
  if (mask.empty()) fail(ErrorCode::ShapeMismatch, "empty exemplar mask");
  for (auto v : mask.values())
    if (v > 1) fail(ErrorCode::NonBinaryMask, "exemplar mask for memory encoding must be binary");
  MemoryEntry entry;
  entry.memory_grid = do_encode_memory(features, mask);
  check_finite(entry.memory_grid, name() + " memory encoder");
  entry.source_sample_id = source_id;
  entry.retrieval_rank = retrieval_rank;
  entry.class_label = class_label;
  return entry;
}

FeatureMap SegEngine::memory_attention(const FeatureMap& query, const MemoryBank& bank) const {
  if (bank.empty())
    fail(ErrorCode::EmptyMemoryBank, "memory attention needs at least one memory; promptless decoding has no fallback");
  auto out = do_memory_attention(query, bank);
  if (!out.grid.same_shape(query.grid))
    fail(ErrorCode::ShapeMismatch, name() + " memory attention changed the feature shape");
  check_finite(out.grid, name() + " memory attention");
  out.stride = query.stride;
  out.skips = query.skips;
  return out;
}

DecodedMask SegEngine::decode_mask(const FeatureMap& conditioned, int height, int width) const {
  if (height < 1 || width < 1) fail(ErrorCode::ShapeMismatch, "decode target must be at least 1x1");
  return binarize_logits(do_decode(conditioned), height, width);
}

Grid<std::int32_t> SegmentationResult::label_map() const {
  if (class_masks.empty()) return {};
  const auto& first = class_masks.begin()->second;
  Grid<std::int32_t> out(first.height(), first.width());
  Grid<float> best(first.height(), first.width(), 0.0f);
  for (const auto& [label, mask] : class_masks) {  // ascending class id
    const auto& logits = class_logits.at(label);
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (!mask.values()[i]) continue;
      if (out.values()[i] == 0 || logits.values()[i] > best.values()[i]) {
        out.values()[i] = label;
        best.values()[i] = logits.values()[i];
      }
    }
  }
  return out;
}

RetrievalStrategy RetrievalStrategy::parse(const std::string& text) {
  if (text == "embedding" || text == "dinov2") return {};
  if (text == "random") return {Kind::Random, 0};
  if (text.rfind("random:", 0) == 0) {
    try {
      std::size_t used = 0;
      const auto seed = std::stoull(text.substr(7), &used);
      if (used == text.size() - 7) return {Kind::Random, seed};
    } catch (const std::logic_error&) {
    }
  }
  fail(ErrorCode::InvalidArgument, "unknown retrieval strategy '" + text + "' (expected embedding or random:<seed>)");
}

std::string RetrievalStrategy::to_string() const {
  return kind == Kind::Embedding ? "embedding" : "random:" + std::to_string(seed);
}

namespace {

std::mutex& engine_registry_mutex() {
  static std::mutex m;
  return m;
}

std::map<std::string, EngineFactory>& engine_registry() {
  static std::map<std::string, EngineFactory> r;
  return r;
}

EnginePtr unavailable_pretrained(const EngineOptions& options) {
  const auto path = resolve_checkpoint(options.checkpoint, kSam2CheckpointEnv);
  if (!path)
    fail(ErrorCode::CheckpointMissing,
         std::string("pretrained engine: no SAM 2 checkpoint found. Set ") + kSam2CheckpointEnv +
             " (or the engine checkpoint option) to a Hiera-large SAM 2 checkpoint, or use "
             "--engine toy:<seed> / transfer for weight-free runs");
  fail(ErrorCode::RuntimeUnavailable,
       "pretrained engine: checkpoint " + path->string() +
           " found but no inference runtime is registered; run through `python -m ramseg` so the torch "
           "runtime registers itself");
}

}  // namespace

void register_engine(const std::string& name, EngineFactory factory) {
  std::lock_guard lock(engine_registry_mutex());
  engine_registry()[name] = std::move(factory);
}

void unregister_engine(const std::string& name) {
  std::lock_guard lock(engine_registry_mutex());
  engine_registry().erase(name);
}

EnginePtr make_engine(const std::string& name, const EngineOptions& options) {
  EngineFactory factory;
  {
    std::lock_guard lock(engine_registry_mutex());
    if (auto it = engine_registry().find(name); it != engine_registry().end()) factory = it->second;
  }
  if (factory) return factory(options);
  if (name == "transfer") return make_transfer_engine();
  if (name == "pretrained") return unavailable_pretrained(options);
  if (name.rfind("toy:", 0) == 0) {
    try {
      std::size_t used = 0;
      const auto seed = std::stoull(name.substr(4), &used);
      if (used == name.size() - 4) return make_toy_engine(seed, options.preprocess);
    } catch (const std::logic_error&) {
    }
  }
  fail(ErrorCode::InvalidArgument, "unknown engine '" + name + "' (expected pretrained, toy:<seed> or transfer)");
}

SegmentationResult segment_image(const SegmentationContext& ctx, const ImageSlice& image,
                                 const SegmentRequest& request) {
  const auto start = Clock::now();
  image.validate();
  if (request.k < 1) fail(ErrorCode::InvalidK, "k must be >= 1, got " + std::to_string(request.k));

  std::vector<int> classes = request.classes;
  if (classes.empty())
    for (const auto& [label, _] : ctx.class_map) classes.push_back(label);
  for (int c : classes)
    if (!ctx.class_map.contains(c)) fail(ErrorCode::UnknownClass, "class " + std::to_string(c) + " is not in the class map");
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());

  const std::size_t n = ctx.index.size();
  if (n == 0) fail(ErrorCode::EmptyIndex, "retrieval index is empty");

  SegmentationResult result;
  result.strategy = request.strategy;
  int k = request.k;
  if (static_cast<std::size_t>(k) > n) {
    const auto msg = "k=" + std::to_string(k) + " exceeds database size " + std::to_string(n) + "; using all " +
                     std::to_string(n) + " entries";
    log_warning(msg);
    result.warnings.push_back(msg);
    k = static_cast<int>(n);
  }

  auto lane = ctx.engine.acquire_lane();

  auto t = Clock::now();
  if (request.strategy.kind == RetrievalStrategy::Kind::Embedding) {
    const auto q = embed(ctx.backbone, preprocess_for_embedding(image, ctx.preprocess));
    auto found = ctx.index.query_versioned(q, k);
    result.hits = std::move(found.hits);
    result.index_version = found.version;
  } else {
    result.index_version = ctx.index.version();
    result.hits = ctx.index.random_sample(k, request.strategy.seed);
  }
  result.k_used = static_cast<int>(result.hits.size());
  result.timing.embed_retrieve_ms = ms_since(t);

  t = Clock::now();
  const auto query_features = ctx.engine.encode_image_features(ctx.engine.prepare_input(image));
  result.timing.image_encode_ms = ms_since(t);

  t = Clock::now();
  std::vector<std::shared_ptr<const SampleRecord>> exemplars;
  std::vector<FeatureMap> exemplar_features;
  for (const auto& hit : result.hits) {
    exemplars.push_back(ctx.samples.get(hit.id));
    exemplar_features.push_back(ctx.engine.encode_image_features(ctx.engine.prepare_input(exemplars.back()->image)));
  }
  const bool uniform = ctx.engine.memory_resolution() != 0;
  std::vector<MemoryBank> banks;
  for (int c : classes) {
    MemoryBank bank(result.k_used, c);
    for (std::size_t i = 0; i < result.hits.size(); ++i)
      bank.add(ctx.engine.encode_memory(exemplar_features[i], exemplars[i]->mask.binary(c), result.hits[i].id,
                                        result.hits[i].rank, c),
               uniform);
    banks.push_back(std::move(bank));
  }
  result.timing.memory_encode_ms = ms_since(t);

  t = Clock::now();
  std::vector<std::string> ids;
  for (const auto& hit : result.hits) ids.push_back(hit.id);
  for (const auto& bank : banks) {
    const int c = bank.class_label();
    auto decoded = ctx.engine.decode_mask(ctx.engine.memory_attention(query_features, bank), image.height(), image.width());
    result.class_masks.emplace(c, std::move(decoded.mask));
    result.class_logits.emplace(c, std::move(decoded.logits));
    result.class_scores.emplace(c, decoded.score);
    result.exemplar_ids.emplace(c, ids);
  }
  result.timing.attention_decode_ms = ms_since(t);
  result.timing.total_ms = ms_since(start);
  return result;
}

std::vector<SegmentationResult> segment_volume(const SegmentationContext& ctx, const Volume<float>& volume,
                                               const SegmentRequest& request, const std::string& subject_id) {
  if (ctx.index.size() == 0) fail(ErrorCode::EmptyIndex, "retrieval index is empty");
  Volume<std::int32_t> no_labels{volume.depth, volume.height, volume.width,
                                 std::vector<std::int32_t>(volume.voxels.size(), 0)};
  const auto slices = slice_volume(volume, no_labels, subject_id);
  std::vector<SegmentationResult> out;
  out.reserve(slices.size());
  for (const auto& s : slices) {
    try {
      out.push_back(segment_image(ctx, s.image, request));
    } catch (const Error& e) {
      throw Error(e.code(), "slice " + std::to_string(s.image.slice_index) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace ramseg
