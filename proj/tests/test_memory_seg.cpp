#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <random>

#include "ramseg/checkpoint.hpp"
#include "ramseg/evaluation.hpp"
#include "ramseg/log.hpp"
#include "ramseg/memory_seg.hpp"
#include "ramseg/synthetic.hpp"
#include "test_support.hpp"

using namespace ramseg;
using namespace ramseg::testing;

namespace {

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an ramseg::Error");
  return ErrorCode::InvalidArgument;
}

PreprocessSpec small_spec(int seg = 128) {
  PreprocessSpec spec;
  spec.embed_resolution = 56;
  spec.seg_resolution = seg;
  return spec;
}

BinaryMask disc_mask(int h, int w, int cy, int cx, int r) {
  BinaryMask m(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) m.at(y, x) = (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r;
  return m;
}

double max_abs_diff(const Tensor3& a, const Tensor3& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.values().size(); ++i)
    d = std::max(d, std::abs(static_cast<double>(a.values()[i]) - b.values()[i]));
  return d;
}

// Small database of synthetic slices with index and store wired together.
struct Database {
  std::vector<SampleRecord> records;
  BackbonePtr backbone = make_test_backbone(0);
  FlatIndex index{384};
  SampleStore store{cardiac_class_map()};
  PreprocessSpec spec = small_spec();

  explicit Database(std::vector<SampleRecord> recs) : records(std::move(recs)) {
    for (const auto& r : records) {
      index.add(embed(*backbone, preprocess_for_embedding(r.image, spec)), r.id);
      store.add(r);
    }
  }

  SegmentationContext context(const SegEngine& engine) const {
    return {engine, *backbone, index, store, spec, cardiac_class_map()};
  }
};

}  // namespace

TEST_CASE("toy engine feature shapes and determinism") {
  SUBCASE("1024 input gives a 64x64 grid at stride 16") {
    const auto engine = make_toy_engine(1);
    CHECK(engine->memory_resolution() == 64);
    const auto f = engine->encode_image_features(Tensor3(1024, 1024, 3, 0.25f));
    CHECK(f.grid.height() == 64);
    CHECK(f.grid.width() == 64);
    CHECK(f.grid.channels() == ToyEngineConfig{}.feature_channels);
    CHECK(f.stride == 16);
    REQUIRE(f.skips.size() == 1);
    CHECK(f.skips[0].height() == 256);
  }
  const auto engine = make_toy_engine(3, small_spec());
  const auto samples = make_synthetic_samples({.count = 3});
  const auto input = engine->prepare_input(samples[0].image);
  CHECK(engine->encode_image_features(input).grid == engine->encode_image_features(input).grid);
  CHECK(code_of([&] { engine->encode_image_features(Tensor3(64, 64, 3)); }) == ErrorCode::ShapeMismatch);
  CHECK(code_of([&] { make_toy_engine(1, small_spec(100)); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("toy engine memory encoding") {
  const auto engine = make_toy_engine(4, small_spec());
  const auto samples = make_synthetic_samples({.count = 2});
  const auto f = engine->encode_image_features(engine->prepare_input(samples[0].image));
  const int h = samples[0].image.height(), w = samples[0].image.width();

  const auto zero = engine->encode_memory(f, BinaryMask(h, w, 0));
  const auto one = engine->encode_memory(f, BinaryMask(h, w, 1));
  CHECK(zero.memory_grid.height() == engine->memory_resolution());
  CHECK(zero.memory_grid.width() == engine->memory_resolution());
  CHECK(max_abs_diff(zero.memory_grid, one.memory_grid) > 0.0);

  BinaryMask labels(h, w, 0);
  labels.at(3, 3) = 2;
  CHECK(code_of([&] { engine->encode_memory(f, labels); }) == ErrorCode::NonBinaryMask);
}

TEST_CASE("toy engine memory attention") {
  const auto engine = make_toy_engine(5, small_spec());
  const auto samples = make_synthetic_samples({.count = 5});
  const auto query = engine->encode_image_features(engine->prepare_input(samples[0].image));

  std::vector<MemoryEntry> entries;
  for (int i = 1; i < 5; ++i) {
    const auto f = engine->encode_image_features(engine->prepare_input(samples[i].image));
    entries.push_back(engine->encode_memory(f, samples[i].mask.binary(3), samples[i].id, i, 3));
  }
  auto bank_of = [&](const std::vector<MemoryEntry>& es) {
    MemoryBank bank(static_cast<int>(es.size()), 3);
    for (const auto& e : es) bank.add(e);
    return bank;
  };

  const auto out = engine->memory_attention(query, bank_of(entries));
  CHECK(out.grid.same_shape(query.grid));

  SUBCASE("permuting the bank leaves the output bitwise identical") {
    auto shuffled = entries;
    std::mt19937_64 rng(9);
    for (int t = 0; t < 5; ++t) {
      std::shuffle(shuffled.begin(), shuffled.end(), rng);
      CHECK(engine->memory_attention(query, bank_of(shuffled)).grid == out.grid);
    }
  }
  SUBCASE("changing one memory's mask changes the logits somewhere") {
    auto changed = entries;
    const auto f = engine->encode_image_features(engine->prepare_input(samples[1].image));
    changed[0] = engine->encode_memory(f, samples[1].mask.binary(1), samples[1].id, 1, 3);
    const auto a = engine->decode_mask(out, 64, 64);
    const auto b = engine->decode_mask(engine->memory_attention(query, bank_of(changed)), 64, 64);
    double linf = 0.0;
    for (std::size_t i = 0; i < a.logits.size(); ++i)
      linf = std::max(linf, std::abs(static_cast<double>(a.logits.values()[i]) - b.logits.values()[i]));
    CHECK(linf > 0.0);
  }
  SUBCASE("empty bank") {
    CHECK(code_of([&] { engine->memory_attention(query, MemoryBank(4, 3)); }) == ErrorCode::EmptyMemoryBank);
  }
  SUBCASE("decode is deterministic and native sized") {
    const auto a = engine->decode_mask(out, 70, 50);
    const auto b = engine->decode_mask(out, 70, 50);
    CHECK(a.mask.same_shape(70, 50));
    CHECK(a.mask == b.mask);
    CHECK(a.logits == b.logits);
  }
}

TEST_CASE("memory bank contracts") {
  MemoryBank bank(2, 1);
  MemoryEntry e{Tensor3(4, 4, 2), "a", 1, 1};
  bank.add(e);
  CHECK(code_of([&] { bank.add(MemoryEntry{Tensor3(4, 4, 2), "b", 2, 2}); }) == ErrorCode::InvalidArgument);
  CHECK(code_of([&] { bank.add(MemoryEntry{Tensor3(5, 4, 2), "b", 2, 1}); }) == ErrorCode::ShapeMismatch);
  bank.add(MemoryEntry{Tensor3(4, 4, 2), "b", 2, 1});
  CHECK(code_of([&] { bank.add(e); }) == ErrorCode::InvalidArgument);
  CHECK(code_of([] { MemoryBank(0, 1); }) == ErrorCode::InvalidK);
}

TEST_CASE("binarization threshold") {
  const auto neg = binarize_logits(Grid<float>(16, 16, -1.0f), 40, 30);
  CHECK(neg.mask == BinaryMask(40, 30, 0));
  CHECK(neg.score == 0.0);
  const auto pos = binarize_logits(Grid<float>(16, 16, 1.0f), 40, 30);
  CHECK(pos.mask == BinaryMask(40, 30, 1));
  CHECK(pos.score == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))));
}

TEST_CASE("transfer engine") {
  const auto engine = make_transfer_engine();

  SUBCASE("rank-1 mask 64x64 onto a 128x128 query is a nearest upsample") {
    const auto exemplar_mask = disc_mask(64, 64, 30, 34, 12);
    const auto ex = engine->encode_image_features(Tensor3(64, 64, 1));
    const auto q = engine->encode_image_features(Tensor3(128, 128, 1));
    MemoryBank bank(2, 1);
    bank.add(engine->encode_memory(ex, BinaryMask(64, 64, 1), "second", 2, 1), false);
    bank.add(engine->encode_memory(ex, exemplar_mask, "first", 1, 1), false);
    const auto d = engine->decode_mask(engine->memory_attention(q, bank), 128, 128);
    CHECK(d.mask == resize_mask_nearest(exemplar_mask, 128, 128));
  }

  SUBCASE("self-retrieval reproduces the ground truth exactly") {
    Database db(make_synthetic_samples({.count = 12}));
    const auto ctx = db.context(*engine);
    for (const auto& r : db.records) {
      const auto result = segment_image(ctx, r.image, {.k = 4});
      CHECK(result.hits[0].id == r.id);
      CHECK(result.hits[0].distance == 0.0);
      for (const auto& [c, _] : cardiac_class_map()) {
        CHECK(result.class_masks.at(c) == r.mask.binary(c));
        CHECK(dice(result.class_masks.at(c), r.mask.binary(c)) == 1.0);
      }
      CHECK(result.label_map() == r.mask.labels);
    }
  }
}

TEST_CASE("segment_image pipeline") {
  Database db(make_synthetic_samples({.count = 8}));
  const auto toy = make_toy_engine(11, db.spec);
  const auto ctx = db.context(*toy);
  const auto query = make_synthetic_samples({.count = 1, .seed = 99})[0];

  SUBCASE("shape, provenance and determinism") {
    const auto a = segment_image(ctx, query.image, {.k = 3});
    const auto b = segment_image(ctx, query.image, {.k = 3});
    CHECK(a.k_used == 3);
    CHECK(a.index_version == 8);
    const auto direct = db.index.query(embed(*db.backbone, preprocess_for_embedding(query.image, db.spec)), 3);
    CHECK(a.hits == direct);
    for (const auto& [c, mask] : a.class_masks) {
      CHECK(mask.same_shape(query.image.pixels));
      for (auto v : mask.values()) CHECK(v <= 1);
      REQUIRE(a.exemplar_ids.at(c).size() == 3);
      for (int i = 0; i < 3; ++i) CHECK(a.exemplar_ids.at(c)[i] == direct[i].id);
      CHECK(mask == b.class_masks.at(c));
      CHECK(a.class_logits.at(c) == b.class_logits.at(c));
    }
    CHECK(a.timing.total_ms >= a.timing.attention_decode_ms);
  }
  SUBCASE("k larger than N clamps with a warning") {
    std::vector<std::string> warnings;
    auto prev = set_log_sink([&](LogLevel l, const std::string& m) {
      if (l == LogLevel::Warning) warnings.push_back(m);
    });
    const auto r = segment_image(ctx, query.image, {.k = 20, .classes = {3}});
    set_log_sink(prev);
    CHECK(r.k_used == 8);
    CHECK(r.exemplar_ids.at(3).size() == 8);
    CHECK(r.warnings.size() == 1);
    CHECK(warnings.size() == 1);
    CHECK(r.class_masks.size() == 1);
  }
  SUBCASE("random strategy") {
    const auto r = segment_image(ctx, query.image, {.k = 4, .classes = {1}, .strategy = RetrievalStrategy::parse("random:5")});
    CHECK(r.hits == db.index.random_sample(4, 5));
    CHECK(r.strategy.to_string() == "random:5");
  }
  SUBCASE("errors") {
    CHECK(code_of([&] { segment_image(ctx, query.image, {.k = 0}); }) == ErrorCode::InvalidK);
    CHECK(code_of([&] { segment_image(ctx, query.image, {.k = 2, .classes = {9}}); }) == ErrorCode::UnknownClass);
    FlatIndex empty(384);
    const SegmentationContext ectx{*toy, *db.backbone, empty, db.store, db.spec, cardiac_class_map()};
    CHECK(code_of([&] { segment_image(ectx, query.image, {.k = 2}); }) == ErrorCode::EmptyIndex);

    FlatIndex orphan(384);
    orphan.add(embed(*db.backbone, preprocess_for_embedding(query.image, db.spec)), "ghost");
    const SegmentationContext octx{*toy, *db.backbone, orphan, db.store, db.spec, cardiac_class_map()};
    CHECK(code_of([&] { segment_image(octx, query.image, {.k = 1}); }) == ErrorCode::MissingSample);
  }
}

TEST_CASE("segment_volume") {
  Database db(make_synthetic_samples({.count = 6}));
  const auto engine = make_transfer_engine();
  const auto ctx = db.context(*engine);
  const auto queries = make_synthetic_samples({.count = 10, .subjects = 1, .seed = 3});
  const auto volume = stack_slices(queries).first;

  const auto results = segment_volume(ctx, volume, {.k = 2});
  REQUIRE(results.size() == 10);
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto single = segment_image(ctx, queries[i].image, {.k = 2});
    CHECK(results[i].hits == single.hits);
    CHECK(results[i].class_masks == single.class_masks);
  }

  FlatIndex empty(384);
  const SegmentationContext ectx{*engine, *db.backbone, empty, db.store, db.spec, cardiac_class_map()};
  CHECK(code_of([&] { segment_volume(ectx, volume, {.k = 2}); }) == ErrorCode::EmptyIndex);

  try {
    segment_volume(ctx, volume, {.k = 2, .classes = {7}});
    FAIL("expected UnknownClass");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::UnknownClass);
    CHECK(std::string(e.what()).find("slice 0") != std::string::npos);
  }
}

TEST_CASE("label map overlap rule") {
  SegmentationResult r;
  BinaryMask a(1, 3, 1), b(1, 3, 1);
  b.at(0, 0) = 0;
  r.class_masks = {{1, a}, {2, b}};
  r.class_logits = {{1, Grid<float>(1, 3, std::vector<float>{0.5f, 0.9f, 0.4f})},
                    {2, Grid<float>(1, 3, std::vector<float>{0.1f, 0.3f, 0.4f})}};
  // Pixel 0 only class 1, pixel 1 higher logit wins, pixel 2 tie goes to the smaller id.
  CHECK(r.label_map() == Grid<std::int32_t>(1, 3, std::vector<std::int32_t>{1, 1, 1}));
  r.class_logits.at(2).at(0, 1) = 2.0f;
  CHECK(r.label_map().at(0, 1) == 2);
}

TEST_CASE("engine registry") {
  CHECK(make_engine("transfer")->name() == "transfer");
  CHECK(make_engine("toy:7", {.preprocess = small_spec()})->name() == "toy:7");
  CHECK(code_of([] { make_engine("toy:abc"); }) == ErrorCode::InvalidArgument);

  ::unsetenv(kSam2CheckpointEnv);
  try {
    make_engine("pretrained");
    FAIL("expected CheckpointMissing");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::CheckpointMissing);
    CHECK(std::string(e.what()).find(kSam2CheckpointEnv) != std::string::npos);
  }
  TempDir dir;
  const auto ckpt = dir / "sam2.pt";
  { std::ofstream(ckpt) << "x"; }
  CHECK(code_of([&] { make_engine("pretrained", {.checkpoint = ckpt.string()}); }) == ErrorCode::RuntimeUnavailable);

  register_engine("pretrained", [](const EngineOptions&) { return make_transfer_engine(); });
  CHECK(make_engine("pretrained")->name() == "transfer");
  unregister_engine("pretrained");

  CHECK(RetrievalStrategy::parse("embedding").kind == RetrievalStrategy::Kind::Embedding);
  CHECK(RetrievalStrategy::parse("random:12").seed == 12);
  CHECK(code_of([] { RetrievalStrategy::parse("random:"); }) == ErrorCode::InvalidArgument);
}
