#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <numeric>
#include <random>

#include "ramseg/checkpoint.hpp"
#include "ramseg/data_model.hpp"
#include "ramseg/embedding.hpp"
#include "ramseg/log.hpp"
#include "ramseg/synthetic.hpp"

using namespace ramseg;

namespace {

double norm_of(const Embedding& e) {
  double s = 0.0;
  for (float v : e.vector) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

Tensor3 tensor_of(const ImageSlice& img, int res = 56) {
  PreprocessSpec spec;
  spec.embed_resolution = res;
  return preprocess_for_embedding(img, spec);
}

ImageSlice random_image(std::uint64_t seed, int h = 40, int w = 36) {
  std::mt19937_64 rng(seed);
  ImageSlice img{Grid<float>(h, w), "s", 0, "MR"};
  for (auto& v : img.pixels.values()) v = static_cast<float>(rng() % 500);
  return img;
}

}  // namespace

TEST_CASE("test backbone produces unit-norm embeddings of the requested dim") {
  const auto bb = make_test_backbone(42);
  CHECK(bb->dim() == 384);
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto e = embed(*bb, tensor_of(random_image(s)));
    CHECK(e.dim() == 384);
    CHECK(std::abs(norm_of(e) - 1.0) <= kUnitNormTolerance);
  }
  const auto small = make_test_backbone(42, 8);
  CHECK(embed(*small, tensor_of(random_image(1))).dim() == 8);
  CHECK_THROWS_AS(make_test_backbone(1, 1), Error);
}

TEST_CASE("test backbone determinism and seed dependence") {
  const auto img = tensor_of(random_image(7));
  const auto a = embed(*make_test_backbone(42), img);
  const auto b = embed(*make_test_backbone(42), img);
  CHECK(a.vector == b.vector);
  double cos = 0.0;
  for (std::size_t i = 0; i < a.dim(); ++i) cos += static_cast<double>(a.vector[i]) * b.vector[i];
  CHECK(cos == doctest::Approx(1.0).epsilon(1e-6));

  // Checked once: different seeds give different projections.
  const auto c = embed(*make_test_backbone(1), img);
  const auto d = embed(*make_test_backbone(2), img);
  CHECK(c.vector != d.vector);
}

TEST_CASE("embed_batch is order preserving and matches embed bitwise") {
  const auto bb = make_test_backbone(3);
  CHECK(embed_batch(*bb, std::vector<Tensor3>{}).empty());

  std::vector<Tensor3> inputs;
  for (std::uint64_t s = 0; s < 6; ++s) inputs.push_back(tensor_of(random_image(100 + s)));
  const auto batch = embed_batch(*bb, inputs);
  REQUIRE(batch.size() == inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) CHECK(batch[i].vector == embed(*bb, inputs[i]).vector);

  // Permuting the batch permutes the outputs.
  std::vector<std::size_t> perm = {3, 0, 5, 1, 4, 2};
  std::vector<Tensor3> permuted;
  for (auto p : perm) permuted.push_back(inputs[p]);
  const auto pb = embed_batch(*bb, permuted);
  for (std::size_t i = 0; i < perm.size(); ++i) CHECK(pb[i].vector == batch[perm[i]].vector);
}

TEST_CASE("50 synthetic slices embed to 50 vectors of dim 384") {
  const auto samples = make_synthetic_samples({.count = 50});
  std::vector<Tensor3> inputs;
  for (const auto& s : samples) inputs.push_back(tensor_of(s.image, 112));
  const auto out = embed_batch(*make_test_backbone(0), inputs);
  CHECK(out.size() == 50);
  for (const auto& e : out) CHECK(e.dim() == 384);
}

TEST_CASE("constant offset before min-max preprocessing leaves the embedding unchanged") {
  const auto bb = make_test_backbone(5);
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto img = random_image(s);
    auto shifted = img;
    for (auto& v : shifted.pixels.values()) v += 250.0f;
    CHECK(embed(*bb, tensor_of(img)).vector == embed(*bb, tensor_of(shifted)).vector);
  }
}

TEST_CASE("embed errors") {
  const auto bb = make_test_backbone(0);
  CHECK_THROWS_AS(embed(*bb, Tensor3(8, 8, 1)), Error);
  try {
    embed(*bb, Tensor3(8, 8, 1));
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ShapeMismatch);
  }
  // All-zero tensor projects to a zero feature.
  try {
    embed(*bb, Tensor3(16, 16, 3, 0.0f));
    FAIL("expected NonFiniteOutput");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NonFiniteOutput);
  }
  std::vector<Tensor3> batch = {tensor_of(random_image(1)), Tensor3(4, 4, 2)};
  try {
    embed_batch(*bb, batch);
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("batch item 1") != std::string::npos);
  }
}

TEST_CASE("backbone registry") {
  CHECK(make_backbone("test:9")->name() == "test:9");
  CHECK(make_backbone("test:9:16")->dim() == 16);
  CHECK_THROWS_AS(make_backbone("nope"), Error);
  CHECK_THROWS_AS(make_backbone("test:x"), Error);

  SUBCASE("reference backbone degrades to the test backbone without a checkpoint") {
    ::unsetenv(kDinoCheckpointEnv);
    std::vector<std::string> warnings;
    auto prev = set_log_sink([&](LogLevel level, const std::string& m) {
      if (level == LogLevel::Warning) warnings.push_back(m);
    });
    const auto bb = make_backbone(kReferenceBackbone);
    set_log_sink(prev);
    CHECK(bb->dim() == 384);
    REQUIRE(warnings.size() == 1);
    CHECK(warnings[0].find(kDinoCheckpointEnv) != std::string::npos);
  }
  SUBCASE("registered factories win") {
    register_backbone("custom", [](const BackboneOptions&) { return make_test_backbone(77, 12); });
    CHECK(make_backbone("custom")->dim() == 12);
    unregister_backbone("custom");
    CHECK_THROWS_AS(make_backbone("custom"), Error);
  }
}
