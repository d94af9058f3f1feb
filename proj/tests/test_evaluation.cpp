#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>

#include "ramseg/evaluation.hpp"
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

BinaryMask random_mask(std::mt19937_64& rng, int h, int w, double p) {
  std::bernoulli_distribution fg(p);
  BinaryMask m(h, w);
  for (auto& v : m.values()) v = fg(rng);
  return m;
}

// Dice from explicit pixel sets.
double set_dice(const BinaryMask& a, const BinaryMask& b) {
  std::set<std::size_t> sa, sb, both;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.values()[i]) sa.insert(i);
    if (b.values()[i]) sb.insert(i);
  }
  std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::inserter(both, both.begin()));
  if (sa.empty() && sb.empty()) return 1.0;
  return 2.0 * both.size() / static_cast<double>(sa.size() + sb.size());
}

PreprocessSpec small_spec() {
  PreprocessSpec spec;
  spec.embed_resolution = 56;
  spec.seg_resolution = 128;
  return spec;
}

}  // namespace

TEST_CASE("dice examples") {
  BinaryMask a(10, 20, 0), b(10, 20, 0);
  for (int x = 0; x < 10; ++x)
    for (int y = 0; y < 10; ++y) a.at(y, x) = 1;  // 100 px
  for (int x = 5; x < 15; ++x)
    for (int y = 0; y < 10; ++y) b.at(y, x) = 1;  // 100 px, 50 shared
  CHECK(dice(a, a) == 1.0);
  CHECK(dice(a, b) == 0.5);
  BinaryMask c(10, 20, 0);
  for (int x = 15; x < 20; ++x) c.at(0, x) = 1;
  CHECK(dice(a, c) == 0.0);
  CHECK(dice(BinaryMask(4, 4), BinaryMask(4, 4)) == 1.0);
  CHECK(dice(BinaryMask(4, 4), BinaryMask(4, 4, 1)) == 0.0);
  CHECK(code_of([] { dice(BinaryMask(4, 4), BinaryMask(4, 5)); }) == ErrorCode::ShapeMismatch);
  CHECK(code_of([] { dice(BinaryMask(4, 4, 2), BinaryMask(4, 4)); }) == ErrorCode::NonBinaryMask);
}

TEST_CASE("dice properties over 1000 random mask pairs") {
  std::mt19937_64 rng(123);
  for (int t = 0; t < 1000; ++t) {
    const int h = 1 + static_cast<int>(rng() % 24), w = 1 + static_cast<int>(rng() % 24);
    const double pa = (rng() % 5) / 4.0, pb = (rng() % 5) / 4.0;
    const auto a = random_mask(rng, h, w, pa), b = random_mask(rng, h, w, pb);
    const double d = dice(a, b);
    CHECK(d >= 0.0);
    CHECK(d <= 1.0);
    CHECK(d == dice(b, a));
    CHECK(d == doctest::Approx(set_dice(a, b)).epsilon(1e-12));
    if (std::count(a.values().begin(), a.values().end(), 1) > 0) CHECK(dice(a, a) == 1.0);
  }
}

TEST_CASE("dice grows with the intersection at fixed total size") {
  // |A| = |B| = 20 on a 1x60 strip; sliding B over A raises the overlap.
  BinaryMask a(1, 60, 0);
  for (int x = 20; x < 40; ++x) a.at(0, x) = 1;
  double prev = -1.0;
  for (int start = 0; start <= 20; ++start) {
    BinaryMask b(1, 60, 0);
    for (int x = start; x < start + 20; ++x) b.at(0, x) = 1;
    const double d = dice(a, b);
    CHECK(d >= prev);
    prev = d;
  }
  CHECK(prev == 1.0);
}

TEST_CASE("stratify_by_size") {
  std::vector<DiceRecord> recs = {{"a", 1, 0.2, 50}, {"b", 1, 0.8, 500}, {"c", 1, 0.6, 199},
                                  {"d", 1, 0.9, 200}, {"e", 2, 0.5, 10}};
  const auto s = stratify_by_size(recs);
  CHECK(s.at(1).small_count == 2);
  CHECK(s.at(1).large_count == 2);
  CHECK(*s.at(1).small_mean == doctest::Approx(0.4));
  CHECK(*s.at(1).large_mean == doctest::Approx(0.85));
  CHECK(s.at(2).small_mean.has_value());
  CHECK_FALSE(s.at(2).large_mean.has_value());

  const auto zero = stratify_by_size(recs, 0);
  CHECK_FALSE(zero.at(1).small_mean.has_value());
  CHECK(zero.at(1).large_count == 4);

  SUBCASE("weighted strata recombine to the overall mean") {
    std::mt19937_64 rng(4);
    std::vector<DiceRecord> many;
    for (int i = 0; i < 300; ++i)
      many.push_back({"s" + std::to_string(i), 1 + static_cast<int>(rng() % 3),
                      std::uniform_real_distribution<double>(0, 1)(rng), static_cast<std::int64_t>(rng() % 600)});
    const auto strata = stratify_by_size(many);
    const auto means = class_means(many);
    for (const auto& [c, st] : strata) {
      const double n = static_cast<double>(st.small_count + st.large_count);
      const double recombined = (st.small_mean.value_or(0) * st.small_count + st.large_mean.value_or(0) * st.large_count) / n;
      CHECK(recombined == doctest::Approx(means.at(c)).epsilon(1e-12));
    }
  }
}

TEST_CASE("eval config json") {
  TempDir dir;
  {
    std::ofstream(dir / "eval.json") << R"({"engine": "toy:3", "index_manifest": "db/manifest.json",
      "test_manifest": "/abs/test.json", "k": 4, "strategy": "random:9", "classes": [1, 3], "seed": 5,
      "preprocess": {"embed_resolution": 56, "seg_resolution": 128, "intensity": "minmax"}})";
  }
  const auto c = load_eval_config(dir / "eval.json");
  CHECK(c.engine == "toy:3");
  CHECK(c.index_manifest == dir.path() / "db/manifest.json");
  CHECK(c.test_manifest == "/abs/test.json");
  CHECK(c.k == 4);
  CHECK(c.strategy == RetrievalStrategy{RetrievalStrategy::Kind::Random, 9});
  CHECK(c.classes == std::vector<int>{1, 3});
  CHECK(c.preprocess.seg_resolution == 128);
  CHECK(eval_config_from_json(eval_config_to_json(c)) == c);

  CHECK(code_of([] { eval_config_from_json({{"kk", 3}}); }) == ErrorCode::SchemaViolation);
  CHECK(code_of([] { eval_config_from_json({{"k", 0}}); }) == ErrorCode::InvalidK);
  CHECK(code_of([] { eval_config_from_json({{"protocol", "one-shot"}}); }) == ErrorCode::SchemaViolation);
  CHECK(code_of([&] { load_eval_config(dir / "missing.json"); }) == ErrorCode::MissingFile);
}

TEST_CASE("run_protocol") {
  const auto db = make_synthetic_samples({.count = 12, .subjects = 3, .seed = 1});
  EvalConfig config;
  config.engine = "transfer";
  config.k = 3;
  config.preprocess = small_spec();

  SUBCASE("transfer engine on database duplicates scores 1.0 everywhere") {
    // Test items duplicate database slices under a fresh subject id.
    std::vector<SampleRecord> test;
    for (const auto& r : db) {
      auto copy = r;
      copy.id = "dup_" + r.id;
      copy.image.subject_id = "held_out";
      test.push_back(copy);
    }
    const auto env = prepare_protocol(config, db, test, cardiac_class_map());
    const auto report = run_protocol(config, env);
    CHECK(report.records.size() == 36);
    for (const auto& [c, m] : report.class_means) CHECK(m == 1.0);
    for (const auto& r : report.records) CHECK(r.dice == 1.0);
  }
  SUBCASE("subject leakage") {
    std::vector<SampleRecord> test = {db[0]};
    test[0].id = "other";
    CHECK(code_of([&] { prepare_protocol(config, db, test, cardiac_class_map()); }) == ErrorCode::SubjectLeakage);
  }
  SUBCASE("determinism and ablation") {
    const auto test = make_synthetic_samples({.count = 4, .subjects = 1, .seed = 50});
    config.engine = "toy:2";
    config.strategy = RetrievalStrategy::parse("random:3");
    config.classes = {3};
    const auto env = prepare_protocol(config, db, test, cardiac_class_map());
    const auto a = run_protocol(config, env);
    const auto b = run_protocol(config, env);
    CHECK(a.same_results(b));
    CHECK(a.records.size() == 4);

    // Per-query random seeds: not every query gets the same exemplars.
    const SegmentationContext ctx{*env.engine, *env.backbone, *env.index, *env.store, config.preprocess, env.class_map};
    std::set<std::vector<std::string>> picks;
    for (std::size_t i = 0; i < test.size(); ++i) {
      SegmentRequest req{3, {3}, {RetrievalStrategy::Kind::Random, derive_seed(derive_seed(0, 3), i)}};
      picks.insert(segment_image(ctx, test[i].image, req).exemplar_ids.at(3));
    }
    CHECK(picks.size() > 1);

    const auto single = run_ablation(config, {"random:3"}, {3}, env);
    REQUIRE(single.size() == 1);
    CHECK(single[0].report.same_results(a));

    const auto grid = run_ablation(config, {"random", "embedding"}, {2, 4}, env);
    CHECK(grid.size() == 4);
    CHECK(grid[0].report.config.strategy.kind == RetrievalStrategy::Kind::Random);
    CHECK(grid[0].report.config.strategy.seed != grid[1].report.config.strategy.seed);
    CHECK(grid[2].report.config.k == 2);
    CHECK(ablation_to_markdown(grid).find("| embedding | 4 |") != std::string::npos);
  }
}

TEST_CASE("run_protocol from manifests and the one-shot preset") {
  TempDir dir;
  const auto db = make_synthetic_samples({.count = 6, .subjects = 2, .seed = 1});
  const auto test = make_synthetic_samples({.count = 4, .subjects = 1, .seed = 2});
  write_dataset(db, dir / "db", cardiac_class_map());
  write_dataset(test, dir / "test", cardiac_class_map());
  {
    std::ofstream(dir / "eval.json") << R"({"engine": "transfer", "index_manifest": "db/manifest.json",
      "test_manifest": "test/manifest.json", "k": 2,
      "preprocess": {"embed_resolution": 56, "seg_resolution": 128, "intensity": "minmax"}})";
  }
  const auto report = run_protocol(load_eval_config(dir / "eval.json"));
  CHECK(report.records.size() == 12);
  CHECK(report.class_means.size() == 3);

  const nlohmann::json episodes = {
      {"episodes",
       {{{"name", "fold0"}, {"support", {db[0].id}}, {"queries", {test[0].id, test[1].id}}, {"classes", {3}}},
        {{"name", "fold1"}, {"support", {db[3].id}}, {"queries", {test[2].id}}}}}};
  { std::ofstream(dir / "episodes.json") << episodes.dump(); }
  auto config = load_eval_config(dir / "eval.json");
  config.protocol = ProtocolKind::OneShot;
  config.episodes = dir / "episodes.json";
  config.k = 1;
  const auto one_shot = run_protocol(config);
  CHECK(one_shot.records.size() == 2 + 3);
  CHECK(one_shot.records[0].sample_id == "fold0/" + test[0].id);
  CHECK(one_shot.records[0].class_label == 3);
  // With a single support slice the transfer engine copies that slice's mask.
  CHECK(one_shot.records[0].dice == dice(db[0].mask.binary(3), test[0].mask.binary(3)));
}

TEST_CASE("reports") {
  TempDir dir;
  EvalReport r;
  r.config.engine = "toy:1";
  r.config.k = 8;
  r.class_map = cardiac_class_map();
  r.records = {{"a", 1, 0.1 + 0.2, 150}, {"a", 2, 2.0 / 3.0, 900}, {"b", 1, 1.0, 300}, {"b", 2, 0.0, 400}};
  r.class_means = class_means(r.records);
  r.strata = stratify_by_size(r.records);
  r.pooled_dice = {{1, 0.75}, {2, 0.5}};
  r.timing["total"] = {12.5, std::nullopt};
  r.timing["memory_encode"] = {3.25, 0.125};
  r.warnings = {"k=8 exceeds database size"};

  write_report(r, dir / "r.json", ReportFormat::Json);
  CHECK(read_report_json(dir / "r.json") == r);

  const auto csv = report_to_csv(r);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 4);
  CHECK(csv.rfind("sample_id,class_label,class_name,dice,gt_pixels\n", 0) == 0);

  const auto md = report_to_markdown(r);
  CHECK(md.find("- engine: toy:1") != std::string::npos);
  CHECK(md.find("| Method | RV | Myo |") != std::string::npos);
  CHECK(md.find("n/a") != std::string::npos);  // Myo has no small stratum
  write_report(r, dir / "out/r.md", ReportFormat::Markdown);
  CHECK(std::filesystem::exists(dir / "out/r.md"));
  CHECK(parse_report_format("csv") == ReportFormat::Csv);
  CHECK(code_of([] { parse_report_format("xml"); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("benchmarks") {
  const auto db = make_synthetic_samples({.count = 8, .seed = 1});
  const auto query = make_synthetic_samples({.count = 1, .seed = 9})[0];
  EvalConfig config;
  config.preprocess = small_spec();
  const auto env = prepare_protocol(config, db, {}, cardiac_class_map());
  const auto one = benchmark_pipeline(env, query.image, {.k = 2, .classes = {3}}, 1, 0);
  CHECK_FALSE(one.stages.at("total").stddev_ms.has_value());
  const auto many = benchmark_pipeline(env, query.image, {.k = 2, .classes = {3}}, 3, 1);
  CHECK(many.stages.at("total").stddev_ms.has_value());
  CHECK(many.warmup == 1);
  CHECK(benchmark_retrieval(500, 16, 4, 3).mean_ms >= 0.0);
}
