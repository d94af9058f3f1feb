#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include <httplib.h>

#include "ramseg/evaluation.hpp"
#include "ramseg/log.hpp"
#include "ramseg/raster_io.hpp"
#include "ramseg/rle.hpp"
#include "ramseg/service.hpp"
#include "ramseg/synthetic.hpp"
#include "test_support.hpp"

using namespace ramseg;
using namespace ramseg::testing;
using nlohmann::json;

namespace {

enum class Outcome { Pass, Fail, Skipped };

struct CheckResult {
  Outcome outcome = Outcome::Pass;
  std::string detail;
};

struct CheckFailed : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void expect(bool condition, const std::string& what) {
  if (!condition) throw CheckFailed(what);
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  throw CheckFailed("expected an error");
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os.precision(digits);
  os << std::fixed << v;
  return os.str();
}

PreprocessSpec small_spec() {
  PreprocessSpec spec;
  spec.embed_resolution = 56;
  spec.seg_resolution = 128;
  return spec;
}

CheckResult retrieval_oracle() {
  const auto start = std::chrono::steady_clock::now();
  std::mt19937_64 rng(2024);
  const int dims[] = {8, 384};
  const int ks[] = {1, 5, 50};
  std::size_t total_hits = 0;
  for (int instance = 0; instance < 200; ++instance) {
    const int dim = dims[instance % 2];
    const int k = ks[(instance / 2) % 3];
    const std::size_t n = 1 + rng() % 5000;
    std::vector<std::vector<float>> rows;
    std::vector<std::string> ids;
    FlatIndex index(dim);
    for (std::size_t i = 0; i < n; ++i) {
      // Every fifth row repeats an earlier one, so ties are common.
      const auto e = (i > 0 && i % 5 == 0) ? Embedding{rows[rng() % i], {}} : random_unit(rng, dim);
      rows.push_back(e.vector);
      ids.push_back("v" + std::to_string(i));
      index.add(e, ids.back());
    }
    for (int q = 0; q < 3; ++q) {
      const auto query = q == 0 ? Embedding{rows[rng() % n], {}} : random_unit(rng, dim);
      const auto got = index.query(query, k);
      const auto want = linear_scan(rows, ids, query.vector, k);
      expect(got == want, "instance " + std::to_string(instance) + " differs from the linear scan");
      total_hits += got.size();
    }
  }
  const double elapsed = seconds_since(start);
  expect(elapsed < 60.0, "took " + fmt(elapsed, 1) + " s");
  return {Outcome::Pass, "200 instances, " + std::to_string(total_hits) + " hits compared, " + fmt(elapsed, 1) + " s"};
}

CheckResult scale_invariance() {
  std::mt19937_64 rng(77);
  for (int instance = 0; instance < 50; ++instance) {
    const int dim = instance % 2 ? 384 : 8;
    const int n = 20 + static_cast<int>(rng() % 300);
    std::vector<std::vector<float>> raw;
    for (int i = 0; i < n; ++i) raw.push_back(random_raw(rng, dim));
    const auto query_raw = random_raw(rng, dim);

    std::vector<std::vector<std::string>> rankings;
    for (const double c : {1e-3, 1.0, 1e3}) {
      auto scaled = [c](std::vector<float> v) {
        for (auto& x : v) x = static_cast<float>(x * c);
        return v;
      };
      FlatIndex index(dim);
      for (int i = 0; i < n; ++i) index.add(normalize_embedding(scaled(raw[i])), "r" + std::to_string(i));
      std::vector<std::string> order;
      for (const auto& hit : index.query(normalize_embedding(scaled(query_raw)), n)) order.push_back(hit.id);
      rankings.push_back(order);
    }
    expect(rankings[0] == rankings[1] && rankings[1] == rankings[2],
           "ranking changed with scale in instance " + std::to_string(instance));
  }
  return {Outcome::Pass, "50 instances, c in {1e-3, 1, 1e3}"};
}

CheckResult persistence() {
  std::mt19937_64 rng(5);
  FlatIndex index(384);
  for (int i = 0; i < 300; ++i) index.add(random_unit(rng, 384), "s" + std::to_string(i));
  const TempDir dir("ramseg_accept");
  index.save(dir / "idx.bin");
  const auto loaded = FlatIndex::load(dir / "idx.bin");
  expect(loaded.rows() == index.rows(), "rows differ after reload");
  expect(loaded.ids() == index.ids(), "ids differ after reload");
  const auto bytes = index.serialize();
  expect(loaded.serialize() == bytes, "re-serialized bytes differ");

  for (int m = 0; m < 100; ++m) {
    auto mutated = bytes;
    const std::size_t pos = rng() % mutated.size();
    mutated[pos] ^= static_cast<std::uint8_t>(1 + rng() % 255);
    const auto code = code_of([&] { (void)FlatIndex::deserialize(mutated); });
    expect(code == ErrorCode::CorruptFile, "mutation at byte " + std::to_string(pos) + " gave " +
                                               std::string(error_code_name(code)));
  }
  return {Outcome::Pass, "round trip bit-identical; 100/100 mutations rejected as CORRUPT_FILE"};
}

CheckResult dice_suite() {
  BinaryMask a(20, 20, 0), b(20, 20, 0);
  for (int i = 0; i < 50; ++i) a.values()[i] = 1;
  for (int i = 0; i < 150; ++i) b.values()[i] = 1;
  expect(dice(a, a) == 1.0, "identical masks");
  expect(dice(a, b) == 0.5, "hand case 2*50/200");
  BinaryMask c(20, 20, 0);
  for (int i = 200; i < 260; ++i) c.values()[i] = 1;
  expect(dice(a, c) == 0.0, "disjoint masks");

  std::mt19937_64 rng(31);
  std::vector<DiceRecord> records;
  for (int t = 0; t < 1000; ++t) {
    const int h = 1 + static_cast<int>(rng() % 24), w = 1 + static_cast<int>(rng() % 24);
    const double pa = (rng() % 100) / 100.0, pb = (rng() % 100) / 100.0;
    BinaryMask x(h, w), y(h, w);
    std::set<int> sx, sy;
    for (int i = 0; i < h * w; ++i) {
      x.values()[i] = (rng() % 1000) < pa * 1000;
      y.values()[i] = (rng() % 1000) < pb * 1000;
      if (x.values()[i]) sx.insert(i);
      if (y.values()[i]) sy.insert(i);
    }
    std::vector<int> common;
    std::set_intersection(sx.begin(), sx.end(), sy.begin(), sy.end(), std::back_inserter(common));
    const double oracle = sx.empty() && sy.empty() ? 1.0 : 2.0 * common.size() / (sx.size() + sy.size());
    const double d = dice(x, y);
    expect(d == dice(y, x), "asymmetric on pair " + std::to_string(t));
    expect(std::abs(d - oracle) < 1e-12, "differs from set oracle on pair " + std::to_string(t));
    records.push_back({"p" + std::to_string(t), 1 + t % 3, d, static_cast<std::int64_t>(sy.size())});
  }
  const auto means = class_means(records);
  for (const auto& [label, s] : stratify_by_size(records, 100)) {
    const double weighted = (s.small_mean.value_or(0.0) * s.small_count + s.large_mean.value_or(0.0) * s.large_count) /
                            static_cast<double>(s.small_count + s.large_count);
    expect(std::abs(weighted - means.at(label)) < 1e-12, "strata do not recombine for class " + std::to_string(label));
  }
  return {Outcome::Pass, "unit cases plus 1000 random pairs"};
}

CheckResult transfer_end_to_end() {
  const auto start = std::chrono::steady_clock::now();
  const auto db = make_synthetic_samples({.count = 30});
  std::vector<SampleRecord> test;
  for (const auto& r : db) {
    auto copy = r;
    copy.id = "dup_" + r.id;
    copy.image.subject_id = "held_out";
    test.push_back(copy);
  }
  EvalConfig config;
  config.engine = "transfer";
  config.k = 16;
  const auto report = run_protocol(config, prepare_protocol(config, db, test, cardiac_class_map()));
  std::string means;
  for (const auto& [label, m] : report.class_means) {
    expect(m == 1.0, report.class_map.at(label) + " mean Dice " + fmt(m, 6));
    means += report.class_map.at(label) + "=" + fmt(m) + " ";
  }
  const double elapsed = seconds_since(start);
  expect(elapsed < 30.0, "took " + fmt(elapsed, 1) + " s");
  return {Outcome::Pass, means + "over 30 duplicated shapes, " + fmt(elapsed, 1) + " s"};
}

CheckResult toy_structure() {
  const auto start = std::chrono::steady_clock::now();
  const auto spec = small_spec();
  const auto engine = make_toy_engine(17, spec);
  const auto twin = make_toy_engine(17, spec);
  const auto samples = make_synthetic_samples({.count = 6});
  const auto query = engine->encode_image_features(engine->prepare_input(samples[0].image));
  expect(query.grid == twin->encode_image_features(twin->prepare_input(samples[0].image)).grid,
         "same seed, different features");

  std::vector<MemoryEntry> entries;
  for (int i = 1; i < 6; ++i) {
    const auto f = engine->encode_image_features(engine->prepare_input(samples[i].image));
    entries.push_back(engine->encode_memory(f, samples[i].mask.binary(3), samples[i].id, i, 3));
  }
  auto bank_of = [](const std::vector<MemoryEntry>& es) {
    MemoryBank bank(static_cast<int>(es.size()), 3);
    for (const auto& e : es) bank.add(e);
    return bank;
  };
  const auto attended = engine->memory_attention(query, bank_of(entries));
  expect(attended.grid.same_shape(query.grid), "attention changed the feature shape");
  expect(twin->memory_attention(query, bank_of(entries)).grid == attended.grid, "attention not deterministic");

  const auto decoded = engine->decode_mask(attended, 64, 64);
  expect(decoded.mask.same_shape(64, 64), "decoded mask is not at the requested size");

  std::mt19937_64 rng(4);
  for (int t = 0; t < 10; ++t) {
    auto shuffled = entries;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    expect(engine->memory_attention(query, bank_of(shuffled)).grid == attended.grid, "bank order changed the output");
  }

  auto changed = entries;
  const auto f = engine->encode_image_features(engine->prepare_input(samples[1].image));
  changed[0] = engine->encode_memory(f, samples[1].mask.binary(1), samples[1].id, 1, 3);
  const auto other = engine->decode_mask(engine->memory_attention(query, bank_of(changed)), 64, 64);
  double linf = 0.0;
  for (std::size_t i = 0; i < decoded.logits.size(); ++i)
    linf = std::max(linf, std::abs(static_cast<double>(decoded.logits.values()[i]) - other.logits.values()[i]));
  expect(linf > 0.0, "changing one memory mask left the logits unchanged");

  expect(code_of([&] { engine->memory_attention(query, MemoryBank(4, 3)); }) == ErrorCode::EmptyMemoryBank,
         "empty bank accepted");
  const double elapsed = seconds_since(start);
  expect(elapsed < 60.0, "took " + fmt(elapsed, 1) + " s");
  return {Outcome::Pass, "logit L-inf change " + fmt(linf, 6) + ", " + fmt(elapsed, 1) + " s"};
}

CheckResult feedback_loop() {
  const TempDir dir("ramseg_accept_loop");
  const auto db = make_synthetic_samples({.count = 50});
  write_dataset(db, dir / "samples", cardiac_class_map());
  ServiceConfig config;
  config.samples_dir = dir / "samples";
  config.index_path = dir / "idx.bin";
  config.preprocess = small_spec();
  config.port = 0;
  Service service(config);
  httplib::Client client("127.0.0.1", service.start());
  client.set_read_timeout(60, 0);
  auto post = [&](const std::string& path, const json& body) {
    auto res = client.Post(path, body.dump(), "application/json");
    expect(static_cast<bool>(res), "no response from " + path);
    expect(res->status == 200, path + " answered " + std::to_string(res->status) + ": " + res->body);
    return json::parse(res->body);
  };

  auto built = post("/api/index/build", {{"manifest_path", (dir / "samples/manifest.json").string()}});
  expect(built["count"] == 50 && built["dim"] == 384, "build returned " + built.dump());

  const auto query = make_synthetic_samples({.count = 1, .seed = 404, .subject_prefix = "new"})[0];
  const auto image_b64 = base64_encode(encode_image(query.image.pixels));
  const auto predicted = post("/api/segment", {{"image", image_b64}, {"k", 4}});

  // The annotator's correction: the predicted LV grown by one pixel to the right.
  const auto lv = rle_decode(rle_from_json(predicted["masks"]["LV"]));
  Grid<std::int32_t> corrected(query.image.height(), query.image.width());
  for (int y = 0; y < lv.height(); ++y)
    for (int x = 0; x < lv.width(); ++x)
      if (lv.at(y, x) || (x > 0 && lv.at(y, x - 1))) corrected.at(y, x) = 3;

  const auto version_before = service.index_version();
  const auto accepted = post("/api/annotations/accept", {{"image", image_b64},
                                                         {"mask", base64_encode(encode_labels_png(corrected))},
                                                         {"proposed_id", "corrected_001"}});
  expect(accepted["index_version"] == version_before + 1, "index version did not advance by one");

  const auto hits = post("/api/retrieve", {{"image", image_b64}, {"k", 3}})["hits"];
  expect(hits[0]["id"] == "corrected_001" && hits[0]["rank"] == 1 && hits[0]["distance"] == 0.0,
         "accepted sample is not rank 1 at distance 0: " + hits[0].dump());
  const auto again = post("/api/segment", {{"image", image_b64}, {"k", 1}});
  expect(rle_decode(rle_from_json(again["masks"]["LV"])) == LabelMask{corrected, {}}.binary(3),
         "k=1 segmentation differs from the corrected mask");
  service.stop();

  FlatIndex replayed(384);
  SampleStore store(cardiac_class_map());
  const auto added = replay_journal(dir / "samples/accepted", *make_test_backbone(0), small_spec(), replayed, store);
  expect(added == 1 && replayed.ids() == std::vector<std::string>{"corrected_001"} && replayed.version() == 1,
         "journal replay gave " + std::to_string(added) + " entries");
  return {Outcome::Pass, "accepted id rank 1 at distance 0; replay rebuilt version " +
                             std::to_string(replayed.version())};
}

CheckResult benchmark_monotone() {
  EvalConfig config;
  config.engine = "toy:0";
  config.preprocess.embed_resolution = 112;
  config.preprocess.seg_resolution = 256;
  auto db = make_synthetic_samples({.count = 50});
  auto query = make_synthetic_samples({.count = 1, .seed = 99, .subject_prefix = "bench"});
  const auto env = prepare_protocol(config, std::move(db), std::move(query), cardiac_class_map());
  std::vector<double> totals;
  std::string detail;
  for (const int k : {1, 4, 16}) {
    SegmentRequest request;
    request.k = k;
    const auto result = benchmark_pipeline(env, env.test[0].image, request, 5, 2);
    totals.push_back(result.stages.at("total").mean_ms);
    detail += "k=" + std::to_string(k) + ": " + fmt(totals.back(), 1) + " ms; ";
  }
  expect(totals[0] <= totals[1] && totals[1] <= totals[2], "totals not monotone: " + detail);
  const auto retrieval = benchmark_retrieval(10000, kReferenceEmbeddingDim, 16, 20);
  detail += "retrieval N=10000: " + fmt(retrieval.mean_ms, 2) + " ms (recorded)";
  return {Outcome::Pass, detail};
}

// Reference numbers from the ACDC experiments.
const std::map<std::string, double> kTableOne = {{"RV", 0.6729}, {"Myo", 0.7757}, {"LV", 0.8472}};
constexpr double kReproductionTolerance = 0.05;

std::map<std::string, double> named_means(const EvalReport& report) {
  std::map<std::string, double> out;
  for (const auto& [label, m] : report.class_means) out[report.class_map.at(label)] = m;
  return out;
}

// Pretrained engine plus an ACDC evaluation config, or the reason they are unavailable.
std::optional<std::string> missing_assets(EvalConfig& config) {
  const char* acdc = std::getenv("RAMSEG_ACDC_EVAL");
  if (!acdc || !*acdc) return "RAMSEG_ACDC_EVAL (ACDC evaluation config) not set";
  if (!std::filesystem::exists(acdc)) return std::string("ACDC evaluation config not found: ") + acdc;
  config = load_eval_config(acdc);
  config.engine = "pretrained";
  config.backbone = "dinov2-vits14-reg";
  config.k = 16;
  config.strategy = {};
  try {
    make_engine(config.engine, {.preprocess = config.preprocess, .checkpoint = config.engine_checkpoint});
  } catch (const Error& e) {
    return std::string(error_code_name(e.code())) + ": " + e.what();
  }
  return std::nullopt;
}

struct GatedContext {
  std::optional<std::string> missing;
  EvalConfig config;
  std::optional<ProtocolEnvironment> env;
  std::optional<EvalReport> report;

  void prepare() {
    if (env || missing) return;
    missing = missing_assets(config);
    if (missing) return;
    env = prepare_protocol(config);
    report = run_protocol(config, *env);
  }
};

CheckResult gated(GatedContext& ctx, const std::function<CheckResult(GatedContext&)>& check) {
  ctx.prepare();
  if (ctx.missing) return {Outcome::Skipped, *ctx.missing};
  return check(ctx);
}

CheckResult table_one(GatedContext& ctx) {
  std::string detail;
  for (const auto& [name, m] : named_means(*ctx.report)) {
    detail += name + "=" + fmt(m) + " ";
    expect(std::abs(m - kTableOne.at(name)) <= kReproductionTolerance,
           name + " " + fmt(m) + " vs " + fmt(kTableOne.at(name)));
  }
  return {Outcome::Pass, detail};
}

CheckResult ablation(GatedContext& ctx) {
  const auto cells = run_ablation(ctx.config, {"random", "embedding"}, {2, 8, 16}, *ctx.env);
  auto at = [&](const std::string& strategy, int k) {
    for (const auto& c : cells)
      if (c.strategy == strategy && c.k == k) return named_means(c.report);
    throw CheckFailed("missing ablation cell");
  };
  int close_at_16 = 0;
  for (const auto& [name, _] : kTableOne) {
    expect(at("embedding", 8).at(name) > at("random", 8).at(name), name + ": embedding does not beat random at k=8");
    expect(at("embedding", 16).at(name) > at("embedding", 2).at(name), name + ": Dice(16) <= Dice(2)");
    close_at_16 += std::abs(at("embedding", 16).at(name) - at("random", 16).at(name)) < 0.02;
  }
  expect(close_at_16 >= 2, "random/embedding gap at k=16 is >= 0.02 on " + std::to_string(3 - close_at_16) +
                               " classes");
  return {Outcome::Pass, "k=8 embedding > random on all classes; k=16 gap < 0.02 on " +
                             std::to_string(close_at_16) + " classes"};
}

CheckResult stratification(GatedContext& ctx) {
  std::string detail;
  for (const auto& [label, s] : ctx.report->strata) {
    const auto& name = ctx.report->class_map.at(label);
    expect(s.small_mean && s.large_mean, name + ": empty size stratum");
    expect(*s.large_mean - *s.small_mean >= 0.3, name + ": small " + fmt(*s.small_mean) + " large " +
                                                     fmt(*s.large_mean));
    detail += name + " " + fmt(*s.small_mean) + "/" + fmt(*s.large_mean) + " ";
  }
  return {Outcome::Pass, detail};
}

}  // namespace

int main() {
  set_log_sink([](LogLevel level, const std::string& message) {
    if (level == LogLevel::Warning && std::getenv("RAMSEG_ACCEPTANCE_VERBOSE")) std::cerr << message << "\n";
  });

  GatedContext gated_ctx;
  const std::vector<std::pair<std::string, std::function<CheckResult()>>> checks = {
      {"retrieval-oracle-equivalence", retrieval_oracle},
      {"scale-normalize-ranking-invariance", scale_invariance},
      {"index-persistence-and-corruption", persistence},
      {"dice-unit-and-properties", dice_suite},
      {"transfer-engine-end-to-end", transfer_end_to_end},
      {"toy-engine-structure", toy_structure},
      {"feedback-loop", feedback_loop},
      {"acdc-table-reproduction", [&] { return gated(gated_ctx, table_one); }},
      {"acdc-ablation-directionality", [&] { return gated(gated_ctx, ablation); }},
      {"acdc-size-stratification", [&] { return gated(gated_ctx, stratification); }},
      {"benchmark-monotonicity", benchmark_monotone},
  };

  int failures = 0;
  for (const auto& [name, run] : checks) {
    CheckResult result;
    try {
      result = run();
    } catch (const CheckFailed& e) {
      result = {Outcome::Fail, e.what()};
    } catch (const std::exception& e) {
      result = {Outcome::Fail, std::string("unexpected error: ") + e.what()};
    }
    const char* tag = result.outcome == Outcome::Pass ? "PASS" : result.outcome == Outcome::Fail ? "FAIL" : "SKIPPED-ASSETS";
    failures += result.outcome == Outcome::Fail;
    std::cout << tag << " " << name << ": " << result.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
