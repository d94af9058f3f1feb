#include "ramseg/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "ramseg/log.hpp"

namespace ramseg {

using nlohmann::json;

double dice(const BinaryMask& pred, const BinaryMask& gt) {
  if (!pred.same_shape(gt))
    fail(ErrorCode::ShapeMismatch, "dice: mask shapes differ (" + std::to_string(pred.height()) + "x" +
                                       std::to_string(pred.width()) + " vs " + std::to_string(gt.height()) + "x" +
                                       std::to_string(gt.width()) + ")");
  std::int64_t a = 0, b = 0, both = 0;
  auto pv = pred.values();
  auto gv = gt.values();
  for (std::size_t i = 0; i < pv.size(); ++i) {
    if (pv[i] > 1 || gv[i] > 1) fail(ErrorCode::NonBinaryMask, "dice needs binary masks");
    a += pv[i];
    b += gv[i];
    both += pv[i] & gv[i];
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

std::map<int, SizeStrata> stratify_by_size(std::span<const DiceRecord> records, int threshold_px) {
  std::map<int, std::pair<double, double>> sums;
  std::map<int, SizeStrata> out;
  for (const auto& r : records) {
    auto& s = out[r.class_label];
    auto& [small_sum, large_sum] = sums[r.class_label];
    if (r.gt_pixels < threshold_px) {
      small_sum += r.dice;
      ++s.small_count;
    } else {
      large_sum += r.dice;
      ++s.large_count;
    }
  }
  for (auto& [label, s] : out) {
    if (s.small_count) s.small_mean = sums[label].first / static_cast<double>(s.small_count);
    if (s.large_count) s.large_mean = sums[label].second / static_cast<double>(s.large_count);
  }
  return out;
}

std::map<int, double> class_means(std::span<const DiceRecord> records) {
  std::map<int, std::pair<double, std::size_t>> acc;
  for (const auto& r : records) {
    acc[r.class_label].first += r.dice;
    ++acc[r.class_label].second;
  }
  std::map<int, double> out;
  for (const auto& [label, a] : acc) out[label] = a.first / static_cast<double>(a.second);
  return out;
}

// ---------------------------------------------------------------- config

namespace {

const std::set<std::string> kConfigKeys = {"engine",   "engine_checkpoint", "backbone", "backbone_checkpoint",
                                           "index_manifest", "test_manifest", "k", "strategy", "classes",
                                           "seed",     "preprocess",        "size_threshold", "protocol",
                                           "episodes"};

std::filesystem::path resolve_path(const std::string& text, const std::filesystem::path& base) {
  if (text.empty()) return {};
  std::filesystem::path p(text);
  return p.is_relative() && !base.empty() ? base / p : p;
}

std::string protocol_name(ProtocolKind p) { return p == ProtocolKind::OneShot ? "one-shot" : "standard"; }

template <class T>
T get_field(const json& doc, const char* key, T fallback) {
  if (!doc.contains(key)) return fallback;
  try {
    return doc.at(key).get<T>();
  } catch (const json::exception& e) {
    fail(ErrorCode::SchemaViolation, std::string("eval config field '") + key + "': " + e.what());
  }
}

}  // namespace

json eval_config_to_json(const EvalConfig& c) {
  return json{{"engine", c.engine},
              {"engine_checkpoint", c.engine_checkpoint},
              {"backbone", c.backbone},
              {"backbone_checkpoint", c.backbone_checkpoint},
              {"index_manifest", c.index_manifest.string()},
              {"test_manifest", c.test_manifest.string()},
              {"k", c.k},
              {"strategy", c.strategy.to_string()},
              {"classes", c.classes},
              {"seed", c.seed},
              {"preprocess", preprocess_to_json(c.preprocess)},
              {"size_threshold", c.size_threshold},
              {"protocol", protocol_name(c.protocol)},
              {"episodes", c.episodes.string()}};
}

EvalConfig eval_config_from_json(const json& doc, const std::filesystem::path& base_dir) {
  if (!doc.is_object()) fail(ErrorCode::SchemaViolation, "eval config must be a JSON object");
  for (const auto& [key, _] : doc.items())
    if (!kConfigKeys.contains(key)) fail(ErrorCode::SchemaViolation, "unknown eval config field '" + key + "'");
  EvalConfig c;
  c.engine = get_field(doc, "engine", c.engine);
  c.engine_checkpoint = resolve_path(get_field<std::string>(doc, "engine_checkpoint", ""), base_dir).string();
  c.backbone = get_field(doc, "backbone", c.backbone);
  c.backbone_checkpoint = resolve_path(get_field<std::string>(doc, "backbone_checkpoint", ""), base_dir).string();
  c.index_manifest = resolve_path(get_field<std::string>(doc, "index_manifest", ""), base_dir);
  c.test_manifest = resolve_path(get_field<std::string>(doc, "test_manifest", ""), base_dir);
  c.k = get_field(doc, "k", c.k);
  if (c.k < 1) fail(ErrorCode::InvalidK, "eval config: k must be >= 1");
  c.strategy = RetrievalStrategy::parse(get_field<std::string>(doc, "strategy", "embedding"));
  c.classes = get_field(doc, "classes", c.classes);
  c.seed = get_field(doc, "seed", c.seed);
  if (doc.contains("preprocess")) c.preprocess = preprocess_from_json(doc.at("preprocess"));
  c.size_threshold = get_field(doc, "size_threshold", c.size_threshold);
  const auto protocol = get_field<std::string>(doc, "protocol", "standard");
  if (protocol == "standard")
    c.protocol = ProtocolKind::Standard;
  else if (protocol == "one-shot")
    c.protocol = ProtocolKind::OneShot;
  else
    fail(ErrorCode::SchemaViolation, "eval config: protocol must be standard or one-shot, got '" + protocol + "'");
  c.episodes = resolve_path(get_field<std::string>(doc, "episodes", ""), base_dir);
  if (c.protocol == ProtocolKind::OneShot && c.episodes.empty())
    fail(ErrorCode::SchemaViolation, "eval config: the one-shot protocol needs an episodes file");
  return c;
}

EvalConfig load_eval_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::MissingFile, "eval config not found: " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    fail(ErrorCode::SchemaViolation, "eval config " + path.string() + " is not valid JSON: " + e.what());
  }
  return eval_config_from_json(doc, path.parent_path());
}

// ---------------------------------------------------------------- protocol

bool EvalReport::same_results(const EvalReport& o) const {
  return config == o.config && class_map == o.class_map && records == o.records && class_means == o.class_means &&
         pooled_dice == o.pooled_dice && strata == o.strata && warnings == o.warnings;
}

void check_subject_disjoint(std::span<const SampleRecord> database, std::span<const SampleRecord> test) {
  std::set<std::string> db_subjects;
  for (const auto& r : database) db_subjects.insert(r.image.subject_id);
  std::set<std::string> leaked;
  for (const auto& r : test)
    if (db_subjects.contains(r.image.subject_id)) leaked.insert(r.image.subject_id);
  if (!leaked.empty()) {
    std::string list;
    for (const auto& s : leaked) list += (list.empty() ? "" : ", ") + s;
    fail(ErrorCode::SubjectLeakage, "subjects present in both the database and the test set: " + list);
  }
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  // splitmix64 finalizer over the combined state.
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

namespace {

std::shared_ptr<FlatIndex> index_records(const EmbeddingBackbone& backbone, const std::vector<SampleRecord>& records,
                                         const PreprocessSpec& spec) {
  auto index = std::make_shared<FlatIndex>(backbone.dim());
  for (const auto& r : records) index->add(embed(backbone, preprocess_for_embedding(r.image, spec)), r.id);
  return index;
}

std::vector<int> resolve_classes(const EvalConfig& config, const ClassMap& class_map) {
  std::vector<int> classes = config.classes;
  if (classes.empty())
    for (const auto& [label, _] : class_map) classes.push_back(label);
  for (int c : classes)
    if (!class_map.contains(c)) fail(ErrorCode::UnknownClass, "class " + std::to_string(c) + " is not in the class map");
  return classes;
}

StageStats stats_of(const std::vector<double>& xs) {
  StageStats s;
  if (xs.empty()) return s;
  s.mean_ms = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean_ms) * (x - s.mean_ms);
    s.stddev_ms = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return s;
}

struct TimingSamples {
  std::map<std::string, std::vector<double>> stages;

  void add(const StageTimings& t) {
    stages["embed_retrieve"].push_back(t.embed_retrieve_ms);
    stages["image_encode"].push_back(t.image_encode_ms);
    stages["memory_encode"].push_back(t.memory_encode_ms);
    stages["attention_decode"].push_back(t.attention_decode_ms);
    stages["total"].push_back(t.total_ms);
  }
  std::map<std::string, StageStats> summarize() const {
    std::map<std::string, StageStats> out;
    for (const auto& [name, xs] : stages) out[name] = stats_of(xs);
    return out;
  }
};

struct Episode {
  std::string name;
  std::vector<std::string> support;
  std::vector<std::string> queries;
  std::vector<int> classes;
};

std::vector<Episode> load_episodes(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::MissingFile, "episodes file not found: " + path.string());
  std::vector<Episode> out;
  try {
    const auto doc = json::parse(in);
    for (const auto& e : doc.at("episodes")) {
      Episode ep;
      ep.name = e.value("name", "episode" + std::to_string(out.size()));
      ep.support = e.at("support").get<std::vector<std::string>>();
      ep.queries = e.at("queries").get<std::vector<std::string>>();
      ep.classes = e.value("classes", std::vector<int>{});
      if (ep.support.empty()) fail(ErrorCode::SchemaViolation, "episode " + ep.name + " has no support slices");
      out.push_back(std::move(ep));
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::SchemaViolation, "episodes file " + path.string() + ": " + e.what());
  }
  return out;
}

struct Accumulator {
  std::vector<DiceRecord> records;
  std::map<int, std::pair<std::int64_t, std::int64_t>> pooled;  // 2|A∩B|, |A|+|B|
  TimingSamples timing;
  std::vector<std::string> warnings;

  void add(const std::string& sample_id, const SampleRecord& truth, const SegmentationResult& result) {
    for (const auto& [c, pred] : result.class_masks) {
      const auto gt = truth.mask.binary(c);
      const double d = dice(pred, gt);
      std::int64_t a = 0, b = 0, both = 0;
      for (std::size_t i = 0; i < gt.size(); ++i) {
        a += pred.values()[i];
        b += gt.values()[i];
        both += pred.values()[i] & gt.values()[i];
      }
      records.push_back({sample_id, c, d, b});
      pooled[c].first += 2 * both;
      pooled[c].second += a + b;
    }
    timing.add(result.timing);
    for (const auto& w : result.warnings)
      if (std::find(warnings.begin(), warnings.end(), w) == warnings.end()) warnings.push_back(w);
  }

  EvalReport finish(const EvalConfig& config, const ClassMap& class_map) && {
    EvalReport report;
    report.config = config;
    report.class_map = class_map;
    report.class_means = class_means(records);
    for (const auto& [c, p] : pooled) report.pooled_dice[c] = p.second ? static_cast<double>(p.first) / p.second : 1.0;
    report.strata = stratify_by_size(records, config.size_threshold);
    report.timing = timing.summarize();
    report.records = std::move(records);
    report.warnings = std::move(warnings);
    return report;
  }
};

SegmentRequest request_for(const EvalConfig& config, const std::vector<int>& classes, std::size_t query_index) {
  SegmentRequest req{config.k, classes, config.strategy};
  if (req.strategy.kind == RetrievalStrategy::Kind::Random)
    req.strategy.seed = derive_seed(derive_seed(config.seed, config.strategy.seed), query_index);
  return req;
}

}  // namespace

ProtocolEnvironment prepare_protocol(const EvalConfig& config, std::vector<SampleRecord> database,
                                     std::vector<SampleRecord> test, ClassMap class_map, EnginePtr engine,
                                     BackbonePtr backbone) {
  check_subject_disjoint(database, test);
  config.preprocess.validate();
  ProtocolEnvironment env;
  env.engine = engine ? std::move(engine)
                      : make_engine(config.engine, EngineOptions{config.preprocess, config.engine_checkpoint});
  env.backbone = backbone ? std::move(backbone)
                          : make_backbone(config.backbone, BackboneOptions{config.backbone_checkpoint});
  env.index = index_records(*env.backbone, database, config.preprocess);
  env.store = std::make_shared<SampleStore>(SampleStore::from_records(std::move(database), class_map));
  env.test = std::move(test);
  env.class_map = std::move(class_map);
  env.preprocess = config.preprocess;
  return env;
}

ProtocolEnvironment prepare_protocol(const EvalConfig& config) {
  if (config.index_manifest.empty()) fail(ErrorCode::SchemaViolation, "eval config needs index_manifest");
  if (config.test_manifest.empty()) fail(ErrorCode::SchemaViolation, "eval config needs test_manifest");
  const auto db_manifest = load_manifest(config.index_manifest);
  const auto test_manifest = load_manifest(config.test_manifest);
  auto class_map = db_manifest.class_map;
  for (const auto& [label, name] : test_manifest.class_map)
    if (class_map.contains(label) && class_map.at(label) != name)
      fail(ErrorCode::SchemaViolation, "class " + std::to_string(label) + " is named '" + class_map.at(label) +
                                           "' in the index manifest but '" + name + "' in the test manifest");
  return prepare_protocol(config, load_samples(db_manifest), load_samples(test_manifest), std::move(class_map));
}

EvalReport run_protocol(const EvalConfig& config, const ProtocolEnvironment& env) {
  const auto classes = resolve_classes(config, env.class_map);
  Accumulator acc;

  if (config.protocol == ProtocolKind::Standard) {
    const SegmentationContext ctx{*env.engine, *env.backbone, *env.index, *env.store, config.preprocess, env.class_map};
    for (std::size_t i = 0; i < env.test.size(); ++i) {
      const auto& q = env.test[i];
      acc.add(q.id, q, segment_image(ctx, q.image, request_for(config, classes, i)));
    }
    return std::move(acc).finish(config, env.class_map);
  }

  // One-shot: each episode's database holds exactly its support slices.
  std::map<std::string, const SampleRecord*> queries;
  for (const auto& r : env.test) queries[r.id] = &r;
  std::size_t query_index = 0;
  for (const auto& ep : load_episodes(config.episodes)) {
    std::vector<SampleRecord> support;
    for (const auto& id : ep.support) support.push_back(*env.store->get(id));
    const auto index = index_records(*env.backbone, support, config.preprocess);
    const auto store = SampleStore::from_records(std::move(support), env.class_map);
    const SegmentationContext ctx{*env.engine, *env.backbone, *index, store, config.preprocess, env.class_map};
    const auto ep_classes = ep.classes.empty() ? classes : ep.classes;
    for (const auto& qid : ep.queries) {
      auto it = queries.find(qid);
      if (it == queries.end()) fail(ErrorCode::MissingSample, "episode " + ep.name + ": query '" + qid + "' is not in the test set");
      auto req = request_for(config, ep_classes, query_index++);
      acc.add(ep.name + "/" + qid, *it->second, segment_image(ctx, it->second->image, req));
    }
  }
  return std::move(acc).finish(config, env.class_map);
}

EvalReport run_protocol(const EvalConfig& config) { return run_protocol(config, prepare_protocol(config)); }

std::vector<AblationCell> run_ablation(const EvalConfig& base, const std::vector<std::string>& strategies,
                                       const std::vector<int>& k_values, const ProtocolEnvironment& env) {
  if (strategies.empty() || k_values.empty()) fail(ErrorCode::InvalidArgument, "ablation grid is empty");
  std::vector<AblationCell> cells;
  for (const auto& name : strategies) {
    for (int k : k_values) {
      if (k < 1) fail(ErrorCode::InvalidK, "ablation k must be >= 1, got " + std::to_string(k));
      EvalConfig config = base;
      config.k = k;
      config.strategy = RetrievalStrategy::parse(name);
      if (name == "random") config.strategy.seed = derive_seed(base.seed, static_cast<std::uint64_t>(k));
      cells.push_back({name, k, run_protocol(config, env)});
    }
  }
  return cells;
}

std::vector<AblationCell> run_ablation(const EvalConfig& base, const std::vector<std::string>& strategies,
                                       const std::vector<int>& k_values) {
  return run_ablation(base, strategies, k_values, prepare_protocol(base));
}

// ---------------------------------------------------------------- timing

BenchmarkResult benchmark_pipeline(const ProtocolEnvironment& env, const ImageSlice& query, const SegmentRequest& request,
                                   int repetitions, int warmup) {
  if (repetitions < 1) fail(ErrorCode::InvalidArgument, "benchmark needs at least one repetition");
  if (warmup < 0) fail(ErrorCode::InvalidArgument, "warm-up count must be >= 0");
  const SegmentationContext ctx{*env.engine, *env.backbone, *env.index, *env.store, env.preprocess, env.class_map};
  for (int i = 0; i < warmup; ++i) segment_image(ctx, query, request);
  TimingSamples samples;
  for (int i = 0; i < repetitions; ++i) samples.add(segment_image(ctx, query, request).timing);
  return {request.k, repetitions, warmup, samples.summarize()};
}

StageStats benchmark_retrieval(std::size_t n, int dim, int k, int repetitions, std::uint64_t seed) {
  if (repetitions < 1) fail(ErrorCode::InvalidArgument, "benchmark needs at least one repetition");
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> g;
  auto unit = [&] {
    std::vector<float> v(static_cast<std::size_t>(dim));
    for (auto& x : v) x = g(rng);
    return normalize_embedding(std::move(v));
  };
  FlatIndex index(dim);
  for (std::size_t i = 0; i < n; ++i) index.add(unit(), "r" + std::to_string(i));
  std::vector<double> times;
  for (int r = 0; r < repetitions; ++r) {
    const auto q = unit();
    const auto t0 = std::chrono::steady_clock::now();
    const auto hits = index.query(q, k);
    times.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    if (hits.empty()) fail(ErrorCode::EmptyIndex, "benchmark index returned no hits");
  }
  return stats_of(times);
}

// ---------------------------------------------------------------- reports

ReportFormat parse_report_format(const std::string& name) {
  if (name == "json") return ReportFormat::Json;
  if (name == "csv") return ReportFormat::Csv;
  if (name == "markdown" || name == "md" || name == "markdown-table") return ReportFormat::Markdown;
  fail(ErrorCode::InvalidArgument, "unknown report format '" + name + "' (json, csv, markdown)");
}

namespace {

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }
std::optional<double> optional_from(const json& v) {
  if (v.is_null()) return std::nullopt;
  return v.get<double>();
}

template <class V>
json int_keyed(const std::map<int, V>& m, auto&& convert) {
  json out = json::object();
  for (const auto& [k, v] : m) out[std::to_string(k)] = convert(v);
  return out;
}

template <class V>
std::map<int, V> int_keyed_from(const json& j, auto&& convert) {
  std::map<int, V> out;
  for (const auto& [k, v] : j.items()) out[std::stoi(k)] = convert(v);
  return out;
}

json stats_json(const StageStats& s) { return {{"mean_ms", s.mean_ms}, {"stddev_ms", optional_json(s.stddev_ms)}}; }
StageStats stats_from(const json& j) { return {j.at("mean_ms").get<double>(), optional_from(j.at("stddev_ms"))}; }

std::string fixed4(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << v;
  return os.str();
}

std::string class_name(const ClassMap& m, int label) {
  auto it = m.find(label);
  return it == m.end() ? std::to_string(label) : it->second;
}

std::set<int> report_classes(const EvalReport& r) {
  std::set<int> out;
  for (const auto& [c, _] : r.class_means) out.insert(c);
  return out;
}

}  // namespace

json report_to_json(const EvalReport& r) {
  json records = json::array();
  for (const auto& d : r.records)
    records.push_back({{"sample_id", d.sample_id}, {"class_label", d.class_label}, {"dice", d.dice}, {"gt_pixels", d.gt_pixels}});
  json timing = json::object();
  for (const auto& [name, s] : r.timing) timing[name] = stats_json(s);
  return {{"config", eval_config_to_json(r.config)},
          {"class_map", int_keyed(r.class_map, [](const std::string& s) { return json(s); })},
          {"class_means", int_keyed(r.class_means, [](double v) { return json(v); })},
          {"pooled_dice", int_keyed(r.pooled_dice, [](double v) { return json(v); })},
          {"strata", int_keyed(r.strata,
                               [](const SizeStrata& s) {
                                 return json{{"small_mean", optional_json(s.small_mean)},
                                             {"large_mean", optional_json(s.large_mean)},
                                             {"small_count", s.small_count},
                                             {"large_count", s.large_count}};
                               })},
          {"timing", timing},
          {"warnings", r.warnings},
          {"records", records}};
}

EvalReport report_from_json(const json& doc) {
  try {
    EvalReport r;
    r.config = eval_config_from_json(doc.at("config"));
    r.class_map = int_keyed_from<std::string>(doc.at("class_map"), [](const json& v) { return v.get<std::string>(); });
    r.class_means = int_keyed_from<double>(doc.at("class_means"), [](const json& v) { return v.get<double>(); });
    r.pooled_dice = int_keyed_from<double>(doc.at("pooled_dice"), [](const json& v) { return v.get<double>(); });
    r.strata = int_keyed_from<SizeStrata>(doc.at("strata"), [](const json& v) {
      return SizeStrata{optional_from(v.at("small_mean")), optional_from(v.at("large_mean")),
                        v.at("small_count").get<std::size_t>(), v.at("large_count").get<std::size_t>()};
    });
    for (const auto& [name, s] : doc.at("timing").items()) r.timing[name] = stats_from(s);
    r.warnings = doc.at("warnings").get<std::vector<std::string>>();
    for (const auto& d : doc.at("records"))
      r.records.push_back({d.at("sample_id").get<std::string>(), d.at("class_label").get<int>(),
                           d.at("dice").get<double>(), d.at("gt_pixels").get<std::int64_t>()});
    return r;
  } catch (const json::exception& e) {
    fail(ErrorCode::SchemaViolation, std::string("malformed report: ") + e.what());
  }
}

std::string report_to_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "sample_id,class_label,class_name,dice,gt_pixels\n" << std::setprecision(17);
  for (const auto& d : r.records)
    os << d.sample_id << ',' << d.class_label << ',' << class_name(r.class_map, d.class_label) << ',' << d.dice << ','
       << d.gt_pixels << '\n';
  return os.str();
}

std::string report_to_markdown(const EvalReport& r) {
  const auto& c = r.config;
  std::set<std::string> samples;
  for (const auto& d : r.records) samples.insert(d.sample_id);
  std::ostringstream os;
  os << "## Evaluation\n\n"
     << "- engine: " << c.engine << "\n"
     << "- backbone: " << c.backbone << "\n"
     << "- k: " << c.k << "\n"
     << "- strategy: " << c.strategy.to_string() << "\n"
     << "- seed: " << c.seed << "\n"
     << "- protocol: " << protocol_name(c.protocol) << "\n"
     << "- test slices: " << samples.size() << "\n\n";

  const auto classes = report_classes(r);
  auto header = [&](const std::string& first) {
    os << "| " << first << " |";
    for (int cl : classes) os << ' ' << class_name(r.class_map, cl) << " |";
    os << "\n|---|";
    for (std::size_t i = 0; i < classes.size(); ++i) os << "---|";
    os << '\n';
  };
  header("Method");
  os << "| " << c.engine << " (k=" << c.k << ", " << c.strategy.to_string() << ") |";
  for (int cl : classes) os << ' ' << fixed4(r.class_means.at(cl)) << " |";
  os << "\n\n";

  header("Region size (threshold " + std::to_string(c.size_threshold) + " px)");
  for (const bool small : {true, false}) {
    os << "| " << (small ? "small" : "large") << " |";
    for (int cl : classes) {
      const auto& s = r.strata.at(cl);
      const auto& m = small ? s.small_mean : s.large_mean;
      os << ' ' << (m ? fixed4(*m) : "n/a") << " (n=" << (small ? s.small_count : s.large_count) << ") |";
    }
    os << '\n';
  }
  if (!r.timing.empty()) {
    os << "\n| Stage | mean ms |\n|---|---|\n";
    for (const auto& [name, s] : r.timing) os << "| " << name << " | " << fixed4(s.mean_ms) << " |\n";
  }
  return os.str();
}

void write_report(const EvalReport& report, const std::filesystem::path& path, ReportFormat format) {
  std::string text;
  switch (format) {
    case ReportFormat::Json: text = report_to_json(report).dump(2) + "\n"; break;
    case ReportFormat::Csv: text = report_to_csv(report); break;
    case ReportFormat::Markdown: text = report_to_markdown(report); break;
  }
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::IoError, "cannot write report to " + path.string());
  out << text;
  if (!out) fail(ErrorCode::IoError, "failed writing report to " + path.string());
}

EvalReport read_report_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::MissingFile, "report not found: " + path.string());
  try {
    return report_from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    fail(ErrorCode::SchemaViolation, "report " + path.string() + " is not valid JSON: " + e.what());
  }
}

std::string ablation_to_markdown(const std::vector<AblationCell>& cells) {
  if (cells.empty()) return {};
  const auto& first = cells.front().report;
  const auto classes = report_classes(first);
  std::ostringstream os;
  os << "| Strategy | k |";
  for (int cl : classes) os << ' ' << class_name(first.class_map, cl) << " |";
  os << "\n|---|---|";
  for (std::size_t i = 0; i < classes.size(); ++i) os << "---|";
  os << '\n';
  for (const auto& cell : cells) {
    os << "| " << cell.strategy << " | " << cell.k << " |";
    for (int cl : classes) {
      auto it = cell.report.class_means.find(cl);
      os << ' ' << (it == cell.report.class_means.end() ? "n/a" : fixed4(it->second)) << " |";
    }
    os << '\n';
  }
  return os.str();
}

json ablation_to_json(const std::vector<AblationCell>& cells) {
  json out = json::array();
  for (const auto& cell : cells)
    out.push_back({{"strategy", cell.strategy}, {"k", cell.k}, {"report", report_to_json(cell.report)}});
  return out;
}

}  // namespace ramseg
