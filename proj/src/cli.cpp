#include "ramseg/cli.hpp"

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "ramseg/error.hpp"
#include "ramseg/evaluation.hpp"
#include "ramseg/log.hpp"
#include "ramseg/raster_io.hpp"
#include "ramseg/service.hpp"
#include "ramseg/synthetic.hpp"

namespace ramseg {

namespace {

PreprocessSpec read_preprocess(const std::string& path) {
  if (path.empty()) return {};
  std::ifstream in(path);
  if (!in) fail(ErrorCode::MissingFile, "cannot open preprocess file " + path);
  PreprocessSpec spec = preprocess_from_json(nlohmann::json::parse(in));
  spec.validate();
  return spec;
}

void emit_text(const std::string& text, const std::string& out_path) {
  if (out_path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream out(out_path, std::ios::binary);
  if (!out || !(out << text)) fail(ErrorCode::IoError, "cannot write " + out_path);
}

std::string format_ms(const StageStats& s) {
  char buf[64];
  if (s.stddev_ms)
    std::snprintf(buf, sizeof buf, "%.3f ± %.3f", s.mean_ms, *s.stddev_ms);
  else
    std::snprintf(buf, sizeof buf, "%.3f", s.mean_ms);
  return buf;
}

struct SynthOptions {
  std::string out;
  int count = 50;
  int subjects = 3;
  int size = 64;
  std::uint64_t seed = 7;
  std::string prefix = "syn";
};

struct BuildOptions {
  std::string manifest;
  std::string out;
  std::string backbone = "test:0";
  std::string backbone_checkpoint;
  std::string preprocess;
};

struct SegmentOptions {
  std::string manifest;
  std::string image;
  std::string out;
  std::string engine = "transfer";
  std::string engine_checkpoint;
  std::string backbone = "test:0";
  std::string backbone_checkpoint;
  std::string preprocess;
  std::string strategy = "embedding";
  std::vector<std::string> classes;
  int k = 16;
};

struct EvalOptions {
  std::string config = "eval.json";
  std::string out;
  std::string format = "markdown";
};

struct AblateOptions {
  std::string config = "eval.json";
  std::vector<std::string> strategies{"random", "embedding"};
  std::vector<int> ks{2, 4, 8, 16, 32};
  std::string out;
  std::string format = "markdown";
};

struct BenchOptions {
  std::string config;
  std::string engine = "toy:0";
  std::string preprocess;
  std::vector<int> ks{1, 4, 16};
  int reps = 20;
  int warmup = kDefaultWarmup;
  std::size_t retrieval_n = 0;
  bool json = false;
};

struct ServeOptions {
  ServiceConfig config;
  std::string preprocess;
};

void run_synth(const SynthOptions& o) {
  SyntheticSpec spec;
  spec.count = o.count;
  spec.subjects = o.subjects;
  spec.height = spec.width = o.size;
  spec.seed = o.seed;
  spec.subject_prefix = o.prefix;
  const auto manifest = write_dataset(make_synthetic_samples(spec), o.out, cardiac_class_map());
  std::cout << "wrote " << manifest.entries.size() << " samples to " << o.out << "\n";
}

void run_build(const BuildOptions& o) {
  const auto backbone = make_backbone(o.backbone, {.checkpoint = o.backbone_checkpoint});
  const auto preprocess = read_preprocess(o.preprocess);
  const auto manifest = load_manifest(o.manifest);
  std::vector<IdentifiedEmbedding> entries;
  for (const auto& record : load_samples(manifest))
    entries.push_back({record.id, embed(*backbone, preprocess_for_embedding(record.image, preprocess))});
  const auto index = build_index(entries, backbone->dim());
  index.save(o.out);
  std::cout << nlohmann::json{{"count", index.size()}, {"dim", index.dim()}, {"version", index.version()}}.dump()
            << "\n";
}

void run_segment(const SegmentOptions& o) {
  EvalConfig config;
  config.engine = o.engine;
  config.engine_checkpoint = o.engine_checkpoint;
  config.backbone = o.backbone;
  config.backbone_checkpoint = o.backbone_checkpoint;
  config.preprocess = read_preprocess(o.preprocess);
  const auto manifest = load_manifest(o.manifest);
  const auto env = prepare_protocol(config, load_samples(manifest), {}, manifest.class_map);

  SegmentRequest request;
  request.k = o.k;
  request.strategy = RetrievalStrategy::parse(o.strategy);
  for (const auto& name : o.classes) {
    const auto it = std::find_if(env.class_map.begin(), env.class_map.end(),
                                 [&](const auto& entry) { return entry.second == name; });
    if (it == env.class_map.end()) fail(ErrorCode::UnknownClass, "unknown class " + name);
    request.classes.push_back(it->first);
  }

  const ImageSlice query{read_image(o.image), "query", 0, ""};
  const SegmentationContext ctx{*env.engine, *env.backbone, *env.index, *env.store, env.preprocess, env.class_map};
  const auto result = segment_image(ctx, query, request);
  write_labels(o.out, result.label_map());

  nlohmann::json summary;
  summary["k_used"] = result.k_used;
  summary["strategy"] = result.strategy.to_string();
  for (const auto& [label, ids] : result.exemplar_ids) summary["exemplar_ids"][env.class_map.at(label)] = ids;
  for (const auto& [label, score] : result.class_scores) summary["scores"][env.class_map.at(label)] = score;
  summary["warnings"] = result.warnings;
  std::cout << summary.dump(2) << "\n";
}

void run_eval(const EvalOptions& o) {
  const auto report = run_protocol(load_eval_config(o.config));
  const auto format = parse_report_format(o.format);
  if (o.out.empty()) {
    if (format == ReportFormat::Json)
      std::cout << report_to_json(report).dump(2) << "\n";
    else if (format == ReportFormat::Csv)
      std::cout << report_to_csv(report);
    else
      std::cout << report_to_markdown(report);
    return;
  }
  write_report(report, o.out, format);
}

void run_ablate(const AblateOptions& o) {
  const auto cells = run_ablation(load_eval_config(o.config), o.strategies, o.ks);
  const auto format = parse_report_format(o.format);
  if (format == ReportFormat::Csv) fail(ErrorCode::InvalidArgument, "ablation output is json or markdown");
  emit_text(format == ReportFormat::Json ? ablation_to_json(cells).dump(2) + "\n" : ablation_to_markdown(cells),
            o.out);
}

// Without a config the benchmark runs on a synthetic database.
ProtocolEnvironment bench_environment(const BenchOptions& o) {
  if (!o.config.empty()) return prepare_protocol(load_eval_config(o.config));
  EvalConfig config;
  config.engine = o.engine;
  config.preprocess = read_preprocess(o.preprocess);
  auto db = make_synthetic_samples({.count = 50});
  auto query = make_synthetic_samples({.count = 1, .seed = 99, .subject_prefix = "bench"});
  return prepare_protocol(config, std::move(db), std::move(query), cardiac_class_map());
}

void run_bench(const BenchOptions& o) {
  const auto env = bench_environment(o);
  if (env.test.empty()) fail(ErrorCode::InvalidArgument, "benchmark needs at least one test sample");
  nlohmann::json doc = nlohmann::json::array();
  std::ostringstream md;
  md << "| k | embed_retrieve | image_encode | memory_encode | attention_decode | total |\n"
     << "|---|---|---|---|---|---|\n";
  for (const int k : o.ks) {
    SegmentRequest request;
    request.k = k;
    const auto result = benchmark_pipeline(env, env.test.front().image, request, o.reps, o.warmup);
    nlohmann::json cell{{"k", result.k}, {"repetitions", result.repetitions}, {"warmup", result.warmup}};
    md << "| " << result.k;
    for (const char* stage : {"embed_retrieve", "image_encode", "memory_encode", "attention_decode", "total"}) {
      const auto& s = result.stages.at(stage);
      cell["stages"][stage]["mean_ms"] = s.mean_ms;
      if (s.stddev_ms) cell["stages"][stage]["stddev_ms"] = *s.stddev_ms;
      md << " | " << format_ms(s);
    }
    md << " |\n";
    doc.push_back(cell);
  }
  nlohmann::json out{{"pipeline", doc}};
  if (o.retrieval_n > 0) {
    const auto s = benchmark_retrieval(o.retrieval_n, kReferenceEmbeddingDim, o.ks.back(), o.reps);
    out["retrieval"] = {{"n", o.retrieval_n}, {"k", o.ks.back()}, {"mean_ms", s.mean_ms}};
    if (s.stddev_ms) out["retrieval"]["stddev_ms"] = *s.stddev_ms;
    md << "\nretrieval over " << o.retrieval_n << " entries (k=" << o.ks.back() << "): " << format_ms(s) << " ms\n";
  }
  std::cout << (o.json ? out.dump(2) + "\n" : md.str());
}

Service* g_service = nullptr;

void run_serve(ServeOptions o) {
  o.config.preprocess = read_preprocess(o.preprocess);
  Service service(o.config);
  g_service = &service;
  std::signal(SIGINT, [](int) {
    if (g_service) g_service->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_service) g_service->stop();
  });
  log_info("serving on http://" + o.config.host + ":" + std::to_string(o.config.port));
  service.run();
  g_service = nullptr;
}

}  // namespace

int cli_main(int argc, char** argv) {
  CLI::App app{"Retrieval-augmented few-shot segmentation", "ramseg"};
  app.require_subcommand(1);

  SynthOptions synth;
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic labelled dataset");
  synth_cmd->add_option("--out", synth.out, "Output directory")->required();
  synth_cmd->add_option("--count", synth.count, "Number of slices")->capture_default_str();
  synth_cmd->add_option("--subjects", synth.subjects, "Number of subjects")->capture_default_str();
  synth_cmd->add_option("--size", synth.size, "Slice height and width")->capture_default_str();
  synth_cmd->add_option("--seed", synth.seed, "Generator seed")->capture_default_str();
  synth_cmd->add_option("--prefix", synth.prefix, "Subject id prefix")->capture_default_str();

  BuildOptions build;
  auto* build_cmd = app.add_subcommand("build-index", "Embed a manifest and write the index file");
  build_cmd->add_option("--manifest", build.manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  build_cmd->add_option("--out", build.out, "Index file")->required();
  build_cmd->add_option("--backbone", build.backbone, "Embedding backbone")->capture_default_str();
  build_cmd->add_option("--backbone-checkpoint", build.backbone_checkpoint, "Backbone weights");
  build_cmd->add_option("--preprocess", build.preprocess, "Preprocessing JSON");

  SegmentOptions seg;
  auto* seg_cmd = app.add_subcommand("segment", "Segment one image against a labelled database");
  seg_cmd->add_option("--manifest", seg.manifest, "Database manifest")->required()->check(CLI::ExistingFile);
  seg_cmd->add_option("--image", seg.image, "Query image (PNG or .npy)")->required()->check(CLI::ExistingFile);
  seg_cmd->add_option("--out", seg.out, "Label map output (PNG)")->required();
  seg_cmd->add_option("--engine", seg.engine, "pretrained | toy:SEED | transfer")->capture_default_str();
  seg_cmd->add_option("--engine-checkpoint", seg.engine_checkpoint, "Segmentation weights");
  seg_cmd->add_option("--backbone", seg.backbone, "Embedding backbone")->capture_default_str();
  seg_cmd->add_option("--backbone-checkpoint", seg.backbone_checkpoint, "Backbone weights");
  seg_cmd->add_option("--preprocess", seg.preprocess, "Preprocessing JSON");
  seg_cmd->add_option("--strategy", seg.strategy, "embedding | random:SEED")->capture_default_str();
  seg_cmd->add_option("--classes", seg.classes, "Class names")->delimiter(',');
  seg_cmd->add_option("--k", seg.k, "Number of exemplars")->capture_default_str();

  EvalOptions eval;
  auto* eval_cmd = app.add_subcommand("eval", "Run the evaluation protocol");
  eval_cmd->add_option("--config", eval.config, "Evaluation config")->capture_default_str()->check(CLI::ExistingFile);
  eval_cmd->add_option("--out", eval.out, "Report file (default: stdout)");
  eval_cmd->add_option("--format", eval.format, "json | csv | markdown")->capture_default_str();

  AblateOptions ablate;
  auto* ablate_cmd = app.add_subcommand("ablate", "Evaluate a strategy by k grid");
  ablate_cmd->add_option("--config", ablate.config, "Evaluation config")->capture_default_str()->check(CLI::ExistingFile);
  ablate_cmd->add_option("--strategies", ablate.strategies, "Strategies")->delimiter(',')->capture_default_str();
  ablate_cmd->add_option("--k", ablate.ks, "k values")->delimiter(',')->capture_default_str();
  ablate_cmd->add_option("--out", ablate.out, "Output file (default: stdout)");
  ablate_cmd->add_option("--format", ablate.format, "json | markdown")->capture_default_str();

  BenchOptions bench;
  auto* bench_cmd = app.add_subcommand("bench", "Time the pipeline stages");
  bench_cmd->add_option("--config", bench.config, "Evaluation config (default: synthetic database)")
      ->check(CLI::ExistingFile);
  bench_cmd->add_option("--engine", bench.engine, "Engine for the synthetic database")->capture_default_str();
  bench_cmd->add_option("--preprocess", bench.preprocess, "Preprocessing JSON for the synthetic database");
  bench_cmd->add_option("--k", bench.ks, "k values")->delimiter(',')->capture_default_str();
  bench_cmd->add_option("--reps", bench.reps, "Timed repetitions")->capture_default_str()->check(CLI::PositiveNumber);
  bench_cmd->add_option("--warmup", bench.warmup, "Untimed warmup runs")->capture_default_str();
  bench_cmd->add_option("--retrieval-n", bench.retrieval_n, "Also time exact retrieval over N random vectors");
  bench_cmd->add_flag("--json", bench.json, "JSON output");

  ServeOptions serve;
  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP service");
  serve_cmd->add_option("--index", serve.config.index_path, "Index file")->required();
  serve_cmd->add_option("--samples", serve.config.samples_dir, "Samples directory")->required();
  serve_cmd->add_option("--state", serve.config.state_dir, "Accepted-sample directory (default: SAMPLES/accepted)");
  serve_cmd->add_option("--engine", serve.config.engine, "pretrained | toy:SEED | transfer")->capture_default_str();
  serve_cmd->add_option("--engine-checkpoint", serve.config.engine_checkpoint, "Segmentation weights");
  serve_cmd->add_option("--backbone", serve.config.backbone, "Embedding backbone")->capture_default_str();
  serve_cmd->add_option("--backbone-checkpoint", serve.config.backbone_checkpoint, "Backbone weights");
  serve_cmd->add_option("--preprocess", serve.preprocess, "Preprocessing JSON");
  serve_cmd->add_option("--host", serve.config.host, "Bind address")->capture_default_str();
  serve_cmd->add_option("--port", serve.config.port, "Port")->capture_default_str();
  serve_cmd->add_option("--k", serve.config.default_k, "Default k")->capture_default_str();
  serve_cmd->add_option("--max-pending", serve.config.max_pending_segments, "Queued requests before 503")
      ->capture_default_str();
  serve_cmd->add_option("--threads", serve.config.threads, "Worker threads")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*synth_cmd) run_synth(synth);
    if (*build_cmd) run_build(build);
    if (*seg_cmd) run_segment(seg);
    if (*eval_cmd) run_eval(eval);
    if (*ablate_cmd) run_ablate(ablate);
    if (*bench_cmd) run_bench(bench);
    if (*serve_cmd) run_serve(serve);
  } catch (const Error& e) {
    std::cerr << "error: " << error_code_name(e.code()) << ": " << e.what() << "\n";
    return 1;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: SCHEMA_VIOLATION: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace ramseg
