#include "ramseg/service.hpp"

#include <atomic>
#include <chrono>
#include <ctime>
#include <fstream>
#include <mutex>
#include <regex>
#include <thread>

#include <httplib.h>

#include "ramseg/checksum.hpp"
#include "ramseg/log.hpp"
#include "ramseg/memory_seg.hpp"
#include "ramseg/raster_io.hpp"
#include "ramseg/rle.hpp"

namespace ramseg {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------- journal

json journal_entry_to_json(const JournalEntry& e) {
  return {{"id", e.id},
          {"timestamp", e.timestamp},
          {"source", e.source},
          {"subject_id", e.subject_id},
          {"image", e.image_path},
          {"mask", e.mask_path}};
}

JournalEntry journal_entry_from_json(const json& doc) {
  try {
    return {doc.at("id").get<std::string>(),         doc.at("timestamp").get<std::string>(),
            doc.at("source").get<std::string>(),     doc.value("subject_id", std::string("accepted")),
            doc.at("image").get<std::string>(),      doc.at("mask").get<std::string>()};
  } catch (const json::exception& e) {
    fail(ErrorCode::SchemaViolation, std::string("malformed journal entry: ") + e.what());
  }
}

std::vector<JournalEntry> read_journal(const fs::path& journal_path) {
  std::vector<JournalEntry> out;
  std::ifstream in(journal_path);
  if (!in) return out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(journal_entry_from_json(json::parse(line)));
    } catch (const json::parse_error&) {
      // A torn final line from an interrupted append is dropped; anything else is corruption.
      if (in.peek() == EOF) {
        log_warning("journal " + journal_path.string() + ": ignoring incomplete last line " + std::to_string(line_no));
        break;
      }
      fail(ErrorCode::CorruptFile, "journal " + journal_path.string() + " line " + std::to_string(line_no) + " is not JSON");
    }
  }
  return out;
}

namespace {

SampleRecord load_journaled(const fs::path& state_dir, const JournalEntry& e, const ClassMap& class_map) {
  SampleRecord r;
  r.id = e.id;
  r.image.pixels = read_image(state_dir / e.image_path);
  r.image.subject_id = e.subject_id;
  r.mask.labels = read_labels(state_dir / e.mask_path);
  r.mask.class_map = class_map;
  r.provenance = Provenance::UserAccepted;
  r.validate();
  return r;
}

}  // namespace

std::size_t replay_journal(const fs::path& state_dir, const EmbeddingBackbone& backbone, const PreprocessSpec& preprocess,
                           FlatIndex& index, SampleStore& store) {
  std::size_t added = 0;
  for (const auto& e : read_journal(state_dir / kJournalFile)) {
    if (store.contains(e.id) && index.contains(e.id)) continue;
    auto record = store.contains(e.id) ? *store.get(e.id) : load_journaled(state_dir, e, store.class_map());
    if (!index.contains(e.id)) {
      index.add(embed(backbone, preprocess_for_embedding(record.image, preprocess)), e.id);
      ++added;
    }
    if (!store.contains(e.id)) store.add(std::move(record));
  }
  return added;
}

json api_error_json(ErrorCode code, const std::string& message) {
  return {{"code", std::string(error_code_name(code))}, {"message", message}, {"http_status", error_http_status(code)}};
}

// ---------------------------------------------------------------- openapi

json openapi_spec() {
  auto type = [](const std::string& t) { return json{{"type", t}}; };
  auto object = [](json properties, std::vector<std::string> required = {}) {
    json o = {{"type", "object"}, {"properties", std::move(properties)}};
    if (!required.empty()) o["required"] = required;
    return o;
  };
  auto op = [](const std::string& summary, const json& request, const std::vector<int>& errors) {
    json o;
    o["summary"] = summary;
    o["responses"]["200"]["description"] = "OK";
    if (!request.is_null()) {
      o["requestBody"]["required"] = true;
      o["requestBody"]["content"]["application/json"]["schema"] = request;
    }
    for (int s : errors) {
      auto& r = o["responses"][std::to_string(s)];
      r["description"] = "error";
      r["content"]["application/json"]["schema"]["$ref"] = "#/components/schemas/ApiError";
    }
    return o;
  };
  json image = type("string");
  image["description"] = "base64 PNG or NPY raster";
  json classes = type("array");
  classes["items"]["oneOf"] = json::array({type("string"), type("integer")});
  json strategy = type("string");
  strategy["description"] = "embedding | random:<seed>";
  json int_array = type("array");
  int_array["items"] = type("integer");

  json doc;
  doc["openapi"] = "3.0.3";
  doc["info"] = {{"title", "ramseg"}, {"version", "1.0"}};
  auto& paths = doc["paths"];
  paths["/api/index/build"]["post"] =
      op("Build and persist the index from a manifest",
         object({{"manifest_path", type("string")}, {"backbone", type("string")}}, {"manifest_path"}), {400, 404});
  paths["/api/retrieve"]["post"] =
      op("Nearest exemplars for an image",
         object({{"image", image}, {"sample_id", type("string")}, {"k", type("integer")}}), {400, 404, 409, 503});
  paths["/api/segment"]["post"] = op("Retrieval-conditioned segmentation; masks are run-length encoded",
                                     object({{"image", image},
                                             {"sample_id", type("string")},
                                             {"k", type("integer")},
                                             {"classes", classes},
                                             {"strategy", strategy}}),
                                     {400, 404, 409, 503});
  json masks = type("object");
  masks["additionalProperties"]["$ref"] = "#/components/schemas/RleMask";
  paths["/api/annotations/accept"]["post"] = op("Add a corrected sample to the database",
                                                object({{"image", image},
                                                        {"mask", type("string")},
                                                        {"masks", masks},
                                                        {"proposed_id", type("string")},
                                                        {"subject_id", type("string")}},
                                                       {"image"}),
                                                {400, 409});
  paths["/api/samples/{id}/image"]["get"] = op("Sample image as PNG (format=raw for lossless)", nullptr, {404});
  paths["/api/samples/{id}/mask"]["get"] = op("Sample label map as 16-bit PNG", nullptr, {404});
  paths["/api/index/stats"]["get"] = op("Index statistics", nullptr, {});
  paths["/api/health"]["get"] = op("Liveness and engine status", nullptr, {});
  paths["/api/spec"]["get"] = op("This document", nullptr, {});

  auto& schemas = doc["components"]["schemas"];
  schemas["ApiError"] = object({{"code", type("string")}, {"message", type("string")}, {"http_status", type("integer")}});
  schemas["RleMask"] = object({{"size", int_array},
                               {"counts", int_array},
                               {"pixel_count", type("integer")},
                               {"checksum", type("string")}});
  return doc;
}

// ---------------------------------------------------------------- service

namespace {

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const auto t = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  char out[40];
  std::snprintf(out, sizeof out, "%s.%03dZ", buf, static_cast<int>(ms));
  return out;
}

const std::regex kSampleIdPattern(R"([A-Za-z0-9][A-Za-z0-9_.\-]{0,127})");

struct Database {
  std::shared_ptr<FlatIndex> index;
  std::shared_ptr<SampleStore> store;
};

json parse_body(const httplib::Request& req) {
  try {
    auto doc = json::parse(req.body);
    if (!doc.is_object()) fail(ErrorCode::SchemaViolation, "request body must be a JSON object");
    return doc;
  } catch (const json::parse_error& e) {
    fail(ErrorCode::SchemaViolation, std::string("request body is not valid JSON: ") + e.what());
  }
}

int k_from(const json& body, int fallback) {
  if (!body.contains("k")) return fallback;
  if (!body.at("k").is_number_integer()) fail(ErrorCode::InvalidK, "k must be an integer");
  const auto k = body.at("k").get<std::int64_t>();
  if (k < 1) fail(ErrorCode::InvalidK, "k must be >= 1, got " + std::to_string(k));
  return static_cast<int>(std::min<std::int64_t>(k, 1 << 20));
}

std::vector<int> classes_from(const json& body, const ClassMap& class_map) {
  std::vector<int> out;
  if (!body.contains("classes")) return out;
  const auto& arr = body.at("classes");
  if (!arr.is_array()) fail(ErrorCode::SchemaViolation, "classes must be an array");
  for (const auto& c : arr) {
    if (c.is_number_integer()) {
      const int label = c.get<int>();
      if (!class_map.contains(label)) fail(ErrorCode::UnknownClass, "unknown class " + std::to_string(label));
      out.push_back(label);
    } else if (c.is_string()) {
      const auto name = c.get<std::string>();
      auto it = std::find_if(class_map.begin(), class_map.end(), [&](const auto& kv) { return kv.second == name; });
      if (it == class_map.end()) fail(ErrorCode::UnknownClass, "unknown class '" + name + "'");
      out.push_back(it->first);
    } else {
      fail(ErrorCode::SchemaViolation, "classes entries must be names or integer labels");
    }
  }
  return out;
}

std::string class_key(const ClassMap& m, int label) {
  auto it = m.find(label);
  return it == m.end() ? std::to_string(label) : it->second;
}

}  // namespace

struct Service::Impl {
  ServiceConfig config;
  BackbonePtr backbone;
  EnginePtr engine;

  mutable std::mutex db_mutex;  // guards the pointer swap only
  Database db;
  std::mutex write_mutex;  // serializes accept and build
  std::atomic<std::size_t> accepted{0};
  std::atomic<int> pending{0};

  httplib::Server server;
  std::thread thread;

  explicit Impl(ServiceConfig c) : config(std::move(c)) {
    if (config.default_k < 1) fail(ErrorCode::InvalidK, "default k must be >= 1");
    if (config.samples_dir.empty()) fail(ErrorCode::InvalidArgument, "the service needs a samples directory");
    if (config.state_dir.empty()) config.state_dir = config.samples_dir / "accepted";
    config.preprocess.validate();
    backbone = make_backbone(config.backbone, BackboneOptions{config.backbone_checkpoint});
    engine = make_engine(config.engine, EngineOptions{config.preprocess, config.engine_checkpoint});
    db = load_database();
    fs::create_directories(config.state_dir);
    replay_journal(config.state_dir, *backbone, config.preprocess, *db.index, *db.store);
    accepted = read_journal(config.state_dir / kJournalFile).size();
    routes();
  }

  Database load_database() const {
    Database d;
    const auto manifest_path = config.samples_dir / "manifest.json";
    if (fs::exists(manifest_path)) {
      const auto manifest = load_manifest(manifest_path);
      d.store = std::make_shared<SampleStore>(SampleStore::from_records(load_samples(manifest), manifest.class_map));
    } else {
      d.store = std::make_shared<SampleStore>();
    }
    if (!config.index_path.empty() && fs::exists(config.index_path)) {
      d.index = std::make_shared<FlatIndex>(FlatIndex::load(config.index_path));
      if (d.index->dim() != backbone->dim())
        fail(ErrorCode::DimMismatch, "index " + config.index_path.string() + " has dim " + std::to_string(d.index->dim()) +
                                         " but backbone " + backbone->name() + " produces " +
                                         std::to_string(backbone->dim()));
      for (const auto& id : d.index->ids())
        if (!d.store->contains(id))
          fail(ErrorCode::MissingSample, "index entry '" + id + "' has no sample in " + config.samples_dir.string());
    } else {
      d.index = std::make_shared<FlatIndex>(backbone->dim());
      for (const auto& id : d.store->ids())
        d.index->add(embed(*backbone, preprocess_for_embedding(d.store->get(id)->image, config.preprocess)), id);
      if (!config.index_path.empty()) d.index->save(config.index_path);
    }
    return d;
  }

  Database current() const {
    std::lock_guard lock(db_mutex);
    return db;
  }

  // Bounded admission for inference-bound requests.
  struct PendingSlot {
    std::atomic<int>& counter;
    explicit PendingSlot(std::atomic<int>& c, int limit) : counter(c) {
      if (counter.fetch_add(1) >= limit) {
        counter.fetch_sub(1);
        fail(ErrorCode::QueueFull, "too many pending requests (limit " + std::to_string(limit) + "); retry later");
      }
    }
    ~PendingSlot() { counter.fetch_sub(1); }
  };

  ImageSlice query_image(const json& body, const Database& d) const {
    if (body.contains("sample_id")) {
      if (!body.at("sample_id").is_string()) fail(ErrorCode::SchemaViolation, "sample_id must be a string");
      return d.store->get(body.at("sample_id").get<std::string>())->image;
    }
    if (!body.contains("image") || !body.at("image").is_string())
      fail(ErrorCode::SchemaViolation, "request needs an image (base64 PNG/NPY) or a sample_id");
    ImageSlice img;
    img.pixels = decode_image(base64_decode(body.at("image").get<std::string>()));
    img.subject_id = "query";
    img.validate();
    return img;
  }

  static void send_json(httplib::Response& res, const json& body, std::uint64_t version, int status = 200) {
    res.status = status;
    res.set_header(kIndexVersionHeader, std::to_string(version));
    res.set_content(body.dump(), "application/json");
  }

  template <class F>
  auto guarded(F&& f) {
    return [this, f = std::forward<F>(f)](const httplib::Request& req, httplib::Response& res) {
      try {
        f(req, res);
      } catch (const Error& e) {
        send_json(res, api_error_json(e.code(), e.what()), current().index->version(), error_http_status(e.code()));
      } catch (const json::exception& e) {
        send_json(res, api_error_json(ErrorCode::SchemaViolation, e.what()), current().index->version(), 400);
      } catch (const std::exception& e) {
        send_json(res, {{"code", "INTERNAL"}, {"message", e.what()}, {"http_status", 500}}, current().index->version(),
                  500);
      }
    };
  }

  void routes() {
    server.set_payload_max_length(std::size_t{512} << 20);
    const int threads = std::max(2, config.threads);
    server.new_task_queue = [threads] { return new httplib::ThreadPool(static_cast<std::size_t>(threads)); };
    server.set_error_handler([this](const httplib::Request& req, httplib::Response& res) {
      if (!res.body.empty()) return;
      const auto code = res.status == 404 ? ErrorCode::NotFound : ErrorCode::InvalidArgument;
      json body = api_error_json(code, "no route for " + req.method + " " + req.path);
      body["http_status"] = res.status;
      res.set_header(kIndexVersionHeader, std::to_string(current().index->version()));
      res.set_content(body.dump(), "application/json");
    });

    server.Post("/api/index/build", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto body = parse_body(req);
      if (!body.contains("manifest_path") || !body.at("manifest_path").is_string())
        fail(ErrorCode::SchemaViolation, "manifest_path is required");
      build(body.at("manifest_path").get<std::string>(), body.value("backbone", std::string()), res);
    }));
    server.Post("/api/retrieve", guarded([this](const httplib::Request& req, httplib::Response& res) {
      retrieve(parse_body(req), res);
    }));
    server.Post("/api/segment", guarded([this](const httplib::Request& req, httplib::Response& res) {
      segment(parse_body(req), res);
    }));
    server.Post("/api/annotations/accept", guarded([this](const httplib::Request& req, httplib::Response& res) {
      accept(parse_body(req), res);
    }));
    server.Get(R"(/api/samples/([^/]+)/(image|mask))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      sample_artifact(req, res);
    }));
    server.Get("/api/index/stats", guarded([this](const httplib::Request&, httplib::Response& res) {
      const auto d = current();
      const auto version = d.index->version();
      send_json(res,
                {{"count", d.index->size()},
                 {"dim", d.index->dim()},
                 {"version", version},
                 {"accepted_count", accepted.load()},
                 {"backbone", backbone->name()},
                 {"engine", engine->name()}},
                version);
    }));
    server.Get("/api/health", guarded([this](const httplib::Request&, httplib::Response& res) {
      send_json(res,
                {{"status", "ok"},
                 {"engine", engine->name()},
                 {"backbone", backbone->name()},
                 {"checkpoint_loaded", config.engine == "pretrained"}},
                current().index->version());
    }));
    server.Get("/api/spec", guarded([this](const httplib::Request&, httplib::Response& res) {
      send_json(res, openapi_spec(), current().index->version());
    }));
  }

  void build(const std::string& manifest_path, const std::string& backbone_name, httplib::Response& res) {
    std::lock_guard write(write_mutex);
    auto bb = backbone;
    if (!backbone_name.empty() && backbone_name != backbone->name())
      bb = make_backbone(backbone_name, BackboneOptions{config.backbone_checkpoint});
    const auto manifest = load_manifest(manifest_path);
    auto records = load_samples(manifest);
    auto index = std::make_shared<FlatIndex>(bb->dim());
    for (const auto& r : records) index->add(embed(*bb, preprocess_for_embedding(r.image, config.preprocess)), r.id);
    auto store = std::make_shared<SampleStore>(SampleStore::from_records(std::move(records), manifest.class_map));
    if (!config.index_path.empty()) index->save(config.index_path);

    // The journal describes additions to the previous database; keep it aside.
    const auto journal = config.state_dir / kJournalFile;
    if (fs::exists(journal)) {
      auto stamp = utc_timestamp();
      std::replace(stamp.begin(), stamp.end(), ':', '-');
      fs::rename(journal, config.state_dir / ("journal-" + stamp + ".jsonl"));
    }
    {
      std::lock_guard lock(db_mutex);
      db = {index, store};
      backbone = bb;
    }
    accepted = 0;
    send_json(res, {{"count", index->size()}, {"dim", index->dim()}, {"version", index->version()}}, index->version());
  }

  void retrieve(const json& body, httplib::Response& res) {
    PendingSlot slot(pending, config.max_pending_segments);
    const auto d = current();
    BackbonePtr bb;
    {
      std::lock_guard lock(db_mutex);
      bb = backbone;
    }
    const int k = k_from(body, config.default_k);
    const auto image = query_image(body, d);
    if (d.index->size() == 0) fail(ErrorCode::EmptyIndex, "retrieval index is empty; build it first");
    const auto found = d.index->query_versioned(embed(*bb, preprocess_for_embedding(image, config.preprocess)), k);
    json hits = json::array();
    for (const auto& h : found.hits)
      hits.push_back({{"id", h.id},
                      {"distance", h.distance},
                      {"rank", h.rank},
                      {"thumbnail_url", "/api/samples/" + h.id + "/image"},
                      {"mask_url", "/api/samples/" + h.id + "/mask"}});
    send_json(res, {{"hits", hits}, {"index_version", found.version}}, found.version);
  }

  void segment(const json& body, httplib::Response& res) {
    PendingSlot slot(pending, config.max_pending_segments);
    const auto d = current();
    BackbonePtr bb;
    {
      std::lock_guard lock(db_mutex);
      bb = backbone;
    }
    SegmentRequest request;
    request.k = k_from(body, config.default_k);
    request.classes = classes_from(body, d.store->class_map());
    if (body.contains("strategy")) request.strategy = RetrievalStrategy::parse(body.at("strategy").get<std::string>());
    const auto image = query_image(body, d);
    const SegmentationContext ctx{*engine, *bb, *d.index, *d.store, config.preprocess, d.store->class_map()};
    const auto result = segment_image(ctx, image, request);

    const auto& cm = d.store->class_map();
    json masks = json::object(), exemplars = json::object(), scores = json::object();
    for (const auto& [label, mask] : result.class_masks) {
      auto m = rle_to_json(rle_encode(mask));
      m["label"] = label;
      masks[class_key(cm, label)] = m;
      exemplars[class_key(cm, label)] = result.exemplar_ids.at(label);
      scores[class_key(cm, label)] = result.class_scores.at(label);
    }
    json hits = json::array();
    for (const auto& h : result.hits) hits.push_back({{"id", h.id}, {"distance", h.distance}, {"rank", h.rank}});
    const auto& t = result.timing;
    send_json(res,
              {{"masks", masks},
               {"scores", scores},
               {"exemplar_ids", exemplars},
               {"hits", hits},
               {"timings_ms",
                {{"embed_retrieve", t.embed_retrieve_ms},
                 {"image_encode", t.image_encode_ms},
                 {"memory_encode", t.memory_encode_ms},
                 {"attention_decode", t.attention_decode_ms},
                 {"total", t.total_ms}}},
               {"k_used", result.k_used},
               {"strategy", result.strategy.to_string()},
               {"index_version", result.index_version},
               {"warnings", result.warnings}},
              result.index_version);
  }

  Grid<std::int32_t> accepted_labels(const json& body, const ImageSlice& image, const ClassMap& cm) const {
    if (body.contains("mask")) {
      if (!body.at("mask").is_string()) fail(ErrorCode::SchemaViolation, "mask must be a base64 label raster");
      auto labels = decode_labels(base64_decode(body.at("mask").get<std::string>()));
      if (!labels.same_shape(image.pixels))
        fail(ErrorCode::ShapeMismatch, "mask " + std::to_string(labels.height()) + "x" + std::to_string(labels.width()) +
                                           " does not match image " + std::to_string(image.height()) + "x" +
                                           std::to_string(image.width()));
      return labels;
    }
    if (!body.contains("masks") || !body.at("masks").is_object())
      fail(ErrorCode::SchemaViolation, "accept needs mask (label raster) or masks (class -> RLE)");
    Grid<std::int32_t> labels(image.height(), image.width());
    for (const auto& [name, rle_doc] : body.at("masks").items()) {
      const auto label = classes_from(json{{"classes", {name}}}, cm).front();
      const auto mask = rle_decode(rle_from_json(rle_doc));
      if (!mask.same_shape(image.pixels))
        fail(ErrorCode::ShapeMismatch, "mask for " + name + " does not match the image dimensions");
      for (std::size_t i = 0; i < mask.size(); ++i) {
        if (!mask.values()[i]) continue;
        auto& v = labels.values()[i];
        if (v != 0 && v != label) fail(ErrorCode::InvalidArgument, "class masks overlap; each pixel takes one class");
        v = label;
      }
    }
    return labels;
  }

  void accept(const json& body, httplib::Response& res) {
    std::lock_guard write(write_mutex);
    const auto d = current();
    if (!body.contains("image") || !body.at("image").is_string())
      fail(ErrorCode::SchemaViolation, "accept needs an image (base64 PNG/NPY)");

    SampleRecord record;
    record.image.pixels = decode_image(base64_decode(body.at("image").get<std::string>()));
    record.image.subject_id = body.value("subject_id", std::string("accepted"));
    record.image.validate();
    record.mask.class_map = d.store->class_map();
    record.mask.labels = accepted_labels(body, record.image, record.mask.class_map);
    record.provenance = Provenance::UserAccepted;

    record.id = body.value("proposed_id", std::string());
    if (record.id.empty()) {
      std::size_t n = d.store->size();
      do record.id = "accepted_" + std::to_string(n++);
      while (d.store->contains(record.id) || d.index->contains(record.id));
    }
    if (!std::regex_match(record.id, kSampleIdPattern))
      fail(ErrorCode::InvalidArgument, "sample id '" + record.id + "' must match [A-Za-z0-9][A-Za-z0-9_.-]*");
    if (d.store->contains(record.id) || d.index->contains(record.id))
      fail(ErrorCode::DuplicateId, "sample id '" + record.id + "' already exists");
    record.validate();

    BackbonePtr bb;
    {
      std::lock_guard lock(db_mutex);
      bb = backbone;
    }
    const auto embedding = embed(*bb, preprocess_for_embedding(record.image, config.preprocess));

    JournalEntry entry{record.id, utc_timestamp(), "user-accepted", record.image.subject_id,
                       "spool/" + record.id + ".npy", "spool/" + record.id + "_mask.png"};
    fs::create_directories(config.state_dir / "spool");
    write_image(config.state_dir / entry.image_path, record.image.pixels);
    write_labels(config.state_dir / entry.mask_path, record.mask.labels);
    {
      std::ofstream journal(config.state_dir / kJournalFile, std::ios::app);
      journal << journal_entry_to_json(entry).dump() << '\n';
      journal.flush();
      if (!journal) fail(ErrorCode::IoError, "cannot append to the journal in " + config.state_dir.string());
    }
    d.store->add(record);
    d.index->add(embedding, record.id);
    ++accepted;
    const auto version = d.index->version();
    send_json(res, {{"id", record.id}, {"index_version", version}}, version);
  }

  void sample_artifact(const httplib::Request& req, httplib::Response& res) {
    const auto d = current();
    const std::string id = req.matches[1];
    const bool want_mask = req.matches[2] == "mask";
    const auto record = d.store->get(id);
    std::vector<std::uint8_t> bytes;
    std::string type = "image/png";
    if (want_mask) {
      bytes = encode_labels_png(record->mask.labels);
    } else if (req.get_param_value("format") == "raw") {
      bytes = encode_image(record->image.pixels);
      if (bytes.size() < 4 || bytes[1] != 'P') type = "application/octet-stream";
    } else {
      bytes = encode_display_png(record->image.pixels);
    }
    const auto etag = "\"" + hex32(crc32_checksum(bytes)) + "\"";
    res.set_header("ETag", etag);
    res.set_header(kIndexVersionHeader, std::to_string(d.index->version()));
    if (req.get_header_value("If-None-Match") == etag) {
      res.status = 304;
      return;
    }
    res.set_content(std::string(bytes.begin(), bytes.end()), type);
  }
};

Service::Service(ServiceConfig config) : impl_(std::make_unique<Impl>(std::move(config))) {}

Service::~Service() { stop(); }

int Service::start() {
  auto& s = impl_->server;
  int port = impl_->config.port;
  if (port == 0) {
    port = s.bind_to_any_port(impl_->config.host);
  } else if (!s.bind_to_port(impl_->config.host, port)) {
    port = -1;
  }
  if (port < 0)
    fail(ErrorCode::IoError, "cannot bind " + impl_->config.host + ":" + std::to_string(impl_->config.port));
  impl_->thread = std::thread([&s] { s.listen_after_bind(); });
  s.wait_until_ready();
  return port;
}

void Service::run() {
  if (!impl_->server.listen(impl_->config.host, impl_->config.port))
    fail(ErrorCode::IoError, "cannot bind " + impl_->config.host + ":" + std::to_string(impl_->config.port));
}

void Service::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

std::uint64_t Service::index_version() const { return impl_->current().index->version(); }
std::size_t Service::index_size() const { return impl_->current().index->size(); }
std::size_t Service::accepted_count() const { return impl_->accepted.load(); }
const ServiceConfig& Service::config() const { return impl_->config; }

}  // namespace ramseg
