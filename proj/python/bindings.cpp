#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <mutex>
#include <set>

#include "ramseg/cli.hpp"
#include "ramseg/evaluation.hpp"
#include "ramseg/raster_io.hpp"
#include "ramseg/rle.hpp"
#include "ramseg/synthetic.hpp"

namespace py = pybind11;
using namespace ramseg;

namespace {

PyObject* g_error_type = nullptr;

template <class T>
using Array = py::array_t<T, py::array::c_style | py::array::forcecast>;

template <class T>
Grid<T> to_grid(const Array<T>& a) {
  if (a.ndim() != 2) fail(ErrorCode::ShapeMismatch, "expected a 2-D array");
  return Grid<T>(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)),
                 std::vector<T>(a.data(), a.data() + a.size()));
}

template <class T>
py::array_t<T> from_grid(const Grid<T>& g) {
  py::array_t<T> out({g.height(), g.width()});
  std::copy(g.values().begin(), g.values().end(), out.mutable_data());
  return out;
}

Tensor3 to_tensor(const Array<float>& a) {
  if (a.ndim() != 2 && a.ndim() != 3) fail(ErrorCode::ShapeMismatch, "expected an H x W [x C] array");
  Tensor3 t(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), a.ndim() == 3 ? static_cast<int>(a.shape(2)) : 1);
  std::copy(a.data(), a.data() + a.size(), t.values().begin());
  return t;
}

py::array_t<float> from_tensor(const Tensor3& t) {
  py::array_t<float> out({t.height(), t.width(), t.channels()});
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

nlohmann::json to_json(py::handle obj) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(obj).cast<std::string>());
}

py::object from_json(const nlohmann::json& doc) {
  return py::module_::import("json").attr("loads")(doc.dump());
}

PreprocessSpec to_preprocess(const py::object& obj) {
  if (obj.is_none()) return {};
  auto spec = preprocess_from_json(to_json(obj));
  spec.validate();
  return spec;
}

py::list hits_to_py(const std::vector<RetrievalHit>& hits) {
  py::list out;
  for (const auto& h : hits) out.append(py::dict(py::arg("id") = h.id, py::arg("distance") = h.distance, py::arg("rank") = h.rank));
  return out;
}

py::dict features_to_py(const FeatureMap& f) {
  py::list skips;
  for (const auto& s : f.skips) skips.append(from_tensor(s));
  return py::dict(py::arg("grid") = from_tensor(f.grid), py::arg("stride") = f.stride, py::arg("skips") = skips);
}

FeatureMap features_from_py(const py::handle& obj) {
  const auto d = obj.cast<py::dict>();
  FeatureMap f{to_tensor(d["grid"].cast<Array<float>>()), d.contains("stride") ? d["stride"].cast<int>() : 1, {}};
  if (d.contains("skips"))
    for (const auto& s : d["skips"]) f.skips.push_back(to_tensor(s.cast<Array<float>>()));
  return f;
}

// Factories registered from Python own a reference to the callable; it is
// released with the GIL held.
std::shared_ptr<py::object> share(py::object obj) {
  return std::shared_ptr<py::object>(new py::object(std::move(obj)), [](py::object* p) {
    py::gil_scoped_acquire gil;
    delete p;
  });
}

std::mutex g_registered_mutex;
std::set<std::string> g_engines_from_python, g_backbones_from_python;

class PyBackbone : public EmbeddingBackbone, public py::trampoline_self_life_support {
 public:
  int dim() const override { PYBIND11_OVERRIDE_PURE(int, EmbeddingBackbone, dim); }
  std::string name() const override { PYBIND11_OVERRIDE_PURE(std::string, EmbeddingBackbone, name); }
  // Optional in Python subclasses; 0 accepts any size.
  int input_resolution() const override {
    py::gil_scoped_acquire gil;
    auto fn = py::get_override(static_cast<const EmbeddingBackbone*>(this), "input_resolution");
    return fn ? fn().cast<int>() : 0;
  }
  std::vector<float> forward(const Tensor3& input) const override {
    py::gil_scoped_acquire gil;
    auto fn = py::get_override(static_cast<const EmbeddingBackbone*>(this), "forward");
    if (!fn) fail(ErrorCode::RuntimeUnavailable, "backbone does not implement forward()");
    const auto out = py::cast<Array<float>>(fn(from_tensor(input)));
    return {out.data(), out.data() + out.size()};
  }
};

class PySegEngine : public SegEngine, public py::trampoline_self_life_support {
 public:
  std::string name() const override { PYBIND11_OVERRIDE_PURE(std::string, SegEngine, name); }
  int memory_resolution() const override { PYBIND11_OVERRIDE_PURE(int, SegEngine, memory_resolution); }
  bool order_invariant() const override { PYBIND11_OVERRIDE(bool, SegEngine, order_invariant); }

  Tensor3 prepare_input(const ImageSlice& image) const override {
    py::gil_scoped_acquire gil;
    return to_tensor(py::cast<Array<float>>(method("prepare_input")(from_grid(image.pixels))));
  }

 protected:
  void check_input(const Tensor3& input) const override {
    py::gil_scoped_acquire gil;
    if (auto fn = py::get_override(static_cast<const SegEngine*>(this), "check_input")) fn(from_tensor(input));
  }
  FeatureMap do_encode_image(const Tensor3& input) const override {
    py::gil_scoped_acquire gil;
    return features_from_py(method("encode_image")(from_tensor(input)));
  }
  Tensor3 do_encode_memory(const FeatureMap& features, const BinaryMask& mask) const override {
    py::gil_scoped_acquire gil;
    return to_tensor(py::cast<Array<float>>(method("encode_memory")(features_to_py(features), from_grid(mask))));
  }
  FeatureMap do_memory_attention(const FeatureMap& query, const MemoryBank& bank) const override {
    py::gil_scoped_acquire gil;
    py::list memories;
    for (const auto& e : bank.entries())
      memories.append(py::dict(py::arg("memory") = from_tensor(e.memory_grid), py::arg("source_id") = e.source_sample_id,
                               py::arg("rank") = e.retrieval_rank, py::arg("class_label") = e.class_label));
    return features_from_py(method("memory_attention")(features_to_py(query), memories));
  }
  Grid<float> do_decode(const FeatureMap& conditioned) const override {
    py::gil_scoped_acquire gil;
    return to_grid(py::cast<Array<float>>(method("decode")(features_to_py(conditioned))));
  }

 private:
  py::function method(const char* name) const {
    auto fn = py::get_override(static_cast<const SegEngine*>(this), name);
    if (!fn) fail(ErrorCode::RuntimeUnavailable, std::string("engine does not implement ") + name + "()");
    return fn;
  }
};

// Database, engine and backbone loaded once for repeated segmentation.
class Pipeline {
 public:
  Pipeline(const std::filesystem::path& manifest, const std::string& engine, const std::string& backbone,
           const py::object& preprocess, const std::string& engine_checkpoint, const std::string& backbone_checkpoint) {
    EvalConfig config;
    config.engine = engine;
    config.engine_checkpoint = engine_checkpoint;
    config.backbone = backbone;
    config.backbone_checkpoint = backbone_checkpoint;
    config.preprocess = to_preprocess(preprocess);
    const auto m = load_manifest(manifest);
    env_ = prepare_protocol(config, load_samples(m), {}, m.class_map);
  }

  py::list retrieve(const Array<float>& image, int k) const {
    const ImageSlice slice{to_grid(image), "query", 0, ""};
    return hits_to_py(env_.index->query(embed(*env_.backbone, preprocess_for_embedding(slice, env_.preprocess)), k));
  }

  py::dict segment(const Array<float>& image, int k, const std::vector<std::string>& classes,
                   const std::string& strategy) const {
    SegmentRequest request;
    request.k = k;
    request.strategy = RetrievalStrategy::parse(strategy);
    for (const auto& name : classes) {
      const auto it = std::find_if(env_.class_map.begin(), env_.class_map.end(),
                                   [&](const auto& entry) { return entry.second == name; });
      if (it == env_.class_map.end()) fail(ErrorCode::UnknownClass, "unknown class " + name);
      request.classes.push_back(it->first);
    }
    const ImageSlice slice{to_grid(image), "query", 0, ""};
    const SegmentationContext ctx{*env_.engine, *env_.backbone, *env_.index, *env_.store, env_.preprocess, env_.class_map};
    const auto result = segment_image(ctx, slice, request);

    py::dict masks, scores, exemplars;
    for (const auto& [label, mask] : result.class_masks) {
      const auto& name = env_.class_map.at(label);
      masks[py::str(name)] = from_grid(mask);
      scores[py::str(name)] = result.class_scores.at(label);
      exemplars[py::str(name)] = result.exemplar_ids.at(label);
    }
    py::dict timings(py::arg("embed_retrieve") = result.timing.embed_retrieve_ms,
                     py::arg("image_encode") = result.timing.image_encode_ms,
                     py::arg("memory_encode") = result.timing.memory_encode_ms,
                     py::arg("attention_decode") = result.timing.attention_decode_ms,
                     py::arg("total") = result.timing.total_ms);
    return py::dict(py::arg("masks") = masks, py::arg("label_map") = from_grid(result.label_map()),
                    py::arg("scores") = scores, py::arg("exemplar_ids") = exemplars,
                    py::arg("hits") = hits_to_py(result.hits), py::arg("k_used") = result.k_used,
                    py::arg("strategy") = result.strategy.to_string(), py::arg("index_version") = result.index_version,
                    py::arg("timings_ms") = timings, py::arg("warnings") = result.warnings);
  }

  std::size_t size() const { return env_.index->size(); }
  std::map<int, std::string> class_map() const { return env_.class_map; }

 private:
  ProtocolEnvironment env_;
};

EvalConfig config_from_py(const py::object& config) {
  if (py::isinstance<py::str>(config) || py::hasattr(config, "__fspath__"))
    return load_eval_config(py::str(config).cast<std::string>());
  return eval_config_from_json(to_json(config));
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Retrieval-augmented few-shot segmentation";

  g_error_type = PyErr_NewException("ramseg.RamsegError", PyExc_RuntimeError, nullptr);
  m.attr("RamsegError") = py::handle(g_error_type);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object err = py::reinterpret_borrow<py::object>(g_error_type)(e.what());
      err.attr("code") = std::string(error_code_name(e.code()));
      PyErr_SetObject(g_error_type, err.ptr());
    }
  });

  m.attr("REFERENCE_DIM") = kReferenceEmbeddingDim;

  m.def("normalize_embedding", [](const Array<float>& raw) {
    const auto e = normalize_embedding(std::span<const float>(raw.data(), raw.size()));
    return py::array_t<float>(e.vector.size(), e.vector.data());
  }, py::arg("raw"));

  py::class_<FlatIndex>(m, "FlatIndex")
      .def(py::init<int>(), py::arg("dim") = kReferenceEmbeddingDim)
      .def_property_readonly("dim", &FlatIndex::dim)
      .def_property_readonly("version", &FlatIndex::version)
      .def("__len__", &FlatIndex::size)
      .def("ids", &FlatIndex::ids)
      .def("__contains__", &FlatIndex::contains)
      .def("add", [](FlatIndex& index, const Array<float>& v, const std::string& id) {
        Embedding e;
        e.vector.assign(v.data(), v.data() + v.size());
        index.add(e, id);
      }, py::arg("vector"), py::arg("id"))
      .def("query", [](const FlatIndex& index, const Array<float>& q, int k) {
        Embedding e;
        e.vector.assign(q.data(), q.data() + q.size());
        return hits_to_py(index.query(e, k));
      }, py::arg("vector"), py::arg("k"))
      .def("random_sample", [](const FlatIndex& index, int k, std::uint64_t seed) {
        return hits_to_py(index.random_sample(k, seed));
      }, py::arg("k"), py::arg("seed"))
      .def("save", &FlatIndex::save, py::arg("path"))
      .def_static("load", &FlatIndex::load, py::arg("path"));

  py::classh<EmbeddingBackbone, PyBackbone>(m, "Backbone")
      .def(py::init<>())
      .def("dim", &EmbeddingBackbone::dim)
      .def("name", &EmbeddingBackbone::name)
      .def("input_resolution", &EmbeddingBackbone::input_resolution)
      .def("forward", [](const EmbeddingBackbone& b, const Array<float>& x) {
        const auto v = b.forward(to_tensor(x));
        return py::array_t<float>(v.size(), v.data());
      });

  m.def("make_backbone", [](const std::string& name, const std::string& checkpoint) {
    return std::const_pointer_cast<EmbeddingBackbone>(make_backbone(name, {.checkpoint = checkpoint}));
  }, py::arg("name"), py::arg("checkpoint") = "");

  m.def("embed_image", [](const EmbeddingBackbone& backbone, const Array<float>& image, const py::object& preprocess) {
    const ImageSlice slice{to_grid(image), "query", 0, ""};
    const auto e = embed(backbone, preprocess_for_embedding(slice, to_preprocess(preprocess)));
    return py::array_t<float>(e.vector.size(), e.vector.data());
  }, py::arg("backbone"), py::arg("image"), py::arg("preprocess") = py::none());

  m.def("preprocess_for_embedding", [](const Array<float>& image, const py::object& preprocess) {
    return from_tensor(preprocess_for_embedding({to_grid(image), "query", 0, ""}, to_preprocess(preprocess)));
  }, py::arg("image"), py::arg("preprocess") = py::none());
  m.def("preprocess_for_segmentation", [](const Array<float>& image, const py::object& preprocess) {
    return from_tensor(preprocess_for_segmentation({to_grid(image), "query", 0, ""}, to_preprocess(preprocess)));
  }, py::arg("image"), py::arg("preprocess") = py::none());

  m.def("register_backbone", [](const std::string& name, py::function factory) {
    auto fn = share(std::move(factory));
    register_backbone(name, [fn](const BackboneOptions& options) {
      py::gil_scoped_acquire gil;
      return std::static_pointer_cast<const EmbeddingBackbone>(
          (*fn)(options.checkpoint).cast<std::shared_ptr<EmbeddingBackbone>>());
    });
    std::lock_guard lock(g_registered_mutex);
    g_backbones_from_python.insert(name);
  }, py::arg("name"), py::arg("factory"));

  py::classh<SegEngine, PySegEngine>(m, "Engine")
      .def(py::init<>())
      .def("name", &SegEngine::name)
      .def("memory_resolution", &SegEngine::memory_resolution);

  m.def("register_engine", [](const std::string& name, py::function factory) {
    auto fn = share(std::move(factory));
    register_engine(name, [fn](const EngineOptions& options) {
      py::gil_scoped_acquire gil;
      return std::static_pointer_cast<const SegEngine>(
          (*fn)(options.checkpoint, from_json(preprocess_to_json(options.preprocess)))
              .cast<std::shared_ptr<SegEngine>>());
    });
    std::lock_guard lock(g_registered_mutex);
    g_engines_from_python.insert(name);
  }, py::arg("name"), py::arg("factory"));

  m.def("unregister_engine", &unregister_engine, py::arg("name"));
  m.def("unregister_backbone", &unregister_backbone, py::arg("name"));
  // Called at interpreter exit so no Python callable outlives the interpreter.
  m.def("_clear_python_registrations", [] {
    std::lock_guard lock(g_registered_mutex);
    for (const auto& name : g_engines_from_python) unregister_engine(name);
    for (const auto& name : g_backbones_from_python) unregister_backbone(name);
    g_engines_from_python.clear();
    g_backbones_from_python.clear();
  });
  m.def("engine_available", [](const std::string& name, const std::string& checkpoint) {
    try {
      make_engine(name, {.checkpoint = checkpoint});
      return true;
    } catch (const Error&) {
      return false;
    }
  }, py::arg("name"), py::arg("checkpoint") = "");

  py::class_<Pipeline>(m, "Pipeline")
      .def(py::init<const std::filesystem::path&, const std::string&, const std::string&, const py::object&,
                    const std::string&, const std::string&>(),
           py::arg("manifest"), py::arg("engine") = "transfer", py::arg("backbone") = "test:0",
           py::arg("preprocess") = py::none(), py::arg("engine_checkpoint") = "", py::arg("backbone_checkpoint") = "")
      .def("retrieve", &Pipeline::retrieve, py::arg("image"), py::arg("k") = 16)
      .def("segment", &Pipeline::segment, py::arg("image"), py::arg("k") = 16,
           py::arg("classes") = std::vector<std::string>{}, py::arg("strategy") = "embedding")
      .def("__len__", &Pipeline::size)
      .def_property_readonly("class_map", &Pipeline::class_map);

  m.def("dice", [](const Array<std::uint8_t>& pred, const Array<std::uint8_t>& gt) {
    return dice(to_grid(pred), to_grid(gt));
  }, py::arg("pred"), py::arg("gt"));

  m.def("run_eval", [](const py::object& config) {
    return from_json(report_to_json(run_protocol(config_from_py(config))));
  }, py::arg("config"), "Run the evaluation protocol; config is a path or a dict. Returns the report as a dict.");

  m.def("run_ablation", [](const py::object& config, const std::vector<std::string>& strategies,
                           const std::vector<int>& ks) {
    return from_json(ablation_to_json(run_ablation(config_from_py(config), strategies, ks)));
  }, py::arg("config"), py::arg("strategies"), py::arg("k_values"));

  m.def("report_to_markdown", [](const py::object& report) {
    return report_to_markdown(report_from_json(to_json(report)));
  }, py::arg("report"));

  m.def("rle_encode", [](const Array<std::uint8_t>& mask) { return from_json(rle_to_json(rle_encode(to_grid(mask)))); },
        py::arg("mask"));
  m.def("rle_decode", [](const py::object& rle) { return from_grid(rle_decode(rle_from_json(to_json(rle)))); },
        py::arg("rle"));

  m.def("read_image", [](const std::filesystem::path& p) { return from_grid(read_image(p)); }, py::arg("path"));
  m.def("read_labels", [](const std::filesystem::path& p) { return from_grid(read_labels(p)); }, py::arg("path"));
  m.def("write_image", [](const std::filesystem::path& p, const Array<float>& img) { write_image(p, to_grid(img)); },
        py::arg("path"), py::arg("image"));
  m.def("write_labels", [](const std::filesystem::path& p, const Array<std::int32_t>& labels) {
    write_labels(p, to_grid(labels));
  }, py::arg("path"), py::arg("labels"));

  m.def("write_synthetic_dataset", [](const std::filesystem::path& out, int count, int subjects, int size,
                                      std::uint64_t seed, const std::string& prefix) {
    SyntheticSpec spec;
    spec.count = count;
    spec.subjects = subjects;
    spec.height = spec.width = size;
    spec.seed = seed;
    spec.subject_prefix = prefix;
    return write_dataset(make_synthetic_samples(spec), out, cardiac_class_map()).entries.size();
  }, py::arg("out"), py::arg("count") = 50, py::arg("subjects") = 3, py::arg("size") = 64, py::arg("seed") = 7,
     py::arg("prefix") = "syn");

  m.def("cli_main", [](const std::vector<std::string>& args) {
    std::vector<std::string> owned = args;
    std::vector<char*> argv;
    for (auto& a : owned) argv.push_back(a.data());
    argv.push_back(nullptr);
    py::gil_scoped_release release;
    return cli_main(static_cast<int>(owned.size()), argv.data());
  }, py::arg("argv"));
}
