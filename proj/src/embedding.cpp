#include "ramseg/embedding.hpp"

#include <cmath>
#include <cstdlib>
#include <map>
#include <mutex>
#include <random>

#include "ramseg/checkpoint.hpp"
#include "ramseg/data_model.hpp"
#include "ramseg/log.hpp"

namespace ramseg {

std::optional<std::filesystem::path> resolve_checkpoint(const std::string& explicit_path, const char* env_var) {
  std::string candidate = explicit_path;
  if (candidate.empty())
    if (const char* env = std::getenv(env_var)) candidate = env;
  if (candidate.empty() || !std::filesystem::exists(candidate)) return std::nullopt;
  return std::filesystem::path(candidate);
}

Embedding normalize_embedding(std::span<const float> raw, std::optional<std::string> source_id) {
  double sq = 0.0;
  for (float v : raw) {
    if (!std::isfinite(v)) fail(ErrorCode::NonFiniteOutput, "backbone produced a non-finite feature");
    sq += static_cast<double>(v) * v;
  }
  if (!(sq > 0.0) || !std::isfinite(sq))
    fail(ErrorCode::NonFiniteOutput, "backbone feature has zero or overflowing norm");
  const double norm = std::sqrt(sq);
  Embedding e;
  e.vector.resize(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) e.vector[i] = static_cast<float>(raw[i] / norm);
  e.source_id = std::move(source_id);
  return e;
}

Embedding embed(const EmbeddingBackbone& backbone, const Tensor3& input) {
  const int side = backbone.input_resolution();
  if (input.channels() != 3 || input.height() < 1 || input.width() < 1 ||
      (side > 0 && (input.height() != side || input.width() != side)))
    fail(ErrorCode::ShapeMismatch, backbone.name() + " expects a 3-channel " +
                                       (side > 0 ? std::to_string(side) + "x" + std::to_string(side) : "image") +
                                       " tensor, got " + std::to_string(input.height()) + "x" +
                                       std::to_string(input.width()) + "x" + std::to_string(input.channels()));
  auto raw = backbone.forward(input);
  if (static_cast<int>(raw.size()) != backbone.dim())
    fail(ErrorCode::NonFiniteOutput, backbone.name() + " returned " + std::to_string(raw.size()) +
                                         " features, expected " + std::to_string(backbone.dim()));
  return normalize_embedding(raw);
}

std::vector<Embedding> embed_batch(const EmbeddingBackbone& backbone, std::span<const Tensor3> inputs) {
  std::vector<Embedding> out;
  out.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    try {
      out.push_back(embed(backbone, inputs[i]));
    } catch (const Error& e) {
      throw Error(e.code(), "batch item " + std::to_string(i) + ": " + e.what());
    }
  }
  return out;
}

namespace {

constexpr int kPoolGrid = 16;

class ProjectionBackbone final : public EmbeddingBackbone {
 public:
  ProjectionBackbone(std::uint64_t seed, int dim) : seed_(seed), dim_(dim) {
    const int fan_in = kPoolGrid * kPoolGrid * 3;
    weights_.resize(static_cast<std::size_t>(dim) * fan_in);
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> gauss(0.0f, 1.0f / std::sqrt(static_cast<float>(fan_in)));
    for (auto& w : weights_) w = gauss(rng);
  }

  int dim() const override { return dim_; }
  std::string name() const override { return "test:" + std::to_string(seed_); }
  int input_resolution() const override { return 0; }

  std::vector<float> forward(const Tensor3& input) const override {
    std::vector<float> pooled;
    pooled.reserve(kPoolGrid * kPoolGrid * 3);
    Grid<float> plane(input.height(), input.width());
    std::vector<Grid<float>> channels;
    for (int c = 0; c < 3; ++c) {
      for (std::size_t i = 0; i < input.pixels(); ++i) plane.values()[i] = input.pixel(i)[c];
      channels.push_back(resize_area(plane, kPoolGrid, kPoolGrid));
    }
    for (int i = 0; i < kPoolGrid * kPoolGrid; ++i)
      for (int c = 0; c < 3; ++c) pooled.push_back(channels[c].values()[i]);

    std::vector<float> out(dim_);
    const std::size_t fan_in = pooled.size();
    for (int d = 0; d < dim_; ++d) {
      double acc = 0.0;
      const float* row = weights_.data() + static_cast<std::size_t>(d) * fan_in;
      for (std::size_t j = 0; j < fan_in; ++j) acc += static_cast<double>(row[j]) * pooled[j];
      out[d] = static_cast<float>(acc);
    }
    return out;
  }

 private:
  std::uint64_t seed_;
  int dim_;
  std::vector<float> weights_;
};

std::mutex& registry_mutex() {
  static std::mutex m;
  return m;
}

std::map<std::string, BackboneFactory>& registry() {
  static std::map<std::string, BackboneFactory> r;
  return r;
}

BackbonePtr reference_backbone_fallback(const BackboneOptions& options) {
  if (auto path = resolve_checkpoint(options.checkpoint, kDinoCheckpointEnv))
    fail(ErrorCode::RuntimeUnavailable,
         std::string(kReferenceBackbone) + " checkpoint found at " + path->string() +
             " but no inference runtime is registered in this process; run through the Python "
             "package (`python -m ramseg ...`) which registers the torch runtime");
  log_warning(std::string(kReferenceBackbone) + ": no checkpoint (set " + kDinoCheckpointEnv +
              " or pass a checkpoint path); falling back to test:0 with dim 384. Retrieval quality "
              "will not match the pretrained backbone.");
  return make_test_backbone(0, kReferenceEmbeddingDim);
}

}  // namespace

BackbonePtr make_test_backbone(std::uint64_t seed, int dim) {
  if (dim < 2) fail(ErrorCode::InvalidArgument, "test backbone dim must be >= 2");
  return std::make_shared<ProjectionBackbone>(seed, dim);
}

void register_backbone(const std::string& name, BackboneFactory factory) {
  std::lock_guard lock(registry_mutex());
  registry()[name] = std::move(factory);
}

void unregister_backbone(const std::string& name) {
  std::lock_guard lock(registry_mutex());
  registry().erase(name);
}

BackbonePtr make_backbone(const std::string& name, const BackboneOptions& options) {
  BackboneFactory factory;
  {
    std::lock_guard lock(registry_mutex());
    if (auto it = registry().find(name); it != registry().end()) factory = it->second;
  }
  if (factory) return factory(options);

  if (name.rfind("test:", 0) == 0) {
    const auto spec = name.substr(5);
    try {
      std::size_t used = 0;
      const auto colon = spec.find(':');
      const auto seed = std::stoull(spec.substr(0, colon), &used);
      const int dim = colon == std::string::npos ? kReferenceEmbeddingDim : std::stoi(spec.substr(colon + 1));
      return make_test_backbone(seed, dim);
    } catch (const std::logic_error&) {
      fail(ErrorCode::InvalidArgument, "bad test backbone name '" + name + "', expected test:<seed>[:<dim>]");
    }
  }
  if (name == kReferenceBackbone) return reference_backbone_fallback(options);
  fail(ErrorCode::InvalidArgument, "unknown backbone '" + name + "'");
}

}  // namespace ramseg
