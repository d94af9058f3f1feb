#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ramseg/tensor.hpp"

namespace ramseg {

inline constexpr double kUnitNormTolerance = 1e-5;

struct Embedding {
  std::vector<float> vector;
  std::optional<std::string> source_id;

  std::size_t dim() const noexcept { return vector.size(); }
};

// L2-normalizes a raw feature. Throws NonFiniteOutput on non-finite or zero input.
Embedding normalize_embedding(std::span<const float> raw, std::optional<std::string> source_id = std::nullopt);

// Which backbone output serves as the global descriptor.
enum class FeatureMode { ClassToken, MeanPatch };

class EmbeddingBackbone {
 public:
  virtual ~EmbeddingBackbone() = default;

  virtual int dim() const = 0;
  virtual std::string name() const = 0;
  // Required square input side, or 0 when any size is accepted.
  virtual int input_resolution() const = 0;
  // Raw feature before normalization. Must be stateless and deterministic.
  virtual std::vector<float> forward(const Tensor3& input) const = 0;
};

using BackbonePtr = std::shared_ptr<const EmbeddingBackbone>;

Embedding embed(const EmbeddingBackbone& backbone, const Tensor3& input);
// Order-preserving; errors carry the offending batch index.
std::vector<Embedding> embed_batch(const EmbeddingBackbone& backbone, std::span<const Tensor3> inputs);

// Average-pools each channel to 16×16, flattens, and applies a fixed
// Gaussian projection drawn from `seed`.
BackbonePtr make_test_backbone(std::uint64_t seed, int dim = 384);

struct BackboneOptions {
  std::string checkpoint;  // empty: consult RAMSEG_DINO_CHECKPOINT
  FeatureMode feature_mode = FeatureMode::ClassToken;
};

using BackboneFactory = std::function<BackbonePtr(const BackboneOptions&)>;

// Names: "dinov2-vits14-reg", "test:<seed>" and anything registered.
void register_backbone(const std::string& name, BackboneFactory factory);
void unregister_backbone(const std::string& name);
BackbonePtr make_backbone(const std::string& name, const BackboneOptions& options = {});

inline constexpr const char* kReferenceBackbone = "dinov2-vits14-reg";
inline constexpr int kReferenceEmbeddingDim = 384;

}  // namespace ramseg
