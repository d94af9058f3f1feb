#include <algorithm>

#include "ramseg/memory_seg.hpp"

namespace ramseg {

namespace {

// Copies the rank-1 exemplar's mask onto the query. Features are placeholders
// at native resolution so masks never pass through a lossy resize when the
// exemplar and query sizes agree.
class TransferEngine final : public SegEngine {
 public:
  std::string name() const override { return "transfer"; }

  Tensor3 prepare_input(const ImageSlice& image) const override {
    image.validate();
    Tensor3 t(image.height(), image.width(), 1);
    std::copy(image.pixels.values().begin(), image.pixels.values().end(), t.values().begin());
    return t;
  }

  int memory_resolution() const override { return 0; }

 protected:
  void check_input(const Tensor3& input) const override {
    if (input.height() < 1 || input.width() < 1 || input.channels() < 1)
      fail(ErrorCode::ShapeMismatch, "transfer engine needs a non-empty input");
  }

  FeatureMap do_encode_image(const Tensor3& input) const override {
    FeatureMap out;
    out.grid = Tensor3(input.height(), input.width(), 1);
    return out;
  }

  Tensor3 do_encode_memory(const FeatureMap& features, const BinaryMask& mask) const override {
    const auto resized = resize_mask_nearest(mask, features.grid.height(), features.grid.width());
    Tensor3 grid(resized.height(), resized.width(), 1);
    std::transform(resized.values().begin(), resized.values().end(), grid.values().begin(),
                   [](std::uint8_t v) { return static_cast<float>(v); });
    return grid;
  }

  FeatureMap do_memory_attention(const FeatureMap& query, const MemoryBank& bank) const override {
    const auto& entries = bank.entries();
    const auto top = std::min_element(entries.begin(), entries.end(), [](const MemoryEntry& a, const MemoryEntry& b) {
      return a.retrieval_rank != b.retrieval_rank ? a.retrieval_rank < b.retrieval_rank
                                                  : a.source_sample_id < b.source_sample_id;
    });
    const auto& src = top->memory_grid;
    BinaryMask mask(src.height(), src.width());
    for (std::size_t i = 0; i < src.pixels(); ++i) mask.values()[i] = src.pixel(i)[0] > 0.5f ? 1 : 0;
    const auto resized = resize_mask_nearest(mask, query.grid.height(), query.grid.width());

    FeatureMap out;
    out.grid = Tensor3(query.grid.height(), query.grid.width(), 1);
    std::transform(resized.values().begin(), resized.values().end(), out.grid.values().begin(),
                   [](std::uint8_t v) { return v ? 1.0f : -1.0f; });
    return out;
  }

  Grid<float> do_decode(const FeatureMap& conditioned) const override {
    const auto& g = conditioned.grid;
    Grid<float> logits(g.height(), g.width());
    for (std::size_t i = 0; i < g.pixels(); ++i) logits.values()[i] = g.pixel(i)[0];
    return logits;
  }
};

}  // namespace

EnginePtr make_transfer_engine() { return std::make_shared<TransferEngine>(); }

}  // namespace ramseg
