#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

#include "ramseg/memory_seg.hpp"

namespace ramseg {

namespace {

constexpr int kPatch = 4;  // two patchify stages: stride 4 then 16

struct Linear {
  int in = 0;
  int out = 0;
  std::vector<float> weight;  // out×in
  std::vector<float> bias;

  Linear() = default;
  Linear(int in_features, int out_features, std::mt19937_64& rng, float gain = 1.0f)
      : in(in_features), out(out_features), weight(static_cast<std::size_t>(in_features) * out_features),
        bias(out_features, 0.0f) {
    std::normal_distribution<float> gauss(0.0f, gain / std::sqrt(static_cast<float>(in_features)));
    for (auto& w : weight) w = gauss(rng);
    std::normal_distribution<float> small(0.0f, 0.02f);
    for (auto& b : bias) b = small(rng);
  }

  void apply(const float* x, float* y) const {
    for (int o = 0; o < out; ++o) {
      const float* row = weight.data() + static_cast<std::size_t>(o) * in;
      float acc = bias[o];
      for (int i = 0; i < in; ++i) acc += row[i] * x[i];
      y[o] = acc;
    }
  }

  // Row-wise over an N×in token matrix.
  std::vector<float> apply_rows(const std::vector<float>& x, std::size_t rows) const {
    std::vector<float> y(rows * out);
    for (std::size_t r = 0; r < rows; ++r) apply(x.data() + r * in, y.data() + r * out);
    return y;
  }
};

float gelu(float x) { return 0.5f * x * (1.0f + std::erf(x * 0.70710678f)); }

void layer_norm(const float* x, float* y, int c) {
  double mean = 0.0;
  for (int i = 0; i < c; ++i) mean += x[i];
  mean /= c;
  double var = 0.0;
  for (int i = 0; i < c; ++i) var += (x[i] - mean) * (x[i] - mean);
  const double inv = 1.0 / std::sqrt(var / c + 1e-5);
  for (int i = 0; i < c; ++i) y[i] = static_cast<float>((x[i] - mean) * inv);
}

// 2D sinusoidal position table, h·w × channels.
std::vector<float> position_table(int h, int w, int channels) {
  std::vector<float> pe(static_cast<std::size_t>(h) * w * channels, 0.0f);
  const int bands = std::max(1, channels / 4);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float* p = pe.data() + (static_cast<std::size_t>(y) * w + x) * channels;
      for (int b = 0; b < bands && 4 * b + 3 < channels; ++b) {
        const float freq = std::pow(10000.0f, -static_cast<float>(b) / bands);
        p[4 * b + 0] = std::sin(y * freq);
        p[4 * b + 1] = std::cos(y * freq);
        p[4 * b + 2] = std::sin(x * freq);
        p[4 * b + 3] = std::cos(x * freq);
      }
    }
  return pe;
}

// Single-head scaled dot-product attention; rows of q attend over rows of k/v.
std::vector<float> attend(const std::vector<float>& q, std::size_t nq, const std::vector<float>& k,
                          const std::vector<float>& v, std::size_t nk, int c) {
  std::vector<float> out(nq * c, 0.0f);
  std::vector<float> scores(nk);
  std::vector<double> acc(c);
  const float scale = 1.0f / std::sqrt(static_cast<float>(c));
  for (std::size_t i = 0; i < nq; ++i) {
    const float* qi = q.data() + i * c;
    float best = -INFINITY;
    for (std::size_t j = 0; j < nk; ++j) {
      const float* kj = k.data() + j * c;
      float s = 0.0f;
      for (int d = 0; d < c; ++d) s += qi[d] * kj[d];
      scores[j] = s * scale;
      best = std::max(best, scores[j]);
    }
    double total = 0.0;
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t j = 0; j < nk; ++j) {
      const double wgt = std::exp(static_cast<double>(scores[j] - best));
      total += wgt;
      const float* vj = v.data() + j * c;
      for (int d = 0; d < c; ++d) acc[d] += wgt * vj[d];
    }
    for (int d = 0; d < c; ++d) out[i * c + d] = static_cast<float>(acc[d] / total);
  }
  return out;
}

struct AttentionBlock {
  Linear self_q, self_k, self_v, self_o;
  Linear cross_q, cross_k, cross_v, cross_o;
  Linear mlp_in, mlp_out;
};

class ToyEngine final : public SegEngine {
 public:
  ToyEngine(std::uint64_t seed, PreprocessSpec spec, ToyEngineConfig cfg)
      : seed_(seed), spec_(spec), cfg_(cfg) {
    spec_.validate();
    if (spec_.seg_resolution % (kPatch * kPatch) != 0)
      fail(ErrorCode::InvalidArgument, "toy engine needs seg_resolution divisible by 16, got " +
                                           std::to_string(spec_.seg_resolution));
    if (cfg_.feature_channels < 4 || cfg_.memory_channels < 4 || cfg_.image_channels < 1 || cfg_.attention_blocks < 1)
      fail(ErrorCode::InvalidArgument, "toy engine config out of range");
    std::mt19937_64 rng(seed);
    const int c1 = cfg_.image_channels, c = cfg_.feature_channels, cm = cfg_.memory_channels;
    patch1_ = Linear(3 * kPatch * kPatch, c1, rng);
    patch2_ = Linear(c1 * kPatch * kPatch, c, rng);
    mem_feat_ = Linear(c, cm, rng);
    mem_mask_ = Linear(1, cm, rng, 2.0f);
    std::normal_distribution<float> dw(0.0f, 1.0f / 3.0f);
    mix_depthwise_.resize(static_cast<std::size_t>(cm) * 9);
    for (auto& w : mix_depthwise_) w = dw(rng);
    mix_pointwise_ = Linear(cm, cm, rng, 0.5f);
    for (int b = 0; b < cfg_.attention_blocks; ++b) {
      AttentionBlock blk;
      blk.self_q = Linear(c, c, rng);
      blk.self_k = Linear(c, c, rng);
      blk.self_v = Linear(c, c, rng);
      blk.self_o = Linear(c, c, rng, 0.5f);
      blk.cross_q = Linear(c, c, rng);
      blk.cross_k = Linear(cm, c, rng);
      blk.cross_v = Linear(cm, c, rng);
      blk.cross_o = Linear(c, c, rng, 0.5f);
      blk.mlp_in = Linear(c, cfg_.mlp_hidden, rng);
      blk.mlp_out = Linear(cfg_.mlp_hidden, c, rng, 0.5f);
      blocks_.push_back(std::move(blk));
    }
    dec_up_ = Linear(c, c1, rng);
    dec_skip_ = Linear(c1, c1, rng);
    dec_out_ = Linear(c1, 1, rng);

    const int grid = spec_.seg_resolution / (kPatch * kPatch);
    query_pe_ = position_table(grid, grid, c);
    memory_pe_ = position_table(grid, grid, cm);
  }

  std::string name() const override { return "toy:" + std::to_string(seed_); }
  Tensor3 prepare_input(const ImageSlice& image) const override { return preprocess_for_segmentation(image, spec_); }
  int memory_resolution() const override { return spec_.seg_resolution / (kPatch * kPatch); }

 protected:
  void check_input(const Tensor3& input) const override {
    const int s = spec_.seg_resolution;
    if (input.height() != s || input.width() != s || input.channels() != 3)
      fail(ErrorCode::ShapeMismatch, name() + " expects a " + std::to_string(s) + "x" + std::to_string(s) +
                                         "x3 input, got " + std::to_string(input.height()) + "x" +
                                         std::to_string(input.width()) + "x" + std::to_string(input.channels()));
  }

  FeatureMap do_encode_image(const Tensor3& input) const override {
    auto skip = patchify(input, patch1_, true);
    FeatureMap out;
    out.grid = patchify(skip, patch2_, false);
    out.stride = kPatch * kPatch;
    out.skips.push_back(std::move(skip));
    return out;
  }

  Tensor3 do_encode_memory(const FeatureMap& features, const BinaryMask& mask) const override {
    const auto& f = features.grid;
    if (f.channels() != cfg_.feature_channels || f.height() != memory_resolution() || f.width() != memory_resolution())
      fail(ErrorCode::ShapeMismatch, name() + ": feature map does not come from this engine");
    Grid<float> soft(mask.height(), mask.width());
    std::transform(mask.values().begin(), mask.values().end(), soft.values().begin(),
                   [](std::uint8_t v) { return static_cast<float>(v); });
    const auto down = resize_area(soft, f.height(), f.width());

    const int cm = cfg_.memory_channels;
    Tensor3 fused(f.height(), f.width(), cm);
    std::vector<float> tmp(cm);
    for (std::size_t i = 0; i < f.pixels(); ++i) {
      mem_feat_.apply(f.pixel(i).data(), fused.pixel(i).data());
      const float m = down.values()[i];
      mem_mask_.apply(&m, tmp.data());
      for (int ch = 0; ch < cm; ++ch) fused.pixel(i)[ch] += tmp[ch];
    }
    // Light mixing: depthwise 3×3, GELU, pointwise, residual.
    Tensor3 mixed(f.height(), f.width(), cm);
    for (int y = 0; y < f.height(); ++y)
      for (int x = 0; x < f.width(); ++x) {
        for (int ch = 0; ch < cm; ++ch) {
          float acc = 0.0f;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const int yy = y + dy, xx = x + dx;
              if (yy < 0 || xx < 0 || yy >= f.height() || xx >= f.width()) continue;
              acc += mix_depthwise_[ch * 9 + (dy + 1) * 3 + (dx + 1)] * fused.at(yy, xx, ch);
            }
          tmp[ch] = gelu(acc);
        }
        float* dst = &mixed.at(y, x, 0);
        mix_pointwise_.apply(tmp.data(), dst);
        for (int ch = 0; ch < cm; ++ch) dst[ch] += fused.at(y, x, ch);
      }
    return mixed;
  }

  FeatureMap do_memory_attention(const FeatureMap& query, const MemoryBank& bank) const override {
    const int c = cfg_.feature_channels, cm = cfg_.memory_channels;
    const auto& g = query.grid;
    if (g.channels() != c || g.height() != memory_resolution() || g.width() != memory_resolution())
      fail(ErrorCode::ShapeMismatch, name() + ": query features do not come from this engine");

    // Memories form an unordered set: canonical order, no temporal encoding.
    std::vector<const MemoryEntry*> ordered;
    for (const auto& e : bank.entries()) {
      if (!e.memory_grid.same_shape(Tensor3(g.height(), g.width(), cm)))
        fail(ErrorCode::ShapeMismatch, name() + ": memory entry dims do not match the query grid");
      ordered.push_back(&e);
    }
    std::sort(ordered.begin(), ordered.end(), [](const MemoryEntry* a, const MemoryEntry* b) {
      if (a->source_sample_id != b->source_sample_id) return a->source_sample_id < b->source_sample_id;
      return std::lexicographical_compare(a->memory_grid.values().begin(), a->memory_grid.values().end(),
                                          b->memory_grid.values().begin(), b->memory_grid.values().end());
    });

    const std::size_t n = g.pixels();
    std::vector<float> memory_tokens, memory_keys_in;
    memory_tokens.reserve(ordered.size() * n * cm);
    for (const auto* e : ordered) {
      memory_tokens.insert(memory_tokens.end(), e->memory_grid.values().begin(), e->memory_grid.values().end());
      for (std::size_t i = 0; i < n * cm; ++i) memory_keys_in.push_back(e->memory_grid.values()[i] + memory_pe_[i]);
    }
    const std::size_t m = memory_tokens.size() / cm;

    std::vector<float> x(g.values().begin(), g.values().end());
    std::vector<float> normed(n * c), with_pe(n * c);
    for (const auto& blk : blocks_) {
      // Self-attention over the query image tokens.
      for (std::size_t i = 0; i < n; ++i) layer_norm(&x[i * c], &normed[i * c], c);
      for (std::size_t i = 0; i < n * c; ++i) with_pe[i] = normed[i] + query_pe_[i];
      auto sa = blk.self_o.apply_rows(attend(blk.self_q.apply_rows(with_pe, n), n, blk.self_k.apply_rows(with_pe, n),
                                             blk.self_v.apply_rows(normed, n), n, c),
                                      n);
      for (std::size_t i = 0; i < n * c; ++i) x[i] += sa[i];

      // Cross-attention to the memory bank.
      for (std::size_t i = 0; i < n; ++i) layer_norm(&x[i * c], &normed[i * c], c);
      for (std::size_t i = 0; i < n * c; ++i) with_pe[i] = normed[i] + query_pe_[i];
      auto ca = blk.cross_o.apply_rows(attend(blk.cross_q.apply_rows(with_pe, n), n,
                                              blk.cross_k.apply_rows(memory_keys_in, m),
                                              blk.cross_v.apply_rows(memory_tokens, m), m, c),
                                       n);
      for (std::size_t i = 0; i < n * c; ++i) x[i] += ca[i];

      // Feed-forward.
      for (std::size_t i = 0; i < n; ++i) layer_norm(&x[i * c], &normed[i * c], c);
      auto hidden = blk.mlp_in.apply_rows(normed, n);
      for (auto& h : hidden) h = gelu(h);
      auto ff = blk.mlp_out.apply_rows(hidden, n);
      for (std::size_t i = 0; i < n * c; ++i) x[i] += ff[i];
    }

    FeatureMap out;
    out.grid = Tensor3(g.height(), g.width(), c);
    std::copy(x.begin(), x.end(), out.grid.values().begin());
    return out;
  }

  Grid<float> do_decode(const FeatureMap& conditioned) const override {
    const auto& g = conditioned.grid;
    if (conditioned.skips.empty() || g.channels() != cfg_.feature_channels)
      fail(ErrorCode::ShapeMismatch, name() + ": decoder needs the encoder skip level");
    const auto& skip = conditioned.skips.front();
    if (skip.height() != g.height() * kPatch || skip.width() != g.width() * kPatch ||
        skip.channels() != cfg_.image_channels)
      fail(ErrorCode::ShapeMismatch, name() + ": skip level dims inconsistent with the feature grid");

    const int c1 = cfg_.image_channels;
    std::vector<float> up(c1), lateral(c1);
    Grid<float> logits(skip.height(), skip.width());
    for (int y = 0; y < skip.height(); ++y)
      for (int x = 0; x < skip.width(); ++x) {
        dec_up_.apply(g.pixel(static_cast<std::size_t>(y / kPatch) * g.width() + x / kPatch).data(), up.data());
        dec_skip_.apply(skip.pixel(static_cast<std::size_t>(y) * skip.width() + x).data(), lateral.data());
        for (int ch = 0; ch < c1; ++ch) up[ch] = gelu(up[ch] + lateral[ch]);
        dec_out_.apply(up.data(), &logits.at(y, x));
      }
    return logits;
  }

 private:
  // Non-overlapping kPatch×kPatch patches through a linear map.
  static Tensor3 patchify(const Tensor3& in, const Linear& proj, bool activate) {
    const int h = in.height() / kPatch, w = in.width() / kPatch, ci = in.channels();
    Tensor3 out(h, w, proj.out);
    std::vector<float> patch(static_cast<std::size_t>(kPatch) * kPatch * ci);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        std::size_t p = 0;
        for (int dy = 0; dy < kPatch; ++dy)
          for (int dx = 0; dx < kPatch; ++dx)
            for (int ch = 0; ch < ci; ++ch) patch[p++] = in.at(y * kPatch + dy, x * kPatch + dx, ch);
        float* dst = &out.at(y, x, 0);
        proj.apply(patch.data(), dst);
        if (activate)
          for (int ch = 0; ch < proj.out; ++ch) dst[ch] = gelu(dst[ch]);
      }
    return out;
  }

  std::uint64_t seed_;
  PreprocessSpec spec_;
  ToyEngineConfig cfg_;
  Linear patch1_, patch2_;
  Linear mem_feat_, mem_mask_, mix_pointwise_;
  std::vector<float> mix_depthwise_;
  std::vector<AttentionBlock> blocks_;
  Linear dec_up_, dec_skip_, dec_out_;
  std::vector<float> query_pe_, memory_pe_;
};

}  // namespace

EnginePtr make_toy_engine(std::uint64_t seed, const PreprocessSpec& spec, const ToyEngineConfig& config) {
  return std::make_shared<ToyEngine>(seed, spec, config);
}

}  // namespace ramseg
