#pragma once

/**
 * @file networks.hpp
 * @brief Stage I/II generators, patch discriminators, and the pluggable
 *        perceptual feature extractor.
 *
 * All parameters live in a named registry so initialization order, optimizer
 * traversal, and checkpoint layout stay deterministic.
 */

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "delight/autodiff.hpp"
#include "delight/errors.hpp"
#include "delight/imaging.hpp"
#include "delight/rng.hpp"
#include "delight/serialize.hpp"
#include "delight/sha256.hpp"

namespace delight::nn {

using ad::Var;

// ---------------------------------------------------------------------------
// Parameter registry
// ---------------------------------------------------------------------------

template <class T>
class Params {
 public:
  Var<T>& add(const std::string& name, Tensor<T> init, bool trainable = true) {
    if (map_.count(name)) throw std::invalid_argument("Params: duplicate name " + name);
    order_.push_back(name);
    auto [it, ok] = map_.emplace(name, Var<T>::leaf(std::move(init), trainable));
    // leaf() consults the grad-enabled flag; parameters must not depend on it
    it->second.set_requires_grad(trainable);
    return it->second;
  }

  Var<T>& get(const std::string& name) {
    auto it = map_.find(name);
    if (it == map_.end()) throw std::invalid_argument("Params: unknown name " + name);
    return it->second;
  }
  const Var<T>& get(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw std::invalid_argument("Params: unknown name " + name);
    return it->second;
  }
  bool has(const std::string& name) const { return map_.count(name) != 0; }

  const std::vector<std::string>& names() const { return order_; }
  size_t size() const { return order_.size(); }

  int64_t scalar_count() const {
    int64_t n = 0;
    for (const auto& name : order_) n += map_.at(name).numel();
    return n;
  }

  void set_trainable(bool trainable) {
    for (const auto& name : order_) map_.at(name).set_requires_grad(trainable);
  }

  void zero_grads() {
    for (const auto& name : order_) map_.at(name).zero_grad();
  }

  /// Overwrite values by name (shapes must match); used by checkpoint load.
  void load_values(const std::map<std::string, Tensor<T>>& values) {
    for (const auto& name : order_) {
      auto it = values.find(name);
      if (it == values.end()) throw ConfigError("Params: checkpoint missing tensor " + name);
      Var<T>& v = map_.at(name);
      if (v.value().shape() != it->second.shape())
        throw ConfigError("Params: shape mismatch for tensor " + name);
      v.value() = it->second;
    }
  }

  bool all_finite() const {
    for (const auto& name : order_)
      if (!map_.at(name).value().all_finite()) return false;
    return true;
  }

 private:
  std::vector<std::string> order_;
  std::unordered_map<std::string, Var<T>> map_;
};

namespace detail {

template <class T>
Tensor<T> gaussian(Rng& rng, std::vector<int64_t> shape, double stddev = 0.02) {
  Tensor<T> t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

/// Conv block registration. A conv that feeds a BN carries no bias.
template <class T>
void add_conv(Params<T>& p, Rng& rng, const std::string& name, int64_t co, int64_t ci, int64_t k,
              bool bias) {
  p.add(name + ".w", gaussian<T>(rng, {co, ci, k, k}));
  if (bias) p.add(name + ".b", Tensor<T>({co}));
}

template <class T>
void add_bn(Params<T>& p, const std::string& name, int64_t c) {
  p.add(name + ".bn_g", Tensor<T>::full({c}, T(1)));
  p.add(name + ".bn_b", Tensor<T>({c}));
}

template <class T>
Var<T> conv(const Params<T>& p, const std::string& name, const Var<T>& x, int64_t stride,
            int64_t pad) {
  std::optional<Var<T>> bias;
  if (p.has(name + ".b")) bias = p.get(name + ".b");
  return ad::conv2d(x, p.get(name + ".w"), bias, stride, pad);
}

template <class T>
Var<T> bn(const Params<T>& p, const std::string& name, const Var<T>& x) {
  return ad::batchnorm(x, p.get(name + ".bn_g"), p.get(name + ".bn_b"));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stage I generator: CCM CCM CCM P DDD
// ---------------------------------------------------------------------------

template <class T>
class Stage1Generator {
 public:
  struct Spec {
    int64_t base_channels = 32;
    std::vector<int64_t> pyramid_scales{1, 2, 4, 16};
    T slope = static_cast<T>(0.2);
  };

  Stage1Generator(Spec spec, uint64_t seed) : spec_(std::move(spec)) {
    const int64_t b = spec_.base_channels;
    Rng rng = Rng::substream(seed, "init");
    // encoder: first block carries a bias (no BN), the rest feed BN
    detail::add_conv(params_, rng, "e1", b, 3, 3, true);
    detail::add_conv(params_, rng, "e2", b, b, 3, false);
    detail::add_bn(params_, "e2", b);
    detail::add_conv(params_, rng, "e3", 2 * b, b, 3, false);
    detail::add_bn(params_, "e3", 2 * b);
    detail::add_conv(params_, rng, "e4", 2 * b, 2 * b, 3, false);
    detail::add_bn(params_, "e4", 2 * b);
    detail::add_conv(params_, rng, "e5", 4 * b, 2 * b, 3, false);
    detail::add_bn(params_, "e5", 4 * b);
    detail::add_conv(params_, rng, "e6", 4 * b, 4 * b, 3, false);
    detail::add_bn(params_, "e6", 4 * b);
    // pyramid: one 1×1 conv per scale, then a fusing conv over the concat
    for (int64_t s : spec_.pyramid_scales)
      detail::add_conv(params_, rng, "p" + std::to_string(s), b, 4 * b, 1, true);
    const int64_t fused_in = 4 * b + b * static_cast<int64_t>(spec_.pyramid_scales.size());
    detail::add_conv(params_, rng, "fuse", 4 * b, fused_in, 3, false);
    detail::add_bn(params_, "fuse", 4 * b);
    // decoder
    detail::add_conv(params_, rng, "d1a", 2 * b, 4 * b, 3, true);
    detail::add_conv(params_, rng, "d1b", 2 * b, 2 * b, 3, false);
    detail::add_bn(params_, "d1", 2 * b);
    detail::add_conv(params_, rng, "d2a", b, 2 * b, 3, true);
    detail::add_conv(params_, rng, "d2b", b, b, 3, false);
    detail::add_bn(params_, "d2", b);
    // last block: sigmoid output, no BN so the final bias reaches the output
    detail::add_conv(params_, rng, "d3a", 3, b, 3, true);
    detail::add_conv(params_, rng, "d3b", 3, 3, 3, true);
  }

  const Spec& spec() const { return spec_; }
  Params<T>& params() { return params_; }
  const Params<T>& params() const { return params_; }

  /// Pyramid module on a bottleneck feature map. `strict` enforces the
  /// public ≥16 spatial contract; the generator itself caps branch sizes so
  /// smaller bottlenecks (e.g. 64×64 inputs) still work.
  Var<T> pyramid(const Var<T>& f, bool strict = true) const {
    const auto& s = f.shape();
    if (s.size() != 4) throw std::invalid_argument("pyramid: NCHW expected");
    const int64_t h = s[2], w = s[3];
    if (strict && (h < 16 || w < 16))
      throw std::invalid_argument("pyramid: spatial size must be at least 16");
    std::vector<Var<T>> branches{f};
    for (int64_t scale : spec_.pyramid_scales) {
      const int64_t sh = std::min(scale, h), sw = std::min(scale, w);
      Var<T> p = ad::adaptive_avgpool(f, sh, sw);
      p = ad::relu(detail::conv(params_, "p" + std::to_string(scale), p, 1, 0));
      branches.push_back(ad::resize_bilinear(p, h, w));
    }
    Var<T> fused = detail::conv(params_, "fuse", ad::concat_channels(branches), 1, 1);
    return ad::leaky_relu(detail::bn(params_, "fuse", fused), spec_.slope);
  }

  /// I_l (N×3×H×W, H and W divisible by 8) → illumination map in [ε_S, 1].
  Var<T> forward(const Var<T>& x) const {
    const auto& s = x.shape();
    if (s.size() != 4 || s[1] != 3) throw std::invalid_argument("stage1_forward: N×3×H×W expected");
    if (s[2] % 8 != 0 || s[3] % 8 != 0)
      throw std::invalid_argument("stage1_forward: H and W must be divisible by 8");
    const T sl = spec_.slope;
    Var<T> h = ad::leaky_relu(detail::conv(params_, "e1", x, 1, 1), sl);
    h = ad::leaky_relu(detail::bn(params_, "e2", detail::conv(params_, "e2", h, 1, 1)), sl);
    h = ad::maxpool2(h);
    h = ad::leaky_relu(detail::bn(params_, "e3", detail::conv(params_, "e3", h, 1, 1)), sl);
    h = ad::leaky_relu(detail::bn(params_, "e4", detail::conv(params_, "e4", h, 1, 1)), sl);
    h = ad::maxpool2(h);
    h = ad::leaky_relu(detail::bn(params_, "e5", detail::conv(params_, "e5", h, 1, 1)), sl);
    h = ad::leaky_relu(detail::bn(params_, "e6", detail::conv(params_, "e6", h, 1, 1)), sl);
    h = ad::maxpool2(h);
    h = pyramid(h, /*strict=*/false);
    h = ad::upsample_nearest(h, 2);
    h = ad::leaky_relu(
        detail::bn(params_, "d1",
                   detail::conv(params_, "d1b", detail::conv(params_, "d1a", h, 1, 1), 1, 1)),
        sl);
    h = ad::upsample_nearest(h, 2);
    h = ad::leaky_relu(
        detail::bn(params_, "d2",
                   detail::conv(params_, "d2b", detail::conv(params_, "d2a", h, 1, 1), 1, 1)),
        sl);
    h = ad::upsample_nearest(h, 2);
    h = ad::sigmoid(detail::conv(params_, "d3b", detail::conv(params_, "d3a", h, 1, 1), 1, 1));
    return ad::max_scalar(h, static_cast<T>(img::kEpsS));
  }

 private:
  Spec spec_;
  Params<T> params_;
};

// ---------------------------------------------------------------------------
// Stage II generator: CC RRRRRR DDD
// ---------------------------------------------------------------------------

template <class T>
class Stage2Generator {
 public:
  struct Spec {
    int64_t base_channels = 32;
    int64_t n_res_blocks = 6;
    T slope = static_cast<T>(0.2);
  };

  Stage2Generator(Spec spec, uint64_t seed) : spec_(std::move(spec)) {
    const int64_t b = spec_.base_channels;
    Rng rng = Rng::substream(seed, "init");
    detail::add_conv(params_, rng, "c1", b, 7, 3, true);  // first block: no BN
    detail::add_conv(params_, rng, "c2", 2 * b, b, 3, false);
    detail::add_bn(params_, "c2", 2 * b);
    for (int64_t i = 1; i <= spec_.n_res_blocks; ++i) {
      const std::string r = "r" + std::to_string(i);
      detail::add_conv(params_, rng, r + "a", 2 * b, 2 * b, 3, false);
      detail::add_bn(params_, r + "a", 2 * b);
      detail::add_conv(params_, rng, r + "b", 2 * b, 2 * b, 3, false);
      detail::add_bn(params_, r + "b", 2 * b);
    }
    detail::add_conv(params_, rng, "d1a", b, 2 * b, 3, true);
    detail::add_conv(params_, rng, "d1b", b, b, 3, false);
    detail::add_bn(params_, "d1", b);
    detail::add_conv(params_, rng, "d2a", b, b, 3, true);
    detail::add_conv(params_, rng, "d2b", b, b, 3, false);
    detail::add_bn(params_, "d2", b);
    detail::add_conv(params_, rng, "d3a", 3, b, 3, true);
    detail::add_conv(params_, rng, "d3b", 3, 3, 3, true);
  }

  const Spec& spec() const { return spec_; }
  Params<T>& params() { return params_; }
  const Params<T>& params() const { return params_; }

  /// I_c = G_n(I_l, I_e, M). Inputs N×3×H×W, N×3×H×W, N×1×H×W; H, W
  /// divisible by 4 (two stride-2 encoder convs).
  Var<T> forward(const Var<T>& low, const Var<T>& enhanced, const Var<T>& mask) const {
    const auto& s = low.shape();
    if (s.size() != 4 || s[1] != 3) throw std::invalid_argument("stage2_forward: N×3×H×W expected");
    if (enhanced.shape() != s) throw std::invalid_argument("stage2_forward: shape mismatch");
    const auto& ms = mask.shape();
    if (ms.size() != 4 || ms[1] != 1 || ms[0] != s[0] || ms[2] != s[2] || ms[3] != s[3])
      throw std::invalid_argument("stage2_forward: mask must be N×1×H×W");
    if (s[2] % 4 != 0 || s[3] % 4 != 0)
      throw std::invalid_argument("stage2_forward: H and W must be divisible by 4");
    const T sl = spec_.slope;
    Var<T> h = ad::concat_channels<T>({low, enhanced, mask});
    h = ad::leaky_relu(detail::conv(params_, "c1", h, 2, 1), sl);
    h = ad::leaky_relu(detail::bn(params_, "c2", detail::conv(params_, "c2", h, 2, 1)), sl);
    for (int64_t i = 1; i <= spec_.n_res_blocks; ++i) {
      const std::string r = "r" + std::to_string(i);
      Var<T> y = ad::leaky_relu(
          detail::bn(params_, r + "a", detail::conv(params_, r + "a", h, 1, 1)), sl);
      y = detail::bn(params_, r + "b", detail::conv(params_, r + "b", y, 1, 1));
      h = ad::add(h, y);
    }
    h = ad::upsample_nearest(h, 2);
    h = ad::leaky_relu(
        detail::bn(params_, "d1",
                   detail::conv(params_, "d1b", detail::conv(params_, "d1a", h, 1, 1), 1, 1)),
        sl);
    h = ad::upsample_nearest(h, 2);
    h = ad::leaky_relu(
        detail::bn(params_, "d2",
                   detail::conv(params_, "d2b", detail::conv(params_, "d2a", h, 1, 1), 1, 1)),
        sl);
    // last block resamples by 1
    return ad::sigmoid(detail::conv(params_, "d3b", detail::conv(params_, "d3a", h, 1, 1), 1, 1));
  }

 private:
  Spec spec_;
  Params<T> params_;
};

// ---------------------------------------------------------------------------
// Discriminators
// ---------------------------------------------------------------------------

inline constexpr int64_t kDiscMinInput = 32;  // smallest H/W the 5-layer stack accepts

template <class T>
class Discriminator {
 public:
  struct Spec {
    int64_t base_channels = 64;
    int64_t in_channels = 3;
    T slope = static_cast<T>(0.2);
  };

  Discriminator(Spec spec, uint64_t seed) : spec_(std::move(spec)) {
    Rng rng = Rng::substream(seed, "init");
    init_into(params_, rng, "");
  }

  // Shared-seed construction for multi-scale stacks.
  Discriminator(Spec spec, Rng& rng, const std::string& prefix) : spec_(std::move(spec)) {
    init_into(params_, rng, prefix);
    prefix_ = prefix;
  }

  const Spec& spec() const { return spec_; }
  Params<T>& params() { return params_; }
  const Params<T>& params() const { return params_; }

  /// Per-sample realness score: mean of the final patch-score map.
  Var<T> forward(const Var<T>& x) const {
    const auto& s = x.shape();
    if (s.size() != 4 || s[1] != spec_.in_channels)
      throw std::invalid_argument("discriminator_forward: wrong input channels");
    if (s[2] < kDiscMinInput || s[3] < kDiscMinInput)
      throw std::invalid_argument("discriminator_forward: input below minimum receptive size");
    const T sl = spec_.slope;
    Var<T> h = x;
    for (int i = 1; i <= 4; ++i) {
      h = detail::conv(params_, prefix_ + "l" + std::to_string(i), h, 2, 1);
      h = ad::leaky_relu(h, sl);
    }
    h = detail::conv(params_, prefix_ + "l5", h, 1, 1);
    return ad::mean_per_sample(h);
  }

 private:
  void init_into(Params<T>& p, Rng& rng, const std::string& prefix) {
    const int64_t b = spec_.base_channels;
    const int64_t chans[6] = {spec_.in_channels, b, 2 * b, 4 * b, 8 * b, 1};
    for (int i = 1; i <= 5; ++i)
      detail::add_conv(p, rng, prefix + "l" + std::to_string(i), chans[i], chans[i - 1], 4, true);
  }

  Spec spec_;
  Params<T> params_;
  std::string prefix_;
};

/// Two-scale discriminator: full resolution plus 2× average-pooled input.
/// The per-scale critics have independent parameters.
template <class T>
class MultiscaleDiscriminator {
 public:
  using Spec = typename Discriminator<T>::Spec;

  MultiscaleDiscriminator(Spec spec, uint64_t seed) {
    Rng rng = Rng::substream(seed, "init");
    scales_.emplace_back(spec, rng, "s0.");
    scales_.emplace_back(spec, rng, "s1.");
    // merge both parameter sets into one registry view for optim/checkpoint
  }

  std::vector<Var<T>> forward(const Var<T>& x) const {
    const auto& s = x.shape();
    if (s.size() != 4) throw std::invalid_argument("multiscale_forward: NCHW expected");
    if (s[2] % 2 != 0 || s[3] % 2 != 0)
      throw std::invalid_argument("multiscale_forward: dims must be divisible by 2");
    std::vector<Var<T>> out;
    out.push_back(scales_[0].forward(x));
    out.push_back(scales_[1].forward(ad::avgpool(x, 2)));
    return out;
  }

  Discriminator<T>& scale(size_t i) { return scales_.at(i); }
  const Discriminator<T>& scale(size_t i) const { return scales_.at(i); }
  size_t n_scales() const { return scales_.size(); }

 private:
  std::vector<Discriminator<T>> scales_;
};

// ---------------------------------------------------------------------------
// Perceptual feature extractor (VGG19 topology)
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& vgg_layer_names() {
  static const std::vector<std::string> names = {"relu1_2", "relu2_2", "relu3_2", "relu4_4",
                                                 "relu5_4"};
  return names;
}

namespace detail {

/// Per-channel (x*scale + shift) for fixed constants, e.g. dataset whitening.
template <class T>
Var<T> channel_affine(const Var<T>& x, std::array<T, 3> scale, std::array<T, 3> shift) {
  const auto& s = x.shape();
  if (s.size() != 4 || s[1] != 3) throw std::invalid_argument("channel_affine: N×3×H×W expected");
  const int64_t n = s[0], hw = s[2] * s[3];
  Tensor<T> out(s);
  for (int64_t in = 0; in < n; ++in)
    for (int64_t c = 0; c < 3; ++c) {
      const T* src = x.value().data() + (in * 3 + c) * hw;
      T* dst = out.data() + (in * 3 + c) * hw;
      for (int64_t i = 0; i < hw; ++i) dst[i] = src[i] * scale[c] + shift[c];
    }
  return ad::detail::make_op<T>(std::move(out), {x}, [n, hw, scale](ad::Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    Tensor<T>& buf = p.grad_buffer();
    for (int64_t in = 0; in < n; ++in)
      for (int64_t c = 0; c < 3; ++c) {
        const T* g = self.grad.data() + (in * 3 + c) * hw;
        T* dst = buf.data() + (in * 3 + c) * hw;
        for (int64_t i = 0; i < hw; ++i) dst[i] += g[i] * scale[c];
      }
  });
}

}  // namespace detail

template <class T>
class VggExtractor {
 public:
  enum class Kind { kTest, kReference };

  struct Spec {
    Kind kind = Kind::kTest;
    double width_mult = 1.0;  // channel scaling for light test extractors
    uint64_t seed = 0;        // test kind only
    std::string weights_path;    // reference kind only
    std::string weights_sha256;  // optional integrity pin (hex, lowercase)
  };

  explicit VggExtractor(Spec spec) : spec_(std::move(spec)) {
    build_channel_plan();
    if (spec_.kind == Kind::kTest) {
      Rng rng = Rng::substream(spec_.seed, "init");
      register_params([&](const std::string& name, std::vector<int64_t> shape, bool is_bias) {
        params_.add(name, is_bias ? Tensor<T>(shape) : detail::gaussian<T>(rng, shape),
                    /*trainable=*/false);
      });
    } else {
      load_reference_weights();
    }
  }

  const std::vector<std::string>& layers() const { return vgg_layer_names(); }
  Params<T>& params() { return params_; }
  const Params<T>& params() const { return params_; }

  /// Features at the requested layers, shallow to deep. The forward pass stops
  /// at the deepest requested layer.
  std::vector<Var<T>> extract(const Var<T>& x, const std::vector<std::string>& wanted) const {
    const auto& names = vgg_layer_names();
    std::vector<int> tap_block(names.size());
    int deepest = -1;
    std::unordered_map<std::string, size_t> out_slot;
    for (const auto& layer : wanted) {
      auto it = std::find(names.begin(), names.end(), layer);
      if (it == names.end())
        throw ConfigError("feature extractor does not expose layer '" + layer + "'");
      const int block = static_cast<int>(it - names.begin());
      deepest = std::max(deepest, block);
      out_slot[layer] = out_slot.size();
    }
    if (wanted.empty()) return {};

    const auto& s = x.shape();
    if (s.size() != 4 || s[1] != 3) throw std::invalid_argument("feature_extract: N×3×H×W expected");
    const int64_t div = int64_t(1) << deepest;  // one maxpool before each deeper block
    if (s[2] % div != 0 || s[3] % div != 0)
      throw std::invalid_argument("feature_extract: dims must be divisible by " +
                                  std::to_string(div) + " for the requested layers");

    // ImageNet whitening keeps the reference weights meaningful; applied for
    // both kinds so test and reference extractors share one code path.
    static constexpr std::array<double, 3> kMean = {0.485, 0.456, 0.406};
    static constexpr std::array<double, 3> kStd = {0.229, 0.224, 0.225};
    std::array<T, 3> scale, shift;
    for (int c = 0; c < 3; ++c) {
      scale[static_cast<size_t>(c)] = static_cast<T>(1.0 / kStd[static_cast<size_t>(c)]);
      shift[static_cast<size_t>(c)] =
          static_cast<T>(-kMean[static_cast<size_t>(c)] / kStd[static_cast<size_t>(c)]);
    }
    Var<T> h = detail::channel_affine(x, scale, shift);

    std::vector<Var<T>> features(wanted.size());
    for (int block = 0; block <= deepest; ++block) {
      if (block > 0) h = ad::maxpool2(h);
      for (int ci = 0; ci < kConvsPerBlock[static_cast<size_t>(block)]; ++ci) {
        h = ad::relu(detail::conv(params_, conv_name(block, ci), h, 1, 1));
        if (ci == kTapConv[static_cast<size_t>(block)]) {
          auto it = out_slot.find(names[static_cast<size_t>(block)]);
          if (it != out_slot.end()) features[it->second] = h;
        }
      }
    }
    return features;
  }

 private:
  static constexpr std::array<int, 5> kConvsPerBlock = {2, 2, 4, 4, 4};
  static constexpr std::array<int, 5> kBaseChannels = {64, 128, 256, 512, 512};
  // conv index (0-based) whose activation each named layer taps
  static constexpr std::array<int, 5> kTapConv = {1, 1, 1, 3, 3};

  static std::string conv_name(int block, int ci) {
    return "conv" + std::to_string(block + 1) + "_" + std::to_string(ci + 1);
  }

  void build_channel_plan() {
    for (int b = 0; b < 5; ++b)
      channels_[static_cast<size_t>(b)] = std::max<int64_t>(
          1, static_cast<int64_t>(std::llround(kBaseChannels[static_cast<size_t>(b)] *
                                               spec_.width_mult)));
  }

  template <class AddFn>
  void register_params(AddFn&& add) {
    int64_t ci = 3;
    for (int b = 0; b < 5; ++b) {
      const int64_t co = channels_[static_cast<size_t>(b)];
      for (int k = 0; k < kConvsPerBlock[static_cast<size_t>(b)]; ++k) {
        const int64_t in_ch = (k == 0) ? ci : co;
        add(conv_name(b, k) + ".w", std::vector<int64_t>{co, in_ch, 3, 3}, false);
        add(conv_name(b, k) + ".b", std::vector<int64_t>{co}, true);
      }
      ci = co;
    }
  }

  void load_reference_weights() {
    std::ifstream in(spec_.weights_path, std::ios::binary);
    if (!in)
      throw ConfigError("feature extractor weights not found at '" + spec_.weights_path +
                        "'; download the VGG19 weight artifact and set features.weights_path");
    std::ostringstream buf;
    buf << in.rdbuf();
    const std::string bytes = buf.str();
    if (!spec_.weights_sha256.empty()) {
      const std::string got = Sha256::hex_of(bytes.data(), bytes.size());
      if (got != spec_.weights_sha256)
        throw ConfigError("feature extractor weights failed integrity check: sha256 " + got +
                          " does not match pinned " + spec_.weights_sha256);
    }
    std::istringstream is(bytes);
    std::map<std::string, Tensor<T>> loaded;
    while (is.peek() != std::char_traits<char>::eof()) {
      auto [name, t] = ser::read_tensor<T>(is);
      loaded.emplace(std::move(name), std::move(t));
    }
    register_params([&](const std::string& name, std::vector<int64_t> shape, bool) {
      auto it = loaded.find(name);
      if (it == loaded.end())
        throw ConfigError("feature extractor weights missing tensor " + name);
      if (it->second.shape() != shape)
        throw ConfigError("feature extractor weight " + name + " has shape " +
                          Tensor<T>::shape_str(it->second.shape()) + ", expected " +
                          Tensor<T>::shape_str(shape));
      params_.add(name, std::move(it->second), /*trainable=*/false);
    });
  }

  Spec spec_;
  std::array<int64_t, 5> channels_{};
  Params<T> params_;
};

}  // namespace delight::nn
