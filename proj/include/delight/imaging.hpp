#pragma once

/**
 * @file imaging.hpp
 * @brief Retinex decomposition primitives on H×W×3 images in [0,1].
 *
 * These are the reference (non-differentiable) image operations. Training
 * graphs use the autodiff counterparts; tests cross-check the two.
 */

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "delight/rng.hpp"
#include "delight/tensor.hpp"

namespace delight::img {

inline constexpr double kEpsS = 0.01;    // division floor for illumination maps
inline constexpr double kEpsIN = 1e-5;   // instance-norm variance floor
inline constexpr double kLumaR = 0.299;  // BT.601
inline constexpr double kLumaG = 0.587;
inline constexpr double kLumaB = 0.114;

// Image / IlluminationMap: H×W×3. GrayMap: H×W. All values real in [0,1]
// (illumination maps additionally in [eps_S, 1]).
template <class T>
using Image = Tensor<T>;
template <class T>
using GrayMap = Tensor<T>;

template <class T>
struct Patch {
  Tensor<T> pixels;  // h×w×3
  int64_t row = 0;   // origin in the source image
  int64_t col = 0;
};

template <class T>
void check_image(const Tensor<T>& im, const char* what) {
  if (im.rank() != 3 || im.shape()[2] != 3)
    throw std::invalid_argument(std::string(what) + ": H×W×3 image expected, got " +
                                Tensor<T>::shape_str(im.shape()));
}

/// Enhanced image from Eq. 1: I_e = clamp(I_l / S, 0, 1).
template <class T>
Image<T> retinex_recover(const Image<T>& low, const Image<T>& illu, T eps_s = static_cast<T>(kEpsS)) {
  check_image(low, "retinex_recover");
  check_image(illu, "retinex_recover");
  if (!low.same_shape(illu)) throw std::invalid_argument("retinex_recover: shape mismatch");
  for (int64_t i = 0; i < illu.numel(); ++i)
    if (illu[i] < eps_s) throw std::domain_error("retinex_recover: illumination below floor");
  Image<T> out(low.shape());
  for (int64_t i = 0; i < low.numel(); ++i)
    out[i] = std::min(T(1), std::max(T(0), low[i] / illu[i]));
  return out;
}

/// Gray-scale illumination illu(·): BT.601 luma.
template <class T>
GrayMap<T> grayscale_illu(const Image<T>& im) {
  check_image(im, "grayscale_illu");
  const int64_t h = im.shape()[0], w = im.shape()[1];
  GrayMap<T> out({h, w});
  for (int64_t i = 0; i < h * w; ++i)
    out[i] = static_cast<T>(kLumaR * im[i * 3] + kLumaG * im[i * 3 + 1] + kLumaB * im[i * 3 + 2]);
  return out;
}

/// M = max(illu(I_e) − illu(I_l), 0): how much illumination was added.
template <class T>
GrayMap<T> illumination_mask(const Image<T>& low, const Image<T>& enhanced) {
  check_image(low, "illumination_mask");
  check_image(enhanced, "illumination_mask");
  if (!low.same_shape(enhanced)) throw std::invalid_argument("illumination_mask: shape mismatch");
  GrayMap<T> a = grayscale_illu(low);
  GrayMap<T> b = grayscale_illu(enhanced);
  for (int64_t i = 0; i < a.numel(); ++i) a[i] = std::max(T(0), b[i] - a[i]);
  return a;
}

/// Gamma correction J^λ.
template <class T>
Image<T> gamma_apply(const Image<T>& im, T lambda) {
  check_image(im, "gamma_apply");
  if (!(lambda > T(0))) throw std::domain_error("gamma_apply: lambda must be positive");
  Image<T> out(im.shape());
  for (int64_t i = 0; i < im.numel(); ++i)
    out[i] = static_cast<T>(std::pow(static_cast<double>(im[i]), static_cast<double>(lambda)));
  return out;
}

enum class GammaFormula { kCorrected, kPaper };

/// Exponent that maps the enhanced brightness back to the low-light one:
/// corrected λ = log(mean_low)/log(mean_enhanced) so m_e^λ = m_l on constant
/// images; kPaper keeps the literal (inverted) form.
template <class T>
T estimate_gamma(T mean_low, T mean_enhanced, GammaFormula formula = GammaFormula::kCorrected) {
  if (!(mean_low > T(0) && mean_low < T(1)) || !(mean_enhanced > T(0) && mean_enhanced < T(1)))
    throw std::domain_error("estimate_gamma: means must lie strictly inside (0,1)");
  const double ll = std::log(static_cast<double>(mean_low));
  const double le = std::log(static_cast<double>(mean_enhanced));
  const double lambda = formula == GammaFormula::kCorrected ? ll / le : le / ll;
  return static_cast<T>(lambda);
}

/// Per-channel zero-mean unit-variance normalization of a C×H×W feature
/// array; variance floored at eps so constant channels map to zero.
template <class T>
Tensor<T> instance_normalize(const Tensor<T>& f, T eps = static_cast<T>(kEpsIN)) {
  if (f.rank() != 3) throw std::invalid_argument("instance_normalize: C×H×W expected");
  const int64_t c = f.shape()[0], hw = f.shape()[1] * f.shape()[2];
  if (hw < 1) throw std::invalid_argument("instance_normalize: empty spatial dims");
  Tensor<T> out(f.shape());
  for (int64_t ic = 0; ic < c; ++ic) {
    const T* src = f.data() + ic * hw;
    double mean = 0.0;
    for (int64_t i = 0; i < hw; ++i) mean += static_cast<double>(src[i]);
    mean /= static_cast<double>(hw);
    double var = 0.0;
    for (int64_t i = 0; i < hw; ++i) {
      const double d = static_cast<double>(src[i]) - mean;
      var += d * d;
    }
    var /= static_cast<double>(hw);
    const double inv = 1.0 / std::sqrt(std::max(var, static_cast<double>(eps)));
    T* dst = out.data() + ic * hw;
    for (int64_t i = 0; i < hw; ++i)
      dst[i] = static_cast<T>((static_cast<double>(src[i]) - mean) * inv);
  }
  return out;
}

/// Average pooling by an integer factor; edge-replicates up to the next
/// multiple when factor does not divide the dimensions.
template <class T>
Image<T> avg_downsample(const Image<T>& im, int64_t factor) {
  check_image(im, "avg_downsample");
  if (factor < 1) throw std::invalid_argument("avg_downsample: factor must be >= 1");
  if (factor == 1) return im;
  const int64_t h = im.shape()[0], w = im.shape()[1];
  const int64_t oh = (h + factor - 1) / factor, ow = (w + factor - 1) / factor;
  Image<T> out({oh, ow, 3});
  for (int64_t r = 0; r < oh; ++r)
    for (int64_t c = 0; c < ow; ++c)
      for (int64_t ch = 0; ch < 3; ++ch) {
        double sum = 0.0;
        for (int64_t i = 0; i < factor; ++i)
          for (int64_t j = 0; j < factor; ++j) {
            const int64_t rr = std::min(r * factor + i, h - 1);
            const int64_t cc = std::min(c * factor + j, w - 1);
            sum += static_cast<double>(im.at3(rr, cc, ch));
          }
        out.at3(r, c, ch) = static_cast<T>(sum / static_cast<double>(factor * factor));
      }
  return out;
}

/// `count` square patches with uniformly random in-bounds origins
/// (row drawn before column), reproducible from the generator state.
template <class T>
std::vector<Patch<T>> crop_patches(const Image<T>& im, int64_t size, int64_t count, Rng& rng) {
  check_image(im, "crop_patches");
  const int64_t h = im.shape()[0], w = im.shape()[1];
  if (size < 1 || size > h || size > w)
    throw std::invalid_argument("crop_patches: patch size exceeds image dimensions");
  if (count < 0) throw std::invalid_argument("crop_patches: negative count");
  std::vector<Patch<T>> patches;
  patches.reserve(static_cast<size_t>(count));
  for (int64_t k = 0; k < count; ++k) {
    Patch<T> p;
    p.row = static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(h - size + 1)));
    p.col = static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(w - size + 1)));
    p.pixels = Tensor<T>({size, size, 3});
    for (int64_t r = 0; r < size; ++r)
      std::copy_n(im.data() + ((p.row + r) * w + p.col) * 3, size * 3,
                  p.pixels.data() + r * size * 3);
    patches.push_back(std::move(p));
  }
  return patches;
}

// ---------------------------------------------------------------------------
// Layout bridges between reference (HWC) images and training (NCHW) tensors
// ---------------------------------------------------------------------------

/// Stack H×W×C images into an N×C×H×W tensor.
template <class T>
Tensor<T> to_nchw(const std::vector<Tensor<T>>& images) {
  if (images.empty()) throw std::invalid_argument("to_nchw: empty batch");
  const auto& s = images[0].shape();
  if (s.size() != 3) throw std::invalid_argument("to_nchw: H×W×C images expected");
  const int64_t h = s[0], w = s[1], c = s[2], n = static_cast<int64_t>(images.size());
  Tensor<T> out({n, c, h, w});
  for (int64_t in = 0; in < n; ++in) {
    if (images[static_cast<size_t>(in)].shape() != s)
      throw std::invalid_argument("to_nchw: mixed shapes in batch");
    const T* src = images[static_cast<size_t>(in)].data();
    for (int64_t ch = 0; ch < c; ++ch) {
      T* dst = out.data() + ((in * c + ch) * h) * w;
      for (int64_t i = 0; i < h * w; ++i) dst[i] = src[i * c + ch];
    }
  }
  return out;
}

template <class T>
Tensor<T> to_nchw(const Tensor<T>& image) {
  return to_nchw(std::vector<Tensor<T>>{image});
}

/// Extract sample `n` of an N×C×H×W tensor as an H×W×C image.
template <class T>
Tensor<T> to_hwc(const Tensor<T>& nchw, int64_t n = 0) {
  if (nchw.rank() != 4) throw std::invalid_argument("to_hwc: NCHW expected");
  const int64_t c = nchw.shape()[1], h = nchw.shape()[2], w = nchw.shape()[3];
  if (n < 0 || n >= nchw.shape()[0]) throw std::invalid_argument("to_hwc: sample out of range");
  Tensor<T> out({h, w, c});
  for (int64_t ch = 0; ch < c; ++ch) {
    const T* src = nchw.data() + ((n * c + ch) * h) * w;
    for (int64_t i = 0; i < h * w; ++i) out[i * c + ch] = src[i];
  }
  return out;
}

}  // namespace delight::img
