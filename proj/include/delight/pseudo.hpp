#pragma once

/**
 * @file pseudo.hpp
 * @brief Pseudo triple {J_l, J_e, J_c} construction for Stage II supervision.
 *
 * Noise estimated from the denoiser's own output is transplanted onto a
 * randomly matched clean image; gamma correction with an estimated exponent
 * synthesizes the matching pseudo low-light image.
 */

#include <algorithm>
#include <cstdint>
#include <vector>

#include "delight/errors.hpp"
#include "delight/imaging.hpp"
#include "delight/rng.hpp"

namespace delight::img {

inline constexpr double kMeanClampLo = 1e-3;  // brightness means before log
inline constexpr double kLambdaMin = 1.0;     // gamma exponent bounds
inline constexpr double kLambdaMax = 10.0;

template <class T>
struct PseudoTriple {
  Image<T> j_low;       // J_l = J_e^λ
  Image<T> j_enhanced;  // J_e = clamp(J_c + I_n, 0, 1)
  Image<T> j_clean;     // J_c
  GrayMap<T> mask;      // M_J = max(illu(J_e) − illu(J_l), 0)
  T lambda = T(1);
  double clipped_fraction = 0.0;  // pixels where J_c + I_n left [0,1]
};

/// I_n = I_e − I_c. Values land in [−1, 1] for inputs in [0, 1].
template <class T>
Tensor<T> estimate_noise(const Image<T>& enhanced, const Image<T>& clean) {
  check_image(enhanced, "estimate_noise");
  check_image(clean, "estimate_noise");
  if (!enhanced.same_shape(clean)) throw std::invalid_argument("estimate_noise: shape mismatch");
  Tensor<T> out(enhanced.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = enhanced[i] - clean[i];
  return out;
}

/// Clamp a brightness mean away from the log singularities at 0 and 1.
template <class T>
T clamp_mean(T m) {
  return std::min(static_cast<T>(1.0 - kMeanClampLo), std::max(static_cast<T>(kMeanClampLo), m));
}

/// Build the full triple. Means are ε-clamped before the log; the exponent is
/// bounded to [1, 10] so near-black batches cannot produce extreme gammas.
template <class T>
PseudoTriple<T> make_pseudo_triple(const Image<T>& clean, const Tensor<T>& noise, T mean_low,
                                   T mean_enh, GammaFormula formula = GammaFormula::kCorrected) {
  check_image(clean, "make_pseudo_triple");
  if (!clean.same_shape(noise)) throw std::invalid_argument("make_pseudo_triple: shape mismatch");
  PseudoTriple<T> t;
  t.j_clean = clean;
  t.j_enhanced = Image<T>(clean.shape());
  int64_t clipped = 0;
  for (int64_t i = 0; i < clean.numel(); ++i) {
    const T v = clean[i] + noise[i];
    if (v < T(0) || v > T(1)) ++clipped;
    t.j_enhanced[i] = std::min(T(1), std::max(T(0), v));
  }
  t.clipped_fraction = static_cast<double>(clipped) / static_cast<double>(clean.numel());
  const T raw = estimate_gamma(clamp_mean(mean_low), clamp_mean(mean_enh), formula);
  t.lambda = std::min(static_cast<T>(kLambdaMax), std::max(static_cast<T>(kLambdaMin), raw));
  t.j_low = gamma_apply(t.j_enhanced, t.lambda);
  t.mask = illumination_mask(t.j_low, t.j_enhanced);
  return t;
}

/// Uniform random index into a clean pool, reproducible from the generator.
inline size_t match_clean_index(Rng& rng, size_t pool_size) {
  if (pool_size == 0) throw ConfigError("match_clean: clean pool is empty");
  return static_cast<size_t>(rng.uniform_int(static_cast<uint64_t>(pool_size)));
}

template <class T>
const Image<T>& match_clean(Rng& rng, const std::vector<Image<T>>& pool) {
  return pool[match_clean_index(rng, pool.size())];
}

}  // namespace delight::img
