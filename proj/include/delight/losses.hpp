#pragma once

/**
 * @file losses.hpp
 * @brief Training objectives: relativistic/vanilla LSGAN, instance-normalized
 *        perceptual loss, color-angle loss, adaptive content loss, content
 *        loss, and the weighted Stage II total.
 *
 * Every loss is built from autodiff ops, so analytic gradients come for free
 * and are validated against finite differences in the test suite.
 */

#include <cmath>
#include <string>
#include <vector>

#include "delight/autodiff.hpp"
#include "delight/tensor.hpp"

namespace delight::nn {

using ad::Var;

inline constexpr double kColorDenomFloor = 1e-24;  // squared-norm product floor
inline constexpr int64_t kColorDownsample = 4;

struct LossWeights {
  double lambda_color = 10.0;  // λ_c   (Eq. 11)
  double lambda_cp = 1.0;      // λ_C^p (Eq. 11)
  double lambda_cr = 1.0;      // λ_C^r (Eq. 11)
  double gamma_p = 10.0;       // Eq. 9 pixel term
  double gamma_c = 10.0;       // Eq. 10 pixel term
};

namespace detail {

template <class T>
void check_scores(const Var<T>& s, const char* op) {
  if (!s.defined() || s.numel() < 1)
    throw std::invalid_argument(std::string(op) + ": empty score batch");
}

template <class T>
Var<T> mean_sq(const Var<T>& x) {
  return ad::mean_all(ad::mul(x, x));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Adversarial losses
// ---------------------------------------------------------------------------

/// Eq. 2: E_r[(s_r − E_f[s_f] − 1)²] + E_f[(s_f − E_r[s_r])²].
template <class T>
Var<T> ragan_d_loss(const Var<T>& real, const Var<T>& fake) {
  detail::check_scores(real, "ragan_d_loss");
  detail::check_scores(fake, "ragan_d_loss");
  Var<T> mr = ad::mean_all(real);
  Var<T> mf = ad::mean_all(fake);
  Var<T> a = ad::add_scalar(ad::sub_bcast(real, mf), T(-1));
  Var<T> b = ad::sub_bcast(fake, mr);
  return ad::add(detail::mean_sq(a), detail::mean_sq(b));
}

/// Eq. 3: E_r[(s_r − E_f[s_f])²] + E_f[(s_f − E_r[s_r] − 1)²].
template <class T>
Var<T> ragan_g_loss(const Var<T>& real, const Var<T>& fake) {
  detail::check_scores(real, "ragan_g_loss");
  detail::check_scores(fake, "ragan_g_loss");
  Var<T> mr = ad::mean_all(real);
  Var<T> mf = ad::mean_all(fake);
  Var<T> a = ad::sub_bcast(real, mf);
  Var<T> b = ad::add_scalar(ad::sub_bcast(fake, mr), T(-1));
  return ad::add(detail::mean_sq(a), detail::mean_sq(b));
}

/// Eq. 4 / Eq. 8: E[(s_r − 1)²] + E[s_f²].
template <class T>
Var<T> lsgan_d_loss(const Var<T>& real, const Var<T>& fake) {
  detail::check_scores(real, "lsgan_d_loss");
  detail::check_scores(fake, "lsgan_d_loss");
  return ad::add(detail::mean_sq(ad::add_scalar(real, T(-1))), detail::mean_sq(fake));
}

/// Eq. 5: E[(s_f − 1)²].
template <class T>
Var<T> lsgan_g_loss(const Var<T>& fake) {
  detail::check_scores(fake, "lsgan_g_loss");
  return detail::mean_sq(ad::add_scalar(fake, T(-1)));
}

// ---------------------------------------------------------------------------
// Perceptual / content losses
// ---------------------------------------------------------------------------

/// Eqs. 6–7: Σ_l mean‖Φ_l(a) − Φ_l(b)‖², features instance-normalized when
/// `normalize` is set.
template <class T, class Extractor>
Var<T> perceptual_loss(const Extractor& extractor, const Var<T>& a, const Var<T>& b,
                       bool normalize, const std::vector<std::string>& layers) {
  if (a.shape() != b.shape()) throw std::invalid_argument("perceptual_loss: shape mismatch");
  std::vector<Var<T>> fa = extractor.extract(a, layers);
  std::vector<Var<T>> fb = extractor.extract(b, layers);
  Var<T> total;
  for (size_t l = 0; l < fa.size(); ++l) {
    Var<T> xa = normalize ? ad::instance_norm(fa[l]) : fa[l];
    Var<T> xb = normalize ? ad::instance_norm(fb[l]) : fb[l];
    Var<T> term = detail::mean_sq(ad::sub(xa, xb));
    total = total.defined() ? ad::add(total, term) : term;
  }
  return total.defined() ? total : Var<T>::scalar(T(0));
}

enum class ColorLossKind { kAngle, kOneMinusCos };

/// §III-B color loss: images average-pooled by `factor`, then the per-pixel
/// angle between RGB vectors (arccos of clamped cosine; zero vectors
/// contribute 0), averaged over pixels. kOneMinusCos swaps arccos for 1−cos.
template <class T>
Var<T> color_loss(const Var<T>& a, const Var<T>& b, int64_t factor = kColorDownsample,
                  ColorLossKind kind = ColorLossKind::kAngle) {
  const auto& s = a.shape();
  if (s.size() != 4 || s[1] != 3) throw std::invalid_argument("color_loss: N×3×H×W expected");
  if (a.shape() != b.shape()) throw std::invalid_argument("color_loss: shape mismatch");
  if (factor < 1) throw std::invalid_argument("color_loss: factor must be >= 1");
  Var<T> xd = ad::avgpool(a, factor);
  Var<T> yd = ad::avgpool(b, factor);
  Var<T> dot = ad::sum_channels(ad::mul(xd, yd));
  Var<T> nx2 = ad::sum_channels(ad::mul(xd, xd));
  Var<T> ny2 = ad::sum_channels(ad::mul(yd, yd));
  Var<T> prod = ad::mul(nx2, ny2);
  Var<T> denom = ad::sqrt_op(ad::max_scalar(prod, static_cast<T>(kColorDenomFloor)));
  Var<T> cosv = ad::div(dot, denom);
  Var<T> pixel = kind == ColorLossKind::kAngle
                     ? ad::acos_safe(cosv)
                     : ad::mul_scalar(ad::add_scalar(cosv, T(-1)), T(-1));
  // zero-vector pixels contribute exactly 0 and carry no gradient
  Tensor<T> valid(prod.shape());
  for (int64_t i = 0; i < valid.numel(); ++i)
    valid[i] = prod.value()[i] >= static_cast<T>(kColorDenomFloor) ? T(1) : T(0);
  return ad::mean_all(ad::mul(pixel, Var<T>::leaf(std::move(valid))));
}

/// Eq. 9: Σ_l ‖M^(l) ∘ (Φ_l(J_g) − Φ_l(J_c))‖²/N_l + γ_p‖M ∘ (J_g − J_c)‖₁/N.
/// The mask is average-pooled to each layer's spatial size and broadcast over
/// channels; features are used raw (no instance normalization).
template <class T, class Extractor>
Var<T> adaptive_content_loss(const Extractor& extractor, const Var<T>& jg, const Var<T>& jc,
                             const Var<T>& mask, T gamma_p,
                             const std::vector<std::string>& layers) {
  if (jg.shape() != jc.shape())
    throw std::invalid_argument("adaptive_content_loss: shape mismatch");
  const auto& ms = mask.shape();
  if (ms.size() != 4 || ms[1] != 1 || ms[0] != jg.shape()[0] || ms[2] != jg.shape()[2] ||
      ms[3] != jg.shape()[3])
    throw std::invalid_argument("adaptive_content_loss: mask must be N×1×H×W matching images");
  for (int64_t i = 0; i < mask.numel(); ++i)
    if (mask.value()[i] < T(0) || mask.value()[i] > T(1))
      throw std::invalid_argument("adaptive_content_loss: mask values must lie in [0,1]");
  std::vector<Var<T>> fg = extractor.extract(jg, layers);
  std::vector<Var<T>> fc = extractor.extract(jc, layers);
  Var<T> total;
  for (size_t l = 0; l < fg.size(); ++l) {
    Var<T> ml = ad::adaptive_avgpool(mask, fg[l].shape()[2], fg[l].shape()[3]);
    Var<T> term = detail::mean_sq(ad::mul_mask(ad::sub(fg[l], fc[l]), ml));
    total = total.defined() ? ad::add(total, term) : term;
  }
  Var<T> pix = ad::mean_all(ad::abs_op(ad::mul_mask(ad::sub(jg, jc), mask)));
  pix = ad::mul_scalar(pix, gamma_p);
  return total.defined() ? ad::add(total, pix) : pix;
}

/// Eq. 10: Σ_l ‖Φ_l(Ĩ_e) − Φ_l(Ĩ_c)‖²/N_l + γ_c‖Ĩ_e − Ĩ_c‖₁/N where Ĩ are the
/// instance-normalized images.
template <class T, class Extractor>
Var<T> content_loss(const Extractor& extractor, const Var<T>& a, const Var<T>& b, T gamma_c,
                    const std::vector<std::string>& layers) {
  if (a.shape() != b.shape()) throw std::invalid_argument("content_loss: shape mismatch");
  Var<T> an = ad::instance_norm(a);
  Var<T> bnorm = ad::instance_norm(b);
  std::vector<Var<T>> fa = extractor.extract(an, layers);
  std::vector<Var<T>> fb = extractor.extract(bnorm, layers);
  Var<T> total;
  for (size_t l = 0; l < fa.size(); ++l) {
    Var<T> term = detail::mean_sq(ad::sub(fa[l], fb[l]));
    total = total.defined() ? ad::add(total, term) : term;
  }
  Var<T> pix = ad::mul_scalar(ad::l1(an, bnorm), gamma_c);
  return total.defined() ? ad::add(total, pix) : pix;
}

/// Eq. 11: L_G + λ_c·L_color + λ_C^p·L_con_adapt + λ_C^r·L_con.
template <class T>
Var<T> total_stage2_loss(const Var<T>& adv, const Var<T>& color, const Var<T>& con_adapt,
                         const Var<T>& con, const LossWeights& w = {}) {
  for (const Var<T>* part : {&adv, &color, &con_adapt, &con})
    if (part->item() < T(0))
      throw std::invalid_argument("total_stage2_loss: negative loss component");
  Var<T> total = adv;
  total = ad::add(total, ad::mul_scalar(color, static_cast<T>(w.lambda_color)));
  total = ad::add(total, ad::mul_scalar(con_adapt, static_cast<T>(w.lambda_cp)));
  return ad::add(total, ad::mul_scalar(con, static_cast<T>(w.lambda_cr)));
}

}  // namespace delight::nn
