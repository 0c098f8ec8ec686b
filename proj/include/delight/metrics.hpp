#pragma once

/**
 * @file metrics.hpp
 * @brief Full-reference image quality metrics (PSNR, SSIM) and batch
 *        evaluation with CSV reporting.
 *
 * Conventions: images are H×W×3 tensors with values in [0, 1]; the signal
 * peak is 1. PSNR is computed jointly over all RGB samples. SSIM is computed
 * on the BT.601 luma plane with an 11×11 Gaussian window (sigma 1.5) and
 * "valid" windowing — only windows fully inside the image contribute.
 */

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "delight/errors.hpp"
#include "delight/image_io.hpp"
#include "delight/imaging.hpp"
#include "delight/tensor.hpp"

namespace delight {
namespace metrics {

/// PSNR value reported when the MSE is exactly zero (identical images).
inline constexpr double kPsnrCap = 100.0;

/// SSIM constants: window size, Gaussian sigma, stabilizers for peak == 1.
inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;

/**
 * @brief Peak signal-to-noise ratio in dB, joint over all RGB samples.
 *
 * psnr = 10·log10(peak² / MSE) with peak = 1. Identical images (MSE == 0)
 * return the cap value of 100 dB; the result is clamped to the cap so a
 * denormal-level MSE cannot report an arbitrarily large number.
 *
 * @throws std::invalid_argument when the shapes differ.
 */
template <class T>
double psnr(const img::Image<T>& a, const img::Image<T>& b) {
  img::check_image(a, "psnr: a");
  img::check_image(b, "psnr: b");
  if (!a.same_shape(b)) {
    throw std::invalid_argument("psnr: shape mismatch " + Tensor<T>::shape_str(a.shape()) +
                                " vs " + Tensor<T>::shape_str(b.shape()));
  }
  double se = 0.0;
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    se += d * d;
  }
  const double mse = se / static_cast<double>(n);
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

namespace detail {

/// Normalized 1-D Gaussian taps for the SSIM window.
inline std::vector<double> ssim_kernel() {
  std::vector<double> k(kSsimWindow);
  const double c = (kSsimWindow - 1) / 2.0;
  double sum = 0.0;
  for (int i = 0; i < kSsimWindow; ++i) {
    k[i] = std::exp(-((i - c) * (i - c)) / (2.0 * kSsimSigma * kSsimSigma));
    sum += k[i];
  }
  for (double& v : k) v /= sum;
  return k;
}

}  // namespace detail

/**
 * @brief Mean structural similarity over the luma channel.
 *
 * Luma is BT.601 (0.299 R + 0.587 G + 0.114 B). Windows are weighted by a
 * separable 11×11 Gaussian (sigma 1.5); only fully interior windows count.
 * Stabilizers C1 = (K1·L)², C2 = (K2·L)² with L = 1.
 *
 * @throws std::invalid_argument on shape mismatch or when either spatial
 *         dimension is smaller than the window.
 */
template <class T>
double ssim(const img::Image<T>& a, const img::Image<T>& b) {
  img::check_image(a, "ssim: a");
  img::check_image(b, "ssim: b");
  if (!a.same_shape(b)) {
    throw std::invalid_argument("ssim: shape mismatch " + Tensor<T>::shape_str(a.shape()) +
                                " vs " + Tensor<T>::shape_str(b.shape()));
  }
  const int h = static_cast<int>(a.shape()[0]);
  const int w = static_cast<int>(a.shape()[1]);
  if (h < kSsimWindow || w < kSsimWindow) {
    throw std::invalid_argument(
        "ssim: image " + Tensor<T>::shape_str(a.shape()) + " is smaller than the " +
        std::to_string(kSsimWindow) + "x" + std::to_string(kSsimWindow) +
        " window");
  }

  // Luma planes in double precision.
  std::vector<double> xa(static_cast<size_t>(h) * w), xb(xa.size());
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      xa[static_cast<size_t>(r) * w + c] =
          img::kLumaR * a.at3(r, c, 0) + img::kLumaG * a.at3(r, c, 1) +
          img::kLumaB * a.at3(r, c, 2);
      xb[static_cast<size_t>(r) * w + c] =
          img::kLumaR * b.at3(r, c, 0) + img::kLumaG * b.at3(r, c, 1) +
          img::kLumaB * b.at3(r, c, 2);
    }
  }

  const std::vector<double> k = detail::ssim_kernel();
  const double c1 = (kSsimK1 * 1.0) * (kSsimK1 * 1.0);
  const double c2 = (kSsimK2 * 1.0) * (kSsimK2 * 1.0);

  double total = 0.0;
  int64_t count = 0;
  for (int r0 = 0; r0 + kSsimWindow <= h; ++r0) {
    for (int c0 = 0; c0 + kSsimWindow <= w; ++c0) {
      double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
      for (int i = 0; i < kSsimWindow; ++i) {
        for (int j = 0; j < kSsimWindow; ++j) {
          const double wgt = k[i] * k[j];
          const double va = xa[static_cast<size_t>(r0 + i) * w + (c0 + j)];
          const double vb = xb[static_cast<size_t>(r0 + i) * w + (c0 + j)];
          mx += wgt * va;
          my += wgt * vb;
          sxx += wgt * va * va;
          syy += wgt * vb * vb;
          sxy += wgt * va * vb;
        }
      }
      const double vx = sxx - mx * mx;
      const double vy = syy - my * my;
      const double cxy = sxy - mx * my;
      const double num = (2.0 * mx * my + c1) * (2.0 * cxy + c2);
      const double den = (mx * mx + my * my + c1) * (vx + vy + c2);
      total += num / den;
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

/// One output/reference file pair to score. `id` keys the report row.
struct EvalPair {
  std::string id;
  std::string output_path;
  std::string reference_path;
};

/// One scored row. `ok == false` marks an unreadable or mismatched pair.
struct EvalRow {
  std::string id;
  double psnr_db = 0.0;
  double ssim_val = 0.0;
  bool ok = false;
  std::string error;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
  int64_t n_failed = 0;
};

namespace detail {

inline std::string fmt4(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

}  // namespace detail

/**
 * @brief Score every pair and write a CSV report.
 *
 * Rows are emitted in ascending `id` order, values with 4 decimal places.
 * The header is `id,psnr_db,ssim` and the last line is
 * `mean,<psnr>,<ssim>` aggregated over the successful rows. A pair whose
 * files cannot be read or scored produces a `<id>,failed,failed` row and
 * evaluation continues; `n_failed` in the result signals the caller to exit
 * nonzero at the end.
 *
 * @throws std::invalid_argument when `pairs` is empty.
 * @throws DataError when the report file cannot be written.
 */
inline EvalReport evaluate(std::vector<EvalPair> pairs,
                           const std::string& report_path) {
  if (pairs.empty()) {
    throw std::invalid_argument("evaluate: empty pair list");
  }
  std::sort(pairs.begin(), pairs.end(),
            [](const EvalPair& x, const EvalPair& y) { return x.id < y.id; });

  EvalReport rep;
  double sum_psnr = 0.0, sum_ssim = 0.0;
  int64_t n_ok = 0;
  for (const EvalPair& p : pairs) {
    EvalRow row;
    row.id = p.id;
    auto out = io::load_image<double>(p.output_path);
    auto ref = io::load_image<double>(p.reference_path);
    if (!out || !ref) {
      row.error = !out ? "unreadable output: " + p.output_path
                       : "unreadable reference: " + p.reference_path;
    } else {
      try {
        row.psnr_db = psnr(*out, *ref);
        row.ssim_val = ssim(*out, *ref);
        row.ok = true;
      } catch (const std::invalid_argument& e) {
        row.error = e.what();
      }
    }
    if (row.ok) {
      sum_psnr += row.psnr_db;
      sum_ssim += row.ssim_val;
      ++n_ok;
    } else {
      ++rep.n_failed;
    }
    rep.rows.push_back(std::move(row));
  }
  if (n_ok > 0) {
    rep.mean_psnr = sum_psnr / static_cast<double>(n_ok);
    rep.mean_ssim = sum_ssim / static_cast<double>(n_ok);
  }

  std::ofstream out(report_path, std::ios::trunc);
  if (!out) {
    throw DataError("evaluate: cannot write report: " + report_path);
  }
  out << "id,psnr_db,ssim\n";
  for (const EvalRow& row : rep.rows) {
    if (row.ok) {
      out << row.id << ',' << detail::fmt4(row.psnr_db) << ','
          << detail::fmt4(row.ssim_val) << '\n';
    } else {
      out << row.id << ",failed,failed\n";
    }
  }
  out << "mean," << detail::fmt4(rep.mean_psnr) << ','
      << detail::fmt4(rep.mean_ssim) << '\n';
  if (!out.flush()) {
    throw DataError("evaluate: short write to report: " + report_path);
  }
  return rep;
}

}  // namespace metrics
}  // namespace delight
