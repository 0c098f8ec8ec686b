#pragma once

// Shared test helpers: temp dirs, synthetic images, and a central-difference
// gradient checker for the autodiff engine.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "delight/autodiff.hpp"
#include "delight/imaging.hpp"
#include "delight/rng.hpp"
#include "delight/tensor.hpp"

namespace testutil {

/// Fresh directory under the system temp root, unique per call.
inline std::string temp_dir(const std::string& tag) {
  static int counter = 0;
  const auto root = std::filesystem::temp_directory_path() /
                    ("delight_test_" + tag + "_" + std::to_string(::getpid()) + "_" +
                     std::to_string(counter++));
  std::filesystem::create_directories(root);
  return root.string();
}

/// Uniform random tensor in [lo, hi].
template <class T>
delight::Tensor<T> random_tensor(delight::Rng& rng, std::vector<int64_t> shape, double lo,
                                 double hi) {
  delight::Tensor<T> t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

/// Smooth synthetic image: banded gradient plus per-channel noise, clipped to
/// [lo, hi]. Deterministic given the generator state.
template <class T>
delight::img::Image<T> synthetic_image(delight::Rng& rng, int64_t h, int64_t w, double mean,
                                       double amp) {
  delight::img::Image<T> im({h, w, 3});
  const double f1 = rng.uniform(1.0, 4.0), f2 = rng.uniform(1.0, 4.0);
  const double p1 = rng.uniform(0.0, 6.28), p2 = rng.uniform(0.0, 6.28);
  for (int64_t r = 0; r < h; ++r)
    for (int64_t c = 0; c < w; ++c) {
      const double base =
          mean + 0.5 * amp *
                     std::sin(2.0 * M_PI * f1 * static_cast<double>(c) / static_cast<double>(w) + p1) *
                     std::cos(2.0 * M_PI * f2 * static_cast<double>(r) / static_cast<double>(h) + p2);
      for (int64_t ch = 0; ch < 3; ++ch) {
        const double v = base + rng.normal(0.0, 0.02);
        im.at3(r, c, ch) = static_cast<T>(std::min(1.0, std::max(0.0, v)));
      }
    }
  return im;
}

struct GradCheckResult {
  double max_rel_err = 0.0;
  int64_t checked = 0;
};

/// Central-difference check of d(loss)/d(leaf) for every element of every
/// listed leaf. `build` must construct the loss graph fresh from the leaves'
/// current values. Relative error uses max(1, |fd|, |grad|) as the scale.
inline GradCheckResult check_gradients(const std::function<delight::ad::Var<double>()>& build,
                                       std::vector<delight::ad::Var<double>*> leaves,
                                       double step = 1e-5) {
  using delight::ad::Var;
  GradCheckResult res;
  for (Var<double>* leaf : leaves) leaf->set_requires_grad(true);
  Var<double> loss = build();
  for (Var<double>* leaf : leaves) leaf->zero_grad();
  loss.backward();
  std::vector<delight::Tensor<double>> grads;
  grads.reserve(leaves.size());
  for (Var<double>* leaf : leaves) grads.push_back(leaf->grad());
  for (size_t li = 0; li < leaves.size(); ++li) {
    delight::Tensor<double>& v = leaves[li]->value();
    for (int64_t i = 0; i < v.numel(); ++i) {
      const double keep = v[i];
      v[i] = keep + step;
      const double up = build().item();
      v[i] = keep - step;
      const double dn = build().item();
      v[i] = keep;
      const double fd = (up - dn) / (2.0 * step);
      // a leaf the loss never touches keeps an empty grad buffer
      const double g = grads[li].numel() == v.numel() ? grads[li][i] : 0.0;
      const double rel = std::abs(fd - g) / std::max({1.0, std::abs(fd), std::abs(g)});
      res.max_rel_err = std::max(res.max_rel_err, rel);
      ++res.checked;
    }
  }
  return res;
}

}  // namespace testutil
