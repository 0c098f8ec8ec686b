#pragma once

/**
 * @file optim.hpp
 * @brief Adam with bias correction and the linear learning-rate decay used by
 *        Stage I training.
 */

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>

#include "delight/networks.hpp"
#include "delight/tensor.hpp"

namespace delight::opt {

/// lr(e) for 1-based epoch e: lr₀ during the flat phase, then
/// lr₀ · max(0, 1 − (e − e_flat)/e_decay).
inline double lr_for_epoch(double lr0, int64_t epoch, int64_t epochs_flat, int64_t epochs_decay) {
  if (epoch <= epochs_flat || epochs_decay <= 0) return lr0;
  const double frac =
      static_cast<double>(epoch - epochs_flat) / static_cast<double>(epochs_decay);
  return lr0 * std::max(0.0, 1.0 - frac);
}

template <class T>
class Adam {
 public:
  struct Hparams {
    double lr = 1e-4;
    double beta1 = 0.5;  // LSGAN-style default
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Adam(nn::Params<T>& params, Hparams hp) : params_(&params), hp_(hp) {
    for (const auto& name : params.names()) {
      const auto& shape = params.get(name).shape();
      m_.emplace(name, Tensor<T>(shape));
      v_.emplace(name, Tensor<T>(shape));
    }
  }

  void set_lr(double lr) { hp_.lr = lr; }
  double lr() const { return hp_.lr; }
  int64_t t() const { return t_; }

  /// One update from the gradients currently accumulated on the parameters.
  /// Parameters with no gradient this step keep their moments untouched.
  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(hp_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(hp_.beta2, static_cast<double>(t_));
    for (const auto& name : params_->names()) {
      auto& p = params_->get(name);
      const Tensor<T>& g = p.grad();
      if (g.numel() != p.numel()) continue;  // no gradient reached this tensor
      Tensor<T>& m = m_.at(name);
      Tensor<T>& v = v_.at(name);
      T* pv = p.value().data();
      for (int64_t i = 0; i < p.numel(); ++i) {
        const double gi = static_cast<double>(g[i]);
        const double mi = hp_.beta1 * static_cast<double>(m[i]) + (1.0 - hp_.beta1) * gi;
        const double vi = hp_.beta2 * static_cast<double>(v[i]) + (1.0 - hp_.beta2) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        pv[i] -= static_cast<T>(hp_.lr * (mi / bc1) / (std::sqrt(vi / bc2) + hp_.eps));
      }
    }
  }

  /// Moment tensors keyed "<param>.m" / "<param>.v" (for checkpoints).
  std::map<std::string, Tensor<T>> state_tensors() const {
    std::map<std::string, Tensor<T>> out;
    for (const auto& [name, m] : m_) out.emplace(name + ".m", m);
    for (const auto& [name, v] : v_) out.emplace(name + ".v", v);
    return out;
  }

  void load_state(int64_t t, const std::map<std::string, Tensor<T>>& tensors) {
    t_ = t;
    for (auto& [name, m] : m_) {
      auto it = tensors.find(name + ".m");
      if (it == tensors.end() || it->second.shape() != m.shape())
        throw ConfigError("Adam state missing or mismatched for " + name);
      m = it->second;
      auto iv = tensors.find(name + ".v");
      if (iv == tensors.end() || iv->second.shape() != v_.at(name).shape())
        throw ConfigError("Adam state missing or mismatched for " + name);
      v_.at(name) = iv->second;
    }
  }

 private:
  nn::Params<T>* params_;
  Hparams hp_;
  int64_t t_ = 0;
  std::unordered_map<std::string, Tensor<T>> m_;
  std::unordered_map<std::string, Tensor<T>> v_;
};

}  // namespace delight::opt
