#pragma once

/**
 * @file autodiff.hpp
 * @brief Reverse-mode automatic differentiation over NCHW tensors.
 *
 * Dynamic tape: every op builds a node holding the forward value and a
 * closure that scatters the node's gradient into its parents. Graphs are
 * rebuilt per forward pass. Convolution is im2col + Eigen GEMM.
 */

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <unordered_set>
#include <vector>

#include "delight/tensor.hpp"

namespace delight::ad {

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backward;

  Tensor<T>& grad_buffer() {
    if (grad.numel() != value.numel()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

/// Thread-local switch: while disabled, ops build no tape (pure forward).
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  NoGradGuard() : prev_(grad_enabled_flag()) { grad_enabled_flag() = false; }
  ~NoGradGuard() { grad_enabled_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
class Var {
 public:
  Var() = default;

  static Var leaf(Tensor<T> value, bool requires_grad = false) {
    Var v;
    v.n_ = std::make_shared<Node<T>>();
    v.n_->value = std::move(value);
    v.n_->requires_grad = requires_grad && grad_enabled_flag();
    return v;
  }

  static Var scalar(T value, bool requires_grad = false) {
    return leaf(Tensor<T>({1}, {value}), requires_grad);
  }

  bool defined() const { return n_ != nullptr; }
  const Tensor<T>& value() const { return n_->value; }
  Tensor<T>& value() { return n_->value; }
  const Tensor<T>& grad() const { return n_->grad; }
  Tensor<T>& grad_buffer() { return n_->grad_buffer(); }
  bool requires_grad() const { return n_ && n_->requires_grad; }
  void set_requires_grad(bool b) { n_->requires_grad = b; }  // leaves only
  const std::vector<int64_t>& shape() const { return n_->value.shape(); }
  int64_t numel() const { return n_->value.numel(); }
  T item() const {
    if (numel() != 1) throw std::invalid_argument("Var::item: not a scalar");
    return n_->value[0];
  }

  Var detach() const {
    Var v;
    v.n_ = std::make_shared<Node<T>>();
    v.n_->value = n_->value;  // copies; graphs stay independent
    v.n_->requires_grad = false;
    return v;
  }

  void zero_grad() {
    if (n_) n_->grad = Tensor<T>();
  }

  /// Reverse pass from a scalar. Gradients accumulate into every reachable
  /// node with requires_grad set.
  void backward() {
    if (numel() != 1) throw std::invalid_argument("backward: root must be scalar");
    if (!n_->requires_grad) return;
    // Iterative topological order (post-order DFS).
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.emplace_back(n_.get(), 0);
    seen.insert(n_.get());
    while (!stack.empty()) {
      auto& [node, idx] = stack.back();
      if (idx < node->parents.size()) {
        Node<T>* p = node->parents[idx++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    n_->grad_buffer().fill(T(0));
    n_->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* node = *it;
      if (node->backward && node->grad.numel() == node->value.numel()) node->backward(*node);
    }
  }

  std::shared_ptr<Node<T>> node() const { return n_; }

 private:
  std::shared_ptr<Node<T>> n_;
};

namespace detail {

template <class T>
bool any_requires(const std::vector<Var<T>>& parents) {
  if (!grad_enabled_flag()) return false;
  for (const auto& p : parents)
    if (p.requires_grad()) return true;
  return false;
}

/// Wire up an op node. `backward` receives the result node; parents are
/// reachable through it in the order given here.
template <class T, class F>
Var<T> make_op(Tensor<T> out, std::vector<Var<T>> parents, F&& backward) {
  Var<T> v = Var<T>::leaf(std::move(out), false);
  if (any_requires(parents)) {
    auto node = v.node();
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::forward<F>(backward);
  }
  return v;
}

template <class T>
void accumulate(Node<T>& parent, const T* g, int64_t n) {
  if (!parent.requires_grad) return;
  Tensor<T>& buf = parent.grad_buffer();
  T* dst = buf.data();
  for (int64_t i = 0; i < n; ++i) dst[i] += g[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <class T>
void check_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                Tensor<T>::shape_str(a.shape()) + " vs " +
                                Tensor<T>::shape_str(b.shape()));
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = a.value()[i] + b.value()[i];
  return detail::make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    detail::accumulate(*self.parents[0], self.grad.data(), self.grad.numel());
    detail::accumulate(*self.parents[1], self.grad.data(), self.grad.numel());
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = a.value()[i] - b.value()[i];
  return detail::make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    detail::accumulate(*self.parents[0], self.grad.data(), self.grad.numel());
    if (self.parents[1]->requires_grad) {
      Tensor<T>& buf = self.parents[1]->grad_buffer();
      for (int64_t i = 0; i < self.grad.numel(); ++i) buf[i] -= self.grad[i];
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = a.value()[i] * b.value()[i];
  return detail::make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    const int64_t n = self.grad.numel();
    if (self.parents[0]->requires_grad) {
      Tensor<T>& buf = self.parents[0]->grad_buffer();
      const Tensor<T>& bv = self.parents[1]->value;
      for (int64_t i = 0; i < n; ++i) buf[i] += self.grad[i] * bv[i];
    }
    if (self.parents[1]->requires_grad) {
      Tensor<T>& buf = self.parents[1]->grad_buffer();
      const Tensor<T>& av = self.parents[0]->value;
      for (int64_t i = 0; i < n; ++i) buf[i] += self.grad[i] * av[i];
    }
  });
}

template <class T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "div");
  Tensor<T> out(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = a.value()[i] / b.value()[i];
  return detail::make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    const int64_t n = self.grad.numel();
    const Tensor<T>& av = self.parents[0]->value;
    const Tensor<T>& bv = self.parents[1]->value;
    if (self.parents[0]->requires_grad) {
      Tensor<T>& buf = self.parents[0]->grad_buffer();
      for (int64_t i = 0; i < n; ++i) buf[i] += self.grad[i] / bv[i];
    }
    if (self.parents[1]->requires_grad) {
      Tensor<T>& buf = self.parents[1]->grad_buffer();
      for (int64_t i = 0; i < n; ++i) buf[i] -= self.grad[i] * av[i] / (bv[i] * bv[i]);
    }
  });
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = a.value()[i] + s;
  return detail::make_op<T>(std::move(out), {a}, [](Node<T>& self) {
    detail::accumulate(*self.parents[0], self.grad.data(), self.grad.numel());
  });
}

template <class T>
Var<T> mul_scalar(const Var<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = a.value()[i] * s;
  return detail::make_op<T>(std::move(out), {a}, [s](Node<T>& self) {
    if (!self.parents[0]->requires_grad) return;
    Tensor<T>& buf = self.parents[0]->grad_buffer();
    for (int64_t i = 0; i < self.grad.numel(); ++i) buf[i] += self.grad[i] * s;
  });
}

/// a - s where s is a one-element Var (broadcast over a).
template <class T>
Var<T> sub_bcast(const Var<T>& a, const Var<T>& s) {
  if (s.numel() != 1) throw std::invalid_argument("sub_bcast: scalar operand expected");
  Tensor<T> out(a.shape());
  const T sv = s.value()[0];
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = a.value()[i] - sv;
  return detail::make_op<T>(std::move(out), {a, s}, [](Node<T>& self) {
    detail::accumulate(*self.parents[0], self.grad.data(), self.grad.numel());
    if (self.parents[1]->requires_grad) {
      T sum = T(0);
      for (int64_t i = 0; i < self.grad.numel(); ++i) sum += self.grad[i];
      self.parents[1]->grad_buffer()[0] -= sum;
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities
// ---------------------------------------------------------------------------

template <class T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = a.value()[i] > T(0) ? a.value()[i] : T(0);
  return detail::make_op<T>(std::move(out), {a}, [](Node<T>& self) {
    if (!self.parents[0]->requires_grad) return;
    Tensor<T>& buf = self.parents[0]->grad_buffer();
    const Tensor<T>& x = self.parents[0]->value;
    for (int64_t i = 0; i < self.grad.numel(); ++i)
      if (x[i] > T(0)) buf[i] += self.grad[i];
  });
}

template <class T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i)
    out[i] = a.value()[i] > T(0) ? a.value()[i] : slope * a.value()[i];
  return detail::make_op<T>(std::move(out), {a}, [slope](Node<T>& self) {
    if (!self.parents[0]->requires_grad) return;
    Tensor<T>& buf = self.parents[0]->grad_buffer();
    const Tensor<T>& x = self.parents[0]->value;
    for (int64_t i = 0; i < self.grad.numel(); ++i)
      buf[i] += self.grad[i] * (x[i] > T(0) ? T(1) : slope);
  });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) {
    const double x = static_cast<double>(a.value()[i]);
    out[i] = static_cast<T>(1.0 / (1.0 + std::exp(-x)));
  }
  Tensor<T> saved = out;
  return detail::make_op<T>(std::move(out), {a}, [saved](Node<T>& self) {
    if (!self.parents[0]->requires_grad) return;
    Tensor<T>& buf = self.parents[0]->grad_buffer();
    for (int64_t i = 0; i < self.grad.numel(); ++i)
      buf[i] += self.grad[i] * saved[i] * (T(1) - saved[i]);
  });
}

/// clamp(x, lo, hi). Gradient passes where lo <= x <= hi (pre-clamp value).
template <class T>
Var<T> clamp(const Var<T>& a, T lo, T hi) {
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = std::min(hi, std::max(lo, a.value()[i]));
  return detail::make_op<T>(std::move(out), {a}, [lo, hi](Node<T>& self) {
    if (!self.parents[0]->requires_grad) return;
    Tensor<T>& buf = self.parents[0]->grad_buffer();
    const Tensor<T>& x = self.parents[0]->value;
    for (int64_t i = 0; i < self.grad.numel(); ++i)
      if (x[i] >= lo && x[i] <= hi) buf[i] += self.grad[i];
  });
}

/// max(x, s). Gradient passes where x >= s.
template <class T>
Var<T> max_scalar(const Var<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = std::max(s, a.value()[i]);
  return detail::make_op<T>(std::move(out), {a}, [s](Node<T>& self) {
    if (!self.parents[0]->requires_grad) return;
    Tensor<T>& buf = self.parents[0]->grad_buffer();
    const Tensor<T>& x = self.parents[0]->value;
    for (int64_t i = 0; i < self.grad.numel(); ++i)
      if (x[i] >= s) buf[i] += self.grad[i];
  });
}

template <class T>
Var<T> abs_op(const Var<T>& a) {
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = std::abs(a.value()[i]);
  return detail::make_op<T>(std::move(out), {a}, [](Node<T>& self) {
    if (!self.parents[0]->requires_grad) return;
    Tensor<T>& buf = self.parents[0]->grad_buffer();
    const Tensor<T>& x = self.parents[0]->value;
    for (int64_t i = 0; i < self.grad.numel(); ++i) {
      if (x[i] > T(0)) buf[i] += self.grad[i];
      else if (x[i] < T(0)) buf[i] -= self.grad[i];
    }
  });
}

template <class T>
Var<T> sqrt_op(const Var<T>& a) {
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = std::sqrt(a.value()[i]);
  Tensor<T> saved = out;
  return detail::make_op<T>(std::move(out), {a}, [saved](Node<T>& self) {
    if (!self.parents[0]->requires_grad) return;
    Tensor<T>& buf = self.parents[0]->grad_buffer();
    for (int64_t i = 0; i < self.grad.numel(); ++i)
      buf[i] += self.grad[i] / (T(2) * std::max(saved[i], T(1e-20)));
  });
}

/// x^p for x >= 0 and constant exponent p >= 1 (gamma correction range).
template <class T>
Var<T> pow_scalar(const Var<T>& a, T p) {
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i)
    out[i] = static_cast<T>(std::pow(static_cast<double>(a.value()[i]), static_cast<double>(p)));
  return detail::make_op<T>(std::move(out), {a}, [p](Node<T>& self) {
    if (!self.parents[0]->requires_grad) return;
    Tensor<T>& buf = self.parents[0]->grad_buffer();
    const Tensor<T>& x = self.parents[0]->value;
    for (int64_t i = 0; i < self.grad.numel(); ++i) {
      const double xv = static_cast<double>(x[i]);
      double d;
      if (xv <= 0.0) d = (p == T(1)) ? 1.0 : 0.0;  // p > 1: derivative 0 at 0
      else d = static_cast<double>(p) * std::pow(xv, static_cast<double>(p) - 1.0);
      buf[i] += self.grad[i] * static_cast<T>(d);
    }
  });
}

/// x^λ_n with one constant exponent per sample (NCHW input, x >= 0).
template <class T>
Var<T> pow_per_sample(const Var<T>& a, std::vector<T> lambda) {
  const auto& s = a.shape();
  if (s.size() != 4) throw std::invalid_argument("pow_per_sample: NCHW expected");
  if (static_cast<int64_t>(lambda.size()) != s[0])
    throw std::invalid_argument("pow_per_sample: one exponent per sample expected");
  const int64_t n = s[0], chw = a.numel() / std::max<int64_t>(n, 1);
  Tensor<T> out(s);
  for (int64_t in = 0; in < n; ++in) {
    const double p = static_cast<double>(lambda[static_cast<size_t>(in)]);
    const T* src = a.value().data() + in * chw;
    T* o = out.data() + in * chw;
    for (int64_t i = 0; i < chw; ++i)
      o[i] = static_cast<T>(std::pow(static_cast<double>(src[i]), p));
  }
  return detail::make_op<T>(std::move(out), {a}, [n, chw, lambda = std::move(lambda)](Node<T>& self) {
    if (!self.parents[0]->requires_grad) return;
    Tensor<T>& buf = self.parents[0]->grad_buffer();
    const Tensor<T>& x = self.parents[0]->value;
    for (int64_t in = 0; in < n; ++in) {
      const double p = static_cast<double>(lambda[static_cast<size_t>(in)]);
      for (int64_t i = 0; i < chw; ++i) {
        const double xv = static_cast<double>(x[in * chw + i]);
        double d;
        if (xv <= 0.0) d = (p == 1.0) ? 1.0 : 0.0;
        else d = p * std::pow(xv, p - 1.0);
        buf[in * chw + i] += self.grad[in * chw + i] * static_cast<T>(d);
      }
    }
  });
}

/// arccos with clamped input and bounded derivative near |x| = 1.
template <class T>
Var<T> acos_safe(const Var<T>& a) {
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) {
    const double x = std::min(1.0, std::max(-1.0, static_cast<double>(a.value()[i])));
    out[i] = static_cast<T>(std::acos(x));
  }
  return detail::make_op<T>(std::move(out), {a}, [](Node<T>& self) {
    if (!self.parents[0]->requires_grad) return;
    Tensor<T>& buf = self.parents[0]->grad_buffer();
    const Tensor<T>& x = self.parents[0]->value;
    for (int64_t i = 0; i < self.grad.numel(); ++i) {
      const double xv = static_cast<double>(x[i]);
      if (xv < -1.0 || xv > 1.0) continue;  // clamped region
      const double denom = std::sqrt(std::max(1.0 - xv * xv, 1e-6));
      buf[i] -= self.grad[i] * static_cast<T>(1.0 / denom);
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and shape ops
// ---------------------------------------------------------------------------

template <class T>
Var<T> sum_all(const Var<T>& a) {
  double s = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) s += static_cast<double>(a.value()[i]);
  return detail::make_op<T>(Tensor<T>({1}, {static_cast<T>(s)}), {a}, [](Node<T>& self) {
    if (!self.parents[0]->requires_grad) return;
    Tensor<T>& buf = self.parents[0]->grad_buffer();
    const T g = self.grad[0];
    for (int64_t i = 0; i < buf.numel(); ++i) buf[i] += g;
  });
}

template <class T>
Var<T> mean_all(const Var<T>& a) {
  if (a.numel() == 0) throw std::invalid_argument("mean_all: empty tensor");
  double s = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) s += static_cast<double>(a.value()[i]);
  const T inv = static_cast<T>(1.0 / static_cast<double>(a.numel()));
  return detail::make_op<T>(Tensor<T>({1}, {static_cast<T>(s / static_cast<double>(a.numel()))}),
                            {a}, [inv](Node<T>& self) {
                              if (!self.parents[0]->requires_grad) return;
                              Tensor<T>& buf = self.parents[0]->grad_buffer();
                              const T g = self.grad[0] * inv;
                              for (int64_t i = 0; i < buf.numel(); ++i) buf[i] += g;
                            });
}

/// N×C×H×W -> N: mean over channels and space per sample.
template <class T>
Var<T> mean_per_sample(const Var<T>& a) {
  if (a.shape().size() != 4) throw std::invalid_argument("mean_per_sample: NCHW expected");
  const int64_t n = a.shape()[0], chw = a.numel() / std::max<int64_t>(n, 1);
  Tensor<T> out({n});
  for (int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < chw; ++j) s += static_cast<double>(a.value()[i * chw + j]);
    out[i] = static_cast<T>(s / static_cast<double>(chw));
  }
  return detail::make_op<T>(std::move(out), {a}, [n, chw](Node<T>& self) {
    if (!self.parents[0]->requires_grad) return;
    Tensor<T>& buf = self.parents[0]->grad_buffer();
    for (int64_t i = 0; i < n; ++i) {
      const T g = self.grad[i] / static_cast<T>(chw);
      for (int64_t j = 0; j < chw; ++j) buf[i * chw + j] += g;
    }
  });
}

/// Concatenate a batch of scalar Vars into one vector Var.
template <class T>
Var<T> stack_scalars(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw std::invalid_argument("stack_scalars: empty");
  Tensor<T> out({static_cast<int64_t>(xs.size())});
  for (size_t i = 0; i < xs.size(); ++i) out[static_cast<int64_t>(i)] = xs[i].item();
  return detail::make_op<T>(std::move(out), xs, [](Node<T>& self) {
    for (size_t i = 0; i < self.parents.size(); ++i)
      if (self.parents[i]->requires_grad)
        self.parents[i]->grad_buffer()[0] += self.grad[static_cast<int64_t>(i)];
  });
}

/// Concatenate along the channel dimension (NCHW).
template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_channels: empty");
  const auto& s0 = xs[0].shape();
  if (s0.size() != 4) throw std::invalid_argument("concat_channels: NCHW expected");
  int64_t ctot = 0;
  for (const auto& x : xs) {
    const auto& s = x.shape();
    if (s.size() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3])
      throw std::invalid_argument("concat_channels: incompatible shapes");
    ctot += s[1];
  }
  const int64_t n = s0[0], h = s0[2], w = s0[3], hw = h * w;
  Tensor<T> out({n, ctot, h, w});
  std::vector<int64_t> offsets;
  int64_t off = 0;
  for (const auto& x : xs) {
    offsets.push_back(off);
    const int64_t c = x.shape()[1];
    for (int64_t in = 0; in < n; ++in)
      std::copy_n(x.value().data() + in * c * hw, c * hw,
                  out.data() + (in * ctot + off) * hw);
    off += c;
  }
  return detail::make_op<T>(std::move(out), xs, [n, ctot, hw, offsets](Node<T>& self) {
    for (size_t pi = 0; pi < self.parents.size(); ++pi) {
      auto& p = *self.parents[pi];
      if (!p.requires_grad) continue;
      const int64_t c = p.value.shape()[1];
      Tensor<T>& buf = p.grad_buffer();
      for (int64_t in = 0; in < n; ++in) {
        const T* src = self.grad.data() + (in * ctot + offsets[pi]) * hw;
        T* dst = buf.data() + in * c * hw;
        for (int64_t i = 0; i < c * hw; ++i) dst[i] += src[i];
      }
    }
  });
}

/// Select `count` consecutive samples starting at n0 (NCHW).
template <class T>
Var<T> slice_batch(const Var<T>& x, int64_t n0, int64_t count) {
  const auto& s = x.shape();
  if (s.size() != 4) throw std::invalid_argument("slice_batch: NCHW expected");
  if (n0 < 0 || count < 1 || n0 + count > s[0])
    throw std::invalid_argument("slice_batch: range out of bounds");
  const int64_t chw = s[1] * s[2] * s[3];
  Tensor<T> out({count, s[1], s[2], s[3]});
  std::copy_n(x.value().data() + n0 * chw, count * chw, out.data());
  return detail::make_op<T>(std::move(out), {x}, [n0, chw](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    Tensor<T>& buf = p.grad_buffer();
    const int64_t n = self.grad.numel();
    T* dst = buf.data() + n0 * chw;
    for (int64_t i = 0; i < n; ++i) dst[i] += self.grad[i];
  });
}

/// Concatenate along the batch dimension (NCHW, matching C, H, W).
template <class T>
Var<T> concat_batch(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_batch: empty");
  const auto& s0 = xs[0].shape();
  if (s0.size() != 4) throw std::invalid_argument("concat_batch: NCHW expected");
  int64_t ntot = 0;
  for (const auto& x : xs) {
    const auto& s = x.shape();
    if (s.size() != 4 || s[1] != s0[1] || s[2] != s0[2] || s[3] != s0[3])
      throw std::invalid_argument("concat_batch: incompatible shapes");
    ntot += s[0];
  }
  const int64_t chw = s0[1] * s0[2] * s0[3];
  Tensor<T> out({ntot, s0[1], s0[2], s0[3]});
  std::vector<int64_t> offsets;
  int64_t off = 0;
  for (const auto& x : xs) {
    offsets.push_back(off);
    std::copy_n(x.value().data(), x.numel(), out.data() + off * chw);
    off += x.shape()[0];
  }
  return detail::make_op<T>(std::move(out), xs, [chw, offsets](Node<T>& self) {
    for (size_t pi = 0; pi < self.parents.size(); ++pi) {
      auto& p = *self.parents[pi];
      if (!p.requires_grad) continue;
      Tensor<T>& buf = p.grad_buffer();
      const T* src = self.grad.data() + offsets[pi] * chw;
      for (int64_t i = 0; i < buf.numel(); ++i) buf[i] += src[i];
    }
  });
}

/// Spatial crop [r0, r0+h) × [c0, c0+w) of an NCHW tensor.
template <class T>
Var<T> crop_spatial(const Var<T>& x, int64_t r0, int64_t c0, int64_t h, int64_t w) {
  const auto& s = x.shape();
  if (s.size() != 4) throw std::invalid_argument("crop_spatial: NCHW expected");
  if (r0 < 0 || c0 < 0 || r0 + h > s[2] || c0 + w > s[3])
    throw std::invalid_argument("crop_spatial: out of bounds");
  const int64_t n = s[0], c = s[1], H = s[2], W = s[3];
  Tensor<T> out({n, c, h, w});
  for (int64_t in = 0; in < n; ++in)
    for (int64_t ic = 0; ic < c; ++ic)
      for (int64_t ih = 0; ih < h; ++ih)
        std::copy_n(x.value().data() + ((in * c + ic) * H + r0 + ih) * W + c0, w,
                    out.data() + ((in * c + ic) * h + ih) * w);
  return detail::make_op<T>(std::move(out), {x}, [=](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    Tensor<T>& buf = p.grad_buffer();
    for (int64_t in = 0; in < n; ++in)
      for (int64_t ic = 0; ic < c; ++ic)
        for (int64_t ih = 0; ih < h; ++ih) {
          const T* src = self.grad.data() + ((in * c + ic) * h + ih) * w;
          T* dst = buf.data() + ((in * c + ic) * H + r0 + ih) * W + c0;
          for (int64_t iw = 0; iw < w; ++iw) dst[iw] += src[iw];
        }
  });
}

/// BT.601 luma: N×3×H×W -> N×1×H×W.
template <class T>
Var<T> luma(const Var<T>& x) {
  const auto& s = x.shape();
  if (s.size() != 4 || s[1] != 3) throw std::invalid_argument("luma: N×3×H×W expected");
  const int64_t n = s[0], hw = s[2] * s[3];
  static constexpr double kR = 0.299, kG = 0.587, kB = 0.114;
  Tensor<T> out({n, 1, s[2], s[3]});
  for (int64_t in = 0; in < n; ++in) {
    const T* r = x.value().data() + (in * 3 + 0) * hw;
    const T* g = x.value().data() + (in * 3 + 1) * hw;
    const T* b = x.value().data() + (in * 3 + 2) * hw;
    T* o = out.data() + in * hw;
    for (int64_t i = 0; i < hw; ++i)
      o[i] = static_cast<T>(kR * r[i] + kG * g[i] + kB * b[i]);
  }
  return detail::make_op<T>(std::move(out), {x}, [n, hw](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    Tensor<T>& buf = p.grad_buffer();
    for (int64_t in = 0; in < n; ++in) {
      const T* g = self.grad.data() + in * hw;
      T* r = buf.data() + (in * 3 + 0) * hw;
      T* gg = buf.data() + (in * 3 + 1) * hw;
      T* b = buf.data() + (in * 3 + 2) * hw;
      for (int64_t i = 0; i < hw; ++i) {
        r[i] += static_cast<T>(kR) * g[i];
        gg[i] += static_cast<T>(kG) * g[i];
        b[i] += static_cast<T>(kB) * g[i];
      }
    }
  });
}

/// Sum over the channel dimension: N×C×H×W -> N×1×H×W.
template <class T>
Var<T> sum_channels(const Var<T>& x) {
  const auto& s = x.shape();
  if (s.size() != 4) throw std::invalid_argument("sum_channels: NCHW expected");
  const int64_t n = s[0], c = s[1], hw = s[2] * s[3];
  Tensor<T> out({n, 1, s[2], s[3]});
  for (int64_t in = 0; in < n; ++in) {
    T* o = out.data() + in * hw;
    for (int64_t ic = 0; ic < c; ++ic) {
      const T* src = x.value().data() + (in * c + ic) * hw;
      for (int64_t i = 0; i < hw; ++i) o[i] += src[i];
    }
  }
  return detail::make_op<T>(std::move(out), {x}, [n, c, hw](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    Tensor<T>& buf = p.grad_buffer();
    for (int64_t in = 0; in < n; ++in) {
      const T* g = self.grad.data() + in * hw;
      for (int64_t ic = 0; ic < c; ++ic) {
        T* dst = buf.data() + (in * c + ic) * hw;
        for (int64_t i = 0; i < hw; ++i) dst[i] += g[i];
      }
    }
  });
}

/// Multiply an NCHW tensor by an N×1×H×W mask, broadcasting over channels.
template <class T>
Var<T> mul_mask(const Var<T>& x, const Var<T>& m) {
  const auto& s = x.shape();
  const auto& ms = m.shape();
  if (s.size() != 4 || ms.size() != 4 || ms[1] != 1 || ms[0] != s[0] || ms[2] != s[2] ||
      ms[3] != s[3])
    throw std::invalid_argument("mul_mask: mask must be N×1×H×W matching x");
  const int64_t n = s[0], c = s[1], hw = s[2] * s[3];
  Tensor<T> out(s);
  for (int64_t in = 0; in < n; ++in) {
    const T* mm = m.value().data() + in * hw;
    for (int64_t ic = 0; ic < c; ++ic) {
      const T* src = x.value().data() + (in * c + ic) * hw;
      T* o = out.data() + (in * c + ic) * hw;
      for (int64_t i = 0; i < hw; ++i) o[i] = src[i] * mm[i];
    }
  }
  return detail::make_op<T>(std::move(out), {x, m}, [n, c, hw](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& pm = *self.parents[1];
    if (px.requires_grad) {
      Tensor<T>& buf = px.grad_buffer();
      for (int64_t in = 0; in < n; ++in) {
        const T* mm = pm.value.data() + in * hw;
        for (int64_t ic = 0; ic < c; ++ic) {
          const T* g = self.grad.data() + (in * c + ic) * hw;
          T* dst = buf.data() + (in * c + ic) * hw;
          for (int64_t i = 0; i < hw; ++i) dst[i] += g[i] * mm[i];
        }
      }
    }
    if (pm.requires_grad) {
      Tensor<T>& buf = pm.grad_buffer();
      for (int64_t in = 0; in < n; ++in) {
        T* dst = buf.data() + in * hw;
        for (int64_t ic = 0; ic < c; ++ic) {
          const T* g = self.grad.data() + (in * c + ic) * hw;
          const T* xv = px.value.data() + (in * c + ic) * hw;
          for (int64_t i = 0; i < hw; ++i) dst[i] += g[i] * xv[i];
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution (im2col + GEMM)
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
using MatrixRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
void im2col(const T* x, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw, int64_t stride,
            int64_t pad, int64_t OH, int64_t OW, T* col) {
  // col layout: (C*kh*kw) × (OH*OW), row-major
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        T* dst = col + ((c * kh + ki) * kw + kj) * OH * OW;
        for (int64_t oh = 0; oh < OH; ++oh) {
          const int64_t ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) {
            std::fill_n(dst + oh * OW, OW, T(0));
            continue;
          }
          const T* src = x + (c * H + ih) * W;
          for (int64_t ow = 0; ow < OW; ++ow) {
            const int64_t iw = ow * stride - pad + kj;
            dst[oh * OW + ow] = (iw >= 0 && iw < W) ? src[iw] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im_accum(const T* col, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                  int64_t stride, int64_t pad, int64_t OH, int64_t OW, T* x) {
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        const T* src = col + ((c * kh + ki) * kw + kj) * OH * OW;
        for (int64_t oh = 0; oh < OH; ++oh) {
          const int64_t ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) continue;
          T* dst = x + (c * H + ih) * W;
          for (int64_t ow = 0; ow < OW; ++ow) {
            const int64_t iw = ow * stride - pad + kj;
            if (iw >= 0 && iw < W) dst[iw] += src[oh * OW + ow];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D convolution. x: N×Ci×H×W, w: Co×Ci×kh×kw, optional bias Co.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const std::optional<Var<T>>& bias,
              int64_t stride, int64_t pad) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4) throw std::invalid_argument("conv2d: 4-D tensors expected");
  if (xs[1] != ws[1]) throw std::invalid_argument("conv2d: channel mismatch");
  const int64_t N = xs[0], Ci = xs[1], H = xs[2], W = xs[3];
  const int64_t Co = ws[0], kh = ws[2], kw = ws[3];
  const int64_t OH = (H + 2 * pad - kh) / stride + 1;
  const int64_t OW = (W + 2 * pad - kw) / stride + 1;
  if (OH < 1 || OW < 1) throw std::invalid_argument("conv2d: output would be empty");

  Tensor<T> out({N, Co, OH, OW});
  const int64_t K = Ci * kh * kw, P = OH * OW;
  std::vector<T> col(static_cast<size_t>(K * P));
  using Mat = detail::MatrixRM<T>;
  Eigen::Map<const Mat> wm(w.value().data(), Co, K);
  for (int64_t n = 0; n < N; ++n) {
    detail::im2col(x.value().data() + n * Ci * H * W, Ci, H, W, kh, kw, stride, pad, OH, OW,
                   col.data());
    Eigen::Map<const Mat> cm(col.data(), K, P);
    Eigen::Map<Mat> om(out.data() + n * Co * P, Co, P);
    om.noalias() = wm * cm;
  }
  if (bias) {
    if (bias->numel() != Co) throw std::invalid_argument("conv2d: bias size mismatch");
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < Co; ++c) {
        const T b = bias->value()[c];
        T* o = out.data() + (n * Co + c) * P;
        for (int64_t i = 0; i < P; ++i) o[i] += b;
      }
  }

  std::vector<Var<T>> parents = {x, w};
  if (bias) parents.push_back(*bias);
  auto backward = [N, Ci, H, W, Co, kh, kw, stride, pad, OH, OW, K, P](Node<T>& self) {
    using Mat = detail::MatrixRM<T>;
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    Eigen::Map<const Mat> wm(pw.value.data(), Co, K);
    std::vector<T> col(static_cast<size_t>(K * P));
    std::vector<T> dcol(static_cast<size_t>(K * P));
    const bool need_x = px.requires_grad;
    const bool need_w = pw.requires_grad;
    if (need_x) px.grad_buffer();
    if (need_w) pw.grad_buffer();
    Eigen::Map<Mat> dwm(need_w ? pw.grad.data() : nullptr, need_w ? Co : 0, need_w ? K : 0);
    for (int64_t n = 0; n < N; ++n) {
      Eigen::Map<const Mat> gm(self.grad.data() + n * Co * P, Co, P);
      if (need_w) {
        detail::im2col(px.value.data() + n * Ci * H * W, Ci, H, W, kh, kw, stride, pad, OH, OW,
                       col.data());
        Eigen::Map<const Mat> cm(col.data(), K, P);
        dwm.noalias() += gm * cm.transpose();
      }
      if (need_x) {
        Eigen::Map<Mat> dcm(dcol.data(), K, P);
        dcm.noalias() = wm.transpose() * gm;
        detail::col2im_accum(dcol.data(), Ci, H, W, kh, kw, stride, pad, OH, OW,
                             px.grad.data() + n * Ci * H * W);
      }
    }
    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      Tensor<T>& db = self.parents[2]->grad_buffer();
      for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < Co; ++c) {
          const T* g = self.grad.data() + (n * Co + c) * P;
          T s = T(0);
          for (int64_t i = 0; i < P; ++i) s += g[i];
          db[c] += s;
        }
    }
  };
  return detail::make_op<T>(std::move(out), std::move(parents), std::move(backward));
}

// ---------------------------------------------------------------------------
// Pooling and resampling
// ---------------------------------------------------------------------------

/// 2×2 max pooling, stride 2. H and W must be even.
template <class T>
Var<T> maxpool2(const Var<T>& x) {
  const auto& s = x.shape();
  if (s.size() != 4) throw std::invalid_argument("maxpool2: NCHW expected");
  if (s[2] % 2 != 0 || s[3] % 2 != 0)
    throw std::invalid_argument("maxpool2: spatial dims must be even");
  const int64_t n = s[0], c = s[1], H = s[2], W = s[3], OH = H / 2, OW = W / 2;
  Tensor<T> out({n, c, OH, OW});
  std::vector<int32_t> argmax(static_cast<size_t>(out.numel()));
  for (int64_t nc = 0; nc < n * c; ++nc) {
    const T* src = x.value().data() + nc * H * W;
    T* o = out.data() + nc * OH * OW;
    int32_t* am = argmax.data() + nc * OH * OW;
    for (int64_t oh = 0; oh < OH; ++oh)
      for (int64_t ow = 0; ow < OW; ++ow) {
        int64_t best = (2 * oh) * W + 2 * ow;
        T bv = src[best];
        const int64_t cands[3] = {(2 * oh) * W + 2 * ow + 1, (2 * oh + 1) * W + 2 * ow,
                                  (2 * oh + 1) * W + 2 * ow + 1};
        for (int64_t idx : cands)
          if (src[idx] > bv) { bv = src[idx]; best = idx; }
        o[oh * OW + ow] = bv;
        am[oh * OW + ow] = static_cast<int32_t>(best);
      }
  }
  return detail::make_op<T>(std::move(out), {x},
                            [n, c, H, W, OH, OW, argmax = std::move(argmax)](Node<T>& self) {
                              auto& p = *self.parents[0];
                              if (!p.requires_grad) return;
                              Tensor<T>& buf = p.grad_buffer();
                              for (int64_t nc = 0; nc < n * c; ++nc) {
                                const T* g = self.grad.data() + nc * OH * OW;
                                const int32_t* am = argmax.data() + nc * OH * OW;
                                T* dst = buf.data() + nc * H * W;
                                for (int64_t i = 0; i < OH * OW; ++i) dst[am[i]] += g[i];
                              }
                            });
}

/// Non-overlapping average pooling by an integer factor. Inputs whose dims are
/// not multiples of the factor are edge-replicated up to the next multiple.
template <class T>
Var<T> avgpool(const Var<T>& x, int64_t factor) {
  if (factor < 1) throw std::invalid_argument("avgpool: factor must be >= 1");
  const auto& s = x.shape();
  if (s.size() != 4) throw std::invalid_argument("avgpool: NCHW expected");
  if (factor == 1) return x;
  const int64_t n = s[0], c = s[1], H = s[2], W = s[3];
  const int64_t OH = (H + factor - 1) / factor, OW = (W + factor - 1) / factor;
  Tensor<T> out({n, c, OH, OW});
  const T inv = T(1) / static_cast<T>(factor * factor);
  for (int64_t nc = 0; nc < n * c; ++nc) {
    const T* src = x.value().data() + nc * H * W;
    T* o = out.data() + nc * OH * OW;
    for (int64_t oh = 0; oh < OH; ++oh)
      for (int64_t ow = 0; ow < OW; ++ow) {
        double sum = 0.0;
        for (int64_t i = 0; i < factor; ++i)
          for (int64_t j = 0; j < factor; ++j) {
            const int64_t ih = std::min(oh * factor + i, H - 1);  // edge replication
            const int64_t iw = std::min(ow * factor + j, W - 1);
            sum += static_cast<double>(src[ih * W + iw]);
          }
        o[oh * OW + ow] = static_cast<T>(sum) * inv;
      }
  }
  return detail::make_op<T>(std::move(out), {x}, [n, c, H, W, OH, OW, factor, inv](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    Tensor<T>& buf = p.grad_buffer();
    for (int64_t nc = 0; nc < n * c; ++nc) {
      const T* g = self.grad.data() + nc * OH * OW;
      T* dst = buf.data() + nc * H * W;
      for (int64_t oh = 0; oh < OH; ++oh)
        for (int64_t ow = 0; ow < OW; ++ow) {
          const T gv = g[oh * OW + ow] * inv;
          for (int64_t i = 0; i < factor; ++i)
            for (int64_t j = 0; j < factor; ++j) {
              const int64_t ih = std::min(oh * factor + i, H - 1);
              const int64_t iw = std::min(ow * factor + j, W - 1);
              dst[ih * W + iw] += gv;
            }
        }
    }
  });
}

/// Adaptive average pooling to an exact output size. Window for output index i
/// spans [floor(i*H/OH), ceil((i+1)*H/OH)); valid for OH above or below H.
template <class T>
Var<T> adaptive_avgpool(const Var<T>& x, int64_t OH, int64_t OW) {
  const auto& s = x.shape();
  if (s.size() != 4) throw std::invalid_argument("adaptive_avgpool: NCHW expected");
  if (OH < 1 || OW < 1) throw std::invalid_argument("adaptive_avgpool: bad output size");
  const int64_t n = s[0], c = s[1], H = s[2], W = s[3];
  auto start = [](int64_t i, int64_t in, int64_t out) { return (i * in) / out; };
  auto end = [](int64_t i, int64_t in, int64_t out) { return ((i + 1) * in + out - 1) / out; };
  Tensor<T> out({n, c, OH, OW});
  for (int64_t nc = 0; nc < n * c; ++nc) {
    const T* src = x.value().data() + nc * H * W;
    T* o = out.data() + nc * OH * OW;
    for (int64_t oh = 0; oh < OH; ++oh) {
      const int64_t h0 = start(oh, H, OH), h1 = end(oh, H, OH);
      for (int64_t ow = 0; ow < OW; ++ow) {
        const int64_t w0 = start(ow, W, OW), w1 = end(ow, W, OW);
        double sum = 0.0;
        for (int64_t ih = h0; ih < h1; ++ih)
          for (int64_t iw = w0; iw < w1; ++iw) sum += static_cast<double>(src[ih * W + iw]);
        o[oh * OW + ow] = static_cast<T>(sum / static_cast<double>((h1 - h0) * (w1 - w0)));
      }
    }
  }
  return detail::make_op<T>(std::move(out), {x}, [n, c, H, W, OH, OW, start, end](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    Tensor<T>& buf = p.grad_buffer();
    for (int64_t nc = 0; nc < n * c; ++nc) {
      const T* g = self.grad.data() + nc * OH * OW;
      T* dst = buf.data() + nc * H * W;
      for (int64_t oh = 0; oh < OH; ++oh) {
        const int64_t h0 = start(oh, H, OH), h1 = end(oh, H, OH);
        for (int64_t ow = 0; ow < OW; ++ow) {
          const int64_t w0 = start(ow, W, OW), w1 = end(ow, W, OW);
          const T gv = g[oh * OW + ow] / static_cast<T>((h1 - h0) * (w1 - w0));
          for (int64_t ih = h0; ih < h1; ++ih)
            for (int64_t iw = w0; iw < w1; ++iw) dst[ih * W + iw] += gv;
        }
      }
    }
  });
}

/// Nearest-neighbour upsampling by an integer factor.
template <class T>
Var<T> upsample_nearest(const Var<T>& x, int64_t factor) {
  if (factor < 1) throw std::invalid_argument("upsample_nearest: factor must be >= 1");
  if (factor == 1) return x;
  const auto& s = x.shape();
  if (s.size() != 4) throw std::invalid_argument("upsample_nearest: NCHW expected");
  const int64_t n = s[0], c = s[1], H = s[2], W = s[3], OH = H * factor, OW = W * factor;
  Tensor<T> out({n, c, OH, OW});
  for (int64_t nc = 0; nc < n * c; ++nc) {
    const T* src = x.value().data() + nc * H * W;
    T* o = out.data() + nc * OH * OW;
    for (int64_t oh = 0; oh < OH; ++oh) {
      const T* row = src + (oh / factor) * W;
      for (int64_t ow = 0; ow < OW; ++ow) o[oh * OW + ow] = row[ow / factor];
    }
  }
  return detail::make_op<T>(std::move(out), {x}, [n, c, H, W, OH, OW, factor](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    Tensor<T>& buf = p.grad_buffer();
    for (int64_t nc = 0; nc < n * c; ++nc) {
      const T* g = self.grad.data() + nc * OH * OW;
      T* dst = buf.data() + nc * H * W;
      for (int64_t oh = 0; oh < OH; ++oh)
        for (int64_t ow = 0; ow < OW; ++ow) dst[(oh / factor) * W + ow / factor] += g[oh * OW + ow];
    }
  });
}

/// Bilinear resize to an exact output size (half-pixel centers).
template <class T>
Var<T> resize_bilinear(const Var<T>& x, int64_t OH, int64_t OW) {
  const auto& s = x.shape();
  if (s.size() != 4) throw std::invalid_argument("resize_bilinear: NCHW expected");
  if (OH < 1 || OW < 1) throw std::invalid_argument("resize_bilinear: bad output size");
  const int64_t n = s[0], c = s[1], H = s[2], W = s[3];
  struct Tap {
    int32_t i0, i1;
    T w0, w1;
  };
  auto make_taps = [](int64_t in, int64_t out) {
    std::vector<Tap> taps(static_cast<size_t>(out));
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (int64_t i = 0; i < out; ++i) {
      double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
      src = std::max(0.0, std::min(src, static_cast<double>(in - 1)));
      const int64_t i0 = static_cast<int64_t>(std::floor(src));
      const int64_t i1 = std::min(i0 + 1, in - 1);
      const double f = src - static_cast<double>(i0);
      taps[static_cast<size_t>(i)] = {static_cast<int32_t>(i0), static_cast<int32_t>(i1),
                                      static_cast<T>(1.0 - f), static_cast<T>(f)};
    }
    return taps;
  };
  const std::vector<Tap> th = make_taps(H, OH), tw = make_taps(W, OW);
  Tensor<T> out({n, c, OH, OW});
  for (int64_t nc = 0; nc < n * c; ++nc) {
    const T* src = x.value().data() + nc * H * W;
    T* o = out.data() + nc * OH * OW;
    for (int64_t oh = 0; oh < OH; ++oh) {
      const Tap& a = th[static_cast<size_t>(oh)];
      for (int64_t ow = 0; ow < OW; ++ow) {
        const Tap& b = tw[static_cast<size_t>(ow)];
        o[oh * OW + ow] = a.w0 * (b.w0 * src[a.i0 * W + b.i0] + b.w1 * src[a.i0 * W + b.i1]) +
                          a.w1 * (b.w0 * src[a.i1 * W + b.i0] + b.w1 * src[a.i1 * W + b.i1]);
      }
    }
  }
  return detail::make_op<T>(std::move(out), {x}, [n, c, H, W, OH, OW, th, tw](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    Tensor<T>& buf = p.grad_buffer();
    for (int64_t nc = 0; nc < n * c; ++nc) {
      const T* g = self.grad.data() + nc * OH * OW;
      T* dst = buf.data() + nc * H * W;
      for (int64_t oh = 0; oh < OH; ++oh) {
        const Tap& a = th[static_cast<size_t>(oh)];
        for (int64_t ow = 0; ow < OW; ++ow) {
          const Tap& b = tw[static_cast<size_t>(ow)];
          const T gv = g[oh * OW + ow];
          dst[a.i0 * W + b.i0] += gv * a.w0 * b.w0;
          dst[a.i0 * W + b.i1] += gv * a.w0 * b.w1;
          dst[a.i1 * W + b.i0] += gv * a.w1 * b.w0;
          dst[a.i1 * W + b.i1] += gv * a.w1 * b.w1;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

namespace detail {

/// Shared normalization backward for a group of `m` elements with
/// x̂ = (x-μ)/σ̃. `var_grad` is false when σ̃ hit a floor (treated constant).
template <class T>
void norm_group_backward(const T* g, const T* xhat, T inv_sigma, bool var_grad, int64_t m,
                         T gamma, T* dst) {
  double gsum = 0.0, gxsum = 0.0;
  for (int64_t i = 0; i < m; ++i) {
    gsum += static_cast<double>(g[i]);
    gxsum += static_cast<double>(g[i]) * static_cast<double>(xhat[i]);
  }
  const double gmean = gsum / static_cast<double>(m);
  const double gxmean = gxsum / static_cast<double>(m);
  for (int64_t i = 0; i < m; ++i) {
    double d = static_cast<double>(g[i]) - gmean;
    if (var_grad) d -= static_cast<double>(xhat[i]) * gxmean;
    dst[i] += static_cast<T>(static_cast<double>(gamma) * static_cast<double>(inv_sigma) * d);
  }
}

}  // namespace detail

/// Batch normalization using batch statistics (per channel over N,H,W),
/// with affine parameters gamma/beta of size C.
template <class T>
Var<T> batchnorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const auto& s = x.shape();
  if (s.size() != 4) throw std::invalid_argument("batchnorm: NCHW expected");
  const int64_t n = s[0], c = s[1], hw = s[2] * s[3], m = n * hw;
  if (gamma.numel() != c || beta.numel() != c)
    throw std::invalid_argument("batchnorm: affine size mismatch");
  Tensor<T> out(s);
  Tensor<T> xhat(s);
  std::vector<T> inv_sigma(static_cast<size_t>(c));
  for (int64_t ic = 0; ic < c; ++ic) {
    double mean = 0.0;
    for (int64_t in = 0; in < n; ++in) {
      const T* src = x.value().data() + (in * c + ic) * hw;
      for (int64_t i = 0; i < hw; ++i) mean += static_cast<double>(src[i]);
    }
    mean /= static_cast<double>(m);
    double var = 0.0;
    for (int64_t in = 0; in < n; ++in) {
      const T* src = x.value().data() + (in * c + ic) * hw;
      for (int64_t i = 0; i < hw; ++i) {
        const double d = static_cast<double>(src[i]) - mean;
        var += d * d;
      }
    }
    var /= static_cast<double>(m);
    const double is = 1.0 / std::sqrt(var + static_cast<double>(eps));
    inv_sigma[static_cast<size_t>(ic)] = static_cast<T>(is);
    const T g = gamma.value()[ic], b = beta.value()[ic];
    for (int64_t in = 0; in < n; ++in) {
      const T* src = x.value().data() + (in * c + ic) * hw;
      T* xh = xhat.data() + (in * c + ic) * hw;
      T* o = out.data() + (in * c + ic) * hw;
      for (int64_t i = 0; i < hw; ++i) {
        xh[i] = static_cast<T>((static_cast<double>(src[i]) - mean) * is);
        o[i] = g * xh[i] + b;
      }
    }
  }
  return detail::make_op<T>(
      std::move(out), {x, gamma, beta},
      [n, c, hw, m, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma)](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        // gamma/beta gradients
        if (pg.requires_grad || pb.requires_grad) {
          for (int64_t ic = 0; ic < c; ++ic) {
            double dg = 0.0, db = 0.0;
            for (int64_t in = 0; in < n; ++in) {
              const T* g = self.grad.data() + (in * c + ic) * hw;
              const T* xh = xhat.data() + (in * c + ic) * hw;
              for (int64_t i = 0; i < hw; ++i) {
                dg += static_cast<double>(g[i]) * static_cast<double>(xh[i]);
                db += static_cast<double>(g[i]);
              }
            }
            if (pg.requires_grad) pg.grad_buffer()[ic] += static_cast<T>(dg);
            if (pb.requires_grad) pb.grad_buffer()[ic] += static_cast<T>(db);
          }
        }
        if (!px.requires_grad) return;
        Tensor<T>& buf = px.grad_buffer();
        // gather per-channel (strided) groups into contiguous scratch
        std::vector<T> gs(static_cast<size_t>(m)), xs(static_cast<size_t>(m)),
            ds(static_cast<size_t>(m));
        for (int64_t ic = 0; ic < c; ++ic) {
          for (int64_t in = 0; in < n; ++in) {
            std::copy_n(self.grad.data() + (in * c + ic) * hw, hw, gs.data() + in * hw);
            std::copy_n(xhat.data() + (in * c + ic) * hw, hw, xs.data() + in * hw);
          }
          std::fill(ds.begin(), ds.end(), T(0));
          detail::norm_group_backward(gs.data(), xs.data(), inv_sigma[static_cast<size_t>(ic)],
                                      true, m, pg.value[ic], ds.data());
          for (int64_t in = 0; in < n; ++in) {
            T* dst = buf.data() + (in * c + ic) * hw;
            const T* src = ds.data() + in * hw;
            for (int64_t i = 0; i < hw; ++i) dst[i] += src[i];
          }
        }
      });
}

/// Instance normalization without affine parameters: per sample and channel
/// over spatial positions, variance floored at eps (σ̃ = sqrt(max(σ², eps))).
template <class T>
Var<T> instance_norm(const Var<T>& x, T eps = T(1e-5)) {
  const auto& s = x.shape();
  if (s.size() != 4) throw std::invalid_argument("instance_norm: NCHW expected");
  const int64_t n = s[0], c = s[1], hw = s[2] * s[3];
  if (hw < 1) throw std::invalid_argument("instance_norm: empty spatial dims");
  Tensor<T> out(s);
  std::vector<T> inv_sigma(static_cast<size_t>(n * c));
  std::vector<uint8_t> floored(static_cast<size_t>(n * c));
  for (int64_t nc = 0; nc < n * c; ++nc) {
    const T* src = x.value().data() + nc * hw;
    double mean = 0.0;
    for (int64_t i = 0; i < hw; ++i) mean += static_cast<double>(src[i]);
    mean /= static_cast<double>(hw);
    double var = 0.0;
    for (int64_t i = 0; i < hw; ++i) {
      const double d = static_cast<double>(src[i]) - mean;
      var += d * d;
    }
    var /= static_cast<double>(hw);
    const bool at_floor = var < static_cast<double>(eps);
    const double is = 1.0 / std::sqrt(at_floor ? static_cast<double>(eps) : var);
    inv_sigma[static_cast<size_t>(nc)] = static_cast<T>(is);
    floored[static_cast<size_t>(nc)] = at_floor ? 1 : 0;
    T* o = out.data() + nc * hw;
    for (int64_t i = 0; i < hw; ++i)
      o[i] = static_cast<T>((static_cast<double>(src[i]) - mean) * is);
  }
  Tensor<T> xhat = out;
  return detail::make_op<T>(
      std::move(out), {x},
      [n, c, hw, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma),
       floored = std::move(floored)](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        Tensor<T>& buf = p.grad_buffer();
        for (int64_t nc = 0; nc < n * c; ++nc)
          detail::norm_group_backward(self.grad.data() + nc * hw, xhat.data() + nc * hw,
                                      inv_sigma[static_cast<size_t>(nc)],
                                      floored[static_cast<size_t>(nc)] == 0, hw, T(1),
                                      buf.data() + nc * hw);
      });
}

// ---------------------------------------------------------------------------
// Composite helpers
// ---------------------------------------------------------------------------

/// mean((a-b)^2)
template <class T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
  Var<T> d = sub(a, b);
  return mean_all(mul(d, d));
}

/// mean(|a-b|)
template <class T>
Var<T> l1(const Var<T>& a, const Var<T>& b) {
  return mean_all(abs_op(sub(a, b)));
}

}  // namespace delight::ad
