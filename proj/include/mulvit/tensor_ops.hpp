#pragma once

#include <cmath>
#include <cstdint>

#include "mulvit/rng.hpp"
#include "mulvit/tensor.hpp"

namespace mulvit {

/// GELU activation form. The tanh approximation is the training default; the
/// exact Gaussian-CDF form is available behind a flag for comparison runs.
enum class GeluForm { TanhApprox, ExactCdf };

/// Thread-local counter of forward matrix-multiply FLOPs (2 per
/// multiply-accumulate). Enabled only while a CountScope is alive, so normal
/// training pays a single predictable branch per matmul.
class FlopCounter {
 public:
  class CountScope {
   public:
    CountScope() {
      prev_ = enabled_;
      enabled_ = true;
    }
    ~CountScope() { enabled_ = prev_; }
    CountScope(const CountScope&) = delete;
    CountScope& operator=(const CountScope&) = delete;

   private:
    bool prev_;
  };

  static void add(uint64_t flops) {
    if (enabled_) count_ += flops;
  }
  static uint64_t count() { return count_; }
  static void reset() { count_ = 0; }
  static bool enabled() { return enabled_; }

 private:
  inline static thread_local bool enabled_ = false;
  inline static thread_local uint64_t count_ = 0;
};

namespace detail {

// --- raw kernels ------------------------------------------------------------
// Loop orders are chosen so the innermost loop is a contiguous axpy or dot,
// which the compiler vectorizes without any aliasing heroics.

/// C[m,n] (+)= A[m,k] * B[k,n]
template <typename T>
void gemm_nn(const T* A, const T* B, T* C, int64_t m, int64_t k, int64_t n, bool accumulate) {
  if (!accumulate)
    for (int64_t i = 0; i < m * n; ++i) C[i] = T(0);
  for (int64_t i = 0; i < m; ++i) {
    T* c = C + i * n;
    const T* a = A + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const T ap = a[p];
      if (ap == T(0)) continue;
      const T* b = B + p * n;
      for (int64_t j = 0; j < n; ++j) c[j] += ap * b[j];
    }
  }
}

/// C[m,n] (+)= A[m,k] * B^T, with B stored [n,k]
template <typename T>
void gemm_nt(const T* A, const T* B, T* C, int64_t m, int64_t k, int64_t n, bool accumulate) {
  for (int64_t i = 0; i < m; ++i) {
    const T* a = A + i * k;
    T* c = C + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const T* b = B + j * k;
      T acc = T(0);
      for (int64_t p = 0; p < k; ++p) acc += a[p] * b[p];
      c[j] = accumulate ? c[j] + acc : acc;
    }
  }
}

/// C[k,n] (+)= A^T * B, with A stored [m,k], B stored [m,n]
template <typename T>
void gemm_tn(const T* A, const T* B, T* C, int64_t m, int64_t k, int64_t n, bool accumulate) {
  if (!accumulate)
    for (int64_t i = 0; i < k * n; ++i) C[i] = T(0);
  for (int64_t i = 0; i < m; ++i) {
    const T* a = A + i * k;
    const T* b = B + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const T ap = a[p];
      if (ap == T(0)) continue;
      T* c = C + p * n;
      for (int64_t j = 0; j < n; ++j) c[j] += ap * b[j];
    }
  }
}

template <typename T>
void require_rank2(const TensorT<T>& t, const char* who) {
  if (t.rank() != 2)
    throw ShapeError(std::string(who) + ": expected rank-2 tensor, got " + shape_str(t.shape()));
}

template <typename T>
void require_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* who) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(who) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

/// Gradient of a node if any contribution reached it, else nullptr.
template <typename T>
const std::vector<T>* grad_if_any(const std::shared_ptr<TensorNode<T>>& n) {
  return n->grad.empty() ? nullptr : &n->grad;
}

}  // namespace detail

// --- differentiable ops -----------------------------------------------------

/// C = A @ B for A:[m,k], B:[k,n].
template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  detail::require_rank2(a, "matmul lhs");
  detail::require_rank2(b, "matmul rhs");
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul: inner dims " + shape_str(a.shape()) + " @ " + shape_str(b.shape()));
  auto out = TensorT<T>::zeros({m, n});
  detail::gemm_nn(a.data(), b.data(), out.data(), m, k, n, false);
  FlopCounter::add(static_cast<uint64_t>(2) * static_cast<uint64_t>(m) *
                   static_cast<uint64_t>(k) * static_cast<uint64_t>(n));
  if (detail::tracing<T>({&a, &b})) {
    out.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), on = out.node();
    TapeT<T>::active()->record(on, [an, bn, on, m, k, n] {
      const auto* og = detail::grad_if_any(on);
      if (!og) return;
      if (an->requires_grad)
        detail::gemm_nt(og->data(), bn->value.data(), detail::acc_grad(an).data(), m, n, k, true);
      if (bn->requires_grad)
        detail::gemm_tn(an->value.data(), og->data(), detail::acc_grad(bn).data(), m, k, n, true);
    });
  }
  return out;
}

template <typename T>
TensorT<T> transpose(const TensorT<T>& a) {
  detail::require_rank2(a, "transpose");
  const int64_t m = a.dim(0), n = a.dim(1);
  auto out = TensorT<T>::zeros({n, m});
  const T* src = a.data();
  T* dst = out.data();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
  if (detail::tracing<T>({&a})) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    TapeT<T>::active()->record(on, [an, on, m, n] {
      const auto* og = detail::grad_if_any(on);
      if (!og || !an->requires_grad) return;
      auto& ag = detail::acc_grad(an);
      for (int64_t j = 0; j < n; ++j)
        for (int64_t i = 0; i < m; ++i) ag[i * n + j] += (*og)[j * m + i];
    });
  }
  return out;
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  detail::require_same_shape(a, b, "add");
  auto out = TensorT<T>::from_data(a.shape(), a.values());
  const T* bp = b.data();
  T* op = out.data();
  for (int64_t i = 0, n = out.numel(); i < n; ++i) op[i] += bp[i];
  if (detail::tracing<T>({&a, &b})) {
    out.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), on = out.node();
    TapeT<T>::active()->record(on, [an, bn, on] {
      const auto* og = detail::grad_if_any(on);
      if (!og) return;
      if (an->requires_grad) {
        auto& g = detail::acc_grad(an);
        for (size_t i = 0; i < g.size(); ++i) g[i] += (*og)[i];
      }
      if (bn->requires_grad) {
        auto& g = detail::acc_grad(bn);
        for (size_t i = 0; i < g.size(); ++i) g[i] += (*og)[i];
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  detail::require_same_shape(a, b, "sub");
  auto out = TensorT<T>::from_data(a.shape(), a.values());
  const T* bp = b.data();
  T* op = out.data();
  for (int64_t i = 0, n = out.numel(); i < n; ++i) op[i] -= bp[i];
  if (detail::tracing<T>({&a, &b})) {
    out.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), on = out.node();
    TapeT<T>::active()->record(on, [an, bn, on] {
      const auto* og = detail::grad_if_any(on);
      if (!og) return;
      if (an->requires_grad) {
        auto& g = detail::acc_grad(an);
        for (size_t i = 0; i < g.size(); ++i) g[i] += (*og)[i];
      }
      if (bn->requires_grad) {
        auto& g = detail::acc_grad(bn);
        for (size_t i = 0; i < g.size(); ++i) g[i] -= (*og)[i];
      }
    });
  }
  return out;
}

/// Elementwise (Hadamard) product.
template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  detail::require_same_shape(a, b, "mul");
  auto out = TensorT<T>::from_data(a.shape(), a.values());
  const T* bp = b.data();
  T* op = out.data();
  for (int64_t i = 0, n = out.numel(); i < n; ++i) op[i] *= bp[i];
  if (detail::tracing<T>({&a, &b})) {
    out.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), on = out.node();
    TapeT<T>::active()->record(on, [an, bn, on] {
      const auto* og = detail::grad_if_any(on);
      if (!og) return;
      if (an->requires_grad) {
        auto& g = detail::acc_grad(an);
        for (size_t i = 0; i < g.size(); ++i) g[i] += (*og)[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        auto& g = detail::acc_grad(bn);
        for (size_t i = 0; i < g.size(); ++i) g[i] += (*og)[i] * an->value[i];
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T s) {
  auto out = TensorT<T>::from_data(a.shape(), a.values());
  T* op = out.data();
  for (int64_t i = 0, n = out.numel(); i < n; ++i) op[i] *= s;
  if (detail::tracing<T>({&a})) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    TapeT<T>::active()->record(on, [an, on, s] {
      const auto* og = detail::grad_if_any(on);
      if (!og || !an->requires_grad) return;
      auto& g = detail::acc_grad(an);
      for (size_t i = 0; i < g.size(); ++i) g[i] += (*og)[i] * s;
    });
  }
  return out;
}

/// A:[m,n] + bias[n] broadcast across rows.
template <typename T>
TensorT<T> add_row_bias(const TensorT<T>& a, const TensorT<T>& bias) {
  detail::require_rank2(a, "add_row_bias input");
  if (bias.rank() != 1 || bias.dim(0) != a.dim(1))
    throw ShapeError("add_row_bias: bias " + shape_str(bias.shape()) + " vs input " +
                     shape_str(a.shape()));
  const int64_t m = a.dim(0), n = a.dim(1);
  auto out = TensorT<T>::from_data(a.shape(), a.values());
  const T* bp = bias.data();
  for (int64_t i = 0; i < m; ++i) {
    T* row = out.data() + i * n;
    for (int64_t j = 0; j < n; ++j) row[j] += bp[j];
  }
  if (detail::tracing<T>({&a, &bias})) {
    out.set_requires_grad(true);
    auto an = a.node(), bn = bias.node(), on = out.node();
    TapeT<T>::active()->record(on, [an, bn, on, m, n] {
      const auto* og = detail::grad_if_any(on);
      if (!og) return;
      if (an->requires_grad) {
        auto& g = detail::acc_grad(an);
        for (size_t i = 0; i < g.size(); ++i) g[i] += (*og)[i];
      }
      if (bn->requires_grad) {
        auto& g = detail::acc_grad(bn);
        for (int64_t i = 0; i < m; ++i) {
          const T* row = og->data() + i * n;
          for (int64_t j = 0; j < n; ++j) g[static_cast<size_t>(j)] += row[j];
        }
      }
    });
  }
  return out;
}

/// Per-row layer normalization with learnable affine:
/// y = gamma * (x - mean) / sqrt(var + eps) + beta, statistics over the last
/// dimension, biased variance.
template <typename T>
TensorT<T> layer_norm(const TensorT<T>& a, const TensorT<T>& gamma, const TensorT<T>& beta,
                      T eps) {
  detail::require_rank2(a, "layer_norm input");
  const int64_t m = a.dim(0), n = a.dim(1);
  if (gamma.rank() != 1 || gamma.dim(0) != n || beta.rank() != 1 || beta.dim(0) != n)
    throw ShapeError("layer_norm: affine params must be [" + std::to_string(n) + "]");
  auto out = TensorT<T>::zeros({m, n});
  auto xhat = std::make_shared<std::vector<T>>(static_cast<size_t>(m * n));
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(m));
  const T* gp = gamma.data();
  const T* bp = beta.data();
  for (int64_t i = 0; i < m; ++i) {
    const T* x = a.data() + i * n;
    T mean = T(0);
    for (int64_t j = 0; j < n; ++j) mean += x[j];
    mean /= static_cast<T>(n);
    T var = T(0);
    for (int64_t j = 0; j < n; ++j) {
      const T d = x[j] - mean;
      var += d * d;
    }
    var /= static_cast<T>(n);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(i)] = is;
    T* xh = xhat->data() + i * n;
    T* y = out.data() + i * n;
    for (int64_t j = 0; j < n; ++j) {
      xh[j] = (x[j] - mean) * is;
      y[j] = gp[j] * xh[j] + bp[j];
    }
  }
  if (detail::tracing<T>({&a, &gamma, &beta})) {
    out.set_requires_grad(true);
    auto an = a.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
    TapeT<T>::active()->record(on, [an, gn, bn, on, xhat, inv_std, m, n] {
      const auto* og = detail::grad_if_any(on);
      if (!og) return;
      if (gn->requires_grad) {
        auto& g = detail::acc_grad(gn);
        for (int64_t i = 0; i < m; ++i) {
          const T* dy = og->data() + i * n;
          const T* xh = xhat->data() + i * n;
          for (int64_t j = 0; j < n; ++j) g[static_cast<size_t>(j)] += dy[j] * xh[j];
        }
      }
      if (bn->requires_grad) {
        auto& g = detail::acc_grad(bn);
        for (int64_t i = 0; i < m; ++i) {
          const T* dy = og->data() + i * n;
          for (int64_t j = 0; j < n; ++j) g[static_cast<size_t>(j)] += dy[j];
        }
      }
      if (an->requires_grad) {
        auto& g = detail::acc_grad(an);
        const T inv_n = T(1) / static_cast<T>(n);
        for (int64_t i = 0; i < m; ++i) {
          const T* dy = og->data() + i * n;
          const T* xh = xhat->data() + i * n;
          const T is = (*inv_std)[static_cast<size_t>(i)];
          // dxhat = dy * gamma; dx = is * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
          T s1 = T(0), s2 = T(0);
          for (int64_t j = 0; j < n; ++j) {
            const T dxh = dy[j] * gn->value[static_cast<size_t>(j)];
            s1 += dxh;
            s2 += dxh * xh[j];
          }
          s1 *= inv_n;
          s2 *= inv_n;
          T* gx = g.data() + i * n;
          for (int64_t j = 0; j < n; ++j) {
            const T dxh = dy[j] * gn->value[static_cast<size_t>(j)];
            gx[j] += is * (dxh - s1 - xh[j] * s2);
          }
        }
      }
    });
  }
  return out;
}

/// Numerically-stabilized softmax over the last dimension of a rank-2 tensor.
template <typename T>
TensorT<T> softmax_rows(const TensorT<T>& a) {
  detail::require_rank2(a, "softmax_rows");
  const int64_t m = a.dim(0), n = a.dim(1);
  auto out = TensorT<T>::zeros({m, n});
  for (int64_t i = 0; i < m; ++i) {
    const T* x = a.data() + i * n;
    T* y = out.data() + i * n;
    T mx = x[0];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    T sum = T(0);
    for (int64_t j = 0; j < n; ++j) {
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    const T inv = T(1) / sum;
    for (int64_t j = 0; j < n; ++j) y[j] *= inv;
  }
  if (detail::tracing<T>({&a})) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    TapeT<T>::active()->record(on, [an, on, m, n] {
      const auto* og = detail::grad_if_any(on);
      if (!og || !an->requires_grad) return;
      auto& g = detail::acc_grad(an);
      for (int64_t i = 0; i < m; ++i) {
        const T* dy = og->data() + i * n;
        const T* y = on->value.data() + i * n;
        T dot = T(0);
        for (int64_t j = 0; j < n; ++j) dot += dy[j] * y[j];
        T* gx = g.data() + i * n;
        for (int64_t j = 0; j < n; ++j) gx[j] += y[j] * (dy[j] - dot);
      }
    });
  }
  return out;
}

namespace detail {

template <typename T>
inline T gelu_value(T x, GeluForm form) {
  if (form == GeluForm::TanhApprox) {
    const T c = std::sqrt(T(2) / T(M_PI));
    const T u = c * (x + T(0.044715) * x * x * x);
    return T(0.5) * x * (T(1) + std::tanh(u));
  }
  const T phi = T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
  return x * phi;
}

template <typename T>
inline T gelu_derivative(T x, GeluForm form) {
  if (form == GeluForm::TanhApprox) {
    const T c = std::sqrt(T(2) / T(M_PI));
    const T u = c * (x + T(0.044715) * x * x * x);
    const T t = std::tanh(u);
    const T du = c * (T(1) + T(3) * T(0.044715) * x * x);
    return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
  }
  const T phi = T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * T(M_PI));
  return phi + x * pdf;
}

}  // namespace detail

template <typename T>
TensorT<T> gelu(const TensorT<T>& a, GeluForm form = GeluForm::TanhApprox) {
  auto out = TensorT<T>::from_data(a.shape(), a.values());
  T* op = out.data();
  for (int64_t i = 0, n = out.numel(); i < n; ++i) op[i] = detail::gelu_value(op[i], form);
  if (detail::tracing<T>({&a})) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    TapeT<T>::active()->record(on, [an, on, form] {
      const auto* og = detail::grad_if_any(on);
      if (!og || !an->requires_grad) return;
      auto& g = detail::acc_grad(an);
      for (size_t i = 0; i < g.size(); ++i)
        g[i] += (*og)[i] * detail::gelu_derivative(an->value[i], form);
    });
  }
  return out;
}

/// Inverted dropout: at train time each element survives with probability
/// 1-p and is scaled by 1/(1-p); at eval time (or p==0) this is the identity.
template <typename T>
TensorT<T> dropout(const TensorT<T>& a, double p, bool training, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw ParameterError("dropout probability must be in [0,1)");
  if (!training || p == 0.0) return a;
  auto mask = std::make_shared<std::vector<T>>(a.values().size());
  const T keep_scale = T(1) / T(1.0 - p);
  for (auto& mv : *mask) mv = rng.bernoulli(1.0 - p) ? keep_scale : T(0);
  auto out = TensorT<T>::from_data(a.shape(), a.values());
  T* op = out.data();
  for (size_t i = 0; i < mask->size(); ++i) op[i] *= (*mask)[i];
  if (detail::tracing<T>({&a})) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    TapeT<T>::active()->record(on, [an, on, mask] {
      const auto* og = detail::grad_if_any(on);
      if (!og || !an->requires_grad) return;
      auto& g = detail::acc_grad(an);
      for (size_t i = 0; i < g.size(); ++i) g[i] += (*og)[i] * (*mask)[i];
    });
  }
  return out;
}

/// Concatenate rank-2 tensors along rows (dim 0); all must share dim 1.
template <typename T>
TensorT<T> concat_rows(const std::vector<TensorT<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const int64_t n = parts[0].dim(1);
  int64_t rows = 0;
  for (const auto& p : parts) {
    detail::require_rank2(p, "concat_rows");
    if (p.dim(1) != n) throw ShapeError("concat_rows: column mismatch");
    rows += p.dim(0);
  }
  auto out = TensorT<T>::zeros({rows, n});
  int64_t off = 0;
  for (const auto& p : parts) {
    std::memcpy(out.data() + off * n, p.data(), sizeof(T) * static_cast<size_t>(p.numel()));
    off += p.dim(0);
  }
  bool trace = TapeT<T>::active() != nullptr;
  bool any_rg = false;
  for (const auto& p : parts) any_rg = any_rg || p.requires_grad();
  if (trace && any_rg) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<TensorNode<T>>> nodes;
    nodes.reserve(parts.size());
    for (const auto& p : parts) nodes.push_back(p.node());
    auto on = out.node();
    TapeT<T>::active()->record(on, [nodes, on, n] {
      const auto* og = detail::grad_if_any(on);
      if (!og) return;
      int64_t off = 0;
      for (const auto& pn : nodes) {
        const int64_t r = static_cast<int64_t>(pn->value.size()) / n;
        if (pn->requires_grad) {
          auto& g = detail::acc_grad(pn);
          const T* src = og->data() + off * n;
          for (size_t i = 0; i < g.size(); ++i) g[i] += src[i];
        }
        off += r;
      }
    });
  }
  return out;
}

/// Rows [r0, r1) of a rank-2 tensor, as a copy.
template <typename T>
TensorT<T> slice_rows(const TensorT<T>& a, int64_t r0, int64_t r1) {
  detail::require_rank2(a, "slice_rows");
  const int64_t m = a.dim(0), n = a.dim(1);
  if (r0 < 0 || r1 > m || r0 >= r1)
    throw ShapeError("slice_rows: range [" + std::to_string(r0) + "," + std::to_string(r1) +
                     ") on " + shape_str(a.shape()));
  auto out = TensorT<T>::zeros({r1 - r0, n});
  std::memcpy(out.data(), a.data() + r0 * n, sizeof(T) * static_cast<size_t>(out.numel()));
  if (detail::tracing<T>({&a})) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    TapeT<T>::active()->record(on, [an, on, r0, n] {
      const auto* og = detail::grad_if_any(on);
      if (!og || !an->requires_grad) return;
      auto& g = detail::acc_grad(an);
      T* dst = g.data() + r0 * n;
      for (size_t i = 0; i < og->size(); ++i) dst[i] += (*og)[i];
    });
  }
  return out;
}

/// Columns [c0, c1) of a rank-2 tensor, as a copy.
template <typename T>
TensorT<T> slice_cols(const TensorT<T>& a, int64_t c0, int64_t c1) {
  detail::require_rank2(a, "slice_cols");
  const int64_t m = a.dim(0), n = a.dim(1);
  if (c0 < 0 || c1 > n || c0 >= c1)
    throw ShapeError("slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                     ") on " + shape_str(a.shape()));
  const int64_t w = c1 - c0;
  auto out = TensorT<T>::zeros({m, w});
  for (int64_t i = 0; i < m; ++i)
    std::memcpy(out.data() + i * w, a.data() + i * n + c0, sizeof(T) * static_cast<size_t>(w));
  if (detail::tracing<T>({&a})) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    TapeT<T>::active()->record(on, [an, on, c0, m, n, w] {
      const auto* og = detail::grad_if_any(on);
      if (!og || !an->requires_grad) return;
      auto& g = detail::acc_grad(an);
      for (int64_t i = 0; i < m; ++i) {
        T* dst = g.data() + i * n + c0;
        const T* src = og->data() + i * w;
        for (int64_t j = 0; j < w; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

/// Concatenate rank-2 tensors along columns (dim 1); all must share dim 0.
template <typename T>
TensorT<T> concat_cols(const std::vector<TensorT<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const int64_t m = parts[0].dim(0);
  int64_t cols = 0;
  for (const auto& p : parts) {
    detail::require_rank2(p, "concat_cols");
    if (p.dim(0) != m) throw ShapeError("concat_cols: row mismatch");
    cols += p.dim(1);
  }
  auto out = TensorT<T>::zeros({m, cols});
  int64_t off = 0;
  for (const auto& p : parts) {
    const int64_t w = p.dim(1);
    for (int64_t i = 0; i < m; ++i)
      std::memcpy(out.data() + i * cols + off, p.data() + i * w,
                  sizeof(T) * static_cast<size_t>(w));
    off += w;
  }
  bool any_rg = false;
  for (const auto& p : parts) any_rg = any_rg || p.requires_grad();
  if (TapeT<T>::active() != nullptr && any_rg) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<TensorNode<T>>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    auto on = out.node();
    TapeT<T>::active()->record(on, [nodes, on, m, cols] {
      const auto* og = detail::grad_if_any(on);
      if (!og) return;
      int64_t off = 0;
      for (const auto& pn : nodes) {
        const int64_t w = static_cast<int64_t>(pn->value.size()) / m;
        if (pn->requires_grad) {
          auto& g = detail::acc_grad(pn);
          for (int64_t i = 0; i < m; ++i) {
            const T* src = og->data() + i * cols + off;
            T* dst = g.data() + i * w;
            for (int64_t j = 0; j < w; ++j) dst[j] += src[j];
          }
        }
        off += w;
      }
    });
  }
  return out;
}

/// Sum of all elements, as a [1] tensor.
template <typename T>
TensorT<T> sum_all(const TensorT<T>& a) {
  T s = T(0);
  for (int64_t i = 0, n = a.numel(); i < n; ++i) s += a.data()[i];
  auto out = TensorT<T>::from_data({1}, {s});
  if (detail::tracing<T>({&a})) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    TapeT<T>::active()->record(on, [an, on] {
      const auto* og = detail::grad_if_any(on);
      if (!og || !an->requires_grad) return;
      auto& g = detail::acc_grad(an);
      for (auto& x : g) x += (*og)[0];
    });
  }
  return out;
}

/// Mean of all elements, as a [1] tensor.
template <typename T>
TensorT<T> mean_all(const TensorT<T>& a) {
  const T inv = T(1) / static_cast<T>(a.numel());
  T s = T(0);
  for (int64_t i = 0, n = a.numel(); i < n; ++i) s += a.data()[i];
  auto out = TensorT<T>::from_data({1}, {s * inv});
  if (detail::tracing<T>({&a})) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    TapeT<T>::active()->record(on, [an, on, inv] {
      const auto* og = detail::grad_if_any(on);
      if (!og || !an->requires_grad) return;
      auto& g = detail::acc_grad(an);
      for (auto& x : g) x += (*og)[0] * inv;
    });
  }
  return out;
}

/// Mean squared error between two same-shaped tensors, as a [1] tensor.
template <typename T>
TensorT<T> mse_loss(const TensorT<T>& pred, const TensorT<T>& target) {
  detail::require_same_shape(pred, target, "mse_loss");
  const int64_t n = pred.numel();
  T s = T(0);
  for (int64_t i = 0; i < n; ++i) {
    const T d = pred.data()[i] - target.data()[i];
    s += d * d;
  }
  auto out = TensorT<T>::from_data({1}, {s / static_cast<T>(n)});
  if (detail::tracing<T>({&pred, &target})) {
    out.set_requires_grad(true);
    auto pn = pred.node(), tn = target.node(), on = out.node();
    TapeT<T>::active()->record(on, [pn, tn, on, n] {
      const auto* og = detail::grad_if_any(on);
      if (!og) return;
      const T c = (*og)[0] * T(2) / static_cast<T>(n);
      if (pn->requires_grad) {
        auto& g = detail::acc_grad(pn);
        for (int64_t i = 0; i < n; ++i) g[static_cast<size_t>(i)] += c * (pn->value[i] - tn->value[i]);
      }
      if (tn->requires_grad) {
        auto& g = detail::acc_grad(tn);
        for (int64_t i = 0; i < n; ++i) g[static_cast<size_t>(i)] -= c * (pn->value[i] - tn->value[i]);
      }
    });
  }
  return out;
}

/// Split an image tensor [C,H,W] into non-overlapping PxP patches and flatten
/// each to a row. Patches are ordered row-major over the patch grid; inside a
/// patch, pixels are row-major with the channel index fastest, so the output
/// is [(H/P)*(W/P), P*P*C].
template <typename T>
TensorT<T> patchify(const TensorT<T>& img, int64_t patch) {
  if (img.rank() != 3) throw ShapeError("patchify: expected [C,H,W], got " + shape_str(img.shape()));
  const int64_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  if (patch <= 0 || H % patch != 0 || W % patch != 0)
    throw ShapeError("patchify: " + std::to_string(patch) + " does not tile " +
                     shape_str(img.shape()));
  const int64_t gh = H / patch, gw = W / patch;
  const int64_t rows = gh * gw, cols = patch * patch * C;
  auto out = TensorT<T>::zeros({rows, cols});
  const T* src = img.data();
  T* dst = out.data();
  for (int64_t pr = 0; pr < gh; ++pr)
    for (int64_t pc = 0; pc < gw; ++pc) {
      T* row = dst + (pr * gw + pc) * cols;
      int64_t o = 0;
      for (int64_t py = 0; py < patch; ++py)
        for (int64_t px = 0; px < patch; ++px)
          for (int64_t c = 0; c < C; ++c)
            row[o++] = src[(c * H + pr * patch + py) * W + pc * patch + px];
    }
  if (detail::tracing<T>({&img})) {
    out.set_requires_grad(true);
    auto an = img.node(), on = out.node();
    TapeT<T>::active()->record(on, [an, on, C, H, W, patch, gh, gw, cols] {
      const auto* og = detail::grad_if_any(on);
      if (!og || !an->requires_grad) return;
      auto& g = detail::acc_grad(an);
      for (int64_t pr = 0; pr < gh; ++pr)
        for (int64_t pc = 0; pc < gw; ++pc) {
          const T* row = og->data() + (pr * gw + pc) * cols;
          int64_t o = 0;
          for (int64_t py = 0; py < patch; ++py)
            for (int64_t px = 0; px < patch; ++px)
              for (int64_t c = 0; c < C; ++c)
                g[static_cast<size_t>((c * H + pr * patch + py) * W + pc * patch + px)] += row[o++];
        }
    });
  }
  return out;
}

}  // namespace mulvit
