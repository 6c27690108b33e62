// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives. Every op records a backward closure on the
// active tape when a tape is active and at least one input requires grad.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "nexus/kernels.hpp"
#include "nexus/tensor.hpp"

namespace nexus {

namespace detail {

template <std::floating_point T>
bool wants_grad(std::initializer_list<const Tensor<T>*> inputs) {
  if (active_tape<T>() == nullptr) return false;
  for (const auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

template <std::floating_point T>
void record(const Tensor<T>& out, std::function<void()> backward) {
  active_tape<T>()->record(out.storage(), std::move(backward));
}

template <std::floating_point T>
void check_finite(const Tensor<T>& t, const char* op) {
  if (!numerics().check_finite) return;
  for (T v : t.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite value in output");
  }
}

inline std::size_t leading(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) n *= s[i];
  return n;
}

template <std::floating_point T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

}  // namespace detail

/// Runs backward on the active tape.
template <std::floating_point T>
void backward(const Tensor<T>& loss) {
  auto* tape = active_tape<T>();
  if (tape == nullptr) throw ArgumentError("backward: no active tape");
  tape->backward(loss);
}

// ---------------------------------------------------------------- linear algebra

/// a[..., p, q] @ b[q, r] -> [..., p, r]
template <std::floating_point T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() != 2 || a.shape().back() != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }
  const std::size_t M = detail::leading(a.shape()), K = b.dim(0), N = b.dim(1);
  Shape out_shape = a.shape();
  out_shape.back() = N;
  Tensor<T> out(out_shape);
  kernels::gemm_nn(M, K, N, a.data().data(), b.data().data(), out.mutable_data().data(), false);
  detail::check_finite(out, "matmul");
  if (detail::wants_grad<T>({&a, &b})) {
    out.set_requires_grad(true);
    auto as = a.storage(), bs = b.storage(), os = out.storage();
    detail::record(out, [as, bs, os, M, K, N] {
      if (as->requires_grad) {
        as->ensure_grad();
        std::vector<T> bt(K * N);
        kernels::transpose(K, N, bs->data.data(), bt.data());
        kernels::gemm_nn(M, N, K, os->grad.data(), bt.data(), as->grad.data(), true);
      }
      if (bs->requires_grad) {
        bs->ensure_grad();
        kernels::gemm_tn_acc(M, K, N, as->data.data(), os->grad.data(), bs->grad.data());
      }
    });
  }
  return out;
}

/// a[..., q] @ b[r, q]^T -> [..., r]
template <std::floating_point T>
Tensor<T> matmul_transposed(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 1 || b.rank() != 2 || a.shape().back() != b.dim(1)) {
    throw ShapeError("matmul_transposed: incompatible shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()) + "^T");
  }
  const std::size_t M = detail::leading(a.shape()), K = b.dim(1), N = b.dim(0);
  Shape out_shape = a.shape();
  out_shape.back() = N;
  Tensor<T> out(out_shape);
  std::vector<T> bt(K * N);
  kernels::transpose(N, K, b.data().data(), bt.data());
  kernels::gemm_nn(M, K, N, a.data().data(), bt.data(), out.mutable_data().data(), false);
  detail::check_finite(out, "matmul_transposed");
  if (detail::wants_grad<T>({&a, &b})) {
    out.set_requires_grad(true);
    auto as = a.storage(), bs = b.storage(), os = out.storage();
    detail::record(out, [as, bs, os, M, K, N] {
      if (as->requires_grad) {
        as->ensure_grad();
        kernels::gemm_nn(M, N, K, os->grad.data(), bs->data.data(), as->grad.data(), true);
      }
      if (bs->requires_grad) {
        bs->ensure_grad();
        kernels::gemm_tn_acc(M, N, K, os->grad.data(), as->data.data(), bs->grad.data());
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- elementwise

template <std::floating_point T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  detail::check_finite(out, "add");
  if (detail::wants_grad<T>({&a, &b})) {
    out.set_requires_grad(true);
    auto as = a.storage(), bs = b.storage(), os = out.storage();
    detail::record(out, [as, bs, os] {
      for (auto* s : {as.get(), bs.get()}) {
        if (!s->requires_grad) continue;
        s->ensure_grad();
        for (std::size_t i = 0; i < s->grad.size(); ++i) s->grad[i] += os->grad[i];
      }
    });
  }
  return out;
}

template <std::floating_point T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
  detail::check_finite(out, "sub");
  if (detail::wants_grad<T>({&a, &b})) {
    out.set_requires_grad(true);
    auto as = a.storage(), bs = b.storage(), os = out.storage();
    detail::record(out, [as, bs, os] {
      if (as->requires_grad) {
        as->ensure_grad();
        for (std::size_t i = 0; i < as->grad.size(); ++i) as->grad[i] += os->grad[i];
      }
      if (bs->requires_grad) {
        bs->ensure_grad();
        for (std::size_t i = 0; i < bs->grad.size(); ++i) bs->grad[i] -= os->grad[i];
      }
    });
  }
  return out;
}

template <std::floating_point T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  detail::check_finite(out, "mul");
  if (detail::wants_grad<T>({&a, &b})) {
    out.set_requires_grad(true);
    auto as = a.storage(), bs = b.storage(), os = out.storage();
    detail::record(out, [as, bs, os] {
      if (as->requires_grad) {
        as->ensure_grad();
        for (std::size_t i = 0; i < as->grad.size(); ++i) as->grad[i] += os->grad[i] * bs->data[i];
      }
      if (bs->requires_grad) {
        bs->ensure_grad();
        for (std::size_t i = 0; i < bs->grad.size(); ++i) bs->grad[i] += os->grad[i] * as->data[i];
      }
    });
  }
  return out;
}

template <std::floating_point T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * factor;
  detail::check_finite(out, "scale");
  if (detail::wants_grad<T>({&a})) {
    out.set_requires_grad(true);
    auto as = a.storage(), os = out.storage();
    detail::record(out, [as, os, factor] {
      as->ensure_grad();
      for (std::size_t i = 0; i < as->grad.size(); ++i) as->grad[i] += os->grad[i] * factor;
    });
  }
  return out;
}

template <std::floating_point T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = T(0);
  for (T v : a.data()) total += v;
  Tensor<T> out = Tensor<T>::scalar(total);
  detail::check_finite(out, "sum");
  if (detail::wants_grad<T>({&a})) {
    out.set_requires_grad(true);
    auto as = a.storage(), os = out.storage();
    detail::record(out, [as, os] {
      as->ensure_grad();
      const T g = os->grad[0];
      for (auto& v : as->grad) v += g;
    });
  }
  return out;
}

template <std::floating_point T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

/// Copy with a new shape of equal element count.
template <std::floating_point T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  std::vector<T> data(a.data().begin(), a.data().end());
  Tensor<T> out(std::move(shape), std::move(data));
  if (detail::wants_grad<T>({&a})) {
    out.set_requires_grad(true);
    auto as = a.storage(), os = out.storage();
    detail::record(out, [as, os] {
      as->ensure_grad();
      for (std::size_t i = 0; i < as->grad.size(); ++i) as->grad[i] += os->grad[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------- activations

/// Numerically stable softmax along `axis` (max subtraction).
template <std::floating_point T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw ArgumentError("softmax: axis " + std::to_string(axis) + " out of range for shape " +
                        to_string(x.shape()));
  }
  const Shape& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  Tensor<T> out(s);
  auto in = x.data();
  auto o = out.mutable_data();
  for (std::size_t a = 0; a < outer; ++a) {
    for (std::size_t c = 0; c < inner; ++c) {
      const std::size_t base = a * len * inner + c;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, in[base + i * inner]);
      T denom = T(0);
      for (std::size_t i = 0; i < len; ++i) {
        const T e = std::exp(in[base + i * inner] - mx);
        o[base + i * inner] = e;
        denom += e;
      }
      for (std::size_t i = 0; i < len; ++i) o[base + i * inner] /= denom;
    }
  }
  detail::check_finite(out, "softmax");
  if (detail::wants_grad<T>({&x})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    detail::record(out, [xs, os, outer, inner, len] {
      xs->ensure_grad();
      for (std::size_t a = 0; a < outer; ++a) {
        for (std::size_t c = 0; c < inner; ++c) {
          const std::size_t base = a * len * inner + c;
          T dot = T(0);
          for (std::size_t i = 0; i < len; ++i) {
            const std::size_t k = base + i * inner;
            dot += os->grad[k] * os->data[k];
          }
          for (std::size_t i = 0; i < len; ++i) {
            const std::size_t k = base + i * inner;
            xs->grad[k] += os->data[k] * (os->grad[k] - dot);
          }
        }
      }
    });
  }
  return out;
}

/// SwiGLU over the last axis: x = [a | b] with halves of width n,
/// output = silu(a) * b. The first half is the gated (silu) half.
template <std::floating_point T>
Tensor<T> swiglu(const Tensor<T>& x) {
  if (x.rank() < 1 || x.shape().back() % 2 != 0) {
    throw ShapeError("swiglu: last dimension must be even, got shape " + to_string(x.shape()));
  }
  const std::size_t width = x.shape().back(), half = width / 2, rows = detail::leading(x.shape());
  Shape out_shape = x.shape();
  out_shape.back() = half;
  Tensor<T> out(out_shape);
  auto in = x.data();
  auto o = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* a = in.data() + r * width;
    const T* b = a + half;
    T* y = o.data() + r * half;
    for (std::size_t j = 0; j < half; ++j) {
      const T sig = T(1) / (T(1) + std::exp(-a[j]));
      y[j] = a[j] * sig * b[j];
    }
  }
  detail::check_finite(out, "swiglu");
  if (detail::wants_grad<T>({&x})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    detail::record(out, [xs, os, rows, half, width] {
      xs->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* a = xs->data.data() + r * width;
        const T* b = a + half;
        T* ga = xs->grad.data() + r * width;
        T* gb = ga + half;
        const T* gy = os->grad.data() + r * half;
        for (std::size_t j = 0; j < half; ++j) {
          const T sig = T(1) / (T(1) + std::exp(-a[j]));
          const T silu = a[j] * sig;
          const T dsilu = sig * (T(1) + a[j] * (T(1) - sig));
          ga[j] += gy[j] * b[j] * dsilu;
          gb[j] += gy[j] * silu;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- selection

/// Top-k result in row-major [rows, k] layout.
template <std::floating_point T>
struct TopK {
  std::size_t rows = 0;
  std::size_t k = 0;
  std::vector<std::size_t> indices;
  std::vector<T> values;
};

/// k largest entries of every row over the last axis, in descending value
/// order. Equal values are ordered by lowest index first.
template <std::floating_point T>
TopK<T> top_k(const Tensor<T>& scores, std::size_t k) {
  if (scores.rank() < 1) throw ShapeError("top_k: scalar input");
  const std::size_t n = scores.shape().back();
  if (k == 0 || k > n) {
    throw ArgumentError("top_k: k=" + std::to_string(k) + " must be in [1, " + std::to_string(n) +
                        "]");
  }
  TopK<T> result;
  result.rows = detail::leading(scores.shape());
  result.k = k;
  result.indices.resize(result.rows * k);
  result.values.resize(result.rows * k);
  std::vector<std::size_t> order(n);
  auto data = scores.data();
  for (std::size_t r = 0; r < result.rows; ++r) {
    const T* row = data.data() + r * n;
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [row](std::size_t i, std::size_t j) {
                        return row[i] > row[j] || (row[i] == row[j] && i < j);
                      });
    for (std::size_t s = 0; s < k; ++s) {
      result.indices[r * k + s] = order[s];
      result.values[r * k + s] = row[order[s]];
    }
  }
  return result;
}

// ---------------------------------------------------------------- transformer pieces

/// RMS normalization over the last axis with a learned per-channel scale.
template <std::floating_point T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& weight, T eps) {
  const std::size_t h = x.shape().back();
  if (weight.rank() != 1 || weight.dim(0) != h) {
    throw ShapeError("rms_norm: weight shape " + to_string(weight.shape()) +
                     " does not match input " + to_string(x.shape()));
  }
  const std::size_t rows = detail::leading(x.shape());
  Tensor<T> out(x.shape());
  std::vector<T> inv(rows);
  auto in = x.data();
  auto w = weight.data();
  auto o = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = in.data() + r * h;
    T ss = T(0);
    for (std::size_t j = 0; j < h; ++j) ss += xr[j] * xr[j];
    inv[r] = T(1) / std::sqrt(ss / static_cast<T>(h) + eps);
    T* yr = o.data() + r * h;
    for (std::size_t j = 0; j < h; ++j) yr[j] = xr[j] * inv[r] * w[j];
  }
  detail::check_finite(out, "rms_norm");
  if (detail::wants_grad<T>({&x, &weight})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), ws = weight.storage(), os = out.storage();
    detail::record(out, [xs, ws, os, inv = std::move(inv), rows, h] {
      if (xs->requires_grad) xs->ensure_grad();
      if (ws->requires_grad) ws->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = xs->data.data() + r * h;
        const T* gy = os->grad.data() + r * h;
        const T ir = inv[r];
        if (ws->requires_grad) {
          for (std::size_t j = 0; j < h; ++j) ws->grad[j] += gy[j] * xr[j] * ir;
        }
        if (xs->requires_grad) {
          T dot = T(0);
          for (std::size_t j = 0; j < h; ++j) dot += gy[j] * ws->data[j] * xr[j];
          const T coeff = ir * ir * ir * dot / static_cast<T>(h);
          T* gx = xs->grad.data() + r * h;
          for (std::size_t j = 0; j < h; ++j) gx[j] += ir * ws->data[j] * gy[j] - coeff * xr[j];
        }
      }
    });
  }
  return out;
}

/// Rotary position encoding on x[batch, seq, heads*head_dim]. Channels
/// (2i, 2i+1) within each head rotate by pos * base^(-2i/head_dim).
template <std::floating_point T>
Tensor<T> rotary(const Tensor<T>& x, std::size_t n_heads, double base) {
  if (x.rank() != 3 || x.dim(2) % n_heads != 0 || (x.dim(2) / n_heads) % 2 != 0) {
    throw ShapeError("rotary: expected [batch, seq, heads*even_head_dim], got " +
                     to_string(x.shape()));
  }
  const std::size_t B = x.dim(0), S = x.dim(1), H = x.dim(2), dh = H / n_heads, pairs = dh / 2;
  std::vector<T> cosv(S * pairs), sinv(S * pairs);
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t i = 0; i < pairs; ++i) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
      const double angle = static_cast<double>(s) * freq;
      cosv[s * pairs + i] = static_cast<T>(std::cos(angle));
      sinv[s * pairs + i] = static_cast<T>(std::sin(angle));
    }
  }
  Tensor<T> out(x.shape());
  auto in = x.data();
  auto o = out.mutable_data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t hd = 0; hd < n_heads; ++hd) {
        const std::size_t off = (b * S + s) * H + hd * dh;
        for (std::size_t i = 0; i < pairs; ++i) {
          const T c = cosv[s * pairs + i], sn = sinv[s * pairs + i];
          const T x0 = in[off + 2 * i], x1 = in[off + 2 * i + 1];
          o[off + 2 * i] = x0 * c - x1 * sn;
          o[off + 2 * i + 1] = x0 * sn + x1 * c;
        }
      }
  if (detail::wants_grad<T>({&x})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    detail::record(out, [xs, os, cosv = std::move(cosv), sinv = std::move(sinv), B, S, H, dh,
                         pairs, n_heads] {
      xs->ensure_grad();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t s = 0; s < S; ++s)
          for (std::size_t hd = 0; hd < n_heads; ++hd) {
            const std::size_t off = (b * S + s) * H + hd * dh;
            for (std::size_t i = 0; i < pairs; ++i) {
              const T c = cosv[s * pairs + i], sn = sinv[s * pairs + i];
              const T g0 = os->grad[off + 2 * i], g1 = os->grad[off + 2 * i + 1];
              xs->grad[off + 2 * i] += g0 * c + g1 * sn;
              xs->grad[off + 2 * i + 1] += -g0 * sn + g1 * c;
            }
          }
    });
  }
  return out;
}

/// Causal multi-head scaled dot-product attention on q, k, v of shape
/// [batch, seq, heads*head_dim]. Position i attends to positions <= i.
template <std::floating_point T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           std::size_t n_heads) {
  if (q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape() ||
      q.dim(2) % n_heads != 0) {
    throw ShapeError("causal_attention: q/k/v must share shape [batch, seq, heads*head_dim], got " +
                     to_string(q.shape()) + ", " + to_string(k.shape()) + ", " +
                     to_string(v.shape()));
  }
  const std::size_t B = q.dim(0), S = q.dim(1), H = q.dim(2), dh = H / n_heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<T> probs(B * n_heads * S * S, T(0));
  Tensor<T> out(q.shape());
  auto Q = q.data(), K = k.data(), V = v.data();
  auto O = out.mutable_data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t hd = 0; hd < n_heads; ++hd) {
      T* P = probs.data() + (b * n_heads + hd) * S * S;
      for (std::size_t i = 0; i < S; ++i) {
        const T* qi = Q.data() + (b * S + i) * H + hd * dh;
        T* pi = P + i * S;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          const T* kj = K.data() + (b * S + j) * H + hd * dh;
          T dot = T(0);
          for (std::size_t d = 0; d < dh; ++d) dot += qi[d] * kj[d];
          pi[j] = dot * inv_sqrt;
          mx = std::max(mx, pi[j]);
        }
        T denom = T(0);
        for (std::size_t j = 0; j <= i; ++j) {
          pi[j] = std::exp(pi[j] - mx);
          denom += pi[j];
        }
        T* oi = O.data() + (b * S + i) * H + hd * dh;
        for (std::size_t j = 0; j <= i; ++j) {
          pi[j] /= denom;
          const T* vj = V.data() + (b * S + j) * H + hd * dh;
          for (std::size_t d = 0; d < dh; ++d) oi[d] += pi[j] * vj[d];
        }
      }
    }
  detail::check_finite(out, "causal_attention");
  if (detail::wants_grad<T>({&q, &k, &v})) {
    out.set_requires_grad(true);
    auto qs = q.storage(), ks = k.storage(), vs = v.storage(), os = out.storage();
    detail::record(out, [qs, ks, vs, os, probs = std::move(probs), B, S, H, dh, n_heads,
                         inv_sqrt] {
      qs->ensure_grad();
      ks->ensure_grad();
      vs->ensure_grad();
      std::vector<T> dp(S);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t hd = 0; hd < n_heads; ++hd) {
          const T* P = probs.data() + (b * n_heads + hd) * S * S;
          for (std::size_t i = 0; i < S; ++i) {
            const T* pi = P + i * S;
            const T* go = os->grad.data() + (b * S + i) * H + hd * dh;
            T weighted = T(0);
            for (std::size_t j = 0; j <= i; ++j) {
              const T* vj = vs->data.data() + (b * S + j) * H + hd * dh;
              T* gv = vs->grad.data() + (b * S + j) * H + hd * dh;
              T dot = T(0);
              for (std::size_t d = 0; d < dh; ++d) {
                dot += go[d] * vj[d];
                gv[d] += pi[j] * go[d];
              }
              dp[j] = dot;
              weighted += pi[j] * dot;
            }
            const T* qi = qs->data.data() + (b * S + i) * H + hd * dh;
            T* gq = qs->grad.data() + (b * S + i) * H + hd * dh;
            for (std::size_t j = 0; j <= i; ++j) {
              const T ds = pi[j] * (dp[j] - weighted) * inv_sqrt;
              const T* kj = ks->data.data() + (b * S + j) * H + hd * dh;
              T* gk = ks->grad.data() + (b * S + j) * H + hd * dh;
              for (std::size_t d = 0; d < dh; ++d) {
                gq[d] += ds * kj[d];
                gk[d] += ds * qi[d];
              }
            }
          }
        }
    });
  }
  return out;
}

/// Row lookup: out[..., :] = table[ids[...], :]. `lead` is the shape of ids.
template <std::floating_point T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids, Shape lead) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be 2-D");
  if (shape_numel(lead) != ids.size()) throw ShapeError("embedding: ids do not match shape");
  const std::size_t V = table.dim(0), h = table.dim(1);
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= V) {
      throw ArgumentError("embedding: token id " + std::to_string(id) + " outside vocab of " +
                          std::to_string(V));
    }
  }
  Shape out_shape = lead;
  out_shape.push_back(h);
  Tensor<T> out(out_shape);
  auto src = table.data();
  auto o = out.mutable_data();
  for (std::size_t t = 0; t < ids.size(); ++t)
    std::copy_n(src.data() + static_cast<std::size_t>(ids[t]) * h, h, o.data() + t * h);
  if (detail::wants_grad<T>({&table})) {
    out.set_requires_grad(true);
    auto ts = table.storage(), os = out.storage();
    std::vector<std::int32_t> idv(ids.begin(), ids.end());
    detail::record(out, [ts, os, idv = std::move(idv), h] {
      ts->ensure_grad();
      for (std::size_t t = 0; t < idv.size(); ++t) {
        T* g = ts->grad.data() + static_cast<std::size_t>(idv[t]) * h;
        const T* go = os->grad.data() + t * h;
        for (std::size_t j = 0; j < h; ++j) g[j] += go[j];
      }
    });
  }
  return out;
}

/// Mean negative log-likelihood over positions whose target != ignore_id.
template <std::floating_point T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                        std::int32_t ignore_id) {
  const std::size_t V = logits.shape().back(), rows = detail::leading(logits.shape());
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) +
                     " targets for logits of shape " + to_string(logits.shape()));
  }
  std::size_t count = 0;
  for (auto t : targets) {
    if (t == ignore_id) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= V) {
      throw ArgumentError("cross_entropy: target " + std::to_string(t) + " outside vocab");
    }
    ++count;
  }
  if (count == 0) throw ArgumentError("cross_entropy: every target is padding");
  auto L = logits.data();
  std::vector<T> lse(rows, T(0));
  T total = T(0);
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] == ignore_id) continue;
    const T* z = L.data() + r * V;
    T mx = *std::max_element(z, z + V);
    T acc = T(0);
    for (std::size_t j = 0; j < V; ++j) acc += std::exp(z[j] - mx);
    lse[r] = mx + std::log(acc);
    total += lse[r] - z[targets[r]];
  }
  Tensor<T> out = Tensor<T>::scalar(total / static_cast<T>(count));
  detail::check_finite(out, "cross_entropy");
  if (detail::wants_grad<T>({&logits})) {
    out.set_requires_grad(true);
    auto ls = logits.storage(), os = out.storage();
    std::vector<std::int32_t> tv(targets.begin(), targets.end());
    detail::record(out, [ls, os, tv = std::move(tv), lse = std::move(lse), rows, V, count,
                         ignore_id] {
      ls->ensure_grad();
      const T g = os->grad[0] / static_cast<T>(count);
      for (std::size_t r = 0; r < rows; ++r) {
        if (tv[r] == ignore_id) continue;
        const T* z = ls->data.data() + r * V;
        T* gz = ls->grad.data() + r * V;
        for (std::size_t j = 0; j < V; ++j) gz[j] += g * std::exp(z[j] - lse[r]);
        gz[tv[r]] -= g;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- sparse dispatch

/// out[l, :] = x[rows[l], :] for x[N, h].
template <std::floating_point T>
Tensor<T> index_select_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
  if (x.rank() != 2) throw ShapeError("index_select_rows: expected 2-D input");
  if (rows.empty()) throw ArgumentError("index_select_rows: empty index list");
  const std::size_t N = x.dim(0), h = x.dim(1);
  Tensor<T> out(Shape{rows.size(), h});
  auto src = x.data();
  auto o = out.mutable_data();
  for (std::size_t l = 0; l < rows.size(); ++l) {
    if (rows[l] >= N) throw ArgumentError("index_select_rows: row index out of range");
    std::copy_n(src.data() + rows[l] * h, h, o.data() + l * h);
  }
  if (detail::wants_grad<T>({&x})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    std::vector<std::size_t> rv(rows.begin(), rows.end());
    detail::record(out, [xs, os, rv = std::move(rv), h] {
      xs->ensure_grad();
      for (std::size_t l = 0; l < rv.size(); ++l) {
        T* g = xs->grad.data() + rv[l] * h;
        const T* go = os->grad.data() + l * h;
        for (std::size_t j = 0; j < h; ++j) g[j] += go[j];
      }
    });
  }
  return out;
}

/// out = base; out[rows[l], :] += src[l, :].
template <std::floating_point T>
Tensor<T> index_add_rows(const Tensor<T>& base, std::span<const std::size_t> rows,
                         const Tensor<T>& src) {
  if (base.rank() != 2 || src.rank() != 2 || src.dim(0) != rows.size() ||
      src.dim(1) != base.dim(1)) {
    throw ShapeError("index_add_rows: incompatible shapes " + to_string(base.shape()) + " and " +
                     to_string(src.shape()));
  }
  const std::size_t N = base.dim(0), h = base.dim(1);
  Tensor<T> out = base.detach();
  auto o = out.mutable_data();
  auto s = src.data();
  for (std::size_t l = 0; l < rows.size(); ++l) {
    if (rows[l] >= N) throw ArgumentError("index_add_rows: row index out of range");
    T* dst = o.data() + rows[l] * h;
    const T* from = s.data() + l * h;
    for (std::size_t j = 0; j < h; ++j) dst[j] += from[j];
  }
  if (detail::wants_grad<T>({&base, &src})) {
    out.set_requires_grad(true);
    auto bs = base.storage(), ss = src.storage(), os = out.storage();
    std::vector<std::size_t> rv(rows.begin(), rows.end());
    detail::record(out, [bs, ss, os, rv = std::move(rv), h] {
      if (bs->requires_grad) {
        bs->ensure_grad();
        for (std::size_t i = 0; i < bs->grad.size(); ++i) bs->grad[i] += os->grad[i];
      }
      if (ss->requires_grad) {
        ss->ensure_grad();
        for (std::size_t l = 0; l < rv.size(); ++l) {
          T* g = ss->grad.data() + l * h;
          const T* go = os->grad.data() + rv[l] * h;
          for (std::size_t j = 0; j < h; ++j) g[j] += go[j];
        }
      }
    });
  }
  return out;
}

/// out[l] = x[rows[l], cols[l]] for x[N, n].
template <std::floating_point T>
Tensor<T> gather_elements(const Tensor<T>& x, std::span<const std::size_t> rows,
                          std::span<const std::size_t> cols) {
  if (x.rank() != 2 || rows.size() != cols.size() || rows.empty()) {
    throw ShapeError("gather_elements: expected 2-D input and matching non-empty index lists");
  }
  const std::size_t N = x.dim(0), n = x.dim(1);
  Tensor<T> out(Shape{rows.size()});
  auto src = x.data();
  auto o = out.mutable_data();
  for (std::size_t l = 0; l < rows.size(); ++l) {
    if (rows[l] >= N || cols[l] >= n) throw ArgumentError("gather_elements: index out of range");
    o[l] = src[rows[l] * n + cols[l]];
  }
  if (detail::wants_grad<T>({&x})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    std::vector<std::size_t> flat(rows.size());
    for (std::size_t l = 0; l < rows.size(); ++l) flat[l] = rows[l] * n + cols[l];
    detail::record(out, [xs, os, flat = std::move(flat)] {
      xs->ensure_grad();
      for (std::size_t l = 0; l < flat.size(); ++l) xs->grad[flat[l]] += os->grad[l];
    });
  }
  return out;
}

/// out[l, :] = g[l] * x[l, :].
template <std::floating_point T>
Tensor<T> scale_rows(const Tensor<T>& x, const Tensor<T>& g) {
  if (x.rank() != 2 || g.rank() != 1 || g.dim(0) != x.dim(0)) {
    throw ShapeError("scale_rows: incompatible shapes " + to_string(x.shape()) + " and " +
                     to_string(g.shape()));
  }
  const std::size_t L = x.dim(0), h = x.dim(1);
  Tensor<T> out(x.shape());
  auto xi = x.data(), gi = g.data();
  auto o = out.mutable_data();
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t j = 0; j < h; ++j) o[l * h + j] = gi[l] * xi[l * h + j];
  detail::check_finite(out, "scale_rows");
  if (detail::wants_grad<T>({&x, &g})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), gs = g.storage(), os = out.storage();
    detail::record(out, [xs, gs, os, L, h] {
      if (xs->requires_grad) xs->ensure_grad();
      if (gs->requires_grad) gs->ensure_grad();
      for (std::size_t l = 0; l < L; ++l) {
        const T* go = os->grad.data() + l * h;
        if (xs->requires_grad) {
          for (std::size_t j = 0; j < h; ++j) xs->grad[l * h + j] += gs->data[l] * go[j];
        }
        if (gs->requires_grad) {
          T dot = T(0);
          for (std::size_t j = 0; j < h; ++j) dot += go[j] * xs->data[l * h + j];
          gs->grad[l] += dot;
        }
      }
    });
  }
  return out;
}

}  // namespace nexus
