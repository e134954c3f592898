#pragma once

// Differentiable tensor ops. Matrix products go through Eigen; everything else
// is plain loops over row-major buffers.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "sgvl/nn/tensor.hpp"
#include "sgvl/util.hpp"

namespace sgvl::nn {

namespace detail {

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapR = Eigen::Map<MatR<T>>;
template <class T>
using CMapR = Eigen::Map<const MatR<T>>;

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit a;
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  a.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

template <class T>
bool wants(const Node<T>& self, std::size_t i) {
  return self.parents[i]->requires_grad;
}

}  // namespace detail

// a[..., K] x b[K, N] (or b[N, K] with trans_b) -> [..., N].
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_b = false) {
  if (a.rank() < 1 || b.rank() != 2) shape_error("matmul", a.shape(), b.shape());
  const std::size_t K = a.shape().back();
  const std::size_t bk = trans_b ? b.dim(1) : b.dim(0);
  const std::size_t N = trans_b ? b.dim(0) : b.dim(1);
  if (K != bk) shape_error("matmul", a.shape(), b.shape());
  const std::size_t R = K == 0 ? 0 : a.numel() / K;
  Shape out_shape = a.shape();
  out_shape.back() = N;
  std::vector<T> out(R * N);
  {
    detail::CMapR<T> A(a.data().data(), R, K);
    detail::MapR<T> C(out.data(), R, N);
    if (trans_b) C.noalias() = A * detail::CMapR<T>(b.data().data(), N, K).transpose();
    else C.noalias() = A * detail::CMapR<T>(b.data().data(), K, N);
  }
  return make_result<T>(out_shape, std::move(out), {a, b}, [R, K, N, trans_b](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    detail::CMapR<T> dC(self.grad.data(), R, N);
    if (pa.requires_grad) {
      detail::MapR<T> dA(pa.grad.data(), R, K);
      if (trans_b) dA.noalias() += dC * detail::CMapR<T>(pb.value.data(), N, K);
      else dA.noalias() += dC * detail::CMapR<T>(pb.value.data(), K, N).transpose();
    }
    if (pb.requires_grad) {
      detail::CMapR<T> A(pa.value.data(), R, K);
      if (trans_b) detail::MapR<T>(pb.grad.data(), N, K).noalias() += dC.transpose() * A;
      else detail::MapR<T>(pb.grad.data(), K, N).noalias() += A.transpose() * dC;
    }
  });
}

// Batched product over matching leading dims: [..., M, K] x [..., K, N].
template <class T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool trans_b = false) {
  if (a.rank() < 2 || a.rank() != b.rank()) shape_error("bmm", a.shape(), b.shape());
  const std::size_t r = a.rank();
  for (std::size_t i = 0; i + 2 < r; ++i)
    if (a.dim(i) != b.dim(i)) shape_error("bmm", a.shape(), b.shape());
  const std::size_t M = a.dim(r - 2), K = a.dim(r - 1);
  const std::size_t bk = trans_b ? b.dim(r - 1) : b.dim(r - 2);
  const std::size_t N = trans_b ? b.dim(r - 2) : b.dim(r - 1);
  if (K != bk) shape_error("bmm", a.shape(), b.shape());
  const std::size_t P = M * K == 0 ? 0 : a.numel() / (M * K);
  Shape out_shape = a.shape();
  out_shape[r - 1] = N;
  std::vector<T> out(P * M * N);
  for (std::size_t p = 0; p < P; ++p) {
    detail::CMapR<T> A(a.data().data() + p * M * K, M, K);
    detail::MapR<T> C(out.data() + p * M * N, M, N);
    if (trans_b) C.noalias() = A * detail::CMapR<T>(b.data().data() + p * N * K, N, K).transpose();
    else C.noalias() = A * detail::CMapR<T>(b.data().data() + p * K * N, K, N);
  }
  return make_result<T>(out_shape, std::move(out), {a, b}, [P, M, K, N, trans_b](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t p = 0; p < P; ++p) {
      detail::CMapR<T> dC(self.grad.data() + p * M * N, M, N);
      if (pa.requires_grad) {
        detail::MapR<T> dA(pa.grad.data() + p * M * K, M, K);
        if (trans_b) dA.noalias() += dC * detail::CMapR<T>(pb.value.data() + p * N * K, N, K);
        else dA.noalias() += dC * detail::CMapR<T>(pb.value.data() + p * K * N, K, N).transpose();
      }
      if (pb.requires_grad) {
        detail::CMapR<T> A(pa.value.data() + p * M * K, M, K);
        if (trans_b) detail::MapR<T>(pb.grad.data() + p * N * K, N, K).noalias() += dC.transpose() * A;
        else detail::MapR<T>(pb.grad.data() + p * K * N, K, N).noalias() += A.transpose() * dC;
      }
    }
  });
}

// Elementwise sum; `b` may also match a trailing suffix of `a`'s shape and is
// then broadcast over the leading dims.
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sb.size() > sa.size() || !std::equal(sb.rbegin(), sb.rend(), sa.rbegin()))
    shape_error("add", sa, sb);
  const std::size_t n = a.numel(), m = b.numel();
  std::vector<T> out(a.values());
  for (std::size_t i = 0; i < n; i += m)
    for (std::size_t j = 0; j < m; ++j) out[i + j] += b[j];
  return make_result<T>(sa, std::move(out), {a, b}, [n, m](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad)
      for (std::size_t i = 0; i < n; ++i) pa.grad[i] += self.grad[i];
    if (pb.requires_grad)
      for (std::size_t i = 0; i < n; i += m)
        for (std::size_t j = 0; j < m; ++j) pb.grad[j] += self.grad[i + j];
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_error("mul", a.shape(), b.shape());
  const std::size_t n = a.numel();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [n](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad)
      for (std::size_t i = 0; i < n; ++i) pa.grad[i] += self.grad[i] * pb.value[i];
    if (pb.requires_grad)
      for (std::size_t i = 0; i < n; ++i) pb.grad[i] += self.grad[i] * pa.value[i];
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.values());
  for (auto& v : out) v *= s;
  return make_result<T>(a.shape(), std::move(out), {a}, [s](Node<T>& self) {
    auto& pa = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += s * self.grad[i];
  });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T s{};
  for (auto v : a.data()) s += v;
  return make_result<T>({}, {s}, {a}, [](Node<T>& self) {
    auto& pa = *self.parents[0];
    for (auto& g : pa.grad) g += self.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T{1} / static_cast<T>(std::max<std::size_t>(1, a.numel())));
}

// Exact (erf) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T kInvSqrt2 = T(0.70710678118654752440);
  const std::size_t n = x.numel();
  std::vector<T> out(n), cdf(n);
  for (std::size_t i = 0; i < n; ++i) {
    cdf[i] = T(0.5) * (T(1) + std::erf(x[i] * kInvSqrt2));
    out[i] = x[i] * cdf[i];
  }
  return make_result<T>(x.shape(), std::move(out), {x}, [n, cdf = std::move(cdf)](Node<T>& self) {
    constexpr T kInvSqrt2Pi = T(0.39894228040143267794);
    auto& px = *self.parents[0];
    for (std::size_t i = 0; i < n; ++i) {
      const T v = px.value[i];
      px.grad[i] += self.grad[i] * (cdf[i] + v * kInvSqrt2Pi * std::exp(T(-0.5) * v * v));
    }
  });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
  const std::size_t n = x.numel();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = std::tanh(x[i]);
  return make_result<T>(x.shape(), std::move(out), {x}, [n](Node<T>& self) {
    auto& px = *self.parents[0];
    for (std::size_t i = 0; i < n; ++i) px.grad[i] += self.grad[i] * (T(1) - self.value[i] * self.value[i]);
  });
}

// Normalizes over the last dim, then applies gain and bias. A constant row
// maps to zeros before the affine.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-12)) {
  const std::size_t H = x.shape().back();
  if (gamma.numel() != H || beta.numel() != H) shape_error("layer_norm", x.shape(), gamma.shape());
  const std::size_t R = x.numel() / H;
  std::vector<T> xhat(x.numel()), inv_std(R), out(x.numel());
  for (std::size_t r = 0; r < R; ++r) {
    const T* row = x.data().data() + r * H;
    T mu{};
    for (std::size_t j = 0; j < H; ++j) mu += row[j];
    mu /= static_cast<T>(H);
    T var{};
    for (std::size_t j = 0; j < H; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(H);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < H; ++j) {
      xhat[r * H + j] = (row[j] - mu) * is;
      out[r * H + j] = xhat[r * H + j] * gamma[j] + beta[j];
    }
  }
  return make_result<T>(x.shape(), std::move(out), {x, gamma, beta},
                        [H, R, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& pg = *self.parents[1];
    auto& pb = *self.parents[2];
    std::vector<T> dxhat(H);
    for (std::size_t r = 0; r < R; ++r) {
      const T* g = self.grad.data() + r * H;
      const T* xh = xhat.data() + r * H;
      if (pg.requires_grad)
        for (std::size_t j = 0; j < H; ++j) pg.grad[j] += g[j] * xh[j];
      if (pb.requires_grad)
        for (std::size_t j = 0; j < H; ++j) pb.grad[j] += g[j];
      if (px.requires_grad) {
        T m1{}, m2{};
        for (std::size_t j = 0; j < H; ++j) {
          dxhat[j] = g[j] * pg.value[j];
          m1 += dxhat[j];
          m2 += dxhat[j] * xh[j];
        }
        m1 /= static_cast<T>(H);
        m2 /= static_cast<T>(H);
        T* dx = px.grad.data() + r * H;
        for (std::size_t j = 0; j < H; ++j) dx[j] += inv_std[r] * (dxhat[j] - m1 - xh[j] * m2);
      }
    }
  });
}

namespace detail {
template <class T>
void softmax_backward(const T* y, const T* dy, T* dx, std::size_t len, std::size_t stride) {
  T dot{};
  for (std::size_t k = 0; k < len; ++k) dot += dy[k * stride] * y[k * stride];
  for (std::size_t k = 0; k < len; ++k) dx[k * stride] += y[k * stride] * (dy[k * stride] - dot);
}
}  // namespace detail

template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw ShapeError("softmax: axis out of range for " + shape_str(x.shape()));
  auto sp = detail::split_axis(x.shape(), axis);
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.len * sp.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < sp.len; ++k) mx = std::max(mx, x[base + k * sp.inner]);
      T z{};
      for (std::size_t k = 0; k < sp.len; ++k) z += (out[base + k * sp.inner] = std::exp(x[base + k * sp.inner] - mx));
      for (std::size_t k = 0; k < sp.len; ++k) out[base + k * sp.inner] /= z;
    }
  return make_result<T>(x.shape(), std::move(out), {x}, [sp](Node<T>& self) {
    auto& px = *self.parents[0];
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const std::size_t base = o * sp.len * sp.inner + in;
        detail::softmax_backward(self.value.data() + base, self.grad.data() + base,
                                 px.grad.data() + base, sp.len, sp.inner);
      }
  });
}

// Softmax over the last dim of x[B, ..., S] restricted to keys with
// valid[b * S + s] != 0; invalid keys get exactly zero probability.
template <class T>
Tensor<T> masked_softmax(const Tensor<T>& x, std::span<const std::uint8_t> valid) {
  const std::size_t S = x.shape().back();
  const std::size_t B = x.dim(0);
  if (valid.size() != B * S) throw ShapeError("masked_softmax: mask size does not match " + shape_str(x.shape()));
  const std::size_t rows = x.numel() / S, per_batch = rows / B;
  std::vector<T> out(x.numel(), T{});
  std::vector<std::uint8_t> mask(valid.begin(), valid.end());
  for (std::size_t r = 0; r < rows; ++r) {
    const std::uint8_t* m = mask.data() + (r / per_batch) * S;
    const T* in = x.data().data() + r * S;
    T* o = out.data() + r * S;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t k = 0; k < S; ++k)
      if (m[k]) mx = std::max(mx, in[k]);
    if (mx == -std::numeric_limits<T>::infinity()) continue;
    T z{};
    for (std::size_t k = 0; k < S; ++k)
      if (m[k]) z += (o[k] = std::exp(in[k] - mx));
    for (std::size_t k = 0; k < S; ++k) o[k] /= z;
  }
  return make_result<T>(x.shape(), std::move(out), {x}, [rows, S](Node<T>& self) {
    auto& px = *self.parents[0];
    for (std::size_t r = 0; r < rows; ++r)
      detail::softmax_backward(self.value.data() + r * S, self.grad.data() + r * S,
                               px.grad.data() + r * S, S, 1);
  });
}

// Rows of `table[V, H]` gathered by id; result shape is `prefix + [H]`.
template <class T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids, Shape prefix) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be rank 2, got " + shape_str(table.shape()));
  if (numel_of(prefix) != ids.size()) throw ShapeError("embedding: id count does not match " + shape_str(prefix));
  const std::size_t V = table.dim(0), H = table.dim(1);
  std::vector<std::int32_t> idx(ids.begin(), ids.end());
  std::vector<T> out(idx.size() * H);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= V)
      throw ShapeError("embedding: id " + std::to_string(idx[i]) + " outside table of " + std::to_string(V));
    std::copy_n(table.data().data() + static_cast<std::size_t>(idx[i]) * H, H, out.data() + i * H);
  }
  prefix.push_back(H);
  return make_result<T>(prefix, std::move(out), {table}, [H, idx = std::move(idx)](Node<T>& self) {
    auto& pt = *self.parents[0];
    for (std::size_t i = 0; i < idx.size(); ++i) {
      T* dst = pt.grad.data() + static_cast<std::size_t>(idx[i]) * H;
      const T* src = self.grad.data() + i * H;
      for (std::size_t j = 0; j < H; ++j) dst[j] += src[j];
    }
  });
}

// Rows of x viewed as [R, H] (H = last dim), in the given order -> [n, H].
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
  const std::size_t H = x.shape().back();
  const std::size_t R = H == 0 ? 0 : x.numel() / H;
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  std::vector<T> out(idx.size() * H);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= R) throw ShapeError("gather_rows: row " + std::to_string(idx[i]) + " outside " + shape_str(x.shape()));
    std::copy_n(x.data().data() + idx[i] * H, H, out.data() + i * H);
  }
  return make_result<T>({rows.size(), H}, std::move(out), {x}, [H, idx = std::move(idx)](Node<T>& self) {
    auto& px = *self.parents[0];
    for (std::size_t i = 0; i < idx.size(); ++i) {
      T* dst = px.grad.data() + idx[i] * H;
      const T* src = self.grad.data() + i * H;
      for (std::size_t j = 0; j < H; ++j) dst[j] += src[j];
    }
  });
}

// Inverted dropout; identity when rate is 0.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ShapeError("dropout rate must be below 1");
  const T keep_scale = T(1.0 / (1.0 - rate));
  // one engine draw per call; per-element bits come from a stateless hash
  const std::uint64_t key = rng();
  const auto threshold = static_cast<std::uint64_t>(rate * 9007199254740992.0);  // 2^53
  std::vector<T> m(x.numel());
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < m.size(); ++i) {
    m[i] = (mix_seed(key, i) >> 11) < threshold ? T{} : keep_scale;
    out[i] = x[i] * m[i];
  }
  return make_result<T>(x.shape(), std::move(out), {x}, [m = std::move(m)](Node<T>& self) {
    auto& px = *self.parents[0];
    for (std::size_t i = 0; i < m.size(); ++i) px.grad[i] += self.grad[i] * m[i];
  });
}

// Mean cross-entropy over rows of logits[..., C] whose label is not
// `ignore`. With no labeled rows the result is a constant zero.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> labels,
                        std::int32_t ignore = -1) {
  const std::size_t C = logits.shape().back();
  const std::size_t N = logits.numel() / C;
  if (labels.size() != N) throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + shape_str(logits.shape()));
  std::vector<std::size_t> rows;
  std::vector<std::int32_t> targets;
  for (std::size_t i = 0; i < N; ++i)
    if (labels[i] != ignore) {
      if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= C)
        throw ShapeError("cross_entropy: label " + std::to_string(labels[i]) + " outside " + std::to_string(C) + " classes");
      rows.push_back(i);
      targets.push_back(labels[i]);
    }
  if (rows.empty()) return Tensor<T>::scalar(T{});
  std::vector<T> probs(rows.size() * C);
  T loss{};
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const T* in = logits.data().data() + rows[k] * C;
    T* p = probs.data() + k * C;
    T mx = *std::max_element(in, in + C);
    T z{};
    for (std::size_t c = 0; c < C; ++c) z += (p[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < C; ++c) p[c] /= z;
    loss += -(in[targets[k]] - mx - std::log(z));
  }
  const T inv = T(1) / static_cast<T>(rows.size());
  return make_result<T>({}, {loss * inv}, {logits},
                        [C, inv, rows = std::move(rows), targets = std::move(targets),
                         probs = std::move(probs)](Node<T>& self) {
    auto& pl = *self.parents[0];
    const T g = self.grad[0] * inv;
    for (std::size_t k = 0; k < rows.size(); ++k) {
      T* d = pl.grad.data() + rows[k] * C;
      const T* p = probs.data() + k * C;
      for (std::size_t c = 0; c < C; ++c) d[c] += g * p[c];
      d[targets[k]] -= g;
    }
  });
}

// Mean binary cross-entropy of sigmoid(scores) against targets in {0, 1}.
template <class T>
Tensor<T> bce_with_logits(const Tensor<T>& scores, std::span<const double> targets) {
  const std::size_t n = scores.numel();
  if (targets.size() != n) throw ShapeError("bce_with_logits: target count mismatch");
  if (n == 0) return Tensor<T>::scalar(T{});
  std::vector<T> y(targets.begin(), targets.end());
  T loss{};
  for (std::size_t i = 0; i < n; ++i) {
    const T s = scores[i];
    // log(1 + e^s) - y s, computed stably
    loss += std::max(s, T{}) - s * y[i] + std::log1p(std::exp(-std::abs(s)));
  }
  const T inv = T(1) / static_cast<T>(n);
  return make_result<T>({}, {loss * inv}, {scores}, [n, inv, y = std::move(y)](Node<T>& self) {
    auto& ps = *self.parents[0];
    for (std::size_t i = 0; i < n; ++i) {
      const T sig = T(1) / (T(1) + std::exp(-ps.value[i]));
      ps.grad[i] += self.grad[0] * inv * (sig - y[i]);
    }
  });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat of nothing");
  Shape out_shape = xs[0].shape();
  if (axis >= out_shape.size()) throw ShapeError("concat: axis out of range for " + shape_str(out_shape));
  out_shape[axis] = 0;
  for (auto& x : xs) {
    if (x.rank() != out_shape.size()) shape_error("concat", xs[0].shape(), x.shape());
    for (std::size_t i = 0; i < x.rank(); ++i)
      if (i != axis && x.dim(i) != xs[0].dim(i)) shape_error("concat", xs[0].shape(), x.shape());
    out_shape[axis] += x.dim(axis);
  }
  auto sp = detail::split_axis(out_shape, axis);
  std::vector<T> out(numel_of(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (auto& x : xs) {
    offsets.push_back(off);
    const std::size_t chunk = x.dim(axis) * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(x.data().data() + o * chunk, chunk, out.data() + o * sp.len * sp.inner + off * sp.inner);
    off += x.dim(axis);
  }
  std::vector<std::size_t> lens;
  for (auto& x : xs) lens.push_back(x.dim(axis));
  return make_result<T>(out_shape, std::move(out), xs, [sp, offsets, lens](Node<T>& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto& p = *self.parents[k];
      if (!p.requires_grad) continue;
      const std::size_t chunk = lens[k] * sp.inner;
      for (std::size_t o = 0; o < sp.outer; ++o) {
        const T* src = self.grad.data() + o * sp.len * sp.inner + offsets[k] * sp.inner;
        T* dst = p.grad.data() + o * chunk;
        for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
      }
    }
  });
}

// x restricted to [begin, end) along `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.rank() || begin > end || end > x.dim(axis))
    throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                     std::to_string(axis) + " of " + shape_str(x.shape()));
  auto sp = detail::split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  const std::size_t chunk = (end - begin) * sp.inner;
  std::vector<T> out(sp.outer * chunk);
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(x.data().data() + o * sp.len * sp.inner + begin * sp.inner, chunk, out.data() + o * chunk);
  return make_result<T>(out_shape, std::move(out), {x}, [sp, begin, chunk](Node<T>& self) {
    auto& px = *self.parents[0];
    for (std::size_t o = 0; o < sp.outer; ++o) {
      T* dst = px.grad.data() + o * sp.len * sp.inner + begin * sp.inner;
      const T* src = self.grad.data() + o * chunk;
      for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
    }
  });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel()) shape_error("reshape", x.shape(), shape);
  return make_result<T>(std::move(shape), x.values(), {x}, [](Node<T>& self) {
    auto& px = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i];
  });
}

// Axis permutation for rank <= 4: out.dim(i) = x.dim(perm[i]).
template <class T>
Tensor<T> permute(const Tensor<T>& x, std::vector<std::size_t> perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r || r > 4) throw ShapeError("permute: bad permutation for " + shape_str(x.shape()));
  Shape in4(4, 1), out_shape(r);
  for (std::size_t i = 0; i < r; ++i) in4[4 - r + i] = x.dim(i);
  std::array<std::size_t, 4> in_stride{};
  in_stride[3] = 1;
  for (int i = 2; i >= 0; --i) in_stride[i] = in_stride[i + 1] * in4[i + 1];
  // stride in the input for each output axis (padded to 4)
  std::array<std::size_t, 4> ostr{0, 0, 0, 0}, odim{1, 1, 1, 1};
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = x.dim(perm[i]);
    odim[4 - r + i] = out_shape[i];
    ostr[4 - r + i] = in_stride[4 - r + perm[i]];
  }
  std::vector<std::size_t> src_index(x.numel());
  std::size_t o = 0;
  for (std::size_t a = 0; a < odim[0]; ++a)
    for (std::size_t b = 0; b < odim[1]; ++b)
      for (std::size_t c = 0; c < odim[2]; ++c)
        for (std::size_t d = 0; d < odim[3]; ++d)
          src_index[o++] = a * ostr[0] + b * ostr[1] + c * ostr[2] + d * ostr[3];
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[src_index[i]];
  return make_result<T>(out_shape, std::move(out), {x}, [src_index = std::move(src_index)](Node<T>& self) {
    auto& px = *self.parents[0];
    for (std::size_t i = 0; i < src_index.size(); ++i) px.grad[src_index[i]] += self.grad[i];
  });
}

}  // namespace sgvl::nn
