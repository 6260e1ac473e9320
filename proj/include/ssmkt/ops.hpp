#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "ssmkt/tensor.hpp"

// Primitive tensor ops. Every op computes its forward value eagerly and, if
// any input is tracked, records one tape node whose closure accumulates
// input gradients from the output gradient. Saved buffers go through
// Tape::save so the retained-scalar counter stays exact.

namespace ssmkt {

template <typename S>
void check_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape != b.shape)
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
}

template <typename S>
void check_ndim(const char* op, const Tensor<S>& a, int nd) {
  if (a.ndim() != nd)
    throw ShapeError(std::string(op) + ": expected " + std::to_string(nd) + "-d tensor, got " +
                     shape_str(a.shape));
}

// ---------------------------------------------------------------------------
// matmul: (m,k) x (k,n) -> (m,n)

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  check_ndim("matmul", a, 2);
  check_ndim("matmul", b, 2);
  if (a.shape[1] != b.shape[0])
    throw ShapeError("matmul: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  const i64 m = a.shape[0], k = a.shape[1], n = b.shape[0] ? b.shape[1] : 0;
  Tensor<S> out = Tensor<S>::zeros({m, n});
  {
    const S* pa = a.ptr();
    const S* pb = b.ptr();
    S* po = out.ptr();
    for (i64 i = 0; i < m; ++i)
      for (i64 l = 0; l < k; ++l) {
        const S av = pa[i * k + l];
        const S* pbr = pb + l * n;
        S* por = po + i * n;
        for (i64 j = 0; j < n; ++j) por[j] += av * pbr[j];
      }
  }
  if (Tape<S>* tp = tape_of<S>({&a, &b})) {
    const int na = a.node, nb = b.node;
    auto sa = nb >= 0 ? tp->save(a) : nullptr;
    auto sb = na >= 0 ? tp->save(b) : nullptr;
    out.tape = tp;
    out.node = tp->record(m * n, [=](Tape<S>& t, const std::vector<S>& g) {
      if (na >= 0) {
        auto& ga = t.grad(na);
        for (i64 i = 0; i < m; ++i)
          for (i64 j = 0; j < n; ++j) {
            const S gv = g[static_cast<std::size_t>(i * n + j)];
            const S* pbr = sb->data() + j;
            for (i64 l = 0; l < k; ++l) ga[static_cast<std::size_t>(i * k + l)] += gv * pbr[l * n];
          }
      }
      if (nb >= 0) {
        auto& gb = t.grad(nb);
        for (i64 i = 0; i < m; ++i)
          for (i64 l = 0; l < k; ++l) {
            const S av = (*sa)[static_cast<std::size_t>(i * k + l)];
            const S* gr = g.data() + i * n;
            S* gbr = gb.data() + l * n;
            for (i64 j = 0; j < n; ++j) gbr[j] += av * gr[j];
          }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> transpose2d(const Tensor<S>& a) {
  check_ndim("transpose", a, 2);
  const i64 m = a.shape[0], n = a.shape[1];
  Tensor<S> out = Tensor<S>::zeros({n, m});
  for (i64 i = 0; i < m; ++i)
    for (i64 j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  if (Tape<S>* tp = tape_of<S>({&a})) {
    const int na = a.node;
    out.tape = tp;
    out.node = tp->record(m * n, [=](Tape<S>& t, const std::vector<S>& g) {
      auto& ga = t.grad(na);
      for (i64 i = 0; i < m; ++i)
        for (i64 j = 0; j < n; ++j) ga[static_cast<std::size_t>(i * n + j)] += g[static_cast<std::size_t>(j * m + i)];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// elementwise

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape("add", a, b);
  Tensor<S> out = Tensor<S>::zeros(a.shape);
  const i64 n = out.numel();
  for (i64 i = 0; i < n; ++i) out[i] = a[i] + b[i];
  if (Tape<S>* tp = tape_of<S>({&a, &b})) {
    const int na = a.node, nb = b.node;
    out.tape = tp;
    out.node = tp->record(n, [=](Tape<S>& t, const std::vector<S>& g) {
      if (na >= 0) {
        auto& ga = t.grad(na);
        for (i64 i = 0; i < n; ++i) ga[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)];
      }
      if (nb >= 0) {
        auto& gb = t.grad(nb);
        for (i64 i = 0; i < n; ++i) gb[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape("mul", a, b);
  Tensor<S> out = Tensor<S>::zeros(a.shape);
  const i64 n = out.numel();
  for (i64 i = 0; i < n; ++i) out[i] = a[i] * b[i];
  if (Tape<S>* tp = tape_of<S>({&a, &b})) {
    const int na = a.node, nb = b.node;
    auto sa = nb >= 0 ? tp->save(a) : nullptr;
    auto sb = na >= 0 ? tp->save(b) : nullptr;
    out.tape = tp;
    out.node = tp->record(n, [=](Tape<S>& t, const std::vector<S>& g) {
      if (na >= 0) {
        auto& ga = t.grad(na);
        for (i64 i = 0; i < n; ++i)
          ga[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)] * (*sb)[static_cast<std::size_t>(i)];
      }
      if (nb >= 0) {
        auto& gb = t.grad(nb);
        for (i64 i = 0; i < n; ++i)
          gb[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)] * (*sa)[static_cast<std::size_t>(i)];
      }
    });
  }
  return out;
}

// alpha*x + beta, elementwise with scalar coefficients. Backward needs no
// saved values.
template <typename S>
Tensor<S> affine(const Tensor<S>& a, S alpha, S beta) {
  Tensor<S> out = Tensor<S>::zeros(a.shape);
  const i64 n = out.numel();
  for (i64 i = 0; i < n; ++i) out[i] = alpha * a[i] + beta;
  if (Tape<S>* tp = tape_of<S>({&a})) {
    const int na = a.node;
    out.tape = tp;
    out.node = tp->record(n, [=](Tape<S>& t, const std::vector<S>& g) {
      auto& ga = t.grad(na);
      for (i64 i = 0; i < n; ++i) ga[static_cast<std::size_t>(i)] += alpha * g[static_cast<std::size_t>(i)];
    });
  }
  return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return add(a, affine(b, S(-1), S(0)));
}

// rows (m,n) + vector (n)
template <typename S>
Tensor<S> add_rowvec(const Tensor<S>& a, const Tensor<S>& b) {
  check_ndim("add_rowvec", a, 2);
  if (b.ndim() != 1 || b.shape[0] != a.shape[1])
    throw ShapeError("add_rowvec: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  const i64 m = a.shape[0], n = a.shape[1];
  Tensor<S> out = Tensor<S>::zeros(a.shape);
  for (i64 i = 0; i < m; ++i)
    for (i64 j = 0; j < n; ++j) out[i * n + j] = a[i * n + j] + b[j];
  if (Tape<S>* tp = tape_of<S>({&a, &b})) {
    const int na = a.node, nb = b.node;
    out.tape = tp;
    out.node = tp->record(m * n, [=](Tape<S>& t, const std::vector<S>& g) {
      if (na >= 0) {
        auto& ga = t.grad(na);
        for (i64 i = 0; i < m * n; ++i) ga[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)];
      }
      if (nb >= 0) {
        auto& gb = t.grad(nb);
        for (i64 i = 0; i < m; ++i)
          for (i64 j = 0; j < n; ++j) gb[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(i * n + j)];
      }
    });
  }
  return out;
}

// rows (m,n) scaled per-row by s (m)
template <typename S>
Tensor<S> scale_rows(const Tensor<S>& a, const Tensor<S>& s) {
  check_ndim("scale_rows", a, 2);
  if (s.ndim() != 1 || s.shape[0] != a.shape[0])
    throw ShapeError("scale_rows: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(s.shape));
  const i64 m = a.shape[0], n = a.shape[1];
  Tensor<S> out = Tensor<S>::zeros(a.shape);
  for (i64 i = 0; i < m; ++i)
    for (i64 j = 0; j < n; ++j) out[i * n + j] = a[i * n + j] * s[i];
  if (Tape<S>* tp = tape_of<S>({&a, &s})) {
    const int na = a.node, ns = s.node;
    auto sa = ns >= 0 ? tp->save(a) : nullptr;
    auto ss = na >= 0 ? tp->save(s) : nullptr;
    out.tape = tp;
    out.node = tp->record(m * n, [=](Tape<S>& t, const std::vector<S>& g) {
      if (na >= 0) {
        auto& ga = t.grad(na);
        for (i64 i = 0; i < m; ++i)
          for (i64 j = 0; j < n; ++j)
            ga[static_cast<std::size_t>(i * n + j)] += g[static_cast<std::size_t>(i * n + j)] * (*ss)[static_cast<std::size_t>(i)];
      }
      if (ns >= 0) {
        auto& gs = t.grad(ns);
        for (i64 i = 0; i < m; ++i) {
          S acc = S(0);
          for (i64 j = 0; j < n; ++j)
            acc += g[static_cast<std::size_t>(i * n + j)] * (*sa)[static_cast<std::size_t>(i * n + j)];
          gs[static_cast<std::size_t>(i)] += acc;
        }
      }
    });
  }
  return out;
}

// rows (m,n) multiplied per-column by v (n)
template <typename S>
Tensor<S> mul_rowvec(const Tensor<S>& a, const Tensor<S>& v) {
  check_ndim("mul_rowvec", a, 2);
  if (v.ndim() != 1 || v.shape[0] != a.shape[1])
    throw ShapeError("mul_rowvec: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(v.shape));
  const i64 m = a.shape[0], n = a.shape[1];
  Tensor<S> out = Tensor<S>::zeros(a.shape);
  for (i64 i = 0; i < m; ++i)
    for (i64 j = 0; j < n; ++j) out[i * n + j] = a[i * n + j] * v[j];
  if (Tape<S>* tp = tape_of<S>({&a, &v})) {
    const int na = a.node, nv = v.node;
    auto sa = nv >= 0 ? tp->save(a) : nullptr;
    auto sv = na >= 0 ? tp->save(v) : nullptr;
    out.tape = tp;
    out.node = tp->record(m * n, [=](Tape<S>& t, const std::vector<S>& g) {
      if (na >= 0) {
        auto& ga = t.grad(na);
        for (i64 i = 0; i < m; ++i)
          for (i64 j = 0; j < n; ++j)
            ga[static_cast<std::size_t>(i * n + j)] += g[static_cast<std::size_t>(i * n + j)] * (*sv)[static_cast<std::size_t>(j)];
      }
      if (nv >= 0) {
        auto& gv = t.grad(nv);
        for (i64 i = 0; i < m; ++i)
          for (i64 j = 0; j < n; ++j)
            gv[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(i * n + j)] * (*sa)[static_cast<std::size_t>(i * n + j)];
      }
    });
  }
  return out;
}

// Reshape without copying: same buffer, same tape node, new dims.
template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shp) {
  if (shape_numel(shp) != a.numel())
    throw ShapeError("reshape: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(shp));
  Tensor<S> out = a;
  out.shape = std::move(shp);
  return out;
}

// ---------------------------------------------------------------------------
// unary nonlinearities

namespace detail {

template <typename S, typename F, typename DF>
Tensor<S> unary_saving_input(const char* /*name*/, const Tensor<S>& a, F f, DF df) {
  Tensor<S> out = Tensor<S>::zeros(a.shape);
  const i64 n = out.numel();
  for (i64 i = 0; i < n; ++i) out[i] = f(a[i]);
  if (Tape<S>* tp = tape_of<S>({&a})) {
    const int na = a.node;
    auto sa = tp->save(a);
    out.tape = tp;
    out.node = tp->record(n, [=](Tape<S>& t, const std::vector<S>& g) {
      auto& ga = t.grad(na);
      for (i64 i = 0; i < n; ++i)
        ga[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)] * df((*sa)[static_cast<std::size_t>(i)]);
    });
  }
  return out;
}

template <typename S, typename F, typename DF>
Tensor<S> unary_saving_output(const char* /*name*/, const Tensor<S>& a, F f, DF df_of_y) {
  Tensor<S> out = Tensor<S>::zeros(a.shape);
  const i64 n = out.numel();
  for (i64 i = 0; i < n; ++i) out[i] = f(a[i]);
  if (Tape<S>* tp = tape_of<S>({&a})) {
    const int na = a.node;
    auto so = tp->save(out);
    out.tape = tp;
    out.node = tp->record(n, [=](Tape<S>& t, const std::vector<S>& g) {
      auto& ga = t.grad(na);
      for (i64 i = 0; i < n; ++i)
        ga[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)] * df_of_y((*so)[static_cast<std::size_t>(i)]);
    });
  }
  return out;
}

template <typename S>
S sigmoid_scalar(S x) {
  if (x >= S(0)) {
    S e = std::exp(-x);
    return S(1) / (S(1) + e);
  }
  S e = std::exp(x);
  return e / (S(1) + e);
}

template <typename S>
S softplus_scalar(S x) {
  if (x > S(30)) return x;
  if (x < S(-30)) return std::exp(x);
  return std::log1p(std::exp(x));
}

}  // namespace detail

template <typename S>
Tensor<S> exp_(const Tensor<S>& a) {
  return detail::unary_saving_output("exp", a, [](S x) { return std::exp(x); }, [](S y) { return y; });
}

template <typename S>
Tensor<S> log_(const Tensor<S>& a) {
  return detail::unary_saving_input("log", a, [](S x) { return std::log(x); }, [](S x) { return S(1) / x; });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  return detail::unary_saving_output(
      "sigmoid", a, [](S x) { return detail::sigmoid_scalar(x); }, [](S y) { return y * (S(1) - y); });
}

template <typename S>
Tensor<S> silu(const Tensor<S>& a) {
  return detail::unary_saving_input(
      "silu", a, [](S x) { return x * detail::sigmoid_scalar(x); },
      [](S x) {
        S s = detail::sigmoid_scalar(x);
        return s * (S(1) + x * (S(1) - s));
      });
}

// Exact Gaussian-CDF GELU (erf form).
template <typename S>
Tensor<S> gelu(const Tensor<S>& a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return detail::unary_saving_input(
      "gelu", a,
      [](S x) { return S(0.5) * x * (S(1) + S(std::erf(static_cast<double>(x) * kInvSqrt2))); },
      [](S x) {
        double xd = static_cast<double>(x);
        double phi = 0.5 * (1.0 + std::erf(xd * kInvSqrt2));
        double pdf = kInvSqrt2Pi * std::exp(-0.5 * xd * xd);
        return S(phi + xd * pdf);
      });
}

template <typename S>
Tensor<S> softplus(const Tensor<S>& a) {
  return detail::unary_saving_input(
      "softplus", a, [](S x) { return detail::softplus_scalar(x); },
      [](S x) { return detail::sigmoid_scalar(x); });
}

template <typename S>
Tensor<S> recip(const Tensor<S>& a) {
  return detail::unary_saving_output(
      "recip", a, [](S x) { return S(1) / x; }, [](S y) { return -y * y; });
}

// Gradient passes through strictly inside (lo, hi), zero where clipped.
template <typename S>
Tensor<S> clamp(const Tensor<S>& a, S lo, S hi) {
  return detail::unary_saving_input(
      "clamp", a, [=](S x) { return std::min(hi, std::max(lo, x)); },
      [=](S x) { return (x > lo && x < hi) ? S(1) : S(0); });
}

// ---------------------------------------------------------------------------
// softmax over the last axis, with max subtraction. -inf inputs produce
// exact zeros (used by the causal attention mask).

template <typename S>
Tensor<S> softmax_lastdim(const Tensor<S>& a) {
  if (a.ndim() < 1) throw ShapeError("softmax: rank-0 input");
  const i64 n = a.shape.back();
  const i64 rows = a.numel() / n;
  Tensor<S> out = Tensor<S>::zeros(a.shape);
  for (i64 r = 0; r < rows; ++r) {
    const S* x = a.ptr() + r * n;
    S* y = out.ptr() + r * n;
    S mx = x[0];
    for (i64 j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    S denom = S(0);
    for (i64 j = 0; j < n; ++j) {
      y[j] = std::exp(x[j] - mx);
      denom += y[j];
    }
    for (i64 j = 0; j < n; ++j) y[j] /= denom;
  }
  if (Tape<S>* tp = tape_of<S>({&a})) {
    const int na = a.node;
    auto so = tp->save(out);
    out.tape = tp;
    out.node = tp->record(a.numel(), [=](Tape<S>& t, const std::vector<S>& g) {
      auto& ga = t.grad(na);
      for (i64 r = 0; r < rows; ++r) {
        const S* y = so->data() + r * n;
        const S* gr = g.data() + r * n;
        S dot = S(0);
        for (i64 j = 0; j < n; ++j) dot += gr[j] * y[j];
        S* gar = ga.data() + r * n;
        for (i64 j = 0; j < n; ++j) gar[j] += (gr[j] - dot) * y[j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// layer norm over the last axis with learned scale/shift

template <typename S>
Tensor<S> layer_norm_lastdim(const Tensor<S>& a, const Tensor<S>& scale, const Tensor<S>& shift,
                             S eps = S(1e-5)) {
  if (a.ndim() < 1) throw ShapeError("layer_norm: rank-0 input");
  const i64 n = a.shape.back();
  if (scale.numel() != n || shift.numel() != n)
    throw ShapeError("layer_norm: scale/shift shape mismatch " + shape_str(a.shape) + " vs " +
                     shape_str(scale.shape));
  const i64 rows = a.numel() / n;
  Tensor<S> out = Tensor<S>::zeros(a.shape);
  Tensor<S> norm = Tensor<S>::zeros(a.shape);      // (x - mean) * invstd
  Tensor<S> invstd = Tensor<S>::zeros({rows});
  for (i64 r = 0; r < rows; ++r) {
    const S* x = a.ptr() + r * n;
    S mean = S(0);
    for (i64 j = 0; j < n; ++j) mean += x[j];
    mean /= S(n);
    S var = S(0);
    for (i64 j = 0; j < n; ++j) var += (x[j] - mean) * (x[j] - mean);
    var /= S(n);
    const S inv = S(1) / std::sqrt(var + eps);
    invstd[r] = inv;
    S* nm = norm.ptr() + r * n;
    S* y = out.ptr() + r * n;
    for (i64 j = 0; j < n; ++j) {
      nm[j] = (x[j] - mean) * inv;
      y[j] = nm[j] * scale[j] + shift[j];
    }
  }
  if (Tape<S>* tp = tape_of<S>({&a, &scale, &shift})) {
    const int na = a.node, ng = scale.node, nb = shift.node;
    auto snorm = tp->save(norm);
    auto sinv = tp->save(invstd);
    auto sscale = tp->save(scale);
    out.tape = tp;
    out.node = tp->record(a.numel(), [=](Tape<S>& t, const std::vector<S>& g) {
      for (i64 r = 0; r < rows; ++r) {
        const S* nm = snorm->data() + r * n;
        const S* gr = g.data() + r * n;
        if (ng >= 0) {
          auto& gg = t.grad(ng);
          for (i64 j = 0; j < n; ++j) gg[static_cast<std::size_t>(j)] += gr[j] * nm[j];
        }
        if (nb >= 0) {
          auto& gb = t.grad(nb);
          for (i64 j = 0; j < n; ++j) gb[static_cast<std::size_t>(j)] += gr[j];
        }
        if (na >= 0) {
          auto& ga = t.grad(na);
          const S inv = (*sinv)[static_cast<std::size_t>(r)];
          S mean_gy = S(0), mean_gyn = S(0);
          for (i64 j = 0; j < n; ++j) {
            const S gy = gr[j] * (*sscale)[static_cast<std::size_t>(j)];
            mean_gy += gy;
            mean_gyn += gy * nm[j];
          }
          mean_gy /= S(n);
          mean_gyn /= S(n);
          S* gar = ga.data() + r * n;
          for (i64 j = 0; j < n; ++j) {
            const S gy = gr[j] * (*sscale)[static_cast<std::size_t>(j)];
            gar[j] += inv * (gy - mean_gy - nm[j] * mean_gyn);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// causal depthwise conv1d. x is (T, C), kernel (C, k) indexed by lag
// (w[c][0] taps the current step), bias (C). Output at t reads x[t-k+1..t]
// with zero padding on the left, so position t never sees the future.

template <typename S>
Tensor<S> conv1d_causal(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  check_ndim("conv1d_causal", x, 2);
  check_ndim("conv1d_causal", w, 2);
  if (w.shape[0] != x.shape[1])
    throw ShapeError("conv1d_causal: shape mismatch " + shape_str(x.shape) + " vs " + shape_str(w.shape));
  if (b.numel() != x.shape[1])
    throw ShapeError("conv1d_causal: shape mismatch " + shape_str(x.shape) + " vs " + shape_str(b.shape));
  const i64 T = x.shape[0], C = x.shape[1], k = w.shape[1];
  Tensor<S> out = Tensor<S>::zeros(x.shape);
  for (i64 t = 0; t < T; ++t)
    for (i64 c = 0; c < C; ++c) {
      S acc = b[c];
      for (i64 i = 0; i < k && i <= t; ++i) acc += w[c * k + i] * x[(t - i) * C + c];
      out[t * C + c] = acc;
    }
  if (Tape<S>* tp = tape_of<S>({&x, &w, &b})) {
    const int nx = x.node, nw = w.node, nb = b.node;
    auto sx = nw >= 0 ? tp->save(x) : nullptr;
    auto sw = nx >= 0 ? tp->save(w) : nullptr;
    out.tape = tp;
    out.node = tp->record(T * C, [=](Tape<S>& t_, const std::vector<S>& g) {
      if (nx >= 0) {
        auto& gx = t_.grad(nx);
        for (i64 t = 0; t < T; ++t)
          for (i64 c = 0; c < C; ++c) {
            const S gv = g[static_cast<std::size_t>(t * C + c)];
            for (i64 i = 0; i < k && i <= t; ++i)
              gx[static_cast<std::size_t>((t - i) * C + c)] += gv * (*sw)[static_cast<std::size_t>(c * k + i)];
          }
      }
      if (nw >= 0) {
        auto& gw = t_.grad(nw);
        for (i64 t = 0; t < T; ++t)
          for (i64 c = 0; c < C; ++c) {
            const S gv = g[static_cast<std::size_t>(t * C + c)];
            for (i64 i = 0; i < k && i <= t; ++i)
              gw[static_cast<std::size_t>(c * k + i)] += gv * (*sx)[static_cast<std::size_t>((t - i) * C + c)];
          }
      }
      if (nb >= 0) {
        auto& gb = t_.grad(nb);
        for (i64 t = 0; t < T; ++t)
          for (i64 c = 0; c < C; ++c) gb[static_cast<std::size_t>(c)] += g[static_cast<std::size_t>(t * C + c)];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// row slicing / concat (axis 0)

template <typename S>
Tensor<S> slice_rows(const Tensor<S>& a, i64 r0, i64 r1) {
  if (a.ndim() < 1 || r0 < 0 || r1 < r0 || r1 > a.shape[0])
    throw ShapeError("slice_rows: range [" + std::to_string(r0) + "," + std::to_string(r1) +
                     ") invalid for " + shape_str(a.shape));
  Shape oshape = a.shape;
  oshape[0] = r1 - r0;
  const i64 stride = a.numel() / a.shape[0];
  Tensor<S> out = Tensor<S>::zeros(oshape);
  std::copy(a.ptr() + r0 * stride, a.ptr() + r1 * stride, out.ptr());
  if (Tape<S>* tp = tape_of<S>({&a})) {
    const int na = a.node;
    const i64 numel = out.numel();
    out.tape = tp;
    out.node = tp->record(numel, [=](Tape<S>& t, const std::vector<S>& g) {
      auto& ga = t.grad(na);
      for (i64 i = 0; i < numel; ++i) ga[static_cast<std::size_t>(r0 * stride + i)] += g[static_cast<std::size_t>(i)];
    });
  }
  return out;
}

template <typename S>
Tensor<S> concat_rows(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.ndim() != b.ndim() || a.ndim() < 1)
    throw ShapeError("concat_rows: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  for (int i = 1; i < a.ndim(); ++i)
    if (a.shape[i] != b.shape[i])
      throw ShapeError("concat_rows: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  Shape oshape = a.shape;
  oshape[0] += b.shape[0];
  Tensor<S> out = Tensor<S>::zeros(oshape);
  std::copy(a.ptr(), a.ptr() + a.numel(), out.ptr());
  std::copy(b.ptr(), b.ptr() + b.numel(), out.ptr() + a.numel());
  if (Tape<S>* tp = tape_of<S>({&a, &b})) {
    const int na = a.node, nb = b.node;
    const i64 an = a.numel(), bn = b.numel();
    out.tape = tp;
    out.node = tp->record(an + bn, [=](Tape<S>& t, const std::vector<S>& g) {
      if (na >= 0) {
        auto& ga = t.grad(na);
        for (i64 i = 0; i < an; ++i) ga[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)];
      }
      if (nb >= 0) {
        auto& gb = t.grad(nb);
        for (i64 i = 0; i < bn; ++i) gb[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(an + i)];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions

template <typename S>
Tensor<S> sum_all(const Tensor<S>& a) {
  Tensor<S> out = Tensor<S>::zeros({1});
  S acc = S(0);
  const i64 n = a.numel();
  for (i64 i = 0; i < n; ++i) acc += a[i];
  out[0] = acc;
  if (Tape<S>* tp = tape_of<S>({&a})) {
    const int na = a.node;
    out.tape = tp;
    out.node = tp->record(1, [=](Tape<S>& t, const std::vector<S>& g) {
      auto& ga = t.grad(na);
      for (i64 i = 0; i < n; ++i) ga[static_cast<std::size_t>(i)] += g[0];
    });
  }
  return out;
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& a) {
  return affine(sum_all(a), S(1) / S(a.numel()), S(0));
}

// ---------------------------------------------------------------------------
// embedding lookup: rows of table (V, D) selected by ids. Backward is a
// scatter-add into the table.

template <typename S>
Tensor<S> gather_rows(const Tensor<S>& table, const std::vector<i64>& ids) {
  check_ndim("gather_rows", table, 2);
  const i64 V = table.shape[0], D = table.shape[1];
  const i64 T = static_cast<i64>(ids.size());
  for (i64 t = 0; t < T; ++t)
    if (ids[static_cast<std::size_t>(t)] < 0 || ids[static_cast<std::size_t>(t)] >= V)
      throw FormatError("gather_rows: id " + std::to_string(ids[static_cast<std::size_t>(t)]) +
                        " at position " + std::to_string(t) + " outside table " + shape_str(table.shape));
  Tensor<S> out = Tensor<S>::zeros({T, D});
  for (i64 t = 0; t < T; ++t)
    std::copy(table.ptr() + ids[static_cast<std::size_t>(t)] * D,
              table.ptr() + (ids[static_cast<std::size_t>(t)] + 1) * D, out.ptr() + t * D);
  if (Tape<S>* tp = tape_of<S>({&table})) {
    const int nt = table.node;
    auto ids_copy = ids;
    out.tape = tp;
    out.node = tp->record(T * D, [=](Tape<S>& t_, const std::vector<S>& g) {
      auto& gt = t_.grad(nt);
      for (i64 t = 0; t < T; ++t) {
        S* row = gt.data() + ids_copy[static_cast<std::size_t>(t)] * D;
        const S* gr = g.data() + t * D;
        for (i64 j = 0; j < D; ++j) row[j] += gr[j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// select between two same-shape tensors by a 0/1 mask; the mask is data,
// not a differentiable input.

template <typename S>
Tensor<S> where_mask(const Tensor<S>& mask, const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape("where_mask", a, b);
  check_same_shape("where_mask", mask, a);
  Tensor<S> out = Tensor<S>::zeros(a.shape);
  const i64 n = out.numel();
  for (i64 i = 0; i < n; ++i) out[i] = mask[i] != S(0) ? a[i] : b[i];
  if (Tape<S>* tp = tape_of<S>({&a, &b})) {
    const int na = a.node, nb = b.node;
    auto sm = tp->save(mask);
    out.tape = tp;
    out.node = tp->record(n, [=](Tape<S>& t, const std::vector<S>& g) {
      if (na >= 0) {
        auto& ga = t.grad(na);
        for (i64 i = 0; i < n; ++i)
          if ((*sm)[static_cast<std::size_t>(i)] != S(0)) ga[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)];
      }
      if (nb >= 0) {
        auto& gb = t.grad(nb);
        for (i64 i = 0; i < n; ++i)
          if ((*sm)[static_cast<std::size_t>(i)] == S(0)) gb[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// broadcast products used by the selective-SSM plumbing. Shapes:
//   bmul_dn      (T,d) x (d,n)   -> (T,d,n)
//   bmul3_dn     (T,d,n) x (d,n) -> (T,d,n)
//   bmul3_td     (T,d,n) x (T,d) -> (T,d,n)
//   bmul3_tn     (T,d,n) x (T,n) -> (T,d,n)
//   contract_n   (T,d,n) x (T,n) -> (T,d)   (sum over n)

template <typename S>
void check_tdn(const char* op, const Tensor<S>& t3) {
  if (t3.ndim() != 3) throw ShapeError(std::string(op) + ": expected 3-d tensor, got " + shape_str(t3.shape));
}

template <typename S>
Tensor<S> bmul_dn(const Tensor<S>& a, const Tensor<S>& m) {
  check_ndim("bmul_dn", a, 2);
  check_ndim("bmul_dn", m, 2);
  const i64 T = a.shape[0], d = a.shape[1], n = m.shape[1];
  if (m.shape[0] != d)
    throw ShapeError("bmul_dn: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(m.shape));
  Tensor<S> out = Tensor<S>::zeros({T, d, n});
  for (i64 t = 0; t < T; ++t)
    for (i64 i = 0; i < d; ++i) {
      const S av = a[t * d + i];
      const S* mr = m.ptr() + i * n;
      S* o = out.ptr() + (t * d + i) * n;
      for (i64 j = 0; j < n; ++j) o[j] = av * mr[j];
    }
  if (Tape<S>* tp = tape_of<S>({&a, &m})) {
    const int na = a.node, nm = m.node;
    auto sa = nm >= 0 ? tp->save(a) : nullptr;
    auto sm = na >= 0 ? tp->save(m) : nullptr;
    out.tape = tp;
    out.node = tp->record(T * d * n, [=](Tape<S>& t_, const std::vector<S>& g) {
      if (na >= 0) {
        auto& ga = t_.grad(na);
        for (i64 t = 0; t < T; ++t)
          for (i64 i = 0; i < d; ++i) {
            const S* gr = g.data() + (t * d + i) * n;
            const S* mr = sm->data() + i * n;
            S acc = S(0);
            for (i64 j = 0; j < n; ++j) acc += gr[j] * mr[j];
            ga[static_cast<std::size_t>(t * d + i)] += acc;
          }
      }
      if (nm >= 0) {
        auto& gm = t_.grad(nm);
        for (i64 t = 0; t < T; ++t)
          for (i64 i = 0; i < d; ++i) {
            const S av = (*sa)[static_cast<std::size_t>(t * d + i)];
            const S* gr = g.data() + (t * d + i) * n;
            S* gmr = gm.data() + i * n;
            for (i64 j = 0; j < n; ++j) gmr[j] += av * gr[j];
          }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> bmul3_dn(const Tensor<S>& a, const Tensor<S>& m) {
  check_tdn("bmul3_dn", a);
  check_ndim("bmul3_dn", m, 2);
  const i64 T = a.shape[0], d = a.shape[1], n = a.shape[2];
  if (m.shape[0] != d || m.shape[1] != n)
    throw ShapeError("bmul3_dn: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(m.shape));
  Tensor<S> out = Tensor<S>::zeros(a.shape);
  for (i64 t = 0; t < T; ++t) {
    const S* ar = a.ptr() + t * d * n;
    S* o = out.ptr() + t * d * n;
    for (i64 i = 0; i < d * n; ++i) o[i] = ar[i] * m[i];
  }
  if (Tape<S>* tp = tape_of<S>({&a, &m})) {
    const int na = a.node, nm = m.node;
    auto sa = nm >= 0 ? tp->save(a) : nullptr;
    auto sm = na >= 0 ? tp->save(m) : nullptr;
    out.tape = tp;
    out.node = tp->record(T * d * n, [=](Tape<S>& t_, const std::vector<S>& g) {
      if (na >= 0) {
        auto& ga = t_.grad(na);
        for (i64 t = 0; t < T; ++t)
          for (i64 i = 0; i < d * n; ++i)
            ga[static_cast<std::size_t>(t * d * n + i)] += g[static_cast<std::size_t>(t * d * n + i)] * (*sm)[static_cast<std::size_t>(i)];
      }
      if (nm >= 0) {
        auto& gm = t_.grad(nm);
        for (i64 t = 0; t < T; ++t)
          for (i64 i = 0; i < d * n; ++i)
            gm[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(t * d * n + i)] * (*sa)[static_cast<std::size_t>(t * d * n + i)];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> bmul3_td(const Tensor<S>& a, const Tensor<S>& v) {
  check_tdn("bmul3_td", a);
  check_ndim("bmul3_td", v, 2);
  const i64 T = a.shape[0], d = a.shape[1], n = a.shape[2];
  if (v.shape[0] != T || v.shape[1] != d)
    throw ShapeError("bmul3_td: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(v.shape));
  Tensor<S> out = Tensor<S>::zeros(a.shape);
  for (i64 t = 0; t < T; ++t)
    for (i64 i = 0; i < d; ++i) {
      const S vv = v[t * d + i];
      const S* ar = a.ptr() + (t * d + i) * n;
      S* o = out.ptr() + (t * d + i) * n;
      for (i64 j = 0; j < n; ++j) o[j] = ar[j] * vv;
    }
  if (Tape<S>* tp = tape_of<S>({&a, &v})) {
    const int na = a.node, nv = v.node;
    auto sa = nv >= 0 ? tp->save(a) : nullptr;
    auto sv = na >= 0 ? tp->save(v) : nullptr;
    out.tape = tp;
    out.node = tp->record(T * d * n, [=](Tape<S>& t_, const std::vector<S>& g) {
      if (na >= 0) {
        auto& ga = t_.grad(na);
        for (i64 t = 0; t < T; ++t)
          for (i64 i = 0; i < d; ++i) {
            const S vv = (*sv)[static_cast<std::size_t>(t * d + i)];
            const S* gr = g.data() + (t * d + i) * n;
            S* gar = ga.data() + (t * d + i) * n;
            for (i64 j = 0; j < n; ++j) gar[j] += gr[j] * vv;
          }
      }
      if (nv >= 0) {
        auto& gv = t_.grad(nv);
        for (i64 t = 0; t < T; ++t)
          for (i64 i = 0; i < d; ++i) {
            const S* gr = g.data() + (t * d + i) * n;
            const S* ar = sa->data() + (t * d + i) * n;
            S acc = S(0);
            for (i64 j = 0; j < n; ++j) acc += gr[j] * ar[j];
            gv[static_cast<std::size_t>(t * d + i)] += acc;
          }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> bmul3_tn(const Tensor<S>& a, const Tensor<S>& v) {
  check_tdn("bmul3_tn", a);
  check_ndim("bmul3_tn", v, 2);
  const i64 T = a.shape[0], d = a.shape[1], n = a.shape[2];
  if (v.shape[0] != T || v.shape[1] != n)
    throw ShapeError("bmul3_tn: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(v.shape));
  Tensor<S> out = Tensor<S>::zeros(a.shape);
  for (i64 t = 0; t < T; ++t)
    for (i64 i = 0; i < d; ++i) {
      const S* ar = a.ptr() + (t * d + i) * n;
      const S* vr = v.ptr() + t * n;
      S* o = out.ptr() + (t * d + i) * n;
      for (i64 j = 0; j < n; ++j) o[j] = ar[j] * vr[j];
    }
  if (Tape<S>* tp = tape_of<S>({&a, &v})) {
    const int na = a.node, nv = v.node;
    auto sa = nv >= 0 ? tp->save(a) : nullptr;
    auto sv = na >= 0 ? tp->save(v) : nullptr;
    out.tape = tp;
    out.node = tp->record(T * d * n, [=](Tape<S>& t_, const std::vector<S>& g) {
      if (na >= 0) {
        auto& ga = t_.grad(na);
        for (i64 t = 0; t < T; ++t)
          for (i64 i = 0; i < d; ++i) {
            const S* gr = g.data() + (t * d + i) * n;
            const S* vr = sv->data() + t * n;
            S* gar = ga.data() + (t * d + i) * n;
            for (i64 j = 0; j < n; ++j) gar[j] += gr[j] * vr[j];
          }
      }
      if (nv >= 0) {
        auto& gv = t_.grad(nv);
        for (i64 t = 0; t < T; ++t)
          for (i64 i = 0; i < d; ++i) {
            const S* gr = g.data() + (t * d + i) * n;
            const S* ar = sa->data() + (t * d + i) * n;
            S* gvr = gv.data() + t * n;
            for (i64 j = 0; j < n; ++j) gvr[j] += gr[j] * ar[j];
          }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> contract_n(const Tensor<S>& a, const Tensor<S>& v) {
  check_tdn("contract_n", a);
  check_ndim("contract_n", v, 2);
  const i64 T = a.shape[0], d = a.shape[1], n = a.shape[2];
  if (v.shape[0] != T || v.shape[1] != n)
    throw ShapeError("contract_n: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(v.shape));
  Tensor<S> out = Tensor<S>::zeros({T, d});
  for (i64 t = 0; t < T; ++t)
    for (i64 i = 0; i < d; ++i) {
      const S* ar = a.ptr() + (t * d + i) * n;
      const S* vr = v.ptr() + t * n;
      S acc = S(0);
      for (i64 j = 0; j < n; ++j) acc += ar[j] * vr[j];
      out[t * d + i] = acc;
    }
  if (Tape<S>* tp = tape_of<S>({&a, &v})) {
    const int na = a.node, nv = v.node;
    auto sa = nv >= 0 ? tp->save(a) : nullptr;
    auto sv = na >= 0 ? tp->save(v) : nullptr;
    out.tape = tp;
    out.node = tp->record(T * d, [=](Tape<S>& t_, const std::vector<S>& g) {
      if (na >= 0) {
        auto& ga = t_.grad(na);
        for (i64 t = 0; t < T; ++t)
          for (i64 i = 0; i < d; ++i) {
            const S gv = g[static_cast<std::size_t>(t * d + i)];
            const S* vr = sv->data() + t * n;
            S* gar = ga.data() + (t * d + i) * n;
            for (i64 j = 0; j < n; ++j) gar[j] += gv * vr[j];
          }
      }
      if (nv >= 0) {
        auto& gv = t_.grad(nv);
        for (i64 t = 0; t < T; ++t) {
          S* gvr = gv.data() + t * n;
          for (i64 i = 0; i < d; ++i) {
            const S gval = g[static_cast<std::size_t>(t * d + i)];
            const S* ar = sa->data() + (t * d + i) * n;
            for (i64 j = 0; j < n; ++j) gvr[j] += gval * ar[j];
          }
        }
      }
    });
  }
  return out;
}

}  // namespace ssmkt
