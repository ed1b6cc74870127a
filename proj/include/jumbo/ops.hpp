#pragma once

// Differentiable primitives. Every op takes the Tape it records onto; when the
// tape is not recording or no input requires a gradient, nothing is recorded.
// Outputs are checked for NaN/Inf and a NumericError is raised instead of
// propagating them.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "jumbo/rng.hpp"
#include "jumbo/tensor.hpp"

namespace jumbo::ops {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using CMap = Eigen::Map<const RowMat<T>>;
template <class T>
using MMap = Eigen::Map<RowMat<T>>;

template <class T>
CMap<T> cmap(std::span<const T> s, std::size_t rows, std::size_t cols, std::size_t offset = 0) {
  return CMap<T>(s.data() + offset, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <class T>
MMap<T> mmap(std::span<T> s, std::size_t rows, std::size_t cols, std::size_t offset = 0) {
  return MMap<T>(s.data() + offset, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <class T>
void check_finite(const Tensor<T>& t, const char* op) {
  for (T v : t.values()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite value in output");
  }
}

inline std::size_t resolve_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(a);
}

// View of a shape as outer x len x inner around one axis.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

template <class T>
Tensor<T> make_output(Tape<T>& tp, Shape shape, std::initializer_list<const Tensor<T>*> inputs) {
  return Tensor<T>(std::move(shape), tp.wants_grad(inputs));
}

}  // namespace detail

template <class T>
Tensor<T> matmul(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: cannot multiply " + to_string(a.shape()) + " by " + to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = detail::make_output(tp, {m, n}, {&a, &b});
  detail::mmap(out.mutable_values(), m, n).noalias() = detail::cmap(a.values(), m, k) * detail::cmap(b.values(), k, n);
  tp.count_matmul(1, m, k, n);
  detail::check_finite(out, "matmul");
  if (out.requires_grad()) {
    tp.record(out, [a, b, out, m, k, n]() mutable {
      auto g = detail::cmap(out.grad(), m, n);
      if (a.requires_grad()) detail::mmap(a.mutable_grad(), m, k).noalias() += g * detail::cmap(b.values(), k, n).transpose();
      if (b.requires_grad()) detail::mmap(b.mutable_grad(), k, n).noalias() += detail::cmap(a.values(), m, k).transpose() * g;
    });
  }
  return out;
}

// Batched product: a [B,m,k] times b [B,k,n] (or b [B,n,k] when transpose_b).
template <class T>
Tensor<T> bmm(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != (transpose_b ? b.dim(2) : b.dim(1))) {
    throw ShapeError("bmm: cannot multiply " + to_string(a.shape()) + " by " + to_string(b.shape()) +
                     (transpose_b ? " (transposed)" : ""));
  }
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = transpose_b ? b.dim(1) : b.dim(2);
  auto out = detail::make_output(tp, {batch, m, n}, {&a, &b});
  for (std::size_t i = 0; i < batch; ++i) {
    auto o = detail::mmap(out.mutable_values(), m, n, i * m * n);
    auto am = detail::cmap(a.values(), m, k, i * m * k);
    if (transpose_b) {
      o.noalias() = am * detail::cmap(b.values(), n, k, i * n * k).transpose();
    } else {
      o.noalias() = am * detail::cmap(b.values(), k, n, i * k * n);
    }
  }
  tp.count_matmul(batch, m, k, n);
  detail::check_finite(out, "bmm");
  if (out.requires_grad()) {
    tp.record(out, [a, b, out, batch, m, k, n, transpose_b]() mutable {
      for (std::size_t i = 0; i < batch; ++i) {
        auto g = detail::cmap(out.grad(), m, n, i * m * n);
        auto am = detail::cmap(a.values(), m, k, i * m * k);
        if (transpose_b) {
          auto bm = detail::cmap(b.values(), n, k, i * n * k);
          if (a.requires_grad()) detail::mmap(a.mutable_grad(), m, k, i * m * k).noalias() += g * bm;
          if (b.requires_grad()) detail::mmap(b.mutable_grad(), n, k, i * n * k).noalias() += g.transpose() * am;
        } else {
          auto bm = detail::cmap(b.values(), k, n, i * k * n);
          if (a.requires_grad()) detail::mmap(a.mutable_grad(), m, k, i * m * k).noalias() += g * bm.transpose();
          if (b.requires_grad()) detail::mmap(b.mutable_grad(), k, n, i * k * n).noalias() += am.transpose() * g;
        }
      }
    });
  }
  return out;
}

// x [..., d_in] times weight [d_out, d_in] transposed, plus optional bias [d_out].
template <class T>
Tensor<T> linear(Tape<T>& tp, const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
  if (x.rank() < 1 || weight.rank() != 2 || x.shape().back() != weight.dim(1)) {
    throw ShapeError("linear: input " + to_string(x.shape()) + " incompatible with weight " + to_string(weight.shape()));
  }
  const std::size_t d_in = weight.dim(1), d_out = weight.dim(0), rows = x.numel() / d_in;
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != d_out)) {
    throw ShapeError("linear: bias " + to_string(bias.shape()) + " does not match " + std::to_string(d_out) + " outputs");
  }
  Shape shape = x.shape();
  shape.back() = d_out;
  auto out = detail::make_output(tp, std::move(shape), {&x, &weight, &bias});
  auto o = detail::mmap(out.mutable_values(), rows, d_out);
  o.noalias() = detail::cmap(x.values(), rows, d_in) * detail::cmap(weight.values(), d_out, d_in).transpose();
  if (bias.defined()) o.rowwise() += detail::cmap(bias.values(), 1, d_out).row(0);
  tp.count_matmul(1, rows, d_in, d_out);
  detail::check_finite(out, "linear");
  if (out.requires_grad()) {
    tp.record(out, [x, weight, bias, out, rows, d_in, d_out]() mutable {
      auto g = detail::cmap(out.grad(), rows, d_out);
      if (x.requires_grad()) detail::mmap(x.mutable_grad(), rows, d_in).noalias() += g * detail::cmap(weight.values(), d_out, d_in);
      if (weight.requires_grad()) {
        detail::mmap(weight.mutable_grad(), d_out, d_in).noalias() += g.transpose() * detail::cmap(x.values(), rows, d_in);
      }
      if (bias.defined() && bias.requires_grad()) detail::mmap(bias.mutable_grad(), 1, d_out) += g.colwise().sum();
    });
  }
  return out;
}

// a + b where b's shape equals a's shape or a trailing suffix of it.
template <class T>
Tensor<T> add(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (bs.size() > as.size() || !std::equal(bs.begin(), bs.end(), as.end() - static_cast<std::ptrdiff_t>(bs.size()))) {
    throw ShapeError("add: cannot broadcast " + to_string(bs) + " onto " + to_string(as));
  }
  const std::size_t n = a.numel(), nb = b.numel();
  auto out = detail::make_output(tp, as, {&a, &b});
  auto av = a.values();
  auto bv = b.values();
  auto ov = out.mutable_values();
  for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] + bv[i % nb];
  detail::check_finite(out, "add");
  if (out.requires_grad()) {
    tp.record(out, [a, b, out, n, nb]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t i = 0; i < n; ++i) gb[i % nb] += g[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> mul(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("mul: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  const std::size_t n = a.numel();
  auto out = detail::make_output(tp, a.shape(), {&a, &b});
  auto ov = out.mutable_values();
  for (std::size_t i = 0; i < n; ++i) ov[i] = a[i] * b[i];
  detail::check_finite(out, "mul");
  if (out.requires_grad()) {
    tp.record(out, [a, b, out, n]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * b[i];
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * a[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> scale(Tape<T>& tp, const Tensor<T>& a, T s) {
  const std::size_t n = a.numel();
  auto out = detail::make_output(tp, a.shape(), {&a});
  auto ov = out.mutable_values();
  for (std::size_t i = 0; i < n; ++i) ov[i] = a[i] * s;
  detail::check_finite(out, "scale");
  if (out.requires_grad()) {
    tp.record(out, [a, out, n, s]() mutable {
      auto g = out.grad();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * s;
    });
  }
  return out;
}

// Exact erf form.
template <class T>
Tensor<T> gelu(Tape<T>& tp, const Tensor<T>& x) {
  const std::size_t n = x.numel();
  auto out = detail::make_output(tp, x.shape(), {&x});
  auto ov = out.mutable_values();
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  for (std::size_t i = 0; i < n; ++i) ov[i] = T(0.5) * x[i] * (T(1) + std::erf(x[i] * inv_sqrt2));
  detail::check_finite(out, "gelu");
  if (out.requires_grad()) {
    tp.record(out, [x, out, n, inv_sqrt2]() mutable {
      auto g = out.grad();
      auto gx = x.mutable_grad();
      const T inv_sqrt_2pi = inv_sqrt2 * std::numbers::inv_sqrtpi_v<T>;
      for (std::size_t i = 0; i < n; ++i) {
        const T v = x[i];
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
        gx[i] += g[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

// Normalizes over the last axis; eps sits inside the square root.
template <class T>
Tensor<T> layer_norm(Tape<T>& tp, const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-6)) {
  if (x.rank() < 1) throw ShapeError("layer_norm: scalar input");
  const std::size_t d = x.shape().back();
  if (d == 0 || gain.numel() != d || bias.numel() != d) {
    throw ShapeError("layer_norm: width " + std::to_string(d) + " vs gain " + to_string(gain.shape()) + " bias " + to_string(bias.shape()));
  }
  const std::size_t rows = x.numel() / d;
  auto out = detail::make_output(tp, x.shape(), {&x, &gain, &bias});
  std::vector<T> xhat(x.numel());
  std::vector<T> rstd(rows);
  auto ov = out.mutable_values();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * d;
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += x[base + j];
    mean /= T(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const T c = x[base + j] - mean;
      var += c * c;
    }
    var /= T(d);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[base + j] = (x[base + j] - mean) * rstd[r];
      ov[base + j] = xhat[base + j] * gain[j] + bias[j];
    }
  }
  detail::check_finite(out, "layer_norm");
  if (out.requires_grad()) {
    tp.record(out, [x, gain, bias, out, d, rows, xhat = std::move(xhat), rstd = std::move(rstd)]() mutable {
      auto g = out.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * d;
        if (gain.requires_grad()) {
          auto gg = gain.mutable_grad();
          for (std::size_t j = 0; j < d; ++j) gg[j] += g[base + j] * xhat[base + j];
        }
        if (bias.requires_grad()) {
          auto gb = bias.mutable_grad();
          for (std::size_t j = 0; j < d; ++j) gb[j] += g[base + j];
        }
        if (x.requires_grad()) {
          T mean_g = 0, mean_gx = 0;
          for (std::size_t j = 0; j < d; ++j) {
            const T gh = g[base + j] * gain[j];
            mean_g += gh;
            mean_gx += gh * xhat[base + j];
          }
          mean_g /= T(d);
          mean_gx /= T(d);
          auto gx = x.mutable_grad();
          for (std::size_t j = 0; j < d; ++j) {
            const T gh = g[base + j] * gain[j];
            gx[base + j] += rstd[r] * (gh - mean_g - xhat[base + j] * mean_gx);
          }
        }
      }
    });
  }
  return out;
}

// Max-subtracted softmax along any axis.
template <class T>
Tensor<T> softmax(Tape<T>& tp, const Tensor<T>& x, int axis = -1) {
  const auto ax = detail::resolve_axis(axis, x.rank(), "softmax");
  const auto sp = detail::split_at(x.shape(), ax);
  auto out = detail::make_output(tp, x.shape(), {&x});
  auto ov = out.mutable_values();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.len * sp.inner + in;
      T mx = x[base];
      for (std::size_t j = 1; j < sp.len; ++j) mx = std::max(mx, x[base + j * sp.inner]);
      T sum = 0;
      for (std::size_t j = 0; j < sp.len; ++j) {
        const T e = std::exp(x[base + j * sp.inner] - mx);
        ov[base + j * sp.inner] = e;
        sum += e;
      }
      for (std::size_t j = 0; j < sp.len; ++j) ov[base + j * sp.inner] /= sum;
    }
  }
  detail::check_finite(out, "softmax");
  if (out.requires_grad()) {
    tp.record(out, [x, out, sp]() mutable {
      auto g = out.grad();
      auto y = out.values();
      auto gx = x.mutable_grad();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t in = 0; in < sp.inner; ++in) {
          const std::size_t base = o * sp.len * sp.inner + in;
          T dot = 0;
          for (std::size_t j = 0; j < sp.len; ++j) dot += g[base + j * sp.inner] * y[base + j * sp.inner];
          for (std::size_t j = 0; j < sp.len; ++j) {
            const std::size_t i = base + j * sp.inner;
            gx[i] += y[i] * (g[i] - dot);
          }
        }
      }
    });
  }
  return out;
}

// log-softmax over the last axis.
template <class T>
Tensor<T> log_softmax(Tape<T>& tp, const Tensor<T>& x) {
  if (x.rank() < 1) throw ShapeError("log_softmax: scalar input");
  const std::size_t c = x.shape().back(), rows = x.numel() / c;
  auto out = detail::make_output(tp, x.shape(), {&x});
  auto ov = out.mutable_values();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * c;
    T mx = x[base];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[base + j]);
    T sum = 0;
    for (std::size_t j = 0; j < c; ++j) sum += std::exp(x[base + j] - mx);
    const T lse = mx + std::log(sum);
    for (std::size_t j = 0; j < c; ++j) ov[base + j] = x[base + j] - lse;
  }
  detail::check_finite(out, "log_softmax");
  if (out.requires_grad()) {
    tp.record(out, [x, out, c, rows]() mutable {
      auto g = out.grad();
      auto y = out.values();
      auto gx = x.mutable_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * c;
        T gsum = 0;
        for (std::size_t j = 0; j < c; ++j) gsum += g[base + j];
        for (std::size_t j = 0; j < c; ++j) gx[base + j] += g[base + j] - std::exp(y[base + j]) * gsum;
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> concat(Tape<T>& tp, const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const auto ax = detail::resolve_axis(axis, parts[0].rank(), "concat");
  Shape shape = parts[0].shape();
  shape[ax] = 0;
  bool grad = false;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != shape.size()) throw ShapeError("concat: rank mismatch");
    shape[ax] += s[ax];
    s[ax] = shape[ax];
    if (s != shape) throw ShapeError("concat: incompatible part " + to_string(p.shape()));
    grad = grad || tp.wants_grad({&p});
  }
  Tensor<T> out(shape, grad);
  const auto sp = detail::split_at(shape, ax);
  auto ov = out.mutable_values();
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.dim(ax), chunk = len * sp.inner;
    auto pv = p.values();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * chunk), chunk,
                  ov.begin() + static_cast<std::ptrdiff_t>(o * sp.len * sp.inner + offset * sp.inner));
    }
    offset += len;
  }
  if (out.requires_grad()) {
    tp.record(out, [parts, out, ax, sp]() mutable {
      auto g = out.grad();
      std::size_t offset = 0;
      for (auto& p : parts) {
        const std::size_t len = p.dim(ax), chunk = len * sp.inner;
        if (p.requires_grad()) {
          auto gp = p.mutable_grad();
          for (std::size_t o = 0; o < sp.outer; ++o) {
            const std::size_t src = o * sp.len * sp.inner + offset * sp.inner;
            for (std::size_t i = 0; i < chunk; ++i) gp[o * chunk + i] += g[src + i];
          }
        }
        offset += len;
      }
    });
  }
  return out;
}

// Rows [start, start+len) along axis.
template <class T>
Tensor<T> slice(Tape<T>& tp, const Tensor<T>& x, int axis, std::size_t start, std::size_t len) {
  const auto ax = detail::resolve_axis(axis, x.rank(), "slice");
  if (start + len > x.dim(ax)) {
    throw ShapeError("slice: [" + std::to_string(start) + ", " + std::to_string(start + len) + ") exceeds extent " + std::to_string(x.dim(ax)));
  }
  Shape shape = x.shape();
  shape[ax] = len;
  const auto sp = detail::split_at(x.shape(), ax);
  auto out = detail::make_output(tp, shape, {&x});
  auto ov = out.mutable_values();
  auto xv = x.values();
  const std::size_t chunk = len * sp.inner;
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(o * sp.len * sp.inner + start * sp.inner), chunk,
                ov.begin() + static_cast<std::ptrdiff_t>(o * chunk));
  }
  if (out.requires_grad()) {
    tp.record(out, [x, out, sp, start, chunk]() mutable {
      auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        const std::size_t dst = o * sp.len * sp.inner + start * sp.inner;
        for (std::size_t i = 0; i < chunk; ++i) gx[dst + i] += g[o * chunk + i];
      }
    });
  }
  return out;
}

template <class T>
std::vector<Tensor<T>> split(Tape<T>& tp, const Tensor<T>& x, int axis, const std::vector<std::size_t>& sizes) {
  std::vector<Tensor<T>> parts;
  std::size_t start = 0;
  for (std::size_t s : sizes) {
    parts.push_back(slice(tp, x, axis, start, s));
    start += s;
  }
  if (start != x.dim(detail::resolve_axis(axis, x.rank(), "split"))) throw ShapeError("split: sizes do not cover the axis");
  return parts;
}

template <class T>
Tensor<T> reshape(Tape<T>& tp, const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) throw ShapeError("reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
  auto out = detail::make_output(tp, std::move(shape), {&x});
  std::copy(x.values().begin(), x.values().end(), out.mutable_values().begin());
  if (out.requires_grad()) {
    tp.record(out, [x, out]() mutable {
      auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

// out.shape[i] = x.shape[perm[i]].
template <class T>
Tensor<T> permute(Tape<T>& tp, const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) throw ShapeError("permute: permutation rank mismatch");
  std::vector<bool> seen(r, false);
  Shape shape(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (perm[i] >= r || seen[perm[i]]) throw ContractError("permute: invalid permutation");
    seen[perm[i]] = true;
    shape[i] = x.dim(perm[i]);
  }
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.dim(i);
  // Source offset of each output element.
  std::vector<std::size_t> src(x.numel());
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t o = 0; o < src.size(); ++o) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < r; ++i) off += idx[i] * in_strides[perm[i]];
    src[o] = off;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < shape[i]) break;
      idx[i] = 0;
    }
  }
  auto out = detail::make_output(tp, shape, {&x});
  auto ov = out.mutable_values();
  for (std::size_t o = 0; o < src.size(); ++o) ov[o] = x[src[o]];
  if (out.requires_grad()) {
    tp.record(out, [x, out, src = std::move(src)]() mutable {
      auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t o = 0; o < src.size(); ++o) gx[src[o]] += g[o];
    });
  }
  return out;
}

template <class T>
Tensor<T> transpose(Tape<T>& tp, const Tensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("transpose: expects a matrix");
  return permute(tp, x, {1, 0});
}

// Mean along an axis, which is removed from the shape.
template <class T>
Tensor<T> mean(Tape<T>& tp, const Tensor<T>& x, int axis) {
  const auto ax = detail::resolve_axis(axis, x.rank(), "mean");
  const auto sp = detail::split_at(x.shape(), ax);
  if (sp.len == 0) throw ShapeError("mean: empty axis");
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(ax));
  auto out = detail::make_output(tp, shape, {&x});
  auto ov = out.mutable_values();
  const T inv = T(1) / T(sp.len);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      T s = 0;
      for (std::size_t j = 0; j < sp.len; ++j) s += x[o * sp.len * sp.inner + j * sp.inner + in];
      ov[o * sp.inner + in] = s * inv;
    }
  }
  if (out.requires_grad()) {
    tp.record(out, [x, out, sp, inv]() mutable {
      auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t in = 0; in < sp.inner; ++in) {
          const T gi = g[o * sp.inner + in] * inv;
          for (std::size_t j = 0; j < sp.len; ++j) gx[o * sp.len * sp.inner + j * sp.inner + in] += gi;
        }
      }
    });
  }
  return out;
}

// Sum of all elements as a scalar.
template <class T>
Tensor<T> sum(Tape<T>& tp, const Tensor<T>& x) {
  auto out = detail::make_output(tp, Shape{}, {&x});
  T s = 0;
  for (T v : x.values()) s += v;
  out.mutable_values()[0] = s;
  detail::check_finite(out, "sum");
  if (out.requires_grad()) {
    tp.record(out, [x, out]() mutable {
      const T g = out.grad()[0];
      for (auto& gx : x.mutable_grad()) gx += g;
    });
  }
  return out;
}

// Mean negative log-likelihood of integer targets under softmax(logits [B, C]).
template <class T>
Tensor<T> cross_entropy(Tape<T>& tp, const Tensor<T>& logits, std::span<const int> targets) {
  if (logits.rank() != 2 || targets.size() != logits.dim(0)) {
    throw ShapeError("cross_entropy: logits " + to_string(logits.shape()) + " vs " + std::to_string(targets.size()) + " targets");
  }
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  std::vector<T> probs(b * c);
  T loss = 0;
  for (std::size_t r = 0; r < b; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= c) {
      throw ContractError("cross_entropy: target " + std::to_string(targets[r]) + " outside [0, " + std::to_string(c) + ")");
    }
    const std::size_t base = r * c;
    T mx = logits[base];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits[base + j]);
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) s += (probs[base + j] = std::exp(logits[base + j] - mx));
    for (std::size_t j = 0; j < c; ++j) probs[base + j] /= s;
    loss += (mx + std::log(s)) - logits[base + static_cast<std::size_t>(targets[r])];
  }
  auto out = detail::make_output(tp, Shape{}, {&logits});
  out.mutable_values()[0] = loss / T(b);
  detail::check_finite(out, "cross_entropy");
  if (out.requires_grad()) {
    std::vector<int> tgt(targets.begin(), targets.end());
    tp.record(out, [logits, out, b, c, probs = std::move(probs), tgt = std::move(tgt)]() mutable {
      const T g = out.grad()[0] / T(b);
      auto gl = logits.mutable_grad();
      for (std::size_t r = 0; r < b; ++r) {
        for (std::size_t j = 0; j < c; ++j) {
          gl[r * c + j] += g * (probs[r * c + j] - (static_cast<int>(j) == tgt[r] ? T(1) : T(0)));
        }
      }
    });
  }
  return out;
}

// KL(p || q) averaged over rows, with p and q given as log-probabilities
// [B, C]. Both sides are differentiable.
template <class T>
Tensor<T> kl_div(Tape<T>& tp, const Tensor<T>& target_logp, const Tensor<T>& input_logp) {
  if (target_logp.shape() != input_logp.shape() || target_logp.rank() != 2) {
    throw ShapeError("kl_div: shapes " + to_string(target_logp.shape()) + " vs " + to_string(input_logp.shape()));
  }
  const std::size_t b = target_logp.dim(0), n = target_logp.numel();
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(target_logp[i]) * (target_logp[i] - input_logp[i]);
  auto out = detail::make_output(tp, Shape{}, {&target_logp, &input_logp});
  out.mutable_values()[0] = s / T(b);
  detail::check_finite(out, "kl_div");
  if (out.requires_grad()) {
    tp.record(out, [target_logp, input_logp, out, b, n]() mutable {
      const T g = out.grad()[0] / T(b);
      if (input_logp.requires_grad()) {
        auto gi = input_logp.mutable_grad();
        for (std::size_t i = 0; i < n; ++i) gi[i] -= g * std::exp(target_logp[i]);
      }
      if (target_logp.requires_grad()) {
        auto gt = target_logp.mutable_grad();
        for (std::size_t i = 0; i < n; ++i) {
          gt[i] += g * std::exp(target_logp[i]) * (target_logp[i] - input_logp[i] + T(1));
        }
      }
    });
  }
  return out;
}

// Inverted dropout; identity when rate is zero.
template <class T>
Tensor<T> dropout(Tape<T>& tp, const Tensor<T>& x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ContractError("dropout: rate must be < 1");
  const std::size_t n = x.numel();
  std::vector<T> mask(n);
  const T keep_scale = T(1.0 / (1.0 - rate));
  for (auto& m : mask) m = rng.uniform() < rate ? T(0) : keep_scale;
  auto out = detail::make_output(tp, x.shape(), {&x});
  auto ov = out.mutable_values();
  for (std::size_t i = 0; i < n; ++i) ov[i] = x[i] * mask[i];
  if (out.requires_grad()) {
    tp.record(out, [x, out, mask = std::move(mask)]() mutable {
      auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
    });
  }
  return out;
}

// Selects rows along axis 0 (repeats allowed).
template <class T>
Tensor<T> index_select(Tape<T>& tp, const Tensor<T>& x, std::span<const std::size_t> indices) {
  if (x.rank() < 1) throw ShapeError("index_select: scalar input");
  const std::size_t rows = x.dim(0), width = rows ? x.numel() / rows : 0;
  Shape shape = x.shape();
  shape[0] = indices.size();
  auto out = detail::make_output(tp, shape, {&x});
  auto ov = out.mutable_values();
  auto xv = x.values();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows) throw ContractError("index_select: index " + std::to_string(indices[i]) + " out of range " + std::to_string(rows));
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(indices[i] * width), width, ov.begin() + static_cast<std::ptrdiff_t>(i * width));
  }
  if (out.requires_grad()) {
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    tp.record(out, [x, out, width, idx = std::move(idx)]() mutable {
      auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        for (std::size_t j = 0; j < width; ++j) gx[idx[i] * width + j] += g[i * width + j];
      }
    });
  }
  return out;
}

// Stacks `count` copies of x along a new leading axis.
template <class T>
Tensor<T> broadcast_leading(Tape<T>& tp, const Tensor<T>& x, std::size_t count) {
  Shape shape = x.shape();
  shape.insert(shape.begin(), count);
  auto out = detail::make_output(tp, shape, {&x});
  auto ov = out.mutable_values();
  const std::size_t n = x.numel();
  for (std::size_t c = 0; c < count; ++c) std::copy(x.values().begin(), x.values().end(), ov.begin() + static_cast<std::ptrdiff_t>(c * n));
  if (out.requires_grad()) {
    tp.record(out, [x, out, count, n]() mutable {
      auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t c = 0; c < count; ++c) {
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[c * n + i];
      }
    });
  }
  return out;
}

}  // namespace jumbo::ops
