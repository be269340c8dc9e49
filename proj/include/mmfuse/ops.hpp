#pragma once

#include <array>
#include <cmath>
#include <limits>

#include "mmfuse/tensor.hpp"

namespace mmfuse {

namespace detail {

// Right-aligned broadcast of two shapes: extents must match or be 1.
inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    std::size_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    std::size_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                       " are not broadcastable");
    }
    out[i] = std::max(ea, eb);
  }
  return out;
}

// Strides of `shape` viewed inside `out` (right-aligned); broadcast axes get 0.
inline std::vector<std::size_t> broadcast_strides(const Shape& shape, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t offset = out.size() - shape.size();
  std::size_t acc = 1;
  for (std::size_t i = shape.size(); i-- > 0;) {
    strides[offset + i] = (shape[i] == 1) ? 0 : acc;
    acc *= shape[i];
  }
  return strides;
}

// Odometer walk over `out`, yielding mapped flat offsets into two operands.
template <typename Fn>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, Fn&& fn) {
  std::size_t total = numel(out);
  std::size_t rank = out.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t offa = 0, offb = 0;
  for (std::size_t flat = 0; flat < total; ++flat) {
    fn(flat, offa, offb);
    for (std::size_t ax = rank; ax-- > 0;) {
      ++idx[ax];
      offa += sa[ax];
      offb += sb[ax];
      if (idx[ax] < out[ax]) break;
      offa -= sa[ax] * out[ax];
      offb -= sb[ax] * out[ax];
      idx[ax] = 0;
    }
  }
}

inline void axis_split(const Shape& shape, std::size_t axis, std::size_t& outer, std::size_t& n,
                       std::size_t& inner, const char* op) {
  if (axis >= shape.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                     shape_str(shape));
  }
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
}

}  // namespace detail

// ----------------------------------------------------------------------------
// Elementwise binary ops (right-aligned broadcasting with 1-extents)
// ----------------------------------------------------------------------------

namespace detail {

template <typename FwdFn, typename BwdFn>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, FwdFn fwd, BwdFn bwd) {
  Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
  auto sa = broadcast_strides(a.shape(), out_shape);
  auto sb = broadcast_strides(b.shape(), out_shape);
  std::vector<double> out(numel(out_shape));
  const auto& da = a.data();
  const auto& db = b.data();
  for_each_broadcast(out_shape, sa, sb,
                     [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = fwd(da[ia], db[ib]); });

  auto an = a.node();
  auto bn = b.node();
  return make_op(name, std::move(out_shape), std::move(out), {a, b},
                 [an, bn, sa, sb, bwd](Tensor::Node& o) {
                   bool ga = an->requires_grad, gb = bn->requires_grad;
                   if (ga) an->ensure_grad();
                   if (gb) bn->ensure_grad();
                   for_each_broadcast(o.shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
                     double go = o.grad[i];
                     double da_, db_;
                     bwd(an->data[ia], bn->data[ib], go, da_, db_);
                     if (ga) an->grad[ia] += da_;
                     if (gb) bn->grad[ib] += db_;
                   });
                 });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double go, double& da, double& db) {
        da = go;
        db = go;
      });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double go, double& da, double& db) {
        da = go;
        db = -go;
      });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double go, double& da, double& db) {
        da = go * y;
        db = go * x;
      });
}

// ----------------------------------------------------------------------------
// Elementwise unary ops
// ----------------------------------------------------------------------------

namespace detail {

template <typename FwdFn, typename BwdFn>
Tensor unary_op(const char* name, const Tensor& x, FwdFn fwd, BwdFn bwd) {
  std::vector<double> out(x.size());
  const auto& dx = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(dx[i]);

  auto xn = x.node();
  return make_op(name, x.shape(), std::move(out), {x}, [xn, bwd](Tensor::Node& o) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < o.data.size(); ++i) {
      xn->grad[i] += o.grad[i] * bwd(xn->data[i], o.data[i]);
    }
  });
}

}  // namespace detail

inline Tensor neg(const Tensor& x) {
  return detail::unary_op(
      "neg", x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

inline Tensor add_scalar(const Tensor& x, double c) {
  return detail::unary_op(
      "add_scalar", x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Tensor mul_scalar(const Tensor& x, double c) {
  return detail::unary_op(
      "mul_scalar", x, [c](double v) { return v * c; }, [c](double, double) { return c; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary_op(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline double sigmoid_scalar(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  double e = std::exp(v);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary_op(
      "sigmoid", x, [](double v) { return sigmoid_scalar(v); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor log_op(const Tensor& x) {
  return detail::unary_op(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Tensor clamp(const Tensor& x, double lo, double hi) {
  if (!(lo < hi)) throw ContractError("clamp: lo must be < hi");
  return detail::unary_op(
      "clamp", x, [lo, hi](double v) { return v < lo ? lo : (v > hi ? hi : v); },
      [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

// ----------------------------------------------------------------------------
// Reductions
// ----------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  auto xn = x.node();
  return make_op("sum_all", Shape{}, {s}, {x}, [xn](Tensor::Node& o) {
    xn->ensure_grad();
    double go = o.grad[0];
    for (double& g : xn->grad) g += go;
  });
}

inline Tensor mean_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  double inv = 1.0 / static_cast<double>(x.size());
  auto xn = x.node();
  return make_op("mean_all", Shape{}, {s * inv}, {x}, [xn, inv](Tensor::Node& o) {
    xn->ensure_grad();
    double go = o.grad[0] * inv;
    for (double& g : xn->grad) g += go;
  });
}

inline Tensor mean_axis(const Tensor& x, std::size_t axis) {
  std::size_t outer, n, inner;
  detail::axis_split(x.shape(), axis, outer, n, inner, "mean_axis");
  Shape out_shape = x.shape();
  out_shape[axis] = 1;
  std::vector<double> out(outer * inner, 0.0);
  const auto& dx = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t k = 0; k < n; ++k) {
      std::size_t base = (o * n + k) * inner;
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += dx[base + i];
    }
  }
  double inv = 1.0 / static_cast<double>(n);
  for (double& v : out) v *= inv;

  auto xn = x.node();
  return make_op("mean_axis", std::move(out_shape), std::move(out), {x},
                 [xn, outer, n, inner, inv](Tensor::Node& o) {
                   xn->ensure_grad();
                   for (std::size_t ou = 0; ou < outer; ++ou) {
                     for (std::size_t k = 0; k < n; ++k) {
                       std::size_t base = (ou * n + k) * inner;
                       for (std::size_t i = 0; i < inner; ++i) {
                         xn->grad[base + i] += o.grad[ou * inner + i] * inv;
                       }
                     }
                   }
                 });
}

// Max over one axis, keepdim; ties route the gradient to the first (row-major)
// maximal element.
inline Tensor max_axis(const Tensor& x, std::size_t axis) {
  std::size_t outer, n, inner;
  detail::axis_split(x.shape(), axis, outer, n, inner, "max_axis");
  Shape out_shape = x.shape();
  out_shape[axis] = 1;
  std::vector<double> out(outer * inner);
  std::vector<std::size_t> argmax(outer * inner);
  const auto& dx = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      double best = -std::numeric_limits<double>::infinity();
      std::size_t best_k = 0;
      for (std::size_t k = 0; k < n; ++k) {
        double v = dx[(o * n + k) * inner + i];
        if (v > best) {
          best = v;
          best_k = k;
        }
      }
      out[o * inner + i] = best;
      argmax[o * inner + i] = best_k;
    }
  }

  auto xn = x.node();
  return make_op("max_axis", std::move(out_shape), std::move(out), {x},
                 [xn, argmax = std::move(argmax), n, inner](Tensor::Node& o) {
                   xn->ensure_grad();
                   for (std::size_t f = 0; f < o.data.size(); ++f) {
                     std::size_t ou = f / inner, i = f % inner;
                     xn->grad[(ou * n + argmax[f]) * inner + i] += o.grad[f];
                   }
                 });
}

// ----------------------------------------------------------------------------
// Softmax (numerically stable, along one axis)
// ----------------------------------------------------------------------------

inline Tensor softmax(const Tensor& x, std::size_t axis) {
  std::size_t outer, n, inner;
  detail::axis_split(x.shape(), axis, outer, n, inner, "softmax");
  std::vector<double> out(x.size());
  const auto& dx = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < n; ++k) mx = std::max(mx, dx[(o * n + k) * inner + i]);
      double denom = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        double e = std::exp(dx[(o * n + k) * inner + i] - mx);
        out[(o * n + k) * inner + i] = e;
        denom += e;
      }
      double inv = 1.0 / denom;
      for (std::size_t k = 0; k < n; ++k) out[(o * n + k) * inner + i] *= inv;
    }
  }

  auto xn = x.node();
  return make_op("softmax", x.shape(), std::move(out), {x},
                 [xn, outer, n, inner](Tensor::Node& o) {
                   xn->ensure_grad();
                   for (std::size_t ou = 0; ou < outer; ++ou) {
                     for (std::size_t i = 0; i < inner; ++i) {
                       double dot = 0.0;
                       for (std::size_t k = 0; k < n; ++k) {
                         std::size_t f = (ou * n + k) * inner + i;
                         dot += o.grad[f] * o.data[f];
                       }
                       for (std::size_t k = 0; k < n; ++k) {
                         std::size_t f = (ou * n + k) * inner + i;
                         xn->grad[f] += o.data[f] * (o.grad[f] - dot);
                       }
                     }
                   }
                 });
}

// ----------------------------------------------------------------------------
// Shape ops
// ----------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  auto xn = x.node();
  return make_op("reshape", std::move(shape), x.data(), {x}, [xn](Tensor::Node& o) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < o.data.size(); ++i) xn->grad[i] += o.grad[i];
  });
}

inline Tensor swap_axes(const Tensor& x, std::size_t ax0, std::size_t ax1) {
  const Shape& s = x.shape();
  if (ax0 >= s.size() || ax1 >= s.size()) {
    throw ShapeError("swap_axes: axis out of range for " + shape_str(s));
  }
  Shape out_shape = s;
  std::swap(out_shape[ax0], out_shape[ax1]);

  // Forward gather: out[flat] = x[map[flat]].
  std::size_t rank = s.size();
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * s[i + 1];
  std::vector<std::size_t> perm_strides(rank);
  for (std::size_t i = 0; i < rank; ++i) perm_strides[i] = in_strides[i];
  std::swap(perm_strides[ax0], perm_strides[ax1]);

  std::size_t total = x.size();
  std::vector<double> out(total);
  std::vector<std::size_t> idx(rank, 0);
  const auto& dx = x.data();
  std::size_t src = 0;
  std::vector<std::size_t> map(total);
  for (std::size_t flat = 0; flat < total; ++flat) {
    out[flat] = dx[src];
    map[flat] = src;
    for (std::size_t ax = rank; ax-- > 0;) {
      ++idx[ax];
      src += perm_strides[ax];
      if (idx[ax] < out_shape[ax]) break;
      src -= perm_strides[ax] * out_shape[ax];
      idx[ax] = 0;
    }
  }

  auto xn = x.node();
  return make_op("swap_axes", std::move(out_shape), std::move(out), {x},
                 [xn, map = std::move(map)](Tensor::Node& o) {
                   xn->ensure_grad();
                   for (std::size_t i = 0; i < o.data.size(); ++i) xn->grad[map[i]] += o.grad[i];
                 });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis out of range for " + shape_str(s0));
  Shape out_shape = s0;
  std::size_t total_axis = 0;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != s0[i]) {
        throw ShapeError("concat: shapes " + shape_str(s0) + " and " + shape_str(s) +
                         " differ off the concat axis");
      }
    }
    total_axis += s[axis];
  }
  out_shape[axis] = total_axis;

  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];

  std::vector<double> out(numel(out_shape));
  std::size_t offset = 0;
  std::vector<std::size_t> offsets(parts.size());
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    offsets[pi] = offset;
    std::size_t pn = parts[pi].extent(axis);
    const auto& pd = parts[pi].data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy(pd.begin() + o * pn * inner, pd.begin() + (o + 1) * pn * inner,
                out.begin() + (o * total_axis + offset) * inner);
    }
    offset += pn;
  }

  std::vector<std::shared_ptr<Tensor::Node>> nodes;
  std::vector<std::size_t> widths;
  for (const Tensor& p : parts) {
    nodes.push_back(p.node());
    widths.push_back(p.extent(axis));
  }
  return make_op("concat", std::move(out_shape), std::move(out), parts,
                 [nodes, widths, offsets, outer, inner, total_axis](Tensor::Node& o) {
                   for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
                     if (!nodes[pi]->requires_grad) continue;
                     nodes[pi]->ensure_grad();
                     std::size_t pn = widths[pi];
                     for (std::size_t ou = 0; ou < outer; ++ou) {
                       for (std::size_t k = 0; k < pn * inner; ++k) {
                         nodes[pi]->grad[ou * pn * inner + k] +=
                             o.grad[(ou * total_axis + offsets[pi]) * inner + k];
                       }
                     }
                   }
                 });
}

// ----------------------------------------------------------------------------
// Batched matrix product: A [.., N, K] x B [.., K, M] -> [.., N, M]
// Leading batch extents broadcast (right-aligned, 1-extents expand).
// ----------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) {
    throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(sa) + " and " +
                     shape_str(sb));
  }
  std::size_t N = sa[sa.size() - 2], K = sa[sa.size() - 1];
  std::size_t Kb = sb[sb.size() - 2], M = sb[sb.size() - 1];
  if (K != Kb) {
    throw ShapeError("matmul: inner extents disagree, " + shape_str(sa) + " vs " + shape_str(sb));
  }
  Shape batch_a(sa.begin(), sa.end() - 2);
  Shape batch_b(sb.begin(), sb.end() - 2);
  Shape batch = detail::broadcast_shape(batch_a, batch_b, "matmul");
  auto stride_a = detail::broadcast_strides(batch_a, batch);
  auto stride_b = detail::broadcast_strides(batch_b, batch);

  Shape out_shape = batch;
  out_shape.push_back(N);
  out_shape.push_back(M);
  std::size_t batches = numel(batch);
  std::vector<double> out(batches * N * M, 0.0);

  // Per-batch flat offsets into a and b.
  std::vector<std::size_t> offs_a(batches), offs_b(batches);
  {
    std::size_t bi = 0;
    detail::for_each_broadcast(batch, stride_a, stride_b,
                               [&](std::size_t, std::size_t ia, std::size_t ib) {
                                 offs_a[bi] = ia;
                                 offs_b[bi] = ib;
                                 ++bi;
                               });
  }

  const double* pa = a.data().data();
  const double* pb = b.data().data();
  std::size_t grain = std::max<std::size_t>(1, 200000 / std::max<std::size_t>(1, N * K * M));
  parallel_for(batches, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t bi = lo; bi < hi; ++bi) {
      const double* A = pa + offs_a[bi] * N * K;
      const double* B = pb + offs_b[bi] * K * M;
      double* C = out.data() + bi * N * M;
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t k = 0; k < K; ++k) {
          double av = A[n * K + k];
          const double* Brow = B + k * M;
          double* Crow = C + n * M;
          for (std::size_t m = 0; m < M; ++m) Crow[m] += av * Brow[m];
        }
      }
    }
  }, grain);

  auto an = a.node();
  auto bn = b.node();
  return make_op("matmul", std::move(out_shape), std::move(out), {a, b},
                 [an, bn, offs_a, offs_b, N, K, M](Tensor::Node& o) {
                   bool ga = an->requires_grad, gb = bn->requires_grad;
                   if (ga) an->ensure_grad();
                   if (gb) bn->ensure_grad();
                   std::size_t batches = offs_a.size();
                   for (std::size_t bi = 0; bi < batches; ++bi) {
                     const double* A = an->data.data() + offs_a[bi] * N * K;
                     const double* B = bn->data.data() + offs_b[bi] * K * M;
                     const double* GO = o.grad.data() + bi * N * M;
                     if (ga) {
                       double* dA = an->grad.data() + offs_a[bi] * N * K;
                       for (std::size_t n = 0; n < N; ++n) {
                         for (std::size_t m = 0; m < M; ++m) {
                           double g = GO[n * M + m];
                           const double* Brow = B + m;
                           for (std::size_t k = 0; k < K; ++k) dA[n * K + k] += g * Brow[k * M];
                         }
                       }
                     }
                     if (gb) {
                       double* dB = bn->grad.data() + offs_b[bi] * K * M;
                       for (std::size_t n = 0; n < N; ++n) {
                         for (std::size_t k = 0; k < K; ++k) {
                           double av = A[n * K + k];
                           const double* Grow = GO + n * M;
                           double* dBrow = dB + k * M;
                           for (std::size_t m = 0; m < M; ++m) dBrow[m] += av * Grow[m];
                         }
                       }
                     }
                   }
                 });
}

// x [.., N] @ w [N, M] + bias [M]
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = Tensor()) {
  Tensor y = matmul(x, w);
  if (bias.defined()) y = add(y, bias);
  return y;
}

// ----------------------------------------------------------------------------
// 3D convolution (direct cross-correlation with zero padding and groups)
// ----------------------------------------------------------------------------

struct Conv3dSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::array<std::size_t, 3> kernel{1, 1, 1};
  std::array<std::size_t, 3> stride{1, 1, 1};
  std::array<std::size_t, 3> padding{0, 0, 0};
  std::size_t groups = 1;

  bool depthwise() const {
    return groups == in_channels && groups == out_channels && groups > 0;
  }

  void validate() const {
    if (in_channels == 0 || out_channels == 0 || groups == 0) {
      throw ConfigError("conv3d: channel and group counts must be positive");
    }
    if (in_channels % groups != 0 || out_channels % groups != 0) {
      throw ShapeError("conv3d: groups " + std::to_string(groups) + " do not divide channels " +
                       std::to_string(in_channels) + "->" + std::to_string(out_channels));
    }
    for (int i = 0; i < 3; ++i) {
      if (kernel[i] == 0 || stride[i] == 0) throw ConfigError("conv3d: kernel/stride must be positive");
    }
  }

  // floor((extent + 2p - k) / s) + 1, or throws when < 1
  std::array<std::size_t, 3> out_extents(std::size_t d, std::size_t h, std::size_t w) const {
    std::array<std::size_t, 3> in{d, h, w};
    std::array<std::size_t, 3> out{};
    for (int i = 0; i < 3; ++i) {
      std::size_t padded = in[i] + 2 * padding[i];
      if (padded < kernel[i]) {
        throw ConfigError("conv3d: output extent < 1 on axis " + std::to_string(i) + " (input " +
                          std::to_string(in[i]) + ", kernel " + std::to_string(kernel[i]) +
                          ", padding " + std::to_string(padding[i]) + ")");
      }
      out[i] = (padded - kernel[i]) / stride[i] + 1;
    }
    return out;
  }
};

inline Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias,
                     const Conv3dSpec& spec) {
  spec.validate();
  const Shape& si = input.shape();
  if (si.size() != 5) throw ShapeError("conv3d: input must be [B,C,D,H,W], got " + shape_str(si));
  std::size_t B = si[0], Cin = si[1], D = si[2], H = si[3], W = si[4];
  if (Cin != spec.in_channels) {
    throw ShapeError("conv3d: input has " + std::to_string(Cin) + " channels, spec expects " +
                     std::to_string(spec.in_channels));
  }
  std::size_t Cout = spec.out_channels;
  std::size_t icpg = Cin / spec.groups;
  std::size_t ocpg = Cout / spec.groups;
  Shape expected_w{Cout, icpg, spec.kernel[0], spec.kernel[1], spec.kernel[2]};
  if (weight.shape() != expected_w) {
    throw ShapeError("conv3d: weight shape " + shape_str(weight.shape()) + " does not match " +
                     shape_str(expected_w));
  }
  if (bias.defined() && bias.shape() != Shape{Cout}) {
    throw ShapeError("conv3d: bias shape " + shape_str(bias.shape()) + " does not match [" +
                     std::to_string(Cout) + "]");
  }
  auto [Do, Ho, Wo] = spec.out_extents(D, H, W);

  std::size_t kd = spec.kernel[0], kh = spec.kernel[1], kw = spec.kernel[2];
  std::size_t sd = spec.stride[0], sh = spec.stride[1], sw = spec.stride[2];
  long pd = static_cast<long>(spec.padding[0]);
  long ph = static_cast<long>(spec.padding[1]);
  long pw = static_cast<long>(spec.padding[2]);

  std::vector<double> out(B * Cout * Do * Ho * Wo);
  const double* in = input.data().data();
  const double* wv = weight.data().data();
  const double* bv = bias.defined() ? bias.data().data() : nullptr;

  std::size_t slab_cost = Do * Ho * Wo * icpg * kd * kh * kw;
  std::size_t fwd_grain = std::max<std::size_t>(1, 200000 / std::max<std::size_t>(1, slab_cost));
  parallel_for(B * Cout, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t slab = lo; slab < hi; ++slab) {
      std::size_t b = slab / Cout, oc = slab % Cout;
      std::size_t g = oc / ocpg;
      double* op = out.data() + slab * Do * Ho * Wo;
      for (std::size_t od = 0; od < Do; ++od) {
        for (std::size_t oh = 0; oh < Ho; ++oh) {
          for (std::size_t ow = 0; ow < Wo; ++ow) {
            double acc = bv ? bv[oc] : 0.0;
            for (std::size_t ic = 0; ic < icpg; ++ic) {
              const double* ip = in + ((b * Cin + g * icpg + ic) * D) * H * W;
              const double* wp = wv + ((oc * icpg + ic) * kd) * kh * kw;
              for (std::size_t z = 0; z < kd; ++z) {
                long id = static_cast<long>(od * sd + z) - pd;
                if (id < 0 || id >= static_cast<long>(D)) continue;
                for (std::size_t y = 0; y < kh; ++y) {
                  long ih = static_cast<long>(oh * sh + y) - ph;
                  if (ih < 0 || ih >= static_cast<long>(H)) continue;
                  for (std::size_t xk = 0; xk < kw; ++xk) {
                    long iw = static_cast<long>(ow * sw + xk) - pw;
                    if (iw < 0 || iw >= static_cast<long>(W)) continue;
                    acc += ip[(static_cast<std::size_t>(id) * H + static_cast<std::size_t>(ih)) * W +
                              static_cast<std::size_t>(iw)] *
                           wp[(z * kh + y) * kw + xk];
                  }
                }
              }
            }
            op[(od * Ho + oh) * Wo + ow] = acc;
          }
        }
      }
    }
  }, fwd_grain);

  auto in_node = input.node();
  auto w_node = weight.node();
  auto b_node = bias.defined() ? bias.node() : nullptr;
  std::vector<Tensor> parents{input, weight};
  if (bias.defined()) parents.push_back(bias);

  Shape out_shape{B, Cout, Do, Ho, Wo};
  return make_op(
      "conv3d", std::move(out_shape), std::move(out), std::move(parents),
      [in_node, w_node, b_node, spec, B, Cin, Cout, D, H, W, Do, Ho, Wo, icpg,
       ocpg](Tensor::Node& o) {
        std::size_t kd = spec.kernel[0], kh = spec.kernel[1], kw = spec.kernel[2];
        std::size_t sd = spec.stride[0], sh = spec.stride[1], sw = spec.stride[2];
        long pd = static_cast<long>(spec.padding[0]);
        long ph = static_cast<long>(spec.padding[1]);
        long pw = static_cast<long>(spec.padding[2]);
        const double* go = o.grad.data();

        if (in_node->requires_grad) {
          in_node->ensure_grad();
          const double* wv = w_node->data.data();
          double* din = in_node->grad.data();
          parallel_for(B, [&](std::size_t lo, std::size_t hi) {
            for (std::size_t b = lo; b < hi; ++b) {
              for (std::size_t oc = 0; oc < Cout; ++oc) {
                std::size_t g = oc / ocpg;
                const double* gop = go + (b * Cout + oc) * Do * Ho * Wo;
                for (std::size_t od = 0; od < Do; ++od) {
                  for (std::size_t oh = 0; oh < Ho; ++oh) {
                    for (std::size_t ow = 0; ow < Wo; ++ow) {
                      double g0 = gop[(od * Ho + oh) * Wo + ow];
                      if (g0 == 0.0) continue;
                      for (std::size_t ic = 0; ic < icpg; ++ic) {
                        double* dip = din + ((b * Cin + g * icpg + ic) * D) * H * W;
                        const double* wp = wv + ((oc * icpg + ic) * kd) * kh * kw;
                        for (std::size_t z = 0; z < kd; ++z) {
                          long id = static_cast<long>(od * sd + z) - pd;
                          if (id < 0 || id >= static_cast<long>(D)) continue;
                          for (std::size_t y = 0; y < kh; ++y) {
                            long ih = static_cast<long>(oh * sh + y) - ph;
                            if (ih < 0 || ih >= static_cast<long>(H)) continue;
                            for (std::size_t xk = 0; xk < kw; ++xk) {
                              long iw = static_cast<long>(ow * sw + xk) - pw;
                              if (iw < 0 || iw >= static_cast<long>(W)) continue;
                              dip[(static_cast<std::size_t>(id) * H + static_cast<std::size_t>(ih)) * W +
                                  static_cast<std::size_t>(iw)] += g0 * wp[(z * kh + y) * kw + xk];
                            }
                          }
                        }
                      }
                    }
                  }
                }
              }
            }
          }, 1);
        }

        if (w_node->requires_grad) {
          w_node->ensure_grad();
          const double* in = in_node->data.data();
          double* dw = w_node->grad.data();
          parallel_for(Cout, [&](std::size_t lo, std::size_t hi) {
            for (std::size_t oc = lo; oc < hi; ++oc) {
              std::size_t g = oc / ocpg;
              for (std::size_t b = 0; b < B; ++b) {
                const double* gop = go + (b * Cout + oc) * Do * Ho * Wo;
                for (std::size_t od = 0; od < Do; ++od) {
                  for (std::size_t oh = 0; oh < Ho; ++oh) {
                    for (std::size_t ow = 0; ow < Wo; ++ow) {
                      double g0 = gop[(od * Ho + oh) * Wo + ow];
                      if (g0 == 0.0) continue;
                      for (std::size_t ic = 0; ic < icpg; ++ic) {
                        const double* ip = in + ((b * Cin + g * icpg + ic) * D) * H * W;
                        double* dwp = dw + ((oc * icpg + ic) * kd) * kh * kw;
                        for (std::size_t z = 0; z < kd; ++z) {
                          long id = static_cast<long>(od * sd + z) - pd;
                          if (id < 0 || id >= static_cast<long>(D)) continue;
                          for (std::size_t y = 0; y < kh; ++y) {
                            long ih = static_cast<long>(oh * sh + y) - ph;
                            if (ih < 0 || ih >= static_cast<long>(H)) continue;
                            for (std::size_t xk = 0; xk < kw; ++xk) {
                              long iw = static_cast<long>(ow * sw + xk) - pw;
                              if (iw < 0 || iw >= static_cast<long>(W)) continue;
                              dwp[(z * kh + y) * kw + xk] +=
                                  g0 * ip[(static_cast<std::size_t>(id) * H +
                                           static_cast<std::size_t>(ih)) *
                                              W +
                                          static_cast<std::size_t>(iw)];
                            }
                          }
                        }
                      }
                    }
                  }
                }
              }
            }
          }, 1);
        }

        if (b_node && b_node->requires_grad) {
          b_node->ensure_grad();
          for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t oc = 0; oc < Cout; ++oc) {
              const double* gop = go + (b * Cout + oc) * Do * Ho * Wo;
              double s = 0.0;
              for (std::size_t i = 0; i < Do * Ho * Wo; ++i) s += gop[i];
              b_node->grad[oc] += s;
            }
          }
        }
      });
}

// ----------------------------------------------------------------------------
// Global 3D pooling: [B,C,D,H,W] -> [B,C,1,1,1]
// ----------------------------------------------------------------------------

enum class PoolMode { avg, max };

inline Tensor global_pool3d(const Tensor& x, PoolMode mode) {
  const Shape& s = x.shape();
  if (s.size() != 5) throw ShapeError("global_pool3d: input must be [B,C,D,H,W], got " + shape_str(s));
  std::size_t B = s[0], C = s[1], S = s[2] * s[3] * s[4];
  std::vector<double> out(B * C);
  std::vector<std::size_t> argmax;
  const auto& dx = x.data();
  if (mode == PoolMode::avg) {
    double inv = 1.0 / static_cast<double>(S);
    for (std::size_t bc = 0; bc < B * C; ++bc) {
      double acc = 0.0;
      for (std::size_t i = 0; i < S; ++i) acc += dx[bc * S + i];
      out[bc] = acc * inv;
    }
  } else {
    argmax.resize(B * C);
    for (std::size_t bc = 0; bc < B * C; ++bc) {
      double best = -std::numeric_limits<double>::infinity();
      std::size_t bi = 0;
      for (std::size_t i = 0; i < S; ++i) {
        if (dx[bc * S + i] > best) {
          best = dx[bc * S + i];
          bi = i;
        }
      }
      out[bc] = best;
      argmax[bc] = bi;
    }
  }

  auto xn = x.node();
  return make_op("global_pool3d", Shape{B, C, 1, 1, 1}, std::move(out), {x},
                 [xn, mode, S, argmax = std::move(argmax)](Tensor::Node& o) {
                   xn->ensure_grad();
                   if (mode == PoolMode::avg) {
                     double inv = 1.0 / static_cast<double>(S);
                     for (std::size_t bc = 0; bc < o.data.size(); ++bc) {
                       double g = o.grad[bc] * inv;
                       for (std::size_t i = 0; i < S; ++i) xn->grad[bc * S + i] += g;
                     }
                   } else {
                     for (std::size_t bc = 0; bc < o.data.size(); ++bc) {
                       xn->grad[bc * S + argmax[bc]] += o.grad[bc];
                     }
                   }
                 });
}

// ----------------------------------------------------------------------------
// Nearest-neighbor resize of the spatial grid: [B,C,D,H,W] -> [B,C,D2,H2,W2]
// ----------------------------------------------------------------------------

inline Tensor resize_nearest3d(const Tensor& x, std::size_t d2, std::size_t h2, std::size_t w2) {
  const Shape& s = x.shape();
  if (s.size() != 5) throw ShapeError("resize_nearest3d: input must be [B,C,D,H,W]");
  if (d2 == 0 || h2 == 0 || w2 == 0) throw ConfigError("resize_nearest3d: target extents must be positive");
  std::size_t B = s[0], C = s[1], D = s[2], H = s[3], W = s[4];

  std::vector<std::size_t> md(d2), mh(h2), mw(w2);
  for (std::size_t i = 0; i < d2; ++i) md[i] = i * D / d2;
  for (std::size_t i = 0; i < h2; ++i) mh[i] = i * H / h2;
  for (std::size_t i = 0; i < w2; ++i) mw[i] = i * W / w2;

  std::vector<double> out(B * C * d2 * h2 * w2);
  const auto& dx = x.data();
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const double* ip = dx.data() + bc * D * H * W;
    double* op = out.data() + bc * d2 * h2 * w2;
    for (std::size_t z = 0; z < d2; ++z) {
      for (std::size_t y = 0; y < h2; ++y) {
        for (std::size_t xk = 0; xk < w2; ++xk) {
          op[(z * h2 + y) * w2 + xk] = ip[(md[z] * H + mh[y]) * W + mw[xk]];
        }
      }
    }
  }

  auto xn = x.node();
  return make_op("resize_nearest3d", Shape{B, C, d2, h2, w2}, std::move(out), {x},
                 [xn, md, mh, mw, D, H, W, d2, h2, w2](Tensor::Node& o) {
                   xn->ensure_grad();
                   std::size_t planes = o.data.size() / (d2 * h2 * w2);
                   for (std::size_t bc = 0; bc < planes; ++bc) {
                     double* dip = xn->grad.data() + bc * D * H * W;
                     const double* gop = o.grad.data() + bc * d2 * h2 * w2;
                     for (std::size_t z = 0; z < d2; ++z) {
                       for (std::size_t y = 0; y < h2; ++y) {
                         for (std::size_t xk = 0; xk < w2; ++xk) {
                           dip[(md[z] * H + mh[y]) * W + mw[xk]] += gop[(z * h2 + y) * w2 + xk];
                         }
                       }
                     }
                   }
                 });
}

// ----------------------------------------------------------------------------
// Dropout (inverted scaling; mask drawn from the caller's stream)
// ----------------------------------------------------------------------------

inline Tensor dropout(const Tensor& x, double p, Rng& rng, bool train) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: p must be in [0,1), got " + std::to_string(p));
  if (!train || p == 0.0) return x;
  std::vector<double> mask(x.size());
  double keep = 1.0 / (1.0 - p);
  for (double& m : mask) m = rng.uniform() >= p ? keep : 0.0;
  std::vector<double> out(x.size());
  const auto& dx = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = dx[i] * mask[i];

  auto xn = x.node();
  return make_op("dropout", x.shape(), std::move(out), {x},
                 [xn, mask = std::move(mask)](Tensor::Node& o) {
                   xn->ensure_grad();
                   for (std::size_t i = 0; i < o.data.size(); ++i) xn->grad[i] += o.grad[i] * mask[i];
                 });
}

// ----------------------------------------------------------------------------
// Binary cross-entropy over probabilities, mean-reduced.
// Probabilities are clamped to [1e-7, 1-1e-7] before the log.
// ----------------------------------------------------------------------------

inline constexpr double kBceClamp = 1e-7;

inline Tensor bce_loss(const Tensor& y_hat, const Tensor& y) {
  if (y_hat.shape() != y.shape()) {
    throw ShapeError("bce_loss: prediction shape " + shape_str(y_hat.shape()) +
                     " does not match label shape " + shape_str(y.shape()));
  }
  const auto& py = y.data();
  for (double v : py) {
    if (v != 0.0 && v != 1.0) {
      throw DataError("bce_loss: label " + std::to_string(v) + " is not in {0,1}");
    }
  }
  const auto& ph = y_hat.data();
  std::size_t n = ph.size();
  double inv = 1.0 / static_cast<double>(n);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double p = std::min(1.0 - kBceClamp, std::max(kBceClamp, ph[i]));
    acc += py[i] * std::log(p) + (1.0 - py[i]) * std::log(1.0 - p);
  }

  auto hn = y_hat.node();
  auto yn = y.node();
  return make_op("bce_loss", Shape{}, {-acc * inv}, {y_hat},
                 [hn, yn, inv](Tensor::Node& o) {
                   hn->ensure_grad();
                   double go = o.grad[0] * inv;
                   for (std::size_t i = 0; i < hn->data.size(); ++i) {
                     double raw = hn->data[i];
                     if (raw <= kBceClamp || raw >= 1.0 - kBceClamp) continue;
                     hn->grad[i] += go * (raw - yn->data[i]) / (raw * (1.0 - raw));
                   }
                 });
}

}  // namespace mmfuse
