#pragma once

#include "mmfuse/ops.hpp"
#include "mmfuse/trace.hpp"

namespace mmfuse {

namespace init {

// Uniform +-sqrt(1/fan_in), zero biases, seeded.
inline Tensor weight(Shape shape, std::size_t fan_in, Rng& rng) {
  double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  return Tensor::uniform(std::move(shape), rng, -bound, bound, /*requires_grad=*/true);
}

inline Tensor conv_weight(const Conv3dSpec& spec, Rng& rng) {
  std::size_t icpg = spec.in_channels / spec.groups;
  std::size_t fan_in = icpg * spec.kernel[0] * spec.kernel[1] * spec.kernel[2];
  return weight({spec.out_channels, icpg, spec.kernel[0], spec.kernel[1], spec.kernel[2]}, fan_in, rng);
}

inline Tensor zeros(Shape shape) { return Tensor::zeros(std::move(shape), /*requires_grad=*/true); }

}  // namespace init

// ----------------------------------------------------------------------------
// E3D-MSCA: channel gate (CAB), spatial gate (SAB), multi-kernel depthwise
// fusion (DCFB), composed DCFB(SAB(CAB(x))).
// ----------------------------------------------------------------------------

struct CabParams {
  Tensor mlp_w1;  // [C, C/r]
  Tensor mlp_w2;  // [C/r, C]
  std::size_t reduction = 16;
};

struct SabParams {
  Conv3dSpec spec;  // 7x7x7, 2 -> 1 channels, pad 3
  Tensor weight;
};

struct DcfbParams {
  Conv3dSpec dw1, dw3, dw5;  // depthwise, channel-preserving
  Tensor w1, w3, w5;
  Conv3dSpec pw;  // 1x1x1 pointwise projection
  Tensor pw_weight;
};

struct E3dMscaParams {
  CabParams cab;
  SabParams sab;
  DcfbParams dcfb;
};

inline Conv3dSpec depthwise_spec(std::size_t channels, std::size_t k) {
  Conv3dSpec s;
  s.in_channels = channels;
  s.out_channels = channels;
  s.kernel = {k, k, k};
  s.stride = {1, 1, 1};
  s.padding = {(k - 1) / 2, (k - 1) / 2, (k - 1) / 2};
  s.groups = channels;
  return s;
}

inline E3dMscaParams make_e3d_msca(std::size_t channels, std::size_t reduction, Rng& rng) {
  if (reduction == 0 || channels % reduction != 0) {
    throw ConfigError("e3d_msca: reduction " + std::to_string(reduction) +
                      " must divide channel width " + std::to_string(channels));
  }
  E3dMscaParams p;
  std::size_t hidden = channels / reduction;
  p.cab.reduction = reduction;
  p.cab.mlp_w1 = init::weight({channels, hidden}, channels, rng);
  p.cab.mlp_w2 = init::weight({hidden, channels}, hidden, rng);

  p.sab.spec.in_channels = 2;
  p.sab.spec.out_channels = 1;
  p.sab.spec.kernel = {7, 7, 7};
  p.sab.spec.padding = {3, 3, 3};
  p.sab.weight = init::conv_weight(p.sab.spec, rng);

  p.dcfb.dw1 = depthwise_spec(channels, 1);
  p.dcfb.dw3 = depthwise_spec(channels, 3);
  p.dcfb.dw5 = depthwise_spec(channels, 5);
  p.dcfb.w1 = init::conv_weight(p.dcfb.dw1, rng);
  p.dcfb.w3 = init::conv_weight(p.dcfb.dw3, rng);
  p.dcfb.w5 = init::conv_weight(p.dcfb.dw5, rng);
  p.dcfb.pw.in_channels = channels;
  p.dcfb.pw.out_channels = channels;
  p.dcfb.pw_weight = init::conv_weight(p.dcfb.pw, rng);
  return p;
}

// Dual-pool shared-MLP channel gate: sigmoid(MLP(avg) + MLP(max)) per channel.
inline Tensor cab3d_forward(const Tensor& x, const E3dMscaParams& p) {
  trace::record("cab3d");
  const Shape& s = x.shape();
  if (s.size() != 5) throw ShapeError("cab3d: input must be [B,C,D,H,W], got " + shape_str(s));
  std::size_t B = s[0], C = s[1];
  if (C != p.cab.mlp_w1.extent(0)) {
    throw ShapeError("cab3d: input has " + std::to_string(C) + " channels, gate expects " +
                     std::to_string(p.cab.mlp_w1.extent(0)));
  }
  auto mlp = [&](const Tensor& v) {
    return matmul(relu(matmul(v, p.cab.mlp_w1)), p.cab.mlp_w2);
  };
  Tensor avg = reshape(global_pool3d(x, PoolMode::avg), {B, C});
  Tensor mx = reshape(global_pool3d(x, PoolMode::max), {B, C});
  Tensor gate = sigmoid(add(mlp(avg), mlp(mx)));
  return mul(x, reshape(gate, {B, C, 1, 1, 1}));
}

// Dual-map spatial gate: sigmoid(conv7(concat(channel mean, channel max))).
inline Tensor sab3d_forward(const Tensor& x, const E3dMscaParams& p) {
  trace::record("sab3d");
  if (x.rank() != 5) throw ShapeError("sab3d: input must be [B,C,D,H,W], got " + shape_str(x.shape()));
  Tensor maps = concat({mean_axis(x, 1), max_axis(x, 1)}, 1);
  Tensor gate = sigmoid(conv3d(maps, p.sab.weight, Tensor(), p.sab.spec));
  return mul(x, gate);
}

// Residual multi-kernel depthwise fusion: x + pointwise(dw1 + dw3 + dw5).
inline Tensor dcfb3d_forward(const Tensor& x, const E3dMscaParams& p) {
  trace::record("dcfb3d");
  if (x.rank() != 5) throw ShapeError("dcfb3d: input must be [B,C,D,H,W], got " + shape_str(x.shape()));
  Tensor s = add(add(conv3d(x, p.dcfb.w1, Tensor(), p.dcfb.dw1),
                     conv3d(x, p.dcfb.w3, Tensor(), p.dcfb.dw3)),
                 conv3d(x, p.dcfb.w5, Tensor(), p.dcfb.dw5));
  return add(x, conv3d(s, p.dcfb.pw_weight, Tensor(), p.dcfb.pw));
}

inline Tensor e3d_msca_forward(const Tensor& x, const E3dMscaParams& p) {
  trace::record("e3d_msca");
  return dcfb3d_forward(sab3d_forward(cab3d_forward(x, p), p), p);
}

// ----------------------------------------------------------------------------
// BFPU: gate two scales through sigmoid(conv(F_a) * conv(F_b)), feed the gate
// back into both, concatenate channel-wise.
// ----------------------------------------------------------------------------

struct BfpuParams {
  Conv3dSpec spec_a;  // C_a -> C_a, 3x3x3 pad 1
  Conv3dSpec spec_b;  // C_b -> C_a, 3x3x3 pad 1
  Tensor w_a, b_a;
  Tensor w_b, b_b;
};

inline BfpuParams make_bfpu(std::size_t channels_a, std::size_t channels_b, Rng& rng) {
  BfpuParams p;
  p.spec_a.in_channels = channels_a;
  p.spec_a.out_channels = channels_a;
  p.spec_a.kernel = {3, 3, 3};
  p.spec_a.padding = {1, 1, 1};
  p.spec_b = p.spec_a;
  p.spec_b.in_channels = channels_b;
  p.w_a = init::conv_weight(p.spec_a, rng);
  p.b_a = init::zeros({channels_a});
  p.w_b = init::conv_weight(p.spec_b, rng);
  p.b_b = init::zeros({channels_a});
  return p;
}

inline Tensor bfpu_fuse(const Tensor& f_a, const Tensor& f_b, const BfpuParams& p) {
  trace::record("bfpu_fuse");
  const Shape& sa = f_a.shape();
  const Shape& sb = f_b.shape();
  if (sa.size() != 5 || sb.size() != 5) throw ShapeError("bfpu_fuse: inputs must be [B,C,D,H,W]");
  if (sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] || sa[4] != sb[4]) {
    throw ShapeError("bfpu_fuse: spatial grids " + shape_str(sa) + " and " + shape_str(sb) +
                     " differ; resize the coarser feature to the finer grid first");
  }
  std::size_t ca = sa[1], cb = sb[1];
  Tensor mid = sigmoid(mul(conv3d(f_a, p.w_a, p.b_a, p.spec_a),
                           conv3d(f_b, p.w_b, p.b_b, p.spec_b)));  // [B, C_a, ...]
  Tensor branch_a = add(f_a, mul(mid, f_a));
  // The feedback product needs matching channel counts; when C_b != C_a the
  // gate for the second branch collapses to a single channel by mean.
  Tensor gate_b = (cb == ca) ? mid : mean_axis(mid, 1);
  Tensor branch_b = add(f_b, mul(gate_b, f_b));
  return concat({branch_a, branch_b}, 1);
}

}  // namespace mmfuse
