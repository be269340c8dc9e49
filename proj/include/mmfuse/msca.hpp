#pragma once

#include "mmfuse/e3d_msca.hpp"
#include "mmfuse/ops.hpp"
#include "mmfuse/trace.hpp"

namespace mmfuse {

// ----------------------------------------------------------------------------
// Multi-head cross-attention between two token sets.
// ----------------------------------------------------------------------------

struct CrossAttnParams {
  Tensor w_q;  // [D_q, D_q]
  Tensor w_k;  // [D_kv, D_q]
  Tensor w_v;  // [D_kv, D_q]
  std::size_t heads = 4;
};

inline CrossAttnParams make_cross_attn(std::size_t d_q, std::size_t d_kv, std::size_t heads,
                                       Rng& rng) {
  if (heads == 0 || d_q % heads != 0) {
    throw ConfigError("cross_attention: heads " + std::to_string(heads) +
                      " must divide query width " + std::to_string(d_q));
  }
  CrossAttnParams p;
  p.heads = heads;
  p.w_q = init::weight({d_q, d_q}, d_q, rng);
  p.w_k = init::weight({d_kv, d_q}, d_kv, rng);
  p.w_v = init::weight({d_kv, d_q}, d_kv, rng);
  return p;
}

// q_tokens [B,N,D_q], kv_tokens [B,M,D_kv] -> [B,N,D_q].
// Logits are Q_h K_h^T / sqrt(C); softmax normalizes over the key axis.
inline Tensor cross_attention(const Tensor& q_tokens, const Tensor& kv_tokens,
                              const CrossAttnParams& p) {
  trace::record("cross_attention");
  const Shape& sq = q_tokens.shape();
  const Shape& skv = kv_tokens.shape();
  if (sq.size() != 3 || skv.size() != 3) {
    throw ShapeError("cross_attention: tokens must be [B,N,D], got " + shape_str(sq) + " and " +
                     shape_str(skv));
  }
  std::size_t B = sq[0], N = sq[1], Dq = sq[2];
  std::size_t M = skv[1], Dkv = skv[2];
  if (skv[0] != B) throw ShapeError("cross_attention: batch extents disagree");
  if (N == 0 || M == 0) throw ContractError("cross_attention: empty token set");
  std::size_t H = p.heads;
  if (H == 0 || Dq % H != 0) {
    throw ConfigError("cross_attention: heads " + std::to_string(H) + " must divide D_q " +
                      std::to_string(Dq));
  }
  if (p.w_q.shape() != Shape{Dq, Dq} || p.w_k.shape() != Shape{Dkv, Dq} ||
      p.w_v.shape() != Shape{Dkv, Dq}) {
    throw ShapeError("cross_attention: projection shapes do not match token widths");
  }
  std::size_t C = Dq / H;

  auto to_heads = [&](const Tensor& t, std::size_t count) {
    // [B, count, D_q] -> [B, H, count, C]
    return swap_axes(reshape(t, {B, count, H, C}), 1, 2);
  };
  Tensor qh = to_heads(matmul(q_tokens, p.w_q), N);
  Tensor kh = to_heads(matmul(kv_tokens, p.w_k), M);
  Tensor vh = to_heads(matmul(kv_tokens, p.w_v), M);

  Tensor logits = mul_scalar(matmul(qh, swap_axes(kh, 2, 3)), 1.0 / std::sqrt(static_cast<double>(C)));
  Tensor weights = softmax(logits, 3);          // [B,H,N,M], rows sum to 1 over keys
  Tensor heads_out = matmul(weights, vh);       // [B,H,N,C]
  return reshape(swap_axes(heads_out, 1, 2), {B, N, Dq});
}

// ----------------------------------------------------------------------------
// Inverted-pyramid projections: three consecutive linear reductions of both
// modality vectors, each reshaped into fixed-width tokens.
// ----------------------------------------------------------------------------

struct PyramidLevel {
  std::size_t dim = 0;
  std::size_t token_count = 0;
  std::size_t token_dim = 0;
  Tensor w_img, b_img;
  Tensor w_tab, b_tab;
};

struct ScalePyramid {
  std::vector<PyramidLevel> levels;  // exactly 3, dims strictly decreasing
};

struct TokenPair {
  Tensor img;  // [B, N_s, tok_s]
  Tensor tab;
};

inline ScalePyramid make_pyramid(std::size_t input_dim, std::size_t token_dim, Rng& rng) {
  if (input_dim % 4 != 0 || (input_dim / 4) % token_dim != 0) {
    throw ConfigError("pyramid: input dim " + std::to_string(input_dim) +
                      " must reduce to multiples of token width " + std::to_string(token_dim));
  }
  ScalePyramid p;
  std::size_t prev = input_dim;
  for (std::size_t level = 0; level < 3; ++level) {
    std::size_t dim = input_dim >> level;  // 256 -> 128 -> 64 by default
    PyramidLevel l;
    l.dim = dim;
    l.token_dim = token_dim;
    l.token_count = dim / token_dim;
    l.w_img = init::weight({prev, dim}, prev, rng);
    l.b_img = init::zeros({dim});
    l.w_tab = init::weight({prev, dim}, prev, rng);
    l.b_tab = init::zeros({dim});
    p.levels.push_back(std::move(l));
    prev = dim;
  }
  return p;
}

inline std::vector<TokenPair> pyramid_project(const Tensor& img_feat, const Tensor& tab_feat,
                                              const ScalePyramid& p) {
  trace::record("pyramid_project");
  if (p.levels.size() != 3) throw ConfigError("pyramid: expected exactly 3 levels");
  if (img_feat.rank() != 2 || tab_feat.rank() != 2) {
    throw ShapeError("pyramid: features must be [B,dim]");
  }
  std::size_t B = img_feat.extent(0);
  if (img_feat.extent(1) != p.levels[0].w_img.extent(0) ||
      tab_feat.extent(1) != p.levels[0].w_tab.extent(0)) {
    throw ConfigError("pyramid: feature width " + std::to_string(img_feat.extent(1)) +
                      " does not match level-0 projection");
  }
  std::vector<TokenPair> out;
  Tensor cur_img = img_feat;
  Tensor cur_tab = tab_feat;
  for (const PyramidLevel& l : p.levels) {
    cur_img = linear(cur_img, l.w_img, l.b_img);
    cur_tab = linear(cur_tab, l.w_tab, l.b_tab);
    out.push_back({reshape(cur_img, {B, l.token_count, l.token_dim}),
                   reshape(cur_tab, {B, l.token_count, l.token_dim})});
  }
  return out;
}

// ----------------------------------------------------------------------------
// Per-scale bidirectional fusion: image queries table, table queries image,
// flatten and sum.
// ----------------------------------------------------------------------------

inline Tensor fuse_scale(const Tensor& img_tokens, const Tensor& tab_tokens,
                         const CrossAttnParams& p_img2tab, const CrossAttnParams& p_tab2img) {
  trace::record("fuse_scale");
  if (img_tokens.shape() != tab_tokens.shape()) {
    throw ConfigError("fuse_scale: token sets " + shape_str(img_tokens.shape()) + " and " +
                      shape_str(tab_tokens.shape()) + " are not from the same pyramid level");
  }
  std::size_t B = img_tokens.extent(0);
  std::size_t dim = img_tokens.extent(1) * img_tokens.extent(2);
  Tensor o1 = cross_attention(img_tokens, tab_tokens, p_img2tab);
  Tensor o2 = cross_attention(tab_tokens, img_tokens, p_tab2img);
  return add(reshape(o1, {B, dim}), reshape(o2, {B, dim}));
}

// ----------------------------------------------------------------------------
// BSF: align two scales, weight dimensions by softmax of the elementwise
// product, merge. The d_out/2 rescale keeps constant inputs fixed points.
// ----------------------------------------------------------------------------

struct BsfParams {
  Tensor w_a, b_a;  // [d_u, d_out]
  Tensor w_b, b_b;  // [d_v, d_out]
};

inline BsfParams make_bsf(std::size_t d_u, std::size_t d_v, std::size_t d_out, Rng& rng) {
  BsfParams p;
  p.w_a = init::weight({d_u, d_out}, d_u, rng);
  p.b_a = init::zeros({d_out});
  p.w_b = init::weight({d_v, d_out}, d_v, rng);
  p.b_b = init::zeros({d_out});
  return p;
}

inline Tensor bsf_merge(const Tensor& u, const Tensor& v, const BsfParams& p) {
  trace::record("bsf_merge");
  if (u.rank() != 2 || v.rank() != 2) throw ShapeError("bsf_merge: inputs must be [B,d]");
  if (u.extent(1) != p.w_a.extent(0) || v.extent(1) != p.w_b.extent(0)) {
    throw ShapeError("bsf_merge: aligner input widths do not match features");
  }
  if (p.w_a.extent(1) != p.w_b.extent(1)) {
    throw ConfigError("bsf_merge: aligners must target the same output dim");
  }
  std::size_t d_out = p.w_a.extent(1);
  Tensor ua = linear(u, p.w_a, p.b_a);
  Tensor va = linear(v, p.w_b, p.b_b);
  Tensor importance = softmax(mul(ua, va), 1);
  return mul_scalar(mul(importance, add(ua, va)), static_cast<double>(d_out) / 2.0);
}

// ----------------------------------------------------------------------------
// Full MSCA module: pyramid -> per-scale bidirectional attention -> cascaded
// BSF merges aligned back to the input width.
// ----------------------------------------------------------------------------

struct MscaParams {
  ScalePyramid pyramid;
  std::vector<CrossAttnParams> img2tab;  // one per level
  std::vector<CrossAttnParams> tab2img;
  BsfParams bsf_12;   // merge level 1 with level 2
  BsfParams bsf_123;  // merge the result with level 3
};

inline MscaParams make_msca(std::size_t feature_dim, std::size_t token_dim, std::size_t heads,
                            Rng& rng) {
  MscaParams p;
  p.pyramid = make_pyramid(feature_dim, token_dim, rng);
  for (const PyramidLevel& l : p.pyramid.levels) {
    p.img2tab.push_back(make_cross_attn(l.token_dim, l.token_dim, heads, rng));
    p.tab2img.push_back(make_cross_attn(l.token_dim, l.token_dim, heads, rng));
  }
  std::size_t d0 = p.pyramid.levels[0].dim;
  std::size_t d1 = p.pyramid.levels[1].dim;
  std::size_t d2 = p.pyramid.levels[2].dim;
  p.bsf_12 = make_bsf(d0, d1, feature_dim, rng);
  p.bsf_123 = make_bsf(feature_dim, d2, feature_dim, rng);
  return p;
}

inline Tensor msca_forward(const Tensor& img_feat, const Tensor& tab_feat, const MscaParams& p) {
  trace::record("msca_forward");
  std::vector<TokenPair> levels = pyramid_project(img_feat, tab_feat, p.pyramid);
  std::vector<Tensor> fused;
  for (std::size_t s = 0; s < levels.size(); ++s) {
    fused.push_back(fuse_scale(levels[s].img, levels[s].tab, p.img2tab[s], p.tab2img[s]));
  }
  Tensor merged = bsf_merge(fused[0], fused[1], p.bsf_12);
  return bsf_merge(merged, fused[2], p.bsf_123);
}

}  // namespace mmfuse
