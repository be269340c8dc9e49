#pragma once

#include <optional>
#include <tuple>

#include "mmfuse/e3d_msca.hpp"
#include "mmfuse/kan.hpp"
#include "mmfuse/ops.hpp"
#include "mmfuse/trace.hpp"

namespace mmfuse {

// ----------------------------------------------------------------------------
// Tabular schema: gender, age, weight, T/N/M stage, smoking history.
// Categoricals one-hot encode; numerics standardize on training statistics.
// ----------------------------------------------------------------------------

struct TabularRow {
  std::string gender;   // M | F
  double age = 0.0;     // years
  double weight = 0.0;  // kg
  std::string t_stage;  // T1..T4
  std::string n_stage;  // N0..N3
  std::string m_stage;  // M0 | M1
  std::string smoking;  // never | former | current
};

struct TabularSchema {
  static const std::vector<std::string>& gender_values() {
    static const std::vector<std::string> v{"M", "F"};
    return v;
  }
  static const std::vector<std::string>& t_values() {
    static const std::vector<std::string> v{"T1", "T2", "T3", "T4"};
    return v;
  }
  static const std::vector<std::string>& n_values() {
    static const std::vector<std::string> v{"N0", "N1", "N2", "N3"};
    return v;
  }
  static const std::vector<std::string>& m_values() {
    static const std::vector<std::string> v{"M0", "M1"};
    return v;
  }
  static const std::vector<std::string>& smoking_values() {
    static const std::vector<std::string> v{"never", "former", "current"};
    return v;
  }

  static const std::vector<std::string>& column_names() {
    static const std::vector<std::string> v{"gender",  "age",     "weight", "t_stage",
                                            "n_stage", "m_stage", "smoking_history"};
    return v;
  }

  // 2 + 1 + 1 + 4 + 4 + 2 + 3
  static std::size_t encoded_width() { return 17; }

  static std::size_t category_index(const char* attribute, const std::string& value,
                                    const std::vector<std::string>& values) {
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (values[i] == value) return i;
    }
    throw DataError(std::string("tabular attribute '") + attribute + "': unknown value '" + value +
                    "'");
  }
};

// Standardization statistics for the numeric attributes, fit on the training
// split only.
struct TabularScaler {
  double age_mean = 0.0, age_std = 1.0;
  double weight_mean = 0.0, weight_std = 1.0;

  static TabularScaler fit(const std::vector<TabularRow>& rows,
                           const std::vector<std::size_t>& train_indices) {
    if (train_indices.empty()) throw DataError("tabular scaler: empty training split");
    auto moments = [&](auto field) {
      double mean = 0.0;
      for (std::size_t i : train_indices) mean += field(rows[i]);
      mean /= static_cast<double>(train_indices.size());
      double var = 0.0;
      for (std::size_t i : train_indices) {
        double d = field(rows[i]) - mean;
        var += d * d;
      }
      var /= static_cast<double>(train_indices.size());
      return std::pair<double, double>(mean, std::max(std::sqrt(var), 1e-6));
    };
    TabularScaler s;
    std::tie(s.age_mean, s.age_std) = moments([](const TabularRow& r) { return r.age; });
    std::tie(s.weight_mean, s.weight_std) = moments([](const TabularRow& r) { return r.weight; });
    return s;
  }
};

inline void encode_tabular_row(const TabularRow& row, const TabularScaler& scaler, double* out) {
  std::size_t off = 0;
  auto onehot = [&](const char* name, const std::string& value, const std::vector<std::string>& vals) {
    std::size_t idx = TabularSchema::category_index(name, value, vals);
    for (std::size_t i = 0; i < vals.size(); ++i) out[off + i] = (i == idx) ? 1.0 : 0.0;
    off += vals.size();
  };
  onehot("gender", row.gender, TabularSchema::gender_values());
  out[off++] = (row.age - scaler.age_mean) / scaler.age_std;
  out[off++] = (row.weight - scaler.weight_mean) / scaler.weight_std;
  onehot("t_stage", row.t_stage, TabularSchema::t_values());
  onehot("n_stage", row.n_stage, TabularSchema::n_values());
  onehot("m_stage", row.m_stage, TabularSchema::m_values());
  onehot("smoking_history", row.smoking, TabularSchema::smoking_values());
}

inline Tensor encode_tabular(const std::vector<TabularRow>& rows,
                             const std::vector<std::size_t>& indices, const TabularScaler& scaler) {
  std::size_t width = TabularSchema::encoded_width();
  std::vector<double> data(indices.size() * width);
  for (std::size_t n = 0; n < indices.size(); ++n) {
    encode_tabular_row(rows[indices[n]], scaler, data.data() + n * width);
  }
  return Tensor::from_data({indices.size(), width}, std::move(data));
}

// ----------------------------------------------------------------------------
// KAN tabular encoder: two stacked spline layers, enc_width -> 64 -> 256.
// ----------------------------------------------------------------------------

struct TabularEncoderParams {
  KanLayerParams layer1;
  KanLayerParams layer2;
};

inline TabularEncoderParams make_tabular_encoder(std::size_t enc_width, std::size_t hidden,
                                                 std::size_t out_dim, const BSplineGrid& grid,
                                                 Rng& rng) {
  TabularEncoderParams p;
  p.layer1 = make_kan_layer(enc_width, hidden, grid, rng);
  p.layer2 = make_kan_layer(hidden, out_dim, grid, rng);
  return p;
}

inline Tensor tabular_encode(const Tensor& encoded, const TabularEncoderParams& p) {
  trace::record("tabular_encode");
  return kan_layer_forward(kan_layer_forward(encoded, p.layer1), p.layer2);
}

// ----------------------------------------------------------------------------
// Lightweight 3D image encoder: three strided conv stages producing a feature
// pyramid, E3D-MSCA per level, BFPU cascade back down the pyramid, pooled
// head projection.
// ----------------------------------------------------------------------------

struct StageParams {
  Conv3dSpec spec;
  Tensor weight, bias;
};

struct BackboneParams {
  std::size_t depth = 12, height = 192, width = 192;  // expected input grid
  std::array<StageParams, 3> stages;
  bool use_e3d_msca = true;
  std::array<std::optional<E3dMscaParams>, 3> msca;
  BfpuParams bfpu_32;          // fuse resized P3 into P2
  Conv3dSpec reduce1_spec;     // (C3+C2) -> C2, 1x1x1
  Tensor reduce1_w, reduce1_b;
  BfpuParams bfpu_21;          // fuse the reduced map into P1
  Conv3dSpec reduce2_spec;     // (C2+C1) -> C2, 1x1x1
  Tensor reduce2_w, reduce2_b;
  Tensor head_w, head_b;       // [C2, feature_dim]
  double dropout = 0.0;

  std::array<std::size_t, 3> stage_channels() const {
    return {stages[0].spec.out_channels, stages[1].spec.out_channels,
            stages[2].spec.out_channels};
  }
};

inline std::array<std::array<std::size_t, 3>, 3> backbone_grids(std::size_t d, std::size_t h,
                                                                std::size_t w) {
  // Stage strides (2,4,4), (2,2,2), (2,2,2) with 3x3x3 kernels, pad 1.
  Conv3dSpec probe;
  probe.kernel = {3, 3, 3};
  probe.padding = {1, 1, 1};
  std::array<std::array<std::size_t, 3>, 3> grids;
  std::array<std::array<std::size_t, 3>, 3> strides{{{2, 4, 4}, {2, 2, 2}, {2, 2, 2}}};
  std::array<std::size_t, 3> cur{d, h, w};
  for (std::size_t s = 0; s < 3; ++s) {
    probe.stride = strides[s];
    grids[s] = probe.out_extents(cur[0], cur[1], cur[2]);
    std::size_t before = cur[0] * cur[1] * cur[2];
    std::size_t after = grids[s][0] * grids[s][1] * grids[s][2];
    if (after >= before) {
      throw ConfigError("backbone: stage " + std::to_string(s + 1) + " grid does not shrink at " +
                        std::to_string(d) + "x" + std::to_string(h) + "x" + std::to_string(w));
    }
    cur = grids[s];
  }
  return grids;
}

inline BackboneParams make_backbone(std::size_t depth, std::size_t height, std::size_t width,
                                    std::size_t channels_base, std::size_t feature_dim,
                                    std::size_t cab_reduction, bool use_e3d_msca, double dropout,
                                    Rng& rng) {
  backbone_grids(depth, height, width);  // validates the geometry up front
  BackboneParams p;
  p.depth = depth;
  p.height = height;
  p.width = width;
  p.use_e3d_msca = use_e3d_msca;
  p.dropout = dropout;

  std::array<std::size_t, 3> chans{channels_base, channels_base * 2, channels_base * 4};
  std::array<std::array<std::size_t, 3>, 3> strides{{{2, 4, 4}, {2, 2, 2}, {2, 2, 2}}};
  std::size_t in_ch = 1;
  for (std::size_t s = 0; s < 3; ++s) {
    StageParams& st = p.stages[s];
    st.spec.in_channels = in_ch;
    st.spec.out_channels = chans[s];
    st.spec.kernel = {3, 3, 3};
    st.spec.stride = strides[s];
    st.spec.padding = {1, 1, 1};
    st.weight = init::conv_weight(st.spec, rng);
    st.bias = init::zeros({chans[s]});
    in_ch = chans[s];
    if (use_e3d_msca) p.msca[s] = make_e3d_msca(chans[s], cab_reduction, rng);
  }

  p.bfpu_32 = make_bfpu(chans[2], chans[1], rng);  // F_a = resized P3, F_b = P2
  p.reduce1_spec.in_channels = chans[2] + chans[1];
  p.reduce1_spec.out_channels = chans[1];
  p.reduce1_w = init::conv_weight(p.reduce1_spec, rng);
  p.reduce1_b = init::zeros({chans[1]});

  p.bfpu_21 = make_bfpu(chans[1], chans[0], rng);  // F_a = resized fused map, F_b = P1
  p.reduce2_spec.in_channels = chans[1] + chans[0];
  p.reduce2_spec.out_channels = chans[1];
  p.reduce2_w = init::conv_weight(p.reduce2_spec, rng);
  p.reduce2_b = init::zeros({chans[1]});

  p.head_w = init::weight({chans[1], feature_dim}, chans[1], rng);
  p.head_b = init::zeros({feature_dim});
  return p;
}

inline Tensor image_encode(const Tensor& volumes, const BackboneParams& p, bool train_mode,
                           Rng* dropout_rng = nullptr) {
  trace::record("image_encode");
  const Shape& s = volumes.shape();
  if (s.size() != 5 || s[1] != 1) {
    throw ShapeError("image_encode: input must be [B,1,D,H,W], got " + shape_str(s));
  }
  if (s[2] != p.depth || s[3] != p.height || s[4] != p.width) {
    throw ConfigError("image_encode: input grid " + shape_str(s) + " does not match configured " +
                      std::to_string(p.depth) + "x" + std::to_string(p.height) + "x" +
                      std::to_string(p.width));
  }

  std::array<Tensor, 3> pyramid;
  Tensor cur = volumes;
  for (std::size_t st = 0; st < 3; ++st) {
    cur = relu(conv3d(cur, p.stages[st].weight, p.stages[st].bias, p.stages[st].spec));
    pyramid[st] = p.use_e3d_msca ? e3d_msca_forward(cur, *p.msca[st]) : cur;
    cur = pyramid[st];
  }

  const Shape& g2 = pyramid[1].shape();
  Tensor p3_up = resize_nearest3d(pyramid[2], g2[2], g2[3], g2[4]);
  Tensor fused = bfpu_fuse(p3_up, pyramid[1], p.bfpu_32);
  fused = conv3d(fused, p.reduce1_w, p.reduce1_b, p.reduce1_spec);

  const Shape& g1 = pyramid[0].shape();
  Tensor fused_up = resize_nearest3d(fused, g1[2], g1[3], g1[4]);
  fused = bfpu_fuse(fused_up, pyramid[0], p.bfpu_21);
  fused = conv3d(fused, p.reduce2_w, p.reduce2_b, p.reduce2_spec);

  std::size_t B = s[0];
  Tensor pooled = reshape(global_pool3d(fused, PoolMode::avg), {B, fused.extent(1)});
  Tensor feat = linear(pooled, p.head_w, p.head_b);
  if (train_mode && p.dropout > 0.0) {
    if (!dropout_rng) throw ContractError("image_encode: train mode with dropout needs an RNG");
    feat = dropout(feat, p.dropout, *dropout_rng, true);
  }
  return feat;
}

// ----------------------------------------------------------------------------
// Classifier head: probabilities strictly in (0,1).
// ----------------------------------------------------------------------------

struct HeadParams {
  Tensor w;  // [dim, 1]
  Tensor b;  // [1]
};

inline HeadParams make_head(std::size_t dim, Rng& rng) {
  HeadParams h;
  h.w = init::weight({dim, 1}, dim, rng);
  h.b = init::zeros({1});
  return h;
}

inline Tensor head_logits(const Tensor& features, const HeadParams& h) {
  return reshape(linear(features, h.w, h.b), {features.extent(0)});
}

inline Tensor classify(const Tensor& fused, const HeadParams& h) {
  return sigmoid(head_logits(fused, h));
}

}  // namespace mmfuse
