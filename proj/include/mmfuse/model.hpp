#pragma once

#include "mmfuse/encoders.hpp"
#include "mmfuse/msca.hpp"

namespace mmfuse {

enum class FusionMode { msca, cross_attention, late_fusion, image_only };

inline const char* fusion_mode_name(FusionMode m) {
  switch (m) {
    case FusionMode::msca: return "msca";
    case FusionMode::cross_attention: return "cross_attention";
    case FusionMode::late_fusion: return "late_fusion";
    case FusionMode::image_only: return "image_only";
  }
  return "?";
}

inline FusionMode parse_fusion_mode(const std::string& s) {
  if (s == "msca") return FusionMode::msca;
  if (s == "cross_attention") return FusionMode::cross_attention;
  if (s == "late_fusion") return FusionMode::late_fusion;
  if (s == "image_only") return FusionMode::image_only;
  throw ConfigError("unknown fusion mode '" + s +
                    "' (expected msca|cross_attention|late_fusion|image_only)");
}

struct ModelConfig {
  std::size_t depth = 12, height = 192, width = 192;
  std::size_t channels_base = 64;
  std::size_t feature_dim = 256;
  std::size_t token_width = 16;
  std::size_t heads = 4;
  std::size_t cab_reduction = 16;
  double dropout = 0.0;
  bool use_e3d_msca = true;
  FusionMode fusion_mode = FusionMode::msca;
  std::size_t kan_degree = 3, kan_grid = 8;
  double kan_range = 3.0;
  std::size_t kan_hidden = 64;

  void validate() const {
    if (channels_base == 0) throw ConfigError("channels_base must be positive");
    if (cab_reduction == 0 || channels_base % cab_reduction != 0) {
      throw ConfigError("cab_reduction " + std::to_string(cab_reduction) +
                        " must divide channels_base " + std::to_string(channels_base));
    }
    if (feature_dim % 4 != 0 || (feature_dim / 4) % token_width != 0) {
      throw ConfigError("feature_dim " + std::to_string(feature_dim) +
                        " must reduce to multiples of token_width " + std::to_string(token_width));
    }
    if (heads == 0 || token_width % heads != 0) {
      throw ConfigError("heads " + std::to_string(heads) + " must divide token_width " +
                        std::to_string(token_width));
    }
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0,1)");
    backbone_grids(depth, height, width);
  }

  bool uses_tabular() const { return fusion_mode != FusionMode::image_only; }
};

// The assembled network. Only the submodules the fusion mode needs exist.
struct Model {
  ModelConfig cfg;
  BackboneParams backbone;
  std::optional<TabularEncoderParams> tabular;
  std::optional<MscaParams> msca;
  std::optional<CrossAttnParams> xattn_img2tab, xattn_tab2img;  // cross_attention mode
  std::optional<HeadParams> cls_head;                            // msca / cross_attention / image_only
  std::optional<HeadParams> img_head, tab_head;                  // late_fusion

  std::vector<std::pair<std::string, Tensor>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    auto push = [&](const std::string& name, const Tensor& t) { out.emplace_back(name, t); };
    auto push_e3d = [&](const std::string& prefix, const E3dMscaParams& e) {
      push(prefix + ".cab.w1", e.cab.mlp_w1);
      push(prefix + ".cab.w2", e.cab.mlp_w2);
      push(prefix + ".sab.w", e.sab.weight);
      push(prefix + ".dcfb.w1", e.dcfb.w1);
      push(prefix + ".dcfb.w3", e.dcfb.w3);
      push(prefix + ".dcfb.w5", e.dcfb.w5);
      push(prefix + ".dcfb.pw", e.dcfb.pw_weight);
    };
    auto push_bfpu = [&](const std::string& prefix, const BfpuParams& b) {
      push(prefix + ".wa", b.w_a);
      push(prefix + ".ba", b.b_a);
      push(prefix + ".wb", b.w_b);
      push(prefix + ".bb", b.b_b);
    };
    auto push_attn = [&](const std::string& prefix, const CrossAttnParams& a) {
      push(prefix + ".wq", a.w_q);
      push(prefix + ".wk", a.w_k);
      push(prefix + ".wv", a.w_v);
    };

    for (std::size_t s = 0; s < 3; ++s) {
      std::string prefix = "backbone.stage" + std::to_string(s + 1);
      push(prefix + ".w", backbone.stages[s].weight);
      push(prefix + ".b", backbone.stages[s].bias);
      if (backbone.msca[s]) push_e3d(prefix + ".e3d", *backbone.msca[s]);
    }
    push_bfpu("backbone.bfpu32", backbone.bfpu_32);
    push("backbone.reduce1.w", backbone.reduce1_w);
    push("backbone.reduce1.b", backbone.reduce1_b);
    push_bfpu("backbone.bfpu21", backbone.bfpu_21);
    push("backbone.reduce2.w", backbone.reduce2_w);
    push("backbone.reduce2.b", backbone.reduce2_b);
    push("backbone.head.w", backbone.head_w);
    push("backbone.head.b", backbone.head_b);

    if (tabular) {
      push("tabular.l1.coeff", tabular->layer1.coeff);
      push("tabular.l1.base", tabular->layer1.base_w);
      push("tabular.l2.coeff", tabular->layer2.coeff);
      push("tabular.l2.base", tabular->layer2.base_w);
    }
    if (msca) {
      for (std::size_t l = 0; l < 3; ++l) {
        std::string prefix = "msca.level" + std::to_string(l + 1);
        push(prefix + ".img.w", msca->pyramid.levels[l].w_img);
        push(prefix + ".img.b", msca->pyramid.levels[l].b_img);
        push(prefix + ".tab.w", msca->pyramid.levels[l].w_tab);
        push(prefix + ".tab.b", msca->pyramid.levels[l].b_tab);
        push_attn(prefix + ".i2t", msca->img2tab[l]);
        push_attn(prefix + ".t2i", msca->tab2img[l]);
      }
      push("msca.bsf12.wa", msca->bsf_12.w_a);
      push("msca.bsf12.ba", msca->bsf_12.b_a);
      push("msca.bsf12.wb", msca->bsf_12.w_b);
      push("msca.bsf12.bb", msca->bsf_12.b_b);
      push("msca.bsf123.wa", msca->bsf_123.w_a);
      push("msca.bsf123.ba", msca->bsf_123.b_a);
      push("msca.bsf123.wb", msca->bsf_123.w_b);
      push("msca.bsf123.bb", msca->bsf_123.b_b);
    }
    if (xattn_img2tab) push_attn("xattn.i2t", *xattn_img2tab);
    if (xattn_tab2img) push_attn("xattn.t2i", *xattn_tab2img);
    if (cls_head) {
      push("cls.w", cls_head->w);
      push("cls.b", cls_head->b);
    }
    if (img_head) {
      push("img_head.w", img_head->w);
      push("img_head.b", img_head->b);
    }
    if (tab_head) {
      push("tab_head.w", tab_head->w);
      push("tab_head.b", tab_head->b);
    }
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  // volumes [B,1,D,H,W]; tab_encoded [B,enc_width] (ignored by image_only).
  // Returns probabilities [B].
  Tensor forward(const Tensor& volumes, const Tensor& tab_encoded, bool train_mode,
                 Rng* dropout_rng = nullptr) const {
    Tensor img_feat = image_encode(volumes, backbone, train_mode, dropout_rng);
    switch (cfg.fusion_mode) {
      case FusionMode::image_only:
        return classify(img_feat, *cls_head);
      case FusionMode::late_fusion: {
        Tensor tab_feat = tabular_encode(tab_encoded, *tabular);
        Tensor logits = mul_scalar(
            add(head_logits(img_feat, *img_head), head_logits(tab_feat, *tab_head)), 0.5);
        return sigmoid(logits);
      }
      case FusionMode::cross_attention: {
        Tensor tab_feat = tabular_encode(tab_encoded, *tabular);
        std::size_t B = img_feat.extent(0);
        std::size_t count = cfg.feature_dim / cfg.token_width;
        Tensor img_tok = reshape(img_feat, {B, count, cfg.token_width});
        Tensor tab_tok = reshape(tab_feat, {B, count, cfg.token_width});
        Tensor fused = fuse_scale(img_tok, tab_tok, *xattn_img2tab, *xattn_tab2img);
        return classify(fused, *cls_head);
      }
      case FusionMode::msca: {
        Tensor tab_feat = tabular_encode(tab_encoded, *tabular);
        Tensor fused = msca_forward(img_feat, tab_feat, *msca);
        return classify(fused, *cls_head);
      }
    }
    throw ContractError("forward: unhandled fusion mode");
  }
};

inline Model build_model(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  m.backbone = make_backbone(cfg.depth, cfg.height, cfg.width, cfg.channels_base, cfg.feature_dim,
                             cfg.cab_reduction, cfg.use_e3d_msca, cfg.dropout, rng);
  if (cfg.uses_tabular()) {
    BSplineGrid grid = BSplineGrid::make(cfg.kan_degree, cfg.kan_grid, cfg.kan_range);
    m.tabular = make_tabular_encoder(TabularSchema::encoded_width(), cfg.kan_hidden,
                                     cfg.feature_dim, grid, rng);
  }
  switch (cfg.fusion_mode) {
    case FusionMode::msca:
      m.msca = make_msca(cfg.feature_dim, cfg.token_width, cfg.heads, rng);
      m.cls_head = make_head(cfg.feature_dim, rng);
      break;
    case FusionMode::cross_attention:
      m.xattn_img2tab = make_cross_attn(cfg.token_width, cfg.token_width, cfg.heads, rng);
      m.xattn_tab2img = make_cross_attn(cfg.token_width, cfg.token_width, cfg.heads, rng);
      m.cls_head = make_head(cfg.feature_dim, rng);
      break;
    case FusionMode::late_fusion:
      m.img_head = make_head(cfg.feature_dim, rng);
      m.tab_head = make_head(cfg.feature_dim, rng);
      break;
    case FusionMode::image_only:
      m.cls_head = make_head(cfg.feature_dim, rng);
      break;
  }
  return m;
}

}  // namespace mmfuse
