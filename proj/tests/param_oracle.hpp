#pragma once

// Closed-form learnable-scalar counts, enumerated by hand from the layer
// definitions. Test-only oracle; the library counts by walking its tensors.

#include <cstddef>

#include "crowdfuse/fusion.hpp"

namespace crowdfuse::testing {

inline std::size_t conv_params(std::size_t k, std::size_t in, std::size_t out) { return k * k * in * out + out; }
inline std::size_t linear_params(std::size_t in, std::size_t out) { return in * out + out; }
inline std::size_t norm_params(std::size_t c) { return 2 * c; }

inline std::size_t stage_params(std::size_t in, const model::StageConfig& s) {
  const std::size_t C = s.width, hidden = C * s.mlp_ratio;
  std::size_t attn = linear_params(C, C) + linear_params(C, 2 * C) + linear_params(C, C);
  if (s.sr_ratio > 1) attn += conv_params(s.sr_ratio, C, C) + norm_params(C);
  const std::size_t ffn = linear_params(C, hidden) + (9 * hidden + hidden) + linear_params(hidden, C);
  const std::size_t block = 2 * norm_params(C) + attn + ffn;
  return conv_params(s.patch_size, in, C) + norm_params(C) + s.depth * block + norm_params(C);
}

inline std::size_t backbone_params(const model::BackboneConfig& cfg, std::size_t in_channels) {
  std::size_t total = 0, in = in_channels;
  for (const auto& s : cfg.stages) {
    total += stage_params(in, s);
    in = s.width;
  }
  return total;
}

inline std::size_t branches_params(const model::HeadConfig& h) {
  return h.dilation_rates.size() * conv_params(3, h.fused_width, h.branch_width);
}

inline std::size_t head_params(const model::HeadConfig& h) {
  return branches_params(h) + conv_params(1, h.feature_width(), 1);
}

inline std::size_t iadm_params(std::size_t C) {
  return 2 * conv_params(1, 2 * C, C) + 4 * conv_params(1, C, C);
}

inline std::size_t variant_params(const model::ModelVariant& v) {
  switch (v.kind) {
    case model::VariantKind::mono_rgb: return backbone_params(v.backbone, 3) + head_params(v.head);
    case model::VariantKind::mono_thermal: return backbone_params(v.backbone, 1) + head_params(v.head);
    case model::VariantKind::early:
      return backbone_params(v.backbone, v.early_six_channel ? 6 : 4) + head_params(v.head);
    case model::VariantKind::late:
      return backbone_params(v.backbone, 3) + backbone_params(v.backbone, 1) + 2 * branches_params(v.head) +
             conv_params(1, 2 * v.head.feature_width(), 1);
    case model::VariantKind::deep: {
      std::size_t total = backbone_params(v.backbone, 3) + backbone_params(v.backbone, 1) +
                          backbone_params(v.backbone, 4) + head_params(v.head);
      for (const auto& s : v.backbone.stages) total += iadm_params(s.width);
      return total;
    }
  }
  return 0;
}

}  // namespace crowdfuse::testing
