#pragma once

// Hierarchical vision transformer encoder in the PVTv2 style: overlapping
// patch embeddings, spatial-reduction attention and a depthwise-conv FFN.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "crowdfuse/layers.hpp"

namespace crowdfuse::model {

struct StageConfig {
  int patch_size = 3;  // overlapping patch embedding kernel
  int stride = 2;      // downsampling relative to the previous stage
  int width = 32;
  int heads = 1;
  int sr_ratio = 1;  // key/value spatial reduction
  int depth = 2;
  int mlp_ratio = 4;

  bool operator==(const StageConfig&) const = default;
};

struct BackboneConfig {
  int in_channels = 3;
  std::vector<StageConfig> stages;

  /// 2 stages, widths 16/32, depths 2/2, heads 1/2, SR ratios 4/2.
  static BackboneConfig tiny(int in_channels = 3);
  /// PVTv2-B0: widths 32/64/160/256, heads 1/2/5/8, SR 8/4/2/1, MLP 8/8/4/4, depth 2 each.
  static BackboneConfig b0(int in_channels = 3);

  int stage_count() const { return static_cast<int>(stages.size()); }
  /// Stride of stage k (0-based) relative to the input: 4 * 2^k.
  int cumulative_stride(int k) const;
  int total_stride() const { return cumulative_stride(stage_count() - 1); }
  /// Smallest padded input side that leaves every reduced key map non-empty.
  int min_input_size() const;
  std::vector<int> widths() const;

  /// Throws ConfigError unless the stride schedule is 4, 8, 16, ... and widths are non-decreasing.
  void validate() const;

  bool operator==(const BackboneConfig&) const = default;
};

/// One map per stage, (B, H / stride_k, W / stride_k, width_k), finest first.
struct FeaturePyramid {
  std::vector<nn::Var> maps;

  std::size_t size() const { return maps.size(); }
  const nn::Var& operator[](std::size_t k) const { return maps[k]; }
};

struct InitPolicy {
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> weights;  // parameter file applied after random init
};

class SpatialReductionAttention {
 public:
  SpatialReductionAttention() = default;
  SpatialReductionAttention(int width, int heads, int sr_ratio, Rng& rng);
  /// tokens (B, H*W, C) laid out row-major over an H x W map.
  nn::Var operator()(const nn::Var& tokens, int height, int width) const;
  void collect(ParamList& out, const std::string& prefix) const;

 private:
  int heads_ = 1;
  int sr_ratio_ = 1;
  Linear query_, key_value_, proj_;
  Conv2d reduce_;
  LayerNorm reduce_norm_;
};

class MixFfn {
 public:
  MixFfn() = default;
  MixFfn(int width, int hidden, Rng& rng);
  nn::Var operator()(const nn::Var& tokens, int height, int width) const;
  void collect(ParamList& out, const std::string& prefix) const;

 private:
  Linear fc1_, fc2_;
  DepthwiseConv2d dwconv_;
};

class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(const StageConfig& cfg, Rng& rng);
  nn::Var operator()(const nn::Var& tokens, int height, int width) const;
  void collect(ParamList& out, const std::string& prefix) const;

 private:
  LayerNorm norm1_, norm2_;
  SpatialReductionAttention attn_;
  MixFfn ffn_;
};

class EncoderStage {
 public:
  EncoderStage() = default;
  EncoderStage(int in_channels, const StageConfig& cfg, Rng& rng);

  /// Patch embedding plus its LayerNorm: (B, H, W, Cin) -> tokens (B, H'*W', C).
  nn::Var embed(const nn::Var& map, int& out_h, int& out_w) const;
  /// Full stage: (B, H, W, Cin) -> (B, H', W', C).
  nn::Var operator()(const nn::Var& map) const;
  void collect(ParamList& out, const std::string& prefix) const;

  const Conv2d& patch_projection() const { return patch_; }

 private:
  StageConfig cfg_;
  Conv2d patch_;
  LayerNorm patch_norm_;
  std::vector<TransformerBlock> blocks_;
  LayerNorm out_norm_;
};

class Backbone {
 public:
  Backbone() = default;
  Backbone(BackboneConfig config, const InitPolicy& init);

  const BackboneConfig& config() const { return config_; }

  /// Reflect-pads (B, H, W, C) on the bottom/right to a multiple of the total
  /// stride and at least min_input_size(). Throws ShapeError on a channel
  /// mismatch or when H or W is below the total stride.
  nn::Var pad_input(const nn::Var& images) const;
  /// Runs stage k on the output of stage k - 1 (or on the padded input for k = 0).
  nn::Var run_stage(int k, const nn::Var& map) const;
  /// Pads, then runs every stage.
  FeaturePyramid encode(const nn::Var& images) const;

  const EncoderStage& stage(int k) const { return stages_.at(static_cast<std::size_t>(k)); }
  ParamList parameters(const std::string& prefix = "backbone") const;

 private:
  BackboneConfig config_;
  std::vector<EncoderStage> stages_;
};

Backbone build_backbone(const BackboneConfig& config, const InitPolicy& init);

}  // namespace crowdfuse::model
