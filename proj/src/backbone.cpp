#include "crowdfuse/backbone.hpp"

#include <algorithm>

#include "crowdfuse/errors.hpp"

namespace crowdfuse::model {

BackboneConfig BackboneConfig::tiny(int in_channels) {
  BackboneConfig c;
  c.in_channels = in_channels;
  c.stages = {{7, 4, 16, 1, 4, 2, 4}, {3, 2, 32, 2, 2, 2, 4}};
  return c;
}

BackboneConfig BackboneConfig::b0(int in_channels) {
  BackboneConfig c;
  c.in_channels = in_channels;
  c.stages = {{7, 4, 32, 1, 8, 2, 8}, {3, 2, 64, 2, 4, 2, 8}, {3, 2, 160, 5, 2, 2, 4}, {3, 2, 256, 8, 1, 2, 4}};
  return c;
}

int BackboneConfig::cumulative_stride(int k) const {
  int s = 1;
  for (int i = 0; i <= k; ++i) s *= stages.at(static_cast<std::size_t>(i)).stride;
  return s;
}

int BackboneConfig::min_input_size() const {
  int need = total_stride();
  for (int k = 0; k < stage_count(); ++k) need = std::max(need, cumulative_stride(k) * stages[k].sr_ratio);
  const int ts = total_stride();
  return (need + ts - 1) / ts * ts;
}

std::vector<int> BackboneConfig::widths() const {
  std::vector<int> w;
  for (const auto& s : stages) w.push_back(s.width);
  return w;
}

void BackboneConfig::validate() const {
  if (in_channels < 1) throw ConfigError("backbone: in_channels must be positive");
  if (stages.size() < 2) throw ConfigError("backbone: at least 2 stages are required");
  for (std::size_t k = 0; k < stages.size(); ++k) {
    const auto& s = stages[k];
    const std::string where = "backbone stage " + std::to_string(k) + ": ";
    if (s.stride != (k == 0 ? 4 : 2)) throw ConfigError(where + "stride schedule must be 4, 2, 2, ...");
    if (s.patch_size < s.stride || s.patch_size % 2 == 0)
      throw ConfigError(where + "patch size must be odd and cover the stride");
    if (s.width < 1 || s.heads < 1 || s.width % s.heads != 0)
      throw ConfigError(where + "width must be a positive multiple of heads");
    if (s.sr_ratio < 1 || s.depth < 1 || s.mlp_ratio < 1)
      throw ConfigError(where + "sr_ratio, depth and mlp_ratio must be >= 1");
    if (k > 0 && s.width < stages[k - 1].width) throw ConfigError(where + "widths must be non-decreasing");
  }
}

// ---------------------------------------------------------------------------

SpatialReductionAttention::SpatialReductionAttention(int width, int heads, int sr_ratio, Rng& rng)
    : heads_(heads),
      sr_ratio_(sr_ratio),
      query_(width, width, rng),
      key_value_(width, 2 * width, rng),
      proj_(width, width, rng) {
  if (sr_ratio_ > 1) {
    reduce_ = Conv2d(width, width, sr_ratio_, rng, {sr_ratio_, 0, 1});
    reduce_norm_ = LayerNorm(width, 1e-5);
  }
}

nn::Var SpatialReductionAttention::operator()(const nn::Var& tokens, int height, int width) const {
  const int B = tokens.dim(0), C = tokens.dim(2);
  const nn::Var q = query_(tokens);
  nn::Var source = tokens;
  if (sr_ratio_ > 1) {
    if (height < sr_ratio_ || width < sr_ratio_)
      throw ShapeError("attention: " + std::to_string(height) + "x" + std::to_string(width) +
                       " map is smaller than the reduction ratio " + std::to_string(sr_ratio_));
    const nn::Var reduced = reduce_(nn::reshape(tokens, {B, height, width, C}));
    source = reduce_norm_(nn::reshape(reduced, {B, reduced.dim(1) * reduced.dim(2), C}));
  }
  const nn::Var kv = key_value_(source);
  const nn::Var out = nn::attention(q, nn::slice_last(kv, 0, C), nn::slice_last(kv, C, 2 * C), heads_);
  return proj_(out);
}

void SpatialReductionAttention::collect(ParamList& out, const std::string& prefix) const {
  query_.collect(out, prefix + ".q");
  key_value_.collect(out, prefix + ".kv");
  if (sr_ratio_ > 1) {
    reduce_.collect(out, prefix + ".sr");
    reduce_norm_.collect(out, prefix + ".sr_norm");
  }
  proj_.collect(out, prefix + ".proj");
}

MixFfn::MixFfn(int width, int hidden, Rng& rng)
    : fc1_(width, hidden, rng), fc2_(hidden, width, rng), dwconv_(hidden, 3, rng) {}

nn::Var MixFfn::operator()(const nn::Var& tokens, int height, int width) const {
  const int B = tokens.dim(0);
  nn::Var h = fc1_(tokens);
  const int hidden = h.dim(2);
  h = dwconv_(nn::reshape(h, {B, height, width, hidden}));
  h = nn::gelu(nn::reshape(h, {B, height * width, hidden}));
  return fc2_(h);
}

void MixFfn::collect(ParamList& out, const std::string& prefix) const {
  fc1_.collect(out, prefix + ".fc1");
  dwconv_.collect(out, prefix + ".dwconv");
  fc2_.collect(out, prefix + ".fc2");
}

TransformerBlock::TransformerBlock(const StageConfig& cfg, Rng& rng)
    : norm1_(cfg.width),
      norm2_(cfg.width),
      attn_(cfg.width, cfg.heads, cfg.sr_ratio, rng),
      ffn_(cfg.width, cfg.width * cfg.mlp_ratio, rng) {}

nn::Var TransformerBlock::operator()(const nn::Var& tokens, int height, int width) const {
  nn::Var x = nn::add(tokens, attn_(norm1_(tokens), height, width));
  return nn::add(x, ffn_(norm2_(x), height, width));
}

void TransformerBlock::collect(ParamList& out, const std::string& prefix) const {
  norm1_.collect(out, prefix + ".norm1");
  attn_.collect(out, prefix + ".attn");
  norm2_.collect(out, prefix + ".norm2");
  ffn_.collect(out, prefix + ".ffn");
}

EncoderStage::EncoderStage(int in_channels, const StageConfig& cfg, Rng& rng)
    : cfg_(cfg),
      patch_(in_channels, cfg.width, cfg.patch_size, rng, {cfg.stride, cfg.patch_size / 2, 1}),
      patch_norm_(cfg.width, 1e-5),
      out_norm_(cfg.width) {
  for (int i = 0; i < cfg.depth; ++i) blocks_.emplace_back(cfg, rng);
}

nn::Var EncoderStage::embed(const nn::Var& map, int& out_h, int& out_w) const {
  const nn::Var projected = patch_(map);
  out_h = projected.dim(1);
  out_w = projected.dim(2);
  return patch_norm_(nn::reshape(projected, {projected.dim(0), out_h * out_w, cfg_.width}));
}

nn::Var EncoderStage::operator()(const nn::Var& map) const {
  int h = 0, w = 0;
  nn::Var tokens = embed(map, h, w);
  for (const auto& block : blocks_) tokens = block(tokens, h, w);
  tokens = out_norm_(tokens);
  return nn::reshape(tokens, {map.dim(0), h, w, cfg_.width});
}

void EncoderStage::collect(ParamList& out, const std::string& prefix) const {
  patch_.collect(out, prefix + ".patch");
  patch_norm_.collect(out, prefix + ".patch_norm");
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(out, prefix + ".block" + std::to_string(i));
  out_norm_.collect(out, prefix + ".norm");
}

// ---------------------------------------------------------------------------

Backbone::Backbone(BackboneConfig config, const InitPolicy& init) : config_(std::move(config)) {
  config_.validate();
  Rng rng(init.seed);
  int in = config_.in_channels;
  for (std::size_t k = 0; k < config_.stages.size(); ++k) {
    Rng stage_rng = rng.fork(k + 1);
    stages_.emplace_back(in, config_.stages[k], stage_rng);
    in = config_.stages[k].width;
  }
  if (init.weights) load_parameters(parameters(), *init.weights);
}

nn::Var Backbone::pad_input(const nn::Var& images) const {
  if (images.rank() != 4) throw ShapeError("backbone: expected (B, H, W, C) input, got " + nn::to_string(images.shape()));
  if (images.dim(3) != config_.in_channels)
    throw ShapeError("backbone: input has " + std::to_string(images.dim(3)) + " channels, expected " +
                     std::to_string(config_.in_channels));
  const int H = images.dim(1), W = images.dim(2);
  const int ts = config_.total_stride();
  if (H < ts || W < ts)
    throw ShapeError("backbone: input " + std::to_string(H) + "x" + std::to_string(W) +
                     " is smaller than the total stride " + std::to_string(ts));
  auto target = [&](int n) { return std::max((n + ts - 1) / ts * ts, config_.min_input_size()); };
  const int pad_h = target(H) - H, pad_w = target(W) - W;
  if (pad_h >= H || pad_w >= W)
    throw ShapeError("backbone: input " + std::to_string(H) + "x" + std::to_string(W) +
                     " is too small to reflect-pad to " + std::to_string(target(H)) + "x" + std::to_string(target(W)));
  return nn::reflect_pad(images, pad_h, pad_w);
}

nn::Var Backbone::run_stage(int k, const nn::Var& map) const { return stage(k)(map); }

FeaturePyramid Backbone::encode(const nn::Var& images) const {
  FeaturePyramid pyramid;
  nn::Var x = pad_input(images);
  for (int k = 0; k < config_.stage_count(); ++k) {
    x = run_stage(k, x);
    pyramid.maps.push_back(x);
  }
  return pyramid;
}

ParamList Backbone::parameters(const std::string& prefix) const {
  ParamList out;
  for (std::size_t k = 0; k < stages_.size(); ++k) stages_[k].collect(out, prefix + ".stage" + std::to_string(k));
  return out;
}

Backbone build_backbone(const BackboneConfig& config, const InitPolicy& init) { return Backbone(config, init); }

}  // namespace crowdfuse::model
