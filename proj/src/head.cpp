#include "crowdfuse/head.hpp"

#include <cmath>
#include <numeric>

#include "crowdfuse/errors.hpp"

namespace crowdfuse::model {

DensityMap::DensityMap(int height, int width, std::vector<double> cells, int stride)
    : height_(height), width_(width), stride_(stride), cells_(std::move(cells)) {
  if (cells_.size() != static_cast<std::size_t>(height) * width)
    throw ValidationError("density map: cell count does not match " + std::to_string(height) + "x" +
                          std::to_string(width));
  for (double v : cells_)
    if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError("density map: cells must be finite and >= 0");
}

double DensityMap::count() const { return std::accumulate(cells_.begin(), cells_.end(), 0.0); }

double predict_count(const DensityMap& density) { return density.count(); }

std::vector<DensityMap> to_density_maps(const nn::Var& density, int stride) {
  if (density.rank() != 4 || density.dim(3) != 1)
    throw ShapeError("density: expected (B, h, w, 1), got " + nn::to_string(density.shape()));
  const int B = density.dim(0), h = density.dim(1), w = density.dim(2);
  const std::size_t item = static_cast<std::size_t>(h) * w;
  std::vector<DensityMap> maps;
  for (int b = 0; b < B; ++b) {
    const auto begin = density.value().begin() + static_cast<std::ptrdiff_t>(b * item);
    maps.emplace_back(h, w, std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(item)), stride);
  }
  return maps;
}

HeadConfig HeadConfig::tiny(const BackboneConfig& backbone) {
  HeadConfig c;
  for (int w : backbone.widths()) c.fused_width += w;
  c.branch_width = 16;
  return c;
}

HeadConfig HeadConfig::b0(const BackboneConfig& backbone) {
  HeadConfig c;
  for (int w : backbone.widths()) c.fused_width += w;
  c.branch_width = 128;
  return c;
}

void HeadConfig::validate() const {
  if (fused_width < 1 || branch_width < 1) throw ConfigError("head: widths must be positive");
  if (dilation_rates.empty()) throw ConfigError("head: at least one dilation rate is required");
  for (int d : dilation_rates)
    if (d < 1) throw ConfigError("head: dilation rates must be >= 1");
  if (output_stride != 4) throw ConfigError("head: output stride must be 4 (stage-1 resolution)");
}

nn::Var aggregate(const FeaturePyramid& pyramid) {
  if (pyramid.maps.empty()) throw ShapeError("aggregate: empty pyramid");
  const int h = pyramid[0].dim(1), w = pyramid[0].dim(2);
  std::vector<nn::Var> resized;
  for (const auto& map : pyramid.maps) {
    if (map.rank() != 4 || map.dim(0) != pyramid[0].dim(0))
      throw ShapeError("aggregate: stage maps must be (B, H, W, C) with a common batch");
    resized.push_back(nn::resize_bilinear(map, h, w));
  }
  if (resized.size() == 1) return resized.front();
  return nn::concat_last(resized);
}

DilatedBranches::DilatedBranches(const HeadConfig& config, Rng& rng) {
  for (int d : config.dilation_rates)
    branches_.emplace_back(config.fused_width, config.branch_width, 3, rng, nn::Conv2dOptions{1, d, d});
}

nn::Var DilatedBranches::operator()(const nn::Var& fused) const {
  std::vector<nn::Var> outs;
  for (const auto& conv : branches_) outs.push_back(nn::relu(conv(fused)));
  return outs.size() == 1 ? outs.front() : nn::concat_last(outs);
}

void DilatedBranches::collect(ParamList& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < branches_.size(); ++i) branches_[i].collect(out, prefix + ".branch" + std::to_string(i));
}

DensityProjection::DensityProjection(int in_width, Rng& rng) : conv_(in_width, 1, 1, rng, {}) {}

nn::Var DensityProjection::operator()(const nn::Var& features) const { return nn::relu(conv_(features)); }

void DensityProjection::collect(ParamList& out, const std::string& prefix) const { conv_.collect(out, prefix); }

RegressionHead::RegressionHead(const HeadConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  branches_ = DilatedBranches(config_, rng);
  projection_ = DensityProjection(config_.feature_width(), rng);
}

void RegressionHead::collect(ParamList& out, const std::string& prefix) const {
  branches_.collect(out, prefix);
  projection_.collect(out, prefix + ".proj");
}

}  // namespace crowdfuse::model
