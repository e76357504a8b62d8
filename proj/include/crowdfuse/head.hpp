#pragma once

#include <vector>

#include "crowdfuse/backbone.hpp"

namespace crowdfuse::model {

/// Non-negative density grid at output stride `stride`; count() is its sum.
class DensityMap {
 public:
  DensityMap() = default;
  /// Throws ValidationError on a negative or non-finite cell.
  DensityMap(int height, int width, std::vector<double> cells, int stride = 4);

  int height() const { return height_; }
  int width() const { return width_; }
  int stride() const { return stride_; }
  double at(int y, int x) const { return cells_[static_cast<std::size_t>(y) * width_ + x]; }
  const std::vector<double>& cells() const { return cells_; }
  double count() const;

 private:
  int height_ = 0;
  int width_ = 0;
  int stride_ = 4;
  std::vector<double> cells_;
};

/// Splits a (B, h, w, 1) density tensor into per-sample maps.
std::vector<DensityMap> to_density_maps(const nn::Var& density, int stride = 4);

struct HeadConfig {
  int fused_width = 0;  // channels after aggregation, the sum of stage widths
  int branch_width = 16;
  std::vector<int> dilation_rates{1, 2, 3};
  int output_stride = 4;

  static HeadConfig tiny(const BackboneConfig& backbone);
  static HeadConfig b0(const BackboneConfig& backbone);

  /// Width of the concatenated branch features fed to the final projection.
  int feature_width() const { return branch_width * static_cast<int>(dilation_rates.size()); }
  void validate() const;

  bool operator==(const HeadConfig&) const = default;
};

/// Resizes every stage to the stage-1 grid (bilinear) and concatenates channels.
nn::Var aggregate(const FeaturePyramid& pyramid);

/// Parallel 3x3 dilated convolutions, each followed by ReLU, concatenated.
class DilatedBranches {
 public:
  DilatedBranches() = default;
  DilatedBranches(const HeadConfig& config, Rng& rng);
  nn::Var operator()(const nn::Var& fused) const;
  void collect(ParamList& out, const std::string& prefix) const;

 private:
  std::vector<Conv2d> branches_;
};

/// 1x1 projection to one channel followed by ReLU.
class DensityProjection {
 public:
  DensityProjection() = default;
  DensityProjection(int in_width, Rng& rng);
  nn::Var operator()(const nn::Var& features) const;
  void collect(ParamList& out, const std::string& prefix) const;
  const Conv2d& conv() const { return conv_; }

 private:
  Conv2d conv_;
};

class RegressionHead {
 public:
  RegressionHead() = default;
  RegressionHead(const HeadConfig& config, Rng& rng);

  const HeadConfig& config() const { return config_; }
  nn::Var features(const nn::Var& fused) const { return branches_(fused); }
  /// (B, h, w, fused_width) -> (B, h, w, 1), every cell >= 0.
  nn::Var operator()(const nn::Var& fused) const { return projection_(branches_(fused)); }
  void collect(ParamList& out, const std::string& prefix) const;

  const DilatedBranches& branches() const { return branches_; }
  const DensityProjection& projection() const { return projection_; }

 private:
  HeadConfig config_;
  DilatedBranches branches_;
  DensityProjection projection_;
};

/// Sum of the density cells.
double predict_count(const DensityMap& density);

}  // namespace crowdfuse::model
