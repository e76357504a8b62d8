#pragma once

// Point-supervised Bayesian loss evaluated on the density grid.

#include <span>
#include <vector>

#include "crowdfuse/data.hpp"
#include "crowdfuse/head.hpp"

namespace crowdfuse::loss {

enum class BackgroundHandling { none, total_count_fallback };

struct LossConfig {
  double sigma = 2.0;  // grid cells: 8 image pixels at output stride 4
  BackgroundHandling background = BackgroundHandling::total_count_fallback;

  /// sigma given in image pixels, converted to grid cells.
  static LossConfig from_image_sigma(double sigma_px, int stride = 4);
  /// Throws ConfigError unless sigma is finite and > 0.
  void validate() const;
};

/// A point in grid coordinates; cell (i, j) is centred at (j + 0.5, i + 0.5).
struct GridPoint {
  double x = 0.0;
  double y = 0.0;
};

std::vector<GridPoint> to_grid(std::span<const data::PointAnnotation> points, int stride = 4);

/// weights[n][i * width + j]: posterior of point n for cell (i, j). Every cell's
/// weights sum to 1. Throws ValidationError for an empty point set.
std::vector<std::vector<double>> posterior_weights(std::span<const GridPoint> points, int height, int width,
                                                   double sigma);

/// Sum over points of |1 - E[c_n]| with E[c_n] = sum of weight_n * density.
/// With no points: |sum density| under total_count_fallback, 0 otherwise.
/// Throws NumericError on a non-finite cell, ValidationError on a point outside the grid.
double bayesian_loss(std::span<const double> density, int height, int width, std::span<const GridPoint> points,
                     const LossConfig& config);
double bayesian_loss(const model::DensityMap& density, std::span<const GridPoint> points, const LossConfig& config);

/// Differentiable batch loss over a (B, h, w, 1) density: the mean of the per-sample losses.
nn::Var bayesian_loss(const nn::Var& density, const std::vector<std::vector<GridPoint>>& points,
                      const LossConfig& config);

}  // namespace crowdfuse::loss
