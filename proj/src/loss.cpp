#include "crowdfuse/loss.hpp"

#include <algorithm>
#include <cmath>

#include "crowdfuse/errors.hpp"

namespace crowdfuse::loss {
namespace {

void check_points(std::span<const GridPoint> points, int height, int width) {
  for (const auto& p : points)
    if (!(p.x >= 0.0 && p.x <= width && p.y >= 0.0 && p.y <= height))
      throw ValidationError("point (" + std::to_string(p.x) + ", " + std::to_string(p.y) + ") outside the " +
                            std::to_string(height) + "x" + std::to_string(width) + " grid");
}

void check_finite(std::span<const double> density) {
  for (std::size_t i = 0; i < density.size(); ++i)
    if (!std::isfinite(density[i])) throw NumericError("non-finite density at cell " + std::to_string(i));
}

// Per-point expectations and the gradient d loss / d density.
double evaluate(std::span<const double> density, int height, int width, std::span<const GridPoint> points,
                const LossConfig& config, std::vector<double>* grad) {
  check_finite(density);
  if (grad) grad->assign(density.size(), 0.0);
  if (points.empty()) {
    if (config.background == BackgroundHandling::none) return 0.0;
    double total = 0.0;
    for (double d : density) total += d;
    if (grad) std::fill(grad->begin(), grad->end(), total > 0 ? 1.0 : (total < 0 ? -1.0 : 0.0));
    return std::abs(total);
  }
  const auto weights = posterior_weights(points, height, width, config.sigma);
  double loss = 0.0;
  for (const auto& w : weights) {
    double expected = 0.0;
    for (std::size_t c = 0; c < w.size(); ++c) expected += w[c] * density[c];
    const double residual = 1.0 - expected;
    loss += std::abs(residual);
    if (grad && residual != 0.0) {
      const double s = residual > 0 ? -1.0 : 1.0;
      for (std::size_t c = 0; c < w.size(); ++c) (*grad)[c] += s * w[c];
    }
  }
  return loss;
}

}  // namespace

LossConfig LossConfig::from_image_sigma(double sigma_px, int stride) {
  LossConfig c;
  c.sigma = sigma_px / stride;
  return c;
}

void LossConfig::validate() const {
  if (!(std::isfinite(sigma) && sigma > 0.0)) throw ConfigError("loss sigma must be > 0, got " + std::to_string(sigma));
}

std::vector<GridPoint> to_grid(std::span<const data::PointAnnotation> points, int stride) {
  std::vector<GridPoint> out;
  out.reserve(points.size());
  for (const auto& p : points) out.push_back({p.x / stride, p.y / stride});
  return out;
}

std::vector<std::vector<double>> posterior_weights(std::span<const GridPoint> points, int height, int width,
                                                   double sigma) {
  if (points.empty()) throw ValidationError("posterior_weights: at least one point is required");
  if (!(sigma > 0.0)) throw ConfigError("posterior_weights: sigma must be > 0");
  const std::size_t n = points.size();
  std::vector<std::vector<double>> weights(n, std::vector<double>(static_cast<std::size_t>(height) * width));
  std::vector<double> logits(n);
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (int i = 0; i < height; ++i)
    for (int j = 0; j < width; ++j) {
      const double cx = j + 0.5, cy = i + 0.5;
      double top = -INFINITY;
      for (std::size_t k = 0; k < n; ++k) {
        const double dx = cx - points[k].x, dy = cy - points[k].y;
        logits[k] = -(dx * dx + dy * dy) * inv;
        top = std::max(top, logits[k]);
      }
      double z = 0.0;
      for (auto& l : logits) z += (l = std::exp(l - top));
      const std::size_t cell = static_cast<std::size_t>(i) * width + j;
      for (std::size_t k = 0; k < n; ++k) weights[k][cell] = logits[k] / z;
    }
  return weights;
}

double bayesian_loss(std::span<const double> density, int height, int width, std::span<const GridPoint> points,
                     const LossConfig& config) {
  config.validate();
  if (density.size() != static_cast<std::size_t>(height) * width)
    throw ShapeError("bayesian_loss: density size does not match the grid");
  check_points(points, height, width);
  return evaluate(density, height, width, points, config, nullptr);
}

double bayesian_loss(const model::DensityMap& density, std::span<const GridPoint> points, const LossConfig& config) {
  return bayesian_loss(density.cells(), density.height(), density.width(), points, config);
}

nn::Var bayesian_loss(const nn::Var& density, const std::vector<std::vector<GridPoint>>& points,
                      const LossConfig& config) {
  config.validate();
  if (density.rank() != 4 || density.dim(3) != 1)
    throw ShapeError("bayesian_loss: expected (B, h, w, 1), got " + nn::to_string(density.shape()));
  const int B = density.dim(0), h = density.dim(1), w = density.dim(2);
  if (static_cast<int>(points.size()) != B)
    throw ShapeError("bayesian_loss: " + std::to_string(points.size()) + " point sets for a batch of " +
                     std::to_string(B));
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const auto values = density.value();
  auto grad = std::make_shared<std::vector<double>>(values.size());
  double total = 0.0;
  std::vector<double> g;
  for (int b = 0; b < B; ++b) {
    check_points(points[b], h, w);
    total += evaluate(values.subspan(b * plane, plane), h, w, points[b], config, &g);
    std::copy(g.begin(), g.end(), grad->begin() + static_cast<std::ptrdiff_t>(b * plane));
  }
  const double scale = 1.0 / B;
  return nn::custom_op({1}, {total * scale}, {density}, [grad, scale](nn::Node& self) {
    auto& dst = self.parents[0]->ensure_grad();
    const double up = self.grad[0] * scale;
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += up * (*grad)[i];
  });
}

}  // namespace crowdfuse::loss
