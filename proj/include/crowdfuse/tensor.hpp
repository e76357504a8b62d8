#pragma once

// Minimal reverse-mode automatic differentiation over dense double tensors.
//
// Layout is row-major with channels last: images and feature maps are
// (B, H, W, C), token sequences are (B, N, C) and share memory order with the
// corresponding (B, H, W, C) map when N = H * W.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace crowdfuse::nn {

using Shape = std::vector<int>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until touched by backward()
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward_fn;

  std::vector<double>& ensure_grad();
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Shape& shape() const { return node_->shape; }
  int dim(int i) const;
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const double> value() const { return node_->value; }
  std::span<double> mutable_value() { return node_->value; }
  std::span<const double> grad() const { return node_->grad; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void zero_grad();

  Node& node() const { return *node_; }
  const std::shared_ptr<Node>& ptr() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

/// Leaf that does not require gradients.
Var constant(Shape shape, std::vector<double> data);
Var zeros(Shape shape);
Var full(Shape shape, double value);
/// Leaf that accumulates gradients.
Var parameter(Shape shape, std::vector<double> data);

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

/// Builds an op node outside this file. `backward_fn` reads the node's grad and
/// accumulates into the parents' grads; it is dropped when no parent needs one.
Var custom_op(Shape shape, std::vector<double> value, std::vector<Var> parents,
              std::function<void(Node&)> backward_fn);

/// Backpropagates from a scalar root (seed 1) through the recorded graph.
void backward(const Var& root);

// Elementwise.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var relu(const Var& x);
Var gelu(const Var& x);
Var sigmoid(const Var& x);

// Structural.
Var reshape(const Var& x, Shape shape);
/// Concatenate along the last axis; all leading dims must agree.
Var concat_last(std::span<const Var> parts);
/// Channels [begin, end) of the last axis.
Var slice_last(const Var& x, int begin, int end);
/// Concatenate along axis 0.
Var concat_batch(std::span<const Var> parts);
/// Item b of axis 0, keeping a leading axis of size 1.
Var select_batch(const Var& x, int b);
/// Reflect-pad a (B, H, W, C) map on the bottom and right edges.
Var reflect_pad(const Var& x, int pad_bottom, int pad_right);
/// Keep the top-left (h, w) window of a (B, H, W, C) map.
Var crop(const Var& x, int h, int w);
/// Bilinear resize of a (B, H, W, C) map with half-pixel centres (no corner alignment).
Var resize_bilinear(const Var& x, int out_h, int out_w);

// Reductions.
Var sum(const Var& x);
/// Mean of a list of scalars.
Var mean_of(std::span<const Var> scalars);

// Layers.
/// x (..., in) times weight (in, out) plus bias (out).
Var linear(const Var& x, const Var& weight, const Var& bias);

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
  int dilation = 1;
};
/// x (B, H, W, Cin), weight (kh, kw, Cin, Cout), bias (Cout) with zero padding.
Var conv2d(const Var& x, const Var& weight, const Var& bias, Conv2dOptions opt);
/// Per-channel convolution: x (B, H, W, C), weight (kh, kw, C), bias (C).
Var depthwise_conv2d(const Var& x, const Var& weight, const Var& bias, Conv2dOptions opt);
/// Normalise over the last axis with affine gamma/beta of that width.
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps);
/// Multi-head scaled dot-product attention.
/// q (B, N, C), k and v (B, M, C), C divisible by heads; returns (B, N, C).
Var attention(const Var& q, const Var& k, const Var& v, int heads);

}  // namespace crowdfuse::nn
