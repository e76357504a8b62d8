#include "crowdfuse/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include "crowdfuse/errors.hpp"

namespace crowdfuse::nn {
namespace {

thread_local bool g_grad_enabled = true;

using NodePtr = std::shared_ptr<Node>;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

Var make_op(Shape shape, std::vector<double> value, std::vector<NodePtr> parents,
            std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  const bool track =
      g_grad_enabled &&
      std::any_of(parents.begin(), parents.end(), [](const NodePtr& p) { return p->requires_grad; });
  if (track) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return Var(std::move(node));
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + to_string(a.shape()) +
                                      " vs " + to_string(b.shape()));
}

void require_rank(const Var& x, int rank, const char* op) {
  require(x.rank() == rank, std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                                to_string(x.shape()));
}

int last_dim(const Var& x) { return x.shape().back(); }

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::string to_string(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

std::vector<double>& Node::ensure_grad() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

int Var::dim(int i) const {
  if (i < 0) i += rank();
  return node_->shape.at(static_cast<std::size_t>(i));
}

double Var::item() const {
  if (node_->value.size() != 1) throw ShapeError("item() on non-scalar " + to_string(shape()));
  return node_->value[0];
}

void Var::zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

Var constant(Shape shape, std::vector<double> data) {
  require(numel(shape) == data.size(), "constant: data size does not match " + to_string(shape));
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  return Var(std::move(node));
}

Var zeros(Shape shape) { return full(std::move(shape), 0.0); }

Var full(Shape shape, double value) {
  std::vector<double> data(numel(shape), value);
  return constant(std::move(shape), std::move(data));
}

Var parameter(Shape shape, std::vector<double> data) {
  Var v = constant(std::move(shape), std::move(data));
  v.node().requires_grad = true;
  return v;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Var custom_op(Shape shape, std::vector<double> value, std::vector<Var> parents,
              std::function<void(Node&)> backward_fn) {
  require(numel(shape) == value.size(), "custom_op: value size does not match " + to_string(shape));
  std::vector<NodePtr> nodes;
  for (const auto& p : parents) nodes.push_back(p.ptr());
  return make_op(std::move(shape), std::move(value), std::move(nodes), std::move(backward_fn));
}

void backward(const Var& root) {
  if (root.size() != 1) throw ShapeError("backward: root must be a scalar");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{&root.node(), 0}};
  visited.insert(&root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.push_back({parent, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node().ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
}

// ---------------------------------------------------------------------------
// Elementwise

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_op(a.shape(), std::move(out), {a.ptr(), b.ptr()}, [](Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return make_op(a.shape(), std::move(out), {a.ptr(), b.ptr()}, [](Node& self) {
    const double sign[2] = {1.0, -1.0};
    for (std::size_t k = 0; k < 2; ++k) {
      auto& p = self.parents[k];
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign[k] * self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_op(a.shape(), std::move(out), {a.ptr(), b.ptr()}, [](Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (pa->requires_grad) {
      auto& g = pa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
    }
  });
}

Var scale(const Var& a, double factor) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * factor;
  return make_op(a.shape(), std::move(out), {a.ptr()}, [factor](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}

Var relu(const Var& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] < 0.0 ? 0.0 : x.value()[i];  // NaN passes through
  return make_op(x.shape(), std::move(out), {x.ptr()}, [](Node& self) {
    auto& p = self.parents[0];
    auto& g = p->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (p->value[i] > 0.0) g[i] += self.grad[i];
  });
}

Var gelu(const Var& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.value()[i];
    out[i] = 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2));
  }
  return make_op(x.shape(), std::move(out), {x.ptr()}, [](Node& self) {
    auto& p = self.parents[0];
    auto& g = p->ensure_grad();
    const double inv_sqrt_2pi = 0.5 * M_2_SQRTPI * M_SQRT1_2;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = p->value[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      g[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

Var sigmoid(const Var& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-x.value()[i]));
  return make_op(x.shape(), std::move(out), {x.ptr()}, [](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = self.value[i];
      g[i] += self.grad[i] * s * (1.0 - s);
    }
  });
}

// ---------------------------------------------------------------------------
// Structural

Var reshape(const Var& x, Shape shape) {
  require(numel(shape) == x.size(),
          "reshape: " + to_string(x.shape()) + " -> " + to_string(shape) + " changes size");
  std::vector<double> out(x.value().begin(), x.value().end());
  return make_op(std::move(shape), std::move(out), {x.ptr()}, [](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Var concat_last(std::span<const Var> parts) {
  require(!parts.empty(), "concat_last: no inputs");
  Shape lead = parts[0].shape();
  lead.pop_back();
  const std::size_t rows = numel(lead);
  std::vector<int> widths;
  std::vector<NodePtr> parents;
  int total = 0;
  for (const Var& p : parts) {
    Shape pl = p.shape();
    pl.pop_back();
    require(pl == lead, "concat_last: leading shapes differ " + to_string(parts[0].shape()) +
                            " vs " + to_string(p.shape()));
    widths.push_back(last_dim(p));
    total += last_dim(p);
    parents.push_back(p.ptr());
  }
  std::vector<double> out(rows * static_cast<std::size_t>(total));
  int offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const int w = widths[k];
    auto src = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(r * w), w,
                  out.begin() + static_cast<std::ptrdiff_t>(r * total + offset));
    offset += w;
  }
  Shape shape = lead;
  shape.push_back(total);
  return make_op(std::move(shape), std::move(out), std::move(parents),
                 [rows, total, widths](Node& self) {
                   int off = 0;
                   for (std::size_t k = 0; k < widths.size(); ++k) {
                     const int w = widths[k];
                     auto& p = self.parents[k];
                     if (p->requires_grad) {
                       auto& g = p->ensure_grad();
                       for (std::size_t r = 0; r < rows; ++r)
                         for (int c = 0; c < w; ++c) g[r * w + c] += self.grad[r * total + off + c];
                     }
                     off += w;
                   }
                 });
}

Var slice_last(const Var& x, int begin, int end) {
  const int width = last_dim(x);
  require(0 <= begin && begin < end && end <= width, "slice_last: bad range");
  const std::size_t rows = x.size() / static_cast<std::size_t>(width);
  const int w = end - begin;
  std::vector<double> out(rows * static_cast<std::size_t>(w));
  for (std::size_t r = 0; r < rows; ++r)
    for (int c = 0; c < w; ++c) out[r * w + c] = x.value()[r * width + begin + c];
  Shape shape = x.shape();
  shape.back() = w;
  return make_op(std::move(shape), std::move(out), {x.ptr()}, [rows, width, begin, w](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r)
      for (int c = 0; c < w; ++c) g[r * width + begin + c] += self.grad[r * w + c];
  });
}

Var concat_batch(std::span<const Var> parts) {
  require(!parts.empty(), "concat_batch: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  int batch = 0;
  std::vector<NodePtr> parents;
  std::vector<double> out;
  for (const Var& p : parts) {
    require(Shape(p.shape().begin() + 1, p.shape().end()) == tail,
            "concat_batch: trailing shapes differ");
    batch += p.dim(0);
    out.insert(out.end(), p.value().begin(), p.value().end());
    parents.push_back(p.ptr());
  }
  Shape shape{batch};
  shape.insert(shape.end(), tail.begin(), tail.end());
  return make_op(std::move(shape), std::move(out), std::move(parents), [](Node& self) {
    std::size_t off = 0;
    for (auto& p : self.parents) {
      if (p->requires_grad) {
        auto& g = p->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[off + i];
      }
      off += p->value.size();
    }
  });
}

Var select_batch(const Var& x, int b) {
  require(b >= 0 && b < x.dim(0), "select_batch: index out of range");
  const std::size_t item = x.size() / static_cast<std::size_t>(x.dim(0));
  const std::size_t off = item * static_cast<std::size_t>(b);
  std::vector<double> out(x.value().begin() + static_cast<std::ptrdiff_t>(off),
                          x.value().begin() + static_cast<std::ptrdiff_t>(off + item));
  Shape shape = x.shape();
  shape[0] = 1;
  return make_op(std::move(shape), std::move(out), {x.ptr()}, [off](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[off + i] += self.grad[i];
  });
}

Var reflect_pad(const Var& x, int pad_bottom, int pad_right) {
  require_rank(x, 4, "reflect_pad");
  const int B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  require(pad_bottom >= 0 && pad_right >= 0 && pad_bottom < H && pad_right < W,
          "reflect_pad: padding must be smaller than the map");
  if (pad_bottom == 0 && pad_right == 0) return x;
  const int Ho = H + pad_bottom, Wo = W + pad_right;
  auto reflect = [](int i, int n) { return i < n ? i : 2 * (n - 1) - i; };
  std::vector<std::size_t> src_index(static_cast<std::size_t>(B) * Ho * Wo);
  for (int b = 0; b < B; ++b)
    for (int y = 0; y < Ho; ++y)
      for (int xx = 0; xx < Wo; ++xx)
        src_index[(static_cast<std::size_t>(b) * Ho + y) * Wo + xx] =
            (static_cast<std::size_t>(b) * H + reflect(y, H)) * W + reflect(xx, W);
  std::vector<double> out(src_index.size() * C);
  for (std::size_t p = 0; p < src_index.size(); ++p)
    for (int c = 0; c < C; ++c) out[p * C + c] = x.value()[src_index[p] * C + c];
  return make_op({B, Ho, Wo, C}, std::move(out), {x.ptr()},
                 [src_index = std::move(src_index), C](Node& self) {
                   auto& g = self.parents[0]->ensure_grad();
                   for (std::size_t p = 0; p < src_index.size(); ++p)
                     for (int c = 0; c < C; ++c) g[src_index[p] * C + c] += self.grad[p * C + c];
                 });
}

Var crop(const Var& x, int h, int w) {
  require_rank(x, 4, "crop");
  const int B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  require(h >= 1 && w >= 1 && h <= H && w <= W, "crop: window larger than map");
  if (h == H && w == W) return x;
  std::vector<double> out(static_cast<std::size_t>(B) * h * w * C);
  for (int b = 0; b < B; ++b)
    for (int y = 0; y < h; ++y)
      std::copy_n(x.value().begin() + static_cast<std::ptrdiff_t>(((static_cast<std::size_t>(b) * H + y) * W) * C),
                  static_cast<std::size_t>(w) * C,
                  out.begin() + static_cast<std::ptrdiff_t>(((static_cast<std::size_t>(b) * h + y) * w) * C));
  return make_op({B, h, w, C}, std::move(out), {x.ptr()}, [B, H, W, C, h, w](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (int b = 0; b < B; ++b)
      for (int y = 0; y < h; ++y)
        for (std::size_t i = 0; i < static_cast<std::size_t>(w) * C; ++i)
          g[((static_cast<std::size_t>(b) * H + y) * W) * C + i] +=
              self.grad[((static_cast<std::size_t>(b) * h + y) * w) * C + i];
  });
}

namespace {

struct Taps {
  std::vector<int> lo, hi;
  std::vector<double> frac;
};

// Half-pixel source coordinates, clamped at the low edge.
Taps bilinear_taps(int in, int out) {
  Taps t;
  const double ratio = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    int lo = static_cast<int>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const int hi = std::min(lo + 1, in - 1);
    t.lo.push_back(lo);
    t.hi.push_back(hi);
    t.frac.push_back(src - lo);
  }
  return t;
}

}  // namespace

Var resize_bilinear(const Var& x, int out_h, int out_w) {
  require_rank(x, 4, "resize_bilinear");
  const int B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  require(out_h >= 1 && out_w >= 1, "resize_bilinear: empty output");
  if (out_h == H && out_w == W) return x;
  const Taps ty = bilinear_taps(H, out_h);
  const Taps tx = bilinear_taps(W, out_w);
  std::vector<double> out(static_cast<std::size_t>(B) * out_h * out_w * C, 0.0);
  auto at = [H, W, C](int b, int y, int xx) {
    return ((static_cast<std::size_t>(b) * H + y) * W + xx) * C;
  };
  for (int b = 0; b < B; ++b)
    for (int y = 0; y < out_h; ++y)
      for (int xx = 0; xx < out_w; ++xx) {
        const double fy = ty.frac[y], fx = tx.frac[xx];
        const double w00 = (1 - fy) * (1 - fx), w01 = (1 - fy) * fx, w10 = fy * (1 - fx), w11 = fy * fx;
        const std::size_t i00 = at(b, ty.lo[y], tx.lo[xx]), i01 = at(b, ty.lo[y], tx.hi[xx]);
        const std::size_t i10 = at(b, ty.hi[y], tx.lo[xx]), i11 = at(b, ty.hi[y], tx.hi[xx]);
        double* dst = &out[((static_cast<std::size_t>(b) * out_h + y) * out_w + xx) * C];
        const auto v = x.value();
        for (int c = 0; c < C; ++c)
          dst[c] = w00 * v[i00 + c] + w01 * v[i01 + c] + w10 * v[i10 + c] + w11 * v[i11 + c];
      }
  return make_op({B, out_h, out_w, C}, std::move(out), {x.ptr()},
                 [=](Node& self) {
                   auto& g = self.parents[0]->ensure_grad();
                   for (int b = 0; b < B; ++b)
                     for (int y = 0; y < out_h; ++y)
                       for (int xx = 0; xx < out_w; ++xx) {
                         const double fy = ty.frac[y], fx = tx.frac[xx];
                         const double w[4] = {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx};
                         const std::size_t idx[4] = {at(b, ty.lo[y], tx.lo[xx]), at(b, ty.lo[y], tx.hi[xx]),
                                                     at(b, ty.hi[y], tx.lo[xx]), at(b, ty.hi[y], tx.hi[xx])};
                         const double* src =
                             &self.grad[((static_cast<std::size_t>(b) * out_h + y) * out_w + xx) * C];
                         for (int k = 0; k < 4; ++k)
                           for (int c = 0; c < C; ++c) g[idx[k] + c] += w[k] * src[c];
                       }
                 });
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(const Var& x) {
  const double total = std::accumulate(x.value().begin(), x.value().end(), 0.0);
  return make_op({1}, {total}, {x.ptr()}, [](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (double& gi : g) gi += self.grad[0];
  });
}

Var mean_of(std::span<const Var> scalars) {
  require(!scalars.empty(), "mean_of: no inputs");
  double total = 0.0;
  std::vector<NodePtr> parents;
  for (const Var& s : scalars) {
    total += s.item();
    parents.push_back(s.ptr());
  }
  const double inv = 1.0 / static_cast<double>(scalars.size());
  return make_op({1}, {total * inv}, std::move(parents), [inv](Node& self) {
    for (auto& p : self.parents)
      if (p->requires_grad) p->ensure_grad()[0] += inv * self.grad[0];
  });
}

// ---------------------------------------------------------------------------
// Layers

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require_rank(weight, 2, "linear weight");
  const int in = weight.dim(0), out = weight.dim(1);
  require(last_dim(x) == in, "linear: input width " + std::to_string(last_dim(x)) +
                                 " does not match weight " + to_string(weight.shape()));
  require(bias.size() == static_cast<std::size_t>(out), "linear: bias width mismatch");
  const auto rows = static_cast<Eigen::Index>(x.size() / in);
  std::vector<double> result(static_cast<std::size_t>(rows) * out);
  MatMap Y(result.data(), rows, out);
  Y.noalias() = ConstMatMap(x.value().data(), rows, in) * ConstMatMap(weight.value().data(), in, out);
  Y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.value().data(), out);
  Shape shape = x.shape();
  shape.back() = out;
  return make_op(std::move(shape), std::move(result), {x.ptr(), weight.ptr(), bias.ptr()},
                 [rows, in, out](Node& self) {
                   ConstMatMap dY(self.grad.data(), rows, out);
                   auto& px = self.parents[0];
                   auto& pw = self.parents[1];
                   auto& pb = self.parents[2];
                   if (px->requires_grad)
                     MatMap(px->ensure_grad().data(), rows, in).noalias() +=
                         dY * ConstMatMap(pw->value.data(), in, out).transpose();
                   if (pw->requires_grad)
                     MatMap(pw->ensure_grad().data(), in, out).noalias() +=
                         ConstMatMap(px->value.data(), rows, in).transpose() * dY;
                   if (pb->requires_grad)
                     Eigen::Map<Eigen::RowVectorXd>(pb->ensure_grad().data(), out) += dY.colwise().sum();
                 });
}

namespace {

struct ConvGeometry {
  int B, H, W, Cin, kh, kw, Cout, Ho, Wo;
  Conv2dOptions opt;

  // Source pixel for output (oy, ox) and kernel tap (ky, kx), or -1 when in padding.
  long source(int b, int oy, int ox, int ky, int kx) const {
    const int iy = oy * opt.stride - opt.padding + ky * opt.dilation;
    const int ix = ox * opt.stride - opt.padding + kx * opt.dilation;
    if (iy < 0 || iy >= H || ix < 0 || ix >= W) return -1;
    return (static_cast<long>(b) * H + iy) * W + ix;
  }
};

ConvGeometry conv_geometry(const Var& x, int kh, int kw, Conv2dOptions opt) {
  require_rank(x, 4, "conv2d input");
  require(opt.stride >= 1 && opt.dilation >= 1 && opt.padding >= 0, "conv2d: bad options");
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), kh, kw, 0, 0, 0, opt};
  g.Ho = (g.H + 2 * opt.padding - opt.dilation * (kh - 1) - 1) / opt.stride + 1;
  g.Wo = (g.W + 2 * opt.padding - opt.dilation * (kw - 1) - 1) / opt.stride + 1;
  require(g.Ho >= 1 && g.Wo >= 1, "conv2d: input " + to_string(x.shape()) + " too small for kernel");
  return g;
}

// Source row of every output pixel for one kernel tap.
std::vector<long> tap_sources(const ConvGeometry& g, int ky, int kx) {
  std::vector<long> src(static_cast<std::size_t>(g.B) * g.Ho * g.Wo);
  std::size_t r = 0;
  for (int b = 0; b < g.B; ++b)
    for (int oy = 0; oy < g.Ho; ++oy)
      for (int ox = 0; ox < g.Wo; ++ox) src[r++] = g.source(b, oy, ox, ky, kx);
  return src;
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, Conv2dOptions opt) {
  require_rank(weight, 4, "conv2d weight");
  ConvGeometry g = conv_geometry(x, weight.dim(0), weight.dim(1), opt);
  require(weight.dim(2) == g.Cin, "conv2d: input has " + std::to_string(g.Cin) +
                                      " channels, weight expects " + std::to_string(weight.dim(2)));
  g.Cout = weight.dim(3);
  require(bias.size() == static_cast<std::size_t>(g.Cout), "conv2d: bias width mismatch");
  const auto rows = static_cast<Eigen::Index>(g.B) * g.Ho * g.Wo;
  const std::size_t tap_size = static_cast<std::size_t>(g.Cin) * g.Cout;

  std::vector<double> result(static_cast<std::size_t>(rows) * g.Cout);
  MatMap Y(result.data(), rows, g.Cout);
  Y.rowwise() = Eigen::Map<const Eigen::RowVectorXd>(bias.value().data(), g.Cout);
  RowMat gathered(rows, g.Cin);
  const auto xv = x.value();
  for (int ky = 0; ky < g.kh; ++ky)
    for (int kx = 0; kx < g.kw; ++kx) {
      const auto src = tap_sources(g, ky, kx);
      for (Eigen::Index r = 0; r < rows; ++r) {
        if (src[r] < 0)
          gathered.row(r).setZero();
        else
          gathered.row(r) = Eigen::Map<const Eigen::RowVectorXd>(&xv[src[r] * g.Cin], g.Cin);
      }
      Y.noalias() += gathered * ConstMatMap(weight.value().data() + (ky * g.kw + kx) * tap_size, g.Cin, g.Cout);
    }

  return make_op({g.B, g.Ho, g.Wo, g.Cout}, std::move(result), {x.ptr(), weight.ptr(), bias.ptr()},
                 [g, rows, tap_size](Node& self) {
                   ConstMatMap dY(self.grad.data(), rows, g.Cout);
                   auto& px = self.parents[0];
                   auto& pw = self.parents[1];
                   auto& pb = self.parents[2];
                   if (pb->requires_grad)
                     Eigen::Map<Eigen::RowVectorXd>(pb->ensure_grad().data(), g.Cout) += dY.colwise().sum();
                   if (!px->requires_grad && !pw->requires_grad) return;
                   RowMat gathered(rows, g.Cin);
                   RowMat dgathered;
                   for (int ky = 0; ky < g.kh; ++ky)
                     for (int kx = 0; kx < g.kw; ++kx) {
                       const auto src = tap_sources(g, ky, kx);
                       const std::size_t woff = (ky * g.kw + kx) * tap_size;
                       if (pw->requires_grad) {
                         for (Eigen::Index r = 0; r < rows; ++r) {
                           if (src[r] < 0)
                             gathered.row(r).setZero();
                           else
                             gathered.row(r) =
                                 Eigen::Map<const Eigen::RowVectorXd>(&px->value[src[r] * g.Cin], g.Cin);
                         }
                         MatMap(pw->ensure_grad().data() + woff, g.Cin, g.Cout).noalias() +=
                             gathered.transpose() * dY;
                       }
                       if (px->requires_grad) {
                         dgathered.noalias() = dY * ConstMatMap(pw->value.data() + woff, g.Cin, g.Cout).transpose();
                         auto& gx = px->ensure_grad();
                         for (Eigen::Index r = 0; r < rows; ++r) {
                           if (src[r] < 0) continue;
                           Eigen::Map<Eigen::RowVectorXd>(&gx[src[r] * g.Cin], g.Cin) += dgathered.row(r);
                         }
                       }
                     }
                 });
}

Var depthwise_conv2d(const Var& x, const Var& weight, const Var& bias, Conv2dOptions opt) {
  require_rank(weight, 3, "depthwise weight");
  ConvGeometry g = conv_geometry(x, weight.dim(0), weight.dim(1), opt);
  require(weight.dim(2) == g.Cin && bias.size() == static_cast<std::size_t>(g.Cin),
          "depthwise_conv2d: channel mismatch");
  g.Cout = g.Cin;
  const int C = g.Cin;
  std::vector<double> result(static_cast<std::size_t>(g.B) * g.Ho * g.Wo * C);
  const auto xv = x.value();
  const auto wv = weight.value();
  std::size_t r = 0;
  for (int b = 0; b < g.B; ++b)
    for (int oy = 0; oy < g.Ho; ++oy)
      for (int ox = 0; ox < g.Wo; ++ox, ++r) {
        double* dst = &result[r * C];
        for (int c = 0; c < C; ++c) dst[c] = bias.value()[c];
        for (int ky = 0; ky < g.kh; ++ky)
          for (int kx = 0; kx < g.kw; ++kx) {
            const long s = g.source(b, oy, ox, ky, kx);
            if (s < 0) continue;
            const double* in = &xv[s * C];
            const double* w = &wv[(ky * g.kw + kx) * C];
            for (int c = 0; c < C; ++c) dst[c] += in[c] * w[c];
          }
      }
  return make_op({g.B, g.Ho, g.Wo, C}, std::move(result), {x.ptr(), weight.ptr(), bias.ptr()},
                 [g, C](Node& self) {
                   auto& px = self.parents[0];
                   auto& pw = self.parents[1];
                   auto& pb = self.parents[2];
                   std::vector<double>* gx = px->requires_grad ? &px->ensure_grad() : nullptr;
                   std::vector<double>* gw = pw->requires_grad ? &pw->ensure_grad() : nullptr;
                   std::vector<double>* gb = pb->requires_grad ? &pb->ensure_grad() : nullptr;
                   std::size_t r = 0;
                   for (int b = 0; b < g.B; ++b)
                     for (int oy = 0; oy < g.Ho; ++oy)
                       for (int ox = 0; ox < g.Wo; ++ox, ++r) {
                         const double* dy = &self.grad[r * C];
                         if (gb)
                           for (int c = 0; c < C; ++c) (*gb)[c] += dy[c];
                         for (int ky = 0; ky < g.kh; ++ky)
                           for (int kx = 0; kx < g.kw; ++kx) {
                             const long s = g.source(b, oy, ox, ky, kx);
                             if (s < 0) continue;
                             const std::size_t woff = (ky * g.kw + kx) * C;
                             for (int c = 0; c < C; ++c) {
                               if (gw) (*gw)[woff + c] += dy[c] * px->value[s * C + c];
                               if (gx) (*gx)[s * C + c] += dy[c] * pw->value[woff + c];
                             }
                           }
                       }
                 });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const int D = last_dim(x);
  require(gamma.size() == static_cast<std::size_t>(D) && beta.size() == static_cast<std::size_t>(D),
          "layer_norm: affine width mismatch");
  const std::size_t rows = x.size() / D;
  std::vector<double> out(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = &x.value()[r * D];
    double mean = 0.0;
    for (int c = 0; c < D; ++c) mean += in[c];
    mean /= D;
    double var = 0.0;
    for (int c = 0; c < D; ++c) var += (in[c] - mean) * (in[c] - mean);
    var /= D;
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (int c = 0; c < D; ++c) {
      xhat[r * D + c] = (in[c] - mean) * rstd[r];
      out[r * D + c] = gamma.value()[c] * xhat[r * D + c] + beta.value()[c];
    }
  }
  return make_op(x.shape(), std::move(out), {x.ptr(), gamma.ptr(), beta.ptr()},
                 [D, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
                   auto& px = self.parents[0];
                   auto& pg = self.parents[1];
                   auto& pb = self.parents[2];
                   std::vector<double> dxhat(D);
                   for (std::size_t r = 0; r < rows; ++r) {
                     const double* dy = &self.grad[r * D];
                     const double* xh = &xhat[r * D];
                     if (pg->requires_grad) {
                       auto& gg = pg->ensure_grad();
                       for (int c = 0; c < D; ++c) gg[c] += dy[c] * xh[c];
                     }
                     if (pb->requires_grad) {
                       auto& gb = pb->ensure_grad();
                       for (int c = 0; c < D; ++c) gb[c] += dy[c];
                     }
                     if (!px->requires_grad) continue;
                     double sum_d = 0.0, sum_dx = 0.0;
                     for (int c = 0; c < D; ++c) {
                       dxhat[c] = dy[c] * pg->value[c];
                       sum_d += dxhat[c];
                       sum_dx += dxhat[c] * xh[c];
                     }
                     auto& gx = px->ensure_grad();
                     for (int c = 0; c < D; ++c)
                       gx[r * D + c] += rstd[r] / D * (D * dxhat[c] - sum_d - xh[c] * sum_dx);
                   }
                 });
}

Var attention(const Var& q, const Var& k, const Var& v, int heads) {
  require_rank(q, 3, "attention q");
  require_rank(k, 3, "attention k");
  require_same_shape(k, v, "attention k/v");
  const int B = q.dim(0), N = q.dim(1), C = q.dim(2), M = k.dim(1);
  require(k.dim(0) == B && k.dim(2) == C, "attention: q/k batch or width mismatch");
  require(heads >= 1 && C % heads == 0, "attention: width not divisible by heads");
  const int d = C / heads;
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(d));

  std::vector<double> out(static_cast<std::size_t>(B) * N * C);
  // Attention probabilities per (batch, head), kept for the backward pass.
  std::vector<double> probs(static_cast<std::size_t>(B) * heads * N * M);
  for (int b = 0; b < B; ++b)
    for (int h = 0; h < heads; ++h) {
      const std::size_t qoff = static_cast<std::size_t>(b) * N * C + h * d;
      const std::size_t koff = static_cast<std::size_t>(b) * M * C + h * d;
      ConstStridedMap Q(q.value().data() + qoff, N, d, Eigen::OuterStride<>(C));
      ConstStridedMap K(k.value().data() + koff, M, d, Eigen::OuterStride<>(C));
      ConstStridedMap V(v.value().data() + koff, M, d, Eigen::OuterStride<>(C));
      MatMap P(probs.data() + (static_cast<std::size_t>(b) * heads + h) * N * M, N, M);
      P.noalias() = scale_factor * Q * K.transpose();
      for (int i = 0; i < N; ++i) {
        const double mx = P.row(i).maxCoeff();
        P.row(i) = (P.row(i).array() - mx).exp();
        P.row(i) /= P.row(i).sum();
      }
      StridedMap O(out.data() + qoff, N, d, Eigen::OuterStride<>(C));
      O.noalias() = P * V;
    }

  return make_op({B, N, C}, std::move(out), {q.ptr(), k.ptr(), v.ptr()},
                 [=, probs = std::move(probs)](Node& self) {
                   auto& pq = self.parents[0];
                   auto& pk = self.parents[1];
                   auto& pv = self.parents[2];
                   RowMat dP, dS;
                   for (int b = 0; b < B; ++b)
                     for (int h = 0; h < heads; ++h) {
                       const std::size_t qoff = static_cast<std::size_t>(b) * N * C + h * d;
                       const std::size_t koff = static_cast<std::size_t>(b) * M * C + h * d;
                       ConstStridedMap dO(self.grad.data() + qoff, N, d, Eigen::OuterStride<>(C));
                       ConstStridedMap Q(pq->value.data() + qoff, N, d, Eigen::OuterStride<>(C));
                       ConstStridedMap K(pk->value.data() + koff, M, d, Eigen::OuterStride<>(C));
                       ConstStridedMap V(pv->value.data() + koff, M, d, Eigen::OuterStride<>(C));
                       ConstMatMap P(probs.data() + (static_cast<std::size_t>(b) * heads + h) * N * M, N, M);
                       if (pv->requires_grad)
                         StridedMap(pv->ensure_grad().data() + koff, M, d, Eigen::OuterStride<>(C)).noalias() +=
                             P.transpose() * dO;
                       if (!pq->requires_grad && !pk->requires_grad) continue;
                       dP.noalias() = dO * V.transpose();
                       const Eigen::VectorXd row_dot = (dP.array() * P.array()).rowwise().sum();
                       dS = P.array() * (dP.colwise() - row_dot).array();
                       if (pq->requires_grad)
                         StridedMap(pq->ensure_grad().data() + qoff, N, d, Eigen::OuterStride<>(C)).noalias() +=
                             scale_factor * dS * K;
                       if (pk->requires_grad)
                         StridedMap(pk->ensure_grad().data() + koff, M, d, Eigen::OuterStride<>(C)).noalias() +=
                             scale_factor * dS.transpose() * Q;
                     }
                 });
}

}  // namespace crowdfuse::nn
