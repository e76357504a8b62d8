#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "crowdfuse/rng.hpp"
#include "crowdfuse/tensor.hpp"

namespace crowdfuse::model {

struct NamedParam {
  std::string name;
  nn::Var var;
};
using ParamList = std::vector<NamedParam>;

std::size_t count_scalars(const ParamList& params);
/// FNV-1a over the raw bytes of every parameter, in list order.
std::uint64_t checksum(const ParamList& params);
void zero_grads(const ParamList& params);

/// Fully connected layer over the last axis. Weights ~ truncated N(0, 0.02), bias 0.
struct Linear {
  nn::Var weight;  // (in, out)
  nn::Var bias;    // (out)

  Linear() = default;
  Linear(int in, int out, Rng& rng);
  nn::Var operator()(const nn::Var& x) const { return nn::linear(x, weight, bias); }
  void collect(ParamList& out, const std::string& prefix) const;
};

/// Dense 2-D convolution. Weights ~ N(0, sqrt(2 / fan_out)), bias 0.
struct Conv2d {
  nn::Var weight;  // (k, k, in, out)
  nn::Var bias;    // (out)
  nn::Conv2dOptions options;

  Conv2d() = default;
  Conv2d(int in, int out, int kernel, Rng& rng, nn::Conv2dOptions opt);
  nn::Var operator()(const nn::Var& x) const { return nn::conv2d(x, weight, bias, options); }
  void collect(ParamList& out, const std::string& prefix) const;
  int in_channels() const { return weight.dim(2); }
  int out_channels() const { return weight.dim(3); }
};

struct DepthwiseConv2d {
  nn::Var weight;  // (k, k, C)
  nn::Var bias;    // (C)
  nn::Conv2dOptions options;

  DepthwiseConv2d() = default;
  DepthwiseConv2d(int channels, int kernel, Rng& rng);
  nn::Var operator()(const nn::Var& x) const { return nn::depthwise_conv2d(x, weight, bias, options); }
  void collect(ParamList& out, const std::string& prefix) const;
};

struct LayerNorm {
  nn::Var gamma;
  nn::Var beta;
  double eps = 1e-6;

  LayerNorm() = default;
  LayerNorm(int width, double eps = 1e-6);
  nn::Var operator()(const nn::Var& x) const { return nn::layer_norm(x, gamma, beta, eps); }
  void collect(ParamList& out, const std::string& prefix) const;
};

/// Binary parameter file: "CFPARAM1", u64 count, then per tensor
/// u32 name length, name bytes, u32 rank, i32 dims, little-endian f64 values.
void save_parameters(const ParamList& params, const std::filesystem::path& path);
void write_parameters(const ParamList& params, std::ostream& out);
/// Copies values by name into `params`. Every name in `params` must be present
/// with an identical shape; extra tensors in the file are an error too.
void load_parameters(const ParamList& params, const std::filesystem::path& path);
void read_parameters(const ParamList& params, std::istream& in, const std::string& source);

}  // namespace crowdfuse::model
