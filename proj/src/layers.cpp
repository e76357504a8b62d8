#include "crowdfuse/layers.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include "crowdfuse/errors.hpp"

namespace crowdfuse::model {
namespace {

std::vector<double> truncated_normal(std::size_t n, double stddev, Rng& rng) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.truncated_normal(stddev);
  return v;
}

std::vector<double> normal(std::size_t n, double stddev, Rng& rng) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal() * stddev;
  return v;
}

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof value);
}

template <typename T>
T get(std::istream& in, const std::string& source) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof value);
  if (!in) throw IoError("truncated parameter data in " + source);
  return value;
}

constexpr char kMagic[8] = {'C', 'F', 'P', 'A', 'R', 'A', 'M', '1'};

}  // namespace

std::size_t count_scalars(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.var.size();
  return n;
}

std::uint64_t checksum(const ParamList& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : params)
    for (double v : p.var.value()) {
      unsigned char bytes[sizeof v];
      std::memcpy(bytes, &v, sizeof v);
      for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
      }
    }
  return h;
}

void zero_grads(const ParamList& params) {
  for (const auto& p : params) {
    nn::Var v = p.var;
    v.zero_grad();
  }
}

Linear::Linear(int in, int out, Rng& rng)
    : weight(nn::parameter({in, out}, truncated_normal(static_cast<std::size_t>(in) * out, 0.02, rng))),
      bias(nn::parameter({out}, std::vector<double>(out, 0.0))) {}

void Linear::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

Conv2d::Conv2d(int in, int out, int kernel, Rng& rng, nn::Conv2dOptions opt) : options(opt) {
  const double fan_out = static_cast<double>(kernel) * kernel * out;
  weight = nn::parameter({kernel, kernel, in, out},
                         normal(static_cast<std::size_t>(kernel) * kernel * in * out, std::sqrt(2.0 / fan_out), rng));
  bias = nn::parameter({out}, std::vector<double>(out, 0.0));
}

void Conv2d::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

DepthwiseConv2d::DepthwiseConv2d(int channels, int kernel, Rng& rng) : options{1, kernel / 2, 1} {
  const double fan_out = static_cast<double>(kernel) * kernel;
  weight = nn::parameter({kernel, kernel, channels},
                         normal(static_cast<std::size_t>(kernel) * kernel * channels, std::sqrt(2.0 / fan_out), rng));
  bias = nn::parameter({channels}, std::vector<double>(channels, 0.0));
}

void DepthwiseConv2d::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

LayerNorm::LayerNorm(int width, double eps_)
    : gamma(nn::parameter({width}, std::vector<double>(width, 1.0))),
      beta(nn::parameter({width}, std::vector<double>(width, 0.0))),
      eps(eps_) {}

void LayerNorm::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".gamma", gamma});
  out.push_back({prefix + ".beta", beta});
}

void write_parameters(const ParamList& params, std::ostream& out) {
  out.write(kMagic, sizeof kMagic);
  put<std::uint64_t>(out, params.size());
  for (const auto& p : params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.var.rank()));
    for (int d : p.var.shape()) put<std::int32_t>(out, d);
    out.write(reinterpret_cast<const char*>(p.var.value().data()),
              static_cast<std::streamsize>(p.var.size() * sizeof(double)));
  }
}

void save_parameters(const ParamList& params, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  write_parameters(params, out);
  if (!out) throw IoError("write failed for " + path.string());
}

void read_parameters(const ParamList& params, std::istream& in, const std::string& source) {
  char magic[sizeof kMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw IoError(source + " is not a parameter file");
  std::map<std::string, nn::Var> by_name;
  for (const auto& p : params) by_name.emplace(p.name, p.var);

  const auto n = get<std::uint64_t>(in, source);
  if (n != params.size())
    throw ConfigError(source + " holds " + std::to_string(n) + " tensors, model expects " +
                      std::to_string(params.size()));
  for (std::uint64_t i = 0; i < n; ++i) {
    std::string name(get<std::uint32_t>(in, source), '\0');
    in.read(name.data(), static_cast<std::streamsize>(name.size()));
    nn::Shape shape(get<std::uint32_t>(in, source));
    for (int& d : shape) d = get<std::int32_t>(in, source);
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ConfigError(source + ": unexpected tensor '" + name + "'");
    nn::Var target = it->second;
    if (target.shape() != shape)
      throw ConfigError(source + ": tensor '" + name + "' has shape " + nn::to_string(shape) + ", model expects " +
                        nn::to_string(target.shape()));
    auto dst = target.mutable_value();
    in.read(reinterpret_cast<char*>(dst.data()), static_cast<std::streamsize>(dst.size() * sizeof(double)));
    if (!in) throw IoError("truncated parameter data in " + source);
  }
}

void load_parameters(const ParamList& params, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  read_parameters(params, in, path.string());
}

}  // namespace crowdfuse::model
