#include "crowdfuse/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "crowdfuse/errors.hpp"
#include "crowdfuse/rng.hpp"

namespace crowdfuse::synth {
namespace fs = std::filesystem;

namespace {

constexpr int kCell = 4;  // placement grid pitch in pixels

int blob_radius(const SynthSpec& spec) { return static_cast<int>(std::ceil(2.0 * spec.blob_sigma)); }

void check(const SynthSpec& spec) {
  if (spec.width < 16 || spec.height < 16) throw ConfigError("synth: width and height must be >= 16");
  if (spec.count < 0) throw ConfigError("synth: count must be non-negative");
  if (!(spec.brightness_target >= 0.0 && spec.brightness_target <= 255.0))
    throw ConfigError("synth: brightness_target must lie in [0, 255]");
  auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!prob(spec.visibility.rgb) || !prob(spec.visibility.thermal))
    throw ConfigError("synth: visibility probabilities must lie in [0, 1]");
  if (!(spec.blob_sigma > 0.0)) throw ConfigError("synth: blob_sigma must be positive");
  if (spec.noise < 0.0) throw ConfigError("synth: noise must be non-negative");
  if (spec.time_of_day && !(*spec.time_of_day >= 0.0 && *spec.time_of_day < 24.0))
    throw ConfigError("synth: time_of_day must lie in [0, 24)");
}

std::uint8_t to_u8(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

}  // namespace

int capacity(const SynthSpec& spec) {
  const int margin = blob_radius(spec);
  const int cols = std::max(0, (spec.width - 2 * margin) / kCell);
  const int rows = std::max(0, (spec.height - 2 * margin) / kCell);
  return cols * rows;
}

data::CrowdSample generate_sample(const SynthSpec& spec) {
  check(spec);
  const int cap = capacity(spec);
  if (spec.count > cap)
    throw CapacityError("synth: " + std::to_string(spec.count) + " persons exceed capacity " +
                        std::to_string(cap) + " of a " + std::to_string(spec.width) + "x" +
                        std::to_string(spec.height) + " frame");

  Rng rng(spec.seed);
  Rng place_rng = rng.fork(1);
  Rng vis_rng = rng.fork(2);
  Rng noise_rng = rng.fork(3);

  const int W = spec.width, H = spec.height;
  const int radius = blob_radius(spec);
  const int cols = (W - 2 * radius) / kCell;

  struct Person {
    double x, y;
    bool in_rgb, in_thermal;
  };
  std::vector<Person> persons;
  for (std::size_t cell : sample_without_replacement(static_cast<std::size_t>(cap), spec.count, place_rng)) {
    const int cx = static_cast<int>(cell) % cols;
    const int cy = static_cast<int>(cell) / cols;
    Person p;
    p.x = radius + cx * kCell + place_rng.uniform(0.5, kCell - 0.5);
    p.y = radius + cy * kCell + place_rng.uniform(0.5, kCell - 0.5);
    p.in_rgb = vis_rng.bernoulli(spec.visibility.rgb);
    p.in_thermal = vis_rng.bernoulli(spec.visibility.thermal);
    if (!p.in_rgb && !p.in_thermal) p.in_thermal = true;
    persons.push_back(p);
  }

  // Person intensity fields, truncated at the blob radius.
  std::vector<double> rgb_field(static_cast<std::size_t>(W) * H, 0.0);
  std::vector<double> thermal_field(static_cast<std::size_t>(W) * H, 0.0);
  const double inv_two_var = 1.0 / (2.0 * spec.blob_sigma * spec.blob_sigma);
  for (const auto& p : persons) {
    const int x0 = static_cast<int>(std::floor(p.x)) - radius, y0 = static_cast<int>(std::floor(p.y)) - radius;
    for (int y = std::max(0, y0); y <= std::min(H - 1, y0 + 2 * radius + 1); ++y)
      for (int x = std::max(0, x0); x <= std::min(W - 1, x0 + 2 * radius + 1); ++x) {
        const double dx = x + 0.5 - p.x, dy = y + 0.5 - p.y;
        const double d2 = dx * dx + dy * dy;
        if (d2 > radius * radius) continue;
        const double g = std::exp(-d2 * inv_two_var);
        const std::size_t i = static_cast<std::size_t>(y) * W + x;
        if (p.in_rgb) rgb_field[i] = std::max(rgb_field[i], g);
        if (p.in_thermal) thermal_field[i] = std::max(thermal_field[i], g);
      }
  }

  // Optical: grey background at the target brightness. Persons shift chroma
  // by (+a, -a/2, -a/2), which leaves the channel mean unchanged, and the
  // amplitude is limited so no channel saturates.
  const double base = spec.brightness_target;
  const double noise = std::min({spec.noise, base, 255.0 - base});
  const double amp = std::max(0.0, std::min({90.0, 255.0 - base - noise, 2.0 * (base - noise)}));
  const double chroma[3] = {1.0, -0.5, -0.5};

  data::CrowdSample sample;
  sample.rgb = data::Image(H, W, 3);
  sample.thermal = data::Image(H, W, 1);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * W + x;
      for (int c = 0; c < 3; ++c) {
        const double n = noise > 0.0 ? noise_rng.uniform(-noise, noise) : 0.0;
        sample.rgb.at(y, x, c) = to_u8(base + n + amp * chroma[c] * rgb_field[i]);
      }
      const double tn = spec.noise > 0.0 ? noise_rng.uniform(-spec.noise, spec.noise) : 0.0;
      sample.thermal.at(y, x) =
          to_u8(spec.thermal_background + tn + spec.thermal_amplitude * thermal_field[i]);
    }

  for (const auto& p : persons) sample.points.push_back({p.x, p.y});
  sample.meta.source_id = "synth";
  sample.meta.time_of_day = spec.time_of_day;
  return sample;
}

data::DatasetManifest generate_dataset(const std::vector<SynthSpec>& specs, const fs::path& out_dir) {
  std::error_code ec;
  for (const char* sub : {"rgb", "thermal", "ann"}) {
    fs::create_directories(out_dir / sub, ec);
    if (ec) throw IoError("cannot create " + (out_dir / sub).string() + ": " + ec.message());
  }
  data::DatasetManifest manifest;
  manifest.root = out_dir;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "%05zu", i);
    const auto sample = generate_sample(specs[i]);
    data::ManifestEntry entry;
    entry.rgb = std::string("rgb/") + stem + ".png";
    entry.thermal = std::string("thermal/") + stem + ".png";
    entry.annotation = std::string("ann/") + stem + ".txt";
    entry.meta.id = std::string("s") + stem;
    entry.meta.source_id = sample.meta.source_id;
    entry.meta.time_of_day = sample.meta.time_of_day;
    data::write_image(sample.rgb, out_dir / entry.rgb);
    data::write_image(sample.thermal, out_dir / entry.thermal);
    data::write_annotations(sample.points, out_dir / entry.annotation);
    manifest.entries.push_back(std::move(entry));
  }
  data::write_manifest(manifest, out_dir / "manifest.txt");
  return manifest;
}

std::vector<SynthSpec> grid_preset(const std::vector<int>& counts, const std::vector<double>& brightness,
                                   int size, std::uint64_t seed) {
  std::vector<SynthSpec> specs;
  const std::size_t n = counts.size() * brightness.size();
  Rng rng(seed);
  for (int c : counts)
    for (double b : brightness) {
      SynthSpec s;
      s.width = s.height = size;
      s.count = c;
      s.brightness_target = b;
      s.seed = rng.next_u64();
      specs.push_back(s);
    }
  // Spread capture times so every count sees the whole day: time follows
  // the brightness index, shifted per count row.
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const std::size_t row = i / brightness.size(), col = i % brightness.size();
    const double slot = static_cast<double>((col * counts.size() + row) % n);
    specs[i].time_of_day = 24.0 * slot / static_cast<double>(n);
  }
  return specs;
}

std::vector<SynthSpec> grid_preset(int size, std::uint64_t seed) {
  return grid_preset({1, 2, 3, 4, 5, 6, 7, 8, 9, 10}, {20, 60, 100, 140, 180, 220}, size, seed);
}

std::vector<SynthSpec> skewed_preset(int n, int size, std::uint64_t seed) {
  std::vector<SynthSpec> specs;
  Rng rng(seed);
  const int max_count = 40;
  for (int i = 0; i < n; ++i) {
    const double t = n > 1 ? static_cast<double>(i) / (n - 1) : 0.0;
    SynthSpec s;
    s.width = s.height = size;
    s.count = 1 + static_cast<int>(std::lround(t * (max_count - 1)));
    s.brightness_target = std::clamp(230.0 - 210.0 * t + rng.uniform(-8.0, 8.0), 0.0, 255.0);
    // Crowded scenes are dark scenes at night.
    s.time_of_day = std::fmod(14.0 + 12.0 * t, 24.0);
    s.seed = rng.next_u64();
    specs.push_back(s);
  }
  return specs;
}

std::vector<SynthSpec> overfit_preset(int n, int size, std::uint64_t seed) {
  std::vector<SynthSpec> specs;
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    SynthSpec s;
    s.width = s.height = size;
    s.count = i + 1;
    s.brightness_target = 128.0;
    s.seed = rng.next_u64();
    specs.push_back(s);
  }
  return specs;
}

}  // namespace crowdfuse::synth
