#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "crowdfuse/data.hpp"

namespace crowdfuse::synth {

/// Probability that a person is drawn in each modality. A person drawn in
/// neither is drawn in the thermal image, so every annotation stays visible
/// somewhere.
struct ModalityVisibility {
  double rgb = 1.0;
  double thermal = 1.0;
};

struct SynthSpec {
  int width = 64;
  int height = 64;
  int count = 0;
  double brightness_target = 128.0;
  ModalityVisibility visibility;
  std::uint64_t seed = 0;
  std::optional<double> time_of_day;

  double blob_sigma = 1.5;
  double thermal_background = 40.0;
  double thermal_amplitude = 160.0;
  double noise = 0.0;  // uniform +/- amplitude on every channel
};

/// Largest count that fits the placement grid for these dimensions.
int capacity(const SynthSpec& spec);

/// Render one aligned pair. Throws ConfigError on invalid fields and
/// CapacityError when `count` exceeds capacity(spec).
data::CrowdSample generate_sample(const SynthSpec& spec);

/// Writes rgb/, thermal/, ann/ and manifest.txt under out_dir.
data::DatasetManifest generate_dataset(const std::vector<SynthSpec>& specs,
                                       const std::filesystem::path& out_dir);

// Presets.

/// Full cartesian grid of counts x brightness levels, with capture times spread
/// evenly over the day. Brightness and count are independent by construction.
std::vector<SynthSpec> grid_preset(const std::vector<int>& counts, const std::vector<double>& brightness,
                                   int size, std::uint64_t seed);
std::vector<SynthSpec> grid_preset(int size = 64, std::uint64_t seed = 0);

/// n samples where high counts occur only in dark scenes (and at night).
std::vector<SynthSpec> skewed_preset(int n, int size = 64, std::uint64_t seed = 0);

/// Small training set with counts 1..n at a fixed brightness.
std::vector<SynthSpec> overfit_preset(int n = 8, int size = 64, std::uint64_t seed = 0);

}  // namespace crowdfuse::synth
