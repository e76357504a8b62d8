#pragma once

// Dataset bias audit: brightness statistics, brightness/count balance,
// annotation overlays and the capture-criteria checklist.

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "crowdfuse/data.hpp"

namespace crowdfuse::audit {

/// Mean of all R, G and B values. Throws ShapeError unless the image has 3 channels.
double brightness(const data::Image& rgb);

struct BrightnessRecord {
  std::string id;
  double brightness = 0.0;
  std::size_t count = 0;
};

struct LoadFailure {
  std::size_t index = 0;
  std::string id;
  std::string message;
};

struct BrightnessTable {
  std::vector<BrightnessRecord> records;  // manifest order
  std::vector<LoadFailure> failures;
};

/// Loads every sample; failures are recorded and skipped.
BrightnessTable brightness_count_table(const data::DatasetManifest& manifest);
BrightnessTable brightness_count_table(std::span<const data::CrowdSample> samples);

/// CSV with header `id,brightness,count`.
std::string to_csv(std::span<const BrightnessRecord> records);
void write_csv(std::span<const BrightnessRecord> records, const std::filesystem::path& path);
/// Scatter plot: brightness 0-255 on x, count auto-scaled on y.
data::Image render_scatter(std::span<const BrightnessRecord> records, int size = 512);

struct ImbalanceThresholds {
  double min_r = -0.3;
  double top_count_quantile = 0.9;   // "high count" samples: count >= this quantile
  double dark_brightness_quantile = 0.25;
};

struct CorrelationReport {
  std::optional<double> pearson_r;  // empty when brightness or count has no variance
  bool imbalance_flag = false;
  std::optional<double> top_count_mean_brightness;
  std::optional<double> brightness_threshold;

  std::string status() const { return pearson_r ? "ok" : "unknown"; }
};

/// Linear-interpolation quantile of unsorted values; q in [0, 1].
double quantile(std::vector<double> values, double q);
std::optional<double> pearson(std::span<const double> x, std::span<const double> y);
CorrelationReport correlation_report(std::span<const BrightnessRecord> records,
                                     const ImbalanceThresholds& thresholds = {});

/// floor(fraction * n) distinct indices (at least 1 when n >= 1), drawn without replacement.
/// Throws ConfigError unless 0 < fraction <= 1.
std::vector<std::size_t> sample_subset(std::size_t n, double fraction, std::uint64_t seed);

/// rgb | separator | thermal, with a yellow hollow square of side max(3, W / 64)
/// centred on every annotation in both panels.
data::Image compose_overlay(const data::CrowdSample& sample);
void render_overlay(const data::CrowdSample& sample, const std::filesystem::path& path);
constexpr int kOverlaySeparator = 2;

enum class Verdict { pass, fail, unknown, manual_review };
std::string to_string(Verdict verdict);

struct Criterion {
  std::string name;
  Verdict verdict = Verdict::unknown;
  std::string evidence;
};

struct TimeThresholds {
  int bins = 6;                  // four-hour bins
  double min_entropy = 0.9;      // normalised entropy of the bin histogram
  double max_dependence = 0.3;   // circular-linear correlation of count vs. time
};

/// Normalised Shannon entropy of capture times binned over 24 h.
double time_coverage_entropy(std::span<const double> hours, int bins);
/// Circular-linear correlation between counts and capture hours, in [0, 1].
std::optional<double> circular_linear_correlation(std::span<const double> counts, std::span<const double> hours);

std::vector<Criterion> criteria_report(std::span<const data::CrowdSample> samples, const CorrelationReport& balance,
                                       std::span<const std::filesystem::path> overlays,
                                       const TimeThresholds& thresholds = {});

struct AuditOptions {
  double fraction = 0.1;
  std::uint64_t seed = 0;
  ImbalanceThresholds imbalance;
  TimeThresholds time;
};

struct AuditReport {
  BrightnessTable table;
  CorrelationReport correlation;
  std::vector<Criterion> criteria;
  std::vector<std::filesystem::path> overlay_paths;  // relative to the output directory

  nlohmann::json to_json() const;
  std::string to_text() const;
};

/// Writes brightness.csv, brightness_scatter.png, overlays/, report.json and report.txt into out_dir.
AuditReport run_audit(const data::DatasetManifest& manifest, const AuditOptions& options,
                      const std::filesystem::path& out_dir);

}  // namespace crowdfuse::audit
