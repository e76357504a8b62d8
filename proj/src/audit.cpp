#include "crowdfuse/audit.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include <opencv2/imgproc.hpp>

#include "crowdfuse/errors.hpp"
#include "crowdfuse/rng.hpp"

namespace crowdfuse::audit {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string format(double v, int digits = 6) {
  std::ostringstream os;
  os.precision(digits);
  os << v;
  return os.str();
}

std::string safe_name(const std::string& id) {
  std::string out;
  for (char c : id) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.') ? c : '_';
  return out.empty() ? "sample" : out;
}

void draw_square(data::Image& img, int x_offset, double cx, double cy, int side, int panel_w) {
  static constexpr std::uint8_t kYellow[3] = {255, 255, 0};
  const int x0 = static_cast<int>(std::lround(cx)) - side / 2;
  const int y0 = static_cast<int>(std::lround(cy)) - side / 2;
  const int x1 = x0 + side - 1, y1 = y0 + side - 1;
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      if (y != y0 && y != y1 && x != x0 && x != x1) continue;
      if (y < 0 || y >= img.height || x < 0 || x >= panel_w) continue;
      for (int c = 0; c < 3; ++c) img.at(y, x_offset + x, c) = kYellow[c];
    }
}

BrightnessRecord record_of(const data::CrowdSample& s) { return {s.meta.id, brightness(s.rgb), s.count()}; }

}  // namespace

double brightness(const data::Image& rgb) {
  if (rgb.channels != 3) throw ShapeError("brightness: expected 3 channels, got " + std::to_string(rgb.channels));
  if (rgb.height < 1 || rgb.width < 1) throw ShapeError("brightness: empty image");
  std::uint64_t sum = 0;
  for (auto v : rgb.pixels) sum += v;
  return static_cast<double>(sum) / (3.0 * rgb.width * rgb.height);
}

BrightnessTable brightness_count_table(const data::DatasetManifest& manifest) {
  BrightnessTable table;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    try {
      table.records.push_back(record_of(data::load_sample(manifest, i)));
    } catch (const Error& e) {
      table.failures.push_back({i, data::sample_id(manifest.entries[i]), e.what()});
    }
  }
  return table;
}

BrightnessTable brightness_count_table(std::span<const data::CrowdSample> samples) {
  BrightnessTable table;
  for (const auto& s : samples) table.records.push_back(record_of(s));
  return table;
}

std::string to_csv(std::span<const BrightnessRecord> records) {
  std::string out = "id,brightness,count\n";
  char buf[64];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, "%.6f", r.brightness);
    out += r.id + "," + buf + "," + std::to_string(r.count) + "\n";
  }
  return out;
}

void write_csv(std::span<const BrightnessRecord> records, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << to_csv(records);
  if (!out) throw IoError("cannot write " + path.string());
}

data::Image render_scatter(std::span<const BrightnessRecord> records, int size) {
  const int margin = 48;
  cv::Mat canvas(size, size, CV_8UC3, cv::Scalar(255, 255, 255));
  const int x0 = margin, y0 = size - margin, x1 = size - 16, y1 = 16;
  std::size_t max_count = 1;
  for (const auto& r : records) max_count = std::max(max_count, r.count);
  const cv::Scalar black(0, 0, 0), grey(200, 200, 200), blue(40, 90, 200);
  for (int b = 0; b <= 255; b += 51) {
    const int x = x0 + (x1 - x0) * b / 255;
    cv::line(canvas, {x, y0}, {x, y1}, grey);
    cv::putText(canvas, std::to_string(b), {x - 10, y0 + 18}, cv::FONT_HERSHEY_PLAIN, 1.0, black);
  }
  for (int k = 0; k <= 4; ++k) {
    const int y = y0 - (y0 - y1) * k / 4;
    cv::line(canvas, {x0, y}, {x1, y}, grey);
    cv::putText(canvas, format(static_cast<double>(max_count) * k / 4, 3), {4, y + 5}, cv::FONT_HERSHEY_PLAIN, 1.0,
                black);
  }
  cv::line(canvas, {x0, y0}, {x1, y0}, black);
  cv::line(canvas, {x0, y0}, {x0, y1}, black);
  cv::putText(canvas, "brightness", {size / 2 - 40, size - 8}, cv::FONT_HERSHEY_PLAIN, 1.0, black);
  cv::putText(canvas, "count", {x0 + 6, 12}, cv::FONT_HERSHEY_PLAIN, 1.0, black);
  for (const auto& r : records) {
    const int x = x0 + static_cast<int>(std::lround((x1 - x0) * r.brightness / 255.0));
    const int y = y0 - static_cast<int>(std::lround((y0 - y1) * static_cast<double>(r.count) / max_count));
    cv::circle(canvas, {x, y}, 3, blue, cv::FILLED);
  }
  data::Image img(size, size, 3);
  std::memcpy(img.pixels.data(), canvas.data, img.pixels.size());
  return img;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw ValidationError("quantile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
  const std::size_t n = x.size();
  if (n < 2 || y.size() != n) return std::nullopt;
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 1e-12 * n || syy <= 1e-12 * n) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

CorrelationReport correlation_report(std::span<const BrightnessRecord> records,
                                     const ImbalanceThresholds& thresholds) {
  CorrelationReport report;
  std::vector<double> b, c;
  for (const auto& r : records) {
    b.push_back(r.brightness);
    c.push_back(static_cast<double>(r.count));
  }
  report.pearson_r = pearson(b, c);
  if (!report.pearson_r) return report;

  const double count_cut = quantile(c, thresholds.top_count_quantile);
  double sum = 0;
  int n = 0;
  for (std::size_t i = 0; i < c.size(); ++i)
    if (c[i] >= count_cut) {
      sum += b[i];
      ++n;
    }
  report.top_count_mean_brightness = sum / n;
  report.brightness_threshold = quantile(b, thresholds.dark_brightness_quantile);
  report.imbalance_flag =
      *report.pearson_r < thresholds.min_r || *report.top_count_mean_brightness < *report.brightness_threshold;
  return report;
}

std::vector<std::size_t> sample_subset(std::size_t n, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("fraction must lie in (0, 1]");
  if (n == 0) return {};
  // The epsilon keeps products like 0.1 * 100 from flooring to 9.
  auto k = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
  k = std::clamp<std::size_t>(k, 1, n);
  Rng rng(seed);
  return sample_without_replacement(n, k, rng);
}

data::Image compose_overlay(const data::CrowdSample& sample) {
  sample.validate();
  const int H = sample.height(), W = sample.width();
  data::Image out(H, 2 * W + kOverlaySeparator, 3, 255);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const auto t = sample.thermal.at(y, x);
      for (int c = 0; c < 3; ++c) {
        out.at(y, x, c) = sample.rgb.at(y, x, c);
        out.at(y, W + kOverlaySeparator + x, c) = t;
      }
    }
  const int side = std::max(3, W / 64);
  for (const auto& p : sample.points) {
    draw_square(out, 0, p.x, p.y, side, W);
    draw_square(out, W + kOverlaySeparator, p.x, p.y, side, W);
  }
  return out;
}

void render_overlay(const data::CrowdSample& sample, const fs::path& path) {
  data::write_image(compose_overlay(sample), path);
}

std::string to_string(Verdict verdict) {
  switch (verdict) {
    case Verdict::pass: return "pass";
    case Verdict::fail: return "fail";
    case Verdict::unknown: return "unknown";
    case Verdict::manual_review: return "manual_review";
  }
  return "unknown";
}

double time_coverage_entropy(std::span<const double> hours, int bins) {
  if (hours.empty() || bins < 2) return 0.0;
  std::vector<double> hist(bins, 0.0);
  for (double h : hours) {
    const double wrapped = std::fmod(std::fmod(h, 24.0) + 24.0, 24.0);
    hist[std::min(bins - 1, static_cast<int>(wrapped / 24.0 * bins))] += 1.0;
  }
  double entropy = 0.0;
  for (double c : hist)
    if (c > 0) {
      const double p = c / static_cast<double>(hours.size());
      entropy -= p * std::log(p);
    }
  return entropy / std::log(static_cast<double>(bins));
}

std::optional<double> circular_linear_correlation(std::span<const double> counts, std::span<const double> hours) {
  if (counts.size() != hours.size() || counts.size() < 3) return std::nullopt;
  std::vector<double> cs, sn;
  for (double h : hours) {
    const double theta = 2.0 * std::numbers::pi * h / 24.0;
    cs.push_back(std::cos(theta));
    sn.push_back(std::sin(theta));
  }
  const auto rxc = pearson(counts, cs), rxs = pearson(counts, sn), rcs = pearson(cs, sn);
  if (!rxc || !rxs || !rcs || std::abs(*rcs) >= 1.0 - 1e-12) return std::nullopt;
  const double r2 = (*rxc * *rxc + *rxs * *rxs - 2.0 * *rxc * *rxs * *rcs) / (1.0 - *rcs * *rcs);
  return std::sqrt(std::clamp(r2, 0.0, 1.0));
}

std::vector<Criterion> criteria_report(std::span<const data::CrowdSample> samples, const CorrelationReport& balance,
                                       std::span<const fs::path> overlays, const TimeThresholds& thresholds) {
  std::vector<double> hours, counts;
  for (const auto& s : samples)
    if (s.meta.time_of_day) {
      hours.push_back(*s.meta.time_of_day);
      counts.push_back(static_cast<double>(s.count()));
    }
  const std::string coverage_note =
      std::to_string(hours.size()) + " of " + std::to_string(samples.size()) + " samples carry a capture time";

  std::vector<Criterion> out;
  if (hours.size() < 2) {
    out.push_back({"time_of_day_coverage", Verdict::unknown, coverage_note});
  } else {
    const double h = time_coverage_entropy(hours, thresholds.bins);
    out.push_back({"time_of_day_coverage", h >= thresholds.min_entropy ? Verdict::pass : Verdict::fail,
                   "normalised entropy " + format(h) + " over " + std::to_string(thresholds.bins) +
                       " bins (threshold " + format(thresholds.min_entropy) + "); " + coverage_note});
  }
  const auto dep = hours.size() < 2 ? std::nullopt : circular_linear_correlation(counts, hours);
  if (!dep) {
    out.push_back({"count_time_independence", Verdict::unknown,
                   coverage_note + "; correlation undefined without variation in count and time"});
  } else {
    out.push_back({"count_time_independence", *dep < thresholds.max_dependence ? Verdict::pass : Verdict::fail,
                   "circular-linear correlation " + format(*dep) + " (threshold " +
                       format(thresholds.max_dependence) + ")"});
  }
  if (!balance.pearson_r) {
    out.push_back({"brightness_count_balance", Verdict::unknown, "brightness or count has no variance"});
  } else {
    out.push_back({"brightness_count_balance", balance.imbalance_flag ? Verdict::fail : Verdict::pass,
                   "pearson r " + format(*balance.pearson_r) + ", mean brightness of high-count samples " +
                       format(*balance.top_count_mean_brightness) + " vs 25th percentile " +
                       format(*balance.brightness_threshold)});
  }
  const std::string review = "inspect " + std::to_string(overlays.size()) + " overlay(s) in overlays/";
  out.push_back({"annotation_modality_coverage", Verdict::manual_review,
                 review + ": are people visible in only one modality annotated?"});
  out.push_back({"simultaneous_capture", Verdict::manual_review, review + ": do both panels show the same moment?"});
  return out;
}

json AuditReport::to_json() const {
  json failures = json::array();
  for (const auto& f : table.failures) failures.push_back({{"index", f.index}, {"id", f.id}, {"error", f.message}});
  json criteria_json = json::array();
  for (const auto& c : criteria)
    criteria_json.push_back({{"name", c.name}, {"verdict", to_string(c.verdict)}, {"evidence", c.evidence}});
  json overlays = json::array();
  for (const auto& p : overlay_paths) overlays.push_back(p.generic_string());
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return {{"n_records", table.records.size()},
          {"load_failures", failures},
          {"correlation",
           {{"status", correlation.status()},
            {"pearson_r", opt(correlation.pearson_r)},
            {"top_count_mean_brightness", opt(correlation.top_count_mean_brightness)},
            {"brightness_threshold", opt(correlation.brightness_threshold)}}},
          {"imbalance_flag", correlation.imbalance_flag},
          {"criteria", criteria_json},
          {"overlay_paths", overlays}};
}

std::string AuditReport::to_text() const {
  std::ostringstream os;
  os << "records: " << table.records.size() << "\n";
  os << "load failures: " << table.failures.size() << "\n";
  for (const auto& f : table.failures) os << "  [" << f.index << "] " << f.id << ": " << f.message << "\n";
  os << "pearson r (brightness, count): "
     << (correlation.pearson_r ? format(*correlation.pearson_r) : std::string("unknown")) << "\n";
  os << "imbalance flag: " << (correlation.imbalance_flag ? "true" : "false") << "\n";
  os << "criteria:\n";
  for (const auto& c : criteria) os << "  " << c.name << ": " << to_string(c.verdict) << " (" << c.evidence << ")\n";
  os << "overlays: " << overlay_paths.size() << "\n";
  for (const auto& p : overlay_paths) os << "  " << p.generic_string() << "\n";
  return os.str();
}

AuditReport run_audit(const data::DatasetManifest& manifest, const AuditOptions& options, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  AuditReport report;
  std::vector<data::CrowdSample> samples;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    try {
      samples.push_back(data::load_sample(manifest, i));
      report.table.records.push_back(record_of(samples.back()));
    } catch (const Error& e) {
      report.table.failures.push_back({i, data::sample_id(manifest.entries[i]), e.what()});
    }
  }
  write_csv(report.table.records, out_dir / "brightness.csv");
  data::write_image(render_scatter(report.table.records), out_dir / "brightness_scatter.png");
  report.correlation = correlation_report(report.table.records, options.imbalance);

  auto subset = sample_subset(samples.size(), options.fraction, options.seed);
  std::sort(subset.begin(), subset.end());
  for (std::size_t i : subset) {
    const fs::path rel = fs::path("overlays") / (safe_name(samples[i].meta.id) + ".png");
    render_overlay(samples[i], out_dir / rel);
    report.overlay_paths.push_back(rel);
  }
  report.criteria = criteria_report(samples, report.correlation, report.overlay_paths, options.time);

  std::ofstream(out_dir / "report.json", std::ios::binary) << report.to_json().dump(2) << "\n";
  std::ofstream(out_dir / "report.txt", std::ios::binary) << report.to_text();
  return report;
}

}  // namespace crowdfuse::audit
