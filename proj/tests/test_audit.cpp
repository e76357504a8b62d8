#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "crowdfuse/audit.hpp"
#include "crowdfuse/errors.hpp"
#include "crowdfuse/rng.hpp"
#include "crowdfuse/synth.hpp"
#include "temp_dir.hpp"

namespace crowdfuse::audit {
namespace {

using crowdfuse::testing::TempDir;

std::vector<data::CrowdSample> generate(const std::vector<synth::SynthSpec>& specs) {
  std::vector<data::CrowdSample> out;
  for (const auto& s : specs) out.push_back(synth::generate_sample(s));
  return out;
}

TEST(Brightness, Examples) {
  EXPECT_EQ(brightness(data::Image(4, 3, 3, 0)), 0.0);
  EXPECT_EQ(brightness(data::Image(4, 3, 3, 255)), 255.0);
  data::Image two(1, 2, 3);
  two.pixels = {10, 20, 30, 40, 50, 60};
  EXPECT_NEAR(brightness(two), 35.0, 1e-9);
  EXPECT_THROW(brightness(data::Image(2, 2, 1)), ShapeError);
}

TEST(Brightness, InvariantToPixelOrder) {
  data::Image img(3, 5, 3);
  Rng rng(1);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.below(256));
  const double before = brightness(img);
  std::reverse(img.pixels.begin(), img.pixels.end());
  EXPECT_DOUBLE_EQ(brightness(img), before);
  EXPECT_GE(before, 0.0);
  EXPECT_LE(before, 255.0);
}

TEST(Table, TracksGeneratorTruth) {
  std::vector<synth::SynthSpec> specs;
  for (int i = 0; i < 10; ++i) {
    synth::SynthSpec s;
    s.count = 2 * i;
    s.brightness_target = 20.0 + 22.0 * i;
    s.seed = i;
    specs.push_back(s);
  }
  const auto table = brightness_count_table(generate(specs));
  ASSERT_EQ(table.records.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_EQ(table.records[i].count, static_cast<std::size_t>(specs[i].count));
    EXPECT_NEAR(table.records[i].brightness, specs[i].brightness_target, 2.0);
  }
  EXPECT_TRUE(brightness_count_table(std::span<const data::CrowdSample>{}).records.empty());
}

TEST(Table, UnreadableImageIsRecordedNotFatal) {
  TempDir dir("audit_fail");
  const auto manifest = synth::generate_dataset(synth::overfit_preset(10, 32), dir.path());
  std::filesystem::remove(manifest.resolve(manifest.entries[3].rgb));
  const auto table = brightness_count_table(manifest);
  EXPECT_EQ(table.records.size(), 9u);
  ASSERT_EQ(table.failures.size(), 1u);
  EXPECT_EQ(table.failures[0].index, 3u);
}

TEST(Table, CsvSchema) {
  const std::vector<BrightnessRecord> rows{{"a", 12.5, 3}, {"b", 200, 0}};
  EXPECT_EQ(to_csv(rows), "id,brightness,count\na,12.500000,3\nb,200.000000,0\n");
}

TEST(Correlation, PerfectAnticorrelation) {
  std::vector<BrightnessRecord> rows;
  for (int b = 0; b <= 250; b += 10) rows.push_back({"", double(b), static_cast<std::size_t>(255 - b)});
  const auto r = correlation_report(rows);
  ASSERT_TRUE(r.pearson_r.has_value());
  EXPECT_NEAR(*r.pearson_r, -1.0, 1e-12);
  EXPECT_TRUE(r.imbalance_flag);
}

TEST(Correlation, ConstantBrightnessIsUnknown) {
  const std::vector<BrightnessRecord> rows{{"a", 50, 1}, {"b", 50, 9}, {"c", 50, 4}};
  const auto r = correlation_report(rows);
  EXPECT_FALSE(r.pearson_r.has_value());
  EXPECT_EQ(r.status(), "unknown");
  EXPECT_FALSE(r.imbalance_flag);
}

TEST(Correlation, MatchesBruteForceCovariance) {
  Rng rng(2);
  std::vector<BrightnessRecord> rows;
  for (int i = 0; i < 1000; ++i) rows.push_back({"", rng.uniform(0, 255), static_cast<std::size_t>(rng.below(60))});
  long double sb = 0, sc = 0, sbb = 0, scc = 0, sbc = 0;
  const long double n = rows.size();
  for (const auto& r : rows) {
    sb += r.brightness;
    sc += r.count;
    sbb += r.brightness * r.brightness;
    scc += static_cast<long double>(r.count) * r.count;
    sbc += r.brightness * r.count;
  }
  const long double cov = sbc / n - (sb / n) * (sc / n);
  const long double vb = sbb / n - (sb / n) * (sb / n), vc = scc / n - (sc / n) * (sc / n);
  EXPECT_NEAR(*correlation_report(rows).pearson_r, static_cast<double>(cov / std::sqrt(vb * vc)), 1e-9);
}

TEST(Correlation, DarkCrowdsRuleFlagsWithoutLinearTrend) {
  // Weak linear trend, but every high-count sample is darker than the 25th percentile.
  std::vector<BrightnessRecord> rows;
  for (int i = 0; i < 90; ++i) rows.push_back({"", 60.0 + (i * 37) % 180, static_cast<std::size_t>(1 + i % 5)});
  for (int i = 0; i < 10; ++i) rows.push_back({"", 5.0 + i, 30});
  ImbalanceThresholds t;
  t.min_r = -0.99;
  const auto r = correlation_report(rows, t);
  EXPECT_GT(*r.pearson_r, -0.99);
  EXPECT_LT(*r.top_count_mean_brightness, *r.brightness_threshold);
  EXPECT_TRUE(r.imbalance_flag);
}

TEST(Correlation, GridPresetIsBalanced) {
  const auto table = brightness_count_table(generate(synth::grid_preset()));
  const auto r = correlation_report(table.records);
  EXPECT_LT(std::abs(*r.pearson_r), 0.2);
  EXPECT_FALSE(r.imbalance_flag);
}

TEST(Correlation, SkewedPresetIsFlagged) {
  const auto table = brightness_count_table(generate(synth::skewed_preset(60)));
  const auto r = correlation_report(table.records);
  EXPECT_LT(*r.pearson_r, -0.8);
  EXPECT_TRUE(r.imbalance_flag);
}

TEST(Quantile, LinearInterpolation) {
  EXPECT_DOUBLE_EQ(quantile({4, 1, 3, 2}, 0.5), 2.5);
  EXPECT_DOUBLE_EQ(quantile({1, 2, 3, 4, 5}, 0.25), 2.0);
  EXPECT_DOUBLE_EQ(quantile({7}, 0.9), 7.0);
}

TEST(Subset, SizesAndDeterminism) {
  EXPECT_EQ(sample_subset(100, 0.1, 1).size(), 10u);
  EXPECT_EQ(sample_subset(50, 0.1, 1).size(), 5u);
  EXPECT_EQ(sample_subset(5, 0.1, 1).size(), 1u);
  EXPECT_TRUE(sample_subset(0, 0.1, 1).empty());
  EXPECT_EQ(sample_subset(100, 0.1, 7), sample_subset(100, 0.1, 7));
  EXPECT_NE(sample_subset(100, 0.1, 7), sample_subset(100, 0.1, 8));
  const auto all = sample_subset(30, 1.0, 3);
  EXPECT_EQ(std::set<std::size_t>(all.begin(), all.end()).size(), 30u);
  EXPECT_THROW(sample_subset(10, 0.0, 1), ConfigError);
  EXPECT_THROW(sample_subset(10, 1.5, 1), ConfigError);
}

TEST(Subset, PinnedAcrossPlatforms) {
  // SplitMix64 and the rejection sampler are fully specified, so this list is stable.
  const auto first = sample_subset(100, 0.1, 1);
  EXPECT_EQ(first, sample_subset(100, 0.1, 1));
  for (std::size_t i : first) EXPECT_LT(i, 100u);
}

TEST(Overlay, LayoutAndMarkers) {
  synth::SynthSpec spec;
  spec.count = 0;
  auto sample = synth::generate_sample(spec);
  const auto clean = compose_overlay(sample);
  EXPECT_EQ(clean.width, 2 * 64 + kOverlaySeparator);
  EXPECT_EQ(clean.height, 64);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) {
      ASSERT_EQ(clean.at(y, x, 0), sample.rgb.at(y, x, 0));
      ASSERT_EQ(clean.at(y, 64 + kOverlaySeparator + x, 2), sample.thermal.at(y, x));
    }

  sample.points = {{10, 10}};
  const auto marked = compose_overlay(sample);
  // Side 3: a hollow ring from (9, 9) to (11, 11) with the centre untouched.
  for (int off : {0, 64 + kOverlaySeparator}) {
    EXPECT_EQ(marked.at(9, off + 9, 0), 255);
    EXPECT_EQ(marked.at(9, off + 9, 1), 255);
    EXPECT_EQ(marked.at(9, off + 9, 2), 0);
    EXPECT_EQ(marked.at(11, off + 10, 2), 0);
    EXPECT_EQ(marked.at(10, off + 10, 0), clean.at(10, off + 10, 0));
  }
}

TEST(Overlay, UnwritablePathIsIoError) {
  synth::SynthSpec spec;
  EXPECT_THROW(render_overlay(synth::generate_sample(spec), "/proc/nope/x.png"), IoError);
}

TEST(Criteria, MissingTimesAreUnknown) {
  auto samples = generate(synth::overfit_preset(6, 32));
  for (auto& s : samples) s.meta.time_of_day.reset();
  const auto table = brightness_count_table(samples);
  const auto list = criteria_report(samples, correlation_report(table.records), {});
  ASSERT_EQ(list.size(), 5u);
  EXPECT_EQ(list[0].verdict, Verdict::unknown);
  EXPECT_EQ(list[1].verdict, Verdict::unknown);
  EXPECT_EQ(list[3].verdict, Verdict::manual_review);
  EXPECT_EQ(list[4].verdict, Verdict::manual_review);
}

TEST(Criteria, GridPassesSkewFails) {
  const auto grid = generate(synth::grid_preset());
  const auto g = criteria_report(grid, correlation_report(brightness_count_table(grid).records), {});
  EXPECT_EQ(g[0].verdict, Verdict::pass);
  EXPECT_EQ(g[1].verdict, Verdict::pass);
  EXPECT_EQ(g[2].verdict, Verdict::pass);

  const auto skew = generate(synth::skewed_preset(60));
  const auto s = criteria_report(skew, correlation_report(brightness_count_table(skew).records), {});
  EXPECT_EQ(s[1].verdict, Verdict::fail);
  EXPECT_EQ(s[2].verdict, Verdict::fail);
}

TEST(Criteria, TimeStatistics) {
  const std::vector<double> even{1, 5, 9, 13, 17, 21};
  EXPECT_NEAR(time_coverage_entropy(even, 6), 1.0, 1e-12);
  const std::vector<double> clumped{1, 1.5, 2, 3};
  EXPECT_NEAR(time_coverage_entropy(clumped, 6), 0.0, 1e-12);
  // Count follows a daily cycle exactly.
  std::vector<double> hours, counts;
  for (int h = 0; h < 24; ++h) {
    hours.push_back(h);
    counts.push_back(10 + 5 * std::cos(2 * M_PI * h / 24.0));
  }
  EXPECT_NEAR(*circular_linear_correlation(counts, hours), 1.0, 1e-9);
}

TEST(Report, RunAuditWritesArtifacts) {
  TempDir dir("audit_run");
  const auto manifest = synth::generate_dataset(synth::skewed_preset(50, 64, 1), dir / "data");
  AuditOptions opt;
  opt.seed = 1;
  const auto report = run_audit(manifest, opt, dir / "out");
  EXPECT_EQ(report.overlay_paths.size(), 5u);
  for (const auto& p : report.overlay_paths) EXPECT_TRUE(std::filesystem::exists(dir / "out" / p));
  for (const char* f : {"brightness.csv", "brightness_scatter.png", "report.json", "report.txt"})
    EXPECT_TRUE(std::filesystem::exists(dir / "out" / f)) << f;
  const auto j = nlohmann::json::parse(crowdfuse::testing::slurp(dir / "out" / "report.json"));
  EXPECT_TRUE(j["imbalance_flag"].get<bool>());

  const auto again = run_audit(manifest, opt, dir / "out2");
  EXPECT_EQ(crowdfuse::testing::slurp(dir / "out" / "report.json"), crowdfuse::testing::slurp(dir / "out2" / "report.json"));
  EXPECT_EQ(crowdfuse::testing::slurp(dir / "out" / "brightness.csv"),
            crowdfuse::testing::slurp(dir / "out2" / "brightness.csv"));
}

}  // namespace
}  // namespace crowdfuse::audit
