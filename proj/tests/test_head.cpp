#include <gtest/gtest.h>

#include "crowdfuse/errors.hpp"
#include "crowdfuse/head.hpp"
#include "grad_check.hpp"
#include "param_oracle.hpp"

namespace crowdfuse::model {
namespace {

using crowdfuse::testing::random_const;

TEST(DensityMap, CountIsSumAndCellsAreChecked) {
  const DensityMap m(2, 2, {0.5, 0.25, 0.0, 1.25});
  EXPECT_DOUBLE_EQ(m.count(), 2.0);
  EXPECT_DOUBLE_EQ(predict_count(m), 2.0);
  EXPECT_DOUBLE_EQ(m.at(1, 1), 1.25);
  EXPECT_THROW(DensityMap(1, 2, {0.1, -0.1}), ValidationError);
  EXPECT_THROW(DensityMap(1, 1, {std::nan("")}), ValidationError);
  EXPECT_THROW(DensityMap(1, 2, {0.1}), ValidationError);
}

TEST(Head, AggregateResizesToFinestStage) {
  Rng rng(1);
  FeaturePyramid pyr{{random_const({2, 8, 6, 4}, rng), random_const({2, 4, 3, 5}, rng), random_const({2, 2, 2, 3}, rng)}};
  const auto fused = aggregate(pyr);
  EXPECT_EQ(fused.shape(), (nn::Shape{2, 8, 6, 12}));
  // The finest stage passes through unchanged.
  EXPECT_DOUBLE_EQ(fused.value()[0], pyr[0].value()[0]);
  EXPECT_DOUBLE_EQ(fused.value()[3], pyr[0].value()[3]);
}

TEST(Head, OutputIsNonNegativeAtInputResolution) {
  const auto bb_cfg = BackboneConfig::tiny();
  const auto cfg = HeadConfig::tiny(bb_cfg);
  EXPECT_EQ(cfg.fused_width, 48);
  EXPECT_EQ(cfg.feature_width(), 48);
  Rng rng(2);
  const RegressionHead head(cfg, rng);
  const auto out = head(random_const({3, 9, 7, 48}, rng));
  EXPECT_EQ(out.shape(), (nn::Shape{3, 9, 7, 1}));
  for (double v : out.value()) EXPECT_GE(v, 0.0);
  const auto maps = to_density_maps(out);
  ASSERT_EQ(maps.size(), 3u);
  EXPECT_EQ(maps[1].height(), 9);
  EXPECT_EQ(maps[1].width(), 7);
}

TEST(Head, ParameterCountMatchesEnumeration) {
  Rng rng(3);
  for (const auto& cfg : {HeadConfig::tiny(BackboneConfig::tiny()), HeadConfig::b0(BackboneConfig::b0())}) {
    const RegressionHead head(cfg, rng);
    ParamList params;
    head.collect(params, "head");
    EXPECT_EQ(count_scalars(params), crowdfuse::testing::head_params(cfg));
  }
}

TEST(Head, DilatedBranchesSeeTheirReceptiveField) {
  HeadConfig cfg;
  cfg.fused_width = 1;
  cfg.branch_width = 1;
  cfg.dilation_rates = {3};
  Rng rng(4);
  const DilatedBranches branches(cfg, rng);
  // Impulse at the centre of a 7x7 map reaches only the dilated taps.
  std::vector<double> x(49, 0.0);
  x[24] = 1.0;
  const auto out = branches(nn::constant({1, 7, 7, 1}, x));
  int touched = 0;
  for (double v : out.value()) touched += v != 0.0;
  EXPECT_LE(touched, 9);
  for (int y = 0; y < 7; ++y)
    for (int x2 = 0; x2 < 7; ++x2)
      if ((y - 3) % 3 != 0 || (x2 - 3) % 3 != 0) EXPECT_EQ(out.value()[y * 7 + x2], 0.0);
}

TEST(Head, ConfigValidation) {
  auto cfg = HeadConfig::tiny(BackboneConfig::tiny());
  cfg.output_stride = 8;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = HeadConfig::tiny(BackboneConfig::tiny());
  cfg.dilation_rates.clear();
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Head, GradientMatchesFiniteDifferences) {
  HeadConfig cfg;
  cfg.fused_width = 3;
  cfg.branch_width = 2;
  Rng rng(5);
  const RegressionHead head(cfg, rng);
  const auto x = crowdfuse::testing::random_param({1, 5, 5, 3}, rng);
  std::vector<nn::Var> inputs{x};
  ParamList params;
  head.collect(params, "h");
  for (const auto& p : params) inputs.push_back(p.var);
  EXPECT_LT(crowdfuse::testing::max_grad_error([&] { return crowdfuse::testing::readout(head(x)); }, inputs), 1e-5);
}

}  // namespace
}  // namespace crowdfuse::model
