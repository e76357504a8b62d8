#include <gtest/gtest.h>

#include "crowdfuse/backbone.hpp"
#include "crowdfuse/errors.hpp"
#include "grad_check.hpp"
#include "param_oracle.hpp"
#include "temp_dir.hpp"

namespace crowdfuse::model {
namespace {

using crowdfuse::testing::random_const;

TEST(BackboneConfig, StrideArithmetic) {
  const auto b0 = BackboneConfig::b0();
  EXPECT_NO_THROW(b0.validate());
  EXPECT_EQ(b0.cumulative_stride(0), 4);
  EXPECT_EQ(b0.cumulative_stride(3), 32);
  EXPECT_EQ(b0.total_stride(), 32);
  EXPECT_EQ(b0.min_input_size(), 32);
  EXPECT_EQ(b0.widths(), (std::vector<int>{32, 64, 160, 256}));
  EXPECT_EQ(BackboneConfig::tiny().min_input_size(), 16);
}

TEST(BackboneConfig, ValidateRejectsBadSchedules) {
  auto c = BackboneConfig::tiny();
  c.stages[1].stride = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = BackboneConfig::tiny();
  c.stages[1].heads = 3;  // 32 % 3 != 0
  EXPECT_THROW(c.validate(), ConfigError);
  c = BackboneConfig::tiny();
  c.stages[1].width = 8;
  EXPECT_THROW(c.validate(), ConfigError);
  c = BackboneConfig::tiny();
  c.stages.pop_back();
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Backbone, ParameterCountMatchesEnumeration) {
  for (int in : {1, 3, 4, 6}) {
    for (const auto& cfg : {BackboneConfig::tiny(in), BackboneConfig::b0(in)}) {
      const auto bb = build_backbone(cfg, {1, {}});
      EXPECT_EQ(count_scalars(bb.parameters()), crowdfuse::testing::backbone_params(cfg, in)) << in;
    }
  }
}

TEST(Backbone, PyramidShapesForOddSizes) {
  const auto bb = build_backbone(BackboneConfig::tiny(3), {2, {}});
  Rng rng(3);
  const auto x = random_const({2, 37, 50, 3}, rng);
  const auto pyr = bb.encode(x);
  ASSERT_EQ(pyr.size(), 2u);
  // Padded to 40 x 56 (multiples of 8).
  EXPECT_EQ(pyr[0].shape(), (nn::Shape{2, 10, 14, 16}));
  EXPECT_EQ(pyr[1].shape(), (nn::Shape{2, 5, 7, 32}));
}

TEST(Backbone, B0PyramidOnMinimumInput) {
  const auto bb = build_backbone(BackboneConfig::b0(1), {2, {}});
  Rng rng(4);
  const auto pyr = bb.encode(random_const({1, 32, 40, 1}, rng));
  ASSERT_EQ(pyr.size(), 4u);
  EXPECT_EQ(pyr[0].shape(), (nn::Shape{1, 8, 16, 32}));
  EXPECT_EQ(pyr[3].shape(), (nn::Shape{1, 1, 2, 256}));
}

TEST(Backbone, InputErrors) {
  const auto bb = build_backbone(BackboneConfig::tiny(3), {2, {}});
  Rng rng(5);
  EXPECT_THROW(bb.encode(random_const({1, 32, 32, 1}, rng)), ShapeError);
  EXPECT_THROW(bb.encode(random_const({1, 7, 32, 3}, rng)), ShapeError);
  EXPECT_THROW(bb.encode(random_const({1, 8, 32, 3}, rng)), ShapeError);  // pad to 16 needs 8 >= H
}

TEST(Backbone, InitIsSeeded) {
  const auto cfg = BackboneConfig::tiny();
  EXPECT_EQ(checksum(build_backbone(cfg, {7, {}}).parameters()), checksum(build_backbone(cfg, {7, {}}).parameters()));
  EXPECT_NE(checksum(build_backbone(cfg, {7, {}}).parameters()), checksum(build_backbone(cfg, {8, {}}).parameters()));
}

TEST(Backbone, WeightsFileOverridesInit) {
  crowdfuse::testing::TempDir dir("weights");
  const auto cfg = BackboneConfig::tiny();
  const auto source = build_backbone(cfg, {11, {}});
  save_parameters(source.parameters(), dir / "w.bin");
  const auto loaded = build_backbone(cfg, {12, dir / "w.bin"});
  EXPECT_EQ(checksum(loaded.parameters()), checksum(source.parameters()));

  const auto other = build_backbone(BackboneConfig::tiny(1), {0, {}});
  save_parameters(other.parameters(), dir / "w1.bin");
  EXPECT_THROW(build_backbone(cfg, {0, dir / "w1.bin"}), ConfigError);
}

TEST(Backbone, GradientMatchesFiniteDifferences) {
  auto cfg = BackboneConfig::tiny(1);
  cfg.stages = {{7, 4, 8, 2, 2, 1, 2}, {3, 2, 8, 1, 1, 1, 2}};
  const auto bb = build_backbone(cfg, {3, {}});
  Rng rng(6);
  const auto x = crowdfuse::testing::random_param({1, 16, 16, 1}, rng);
  auto loss = [&] {
    const auto pyr = bb.encode(x);
    return nn::add(crowdfuse::testing::readout(pyr[0], 1), crowdfuse::testing::readout(pyr[1], 2));
  };
  std::vector<nn::Var> probes{x};
  for (const auto& p : bb.parameters()) probes.push_back(p.var);
  EXPECT_LT(crowdfuse::testing::max_grad_error(loss, probes, 3), 1e-4);
}

}  // namespace
}  // namespace crowdfuse::model
