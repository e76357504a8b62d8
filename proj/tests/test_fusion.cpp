#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>

#include "crowdfuse/errors.hpp"
#include "crowdfuse/fusion.hpp"
#include "crowdfuse/synth.hpp"
#include "grad_check.hpp"
#include "param_oracle.hpp"
#include "temp_dir.hpp"

namespace crowdfuse::model {
namespace {

using crowdfuse::testing::random_const;

std::vector<data::CrowdSample> pairs(int n, int size, std::uint64_t seed) {
  std::vector<data::CrowdSample> out;
  for (int i = 0; i < n; ++i) {
    synth::SynthSpec s;
    s.width = s.height = size;
    s.count = 3 + i;
    s.seed = seed + i;
    s.noise = 10;
    out.push_back(synth::generate_sample(s));
  }
  return out;
}

// Copies tensors whose names start with `from` into tensors named `to` + rest.
void copy_prefix(const ParamList& src, const std::string& from, const ParamList& dst, const std::string& to) {
  std::map<std::string, nn::Var> by_name;
  for (const auto& p : dst) by_name.emplace(p.name, p.var);
  for (const auto& p : src) {
    if (p.name.rfind(from, 0) != 0) continue;
    auto it = by_name.find(to + p.name.substr(from.size()));
    ASSERT_NE(it, by_name.end()) << p.name;
    ASSERT_EQ(it->second.shape(), p.var.shape()) << p.name;
    auto v = it->second.mutable_value();
    std::copy(p.var.value().begin(), p.var.value().end(), v.begin());
  }
}

nn::Var param(const ParamList& params, const std::string& name) {
  for (const auto& p : params)
    if (p.name == name) return p.var;
  ADD_FAILURE() << "no parameter " << name;
  return {};
}

double max_abs_diff(const nn::Var& a, const nn::Var& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a.value()[i] - b.value()[i]));
  return worst;
}

TEST(Variant, NamesRoundTrip) {
  for (auto k : {VariantKind::mono_rgb, VariantKind::mono_thermal, VariantKind::early, VariantKind::late,
                 VariantKind::deep})
    EXPECT_EQ(parse_variant(to_string(k)), k);
  EXPECT_THROW(parse_variant("middle"), ConfigError);
  auto v = ModelVariant::b0(VariantKind::deep, 9);
  v.deep_head_input = DeepHeadInput::all;
  v.iadm.gating = Gating::none;
  EXPECT_EQ(ModelVariant::from_json(v.to_json()), v);
  EXPECT_THROW(ModelVariant::from_json(nlohmann::json{{"kind", "late"}}), ConfigError);
}

TEST(Fusion, SingleConvCountsByHand) {
  Rng rng(0);
  Conv2d conv(3, 8, 3, rng, {});
  ParamList params;
  conv.collect(params, "c");
  EXPECT_EQ(count_scalars(params), 224u);
}

TEST(Fusion, ParameterCountsMatchEnumeration) {
  for (auto k : {VariantKind::mono_rgb, VariantKind::mono_thermal, VariantKind::early, VariantKind::late,
                 VariantKind::deep}) {
    const auto v = ModelVariant::tiny(k);
    const auto model = build_model(v);
    EXPECT_EQ(count_parameters(*model), crowdfuse::testing::variant_params(v)) << to_string(k);
    EXPECT_EQ(count_parameters(*model), count_parameters(*build_model(v)));
  }
  auto six = ModelVariant::tiny(VariantKind::early);
  six.early_six_channel = true;
  EXPECT_EQ(count_parameters(*build_model(six)), crowdfuse::testing::variant_params(six));
}

TEST(Fusion, ParameterOrdering) {
  const auto count = [](VariantKind k) { return count_parameters(*build_model(ModelVariant::tiny(k))); };
  const auto mono = count(VariantKind::mono_rgb), early = count(VariantKind::early);
  const auto late = count(VariantKind::late), deep = count(VariantKind::deep);
  EXPECT_GT(deep, late);
  EXPECT_GT(late, early);
  EXPECT_GE(early, mono);
}

TEST(Fusion, ParameterNamesAreUnique) {
  for (auto k : {VariantKind::mono_rgb, VariantKind::early, VariantKind::late, VariantKind::deep}) {
    std::vector<std::string> names;
    for (const auto& p : build_model(ModelVariant::tiny(k))->parameters()) names.push_back(p.name);
    std::sort(names.begin(), names.end());
    EXPECT_EQ(std::adjacent_find(names.begin(), names.end()), names.end()) << to_string(k);
  }
}

TEST(Fusion, EveryVariantPredictsQuarterResolution) {
  const auto batch = pairs(2, 40, 1);
  const auto input = make_input(batch);
  for (auto k : {VariantKind::mono_rgb, VariantKind::mono_thermal, VariantKind::early, VariantKind::late,
                 VariantKind::deep}) {
    const auto model = build_model(ModelVariant::tiny(k));
    const auto out = model->forward(input);
    EXPECT_EQ(out.shape(), (nn::Shape{2, 10, 10, 1})) << to_string(k);
    for (double v : out.value()) ASSERT_GE(v, 0.0);
    const auto maps = model->predict(batch);
    ASSERT_EQ(maps.size(), 2u);
    EXPECT_EQ(maps[0].stride(), 4);
  }
}

TEST(Fusion, SixChannelEarlyFusion) {
  auto v = ModelVariant::tiny(VariantKind::early);
  v.early_six_channel = true;
  EXPECT_EQ(v.input_channels(), 6);
  const auto model = build_model(v);
  const auto out = model->forward(make_input(pairs(1, 64, 2)));
  EXPECT_EQ(out.shape(), (nn::Shape{1, 16, 16, 1}));
}

TEST(Fusion, MakeInputNormalisesAndChecksSizes) {
  auto batch = pairs(2, 32, 3);
  const auto in = make_input(batch);
  EXPECT_EQ(in.rgb.shape(), (nn::Shape{2, 32, 32, 3}));
  EXPECT_EQ(in.thermal.shape(), (nn::Shape{2, 32, 32, 1}));
  const double t = batch[0].thermal.at(0, 0);
  EXPECT_NEAR(in.thermal.value()[0], (t / 255.0 - 0.5) / 0.25, 1e-12);
  const double r = batch[0].rgb.at(0, 0, 0);
  EXPECT_NEAR(in.rgb.value()[0], (r / 255.0 - 0.485) / 0.229, 1e-12);
  batch[1] = pairs(1, 48, 4)[0];
  EXPECT_THROW(make_input(batch), ShapeError);
}

TEST(Iadm, PreservesShapesAndRejectsMismatch) {
  Rng rng(5);
  const IadmExchange ex(8, {}, rng);
  const StageTriple in{random_const({2, 3, 4, 8}, rng), random_const({2, 3, 4, 8}, rng),
                       random_const({2, 3, 4, 8}, rng)};
  const auto out = iadm_exchange(ex, in);
  EXPECT_EQ(out.rgb.shape(), in.rgb.shape());
  EXPECT_EQ(out.thermal.shape(), in.thermal.shape());
  EXPECT_EQ(out.shared.shape(), in.shared.shape());
  EXPECT_GT(max_abs_diff(out.shared, in.shared), 0.0);
  EXPECT_THROW(ex({in.rgb, random_const({2, 3, 5, 8}, rng), in.shared}), ShapeError);
}

TEST(Iadm, ZeroInputsAndZeroWeightsLeaveSharedUnchanged) {
  Rng rng(6);
  const IadmExchange ex(4, {}, rng);
  ParamList params;
  ex.collect(params, "x");
  for (auto& p : params) std::fill(p.var.node().value.begin(), p.var.node().value.end(), 0.0);
  const auto shared = random_const({1, 2, 2, 4}, rng);
  const auto out = ex({nn::zeros({1, 2, 2, 4}), nn::zeros({1, 2, 2, 4}), shared});
  EXPECT_EQ(max_abs_diff(out.shared, shared), 0.0);
  for (double v : out.rgb.value()) EXPECT_EQ(v, 0.0);
}

TEST(Iadm, GradientMatchesFiniteDifferences) {
  for (auto gating : {Gating::sigmoid, Gating::none}) {
    Rng rng(7);
    const IadmExchange ex(3, {gating}, rng);
    ParamList params;
    ex.collect(params, "x");
    std::vector<nn::Var> inputs{crowdfuse::testing::random_param({1, 2, 2, 3}, rng),
                                crowdfuse::testing::random_param({1, 2, 2, 3}, rng),
                                crowdfuse::testing::random_param({1, 2, 2, 3}, rng)};
    for (const auto& p : params) inputs.push_back(p.var);
    auto loss = [&] {
      const auto o = ex({inputs[0], inputs[1], inputs[2]});
      return nn::add(nn::add(crowdfuse::testing::readout(o.rgb, 1), crowdfuse::testing::readout(o.thermal, 2)),
                     crowdfuse::testing::readout(o.shared, 3));
    };
    EXPECT_LT(crowdfuse::testing::max_grad_error(loss, inputs), 1e-6);
  }
}

TEST(DeepFusion, GradientReachesBothSpecificStems) {
  const auto model = build_model(ModelVariant::tiny(VariantKind::deep));
  const auto params = model->parameters();
  zero_grads(params);
  nn::backward(nn::sum(model->forward(make_input(pairs(1, 32, 8)))));
  for (const char* name : {"rgb.backbone.stage0.patch.weight", "thermal.backbone.stage0.patch.weight",
                           "shared.backbone.stage0.patch.weight"}) {
    const auto g = param(params, name).grad();
    ASSERT_FALSE(g.empty()) << name;
    double norm = 0.0;
    for (double v : g) norm += v * v;
    EXPECT_GT(norm, 0.0) << name;
  }
}

TEST(DeepFusion, ZeroedExchangeReducesToMonomodalColumns) {
  auto deep_v = ModelVariant::tiny(VariantKind::deep, 3);
  const auto deep_model = build_model(deep_v);
  const auto& deep = dynamic_cast<const DeepFusionModel&>(*deep_model);
  const auto deep_params = deep.parameters();
  for (const auto& p : deep_params)
    if (p.name.rfind("iadm.", 0) == 0) std::fill(p.var.node().value.begin(), p.var.node().value.end(), 0.0);

  const auto input = make_input(pairs(2, 48, 9));
  const auto columns = deep.encode_columns(input);
  for (auto [kind, prefix, column] : {std::tuple{VariantKind::mono_rgb, "rgb.backbone", 0},
                                      std::tuple{VariantKind::mono_thermal, "thermal.backbone", 1}}) {
    const auto mono_model = build_model(ModelVariant::tiny(kind, 99));
    const auto& mono = dynamic_cast<const SingleColumnModel&>(*mono_model);
    copy_prefix(deep_params, prefix, mono.parameters(), "backbone");
    const auto pyr = mono.backbone().encode(mono.select_input(input));
    ASSERT_EQ(pyr.size(), columns[column].size());
    for (std::size_t k = 0; k < pyr.size(); ++k) EXPECT_LT(max_abs_diff(pyr[k], columns[column][k]), 1e-5);
  }
}

TEST(LateFusion, WeightSlicingEquivalence) {
  const auto late_model = build_model(ModelVariant::tiny(VariantKind::late, 4));
  const auto late_params = late_model->parameters();
  const auto mono_model = build_model(ModelVariant::tiny(VariantKind::mono_rgb, 77));
  const auto mono_params = mono_model->parameters();

  copy_prefix(late_params, "rgb.backbone", mono_params, "backbone");
  copy_prefix(late_params, "rgb.head", mono_params, "head");
  auto late_w = param(late_params, "head.proj.weight");
  auto mono_w = param(mono_params, "head.proj.weight");
  const std::size_t F = mono_w.size();
  ASSERT_EQ(late_w.size(), 2 * F);
  for (std::size_t i = 0; i < F; ++i) mono_w.mutable_value()[i] = late_w.value()[i];
  for (std::size_t i = F; i < 2 * F; ++i) late_w.mutable_value()[i] = 0.0;
  param(mono_params, "head.proj.bias").mutable_value()[0] = param(late_params, "head.proj.bias").value()[0];

  const auto input = make_input(pairs(2, 40, 10));
  EXPECT_LT(max_abs_diff(late_model->forward(input), mono_model->forward(input)), 1e-5);
}

TEST(Checkpoint, RoundTripRestoresPredictions) {
  crowdfuse::testing::TempDir dir("ckpt");
  const auto model = build_model(ModelVariant::tiny(VariantKind::late, 12));
  save_checkpoint(*model, dir / "m.ckpt");
  EXPECT_EQ(read_checkpoint_variant(dir / "m.ckpt"), model->variant());
  const auto restored = load_checkpoint(dir / "m.ckpt");
  EXPECT_EQ(checksum(restored->parameters()), checksum(model->parameters()));
  const auto input = make_input(pairs(1, 32, 11));
  EXPECT_EQ(max_abs_diff(restored->forward(input), model->forward(input)), 0.0);

  crowdfuse::testing::spit(dir / "junk.ckpt", "not a checkpoint");
  EXPECT_THROW(load_checkpoint(dir / "junk.ckpt"), IoError);
  EXPECT_THROW(load_checkpoint(dir / "absent.ckpt"), IoError);
}

TEST(Fusion, BuildRejectsInconsistentConfigs) {
  auto v = ModelVariant::tiny(VariantKind::mono_rgb);
  v.head.fused_width = 10;
  EXPECT_THROW(build_model(v), ConfigError);
  v = ModelVariant::tiny(VariantKind::late);
  EXPECT_THROW(SingleColumnModel{v}, ConfigError);
}

}  // namespace
}  // namespace crowdfuse::model
