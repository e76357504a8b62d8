#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>

#include <json.hpp>

#include "crowdfuse/backbone.hpp"
#include "crowdfuse/data.hpp"
#include "crowdfuse/head.hpp"

namespace crowdfuse::model {

enum class VariantKind { mono_rgb, mono_thermal, early, late, deep };

std::string to_string(VariantKind kind);
/// Throws ConfigError for an unknown name.
VariantKind parse_variant(const std::string& name);

enum class Gating { sigmoid, none };
enum class DeepHeadInput { shared, all };

/// Exchange convolutions are 1x1 at the stage width.
struct IadmConfig {
  Gating gating = Gating::sigmoid;

  bool operator==(const IadmConfig&) const = default;
};

struct ModelVariant {
  VariantKind kind = VariantKind::mono_rgb;
  BackboneConfig backbone;  // in_channels is set per column by the builder
  HeadConfig head;
  bool early_six_channel = false;  // early fusion: replicate thermal to 3 channels
  IadmConfig iadm;
  DeepHeadInput deep_head_input = DeepHeadInput::shared;
  std::uint64_t seed = 0;

  static ModelVariant tiny(VariantKind kind, std::uint64_t seed = 0);
  static ModelVariant b0(VariantKind kind, std::uint64_t seed = 0);

  /// Channels of the image fed to a single-column variant.
  int input_channels() const;

  nlohmann::json to_json() const;
  static ModelVariant from_json(const nlohmann::json& j);

  bool operator==(const ModelVariant&) const = default;
};

/// Normalised network inputs for a batch of equally sized samples.
struct ModelInput {
  nn::Var rgb;      // (B, H, W, 3)
  nn::Var thermal;  // (B, H, W, 1)
  int height = 0;
  int width = 0;
};

ModelInput make_input(std::span<const data::CrowdSample> samples);

struct StageTriple {
  nn::Var rgb;
  nn::Var thermal;
  nn::Var shared;
};

/// Gated residual exchange between two modality-specific maps and a shared map.
///
/// Aggregation: shared += V_a(x) * gate(G_a(x)) with x = concat(rgb, thermal).
/// Distribution: rgb += V_r(shared') * gate(G_r(shared')), likewise thermal.
class IadmExchange {
 public:
  IadmExchange() = default;
  IadmExchange(int width, const IadmConfig& config, Rng& rng);

  /// Throws ShapeError unless all three maps share one shape.
  StageTriple operator()(const StageTriple& in) const;
  void collect(ParamList& out, const std::string& prefix) const;

 private:
  nn::Var gated(const Conv2d& value, const Conv2d& gate, const nn::Var& x) const;

  IadmConfig config_;
  Conv2d agg_value_, agg_gate_;
  Conv2d rgb_value_, rgb_gate_;
  Conv2d thermal_value_, thermal_gate_;
};

StageTriple iadm_exchange(const IadmExchange& exchange, const StageTriple& in);

class CountingModel {
 public:
  explicit CountingModel(ModelVariant variant) : variant_(std::move(variant)) {}
  virtual ~CountingModel() = default;
  CountingModel(const CountingModel&) = delete;
  CountingModel& operator=(const CountingModel&) = delete;

  const ModelVariant& variant() const { return variant_; }

  /// Density of shape (B, ceil(H / 4), ceil(W / 4), 1).
  virtual nn::Var forward(const ModelInput& input) const = 0;
  virtual ParamList parameters() const = 0;

  /// Inference without graph recording; samples may differ in size.
  std::vector<DensityMap> predict(std::span<const data::CrowdSample> samples) const;

 protected:
  nn::Var crop_to_input(const nn::Var& density, const ModelInput& input) const;

 private:
  ModelVariant variant_;
};

/// mono_rgb, mono_thermal and early fusion: one backbone and one head.
class SingleColumnModel final : public CountingModel {
 public:
  explicit SingleColumnModel(ModelVariant variant);
  nn::Var forward(const ModelInput& input) const override;
  ParamList parameters() const override;

  nn::Var select_input(const ModelInput& input) const;
  const Backbone& backbone() const { return backbone_; }
  const RegressionHead& head() const { return head_; }

 private:
  Backbone backbone_;
  RegressionHead head_;
};

/// Two full columns; their branch features are concatenated before the 1x1 projection.
class LateFusionModel final : public CountingModel {
 public:
  explicit LateFusionModel(ModelVariant variant);
  nn::Var forward(const ModelInput& input) const override;
  ParamList parameters() const override;

 private:
  Backbone rgb_backbone_, thermal_backbone_;
  DilatedBranches rgb_branches_, thermal_branches_;
  DensityProjection projection_;
};

/// Modality-specific columns plus a modality-shared column, exchanging
/// information after every backbone stage.
class DeepFusionModel final : public CountingModel {
 public:
  explicit DeepFusionModel(ModelVariant variant);
  nn::Var forward(const ModelInput& input) const override;
  ParamList parameters() const override;

  /// Pyramids of the rgb, thermal and shared columns after each exchange.
  std::array<FeaturePyramid, 3> encode_columns(const ModelInput& input) const;

 private:
  Backbone rgb_backbone_, thermal_backbone_, shared_backbone_;
  std::vector<IadmExchange> exchanges_;
  RegressionHead head_;
};

/// Throws ConfigError for an invalid variant.
std::unique_ptr<CountingModel> build_model(const ModelVariant& variant);

/// Exact number of learnable scalars.
std::size_t count_parameters(const CountingModel& model);

/// Checkpoint file: "CFCKPT01", u64 header length, JSON variant header, then
/// the parameter block written by write_parameters().
void save_checkpoint(const CountingModel& model, const std::filesystem::path& path);
std::unique_ptr<CountingModel> load_checkpoint(const std::filesystem::path& path);
ModelVariant read_checkpoint_variant(const std::filesystem::path& path);

}  // namespace crowdfuse::model
