#include "crowdfuse/fusion.hpp"

#include <cstring>
#include <fstream>

#include "crowdfuse/errors.hpp"

namespace crowdfuse::model {
namespace {

using nlohmann::json;

constexpr double kRgbMean[3] = {0.485, 0.456, 0.406};
constexpr double kRgbStd[3] = {0.229, 0.224, 0.225};
constexpr double kThermalMean = 0.5;
constexpr double kThermalStd = 0.25;

constexpr char kCheckpointMagic[8] = {'C', 'F', 'C', 'K', 'P', 'T', '0', '1'};

BackboneConfig with_channels(BackboneConfig cfg, int channels) {
  cfg.in_channels = channels;
  return cfg;
}

InitPolicy column_init(std::uint64_t seed, std::uint64_t salt) { return InitPolicy{Rng(seed).fork(salt).next_u64(), {}}; }

// Small-scale projection init keeps the initial density near zero but not dead.
DensityProjection make_projection(int in_width, Rng& rng) {
  DensityProjection p(in_width, rng);
  auto w = p.conv().weight;
  for (double& v : w.mutable_value()) v = rng.normal() * 0.01;
  auto b = p.conv().bias;
  for (double& v : b.mutable_value()) v = 1e-3;
  return p;
}

RegressionHead make_head(const HeadConfig& cfg, Rng& rng) {
  RegressionHead head(cfg, rng);
  auto w = head.projection().conv().weight;
  for (double& v : w.mutable_value()) v = rng.normal() * 0.01;
  auto b = head.projection().conv().bias;
  for (double& v : b.mutable_value()) v = 1e-3;
  return head;
}

void append(ParamList& out, ParamList more) {
  out.insert(out.end(), std::make_move_iterator(more.begin()), std::make_move_iterator(more.end()));
}

json stage_json(const StageConfig& s) {
  return {{"patch_size", s.patch_size}, {"stride", s.stride}, {"width", s.width}, {"heads", s.heads},
          {"sr_ratio", s.sr_ratio},     {"depth", s.depth},   {"mlp_ratio", s.mlp_ratio}};
}

}  // namespace

std::string to_string(VariantKind kind) {
  switch (kind) {
    case VariantKind::mono_rgb: return "mono_rgb";
    case VariantKind::mono_thermal: return "mono_thermal";
    case VariantKind::early: return "early";
    case VariantKind::late: return "late";
    case VariantKind::deep: return "deep";
  }
  return "unknown";
}

VariantKind parse_variant(const std::string& name) {
  for (auto k : {VariantKind::mono_rgb, VariantKind::mono_thermal, VariantKind::early, VariantKind::late,
                 VariantKind::deep})
    if (to_string(k) == name) return k;
  throw ConfigError("unknown variant '" + name + "' (expected mono_rgb, mono_thermal, early, late or deep)");
}

ModelVariant ModelVariant::tiny(VariantKind kind, std::uint64_t seed) {
  ModelVariant v;
  v.kind = kind;
  v.backbone = BackboneConfig::tiny();
  v.head = HeadConfig::tiny(v.backbone);
  v.seed = seed;
  return v;
}

ModelVariant ModelVariant::b0(VariantKind kind, std::uint64_t seed) {
  ModelVariant v;
  v.kind = kind;
  v.backbone = BackboneConfig::b0();
  v.head = HeadConfig::b0(v.backbone);
  v.seed = seed;
  return v;
}

int ModelVariant::input_channels() const {
  switch (kind) {
    case VariantKind::mono_rgb: return 3;
    case VariantKind::mono_thermal: return 1;
    case VariantKind::early: return early_six_channel ? 6 : 4;
    default: throw ConfigError("input_channels: " + to_string(kind) + " has more than one column");
  }
}

json ModelVariant::to_json() const {
  json stages = json::array();
  for (const auto& s : backbone.stages) stages.push_back(stage_json(s));
  return {{"kind", to_string(kind)},
          {"backbone", {{"stages", stages}}},
          {"head",
           {{"fused_width", head.fused_width},
            {"branch_width", head.branch_width},
            {"dilation_rates", head.dilation_rates},
            {"output_stride", head.output_stride}}},
          {"early_six_channel", early_six_channel},
          {"iadm_gating", iadm.gating == Gating::sigmoid ? "sigmoid" : "none"},
          {"deep_head_input", deep_head_input == DeepHeadInput::shared ? "shared" : "all"},
          {"seed", seed}};
}

ModelVariant ModelVariant::from_json(const json& j) {
  try {
    ModelVariant v;
    v.kind = parse_variant(j.at("kind").get<std::string>());
    for (const auto& s : j.at("backbone").at("stages")) {
      v.backbone.stages.push_back({s.at("patch_size").get<int>(), s.at("stride").get<int>(),
                                   s.at("width").get<int>(), s.at("heads").get<int>(),
                                   s.at("sr_ratio").get<int>(), s.at("depth").get<int>(),
                                   s.at("mlp_ratio").get<int>()});
    }
    const auto& h = j.at("head");
    v.head.fused_width = h.at("fused_width").get<int>();
    v.head.branch_width = h.at("branch_width").get<int>();
    v.head.dilation_rates = h.at("dilation_rates").get<std::vector<int>>();
    v.head.output_stride = h.at("output_stride").get<int>();
    v.early_six_channel = j.at("early_six_channel").get<bool>();
    const auto gating = j.at("iadm_gating").get<std::string>();
    if (gating != "sigmoid" && gating != "none") throw ConfigError("unknown iadm_gating '" + gating + "'");
    v.iadm.gating = gating == "sigmoid" ? Gating::sigmoid : Gating::none;
    const auto head_input = j.at("deep_head_input").get<std::string>();
    if (head_input != "shared" && head_input != "all")
      throw ConfigError("unknown deep_head_input '" + head_input + "'");
    v.deep_head_input = head_input == "shared" ? DeepHeadInput::shared : DeepHeadInput::all;
    v.seed = j.at("seed").get<std::uint64_t>();
    return v;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed model variant: ") + e.what());
  }
}

ModelInput make_input(std::span<const data::CrowdSample> samples) {
  if (samples.empty()) throw ShapeError("make_input: empty batch");
  const int H = samples[0].height(), W = samples[0].width();
  const int B = static_cast<int>(samples.size());
  std::vector<double> rgb(static_cast<std::size_t>(B) * H * W * 3);
  std::vector<double> thermal(static_cast<std::size_t>(B) * H * W);
  for (int b = 0; b < B; ++b) {
    const auto& s = samples[b];
    if (s.height() != H || s.width() != W || s.thermal.height != H || s.thermal.width != W)
      throw ShapeError("make_input: samples in a batch must share one size");
    const std::size_t pix = static_cast<std::size_t>(H) * W;
    for (std::size_t p = 0; p < pix; ++p) {
      for (int c = 0; c < 3; ++c)
        rgb[(b * pix + p) * 3 + c] = (s.rgb.pixels[p * 3 + c] / 255.0 - kRgbMean[c]) / kRgbStd[c];
      thermal[b * pix + p] = (s.thermal.pixels[p] / 255.0 - kThermalMean) / kThermalStd;
    }
  }
  return {nn::constant({B, H, W, 3}, std::move(rgb)), nn::constant({B, H, W, 1}, std::move(thermal)), H, W};
}

// ---------------------------------------------------------------------------

IadmExchange::IadmExchange(int width, const IadmConfig& config, Rng& rng)
    : config_(config),
      agg_value_(2 * width, width, 1, rng, {}),
      agg_gate_(2 * width, width, 1, rng, {}),
      rgb_value_(width, width, 1, rng, {}),
      rgb_gate_(width, width, 1, rng, {}),
      thermal_value_(width, width, 1, rng, {}),
      thermal_gate_(width, width, 1, rng, {}) {
  // Start as a gentle perturbation of the independent columns.
  for (const Conv2d* c : {&agg_value_, &rgb_value_, &thermal_value_}) {
    nn::Var w = c->weight;
    for (double& v : w.mutable_value()) v = rng.truncated_normal(0.02);
  }
}

nn::Var IadmExchange::gated(const Conv2d& value, const Conv2d& gate, const nn::Var& x) const {
  const nn::Var v = value(x);
  if (config_.gating == Gating::none) return v;
  return nn::mul(v, nn::sigmoid(gate(x)));
}

StageTriple IadmExchange::operator()(const StageTriple& in) const {
  if (in.rgb.shape() != in.thermal.shape() || in.rgb.shape() != in.shared.shape())
    throw ShapeError("iadm: rgb " + nn::to_string(in.rgb.shape()) + ", thermal " +
                     nn::to_string(in.thermal.shape()) + " and shared " + nn::to_string(in.shared.shape()) +
                     " must match");
  const std::array<nn::Var, 2> pair{in.rgb, in.thermal};
  StageTriple out;
  out.shared = nn::add(in.shared, gated(agg_value_, agg_gate_, nn::concat_last(pair)));
  out.rgb = nn::add(in.rgb, gated(rgb_value_, rgb_gate_, out.shared));
  out.thermal = nn::add(in.thermal, gated(thermal_value_, thermal_gate_, out.shared));
  return out;
}

void IadmExchange::collect(ParamList& out, const std::string& prefix) const {
  agg_value_.collect(out, prefix + ".agg_value");
  agg_gate_.collect(out, prefix + ".agg_gate");
  rgb_value_.collect(out, prefix + ".rgb_value");
  rgb_gate_.collect(out, prefix + ".rgb_gate");
  thermal_value_.collect(out, prefix + ".thermal_value");
  thermal_gate_.collect(out, prefix + ".thermal_gate");
}

StageTriple iadm_exchange(const IadmExchange& exchange, const StageTriple& in) { return exchange(in); }

// ---------------------------------------------------------------------------

std::vector<DensityMap> CountingModel::predict(std::span<const data::CrowdSample> samples) const {
  nn::NoGradGuard guard;
  std::vector<DensityMap> maps;
  for (const auto& s : samples) {
    const auto density = forward(make_input(std::span(&s, 1)));
    maps.push_back(to_density_maps(density, variant_.head.output_stride).front());
  }
  return maps;
}

nn::Var CountingModel::crop_to_input(const nn::Var& density, const ModelInput& input) const {
  const int s = variant_.head.output_stride;
  return nn::crop(density, (input.height + s - 1) / s, (input.width + s - 1) / s);
}

SingleColumnModel::SingleColumnModel(ModelVariant v) : CountingModel(std::move(v)) {
  const auto& var = variant();
  if (var.kind == VariantKind::late || var.kind == VariantKind::deep)
    throw ConfigError("SingleColumnModel cannot build " + to_string(var.kind));
  backbone_ = build_backbone(with_channels(var.backbone, var.input_channels()), column_init(var.seed, 1));
  Rng head_rng = Rng(var.seed).fork(100);
  head_ = make_head(var.head, head_rng);
}

nn::Var SingleColumnModel::select_input(const ModelInput& input) const {
  switch (variant().kind) {
    case VariantKind::mono_rgb: return input.rgb;
    case VariantKind::mono_thermal: return input.thermal;
    default: {
      std::vector<nn::Var> parts{input.rgb, input.thermal};
      if (variant().early_six_channel) parts = {input.rgb, input.thermal, input.thermal, input.thermal};
      return nn::concat_last(parts);
    }
  }
}

nn::Var SingleColumnModel::forward(const ModelInput& input) const {
  const auto pyramid = backbone_.encode(select_input(input));
  return crop_to_input(head_(aggregate(pyramid)), input);
}

ParamList SingleColumnModel::parameters() const {
  ParamList out = backbone_.parameters("backbone");
  head_.collect(out, "head");
  return out;
}

LateFusionModel::LateFusionModel(ModelVariant v) : CountingModel(std::move(v)) {
  const auto& var = variant();
  rgb_backbone_ = build_backbone(with_channels(var.backbone, 3), column_init(var.seed, 1));
  thermal_backbone_ = build_backbone(with_channels(var.backbone, 1), column_init(var.seed, 2));
  var.head.validate();
  Rng rgb_rng = Rng(var.seed).fork(100);
  Rng thermal_rng = Rng(var.seed).fork(101);
  Rng proj_rng = Rng(var.seed).fork(102);
  rgb_branches_ = DilatedBranches(var.head, rgb_rng);
  thermal_branches_ = DilatedBranches(var.head, thermal_rng);
  projection_ = make_projection(2 * var.head.feature_width(), proj_rng);
}

nn::Var LateFusionModel::forward(const ModelInput& input) const {
  const std::array<nn::Var, 2> features{rgb_branches_(aggregate(rgb_backbone_.encode(input.rgb))),
                                        thermal_branches_(aggregate(thermal_backbone_.encode(input.thermal)))};
  return crop_to_input(projection_(nn::concat_last(features)), input);
}

ParamList LateFusionModel::parameters() const {
  ParamList out = rgb_backbone_.parameters("rgb.backbone");
  rgb_branches_.collect(out, "rgb.head");
  append(out, thermal_backbone_.parameters("thermal.backbone"));
  thermal_branches_.collect(out, "thermal.head");
  projection_.collect(out, "head.proj");
  return out;
}

DeepFusionModel::DeepFusionModel(ModelVariant v) : CountingModel(std::move(v)) {
  const auto& var = variant();
  rgb_backbone_ = build_backbone(with_channels(var.backbone, 3), column_init(var.seed, 1));
  thermal_backbone_ = build_backbone(with_channels(var.backbone, 1), column_init(var.seed, 2));
  shared_backbone_ = build_backbone(with_channels(var.backbone, 4), column_init(var.seed, 3));
  Rng iadm_rng = Rng(var.seed).fork(200);
  for (const auto& s : var.backbone.stages) exchanges_.emplace_back(s.width, var.iadm, iadm_rng);
  Rng head_rng = Rng(var.seed).fork(100);
  head_ = make_head(var.head, head_rng);
}

std::array<FeaturePyramid, 3> DeepFusionModel::encode_columns(const ModelInput& input) const {
  const std::array<nn::Var, 2> stacked{input.rgb, input.thermal};
  StageTriple x{rgb_backbone_.pad_input(input.rgb), thermal_backbone_.pad_input(input.thermal),
                shared_backbone_.pad_input(nn::concat_last(stacked))};
  std::array<FeaturePyramid, 3> pyramids;
  for (int k = 0; k < variant().backbone.stage_count(); ++k) {
    x = exchanges_[k]({rgb_backbone_.run_stage(k, x.rgb), thermal_backbone_.run_stage(k, x.thermal),
                       shared_backbone_.run_stage(k, x.shared)});
    pyramids[0].maps.push_back(x.rgb);
    pyramids[1].maps.push_back(x.thermal);
    pyramids[2].maps.push_back(x.shared);
  }
  return pyramids;
}

nn::Var DeepFusionModel::forward(const ModelInput& input) const {
  const auto pyramids = encode_columns(input);
  FeaturePyramid head_input = pyramids[2];
  if (variant().deep_head_input == DeepHeadInput::all) {
    for (std::size_t k = 0; k < head_input.size(); ++k)
      head_input.maps[k] = nn::add(nn::add(pyramids[0][k], pyramids[1][k]), pyramids[2][k]);
  }
  return crop_to_input(head_(aggregate(head_input)), input);
}

ParamList DeepFusionModel::parameters() const {
  ParamList out = rgb_backbone_.parameters("rgb.backbone");
  append(out, thermal_backbone_.parameters("thermal.backbone"));
  append(out, shared_backbone_.parameters("shared.backbone"));
  for (std::size_t k = 0; k < exchanges_.size(); ++k) exchanges_[k].collect(out, "iadm.stage" + std::to_string(k));
  head_.collect(out, "head");
  return out;
}

std::unique_ptr<CountingModel> build_model(const ModelVariant& variant) {
  variant.backbone.validate();
  variant.head.validate();
  int fused = 0;
  for (int w : variant.backbone.widths()) fused += w;
  if (variant.head.fused_width != fused)
    throw ConfigError("head fused_width " + std::to_string(variant.head.fused_width) +
                      " does not match the backbone's summed widths " + std::to_string(fused));
  switch (variant.kind) {
    case VariantKind::mono_rgb:
    case VariantKind::mono_thermal:
    case VariantKind::early: return std::make_unique<SingleColumnModel>(variant);
    case VariantKind::late: return std::make_unique<LateFusionModel>(variant);
    case VariantKind::deep: return std::make_unique<DeepFusionModel>(variant);
  }
  throw ConfigError("invalid variant kind");
}

std::size_t count_parameters(const CountingModel& model) { return count_scalars(model.parameters()); }

void save_checkpoint(const CountingModel& model, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  const std::string header = model.variant().to_json().dump();
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  const std::uint64_t len = header.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  write_parameters(model.parameters(), out);
  if (!out) throw IoError("write failed for " + path.string());
}

namespace {

ModelVariant read_header(std::istream& in, const std::string& source) {
  char magic[sizeof kCheckpointMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw IoError(source + " is not a checkpoint file");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || len > (1u << 20)) throw IoError(source + ": corrupt checkpoint header");
  std::string header(len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError(source + ": truncated checkpoint header");
  json j = json::parse(header, nullptr, false);
  if (j.is_discarded()) throw IoError(source + ": checkpoint header is not JSON");
  return ModelVariant::from_json(j);
}

}  // namespace

ModelVariant read_checkpoint_variant(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  return read_header(in, path.string());
}

std::unique_ptr<CountingModel> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  auto model = build_model(read_header(in, path.string()));
  read_parameters(model->parameters(), in, path.string());
  return model;
}

}  // namespace crowdfuse::model
