// crowdfuse: synth | train | eval | audit
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error,
// 3 numeric abort during training.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "crowdfuse/audit.hpp"
#include "crowdfuse/errors.hpp"
#include "crowdfuse/fusion.hpp"
#include "crowdfuse/synth.hpp"
#include "crowdfuse/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace crowdfuse;

namespace {

constexpr int kOk = 0;
constexpr int kRuntime = 1;
constexpr int kUsage = 2;
constexpr int kNumeric = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Relative output paths land under $CROWDFUSE_OUT_ROOT when it is set.
fs::path output_dir(const std::string& name) {
  fs::path p(name);
  if (p.is_relative())
    if (const char* root = std::getenv("CROWDFUSE_OUT_ROOT"); root && *root) p = fs::path(root) / p;
  return p;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw IoError("cannot write " + path.string());
}

json read_config(const std::string& path, const std::vector<std::string>& allowed) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config file " + path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw UsageError(path + " is not a JSON object");
  for (const auto& [key, value] : j.items())
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw UsageError("unknown config key '" + key + "' in " + path);
  return j;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string preset = "grid";
  std::string spec_file;
  std::string out;
  std::uint64_t seed = 0;
  int n = 0;
  int size = 64;
  int count = 0;
  double brightness = 128.0;
  CLI::Option* count_opt = nullptr;
};

synth::SynthSpec spec_from_json(const json& j, std::uint64_t index, std::uint64_t base_seed) {
  static const std::vector<std::string> keys{"width",         "height",       "count",         "brightness",
                                             "rgb_visibility", "thermal_visibility", "seed",   "time_of_day",
                                             "blob_sigma",    "noise"};
  synth::SynthSpec s;
  s.seed = Rng(base_seed).fork(index).next_u64();
  for (const auto& [key, value] : j.items()) {
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) throw UsageError("unknown spec key '" + key + "'");
    if (key == "width") s.width = value.get<int>();
    else if (key == "height") s.height = value.get<int>();
    else if (key == "count") s.count = value.get<int>();
    else if (key == "brightness") s.brightness_target = value.get<double>();
    else if (key == "rgb_visibility") s.visibility.rgb = value.get<double>();
    else if (key == "thermal_visibility") s.visibility.thermal = value.get<double>();
    else if (key == "seed") s.seed = value.get<std::uint64_t>();
    else if (key == "time_of_day") s.time_of_day = value.get<double>();
    else if (key == "blob_sigma") s.blob_sigma = value.get<double>();
    else if (key == "noise") s.noise = value.get<double>();
  }
  return s;
}

int cmd_synth(const SynthArgs& a) {
  std::vector<synth::SynthSpec> specs;
  if (!a.spec_file.empty()) {
    std::ifstream in(a.spec_file);
    if (!in) throw IoError("cannot read spec file " + a.spec_file);
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_array()) throw UsageError(a.spec_file + " must hold a JSON array of sample specs");
    try {
      for (std::size_t i = 0; i < j.size(); ++i) specs.push_back(spec_from_json(j[i], i, a.seed));
    } catch (const json::exception& e) {
      throw UsageError(std::string("bad spec value: ") + e.what());
    }
  } else if (a.count_opt->count() > 0) {
    const int n = a.n > 0 ? a.n : 1;
    for (int i = 0; i < n; ++i) {
      synth::SynthSpec s;
      s.width = s.height = a.size;
      s.count = a.count;
      s.brightness_target = a.brightness;
      s.seed = Rng(a.seed).fork(static_cast<std::uint64_t>(i)).next_u64();
      specs.push_back(s);
    }
  } else if (a.preset == "grid") {
    specs = synth::grid_preset(a.size, a.seed);
  } else if (a.preset == "skewed") {
    specs = synth::skewed_preset(a.n > 0 ? a.n : 100, a.size, a.seed);
  } else {
    specs = synth::overfit_preset(a.n > 0 ? a.n : 8, a.size, a.seed);
  }
  const fs::path out = output_dir(a.out);
  const auto manifest = synth::generate_dataset(specs, out);
  std::cout << "wrote " << manifest.entries.size() << " samples to " << out.string() << "\n";
  std::cout << "dataset hash " << data::hex64(data::dataset_hash(manifest)) << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct ModelArgs {
  std::string variant = "mono_thermal";
  std::string size = "b0";
  std::string deep_head_input = "shared";
  std::string iadm_gating = "sigmoid";
  bool early_six_channel = false;
};

struct TrainArgs {
  std::string config;
  std::string manifest;
  std::string out;
  ModelArgs model;
  train::Hyperparams hp;
  std::string init_weights;
  bool dry_run = false;
  std::map<std::string, CLI::Option*> opts;
};

model::ModelVariant make_variant(const ModelArgs& m, std::uint64_t seed) {
  const auto kind = model::parse_variant(m.variant);
  auto v = m.size == "tiny" ? model::ModelVariant::tiny(kind, seed) : model::ModelVariant::b0(kind, seed);
  v.early_six_channel = m.early_six_channel;
  v.deep_head_input = m.deep_head_input == "all" ? model::DeepHeadInput::all : model::DeepHeadInput::shared;
  v.iadm.gating = m.iadm_gating == "none" ? model::Gating::none : model::Gating::sigmoid;
  return v;
}

// Config file values apply unless the same setting was given as a flag.
void apply_train_config(TrainArgs& a) {
  if (a.config.empty()) return;
  const json j = read_config(a.config, {"manifest", "out", "variant", "model", "deep_head_input", "iadm_gating",
                                        "early_six_channel", "init_weights", "hyperparams"});
  auto unset = [&](const std::string& flag) { return a.opts.at(flag)->count() == 0; };
  try {
    if (j.contains("manifest") && unset("manifest")) a.manifest = j["manifest"].get<std::string>();
    if (j.contains("out") && unset("out")) a.out = j["out"].get<std::string>();
    if (j.contains("variant") && unset("variant")) a.model.variant = j["variant"].get<std::string>();
    if (j.contains("model") && unset("model")) a.model.size = j["model"].get<std::string>();
    if (j.contains("deep_head_input") && unset("deep-head-input"))
      a.model.deep_head_input = j["deep_head_input"].get<std::string>();
    if (j.contains("iadm_gating") && unset("iadm-gating")) a.model.iadm_gating = j["iadm_gating"].get<std::string>();
    if (j.contains("early_six_channel") && unset("early-six-channel"))
      a.model.early_six_channel = j["early_six_channel"].get<bool>();
    if (j.contains("init_weights") && unset("init-weights")) a.init_weights = j["init_weights"].get<std::string>();
  } catch (const json::exception& e) {
    throw UsageError(std::string("bad config value: ") + e.what());
  }
  if (j.contains("hyperparams")) {
    train::Hyperparams from_file;
    try {
      from_file = train::Hyperparams::from_json(j["hyperparams"]);
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    }
    const json given = j["hyperparams"];
    auto take = [&](const char* key, const char* flag, auto& field, const auto& value) {
      if (given.contains(key) && unset(flag)) field = value;
    };
    take("crop", "crop", a.hp.crop, from_file.crop);
    take("flip_prob", "flip-prob", a.hp.flip_prob, from_file.flip_prob);
    take("lr", "lr", a.hp.lr, from_file.lr);
    take("weight_decay", "weight-decay", a.hp.weight_decay, from_file.weight_decay);
    take("batch", "batch", a.hp.batch, from_file.batch);
    take("epochs", "epochs", a.hp.epochs, from_file.epochs);
    take("sigma", "sigma", a.hp.sigma, from_file.sigma);
    take("seed", "seed", a.hp.seed, from_file.seed);
    take("beta1", "beta1", a.hp.beta1, from_file.beta1);
    take("beta2", "beta2", a.hp.beta2, from_file.beta2);
    take("adam_eps", "adam-eps", a.hp.adam_eps, from_file.adam_eps);
  }
}

std::string history_csv(const train::TrainHistory& h) {
  std::string out = "epoch,mean_loss,steps\n";
  char buf[96];
  for (const auto& r : h.epochs) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%ld\n", r.epoch, r.mean_loss, r.steps);
    out += buf;
  }
  return out;
}

int cmd_train(TrainArgs& a) {
  apply_train_config(a);
  if (a.manifest.empty()) throw UsageError("--manifest is required (flag or config)");
  if (a.out.empty()) throw UsageError("--out is required (flag or config)");
  try {
    a.hp.validate();
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  if (a.model.size != "b0" && a.model.size != "tiny") throw UsageError("model must be b0 or tiny");
  model::ModelVariant variant;
  try {
    variant = make_variant(a.model, a.hp.seed);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  const auto manifest = data::load_manifest(a.manifest);
  const auto dataset = data::load_dataset(manifest);
  if (dataset.empty()) throw ValidationError("manifest " + a.manifest + " lists no samples");

  const fs::path out = output_dir(a.out);
  fs::create_directories(out / "checkpoints");
  json run = {{"command", "train"},
              {"manifest", a.manifest},
              {"dataset_hash", data::hex64(data::dataset_hash(manifest))},
              {"variant", variant.to_json()},
              {"hyperparams", a.hp.to_json()},
              {"init_weights", a.init_weights},
              {"seed", a.hp.seed}};
  write_text(out / "run.json", run.dump(2) + "\n");
  if (a.dry_run) {
    std::cout << "wrote " << (out / "run.json").string() << "\n";
    return kOk;
  }

  auto model = model::build_model(variant);
  if (!a.init_weights.empty()) model::load_parameters(model->parameters(), a.init_weights);
  model::save_checkpoint(*model, out / "checkpoints" / "epoch_000.ckpt");

  train::TrainHistory history;
  try {
    history = train::train(*model, dataset, a.hp, [&](const train::EpochRecord& r, const model::CountingModel& m) {
      history.epochs.push_back(r);
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%03d.ckpt", r.epoch);
      model::save_checkpoint(m, out / "checkpoints" / name);
      write_text(out / "history.csv", history_csv(history));
      std::cout << "epoch " << r.epoch << " loss " << r.mean_loss << "\n";
    });
  } catch (const NumericError& e) {
    model::save_checkpoint(*model, out / "nan_snapshot.ckpt");
    write_text(out / "history.csv", history_csv(history));
    std::cerr << "numeric abort: " << e.what() << "\nsnapshot written to " << (out / "nan_snapshot.ckpt").string()
              << "\n";
    return kNumeric;
  }
  write_text(out / "history.csv", history_csv(history));
  model::save_checkpoint(*model, out / "model.ckpt");
  std::cout << "trained " << model::to_string(variant.kind) << " for " << history.steps << " steps; checkpoint "
            << (out / "model.ckpt").string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string manifest;
  std::string out;
  std::string variant;
};

int cmd_eval(const EvalArgs& a) {
  const auto stored = model::read_checkpoint_variant(a.checkpoint);
  if (!a.variant.empty() && model::parse_variant(a.variant) != stored.kind)
    throw ConfigError("checkpoint " + a.checkpoint + " holds a " + model::to_string(stored.kind) +
                      " model, not " + a.variant);
  const auto model = model::load_checkpoint(a.checkpoint);
  const auto dataset = data::load_dataset(data::load_manifest(a.manifest));
  if (dataset.empty()) throw ValidationError("manifest " + a.manifest + " lists no samples");
  const auto result = train::evaluate(*model, dataset);
  std::printf("MAE %.6f\nRMSE %.6f\nN %zu\n", result.mae, result.rmse, result.per_sample.size());
  if (!a.out.empty()) write_text(output_dir(a.out) / "eval.json", result.to_json().dump(2) + "\n");
  return kOk;
}

// ---------------------------------------------------------------------------

struct AuditArgs {
  std::string manifest;
  std::string out;
  audit::AuditOptions options;
};

int cmd_audit(const AuditArgs& a) {
  const auto manifest = data::load_manifest(a.manifest);
  const fs::path out = output_dir(a.out);
  const auto report = audit::run_audit(manifest, a.options, out);
  std::cout << report.to_text();
  std::cout << "artifacts in " << out.string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"RGB-thermal crowd counting: synthetic data, training, evaluation and dataset audit"};
  app.require_subcommand(1);

  SynthArgs synth_args;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic RGB-T dataset");
  synth_cmd->add_option("--preset", synth_args.preset, "grid, skewed or overfit")
      ->check(CLI::IsMember({"grid", "skewed", "overfit"}));
  synth_cmd->add_option("--spec", synth_args.spec_file, "JSON array of per-sample specs")->check(CLI::ExistingFile);
  synth_cmd->add_option("--out", synth_args.out, "Output directory")->required();
  synth_cmd->add_option("--seed", synth_args.seed, "Random seed");
  synth_cmd->add_option("--n", synth_args.n, "Number of samples (skewed, overfit, --count)")
      ->check(CLI::PositiveNumber);
  synth_cmd->add_option("--size", synth_args.size, "Image side in pixels")->check(CLI::Range(16, 4096));
  synth_args.count_opt = synth_cmd->add_option("--count", synth_args.count, "People per image")
                             ->check(CLI::NonNegativeNumber);
  synth_cmd->add_option("--brightness", synth_args.brightness, "Target brightness with --count")
      ->check(CLI::Range(0.0, 255.0));

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train a counting model");
  auto& to = train_args.opts;
  train_cmd->add_option("--config", train_args.config, "JSON run config; flags override it");
  to["manifest"] = train_cmd->add_option("--manifest", train_args.manifest, "Dataset manifest");
  to["out"] = train_cmd->add_option("--out", train_args.out, "Run directory");
  to["variant"] = train_cmd->add_option("--variant", train_args.model.variant, "mono_rgb, mono_thermal, early, late or deep")
                      ->check(CLI::IsMember({"mono_rgb", "mono_thermal", "early", "late", "deep"}));
  to["model"] = train_cmd->add_option("--model", train_args.model.size, "Backbone preset: b0 or tiny")
                    ->check(CLI::IsMember({"b0", "tiny"}));
  to["deep-head-input"] = train_cmd->add_option("--deep-head-input", train_args.model.deep_head_input,
                                                "Deep fusion head input: shared or all")
                              ->check(CLI::IsMember({"shared", "all"}));
  to["iadm-gating"] = train_cmd->add_option("--iadm-gating", train_args.model.iadm_gating, "sigmoid or none")
                          ->check(CLI::IsMember({"sigmoid", "none"}));
  to["early-six-channel"] =
      train_cmd->add_flag("--early-six-channel", train_args.model.early_six_channel, "Replicate thermal to 3 channels");
  to["init-weights"] = train_cmd->add_option("--init-weights", train_args.init_weights, "Parameter file to start from");
  train_cmd->add_flag("--dry-run", train_args.dry_run, "Write run.json and stop");
  to["crop"] = train_cmd->add_option("--crop", train_args.hp.crop, "Square crop size");
  to["flip-prob"] = train_cmd->add_option("--flip-prob", train_args.hp.flip_prob, "Horizontal flip probability");
  to["lr"] = train_cmd->add_option("--lr", train_args.hp.lr, "Learning rate");
  to["weight-decay"] = train_cmd->add_option("--weight-decay", train_args.hp.weight_decay, "Decoupled weight decay");
  to["batch"] = train_cmd->add_option("--batch", train_args.hp.batch, "Batch size");
  to["epochs"] = train_cmd->add_option("--epochs", train_args.hp.epochs, "Epochs");
  to["sigma"] = train_cmd->add_option("--sigma", train_args.hp.sigma, "Loss sigma in image pixels");
  to["seed"] = train_cmd->add_option("--seed", train_args.hp.seed, "Random seed");
  to["beta1"] = train_cmd->add_option("--beta1", train_args.hp.beta1, "Adam beta1");
  to["beta2"] = train_cmd->add_option("--beta2", train_args.hp.beta2, "Adam beta2");
  to["adam-eps"] = train_cmd->add_option("--adam-eps", train_args.hp.adam_eps, "Adam epsilon");

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint (MAE, RMSE)");
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--manifest", eval_args.manifest, "Dataset manifest")->required();
  eval_cmd->add_option("--out", eval_args.out, "Directory for eval.json");
  eval_cmd->add_option("--variant", eval_args.variant, "Expected variant");

  AuditArgs audit_args;
  auto* audit_cmd = app.add_subcommand("audit", "Audit a dataset for brightness/count bias");
  audit_cmd->add_option("--manifest", audit_args.manifest, "Dataset manifest")->required();
  audit_cmd->add_option("--out", audit_args.out, "Report directory")->required();
  audit_cmd->add_option("--fraction", audit_args.options.fraction, "Share of pairs rendered as overlays")
      ->check(CLI::Range(0.0, 1.0));
  audit_cmd->add_option("--seed", audit_args.options.seed, "Subset seed");
  audit_cmd->add_option("--min-r", audit_args.options.imbalance.min_r, "Flag when pearson r falls below this");
  audit_cmd->add_option("--top-count-quantile", audit_args.options.imbalance.top_count_quantile,
                        "Quantile defining high-count samples")
      ->check(CLI::Range(0.0, 1.0));
  audit_cmd->add_option("--dark-quantile", audit_args.options.imbalance.dark_brightness_quantile,
                        "Brightness quantile high-count samples must reach")
      ->check(CLI::Range(0.0, 1.0));
  audit_cmd->add_option("--time-bins", audit_args.options.time.bins, "Capture-time bins over 24 h")
      ->check(CLI::Range(2, 96));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*synth_cmd) return cmd_synth(synth_args);
    if (*train_cmd) return cmd_train(train_args);
    if (*eval_cmd) return cmd_eval(eval_args);
    if (*audit_cmd) return cmd_audit(audit_args);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
