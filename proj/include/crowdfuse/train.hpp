#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "crowdfuse/fusion.hpp"
#include "crowdfuse/loss.hpp"

namespace crowdfuse::train {

struct Hyperparams {
  int crop = 256;  // square; clamped to the image size
  double flip_prob = 0.5;
  double lr = 1e-5;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch = 8;
  int epochs = 60;
  double sigma = 8.0;  // image pixels
  std::uint64_t seed = 0;

  /// Throws ConfigError on a non-positive crop or batch, negative epochs or a flip_prob outside [0, 1].
  void validate() const;

  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys are a ConfigError.
  static Hyperparams from_json(const nlohmann::json& j);
};

/// The geometric transform shared by both modalities of one sample.
struct AugmentParams {
  int x0 = 0;
  int y0 = 0;
  int size_x = 0;
  int size_y = 0;
  bool flip = false;
};

AugmentParams draw_augment(int height, int width, const Hyperparams& hp, Rng& rng);
data::CrowdSample apply_augment(const data::CrowdSample& sample, const AugmentParams& params);
/// Random crop (clamped to the image) and horizontal flip x -> W_crop - 1 - x.
data::CrowdSample augment(const data::CrowdSample& sample, const Hyperparams& hp, Rng& rng);

/// Decoupled weight decay Adam: p *= 1 - lr * wd, then the Adam update.
class AdamW {
 public:
  AdamW(model::ParamList params, double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8);

  /// Consumes the gradients currently stored on the parameters.
  void step();
  long steps() const { return t_; }
  double lr() const { return lr_; }

 private:
  model::ParamList params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, wd_, beta1_, beta2_, eps_;
  long t_ = 0;
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double mean_loss = 0.0;
  long steps = 0;  // optimizer steps taken so far
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  long steps = 0;
};

using EpochCallback = std::function<void(const EpochRecord&, const model::CountingModel&)>;

/// Runs epochs * ceil(N / batch) AdamW steps on the Bayesian loss. Throws
/// NumericError (with epoch, step and sample ids) when the loss is not finite.
TrainHistory train(model::CountingModel& model, std::span<const data::CrowdSample> dataset, const Hyperparams& hp,
                   const EpochCallback& on_epoch = {});

struct SampleResult {
  std::string id;
  double truth = 0.0;
  double predicted = 0.0;
};

struct EvalResult {
  double mae = 0.0;
  double rmse = 0.0;
  std::vector<SampleResult> per_sample;

  nlohmann::json to_json() const;
};

/// MAE and RMSE over already computed counts. Throws ValidationError when empty.
EvalResult score(std::vector<SampleResult> per_sample);
/// Counts predicted on full, uncropped images.
EvalResult evaluate(const model::CountingModel& model, std::span<const data::CrowdSample> dataset);

}  // namespace crowdfuse::train
