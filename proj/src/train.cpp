#include "crowdfuse/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "crowdfuse/errors.hpp"

namespace crowdfuse::train {
namespace {

using nlohmann::json;

void crop_flip(const data::Image& src, data::Image& dst, const AugmentParams& p) {
  dst = data::Image(p.size_y, p.size_x, src.channels);
  for (int y = 0; y < p.size_y; ++y)
    for (int x = 0; x < p.size_x; ++x) {
      const int sx = p.x0 + (p.flip ? p.size_x - 1 - x : x);
      for (int c = 0; c < src.channels; ++c) dst.at(y, x, c) = src.at(p.y0 + y, sx, c);
    }
}

}  // namespace

void Hyperparams::validate() const {
  if (crop <= 0 || batch <= 0) throw ConfigError("crop and batch must be positive");
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) throw ConfigError("flip_prob must lie in [0, 1]");
  if (!(lr >= 0.0) || !(weight_decay >= 0.0)) throw ConfigError("lr and weight_decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && adam_eps > 0.0))
    throw ConfigError("invalid Adam constants");
  if (!(sigma > 0.0)) throw ConfigError("sigma must be positive");
}

json Hyperparams::to_json() const {
  return {{"crop", crop},   {"flip_prob", flip_prob}, {"lr", lr},         {"weight_decay", weight_decay},
          {"beta1", beta1}, {"beta2", beta2},         {"adam_eps", adam_eps}, {"batch", batch},
          {"epochs", epochs}, {"sigma", sigma},       {"seed", seed}};
}

Hyperparams Hyperparams::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("hyperparameters must be a JSON object");
  Hyperparams hp;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "crop") hp.crop = value.get<int>();
      else if (key == "flip_prob") hp.flip_prob = value.get<double>();
      else if (key == "lr") hp.lr = value.get<double>();
      else if (key == "weight_decay") hp.weight_decay = value.get<double>();
      else if (key == "beta1") hp.beta1 = value.get<double>();
      else if (key == "beta2") hp.beta2 = value.get<double>();
      else if (key == "adam_eps") hp.adam_eps = value.get<double>();
      else if (key == "batch") hp.batch = value.get<int>();
      else if (key == "epochs") hp.epochs = value.get<int>();
      else if (key == "sigma") hp.sigma = value.get<double>();
      else if (key == "seed") hp.seed = value.get<std::uint64_t>();
      else throw ConfigError("unknown hyperparameter '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad hyperparameter value: ") + e.what());
  }
  hp.validate();
  return hp;
}

AugmentParams draw_augment(int height, int width, const Hyperparams& hp, Rng& rng) {
  AugmentParams p;
  p.size_x = std::min(hp.crop, width);
  p.size_y = std::min(hp.crop, height);
  p.x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(width - p.size_x) + 1));
  p.y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(height - p.size_y) + 1));
  p.flip = rng.bernoulli(hp.flip_prob);
  return p;
}

data::CrowdSample apply_augment(const data::CrowdSample& sample, const AugmentParams& p) {
  data::CrowdSample out;
  out.meta = sample.meta;
  crop_flip(sample.rgb, out.rgb, p);
  crop_flip(sample.thermal, out.thermal, p);
  for (const auto& pt : sample.points) {
    if (pt.x < p.x0 || pt.x >= p.x0 + p.size_x || pt.y < p.y0 || pt.y >= p.y0 + p.size_y) continue;
    double x = pt.x - p.x0;
    // Sub-pixel points in the last column would reflect just below zero.
    if (p.flip) x = std::max(0.0, p.size_x - 1 - x);
    out.points.push_back({x, pt.y - p.y0});
  }
  return out;
}

data::CrowdSample augment(const data::CrowdSample& sample, const Hyperparams& hp, Rng& rng) {
  return apply_augment(sample, draw_augment(sample.height(), sample.width(), hp, rng));
}

AdamW::AdamW(model::ParamList params, double lr, double weight_decay, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.var.size(), 0.0);
    v_.emplace_back(p.var.size(), 0.0);
  }
}

void AdamW::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    nn::Var var = params_[k].var;
    auto value = var.mutable_value();
    const auto grad = var.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = grad.empty() ? 0.0 : grad[i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      value[i] *= 1.0 - lr_ * wd_;
      value[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

TrainHistory train(model::CountingModel& model, std::span<const data::CrowdSample> dataset, const Hyperparams& hp,
                   const EpochCallback& on_epoch) {
  hp.validate();
  if (dataset.empty()) throw ValidationError("train: empty dataset");
  const auto params = model.parameters();
  AdamW optimizer(params, hp.lr, hp.weight_decay, hp.beta1, hp.beta2, hp.adam_eps);
  const int stride = model.variant().head.output_stride;
  const auto loss_config = loss::LossConfig::from_image_sigma(hp.sigma, stride);

  Rng order_rng = Rng(hp.seed).fork(1);
  Rng augment_rng = Rng(hp.seed).fork(2);
  std::vector<std::size_t> order(dataset.size());
  TrainHistory history;
  for (int epoch = 1; epoch <= hp.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);

    double loss_sum = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(hp.batch)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(hp.batch));
      // One crop size per batch so the crops stack.
      Hyperparams batch_hp = hp;
      for (std::size_t i = start; i < end; ++i) {
        const auto& s = dataset[order[i]];
        batch_hp.crop = std::min({batch_hp.crop, s.height(), s.width()});
      }
      std::vector<data::CrowdSample> batch;
      std::vector<std::vector<loss::GridPoint>> points;
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(augment(dataset[order[i]], batch_hp, augment_rng));
        points.push_back(loss::to_grid(batch.back().points, stride));
      }
      model::zero_grads(params);
      const auto density = model.forward(model::make_input(batch));
      double value = 0.0;
      nn::Var loss_var;
      try {
        loss_var = loss::bayesian_loss(density, points, loss_config);
        value = loss_var.item();
      } catch (const NumericError&) {
        value = NAN;
      }
      if (!std::isfinite(value)) {
        std::string ids;
        for (const auto& s : batch) ids += (ids.empty() ? "" : ",") + s.meta.id;
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(optimizer.steps() + 1) + ", samples [" + ids + "], parameter checksum " +
                           data::hex64(model::checksum(params)));
      }
      nn::backward(loss_var);
      optimizer.step();
      loss_sum += value;
      ++batches;
    }
    history.epochs.push_back({epoch, loss_sum / batches, optimizer.steps()});
    if (on_epoch) on_epoch(history.epochs.back(), model);
  }
  history.steps = optimizer.steps();
  return history;
}

json EvalResult::to_json() const {
  json rows = json::array();
  for (const auto& r : per_sample) rows.push_back({{"id", r.id}, {"y", r.truth}, {"y_hat", r.predicted}});
  return {{"mae", mae}, {"rmse", rmse}, {"n", per_sample.size()}, {"per_sample", rows}};
}

EvalResult score(std::vector<SampleResult> per_sample) {
  if (per_sample.empty()) throw ValidationError("evaluate: empty dataset");
  double abs_sum = 0.0, sq_sum = 0.0;
  for (const auto& r : per_sample) {
    const double e = r.truth - r.predicted;
    abs_sum += std::abs(e);
    sq_sum += e * e;
  }
  const double n = static_cast<double>(per_sample.size());
  EvalResult out;
  out.mae = abs_sum / n;
  out.rmse = std::sqrt(sq_sum / n);
  out.per_sample = std::move(per_sample);
  return out;
}

EvalResult evaluate(const model::CountingModel& model, std::span<const data::CrowdSample> dataset) {
  std::vector<SampleResult> rows;
  for (const auto& s : dataset) {
    const auto maps = model.predict(std::span(&s, 1));
    rows.push_back({s.meta.id, static_cast<double>(s.count()), model::predict_count(maps.front())});
  }
  return score(std::move(rows));
}

}  // namespace crowdfuse::train
