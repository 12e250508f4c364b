#include "advmtl/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <limits>
#include <random>

#include <nlohmann/json.hpp>

#include "advmtl/decode.hpp"
#include "advmtl/metrics.hpp"

namespace advmtl {

void TrainConfig::validate() const {
  weights.validate();
  if (epochs < 1) throw std::invalid_argument("train epochs must be >= 1");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (clip_norm < 0.0) throw std::invalid_argument("clip_norm must be >= 0");
}

NLOHMANN_JSON_SERIALIZE_ENUM(OptimizerKind, {{OptimizerKind::kSgd, "sgd"},
                                             {OptimizerKind::kAdam, "adam"}})

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"weights", c.weights},
                     {"epochs", c.epochs},
                     {"learning_rate", c.learning_rate},
                     {"batch_size", c.batch_size},
                     {"seed", c.seed},
                     {"optimizer", c.optimizer},
                     {"clip_norm", c.clip_norm},
                     {"max_train_utterances", c.max_train_utterances}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.weights = j.value("weights", d.weights);
  c.epochs = j.value("epochs", d.epochs);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.seed = j.value("seed", d.seed);
  c.optimizer = j.value("optimizer", d.optimizer);
  c.clip_norm = j.value("clip_norm", d.clip_norm);
  c.max_train_utterances = j.value("max_train_utterances", d.max_train_utterances);
  c.validate();
}

void write_train_log_csv(std::ostream& os, const TrainLog& log) {
  os << "epoch,train_l_ctc,train_l_dec,train_l_dis,train_l_mtl,"
        "valid_l_ctc,valid_l_dec,valid_l_dis,valid_l_mtl\n";
  char buf[256];
  for (const auto& e : log.epochs) {
    std::snprintf(buf, sizeof buf, "%zu,%.9f,%.9f,%.9f,%.9f,%.9f,%.9f,%.9f,%.9f\n", e.epoch,
                  e.train.l_ctc, e.train.l_dec, e.train.l_dis, e.train.l_mtl, e.valid.l_ctc,
                  e.valid.l_dec, e.valid.l_dis, e.valid.l_mtl);
    os << buf;
  }
}

TrainingDiverged::TrainingDiverged(std::size_t epoch, std::size_t batch, const std::string& why)
    : std::runtime_error("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                         std::to_string(batch) + ": " + why),
      epoch_(epoch),
      batch_(batch) {}

namespace {

void accumulate(LossBreakdown& acc, const LossBreakdown& b, double w = 1.0) {
  acc.l_ctc += w * b.l_ctc;
  acc.l_dec += w * b.l_dec;
  acc.l_dis += w * b.l_dis;
  acc.l_asr += w * b.l_asr;
  acc.l_mtl += w * b.l_mtl;
}

class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, const ModelParams& params) : cfg_(cfg) {
    if (cfg.optimizer == OptimizerKind::kAdam) {
      for (const auto& [name, t] : params.tensors()) {
        m_.emplace_back(t.numel(), 0.0);
        v_.emplace_back(t.numel(), 0.0);
      }
    }
  }

  /// Applies grads averaged over `batch` samples, then clears them.
  void step(ModelParams& params, std::size_t batch) {
    const double inv = 1.0 / static_cast<double>(batch);
    double clip = 1.0;
    if (cfg_.clip_norm > 0.0) {
      double ss = 0.0;
      for (auto& [_, t] : params.tensors())
        for (double g : t.grad()) ss += g * inv * g * inv;
      const double norm = std::sqrt(ss);
      if (norm > cfg_.clip_norm) clip = cfg_.clip_norm / norm;
    }
    const double lr = cfg_.learning_rate;
    ++t_;
    std::size_t k = 0;
    for (auto& [_, t] : params.tensors()) {
      auto val = t.mutable_values();
      auto grad = t.mutable_grad();
      if (cfg_.optimizer == OptimizerKind::kSgd) {
        for (std::size_t i = 0; i < val.size(); ++i) val[i] -= lr * clip * inv * grad[i];
      } else {
        constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
        auto& m = m_[k];
        auto& v = v_[k];
        for (std::size_t i = 0; i < val.size(); ++i) {
          const double g = clip * inv * grad[i];
          m[i] = b1 * m[i] + (1.0 - b1) * g;
          v[i] = b2 * v[i] + (1.0 - b2) * g * g;
          val[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
        }
      }
      std::fill(grad.begin(), grad.end(), 0.0);
      ++k;
    }
  }

 private:
  const TrainConfig& cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace

LossBreakdown accumulate_batch_gradients(ModelParams& params,
                                         const std::vector<const Utterance*>& batch,
                                         const MtlWeights& weights) {
  LossBreakdown sum;
  for (const Utterance* u : batch) {
    Tape::Scope scope;
    SampleLoss l = sample_mtl_loss(params, u->features.to_tensor(), u->transcript, u->accent,
                                   weights);
    if (!std::isfinite(l.parts.l_mtl)) throw NumericError("non-finite sample loss");
    backward(l.total);
    accumulate(sum, l.parts);
  }
  return sum;
}

LossBreakdown mean_loss(const ModelParams& params, const std::vector<Utterance>& utts,
                        const MtlWeights& weights) {
  if (utts.empty()) throw std::invalid_argument("mean_loss: no utterances");
  NoGradGuard no_grad;
  LossBreakdown sum;
  for (const auto& u : utts) {
    accumulate(sum, sample_mtl_loss(params, u.features.to_tensor(), u.transcript, u.accent,
                                    weights).parts);
  }
  LossBreakdown mean;
  accumulate(mean, sum, 1.0 / static_cast<double>(utts.size()));
  return mean;
}

TrainResult train_mtl(const ModelConfig& model_config, const TrainConfig& config,
                      const DatasetSplit& data, const EpochCallback& on_epoch) {
  config.validate();
  if (data.train.empty() || data.valid.empty()) {
    throw std::invalid_argument("train_mtl: train and valid splits must be nonempty");
  }
  if (config.weights.lambda_t_A * config.weights.lambda_t_C > 0.0) {
    for (const auto& u : data.train) {
      if (u.features.rows < ctc_min_frames(u.transcript)) {
        throw InfeasibleAlignment("train_mtl: utterance " + u.id + " too short for CTC");
      }
    }
  }

  ModelParams params = init_params(model_config);
  Optimizer opt(config, params);
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t per_epoch = config.max_train_utterances == 0
                                    ? order.size()
                                    : std::min(order.size(), config.max_train_utterances);

  TrainResult result;
  ModelParams best;
  double best_valid = std::numeric_limits<double>::infinity();
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochLog log;
    log.epoch = epoch;
    std::vector<const Utterance*> batch;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < per_epoch; start += config.batch_size, ++batch_index) {
      batch.clear();
      for (std::size_t i = start; i < std::min(per_epoch, start + config.batch_size); ++i)
        batch.push_back(&data.train[order[i]]);
      try {
        accumulate(log.train, accumulate_batch_gradients(params, batch, config.weights));
        opt.step(params, batch.size());
      } catch (const NumericError& e) {
        throw TrainingDiverged(epoch, batch_index, e.what());
      }
      if (!params.all_finite()) {
        throw TrainingDiverged(epoch, batch_index, "non-finite parameters");
      }
    }
    LossBreakdown mean_train;
    accumulate(mean_train, log.train, 1.0 / static_cast<double>(per_epoch));
    log.train = mean_train;
    log.valid = mean_loss(params, data.valid, config.weights);
    if (log.valid.l_mtl < best_valid) {
      best_valid = log.valid.l_mtl;
      best = params.clone(false);
      result.log.best_epoch = epoch;
    }
    result.log.epochs.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  result.log.best_valid_loss = best_valid;
  result.params = best.clone(true);
  return result;
}

int predict_accent(const ModelParams& params, const FeatureSequence& x) {
  NoGradGuard no_grad;
  const Tensor lp = discriminate(params, encode(params, x.to_tensor()));
  auto v = lp.values();
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

BenignMetrics evaluate_benign(const ModelParams& params, const std::vector<Utterance>& utts,
                              const MtlWeights& weights, std::size_t max_len) {
  if (utts.empty()) throw std::invalid_argument("evaluate_benign: no utterances");
  NoGradGuard no_grad;
  WerAccumulator wer;
  std::vector<int> pred, gold;
  for (const auto& u : utts) {
    const Tensor hidden = encode(params, u.features.to_tensor());
    wer.add(u.transcript, joint_greedy_decode(params, hidden, weights, max_len).hypothesis);
    const Tensor lp = discriminate(params, hidden);
    auto v = lp.values();
    pred.push_back(static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin()));
    gold.push_back(u.accent);
  }
  return {wer.wer(), accent_accuracy(pred, gold), utts.size()};
}

}  // namespace advmtl
