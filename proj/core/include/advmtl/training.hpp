#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "advmtl/losses.hpp"
#include "advmtl/model.hpp"
#include "advmtl/toyspeech.hpp"

namespace advmtl {

enum class OptimizerKind { kSgd, kAdam };

struct TrainConfig {
  MtlWeights weights;
  std::size_t epochs = 30;
  double learning_rate = 1e-3;
  std::size_t batch_size = 8;
  std::uint64_t seed = 1;
  OptimizerKind optimizer = OptimizerKind::kSgd;
  /// Global gradient-norm clip per batch; 0 disables.
  double clip_norm = 0.0;
  /// Train on at most this many utterances per epoch; 0 uses all.
  std::size_t max_train_utterances = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct EpochLog {
  std::size_t epoch = 0;
  LossBreakdown train;
  LossBreakdown valid;
};

struct TrainLog {
  std::vector<EpochLog> epochs;
  std::size_t best_epoch = 0;
  double best_valid_loss = 0.0;
};

/// CSV: epoch, train_{l_ctc,l_dec,l_dis,l_mtl}, valid_{...}.
void write_train_log_csv(std::ostream& os, const TrainLog& log);

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::size_t epoch, std::size_t batch, const std::string& why);
  std::size_t epoch() const { return epoch_; }
  std::size_t batch() const { return batch_; }

 private:
  std::size_t epoch_;
  std::size_t batch_;
};

struct TrainResult {
  ModelParams params;
  TrainLog log;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Minibatch training of the MTL objective. Returns the parameters from the
/// epoch with the lowest validation loss (same weights as training).
TrainResult train_mtl(const ModelConfig& model_config, const TrainConfig& config,
                      const DatasetSplit& data, const EpochCallback& on_epoch = {});

/// Mean loss breakdown over utterances, computed off the tape.
LossBreakdown mean_loss(const ModelParams& params, const std::vector<Utterance>& utts,
                        const MtlWeights& weights);

/// Sums per-sample gradients of one batch into the parameters' grad buffers
/// and returns the summed breakdown.
LossBreakdown accumulate_batch_gradients(ModelParams& params,
                                         const std::vector<const Utterance*>& batch,
                                         const MtlWeights& weights);

struct BenignMetrics {
  double wer = 0.0;          ///< pooled
  double accent_accuracy = 0.0;
  std::size_t utterances = 0;
};

BenignMetrics evaluate_benign(const ModelParams& params, const std::vector<Utterance>& utts,
                              const MtlWeights& weights, std::size_t max_len);

/// Accent argmax of the discriminator head.
int predict_accent(const ModelParams& params, const FeatureSequence& x);

}  // namespace advmtl
