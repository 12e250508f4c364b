#pragma once

// Targeted L2 projected gradient descent on the input features.

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "advmtl/losses.hpp"
#include "advmtl/model.hpp"
#include "advmtl/toyspeech.hpp"
#include "advmtl/types.hpp"

namespace advmtl {

struct AttackConfig {
  double epsilon = 0.5;
  double alpha = 0.0125;
  std::size_t steps = 200;
  /// Only lambda_i_C matters to the attack.
  MtlWeights weights;
  std::vector<std::size_t> report_at{10, 50, 100, 200};

  void validate() const;
};

void to_json(nlohmann::json& j, const AttackConfig& c);
void from_json(const nlohmann::json& j, AttackConfig& c);

/// Radius as a fraction of the median per-utterance feature norm, and step
/// size as a fraction of the radius.
struct AttackCalibration {
  double epsilon_ratio = 0.1;
  double alpha_ratio = 1.0 / 40.0;
};

double median_feature_norm(const std::vector<Utterance>& utts);
AttackConfig calibrated_attack_config(const std::vector<Utterance>& utts,
                                      AttackCalibration cal, std::size_t steps,
                                      std::vector<std::size_t> report_at);

/// lambda_i_C * L_CTC(x, target)/|target| + (1 - lambda_i_C) * L_DEC(x, target),
/// the same per-token normalization used in training.
Tensor adv_loss(const ModelParams& params, const Tensor& x, const Transcript& target,
                const MtlWeights& weights);

/// Scales delta back onto the L2 ball of radius epsilon when it lies outside.
Matrix project_l2(const Matrix& delta, double epsilon);

struct PgdStepResult {
  Matrix delta;            ///< projected perturbation after the step
  double loss = 0.0;       ///< L_ADV at the incoming delta
  double grad_norm = 0.0;
  double step_norm = 0.0;  ///< magnitude of the pre-projection move
  bool flat = false;       ///< zero gradient: delta returned unchanged
};

/// Moves delta by exactly alpha against `grad`, then projects. A zero gradient
/// returns delta unchanged with `flat` set.
PgdStepResult pgd_update(const Matrix& delta, std::span<const double> grad, double alpha,
                         double epsilon);

/// One descent step of exact L2 magnitude alpha against grad L_ADV, then projection.
PgdStepResult pgd_step(const ModelParams& params, const FeatureSequence& x,
                       const Matrix& delta, const Transcript& target,
                       const AttackConfig& config);

struct PerturbationResult {
  FeatureSequence x_adv;
  Matrix delta;
  /// L_ADV at delta_0 .. delta_n; n = steps_run.
  std::vector<double> loss_trace;
  /// ||delta_k|| for k = 0..n.
  std::vector<double> delta_norms;
  /// Pre-projection move magnitude of each step.
  std::vector<double> step_norms;
  std::map<std::size_t, FeatureSequence> snapshots;
  std::size_t steps_run = 0;
  bool stopped_flat = false;
};

/// Zero-start PGD for config.steps iterations; snapshots at config.report_at.
PerturbationResult pgd_attack(const ModelParams& params, const FeatureSequence& x,
                              const Transcript& target, const AttackConfig& config);

/// True when the CTC term is active and x is too short to carry the target.
bool attack_infeasible(const FeatureSequence& x, const Transcript& target,
                       const MtlWeights& weights);

}  // namespace advmtl
