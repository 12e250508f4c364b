#include "advmtl/attack.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

namespace advmtl {

void AttackConfig::validate() const {
  if (!(epsilon > 0.0)) throw std::invalid_argument("attack epsilon must be > 0");
  if (!(alpha > 0.0)) throw std::invalid_argument("attack alpha must be > 0");
  weights.validate();
  if (!std::is_sorted(report_at.begin(), report_at.end())) {
    throw std::invalid_argument("attack report_at must be sorted");
  }
  if (!report_at.empty() && report_at.back() > steps) {
    throw std::invalid_argument("attack report_at exceeds steps");
  }
}

void to_json(nlohmann::json& j, const AttackConfig& c) {
  j = nlohmann::json{{"epsilon", c.epsilon},
                     {"alpha", c.alpha},
                     {"steps", c.steps},
                     {"weights", c.weights},
                     {"report_at", c.report_at}};
}

void from_json(const nlohmann::json& j, AttackConfig& c) {
  AttackConfig d;
  c.epsilon = j.value("epsilon", d.epsilon);
  c.alpha = j.value("alpha", d.alpha);
  c.steps = j.value("steps", d.steps);
  c.weights = j.value("weights", d.weights);
  c.report_at = j.value("report_at", d.report_at);
  c.validate();
}

double median_feature_norm(const std::vector<Utterance>& utts) {
  if (utts.empty()) throw std::invalid_argument("median_feature_norm: no utterances");
  std::vector<double> norms;
  norms.reserve(utts.size());
  for (const auto& u : utts) norms.push_back(frobenius_norm(u.features));
  std::sort(norms.begin(), norms.end());
  const std::size_t n = norms.size();
  return n % 2 ? norms[n / 2] : 0.5 * (norms[n / 2 - 1] + norms[n / 2]);
}

AttackConfig calibrated_attack_config(const std::vector<Utterance>& utts,
                                      AttackCalibration cal, std::size_t steps,
                                      std::vector<std::size_t> report_at) {
  AttackConfig c;
  c.epsilon = cal.epsilon_ratio * median_feature_norm(utts);
  c.alpha = cal.alpha_ratio * c.epsilon;
  c.steps = steps;
  c.report_at = std::move(report_at);
  c.validate();
  return c;
}

Tensor adv_loss(const ModelParams& params, const Tensor& x, const Transcript& target,
                const MtlWeights& weights) {
  weights.validate();
  if (target.empty()) throw std::invalid_argument("adv_loss: empty target");
  const double lam = weights.lambda_i_C;
  const Tensor hidden = encode(params, x);
  Tensor total;
  if (lam > 0.0) {
    Tensor l_ctc = scale(ctc_loss(ctc_head(params, hidden), target),
                         1.0 / static_cast<double>(target.size()));
    total = lam == 1.0 ? l_ctc : scale(l_ctc, lam);
  }
  if (lam < 1.0) {
    Tensor l_dec = dec_loss(params, hidden, target);
    Tensor term = lam == 0.0 ? l_dec : scale(l_dec, 1.0 - lam);
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

Matrix project_l2(const Matrix& delta, double epsilon) {
  if (!(epsilon > 0.0)) throw std::invalid_argument("project_l2: epsilon must be > 0");
  const double norm = frobenius_norm(delta);
  if (norm <= epsilon) return delta;
  Matrix out = delta;
  const double s = epsilon / norm;
  for (double& v : out.data) v *= s;
  return out;
}

namespace {

FeatureSequence add_matrices(const Matrix& a, const Matrix& b) {
  FeatureSequence out = a;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
  return out;
}

ModelParams frozen_view(const ModelParams& params) {
  for (const auto& [_, t] : params.tensors())
    if (t.requires_grad()) return params.clone(false);
  return params;
}

}  // namespace

PgdStepResult pgd_update(const Matrix& delta, std::span<const double> grad, double alpha,
                         double epsilon) {
  if (grad.size() != delta.data.size()) throw ShapeError("pgd_update: gradient shape mismatch");
  PgdStepResult r;
  double gn = 0.0;
  for (double v : grad) gn += v * v;
  r.grad_norm = std::sqrt(gn);
  if (r.grad_norm == 0.0) {
    r.flat = true;
    r.delta = delta;
    return r;
  }
  Matrix moved = delta;
  const double s = alpha / r.grad_norm;
  double step_ss = 0.0;
  for (std::size_t i = 0; i < moved.data.size(); ++i) {
    const double d = -s * grad[i];
    moved.data[i] += d;
    step_ss += d * d;
  }
  r.step_norm = std::sqrt(step_ss);
  r.delta = project_l2(moved, epsilon);
  return r;
}

PgdStepResult pgd_step(const ModelParams& params, const FeatureSequence& x,
                       const Matrix& delta, const Transcript& target,
                       const AttackConfig& config) {
  if (delta.rows != x.rows || delta.cols != x.cols) {
    throw ShapeError("pgd_step: delta shape does not match x");
  }
  Tape::Scope scope;
  Tensor x_adv = add_matrices(x, delta).to_tensor(true);
  Tensor loss = adv_loss(params, x_adv, target, config.weights);
  backward(loss);

  PgdStepResult r = pgd_update(delta, x_adv.grad(), config.alpha, config.epsilon);
  r.loss = loss.item();
  return r;
}

bool attack_infeasible(const FeatureSequence& x, const Transcript& target,
                       const MtlWeights& weights) {
  return weights.lambda_i_C > 0.0 && x.rows < ctc_min_frames(target);
}

PerturbationResult pgd_attack(const ModelParams& params, const FeatureSequence& x,
                              const Transcript& target, const AttackConfig& config) {
  config.validate();
  if (attack_infeasible(x, target, config.weights)) {
    throw InfeasibleAlignment("pgd_attack: sample too short for the CTC target");
  }
  const ModelParams frozen = frozen_view(params);

  PerturbationResult res;
  Matrix delta(x.rows, x.cols, 0.0);
  auto report = config.report_at.begin();
  auto snapshot = [&](std::size_t k) {
    while (report != config.report_at.end() && *report == k) {
      res.snapshots[k] = add_matrices(x, delta);
      ++report;
    }
  };
  res.delta_norms.push_back(0.0);
  snapshot(0);
  for (std::size_t k = 0; k < config.steps; ++k) {
    if (!res.stopped_flat) {
      PgdStepResult step = pgd_step(frozen, x, delta, target, config);
      res.loss_trace.push_back(step.loss);
      if (step.flat) {
        res.stopped_flat = true;
      } else {
        res.step_norms.push_back(step.step_norm);
        delta = std::move(step.delta);
        res.delta_norms.push_back(frobenius_norm(delta));
        ++res.steps_run;
      }
    }
    snapshot(k + 1);
  }
  {
    NoGradGuard no_grad;
    const Tensor xa = add_matrices(x, delta).to_tensor();
    if (!res.stopped_flat || res.loss_trace.empty()) {
      res.loss_trace.push_back(adv_loss(frozen, xa, target, config.weights).item());
    }
  }
  res.delta = delta;
  res.x_adv = add_matrices(x, delta);
  return res;
}

}  // namespace advmtl
