#pragma once

#include <stdexcept>

#include <nlohmann/json_fwd.hpp>

#include "advmtl/model.hpp"
#include "advmtl/tensor.hpp"
#include "advmtl/types.hpp"

namespace advmtl {

/// Training weights (lambda_t_A, lambda_t_C) and the inference CTC weight.
struct MtlWeights {
  double lambda_t_A = 1.0;
  double lambda_t_C = 0.0;
  double lambda_i_C = 0.0;

  /// Inference weight defaults to the CTC training weight.
  static MtlWeights matched(double t_A, double t_C) { return {t_A, t_C, t_C}; }
  void validate() const;
  friend bool operator==(const MtlWeights&, const MtlWeights&) = default;
};

void to_json(nlohmann::json& j, const MtlWeights& w);
void from_json(const nlohmann::json& j, MtlWeights& w);

struct LossBreakdown {
  double l_ctc = 0.0;
  double l_dec = 0.0;
  double l_dis = 0.0;
  double l_asr = 0.0;
  double l_mtl = 0.0;
};

/// Thrown when T frames cannot carry the target through CTC.
class InfeasibleAlignment : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Frames CTC needs to emit `y`: one per label plus one blank between repeats.
std::size_t ctc_min_frames(const Transcript& y);

/// Negative log-likelihood (nats) of `y` under CTC, summed over all
/// alignments by the log-space forward recursion. `logp` is T x (V+1) with
/// blank in the last column.
Tensor ctc_loss(const Tensor& logp, const Transcript& y);

/// Enumerates every frame-label path; only for (V+1)^T <= 1e6.
double ctc_brute_force(const Matrix& logp, const Transcript& y);

/// Teacher-forced decoder NLL of y followed by eos, averaged over steps.
Tensor dec_loss(const ModelParams& params, const Tensor& hidden, const Transcript& y);

/// Cross-entropy of the accent discriminator.
Tensor dis_loss(const ModelParams& params, const Tensor& hidden, AccentLabel z);

double asr_loss(const MtlWeights& w, double l_ctc, double l_dec);
LossBreakdown mtl_loss(const MtlWeights& w, double l_ctc, double l_dec, double l_dis);

/// Differentiable MTL objective for one utterance plus its breakdown.
/// The CTC term is normalized by |y|. Components whose weight is zero are
/// evaluated off the tape, so they contribute exactly zero gradient.
struct SampleLoss {
  Tensor total;
  LossBreakdown parts;
};
SampleLoss sample_mtl_loss(const ModelParams& params, const Tensor& x,
                           const Transcript& y, AccentLabel z, const MtlWeights& w);

}  // namespace advmtl
