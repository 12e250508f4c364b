#pragma once

// Greedy inference: CTC-only, attention-only, and the hybrid step-synchronous
// search that mixes CTC prefix scores with decoder log-probabilities.

#include <cstddef>
#include <vector>

#include "advmtl/losses.hpp"
#include "advmtl/model.hpp"
#include "advmtl/types.hpp"

namespace advmtl {

/// Frame argmax, collapse repeats, drop blanks (blank = last column).
Transcript greedy_ctc_decode(const Matrix& logp);

Transcript greedy_attention_decode(const ModelParams& params, const Tensor& hidden,
                                   std::size_t max_len);

/// Incremental CTC prefix probabilities over a fixed T x (V+1) log-prob matrix.
///
/// For a prefix g the scorer keeps, per frame t, the log-probability that
/// frames 0..t emit exactly g ending in a non-blank (r_n) or a blank (r_b).
/// prefix_logprob is log P(output starts with g).
class CtcPrefixScorer {
 public:
  struct State {
    Transcript prefix;
    std::vector<double> r_n;
    std::vector<double> r_b;
    double prefix_logprob = 0.0;
  };

  explicit CtcPrefixScorer(Matrix logp);

  State initial() const;
  /// State for g.c; its prefix_logprob is log P(output starts with g.c).
  State extend(const State& g, WordId c);
  /// log P(output == g).
  double full_logprob(const State& g) const;

  std::size_t frames() const { return logp_.rows; }
  WordId blank() const { return static_cast<WordId>(logp_.cols - 1); }
  std::size_t evaluations() const { return evaluations_; }

 private:
  Matrix logp_;
  std::size_t evaluations_ = 0;
};

/// Absolute CTC prefix score. For a word `c`: log P(output starts with g.c);
/// for c == eos (the blank column index): log P(output == g). -inf when unreachable.
double ctc_prefix_score(const Matrix& logp, const Transcript& prefix, WordId c);

struct StepScore {
  double ctc = 0.0;
  double dec = 0.0;
  double combined = 0.0;
};

struct DecodeResult {
  Transcript hypothesis;
  std::vector<StepScore> per_step_scores;
  /// Number of CTC prefix extensions performed; zero when the CTC head is dropped.
  std::size_t ctc_prefix_calls = 0;
};

/// Beam-1 hybrid search. Each step scores every word and eos as
///   lambda_i_C * (CTC prefix log-prob increment) + (1 - lambda_i_C) * decoder log-prob
/// and takes the argmax (lowest index on ties). With lambda_i_C == 0 the CTC
/// head is never evaluated.
DecodeResult joint_greedy_decode(const ModelParams& params, const Tensor& hidden,
                                 const MtlWeights& weights, std::size_t max_len);

/// Convenience: encode + joint_greedy_decode without recording a tape.
Transcript recognize(const ModelParams& params, const FeatureSequence& x,
                     const MtlWeights& weights, std::size_t max_len);

}  // namespace advmtl
