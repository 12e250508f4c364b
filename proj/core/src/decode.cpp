#include "advmtl/decode.hpp"

#include <cmath>
#include <limits>
#include <optional>

namespace advmtl {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

}  // namespace

Transcript greedy_ctc_decode(const Matrix& logp) {
  if (logp.cols < 2) throw std::invalid_argument("greedy_ctc_decode: need at least one label and blank");
  const auto blank = static_cast<WordId>(logp.cols - 1);
  Transcript out;
  WordId prev = -1;
  for (std::size_t t = 0; t < logp.rows; ++t) {
    WordId best = 0;
    for (std::size_t k = 1; k < logp.cols; ++k)
      if (logp(t, k) > logp(t, static_cast<std::size_t>(best))) best = static_cast<WordId>(k);
    if (best != prev && best != blank) out.push_back(best);
    prev = best;
  }
  return out;
}

Transcript greedy_attention_decode(const ModelParams& params, const Tensor& hidden,
                                   std::size_t max_len) {
  if (max_len == 0) throw std::invalid_argument("greedy_attention_decode: max_len must be >= 1");
  NoGradGuard no_grad;
  const auto eos = static_cast<WordId>(params.config().vocab_size);
  AttentionDecoder dec(params, hidden);
  Transcript out;
  WordId prev = eos;  // sos shares the index
  while (out.size() < max_len) {
    const Tensor lp = dec.step(prev);
    auto v = lp.values();
    WordId best = 0;
    for (std::size_t k = 1; k < v.size(); ++k)
      if (v[k] > v[static_cast<std::size_t>(best)]) best = static_cast<WordId>(k);
    if (best == eos) break;
    out.push_back(best);
    prev = best;
  }
  return out;
}

// --- CTC prefix scoring -----------------------------------------------------

CtcPrefixScorer::CtcPrefixScorer(Matrix logp) : logp_(std::move(logp)) {
  if (logp_.rows == 0 || logp_.cols < 2) {
    throw std::invalid_argument("CtcPrefixScorer: logp must be T x (V+1) with T >= 1");
  }
}

CtcPrefixScorer::State CtcPrefixScorer::initial() const {
  const std::size_t T = frames();
  const auto b = static_cast<std::size_t>(blank());
  State s;
  s.r_n.assign(T, kNegInf);
  s.r_b.resize(T);
  double acc = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    acc += logp_(t, b);
    s.r_b[t] = acc;
  }
  s.prefix_logprob = 0.0;
  return s;
}

CtcPrefixScorer::State CtcPrefixScorer::extend(const State& g, WordId c) {
  if (c < 0 || c >= blank()) {
    throw std::out_of_range("CtcPrefixScorer::extend: label " + std::to_string(c));
  }
  ++evaluations_;
  const std::size_t T = frames();
  const auto b = static_cast<std::size_t>(blank());
  const auto k = static_cast<std::size_t>(c);
  const bool repeat = !g.prefix.empty() && g.prefix.back() == c;

  State h;
  h.prefix = g.prefix;
  h.prefix.push_back(c);
  h.r_n.assign(T, kNegInf);
  h.r_b.assign(T, kNegInf);
  h.r_n[0] = g.prefix.empty() ? logp_(0, k) : kNegInf;
  double psi = h.r_n[0];
  for (std::size_t t = 1; t < T; ++t) {
    // Mass that has emitted exactly g by t-1 and may start c at t.
    const double phi = repeat ? g.r_b[t - 1] : log_add(g.r_b[t - 1], g.r_n[t - 1]);
    h.r_n[t] = log_add(h.r_n[t - 1], phi) + logp_(t, k);
    h.r_b[t] = log_add(h.r_b[t - 1], h.r_n[t - 1]) + logp_(t, b);
    psi = log_add(psi, phi + logp_(t, k));
  }
  h.prefix_logprob = psi;
  return h;
}

double CtcPrefixScorer::full_logprob(const State& g) const {
  return log_add(g.r_n.back(), g.r_b.back());
}

double ctc_prefix_score(const Matrix& logp, const Transcript& prefix, WordId c) {
  CtcPrefixScorer scorer(logp);
  auto state = scorer.initial();
  for (WordId w : prefix) state = scorer.extend(state, w);
  if (c == scorer.blank()) return scorer.full_logprob(state);
  return scorer.extend(state, c).prefix_logprob;
}

// --- Joint decoding ---------------------------------------------------------

DecodeResult joint_greedy_decode(const ModelParams& params, const Tensor& hidden,
                                 const MtlWeights& weights, std::size_t max_len) {
  weights.validate();
  if (max_len == 0) throw std::invalid_argument("joint_greedy_decode: max_len must be >= 1");
  NoGradGuard no_grad;
  const double lam = weights.lambda_i_C;
  const bool use_ctc = lam > 0.0;
  const std::size_t V = params.config().vocab_size;
  const auto eos = static_cast<WordId>(V);

  std::optional<CtcPrefixScorer> scorer;
  CtcPrefixScorer::State g;
  if (use_ctc) {
    scorer.emplace(Matrix::from_tensor(ctc_head(params, hidden)));
    g = scorer->initial();
  }
  AttentionDecoder dec(params, hidden);

  DecodeResult result;
  std::vector<CtcPrefixScorer::State> extended(use_ctc ? V : 0);
  WordId prev = eos;  // sos
  while (result.hypothesis.size() < max_len) {
    const Tensor lp = dec.step(prev);
    auto dec_scores = lp.values();

    WordId best = -1;
    StepScore best_score{kNegInf, kNegInf, kNegInf};
    for (std::size_t k = 0; k <= V; ++k) {
      const auto c = static_cast<WordId>(k);
      StepScore s;
      s.dec = dec_scores[k];
      if (use_ctc) {
        if (c == eos) {
          s.ctc = scorer->full_logprob(g) - g.prefix_logprob;
        } else {
          extended[k] = scorer->extend(g, c);
          s.ctc = extended[k].prefix_logprob - g.prefix_logprob;
        }
        s.combined = lam * s.ctc + (1.0 - lam) * s.dec;
      } else {
        s.ctc = 0.0;
        s.combined = s.dec;
      }
      if (s.combined > best_score.combined) {
        best = c;
        best_score = s;
      }
    }
    if (best < 0) {
      // Nothing reachable: close the hypothesis.
      best = eos;
      best_score = {kNegInf, dec_scores[V], kNegInf};
    }
    result.per_step_scores.push_back(best_score);
    if (best == eos) break;
    result.hypothesis.push_back(best);
    if (use_ctc) g = std::move(extended[static_cast<std::size_t>(best)]);
    prev = best;
  }
  if (scorer) result.ctc_prefix_calls = scorer->evaluations();
  return result;
}

Transcript recognize(const ModelParams& params, const FeatureSequence& x,
                     const MtlWeights& weights, std::size_t max_len) {
  NoGradGuard no_grad;
  const Tensor hidden = encode(params, x.to_tensor());
  return joint_greedy_decode(params, hidden, weights, max_len).hypothesis;
}

}  // namespace advmtl
