#include "advmtl/losses.hpp"

#include <cmath>
#include <limits>

#include <nlohmann/json.hpp>

namespace advmtl {

namespace {

// Finite stand-in for log(0); tensors must stay finite.
constexpr double kLogZero = -1e30;

double log_add(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

void check_unit(double v, const char* name) {
  if (!(v >= 0.0 && v <= 1.0)) {
    throw std::invalid_argument(std::string(name) + " must lie in [0,1], got " +
                                std::to_string(v));
  }
}

}  // namespace

void MtlWeights::validate() const {
  check_unit(lambda_t_A, "lambda_t_A");
  check_unit(lambda_t_C, "lambda_t_C");
  check_unit(lambda_i_C, "lambda_i_C");
}

void to_json(nlohmann::json& j, const MtlWeights& w) {
  j = nlohmann::json{{"lambda_t_A", w.lambda_t_A},
                     {"lambda_t_C", w.lambda_t_C},
                     {"lambda_i_C", w.lambda_i_C}};
}

void from_json(const nlohmann::json& j, MtlWeights& w) {
  w.lambda_t_A = j.value("lambda_t_A", 1.0);
  w.lambda_t_C = j.value("lambda_t_C", 0.0);
  w.lambda_i_C = j.value("lambda_i_C", w.lambda_t_C);
  w.validate();
}

std::size_t ctc_min_frames(const Transcript& y) {
  std::size_t n = y.size();
  for (std::size_t i = 1; i < y.size(); ++i)
    if (y[i] == y[i - 1]) ++n;
  return n;
}

Tensor ctc_loss(const Tensor& logp, const Transcript& y) {
  if (logp.rank() != 2 || logp.cols() < 2) {
    throw ShapeError("ctc_loss: logp must be T x (V+1), got " + to_string(logp.shape()));
  }
  if (y.empty()) throw std::invalid_argument("ctc_loss: empty target");
  const std::size_t T = logp.rows();
  const int blank = static_cast<int>(logp.cols()) - 1;
  for (WordId w : y) {
    if (w < 0 || w >= blank) {
      throw std::out_of_range("ctc_loss: label " + std::to_string(w) + " outside CTC label space");
    }
  }
  if (T < ctc_min_frames(y)) {
    throw InfeasibleAlignment("ctc_loss: " + std::to_string(T) + " frames cannot carry " +
                              std::to_string(y.size()) + " labels");
  }

  // Blank-extended labels: _ y1 _ y2 ... yn _
  const std::size_t S = 2 * y.size() + 1;
  std::vector<int> ext(S, blank);
  for (std::size_t i = 0; i < y.size(); ++i) ext[2 * i + 1] = y[i];

  std::vector<double> skip(S, kLogZero), start(S, kLogZero);
  for (std::size_t s = 2; s < S; ++s)
    if (ext[s] != blank && ext[s] != ext[s - 2]) skip[s] = 0.0;
  start[0] = start[1] = 0.0;
  const Tensor skip_mask = Tensor::matrix(1, S, std::move(skip));
  const Tensor start_mask = Tensor::matrix(1, S, std::move(start));
  const Tensor pad1 = Tensor::full({1, 1}, kLogZero);
  const Tensor pad2 = Tensor::full({1, 2}, kLogZero);

  // emit(t, s) = logp(t, ext[s])
  const Tensor emit = transpose(embedding_lookup(transpose(logp), ext));
  Tensor alpha = add(slice(emit, 0, 0, 1), start_mask);
  for (std::size_t t = 1; t < T; ++t) {
    Tensor stay = alpha;
    Tensor from_prev = concat({pad1, slice(alpha, 1, 0, S - 1)}, 1);
    Tensor from_skip = add(concat({pad2, slice(alpha, 1, 0, S - 2)}, 1), skip_mask);
    alpha = add(logsumexp(concat({stay, from_prev, from_skip}, 0), 0),
                slice(emit, 0, t, t + 1));
  }
  return reshape(neg(logsumexp(slice(alpha, 1, S - 2, S), 1)), {});
}

double ctc_brute_force(const Matrix& logp, const Transcript& y) {
  const std::size_t T = logp.rows, K = logp.cols;
  if (K < 2 || T == 0) throw std::invalid_argument("ctc_brute_force: bad logp shape");
  double paths = 1.0;
  for (std::size_t t = 0; t < T; ++t) paths *= static_cast<double>(K);
  if (paths > 1e6) throw std::invalid_argument("ctc_brute_force: instance too large");
  const auto blank = static_cast<WordId>(K - 1);

  std::vector<std::size_t> path(T, 0);
  double total = -std::numeric_limits<double>::infinity();
  Transcript collapsed;
  while (true) {
    collapsed.clear();
    WordId prev = -1;
    for (std::size_t t = 0; t < T; ++t) {
      const auto k = static_cast<WordId>(path[t]);
      if (k != prev && k != blank) collapsed.push_back(k);
      prev = k;
    }
    if (collapsed == y) {
      double lp = 0.0;
      for (std::size_t t = 0; t < T; ++t) lp += logp(t, path[t]);
      total = log_add(total, lp);
    }
    std::size_t t = 0;
    while (t < T && ++path[t] == K) path[t++] = 0;
    if (t == T) break;
  }
  if (total == -std::numeric_limits<double>::infinity()) {
    throw InfeasibleAlignment("ctc_brute_force: no path collapses to the target");
  }
  return -total;
}

Tensor dec_loss(const ModelParams& params, const Tensor& hidden, const Transcript& y) {
  const auto V = static_cast<WordId>(params.config().vocab_size);
  for (WordId w : y) {
    if (w < 0 || w >= V) throw std::out_of_range("dec_loss: label " + std::to_string(w));
  }
  AttentionDecoder dec(params, hidden);
  std::vector<Tensor> picked;
  picked.reserve(y.size() + 1);
  WordId prev = V;  // sos
  for (std::size_t i = 0; i <= y.size(); ++i) {
    const WordId target = i < y.size() ? y[i] : V;  // eos closes the sequence
    Tensor lp = dec.step(prev);
    const auto k = static_cast<std::size_t>(target);
    picked.push_back(slice(lp, 1, k, k + 1));
    prev = target;
  }
  return neg(mean(concat(picked, 1)));
}

Tensor dis_loss(const ModelParams& params, const Tensor& hidden, AccentLabel z) {
  if (z < 0 || static_cast<std::size_t>(z) >= params.config().n_accents) {
    throw std::out_of_range("dis_loss: accent label " + std::to_string(z));
  }
  Tensor lp = discriminate(params, hidden);
  const auto k = static_cast<std::size_t>(z);
  return reshape(neg(slice(lp, 1, k, k + 1)), {});
}

namespace {
// Weighted sum where a zero weight drops its term, so an undefined (NaN)
// component that carries no weight cannot poison the total.
double mix(double w, double a, double b) {
  if (w == 0.0) return b;
  if (w == 1.0) return a;
  return w * a + (1.0 - w) * b;
}
}  // namespace

double asr_loss(const MtlWeights& w, double l_ctc, double l_dec) {
  return mix(w.lambda_t_C, l_ctc, l_dec);
}

LossBreakdown mtl_loss(const MtlWeights& w, double l_ctc, double l_dec, double l_dis) {
  LossBreakdown b;
  b.l_ctc = l_ctc;
  b.l_dec = l_dec;
  b.l_dis = l_dis;
  b.l_asr = asr_loss(w, l_ctc, l_dec);
  b.l_mtl = mix(w.lambda_t_A, b.l_asr, l_dis);
  return b;
}

SampleLoss sample_mtl_loss(const ModelParams& params, const Tensor& x,
                           const Transcript& y, AccentLabel z, const MtlWeights& w) {
  const Tensor hidden = encode(params, x);
  const double w_ctc = w.lambda_t_A * w.lambda_t_C;
  const double w_dec = w.lambda_t_A * (1.0 - w.lambda_t_C);
  const double w_dis = 1.0 - w.lambda_t_A;

  auto component = [&](double weight, auto&& fn) {
    if (weight != 0.0) return fn();
    NoGradGuard off;
    return fn();
  };
  const double inv_len = 1.0 / static_cast<double>(y.size());
  // An unweighted CTC term on a too-short utterance is reported as NaN
  // instead of failing; only a weighted one must be feasible.
  const bool ctc_defined = w_ctc != 0.0 || x.rows() >= ctc_min_frames(y);
  Tensor l_ctc = ctc_defined ? component(w_ctc, [&] {
    return scale(ctc_loss(ctc_head(params, hidden), y), inv_len);
  }) : Tensor();
  Tensor l_dec = component(w_dec, [&] { return dec_loss(params, hidden, y); });
  Tensor l_dis = component(w_dis, [&] { return dis_loss(params, hidden, z); });

  SampleLoss out;
  out.parts = mtl_loss(w, ctc_defined ? l_ctc.item() : std::numeric_limits<double>::quiet_NaN(),
                       l_dec.item(), l_dis.item());
  // Composed term by term so a zero weight never touches the tape.
  Tensor total = Tensor::scalar(0.0);
  if (w_ctc != 0.0) total = add(total, scale(l_ctc, w_ctc));
  if (w_dec != 0.0) total = add(total, scale(l_dec, w_dec));
  if (w_dis != 0.0) total = add(total, scale(l_dis, w_dis));
  out.total = total;
  return out;
}

}  // namespace advmtl
