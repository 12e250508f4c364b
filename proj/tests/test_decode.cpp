#include <cmath>
#include <limits>
#include <random>

#include <gtest/gtest.h>

#include "advmtl/decode.hpp"
#include "support.hpp"

namespace advmtl {
namespace {

using testing::brute_prefix;
using testing::enumerate_outputs;
using testing::random_logp;
using testing::random_matrix;
using testing::tiny_config;

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

Matrix frames_with_argmax(const std::vector<int>& argmax, std::size_t K) {
  Matrix m(argmax.size(), K, std::log(0.1 / (K - 1)));
  for (std::size_t t = 0; t < argmax.size(); ++t) m(t, argmax[t]) = std::log(0.9);
  return m;
}

TEST(GreedyCtcTest, CollapseRules) {
  // Labels a=0, b=1, blank=2.
  EXPECT_EQ(greedy_ctc_decode(frames_with_argmax({2, 0, 0, 2, 1}, 3)), (Transcript{0, 1}));
  EXPECT_EQ(greedy_ctc_decode(frames_with_argmax({2, 2, 2}, 3)), Transcript{});
  EXPECT_EQ(greedy_ctc_decode(frames_with_argmax({0, 2, 0}, 3)), (Transcript{0, 0}));
  EXPECT_EQ(greedy_ctc_decode(frames_with_argmax({1, 1, 1}, 3)), (Transcript{1}));
}

TEST(PrefixScoreTest, SingleFrameHandValues) {
  const Matrix lp(1, 2, std::log(0.5));
  EXPECT_NEAR(ctc_prefix_score(lp, {}, 0), std::log(0.5), 1e-12);
  EXPECT_NEAR(ctc_prefix_score(lp, {0}, 1), std::log(0.5), 1e-12);
  EXPECT_NEAR(ctc_prefix_score(lp, {}, 1), std::log(0.5), 1e-12);
}

TEST(PrefixScoreTest, UnreachablePrefixIsNegInf) {
  const Matrix lp(2, 3, std::log(1.0 / 3));
  EXPECT_EQ(ctc_prefix_score(lp, {0, 1}, 0), kNegInf);
  EXPECT_EQ(ctc_prefix_score(lp, {0, 1, 0}, 2), kNegInf);
  EXPECT_EQ(ctc_prefix_score(lp, {0}, 0), kNegInf);  // repeat needs a blank between
}

TEST(PrefixScoreTest, MatchesEnumeration) {
  std::mt19937_64 rng(19);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t T = 1 + trial % 5, V = 1 + trial % 3;
    const Matrix lp = random_logp(T, V + 1, rng, 1.5);
    const auto outputs = enumerate_outputs(lp);
    CtcPrefixScorer scorer(lp);
    // Every prefix up to length 3 over the alphabet.
    std::vector<CtcPrefixScorer::State> frontier{scorer.initial()};
    for (int depth = 0; depth < 3; ++depth) {
      std::vector<CtcPrefixScorer::State> next;
      for (const auto& g : frontier) {
        const double full = outputs.count(g.prefix) ? outputs.at(g.prefix) : 0.0;
        EXPECT_NEAR(std::exp(scorer.full_logprob(g)), full, 1e-9);
        EXPECT_NEAR(std::exp(ctc_prefix_score(lp, g.prefix, static_cast<WordId>(V))), full, 1e-9);
        for (WordId c = 0; c < static_cast<WordId>(V); ++c) {
          auto s = scorer.extend(g, c);
          EXPECT_NEAR(std::exp(s.prefix_logprob), brute_prefix(outputs, s.prefix), 1e-9);
          EXPECT_NEAR(std::exp(ctc_prefix_score(lp, g.prefix, c)), brute_prefix(outputs, s.prefix),
                      1e-9);
          next.push_back(std::move(s));
        }
      }
      frontier = std::move(next);
    }
  }
}

TEST(PrefixScoreTest, FullSequenceProbabilitiesSumToOne) {
  std::mt19937_64 rng(23);
  const Matrix lp = random_logp(4, 3, rng);
  CtcPrefixScorer scorer(lp);
  double total = 0.0;
  std::vector<CtcPrefixScorer::State> frontier{scorer.initial()};
  for (std::size_t depth = 0; depth <= lp.rows; ++depth) {
    std::vector<CtcPrefixScorer::State> next;
    for (const auto& g : frontier) {
      total += std::exp(scorer.full_logprob(g));
      for (WordId c = 0; c < 2; ++c) next.push_back(scorer.extend(g, c));
    }
    frontier = std::move(next);
  }
  EXPECT_NEAR(total, 1.0, 1e-12);
}

class DecodeModelTest : public ::testing::Test {
 protected:
  std::mt19937_64 rng{29};
  ModelConfig config = tiny_config();
  ModelParams params = init_params(config);

  void zero(const std::string& name) {
    for (auto& v : params.at(name).mutable_values()) v = 0.0;
  }
};

TEST_F(DecodeModelTest, AttentionStopsAtEos) {
  zero("dec.out.w_state");
  zero("dec.out.w_ctx");
  zero("dec.out.b");
  params.at("dec.out.b").mutable_values()[3] = 60.0;  // eos
  const Tensor h = encode(params, random_matrix(5, 3, rng));
  EXPECT_TRUE(greedy_attention_decode(params, h, 10).empty());
}

TEST_F(DecodeModelTest, AttentionHonorsMaxLen) {
  zero("dec.out.w_state");
  zero("dec.out.w_ctx");
  zero("dec.out.b");
  params.at("dec.out.b").mutable_values()[1] = 60.0;
  const Tensor h = encode(params, random_matrix(5, 3, rng));
  EXPECT_EQ(greedy_attention_decode(params, h, 4), (Transcript{1, 1, 1, 1}));
  EXPECT_EQ(greedy_attention_decode(params, h, 1), (Transcript{1}));
}

TEST_F(DecodeModelTest, AttentionDeterministic) {
  const Tensor h = encode(params, random_matrix(6, 3, rng));
  EXPECT_EQ(greedy_attention_decode(params, h, 8), greedy_attention_decode(params, h, 8));
}

TEST_F(DecodeModelTest, JointAtZeroIsAttentionAndSkipsCtc) {
  for (int i = 0; i < 30; ++i) {
    ModelConfig c = config;
    c.seed = 100 + i;
    const ModelParams p = init_params(c);
    const Tensor h = encode(p, random_matrix(3 + i % 5, 3, rng));
    const DecodeResult r = joint_greedy_decode(p, h, {1.0, 0.5, 0.0}, 8);
    EXPECT_EQ(r.hypothesis, greedy_attention_decode(p, h, 8));
    EXPECT_EQ(r.ctc_prefix_calls, 0u);
    for (const auto& s : r.per_step_scores) EXPECT_EQ(s.combined, s.dec);
  }
}

TEST_F(DecodeModelTest, PerStepCombinedIdentity) {
  const Tensor h = encode(params, random_matrix(6, 3, rng));
  for (double li : {0.0, 0.3, 0.5, 1.0}) {
    const DecodeResult r = joint_greedy_decode(params, h, {1.0, 0.5, li}, 6);
    EXPECT_EQ(r.per_step_scores.size(), std::min<std::size_t>(r.hypothesis.size() + 1, 6));
    for (const auto& s : r.per_step_scores) {
      if (li == 0.0) continue;
      EXPECT_NEAR(s.combined, li * s.ctc + (1 - li) * s.dec, 1e-12);
    }
    if (li > 0.0) {
      EXPECT_GT(r.ctc_prefix_calls, 0u);
    }
  }
}

// Hidden states equal to the desired CTC logits, with an identity projection.
Tensor plant_ctc_logits(ModelParams& params, const Matrix& logits) {
  auto w = params.at("ctc.w").mutable_values();
  const std::size_t K = logits.cols;
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = 0; j < K; ++j) w[i * K + j] = i == j ? 1.0 : 0.0;
  for (auto& b : params.at("ctc.b").mutable_values()) b = 0.0;
  return logits.to_tensor();
}

Transcript prefix_greedy_reference(const Matrix& logp, std::size_t max_len) {
  const auto outputs = enumerate_outputs(logp);
  const WordId V = static_cast<WordId>(logp.cols - 1);
  Transcript g;
  while (g.size() < max_len) {
    WordId best = V;
    double best_p = outputs.count(g) ? outputs.at(g) : 0.0;
    for (WordId c = V - 1; c >= 0; --c) {
      Transcript e = g;
      e.push_back(c);
      const double p = brute_prefix(outputs, e);
      if (p >= best_p) {
        best_p = p;
        best = c;
      }
    }
    if (best == V) break;
    g.push_back(best);
  }
  return g;
}

TEST(JointCtcTest, PeakedHandInstance) {
  // Words a=0, b=1; blank = 2. Frame probabilities:
  //   t0: a .6  b .3  blank .1
  //   t1: a .1  b .2  blank .7
  //   t2: a .1  b .6  blank .3
  // Prefix-greedy takes a (P = .6), then b, then stops.
  ModelConfig c = tiny_config(2);
  c.enc_hidden = 3;
  ModelParams params = init_params(c);
  Matrix logits(3, 3);
  const double probs[3][3] = {{.6, .3, .1}, {.1, .2, .7}, {.1, .6, .3}};
  for (int t = 0; t < 3; ++t)
    for (int k = 0; k < 3; ++k) logits(t, k) = std::log(probs[t][k]);
  const Tensor h = plant_ctc_logits(params, logits);
  const DecodeResult r = joint_greedy_decode(params, h, {1.0, 1.0, 1.0}, 5);
  EXPECT_EQ(r.hypothesis, (Transcript{0, 1}));
  EXPECT_EQ(r.hypothesis, prefix_greedy_reference(Matrix::from_tensor(ctc_head(params, h)), 5));
}

TEST(JointCtcTest, PrefixGreedyOnRandomInstances) {
  std::mt19937_64 rng(37);
  ModelConfig c = tiny_config(2);
  c.enc_hidden = 3;
  for (int trial = 0; trial < 40; ++trial) {
    ModelParams params = init_params(c);
    const Matrix logits = random_logp(1 + trial % 5, 3, rng, 2.0);
    const Tensor h = plant_ctc_logits(params, logits);
    const Matrix lp = Matrix::from_tensor(ctc_head(params, h));
    EXPECT_EQ(joint_greedy_decode(params, h, {1.0, 1.0, 1.0}, 6).hypothesis,
              prefix_greedy_reference(lp, 6));
  }
}

TEST(JointCtcTest, RecognizeMatchesExplicitPipeline) {
  std::mt19937_64 rng(43);
  const ModelParams params = init_params(tiny_config());
  const Matrix x = Matrix::from_tensor(random_matrix(5, 3, rng));
  const MtlWeights w{1.0, 0.5, 0.5};
  const Tensor h = encode(params, x.to_tensor());
  EXPECT_EQ(recognize(params, x, w, 7), joint_greedy_decode(params, h, w, 7).hypothesis);
}

}  // namespace
}  // namespace advmtl
