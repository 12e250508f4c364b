#include <algorithm>
#include <bit>
#include <cmath>
#include <filesystem>
#include <random>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "advmtl/model.hpp"
#include "support.hpp"

namespace advmtl {
namespace {

using testing::random_matrix;
using testing::rel_err;
using testing::tiny_config;

double row_lse(const Tensor& t, std::size_t r) {
  double mx = -1e300, s = 0.0;
  for (std::size_t c = 0; c < t.cols(); ++c) mx = std::max(mx, t.at(r, c));
  for (std::size_t c = 0; c < t.cols(); ++c) s += std::exp(t.at(r, c) - mx);
  return mx + std::log(s);
}

TEST(ModelConfigTest, Validation) {
  ModelConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.disc_layers, 5u);
  c.enc_hidden = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = ModelConfig{};
  c.bidirectional = true;
  c.enc_hidden = 31;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(ModelConfigTest, JsonRoundTrip) {
  ModelConfig c = tiny_config(5);
  c.bidirectional = true;
  const nlohmann::json j = c;
  EXPECT_EQ(j.get<ModelConfig>(), c);
  EXPECT_EQ(j.at("feat_dim").get<int>(), 3);
}

TEST(InitTest, SeededAndScaled) {
  const ModelConfig c = tiny_config();
  const ModelParams a = init_params(c);
  const ModelParams b = init_params(c);
  ASSERT_EQ(a.tensors().size(), b.tensors().size());
  for (const auto& [name, t] : a.tensors()) {
    const auto& u = b.at(name);
    EXPECT_TRUE(std::equal(t.values().begin(), t.values().end(), u.values().begin())) << name;
  }
  ModelConfig other = c;
  other.seed = 12;
  const ModelParams d = init_params(other);
  EXPECT_NE(a.at("ctc.w").at(0), d.at("ctc.w").at(0));
  EXPECT_TRUE(a.all_finite());
  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight matrices.
  const Tensor& w = a.at("ctc.w");
  const double bound = 1.0 / std::sqrt(static_cast<double>(w.rows()));
  for (double v : w.values()) EXPECT_LE(std::abs(v), bound);
}

TEST(InitTest, BidirectionalAddsReverseWeights) {
  ModelConfig c = tiny_config();
  EXPECT_FALSE(init_params(c).contains("enc.l0.rev.w_in"));
  c.bidirectional = true;
  EXPECT_TRUE(init_params(c).contains("enc.l0.rev.w_in"));
}

TEST(CheckpointTest, RoundTripIsBitExact) {
  const ModelParams p = init_params(ModelConfig{});
  std::ostringstream os;
  save_checkpoint(os, p);
  std::istringstream is(os.str());
  const ModelParams q = load_checkpoint(is);
  EXPECT_EQ(q.config(), p.config());
  ASSERT_EQ(q.tensors().size(), p.tensors().size());
  for (const auto& [name, t] : p.tensors()) {
    const Tensor& u = q.at(name);
    ASSERT_EQ(u.shape(), t.shape()) << name;
    for (std::size_t i = 0; i < t.numel(); ++i)
      EXPECT_EQ(std::bit_cast<std::uint64_t>(u.at(i)), std::bit_cast<std::uint64_t>(t.at(i)));
  }
}

TEST(CheckpointTest, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "advmtl_test_model.ckpt";
  const ModelParams p = init_params(tiny_config());
  save_checkpoint(path, p);
  const ModelParams q = load_checkpoint(path);
  EXPECT_EQ(q.at("ctc.b").at(0), p.at("ctc.b").at(0));
  std::filesystem::remove(path);
  EXPECT_ANY_THROW(load_checkpoint(path));
}

TEST(CheckpointTest, TruncatedOrCorruptRejected) {
  std::ostringstream os;
  save_checkpoint(os, init_params(tiny_config()));
  const std::string text = os.str();
  for (std::size_t cut : {std::size_t{0}, text.size() / 3, text.size() - 5}) {
    std::istringstream is(text.substr(0, cut));
    EXPECT_ANY_THROW(load_checkpoint(is)) << "cut at " << cut;
  }
  std::string bad = text;
  bad.replace(bad.rfind("0x"), 2, "zz");
  std::istringstream is(bad);
  EXPECT_ANY_THROW(load_checkpoint(is));
}

class HeadsTest : public ::testing::Test {
 protected:
  std::mt19937_64 rng{17};
  ModelConfig config = tiny_config();
  ModelParams params = init_params(config);
  Tensor x = random_matrix(5, 3, rng, 0.5);
};

TEST_F(HeadsTest, EncodeShape) {
  for (std::size_t T : {1u, 2u, 7u}) {
    const Tensor h = encode(params, random_matrix(T, 3, rng));
    EXPECT_EQ(h.rows(), T);
    EXPECT_EQ(h.cols(), config.enc_hidden);
  }
  EXPECT_THROW(encode(params, random_matrix(4, 2, rng)), ShapeError);
}

TEST_F(HeadsTest, ZeroInputGivesBiasesThroughNonlinearities) {
  // Layer 0 at t=0 sees zero input and zero state, so its output is tanh(b).
  const Tensor h0 = encode(params, Tensor::zeros({1, 3}));
  ModelConfig one = config;
  one.enc_layers = 1;
  ModelParams single = init_params(one);
  const Tensor h = encode(single, Tensor::zeros({1, 3}));
  const Tensor& b = single.at("enc.l0.b");
  for (std::size_t j = 0; j < one.enc_hidden; ++j) EXPECT_NEAR(h.at(j), std::tanh(b.at(j)), 1e-15);
  // Second layer: tanh(W_in tanh(b0) + b1).
  const Tensor expect =
      tanh(add(matmul(tanh(params.at("enc.l0.b")), params.at("enc.l1.w_in")), params.at("enc.l1.b")));
  for (std::size_t j = 0; j < config.enc_hidden; ++j) EXPECT_NEAR(h0.at(j), expect.at(j), 1e-15);
}

TEST_F(HeadsTest, UnidirectionalEncoderIsCausal) {
  const Tensor longer = concat({x, random_matrix(3, 3, rng)}, 0);
  const Tensor a = encode(params, x);
  const Tensor b = encode(params, longer);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a.at(i), b.at(i));
}

TEST_F(HeadsTest, BidirectionalEncoderSeesTheFuture) {
  ModelConfig c = config;
  c.bidirectional = true;
  const ModelParams bp = init_params(c);
  const Tensor a = encode(bp, x);
  const Tensor b = encode(bp, concat({x, random_matrix(3, 3, rng)}, 0));
  EXPECT_EQ(a.cols(), c.enc_hidden);
  bool differs = false;
  for (std::size_t i = 0; i < a.numel(); ++i) differs |= a.at(i) != b.at(i);
  EXPECT_TRUE(differs);
}

TEST_F(HeadsTest, EncodeInputGradient) {
  Tensor leaf = x.clone(true);
  {
    Tape::Scope scope;
    backward(sum(encode(params, leaf)));
  }
  const Tensor numeric = fd_gradient(
      [&](const Tensor& z) {
        NoGradGuard ng;
        return sum(encode(params, z)).item();
      },
      x);
  EXPECT_LT(rel_err(leaf.grad(), numeric.values()), 1e-6);
}

TEST_F(HeadsTest, CtcHeadNormalizedAndShaped) {
  const Tensor lp = ctc_head(params, encode(params, x));
  EXPECT_EQ(lp.rows(), 5u);
  EXPECT_EQ(lp.cols(), config.vocab_size + 1);
  for (std::size_t t = 0; t < lp.rows(); ++t) EXPECT_NEAR(row_lse(lp, t), 0.0, 1e-9);
  EXPECT_THROW(ctc_head(params, random_matrix(2, 7, rng)), ShapeError);
}

TEST_F(HeadsTest, DecoderStepNormalizedDeterministicAttention) {
  const Tensor h = encode(params, x);
  const WordId sos = static_cast<WordId>(config.vocab_size);
  const std::vector<WordId> prefix{sos, 1, 0};
  const Tensor a = decoder_step(params, h, prefix);
  const Tensor b = decoder_step(params, h, prefix);
  EXPECT_EQ(a.cols(), config.vocab_size + 1);
  EXPECT_NEAR(row_lse(a, 0), 0.0, 1e-9);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a.at(i), b.at(i));
  AttentionDecoder dec(params, h);
  for (WordId w : prefix) {
    (void)dec.step(w);
    const Tensor& att = dec.last_attention();
    EXPECT_EQ(att.cols(), 5u);
    double s = 0.0;
    for (double v : att.values()) {
      EXPECT_GE(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  EXPECT_EQ(dec.steps_taken(), 3u);
  EXPECT_THROW(decoder_step(params, h, {}), std::invalid_argument);
  EXPECT_THROW(decoder_step(params, h, {1, 0}), std::invalid_argument);
}

TEST_F(HeadsTest, IncrementalDecoderMatchesPrefixCalls) {
  const Tensor h = encode(params, x);
  const WordId sos = static_cast<WordId>(config.vocab_size);
  AttentionDecoder dec(params, h);
  std::vector<WordId> prefix{sos};
  for (WordId next : {2, 0, 1}) {
    const Tensor inc = dec.step(prefix.back());
    const Tensor full = decoder_step(params, h, prefix);
    for (std::size_t i = 0; i < inc.numel(); ++i) EXPECT_EQ(inc.at(i), full.at(i));
    prefix.push_back(next);
  }
}

TEST_F(HeadsTest, DiscriminatorPermutationInvariant) {
  const Tensor h = encode(params, x);
  const Tensor a = discriminate(params, h);
  EXPECT_EQ(a.cols(), config.n_accents);
  EXPECT_NEAR(row_lse(a, 0), 0.0, 1e-9);
  std::vector<Tensor> rows;
  for (std::size_t t = h.rows(); t-- > 0;) rows.push_back(slice(h, 0, t, t + 1));
  std::swap(rows[0], rows[2]);
  const Tensor b = discriminate(params, concat(rows, 0));
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.at(i), b.at(i), 1e-13);
  EXPECT_THROW(discriminate(params, Tensor::zeros({0, config.enc_hidden})), std::exception);
}

TEST_F(HeadsTest, ParameterGradientsMatchFiniteDifferences) {
  const Tensor xin = x;
  const WordId sos = static_cast<WordId>(config.vocab_size);
  // Touches every parameter: encoder, CTC projection, decoder and discriminator.
  auto loss = [&] {
    const Tensor h = encode(params, xin);
    Tensor l = sum(slice(ctc_head(params, h), 1, 0, 2));
    l = add(l, sum(decoder_step(params, h, {sos, 1})));
    return add(l, sum(discriminate(params, h)));
  };
  EXPECT_LT(testing::worst_param_rel_err(params, loss), 1e-6);
}

TEST_F(HeadsTest, BidirectionalParameterGradients) {
  ModelConfig c = config;
  c.bidirectional = true;
  ModelParams bp = init_params(c);
  auto loss = [&] { return sum(ctc_head(bp, encode(bp, x))); };
  EXPECT_LT(testing::worst_param_rel_err(bp, loss), 1e-6);
}

TEST(ParamsTest, CloneIsDeepAndUniqueNames) {
  ModelParams p = init_params(tiny_config());
  ModelParams q = p.clone(true);
  q.at("ctc.b").mutable_values()[0] += 1.0;
  EXPECT_NE(p.at("ctc.b").at(0), q.at("ctc.b").at(0));
  EXPECT_TRUE(q.at("ctc.b").requires_grad());
  EXPECT_THROW(p.insert("ctc.b", Tensor::zeros({1})), std::invalid_argument);
  EXPECT_THROW(p.at("nope"), std::out_of_range);
  std::size_t n = 0;
  for (const auto& [name, t] : p.tensors()) n += t.numel();
  EXPECT_EQ(n, p.parameter_count());
}

}  // namespace
}  // namespace advmtl
