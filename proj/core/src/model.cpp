#include "advmtl/model.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

namespace advmtl {

// --- Config -----------------------------------------------------------------

void ModelConfig::validate() const {
  if (feat_dim == 0 || enc_hidden == 0 || enc_layers == 0 || dec_hidden == 0 ||
      attn_dim == 0 || vocab_size == 0 || disc_layers == 0 || disc_hidden == 0 ||
      n_accents == 0) {
    throw std::invalid_argument("model config dimensions must all be >= 1");
  }
  if (bidirectional && enc_hidden % 2 != 0) {
    throw std::invalid_argument("bidirectional encoder needs an even enc_hidden");
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"feat_dim", c.feat_dim},     {"enc_hidden", c.enc_hidden},
                     {"enc_layers", c.enc_layers}, {"bidirectional", c.bidirectional},
                     {"dec_hidden", c.dec_hidden},
                     {"attn_dim", c.attn_dim},     {"vocab_size", c.vocab_size},
                     {"disc_layers", c.disc_layers}, {"disc_hidden", c.disc_hidden},
                     {"n_accents", c.n_accents},   {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.feat_dim = j.value("feat_dim", d.feat_dim);
  c.enc_hidden = j.value("enc_hidden", d.enc_hidden);
  c.enc_layers = j.value("enc_layers", d.enc_layers);
  c.bidirectional = j.value("bidirectional", d.bidirectional);
  c.dec_hidden = j.value("dec_hidden", d.dec_hidden);
  c.attn_dim = j.value("attn_dim", d.attn_dim);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.disc_layers = j.value("disc_layers", d.disc_layers);
  c.disc_hidden = j.value("disc_hidden", d.disc_hidden);
  c.n_accents = j.value("n_accents", d.n_accents);
  c.seed = j.value("seed", d.seed);
  c.validate();
}

// --- ModelParams ------------------------------------------------------------

const Tensor& ModelParams::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("no parameter named " + name);
  return it->second;
}

Tensor& ModelParams::at(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("no parameter named " + name);
  return it->second;
}

void ModelParams::insert(const std::string& name, Tensor t) {
  if (!tensors_.emplace(name, std::move(t)).second) {
    throw std::invalid_argument("duplicate parameter " + name);
  }
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : tensors_) n += t.numel();
  return n;
}

ModelParams ModelParams::clone(bool trainable) const {
  ModelParams out(config_);
  for (const auto& [name, t] : tensors_) out.tensors_.emplace(name, t.clone(trainable));
  return out;
}

void ModelParams::zero_grad() {
  for (auto& [_, t] : tensors_) t.zero_grad();
}

bool ModelParams::all_finite() const {
  for (const auto& [_, t] : tensors_)
    for (double v : t.values())
      if (!std::isfinite(v)) return false;
  return true;
}

// --- Init -------------------------------------------------------------------

namespace {

std::string layer_name(const char* prefix, std::size_t i, const char* leaf) {
  return std::string(prefix) + std::to_string(i) + "." + leaf;
}

}  // namespace

ModelParams init_params(const ModelConfig& config) {
  config.validate();
  ModelParams p(config);
  std::mt19937_64 rng(config.seed);
  auto uniform = [&](std::size_t rows, std::size_t cols, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> v(rows * cols);
    for (auto& x : v) x = dist(rng);
    return Tensor::matrix(rows, cols, std::move(v), true);
  };

  const std::size_t F = config.feat_dim, d = config.enc_hidden;
  const std::size_t V1 = config.vocab_size + 1;
  const std::size_t dh = config.dec_hidden, a = config.attn_dim;

  const std::size_t hd = config.bidirectional ? d / 2 : d;
  for (std::size_t l = 0; l < config.enc_layers; ++l) {
    const std::size_t in = l == 0 ? F : d;
    p.insert(layer_name("enc.l", l, "w_in"), uniform(in, hd, in + hd));
    p.insert(layer_name("enc.l", l, "w_rec"), uniform(hd, hd, in + hd));
    p.insert(layer_name("enc.l", l, "b"), uniform(1, hd, in + hd));
    if (config.bidirectional) {
      p.insert(layer_name("enc.l", l, "rev.w_in"), uniform(in, hd, in + hd));
      p.insert(layer_name("enc.l", l, "rev.w_rec"), uniform(hd, hd, in + hd));
      p.insert(layer_name("enc.l", l, "rev.b"), uniform(1, hd, in + hd));
    }
  }

  p.insert("ctc.w", uniform(d, V1, d));
  p.insert("ctc.b", uniform(1, V1, d));

  // Embedding rows: words, then sos.
  p.insert("dec.embed", uniform(V1, dh, dh));
  p.insert("dec.w_ctx", uniform(d, dh, dh + d + dh));
  p.insert("dec.w_rec", uniform(dh, dh, dh + d + dh));
  p.insert("dec.b", uniform(1, dh, dh + d + dh));
  p.insert("dec.att.w_key", uniform(d, a, d));
  p.insert("dec.att.w_query", uniform(dh, a, dh));
  p.insert("dec.att.v", uniform(a, 1, a));
  p.insert("dec.out.w_state", uniform(dh, V1, dh + d));
  p.insert("dec.out.w_ctx", uniform(d, V1, dh + d));
  p.insert("dec.out.b", uniform(1, V1, dh + d));

  for (std::size_t l = 0; l < config.disc_layers; ++l) {
    const std::size_t in = l == 0 ? d : config.disc_hidden;
    const std::size_t out = l + 1 == config.disc_layers ? config.n_accents : config.disc_hidden;
    p.insert(layer_name("dis.l", l, "w"), uniform(in, out, in));
    p.insert(layer_name("dis.l", l, "b"), uniform(1, out, in));
  }
  return p;
}

// --- Checkpoints ------------------------------------------------------------
//
//   advmtl-checkpoint v1
//   config <one-line JSON ModelConfig>
//   param <name> <rows> <cols>
//   <rows*cols hex-float values, space separated>
//   ...
//   end <param count>

void save_checkpoint(std::ostream& os, const ModelParams& params) {
  nlohmann::json cfg = params.config();
  os << "advmtl-checkpoint v1\n";
  os << "config " << cfg.dump() << '\n';
  for (const auto& [name, t] : params.tensors()) {
    os << "param " << name << ' ' << t.rows() << ' ' << t.cols() << '\n';
    char buf[40];
    auto v = t.values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%a", v[i]);
      if (i) os << ' ';
      os << buf;
    }
    os << '\n';
  }
  os << "end " << params.tensors().size() << '\n';
}

ModelParams load_checkpoint(std::istream& is) {
  auto fail = [](const std::string& why) -> ModelParams {
    throw std::runtime_error("corrupt checkpoint: " + why);
  };
  std::string line;
  if (!std::getline(is, line) || line != "advmtl-checkpoint v1") return fail("missing magic line");
  if (!std::getline(is, line) || line.rfind("config ", 0) != 0) return fail("missing config line");
  ModelConfig config;
  try {
    config = nlohmann::json::parse(line.substr(7)).get<ModelConfig>();
  } catch (const std::exception& e) {
    return fail(std::string("bad config: ") + e.what());
  }
  ModelParams params(config);
  while (true) {
    if (!std::getline(is, line)) return fail("truncated (no end marker)");
    std::istringstream hs(line);
    std::string tag;
    hs >> tag;
    if (tag == "end") {
      std::size_t count = 0;
      if (!(hs >> count) || count != params.tensors().size()) return fail("parameter count mismatch");
      break;
    }
    if (tag != "param") return fail("unexpected line '" + line + "'");
    std::string name;
    std::size_t rows = 0, cols = 0;
    if (!(hs >> name >> rows >> cols)) return fail("bad param header '" + line + "'");
    if (!std::getline(is, line)) return fail("truncated values for " + name);
    std::vector<double> values;
    values.reserve(rows * cols);
    const char* p = line.c_str();
    char* end = nullptr;
    while (true) {
      while (*p == ' ') ++p;
      if (*p == '\0') break;
      const double v = std::strtod(p, &end);
      if (end == p) return fail("bad number in " + name);
      values.push_back(v);
      p = end;
    }
    if (values.size() != rows * cols) return fail("wrong value count for " + name);
    params.insert(name, Tensor::matrix(rows, cols, std::move(values), true));
  }
  return params;
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  save_checkpoint(os, params);
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  return load_checkpoint(is);
}

// --- Forward ----------------------------------------------------------------

namespace {

// One tanh recurrence over the rows of `in`; `prefix` selects the weights.
Tensor run_rnn(const ModelParams& params, const Tensor& in, const std::string& prefix,
               bool reversed) {
  const Tensor& w_in = params.at(prefix + "w_in");
  const Tensor& w_rec = params.at(prefix + "w_rec");
  const Tensor& b = params.at(prefix + "b");
  const std::size_t T = in.rows();
  Tensor projected = add(matmul(in, w_in), b);
  std::vector<Tensor> states(T);
  Tensor h;
  for (std::size_t k = 0; k < T; ++k) {
    const std::size_t t = reversed ? T - 1 - k : k;
    Tensor z = slice(projected, 0, t, t + 1);
    if (k > 0) z = add(z, matmul(h, w_rec));
    h = tanh(z);
    states[t] = h;
  }
  return concat(states, 0);
}

}  // namespace

Tensor encode(const ModelParams& params, const Tensor& x) {
  const auto& cfg = params.config();
  if (x.rank() != 2 || x.cols() != cfg.feat_dim) {
    throw ShapeError("encode: expected T x " + std::to_string(cfg.feat_dim) +
                     " input, got " + to_string(x.shape()));
  }
  const std::size_t T = x.rows();
  if (T == 0) throw ShapeError("encode: empty input");
  Tensor layer_in = x;
  for (std::size_t l = 0; l < cfg.enc_layers; ++l) {
    Tensor fwd = run_rnn(params, layer_in, layer_name("enc.l", l, ""), false);
    layer_in = cfg.bidirectional
                   ? concat({fwd, run_rnn(params, layer_in, layer_name("enc.l", l, "rev."), true)}, 1)
                   : fwd;
  }
  return layer_in;
}

Tensor ctc_head(const ModelParams& params, const Tensor& hidden) {
  const Tensor& w = params.at("ctc.w");
  if (hidden.rank() != 2 || hidden.cols() != w.rows()) {
    throw ShapeError("ctc_head: hidden has shape " + to_string(hidden.shape()));
  }
  return log_softmax(add(matmul(hidden, w), params.at("ctc.b")), 1);
}

AttentionDecoder::AttentionDecoder(const ModelParams& params, Tensor hidden)
    : params_(params), hidden_(std::move(hidden)) {
  const auto& cfg = params.config();
  if (hidden_.rank() != 2 || hidden_.cols() != cfg.enc_hidden || hidden_.rows() == 0) {
    throw ShapeError("AttentionDecoder: hidden has shape " + to_string(hidden_.shape()));
  }
  keys_ = matmul(hidden_, params.at("dec.att.w_key"));
  state_ = Tensor::zeros({1, cfg.dec_hidden});
  context_ = Tensor::zeros({1, cfg.enc_hidden});
}

Tensor AttentionDecoder::step(WordId previous) {
  const auto& cfg = params_.config();
  if (previous < 0 || static_cast<std::size_t>(previous) > cfg.vocab_size) {
    throw std::out_of_range("decoder input token " + std::to_string(previous));
  }
  const int id = previous;
  Tensor embedded = embedding_lookup(params_.at("dec.embed"), std::span<const int>(&id, 1));
  Tensor pre = add(embedded, params_.at("dec.b"));
  if (steps_ > 0) {
    pre = add(pre, matmul(context_, params_.at("dec.w_ctx")));
    pre = add(pre, matmul(state_, params_.at("dec.w_rec")));
  }
  state_ = tanh(pre);

  // Additive attention: score_t = v . tanh(key_t + W_q s)
  Tensor query = matmul(state_, params_.at("dec.att.w_query"));
  Tensor energy = matmul(tanh(add(keys_, query)), params_.at("dec.att.v"));
  attention_ = exp(log_softmax(transpose(energy), 1));
  context_ = matmul(attention_, hidden_);

  Tensor logits = add(add(matmul(state_, params_.at("dec.out.w_state")),
                          matmul(context_, params_.at("dec.out.w_ctx"))),
                      params_.at("dec.out.b"));
  ++steps_;
  return log_softmax(logits, 1);
}

Tensor decoder_step(const ModelParams& params, const Tensor& hidden,
                    const std::vector<WordId>& prefix) {
  if (prefix.empty()) throw std::invalid_argument("decoder_step: empty prefix");
  if (prefix.front() != static_cast<WordId>(params.config().vocab_size)) {
    throw std::invalid_argument("decoder_step: prefix must start with sos");
  }
  AttentionDecoder dec(params, hidden);
  Tensor out;
  for (WordId w : prefix) out = dec.step(w);
  return out;
}

Tensor discriminate(const ModelParams& params, const Tensor& hidden) {
  const auto& cfg = params.config();
  if (hidden.rank() != 2 || hidden.rows() == 0) {
    throw ShapeError("discriminate: empty hidden sequence");
  }
  Tensor h = mean(hidden, 0);
  for (std::size_t l = 0; l < cfg.disc_layers; ++l) {
    h = add(matmul(h, params.at(layer_name("dis.l", l, "w"))),
            params.at(layer_name("dis.l", l, "b")));
    if (l + 1 < cfg.disc_layers) h = relu(h);
  }
  return log_softmax(h, 1);
}

}  // namespace advmtl
