#pragma once

// Shared recurrent encoder with three heads: CTC, attention decoder and the
// accent discriminator.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "advmtl/tensor.hpp"
#include "advmtl/types.hpp"

namespace advmtl {

struct ModelConfig {
  std::size_t feat_dim = 16;
  std::size_t enc_hidden = 32;
  std::size_t enc_layers = 2;
  /// Run each encoder layer in both directions, enc_hidden / 2 units each.
  /// Unidirectional keeps earlier outputs independent of later frames.
  bool bidirectional = false;
  std::size_t dec_hidden = 32;
  std::size_t attn_dim = 32;
  /// Word types shared by both ASR heads; each head adds one symbol (blank / eos).
  std::size_t vocab_size = 40;
  std::size_t disc_layers = 5;
  std::size_t disc_hidden = 32;
  std::size_t n_accents = 2;
  std::uint64_t seed = 1;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Named parameter leaves, iterated in name order.
class ModelParams {
 public:
  ModelParams() = default;
  explicit ModelParams(ModelConfig config) : config_(config) {}

  const ModelConfig& config() const { return config_; }

  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  void insert(const std::string& name, Tensor t);
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  const std::map<std::string, Tensor>& tensors() const { return tensors_; }
  std::map<std::string, Tensor>& tensors() { return tensors_; }
  std::size_t parameter_count() const;

  /// Deep copy; leaves require grad iff `trainable`.
  ModelParams clone(bool trainable) const;
  void zero_grad();
  bool all_finite() const;

 private:
  ModelConfig config_;
  std::map<std::string, Tensor> tensors_;
};

ModelParams init_params(const ModelConfig& config);

/// Hex-float text checkpoint; exact round trip.
void save_checkpoint(std::ostream& os, const ModelParams& params);
ModelParams load_checkpoint(std::istream& is);
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_checkpoint(const std::filesystem::path& path);

/// Stacked tanh RNN, optionally bidirectional; (T x F) -> (T x enc_hidden).
Tensor encode(const ModelParams& params, const Tensor& x);

/// (T x d) -> (T x (V+1)) log-probabilities; column V is blank.
Tensor ctc_head(const ModelParams& params, const Tensor& hidden);

/// Incremental attention decoder over a fixed encoder output.
class AttentionDecoder {
 public:
  AttentionDecoder(const ModelParams& params, Tensor hidden);

  /// Consumes the previous token (sos first) and returns 1 x (V+1)
  /// log-probabilities for the next one; column V is eos.
  Tensor step(WordId previous);
  /// Attention weights (1 x T) used by the most recent step.
  const Tensor& last_attention() const { return attention_; }
  std::size_t steps_taken() const { return steps_; }

 private:
  const ModelParams& params_;
  Tensor hidden_;
  Tensor keys_;
  Tensor state_;
  Tensor context_;
  Tensor attention_;
  std::size_t steps_ = 0;
};

/// Next-token log-probabilities after `prefix`, which must start with sos.
Tensor decoder_step(const ModelParams& params, const Tensor& hidden,
                    const std::vector<WordId>& prefix);

/// Mean-pooled 5-layer MLP; 1 x n_accents log-probabilities.
Tensor discriminate(const ModelParams& params, const Tensor& hidden);

}  // namespace advmtl
