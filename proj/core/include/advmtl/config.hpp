#pragma once

// One JSON document describing a whole experiment: world, data, model,
// training, attack and grid. Every CLI subcommand reads the same schema and
// ignores the sections it does not need.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "advmtl/attack.hpp"
#include "advmtl/model.hpp"
#include "advmtl/toyspeech.hpp"
#include "advmtl/training.hpp"

namespace advmtl {

struct DataConfig {
  std::uint64_t seed = 7;
  std::size_t n_train = 2000;
  std::size_t n_valid = 200;
  std::size_t n_test = 200;
  LengthRange lengths;
};

/// The fixed pool adversarial targets are selected from.
struct TargetConfig {
  std::uint64_t seed = 99;
  std::size_t count = 20;
  LengthRange lengths;
};

struct AttackPlan {
  AttackCalibration calibration;
  std::size_t steps = 200;
  std::vector<std::size_t> report_at{10, 50, 100, 200};
  /// Longest hypothesis greedy decoding may emit.
  std::size_t max_decode_len = 12;
};

enum class InferenceMode {
  kMatch,    ///< lambda_i_C = lambda_t_C
  kDropCtc,  ///< lambda_i_C = 0
};

std::string to_string(InferenceMode mode);
InferenceMode parse_inference_mode(const std::string& s);
double inference_lambda(InferenceMode mode, double lambda_t_C);

enum class GridLayout {
  kTables,  ///< only the cells the three result tables use
  kCross,   ///< every (lambda_t_A, lambda_t_C) pair
};

std::string to_string(GridLayout layout);
GridLayout parse_grid_layout(const std::string& s);

struct GridSpec {
  GridLayout layout = GridLayout::kTables;
  std::vector<double> lambda_t_A{1.0, 0.9, 0.8, 0.7, 0.6, 0.5};
  std::vector<double> lambda_t_C{0.0, 0.3, 0.5, 0.7, 1.0};
  std::vector<InferenceMode> modes{InferenceMode::kMatch, InferenceMode::kDropCtc};
  std::vector<std::uint64_t> seeds{1, 2, 3};

  void validate() const;
};

namespace experiment_defaults {
// Where a full experiment departs from a section's own defaults: transcripts
// follow a 4-successor grammar, the encoder is bidirectional, training uses
// clipped Adam, and the attack radius is 20% of the median feature norm.
inline WorldConfig world() {
  WorldConfig w;
  w.grammar_successors = 4;
  return w;
}
inline ModelConfig model() {
  ModelConfig m;
  m.bidirectional = true;
  return m;
}
inline TrainConfig train() {
  TrainConfig t;
  t.optimizer = OptimizerKind::kAdam;
  t.learning_rate = 3e-3;
  t.clip_norm = 5.0;
  return t;
}
inline AttackPlan attack() {
  AttackPlan a;
  a.calibration.epsilon_ratio = 0.2;
  return a;
}
}  // namespace experiment_defaults

struct ExperimentConfig {
  WorldConfig world = experiment_defaults::world();
  DataConfig data;
  ModelConfig model = experiment_defaults::model();
  TrainConfig train = experiment_defaults::train();
  TargetConfig targets;
  AttackPlan attack = experiment_defaults::attack();
  GridSpec grid;
  /// Worker threads for grid cells and per-sample attacks; 0 picks the
  /// hardware concurrency.
  unsigned threads = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const WorldConfig& c);
void from_json(const nlohmann::json& j, WorldConfig& c);
void to_json(nlohmann::json& j, const LengthRange& c);
void from_json(const nlohmann::json& j, LengthRange& c);
void to_json(nlohmann::json& j, const DataConfig& c);
void from_json(const nlohmann::json& j, DataConfig& c);
void to_json(nlohmann::json& j, const TargetConfig& c);
void from_json(const nlohmann::json& j, TargetConfig& c);
void to_json(nlohmann::json& j, const AttackPlan& c);
void from_json(const nlohmann::json& j, AttackPlan& c);
void to_json(nlohmann::json& j, const GridSpec& c);
void from_json(const nlohmann::json& j, GridSpec& c);
void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

/// Reads a config file; missing keys take their defaults.
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// FNV-1a of the canonical JSON dump, as 16 hex digits. `threads` is left out
/// because it never changes results.
std::string config_hash(const ExperimentConfig& c);

unsigned resolve_threads(unsigned requested);

}  // namespace advmtl
