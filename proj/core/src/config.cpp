#include "advmtl/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <thread>

#include <nlohmann/json.hpp>

namespace advmtl {

std::string to_string(InferenceMode mode) {
  return mode == InferenceMode::kMatch ? "match" : "drop_ctc";
}

InferenceMode parse_inference_mode(const std::string& s) {
  if (s == "match") return InferenceMode::kMatch;
  if (s == "drop_ctc") return InferenceMode::kDropCtc;
  throw std::invalid_argument("unknown inference mode '" + s + "'");
}

std::string to_string(GridLayout layout) {
  return layout == GridLayout::kTables ? "tables" : "cross";
}

GridLayout parse_grid_layout(const std::string& s) {
  if (s == "tables") return GridLayout::kTables;
  if (s == "cross") return GridLayout::kCross;
  throw std::invalid_argument("unknown grid layout '" + s + "'");
}

double inference_lambda(InferenceMode mode, double lambda_t_C) {
  return mode == InferenceMode::kMatch ? lambda_t_C : 0.0;
}

void GridSpec::validate() const {
  if (lambda_t_A.empty() || lambda_t_C.empty()) {
    throw std::invalid_argument("grid: lambda lists must be nonempty");
  }
  if (modes.empty()) throw std::invalid_argument("grid: mode set must be nonempty");
  if (seeds.empty()) throw std::invalid_argument("grid: seed list must be nonempty");
  for (double a : lambda_t_A)
    for (double c : lambda_t_C) MtlWeights::matched(a, c).validate();
}

void ExperimentConfig::validate() const {
  if (data.n_train == 0 || data.n_valid == 0 || data.n_test == 0) {
    throw std::invalid_argument("data: split sizes must be >= 1");
  }
  model.validate();
  train.validate();
  grid.validate();
  if (attack.max_decode_len == 0) throw std::invalid_argument("attack: max_decode_len must be >= 1");
  if (!std::is_sorted(attack.report_at.begin(), attack.report_at.end()) ||
      (!attack.report_at.empty() && attack.report_at.back() > attack.steps)) {
    throw std::invalid_argument("attack: report_at must be sorted and <= steps");
  }
  if (!(attack.calibration.epsilon_ratio > 0.0) || !(attack.calibration.alpha_ratio > 0.0)) {
    throw std::invalid_argument("attack: calibration ratios must be > 0");
  }
}

// --- JSON -------------------------------------------------------------------

void to_json(nlohmann::json& j, const LengthRange& c) { j = {{"min", c.min}, {"max", c.max}}; }

void from_json(const nlohmann::json& j, LengthRange& c) {
  LengthRange d;
  c.min = j.value("min", d.min);
  c.max = j.value("max", d.max);
  if (c.min < 1 || c.max < c.min) throw std::invalid_argument("invalid length range");
}

void to_json(nlohmann::json& j, const WorldConfig& c) {
  j = {{"feat_dim", c.feat_dim},
       {"noise_sigma", c.noise_sigma},
       {"min_frames_per_word", c.min_frames_per_word},
       {"max_frames_per_word", c.max_frames_per_word},
       {"world_seed", c.world_seed},
       {"lorem_in_train", c.lorem_in_train},
       {"grammar_successors", c.grammar_successors}};
}

void from_json(const nlohmann::json& j, WorldConfig& c) {
  WorldConfig d;
  c.feat_dim = j.value("feat_dim", d.feat_dim);
  c.noise_sigma = j.value("noise_sigma", d.noise_sigma);
  c.min_frames_per_word = j.value("min_frames_per_word", d.min_frames_per_word);
  c.max_frames_per_word = j.value("max_frames_per_word", d.max_frames_per_word);
  c.world_seed = j.value("world_seed", d.world_seed);
  c.lorem_in_train = j.value("lorem_in_train", d.lorem_in_train);
  c.grammar_successors = j.value("grammar_successors", d.grammar_successors);
}

void to_json(nlohmann::json& j, const DataConfig& c) {
  j = {{"seed", c.seed},       {"n_train", c.n_train}, {"n_valid", c.n_valid},
       {"n_test", c.n_test},   {"lengths", c.lengths}};
}

void from_json(const nlohmann::json& j, DataConfig& c) {
  DataConfig d;
  c.seed = j.value("seed", d.seed);
  c.n_train = j.value("n_train", d.n_train);
  c.n_valid = j.value("n_valid", d.n_valid);
  c.n_test = j.value("n_test", d.n_test);
  c.lengths = j.value("lengths", d.lengths);
}

void to_json(nlohmann::json& j, const TargetConfig& c) {
  j = {{"seed", c.seed}, {"count", c.count}, {"lengths", c.lengths}};
}

void from_json(const nlohmann::json& j, TargetConfig& c) {
  TargetConfig d;
  c.seed = j.value("seed", d.seed);
  c.count = j.value("count", d.count);
  c.lengths = j.value("lengths", d.lengths);
}

void to_json(nlohmann::json& j, const AttackPlan& c) {
  j = {{"epsilon_ratio", c.calibration.epsilon_ratio},
       {"alpha_ratio", c.calibration.alpha_ratio},
       {"steps", c.steps},
       {"report_at", c.report_at},
       {"max_decode_len", c.max_decode_len}};
}

void from_json(const nlohmann::json& j, AttackPlan& c) {
  AttackPlan d;
  c.calibration.epsilon_ratio = j.value("epsilon_ratio", d.calibration.epsilon_ratio);
  c.calibration.alpha_ratio = j.value("alpha_ratio", d.calibration.alpha_ratio);
  c.steps = j.value("steps", d.steps);
  c.report_at = j.value("report_at", d.report_at);
  c.max_decode_len = j.value("max_decode_len", d.max_decode_len);
}

void to_json(nlohmann::json& j, const GridSpec& c) {
  std::vector<std::string> modes;
  for (auto m : c.modes) modes.push_back(to_string(m));
  j = {{"layout", to_string(c.layout)},
       {"lambda_t_A", c.lambda_t_A},
       {"lambda_t_C", c.lambda_t_C},
       {"modes", modes},
       {"seeds", c.seeds}};
}

void from_json(const nlohmann::json& j, GridSpec& c) {
  GridSpec d;
  c.layout = parse_grid_layout(j.value("layout", to_string(d.layout)));
  c.lambda_t_A = j.value("lambda_t_A", d.lambda_t_A);
  c.lambda_t_C = j.value("lambda_t_C", d.lambda_t_C);
  c.seeds = j.value("seeds", d.seeds);
  c.modes = d.modes;
  if (j.contains("modes")) {
    c.modes.clear();
    for (const auto& m : j.at("modes")) c.modes.push_back(parse_inference_mode(m.get<std::string>()));
  }
  c.validate();
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = {{"world", c.world},   {"data", c.data},       {"model", c.model},
       {"train", c.train},   {"targets", c.targets}, {"attack", c.attack},
       {"grid", c.grid},     {"threads", c.threads}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  // Missing keys fall back to the experiment defaults, which differ from some
  // section structs' own defaults, so patch the full default document.
  nlohmann::json full = ExperimentConfig{};
  full.merge_patch(j);
  c.world = full.at("world").get<WorldConfig>();
  c.data = full.at("data").get<DataConfig>();
  c.model = full.at("model").get<ModelConfig>();
  c.train = full.at("train").get<TrainConfig>();
  c.targets = full.at("targets").get<TargetConfig>();
  c.attack = full.at("attack").get<AttackPlan>();
  c.grid = full.at("grid").get<GridSpec>();
  c.threads = full.at("threads").get<unsigned>();
  c.validate();
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read config " + path.string());
  try {
    return nlohmann::json::parse(is).get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("invalid config " + path.string() + ": " + e.what());
  }
}

std::string config_hash(const ExperimentConfig& c) {
  nlohmann::json j = c;
  j.erase("threads");
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

unsigned resolve_threads(unsigned requested) {
  if (requested > 0) return requested;
  return std::max(1u, std::thread::hardware_concurrency());
}

}  // namespace advmtl
