#pragma once

// Grid runner, report CSVs and the robustness trend check.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "advmtl/config.hpp"

namespace advmtl {

/// Everything an experiment needs that follows from its config alone.
struct Workbench {
  ToySpeech world;
  DatasetSplit data;
  std::vector<Transcript> targets;
  AttackConfig attack;  ///< calibrated on the test split; weights unset

  explicit Workbench(const ExperimentConfig& config);
  /// Uses previously generated data and targets instead of regenerating them.
  Workbench(const ExperimentConfig& config, DatasetSplit data, std::vector<Transcript> targets);
};

struct ReportRow {
  double lambda_t_A = 1.0;
  double lambda_t_C = 0.0;
  double lambda_i_C = 0.0;
  InferenceMode mode = InferenceMode::kMatch;
  std::uint64_t seed = 0;
  std::size_t attack_steps = 0;
  double benign_wer = 0.0;
  double accent_acc = 0.0;
  double adv_twer = 0.0;
  std::size_t n_samples = 0;
  std::size_t n_skipped = 0;

  friend bool operator==(const ReportRow&, const ReportRow&) = default;
};

/// Pooled AdvTWER at each report step over the attackable samples.
struct AttackSummary {
  std::map<std::size_t, double> adv_twer;
  std::size_t n_samples = 0;
  std::size_t n_skipped = 0;
};

/// Attacks every test utterance toward its selected target. Samples too short
/// for a CTC target are skipped, never silently attacked with another loss.
AttackSummary attack_test_set(const ModelParams& params, const std::vector<Utterance>& test,
                              const std::vector<Transcript>& targets,
                              const AttackConfig& config, std::size_t max_decode_len,
                              unsigned threads = 1);

/// Benign and adversarial rows for one trained model, one per report step.
std::vector<ReportRow> evaluate_model(const ModelParams& params, const Workbench& bench,
                                      const ExperimentConfig& config, double lambda_t_A,
                                      double lambda_t_C, InferenceMode mode,
                                      std::uint64_t seed, unsigned threads = 1);

/// Training config for one grid cell: the cell's weights, with the seed
/// applied to both initialization and shuffling.
ModelConfig cell_model_config(const ExperimentConfig& config, std::uint64_t seed);
TrainConfig cell_train_config(const ExperimentConfig& config, double lambda_t_A,
                              double lambda_t_C, std::uint64_t seed);

struct GridCell {
  double lambda_t_A;
  double lambda_t_C;
  std::uint64_t seed;
};

/// True for the cells the result tables read: lambda_t_A = 1 (CTC vs decoder),
/// lambda_t_C = 0 (decoder + discriminator) and lambda_t_C = 0.5 (all heads).
bool table_cell(double lambda_t_A, double lambda_t_C);

std::vector<GridCell> grid_cells(const GridSpec& grid);

using GridProgress = std::function<void(const GridCell&, std::size_t done, std::size_t total)>;

/// Trains once per (lambda_t_A, lambda_t_C, seed) and attacks once per mode.
/// Rows come back in cell order regardless of thread scheduling. When
/// `checkpoint_dir` is nonempty every trained model is saved there.
std::vector<ReportRow> run_grid(const ExperimentConfig& config,
                                const std::filesystem::path& checkpoint_dir = {},
                                const GridProgress& progress = {});

// CSV with a leading comment line "# advmtl <version> config=<hash> wer=pooled".
void write_report_csv(std::ostream& os, const std::vector<ReportRow>& rows,
                      const std::string& config_hash);
std::vector<ReportRow> read_report_csv(std::istream& is);
void write_report_csv(const std::filesystem::path& path, const std::vector<ReportRow>& rows,
                      const std::string& config_hash);
std::vector<ReportRow> read_report_csv(const std::filesystem::path& path);

/// Seed-median of one configuration at one attack step.
struct MedianRow {
  double lambda_t_A, lambda_t_C, lambda_i_C;
  InferenceMode mode;
  std::size_t attack_steps;
  double benign_wer, accent_acc, adv_twer;
  std::size_t seeds;
};

std::vector<MedianRow> seed_medians(const std::vector<ReportRow>& rows);

/// Writes table_ctc_decoder.csv, table_decoder_discriminator.csv,
/// table_all_heads.csv and advtwer_vs_steps.csv into `dir`.
void write_tables(const std::filesystem::path& dir, const std::vector<ReportRow>& rows,
                  const std::string& config_hash);

struct TrendResult {
  std::string name;  ///< "a".."d"
  std::size_t attack_steps;
  bool pass;
  std::string detail;
};

/// The four robustness orderings on seed-median AdvTWER at each of `steps`.
/// Throws std::invalid_argument when a required cell is missing.
std::vector<TrendResult> trend_check(const std::vector<ReportRow>& rows,
                                     const std::vector<std::size_t>& steps = {100, 200},
                                     double tolerance = 0.02);

}  // namespace advmtl
