// advmtl: data generation, training, evaluation, attacks and the experiment grid.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "advmtl/config.hpp"
#include "advmtl/experiments.hpp"
#include "advmtl/metrics.hpp"

namespace fs = std::filesystem;
using namespace advmtl;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

ExperimentConfig load_config(const Common& c) {
  return c.config.empty() ? ExperimentConfig{} : load_experiment_config(c.config);
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

// Dataset and targets from a gen-data directory, or regenerated from config.
Workbench make_bench(const ExperimentConfig& cfg, const std::string& data_dir) {
  if (data_dir.empty()) return Workbench(cfg);
  ToySpeech world(cfg.world);
  DatasetSplit data = load_dataset(data_dir, world.vocab(), world.feat_dim());
  std::ifstream ts(fs::path(data_dir) / "targets.txt");
  if (!ts) throw std::runtime_error("missing " + (fs::path(data_dir) / "targets.txt").string());
  return Workbench(cfg, std::move(data), read_transcripts(ts, world.vocab()));
}

std::string report_trends(const std::vector<ReportRow>& rows,
                          const std::vector<std::size_t>& steps, bool& all_pass) {
  std::string out;
  all_pass = true;
  for (const auto& t : trend_check(rows, steps)) {
    out += std::string(t.pass ? "PASS" : "FAIL") + " trend_" + t.name + " steps=" +
           std::to_string(t.attack_steps) + " " + t.detail + "\n";
    all_pass = all_pass && t.pass;
  }
  return out;
}

void add_common(CLI::App* sub, Common& c, bool out_required = true) {
  sub->add_option("--config", c.config, "Experiment config JSON")->check(CLI::ExistingFile);
  sub->add_option("--seed", c.seed, "Seed override");
  auto* o = sub->add_option("--out", c.out, "Output path");
  if (out_required) o->required();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hybrid CTC/attention multi-task training and targeted PGD evaluation"};
  app.set_version_flag("--version", std::string(ADVMTL_VERSION));
  app.require_subcommand(1);

  Common common;
  std::string data_dir, checkpoint;
  std::optional<double> lambda_t_A, lambda_t_C;
  std::string mode_name = "match";
  std::optional<std::size_t> steps;
  std::string report_in;
  bool save_models = false;
  bool strict = false;
  std::vector<std::size_t> trend_steps{100, 200};

  auto* gen = app.add_subcommand("gen-data", "Write train/valid/test splits and the target pool");
  add_common(gen, common);

  auto* train = app.add_subcommand("train", "Train one model; writes model.ckpt and train_log.csv");
  add_common(train, common);
  train->add_option("--data", data_dir, "Directory written by gen-data");
  train->add_option("--lambda-t-a", lambda_t_A, "ASR vs accent weight")->check(CLI::Range(0.0, 1.0));
  train->add_option("--lambda-t-c", lambda_t_C, "CTC vs decoder weight")->check(CLI::Range(0.0, 1.0));

  auto* eval = app.add_subcommand("eval", "Benign WER and accent accuracy as JSON");
  add_common(eval, common, false);
  eval->add_option("--data", data_dir, "Directory written by gen-data");
  eval->add_option("--checkpoint", checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--lambda-t-c", lambda_t_C, "Training CTC weight of the checkpoint");
  eval->add_option("--mode", mode_name, "match or drop_ctc");

  auto* attack = app.add_subcommand("attack", "Attack the test split; writes report rows as CSV");
  add_common(attack, common);
  attack->add_option("--data", data_dir, "Directory written by gen-data");
  attack->add_option("--checkpoint", checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
  attack->add_option("--lambda-t-a", lambda_t_A, "Training weight of the checkpoint");
  attack->add_option("--lambda-t-c", lambda_t_C, "Training CTC weight of the checkpoint");
  attack->add_option("--mode", mode_name, "match or drop_ctc");
  attack->add_option("--steps", steps, "PGD iterations (snapshots at configured steps up to this)");

  auto* grid = app.add_subcommand("grid", "Full grid: report.csv, tables and trend.txt under --out");
  add_common(grid, common);
  grid->add_option("--steps", steps, "PGD iterations");
  grid->add_flag("--save-models", save_models, "Keep every trained checkpoint under --out/models");
  grid->add_flag("--strict", strict, "Exit nonzero when a trend assertion fails");
  grid->add_option("--trend-steps", trend_steps, "Attack steps the trend check reads")->delimiter(',');

  auto* report = app.add_subcommand("report", "Tables and trend check from a report.csv");
  add_common(report, common);
  report->add_option("--in", report_in, "report.csv from grid or attack")->required()->check(CLI::ExistingFile);
  report->add_flag("--strict", strict, "Exit nonzero when a trend assertion fails");
  report->add_option("--trend-steps", trend_steps, "Attack steps the trend check reads")->delimiter(',');

  CLI11_PARSE(app, argc, argv);

  try {
    ExperimentConfig cfg = load_config(common);
    if (steps) {
      cfg.attack.steps = *steps;
      std::vector<std::size_t> keep;
      for (std::size_t k : cfg.attack.report_at)
        if (k < *steps) keep.push_back(k);
      keep.push_back(*steps);
      cfg.attack.report_at = keep;
    }
    const InferenceMode mode = parse_inference_mode(mode_name);

    if (gen->parsed()) {
      if (common.seed) cfg.data.seed = *common.seed;
      Workbench bench(cfg);
      save_dataset(common.out, bench.data, bench.world.vocab(), bench.world.feat_dim());
      std::ostringstream ts;
      write_transcripts(ts, bench.targets, bench.world.vocab());
      write_text(fs::path(common.out) / "targets.txt", ts.str());
      write_text(fs::path(common.out) / "config.json", nlohmann::json(cfg).dump(2) + "\n");
      std::printf("wrote %zu/%zu/%zu utterances and %zu targets to %s\n", bench.data.train.size(),
                  bench.data.valid.size(), bench.data.test.size(), bench.targets.size(),
                  common.out.c_str());
      return 0;
    }

    if (train->parsed()) {
      const std::uint64_t seed = common.seed.value_or(cfg.train.seed);
      const double a = lambda_t_A.value_or(cfg.train.weights.lambda_t_A);
      const double c = lambda_t_C.value_or(cfg.train.weights.lambda_t_C);
      Workbench bench = make_bench(cfg, data_dir);
      const auto start = std::chrono::steady_clock::now();
      TrainResult r = train_mtl(cell_model_config(cfg, seed), cell_train_config(cfg, a, c, seed),
                                bench.data, [&](const EpochLog& e) {
                                  std::fprintf(stderr, "epoch %zu train %.4f valid %.4f\n",
                                               e.epoch, e.train.l_mtl, e.valid.l_mtl);
                                });
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      save_checkpoint(fs::path(common.out) / "model.ckpt", r.params);
      std::ostringstream log;
      write_train_log_csv(log, r.log);
      write_text(fs::path(common.out) / "train_log.csv", log.str());
      std::printf("best epoch %zu valid l_mtl %.6f (%.1fs)\n", r.log.best_epoch,
                  r.log.best_valid_loss, secs);
      return 0;
    }

    if (eval->parsed()) {
      Workbench bench = make_bench(cfg, data_dir);
      const ModelParams params = load_checkpoint(fs::path(checkpoint));
      const double c = lambda_t_C.value_or(cfg.train.weights.lambda_t_C);
      const MtlWeights w{cfg.train.weights.lambda_t_A, c, inference_lambda(mode, c)};
      const BenignMetrics m =
          evaluate_benign(params, bench.data.test, w, cfg.attack.max_decode_len);
      const std::string text = nlohmann::json{{"benign_wer", m.wer},
                                              {"accent_acc", m.accent_accuracy},
                                              {"lambda_i_C", w.lambda_i_C},
                                              {"utterances", m.utterances}}
                                   .dump(2) +
                               "\n";
      if (common.out.empty()) {
        std::cout << text;
      } else {
        write_text(common.out, text);
      }
      return 0;
    }

    if (attack->parsed()) {
      Workbench bench = make_bench(cfg, data_dir);
      const ModelParams params = load_checkpoint(fs::path(checkpoint));
      const auto rows = evaluate_model(
          params, bench, cfg, lambda_t_A.value_or(cfg.train.weights.lambda_t_A),
          lambda_t_C.value_or(cfg.train.weights.lambda_t_C), mode,
          common.seed.value_or(params.config().seed), resolve_threads(cfg.threads));
      write_report_csv(fs::path(common.out), rows, config_hash(cfg));
      for (const auto& r : rows)
        std::printf("steps %zu adv_twer %.4f (n=%zu, skipped=%zu)\n", r.attack_steps, r.adv_twer,
                    r.n_samples, r.n_skipped);
      return 0;
    }

    if (grid->parsed()) {
      if (common.seed) cfg.grid.seeds = {*common.seed};
      const fs::path out(common.out);
      fs::create_directories(out);
      write_text(out / "config.json", nlohmann::json(cfg).dump(2) + "\n");
      const auto start = std::chrono::steady_clock::now();
      const auto rows = run_grid(cfg, save_models ? out / "models" : fs::path(),
                                 [&](const GridCell& c, std::size_t done, std::size_t total) {
                                   const double secs = std::chrono::duration<double>(
                                                           std::chrono::steady_clock::now() - start)
                                                           .count();
                                   std::fprintf(stderr, "[%zu/%zu] A=%.2g C=%.2g seed=%llu %.0fs\n",
                                                done, total, c.lambda_t_A, c.lambda_t_C,
                                                static_cast<unsigned long long>(c.seed), secs);
                                 });
      const std::string hash = config_hash(cfg);
      write_report_csv(out / "report.csv", rows, hash);
      write_tables(out, rows, hash);
      bool pass = true;
      std::string trends;
      try {
        trends = report_trends(rows, trend_steps, pass);
      } catch (const std::invalid_argument& e) {
        trends = std::string("SKIP ") + e.what() + "\n";
      }
      write_text(out / "trend.txt", trends);
      std::cout << trends;
      return strict && !pass ? 3 : 0;
    }

    if (report->parsed()) {
      const auto rows = read_report_csv(fs::path(report_in));
      const std::string hash = config_hash(cfg);
      write_tables(common.out, rows, hash);
      bool pass = true;
      const std::string trends = report_trends(rows, trend_steps, pass);
      write_text(fs::path(common.out) / "trend.txt", trends);
      std::cout << trends;
      return strict && !pass ? 3 : 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "advmtl: %s\n", e.what());
    return 1;
  }
  return 0;
}
