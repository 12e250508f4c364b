#include "advmtl/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <istream>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>
#include <tuple>

#include "advmtl/decode.hpp"
#include "advmtl/metrics.hpp"

#ifndef ADVMTL_VERSION
#define ADVMTL_VERSION "0.0.0"
#endif

namespace advmtl {

namespace {

bool same(double a, double b) { return std::abs(a - b) < 1e-9; }

constexpr double kAllHeadsLambdaC = 0.5;

// Runs fn(i) for i in [0, n) on up to `threads` workers. The first exception
// stops further work and is rethrown on the caller's thread.
void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn) {
  threads = static_cast<unsigned>(std::min<std::size_t>(std::max(1u, threads), n));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    while (!failed) {
      const std::size_t i = next++;
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        failed = true;
      }
    }
  };
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

void check_compatible(const ExperimentConfig& config, const ToySpeech& world) {
  config.validate();
  if (config.model.vocab_size != world.vocab().size()) {
    throw std::invalid_argument("model vocab_size " + std::to_string(config.model.vocab_size) +
                                " does not match the world vocabulary (" +
                                std::to_string(world.vocab().size()) + ")");
  }
  if (config.model.feat_dim != world.feat_dim()) {
    throw std::invalid_argument("model feat_dim does not match world feat_dim");
  }
}

}  // namespace

Workbench::Workbench(const ExperimentConfig& config) : world(config.world) {
  check_compatible(config, world);
  data = world.gen_dataset(config.data.seed, config.data.n_train, config.data.n_valid,
                           config.data.n_test, config.data.lengths);
  targets = world.gen_adv_targets(config.targets.seed, config.targets.count,
                                  config.targets.lengths);
  attack = calibrated_attack_config(data.test, config.attack.calibration, config.attack.steps,
                                    config.attack.report_at);
}

Workbench::Workbench(const ExperimentConfig& config, DatasetSplit d, std::vector<Transcript> t)
    : world(config.world), data(std::move(d)), targets(std::move(t)) {
  check_compatible(config, world);
  if (targets.empty()) throw std::invalid_argument("Workbench: no adversarial targets");
  attack = calibrated_attack_config(data.test, config.attack.calibration, config.attack.steps,
                                    config.attack.report_at);
}

AttackSummary attack_test_set(const ModelParams& params, const std::vector<Utterance>& test,
                              const std::vector<Transcript>& targets,
                              const AttackConfig& config, std::size_t max_decode_len,
                              unsigned threads) {
  config.validate();
  struct Outcome {
    bool skipped = false;
    std::vector<WerStats> per_step;  // aligned with config.report_at
  };
  std::vector<Outcome> outcomes(test.size());
  const ModelParams frozen = params.clone(false);
  parallel_for(test.size(), threads, [&](std::size_t i) {
    const Utterance& u = test[i];
    const Transcript& target = select_adv_target(u.transcript, targets);
    Outcome& out = outcomes[i];
    if (attack_infeasible(u.features, target, config.weights)) {
      out.skipped = true;
      return;
    }
    const PerturbationResult r = pgd_attack(frozen, u.features, target, config);
    for (std::size_t k : config.report_at) {
      const Transcript hyp = recognize(frozen, r.snapshots.at(k), config.weights, max_decode_len);
      out.per_step.push_back(edit_distance_words(target, hyp));
    }
  });

  AttackSummary s;
  std::vector<WerAccumulator> acc(config.report_at.size());
  for (const auto& o : outcomes) {
    if (o.skipped) {
      ++s.n_skipped;
      continue;
    }
    ++s.n_samples;
    for (std::size_t j = 0; j < acc.size(); ++j) acc[j].add(o.per_step[j]);
  }
  if (s.n_samples == 0 && !config.report_at.empty()) {
    throw std::runtime_error("attack_test_set: every sample was skipped");
  }
  for (std::size_t j = 0; j < acc.size(); ++j) s.adv_twer[config.report_at[j]] = acc[j].wer();
  return s;
}

std::vector<ReportRow> evaluate_model(const ModelParams& params, const Workbench& bench,
                                      const ExperimentConfig& config, double lambda_t_A,
                                      double lambda_t_C, InferenceMode mode,
                                      std::uint64_t seed, unsigned threads) {
  const MtlWeights weights{lambda_t_A, lambda_t_C, inference_lambda(mode, lambda_t_C)};
  weights.validate();
  const BenignMetrics benign =
      evaluate_benign(params, bench.data.test, weights, config.attack.max_decode_len);
  AttackConfig attack = bench.attack;
  attack.weights = weights;
  const AttackSummary summary = attack_test_set(params, bench.data.test, bench.targets, attack,
                                                config.attack.max_decode_len, threads);
  std::vector<ReportRow> rows;
  for (const auto& [steps, twer] : summary.adv_twer) {
    ReportRow r;
    r.lambda_t_A = lambda_t_A;
    r.lambda_t_C = lambda_t_C;
    r.lambda_i_C = weights.lambda_i_C;
    r.mode = mode;
    r.seed = seed;
    r.attack_steps = steps;
    r.benign_wer = benign.wer;
    r.accent_acc = benign.accent_accuracy;
    r.adv_twer = twer;
    r.n_samples = summary.n_samples;
    r.n_skipped = summary.n_skipped;
    rows.push_back(r);
  }
  return rows;
}

ModelConfig cell_model_config(const ExperimentConfig& config, std::uint64_t seed) {
  ModelConfig m = config.model;
  m.seed = seed;
  return m;
}

TrainConfig cell_train_config(const ExperimentConfig& config, double lambda_t_A,
                              double lambda_t_C, std::uint64_t seed) {
  TrainConfig t = config.train;
  t.weights = MtlWeights::matched(lambda_t_A, lambda_t_C);
  t.seed = seed;
  return t;
}

bool table_cell(double lambda_t_A, double lambda_t_C) {
  return same(lambda_t_A, 1.0) || same(lambda_t_C, 0.0) || same(lambda_t_C, kAllHeadsLambdaC);
}

std::vector<GridCell> grid_cells(const GridSpec& grid) {
  std::vector<GridCell> cells;
  for (double a : grid.lambda_t_A)
    for (double c : grid.lambda_t_C) {
      if (grid.layout == GridLayout::kTables && !table_cell(a, c)) continue;
      for (std::uint64_t s : grid.seeds) cells.push_back({a, c, s});
    }
  return cells;
}

std::vector<ReportRow> run_grid(const ExperimentConfig& config,
                                const std::filesystem::path& checkpoint_dir,
                                const GridProgress& progress) {
  const Workbench bench(config);
  const std::vector<GridCell> cells = grid_cells(config.grid);
  std::vector<std::vector<ReportRow>> per_cell(cells.size());
  std::mutex progress_mutex;
  std::size_t done = 0;

  parallel_for(cells.size(), resolve_threads(config.threads), [&](std::size_t i) {
    const GridCell& cell = cells[i];
    const TrainResult trained =
        train_mtl(cell_model_config(config, cell.seed),
                  cell_train_config(config, cell.lambda_t_A, cell.lambda_t_C, cell.seed),
                  bench.data);
    if (!checkpoint_dir.empty()) {
      char name[96];
      std::snprintf(name, sizeof name, "model_A%.3g_C%.3g_s%llu.ckpt", cell.lambda_t_A,
                    cell.lambda_t_C, static_cast<unsigned long long>(cell.seed));
      save_checkpoint(checkpoint_dir / name, trained.params);
    }
    std::vector<ReportRow>& out = per_cell[i];
    std::map<double, std::vector<ReportRow>> by_lambda;  // modes sharing lambda_i_C
    for (InferenceMode mode : config.grid.modes) {
      const double li = inference_lambda(mode, cell.lambda_t_C);
      auto it = by_lambda.find(li);
      std::vector<ReportRow> rows;
      if (it != by_lambda.end()) {
        rows = it->second;
        for (auto& r : rows) r.mode = mode;
      } else {
        rows = evaluate_model(trained.params, bench, config, cell.lambda_t_A, cell.lambda_t_C,
                              mode, cell.seed);
        by_lambda.emplace(li, rows);
      }
      out.insert(out.end(), rows.begin(), rows.end());
    }
    if (progress) {
      std::lock_guard lock(progress_mutex);
      progress(cell, ++done, cells.size());
    }
  });

  std::vector<ReportRow> rows;
  for (auto& r : per_cell) rows.insert(rows.end(), r.begin(), r.end());
  return rows;
}

// --- CSV --------------------------------------------------------------------

namespace {

constexpr const char* kReportHeader =
    "lambda_t_A,lambda_t_C,lambda_i_C,mode,seed,attack_steps,benign_wer,accent_acc,adv_twer,"
    "n_samples,n_skipped";

std::string comment_line(const std::string& hash) {
  return std::string("# advmtl ") + ADVMTL_VERSION + " config=" + hash + " wer=pooled\n";
}

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& s, const std::string& what) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != s.size() || s.empty() || !std::isfinite(v)) {
    throw std::invalid_argument("report: bad " + what + " '" + s + "'");
  }
  return v;
}

std::uint64_t parse_uint(const std::string& s, const std::string& what) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != s.size() || s.empty() || s[0] == '-') {
    throw std::invalid_argument("report: bad " + what + " '" + s + "'");
  }
  return v;
}

}  // namespace

// Metrics keep full precision so tables rebuilt from the CSV match the originals.
void write_report_csv(std::ostream& os, const std::vector<ReportRow>& rows,
                      const std::string& config_hash) {
  os << comment_line(config_hash) << kReportHeader << '\n';
  for (const auto& r : rows) {
    os << fmt("%.6g", r.lambda_t_A) << ',' << fmt("%.6g", r.lambda_t_C) << ','
       << fmt("%.6g", r.lambda_i_C) << ',' << to_string(r.mode) << ',' << r.seed << ','
       << r.attack_steps << ',' << fmt("%.17g", r.benign_wer) << ','
       << fmt("%.17g", r.accent_acc) << ',' << fmt("%.17g", r.adv_twer) << ',' << r.n_samples
       << ',' << r.n_skipped << '\n';
  }
}

std::vector<ReportRow> read_report_csv(std::istream& is) {
  std::vector<ReportRow> rows;
  std::string line;
  bool header = false;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line != kReportHeader) throw std::invalid_argument("report: unexpected header '" + line + "'");
      header = true;
      continue;
    }
    const auto f = split_csv(line);
    if (f.size() != 11) throw std::invalid_argument("report: expected 11 fields in '" + line + "'");
    ReportRow r;
    r.lambda_t_A = parse_double(f[0], "lambda_t_A");
    r.lambda_t_C = parse_double(f[1], "lambda_t_C");
    r.lambda_i_C = parse_double(f[2], "lambda_i_C");
    r.mode = parse_inference_mode(f[3]);
    r.seed = parse_uint(f[4], "seed");
    r.attack_steps = parse_uint(f[5], "attack_steps");
    r.benign_wer = parse_double(f[6], "benign_wer");
    r.accent_acc = parse_double(f[7], "accent_acc");
    r.adv_twer = parse_double(f[8], "adv_twer");
    r.n_samples = parse_uint(f[9], "n_samples");
    r.n_skipped = parse_uint(f[10], "n_skipped");
    if (!same(r.lambda_i_C, inference_lambda(r.mode, r.lambda_t_C))) {
      throw std::invalid_argument("report: lambda_i_C inconsistent with mode in '" + line + "'");
    }
    rows.push_back(r);
  }
  if (!header) throw std::invalid_argument("report: missing header");
  return rows;
}

void write_report_csv(const std::filesystem::path& path, const std::vector<ReportRow>& rows,
                      const std::string& config_hash) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  write_report_csv(os, rows, config_hash);
}

std::vector<ReportRow> read_report_csv(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  return read_report_csv(is);
}

// --- Aggregation ------------------------------------------------------------

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

using ConfigKey = std::tuple<double, double, double, int>;

ConfigKey key_of(double a, double c, double li, InferenceMode m) {
  return {a, c, li, static_cast<int>(m)};
}

}  // namespace

std::vector<MedianRow> seed_medians(const std::vector<ReportRow>& rows) {
  // Descending lambda_t_A, then ascending lambda_t_C, mode, steps.
  using Key = std::tuple<double, double, int, std::size_t>;
  std::map<Key, std::vector<const ReportRow*>> groups;
  for (const auto& r : rows)
    groups[{-r.lambda_t_A, r.lambda_t_C, static_cast<int>(r.mode), r.attack_steps}].push_back(&r);
  std::vector<MedianRow> out;
  for (const auto& [key, members] : groups) {
    std::vector<double> wer, acc, twer;
    for (const ReportRow* r : members) {
      wer.push_back(r->benign_wer);
      acc.push_back(r->accent_acc);
      twer.push_back(r->adv_twer);
    }
    const ReportRow& f = *members.front();
    out.push_back({f.lambda_t_A, f.lambda_t_C, f.lambda_i_C, f.mode, f.attack_steps, median(wer),
                   median(acc), median(twer), members.size()});
  }
  return out;
}

namespace {

void write_wide_table(const std::filesystem::path& path, const std::vector<MedianRow>& medians,
                      const std::function<bool(const MedianRow&)>& keep,
                      const std::string& hash) {
  std::vector<std::size_t> steps;
  std::map<ConfigKey, std::map<std::size_t, const MedianRow*>> configs;
  std::vector<ConfigKey> order;
  for (const auto& m : medians) {
    if (!keep(m)) continue;
    const ConfigKey k = key_of(m.lambda_t_A, m.lambda_t_C, m.lambda_i_C, m.mode);
    if (!configs.count(k)) order.push_back(k);
    configs[k][m.attack_steps] = &m;
    if (std::find(steps.begin(), steps.end(), m.attack_steps) == steps.end())
      steps.push_back(m.attack_steps);
  }
  std::sort(steps.begin(), steps.end());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << comment_line(hash) << "lambda_t_A,lambda_t_C,lambda_i_C,mode,seeds,benign_wer,accent_acc";
  for (std::size_t s : steps) os << ",adv_twer_" << s;
  os << '\n';
  for (const auto& k : order) {
    const auto& by_step = configs[k];
    const MedianRow& f = *by_step.begin()->second;
    os << fmt("%.6g", f.lambda_t_A) << ',' << fmt("%.6g", f.lambda_t_C) << ','
       << fmt("%.6g", f.lambda_i_C) << ',' << to_string(f.mode) << ',' << f.seeds << ','
       << fmt("%.6f", f.benign_wer) << ',' << fmt("%.6f", f.accent_acc);
    for (std::size_t s : steps) {
      auto it = by_step.find(s);
      os << ',' << (it == by_step.end() ? std::string() : fmt("%.6f", it->second->adv_twer));
    }
    os << '\n';
  }
}

}  // namespace

void write_tables(const std::filesystem::path& dir, const std::vector<ReportRow>& rows,
                  const std::string& config_hash) {
  std::filesystem::create_directories(dir);
  const auto medians = seed_medians(rows);
  write_wide_table(dir / "table_ctc_decoder.csv", medians,
                   [](const MedianRow& m) { return same(m.lambda_t_A, 1.0); }, config_hash);
  write_wide_table(dir / "table_decoder_discriminator.csv", medians,
                   [](const MedianRow& m) {
                     return same(m.lambda_t_C, 0.0) && m.mode == InferenceMode::kMatch;
                   },
                   config_hash);
  write_wide_table(dir / "table_all_heads.csv", medians,
                   [](const MedianRow& m) { return same(m.lambda_t_C, kAllHeadsLambdaC); },
                   config_hash);

  // Long format for plotting AdvTWER against attack steps.
  std::map<std::tuple<double, double, int, std::size_t>, std::vector<double>> spread;
  for (const auto& r : rows)
    spread[{-r.lambda_t_A, r.lambda_t_C, static_cast<int>(r.mode), r.attack_steps}].push_back(
        r.adv_twer);
  std::ofstream os(dir / "advtwer_vs_steps.csv", std::ios::binary);
  if (!os) throw std::runtime_error("cannot write advtwer_vs_steps.csv");
  os << comment_line(config_hash)
     << "lambda_t_A,lambda_t_C,lambda_i_C,mode,attack_steps,adv_twer_median,adv_twer_min,"
        "adv_twer_max,seeds\n";
  for (const auto& m : medians) {
    const auto& v =
        spread[{-m.lambda_t_A, m.lambda_t_C, static_cast<int>(m.mode), m.attack_steps}];
    os << fmt("%.6g", m.lambda_t_A) << ',' << fmt("%.6g", m.lambda_t_C) << ','
       << fmt("%.6g", m.lambda_i_C) << ',' << to_string(m.mode) << ',' << m.attack_steps << ','
       << fmt("%.6f", m.adv_twer) << ',' << fmt("%.6f", *std::min_element(v.begin(), v.end()))
       << ',' << fmt("%.6f", *std::max_element(v.begin(), v.end())) << ',' << m.seeds << '\n';
  }
}

// --- Trend check ------------------------------------------------------------

namespace {

// A configuration whose inference head got no training signal is not a
// meaningful competitor: its output is whatever initialization produced.
bool inference_heads_trained(double a, double c, double li) {
  const double w_ctc = a * c, w_dec = a * (1.0 - c);
  if (li > 0.0 && w_ctc <= 0.0) return false;
  if (li < 1.0 && w_dec <= 0.0) return false;
  return true;
}

std::string describe(double a, double c, InferenceMode m) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "(A=%.2g,C=%.2g,%s)", a, c, to_string(m).c_str());
  return buf;
}

}  // namespace

std::vector<TrendResult> trend_check(const std::vector<ReportRow>& rows,
                                     const std::vector<std::size_t>& steps, double tolerance) {
  const auto medians = seed_medians(rows);
  auto find = [&](double a, double c, InferenceMode m, std::size_t s) -> const MedianRow* {
    for (const auto& r : medians)
      if (same(r.lambda_t_A, a) && same(r.lambda_t_C, c) && r.mode == m && r.attack_steps == s)
        return &r;
    return nullptr;
  };
  const InferenceMode match = InferenceMode::kMatch, drop = InferenceMode::kDropCtc;
  struct Need {
    const char* label;
    double a, c;
    InferenceMode m;
  };
  const Need stl_ctc{"STL-CTC", 1.0, 1.0, match}, stl_dec{"STL-DEC", 1.0, 0.0, match},
      mtl_match{"MTL-match", 1.0, 0.5, match}, mtl_drop{"MTL-drop", 1.0, 0.5, drop},
      all_heads{"all-heads", 0.7, 0.5, drop};

  std::string missing;
  for (std::size_t s : steps)
    for (const Need& n : {stl_ctc, stl_dec, mtl_match, mtl_drop, all_heads})
      if (!find(n.a, n.c, n.m, s))
        missing += " " + std::string(n.label) + describe(n.a, n.c, n.m) + "@" + std::to_string(s);
  if (!missing.empty()) throw std::invalid_argument("trend_check: missing cells:" + missing);

  std::vector<TrendResult> out;
  char buf[256];
  for (std::size_t s : steps) {
    const double ctc = find(1.0, 1.0, match, s)->adv_twer;
    const double dec = find(1.0, 0.0, match, s)->adv_twer;
    const double mm = find(1.0, 0.5, match, s)->adv_twer;
    const double md = find(1.0, 0.5, drop, s)->adv_twer;
    const double ah = find(0.7, 0.5, drop, s)->adv_twer;

    std::snprintf(buf, sizeof buf, "STL-CTC %.4f < STL-DEC %.4f", ctc, dec);
    out.push_back({"a", s, ctc < dec, buf});
    std::snprintf(buf, sizeof buf, "MTL-match %.4f <= STL-DEC %.4f + %.2f", mm, dec, tolerance);
    out.push_back({"b", s, mm <= dec + tolerance, buf});
    std::snprintf(buf, sizeof buf, "MTL-drop %.4f > max(STL-CTC %.4f, STL-DEC %.4f)", md, ctc,
                  dec);
    out.push_back({"c", s, md > ctc && md > dec, buf});

    bool ok = true;
    std::string worst = "none";
    double worst_v = -1.0;
    for (const auto& r : medians) {
      if (r.attack_steps != s) continue;
      if (same(r.lambda_t_A, 0.7) && same(r.lambda_t_C, 0.5) && r.mode == drop) continue;
      if (!inference_heads_trained(r.lambda_t_A, r.lambda_t_C, r.lambda_i_C)) continue;
      if (r.adv_twer > worst_v) {
        worst_v = r.adv_twer;
        worst = describe(r.lambda_t_A, r.lambda_t_C, r.mode);
      }
      if (ah < r.adv_twer - tolerance) ok = false;
    }
    std::snprintf(buf, sizeof buf, "all-heads %.4f >= best other %s %.4f - %.2f", ah,
                  worst.c_str(), worst_v, tolerance);
    out.push_back({"d", s, ok, buf});
  }
  return out;
}

}  // namespace advmtl
