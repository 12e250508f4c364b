#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "advmtl/experiments.hpp"

namespace advmtl {
namespace {

namespace fs = std::filesystem;

// Small enough to train and attack a couple of cells in a few seconds.
ExperimentConfig tiny_experiment() {
  ExperimentConfig c;
  c.data.n_train = 24;
  c.data.n_valid = 6;
  c.data.n_test = 5;
  c.data.lengths = {2, 3};
  c.targets.count = 6;
  c.targets.lengths = {2, 3};
  c.model.enc_hidden = 8;
  c.model.enc_layers = 1;
  c.model.dec_hidden = 8;
  c.model.attn_dim = 8;
  c.model.disc_layers = 2;
  c.model.disc_hidden = 8;
  c.train.epochs = 2;
  c.attack.steps = 4;
  c.attack.report_at = {0, 2, 4};
  c.attack.max_decode_len = 6;
  c.grid.lambda_t_A = {1.0};
  c.grid.lambda_t_C = {0.0, 0.5};
  c.grid.seeds = {1};
  c.threads = 1;
  return c;
}

ReportRow row(double a, double c, InferenceMode m, std::uint64_t seed, std::size_t steps,
              double twer) {
  ReportRow r;
  r.lambda_t_A = a;
  r.lambda_t_C = c;
  r.lambda_i_C = inference_lambda(m, c);
  r.mode = m;
  r.seed = seed;
  r.attack_steps = steps;
  r.benign_wer = 0.05;
  r.accent_acc = 0.9;
  r.adv_twer = twer;
  r.n_samples = 10;
  return r;
}

using Medians = std::map<std::tuple<double, double, InferenceMode>, double>;

// Three seeds per configuration scattered around the given seed-median.
std::vector<ReportRow> synthetic_rows(const Medians& medians) {
  std::vector<ReportRow> rows;
  for (const auto& [k, v] : medians) {
    const auto& [a, c, m] = k;
    for (std::size_t steps : {100u, 200u}) {
      rows.push_back(row(a, c, m, 1, steps, v - 0.2));
      rows.push_back(row(a, c, m, 2, steps, v));
      rows.push_back(row(a, c, m, 3, steps, v + 0.3));
    }
  }
  return rows;
}

const InferenceMode kMatch = InferenceMode::kMatch;
const InferenceMode kDrop = InferenceMode::kDropCtc;

Medians ordered_medians() {
  return {{{1.0, 1.0, kMatch}, 0.50}, {{1.0, 0.0, kMatch}, 0.70}, {{1.0, 0.5, kMatch}, 0.60},
          {{1.0, 0.5, kDrop}, 0.80},  {{0.7, 0.5, kDrop}, 0.85},  {{0.7, 0.5, kMatch}, 0.75},
          {{0.7, 0.0, kMatch}, 0.72}};
}

std::map<std::string, bool> verdicts(const std::vector<TrendResult>& results, std::size_t steps) {
  std::map<std::string, bool> out;
  for (const auto& t : results)
    if (t.attack_steps == steps) out[t.name] = t.pass;
  return out;
}

TEST(ConfigTest, JsonRoundTripAndMergeDefaults) {
  ExperimentConfig c = tiny_experiment();
  c.grid.layout = GridLayout::kCross;
  const nlohmann::json j = c;
  const auto back = j.get<ExperimentConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
  EXPECT_EQ(config_hash(back), config_hash(c));

  // A partial document fills every other key with the experiment defaults.
  const auto partial = nlohmann::json{{"data", {{"n_train", 5}}}}.get<ExperimentConfig>();
  EXPECT_EQ(partial.data.n_train, 5u);
  EXPECT_EQ(partial.data.n_valid, DataConfig{}.n_valid);
  EXPECT_TRUE(partial.model.bidirectional);
  EXPECT_EQ(partial.train.optimizer, OptimizerKind::kAdam);
  EXPECT_EQ(partial.world.grammar_successors, 4u);
  EXPECT_EQ(partial.attack.calibration.epsilon_ratio, 0.2);
  EXPECT_EQ(partial.grid.layout, GridLayout::kTables);
}

TEST(ConfigTest, HashIgnoresThreadsOnly) {
  ExperimentConfig a = tiny_experiment(), b = a;
  b.threads = 7;
  EXPECT_EQ(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a).size(), 16u);
  b.data.seed += 1;
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(ConfigTest, LoadFromFile) {
  const fs::path p = fs::temp_directory_path() / "advmtl_test_config.json";
  {
    std::ofstream os(p);
    os << R"({"train": {"epochs": 3}, "grid": {"layout": "cross", "seeds": [4]}})";
  }
  const ExperimentConfig c = load_experiment_config(p);
  EXPECT_EQ(c.train.epochs, 3u);
  EXPECT_EQ(c.train.learning_rate, 3e-3);
  EXPECT_EQ(c.grid.layout, GridLayout::kCross);
  EXPECT_EQ(c.grid.seeds, std::vector<std::uint64_t>{4});
  fs::remove(p);
  EXPECT_ANY_THROW(load_experiment_config(p));
}

TEST(ConfigTest, Validation) {
  ExperimentConfig c = tiny_experiment();
  EXPECT_NO_THROW(c.validate());
  c.attack.report_at = {0, 5};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = tiny_experiment();
  c.grid.seeds.clear();
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = tiny_experiment();
  c.grid.lambda_t_A = {1.5};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_THROW(parse_grid_layout("diagonal"), std::invalid_argument);
  EXPECT_THROW(parse_inference_mode("sometimes"), std::invalid_argument);
}

TEST(GridTest, CellsForBothLayouts) {
  GridSpec g;
  g.layout = GridLayout::kCross;
  EXPECT_EQ(grid_cells(g).size(), 6u * 5u * 3u);
  g.layout = GridLayout::kTables;
  const auto cells = grid_cells(g);
  // lambda_t_A = 1 row (5) plus C in {0, 0.5} for the other five A values.
  EXPECT_EQ(cells.size(), (5u + 5u * 2u) * 3u);
  for (const auto& c : cells) EXPECT_TRUE(table_cell(c.lambda_t_A, c.lambda_t_C));
  EXPECT_FALSE(table_cell(0.8, 0.3));
  EXPECT_TRUE(table_cell(0.8, 0.5));
  EXPECT_TRUE(table_cell(1.0, 0.7));
}

TEST(GridTest, CellConfigsCarrySeedAndWeights) {
  const ExperimentConfig c = tiny_experiment();
  EXPECT_EQ(cell_model_config(c, 9).seed, 9u);
  const TrainConfig t = cell_train_config(c, 0.7, 0.3, 9);
  EXPECT_EQ(t.seed, 9u);
  EXPECT_EQ(t.weights, MtlWeights::matched(0.7, 0.3));
  EXPECT_EQ(t.epochs, c.train.epochs);
}

TEST(ReportCsvTest, RoundTrip) {
  std::vector<ReportRow> rows{row(1.0, 0.5, kDrop, 2, 100, 0.625),
                              row(0.7, 0.0, kMatch, 1, 0, 1.0)};
  rows[1].n_skipped = 3;
  std::stringstream ss;
  write_report_csv(ss, rows, "0123456789abcdef");
  const std::string text = ss.str();
  EXPECT_EQ(text.rfind("# advmtl ", 0), 0u);
  EXPECT_NE(text.find("config=0123456789abcdef"), std::string::npos);
  EXPECT_EQ(read_report_csv(ss), rows);
}

TEST(ReportCsvTest, RejectsMalformedInput) {
  const std::string header =
      "lambda_t_A,lambda_t_C,lambda_i_C,mode,seed,attack_steps,benign_wer,accent_acc,adv_twer,"
      "n_samples,n_skipped\n";
  auto parse = [](const std::string& s) {
    std::istringstream is(s);
    return read_report_csv(is);
  };
  EXPECT_THROW(parse(""), std::invalid_argument);
  EXPECT_THROW(parse("a,b\n"), std::invalid_argument);
  EXPECT_THROW(parse(header + "1,0.5,0.5,match,1,100,0.1,0.9,0.5,10\n"), std::invalid_argument);
  EXPECT_THROW(parse(header + "1,0.5,0.5,match,1,100,0.1,0.9,x,10,0\n"), std::invalid_argument);
  EXPECT_THROW(parse(header + "1,0.5,0.5,match,-1,100,0.1,0.9,0.5,10,0\n"), std::invalid_argument);
  // drop_ctc must have lambda_i_C = 0.
  EXPECT_THROW(parse(header + "1,0.5,0.5,drop_ctc,1,100,0.1,0.9,0.5,10,0\n"),
               std::invalid_argument);
  EXPECT_EQ(parse(header).size(), 0u);
}

TEST(AggregationTest, SeedMedians) {
  const auto rows = synthetic_rows({{{1.0, 0.0, kMatch}, 0.4}, {{0.7, 0.5, kDrop}, 0.9}});
  const auto medians = seed_medians(rows);
  ASSERT_EQ(medians.size(), 4u);
  // Descending lambda_t_A first.
  EXPECT_EQ(medians[0].lambda_t_A, 1.0);
  EXPECT_EQ(medians[0].attack_steps, 100u);
  EXPECT_DOUBLE_EQ(medians[0].adv_twer, 0.4);
  EXPECT_EQ(medians[0].seeds, 3u);
  EXPECT_EQ(medians[2].lambda_t_A, 0.7);
  EXPECT_DOUBLE_EQ(medians[3].adv_twer, 0.9);

  std::vector<ReportRow> even{row(1.0, 0.0, kMatch, 1, 10, 0.2), row(1.0, 0.0, kMatch, 2, 10, 0.6)};
  EXPECT_DOUBLE_EQ(seed_medians(even).at(0).adv_twer, 0.4);
}

TEST(AggregationTest, WritesTables) {
  const fs::path dir = fs::temp_directory_path() / "advmtl_test_tables";
  fs::remove_all(dir);
  write_tables(dir, synthetic_rows(ordered_medians()), "feedface00000000");
  for (const char* name : {"table_ctc_decoder.csv", "table_decoder_discriminator.csv",
                           "table_all_heads.csv", "advtwer_vs_steps.csv"}) {
    std::ifstream is(dir / name);
    ASSERT_TRUE(is) << name;
    std::string comment, header;
    std::getline(is, comment);
    std::getline(is, header);
    EXPECT_NE(comment.find("config=feedface00000000"), std::string::npos);
    if (std::string(name) != "advtwer_vs_steps.csv") {
      EXPECT_NE(header.find("adv_twer_100,adv_twer_200"), std::string::npos) << name;
    }
  }
  std::ifstream is(dir / "table_ctc_decoder.csv");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(is, line)) ++lines;
  EXPECT_EQ(lines, 2u + 4u);  // comment, header, four A=1 configurations
  fs::remove_all(dir);
}

TEST(TrendTest, AllOrderingsHold) {
  const auto results = trend_check(synthetic_rows(ordered_medians()));
  ASSERT_EQ(results.size(), 8u);
  for (const auto& t : results) EXPECT_TRUE(t.pass) << t.name << " " << t.detail;
}

TEST(TrendTest, EachOrderingCanFail) {
  Medians m = ordered_medians();
  m[{1.0, 1.0, kMatch}] = 0.71;  // CTC no longer below decoder
  auto v = verdicts(trend_check(synthetic_rows(m)), 200);
  EXPECT_FALSE(v["a"]);

  m = ordered_medians();
  m[{1.0, 0.5, kMatch}] = 0.73;  // beyond the 0.02 tolerance
  v = verdicts(trend_check(synthetic_rows(m)), 100);
  EXPECT_FALSE(v["b"]);
  EXPECT_TRUE(v["a"]);

  m = ordered_medians();
  m[{1.0, 0.5, kDrop}] = 0.69;
  EXPECT_FALSE(verdicts(trend_check(synthetic_rows(m)), 100)["c"]);

  m = ordered_medians();
  m[{0.7, 0.0, kMatch}] = 0.90;
  v = verdicts(trend_check(synthetic_rows(m)), 100);
  EXPECT_FALSE(v["d"]);
  m[{0.7, 0.0, kMatch}] = 0.86;  // within tolerance
  EXPECT_TRUE(verdicts(trend_check(synthetic_rows(m)), 100)["d"]);
}

TEST(TrendTest, IgnoresConfigurationsWithUntrainedInferenceHead) {
  Medians m = ordered_medians();
  // Trained with CTC only, decoded with the attention head alone.
  m[{1.0, 1.0, kDrop}] = 1.5;
  for (const auto& t : trend_check(synthetic_rows(m))) EXPECT_TRUE(t.pass) << t.name;
}

TEST(TrendTest, MissingCellThrows) {
  Medians m = ordered_medians();
  m.erase({0.7, 0.5, kDrop});
  EXPECT_THROW(trend_check(synthetic_rows(m)), std::invalid_argument);
  EXPECT_THROW(trend_check(synthetic_rows(ordered_medians()), {50}), std::invalid_argument);
}

TEST(AttackSetTest, SkipsCtcInfeasibleSamples) {
  const ExperimentConfig config = tiny_experiment();
  const Workbench bench(config);
  const ModelParams params = init_params(cell_model_config(config, 1));
  std::vector<Utterance> test = bench.data.test;
  test[0].features = Matrix(1, config.model.feat_dim, 0.2);
  AttackConfig attack = bench.attack;
  attack.weights = {1.0, 0.5, 0.5};
  const AttackSummary s = attack_test_set(params, test, bench.targets, attack, 6);
  EXPECT_EQ(s.n_skipped, 1u);
  EXPECT_EQ(s.n_samples, test.size() - 1);
  ASSERT_EQ(s.adv_twer.size(), 3u);
  attack.weights = {1.0, 0.5, 0.0};
  const AttackSummary dec = attack_test_set(params, test, bench.targets, attack, 6);
  EXPECT_EQ(dec.n_skipped, 0u);
  // Threads only change scheduling.
  EXPECT_EQ(attack_test_set(params, test, bench.targets, attack, 6, 3).adv_twer, dec.adv_twer);
}

TEST(RunGridTest, DeterministicRowsInCellOrder) {
  const ExperimentConfig config = tiny_experiment();
  std::size_t progress_calls = 0;
  const auto rows = run_grid(config, {}, [&](const GridCell&, std::size_t, std::size_t total) {
    ++progress_calls;
    EXPECT_EQ(total, 2u);
  });
  EXPECT_EQ(progress_calls, 2u);
  // 2 cells x 2 modes x 3 report steps.
  ASSERT_EQ(rows.size(), 12u);
  EXPECT_EQ(rows[0].lambda_t_C, 0.0);
  EXPECT_EQ(rows[6].lambda_t_C, 0.5);
  EXPECT_EQ(rows[6].mode, kMatch);
  EXPECT_EQ(rows[9].mode, kDrop);
  EXPECT_EQ(rows[9].lambda_i_C, 0.0);
  // C = 0 gives the same inference weights in both modes.
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(rows[i].adv_twer, rows[i + 3].adv_twer);
  for (const auto& r : rows) EXPECT_EQ(r.n_samples + r.n_skipped, config.data.n_test);

  ExperimentConfig threaded = config;
  threaded.threads = 2;
  EXPECT_EQ(run_grid(threaded), rows);
}

}  // namespace
}  // namespace advmtl
