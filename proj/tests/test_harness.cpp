#include <gtest/gtest.h>

#include <fstream>

#include "exbias/harness.hpp"

using namespace exbias;
namespace fs = std::filesystem;

namespace {

ExperimentConfig small_config() {
  ExperimentConfig c = config_from_json(json::parse(R"({
    "seed": 11, "n_users": 60, "models": ["mnl", "bpr"], "hyper": {"epochs": 40},
    "n_repetitions": 2, "n_null": 2, "bootstrap_resamples": 200})"));
  return c;
}

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  return d;
}

std::string slurp(const fs::path& p) { return read_text(p); }

const ResultsBundle& small_bundle() {
  static const ResultsBundle b = run_experiment(small_config(), with_workers(1));
  return b;
}

}  // namespace

TEST(Config, SeedRequired) {
  EXPECT_THROW(config_from_json(json::parse(R"({"n_users": 10})")), ConfigError);
}

TEST(Config, DefaultsFromSeedOnly) {
  const auto c = config_from_json(json::parse(R"({"seed": 1})"));
  EXPECT_EQ(c.n_users, 300);
  EXPECT_EQ(c.n_items, 100);
  EXPECT_EQ(c.models.size(), 7u);
  EXPECT_EQ(c.n_repetitions, 50);
  EXPECT_EQ(c.target_ratio, 3.2);
  EXPECT_EQ(c.hyper.epochs, 300);
}

TEST(Config, EmptyModelListRejected) {
  EXPECT_THROW(config_from_json(json::parse(R"({"seed": 1, "models": []})")), ConfigError);
}

TEST(Config, PreciseErrors) {
  const auto msg = [](const char* text) {
    try {
      config_from_json(json::parse(text));
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  EXPECT_NE(msg(R"({"seed": 1, "n_usres": 5})").find("n_usres"), std::string::npos);
  EXPECT_NE(msg(R"({"seed": 1, "hyper": {"lr": 1}})").find("hyper.lr"), std::string::npos);
  EXPECT_NE(msg(R"({"seed": 1, "models": ["mnl", "svd"]})").find("svd"), std::string::npos);
  EXPECT_NE(msg(R"({"seed": 1, "target_ratio": 7})").find("maximum achievable"), std::string::npos);
  EXPECT_NE(msg(R"({"seed": 1, "quartile_size": 2})").find("quartile_size"), std::string::npos);
  EXPECT_NE(msg(R"({"seed": "x"})").find("seed"), std::string::npos);
  EXPECT_NE(msg(R"({"seed": 1, "behavior": {"kind": "weird"}})").find("weird"), std::string::npos);
}

TEST(Config, RoundTripsThroughJson) {
  const auto c = small_config();
  const auto back = config_from_json(to_json(c));
  EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
}

TEST(Run, Bookkeeping) {
  const auto& b = small_bundle();
  ASSERT_TRUE(b.ok());
  EXPECT_EQ(b.records.size(), 2u * 2 * 2 * 2);
  std::set<std::tuple<int, Experiment, ModelKind, Role>> seen;
  for (const auto& r : b.records) EXPECT_TRUE(seen.insert({r.repetition, r.experiment, r.model, r.member}).second);
  for (Experiment e : {Experiment::kOverexposure, Experiment::kCompetition}) {
    int bias = 0, acc = 0;
    for (const auto& r : b.bias_reports) bias += r.experiment == e;
    for (const auto& r : b.accuracy_reports) acc += r.experiment == e;
    EXPECT_EQ(bias, 2);
    EXPECT_EQ(acc, 4);  // two models, two conditions
  }
}

TEST(Run, ReportInvariants) {
  for (const auto& r : small_bundle().bias_reports) {
    EXPECT_DOUBLE_EQ(r.corrected_bias, r.mean_bias - r.null_bias);
    EXPECT_LE(r.ci_low, r.corrected_bias);
    EXPECT_GE(r.ci_high, r.corrected_bias);
    EXPECT_EQ(r.n_repetitions, 2);
    EXPECT_EQ(r.per_item_shift.size(), 5u);
  }
  for (const auto& a : small_bundle().accuracy_reports) {
    EXPECT_GE(a.ndcg_at_k, 0.0);
    EXPECT_LE(a.ndcg_at_k, 1.0);
    EXPECT_LE(a.ci_low, a.ndcg_at_k);
    EXPECT_GE(a.ci_high, a.ndcg_at_k);
  }
}

TEST(Run, NullMatchesStandaloneNullBias) {
  const auto c = small_config();
  const auto setup = make_setup(c);
  const auto nb = null_bias(ModelKind::kBpr, setup.catalog, setup.split, setup.population, c.behavior, c.hyper,
                            setup.nests, RngHandle(c.seed, kNullStream), c.n_null, setup.design);
  EXPECT_EQ(nb.mean, small_bundle().nulls[1].null_bias);
  EXPECT_EQ(nb.samples, small_bundle().nulls[1].samples);
}

TEST(Run, SummaryDeterministicAndWorkerInvariant) {
  const auto again = run_experiment(small_config(), with_workers(1));
  const auto parallel = run_experiment(small_config(), with_workers(4));
  EXPECT_EQ(summary_csv(again), summary_csv(small_bundle()));
  EXPECT_EQ(summary_csv(parallel), summary_csv(small_bundle()));
  const auto d1 = fresh_dir("exbias_h_w1"), d4 = fresh_dir("exbias_h_w4");
  emit_outputs(small_bundle(), d1);
  emit_outputs(parallel, d4);
  for (const char* f : {"manifest.json", "results.jsonl", "nulls.jsonl", "summary.csv", "plotdata_bias.csv",
                        "plotdata_ndcg.csv", "reports.jsonl"}) {
    EXPECT_EQ(slurp(d1 / f), slurp(d4 / f)) << f;
  }
}

TEST(Emit, FileSetAndLineCount) {
  const auto d = fresh_dir("exbias_h_emit");
  emit_outputs(small_bundle(), d);
  std::ifstream in(d / "results.jsonl");
  int lines = 0;
  for (std::string s; std::getline(in, s);) {
    const auto j = json::parse(s);
    EXPECT_EQ(j.at("loss_trace").size(), 40u);
    ++lines;
  }
  EXPECT_EQ(lines, 2 * 2 * 2 * 2);
  EXPECT_EQ(slurp(d / "summary.csv").substr(0, 72),
            "experiment,model,corrected_bias,ci_low,ci_high,ndcg_treated,ndcg_control");
  EXPECT_EQ(slurp(d / "plotdata_bias.csv").substr(0, 36), "experiment,model,mean,ci_low,ci_high");
  const auto manifest = json::parse(slurp(d / "manifest.json"));
  EXPECT_EQ(manifest.at("version"), std::string(kArtifactVersion));
  EXPECT_EQ(manifest.at("config").at("seed"), 11);
}

TEST(Emit, RefusesNonEmptyDirectoryWithoutForce) {
  const auto d = fresh_dir("exbias_h_force");
  emit_outputs(small_bundle(), d);
  EXPECT_THROW(emit_outputs(small_bundle(), d), OutputExistsError);
  EXPECT_NO_THROW(emit_outputs(small_bundle(), d, true));
}

TEST(Emit, RerunFromManifestIsByteIdentical) {
  const auto d1 = fresh_dir("exbias_h_m1"), d2 = fresh_dir("exbias_h_m2");
  emit_outputs(small_bundle(), d1);
  const auto c = config_from_json(json::parse(slurp(d1 / "manifest.json")));
  emit_outputs(run_experiment(c, with_workers(2)), d2);
  for (const char* f : {"manifest.json", "results.jsonl", "summary.csv", "plotdata_ndcg.csv"}) {
    EXPECT_EQ(slurp(d1 / f), slurp(d2 / f)) << f;
  }
}

TEST(Run, PoisonedRepetitionIsIsolated) {
  auto c = small_config();
  c.n_repetitions = 3;
  const auto clean = run_experiment(c, with_workers(2));
  RunOptions poisoned = with_workers(2);
  poisoned.poison_repetitions = {1};
  const auto hit = run_experiment(c, poisoned);
  ASSERT_FALSE(hit.ok());
  ASSERT_EQ(hit.failures.size(), 1u);
  EXPECT_EQ(hit.failures[0].index, 1);
  EXPECT_EQ(hit.failures[0].task, "repetition");
  std::vector<std::string> a, b;
  for (const auto& r : clean.records) {
    if (r.repetition != 1) a.push_back(to_json(r).dump());
  }
  for (const auto& r : hit.records) {
    EXPECT_NE(r.repetition, 1);
    b.push_back(to_json(r).dump());
  }
  EXPECT_EQ(a, b);
}

TEST(Run, DumpDataWritesArtifacts) {
  RunOptions o = with_workers(1);
  o.dump_data = true;
  const auto b = run_experiment(small_config(), o);
  const auto d = fresh_dir("exbias_h_dump");
  emit_outputs(b, d);
  for (const char* f : {"design.json", "population.json", "overexposure.json", "competition.json", "models.json"}) {
    EXPECT_TRUE(fs::exists(d / "data" / f)) << f;
  }
}

TEST(Run, ResamplePopulationChangesResults) {
  auto c = small_config();
  c.resample_population = true;
  EXPECT_NE(summary_csv(run_experiment(c, with_workers(2))), summary_csv(small_bundle()));
}

TEST(OutputRoot, EnvironmentOverride) {
  setenv("EXBIAS_OUTPUT_ROOT", "/tmp/somewhere", 1);
  EXPECT_EQ(default_output_root(), fs::path("/tmp/somewhere"));
  unsetenv("EXBIAS_OUTPUT_ROOT");
  EXPECT_EQ(default_output_root(), fs::path("runs"));
}
