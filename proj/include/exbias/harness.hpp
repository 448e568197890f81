#pragma once

#include <atomic>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <limits>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "exbias/eval.hpp"
#include "exbias/io.hpp"

namespace exbias {

inline constexpr std::string_view kArtifactVersion = "1.0.0";

// Stream ids above the repetition range.
inline constexpr std::uint64_t kGlobalStream = ~std::uint64_t{0};
inline constexpr std::uint64_t kNullStream = ~std::uint64_t{0} - 1;

struct ExperimentConfig {
  std::uint64_t seed = 0;
  int n_users = 300;
  double eval_fraction = 1.0 / 3.0;
  int n_items = 100;
  int size_a = 50;
  int n_bias = 5;
  int slate_size = 4;
  SessionCounts sessions;
  double target_ratio = 3.2;
  int quartile_size = 11;
  int n_nests = 10;
  int population_dim = 8;
  bool resample_population = false;
  BehaviorSpec behavior;
  std::vector<ModelKind> models{kAllModelKinds.begin(), kAllModelKinds.end()};
  std::vector<Experiment> experiments{Experiment::kOverexposure, Experiment::kCompetition};
  HyperParams hyper;
  int n_repetitions = 50;
  int n_null = 20;
  int ndcg_k = 10;
  int bootstrap_resamples = 2000;
  double ci_level = 0.95;
  std::string output_dir;
};

namespace detail {

template <class T>
void read_field(const json& j, const char* key, T& out, std::set<std::string>& seen, const std::string& where) {
  seen.insert(key);
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config field '" + where + key + "' has the wrong type: " + e.what());
  }
}

inline void reject_unknown(const json& j, const std::set<std::string>& seen, const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    if (!seen.count(key)) throw ConfigError("unknown config field '" + where + key + "'");
  }
}

inline std::string fmt(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", x);
  return buf;
}

}  // namespace detail

inline void validate(const ExperimentConfig& c) {
  if (c.n_users < 2) throw ConfigError("n_users must be >= 2");
  if (c.n_items < 2) throw ConfigError("n_items must be >= 2");
  if (c.slate_size < 2) throw ConfigError("slate_size must be >= 2");
  if (c.sessions.uniform_a < 0 || c.sessions.overexposure_block < 0 || c.sessions.competition_anchor < 0 ||
      c.sessions.competition_block < 0) {
    throw ConfigError("session counts must be >= 0");
  }
  if (c.population_dim < 1) throw ConfigError("population_dim must be >= 1");
  if (c.models.empty()) throw ConfigError("models must list at least one model kind");
  if (c.experiments.empty()) throw ConfigError("experiments must list at least one experiment");
  if (c.n_repetitions < 2) throw ConfigError("n_repetitions must be >= 2 (bootstrap intervals need two samples)");
  if (c.n_null < 1) throw ConfigError("n_null must be >= 1");
  if (c.bootstrap_resamples < 1) throw ConfigError("bootstrap_resamples must be >= 1");
  if (!(c.ci_level > 0.0 && c.ci_level < 1.0)) throw ConfigError("ci_level must lie in (0, 1)");
  if (c.n_nests < 1 || c.n_nests > c.n_items) throw ConfigError("n_nests must satisfy 1 <= n_nests <= n_items");
  validate(c.behavior);
  validate(c.hyper);
  // Structural checks that need a concrete catalog: sizes only, so any seed works.
  const ItemCatalog probe = build_catalog(c.n_items, c.size_a, c.n_bias, RngHandle(0));
  (void)partition_users(c.n_users, c.eval_fraction, RngHandle(0));
  if (c.ndcg_k < 1 || c.ndcg_k > static_cast<int>(probe.set_b.size())) throw ConfigError("ndcg_k must lie in 1..|set_b|");
  if (c.slate_size > c.size_a || c.slate_size > c.n_items - c.size_a) {
    throw ConfigError("slate_size exceeds the size of set_a or set_b");
  }
  (void)solve_force_prob(c.target_ratio, probe, c.slate_size);
  if (c.quartile_size < c.slate_size - 1 || c.quartile_size > c.n_items - c.size_a - c.n_bias) {
    throw ConfigError("quartile_size must lie in [slate_size - 1, |set_b| - n_bias]");
  }
}

inline ExperimentConfig config_from_json(const json& doc) {
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  // A results manifest carries its config under "config".
  const json& j = doc.contains("config") && doc.contains("artifact") ? doc.at("config") : doc;
  if (!j.contains("seed")) throw ConfigError("config field 'seed' is required");
  ExperimentConfig c;
  std::set<std::string> seen;
  detail::read_field(j, "seed", c.seed, seen, "");
  detail::read_field(j, "n_users", c.n_users, seen, "");
  detail::read_field(j, "eval_fraction", c.eval_fraction, seen, "");
  detail::read_field(j, "n_items", c.n_items, seen, "");
  detail::read_field(j, "size_a", c.size_a, seen, "");
  detail::read_field(j, "n_bias", c.n_bias, seen, "");
  detail::read_field(j, "slate_size", c.slate_size, seen, "");
  detail::read_field(j, "target_ratio", c.target_ratio, seen, "");
  detail::read_field(j, "quartile_size", c.quartile_size, seen, "");
  detail::read_field(j, "n_nests", c.n_nests, seen, "");
  detail::read_field(j, "population_dim", c.population_dim, seen, "");
  detail::read_field(j, "resample_population", c.resample_population, seen, "");
  detail::read_field(j, "n_repetitions", c.n_repetitions, seen, "");
  detail::read_field(j, "n_null", c.n_null, seen, "");
  detail::read_field(j, "ndcg_k", c.ndcg_k, seen, "");
  detail::read_field(j, "bootstrap_resamples", c.bootstrap_resamples, seen, "");
  detail::read_field(j, "ci_level", c.ci_level, seen, "");
  detail::read_field(j, "output_dir", c.output_dir, seen, "");

  seen.insert("sessions");
  if (j.contains("sessions")) {
    const json& s = j.at("sessions");
    std::set<std::string> sseen;
    detail::read_field(s, "uniform_a", c.sessions.uniform_a, sseen, "sessions.");
    detail::read_field(s, "overexposure_block", c.sessions.overexposure_block, sseen, "sessions.");
    detail::read_field(s, "competition_anchor", c.sessions.competition_anchor, sseen, "sessions.");
    detail::read_field(s, "competition_block", c.sessions.competition_block, sseen, "sessions.");
    detail::reject_unknown(s, sseen, "sessions.");
  }
  seen.insert("behavior");
  if (j.contains("behavior")) {
    const json& b = j.at("behavior");
    std::set<std::string> bseen;
    std::string kind = "mnl";
    detail::read_field(b, "kind", kind, bseen, "behavior.");
    detail::read_field(b, "context_strength", c.behavior.context_strength, bseen, "behavior.");
    detail::reject_unknown(b, bseen, "behavior.");
    if (kind == "mnl") {
      c.behavior.kind = BehaviorKind::kMnl;
    } else if (kind == "context") {
      c.behavior.kind = BehaviorKind::kContext;
    } else {
      throw ConfigError("behavior.kind must be 'mnl' or 'context' (got '" + kind + "')");
    }
  }
  seen.insert("models");
  if (j.contains("models")) {
    c.models.clear();
    const json& ms = j.at("models");
    if (!ms.is_array()) throw ConfigError("config field 'models' must be an array of model kinds");
    for (const auto& m : ms) {
      if (!m.is_string()) throw ConfigError("config field 'models' must contain strings");
      c.models.push_back(model_kind_from_string(m.get<std::string>()));
    }
    std::set<ModelKind> uniq(c.models.begin(), c.models.end());
    if (uniq.size() != c.models.size()) throw ConfigError("models must not repeat a model kind");
  }
  seen.insert("experiments");
  if (j.contains("experiments")) {
    c.experiments.clear();
    const json& es = j.at("experiments");
    if (!es.is_array()) throw ConfigError("config field 'experiments' must be an array");
    for (const auto& e : es) {
      if (!e.is_string()) throw ConfigError("config field 'experiments' must contain strings");
      c.experiments.push_back(experiment_from_string(e.get<std::string>()));
    }
    std::set<Experiment> uniq(c.experiments.begin(), c.experiments.end());
    if (uniq.size() != c.experiments.size()) throw ConfigError("experiments must not repeat");
  }
  seen.insert("hyper");
  if (j.contains("hyper")) {
    const json& h = j.at("hyper");
    std::set<std::string> hseen;
    detail::read_field(h, "dim", c.hyper.dim, hseen, "hyper.");
    detail::read_field(h, "learning_rate", c.hyper.learning_rate, hseen, "hyper.");
    detail::read_field(h, "epochs", c.hyper.epochs, hseen, "hyper.");
    detail::read_field(h, "reg", c.hyper.reg, hseen, "hyper.");
    detail::read_field(h, "minibatch_size", c.hyper.minibatch_size, hseen, "hyper.");
    detail::read_field(h, "n_negatives", c.hyper.n_negatives, hseen, "hyper.");
    detail::read_field(h, "beta1", c.hyper.beta1, hseen, "hyper.");
    detail::read_field(h, "beta2", c.hyper.beta2, hseen, "hyper.");
    detail::read_field(h, "adam_eps", c.hyper.adam_eps, hseen, "hyper.");
    detail::read_field(h, "init_sd", c.hyper.init_sd, hseen, "hyper.");
    detail::reject_unknown(h, hseen, "hyper.");
  }
  detail::reject_unknown(j, seen, "");
  validate(c);
  return c;
}

inline json to_json(const ExperimentConfig& c) {
  json models = json::array();
  for (ModelKind m : c.models) models.push_back(to_string(m));
  json experiments = json::array();
  for (Experiment e : c.experiments) experiments.push_back(to_string(e));
  return json{
      {"seed", c.seed},
      {"n_users", c.n_users},
      {"eval_fraction", c.eval_fraction},
      {"n_items", c.n_items},
      {"size_a", c.size_a},
      {"n_bias", c.n_bias},
      {"slate_size", c.slate_size},
      {"sessions",
       {{"uniform_a", c.sessions.uniform_a},
        {"overexposure_block", c.sessions.overexposure_block},
        {"competition_anchor", c.sessions.competition_anchor},
        {"competition_block", c.sessions.competition_block}}},
      {"target_ratio", c.target_ratio},
      {"quartile_size", c.quartile_size},
      {"n_nests", c.n_nests},
      {"population_dim", c.population_dim},
      {"resample_population", c.resample_population},
      {"behavior",
       {{"kind", c.behavior.kind == BehaviorKind::kMnl ? "mnl" : "context"},
        {"context_strength", c.behavior.context_strength}}},
      {"models", models},
      {"experiments", experiments},
      {"hyper",
       {{"dim", c.hyper.dim},
        {"learning_rate", c.hyper.learning_rate},
        {"epochs", c.hyper.epochs},
        {"reg", c.hyper.reg},
        {"minibatch_size", c.hyper.minibatch_size},
        {"n_negatives", c.hyper.n_negatives},
        {"beta1", c.hyper.beta1},
        {"beta2", c.hyper.beta2},
        {"adam_eps", c.hyper.adam_eps},
        {"init_sd", c.hyper.init_sd}}},
      {"n_repetitions", c.n_repetitions},
      {"n_null", c.n_null},
      {"ndcg_k", c.ndcg_k},
      {"bootstrap_resamples", c.bootstrap_resamples},
      {"ci_level", c.ci_level},
      {"output_dir", c.output_dir},
  };
}

// One trained pair member of one repetition.
struct MemberRecord {
  int repetition = 0;
  Experiment experiment = Experiment::kOverexposure;
  ModelKind model = ModelKind::kMnl;
  Role member = Role::kTreated;
  double final_loss = 0.0;
  std::vector<double> loss_trace;
  double ndcg = 0.0;
  std::vector<double> bias_item_mean_rank;  // aligned with bias_set
  std::vector<double> shifts;               // pair-level, aligned with bias_set
  double mean_shift = 0.0;
};

struct FailureRecord {
  std::string task;  // "repetition 3" or "null pair 7"
  int index = 0;
  std::string error;
};

struct BiasReport {
  ModelKind model = ModelKind::kMnl;
  Experiment experiment = Experiment::kOverexposure;
  std::vector<double> per_item_shift;
  double mean_bias = 0.0;
  double null_bias = 0.0;
  double corrected_bias = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  int n_repetitions = 0;
  std::vector<double> samples;  // per-repetition mean shift
};

struct AccuracyReport {
  ModelKind model = ModelKind::kMnl;
  Experiment experiment = Experiment::kOverexposure;
  Role condition = Role::kTreated;
  double ndcg_at_k = 0.0;
  int k = 10;
  double ci_low = 0.0;
  double ci_high = 0.0;
};

struct NullSummary {
  ModelKind model = ModelKind::kMnl;
  double null_bias = 0.0;
  std::vector<double> samples;
};

struct ResultsBundle {
  json manifest;
  std::vector<MemberRecord> records;  // ordered by (repetition, experiment, model, member)
  std::vector<BiasReport> bias_reports;
  std::vector<AccuracyReport> accuracy_reports;
  std::vector<NullSummary> nulls;
  std::vector<FailureRecord> failures;
  json dumped_data;  // repetition 0 artifacts when requested

  bool ok() const { return failures.empty(); }
};

struct RunOptions {
  int workers = 1;
  std::set<int> poison_repetitions;  // inject a non-finite learning rate into these repetitions
  bool dump_data = false;
};

inline RunOptions with_workers(int n) {
  RunOptions o;
  o.workers = n;
  return o;
}

// Everything derived from the config before any repetition runs.
struct ExperimentSetup {
  std::shared_ptr<const ItemCatalog> catalog;
  std::shared_ptr<const UserSplit> split;
  LatentPopulation population;
  NestStructure nests;
  DesignParams design;
};

inline ExperimentSetup make_setup(const ExperimentConfig& c) {
  const RngHandle root(c.seed, kGlobalStream);
  ExperimentSetup s;
  s.catalog = std::make_shared<const ItemCatalog>(build_catalog(c.n_items, c.size_a, c.n_bias, root.split(Purpose::kCatalog)));
  s.split = std::make_shared<const UserSplit>(partition_users(c.n_users, c.eval_fraction, root.split(Purpose::kUsers)));
  s.population = sample_population(c.n_users, c.n_items, c.population_dim, root.split(Purpose::kPopulation));
  s.nests = random_nests(c.n_items, c.n_nests, root.split(Purpose::kNests));
  s.design.slate_size = c.slate_size;
  s.design.counts = c.sessions;
  s.design.quartile_size = c.quartile_size;
  s.design.force_prob = solve_force_prob(c.target_ratio, *s.catalog, c.slate_size);
  return s;
}

inline RngHandle pair_stream(const RngHandle& rep, Experiment e) {
  return rep.split(e == Experiment::kOverexposure ? Purpose::kOverexposurePair : Purpose::kCompetitionPair);
}

inline RngHandle training_stream(const RngHandle& rep, Experiment e, ModelKind m) {
  return rep.split(Purpose::kTraining).split(static_cast<std::uint64_t>(e)).split(static_cast<std::uint64_t>(m));
}

namespace detail {

struct RepetitionResult {
  std::vector<MemberRecord> records;
  json dump;
};

inline RepetitionResult run_repetition(const ExperimentConfig& c, const ExperimentSetup& s, int r, bool poison,
                                       bool dump) {
  const RngHandle rep(c.seed, static_cast<std::uint64_t>(r));
  LatentPopulation resampled;
  const LatentPopulation* pop = &s.population;
  if (c.resample_population) {
    resampled = sample_population(c.n_users, c.n_items, c.population_dim, rep.split(Purpose::kPopulation));
    pop = &resampled;
  }
  HyperParams hyper = c.hyper;
  if (poison) hyper.learning_rate = std::numeric_limits<double>::infinity();

  RepetitionResult out;
  for (Experiment e : c.experiments) {
    const DatasetPair pair = build_pair(*pop, s.catalog, s.split, e, s.design, c.behavior, pair_stream(rep, e));
    if (dump) {
      out.dump[std::string(to_string(e))] = json{{"treated", json::array()}, {"control", json::array()}};
      for (const auto& ev : pair.treated.events) out.dump[std::string(to_string(e))]["treated"].push_back(to_json(ev));
      for (const auto& ev : pair.control.events) out.dump[std::string(to_string(e))]["control"].push_back(to_json(ev));
    }
    for (ModelKind m : c.models) {
      const PairOutcome o = pair_outcome(m, pair, *s.split, *s.catalog, hyper, s.nests, training_stream(rep, e, m));
      for (Role member : {Role::kTreated, Role::kControl}) {
        const TrainedModel& tm = member == Role::kTreated ? o.treated : o.control;
        MemberRecord rec;
        rec.repetition = r;
        rec.experiment = e;
        rec.model = m;
        rec.member = member;
        rec.final_loss = tm.final_loss;
        rec.loss_trace = tm.loss_trace;
        rec.ndcg = ndcg_at_k(tm, *pop, *s.split, *s.catalog, c.ndcg_k);
        const auto ranks = mean_eval_rank(tm, *s.split, *s.catalog);
        for (ItemId b : s.catalog->bias_set) {
          const auto col = std::lower_bound(s.catalog->set_b.begin(), s.catalog->set_b.end(), b) - s.catalog->set_b.begin();
          rec.bias_item_mean_rank.push_back(ranks[static_cast<std::size_t>(col)]);
        }
        rec.shifts = o.shifts;
        rec.mean_shift = o.mean_shift;
        if (dump) {
          out.dump["models"][std::string(to_string(e))][std::string(to_string(m))]
                  [member == Role::kTreated ? "treated" : "control"] = to_json(tm);
        }
        out.records.push_back(std::move(rec));
      }
    }
  }
  return out;
}

// Null pair j for every model, matching null_bias(model, ..., n_null) called
// with the harness null stream.
inline std::vector<double> run_null_pair(const ExperimentConfig& c, const ExperimentSetup& s, int j) {
  const RngHandle r = RngHandle(c.seed, kNullStream).split(static_cast<std::uint64_t>(j));
  const PairPlan plan = null_plan(Experiment::kOverexposure, c.sessions);
  const DatasetPair pair =
      build_pair_from_plan(s.population, s.catalog, s.split, plan, s.design, c.behavior, r.split(Purpose::kNullPairs));
  std::vector<double> out;
  for (ModelKind m : c.models) {
    out.push_back(pair_outcome(m, pair, *s.split, *s.catalog, c.hyper, s.nests, r.split(Purpose::kTraining)).mean_shift);
  }
  return out;
}

// Runs tasks 0..n-1 on `workers` threads. Each task writes only its own slot.
template <class Fn>
void parallel_for(int n, int workers, Fn&& fn) {
  std::atomic<int> next{0};
  auto loop = [&] {
    for (int t = next++; t < n; t = next++) fn(t);
  };
  const int extra = std::max(0, std::min(workers, n) - 1);
  std::vector<std::jthread> pool;
  pool.reserve(static_cast<std::size_t>(extra));
  for (int w = 0; w < extra; ++w) pool.emplace_back(loop);
  loop();
}

}  // namespace detail

inline json manifest_for(const ExperimentConfig& c, const ExperimentSetup& s) {
  return json{
      {"artifact", "exbias"},
      {"version", kArtifactVersion},
      {"config", to_json(c)},
      {"derived",
       {{"force_prob", s.design.force_prob},
        {"quartile_size", s.design.quartile_size},
        {"bias_set", s.catalog->bias_set},
        {"n_train_users", s.split->train_users.size()},
        {"n_eval_users", s.split->eval_users.size()}}},
      {"conventions",
       {{"bias_sign", "positive = ranked better under the treated exposure (mean_rank_control - mean_rank_treated)"},
        {"rank_averaging", "ranks averaged over eval users first, then over bias items"},
        {"chance_correction", "mean bias over null pairs with uniform set_b exposure in both members"},
        {"chosen_field", "results and logs store the chosen item as its position in the slate"}}},
      {"models",
       {{"ips_bpr", "generic inverse-propensity-weighted BPR baseline; not a reproduction of any published debiasing method"}}},
      {"unverified_defaults",
       {"n_users", "eval_fraction", "population_dim", "hyper", "n_nests", "behavior.context_strength", "quartile_size",
        "sessions.competition_anchor", "sessions.competition_block"}},
  };
}

inline ResultsBundle run_experiment(const ExperimentConfig& config, const RunOptions& opts = {}) {
  validate(config);
  const ExperimentSetup setup = make_setup(config);
  const int R = config.n_repetitions;
  const int N = config.n_null;

  std::vector<std::optional<detail::RepetitionResult>> reps(static_cast<std::size_t>(R));
  std::vector<std::optional<std::vector<double>>> nulls(static_cast<std::size_t>(N));
  std::vector<std::string> errors(static_cast<std::size_t>(R + N));

  detail::parallel_for(R + N, std::max(1, opts.workers), [&](int t) {
    try {
      if (t < R) {
        reps[static_cast<std::size_t>(t)] =
            detail::run_repetition(config, setup, t, opts.poison_repetitions.count(t) > 0, opts.dump_data && t == 0);
      } else {
        nulls[static_cast<std::size_t>(t - R)] = detail::run_null_pair(config, setup, t - R);
      }
    } catch (const std::exception& e) {
      errors[static_cast<std::size_t>(t)] = e.what();
    }
  });

  ResultsBundle b;
  b.manifest = manifest_for(config, setup);
  for (int t = 0; t < R + N; ++t) {
    if (!errors[static_cast<std::size_t>(t)].empty()) {
      b.failures.push_back({t < R ? "repetition" : "null pair", t < R ? t : t - R, errors[static_cast<std::size_t>(t)]});
    }
  }
  for (auto& r : reps) {
    if (!r) continue;
    for (auto& rec : r->records) b.records.push_back(std::move(rec));
  }
  if (opts.dump_data && reps[0]) {
    b.dumped_data = std::move(reps[0]->dump);
    b.dumped_data["design"] = design_to_json(*setup.catalog, *setup.split);
    b.dumped_data["population"] = to_json(setup.population);
  }

  const RngHandle boot = RngHandle(config.seed, kGlobalStream).split(Purpose::kBootstrap);
  for (std::size_t mi = 0; mi < config.models.size(); ++mi) {
    NullSummary ns;
    ns.model = config.models[mi];
    for (const auto& n : nulls) {
      if (n) ns.samples.push_back((*n)[mi]);
    }
    if (!ns.samples.empty()) {
      ns.null_bias = std::accumulate(ns.samples.begin(), ns.samples.end(), 0.0) / static_cast<double>(ns.samples.size());
    }
    b.nulls.push_back(std::move(ns));
  }

  const std::size_t n_bias = setup.catalog->bias_set.size();
  for (Experiment e : config.experiments) {
    for (std::size_t mi = 0; mi < config.models.size(); ++mi) {
      const ModelKind m = config.models[mi];
      BiasReport br;
      br.model = m;
      br.experiment = e;
      br.per_item_shift.assign(n_bias, 0.0);
      std::vector<double> ndcg_t, ndcg_c;
      for (const auto& rec : b.records) {
        if (rec.experiment != e || rec.model != m) continue;
        if (rec.member == Role::kTreated) {
          br.samples.push_back(rec.mean_shift);
          for (std::size_t j = 0; j < n_bias; ++j) br.per_item_shift[j] += rec.shifts[j];
          ndcg_t.push_back(rec.ndcg);
        } else {
          ndcg_c.push_back(rec.ndcg);
        }
      }
      br.n_repetitions = static_cast<int>(br.samples.size());
      if (br.n_repetitions == 0) continue;
      for (double& x : br.per_item_shift) x /= br.n_repetitions;
      br.mean_bias = std::accumulate(br.samples.begin(), br.samples.end(), 0.0) / br.n_repetitions;
      br.null_bias = b.nulls[mi].null_bias;
      br.corrected_bias = br.mean_bias - br.null_bias;
      const RngHandle cell = boot.split(static_cast<std::uint64_t>(e)).split(static_cast<std::uint64_t>(m));
      const auto& null_samples = b.nulls[mi].samples;
      if (br.samples.size() >= 2 && null_samples.size() >= 2) {
        const Interval ci =
            bootstrap_difference_ci(br.samples, null_samples, config.ci_level, cell, config.bootstrap_resamples);
        br.ci_low = std::min(ci.low, br.corrected_bias);
        br.ci_high = std::max(ci.high, br.corrected_bias);
      } else if (br.samples.size() >= 2) {
        const Interval ci = bootstrap_ci(br.samples, config.ci_level, cell, config.bootstrap_resamples);
        br.ci_low = std::min(ci.low - br.null_bias, br.corrected_bias);
        br.ci_high = std::max(ci.high - br.null_bias, br.corrected_bias);
      } else {
        br.ci_low = br.ci_high = br.corrected_bias;
      }
      b.bias_reports.push_back(br);

      for (Role cond : {Role::kTreated, Role::kControl}) {
        const auto& v = cond == Role::kTreated ? ndcg_t : ndcg_c;
        AccuracyReport ar;
        ar.model = m;
        ar.experiment = e;
        ar.condition = cond;
        ar.k = config.ndcg_k;
        ar.ndcg_at_k = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
        if (v.size() >= 2) {
          const Interval ci =
              bootstrap_ci(v, config.ci_level, cell.split(cond == Role::kTreated ? 1u : 2u), config.bootstrap_resamples);
          ar.ci_low = std::min(ci.low, ar.ndcg_at_k);
          ar.ci_high = std::max(ci.high, ar.ndcg_at_k);
        } else {
          ar.ci_low = ar.ci_high = ar.ndcg_at_k;
        }
        b.accuracy_reports.push_back(ar);
      }
    }
  }
  return b;
}

// Small random instance for finite-difference checks: every user and item
// appears, slates of 4 drawn from 12 items, 3 nests.
struct GradientInstance {
  std::vector<ChoiceEvent> events;
  NestStructure nests;
};

inline GradientInstance gradient_instance(RngHandle rng, int n_users = 6, int n_items = 12, int n_events = 30) {
  GradientInstance g;
  g.nests = random_nests(n_items, 3, rng.split(Purpose::kNests));
  auto eng = rng.split(Purpose::kSlates).engine();
  std::vector<ItemId> pool(static_cast<std::size_t>(n_items));
  std::iota(pool.begin(), pool.end(), 0);
  for (int e = 0; e < n_events; ++e) {
    ChoiceEvent ev;
    ev.user = e % n_users;
    ev.slate.items = sample_distinct<ItemId>(pool, 4, eng);
    if (e < n_items) {
      ev.slate.items[0] = e;  // make sure every item is seen
      std::sort(ev.slate.items.begin(), ev.slate.items.end());
      ev.slate.items.erase(std::unique(ev.slate.items.begin(), ev.slate.items.end()), ev.slate.items.end());
      while (ev.slate.items.size() < 4) {
        const auto extra = static_cast<ItemId>(uniform_index(eng, pool.size()));
        if (!std::binary_search(ev.slate.items.begin(), ev.slate.items.end(), extra)) {
          ev.slate.items.insert(std::lower_bound(ev.slate.items.begin(), ev.slate.items.end(), extra), extra);
        }
      }
    }
    ev.slate.policy = Policy::kUniformB;
    ev.chosen_index = static_cast<int>(uniform_index(eng, ev.slate.items.size()));
    g.events.push_back(ev);
  }
  return g;
}

inline std::filesystem::path default_output_root() {
  const char* env = std::getenv("EXBIAS_OUTPUT_ROOT");
  return env && *env ? std::filesystem::path(env) : std::filesystem::path("runs");
}

inline const BiasReport* find_bias(const ResultsBundle& b, Experiment e, ModelKind m) {
  for (const auto& r : b.bias_reports) {
    if (r.experiment == e && r.model == m) return &r;
  }
  return nullptr;
}

inline const AccuracyReport* find_accuracy(const ResultsBundle& b, Experiment e, ModelKind m, Role cond) {
  for (const auto& r : b.accuracy_reports) {
    if (r.experiment == e && r.model == m && r.condition == cond) return &r;
  }
  return nullptr;
}

inline json to_json(const MemberRecord& r) {
  return json{{"repetition", r.repetition},
              {"experiment", to_string(r.experiment)},
              {"model", to_string(r.model)},
              {"member", to_string(r.member)},
              {"ndcg", r.ndcg},
              {"bias_item_mean_rank", r.bias_item_mean_rank},
              {"shifts", r.shifts},
              {"mean_shift", r.mean_shift},
              {"final_loss", r.final_loss},
              {"loss_trace", r.loss_trace}};
}

inline std::string summary_csv(const ResultsBundle& b) {
  std::string out = "experiment,model,corrected_bias,ci_low,ci_high,ndcg_treated,ndcg_control\n";
  for (const auto& br : b.bias_reports) {
    const auto* t = find_accuracy(b, br.experiment, br.model, Role::kTreated);
    const auto* c = find_accuracy(b, br.experiment, br.model, Role::kControl);
    out += std::string(to_string(br.experiment)) + "," + std::string(to_string(br.model)) + "," +
           detail::fmt(br.corrected_bias) + "," + detail::fmt(br.ci_low) + "," + detail::fmt(br.ci_high) + "," +
           detail::fmt(t ? t->ndcg_at_k : 0.0) + "," + detail::fmt(c ? c->ndcg_at_k : 0.0) + "\n";
  }
  return out;
}

inline std::string plotdata_bias_csv(const ResultsBundle& b) {
  std::string out = "experiment,model,mean,ci_low,ci_high\n";
  for (const auto& br : b.bias_reports) {
    out += std::string(to_string(br.experiment)) + "," + std::string(to_string(br.model)) + "," +
           detail::fmt(br.corrected_bias) + "," + detail::fmt(br.ci_low) + "," + detail::fmt(br.ci_high) + "\n";
  }
  return out;
}

inline std::string plotdata_ndcg_csv(const ResultsBundle& b) {
  std::string out = "experiment,condition,model,mean,ci_low,ci_high\n";
  for (const auto& ar : b.accuracy_reports) {
    out += std::string(to_string(ar.experiment)) + "," + std::string(to_string(ar.condition)) + "," +
           std::string(to_string(ar.model)) + "," + detail::fmt(ar.ndcg_at_k) + "," + detail::fmt(ar.ci_low) + "," +
           detail::fmt(ar.ci_high) + "\n";
  }
  return out;
}

// Refusal to write into a non-empty output directory without force.
struct OutputExistsError : ConfigError {
  using ConfigError::ConfigError;
};

inline std::vector<std::filesystem::path> emit_outputs(const ResultsBundle& b, const std::filesystem::path& dir,
                                                       bool force = false) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (fs::exists(dir, ec) && !fs::is_empty(dir, ec) && !force) {
    throw OutputExistsError("output directory '" + dir.string() + "' is not empty; pass --force to overwrite");
  }
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir.string() + "': " + ec.message());

  std::string results;
  for (const auto& r : b.records) results += to_json(r).dump() + "\n";
  std::string null_lines;
  for (const auto& n : b.nulls) {
    null_lines += json{{"model", to_string(n.model)}, {"null_bias", n.null_bias}, {"samples", n.samples}}.dump() + "\n";
  }
  std::string report_lines;
  for (const auto& r : b.bias_reports) {
    report_lines += json{{"report", "bias"},
                         {"experiment", to_string(r.experiment)},
                         {"model", to_string(r.model)},
                         {"per_item_shift", r.per_item_shift},
                         {"mean_bias", r.mean_bias},
                         {"null_bias", r.null_bias},
                         {"corrected_bias", r.corrected_bias},
                         {"ci_low", r.ci_low},
                         {"ci_high", r.ci_high},
                         {"n_repetitions", r.n_repetitions}}
                        .dump() +
                    "\n";
  }
  for (const auto& r : b.accuracy_reports) {
    report_lines += json{{"report", "accuracy"},
                         {"experiment", to_string(r.experiment)},
                         {"condition", to_string(r.condition)},
                         {"model", to_string(r.model)},
                         {"k", r.k},
                         {"ndcg_at_k", r.ndcg_at_k},
                         {"ci_low", r.ci_low},
                         {"ci_high", r.ci_high}}
                        .dump() +
                    "\n";
  }
  json manifest = b.manifest;
  json failures = json::array();
  for (const auto& f : b.failures) failures.push_back({{"task", f.task}, {"index", f.index}, {"error", f.error}});
  manifest["failures"] = failures;

  std::vector<fs::path> written{dir / "manifest.json",      dir / "results.jsonl",      dir / "nulls.jsonl",
                                dir / "summary.csv",        dir / "plotdata_bias.csv",  dir / "plotdata_ndcg.csv",
                                dir / "reports.jsonl"};
  write_text(written[0], manifest.dump(2) + "\n");
  write_text(written[1], results);
  write_text(written[2], null_lines);
  write_text(written[3], summary_csv(b));
  write_text(written[4], plotdata_bias_csv(b));
  write_text(written[5], plotdata_ndcg_csv(b));
  write_text(written[6], report_lines);
  if (!b.dumped_data.is_null()) {
    const fs::path data = dir / "data";
    fs::create_directories(data);
    for (const auto& [name, value] : b.dumped_data.items()) {
      written.push_back(data / (name + ".json"));
      write_text(written.back(), value.dump() + "\n");
    }
  }
  return written;
}

}  // namespace exbias
