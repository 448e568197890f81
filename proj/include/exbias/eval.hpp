#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "exbias/design.hpp"
#include "exbias/oracle.hpp"
#include "exbias/train.hpp"

namespace exbias {

// Per (eval user, set_b item) rank, 1 = best. Row r belongs to eval_users[r];
// column c to set_b[c].
struct RankTable {
  std::vector<UserId> users;
  std::vector<ItemId> items;
  std::vector<int> ranks;

  int rank(std::size_t row, std::size_t col) const { return ranks[row * items.size() + col]; }
};

inline RankTable rank_table(const TrainedModel& model, const UserSplit& split, const ItemCatalog& catalog) {
  RankTable t;
  t.users = split.eval_users;
  t.items = catalog.set_b;
  t.ranks.assign(t.users.size() * t.items.size(), 0);
  std::vector<int> col_of(static_cast<std::size_t>(catalog.n_items), -1);
  for (std::size_t c = 0; c < t.items.size(); ++c) col_of[static_cast<std::size_t>(t.items[c])] = static_cast<int>(c);
  for (std::size_t r = 0; r < t.users.size(); ++r) {
    const auto ranking = predict_ranking(model.params, t.users[r], t.items);
    for (std::size_t pos = 0; pos < ranking.size(); ++pos) {
      t.ranks[r * t.items.size() + static_cast<std::size_t>(col_of[static_cast<std::size_t>(ranking[pos])])] =
          static_cast<int>(pos) + 1;
    }
  }
  return t;
}

// Mean rank of each set_b item over eval users, aligned with catalog.set_b.
inline std::vector<double> mean_eval_rank(const TrainedModel& model, const UserSplit& split, const ItemCatalog& catalog) {
  const RankTable t = rank_table(model, split, catalog);
  std::vector<double> mean(t.items.size(), 0.0);
  for (std::size_t r = 0; r < t.users.size(); ++r) {
    for (std::size_t c = 0; c < t.items.size(); ++c) mean[c] += t.rank(r, c);
  }
  for (double& m : mean) m /= static_cast<double>(t.users.size());
  return mean;
}

struct PairOptions {
  bool shared_training_stream = false;  // both members train from one stream
};

struct PairOutcome {
  std::vector<double> shifts;  // aligned with catalog.bias_set
  double mean_shift = 0.0;
  TrainedModel treated;
  TrainedModel control;
};

// Trains `kind` on the leak-free view of each member and measures, per bias
// item, mean_rank(control) - mean_rank(treated). Positive values mean the
// treated exposure made the model rank the item better.
inline PairOutcome pair_outcome(ModelKind kind, const DatasetPair& pair, const UserSplit& split,
                                const ItemCatalog& catalog, const HyperParams& hyper, const NestStructure& nests,
                                RngHandle rng, const PairOptions& opts = {}) {
  const ProblemShape shape{split.n_users, catalog.n_items};
  // Random scores are a property of the experiment, not of the member.
  const bool shared = opts.shared_training_stream || kind == ModelKind::kRandom;
  const RngHandle treated_rng = shared ? rng.split(Purpose::kTraining) : rng.split(Purpose::kTreated);
  const RngHandle control_rng = shared ? rng.split(Purpose::kTraining) : rng.split(Purpose::kControl);
  PairOutcome out;
  const auto treated_events = training_view(pair.treated, split, catalog);
  const auto control_events = training_view(pair.control, split, catalog);
  out.treated = fit(kind, treated_events, shape, hyper, nests, treated_rng);
  out.control = fit(kind, control_events, shape, hyper, nests, control_rng);
  const auto rank_t = mean_eval_rank(out.treated, split, catalog);
  const auto rank_c = mean_eval_rank(out.control, split, catalog);
  for (ItemId b : catalog.bias_set) {
    const auto col = static_cast<std::size_t>(
        std::lower_bound(catalog.set_b.begin(), catalog.set_b.end(), b) - catalog.set_b.begin());
    out.shifts.push_back(rank_c[col] - rank_t[col]);
  }
  out.mean_shift = std::accumulate(out.shifts.begin(), out.shifts.end(), 0.0) / static_cast<double>(out.shifts.size());
  return out;
}

inline std::vector<double> pair_bias(ModelKind kind, const DatasetPair& pair, const UserSplit& split,
                                     const ItemCatalog& catalog, const HyperParams& hyper, const NestStructure& nests,
                                     RngHandle rng, const PairOptions& opts = {}) {
  return pair_outcome(kind, pair, split, catalog, hyper, nests, rng, opts).shifts;
}

struct NullBias {
  double mean = 0.0;
  std::vector<double> samples;  // mean shift of each null pair
};

struct NullOptions {
  bool shared_member_randomness = false;  // members are identical logs
  bool shared_training_stream = false;
};

// Mean bias over n_null pairs whose members are both uniformly exposed on
// set_b: the finite-sample rank-shift noise floor.
inline NullBias null_bias(ModelKind kind, std::shared_ptr<const ItemCatalog> catalog,
                          std::shared_ptr<const UserSplit> split, const LatentPopulation& pop,
                          const BehaviorSpec& behavior, const HyperParams& hyper, const NestStructure& nests,
                          RngHandle rng, int n_null, const DesignParams& design,
                          const NullOptions& opts = {}) {
  if (n_null < 1) throw ConfigError("n_null must be >= 1");
  NullBias out;
  const PairPlan plan = null_plan(Experiment::kOverexposure, design.counts, opts.shared_member_randomness);
  for (int j = 0; j < n_null; ++j) {
    const RngHandle r = rng.split(static_cast<std::uint64_t>(j));
    const DatasetPair pair = build_pair_from_plan(pop, catalog, split, plan, design, behavior, r.split(Purpose::kNullPairs));
    const auto outcome = pair_outcome(kind, pair, *split, *catalog, hyper, nests, r.split(Purpose::kTraining),
                                      PairOptions{opts.shared_training_stream});
    out.samples.push_back(outcome.mean_shift);
  }
  out.mean = std::accumulate(out.samples.begin(), out.samples.end(), 0.0) / static_cast<double>(n_null);
  return out;
}

// nDCG@k of one ranking against a binary relevance set.
inline double ndcg_of_ranking(std::span<const ItemId> ranking, std::span<const ItemId> relevant, int k) {
  const int depth = std::min<int>(k, static_cast<int>(ranking.size()));
  double dcg = 0.0;
  for (int pos = 0; pos < depth; ++pos) {
    if (std::find(relevant.begin(), relevant.end(), ranking[static_cast<std::size_t>(pos)]) != relevant.end()) {
      dcg += 1.0 / std::log2(pos + 2.0);
    }
  }
  double ideal = 0.0;
  for (int pos = 0; pos < std::min<int>(k, static_cast<int>(relevant.size())); ++pos) ideal += 1.0 / std::log2(pos + 2.0);
  return ideal > 0.0 ? dcg / ideal : 0.0;
}

inline constexpr int kRelevantPerUser = 5;

// The user's top-5 set_b items by true utility (ties by ascending id).
inline std::vector<ItemId> relevant_items(const LatentPopulation& pop, UserId user, const ItemCatalog& catalog) {
  std::vector<std::pair<double, ItemId>> u;
  for (ItemId i : catalog.set_b) u.emplace_back(pop.true_utility(user, i), i);
  const auto n = std::min<std::size_t>(kRelevantPerUser, u.size());
  std::partial_sort(u.begin(), u.begin() + static_cast<std::ptrdiff_t>(n), u.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  std::vector<ItemId> out;
  for (std::size_t j = 0; j < n; ++j) out.push_back(u[j].second);
  return out;
}

inline double ndcg_at_k(const TrainedModel& model, const LatentPopulation& pop, const UserSplit& split,
                        const ItemCatalog& catalog, int k) {
  if (k < 1 || k > static_cast<int>(catalog.set_b.size())) throw ContractError("ndcg k must lie in 1..|set_b|");
  double total = 0.0;
  for (UserId u : split.eval_users) {
    const auto ranking = predict_ranking(model.params, u, catalog.set_b);
    total += ndcg_of_ranking(ranking, relevant_items(pop, u, catalog), k);
  }
  return total / static_cast<double>(split.eval_users.size());
}

struct Interval {
  double low = 0.0;
  double high = 0.0;
};

inline double quantile_sorted(std::span<const double> sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

// Percentile bootstrap interval for the mean.
inline Interval bootstrap_ci(std::span<const double> samples, double level, RngHandle rng, int resamples = 2000) {
  if (samples.size() < 2) throw ContractError("bootstrap_ci needs at least 2 samples");
  if (!(level > 0.0 && level < 1.0)) throw ContractError("bootstrap level must lie in (0, 1)");
  auto eng = rng.engine();
  std::vector<double> means(static_cast<std::size_t>(resamples));
  for (auto& m : means) {
    double s = 0.0;
    for (std::size_t j = 0; j < samples.size(); ++j) s += samples[uniform_index(eng, samples.size())];
    m = s / static_cast<double>(samples.size());
  }
  std::sort(means.begin(), means.end());
  const double tail = (1.0 - level) / 2.0;
  return {quantile_sorted(means, tail), quantile_sorted(means, 1.0 - tail)};
}

// Percentile bootstrap interval for mean(a) - mean(b), resampling a and b
// independently.
inline Interval bootstrap_difference_ci(std::span<const double> a, std::span<const double> b, double level,
                                        RngHandle rng, int resamples = 2000) {
  if (a.size() < 2 || b.size() < 2) throw ContractError("bootstrap_difference_ci needs at least 2 samples per side");
  if (!(level > 0.0 && level < 1.0)) throw ContractError("bootstrap level must lie in (0, 1)");
  auto eng = rng.engine();
  const auto resampled_mean = [&eng](std::span<const double> x) {
    double s = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) s += x[uniform_index(eng, x.size())];
    return s / static_cast<double>(x.size());
  };
  std::vector<double> diffs(static_cast<std::size_t>(resamples));
  for (auto& d : diffs) {
    const double ma = resampled_mean(a);
    d = ma - resampled_mean(b);
  }
  std::sort(diffs.begin(), diffs.end());
  const double tail = (1.0 - level) / 2.0;
  return {quantile_sorted(diffs, tail), quantile_sorted(diffs, 1.0 - tail)};
}

// Kendall's tau-b.
inline double kendall_tau(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw ContractError("kendall_tau needs two equal-length series (n >= 2)");
  long concordant = 0, discordant = 0, ties_a = 0, ties_b = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = i + 1; j < a.size(); ++j) {
      const double da = a[i] - a[j];
      const double db = b[i] - b[j];
      if (da == 0.0 && db == 0.0) continue;
      if (da == 0.0) {
        ++ties_a;
      } else if (db == 0.0) {
        ++ties_b;
      } else if ((da > 0) == (db > 0)) {
        ++concordant;
      } else {
        ++discordant;
      }
    }
  }
  const double n1 = static_cast<double>(concordant + discordant + ties_a);
  const double n2 = static_cast<double>(concordant + discordant + ties_b);
  if (n1 == 0.0 || n2 == 0.0) return 0.0;
  return static_cast<double>(concordant - discordant) / std::sqrt(n1 * n2);
}

// One-sided sign test: P(at least the observed number of positives) under a
// fair coin, zeros dropped.
inline double sign_test_positive(std::span<const double> samples) {
  int n = 0, pos = 0;
  for (double x : samples) {
    if (x == 0.0) continue;
    ++n;
    if (x > 0.0) ++pos;
  }
  if (n == 0) return 1.0;
  double p = 0.0;
  for (int j = pos; j <= n; ++j) {
    p += std::exp(std::lgamma(n + 1.0) - std::lgamma(j + 1.0) - std::lgamma(n - j + 1.0) - n * std::log(2.0));
  }
  return std::min(1.0, p);
}

}  // namespace exbias
