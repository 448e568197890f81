#include <gtest/gtest.h>

#include <set>

#include "exbias/harness.hpp"

using namespace exbias;

namespace {

struct World {
  std::shared_ptr<const ItemCatalog> catalog;
  std::shared_ptr<const UserSplit> split;
  LatentPopulation pop;
  NestStructure nests;
  DesignParams design;
};

const World& world() {
  static const World w = [] {
    World x;
    x.catalog = std::make_shared<const ItemCatalog>(build_catalog(100, 50, 5, RngHandle(21)));
    x.split = std::make_shared<const UserSplit>(partition_users(300, 1.0 / 3.0, RngHandle(22)));
    x.pop = sample_population(300, 100, 8, RngHandle(23));
    x.nests = random_nests(100, 10, RngHandle(24));
    x.design.force_prob = solve_force_prob(3.2, *x.catalog, 4);
    return x;
  }();
  return w;
}

// A model that scores with the true population parameters.
TrainedModel oracle_model(const LatentPopulation& pop) {
  TrainedModel m;
  m.params = ModelParams(pop.n_users, pop.n_items, pop.dim, 0);
  std::copy(pop.user_factors.begin(), pop.user_factors.end(), m.params.values.begin());
  std::copy(pop.item_factors.begin(), pop.item_factors.end(),
            m.params.values.begin() + static_cast<std::ptrdiff_t>(m.params.item_factor_offset()));
  for (ItemId i = 0; i < pop.n_items; ++i) m.params.intercept(i) = pop.item_intercepts[static_cast<std::size_t>(i)];
  return m;
}

TrainedModel intercept_model(int users, const std::vector<double>& s) {
  TrainedModel m;
  m.params = ModelParams(users, static_cast<int>(s.size()), 1, 0);
  for (std::size_t i = 0; i < s.size(); ++i) m.params.intercept(static_cast<ItemId>(i)) = s[i];
  return m;
}

}  // namespace

TEST(MeanEvalRank, DescendingIdScores) {
  const auto& w = world();
  std::vector<double> s(100);
  for (int i = 0; i < 100; ++i) s[static_cast<std::size_t>(i)] = i;
  const auto ranks = mean_eval_rank(intercept_model(300, s), *w.split, *w.catalog);
  EXPECT_EQ(ranks.back(), 1.0);
  EXPECT_EQ(ranks.front(), 50.0);
}

TEST(MeanEvalRank, ConstantScoresFollowTieRule) {
  const auto& w = world();
  const auto ranks = mean_eval_rank(intercept_model(300, std::vector<double>(100, 0.0)), *w.split, *w.catalog);
  for (std::size_t c = 0; c < ranks.size(); ++c) EXPECT_EQ(ranks[c], static_cast<double>(c + 1));
}

TEST(MeanEvalRank, MatchesBruteForce) {
  const auto& w = world();
  const auto m = oracle_model(w.pop);
  const auto ranks = mean_eval_rank(m, *w.split, *w.catalog);
  for (std::size_t c = 0; c < w.catalog->set_b.size(); ++c) {
    const ItemId i = w.catalog->set_b[c];
    double total = 0.0;
    for (UserId u : w.split->eval_users) {
      int better = 0;
      for (ItemId j : w.catalog->set_b) {
        const double sj = score(m.params, u, j), si = score(m.params, u, i);
        better += sj > si || (sj == si && j < i);
      }
      total += better + 1;
    }
    EXPECT_NEAR(ranks[c], total / w.split->eval_users.size(), 1e-12);
  }
}

TEST(RankTable, RowsArePermutations) {
  const auto& w = world();
  const auto t = rank_table(oracle_model(w.pop), *w.split, *w.catalog);
  for (std::size_t r = 0; r < t.users.size(); ++r) {
    std::set<int> seen;
    for (std::size_t c = 0; c < t.items.size(); ++c) seen.insert(t.rank(r, c));
    ASSERT_EQ(seen.size(), 50u);
    ASSERT_EQ(*seen.begin(), 1);
    ASSERT_EQ(*seen.rbegin(), 50);
  }
}

TEST(PairBias, IdenticalMembersGiveZero) {
  const auto& w = world();
  const auto pair = build_pair_from_plan(w.pop, w.catalog, w.split, null_plan(Experiment::kOverexposure, w.design.counts, true),
                                         w.design, {}, RngHandle(1));
  HyperParams h;
  h.epochs = 40;
  for (ModelKind k : kAllModelKinds) {
    const auto shifts = pair_bias(k, pair, *w.split, *w.catalog, h, w.nests, RngHandle(2), {true});
    ASSERT_EQ(shifts.size(), 5u);
    for (double s : shifts) EXPECT_EQ(s, 0.0) << to_string(k);
  }
}

TEST(PairBias, RandomModelHasZeroMeanShift) {
  const auto& w = world();
  HyperParams h;
  h.epochs = 1;
  std::vector<double> means;
  for (std::uint64_t r = 0; r < 10; ++r) {
    const auto pair = build_pair(w.pop, w.catalog, w.split, Experiment::kOverexposure, w.design, {}, RngHandle(r));
    const auto o = pair_outcome(ModelKind::kRandom, pair, *w.split, *w.catalog, h, w.nests, RngHandle(r, 1));
    means.push_back(o.mean_shift);
  }
  EXPECT_NEAR(std::accumulate(means.begin(), means.end(), 0.0) / means.size(), 0.0, 1e-12);
}

TEST(PairBias, BprOverexposureIsPositive) {
  const auto& w = world();
  std::vector<double> means;
  for (std::uint64_t r = 0; r < 16; ++r) {
    const auto pair = build_pair(w.pop, w.catalog, w.split, Experiment::kOverexposure, w.design, {}, RngHandle(100 + r));
    const auto shifts = pair_bias(ModelKind::kBpr, pair, *w.split, *w.catalog, {}, w.nests, RngHandle(200 + r));
    means.push_back(std::accumulate(shifts.begin(), shifts.end(), 0.0) / 5);
  }
  EXPECT_LT(sign_test_positive(means), 0.05);
}

TEST(NullBias, SharedRandomnessIsExactlyZero) {
  const auto& w = world();
  HyperParams h;
  h.epochs = 30;
  const auto nb = null_bias(ModelKind::kMnl, w.catalog, w.split, w.pop, {}, h, w.nests, RngHandle(3), 1, w.design,
                            {true, true});
  EXPECT_EQ(nb.mean, 0.0);
  EXPECT_THROW(null_bias(ModelKind::kMnl, w.catalog, w.split, w.pop, {}, h, w.nests, RngHandle(3), 0, w.design),
               ConfigError);
}

TEST(NullBias, MnlNoiseFloorBelowOneRank) {
  const auto& w = world();
  const auto nb = null_bias(ModelKind::kMnl, w.catalog, w.split, w.pop, {}, {}, w.nests, RngHandle(4), 20, w.design);
  ASSERT_EQ(nb.samples.size(), 20u);
  EXPECT_LT(std::abs(nb.mean), 1.0);
}

TEST(Ndcg, IdealRanking) {
  const std::vector<ItemId> ranking{4, 2, 9, 7, 1, 3, 5};
  const std::vector<ItemId> relevant{1, 2, 4, 7, 9};
  EXPECT_DOUBLE_EQ(ndcg_of_ranking(ranking, relevant, 10), 1.0);
}

TEST(Ndcg, NoRelevantInTopK) {
  const std::vector<ItemId> ranking{10, 11, 12, 1, 2};
  const std::vector<ItemId> relevant{1, 2, 3, 4, 5};
  EXPECT_EQ(ndcg_of_ranking(ranking, relevant, 3), 0.0);
}

TEST(Ndcg, OneRelevantAtPositionThree) {
  std::vector<ItemId> ranking(20);
  std::iota(ranking.begin(), ranking.end(), 100);
  ranking[2] = 1;
  const std::vector<ItemId> relevant{1, 2, 3, 4, 5};
  const double idcg = 1 + 1 / std::log2(3.0) + 0.5 + 1 / std::log2(5.0) + 1 / std::log2(6.0);
  EXPECT_NEAR(idcg, 2.9485, 1e-4);
  EXPECT_NEAR(ndcg_of_ranking(ranking, relevant, 10), 0.5 / idcg, 1e-12);
  EXPECT_NEAR(ndcg_of_ranking(ranking, relevant, 10), 0.1696, 1e-4);
}

TEST(Ndcg, OracleModelIsPerfect) {
  const auto& w = world();
  EXPECT_NEAR(ndcg_at_k(oracle_model(w.pop), w.pop, *w.split, *w.catalog, 10), 1.0, 1e-12);
  EXPECT_THROW(ndcg_at_k(oracle_model(w.pop), w.pop, *w.split, *w.catalog, 51), ContractError);
}

TEST(Ndcg, BoundsOverRandomModels) {
  const auto& w = world();
  auto eng = RngHandle(5).engine();
  for (int t = 0; t < 30; ++t) {
    std::vector<double> s(100);
    for (double& x : s) x = uniform01(eng);
    const double v = ndcg_at_k(intercept_model(300, s), w.pop, *w.split, *w.catalog, 1 + t % 50);
    ASSERT_GE(v, 0.0);
    ASSERT_LE(v, 1.0);
  }
}

TEST(Metrics, PermutationInvariance) {
  const auto& w = world();
  // Relabel every item id through a random permutation.
  std::vector<ItemId> perm(100);
  std::iota(perm.begin(), perm.end(), 0);
  auto eng = RngHandle(6).engine();
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[uniform_index(eng, i)]);
  const auto map_sorted = [&](const std::vector<ItemId>& xs) {
    std::vector<ItemId> out;
    for (ItemId x : xs) out.push_back(perm[static_cast<std::size_t>(x)]);
    std::sort(out.begin(), out.end());
    return out;
  };
  const auto cat2 = ItemCatalog::from_sets(100, map_sorted(w.catalog->set_a), map_sorted(w.catalog->set_b),
                                           map_sorted(w.catalog->bias_set));
  LatentPopulation pop2 = w.pop;
  for (ItemId i = 0; i < 100; ++i) {
    const auto j = static_cast<std::size_t>(perm[static_cast<std::size_t>(i)]);
    pop2.item_intercepts[j] = w.pop.item_intercepts[static_cast<std::size_t>(i)];
    for (int d = 0; d < 8; ++d) pop2.item_factors[j * 8 + d] = w.pop.item_factors[static_cast<std::size_t>(i) * 8 + d];
  }
  // Treated model: truth with a boost on bias items.
  const auto boosted = [](const LatentPopulation& p, const ItemCatalog& c) {
    TrainedModel m = oracle_model(p);
    for (ItemId b : c.bias_set) m.params.intercept(b) += 0.6;
    return m;
  };
  const auto bias_of = [](const TrainedModel& t, const TrainedModel& c, const UserSplit& s, const ItemCatalog& cat) {
    const auto rt = mean_eval_rank(t, s, cat), rc = mean_eval_rank(c, s, cat);
    double total = 0.0;
    for (ItemId b : cat.bias_set) {
      const auto col = std::lower_bound(cat.set_b.begin(), cat.set_b.end(), b) - cat.set_b.begin();
      total += rc[static_cast<std::size_t>(col)] - rt[static_cast<std::size_t>(col)];
    }
    return total / cat.bias_set.size();
  };
  const double b1 = bias_of(boosted(w.pop, *w.catalog), oracle_model(w.pop), *w.split, *w.catalog);
  const double b2 = bias_of(boosted(pop2, cat2), oracle_model(pop2), *w.split, cat2);
  EXPECT_GT(b1, 0.0);
  EXPECT_NEAR(b1, b2, 1e-12);
  const double n1 = ndcg_at_k(boosted(w.pop, *w.catalog), w.pop, *w.split, *w.catalog, 10);
  const double n2 = ndcg_at_k(boosted(pop2, cat2), pop2, *w.split, cat2, 10);
  EXPECT_NEAR(n1, n2, 1e-12);
}

TEST(Bootstrap, ConstantSamples) {
  const std::vector<double> s(30, 2.5);
  const auto ci = bootstrap_ci(s, 0.95, RngHandle(1));
  EXPECT_EQ(ci.low, 2.5);
  EXPECT_EQ(ci.high, 2.5);
}

TEST(Bootstrap, SymmetricSamplesStraddleZero) {
  std::vector<double> s;
  for (int j = 0; j < 200; ++j) s.push_back(j % 2 ? 1.0 : -1.0);
  const auto ci = bootstrap_ci(s, 0.95, RngHandle(2));
  EXPECT_LT(ci.low, 0.0);
  EXPECT_GT(ci.high, 0.0);
}

TEST(Bootstrap, NormalWidthMatchesAnalytic) {
  auto eng = RngHandle(3).engine();
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> s(100);
  for (double& x : s) x = d(eng);
  const double mean = std::accumulate(s.begin(), s.end(), 0.0) / 100;
  double var = 0.0;
  for (double x : s) var += (x - mean) * (x - mean);
  const double analytic = 2 * 1.959964 * std::sqrt(var / 99) / std::sqrt(100.0);
  const auto ci = bootstrap_ci(s, 0.95, RngHandle(4));
  EXPECT_NEAR(ci.high - ci.low, analytic, 0.2 * analytic);
}

TEST(Bootstrap, DifferenceWidthMatchesWelch) {
  auto eng = RngHandle(5).engine();
  std::normal_distribution<double> d(0.0, 1.0), e(0.5, 2.0);
  std::vector<double> a(100), b(60);
  for (double& x : a) x = d(eng);
  for (double& x : b) x = e(eng);
  const auto var = [](const std::vector<double>& v) {
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return s / static_cast<double>(v.size() - 1);
  };
  const double analytic = 2 * 1.959964 * std::sqrt(var(a) / 100.0 + var(b) / 60.0);
  const auto ci = bootstrap_difference_ci(a, b, 0.95, RngHandle(6));
  EXPECT_NEAR(ci.high - ci.low, analytic, 0.2 * analytic);
}

TEST(Bootstrap, DifferenceCoverageOfIdenticalDistributions) {
  auto eng = RngHandle(7).engine();
  std::normal_distribution<double> d(0.0, 1.0);
  int covered = 0;
  const int trials = 400;
  for (int t = 0; t < trials; ++t) {
    std::vector<double> a(20), b(20);
    for (double& x : a) x = d(eng);
    for (double& x : b) x = d(eng);
    const auto ci = bootstrap_difference_ci(a, b, 0.95, RngHandle(8, static_cast<std::uint64_t>(t)), 1000);
    covered += ci.low <= 0.0 && ci.high >= 0.0;
  }
  // Percentile intervals at n = 20 run slightly narrow; binomial sd at 400 trials is about 1.1%.
  EXPECT_GE(covered, static_cast<int>(0.89 * trials));
  EXPECT_LE(covered, static_cast<int>(0.99 * trials));
}

TEST(Bootstrap, TooFewSamplesIsContractError) {
  EXPECT_THROW(bootstrap_difference_ci(std::vector<double>{1.0, 2.0}, std::vector<double>{1.0}, 0.95, RngHandle(1)),
               ContractError);
  EXPECT_THROW(bootstrap_ci(std::vector<double>{1.0}, 0.95, RngHandle(1)), ContractError);
}

TEST(Stats, KendallTau) {
  const std::vector<double> a{1, 2, 3, 4, 5};
  const std::vector<double> rev{5, 4, 3, 2, 1};
  EXPECT_DOUBLE_EQ(kendall_tau(a, a), 1.0);
  EXPECT_DOUBLE_EQ(kendall_tau(a, rev), -1.0);
  // One discordant pair out of ten.
  const std::vector<double> b{1, 2, 3, 5, 4};
  EXPECT_NEAR(kendall_tau(a, b), 0.8, 1e-15);
  // tau-b with ties: x = (1,1,2), y = (1,2,3): C = 2, D = 0, one x-tie.
  EXPECT_NEAR(kendall_tau(std::vector<double>{1, 1, 2}, std::vector<double>{1, 2, 3}), 2 / std::sqrt(2.0 * 3.0), 1e-15);
}

TEST(Stats, SignTest) {
  EXPECT_NEAR(sign_test_positive(std::vector<double>{1, 2, 3, 4, 5}), 1.0 / 32, 1e-12);
  EXPECT_NEAR(sign_test_positive(std::vector<double>{1, -2, 0}), 0.75, 1e-12);
}
