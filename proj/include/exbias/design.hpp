#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "exbias/core.hpp"
#include "exbias/oracle.hpp"

namespace exbias {

enum class Experiment : std::uint8_t { kOverexposure, kCompetition };

inline std::string_view to_string(Experiment e) {
  return e == Experiment::kOverexposure ? "overexposure" : "competition";
}

inline Experiment experiment_from_string(std::string_view s) {
  if (s == "overexposure") return Experiment::kOverexposure;
  if (s == "competition") return Experiment::kCompetition;
  throw ConfigError("unknown experiment '" + std::string(s) + "'");
}

struct ExposurePolicy {
  Policy kind = Policy::kUniformB;
  double force_prob = 0.0;  // overexpose_bias only
  int quartile_size = 11;   // compete_* only
};

// Draws slates for every policy over one catalog. Competitor pools are ranked
// once at construction: non-bias set_b items by descending popularity, ties
// by ascending id.
class SlateSampler {
 public:
  SlateSampler(const ItemCatalog& catalog, int slate_size, std::span<const double> popularity = {},
               int quartile_size = 0)
      : catalog_(&catalog), k_(slate_size) {
    if (k_ < 1) throw ConfigError("slate size must be >= 1");
    if (static_cast<std::size_t>(k_) > catalog.set_a.size() || static_cast<std::size_t>(k_) > catalog.set_b.size()) {
      throw ConfigError("slate size exceeds the size of set_a or set_b");
    }
    if (quartile_size > 0) {
      if (quartile_size < k_ - 1) {
        throw ConfigError("quartile_size (" + std::to_string(quartile_size) + ") must be >= slate_size - 1 (" +
                          std::to_string(k_ - 1) + ")");
      }
      if (popularity.size() != static_cast<std::size_t>(catalog.n_items)) {
        throw ConfigError("popularity vector must cover every catalog item");
      }
      std::vector<ItemId> rest;
      for (ItemId i : catalog.set_b) {
        if (!catalog.bias(i)) rest.push_back(i);
      }
      if (static_cast<std::size_t>(quartile_size) > rest.size()) {
        throw ConfigError("quartile_size exceeds the number of non-bias set_b items");
      }
      std::stable_sort(rest.begin(), rest.end(), [&](ItemId a, ItemId b) {
        return popularity[static_cast<std::size_t>(a)] > popularity[static_cast<std::size_t>(b)];
      });
      popular_.assign(rest.begin(), rest.begin() + quartile_size);
      unpopular_.assign(rest.end() - quartile_size, rest.end());
      std::sort(popular_.begin(), popular_.end());
      std::sort(unpopular_.begin(), unpopular_.end());
    }
  }

  int slate_size() const { return k_; }
  const std::vector<ItemId>& popular_pool() const { return popular_; }
  const std::vector<ItemId>& unpopular_pool() const { return unpopular_; }

  Slate sample(const ExposurePolicy& policy, RngHandle::Engine& eng) const {
    const auto k = static_cast<std::size_t>(k_);
    Slate s;
    s.policy = policy.kind;
    switch (policy.kind) {
      case Policy::kUniformA:
        s.items = sample_distinct<ItemId>(catalog_->set_a, k, eng);
        break;
      case Policy::kUniformB:
        s.items = sample_distinct<ItemId>(catalog_->set_b, k, eng);
        break;
      case Policy::kOverexposeBias:
        if (uniform01(eng) < policy.force_prob) {
          const ItemId forced = catalog_->bias_set[uniform_index(eng, catalog_->bias_set.size())];
          std::vector<ItemId> rest;
          rest.reserve(catalog_->set_b.size() - 1);
          for (ItemId i : catalog_->set_b) {
            if (i != forced) rest.push_back(i);
          }
          s.items = sample_distinct<ItemId>(rest, k - 1, eng);
          s.items.insert(std::upper_bound(s.items.begin(), s.items.end(), forced), forced);
        } else {
          s.items = sample_distinct<ItemId>(catalog_->set_b, k, eng);
        }
        break;
      case Policy::kCompetePopular:
      case Policy::kCompeteUnpopular: {
        const auto& pool = policy.kind == Policy::kCompetePopular ? popular_ : unpopular_;
        if (pool.empty()) throw ConfigError("competition slates need a popularity ranking and quartile_size");
        const ItemId target = catalog_->bias_set[uniform_index(eng, catalog_->bias_set.size())];
        s.items = sample_distinct<ItemId>(pool, k - 1, eng);
        s.items.insert(std::upper_bound(s.items.begin(), s.items.end(), target), target);
        break;
      }
    }
    return s;
  }

 private:
  const ItemCatalog* catalog_;
  int k_;
  std::vector<ItemId> popular_;
  std::vector<ItemId> unpopular_;
};

inline Slate sample_slate(const ExposurePolicy& policy, const ItemCatalog& catalog, std::span<const double> popularity,
                          int slate_size, RngHandle rng) {
  const bool compete = policy.kind == Policy::kCompetePopular || policy.kind == Policy::kCompeteUnpopular;
  SlateSampler sampler(catalog, slate_size, popularity, compete ? policy.quartile_size : 0);
  auto eng = rng.engine();
  return sampler.sample(policy, eng);
}

// Expected exposures per slate of a bias item and of a non-bias set_b item
// under overexpose_bias with force probability rho.
struct ExposureRates {
  double bias;
  double other;
};

inline ExposureRates overexposure_rates(double rho, int n_set_b, int n_bias, int k) {
  const double nb = n_set_b;
  const double uniform = k / nb;
  const double fill = (k - 1) / (nb - 1.0);
  return {rho * (1.0 / n_bias + (1.0 - 1.0 / n_bias) * fill) + (1.0 - rho) * uniform,
          rho * fill + (1.0 - rho) * uniform};
}

inline double overexposure_ratio(double rho, int n_set_b, int n_bias, int k) {
  const auto r = overexposure_rates(rho, n_set_b, n_bias, k);
  return r.bias / r.other;
}

// Force probability whose exact exposure ratio (bias vs other set_b items)
// equals target_ratio, by bisection on [0, 1].
inline double solve_force_prob(double target_ratio, const ItemCatalog& catalog, int k) {
  const int nb = static_cast<int>(catalog.set_b.size());
  const int nbias = static_cast<int>(catalog.bias_set.size());
  if (!(target_ratio >= 1.0) || !std::isfinite(target_ratio)) throw ConfigError("target_ratio must be >= 1");
  if (k < 2 || k > nb || nbias >= nb) throw ConfigError("overexposure needs 2 <= k <= |set_b| and non-bias items");
  const double max_ratio = overexposure_ratio(1.0, nb, nbias, k);
  if (target_ratio > max_ratio * (1.0 + 1e-12)) {
    throw ConfigError("target_ratio " + std::to_string(target_ratio) +
                      " is unachievable; maximum achievable ratio is " + std::to_string(max_ratio));
  }
  if (target_ratio <= 1.0) return 0.0;
  double lo = 0.0;
  double hi = 1.0;
  for (int it = 0; it < 200 && hi - lo > 1e-15; ++it) {
    const double mid = 0.5 * (lo + hi);
    (overexposure_ratio(mid, nb, nbias, k) < target_ratio ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

struct SessionCounts {
  int uniform_a = 20;
  int overexposure_block = 10;  // per member: overexpose_bias vs uniform_b
  int competition_anchor = 10;  // uniform_b events shared by both competition members
  int competition_block = 5;    // per member: compete_popular vs compete_unpopular
};

struct DesignParams {
  int slate_size = 4;
  SessionCounts counts;
  double force_prob = 0.0;
  int quartile_size = 11;
};

enum class Role : std::uint8_t { kShared, kTreated, kControl };

inline std::string_view to_string(Role r) {
  switch (r) {
    case Role::kShared: return "shared";
    case Role::kTreated: return "treated";
    case Role::kControl: return "control";
  }
  return "?";
}


struct Block {
  Policy policy;
  Role role;
  int count;
  std::uint64_t stream_tag;  // slates and choices of this block draw from this tag only
};

struct PairPlan {
  Experiment label = Experiment::kOverexposure;
  std::vector<Block> blocks;
};

inline std::uint64_t policy_tag(Policy p) { return 1 + static_cast<std::uint64_t>(p); }

inline PairPlan pair_plan(Experiment e, const SessionCounts& c) {
  PairPlan plan;
  plan.label = e;
  plan.blocks.push_back({Policy::kUniformA, Role::kShared, c.uniform_a, policy_tag(Policy::kUniformA)});
  if (e == Experiment::kOverexposure) {
    plan.blocks.push_back({Policy::kOverexposeBias, Role::kTreated, c.overexposure_block,
                           policy_tag(Policy::kOverexposeBias)});
    plan.blocks.push_back({Policy::kUniformB, Role::kControl, c.overexposure_block, policy_tag(Policy::kUniformB)});
  } else {
    plan.blocks.push_back({Policy::kUniformB, Role::kShared, c.competition_anchor, policy_tag(Policy::kUniformB)});
    plan.blocks.push_back({Policy::kCompetePopular, Role::kTreated, c.competition_block,
                           policy_tag(Policy::kCompetePopular)});
    plan.blocks.push_back({Policy::kCompeteUnpopular, Role::kControl, c.competition_block,
                           policy_tag(Policy::kCompeteUnpopular)});
  }
  return plan;
}

// The plan of experiment `e` with both manipulated blocks replaced by uniform
// set_b exposure. With shared_randomness the two members are identical.
inline PairPlan null_plan(Experiment e, const SessionCounts& c, bool shared_randomness = false) {
  PairPlan plan = pair_plan(e, c);
  for (Block& b : plan.blocks) {
    if (b.role == Role::kShared) continue;
    b.policy = Policy::kUniformB;
    b.stream_tag = shared_randomness ? 100 : (b.role == Role::kTreated ? 101 : 102);
  }
  return plan;
}

struct DatasetPair {
  Experiment label = Experiment::kOverexposure;
  ChoiceLog treated;
  ChoiceLog control;
};

// Competitor popularity: population-mean true utility over training users.
inline std::vector<double> competitor_popularity(const LatentPopulation& pop, const UserSplit& split) {
  std::vector<double> mean(static_cast<std::size_t>(pop.n_items), 0.0);
  for (ItemId i = 0; i < pop.n_items; ++i) {
    double s = 0.0;
    for (UserId u : split.train_users) s += pop.true_utility(u, i);
    mean[static_cast<std::size_t>(i)] = s / static_cast<double>(split.train_users.size());
  }
  return mean;
}

// Simulates every user's session once and compiles both members from it.
// Each (user, block) draws from its own stream, so the members depend only on
// the block definitions and not on their order or labels.
inline DatasetPair build_pair_from_plan(const LatentPopulation& pop, std::shared_ptr<const ItemCatalog> catalog,
                                        std::shared_ptr<const UserSplit> split, const PairPlan& plan,
                                        const DesignParams& design, const BehaviorSpec& behavior, RngHandle rng) {
  validate(behavior);
  const bool needs_popularity = std::any_of(plan.blocks.begin(), plan.blocks.end(), [](const Block& b) {
    return b.policy == Policy::kCompetePopular || b.policy == Policy::kCompeteUnpopular;
  });
  std::vector<double> popularity;
  if (needs_popularity) popularity = competitor_popularity(pop, *split);
  const SlateSampler sampler(*catalog, design.slate_size, popularity, needs_popularity ? design.quartile_size : 0);

  DatasetPair pair;
  pair.label = plan.label;
  pair.treated.catalog = pair.control.catalog = catalog;
  pair.treated.split = pair.control.split = split;
  for (UserId u = 0; u < split->n_users; ++u) {
    const RngHandle user_rng = rng.split(static_cast<std::uint64_t>(u));
    for (const Block& b : plan.blocks) {
      const RngHandle block_rng = user_rng.split(b.stream_tag);
      auto eng = block_rng.split(Purpose::kSlates).engine();
      const ExposurePolicy policy{b.policy, design.force_prob, design.quartile_size};
      Session session{u, {}};
      session.slates.reserve(static_cast<std::size_t>(b.count));
      for (int n = 0; n < b.count; ++n) session.slates.push_back(sampler.sample(policy, eng));
      ChoiceLog block_log = simulate_choices(pop, std::span<const Session>(&session, 1), behavior,
                                             block_rng.split(Purpose::kChoices), nullptr, nullptr);
      if (b.role != Role::kControl) {
        pair.treated.events.insert(pair.treated.events.end(), block_log.events.begin(), block_log.events.end());
      }
      if (b.role != Role::kTreated) {
        pair.control.events.insert(pair.control.events.end(), block_log.events.begin(), block_log.events.end());
      }
    }
  }
  return pair;
}

inline DatasetPair build_pair(const LatentPopulation& pop, std::shared_ptr<const ItemCatalog> catalog,
                              std::shared_ptr<const UserSplit> split, Experiment experiment,
                              const DesignParams& design, const BehaviorSpec& behavior, RngHandle rng) {
  return build_pair_from_plan(pop, std::move(catalog), std::move(split), pair_plan(experiment, design.counts),
                              design, behavior, rng);
}

// Drops every event of an eval user on a set_b slate; eval users' set_a
// events are kept.
inline std::vector<ChoiceEvent> training_view(const ChoiceLog& log, const UserSplit& split,
                                              const ItemCatalog& catalog) {
  std::vector<ChoiceEvent> out;
  out.reserve(log.events.size());
  for (const auto& e : log.events) {
    if (split.eval(e.user) && on_set_b(e.slate, catalog)) continue;
    out.push_back(e);
  }
  return out;
}

inline std::vector<long> exposure_counts(std::span<const ChoiceEvent> events, int n_items) {
  std::vector<long> counts(static_cast<std::size_t>(n_items), 0);
  for (const auto& e : events) {
    for (ItemId i : e.slate.items) ++counts[static_cast<std::size_t>(i)];
  }
  return counts;
}

}  // namespace exbias
