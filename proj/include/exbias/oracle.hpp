#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "exbias/core.hpp"

namespace exbias {

// Ground-truth preferences of the simulated population:
//   utility(u, i) = intercept[i] + <user_factors[u], item_factors[i]>.
struct LatentPopulation {
  int n_users = 0;
  int n_items = 0;
  int dim = 0;
  std::vector<double> user_factors;  // row-major n_users x dim
  std::vector<double> item_factors;  // row-major n_items x dim
  std::vector<double> item_intercepts;

  std::span<const double> user_row(UserId u) const {
    return {user_factors.data() + static_cast<std::size_t>(u) * dim, static_cast<std::size_t>(dim)};
  }
  std::span<const double> item_row(ItemId i) const {
    return {item_factors.data() + static_cast<std::size_t>(i) * dim, static_cast<std::size_t>(dim)};
  }

  double true_utility(UserId u, ItemId i) const {
    const auto p = user_row(u);
    const auto q = item_row(i);
    double s = item_intercepts[static_cast<std::size_t>(i)];
    for (int f = 0; f < dim; ++f) s += p[f] * q[f];
    return s;
  }
};

struct PopulationScales {
  double factor_sd = -1.0;  // negative: 1/sqrt(dim)
  double intercept_sd = 0.5;
};

inline LatentPopulation sample_population(int n_users, int n_items, int dim, RngHandle rng,
                                          PopulationScales scales = {}) {
  if (dim < 1) throw ConfigError("population dim must be >= 1");
  if (n_users < 1 || n_items < 1) throw ConfigError("population needs at least one user and one item");
  const double fsd = scales.factor_sd < 0.0 ? 1.0 / std::sqrt(static_cast<double>(dim)) : scales.factor_sd;
  LatentPopulation pop;
  pop.n_users = n_users;
  pop.n_items = n_items;
  pop.dim = dim;
  auto eng = rng.engine();
  std::normal_distribution<double> unit(0.0, 1.0);
  // Standard-normal draws scaled afterwards, so a zero sd is legal.
  pop.user_factors.resize(static_cast<std::size_t>(n_users) * dim);
  for (auto& x : pop.user_factors) x = fsd * unit(eng);
  pop.item_factors.resize(static_cast<std::size_t>(n_items) * dim);
  for (auto& x : pop.item_factors) x = fsd * unit(eng);
  pop.item_intercepts.resize(static_cast<std::size_t>(n_items));
  for (auto& x : pop.item_intercepts) x = scales.intercept_sd * unit(eng);
  return pop;
}

enum class BehaviorKind : std::uint8_t { kMnl, kContext };

struct BehaviorSpec {
  BehaviorKind kind = BehaviorKind::kMnl;
  double context_strength = 0.3;  // only read for kContext
};

inline void validate(const BehaviorSpec& b) {
  if (b.kind == BehaviorKind::kContext && !(b.context_strength >= 0.0 && std::isfinite(b.context_strength))) {
    throw ConfigError("context_strength must be a finite value >= 0");
  }
}

// Softmax of the given utilities after the behavior transform. The context
// behavior maps v_j to v_j + strength * sd(v) * (v_j - mean(v)), where mean and
// sd are taken over the slate: wider slates are sharpened more, so odds ratios
// depend on the rest of the slate.
inline std::vector<double> choice_probabilities(std::span<const double> utilities, const BehaviorSpec& behavior) {
  std::vector<double> v(utilities.begin(), utilities.end());
  for (double x : v) {
    if (!std::isfinite(x)) throw std::logic_error("non-finite true utility");
  }
  if (behavior.kind == BehaviorKind::kContext) {
    const double n = static_cast<double>(v.size());
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= n;
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    const double sd = std::sqrt(var / n);
    for (double& x : v) x += behavior.context_strength * sd * (x - mean);
  }
  const double top = *std::max_element(v.begin(), v.end());
  double z = 0.0;
  for (double& x : v) {
    x = std::exp(x - top);
    z += x;
  }
  for (double& x : v) x /= z;
  return v;
}

inline std::vector<double> choice_distribution(const LatentPopulation& pop, UserId user, const Slate& slate,
                                               const BehaviorSpec& behavior) {
  std::vector<double> u;
  u.reserve(slate.items.size());
  for (ItemId i : slate.items) u.push_back(pop.true_utility(user, i));
  return choice_probabilities(u, behavior);
}

struct Session {
  UserId user = 0;
  std::vector<Slate> slates;
};

// One event per (user, slate), in session order.
inline ChoiceLog simulate_choices(const LatentPopulation& pop, std::span<const Session> sessions,
                                  const BehaviorSpec& behavior, RngHandle rng,
                                  std::shared_ptr<const ItemCatalog> catalog,
                                  std::shared_ptr<const UserSplit> split) {
  validate(behavior);
  ChoiceLog log;
  log.catalog = std::move(catalog);
  log.split = std::move(split);
  auto eng = rng.engine();
  for (const Session& s : sessions) {
    if (s.user < 0 || s.user >= pop.n_users) throw ContractError("session user outside population");
    for (const Slate& slate : s.slates) {
      if (log.catalog) validate_slate(slate, *log.catalog);
      const auto p = choice_distribution(pop, s.user, slate, behavior);
      const double r = uniform01(eng);
      double acc = 0.0;
      int pick = static_cast<int>(p.size()) - 1;
      for (std::size_t j = 0; j < p.size(); ++j) {
        acc += p[j];
        if (r < acc) {
          pick = static_cast<int>(j);
          break;
        }
      }
      log.events.push_back(ChoiceEvent{s.user, slate, pick});
    }
  }
  return log;
}

}  // namespace exbias
