#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "exbias/rng.hpp"

namespace exbias {

using ItemId = std::int32_t;
using UserId = std::int32_t;

// Invalid configuration; the CLI maps this to exit code 2.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A caller broke a documented precondition.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// Optimization produced a non-finite loss. `index` is the epoch (from fit) or
// the event index (from loss evaluation).
struct TrainingError : std::runtime_error {
  TrainingError(const std::string& what, long index) : std::runtime_error(what), index(index) {}
  long index;
};

enum class Side : std::uint8_t { kA, kB };

struct ItemCatalog {
  int n_items = 0;
  std::vector<ItemId> set_a;
  std::vector<ItemId> set_b;
  std::vector<ItemId> bias_set;
  std::vector<Side> side;       // indexed by item id
  std::vector<bool> is_bias;    // indexed by item id

  bool contains(ItemId i) const { return i >= 0 && i < n_items; }
  bool in_a(ItemId i) const { return side[static_cast<std::size_t>(i)] == Side::kA; }
  bool in_b(ItemId i) const { return side[static_cast<std::size_t>(i)] == Side::kB; }
  bool bias(ItemId i) const { return is_bias[static_cast<std::size_t>(i)]; }

  // Builds lookup tables and checks every invariant; throws ConfigError.
  static ItemCatalog from_sets(int n_items, std::vector<ItemId> set_a, std::vector<ItemId> set_b,
                               std::vector<ItemId> bias_set);
};

struct UserSplit {
  int n_users = 0;
  std::vector<UserId> train_users;
  std::vector<UserId> eval_users;
  std::vector<bool> is_eval;  // indexed by user id

  bool contains(UserId u) const { return u >= 0 && u < n_users; }
  bool eval(UserId u) const { return is_eval[static_cast<std::size_t>(u)]; }

  static UserSplit from_sets(int n_users, std::vector<UserId> train, std::vector<UserId> eval);
};

enum class Policy : std::uint8_t {
  kUniformA,
  kUniformB,
  kOverexposeBias,
  kCompetePopular,
  kCompeteUnpopular,
};

inline std::string_view to_string(Policy p) {
  switch (p) {
    case Policy::kUniformA: return "uniform_a";
    case Policy::kUniformB: return "uniform_b";
    case Policy::kOverexposeBias: return "overexpose_bias";
    case Policy::kCompetePopular: return "compete_popular";
    case Policy::kCompeteUnpopular: return "compete_unpopular";
  }
  return "?";
}

inline Policy policy_from_string(std::string_view s) {
  for (Policy p : {Policy::kUniformA, Policy::kUniformB, Policy::kOverexposeBias,
                   Policy::kCompetePopular, Policy::kCompeteUnpopular}) {
    if (to_string(p) == s) return p;
  }
  throw ConfigError("unknown policy '" + std::string(s) + "'");
}

struct Slate {
  std::vector<ItemId> items;  // ascending ids
  Policy policy = Policy::kUniformA;

  friend bool operator==(const Slate&, const Slate&) = default;
};

struct ChoiceEvent {
  UserId user = 0;
  Slate slate;
  int chosen_index = 0;

  ItemId chosen() const { return slate.items[static_cast<std::size_t>(chosen_index)]; }
  friend bool operator==(const ChoiceEvent&, const ChoiceEvent&) = default;
};

struct ChoiceLog {
  std::vector<ChoiceEvent> events;
  std::shared_ptr<const ItemCatalog> catalog;
  std::shared_ptr<const UserSplit> split;
};

// True iff every item of the slate lies in set_b.
inline bool on_set_b(const Slate& s, const ItemCatalog& c) {
  return std::all_of(s.items.begin(), s.items.end(), [&](ItemId i) { return c.in_b(i); });
}

inline void validate_slate(const Slate& s, const ItemCatalog& c) {
  if (s.items.empty()) throw ContractError("empty slate");
  for (std::size_t j = 0; j < s.items.size(); ++j) {
    if (!c.contains(s.items[j])) {
      throw ContractError("slate item " + std::to_string(s.items[j]) + " outside catalog");
    }
    if (j > 0 && s.items[j] <= s.items[j - 1]) {
      throw ContractError("slate items must be distinct and ascending");
    }
  }
  const Side side = c.side[static_cast<std::size_t>(s.items.front())];
  for (ItemId i : s.items) {
    if (c.side[static_cast<std::size_t>(i)] != side) throw ContractError("slate mixes set_a and set_b");
  }
}

inline void validate_event(const ChoiceEvent& e, const ItemCatalog& c, const UserSplit& u) {
  if (!u.contains(e.user)) throw ContractError("event user " + std::to_string(e.user) + " outside split");
  validate_slate(e.slate, c);
  if (e.chosen_index < 0 || e.chosen_index >= static_cast<int>(e.slate.items.size())) {
    throw ContractError("chosen_index out of range");
  }
}

inline void validate(const ChoiceLog& log) {
  if (!log.catalog || !log.split) throw ContractError("choice log without catalog or split");
  for (const auto& e : log.events) validate_event(e, *log.catalog, *log.split);
}

// k distinct elements of `pool`, uniformly, returned in ascending order.
template <class T>
std::vector<T> sample_distinct(std::span<const T> pool, std::size_t k, RngHandle::Engine& eng) {
  if (k > pool.size()) throw ContractError("cannot draw more items than the pool holds");
  std::vector<T> work(pool.begin(), pool.end());
  for (std::size_t j = 0; j < k; ++j) {
    const std::size_t r = j + uniform_index(eng, work.size() - j);
    std::swap(work[j], work[r]);
  }
  work.resize(k);
  std::sort(work.begin(), work.end());
  return work;
}

inline ItemCatalog ItemCatalog::from_sets(int n_items, std::vector<ItemId> set_a,
                                          std::vector<ItemId> set_b, std::vector<ItemId> bias_set) {
  if (n_items < 2) throw ConfigError("n_items must be at least 2");
  if (set_a.empty() || set_b.empty()) throw ConfigError("set_a and set_b must be non-empty");
  if (bias_set.empty()) throw ConfigError("bias_set must contain at least one item");
  auto ascending = [](const std::vector<ItemId>& v) {
    return std::adjacent_find(v.begin(), v.end(), std::greater_equal<>()) == v.end();
  };
  if (!ascending(set_a) || !ascending(set_b) || !ascending(bias_set)) {
    throw ConfigError("catalog id lists must be strictly increasing");
  }
  ItemCatalog c;
  c.n_items = n_items;
  c.side.assign(static_cast<std::size_t>(n_items), Side::kA);
  c.is_bias.assign(static_cast<std::size_t>(n_items), false);
  std::vector<int> seen(static_cast<std::size_t>(n_items), 0);
  for (ItemId i : set_a) {
    if (i < 0 || i >= n_items) throw ConfigError("set_a id out of range");
    ++seen[static_cast<std::size_t>(i)];
  }
  for (ItemId i : set_b) {
    if (i < 0 || i >= n_items) throw ConfigError("set_b id out of range");
    ++seen[static_cast<std::size_t>(i)];
    c.side[static_cast<std::size_t>(i)] = Side::kB;
  }
  if (std::any_of(seen.begin(), seen.end(), [](int s) { return s != 1; })) {
    throw ConfigError("set_a and set_b must partition 0..n_items-1");
  }
  for (ItemId i : bias_set) {
    if (i < 0 || i >= n_items || c.side[static_cast<std::size_t>(i)] != Side::kB) {
      throw ConfigError("bias_set must be a subset of set_b");
    }
    c.is_bias[static_cast<std::size_t>(i)] = true;
  }
  c.set_a = std::move(set_a);
  c.set_b = std::move(set_b);
  c.bias_set = std::move(bias_set);
  return c;
}

inline UserSplit UserSplit::from_sets(int n_users, std::vector<UserId> train, std::vector<UserId> eval) {
  if (train.empty() || eval.empty()) throw ConfigError("train and eval user sets must be non-empty");
  UserSplit s;
  s.n_users = n_users;
  s.is_eval.assign(static_cast<std::size_t>(n_users), false);
  std::vector<int> seen(static_cast<std::size_t>(n_users), 0);
  for (UserId u : train) {
    if (u < 0 || u >= n_users) throw ConfigError("train user id out of range");
    ++seen[static_cast<std::size_t>(u)];
  }
  for (UserId u : eval) {
    if (u < 0 || u >= n_users) throw ConfigError("eval user id out of range");
    ++seen[static_cast<std::size_t>(u)];
    s.is_eval[static_cast<std::size_t>(u)] = true;
  }
  if (std::any_of(seen.begin(), seen.end(), [](int k) { return k != 1; })) {
    throw ConfigError("train and eval users must partition 0..n_users-1");
  }
  std::sort(train.begin(), train.end());
  std::sort(eval.begin(), eval.end());
  s.train_users = std::move(train);
  s.eval_users = std::move(eval);
  return s;
}

// Uniform random partition of 0..n_items-1 into set_a (size_a) and set_b;
// the bias set is a uniform subset of set_b.
inline ItemCatalog build_catalog(int n_items, int size_a, int n_bias, RngHandle rng) {
  if (size_a < 1 || size_a >= n_items) {
    throw ConfigError("size_a must satisfy 1 <= size_a < n_items (got size_a=" + std::to_string(size_a) +
                      ", n_items=" + std::to_string(n_items) + ")");
  }
  if (n_bias < 1 || n_bias > n_items - size_a) {
    throw ConfigError("n_bias must satisfy 1 <= n_bias <= n_items - size_a (got " + std::to_string(n_bias) + ")");
  }
  auto eng = rng.engine();
  std::vector<ItemId> all(static_cast<std::size_t>(n_items));
  std::iota(all.begin(), all.end(), 0);
  std::vector<ItemId> set_a = sample_distinct<ItemId>(all, static_cast<std::size_t>(size_a), eng);
  std::vector<ItemId> set_b;
  std::set_difference(all.begin(), all.end(), set_a.begin(), set_a.end(), std::back_inserter(set_b));
  std::vector<ItemId> bias = sample_distinct<ItemId>(set_b, static_cast<std::size_t>(n_bias), eng);
  return ItemCatalog::from_sets(n_items, std::move(set_a), std::move(set_b), std::move(bias));
}

// |eval| = round(eval_fraction * n_users), drawn uniformly.
inline UserSplit partition_users(int n_users, double eval_fraction, RngHandle rng) {
  if (!(eval_fraction > 0.0 && eval_fraction < 1.0)) {
    throw ConfigError("eval_fraction must lie strictly between 0 and 1");
  }
  const long n_eval = std::lround(eval_fraction * n_users);
  if (n_eval < 1 || n_eval >= n_users) {
    throw ConfigError("user split leaves one side empty (n_users=" + std::to_string(n_users) +
                      ", eval_fraction=" + std::to_string(eval_fraction) + ")");
  }
  auto eng = rng.engine();
  std::vector<UserId> all(static_cast<std::size_t>(n_users));
  std::iota(all.begin(), all.end(), 0);
  std::vector<UserId> eval = sample_distinct<UserId>(all, static_cast<std::size_t>(n_eval), eng);
  std::vector<UserId> train;
  std::set_difference(all.begin(), all.end(), eval.begin(), eval.end(), std::back_inserter(train));
  return UserSplit::from_sets(n_users, std::move(train), std::move(eval));
}

}  // namespace exbias
