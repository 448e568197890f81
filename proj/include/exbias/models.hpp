#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "exbias/core.hpp"

namespace exbias {

enum class ModelKind : std::uint8_t { kMnl, kGev, kBl, kBpr, kIpsBpr, kPopularity, kRandom };

inline constexpr std::array<ModelKind, 7> kAllModelKinds = {ModelKind::kMnl,    ModelKind::kGev,        ModelKind::kBl,
                                                            ModelKind::kBpr,    ModelKind::kIpsBpr,     ModelKind::kPopularity,
                                                            ModelKind::kRandom};

inline std::string_view to_string(ModelKind k) {
  switch (k) {
    case ModelKind::kMnl: return "mnl";
    case ModelKind::kGev: return "gev";
    case ModelKind::kBl: return "bl";
    case ModelKind::kBpr: return "bpr";
    case ModelKind::kIpsBpr: return "ips_bpr";
    case ModelKind::kPopularity: return "popularity";
    case ModelKind::kRandom: return "random";
  }
  return "?";
}

inline ModelKind model_kind_from_string(std::string_view s) {
  for (ModelKind k : kAllModelKinds) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown model kind '" + std::string(s) + "'");
}

// Kinds fitted by gradient descent on a loss.
inline bool is_parametric(ModelKind k) { return k != ModelKind::kPopularity && k != ModelKind::kRandom; }
inline bool uses_negatives(ModelKind k) { return k == ModelKind::kBpr || k == ModelKind::kIpsBpr; }
// Loss depends on the whole slate jointly.
inline bool is_multivariate(ModelKind k) { return k == ModelKind::kMnl || k == ModelKind::kGev; }

struct NestStructure {
  int n_nests = 1;
  std::vector<int> assignment;  // item id -> nest id
  bool pin_unit_scales = false; // every lambda fixed at 1 (plain MNL)
};

// Random partition of the catalog into n_nests non-empty nests.
inline NestStructure random_nests(int n_items, int n_nests, RngHandle rng) {
  if (n_nests < 1 || n_nests > n_items) throw ConfigError("n_nests must satisfy 1 <= n_nests <= n_items");
  std::vector<int> labels(static_cast<std::size_t>(n_items));
  for (int i = 0; i < n_items; ++i) labels[static_cast<std::size_t>(i)] = i % n_nests;
  auto eng = rng.engine();
  for (std::size_t i = labels.size(); i > 1; --i) std::swap(labels[i - 1], labels[uniform_index(eng, i)]);
  return NestStructure{n_nests, std::move(labels), false};
}

inline void validate(const NestStructure& n, int n_items) {
  if (static_cast<int>(n.assignment.size()) != n_items) throw ConfigError("nest assignment must cover every item");
  std::vector<int> size(static_cast<std::size_t>(n.n_nests), 0);
  for (int m : n.assignment) {
    if (m < 0 || m >= n.n_nests) throw ConfigError("nest id out of range");
    ++size[static_cast<std::size_t>(m)];
  }
  if (std::find(size.begin(), size.end(), 0) != size.end()) throw ConfigError("every nest must be non-empty");
}

// All learned quantities in one flat buffer:
//   [user factors | item factors | intercepts | nest logits | bl offset]
// so optimizers and finite differences can treat them uniformly.
struct ModelParams {
  int n_users = 0;
  int n_items = 0;
  int dim = 0;
  int n_nests = 0;
  std::vector<double> values;

  ModelParams() = default;
  ModelParams(int users, int items, int d, int nests)
      : n_users(users), n_items(items), dim(d), n_nests(nests),
        values(static_cast<std::size_t>(users) * d + static_cast<std::size_t>(items) * (d + 1) + nests + 1, 0.0) {}

  std::size_t item_factor_offset() const { return static_cast<std::size_t>(n_users) * dim; }
  std::size_t intercept_offset() const { return item_factor_offset() + static_cast<std::size_t>(n_items) * dim; }
  std::size_t nest_offset() const { return intercept_offset() + static_cast<std::size_t>(n_items); }
  std::size_t offset_index() const { return nest_offset() + static_cast<std::size_t>(n_nests); }

  double* user(UserId u) { return values.data() + static_cast<std::size_t>(u) * dim; }
  const double* user(UserId u) const { return values.data() + static_cast<std::size_t>(u) * dim; }
  double* item(ItemId i) { return values.data() + item_factor_offset() + static_cast<std::size_t>(i) * dim; }
  const double* item(ItemId i) const { return values.data() + item_factor_offset() + static_cast<std::size_t>(i) * dim; }
  double& intercept(ItemId i) { return values[intercept_offset() + static_cast<std::size_t>(i)]; }
  double intercept(ItemId i) const { return values[intercept_offset() + static_cast<std::size_t>(i)]; }
  double& nest_logit(int m) { return values[nest_offset() + static_cast<std::size_t>(m)]; }
  double nest_logit(int m) const { return values[nest_offset() + static_cast<std::size_t>(m)]; }
  double& bl_offset() { return values[offset_index()]; }
  double bl_offset() const { return values[offset_index()]; }

  std::span<double> factor_block() { return {values.data(), intercept_offset()}; }
  std::span<const double> factor_block() const { return {values.data(), intercept_offset()}; }
};

inline double dot(const double* a, const double* b, int d) {
  double s = 0.0;
  for (int f = 0; f < d; ++f) s += a[f] * b[f];
  return s;
}

// Dimension-specialized kernels: D > 0 fixes the latent dimension at compile
// time, D == 0 reads it at run time.
template <int D>
inline double dot_n(const double* __restrict a, const double* __restrict b, int d) {
  if constexpr (D > 0) d = D;
  double s = 0.0;
  for (int f = 0; f < d; ++f) s += a[f] * b[f];
  return s;
}

template <int D>
inline void axpy_n(double g, const double* __restrict x, double* __restrict y, int d) {
  if constexpr (D > 0) d = D;
  for (int f = 0; f < d; ++f) y[f] += g * x[f];
}

// softplus(x) and logistic(x) from a single exp.
struct SoftplusLogistic {
  double softplus;
  double logistic;
};

inline SoftplusLogistic softplus_logistic(double x) {
  const double e = std::exp(-std::abs(x));
  const double lg = std::log1p(e);
  if (x >= 0) return {x + lg, 1.0 / (1.0 + e)};
  return {lg, e / (1.0 + e)};
}

inline double score(const ModelParams& p, UserId u, ItemId i) { return p.intercept(i) + dot(p.user(u), p.item(i), p.dim); }

inline double logistic(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// log(1 + exp(x)) without overflow.
inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

// Nest scales live in [kNestScaleFloor, 1): lambda = f + (1 - f) * logistic(x + log(1 - 2f)),
// so a zero pre-image still maps to 0.5.
inline constexpr double kNestScaleFloor = 0.1;

inline double nest_scale_from_logit(double x) {
  return kNestScaleFloor + (1.0 - kNestScaleFloor) * logistic(x + std::log(1.0 - 2.0 * kNestScaleFloor));
}

// d lambda / d x expressed through lambda itself.
inline double nest_scale_slope(double lambda) {
  const double s = (lambda - kNestScaleFloor) / (1.0 - kNestScaleFloor);
  return (1.0 - kNestScaleFloor) * s * (1.0 - s);
}

inline double nest_scale(const ModelParams& p, const NestStructure& n, int m) {
  return n.pin_unit_scales ? 1.0 : nest_scale_from_logit(p.nest_logit(m));
}

inline constexpr double kPropensityFloor = 1e-3;

// Fraction of events whose slate contains each item.
inline std::vector<double> exposure_propensity(std::span<const ChoiceEvent> events, int n_items) {
  std::vector<double> prop(static_cast<std::size_t>(n_items), 0.0);
  if (events.empty()) return prop;
  for (const auto& e : events) {
    for (ItemId i : e.slate.items) prop[static_cast<std::size_t>(i)] += 1.0;
  }
  for (double& x : prop) x /= static_cast<double>(events.size());
  return prop;
}

// Per-user sets of items chosen anywhere in the training events; negatives
// are drawn uniformly from the complement.
class NegativeSampler {
 public:
  NegativeSampler(std::span<const ChoiceEvent> events, int n_users, int n_items) : n_items_(n_items) {
    chosen_.resize(static_cast<std::size_t>(n_users));
    for (const auto& e : events) chosen_[static_cast<std::size_t>(e.user)].push_back(e.chosen());
    for (auto& c : chosen_) {
      std::sort(c.begin(), c.end());
      c.erase(std::unique(c.begin(), c.end()), c.end());
      if (static_cast<int>(c.size()) >= n_items_) throw ContractError("user chose every item; no negatives exist");
    }
  }

  ItemId draw(UserId u, RngHandle::Engine& eng) const {
    const auto& c = chosen_[static_cast<std::size_t>(u)];
    for (;;) {
      const auto i = static_cast<ItemId>(uniform_index(eng, static_cast<std::size_t>(n_items_)));
      if (!std::binary_search(c.begin(), c.end(), i)) return i;
    }
  }

 private:
  int n_items_;
  std::vector<std::vector<ItemId>> chosen_;
};

namespace detail {

// Scratch buffers reused across events.
struct Workspace {
  std::vector<ItemId> items;
  std::vector<double> s;   // scores
  std::vector<double> ds;  // dLoss/dscore
  std::vector<int> nest_of;
  std::vector<int> nests;  // distinct nests present, in first-seen order
  std::vector<double> lambda, incl, pnest, shat, z;
};

inline double mnl_terms(std::span<const double> s, int chosen, std::span<double> ds) {
  const double top = *std::max_element(s.begin(), s.end());
  double z = 0.0;
  for (std::size_t j = 0; j < s.size(); ++j) {
    ds[j] = std::exp(s[j] - top);
    z += ds[j];
  }
  for (std::size_t j = 0; j < s.size(); ++j) ds[j] /= z;
  ds[static_cast<std::size_t>(chosen)] -= 1.0;
  return top + std::log(z) - s[static_cast<std::size_t>(chosen)];
}

// Two-level nested logit. Returns the loss and fills ds; when grad is set,
// adds weight * dLoss/dtheta to the nest-logit entries.
inline double gev_terms(Workspace& w, const ModelParams& p, const NestStructure& ns, int chosen, double weight,
                        ModelParams* grad) {
  const std::size_t k = w.s.size();
  w.nest_of.resize(k);
  w.nests.clear();
  for (std::size_t j = 0; j < k; ++j) {
    const int m = ns.assignment[static_cast<std::size_t>(w.items[j])];
    auto it = std::find(w.nests.begin(), w.nests.end(), m);
    w.nest_of[j] = static_cast<int>(it - w.nests.begin());
    if (it == w.nests.end()) w.nests.push_back(m);
  }
  const std::size_t nn = w.nests.size();
  w.lambda.assign(nn, 1.0);
  w.incl.assign(nn, -std::numeric_limits<double>::infinity());
  w.pnest.assign(nn, 0.0);
  w.shat.assign(nn, 0.0);
  for (std::size_t a = 0; a < nn; ++a) w.lambda[a] = nest_scale(p, ns, w.nests[a]);

  // Inclusive values I_m = log sum_{j in m} exp(s_j / lambda_m).
  std::vector<double>& top = w.pnest;  // reused as per-nest max before it holds P(m)
  top.assign(nn, -std::numeric_limits<double>::infinity());
  for (std::size_t j = 0; j < k; ++j) {
    const auto a = static_cast<std::size_t>(w.nest_of[j]);
    top[a] = std::max(top[a], w.s[j] / w.lambda[a]);
  }
  std::vector<double>& z = w.z;
  z.assign(nn, 0.0);
  for (std::size_t j = 0; j < k; ++j) {
    const auto a = static_cast<std::size_t>(w.nest_of[j]);
    w.ds[j] = std::exp(w.s[j] / w.lambda[a] - top[a]);  // unnormalized P(j|m)
    z[a] += w.ds[j];
  }
  for (std::size_t a = 0; a < nn; ++a) w.incl[a] = top[a] + std::log(z[a]);
  for (std::size_t j = 0; j < k; ++j) {
    const auto a = static_cast<std::size_t>(w.nest_of[j]);
    w.ds[j] /= z[a];  // P(j|m)
    w.shat[a] += w.ds[j] * w.s[j];
  }
  double vmax = -std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < nn; ++a) vmax = std::max(vmax, w.lambda[a] * w.incl[a]);
  double zz = 0.0;
  for (std::size_t a = 0; a < nn; ++a) {
    w.pnest[a] = std::exp(w.lambda[a] * w.incl[a] - vmax);
    zz += w.pnest[a];
  }
  const double log_denom = vmax + std::log(zz);
  for (std::size_t a = 0; a < nn; ++a) w.pnest[a] /= zz;

  const auto c = static_cast<std::size_t>(chosen);
  const auto mc = static_cast<std::size_t>(w.nest_of[c]);
  const double lc = w.lambda[mc];
  const double loss = -(w.s[c] / lc + (lc - 1.0) * w.incl[mc] - log_denom);

  if (grad != nullptr && !ns.pin_unit_scales) {
    for (std::size_t a = 0; a < nn; ++a) {
      const double la = w.lambda[a];
      double dlogp = -w.pnest[a] * (w.incl[a] - w.shat[a] / la);
      if (a == mc) dlogp += -w.s[c] / (la * la) + w.incl[a] - (la - 1.0) * w.shat[a] / (la * la);
      grad->nest_logit(w.nests[a]) += weight * (-dlogp) * nest_scale_slope(la);
    }
  }
  for (std::size_t j = 0; j < k; ++j) {
    const auto a = static_cast<std::size_t>(w.nest_of[j]);
    const double pj = w.ds[j];
    double dlogp = -w.pnest[a] * pj;
    if (a == mc) dlogp += (lc - 1.0) / lc * pj;
    if (j == c) dlogp += 1.0 / lc;
    w.ds[j] = -dlogp;
  }
  return loss;
}

// Loss of one event; when grad is set, adds weight * dLoss/dparams to it.
template <int D = 0>
inline double event_terms(Workspace& w, ModelKind kind, const ModelParams& p, const ChoiceEvent& e,
                          const NestStructure& ns, std::span<const double> propensity,
                          std::span<const ItemId> negatives, double weight, ModelParams* grad) {
  const UserId u = e.user;
  const double* pu = p.user(u);
  double loss = 0.0;
  w.items.clear();
  if (uses_negatives(kind)) {
    w.items.push_back(e.chosen());
    w.items.insert(w.items.end(), negatives.begin(), negatives.end());
  } else {
    w.items.assign(e.slate.items.begin(), e.slate.items.end());
  }
  const std::size_t k = w.items.size();
  w.s.resize(k);
  w.ds.resize(k);
  for (std::size_t j = 0; j < k; ++j) w.s[j] = p.intercept(w.items[j]) + dot_n<D>(pu, p.item(w.items[j]), p.dim);

  switch (kind) {
    case ModelKind::kMnl:
      loss = mnl_terms(w.s, e.chosen_index, w.ds);
      break;
    case ModelKind::kGev:
      loss = gev_terms(w, p, ns, e.chosen_index, weight, grad);
      break;
    case ModelKind::kBl: {
      const double off = p.bl_offset();
      double doff = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        const double zj = w.s[j] + off;
        const double y = static_cast<int>(j) == e.chosen_index ? 1.0 : 0.0;
        const auto sl = softplus_logistic(zj);
        loss += sl.softplus - y * zj;
        w.ds[j] = sl.logistic - y;
        doff += w.ds[j];
      }
      if (grad != nullptr) grad->bl_offset() += weight * doff;
      break;
    }
    case ModelKind::kBpr:
    case ModelKind::kIpsBpr: {
      double ips = 1.0;
      if (kind == ModelKind::kIpsBpr) {
        ips = 1.0 / std::max(propensity[static_cast<std::size_t>(e.chosen())], kPropensityFloor);
      }
      w.ds[0] = 0.0;
      for (std::size_t j = 1; j < k; ++j) {
        const auto sl = softplus_logistic(w.s[j] - w.s[0]);
        loss += ips * sl.softplus;
        const double g = ips * sl.logistic;
        w.ds[0] -= g;
        w.ds[j] = g;
      }
      break;
    }
    case ModelKind::kPopularity:
    case ModelKind::kRandom:
      throw ContractError(std::string("model kind '") + std::string(to_string(kind)) + "' has no loss");
  }

  if (grad != nullptr) {
    double* gu = grad->user(u);
    for (std::size_t j = 0; j < k; ++j) {
      const double g = weight * w.ds[j];
      if (g == 0.0) continue;
      const ItemId i = w.items[j];
      grad->intercept(i) += g;
      axpy_n<D>(g, p.item(i), gu, p.dim);
      axpy_n<D>(g, pu, grad->item(i), p.dim);
    }
  }
  return loss;
}

inline void check_loss_inputs(ModelKind kind, std::span<const double> propensity, std::span<const ItemId> negatives,
                              bool negatives_supplied) {
  if (uses_negatives(kind) && (!negatives_supplied || negatives.empty())) {
    throw ContractError(std::string(to_string(kind)) + " loss requires negatives");
  }
  if (kind == ModelKind::kIpsBpr && propensity.empty()) throw ContractError("ips_bpr loss requires a propensity vector");
}

}  // namespace detail

// Negative log-likelihood (or ranking loss) of one event.
inline double event_loss(ModelKind kind, const ModelParams& params, const ChoiceEvent& event, const NestStructure& nests,
                         std::span<const double> propensity = {}, std::span<const ItemId> negatives = {}) {
  detail::check_loss_inputs(kind, propensity, negatives, !negatives.empty());
  detail::Workspace w;
  return detail::event_terms(w, kind, params, event, nests, propensity, negatives, 1.0, nullptr);
}

struct LossOptions {
  int n_negatives = 4;
  const NegativeSampler* sampler = nullptr;  // built from the batch when null
};

// Mean event loss plus reg * (|user factors|^2 + |item factors|^2). Writes the
// gradient into `grad` (resized and zeroed) when it is non-null.
inline double evaluate_loss(ModelKind kind, const ModelParams& params, std::span<const ChoiceEvent> batch, double reg,
                            const NestStructure& nests, std::span<const double> propensity, RngHandle rng,
                            const LossOptions& opts, ModelParams* grad) {
  if (batch.empty()) throw ContractError("loss evaluation needs a non-empty batch");
  if (!is_parametric(kind)) {
    throw ContractError(std::string("model kind '") + std::string(to_string(kind)) + "' has no loss");
  }
  if (kind == ModelKind::kIpsBpr && propensity.size() != static_cast<std::size_t>(params.n_items)) {
    throw ContractError("ips_bpr loss requires a propensity vector over all items");
  }
  if (kind == ModelKind::kGev && static_cast<int>(nests.assignment.size()) != params.n_items) {
    throw ContractError("gev loss requires a nest assignment over all items");
  }
  if (grad != nullptr) {
    if (grad->values.size() != params.values.size()) *grad = ModelParams(params.n_users, params.n_items, params.dim, params.n_nests);
    std::fill(grad->values.begin(), grad->values.end(), 0.0);
  }
  std::optional<NegativeSampler> local;
  const NegativeSampler* sampler = opts.sampler;
  if (uses_negatives(kind) && sampler == nullptr) {
    local.emplace(batch, params.n_users, params.n_items);
    sampler = &*local;
  }
  auto eng = rng.engine();
  std::vector<ItemId> negs(uses_negatives(kind) ? static_cast<std::size_t>(std::max(opts.n_negatives, 1)) : 0);

  detail::Workspace w;
  const double weight = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const ChoiceEvent& e = batch[n];
    for (auto& x : negs) x = sampler->draw(e.user, eng);
    const double l = params.dim == 8 ? detail::event_terms<8>(w, kind, params, e, nests, propensity, negs, weight, grad)
                                     : detail::event_terms<0>(w, kind, params, e, nests, propensity, negs, weight, grad);
    if (!std::isfinite(l)) {
      throw TrainingError("non-finite loss at event " + std::to_string(n), static_cast<long>(n));
    }
    total += l;
  }
  double loss = total * weight;
  const auto factors = params.factor_block();
  double sq = 0.0;
  for (double x : factors) sq += x * x;
  loss += reg * sq;
  if (grad != nullptr) {
    auto gf = grad->factor_block();
    for (std::size_t j = 0; j < factors.size(); ++j) gf[j] += 2.0 * reg * factors[j];
  }
  if (!std::isfinite(loss)) throw TrainingError("non-finite loss", -1);
  return loss;
}

struct LossAndGradient {
  double loss = 0.0;
  ModelParams grad;
};

inline LossAndGradient loss_and_gradient(ModelKind kind, const ModelParams& params, std::span<const ChoiceEvent> batch,
                                         double reg, const NestStructure& nests, std::span<const double> propensity,
                                         RngHandle rng, const LossOptions& opts = {}) {
  LossAndGradient out;
  out.grad = ModelParams(params.n_users, params.n_items, params.dim, params.n_nests);
  out.loss = evaluate_loss(kind, params, batch, reg, nests, propensity, rng, opts, &out.grad);
  return out;
}

// Descending score; ties by ascending item id.
inline std::vector<ItemId> predict_ranking(const ModelParams& params, UserId user, std::span<const ItemId> items) {
  if (items.empty()) throw ContractError("predict_ranking needs at least one item");
  std::vector<std::pair<double, ItemId>> scored;
  scored.reserve(items.size());
  for (ItemId i : items) scored.emplace_back(score(params, user, i), i);
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  std::vector<ItemId> out;
  out.reserve(items.size());
  for (const auto& [s, i] : scored) out.push_back(i);
  return out;
}

}  // namespace exbias
