#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "exbias/models.hpp"

namespace exbias {

struct HyperParams {
  int dim = 8;
  double learning_rate = 0.05;
  int epochs = 300;
  double reg = 1e-4;
  int minibatch_size = 0;  // 0 = full batch
  int n_negatives = 4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double init_sd = 0.01;
  std::uint64_t negative_stream = 0;  // selects the negative-sampling sub-stream only
};

inline void validate(const HyperParams& h) {
  if (h.dim < 1) throw ConfigError("hyper.dim must be >= 1");
  if (!(h.learning_rate > 0.0)) throw ConfigError("hyper.learning_rate must be > 0");
  if (h.epochs < 1) throw ConfigError("hyper.epochs must be >= 1");
  if (!(h.reg >= 0.0)) throw ConfigError("hyper.reg must be >= 0");
  if (h.minibatch_size < 0) throw ConfigError("hyper.minibatch_size must be >= 0");
  if (h.n_negatives < 1) throw ConfigError("hyper.n_negatives must be >= 1");
  if (!(h.beta1 >= 0.0 && h.beta1 < 1.0 && h.beta2 >= 0.0 && h.beta2 < 1.0)) {
    throw ConfigError("hyper.beta1 and hyper.beta2 must lie in [0, 1)");
  }
  if (!(h.adam_eps > 0.0)) throw ConfigError("hyper.adam_eps must be > 0");
  if (!(h.init_sd >= 0.0)) throw ConfigError("hyper.init_sd must be >= 0");
}

struct TrainedModel {
  ModelKind kind = ModelKind::kMnl;
  ModelParams params;
  double final_loss = 0.0;
  std::vector<double> loss_trace;
};

struct ProblemShape {
  int n_users = 0;
  int n_items = 0;
};

class Adam {
 public:
  Adam(std::size_t n, const HyperParams& h) : m_(n, 0.0), v_(n, 0.0), h_(h) {}

  void step(std::span<double> x, std::span<const double> g) {
    ++t_;
    const double c1 = 1.0 - std::pow(h_.beta1, t_);
    const double c2 = 1.0 - std::pow(h_.beta2, t_);
    for (std::size_t j = 0; j < x.size(); ++j) {
      m_[j] = h_.beta1 * m_[j] + (1.0 - h_.beta1) * g[j];
      v_[j] = h_.beta2 * v_[j] + (1.0 - h_.beta2) * g[j] * g[j];
      x[j] -= h_.learning_rate * (m_[j] / c1) / (std::sqrt(v_[j] / c2) + h_.adam_eps);
    }
  }

 private:
  std::vector<double> m_, v_;
  HyperParams h_;
  int t_ = 0;
};

// Fits `kind` to the events. Deterministic given (rng, hyper, event order).
// popularity and random kinds skip optimization: their scores live in the
// intercepts and the loss trace is all zeros.
inline TrainedModel fit(ModelKind kind, std::span<const ChoiceEvent> events, ProblemShape shape,
                        const HyperParams& hyper, const NestStructure& nests, RngHandle rng) {
  validate(hyper);
  TrainedModel out;
  out.kind = kind;
  const int n_nests = kind == ModelKind::kGev ? nests.n_nests : 0;
  out.params = ModelParams(shape.n_users, shape.n_items, hyper.dim, n_nests);
  ModelParams& p = out.params;

  if (kind == ModelKind::kPopularity) {
    for (const auto& e : events) p.intercept(e.chosen()) += 1.0;
    out.loss_trace.assign(static_cast<std::size_t>(hyper.epochs), 0.0);
    return out;
  }
  if (kind == ModelKind::kRandom) {
    auto eng = rng.split(Purpose::kRandomScores).engine();
    for (ItemId i = 0; i < shape.n_items; ++i) p.intercept(i) = uniform01(eng);
    out.loss_trace.assign(static_cast<std::size_t>(hyper.epochs), 0.0);
    return out;
  }
  if (events.empty()) throw ContractError(std::string("cannot fit ") + std::string(to_string(kind)) + " on zero events");
  if (kind == ModelKind::kGev) validate(nests, shape.n_items);

  {
    auto eng = rng.split(Purpose::kInit).engine();
    std::normal_distribution<double> init(0.0, 1.0);
    for (double& x : p.factor_block()) x = hyper.init_sd * init(eng);
  }

  std::vector<double> propensity;
  if (kind == ModelKind::kIpsBpr) propensity = exposure_propensity(events, shape.n_items);
  std::optional<NegativeSampler> sampler;
  if (uses_negatives(kind)) sampler.emplace(events, shape.n_users, shape.n_items);
  const LossOptions opts{hyper.n_negatives, sampler ? &*sampler : nullptr};
  const RngHandle neg_rng = rng.split(Purpose::kNegatives).split(hyper.negative_stream);

  Adam adam(p.values.size(), hyper);
  ModelParams grad(p.n_users, p.n_items, p.dim, p.n_nests);
  out.loss_trace.reserve(static_cast<std::size_t>(hyper.epochs));

  const bool full = hyper.minibatch_size == 0 || static_cast<std::size_t>(hyper.minibatch_size) >= events.size();
  std::vector<ChoiceEvent> shuffled;
  if (!full) shuffled.assign(events.begin(), events.end());

  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    const RngHandle epoch_rng = neg_rng.split(static_cast<std::uint64_t>(epoch));
    double epoch_loss = 0.0;
    try {
      if (full) {
        epoch_loss = evaluate_loss(kind, p, events, hyper.reg, nests, propensity, epoch_rng, opts, &grad);
        adam.step(p.values, grad.values);
      } else {
        // Fixed shuffled order per (seed, epoch).
        auto eng = rng.split(Purpose::kShuffle).split(static_cast<std::uint64_t>(epoch)).engine();
        for (std::size_t j = shuffled.size(); j > 1; --j) std::swap(shuffled[j - 1], shuffled[uniform_index(eng, j)]);
        const auto bs = static_cast<std::size_t>(hyper.minibatch_size);
        std::size_t n_batches = 0;
        for (std::size_t start = 0; start < shuffled.size(); start += bs, ++n_batches) {
          const std::span<const ChoiceEvent> batch(shuffled.data() + start, std::min(bs, shuffled.size() - start));
          epoch_loss += evaluate_loss(kind, p, batch, hyper.reg, nests, propensity, epoch_rng.split(n_batches), opts,
                                      &grad);
          adam.step(p.values, grad.values);
        }
        epoch_loss /= static_cast<double>(n_batches);
      }
    } catch (const TrainingError& e) {
      throw TrainingError(std::string(to_string(kind)) + ": " + e.what() + " in epoch " + std::to_string(epoch), epoch);
    }
    if (!std::isfinite(epoch_loss) ||
        !std::all_of(p.values.begin(), p.values.end(), [](double x) { return std::isfinite(x); })) {
      throw TrainingError(std::string(to_string(kind)) + ": non-finite loss in epoch " + std::to_string(epoch), epoch);
    }
    out.loss_trace.push_back(epoch_loss);
  }
  out.final_loss = out.loss_trace.back();
  return out;
}

// Maximum relative error |a - n| / max(|a|, |n|) between the analytic gradient
// and central finite differences at a random parameter point, over every
// coordinate with |a| + |n| > 1e-10.
inline double gradient_check(ModelKind kind, std::span<const ChoiceEvent> events, const HyperParams& hyper,
                             const NestStructure& nests, RngHandle rng, double step = 1e-5) {
  if (events.empty()) throw ContractError("gradient_check needs events");
  ProblemShape shape{0, static_cast<int>(nests.assignment.size())};
  for (const auto& e : events) {
    shape.n_users = std::max(shape.n_users, e.user + 1);
    for (ItemId i : e.slate.items) shape.n_items = std::max(shape.n_items, i + 1);
  }
  const int n_nests = kind == ModelKind::kGev ? nests.n_nests : 0;
  ModelParams p(shape.n_users, shape.n_items, hyper.dim, n_nests);
  {
    auto eng = rng.split(Purpose::kGradientCheck).engine();
    std::normal_distribution<double> d(0.0, 0.5);
    for (double& x : p.values) x = d(eng);
  }
  std::vector<double> propensity;
  if (kind == ModelKind::kIpsBpr) propensity = exposure_propensity(events, shape.n_items);
  const NegativeSampler sampler(events, shape.n_users, shape.n_items);
  const LossOptions opts{hyper.n_negatives, &sampler};
  const RngHandle neg_rng = rng.split(Purpose::kNegatives);

  const auto analytic = loss_and_gradient(kind, p, events, hyper.reg, nests, propensity, neg_rng, opts);
  double worst = 0.0;
  for (std::size_t j = 0; j < p.values.size(); ++j) {
    const double x0 = p.values[j];
    p.values[j] = x0 + step;
    const double up = evaluate_loss(kind, p, events, hyper.reg, nests, propensity, neg_rng, opts, nullptr);
    p.values[j] = x0 - step;
    const double down = evaluate_loss(kind, p, events, hyper.reg, nests, propensity, neg_rng, opts, nullptr);
    p.values[j] = x0;
    const double numeric = (up - down) / (2.0 * step);
    const double a = analytic.grad.values[j];
    if (std::abs(a) + std::abs(numeric) <= 1e-10) continue;
    worst = std::max(worst, std::abs(a - numeric) / std::max(std::abs(a), std::abs(numeric)));
  }
  return worst;
}

}  // namespace exbias
