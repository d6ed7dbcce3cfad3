#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sirenloc/core.hpp"
#include "sirenloc/model.hpp"
#include "sirenloc/tensor.hpp"

namespace sirenloc::train {

using nn::ModelInput;
using nn::ModelOutput;
using nn::OutputGrad;
using nn::Params;
using nn::SirenNet;

struct LossWeights {
  double siren = 10.0;
  double angle = 10.0;
  double distance = 0.008;

  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

inline void validate(const LossWeights& w) {
  require(w.siren >= 0.0 && w.angle >= 0.0 && w.distance >= 0.0, "LossWeights: weights must be non-negative");
  require(w.siren > 0.0 || w.angle > 0.0 || w.distance > 0.0, "LossWeights: at least one weight must be positive");
}

struct TrainConfig {
  double lr_init = 1e-5;
  double lr_min = 1e-9;
  double plateau_factor = 0.5;
  int plateau_patience = 3;
  int batch_size = 32;
  int epochs = 20;
  std::uint64_t seed = 0;
  LossWeights weights{};
  bool normalized_angle_loss = false;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline void validate(const TrainConfig& c) {
  require(c.lr_min > 0.0 && c.lr_min <= c.lr_init, "TrainConfig: need 0 < lr_min <= lr_init");
  require(c.plateau_factor > 0.0 && c.plateau_factor < 1.0, "TrainConfig: plateau_factor must be in (0,1)");
  require(c.plateau_patience >= 1, "TrainConfig: plateau_patience must be >= 1");
  require(c.batch_size >= 1 && c.epochs >= 0, "TrainConfig: bad batch_size or epochs");
  validate(c.weights);
}

struct Target {
  bool is_siren = false;
  double theta = 0.0;
  double distance = 0.0;
};

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

inline constexpr double kProbEps = 1e-12;

/// Unweighted per-task terms and the weighted total for one sample.
struct LossBreakdown {
  double total = 0.0;
  double siren = 0.0;
  double angle = 0.0;
  double distance = 0.0;
};

/// w_s * BCE(p, y) + m * (w_a * angle SSE + w_d * distance SE), m = is_siren.
/// Computed on raw head outputs unless `normalized` selects the unit-circle
/// pair for the angle term. Fills `grad` with dLoss/d(raw outputs).
inline LossBreakdown multitask_loss(const ModelOutput& out, const Target& y, const LossWeights& w,
                                    bool normalized = false, OutputGrad* grad = nullptr) {
  LossBreakdown l;
  const double p = out.p_siren;
  const double t = y.is_siren ? 1.0 : 0.0;
  l.siren = -(t * std::log(std::max(p, kProbEps)) + (1.0 - t) * std::log(std::max(1.0 - p, kProbEps)));
  OutputGrad g;
  g.siren = w.siren > 0.0;
  g.angle = y.is_siren && w.angle > 0.0;
  g.distance = y.is_siren && w.distance > 0.0;
  // d/dlogit through the sigmoid, respecting the clamp
  g.d_logit = w.siren * (-t * (1.0 - p) * (p > kProbEps ? 1.0 : 0.0) +
                         (1.0 - t) * p * (1.0 - p > kProbEps ? 1.0 : 0.0));
  if (y.is_siren) {
    const double st = std::sin(y.theta), ct = std::cos(y.theta);
    if (normalized) {
      const double r2 = out.sin_raw * out.sin_raw + out.cos_raw * out.cos_raw;
      const double r = std::sqrt(r2);
      const auto pair = nn::normalize_angle_pair(out.sin_raw, out.cos_raw);
      const double es = pair.sin_n - st, ec = pair.cos_n - ct;
      l.angle = es * es + ec * ec;
      if (!pair.degenerate) {
        const double r3 = r2 * r;
        const double s = out.sin_raw, c = out.cos_raw;
        g.d_sin = w.angle * 2.0 * (es * c * c - ec * s * c) / r3;
        g.d_cos = w.angle * 2.0 * (-es * s * c + ec * s * s) / r3;
      }
    } else {
      const double es = out.sin_raw - st, ec = out.cos_raw - ct;
      l.angle = es * es + ec * ec;
      g.d_sin = w.angle * 2.0 * es;
      g.d_cos = w.angle * 2.0 * ec;
    }
    const double ed = out.distance - y.distance;
    l.distance = ed * ed;
    g.d_distance = w.distance * 2.0 * ed;
  }
  l.total = w.siren * l.siren + (y.is_siren ? w.angle * l.angle + w.distance * l.distance : 0.0);
  if (grad) *grad = g;
  return l;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
  std::vector<std::vector<double>> m, v;
  long step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState for_params(const Params& p) {
    AdamState s;
    for (const auto& t : p.tensors()) {
      s.m.emplace_back(t.size(), 0.0);
      s.v.emplace_back(t.size(), 0.0);
    }
    return s;
  }
};

/// One bias-corrected Adam update. Tensors with trainable[i] == false are
/// left untouched (an empty mask means all trainable).
inline void adam_step(Params& params, const Params& grads, AdamState& s, double lr,
                      const std::vector<bool>& trainable = {}) {
  require(params.count() == grads.count() && s.m.size() == params.count(), "adam_step: shape mismatch");
  ++s.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < params.count(); ++i) {
    if (!trainable.empty() && !trainable[i]) continue;
    auto& p = params[i].values;
    const auto& g = grads[i].values;
    require(p.size() == g.size(), "adam_step: tensor size mismatch");
    auto& m = s.m[i];
    auto& v = s.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = s.beta1 * m[j] + (1.0 - s.beta1) * g[j];
      v[j] = s.beta2 * v[j] + (1.0 - s.beta2) * g[j] * g[j];
      p[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + s.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Lazily produced model inputs plus their targets.
struct SampleSet {
  std::function<ModelInput(std::size_t)> input;
  std::vector<Target> targets;

  std::size_t size() const { return targets.size(); }
};

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  LossBreakdown train;  // task means: siren over all, angle/distance over positives
  LossBreakdown valid;
  double valid_accuracy = 0.0;
  double valid_angle_mae_deg = 0.0;
  double valid_distance_mae_m = 0.0;
};

struct TrainResult {
  Params best;
  int best_epoch = 0;  // 0 = initial parameters
  double best_valid_loss = std::numeric_limits<double>::infinity();
  std::vector<EpochRecord> history;
};

/// Thrown on a non-finite loss; carries the last good selection.
class DivergenceError : public RuntimeFailure {
 public:
  DivergenceError(const std::string& what, TrainResult partial)
      : RuntimeFailure(what), partial_(std::move(partial)) {}
  const TrainResult& partial() const { return partial_; }

 private:
  TrainResult partial_;
};

/// Forward/backward provider the optimizer drives. backward() refers to the
/// most recent forward() call.
class Trainee {
 public:
  virtual ~Trainee() = default;
  virtual std::size_t size(bool train_split) const = 0;
  virtual const Target& target(bool train_split, std::size_t i) const = 0;
  virtual ModelOutput forward(bool train_split, std::size_t i, const Params& p) = 0;
  virtual void backward(const Params& p, const OutputGrad& g, Params& grads) = 0;
};

struct EvalSummary {
  LossBreakdown mean;  // task means as in EpochRecord
  double weighted = 0.0;
  double accuracy = 0.0;
  double angle_mae_deg = 0.0;
  double distance_mae_m = 0.0;
};

namespace detail {

/// Running per-task means; angle and distance averaged over positives only.
struct LossAccumulator {
  double siren = 0.0, angle = 0.0, distance = 0.0, weighted = 0.0;
  std::size_t n = 0, positives = 0;

  void add(const LossBreakdown& l, bool positive) {
    siren += l.siren;
    weighted += l.total;
    ++n;
    if (positive) {
      angle += l.angle;
      distance += l.distance;
      ++positives;
    }
  }
  LossBreakdown mean() const {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    LossBreakdown m;
    m.siren = n ? siren / n : nan;
    m.angle = positives ? angle / positives : nan;
    m.distance = positives ? distance / positives : nan;
    m.total = n ? weighted / n : nan;
    return m;
  }
};

}  // namespace detail

inline double reported_distance(double d) { return std::clamp(d, 0.0, 150.0); }

inline EvalSummary evaluate(Trainee& model, const Params& p, const TrainConfig& cfg, bool train_split = false,
                            double threshold = 0.5) {
  detail::LossAccumulator acc;
  std::size_t correct = 0;
  double angle_err = 0.0, dist_err = 0.0;
  for (std::size_t i = 0; i < model.size(train_split); ++i) {
    const ModelOutput out = model.forward(train_split, i, p);
    const Target& y = model.target(train_split, i);
    acc.add(multitask_loss(out, y, cfg.weights, cfg.normalized_angle_loss), y.is_siren);
    if ((out.p_siren >= threshold) == y.is_siren) ++correct;
    if (y.is_siren) {
      double e = std::abs(out.theta_hat - y.theta);
      if (e > kPi) e = 2.0 * kPi - e;
      angle_err += deg(e);
      dist_err += std::abs(reported_distance(out.distance) - y.distance);
    }
  }
  EvalSummary s;
  s.mean = acc.mean();
  s.weighted = s.mean.total;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  s.accuracy = acc.n ? static_cast<double>(correct) / acc.n : nan;
  s.angle_mae_deg = acc.positives ? angle_err / acc.positives : nan;
  s.distance_mae_m = acc.positives ? dist_err / acc.positives : nan;
  return s;
}

/// Mini-batch Adam over the trainee's training split with seeded shuffling,
/// reduce-on-plateau learning rate bounded below by lr_min, and selection of
/// the epoch with the lowest weighted validation loss (earliest on ties).
inline TrainResult optimize(Trainee& model, Params params, const TrainConfig& cfg,
                            const std::vector<bool>& trainable = {},
                            const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  validate(cfg);
  require(model.size(true) > 0, "train_loop: empty training set");
  require(model.size(false) > 0, "train_loop: empty validation set");
  TrainResult result;
  result.best = params;
  if (cfg.epochs == 0) return result;

  AdamState adam = AdamState::for_params(params);
  Params grads = params.zeros_like();
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(model.size(true));
  std::iota(order.begin(), order.end(), 0);
  double lr = cfg.lr_init;
  double plateau_best = std::numeric_limits<double>::infinity();
  int bad_epochs = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    detail::LossAccumulator acc;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      grads.set_zero();
      for (std::size_t b = start; b < end; ++b) {
        const ModelOutput out = model.forward(true, order[b], params);
        const Target& y = model.target(true, order[b]);
        OutputGrad g;
        const LossBreakdown l = multitask_loss(out, y, cfg.weights, cfg.normalized_angle_loss, &g);
        if (!std::isfinite(l.total)) {
          throw DivergenceError("non-finite training loss at epoch " + std::to_string(epoch), result);
        }
        acc.add(l, y.is_siren);
        const double inv = 1.0 / static_cast<double>(end - start);
        g.d_logit *= inv;
        g.d_sin *= inv;
        g.d_cos *= inv;
        g.d_distance *= inv;
        model.backward(params, g, grads);
      }
      adam_step(params, grads, adam, lr, trainable);
      if (!params.all_finite()) {
        throw DivergenceError("non-finite parameters at epoch " + std::to_string(epoch), result);
      }
    }
    const EvalSummary v = evaluate(model, params, cfg);
    if (!std::isfinite(v.weighted)) {
      throw DivergenceError("non-finite validation loss at epoch " + std::to_string(epoch), result);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train = acc.mean();
    rec.valid = v.mean;
    rec.valid_accuracy = v.accuracy;
    rec.valid_angle_mae_deg = v.angle_mae_deg;
    rec.valid_distance_mae_m = v.distance_mae_m;
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (v.weighted < result.best_valid_loss) {
      result.best_valid_loss = v.weighted;
      result.best = params;
      result.best_epoch = epoch;
    }
    if (v.weighted < plateau_best) {
      plateau_best = v.weighted;
      bad_epochs = 0;
    } else if (++bad_epochs >= cfg.plateau_patience) {
      lr = std::max(lr * cfg.plateau_factor, cfg.lr_min);
      bad_epochs = 0;
    }
  }
  return result;
}

/// Whole-network trainee over two sample sets.
class NetworkTrainee : public Trainee {
 public:
  NetworkTrainee(const SirenNet& net, const SampleSet& train, const SampleSet& valid)
      : net_(net), sets_{&valid, &train} {}

  std::size_t size(bool train_split) const override { return sets_[train_split]->size(); }
  const Target& target(bool train_split, std::size_t i) const override {
    return sets_[train_split]->targets[i];
  }
  ModelOutput forward(bool train_split, std::size_t i, const Params& p) override {
    return net_.forward(p, sets_[train_split]->input(i), &cache_);
  }
  void backward(const Params& p, const OutputGrad& g, Params& grads) override {
    net_.backward(p, cache_, g, grads);
  }

 private:
  const SirenNet& net_;
  const SampleSet* sets_[2];
  nn::ForwardCache cache_;
};

/// Heads-only trainee over precomputed backbone embeddings.
class HeadTrainee : public Trainee {
 public:
  HeadTrainee(const SirenNet& net, const Params& params, const SampleSet& train, const SampleSet& valid)
      : net_(net) {
    const SampleSet* sets[2] = {&valid, &train};
    for (int s = 0; s < 2; ++s) {
      targets_[s] = sets[s]->targets;
      for (std::size_t i = 0; i < sets[s]->size(); ++i) embeddings_[s].push_back(net.embed(params, sets[s]->input(i)));
    }
  }

  std::size_t size(bool train_split) const override { return targets_[train_split].size(); }
  const Target& target(bool train_split, std::size_t i) const override { return targets_[train_split][i]; }
  ModelOutput forward(bool train_split, std::size_t i, const Params& p) override {
    last_ = &embeddings_[train_split][i];
    return net_.heads(p, *last_, cache_);
  }
  void backward(const Params& p, const OutputGrad& g, Params& grads) override {
    net_.backward_heads(p, *last_, cache_, g, grads);
  }

 private:
  const SirenNet& net_;
  std::vector<Target> targets_[2];
  std::vector<nn::Vec> embeddings_[2];
  const nn::Vec* last_ = nullptr;
  nn::HeadCache cache_[3];
};

inline TrainResult train_loop(const SirenNet& net, const Params& init, const SampleSet& train,
                              const SampleSet& valid, const TrainConfig& cfg,
                              const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  require(train.size() > 0, "train_loop: empty training set");
  require(valid.size() > 0, "train_loop: empty validation set");
  net.check_params(init);
  NetworkTrainee t(net, train, valid);
  return optimize(t, init, cfg, {}, on_epoch);
}

/// Continues training with both streams frozen; only head tensors move.
inline TrainResult fine_tune_heads(const SirenNet& net, const Params& params, const SampleSet& train,
                                   const SampleSet& valid, const TrainConfig& cfg,
                                   const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  require(train.size() > 0, "fine_tune_heads: empty training set");
  require(valid.size() > 0, "fine_tune_heads: empty validation set");
  net.check_params(params);
  validate(cfg);
  if (cfg.epochs == 0) {
    TrainResult r;
    r.best = params;
    return r;
  }
  std::vector<bool> trainable(params.count());
  for (std::size_t i = 0; i < params.count(); ++i) trainable[i] = SirenNet::is_head_tensor(params[i].name);
  HeadTrainee t(net, params, train, valid);
  return optimize(t, params, cfg, trainable, on_epoch);
}

/// Reverse-mode gradient of the mean batch loss.
inline Params backward(const SirenNet& net, const Params& params, const std::vector<ModelInput>& inputs,
                       const std::vector<Target>& targets, const LossWeights& w, bool normalized = false,
                       double* loss_out = nullptr) {
  require(inputs.size() == targets.size() && !inputs.empty(), "backward: bad batch");
  Params grads = params.zeros_like();
  nn::ForwardCache cache;
  double total = 0.0;
  const double inv = 1.0 / static_cast<double>(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto out = net.forward(params, inputs[i], &cache);
    OutputGrad g;
    const auto l = multitask_loss(out, targets[i], w, normalized, &g);
    if (!std::isfinite(l.total)) throw RuntimeFailure("backward: non-finite loss");
    total += l.total * inv;
    g.d_logit *= inv;
    g.d_sin *= inv;
    g.d_cos *= inv;
    g.d_distance *= inv;
    net.backward(params, cache, g, grads);
  }
  if (loss_out) *loss_out = total;
  return grads;
}

}  // namespace sirenloc::train
