#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "copanet/data.hpp"
#include "copanet/errors.hpp"
#include "copanet/keyvalue.hpp"
#include "copanet/model.hpp"
#include "copanet/ops.hpp"
#include "copanet/parameters.hpp"
#include "copanet/tensor.hpp"

namespace copanet {

struct TrainPlan {
  std::size_t total_epochs = 300;
  double base_lr = 0.1;
  std::vector<double> lr_drop_fractions{0.6, 0.8};
  double lr_drop_factor = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;
  int precision = 32;
  bool augment = true;

  void validate() const {
    if (total_epochs == 0) throw ConfigError("epochs must be positive");
    if (!(base_lr > 0)) throw ConfigError("lr must be positive");
    double previous = 0;
    for (double f : lr_drop_fractions) {
      if (!(f > previous && f < 1)) {
        throw ConfigError("lr_drops must be strictly increasing inside (0, 1), got " +
                          format_list(lr_drop_fractions));
      }
      previous = f;
    }
    if (!(lr_drop_factor > 0 && lr_drop_factor <= 1)) {
      throw ConfigError("lr_factor must lie in (0, 1]");
    }
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be non-negative");
    if (batch_size < 2) {
      throw ConfigError("batch must be at least 2 for batch statistics, got " +
                        std::to_string(batch_size));
    }
    if (precision != 32 && precision != 64) {
      throw ConfigError("precision must be 32 or 64, got " + std::to_string(precision));
    }
  }

  static const std::vector<std::string>& keys() {
    static const std::vector<std::string> k{"epochs",       "lr",    "lr_drops",
                                            "lr_factor",    "momentum", "weight_decay",
                                            "batch",        "seed",  "precision",
                                            "augment"};
    return k;
  }

  bool apply(const std::string& key, const std::string& value) {
    if (key == "epochs") {
      total_epochs = parse_integer<std::size_t>(key, value);
    } else if (key == "lr") {
      base_lr = parse_real(key, value);
    } else if (key == "lr_drops") {
      lr_drop_fractions.clear();
      for (const auto& item : split_list(value)) lr_drop_fractions.push_back(parse_real(key, item));
    } else if (key == "lr_factor") {
      lr_drop_factor = parse_real(key, value);
    } else if (key == "momentum") {
      momentum = parse_real(key, value);
    } else if (key == "weight_decay") {
      weight_decay = parse_real(key, value);
    } else if (key == "batch") {
      batch_size = parse_integer<std::size_t>(key, value);
    } else if (key == "seed") {
      seed = parse_integer<std::uint64_t>(key, value);
    } else if (key == "precision") {
      precision = parse_integer<int>(key, value);
    } else if (key == "augment") {
      if (value != "0" && value != "1") {
        throw UsageError("key 'augment' needs 0 or 1, got '" + value + "'");
      }
      augment = value == "1";
    } else {
      return false;
    }
    return true;
  }

  std::string to_text() const {
    std::ostringstream out;
    out << std::setprecision(17);
    out << "epochs=" << total_epochs << "\nlr=" << base_lr
        << "\nlr_drops=" << format_list(lr_drop_fractions)
        << "\nlr_factor=" << lr_drop_factor << "\nmomentum=" << momentum
        << "\nweight_decay=" << weight_decay << "\nbatch=" << batch_size
        << "\nseed=" << seed << "\nprecision=" << precision
        << "\naugment=" << (augment ? 1 : 0) << '\n';
    return out.str();
  }

  static std::string format_list(const std::vector<double>& values) {
    std::ostringstream out;
    out << std::setprecision(17);
    for (std::size_t i = 0; i < values.size(); ++i) out << (i ? "," : "") << values[i];
    return out.str();
  }
};

inline TrainPlan cifar_plan() { return TrainPlan{}; }

inline TrainPlan svhn_plan() {
  TrainPlan plan;
  plan.total_epochs = 20;
  plan.lr_drop_fractions = {0.5, 0.75};
  plan.augment = false;
  return plan;
}

/// base_lr times lr_drop_factor for every drop boundary floor(f * epochs)
/// already reached. The factor is applied as a division by its reciprocal so
/// that decimal schedules (0.1 -> 0.01 -> 0.001) come out exact.
inline double lr_at(std::size_t epoch, const TrainPlan& plan) {
  if (epoch >= plan.total_epochs) {
    throw UsageError("epoch " + std::to_string(epoch) + " outside a " +
                     std::to_string(plan.total_epochs) + "-epoch plan");
  }
  int drops = 0;
  for (double f : plan.lr_drop_fractions) {
    const auto boundary = static_cast<std::size_t>(
        std::floor(f * static_cast<double>(plan.total_epochs)));
    if (epoch >= boundary) ++drops;
  }
  return plan.base_lr / std::pow(1.0 / plan.lr_drop_factor, drops);
}

/// He-normal conv and linear weights (std sqrt(2 / fan_in)); BN gamma 1,
/// beta 0; biases 0.
template <typename T>
void he_init(ParameterRegistry<T>& registry, std::mt19937_64& rng) {
  for (auto& p : registry.parameters()) {
    auto values = p.tensor.data();
    switch (p.role) {
      case ParamRole::conv_weight:
      case ParamRole::linear_weight: {
        const auto& s = p.tensor.shape();
        // conv OIHW: fan_in = I*kh*kw; linear CxK: fan_in = C.
        const std::size_t fan_in =
            p.role == ParamRole::conv_weight ? p.tensor.numel() / s[0] : s[0];
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
        for (auto& v : values) v = static_cast<T>(dist(rng));
        break;
      }
      case ParamRole::bn_gamma:
        std::fill(values.begin(), values.end(), T(1));
        break;
      case ParamRole::bn_beta:
      case ParamRole::linear_bias:
        std::fill(values.begin(), values.end(), T(0));
        break;
    }
  }
}

/// Momentum SGD: v = momentum * v + grad + decay * param; param -= lr * v.
/// Decay applies to conv and linear weights only.
template <typename T>
class SgdOptimizer {
 public:
  SgdOptimizer(ParameterRegistry<T> registry, double momentum, double weight_decay)
      : registry_(std::move(registry)), momentum_(momentum), weight_decay_(weight_decay) {
    for (const auto& p : registry_.parameters()) velocity_.emplace_back(p.tensor.numel(), T(0));
  }

  void step(double lr) {
    const T mu = static_cast<T>(momentum_);
    const T rate = static_cast<T>(lr);
    auto& params = registry_.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      auto value = p.tensor.data();
      auto& v = velocity_[i];
      if (v.size() != value.size()) {
        throw std::logic_error("optimizer state for " + p.name + " does not match");
      }
      const T decay = decays(p.role) ? static_cast<T>(weight_decay_) : T(0);
      const bool has_grad = p.tensor.has_grad();
      const auto grad = p.tensor.grad();
      for (std::size_t j = 0; j < value.size(); ++j) {
        const T g = has_grad ? grad[j] : T(0);
        v[j] = mu * v[j] + g + decay * value[j];
        value[j] -= rate * v[j];
      }
    }
  }

  void zero_grad() { registry_.zero_grad(); }
  ParameterRegistry<T>& registry() { return registry_; }
  const std::vector<std::vector<T>>& velocity() const { return velocity_; }
  std::vector<T>& velocity_mut(std::size_t i) { return velocity_.at(i); }

 private:
  ParameterRegistry<T> registry_;
  double momentum_;
  double weight_decay_;
  std::vector<std::vector<T>> velocity_;
};

struct EvalResult {
  double loss = 0;
  double error_rate = 0;
  std::size_t count = 0;
};

template <typename T>
std::size_t count_correct(const Tensor<T>& logits, std::span<const int> labels) {
  const std::size_t k = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto row = logits.data().subspan(i * k, k);
    const auto best = std::max_element(row.begin(), row.end()) - row.begin();
    if (best == labels[i]) ++correct;
  }
  return correct;
}

/// Eval-mode pass (running BN statistics, scaled dropout). Appends each
/// record's logits to `logits_out` when given.
template <typename T>
EvalResult evaluate(Model<T>& model, const Dataset& ds, const Normalizer& normalizer,
                    std::size_t batch_size = 128, std::vector<T>* logits_out = nullptr) {
  if (ds.size() == 0) throw DataError("cannot evaluate on an empty dataset");
  NoGradGuard no_grad;
  double loss = 0;
  std::size_t correct = 0;
  for (const auto& idx : make_batches(ds.size(), batch_size, nullptr)) {
    auto batch = make_batch<T>(ds, idx, normalizer);
    auto logits = model.forward(batch.images, {}).logits;
    loss += static_cast<double>(softmax_cross_entropy<T>(logits, batch.labels).item()) *
            static_cast<double>(idx.size());
    correct += count_correct(logits, batch.labels);
    if (logits_out) logits_out->insert(logits_out->end(), logits.data().begin(), logits.data().end());
  }
  const double n = static_cast<double>(ds.size());
  return {loss / n, 1.0 - static_cast<double>(correct) / n, ds.size()};
}

struct EpochRow {
  std::size_t epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double train_error = 0;
  std::optional<double> test_error;
};

struct TrainLog {
  std::vector<EpochRow> rows;

  std::string to_csv() const {
    std::ostringstream out;
    out << "epoch,lr,train_loss,train_error,test_error\n" << std::setprecision(9);
    for (const auto& r : rows) {
      out << r.epoch << ',' << r.lr << ',' << r.train_loss << ',' << r.train_error << ',';
      if (r.test_error) out << *r.test_error;
      out << '\n';
    }
    return out.str();
  }
};

struct TrainOptions {
  const Dataset* test = nullptr;
  std::size_t start_epoch = 0;
  // Stop before this epoch; 0 runs to the end of the plan. The schedule is
  // still that of the full plan.
  std::size_t end_epoch = 0;
  // Test error is computed every `eval_every` epochs and after the last one.
  std::size_t eval_every = 1;
  std::function<void(const EpochRow&)> on_epoch_end;
};

/// Forward pass on `images` reporting the first named layer whose output
/// holds a non-finite value, or "" if none does.
template <typename T>
std::string first_non_finite_layer(Model<T>& model, const Tensor<T>& images,
                                   std::mt19937_64& rng) {
  if (!all_finite(images)) return "input";
  NoGradGuard no_grad;
  std::string first;
  typename Model<T>::ForwardOptions opt;
  opt.training = true;
  opt.rng = &rng;
  opt.probe = [&](const std::string& name, const Tensor<T>& t) {
    if (first.empty() && !all_finite(t)) first = name;
  };
  model.forward(images, opt);
  return first;
}

/// Runs epochs options.start_epoch up to the plan end (or options.end_epoch)
/// of minibatch SGD.
/// `rng` drives shuffling and dropout; augmentation draws from per-record
/// streams derived from plan.seed. A non-finite loss aborts with a
/// NumericError naming the first layer that produced a non-finite value.
template <typename T>
TrainLog train(Model<T>& model, SgdOptimizer<T>& optimizer, const Dataset& train_set,
               const Normalizer& normalizer, const TrainPlan& plan, std::mt19937_64& rng,
               const TrainOptions& options = {}) {
  plan.validate();
  if (train_set.size() < 2) throw DataError("training needs at least two records");
  TrainLog log;
  const std::size_t end =
      options.end_epoch ? std::min(options.end_epoch, plan.total_epochs) : plan.total_epochs;
  for (std::size_t epoch = options.start_epoch; epoch < end; ++epoch) {
    const double lr = lr_at(epoch, plan);
    double loss_sum = 0;
    std::size_t correct = 0;
    std::size_t step = 0;
    for (const auto& idx : make_batches(train_set.size(), plan.batch_size, &rng)) {
      const AugmentSpec spec{plan.seed, epoch};
      auto batch = make_batch<T>(train_set, idx, normalizer, plan.augment ? &spec : nullptr);
      typename Model<T>::ForwardOptions opt;
      opt.training = true;
      opt.rng = &rng;
      auto logits = model.forward(batch.images, opt).logits;
      auto loss = softmax_cross_entropy<T>(logits, batch.labels);
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) {
        std::string layer = first_non_finite_layer(model, batch.images, rng);
        if (layer.empty()) layer = "loss";
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + " step " +
                           std::to_string(step) + "; first non-finite output: " + layer);
      }
      optimizer.zero_grad();
      backward(loss);
      optimizer.step(lr);
      loss_sum += value * static_cast<double>(idx.size());
      correct += count_correct(logits, batch.labels);
      ++step;
    }
    EpochRow row;
    row.epoch = epoch;
    row.lr = lr;
    const double n = static_cast<double>(train_set.size());
    row.train_loss = loss_sum / n;
    row.train_error = 1.0 - static_cast<double>(correct) / n;
    const bool last = epoch + 1 == end;
    if (options.test && (last || (options.eval_every && (epoch + 1) % options.eval_every == 0))) {
      row.test_error = evaluate(model, *options.test, normalizer, plan.batch_size).error_rate;
    }
    log.rows.push_back(row);
    if (options.on_epoch_end) options.on_epoch_end(row);
  }
  return log;
}

}  // namespace copanet
