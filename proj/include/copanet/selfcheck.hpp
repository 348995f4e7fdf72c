#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <functional>
#include <cstring>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "copanet/analysis.hpp"
#include "copanet/checkpoint.hpp"
#include "copanet/copa_unit.hpp"
#include "copanet/gradcheck.hpp"
#include "copanet/model.hpp"
#include "copanet/ops.hpp"
#include "copanet/reference.hpp"
#include "copanet/trainer.hpp"

namespace copanet {

namespace checks {

inline Tensor<double> uniform(Shape shape, std::mt19937_64& rng, double lo, double hi,
                              bool requires_grad = true) {
  Tensor<double> t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.data()) v = dist(rng);
  t.set_requires_grad(requires_grad);
  return t;
}

inline std::vector<double> weights(std::size_t n, std::mt19937_64& rng) {
  std::vector<double> w(n);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  for (auto& v : w) v = dist(rng);
  return w;
}

template <typename T>
void randomize_parameters(ParameterRegistry<T>& registry, std::mt19937_64& rng,
                          double stddev = 0.5) {
  std::uniform_real_distribution<double> gamma(0.5, 1.5);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& p : registry.parameters()) {
    for (auto& v : p.tensor.data()) {
      if (p.role == ParamRole::bn_gamma) {
        v = static_cast<T>(gamma(rng));
      } else {
        v = static_cast<T>((p.role == ParamRole::bn_beta ? 0.2 : stddev) * normal(rng));
      }
    }
  }
}

struct NamedGradCheck {
  std::string op;
  GradCheckResult result;
};

/// Finite-difference checks of every differentiable primitive at 64-bit.
inline std::vector<NamedGradCheck> primitive_gradients(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<NamedGradCheck> out;
  auto run = [&](const std::string& op, const std::function<Tensor<double>()>& loss,
                 std::vector<std::pair<std::string, Tensor<double>>> wrt) {
    out.push_back({op, check_gradients(loss, std::move(wrt))});
  };
  {
    for (std::size_t stride : {1, 2}) {
      for (std::size_t pad : {0, 1}) {
        auto x = uniform({2, 3, 5, 5}, rng, -1, 1);
        auto w = uniform({4, 3, 3, 3}, rng, -1, 1);
        Shape probe = conv2d(x, w, stride, pad).shape();
        std::size_t n = 1;
        for (auto d : probe) n *= d;
        const auto proj = weights(n, rng);
        run("conv2d(stride " + std::to_string(stride) + ", pad " + std::to_string(pad) + ")",
            [=] { return weighted_sum<double>(conv2d(x, w, stride, pad), proj); },
            {{"input", x}, {"weight", w}});
      }
    }
  }
  for (bool training : {true, false}) {
    auto x = uniform({3, 2, 3, 3}, rng, -2, 2);
    auto bn = std::make_shared<BatchNormState<double>>(2);
    bn->gamma[0] = 1.3, bn->gamma[1] = -0.7, bn->beta[0] = 0.2, bn->beta[1] = -0.4;
    bn->running_mean = {0.3, -0.1};
    bn->running_var = {1.7, 0.6};
    const auto proj = weights(x.numel(), rng);
    run(std::string("batchnorm2d(") + (training ? "train" : "eval") + ")",
        [=] { return weighted_sum<double>(batchnorm2d(x, *bn, training), proj); },
        {{"input", x}, {"gamma", bn->gamma}, {"beta", bn->beta}});
  }
  {
    auto x = uniform({2, 3, 4}, rng, -1, 1);
    auto y = uniform({2, 3, 4}, rng, -1, 1);
    const auto proj = weights(24, rng);
    run("relu", [=] { return weighted_sum<double>(relu(x), proj); }, {{"input", x}});
    run("add", [=] { return weighted_sum<double>(add(x, y), proj); }, {{"a", x}, {"b", y}});
    run("scale", [=] { return weighted_sum<double>(scale(x, 0.37), proj); }, {{"input", x}});
    run("sum", [=] { return sum(x); }, {{"input", x}});
  }
  {
    auto x = uniform({2, 3, 4, 4}, rng, -1, 1);
    const auto p1 = weights(2 * 3 * 2 * 2, rng);
    const auto p2 = weights(2 * 3, rng);
    run("avgpool2d", [=] { return weighted_sum<double>(avgpool2d(x, 2, 2), p1); },
        {{"input", x}});
    run("global_avgpool", [=] { return weighted_sum<double>(global_avgpool(x), p2); },
        {{"input", x}});
  }
  {
    auto a = uniform({2, 2, 3, 3}, rng, -1, 1);
    auto b = uniform({2, 3, 3, 3}, rng, -1, 1);
    const auto proj = weights(2 * 5 * 9, rng);
    const auto proj_slice = weights(2 * 2 * 9, rng);
    run("concat_channels", [=] { return weighted_sum<double>(concat_channels<double>({a, b}), proj); },
        {{"a", a}, {"b", b}});
    run("slice_channels", [=] { return weighted_sum<double>(slice_channels(b, 1, 2), proj_slice); },
        {{"input", b}});
  }
  {
    auto x = uniform({4, 6}, rng, -1, 1);
    auto w = uniform({6, 3}, rng, -1, 1);
    auto b = uniform({3}, rng, -1, 1);
    const auto proj = weights(12, rng);
    run("linear", [=] { return weighted_sum<double>(linear(x, w, b), proj); },
        {{"input", x}, {"weight", w}, {"bias", b}});
    auto z = uniform({4, 5}, rng, -3, 3);
    const std::vector<int> labels{0, 4, 2, 2};
    run("softmax_cross_entropy", [=] { return softmax_cross_entropy<double>(z, labels); },
        {{"logits", z}});
  }
  {
    auto x = uniform({2, 3, 4}, rng, -1, 1);
    const auto proj = weights(24, rng);
    run("dropout(train)",
        [=] {
          std::mt19937_64 mask_rng(17);  // same mask on every evaluation
          return weighted_sum<double>(dropout(x, 0.3, true, &mask_rng), proj);
        },
        {{"input", x}});
    run("dropout(eval)", [=] { return weighted_sum<double>(dropout(x, 0.3, false, nullptr), proj); },
        {{"input", x}});
  }
  {
    // Values spaced apart so no probe crosses a max kink.
    std::vector<Tensor<double>> inputs;
    for (int k = 0; k < 3; ++k) {
      Tensor<double> t({2, 6});
      for (std::size_t i = 0; i < t.numel(); ++i) {
        t[i] = static_cast<double>((i * 7 + static_cast<std::size_t>(k) * 5) % 13) * 0.1 - 0.6;
      }
      t.set_requires_grad(true);
      inputs.push_back(t);
    }
    const auto proj = weights(12, rng);
    run("elementwise_max_k",
        [=] { return weighted_sum<double>(elementwise_max_k<double>(inputs, false).output, proj); },
        {{"in0", inputs[0]}, {"in1", inputs[1]}, {"in2", inputs[2]}});
  }
  return out;
}

inline CoPaUnitSpec stack_unit_spec(std::size_t k, std::size_t channels, std::size_t mid) {
  return {k, {PathwayKind::bottleneck, channels, mid, channels, 1}};
}

/// Finite-difference check through three stacked K = 2 units, every
/// parameter and the input.
inline GradCheckResult stack_gradient(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto units = std::make_shared<std::vector<CoPaUnit<double>>>();
  for (int l = 0; l < 3; ++l) units->emplace_back(stack_unit_spec(2, 4, 2), l);
  std::vector<std::pair<std::string, Tensor<double>>> wrt;
  auto x = uniform({2, 4, 3, 3}, rng, -1, 1);
  wrt.emplace_back("input", x);
  for (auto& u : *units) {
    ParameterRegistry<double> registry;
    u.collect(registry, "unit" + std::to_string(u.id()));
    randomize_parameters(registry, rng);
    for (auto& p : registry.parameters()) wrt.emplace_back(p.name, p.tensor);
  }
  const auto proj = weights(x.numel(), rng);
  return check_gradients(
      [=] { return weighted_sum<double>(forward_stack<double>(x, *units, true), proj); }, wrt);
}

struct RoutingPropertyCounts {
  std::size_t trials = 0;
  std::size_t elements = 0;
  std::size_t ties = 0;
  std::size_t max_violations = 0;
  std::size_t conservation_violations = 0;
  std::size_t tie_violations = 0;
};

/// Random tensors through elementwise_max_k: (a) output equals the
/// elementwise maximum, (b) pathway gradients sum exactly to the upstream
/// gradient, (c) the recorded winner is the lowest-index maximum and is
/// reproduced on a repeat call. Half the trials draw from a small integer
/// grid so ties are common.
inline RoutingPropertyCounts routing_properties(std::size_t trials, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> kdist(2, 4), dim(1, 4), grid(-2, 2);
  std::uniform_real_distribution<double> real(-1.0, 1.0);
  RoutingPropertyCounts counts;
  for (std::size_t t = 0; t < trials; ++t) {
    const auto k = static_cast<std::size_t>(kdist(rng));
    const Shape shape{static_cast<std::size_t>(dim(rng)), static_cast<std::size_t>(dim(rng)),
                      static_cast<std::size_t>(dim(rng)), static_cast<std::size_t>(dim(rng))};
    const bool ties = t % 2 == 1;
    std::vector<Tensor<double>> inputs;
    for (std::size_t j = 0; j < k; ++j) {
      Tensor<double> x(shape);
      for (auto& v : x.data()) v = ties ? static_cast<double>(grid(rng)) : real(rng);
      x.set_requires_grad(true);
      inputs.push_back(x);
    }
    const std::size_t n = inputs[0].numel();
    const auto upstream = weights(n, rng);
    auto result = elementwise_max_k<double>(inputs, true);
    backward(weighted_sum<double>(result.output, upstream));
    const auto repeat = elementwise_max_k<double>(inputs, true).routing.winners;
    for (std::size_t i = 0; i < n; ++i) {
      double best = inputs[0][i];
      std::size_t first = 0, hits = 1;
      for (std::size_t j = 1; j < k; ++j) {
        if (inputs[j][i] > best) {
          best = inputs[j][i], first = j, hits = 1;
        } else if (inputs[j][i] == best) {
          ++hits;
        }
      }
      if (hits > 1) ++counts.ties;
      if (result.output[i] != best) ++counts.max_violations;
      if (result.routing.winners[i] != first || repeat[i] != first) ++counts.tie_violations;
      double total = 0;
      for (auto& in : inputs) total += in.has_grad() ? in.grad()[i] : 0.0;
      if (total != upstream[i]) ++counts.conservation_violations;
    }
    counts.elements += n;
    ++counts.trials;
  }
  return counts;
}

/// Number of inputs (out of `trials`) for which rebuilding the output of
/// three identity-shortcut units from their winner masks is not bit-exact.
inline std::size_t composition_mismatches(std::size_t trials, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<CoPaUnit<double>> units;
  for (int l = 0; l < 3; ++l) units.emplace_back(stack_unit_spec(2, 5, 3), l);
  for (auto& u : units) {
    ParameterRegistry<double> registry;
    u.collect(registry, "u");
    randomize_parameters(registry, rng);
  }
  {
    NoGradGuard no_grad;
    forward_stack<double>(uniform({8, 5, 4, 4}, rng, -1, 1, false), units, true);
  }
  std::size_t mismatches = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    auto x = uniform({2, 5, 4, 4}, rng, -2, 2, false);
    std::vector<RoutingMask> masks;
    Tensor<double> y;
    {
      NoGradGuard no_grad;
      y = forward_stack<double>(x, units, false, &masks);
    }
    if (compose_winners<double>(x, units, masks).values() != y.values()) ++mismatches;
  }
  return mismatches;
}

inline NetworkConfig small_network(std::size_t k) {
  NetworkConfig c;
  c.depth = 20;
  c.k = k;
  c.widths = {6, 10, 14};
  c.mids = {3, 5, 7};
  c.input_size = 16;
  c.dropout = 0.2;
  return c;
}

/// Runs `batches` training-mode forward/backward passes through a k = 1
/// model and the reference pre-activation ResNet loaded from it. Returns
/// "" when logits, every gradient and every running statistic agree bit
/// for bit, otherwise the first difference.
template <typename T>
std::string k1_equivalence(std::size_t batches, std::uint64_t seed,
                           NetworkConfig config = small_network(1)) {
  config.k = 1;
  Model<T> model(config);
  std::mt19937_64 rng(seed);
  auto registry = model.parameters();
  randomize_parameters(registry, rng, 0.3);
  PreActResNet<T> reference(model);
  const auto& ref = reference.parameters();
  for (std::size_t b = 0; b < batches; ++b) {
    Tensor<T> x({4, config.input_channels, config.input_size, config.input_size});
    std::uniform_real_distribution<double> dist(-2, 2);
    for (auto& v : x.data()) v = static_cast<T>(dist(rng));
    std::vector<int> labels;
    for (int i = 0; i < 4; ++i) labels.push_back(static_cast<int>(rng() % config.num_classes));
    const auto mask_seed = rng();
    std::mt19937_64 mask_a(mask_seed), mask_b(mask_seed);
    typename Model<T>::ForwardOptions opt;
    opt.training = true;
    opt.rng = &mask_a;
    auto la = model.forward(x, opt).logits;
    auto lb = reference.forward(x, true, &mask_b);
    const std::string where = "batch " + std::to_string(b) + ": ";
    if (la.values() != lb.values()) return where + "training logits differ";
    registry.zero_grad();
    for (auto t : ref) t.zero_grad();
    backward(softmax_cross_entropy<T>(la, labels));
    backward(softmax_cross_entropy<T>(lb, labels));
    for (std::size_t i = 0; i < ref.size(); ++i) {
      const auto ga = registry.parameters()[i].tensor.grad();
      const auto gb = ref[i].grad();
      if (!std::equal(ga.begin(), ga.end(), gb.begin(), gb.end())) {
        return where + "gradient of " + registry.parameters()[i].name + " differs";
      }
    }
    const auto buffers = reference.buffers();
    for (std::size_t i = 0; i < buffers.size(); ++i) {
      if (*registry.buffers()[i].values != *buffers[i]) {
        return where + registry.buffers()[i].name + " differs";
      }
    }
    NoGradGuard no_grad;
    if (model.forward(x).logits.values() != reference.forward(x, false).values()) {
      return where + "eval logits differ";
    }
  }
  return "";
}

/// Saves a briefly trained model, reloads it into a fresh one and compares
/// eval logits bit for bit. Returns "" on success.
template <typename T>
std::string checkpoint_round_trip(std::uint64_t seed, const std::filesystem::path* file = nullptr) {
  auto config = small_network(2);
  config.input_size = 32;
  Model<T> model(config);
  std::mt19937_64 rng(seed);
  {
    auto reg = model.parameters();
    he_init(reg, rng);
  }
  const auto train_set = make_synthetic(4, 4, seed);
  const auto norm = Normalizer::fit(train_set);
  TrainPlan plan;
  plan.total_epochs = 1;
  plan.batch_size = 8;
  plan.lr_drop_fractions = {};
  SgdOptimizer<T> sgd(model.parameters(), plan.momentum, plan.weight_decay);
  train(model, sgd, train_set, norm, plan, rng);
  const auto test_set = make_synthetic(4, 2, seed + 1, "test");
  std::vector<T> before, after;
  evaluate(model, test_set, norm, 3, &before);
  Checkpoint ck;
  if (file) {
    save_checkpoint(model, *file, 1, rng, fnv1a64(plan.to_text()), &sgd);
    ck = read_checkpoint(*file);
  } else {
    ck = decode_checkpoint(encode_checkpoint(make_checkpoint(model, 1, rng, 0, &sgd)), "memory");
  }
  Model<T> fresh(ck.config);
  restore(fresh, ck);
  evaluate(fresh, test_set, norm, 5, &after);
  if (before.size() != after.size()) return "logit count changed";
  if (std::memcmp(before.data(), after.data(), before.size() * sizeof(T)) != 0) {
    return "eval logits differ after reload";
  }
  return "";
}

}  // namespace checks

struct Invariant {
  std::string module;
  std::string name;
  // Returns "" on success, otherwise a description of the failure.
  std::function<std::string()> run;
};

struct InvariantOutcome {
  std::string module;
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0;
};

struct SelfCheckReport {
  std::vector<InvariantOutcome> outcomes;

  std::size_t failures() const {
    std::size_t n = 0;
    for (const auto& o : outcomes) n += o.passed ? 0 : 1;
    return n;
  }
  bool passed() const { return failures() == 0; }

  std::string to_text() const {
    std::ostringstream out;
    out << std::fixed << std::setprecision(2);
    for (const auto& o : outcomes) {
      out << (o.passed ? "PASS " : "FAIL ") << o.module << '/' << o.name << " (" << o.seconds
          << " s)";
      if (!o.passed) out << ": " << o.detail;
      out << '\n';
    }
    out << outcomes.size() - failures() << '/' << outcomes.size() << " invariants hold\n";
    return out.str();
  }
};

namespace detail {

inline std::string gradient_verdict(const GradCheckResult& r, const std::string& what) {
  if (r.checked == 0) return what + ": no element could be checked";
  if (r.max_relative_error >= 1e-4) {
    std::ostringstream msg;
    msg << what << ": max relative error " << r.max_relative_error << " at " << r.worst;
    return msg.str();
  }
  return "";
}

}  // namespace detail

/// Every invariant the self-check runs, in report order.
inline const std::vector<Invariant>& invariant_registry() {
  static const std::vector<Invariant> registry{
      {"tensor_engine", "gradient_check",
       [] {
         for (const auto& g : checks::primitive_gradients(11)) {
           auto verdict = detail::gradient_verdict(g.result, g.op);
           if (!verdict.empty()) return verdict;
         }
         return std::string();
       }},
      {"tensor_engine", "routing_conservation",
       [] {
         const auto c = checks::routing_properties(200, 12);
         if (c.conservation_violations == 0) return std::string();
         return std::to_string(c.conservation_violations) + " of " + std::to_string(c.elements) +
                " elements: pathway gradients do not sum to the upstream gradient";
       }},
      {"tensor_engine", "max_forward_and_tie_rule",
       [] {
         const auto c = checks::routing_properties(200, 13);
         if (c.ties == 0) return std::string("no ties were exercised");
         if (c.max_violations + c.tie_violations == 0) return std::string();
         return std::to_string(c.max_violations) + " wrong maxima, " +
                std::to_string(c.tie_violations) + " wrong winners";
       }},
      {"copa_unit", "stack_gradient_check",
       [] { return detail::gradient_verdict(checks::stack_gradient(14), "3-unit stack"); }},
      {"copa_unit", "winner_composition",
       [] {
         const auto bad = checks::composition_mismatches(20, 15);
         return bad == 0 ? std::string()
                         : std::to_string(bad) + " of 20 inputs not reproduced bit-exactly";
       }},
      {"model_builder", "k1_equivalence",
       [] {
         auto r = checks::k1_equivalence<double>(3, 16);
         if (r.empty()) r = checks::k1_equivalence<float>(3, 17);
         return r;
       }},
      {"trainer", "zero_lr_step",
       [] {
         Model<float> model(checks::small_network(2));
         std::mt19937_64 rng(18);
         auto reg = model.parameters();
         he_init(reg, rng);
         std::vector<std::vector<float>> before;
         for (const auto& p : reg.parameters()) before.push_back(p.tensor.values());
         for (auto& p : reg.parameters()) {
           auto g = p.tensor.mutable_grad();
           std::fill(g.begin(), g.end(), 1.0f);
         }
         SgdOptimizer<float> sgd(reg, 0.9, 1e-4);
         sgd.step(0.0);
         for (std::size_t i = 0; i < before.size(); ++i) {
           if (reg.parameters()[i].tensor.values() != before[i]) {
             return "lr = 0 changed " + reg.parameters()[i].name;
           }
         }
         return std::string();
       }},
      {"trainer", "checkpoint_round_trip",
       [] {
         auto r = checks::checkpoint_round_trip<float>(19);
         if (r.empty()) r = checks::checkpoint_round_trip<double>(20);
         return r;
       }},
      {"analysis", "win_fraction_conservation",
       [] {
         auto config = checks::small_network(3);
         config.depth = 11;
         config.input_size = 32;
         Model<float> model(config);
         std::mt19937_64 rng(21);
         auto reg = model.parameters();
         checks::randomize_parameters(reg, rng, 0.3);
         const auto ds = make_synthetic(3, 3, 22);
         const auto norm = Normalizer::fit(ds);
         const std::size_t stage = 1;
         const auto profile = trace(model, ds, norm, stage, 4);
         std::vector<std::size_t> all(ds.size());
         std::iota(all.begin(), all.end(), std::size_t{0});
         typename Model<float>::ForwardOptions opt;
         opt.capture_stage = stage;
         NoGradGuard no_grad;
         const auto masks = model.forward(make_batch<float>(ds, all, norm).images, opt).routing;
         RoutingProfile recount(profile.unit_ids, profile.maps, profile.categories, 3);
         for (std::size_t u = 0; u < masks.size(); ++u) {
           const auto& mk = masks[u];
           const std::size_t plane = mk.shape[2] * mk.shape[3];
           for (std::size_t i = 0; i < mk.winners.size(); ++i) {
             const std::size_t n = i / (profile.maps * plane);
             const std::size_t m = (i / plane) % profile.maps;
             ++recount.win(u, m, static_cast<std::size_t>(ds.labels[n]), mk.winners[i]);
           }
         }
         if (!(recount == profile)) return std::string("traced counts differ from mask recount");
         for (std::size_t u = 0; u < profile.units(); ++u) {
           for (std::size_t m = 0; m < profile.maps; ++m) {
             for (std::size_t c = 0; c < profile.categories.size(); ++c) {
               double sum = 0;
               for (std::size_t k = 0; k < 3; ++k) sum += profile.fraction(u, m, c, k);
               if (std::abs(sum - 1.0) > 1e-12) {
                 return "win fractions sum to " + std::to_string(sum) + " at unit " +
                        std::to_string(u) + " map " + std::to_string(m);
               }
             }
           }
         }
         return std::string();
       }},
  };
  return registry;
}

inline SelfCheckReport run_selfcheck(const std::function<void(const InvariantOutcome&)>& on_result = {}) {
  SelfCheckReport report;
  for (const auto& inv : invariant_registry()) {
    InvariantOutcome o{inv.module, inv.name, false, "", 0};
    const auto start = std::chrono::steady_clock::now();
    try {
      o.detail = inv.run();
      o.passed = o.detail.empty();
    } catch (const std::exception& e) {
      o.detail = std::string("threw: ") + e.what();
    }
    o.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (on_result) on_result(o);
    report.outcomes.push_back(std::move(o));
  }
  return report;
}

}  // namespace copanet
