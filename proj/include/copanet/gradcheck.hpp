#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "copanet/tensor.hpp"

namespace copanet {

struct GradCheckOptions {
  double step = 1e-5;
  // Denominator floor for the relative error, so near-zero gradients are
  // compared on an absolute scale.
  double floor = 1e-4;
  // One-sided differences that disagree by more than this (relative) mean
  // the probe straddled a ReLU or max kink; the step is shrunk and retried.
  double kink_tolerance = 1e-4;
  int max_step_refinements = 2;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
  std::string worst;  // "<tensor>[index]: analytic vs numeric"
};

/// Compares analytic gradients against central finite differences for
/// every element of every tensor in `wrt`. `loss_fn` must rebuild the
/// scalar loss from the current tensor values each time it is called.
inline GradCheckResult check_gradients(
    const std::function<Tensor<double>()>& loss_fn,
    std::vector<std::pair<std::string, Tensor<double>>> wrt,
    const GradCheckOptions& options = {}) {
  for (auto& [name, t] : wrt) t.zero_grad();
  {
    auto loss = loss_fn();
    backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& [name, t] : wrt) {
    analytic.emplace_back(t.has_grad()
                              ? std::vector<double>(t.grad().begin(), t.grad().end())
                              : std::vector<double>(t.numel(), 0.0));
  }

  auto eval = [&] {
    NoGradGuard guard;
    return loss_fn().item();
  };
  const double base = eval();

  GradCheckResult result;
  for (std::size_t p = 0; p < wrt.size(); ++p) {
    auto& [name, t] = wrt[p];
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double original = t[i];
      double h = options.step;
      bool accepted = false;
      double numeric = 0.0;
      for (int attempt = 0; attempt <= options.max_step_refinements; ++attempt) {
        t[i] = original + h;
        const double plus = eval();
        t[i] = original - h;
        const double minus = eval();
        t[i] = original;
        const double forward = (plus - base) / h;
        const double backward_diff = (base - minus) / h;
        const double scale =
            std::max({std::abs(forward), std::abs(backward_diff), options.floor});
        if (std::abs(forward - backward_diff) <= options.kink_tolerance * scale) {
          numeric = (plus - minus) / (2 * h);
          accepted = true;
          break;
        }
        h /= 10;
      }
      if (!accepted) {
        ++result.skipped_kinks;
        continue;
      }
      ++result.checked;
      const double a = analytic[p][i];
      const double err = std::abs(a - numeric) /
                         std::max({std::abs(a), std::abs(numeric), options.floor});
      if (err > result.max_relative_error) {
        result.max_relative_error = err;
        result.worst = name + "[" + std::to_string(i) + "]: analytic " +
                       std::to_string(a) + " vs numeric " + std::to_string(numeric);
      }
    }
  }
  return result;
}

}  // namespace copanet
