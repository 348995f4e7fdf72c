#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "copanet/errors.hpp"
#include "copanet/ops.hpp"
#include "copanet/parameters.hpp"
#include "copanet/tensor.hpp"

namespace copanet {

enum class PathwayKind { bottleneck, basic };

inline const char* to_string(PathwayKind kind) {
  return kind == PathwayKind::bottleneck ? "bottleneck" : "basic";
}

struct PathwaySpec {
  PathwayKind kind = PathwayKind::bottleneck;
  std::size_t in_channels = 0;
  std::size_t mid_channels = 0;
  std::size_t out_channels = 0;
  std::size_t stride = 1;  // applied by the 3x3 conv
};

struct CoPaUnitSpec {
  std::size_t pathways = 2;
  PathwaySpec pathway;

  bool needs_projection() const {
    return pathway.in_channels != pathway.out_channels || pathway.stride != 1;
  }
};

/// BN -> ReLU -> conv. Every conv inside a pathway is pre-activated, so the
/// pathway output (the last conv) is never normalized.
template <typename T>
struct PreActConv {
  BatchNormState<T> bn;
  Tensor<T> weight;  // OIHW
  std::size_t stride = 1;
  std::size_t padding = 0;

  PreActConv(std::size_t in, std::size_t out, std::size_t kernel,
             std::size_t stride_)
      : bn(in),
        weight(Tensor<T>::parameter({out, in, kernel, kernel})),
        stride(stride_),
        padding(kernel / 2) {}

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    return conv2d(relu(batchnorm2d(x, bn, training)), weight, stride, padding);
  }
};

/// One residual transformation h(x): bottleneck (1x1, 3x3, 1x1) or basic
/// (3x3, 3x3).
template <typename T>
class Pathway {
 public:
  explicit Pathway(const PathwaySpec& spec) : spec_(spec) {
    if (spec.in_channels == 0 || spec.mid_channels == 0 || spec.out_channels == 0) {
      throw ConfigError("pathway channel counts must be positive");
    }
    if (spec.kind == PathwayKind::bottleneck) {
      layers_.emplace_back(spec.in_channels, spec.mid_channels, 1, 1);
      layers_.emplace_back(spec.mid_channels, spec.mid_channels, 3, spec.stride);
      layers_.emplace_back(spec.mid_channels, spec.out_channels, 1, 1);
    } else {
      layers_.emplace_back(spec.in_channels, spec.mid_channels, 3, spec.stride);
      layers_.emplace_back(spec.mid_channels, spec.out_channels, 3, 1);
    }
  }

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    Tensor<T> h = x;
    for (auto& layer : layers_) h = layer.forward(h, training);
    return h;
  }

  const PathwaySpec& spec() const { return spec_; }
  std::vector<PreActConv<T>>& layers() { return layers_; }
  const std::vector<PreActConv<T>>& layers() const { return layers_; }

  void collect(ParameterRegistry<T>& registry, const std::string& prefix) {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const std::string base = prefix + ".layer" + std::to_string(i);
      registry.add_batchnorm(base + ".bn", layers_[i].bn);
      registry.add(base + ".conv", layers_[i].weight, ParamRole::conv_weight);
    }
  }

 private:
  PathwaySpec spec_;
  std::vector<PreActConv<T>> layers_;
};

/// Competitive pathway unit: z_k = shortcut(x) + h_k(x), output = max_k z_k.
/// The projection shortcut, when needed, is one 1x1 conv shared by all
/// pathways. With a single pathway no max node is created and the unit is
/// a plain pre-activation residual unit.
template <typename T>
class CoPaUnit {
 public:
  struct Output {
    Tensor<T> value;
    std::optional<RoutingMask> routing;
  };

  explicit CoPaUnit(const CoPaUnitSpec& spec, int id = -1) : spec_(spec), id_(id) {
    if (spec.pathways == 0) throw ConfigError("a CoPa unit needs at least one pathway");
    if (spec.pathways > 255) throw ConfigError("at most 255 pathways per unit");
    pathways_.reserve(spec.pathways);
    for (std::size_t k = 0; k < spec.pathways; ++k) pathways_.emplace_back(spec.pathway);
    if (spec.needs_projection()) {
      projection_ = Tensor<T>::parameter(
          {spec.pathway.out_channels, spec.pathway.in_channels, 1, 1});
    }
  }

  Output forward(const Tensor<T>& x, bool training, bool capture = false) {
    check_input(x);
    const Tensor<T> base = shortcut(x);
    if (pathways_.size() == 1) {
      return {add(base, pathways_[0].forward(x, training)), std::nullopt};
    }
    std::vector<Tensor<T>> candidates;
    candidates.reserve(pathways_.size());
    for (auto& pathway : pathways_) {
      candidates.push_back(add(base, pathway.forward(x, training)));
    }
    auto merged = elementwise_max_k(candidates, capture);
    Output out{std::move(merged.output), std::nullopt};
    if (capture) {
      merged.routing.unit = id_;
      out.routing = std::move(merged.routing);
    }
    return out;
  }

  Tensor<T> shortcut(const Tensor<T>& x) const {
    return projection_.defined()
               ? conv2d(x, projection_, spec_.pathway.stride, 0)
               : x;
  }

  /// h_k(x) alone.
  Tensor<T> residual(std::size_t k, const Tensor<T>& x, bool training) {
    check_input(x);
    return pathways_.at(k).forward(x, training);
  }

  const CoPaUnitSpec& spec() const { return spec_; }
  int id() const { return id_; }
  std::size_t pathway_count() const { return pathways_.size(); }
  bool has_projection() const { return projection_.defined(); }
  Pathway<T>& pathway(std::size_t k) { return pathways_.at(k); }
  const Pathway<T>& pathway(std::size_t k) const { return pathways_.at(k); }
  const Tensor<T>& projection() const { return projection_; }

  void collect(ParameterRegistry<T>& registry, const std::string& prefix) {
    for (std::size_t k = 0; k < pathways_.size(); ++k) {
      pathways_[k].collect(registry, prefix + ".path" + std::to_string(k));
    }
    if (projection_.defined()) {
      registry.add(prefix + ".projection", projection_, ParamRole::conv_weight);
    }
  }

 private:
  void check_input(const Tensor<T>& x) const {
    if (x.rank() != 4 || x.dim(1) != spec_.pathway.in_channels) {
      throw ConfigError("CoPa unit " + std::to_string(id_) + " expects " +
                        std::to_string(spec_.pathway.in_channels) +
                        " input channels, got tensor " + to_string(x.shape()));
    }
  }

  CoPaUnitSpec spec_;
  int id_;
  std::vector<Pathway<T>> pathways_;
  Tensor<T> projection_;
};

/// Runs a stack of units, optionally capturing every unit's routing mask.
template <typename T>
Tensor<T> forward_stack(const Tensor<T>& x, std::span<CoPaUnit<T>> units,
                        bool training, std::vector<RoutingMask>* masks = nullptr) {
  Tensor<T> h = x;
  for (auto& unit : units) {
    auto out = unit.forward(h, training, masks != nullptr);
    if (masks && out.routing) masks->push_back(std::move(*out.routing));
    h = std::move(out.value);
  }
  return h;
}

/// Rebuilds a stack's output from its input by adding, at each element, only
/// the residual of the pathway that won there: for three units this is
/// x + h_1(x) + h_2(y_1) + h_3(y_2) with the winning h at each step. Units
/// must use identity shortcuts and the masks must come from an eval-mode
/// forward pass on the same input; the result then matches that pass
/// bit for bit.
template <typename T>
Tensor<T> compose_winners(const Tensor<T>& x0, std::span<CoPaUnit<T>> units,
                          std::span<const RoutingMask> masks) {
  if (masks.size() != units.size()) {
    throw UsageError("compose_winners: " + std::to_string(masks.size()) +
                     " masks for " + std::to_string(units.size()) + " units");
  }
  NoGradGuard no_grad;
  Tensor<T> y = x0.clone();
  y.set_requires_grad(false);
  for (std::size_t l = 0; l < units.size(); ++l) {
    auto& unit = units[l];
    const auto& mask = masks[l];
    if (unit.has_projection()) {
      throw UsageError("compose_winners: unit " + std::to_string(l) +
                       " has a projection shortcut");
    }
    if (mask.shape != y.shape() || mask.pathways != unit.pathway_count() ||
        mask.winners.size() != y.numel()) {
      throw UsageError("compose_winners: mask " + std::to_string(l) + " shape " +
                       to_string(mask.shape) + " with " +
                       std::to_string(mask.pathways) +
                       " pathways does not match activation " +
                       to_string(y.shape()) + " with " +
                       std::to_string(unit.pathway_count()) + " pathways");
    }
    std::vector<Tensor<T>> residuals;
    for (std::size_t k = 0; k < unit.pathway_count(); ++k) {
      residuals.push_back(unit.residual(k, y, false));
    }
    Tensor<T> next(y.shape());
    for (std::size_t i = 0; i < y.numel(); ++i) {
      next[i] = y[i] + residuals[mask.winners[i]][i];
    }
    y = std::move(next);
  }
  return y;
}

}  // namespace copanet
