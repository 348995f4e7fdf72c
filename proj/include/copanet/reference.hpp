#pragma once

#include <cstddef>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "copanet/errors.hpp"
#include "copanet/model.hpp"
#include "copanet/ops.hpp"
#include "copanet/tensor.hpp"

namespace copanet {

/// A pre-activation ResNet written directly against the ops, with no CoPa
/// unit or max merge. It mirrors the layout of a k = 1 model and is loaded
/// from one by parameter name, so the two can be compared op for op.
template <typename T>
class PreActResNet {
 public:
  explicit PreActResNet(Model<T>& source) : config_(source.config()) {
    if (config_.k != 1) {
      throw ConfigError("the reference ResNet mirrors k = 1 models, got k = " +
                        std::to_string(config_.k));
    }
    auto registry = source.parameters();
    std::map<std::string, Tensor<T>> params;
    std::map<std::string, std::vector<T>*> buffers;
    for (auto& p : registry.parameters()) params.emplace(p.name, p.tensor);
    for (auto& b : registry.buffers()) buffers.emplace(b.name, b.values);

    auto take = [&](const std::string& name) {
      const auto it = params.find(name);
      if (it == params.end()) throw ConfigError("source model lacks " + name);
      Tensor<T> copy = it->second.clone();
      copy.set_requires_grad(true);
      order_.push_back(copy);
      return copy;
    };
    auto take_bn = [&](const std::string& prefix) {
      BatchNormState<T> bn(params.at(prefix + ".gamma").numel());
      bn.gamma = take(prefix + ".gamma");
      bn.beta = take(prefix + ".beta");
      bn.running_mean = *buffers.at(prefix + ".running_mean");
      bn.running_var = *buffers.at(prefix + ".running_var");
      return bn;
    };

    stem_ = take("stem.conv");
    const std::size_t convs = config_.convs_per_pathway();
    const std::size_t units = config_.units_per_stage();
    for (std::size_t s = 0; s < kStages; ++s) {
      for (std::size_t u = 0; u < units; ++u) {
        const std::string base =
            "stage" + std::to_string(s + 1) + ".unit" + std::to_string(u);
        Block block;
        for (std::size_t i = 0; i < convs; ++i) {
          const std::string layer = base + ".path0.layer" + std::to_string(i);
          block.bns.push_back(take_bn(layer + ".bn"));
          block.convs.push_back(take(layer + ".conv"));
        }
        if (params.count(base + ".projection")) block.projection = take(base + ".projection");
        blocks_[s].push_back(std::move(block));
      }
    }
    head_bn_ = take_bn("head.bn");
    fc_weight_ = take("head.fc.weight");
    fc_bias_ = take("head.fc.bias");
  }

  Tensor<T> forward(const Tensor<T>& images, bool training, std::mt19937_64* rng = nullptr) {
    Tensor<T> h = conv2d(images, stem_, 1, 1);
    Tensor<T> carried;
    const bool reuse = config_.variant == Variant::cross_block;
    for (std::size_t s = 0; s < kStages; ++s) {
      for (auto& block : blocks_[s]) {
        Tensor<T> r = h;
        for (std::size_t i = 0; i < block.convs.size(); ++i) {
          const std::size_t kernel = block.convs[i].dim(2);
          r = conv2d(relu(batchnorm2d(r, block.bns[i], training)), block.convs[i], 1, kernel / 2);
        }
        h = add(block.projection.defined() ? conv2d(h, block.projection, 1, 0) : h, r);
      }
      if (s + 1 < kStages) {
        Tensor<T> features = reuse && carried.defined() ? concat_channels<T>({carried, h}) : h;
        h = dropout(avgpool2d(features, 2, 2), config_.dropout, training, rng);
        if (reuse) carried = h;
      }
    }
    Tensor<T> features = reuse ? concat_channels<T>({carried, h}) : h;
    features = global_avgpool(relu(batchnorm2d(features, head_bn_, training)));
    return linear(features, fc_weight_, fc_bias_);
  }

  /// Parameters in the source model's registry order.
  const std::vector<Tensor<T>>& parameters() const { return order_; }

  /// Running statistics in the source model's registry order.
  std::vector<const std::vector<T>*> buffers() const {
    std::vector<const std::vector<T>*> out;
    for (std::size_t s = 0; s < kStages; ++s) {
      for (const auto& block : blocks_[s]) {
        for (const auto& bn : block.bns) {
          out.push_back(&bn.running_mean);
          out.push_back(&bn.running_var);
        }
      }
    }
    out.push_back(&head_bn_.running_mean);
    out.push_back(&head_bn_.running_var);
    return out;
  }

 private:
  struct Block {
    std::vector<BatchNormState<T>> bns;
    std::vector<Tensor<T>> convs;
    Tensor<T> projection;
  };

  NetworkConfig config_;
  Tensor<T> stem_;
  std::array<std::vector<Block>, kStages> blocks_;
  BatchNormState<T> head_bn_;
  Tensor<T> fc_weight_;
  Tensor<T> fc_bias_;
  std::vector<Tensor<T>> order_;
};

}  // namespace copanet
