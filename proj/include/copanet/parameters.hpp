#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "copanet/ops.hpp"
#include "copanet/tensor.hpp"

namespace copanet {

enum class ParamRole { conv_weight, bn_gamma, bn_beta, linear_weight, linear_bias };

inline bool decays(ParamRole role) {
  return role == ParamRole::conv_weight || role == ParamRole::linear_weight;
}

template <typename T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;
  ParamRole role;
};

/// Non-trainable state saved with a checkpoint (BN running statistics).
template <typename T>
struct NamedBuffer {
  std::string name;
  std::vector<T>* values;
};

/// Ordered view of a model's trainable tensors and buffers. Entries point
/// into the owning model, so a registry must not outlive it.
template <typename T>
class ParameterRegistry {
 public:
  void add(std::string name, Tensor<T> tensor, ParamRole role) {
    params_.push_back({std::move(name), std::move(tensor), role});
  }

  void add_batchnorm(const std::string& prefix, BatchNormState<T>& bn) {
    add(prefix + ".gamma", bn.gamma, ParamRole::bn_gamma);
    add(prefix + ".beta", bn.beta, ParamRole::bn_beta);
    buffers_.push_back({prefix + ".running_mean", &bn.running_mean});
    buffers_.push_back({prefix + ".running_var", &bn.running_var});
  }

  const std::vector<NamedParameter<T>>& parameters() const { return params_; }
  std::vector<NamedParameter<T>>& parameters() { return params_; }
  const std::vector<NamedBuffer<T>>& buffers() const { return buffers_; }

  std::size_t scalar_count() const {
    std::size_t total = 0;
    for (const auto& p : params_) total += p.tensor.numel();
    return total;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

 private:
  std::vector<NamedParameter<T>> params_;
  std::vector<NamedBuffer<T>> buffers_;
};

}  // namespace copanet
