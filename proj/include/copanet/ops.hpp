#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "copanet/errors.hpp"
#include "copanet/tensor.hpp"

namespace copanet {

namespace testing_hooks {
/// Fault injection for the self-check: when set, max_k backward also leaks
/// the upstream gradient into pathway 0 for elements it lost.
inline std::atomic<bool>& corrupt_max_backward() {
  static std::atomic<bool> flag{false};
  return flag;
}
}  // namespace testing_hooks

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

// Sum of f(0..n) in a fixed order independent of buffer alignment: 16
// interleaved lanes in T, combined in double.
template <typename T, typename F>
double lane_sum(std::size_t n, F&& f) {
  constexpr std::size_t kLanes = 16;
  T acc[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    for (std::size_t j = 0; j < kLanes; ++j) acc[j] += f(i + j);
  }
  for (std::size_t j = 0; i < n; ++i, ++j) acc[j] += f(i);
  double total = 0;
  for (T v : acc) total += v;
  return total;
}

inline void require_rank(const Shape& shape, std::size_t rank, const char* op) {
  if (shape.size() != rank) {
    throw ConfigError(std::string(op) + ": expected rank " +
                      std::to_string(rank) + " tensor, got " + to_string(shape));
  }
}

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t kernel_h, kernel_w, stride, pad;
  std::size_t out_h, out_w;

  bool pointwise() const {
    return kernel_h == 1 && kernel_w == 1 && stride == 1 && pad == 0;
  }
  std::size_t col_rows() const { return channels * kernel_h * kernel_w; }
  std::size_t col_cols() const { return out_h * out_w; }
};

// Output columns [lo, hi) whose input column ow * stride + kj - pad lies
// inside the image.
inline std::pair<std::size_t, std::size_t> valid_columns(const ConvGeometry& g,
                                                         std::size_t kj) {
  const std::size_t shift = kj >= g.pad ? 0 : g.pad - kj;
  const std::size_t lo = (shift + g.stride - 1) / g.stride;
  const std::size_t limit = g.width + g.pad - kj;  // iw < width
  std::size_t hi = (limit + g.stride - 1) / g.stride;
  hi = std::min(hi, g.out_w);
  return {std::min(lo, hi), hi};
}

template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* cols) {
  const std::size_t ncols = g.col_cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
        T* row = cols + ((c * g.kernel_h + ki) * g.kernel_w + kj) * ncols;
        const auto [lo, hi] = valid_columns(g, kj);
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) -
                          static_cast<std::ptrdiff_t>(g.pad);
          T* dst = row + oh * g.out_w;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* src = image + (c * g.height + ih) * g.width;
          std::fill(dst, dst + lo, T(0));
          if (lo < hi) {
            // Index of the first valid input column; nonnegative by construction.
            const std::size_t first = lo * g.stride + kj - g.pad;
            if (g.stride == 1) {
              std::copy(src + first, src + first + (hi - lo), dst + lo);
            } else {
              for (std::size_t ow = lo; ow < hi; ++ow) {
                dst[ow] = src[first + (ow - lo) * g.stride];
              }
            }
          }
          std::fill(dst + hi, dst + g.out_w, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* image) {
  const std::size_t ncols = g.col_cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
        const T* row = cols + ((c * g.kernel_h + ki) * g.kernel_w + kj) * ncols;
        const auto [lo, hi] = valid_columns(g, kj);
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) -
                          static_cast<std::ptrdiff_t>(g.pad);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) continue;
          const T* src = row + oh * g.out_w;
          if (lo >= hi) continue;
          T* dst = image + (c * g.height + ih) * g.width + (lo * g.stride + kj - g.pad);
          if (g.stride == 1) {
            for (std::size_t ow = lo; ow < hi; ++ow) dst[ow - lo] += src[ow];
          } else {
            for (std::size_t ow = lo; ow < hi; ++ow) dst[(ow - lo) * g.stride] += src[ow];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D cross-correlation without bias. input NCHW, weight OIHW.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 std::size_t stride, std::size_t padding) {
  detail::require_rank(input.shape(), 4, "conv2d input");
  detail::require_rank(weight.shape(), 4, "conv2d weight");
  if (input.dim(1) != weight.dim(1)) {
    throw ConfigError("conv2d: input " + to_string(input.shape()) +
                      " has " + std::to_string(input.dim(1)) +
                      " channels but weight " + to_string(weight.shape()) +
                      " expects " + std::to_string(weight.dim(1)));
  }
  if (stride != 1 && stride != 2) {
    throw ConfigError("conv2d: stride must be 1 or 2, got " +
                      std::to_string(stride));
  }
  if (padding > 1) {
    throw ConfigError("conv2d: padding must be 0 or 1, got " +
                      std::to_string(padding));
  }
  const std::size_t n = input.dim(0), h = input.dim(2), w = input.dim(3);
  const std::size_t o = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (h + 2 * padding < kh || w + 2 * padding < kw) {
    throw ConfigError("conv2d: kernel " + to_string(weight.shape()) +
                      " larger than padded input " + to_string(input.shape()));
  }
  const detail::ConvGeometry g{input.dim(1), h,  w,
                               kh,           kw, stride,
                               padding,      (h + 2 * padding - kh) / stride + 1,
                               (w + 2 * padding - kw) / stride + 1};

  auto out = make_op_output<T>("conv2d", {n, o, g.out_h, g.out_w}, {input, weight});
  const std::size_t in_stride = g.channels * h * w;
  const std::size_t out_stride = o * g.col_cols();
  std::vector<T> cols(g.pointwise() ? 0 : g.col_rows() * g.col_cols());
  detail::ConstMatMap<T> wmat(weight.data().data(), o, g.col_rows());
  for (std::size_t b = 0; b < n; ++b) {
    const T* src = input.data().data() + b * in_stride;
    if (!g.pointwise()) detail::im2col(src, g, cols.data());
    detail::ConstMatMap<T> xmat(g.pointwise() ? src : cols.data(), g.col_rows(),
                                g.col_cols());
    detail::MatMap<T> ymat(out.data().data() + b * out_stride, o, g.col_cols());
    ymat.noalias() = wmat * xmat;
  }

  if (out.requires_grad()) {
    out.node()->backward = [g, n, o, in_stride, out_stride](const Node<T>& self) {
      auto& in = *self.inputs[0];
      auto& wt = *self.inputs[1];
      std::vector<T> cols(g.pointwise() ? 0 : g.col_rows() * g.col_cols());
      detail::ConstMatMap<T> wmat(wt.value.data(), o, g.col_rows());
      T* wgrad = wt.requires_grad ? wt.ensure_grad().data() : nullptr;
      T* igrad = in.requires_grad ? in.ensure_grad().data() : nullptr;
      for (std::size_t b = 0; b < n; ++b) {
        detail::ConstMatMap<T> dy(self.grad.data() + b * out_stride, o,
                                  g.col_cols());
        const T* src = in.value.data() + b * in_stride;
        if (wgrad) {
          if (!g.pointwise()) detail::im2col(src, g, cols.data());
          detail::ConstMatMap<T> xmat(g.pointwise() ? src : cols.data(),
                                      g.col_rows(), g.col_cols());
          detail::MatMap<T> dw(wgrad, o, g.col_rows());
          dw.noalias() += dy * xmat.transpose();
        }
        if (igrad) {
          if (g.pointwise()) {
            detail::MatMap<T> dx(igrad + b * in_stride, g.col_rows(),
                                 g.col_cols());
            dx.noalias() += wmat.transpose() * dy;
          } else {
            if (cols.empty()) cols.resize(g.col_rows() * g.col_cols());
            detail::MatMap<T> dcols(cols.data(), g.col_rows(), g.col_cols());
            dcols.noalias() = wmat.transpose() * dy;
            detail::col2im_add(cols.data(), g, igrad + b * in_stride);
          }
        }
      }
    };
  }
  return out;
}

/// Per-channel batch normalization parameters and running statistics.
template <typename T>
struct BatchNormState {
  Tensor<T> gamma;
  Tensor<T> beta;
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T epsilon = T(1e-5);
  // EMA weight on the previous running value.
  T momentum = T(0.9);

  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels)
      : gamma(Tensor<T>::parameter({channels})),
        beta(Tensor<T>::parameter({channels})),
        running_mean(channels, T(0)),
        running_var(channels, T(1)) {
    std::fill(gamma.data().begin(), gamma.data().end(), T(1));
  }

  std::size_t channels() const { return running_mean.size(); }
};

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, BatchNormState<T>& state,
                      bool training) {
  detail::require_rank(input.shape(), 4, "batchnorm2d");
  const std::size_t n = input.dim(0), c = input.dim(1);
  const std::size_t plane = input.dim(2) * input.dim(3);
  if (c != state.channels()) {
    throw ConfigError("batchnorm2d: input " + to_string(input.shape()) +
                      " does not match " + std::to_string(state.channels()) +
                      " channels");
  }
  const std::size_t count = n * plane;
  if (training && count <= 1) {
    throw ConfigError(
        "batchnorm2d: batch statistics need more than one element per "
        "channel, input is " + to_string(input.shape()));
  }

  auto out = make_op_output<T>("batchnorm2d", input.shape(),
                               {input, state.gamma, state.beta});
  std::vector<T> means(c), inv_std(c);
  const T* x = input.data().data();
  T* y = out.data().data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    T mean, var;
    if (training) {
      // Shifted single-pass sums; the shift keeps cancellation harmless.
      const double shift = x[ch * plane];
      double sum = 0, sq = 0;
      // Each plane is reduced in T, planes are combined in double.
      const T tshift = static_cast<T>(shift);
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = x + (b * c + ch) * plane;
        sum += detail::lane_sum<T>(plane, [=](std::size_t i) { return p[i] - tshift; });
        sq += detail::lane_sum<T>(plane, [=](std::size_t i) {
          const T d = p[i] - tshift;
          return d * d;
        });
      }
      const double cnt = static_cast<double>(count);
      const double centered = std::max(0.0, sq - sum * sum / cnt);
      mean = static_cast<T>(shift + sum / cnt);
      var = static_cast<T>(centered / cnt);
      const T unbiased = static_cast<T>(centered / (cnt - 1));
      state.running_mean[ch] =
          state.momentum * state.running_mean[ch] + (T(1) - state.momentum) * mean;
      state.running_var[ch] =
          state.momentum * state.running_var[ch] + (T(1) - state.momentum) * unbiased;
    } else {
      mean = state.running_mean[ch];
      var = state.running_var[ch];
    }
    const T is = T(1) / std::sqrt(var + state.epsilon);
    means[ch] = mean;
    inv_std[ch] = is;
    const T a = state.gamma[ch] * is;
    const T shift = state.beta[ch] - a * mean;
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t off = (b * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) y[off + i] = a * x[off + i] + shift;
    }
  }

  if (out.requires_grad()) {
    out.node()->backward = [means = std::move(means), inv_std = std::move(inv_std),
                            n, c, plane, training](const Node<T>& self) {
      auto& in = *self.inputs[0];
      auto& gamma = *self.inputs[1];
      auto& beta = *self.inputs[2];
      const T* dy = self.grad.data();
      const T* x = in.value.data();
      const double m = static_cast<double>(n * plane);
      T* dx = in.requires_grad ? in.ensure_grad().data() : nullptr;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T mu = means[ch], is = inv_std[ch];
        double sum_dy = 0, sum_dy_xc = 0;
        for (std::size_t b = 0; b < n; ++b) {
          const std::size_t off = (b * c + ch) * plane;
          const T* g = dy + off;
          const T* xs = x + off;
          sum_dy += detail::lane_sum<T>(plane, [=](std::size_t i) { return g[i]; });
          sum_dy_xc += detail::lane_sum<T>(plane, [=](std::size_t i) { return g[i] * (xs[i] - mu); });
        }
        const double sum_dy_xhat = sum_dy_xc * is;
        if (gamma.requires_grad) gamma.ensure_grad()[ch] += static_cast<T>(sum_dy_xhat);
        if (beta.requires_grad) beta.ensure_grad()[ch] += static_cast<T>(sum_dy);
        if (!dx) continue;
        const T scale = gamma.value[ch] * is;
        if (!training) {
          for (std::size_t b = 0; b < n; ++b) {
            const std::size_t off = (b * c + ch) * plane;
            for (std::size_t i = 0; i < plane; ++i) dx[off + i] += scale * dy[off + i];
          }
          continue;
        }
        // dx = scale * (dy - mean(dy) - xhat * mean(dy * xhat)), expanded in x.
        const T mean_dy = static_cast<T>(sum_dy / m);
        const T k = static_cast<T>(sum_dy_xhat / m) * is;
        const T offset = -scale * (mean_dy - k * mu);
        const T slope = -scale * k;
        for (std::size_t b = 0; b < n; ++b) {
          const std::size_t off = (b * c + ch) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            dx[off + i] += scale * dy[off + i] + slope * x[off + i] + offset;
          }
        }
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  auto out = make_op_output<T>("relu", input.shape(), {input});
  const auto x = input.data();
  auto y = out.data();
  // NaN passes through so divergence stays visible downstream.
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] < T(0) ? T(0) : x[i];
  if (out.requires_grad()) {
    out.node()->backward = [](const Node<T>& self) {
      auto& in = *self.inputs[0];
      const T* x = in.value.data();
      const T* dy = self.grad.data();
      in.accumulate_grad([=](std::size_t i) { return x[i] > T(0) ? dy[i] : T(0); });
    };
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ConfigError("add: shape mismatch " + to_string(a.shape()) + " vs " +
                      to_string(b.shape()));
  }
  auto out = make_op_output<T>("add", a.shape(), {a, b});
  auto y = out.data();
  const auto x0 = a.data();
  const auto x1 = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x0[i] + x1[i];
  if (out.requires_grad()) {
    out.node()->backward = [](const Node<T>& self) {
      const T* dy = self.grad.data();
      for (const auto& in : self.inputs) {
        if (!in->requires_grad) continue;
        in->accumulate_grad([=](std::size_t i) { return dy[i]; });
      }
    };
  }
  return out;
}

/// Multiplies every element by a constant.
template <typename T>
Tensor<T> scale(const Tensor<T>& input, T factor) {
  auto out = make_op_output<T>("scale", input.shape(), {input});
  auto y = out.data();
  const auto x = input.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * factor;
  if (out.requires_grad()) {
    out.node()->backward = [factor](const Node<T>& self) {
      const T* dy = self.grad.data();
      self.inputs[0]->accumulate_grad([=](std::size_t i) { return factor * dy[i]; });
    };
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& input) {
  auto out = make_op_output<T>("sum", {1}, {input});
  T total = T(0);
  for (T v : input.data()) total += v;
  out[0] = total;
  if (out.requires_grad()) {
    out.node()->backward = [](const Node<T>& self) {
      auto dx = self.inputs[0]->ensure_grad();
      for (auto& v : dx) v += self.grad[0];
    };
  }
  return out;
}

/// Elementwise product with a constant tensor (no gradient to `weights`).
/// Used to form random projections of an output in gradient checks.
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& input, std::span<const T> weights) {
  if (weights.size() != input.numel()) {
    throw ConfigError("weighted_sum: " + std::to_string(weights.size()) +
                      " weights for tensor " + to_string(input.shape()));
  }
  auto out = make_op_output<T>("weighted_sum", {1}, {input});
  T total = T(0);
  const auto x = input.data();
  for (std::size_t i = 0; i < x.size(); ++i) total += x[i] * weights[i];
  out[0] = total;
  if (out.requires_grad()) {
    out.node()->backward = [w = std::vector<T>(weights.begin(), weights.end())](
                               const Node<T>& self) {
      auto dx = self.inputs[0]->ensure_grad();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += w[i] * self.grad[0];
    };
  }
  return out;
}

/// Winning pathway index per element of a max merge.
struct RoutingMask {
  int unit = -1;
  Shape shape;
  std::size_t pathways = 0;
  std::vector<std::uint8_t> winners;
};

template <typename T>
struct MaxResult {
  Tensor<T> output;
  RoutingMask routing;  // empty unless captured
};

/// Elementwise maximum over K same-shaped tensors. Ties go to the lowest
/// index; backward sends each element's gradient to its winner only.
template <typename T>
MaxResult<T> elementwise_max_k(const std::vector<Tensor<T>>& inputs,
                               bool capture_routing) {
  if (inputs.size() < 2) {
    throw ConfigError("elementwise_max_k: need at least 2 inputs, got " +
                      std::to_string(inputs.size()));
  }
  if (inputs.size() > 255) {
    throw ConfigError("elementwise_max_k: at most 255 inputs supported");
  }
  for (const auto& t : inputs) {
    if (t.shape() != inputs[0].shape()) {
      throw ConfigError("elementwise_max_k: shape mismatch " +
                        to_string(inputs[0].shape()) + " vs " +
                        to_string(t.shape()));
    }
  }
  const std::size_t count = inputs[0].numel();
  auto out = make_op_output<T>("max_k", inputs[0].shape(), inputs);
  std::vector<std::uint8_t> winners(count, 0);
  auto y = out.data();
  std::copy(inputs[0].data().begin(), inputs[0].data().end(), y.begin());
  for (std::size_t k = 1; k < inputs.size(); ++k) {
    const auto x = inputs[k].data();
    for (std::size_t i = 0; i < count; ++i) {
      if (x[i] > y[i] || x[i] != x[i]) {  // a NaN candidate wins
        y[i] = x[i];
        winners[i] = static_cast<std::uint8_t>(k);
      }
    }
  }

  MaxResult<T> result;
  if (capture_routing) {
    result.routing.shape = inputs[0].shape();
    result.routing.pathways = inputs.size();
    result.routing.winners = winners;
  }
  if (out.requires_grad()) {
    out.node()->backward = [winners = std::move(winners)](const Node<T>& self) {
      const bool corrupt = testing_hooks::corrupt_max_backward().load();
      const T* dy = self.grad.data();
      const std::uint8_t* win = winners.data();
      for (std::size_t k = 0; k < self.inputs.size(); ++k) {
        auto& in = *self.inputs[k];
        if (!in.requires_grad) continue;
        if (corrupt && k == 0) {
          in.accumulate_grad([=](std::size_t i) { return dy[i]; });
          continue;
        }
        const auto id = static_cast<std::uint8_t>(k);
        in.accumulate_grad([=](std::size_t i) { return win[i] == id ? dy[i] : T(0); });
      }
    };
  }
  result.output = std::move(out);
  return result;
}

template <typename T>
Tensor<T> avgpool2d(const Tensor<T>& input, std::size_t window,
                    std::size_t stride) {
  detail::require_rank(input.shape(), 4, "avgpool2d");
  if (window == 0 || stride == 0 || input.dim(2) < window ||
      input.dim(3) < window) {
    throw ConfigError("avgpool2d: window " + std::to_string(window) +
                      " stride " + std::to_string(stride) +
                      " invalid for input " + to_string(input.shape()));
  }
  const std::size_t n = input.dim(0), c = input.dim(1);
  const std::size_t h = input.dim(2), w = input.dim(3);
  const std::size_t oh = (h - window) / stride + 1, ow = (w - window) / stride + 1;
  auto out = make_op_output<T>("avgpool2d", {n, c, oh, ow}, {input});
  const T inv = T(1) / static_cast<T>(window * window);
  const T* x = input.data().data();
  T* y = out.data().data();
  for (std::size_t p = 0; p < n * c; ++p) {
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        T acc = T(0);
        for (std::size_t di = 0; di < window; ++di) {
          for (std::size_t dj = 0; dj < window; ++dj) {
            acc += x[(p * h + i * stride + di) * w + j * stride + dj];
          }
        }
        y[(p * oh + i) * ow + j] = acc * inv;
      }
    }
  }
  if (out.requires_grad()) {
    out.node()->backward = [=](const Node<T>& self) {
      T* dx = self.inputs[0]->ensure_grad().data();
      const T* dy = self.grad.data();
      for (std::size_t p = 0; p < n * c; ++p) {
        for (std::size_t i = 0; i < oh; ++i) {
          for (std::size_t j = 0; j < ow; ++j) {
            const T g = dy[(p * oh + i) * ow + j] * inv;
            for (std::size_t di = 0; di < window; ++di) {
              for (std::size_t dj = 0; dj < window; ++dj) {
                dx[(p * h + i * stride + di) * w + j * stride + dj] += g;
              }
            }
          }
        }
      }
    };
  }
  return out;
}

/// NCHW -> NxC mean over spatial positions.
template <typename T>
Tensor<T> global_avgpool(const Tensor<T>& input) {
  detail::require_rank(input.shape(), 4, "global_avgpool");
  const std::size_t n = input.dim(0), c = input.dim(1);
  const std::size_t plane = input.dim(2) * input.dim(3);
  auto out = make_op_output<T>("global_avgpool", {n, c}, {input});
  const T inv = T(1) / static_cast<T>(plane);
  const T* x = input.data().data();
  for (std::size_t p = 0; p < n * c; ++p) {
    T acc = T(0);
    for (std::size_t i = 0; i < plane; ++i) acc += x[p * plane + i];
    out[p] = acc * inv;
  }
  if (out.requires_grad()) {
    out.node()->backward = [plane, inv](const Node<T>& self) {
      const T* dy = self.grad.data();
      self.inputs[0]->accumulate_grad([=](std::size_t i) { return dy[i / plane] * inv; });
    };
  }
  return out;
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& inputs) {
  if (inputs.empty()) throw ConfigError("concat_channels: no inputs");
  for (const auto& t : inputs) detail::require_rank(t.shape(), 4, "concat_channels");
  const std::size_t n = inputs[0].dim(0), h = inputs[0].dim(2), w = inputs[0].dim(3);
  std::size_t channels = 0;
  for (const auto& t : inputs) {
    if (t.dim(0) != n || t.dim(2) != h || t.dim(3) != w) {
      throw ConfigError("concat_channels: " + to_string(inputs[0].shape()) +
                        " and " + to_string(t.shape()) +
                        " differ outside the channel axis");
    }
    channels += t.dim(1);
  }
  auto out = make_op_output<T>("concat_channels", {n, channels, h, w}, inputs);
  const std::size_t plane = h * w;
  T* y = out.data().data();
  for (std::size_t b = 0; b < n; ++b) {
    std::size_t offset = 0;
    for (const auto& t : inputs) {
      const std::size_t block = t.dim(1) * plane;
      const T* src = t.data().data() + b * block;
      std::copy(src, src + block, y + (b * channels + offset) * plane);
      offset += t.dim(1);
    }
  }
  if (out.requires_grad()) {
    out.node()->backward = [n, channels, plane](const Node<T>& self) {
      std::size_t offset = 0;
      for (const auto& in : self.inputs) {
        const std::size_t ch = in->shape[1];
        if (in->requires_grad) {
          T* dx = in->ensure_grad().data();
          for (std::size_t b = 0; b < n; ++b) {
            const T* src = self.grad.data() + (b * channels + offset) * plane;
            T* dst = dx + b * ch * plane;
            for (std::size_t i = 0; i < ch * plane; ++i) dst[i] += src[i];
          }
        }
        offset += ch;
      }
    };
  }
  return out;
}

/// Channels [begin, begin + count) of an NCHW tensor.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& input, std::size_t begin,
                         std::size_t count) {
  detail::require_rank(input.shape(), 4, "slice_channels");
  const std::size_t n = input.dim(0), c = input.dim(1);
  const std::size_t plane = input.dim(2) * input.dim(3);
  if (begin + count > c || count == 0) {
    throw ConfigError("slice_channels: range [" + std::to_string(begin) + ", " +
                      std::to_string(begin + count) + ") outside " +
                      to_string(input.shape()));
  }
  auto out = make_op_output<T>("slice_channels",
                               {n, count, input.dim(2), input.dim(3)}, {input});
  for (std::size_t b = 0; b < n; ++b) {
    const T* src = input.data().data() + (b * c + begin) * plane;
    std::copy(src, src + count * plane, out.data().data() + b * count * plane);
  }
  if (out.requires_grad()) {
    out.node()->backward = [=](const Node<T>& self) {
      T* dx = self.inputs[0]->ensure_grad().data();
      for (std::size_t b = 0; b < n; ++b) {
        const T* src = self.grad.data() + b * count * plane;
        T* dst = dx + (b * c + begin) * plane;
        for (std::size_t i = 0; i < count * plane; ++i) dst[i] += src[i];
      }
    };
  }
  return out;
}

/// input NxC, weight CxK, bias K -> NxK.
template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias) {
  detail::require_rank(input.shape(), 2, "linear input");
  detail::require_rank(weight.shape(), 2, "linear weight");
  detail::require_rank(bias.shape(), 1, "linear bias");
  if (input.dim(1) != weight.dim(0) || bias.dim(0) != weight.dim(1)) {
    throw ConfigError("linear: input " + to_string(input.shape()) +
                      ", weight " + to_string(weight.shape()) + ", bias " +
                      to_string(bias.shape()) + " are incompatible");
  }
  const std::size_t n = input.dim(0), c = input.dim(1), k = weight.dim(1);
  auto out = make_op_output<T>("linear", {n, k}, {input, weight, bias});
  // Row by row in a fixed order, so a sample's output does not depend on
  // the rest of the batch.
  const T* x = input.data().data();
  const T* w = weight.data().data();
  T* y = out.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    T* row = y + i * k;
    for (std::size_t j = 0; j < k; ++j) row[j] = bias[j];
    for (std::size_t f = 0; f < c; ++f) {
      const T xv = x[i * c + f];
      const T* wr = w + f * k;
      for (std::size_t j = 0; j < k; ++j) row[j] += xv * wr[j];
    }
  }
  if (out.requires_grad()) {
    out.node()->backward = [n, c, k](const Node<T>& self) {
      auto& in = *self.inputs[0];
      auto& wt = *self.inputs[1];
      auto& bs = *self.inputs[2];
      detail::ConstMatMap<T> dy(self.grad.data(), n, k);
      if (in.requires_grad) {
        detail::MatMap<T> dx(in.ensure_grad().data(), n, c);
        detail::ConstMatMap<T> w(wt.value.data(), c, k);
        dx.noalias() += dy * w.transpose();
      }
      if (wt.requires_grad) {
        detail::MatMap<T> dw(wt.ensure_grad().data(), c, k);
        detail::ConstMatMap<T> x(in.value.data(), n, c);
        dw.noalias() += x.transpose() * dy;
      }
      if (bs.requires_grad) {
        auto db = bs.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < k; ++j) db[j] += dy(i, j);
        }
      }
    };
  }
  return out;
}

/// Non-inverted dropout: training zeroes elements with probability `rate`
/// and leaves survivors unscaled; evaluation multiplies by (1 - rate).
template <typename T>
Tensor<T> dropout(const Tensor<T>& input, double rate, bool training,
                  std::mt19937_64* rng) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ConfigError("dropout: rate must lie in [0, 1), got " +
                      std::to_string(rate));
  }
  if (rate == 0.0) return input;
  if (!training) return scale(input, static_cast<T>(1.0 - rate));
  if (rng == nullptr) throw UsageError("dropout: training mode needs an RNG");
  auto out = make_op_output<T>("dropout", input.shape(), {input});
  std::vector<std::uint8_t> keep(input.numel());
  std::bernoulli_distribution survive(1.0 - rate);
  const auto x = input.data();
  auto y = out.data();
  for (std::size_t i = 0; i < keep.size(); ++i) {
    keep[i] = survive(*rng) ? 1 : 0;
    y[i] = keep[i] ? x[i] : T(0);
  }
  if (out.requires_grad()) {
    out.node()->backward = [keep = std::move(keep)](const Node<T>& self) {
      const T* dy = self.grad.data();
      const std::uint8_t* mask = keep.data();
      self.inputs[0]->accumulate_grad([=](std::size_t i) { return mask[i] ? dy[i] : T(0); });
    };
  }
  return out;
}

/// Mean over the batch of -log softmax(logits)[label].
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits,
                                std::span<const int> labels) {
  detail::require_rank(logits.shape(), 2, "softmax_cross_entropy");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) {
    throw DataError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                    " labels for " + std::to_string(n) + " rows");
  }
  for (int label : labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
      throw DataError("softmax_cross_entropy: label " + std::to_string(label) +
                      " outside [0, " + std::to_string(k) + ")");
    }
  }
  auto out = make_op_output<T>("softmax_cross_entropy", {1}, {logits});
  std::vector<T> probs(n * k);
  double total = 0;
  const T* z = logits.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = z + i * k;
    const T top = *std::max_element(row, row + k);
    double denom = 0;
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(static_cast<double>(row[j] - top));
    const double log_denom = std::log(denom);
    for (std::size_t j = 0; j < k; ++j) {
      probs[i * k + j] = static_cast<T>(std::exp(static_cast<double>(row[j] - top) - log_denom));
    }
    total += log_denom - static_cast<double>(row[labels[i]] - top);
  }
  out[0] = static_cast<T>(total / static_cast<double>(n));
  if (out.requires_grad()) {
    out.node()->backward = [probs = std::move(probs),
                            labels = std::vector<int>(labels.begin(), labels.end()),
                            n, k](const Node<T>& self) {
      T* dz = self.inputs[0]->ensure_grad().data();
      const T g = self.grad[0] / static_cast<T>(n);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
          const T onehot = static_cast<std::size_t>(labels[i]) == j ? T(1) : T(0);
          dz[i * k + j] += g * (probs[i * k + j] - onehot);
        }
      }
    };
  }
  return out;
}

}  // namespace copanet
