#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <iomanip>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "copanet/copa_unit.hpp"
#include "copanet/errors.hpp"
#include "copanet/keyvalue.hpp"
#include "copanet/ops.hpp"
#include "copanet/parameters.hpp"
#include "copanet/tensor.hpp"

namespace copanet {

/// plain: sequential blocks. cross_block (CoPaNet-R): each pooled block
/// output is carried forward, concatenated into the next block's input and
/// into the classifier features.
enum class Variant { plain, cross_block };

inline const char* to_string(Variant v) {
  return v == Variant::plain ? "plain" : "R";
}

inline constexpr std::size_t kStages = 3;

struct NetworkConfig {
  std::size_t depth = 164;
  std::size_t k = 2;  // pathways per unit
  std::size_t m = 1;  // width multiplier
  Variant variant = Variant::plain;
  PathwayKind pathway = PathwayKind::bottleneck;
  // Stage output channels and bottleneck widths at m = 1.
  std::array<std::size_t, kStages> widths{45, 90, 180};
  std::array<std::size_t, kStages> mids{12, 23, 45};
  std::size_t num_classes = 10;
  double dropout = 0.2;
  std::size_t input_channels = 3;
  std::size_t input_size = 32;

  std::size_t convs_per_pathway() const {
    return pathway == PathwayKind::bottleneck ? 3 : 2;
  }

  /// depth = stages * units * convs_per_pathway + 2 (stem conv + classifier).
  std::size_t units_per_stage() const {
    const std::size_t per_unit = kStages * convs_per_pathway();
    if (depth < 2 + per_unit || (depth - 2) % per_unit != 0) {
      std::ostringstream msg;
      msg << "depth " << depth << " does not fit " << to_string(pathway)
          << " pathways: depth must equal " << kStages << " stages x units x "
          << convs_per_pathway() << " convs + 2, i.e. " << per_unit
          << "*units + 2 (";
      const std::size_t below = depth < 2 + per_unit ? 0 : (depth - 2) / per_unit;
      if (below > 0) msg << per_unit * below + 2 << " or ";
      msg << per_unit * (below + 1) + 2 << " would be valid)";
      throw ConfigError(msg.str());
    }
    return (depth - 2) / per_unit;
  }

  std::array<std::size_t, kStages> stage_widths() const {
    return {widths[0] * m, widths[1] * m, widths[2] * m};
  }

  /// Inner width of each pathway; basic pathways keep the stage width.
  std::array<std::size_t, kStages> stage_mids() const {
    if (pathway == PathwayKind::basic) return stage_widths();
    return {mids[0] * m, mids[1] * m, mids[2] * m};
  }

  void validate() const {
    units_per_stage();
    if (k == 0) throw ConfigError("k (pathways per unit) must be at least 1");
    if (k > 255) throw ConfigError("k must be at most 255");
    if (m == 0) throw ConfigError("m (width multiplier) must be at least 1");
    for (std::size_t s = 0; s < kStages; ++s) {
      if (widths[s] == 0 || mids[s] == 0) throw ConfigError("stage widths must be positive");
    }
    if (num_classes < 2) throw ConfigError("classes must be at least 2");
    if (!(dropout >= 0.0 && dropout < 1.0)) {
      throw ConfigError("dropout must lie in [0, 1), got " + std::to_string(dropout));
    }
    if (input_size < 4 || input_size % 4 != 0) {
      throw ConfigError("input size must be a positive multiple of 4, got " +
                        std::to_string(input_size));
    }
  }

  static const std::vector<std::string>& keys() {
    static const std::vector<std::string> k{"depth",  "k",       "m",
                                            "variant", "pathway", "widths",
                                            "mids",   "classes", "dropout"};
    return k;
  }

  /// Applies one recognised key; returns false for keys it does not own.
  bool apply(const std::string& key, const std::string& value) {
    if (key == "depth") {
      depth = parse_integer<std::size_t>(key, value);
    } else if (key == "k") {
      k = parse_integer<std::size_t>(key, value);
    } else if (key == "m") {
      m = parse_integer<std::size_t>(key, value);
    } else if (key == "variant") {
      if (value == "plain") {
        variant = Variant::plain;
      } else if (value == "R" || value == "r") {
        variant = Variant::cross_block;
      } else {
        throw UsageError("variant must be 'plain' or 'R', got '" + value + "'");
      }
    } else if (key == "pathway") {
      if (value == "bottleneck") {
        pathway = PathwayKind::bottleneck;
      } else if (value == "basic") {
        pathway = PathwayKind::basic;
      } else {
        throw UsageError("pathway must be 'bottleneck' or 'basic', got '" + value + "'");
      }
    } else if (key == "widths" || key == "mids") {
      const auto items = split_list(value);
      if (items.size() != kStages) {
        throw UsageError("key '" + key + "' needs 3 comma-separated values");
      }
      auto& target = key == "widths" ? widths : mids;
      for (std::size_t s = 0; s < kStages; ++s) {
        target[s] = parse_integer<std::size_t>(key, items[s]);
      }
    } else if (key == "classes") {
      num_classes = parse_integer<std::size_t>(key, value);
    } else if (key == "dropout") {
      dropout = parse_real(key, value);
    } else {
      return false;
    }
    return true;
  }

  std::string to_text() const {
    std::ostringstream out;
    out << "depth=" << depth << "\nk=" << k << "\nm=" << m
        << "\nvariant=" << to_string(variant) << "\npathway=" << to_string(pathway)
        << "\nwidths=" << widths[0] << ',' << widths[1] << ',' << widths[2]
        << "\nmids=" << mids[0] << ',' << mids[1] << ',' << mids[2]
        << "\nclasses=" << num_classes << "\ndropout=" << std::setprecision(17)
        << dropout << '\n';
    return out.str();
  }

  static NetworkConfig from_text(const std::string& text) {
    NetworkConfig config;
    for (const auto& [key, value] : parse_key_values(text)) {
      if (!config.apply(key, value)) {
        throw UsageError("unknown network key '" + key + "'; valid keys: " +
                         join_keys(keys()));
      }
    }
    return config;
  }

  bool operator==(const NetworkConfig&) const = default;
};

/// Called with each named layer output during forward; used for NaN
/// diagnostics and shape inspection.
template <typename T>
using ActivationProbe = std::function<void(const std::string&, const Tensor<T>&)>;

/// stem 3x3 conv -> stage 1 -> pool -> stage 2 -> pool -> stage 3 ->
/// BN/ReLU -> global pool -> linear. Dropout follows each inter-stage pool.
template <typename T>
class Model {
 public:
  struct ForwardOptions {
    bool training = false;
    std::mt19937_64* rng = nullptr;     // dropout masks, training only
    std::optional<std::size_t> capture_stage;  // 0-based stage to record
    bool capture_all = false;
    ActivationProbe<T> probe;
  };

  struct Output {
    Tensor<T> logits;
    std::vector<RoutingMask> routing;
  };

  explicit Model(NetworkConfig config) : config_(std::move(config)) {
    config_.validate();
    const auto widths = config_.stage_widths();
    const auto mids = config_.stage_mids();
    const std::size_t units = config_.units_per_stage();
    stem_ = Tensor<T>::parameter({widths[0], config_.input_channels, 3, 3});
    int unit_id = 0;
    std::size_t in = widths[0];
    for (std::size_t s = 0; s < kStages; ++s) {
      auto& stage = stages_[s];
      stage.reserve(units);
      for (std::size_t u = 0; u < units; ++u) {
        CoPaUnitSpec spec;
        spec.pathways = config_.k;
        spec.pathway = {config_.pathway, u == 0 ? in : widths[s], mids[s], widths[s], 1};
        stage.emplace_back(spec, unit_id++);
      }
      if (config_.variant == Variant::cross_block) {
        in = s == 0 ? widths[0] : in + widths[s];
      } else {
        in = widths[s];
      }
    }
    const std::size_t features = classifier_features();
    head_bn_ = BatchNormState<T>(features);
    fc_weight_ = Tensor<T>::parameter({features, config_.num_classes});
    fc_bias_ = Tensor<T>::parameter({config_.num_classes});
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const NetworkConfig& config() const { return config_; }

  Output forward(const Tensor<T>& images, const ForwardOptions& opt = {}) {
    if (images.rank() != 4 || images.dim(1) != config_.input_channels ||
        images.dim(2) != config_.input_size || images.dim(3) != config_.input_size) {
      throw ConfigError("model expects N x " + std::to_string(config_.input_channels) +
                        " x " + std::to_string(config_.input_size) + " x " +
                        std::to_string(config_.input_size) + " input, got " +
                        to_string(images.shape()));
    }
    auto probe = [&](const std::string& name, const Tensor<T>& t) {
      if (opt.probe) opt.probe(name, t);
    };
    Output out;
    Tensor<T> h = conv2d(images, stem_, 1, 1);
    probe("stem", h);
    Tensor<T> carried;
    const bool reuse = config_.variant == Variant::cross_block;
    for (std::size_t s = 0; s < kStages; ++s) {
      const bool capture = opt.capture_all || opt.capture_stage == s;
      for (std::size_t u = 0; u < stages_[s].size(); ++u) {
        auto unit_out = stages_[s][u].forward(h, opt.training, capture);
        if (unit_out.routing) out.routing.push_back(std::move(*unit_out.routing));
        h = std::move(unit_out.value);
        probe(unit_name(s, u), h);
      }
      if (s + 1 < kStages) {
        Tensor<T> features = reuse && carried.defined() ? concat_channels<T>({carried, h}) : h;
        h = dropout(avgpool2d(features, 2, 2), config_.dropout, opt.training, opt.rng);
        probe("pool" + std::to_string(s + 1), h);
        if (reuse) carried = h;
      }
    }
    Tensor<T> features = reuse ? concat_channels<T>({carried, h}) : h;
    features = global_avgpool(relu(batchnorm2d(features, head_bn_, opt.training)));
    probe("head.pool", features);
    out.logits = linear(features, fc_weight_, fc_bias_);
    probe("head.fc", out.logits);
    return out;
  }

  ParameterRegistry<T> parameters() {
    ParameterRegistry<T> registry;
    registry.add("stem.conv", stem_, ParamRole::conv_weight);
    for (std::size_t s = 0; s < kStages; ++s) {
      for (std::size_t u = 0; u < stages_[s].size(); ++u) {
        stages_[s][u].collect(registry, unit_name(s, u));
      }
    }
    registry.add_batchnorm("head.bn", head_bn_);
    registry.add("head.fc.weight", fc_weight_, ParamRole::linear_weight);
    registry.add("head.fc.bias", fc_bias_, ParamRole::linear_bias);
    return registry;
  }

  /// Trainable scalars; BN running statistics are not counted.
  std::size_t parameter_count() { return parameters().scalar_count(); }

  std::vector<CoPaUnit<T>>& stage(std::size_t s) { return stages_.at(s); }
  const std::vector<CoPaUnit<T>>& stage(std::size_t s) const { return stages_.at(s); }
  Tensor<T>& stem() { return stem_; }
  BatchNormState<T>& head_batchnorm() { return head_bn_; }
  const Tensor<T>& classifier_weight() const { return fc_weight_; }
  Tensor<T>& classifier_weight() { return fc_weight_; }
  const Tensor<T>& classifier_bias() const { return fc_bias_; }

  /// Channel count of each source block in classifier-feature order.
  std::vector<std::size_t> classifier_layout() const {
    const auto w = config_.stage_widths();
    if (config_.variant == Variant::cross_block) return {w[0], w[1], w[2]};
    return {w[2]};
  }

  std::size_t classifier_features() const {
    std::size_t total = 0;
    for (auto c : classifier_layout()) total += c;
    return total;
  }

  static std::string unit_name(std::size_t stage, std::size_t unit) {
    return "stage" + std::to_string(stage + 1) + ".unit" + std::to_string(unit);
  }

 private:
  NetworkConfig config_;
  Tensor<T> stem_;
  std::array<std::vector<CoPaUnit<T>>, kStages> stages_;
  BatchNormState<T> head_bn_;
  Tensor<T> fc_weight_;
  Tensor<T> fc_bias_;
};

struct DeploymentRow {
  std::string stage;
  std::string output_size;
  std::size_t units = 0;
  std::string pathway_layers;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t params = 0;
  std::size_t cumulative_params = 0;
};

/// Per-stage layout and parameter totals. The last row ("total") always
/// equals Model::parameter_count().
inline std::vector<DeploymentRow> deployment_table(const NetworkConfig& config) {
  Model<float> model(config);
  auto registry = model.parameters();
  auto count_prefix = [&](const std::string& prefix) {
    std::size_t total = 0;
    for (const auto& p : registry.parameters()) {
      if (p.name.compare(0, prefix.size(), prefix) == 0) total += p.tensor.numel();
    }
    return total;
  };
  const auto widths = config.stage_widths();
  const auto mids = config.stage_mids();
  std::vector<DeploymentRow> rows;
  std::size_t cumulative = 0;
  auto push = [&](DeploymentRow row) {
    cumulative += row.params;
    row.cumulative_params = cumulative;
    rows.push_back(std::move(row));
  };
  const std::string side = std::to_string(config.input_size);
  push({"stem", side + "x" + side, 0, "3x3," + std::to_string(widths[0]),
        config.input_channels, widths[0], count_prefix("stem."), 0});
  std::size_t size = config.input_size;
  for (std::size_t s = 0; s < kStages; ++s) {
    const auto& units = model.stage(s);
    std::ostringstream layers;
    if (config.pathway == PathwayKind::bottleneck) {
      layers << "[1x1," << mids[s] << "; 3x3," << mids[s] << "; 1x1," << widths[s] << "]";
    } else {
      layers << "[3x3," << mids[s] << "; 3x3," << widths[s] << "]";
    }
    layers << " x" << config.k;
    push({"stage" + std::to_string(s + 1), std::to_string(size) + "x" + std::to_string(size),
          units.size(), layers.str(), units.front().spec().pathway.in_channels, widths[s],
          count_prefix("stage" + std::to_string(s + 1) + "."), 0});
    if (s + 1 < kStages) size /= 2;
  }
  push({"classifier", "1x1", 0,
        "BN,ReLU,global-avg-pool,fc " + std::to_string(config.num_classes),
        model.classifier_features(), config.num_classes, count_prefix("head."), 0});
  DeploymentRow total;
  total.stage = "total";
  total.params = cumulative;
  total.cumulative_params = cumulative;
  rows.push_back(total);
  return rows;
}

inline std::string deployment_csv(const std::vector<DeploymentRow>& rows) {
  std::ostringstream out;
  out << "stage,output_size,units,pathway_layers,in_channels,out_channels,params,"
         "cumulative_params\n";
  for (const auto& r : rows) {
    out << r.stage << ',' << r.output_size << ',' << r.units << ",\"" << r.pathway_layers
        << "\"," << r.in_channels << ',' << r.out_channels << ',' << r.params << ','
        << r.cumulative_params << '\n';
  }
  return out.str();
}

}  // namespace copanet
