#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "copanet/data.hpp"
#include "copanet/errors.hpp"
#include "copanet/keyvalue.hpp"
#include "copanet/model.hpp"
#include "copanet/trainer.hpp"

namespace copanet {

enum class DatasetKind { synthetic, cifar10 };

struct DataConfig {
  DatasetKind kind = DatasetKind::synthetic;
  std::string dir = "data/cifar-10-batches-bin";
  std::size_t synthetic_classes = 10;
  std::size_t train_size = 256;  // synthetic only
  std::size_t test_size = 1000;  // synthetic only
  std::uint64_t data_seed = 1;
  NormalizationMode normalization = NormalizationMode::mean_std;

  static const std::vector<std::string>& keys() {
    static const std::vector<std::string> k{"dataset",    "data_dir",  "synthetic_classes",
                                            "train_size", "test_size", "data_seed",
                                            "normalization"};
    return k;
  }

  bool apply(const std::string& key, const std::string& value) {
    if (key == "dataset") {
      if (value == "synthetic") {
        kind = DatasetKind::synthetic;
      } else if (value == "cifar10") {
        kind = DatasetKind::cifar10;
      } else {
        throw UsageError("dataset must be 'synthetic' or 'cifar10', got '" + value + "'");
      }
    } else if (key == "data_dir") {
      dir = value;
    } else if (key == "synthetic_classes") {
      synthetic_classes = parse_integer<std::size_t>(key, value);
    } else if (key == "train_size") {
      train_size = parse_integer<std::size_t>(key, value);
    } else if (key == "test_size") {
      test_size = parse_integer<std::size_t>(key, value);
    } else if (key == "data_seed") {
      data_seed = parse_integer<std::uint64_t>(key, value);
    } else if (key == "normalization") {
      if (value == "mean_std") {
        normalization = NormalizationMode::mean_std;
      } else if (value == "scale255") {
        normalization = NormalizationMode::scale255;
      } else {
        throw UsageError("normalization must be 'mean_std' or 'scale255', got '" + value + "'");
      }
    } else {
      return false;
    }
    return true;
  }

  std::string to_text() const {
    std::ostringstream out;
    out << "dataset=" << (kind == DatasetKind::synthetic ? "synthetic" : "cifar10")
        << "\ndata_dir=" << dir << "\nsynthetic_classes=" << synthetic_classes
        << "\ntrain_size=" << train_size << "\ntest_size=" << test_size
        << "\ndata_seed=" << data_seed << "\nnormalization="
        << (normalization == NormalizationMode::mean_std ? "mean_std" : "scale255") << '\n';
    return out.str();
  }
};

struct LoadedData {
  Dataset train;
  Dataset test;
  Normalizer normalizer;
};

inline LoadedData load_data(const DataConfig& config) {
  LoadedData out;
  if (config.kind == DatasetKind::cifar10) {
    auto [train, test] = load_cifar10(config.dir);
    out.train = std::move(train);
    out.test = std::move(test);
  } else {
    if (config.train_size < 2 || config.test_size < 1) {
      throw ConfigError("synthetic data needs train_size >= 2 and test_size >= 1");
    }
    out.train = make_synthetic_count(config.synthetic_classes, config.train_size,
                                     config.data_seed, "train");
    // A different stream, so no test image repeats a training image.
    out.test = make_synthetic_count(config.synthetic_classes, config.test_size,
                                    config.data_seed + 0x9e3779b97f4a7c15ull, "test");
  }
  out.normalizer = config.normalization == NormalizationMode::mean_std
                       ? Normalizer::fit(out.train)
                       : Normalizer::divide_by_255();
  return out;
}

/// Everything a CLI run is described by: network, training plan, data and
/// the analysis options. Keys from all parts share one namespace.
struct RunConfig {
  NetworkConfig net;
  TrainPlan plan;
  DataConfig data;
  std::size_t trace_stage = 3;  // 1-based
  std::size_t top_maps = 4;
  std::size_t eval_every = 1;

  static const std::vector<std::string>& own_keys() {
    static const std::vector<std::string> k{"trace_stage", "top_maps", "eval_every"};
    return k;
  }

  static std::vector<std::string> keys() {
    std::vector<std::string> all;
    for (const auto* part : {&NetworkConfig::keys(), &TrainPlan::keys(), &DataConfig::keys(),
                             &own_keys()}) {
      all.insert(all.end(), part->begin(), part->end());
    }
    return all;
  }

  void apply(const std::string& key, const std::string& value) {
    if (net.apply(key, value) || plan.apply(key, value) || data.apply(key, value)) return;
    if (key == "trace_stage") {
      trace_stage = parse_integer<std::size_t>(key, value);
    } else if (key == "top_maps") {
      top_maps = parse_integer<std::size_t>(key, value);
    } else if (key == "eval_every") {
      eval_every = parse_integer<std::size_t>(key, value);
    } else {
      throw UsageError("unknown key '" + key + "'; valid keys: " + join_keys(keys()));
    }
  }

  /// Applies assignments in order; a later one overrides an earlier one.
  void apply(const KeyValues& assignments) {
    for (const auto& [key, value] : assignments) apply(key, value);
  }

  void validate() const {
    net.validate();
    plan.validate();
    if (trace_stage < 1 || trace_stage > kStages) {
      throw ConfigError("trace_stage must lie in 1.." + std::to_string(kStages));
    }
    if (data.kind == DatasetKind::synthetic && data.synthetic_classes != net.num_classes) {
      throw ConfigError("synthetic_classes (" + std::to_string(data.synthetic_classes) +
                        ") must equal classes (" + std::to_string(net.num_classes) + ")");
    }
  }

  std::string to_text() const {
    std::ostringstream out;
    out << "# network\n"
        << net.to_text() << "# training\n"
        << plan.to_text() << "# data\n"
        << data.to_text() << "# analysis\ntrace_stage=" << trace_stage
        << "\ntop_maps=" << top_maps << "\neval_every=" << eval_every << '\n';
    return out.str();
  }

  static RunConfig from_text(const std::string& text) {
    RunConfig config;
    config.apply(parse_key_values(text));
    return config;
  }
};

}  // namespace copanet
