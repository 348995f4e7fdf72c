// copanet: command-line entry point (params, train, eval, trace, sweep,
// selfcheck).

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "copanet/analysis.hpp"
#include "copanet/checkpoint.hpp"
#include "copanet/run_config.hpp"
#include "copanet/selfcheck.hpp"
#include "copanet/trainer.hpp"

namespace fs = std::filesystem;
using namespace copanet;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

// Options that consume the following token as their value.
const std::vector<std::string> kValueOptions{"--config", "-c",    "--out",    "-o",
                                             "--checkpoint",      "--axis",   "--values",
                                             "--resume"};

/// Overrides in command-line order: --set k=v, --seed N, --precision N and
/// bare k=v tokens. CLI11 validates the same tokens; this pass only keeps
/// their relative order so the last write wins.
KeyValues ordered_overrides(const std::vector<std::string>& args) {
  KeyValues out;
  auto value_of = [&](std::size_t& i, const std::string& flag) -> std::optional<std::string> {
    const std::string& t = args[i];
    if (t == flag) {
      if (i + 1 >= args.size()) return std::nullopt;
      return args[++i];
    }
    if (t.rfind(flag + "=", 0) == 0) return t.substr(flag.size() + 1);
    return std::nullopt;
  };
  for (std::size_t i = 0; i < args.size(); ++i) {
    const std::string& t = args[i];
    if (auto v = value_of(i, "--set")) {
      out.push_back(parse_assignment(*v));
    } else if (auto s = value_of(i, "--seed")) {
      out.emplace_back("seed", *s);
    } else if (auto p = value_of(i, "--precision")) {
      out.emplace_back("precision", *p);
    } else if (!t.empty() && t[0] == '-') {
      if (std::find(kValueOptions.begin(), kValueOptions.end(), t) != kValueOptions.end()) ++i;
    } else if (t.find('=') != std::string::npos) {
      out.push_back(parse_assignment(t));
    }
  }
  return out;
}

struct Invocation {
  std::string config_path;
  std::string out_dir;
  std::vector<std::string> sets;  // validated by CLI11, applied via ordered_overrides
  std::vector<std::string> assignments;
  std::optional<std::uint64_t> seed;
  std::optional<int> precision;
  std::string checkpoint;
  std::string resume;
  std::string axis;
  std::string values;
  bool sweep_train = false;
  bool inject_fault = false;
};

RunConfig effective_config(const Invocation& inv, const std::vector<std::string>& args) {
  RunConfig config;
  if (!inv.config_path.empty()) config.apply(read_key_values(inv.config_path));
  config.apply(ordered_overrides(args));
  return config;
}

void echo_config(const RunConfig& config, const std::string& out_dir) {
  std::cerr << "effective config:\n" << config.to_text();
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_text(fs::path(out_dir) / "effective_config.txt", config.to_text());
  }
}

std::string format_error(double e) {
  std::ostringstream out;
  out << std::setprecision(6) << e;
  return out.str();
}

int cmd_params(RunConfig config, const std::string& out_dir) {
  config.net.validate();
  echo_config(config, out_dir);
  const auto rows = deployment_table(config.net);
  std::cout << std::left << std::setw(11) << "stage" << std::setw(8) << "size" << std::setw(6)
            << "units" << std::setw(36) << "pathway" << std::setw(6) << "in" << std::setw(6)
            << "out" << std::right << std::setw(12) << "params" << '\n';
  for (const auto& r : rows) {
    std::cout << std::left << std::setw(11) << r.stage << std::setw(8) << r.output_size
              << std::setw(6) << (r.units ? std::to_string(r.units) : "") << std::setw(36)
              << r.pathway_layers << std::setw(6)
              << (r.in_channels ? std::to_string(r.in_channels) : "") << std::setw(6)
              << (r.out_channels ? std::to_string(r.out_channels) : "") << std::right
              << std::setw(12) << r.params << '\n';
  }
  const auto total = rows.back().params;
  std::cout << "total parameters: " << total << " (" << std::fixed << std::setprecision(3)
            << static_cast<double>(total) / 1e6 << " M)";
  if (config.net.k == 1) std::cout << " [k = 1: plain pre-activation ResNet]";
  std::cout << '\n';
  if (!out_dir.empty()) write_text(fs::path(out_dir) / "deployment.csv", deployment_csv(rows));
  return kOk;
}

/// Builds, initialises and trains a model from `config`; returns the final
/// test error. Shared by `train` and `sweep` so both run the same recipe.
template <typename T>
double train_run(const RunConfig& config, const LoadedData& data, const fs::path& out_dir,
                 const std::string& resume, bool verbose) {
  Model<T> model(config.net);
  std::mt19937_64 rng(config.plan.seed);
  {
    auto registry = model.parameters();
    he_init(registry, rng);
  }
  SgdOptimizer<T> sgd(model.parameters(), config.plan.momentum, config.plan.weight_decay);
  const auto plan_digest = fnv1a64(config.plan.to_text());
  TrainOptions options;
  options.test = &data.test;
  options.eval_every = config.eval_every;
  if (!resume.empty()) {
    const auto ck = read_checkpoint(resume);
    if (ck.plan_digest != plan_digest) {
      throw DataError("checkpoint " + resume + " was written under a different training plan");
    }
    restore(model, ck);
    if (!restore_optimizer(sgd, ck)) throw DataError("checkpoint " + resume + " lacks optimizer state");
    rng = deserialize_rng(ck.rng_state);
    options.start_epoch = static_cast<std::size_t>(ck.epoch);
    if (verbose) std::cout << "resuming at epoch " << ck.epoch << '\n';
  }
  const fs::path ckpt = out_dir / "model.ckpt";
  options.on_epoch_end = [&](const EpochRow& row) {
    save_checkpoint(model, ckpt, row.epoch + 1, rng, plan_digest, &sgd);
    if (!verbose) return;
    std::cout << "epoch " << row.epoch + 1 << '/' << config.plan.total_epochs << " lr " << row.lr
              << " train_loss " << format_error(row.train_loss) << " train_error "
              << format_error(row.train_error);
    if (row.test_error) std::cout << " test_error " << format_error(*row.test_error);
    std::cout << std::endl;
  };
  const auto log = train(model, sgd, data.train, data.normalizer, config.plan, rng, options);
  write_text(out_dir / "train_log.csv", log.to_csv());
  if (log.rows.empty() || !log.rows.back().test_error) {
    return evaluate(model, data.test, data.normalizer, config.plan.batch_size).error_rate;
  }
  return *log.rows.back().test_error;
}

int cmd_train(const RunConfig& config, const fs::path& out_dir, const std::string& resume) {
  config.validate();
  echo_config(config, out_dir.string());
  const auto data = load_data(config.data);
  std::cout << "train " << data.train.size() << " records, test " << data.test.size()
            << " records\n";
  const double error = config.plan.precision == 64
                           ? train_run<double>(config, data, out_dir, resume, true)
                           : train_run<float>(config, data, out_dir, resume, true);
  std::cout << "final test error " << format_error(error) << '\n';
  write_text(out_dir / "final.txt", "test_error=" + format_error(error) + "\n");
  return kOk;
}

/// eval and trace take the network from the checkpoint; a config that
/// names a different network is an error rather than silently ignored.
void adopt_checkpoint_network(RunConfig& config, const Checkpoint& ck) {
  if (!(config.net == NetworkConfig{}) && !(config.net == ck.config)) {
    throw ConfigError("the checkpoint holds a different network than the config asks for;\n"
                      "checkpoint:\n" + ck.config.to_text() + "config:\n" + config.net.to_text());
  }
  config.net = ck.config;
}

template <typename T>
Model<T> load_model(const Checkpoint& ck) {
  Model<T> model(ck.config);
  restore(model, ck);
  return model;
}

int cmd_eval(RunConfig config, const fs::path& out_dir, const std::string& checkpoint) {
  const auto ck = read_checkpoint(checkpoint);
  adopt_checkpoint_network(config, ck);
  config.validate();
  echo_config(config, out_dir.string());
  const auto data = load_data(config.data);
  const auto run = [&](auto tag) {
    using T = decltype(tag);
    auto model = load_model<T>(ck);
    return evaluate(model, data.test, data.normalizer, config.plan.batch_size);
  };
  const auto r = config.plan.precision == 64 ? run(double{}) : run(float{});
  std::ostringstream text;
  text << "test_loss=" << std::setprecision(9) << r.loss << "\ntest_error=" << r.error_rate
       << "\ncount=" << r.count << '\n';
  std::cout << text.str();
  write_text(out_dir / "eval.txt", text.str());
  return kOk;
}

template <typename T>
void trace_run(const RunConfig& config, const Checkpoint& ck, const LoadedData& data,
               const fs::path& out_dir) {
  auto model = load_model<T>(ck);
  const std::size_t stage = config.trace_stage - 1;
  const auto profile = trace(model, data.test, data.normalizer, stage);
  const auto files = export_profile(profile, out_dir, config.top_maps);
  std::ostringstream dist;
  dist << "category_a,category_b,distance\n" << std::setprecision(17);
  for (const auto& a : profile.categories) {
    for (const auto& b : profile.categories) dist << a << ',' << b << ',' << profile_distance(profile, a, b) << '\n';
  }
  write_text(out_dir / "distances.csv", dist.str());
  std::cout << "traced stage " << config.trace_stage << ": " << profile.units() << " units x "
            << profile.maps << " maps x " << profile.categories.size() << " categories\n";
  for (const auto& f : files) std::cout << "wrote " << f.string() << '\n';
  const auto halves = split_half_distances(model, data.test, data.normalizer, stage, config.plan.seed);
  std::cout << "split-half distance within " << format_error(halves.within) << " between "
            << format_error(halves.between) << '\n';
  if (ck.config.variant == Variant::cross_block) {
    for (const auto& f : export_reuse(reuse_report(model), out_dir)) {
      std::cout << "wrote " << f.string() << '\n';
    }
  }
}

int cmd_trace(RunConfig config, const fs::path& out_dir, const std::string& checkpoint) {
  const auto ck = read_checkpoint(checkpoint);
  adopt_checkpoint_network(config, ck);
  config.validate();
  echo_config(config, out_dir.string());
  const auto data = load_data(config.data);
  if (config.plan.precision == 64) {
    trace_run<double>(config, ck, data, out_dir);
  } else {
    trace_run<float>(config, ck, data, out_dir);
  }
  return kOk;
}

int cmd_sweep(const RunConfig& base, const fs::path& out_dir, const std::string& axis,
              const std::string& values, bool with_training) {
  if (axis != "k" && axis != "m" && axis != "depth") {
    throw UsageError("sweep axis must be k, m or depth, got '" + axis + "'");
  }
  const auto items = split_list(values);
  if (items.empty()) throw UsageError("sweep needs at least one value in --values");
  base.validate();
  echo_config(base, out_dir.string());
  std::optional<LoadedData> data;
  if (with_training) data = load_data(base.data);
  std::ostringstream csv;
  csv << "value,params,test_error\n";
  std::cout << "sweep over " << axis << '\n' << "value,params,test_error\n";
  for (const auto& v : items) {
    RunConfig config = base;
    config.apply(axis, v);
    config.validate();
    std::ostringstream row;
    row << v << ',' << deployment_table(config.net).back().params << ',';
    if (with_training) {
      const fs::path run_dir = out_dir / (axis + "_" + v);
      fs::create_directories(run_dir);
      write_text(run_dir / "effective_config.txt", config.to_text());
      const double error = config.plan.precision == 64
                               ? train_run<double>(config, *data, run_dir, "", false)
                               : train_run<float>(config, *data, run_dir, "", false);
      row << format_error(error);
    }
    std::cout << row.str() << std::endl;
    csv << row.str() << '\n';
  }
  write_text(out_dir / "sweep.csv", csv.str());
  return kOk;
}

int cmd_selfcheck(bool inject_fault) {
  if (inject_fault) testing_hooks::corrupt_max_backward() = true;
  const auto report = run_selfcheck([](const InvariantOutcome& o) {
    std::cout << (o.passed ? "PASS " : "FAIL ") << o.module << '/' << o.name;
    if (!o.passed) std::cout << ": " << o.detail;
    std::cout << std::endl;
  });
  std::cout << report.outcomes.size() - report.failures() << '/' << report.outcomes.size()
            << " invariants hold\n";
  return report.passed() ? kOk : kNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CoPaNet: competitive pathway networks"};
  app.require_subcommand(1);
  Invocation inv;

  auto add_common = [&](CLI::App* sub, bool with_out) {
    sub->add_option("--config,-c", inv.config_path, "key=value config file")->check(CLI::ExistingFile);
    sub->add_option("--set", inv.sets, "override one key (repeatable), e.g. --set k=3");
    sub->add_option("assignments", inv.assignments, "key=value overrides");
    sub->add_option("--seed", inv.seed, "training seed (same as seed=N)");
    sub->add_option("--precision", inv.precision, "32 or 64")->check(CLI::IsMember({32, 64}));
    if (with_out) sub->add_option("--out,-o", inv.out_dir, "output directory");
  };

  auto* params = app.add_subcommand("params", "deployment table and parameter count");
  add_common(params, true);
  auto* train_cmd = app.add_subcommand("train", "train a model and write log and checkpoint");
  add_common(train_cmd, true);
  train_cmd->add_option("--resume", inv.resume, "continue from a checkpoint of this run")
      ->check(CLI::ExistingFile);
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  add_common(eval_cmd, true);
  eval_cmd->add_option("--checkpoint", inv.checkpoint, "checkpoint file")->required();
  auto* trace_cmd = app.add_subcommand("trace", "routing profile, heatmaps and reuse report");
  add_common(trace_cmd, true);
  trace_cmd->add_option("--checkpoint", inv.checkpoint, "checkpoint file")->required();
  auto* sweep_cmd = app.add_subcommand("sweep", "parameters (and test error) over k, m or depth");
  add_common(sweep_cmd, true);
  sweep_cmd->add_option("--axis", inv.axis, "k, m or depth")->required();
  sweep_cmd->add_option("--values", inv.values, "comma-separated values")->required();
  sweep_cmd->add_flag("--train", inv.sweep_train, "train each point and report test error");
  auto* selfcheck = app.add_subcommand("selfcheck", "run the fast invariant suite");
  selfcheck->add_flag("--inject-max-backward-fault", inv.inject_fault,
                      "corrupt max backward to exercise the failure path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  auto out_or = [&](const char* fallback) { return inv.out_dir.empty() ? std::string(fallback) : inv.out_dir; };

  try {
    if (selfcheck->parsed()) return cmd_selfcheck(inv.inject_fault);
    const RunConfig config = effective_config(inv, args);
    if (params->parsed()) return cmd_params(config, inv.out_dir);
    if (train_cmd->parsed()) {
      const fs::path out = out_or("copanet_train");
      fs::create_directories(out);
      return cmd_train(config, out, inv.resume);
    }
    if (eval_cmd->parsed()) {
      const fs::path out = out_or("copanet_eval");
      fs::create_directories(out);
      return cmd_eval(config, out, inv.checkpoint);
    }
    if (trace_cmd->parsed()) {
      const fs::path out = out_or("copanet_trace");
      fs::create_directories(out);
      return cmd_trace(config, out, inv.checkpoint);
    }
    if (sweep_cmd->parsed()) {
      const fs::path out = out_or("copanet_sweep");
      fs::create_directories(out);
      return cmd_sweep(config, out, inv.axis, inv.values, inv.sweep_train);
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kData;
  }
  return kUsage;
}
