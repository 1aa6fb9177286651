// sbattn: train models, count costs, check gradients and sweep saturation.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sbattn/cifar.hpp"
#include "sbattn/config.hpp"
#include "sbattn/cost.hpp"
#include "sbattn/diagnostics.hpp"
#include "sbattn/errors.hpp"
#include "sbattn/saturation.hpp"

using namespace sbattn;
namespace fs = std::filesystem;

namespace {

void write_file(const std::string& path, const std::string& text) {
  if (path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path);
  out << text;
}

ExperimentConfig load(const std::string& config, const std::string& preset_name) {
  if (!config.empty()) return load_experiment(config);
  return preset(preset_name.empty() ? "desk" : preset_name);
}

int run_train(const std::string& config, const std::string& preset_name, const std::string& data,
              const std::string& out, const std::string& csv) {
  const ExperimentConfig c = load(config, preset_name);
  const auto dir = cifar::find_data_dir(data.empty() ? std::nullopt : std::optional<fs::path>(data));
  if (!dir) {
    std::cerr << "no CIFAR-10 batches found (pass --data, set CIFAR10_DIR or use ./data/cifar-10-batches-bin)\n";
    return 2;
  }
  const RunReport r = run_experiment(c, *dir);
  write_file(out, r.to_json().dump(2) + "\n");
  if (!csv.empty()) write_file(csv, r.to_csv());
  const EpochRecord& last = r.epochs.back();
  std::fprintf(stderr, "%zu epochs, test accuracy %.4f, %.1f s\n", r.epochs.size(), last.test_accuracy,
               r.wall_clock_seconds);
  return 0;
}

int run_count_costs(const std::string& config, const std::string& preset_name, const std::string& out,
                    const std::string& csv) {
  const ExperimentConfig c = load(config, preset_name);
  const Model model = build_mobilenet_v2(c.model);
  const std::size_t r = c.model.input_resolution;
  const CostReport report = count_madds(model, {3, r, r});
  nlohmann::json j = to_json(report);
  j["model"] = describe_model(model);
  write_file(out, j.dump(2) + "\n");
  if (!csv.empty()) write_file(csv, to_csv(report));
  std::fprintf(stderr, "params %llu, MAdds %llu\n", static_cast<unsigned long long>(report.params),
               static_cast<unsigned long long>(report.madds));
  return 0;
}

int run_grad_check(const std::string& mechanism, const std::string& gate_name, int trials) {
  const Mechanism m = parse_mechanism(mechanism);
  const GateKind gate = gate_name.empty() ? default_gate(m) : parse_gate(gate_name);
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    const BlockCheck b = block_grad_check(m, gate, t);
    std::printf("trial %2d  max rel err %.3e  at %s[%zu]  analytic %.6e  numeric %.6e\n", t,
                b.result.max_relative_error, b.result.worst_tensor.c_str(), b.result.worst_index, b.result.analytic,
                b.result.numeric);
    worst = std::max({worst, b.result.max_relative_error, b.removed_bias_grad > 1e-10 ? 1.0 : 0.0});
  }
  const bool ok = worst < 1e-4;
  const std::string label =
      m == Mechanism::none ? std::string(to_string(m)) : std::string(to_string(m)) + "/" + std::string(to_string(gate));
  std::printf("%s  %s  %d trials  max rel err %.3e (threshold 1e-4)\n", ok ? "PASS" : "FAIL", label.c_str(), trials,
              worst);
  return ok ? 0 : 1;
}

int run_sweep(const std::string& mechanism, const std::vector<double>& offsets, const std::string& out) {
  const SweepReport r = saturation_sweep(parse_mechanism(mechanism), offsets);
  write_file(out, to_csv(r));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Shift-and-balance attention toolkit"};
  app.require_subcommand(1);

  std::string config, preset_name, data, out = "-", csv;
  auto* train = app.add_subcommand("train", "Train on CIFAR-10 and write a run report");
  train->add_option("--config", config, "Experiment JSON")->check(CLI::ExistingFile);
  train->add_option("--preset", preset_name, "Preset when no config is given (default desk)");
  train->add_option("--data", data, "CIFAR-10 binary directory (default $CIFAR10_DIR or ./data/cifar-10-batches-bin)");
  train->add_option("--out", out, "Report JSON path, - for stdout");
  train->add_option("--csv", csv, "Per-epoch CSV path");

  auto* costs = app.add_subcommand("count-costs", "Parameter and MAdds breakdown of a model");
  costs->add_option("--config", config, "Experiment JSON")->check(CLI::ExistingFile);
  costs->add_option("--preset", preset_name, "Preset when no config is given (default desk)");
  costs->add_option("--out", out, "Report JSON path, - for stdout");
  costs->add_option("--csv", csv, "Per-layer CSV path");

  std::string mechanism = "sb", gate;
  int trials = 20;
  auto* grad = app.add_subcommand("grad-check", "Finite-difference check of an attention block");
  grad->add_option("--mechanism", mechanism, "static, se, sb or dyconv")->required();
  grad->add_option("--gate", gate, "tanh, sigmoid, softmax, relu or none (default: the mechanism's own)");
  grad->add_option("--trials", trials, "Seeded trials")->check(CLI::PositiveNumber);

  std::vector<double> offsets{-20, -10, -5, -2, 0, 2, 5, 10, 20};
  auto* sweep = app.add_subcommand("saturation-sweep", "Input-gradient norms as the branch gate saturates");
  sweep->add_option("--mechanism", mechanism, "se or sb")->required();
  sweep->add_option("--offsets", offsets, "Pre-gate bias offsets")->delimiter(',');
  sweep->add_option("--out", out, "CSV path, - for stdout");

  std::string synth_dir;
  std::size_t train_per_class = 40, test_per_class = 100;
  std::uint64_t seed = 0;
  auto* synth = app.add_subcommand("make-synthetic-data", "Write generated images in the CIFAR-10 binary layout");
  synth->add_option("--out", synth_dir, "Output directory")->required();
  synth->add_option("--train-per-class", train_per_class, "Images per class in each of the five training files");
  synth->add_option("--test-per-class", test_per_class, "Images per class in the test file");
  synth->add_option("--seed", seed, "Generator seed");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) return run_train(config, preset_name, data, out, csv);
    if (*costs) return run_count_costs(config, preset_name, out, csv);
    if (*grad) return run_grad_check(mechanism, gate, trials);
    if (*sweep) return run_sweep(mechanism, offsets, out);
    if (*synth) {
      fs::create_directories(synth_dir);
      cifar::write_synthetic(synth_dir, train_per_class, test_per_class, seed);
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
