#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "sbattn/cifar.hpp"
#include "sbattn/model.hpp"

namespace sbattn {

enum class Schedule { linear, cosine };

std::string_view to_string(Schedule schedule);
Schedule parse_schedule(std::string_view text);

struct TrainConfig {
  double lr0 = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t batch_size = 128;
  std::size_t epochs = 10;
  Schedule schedule = Schedule::cosine;
  std::uint64_t seed = 0;
  std::optional<std::size_t> subset_size;
  std::optional<std::size_t> test_subset_size;
  double attention_dropout = 0.0;
  bool augment = true;
  std::size_t eval_batch_size = 250;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);

/// Learning rate for an epoch: linear decays to 0, cosine anneals to 0.
double lr_at(Schedule schedule, std::size_t epoch, std::size_t total_epochs, double lr0);

/// SGD with momentum and L2 weight decay (skipped for decay-exempt
/// parameters). Gradients are zeroed afterwards.
void sgd_step(std::span<Parameter* const> params, double lr, double momentum, double weight_decay);

struct LambdaStats {
  std::string site;
  double min = 0.0;
  double mean = 0.0;
  double max = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double test_accuracy = 0.0;
  /// Over all lambda entries of the model; present only for SB models.
  std::optional<LambdaStats> lambda;
  std::vector<LambdaStats> lambda_sites;
};

struct RunReport {
  nlohmann::json config;
  std::vector<EpochRecord> epochs;
  double wall_clock_seconds = 0.0;

  /// Wall-clock time is the only field that varies between seeded runs.
  nlohmann::json to_json(bool include_timing = true) const;
  /// epoch,lr,train_loss,test_acc,lambda_min,lambda_mean,lambda_max
  std::string to_csv() const;
};

std::vector<LambdaStats> lambda_statistics(const Model& model);
std::optional<LambdaStats> lambda_summary(const Model& model);

/// Fraction of correctly classified samples, eval mode.
double evaluate_accuracy(Model& model, const cifar::Dataset& data, std::size_t batch_size);

/// Logits of a batch in eval mode.
Tensor predict(Model& model, const Tensor& images);

RunReport train_eval(Model& model, const cifar::Dataset& train, const cifar::Dataset& test, const TrainConfig& config);

}  // namespace sbattn
