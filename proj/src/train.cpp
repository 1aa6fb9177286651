#include "sbattn/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include "sbattn/errors.hpp"

namespace sbattn {

std::string_view to_string(Schedule schedule) { return schedule == Schedule::linear ? "linear" : "cosine"; }

Schedule parse_schedule(std::string_view text) {
  if (text == "linear") return Schedule::linear;
  if (text == "cosine") return Schedule::cosine;
  throw ConfigError("unknown schedule '" + std::string(text) + "'");
}

void TrainConfig::validate() const {
  if (!(lr0 >= 0.0)) throw ConfigError("lr0 must be non-negative");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be non-negative");
  if (batch_size < 2) throw ConfigError("batch size must be at least 2 for batch statistics");
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (eval_batch_size == 0) throw ConfigError("eval batch size must be positive");
  if (!(attention_dropout >= 0.0 && attention_dropout < 1.0)) throw ConfigError("attention dropout must lie in [0, 1)");
}

nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j = {{"lr0", c.lr0},
                      {"momentum", c.momentum},
                      {"weight_decay", c.weight_decay},
                      {"batch_size", c.batch_size},
                      {"epochs", c.epochs},
                      {"schedule", std::string(to_string(c.schedule))},
                      {"seed", c.seed},
                      {"attention_dropout", c.attention_dropout},
                      {"augment", c.augment},
                      {"eval_batch_size", c.eval_batch_size}};
  if (c.subset_size) j["subset_size"] = *c.subset_size;
  if (c.test_subset_size) j["test_subset_size"] = *c.test_subset_size;
  return j;
}

double lr_at(Schedule schedule, std::size_t epoch, std::size_t total_epochs, double lr0) {
  if (total_epochs == 0 || epoch >= total_epochs) {
    throw ContractError("epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(total_epochs) + ")");
  }
  const double progress = static_cast<double>(epoch) / static_cast<double>(total_epochs);
  if (schedule == Schedule::linear) return lr0 * (1.0 - progress);
  constexpr double kPi = 3.14159265358979323846;
  return lr0 * (1.0 + std::cos(kPi * progress)) / 2.0;
}

void sgd_step(std::span<Parameter* const> params, double lr, double momentum, double weight_decay) {
  for (Parameter* p : params) {
    const bool decay = !p->decay_exempt && weight_decay != 0.0;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      double g = p->grad[i];
      if (decay) g += weight_decay * p->value[i];
      const double buf = momentum * p->momentum_buffer[i] + g;
      p->momentum_buffer[i] = buf;
      p->value[i] -= lr * buf;
    }
    p->zero_grad();
  }
}

namespace {

LambdaStats stats_of(std::string site, std::span<const double> values) {
  LambdaStats s;
  s.site = std::move(site);
  s.min = *std::min_element(values.begin(), values.end());
  s.max = *std::max_element(values.begin(), values.end());
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  return s;
}

nlohmann::json stats_json(const LambdaStats& s) {
  return {{"site", s.site}, {"min", s.min}, {"mean", s.mean}, {"max", s.max}};
}

std::mt19937_64 epoch_rng(std::uint64_t seed, std::size_t epoch, std::uint32_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), stream};
  return std::mt19937_64(seq);
}

}  // namespace

std::vector<LambdaStats> lambda_statistics(const Model& model) {
  std::vector<LambdaStats> out;
  for (const LambdaSite& site : model.lambda_sites()) out.push_back(stats_of(site.name, site.lambda->value.data()));
  return out;
}

std::optional<LambdaStats> lambda_summary(const Model& model) {
  std::vector<double> all;
  for (const LambdaSite& site : model.lambda_sites()) {
    all.insert(all.end(), site.lambda->value.data().begin(), site.lambda->value.data().end());
  }
  if (all.empty()) return std::nullopt;
  return stats_of("all", all);
}

Tensor predict(Model& model, const Tensor& images) {
  const Mode saved = model.mode();
  model.set_mode(Mode::eval);
  Tape tape;
  Tensor logits = model.forward(tape, tape.constant(images)).value();
  model.set_mode(saved);
  return logits;
}

double evaluate_accuracy(Model& model, const cifar::Dataset& data, std::size_t batch_size) {
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const Tensor logits = predict(model, data.gather(idx));
    const std::size_t k = logits.dim(1);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const double* row = logits.raw() + i * k;
      const auto best = static_cast<int>(std::max_element(row, row + k) - row);
      if (best == data.labels[start + i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

RunReport train_eval(Model& model, const cifar::Dataset& train, const cifar::Dataset& test, const TrainConfig& config) {
  config.validate();
  if (train.size() < 2) throw ContractError("training set needs at least two samples");
  const auto started = std::chrono::steady_clock::now();
  model.set_branch_dropout(config.attention_dropout);
  std::vector<Parameter*> params = model.parameters();
  for (Parameter* p : params) p->zero_grad();

  RunReport report;
  report.config = {{"model", to_json(model.config)}, {"train", to_json(config)}};

  std::vector<std::size_t> order(train.size());
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = lr_at(config.schedule, epoch, config.epochs, config.lr0);
    model.set_mode(Mode::train);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 shuffle_rng = epoch_rng(config.seed, epoch, 1);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    std::mt19937_64 aug_rng = epoch_rng(config.seed, epoch, 2);

    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0, b = 0; start < order.size(); start += config.batch_size, ++b) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      if (end - start < 2) break;  // batch statistics need two samples
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      Tensor images = train.gather(idx);
      if (config.augment) {
        for (std::size_t i = 0; i < idx.size(); ++i) {
          const Tensor aug = cifar::augment(train.image(idx[i]), aug_rng);
          std::copy(aug.raw(), aug.raw() + aug.size(), images.raw() + i * cifar::kImageBytes);
        }
      }
      std::vector<int> labels;
      for (std::size_t i : idx) labels.push_back(train.labels[i]);

      Tape tape;
      double loss_value = 0.0;
      try {
        Var logits = model.forward(tape, tape.constant(std::move(images)));
        Var loss = cross_entropy(logits, labels);
        loss_value = loss.value().item();
        tape.backward(loss);
      } catch (const NumericError& e) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b) +
                           ": " + e.what());
      }
      sgd_step(params, lr, config.momentum, config.weight_decay);
      loss_sum += loss_value * static_cast<double>(idx.size());
      seen += idx.size();
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(seen);
    rec.test_accuracy = evaluate_accuracy(model, test, config.eval_batch_size);
    rec.lambda = lambda_summary(model);
    rec.lambda_sites = lambda_statistics(model);
    report.epochs.push_back(std::move(rec));
  }
  model.set_mode(Mode::train);
  report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

nlohmann::json RunReport::to_json(bool include_timing) const {
  nlohmann::json epochs_json = nlohmann::json::array();
  for (const EpochRecord& e : epochs) {
    nlohmann::json j = {{"epoch", e.epoch}, {"lr", e.lr}, {"train_loss", e.train_loss}, {"test_accuracy", e.test_accuracy}};
    if (e.lambda) {
      j["lambda"] = stats_json(*e.lambda);
      nlohmann::json sites = nlohmann::json::array();
      for (const LambdaStats& s : e.lambda_sites) sites.push_back(stats_json(s));
      j["lambda_sites"] = sites;
    }
    epochs_json.push_back(std::move(j));
  }
  nlohmann::json out = {{"config", config}, {"epochs", epochs_json}};
  if (include_timing) out["wall_clock_seconds"] = wall_clock_seconds;
  return out;
}

std::string RunReport::to_csv() const {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  os << "epoch,lr,train_loss,test_acc,lambda_min,lambda_mean,lambda_max\n";
  for (const EpochRecord& e : epochs) {
    os << e.epoch << ',' << e.lr << ',' << e.train_loss << ',' << e.test_accuracy << ',';
    if (e.lambda) {
      os << e.lambda->min << ',' << e.lambda->mean << ',' << e.lambda->max;
    } else {
      os << ",,";
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace sbattn
