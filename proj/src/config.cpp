#include "sbattn/config.hpp"

#include <fstream>
#include <set>

#include "sbattn/errors.hpp"

namespace sbattn {

using nlohmann::json;

ExperimentConfig preset(std::string_view name) {
  ExperimentConfig c;
  if (name == "imagenet-paper") {
    c.model.variant = Variant::imagenet;
    c.model.input_resolution = 224;
    c.model.num_classes = 1000;
    c.model.attention.mechanism = Mechanism::sb;
    c.model.placement = AttentionPlacement::all();
    c.train.lr0 = 0.1;
    c.train.weight_decay = 4e-5;
    c.train.batch_size = 256;
    c.train.epochs = 300;
    c.train.schedule = Schedule::linear;
    c.train.augment = false;  // the 224x224 pipeline is not shipped
  } else if (name == "cifar-paper") {
    c.model.variant = Variant::cifar;
    c.model.input_resolution = 32;
    c.model.num_classes = 10;
    c.model.attention.mechanism = Mechanism::sb;
    c.model.placement = AttentionPlacement::all();
    c.train.lr0 = 0.1;
    c.train.weight_decay = 5e-4;
    c.train.batch_size = 128;
    c.train.epochs = 200;
    c.train.schedule = Schedule::cosine;
  } else if (name == "desk") {
    c.model.variant = Variant::cifar;
    c.model.input_resolution = 32;
    c.model.num_classes = 10;
    c.model.attention.mechanism = Mechanism::sb;
    c.model.placement = AttentionPlacement::all();
    c.model.stem_channels = 16;
    c.model.stem_stride = 2;
    c.model.stages = std::vector<StageSpec>{{6, 24, 1, 1}, {6, 32, 1, 2}};
    c.model.head_channels = 128;
    c.train.lr0 = 0.05;
    c.train.weight_decay = 5e-4;
    c.train.batch_size = 128;
    c.train.epochs = 10;
    c.train.schedule = Schedule::cosine;
    c.train.subset_size = 2000;
    c.train.test_subset_size = 1000;
  } else {
    throw ConfigError("unknown preset '" + std::string(name) + "'");
  }
  return c;
}

namespace {

void reject_unknown(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
void read(const json& obj, const char* key, T& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

template <typename T>
void read(const json& obj, const char* key, std::optional<T>& out) {
  if (!obj.contains(key)) return;
  if (obj.at(key).is_null()) {
    out.reset();
    return;
  }
  T v{};
  read(obj, key, v);
  out = v;
}

void parse_attention(const json& j, AttentionSpec& a) {
  reject_unknown(j, {"mechanism", "gate", "pointwise_hidden_multiplier", "depthwise_hidden_divisor",
                     "dyconv_hidden_divisor", "lambda_init", "experts", "temperature", "bn_after_relu",
                     "branch_dropout"},
                 "model.attention");
  if (j.contains("mechanism")) a.mechanism = parse_mechanism(j.at("mechanism").get<std::string>());
  if (j.contains("gate")) a.gate = parse_gate(j.at("gate").get<std::string>());
  read(j, "pointwise_hidden_multiplier", a.pointwise_hidden_multiplier);
  read(j, "depthwise_hidden_divisor", a.depthwise_hidden_divisor);
  read(j, "dyconv_hidden_divisor", a.dyconv_hidden_divisor);
  read(j, "lambda_init", a.lambda_init);
  read(j, "experts", a.experts);
  read(j, "temperature", a.temperature);
  read(j, "bn_after_relu", a.bn_after_relu);
  read(j, "branch_dropout", a.branch_dropout);
}

void parse_model(const json& j, ModelConfig& m) {
  reject_unknown(j, {"width_multiplier", "num_classes", "attention", "placement", "input_resolution",
                     "classifier_dropout", "variant", "stages", "stem_channels", "stem_stride", "head_channels", "seed"},
                 "model");
  read(j, "width_multiplier", m.width_multiplier);
  read(j, "num_classes", m.num_classes);
  read(j, "input_resolution", m.input_resolution);
  read(j, "classifier_dropout", m.classifier_dropout);
  read(j, "seed", m.seed);
  read(j, "stem_channels", m.stem_channels);
  read(j, "stem_stride", m.stem_stride);
  read(j, "head_channels", m.head_channels);
  if (j.contains("variant")) {
    m.variant = parse_variant(j.at("variant").get<std::string>());
    if (!j.contains("input_resolution")) m.input_resolution = m.variant == Variant::cifar ? 32 : 224;
  }
  if (j.contains("placement")) m.placement = AttentionPlacement::parse(j.at("placement").get<std::vector<std::string>>());
  if (j.contains("attention")) parse_attention(j.at("attention"), m.attention);
  if (j.contains("stages")) {
    std::vector<StageSpec> stages;
    for (const json& s : j.at("stages")) {
      const auto v = s.get<std::vector<std::size_t>>();
      if (v.size() != 4) throw ConfigError("each stage is [expansion, channels, repeats, stride]");
      stages.push_back({v[0], v[1], v[2], v[3]});
    }
    m.stages = std::move(stages);
  }
}

void parse_train(const json& j, TrainConfig& t) {
  reject_unknown(j, {"lr0", "momentum", "weight_decay", "batch_size", "epochs", "schedule", "seed", "subset_size",
                     "test_subset_size", "attention_dropout", "augment", "eval_batch_size"},
                 "train");
  read(j, "lr0", t.lr0);
  read(j, "momentum", t.momentum);
  read(j, "weight_decay", t.weight_decay);
  read(j, "batch_size", t.batch_size);
  read(j, "epochs", t.epochs);
  read(j, "seed", t.seed);
  read(j, "subset_size", t.subset_size);
  read(j, "test_subset_size", t.test_subset_size);
  read(j, "attention_dropout", t.attention_dropout);
  read(j, "augment", t.augment);
  read(j, "eval_batch_size", t.eval_batch_size);
  if (j.contains("schedule")) t.schedule = parse_schedule(j.at("schedule").get<std::string>());
}

}  // namespace

ExperimentConfig parse_experiment(const json& doc) {
  reject_unknown(doc, {"preset", "model", "train"}, "config");
  ExperimentConfig c = doc.contains("preset") ? preset(doc.at("preset").get<std::string>()) : ExperimentConfig{};
  if (doc.contains("model")) parse_model(doc.at("model"), c.model);
  if (doc.contains("train")) parse_train(doc.at("train"), c.train);
  c.train.validate();
  return c;
}

ExperimentConfig load_experiment(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot open config " + file.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw ConfigError(file.string() + ": " + e.what());
  }
  return parse_experiment(doc);
}

json to_json(const ExperimentConfig& c) { return {{"model", to_json(c.model)}, {"train", to_json(c.train)}}; }

RunReport run_experiment(const ExperimentConfig& config, const std::filesystem::path& data_dir) {
  config.train.validate();
  if (config.model.num_classes != cifar::kNumClasses || config.model.input_resolution != cifar::kSide) {
    throw ConfigError("training runs on CIFAR-10: model needs num_classes 10 and input_resolution 32");
  }
  const cifar::ChannelStats stats = cifar::channel_stats(cifar::read_split(data_dir, cifar::Split::train));
  const cifar::Dataset train =
      cifar::load_cifar10(data_dir, cifar::Split::train, config.train.subset_size, config.train.seed, stats);
  const cifar::Dataset test =
      cifar::load_cifar10(data_dir, cifar::Split::test, config.train.test_subset_size, config.train.seed, stats);
  Model model = build_mobilenet_v2(config.model);
  return train_eval(model, train, test, config.train);
}

}  // namespace sbattn
