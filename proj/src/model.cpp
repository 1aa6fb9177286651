#include "sbattn/model.hpp"

#include <algorithm>
#include <cmath>

#include "sbattn/errors.hpp"

namespace sbattn {

std::string_view to_string(Position position) {
  switch (position) {
    case Position::c1: return "C1";
    case Position::c2: return "C2";
    case Position::c3: return "C3";
  }
  return "?";
}

Position parse_position(std::string_view text) {
  if (text == "C1" || text == "c1") return Position::c1;
  if (text == "C2" || text == "c2") return Position::c2;
  if (text == "C3" || text == "c3") return Position::c3;
  throw ConfigError("unknown attention placement '" + std::string(text) + "'");
}

AttentionPlacement AttentionPlacement::parse(const std::vector<std::string>& names) {
  AttentionPlacement p;
  for (const std::string& n : names) {
    switch (parse_position(n)) {
      case Position::c1: p.c1 = true; break;
      case Position::c2: p.c2 = true; break;
      case Position::c3: p.c3 = true; break;
    }
  }
  return p;
}

bool AttentionPlacement::contains(Position p) const {
  switch (p) {
    case Position::c1: return c1;
    case Position::c2: return c2;
    case Position::c3: return c3;
  }
  return false;
}

std::vector<std::string> AttentionPlacement::names() const {
  std::vector<std::string> out;
  if (c1) out.emplace_back("C1");
  if (c2) out.emplace_back("C2");
  if (c3) out.emplace_back("C3");
  return out;
}

std::string_view to_string(Variant variant) { return variant == Variant::cifar ? "cifar" : "imagenet"; }

Variant parse_variant(std::string_view text) {
  if (text == "imagenet") return Variant::imagenet;
  if (text == "cifar") return Variant::cifar;
  throw ConfigError("unknown model variant '" + std::string(text) + "'");
}

std::vector<StageSpec> mobilenet_v2_stages(Variant variant) {
  std::vector<StageSpec> stages{{1, 16, 1, 1}, {6, 24, 2, 2}, {6, 32, 3, 2}, {6, 64, 4, 2},
                                {6, 96, 3, 1}, {6, 160, 3, 2}, {6, 320, 1, 1}};
  // 32x32 inputs keep full resolution through the first downsampling stage.
  if (variant == Variant::cifar) stages[1].stride = 1;
  return stages;
}

std::vector<StageSpec> ModelConfig::resolved_stages() const {
  return stages ? *stages : mobilenet_v2_stages(variant);
}

std::size_t make_divisible(double v, std::size_t divisor) {
  if (!(v > 0.0)) throw ContractError("make_divisible needs a positive value");
  const auto d = static_cast<double>(divisor);
  auto rounded = static_cast<std::size_t>(std::floor((v + d / 2.0) / d)) * divisor;
  rounded = std::max(divisor, rounded);
  if (static_cast<double>(rounded) < 0.9 * v) rounded += divisor;
  return rounded;
}

// ---------------------------------------------------------------------------

Var ConvBnAct::forward(Tape& tape, Var x) {
  ScopeGuard scope(tape, conv.name);
  Var y = batch_norm(tape, conv.forward(tape, x), bn);
  return clamp ? relu6(y) : y;
}

void ConvBnAct::set_mode(Mode mode) {
  conv.set_mode(mode);
  bn.mode = mode;
}

void ConvBnAct::collect(std::vector<Parameter*>& out) {
  conv.collect(out);
  out.push_back(&bn.gamma);
  out.push_back(&bn.beta);
}

std::size_t ConvBnAct::parameter_count() const {
  return conv.kernel_parameter_count() + conv.attention_parameter_count() + bn.gamma.size() + bn.beta.size();
}

ConvBnAct* InvertedBottleneck::unit(Position p) {
  switch (p) {
    case Position::c1: return expand ? &*expand : nullptr;
    case Position::c2: return &depthwise;
    case Position::c3: return &project;
  }
  return nullptr;
}

const ConvBnAct* InvertedBottleneck::unit(Position p) const {
  return const_cast<InvertedBottleneck*>(this)->unit(p);
}

Var forward_inverted_bottleneck(Tape& tape, Var x, InvertedBottleneck& block) {
  if (x.value().rank() != 4 || x.value().dim(1) != block.spec.in_channels) {
    throw DimensionError(block.name + ": expected " + std::to_string(block.spec.in_channels) + " channels, got " +
                         shape_str(x.value().shape()));
  }
  Var h = x;
  if (block.expand) h = block.expand->forward(tape, h);
  h = block.depthwise.forward(tape, h);
  h = block.project.forward(tape, h);
  if (block.spec.residual()) {
    ScopeGuard scope(tape, block.name + ".residual");
    h = add(h, x);
  }
  return h;
}

Var Model::forward(Tape& tape, Var x) {
  Var h = stem.forward(tape, x);
  for (InvertedBottleneck& b : blocks) h = forward_inverted_bottleneck(tape, h, b);
  h = head.forward(tape, h);
  ScopeGuard scope(tape, "classifier");
  h = classifier_dropout(global_avg_pool(h));
  return fully_connected(tape, h, classifier);
}

void Model::set_mode(Mode mode) {
  mode_ = mode;
  stem.set_mode(mode);
  for (InvertedBottleneck& b : blocks) {
    if (b.expand) b.expand->set_mode(mode);
    b.depthwise.set_mode(mode);
    b.project.set_mode(mode);
  }
  head.set_mode(mode);
  classifier_dropout.mode = mode;
}

std::vector<Parameter*> Model::parameters() {
  std::vector<Parameter*> out;
  stem.collect(out);
  for (InvertedBottleneck& b : blocks) {
    if (b.expand) b.expand->collect(out);
    b.depthwise.collect(out);
    b.project.collect(out);
  }
  head.collect(out);
  out.push_back(&classifier.weight);
  out.push_back(&classifier.bias);
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t total = 0;
  for (const ConvBnAct* u : units()) total += u->parameter_count();
  return total + classifier.weight.size() + classifier.bias.size();
}

std::vector<const ConvBnAct*> Model::units() const {
  std::vector<const ConvBnAct*> out{&stem};
  for (const InvertedBottleneck& b : blocks) {
    if (b.expand) out.push_back(&*b.expand);
    out.push_back(&b.depthwise);
    out.push_back(&b.project);
  }
  out.push_back(&head);
  return out;
}

std::vector<LambdaSite> Model::lambda_sites() const {
  std::vector<LambdaSite> out;
  for (const ConvBnAct* u : units()) {
    if (u->conv.sb) out.push_back({u->conv.name, &u->conv.sb->lambda});
  }
  return out;
}

void Model::set_branch_dropout(double rate) {
  auto apply = [rate](ConvBnAct& u) {
    if (u.conv.branch) u.conv.branch->hidden_dropout.config.rate = rate;
    if (u.conv.dynamic) u.conv.dynamic->branch.hidden_dropout.config.rate = rate;
  };
  for (InvertedBottleneck& b : blocks) {
    if (b.expand) apply(*b.expand);
    apply(b.depthwise);
    apply(b.project);
  }
}

// ---------------------------------------------------------------------------

namespace {

std::size_t hidden_units(const AttentionSpec& a, Position p, std::size_t c_in, std::size_t c_out) {
  if (a.mechanism == Mechanism::dyconv) return std::max<std::size_t>(1, c_in / a.dyconv_hidden_divisor);
  if (p == Position::c2) return (c_out + a.depthwise_hidden_divisor - 1) / a.depthwise_hidden_divisor;
  return c_out * a.pointwise_hidden_multiplier;
}

ConvBnAct make_unit(const ModelConfig& cfg, const std::string& name, std::size_t c_in, std::size_t c_out,
                    std::size_t k, std::size_t stride, std::size_t groups, bool clamp, std::optional<Position> pos) {
  AttentionSettings s;
  if (pos && cfg.placement.contains(*pos)) {
    const AttentionSpec& a = cfg.attention;
    s.mechanism = a.mechanism;
    s.gate = a.resolved_gate();
    s.c_hidden = hidden_units(a, *pos, c_in, c_out);
    s.lambda_init = a.lambda_init;
    s.experts = a.experts;
    s.temperature = a.temperature;
    s.bn_after_relu = a.bn_after_relu;
    s.branch_dropout = a.branch_dropout;
  }
  std::mt19937_64 rng(cfg.seed ^ stable_hash(name));
  ConvBnAct u;
  u.conv = AttentiveConv::make(name, c_in, c_out, k, Conv2dOptions{stride, k / 2, groups}, s, rng);
  u.bn = BatchNormState::make(name + ".bn", c_out);
  u.clamp = clamp;
  return u;
}

void validate(const ModelConfig& cfg) {
  if (!(cfg.width_multiplier > 0.0)) throw ConfigError("width multiplier must be positive");
  if (cfg.num_classes == 0) throw ConfigError("num_classes must be positive");
  if (cfg.input_resolution == 0) throw ConfigError("input resolution must be positive");
  if (!(cfg.classifier_dropout >= 0.0 && cfg.classifier_dropout < 1.0)) {
    throw ConfigError("classifier dropout must lie in [0, 1)");
  }
  const AttentionSpec& a = cfg.attention;
  if (a.mechanism != Mechanism::none && cfg.placement.empty()) {
    throw ConfigError("attention mechanism " + std::string(to_string(a.mechanism)) + " needs a placement");
  }
  if (a.pointwise_hidden_multiplier == 0 || a.depthwise_hidden_divisor == 0 || a.dyconv_hidden_divisor == 0) {
    throw ConfigError("attention hidden-unit ratios must be positive");
  }
  if (a.mechanism == Mechanism::dyconv && a.experts == 0) throw ConfigError("dyconv needs at least one expert");
  if (!(a.temperature > 0.0)) throw ConfigError("temperature must be positive");
  for (const StageSpec& s : cfg.resolved_stages()) {
    if (s.expansion == 0 || s.channels == 0 || s.repeats == 0 || (s.stride != 1 && s.stride != 2)) {
      throw ConfigError("invalid stage specification");
    }
  }
}

}  // namespace

Model build_mobilenet_v2(const ModelConfig& cfg) {
  validate(cfg);
  const double w = cfg.width_multiplier;
  Model m;
  m.config = cfg;

  std::size_t in_c = make_divisible(static_cast<double>(cfg.stem_channels.value_or(32)) * w);
  const std::size_t stem_stride = cfg.stem_stride.value_or(cfg.variant == Variant::cifar ? 1 : 2);
  m.stem = make_unit(cfg, "stem", 3, in_c, 3, stem_stride, 1, true, std::nullopt);

  std::size_t index = 0;
  for (const StageSpec& stage : cfg.resolved_stages()) {
    const std::size_t out_c = make_divisible(static_cast<double>(stage.channels) * w);
    for (std::size_t r = 0; r < stage.repeats; ++r, ++index) {
      InvertedBottleneck b;
      b.name = "blocks." + std::to_string(index);
      b.spec = BlockSpec{in_c, out_c, stage.expansion, r == 0 ? stage.stride : 1};
      const std::size_t hid = b.spec.hidden_channels();
      if (stage.expansion != 1) {
        b.expand = make_unit(cfg, b.name + ".C1", in_c, hid, 1, 1, 1, true, Position::c1);
      }
      b.depthwise = make_unit(cfg, b.name + ".C2", hid, hid, 3, b.spec.stride, hid, true, Position::c2);
      b.project = make_unit(cfg, b.name + ".C3", hid, out_c, 1, 1, 1, false, Position::c3);
      m.blocks.push_back(std::move(b));
      in_c = out_c;
    }
  }

  const double head_base = static_cast<double>(cfg.head_channels.value_or(1280));
  const std::size_t head_c = make_divisible(head_base * std::max(1.0, w));
  m.head = make_unit(cfg, "head", in_c, head_c, 1, 1, 1, true, std::nullopt);

  m.classifier_dropout.config = DropoutConfig{cfg.classifier_dropout, cfg.seed ^ stable_hash("classifier.dropout")};
  std::mt19937_64 rng(cfg.seed ^ stable_hash("classifier"));
  m.classifier.weight = Parameter("classifier.weight", random_normal({head_c, cfg.num_classes}, rng, 0.0, 0.01));
  m.classifier.bias = Parameter("classifier.bias", Tensor::zeros({cfg.num_classes}));
  m.set_mode(Mode::train);
  return m;
}

// ---------------------------------------------------------------------------

nlohmann::json to_json(const ModelConfig& c) {
  nlohmann::json stages = nlohmann::json::array();
  for (const StageSpec& s : c.resolved_stages()) stages.push_back({s.expansion, s.channels, s.repeats, s.stride});
  const AttentionSpec& a = c.attention;
  nlohmann::json j = {
      {"width_multiplier", c.width_multiplier},
      {"num_classes", c.num_classes},
      {"input_resolution", c.input_resolution},
      {"classifier_dropout", c.classifier_dropout},
      {"variant", std::string(to_string(c.variant))},
      {"placement", c.placement.names()},
      {"stages", stages},
      {"seed", c.seed},
      {"attention",
       {{"mechanism", std::string(to_string(a.mechanism))},
        {"gate", std::string(to_string(a.resolved_gate()))},
        {"pointwise_hidden_multiplier", a.pointwise_hidden_multiplier},
        {"depthwise_hidden_divisor", a.depthwise_hidden_divisor},
        {"dyconv_hidden_divisor", a.dyconv_hidden_divisor},
        {"lambda_init", a.lambda_init},
        {"experts", a.experts},
        {"temperature", a.temperature},
        {"bn_after_relu", a.bn_after_relu},
        {"branch_dropout", a.branch_dropout}}},
  };
  if (c.stem_channels) j["stem_channels"] = *c.stem_channels;
  if (c.stem_stride) j["stem_stride"] = *c.stem_stride;
  if (c.head_channels) j["head_channels"] = *c.head_channels;
  return j;
}

nlohmann::json describe_model(const Model& model) {
  nlohmann::json layers = nlohmann::json::array();
  std::size_t h = model.config.input_resolution, w = model.config.input_resolution;
  for (const ConvBnAct* u : model.units()) {
    const AttentiveConv& c = u->conv;
    const std::size_t oh = conv_out_extent(h, c.kernel, c.options.stride, c.options.padding);
    const std::size_t ow = conv_out_extent(w, c.kernel, c.options.stride, c.options.padding);
    nlohmann::json layer = {
        {"name", c.name},
        {"type", c.options.groups == 1 ? (c.kernel == 1 ? "conv_pw" : "conv") : "conv_dw"},
        {"in_shape", {c.c_in, h, w}},
        {"out_shape", {c.c_out, oh, ow}},
        {"kernel", c.kernel},
        {"stride", c.options.stride},
        {"groups", c.options.groups},
        {"activation", u->clamp ? "relu6" : "linear"},
        {"params", u->parameter_count()},
        {"attention", std::string(to_string(c.mechanism))},
    };
    if (c.branch) layer["attention_hidden"] = c.branch->c_hidden();
    if (c.dynamic) {
      layer["attention_hidden"] = c.dynamic->branch.c_hidden();
      layer["experts"] = c.dynamic->n();
    }
    layers.push_back(std::move(layer));
    h = oh;
    w = ow;
  }
  const std::size_t head_c = model.classifier.in_features();
  layers.push_back({{"name", "classifier"},
                    {"type", "fc"},
                    {"in_shape", {head_c}},
                    {"out_shape", {model.classifier.out_features()}},
                    {"params", model.classifier.weight.size() + model.classifier.bias.size()}});
  return {{"config", to_json(model.config)}, {"layers", layers}, {"parameter_count", model.parameter_count()}};
}

}  // namespace sbattn
