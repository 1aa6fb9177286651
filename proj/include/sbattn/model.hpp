#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sbattn/attention.hpp"
#include "sbattn/layers.hpp"

namespace sbattn {

/// Where attention attaches inside an inverted bottleneck.
enum class Position { c1, c2, c3 };

std::string_view to_string(Position position);
Position parse_position(std::string_view text);

struct AttentionPlacement {
  bool c1 = false;
  bool c2 = false;
  bool c3 = false;

  static AttentionPlacement all() { return {true, true, true}; }
  static AttentionPlacement parse(const std::vector<std::string>& names);
  bool contains(Position p) const;
  bool empty() const { return !c1 && !c2 && !c3; }
  std::vector<std::string> names() const;
};

struct AttentionSpec {
  Mechanism mechanism = Mechanism::none;
  /// Defaults to sigmoid for SE, tanh for SB, softmax for DyConv.
  std::optional<GateKind> gate;
  /// SE/SB hidden units at pointwise convs = multiplier * c_out.
  std::size_t pointwise_hidden_multiplier = 1;
  /// SE/SB hidden units at the depthwise conv = ceil(c_out / divisor).
  std::size_t depthwise_hidden_divisor = 6;
  /// DyConv hidden units = max(1, c_in / divisor).
  std::size_t dyconv_hidden_divisor = 4;
  double lambda_init = 0.1;
  std::size_t experts = 4;
  double temperature = 30.0;
  bool bn_after_relu = false;
  double branch_dropout = 0.0;

  GateKind resolved_gate() const { return gate.value_or(default_gate(mechanism)); }
};

/// (expansion t, base channels c, repeats n, first stride s) of one stage.
struct StageSpec {
  std::size_t expansion;
  std::size_t channels;
  std::size_t repeats;
  std::size_t stride;

  friend bool operator==(const StageSpec&, const StageSpec&) = default;
};

enum class Variant { imagenet, cifar };

std::string_view to_string(Variant variant);
Variant parse_variant(std::string_view text);

/// MobileNetV2 stage table.
std::vector<StageSpec> mobilenet_v2_stages(Variant variant);

struct ModelConfig {
  double width_multiplier = 1.0;
  std::size_t num_classes = 1000;
  AttentionSpec attention;
  AttentionPlacement placement;
  std::size_t input_resolution = 224;
  double classifier_dropout = 0.2;
  Variant variant = Variant::imagenet;
  /// Overrides of the standard topology (base widths, before the multiplier).
  std::optional<std::vector<StageSpec>> stages;
  std::optional<std::size_t> stem_channels;
  std::optional<std::size_t> stem_stride;  ///< default: 1 for cifar, 2 for imagenet
  std::optional<std::size_t> head_channels;
  std::uint64_t seed = 0;

  std::vector<StageSpec> resolved_stages() const;
};

/// Rounds v to the nearest multiple of divisor (at least divisor), bumping
/// one step up when rounding lost more than 10%.
std::size_t make_divisible(double v, std::size_t divisor = 8);

struct BlockSpec {
  std::size_t in_channels;
  std::size_t out_channels;
  std::size_t expansion;
  std::size_t stride;

  bool residual() const { return stride == 1 && in_channels == out_channels; }
  std::size_t hidden_channels() const { return in_channels * expansion; }
};

/// Convolution (with optional attention), batch norm, then ReLU6 or nothing.
struct ConvBnAct {
  AttentiveConv conv;
  BatchNormState bn;
  bool clamp = true;

  Var forward(Tape& tape, Var x);
  void set_mode(Mode mode);
  void collect(std::vector<Parameter*>& out);
  std::size_t parameter_count() const;
};

struct InvertedBottleneck {
  std::string name;
  BlockSpec spec;
  std::optional<ConvBnAct> expand;  // C1, absent when expansion == 1
  ConvBnAct depthwise;              // C2
  ConvBnAct project;                // C3, linear

  ConvBnAct* unit(Position p);
  const ConvBnAct* unit(Position p) const;
};

Var forward_inverted_bottleneck(Tape& tape, Var x, InvertedBottleneck& block);

struct LambdaSite {
  std::string name;
  const Parameter* lambda;
};

class Model {
 public:
  ModelConfig config;
  ConvBnAct stem;
  std::vector<InvertedBottleneck> blocks;
  ConvBnAct head;
  Dropout classifier_dropout;
  Linear classifier;

  Var forward(Tape& tape, Var x);
  void set_mode(Mode mode);
  Mode mode() const { return mode_; }
  /// Every parameter in a fixed order.
  std::vector<Parameter*> parameters();
  std::size_t parameter_count() const;
  std::vector<LambdaSite> lambda_sites() const;
  /// Every convolution unit (stem, block convs, head) in forward order.
  std::vector<const ConvBnAct*> units() const;
  void set_branch_dropout(double rate);

 private:
  Mode mode_ = Mode::train;
};

Model build_mobilenet_v2(const ModelConfig& config);

nlohmann::json to_json(const ModelConfig& config);
/// Layer list, shapes, attention settings and parameter count.
nlohmann::json describe_model(const Model& model);

}  // namespace sbattn
