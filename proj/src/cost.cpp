#include "sbattn/cost.hpp"

#include <sstream>

#include "sbattn/errors.hpp"

namespace sbattn {

void CostReport::add(LayerCost entry) {
  params += entry.params;
  multiplies += entry.multiplies;
  adds += entry.adds;
  madds = multiplies;
  breakdown.push_back(std::move(entry));
}

OpCost attention_overhead_strided(std::size_t c_in, std::size_t c_out, std::size_t c_hid, std::size_t in_hw,
                                  std::size_t out_hw, Mechanism mechanism) {
  if (c_in == 0 || c_out == 0 || c_hid == 0 || in_hw == 0 || out_hw == 0) {
    throw ContractError("attention_overhead needs positive dimensions");
  }
  OpCost cost;
  // GAP
  cost.multiplies += c_in;
  cost.adds += c_in * in_hw;
  // two fully-connected layers
  cost.multiplies += c_in * c_hid + c_hid * c_out;
  cost.adds += c_in * c_hid + c_hid * c_out;
  // integration
  switch (mechanism) {
    case Mechanism::sb:
      cost.multiplies += c_out;
      cost.adds += c_out * out_hw;
      break;
    case Mechanism::se:
      cost.multiplies += c_out * out_hw;
      break;
    default:
      throw ContractError("attention_overhead covers the se and sb mechanisms");
  }
  return cost;
}

OpCost attention_overhead(std::size_t c_in, std::size_t c_out, std::size_t c_hid, std::size_t h, std::size_t w,
                          Mechanism mechanism) {
  if (h == 0 || w == 0) throw ContractError("attention_overhead needs positive dimensions");
  return attention_overhead_strided(c_in, c_out, c_hid, h * w, h * w, mechanism);
}

std::uint64_t count_params(const Model& model) { return model.parameter_count(); }

CostReport count_madds(const Model& model, const Shape& input_shape) {
  if (input_shape.size() != 3 && input_shape.size() != 4) {
    throw DimensionError("count_madds expects an NCHW or CHW input shape, got " + shape_str(input_shape));
  }
  const std::size_t off = input_shape.size() - 3;
  std::size_t c = input_shape[off], h = input_shape[off + 1], w = input_shape[off + 2];
  if (c != model.stem.conv.c_in) {
    throw DimensionError("model expects " + std::to_string(model.stem.conv.c_in) + " input channels, got " +
                         std::to_string(c));
  }

  CostReport report;
  for (const ConvBnAct* u : model.units()) {
    const AttentiveConv& conv = u->conv;
    const std::size_t oh = conv_out_extent(h, conv.kernel, conv.options.stride, conv.options.padding);
    const std::size_t ow = conv_out_extent(w, conv.kernel, conv.options.stride, conv.options.padding);
    const std::uint64_t conv_ops =
        static_cast<std::uint64_t>(conv.c_out) * oh * ow * (conv.c_in / conv.options.groups) * conv.kernel * conv.kernel;
    const char* type = conv.options.groups == 1 ? (conv.kernel == 1 ? "conv_pw" : "conv") : "conv_dw";
    report.add({conv.name, type, conv.kernel_parameter_count() + u->bn.gamma.size() + u->bn.beta.size(), conv_ops,
                conv_ops});

    if (conv.branch) {
      const OpCost a = attention_overhead_strided(conv.c_in, conv.c_out, conv.branch->c_hidden(), h * w, oh * ow, conv.mechanism);
      report.add({conv.name + ".attention", std::string(to_string(conv.mechanism)), conv.attention_parameter_count(),
                  a.multiplies, a.adds});
    }
    if (conv.dynamic) {
      const DyConvExperts& d = *conv.dynamic;
      const std::uint64_t hid = d.branch.c_hidden(), n = d.n();
      const std::uint64_t kp = d.experts.front().size();
      LayerCost entry{conv.name + ".attention", "dyconv", conv.attention_parameter_count(), 0, 0};
      entry.multiplies = conv.c_in + conv.c_in * hid + hid * n + n * kp;
      entry.adds = conv.c_in * h * w + conv.c_in * hid + hid * n + (n - 1) * kp;
      report.add(std::move(entry));
    }
    c = conv.c_out;
    h = oh;
    w = ow;
  }
  report.add({"pool", "gap", 0, c, c * h * w});
  const std::uint64_t fc = static_cast<std::uint64_t>(model.classifier.in_features()) * model.classifier.out_features();
  report.add({"classifier", "fc", model.classifier.weight.size() + model.classifier.bias.size(), fc, fc});
  return report;
}

nlohmann::json to_json(const CostReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const LayerCost& l : report.breakdown) {
    rows.push_back({{"name", l.name}, {"type", l.type}, {"params", l.params}, {"multiplies", l.multiplies}, {"adds", l.adds}});
  }
  return {{"params", report.params},
          {"multiplies", report.multiplies},
          {"adds", report.adds},
          {"madds", report.madds},
          {"breakdown", rows}};
}

std::string to_csv(const CostReport& report) {
  std::ostringstream os;
  os << "name,type,params,multiplies,adds\n";
  for (const LayerCost& l : report.breakdown) {
    os << l.name << ',' << l.type << ',' << l.params << ',' << l.multiplies << ',' << l.adds << '\n';
  }
  return os.str();
}

}  // namespace sbattn
