#include <gtest/gtest.h>

#include <numeric>
#include <sstream>

#include "sbattn/cost.hpp"
#include "sbattn/errors.hpp"

using namespace sbattn;

namespace {

ModelConfig imagenet(double width, Mechanism m = Mechanism::none, AttentionPlacement p = {}) {
  ModelConfig c;
  c.width_multiplier = width;
  c.attention.mechanism = m;
  c.placement = p;
  return c;
}

// Runs a real branch + combine on a batch of one and returns the counter delta.
OpCost measured_overhead(std::size_t c_in, std::size_t c_out, std::size_t c_hid, std::size_t h, std::size_t w,
                         Mechanism m, std::mt19937_64& rng) {
  AttentionBranch b = AttentionBranch::make("b", c_in, c_hid, c_out, default_gate(m), rng);
  b.set_mode(Mode::eval);  // a single sample has no batch statistics; BN is uncounted either way
  SBParams sb = SBParams::make("sb", c_out);
  Tape tape;
  Var x = tape.constant(random_normal({1, c_in, h, w}, rng));
  Var t = tape.constant(random_normal({1, c_out, h, w}, rng));
  const OpCounter before = tape.counter();
  Var a = attention_branch_forward(tape, x, b);
  if (m == Mechanism::sb) {
    sb_combine(tape, t, a, sb);
  } else {
    se_combine(t, a);
  }
  return {tape.counter().multiplies - before.multiplies, tape.counter().adds - before.adds};
}

}  // namespace

TEST(AttentionOverhead, Example) {
  const OpCost c = attention_overhead(16, 16, 16, 32, 32, Mechanism::sb);
  EXPECT_EQ(c.multiplies, 544u);
  EXPECT_EQ(c.adds, 33280u);
  const OpCost se = attention_overhead(16, 16, 16, 32, 32, Mechanism::se);
  EXPECT_EQ(se.multiplies, 16u + 256u + 256u + 16u * 1024u);
  EXPECT_EQ(se.adds, 16384u + 256u + 256u);
}

TEST(AttentionOverhead, RejectsDegenerateDimensions) {
  EXPECT_THROW(attention_overhead(16, 16, 0, 32, 32, Mechanism::sb), ContractError);
  EXPECT_THROW(attention_overhead(0, 16, 4, 32, 32, Mechanism::sb), ContractError);
  EXPECT_THROW(attention_overhead(16, 16, 4, 0, 32, Mechanism::se), ContractError);
  EXPECT_THROW(attention_overhead(16, 16, 4, 8, 8, Mechanism::dyconv), ContractError);
}

TEST(AttentionOverhead, MatchesInstrumentedCounter) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> ch(1, 48), hw(1, 20);
  for (int t = 0; t < 50; ++t) {
    const std::size_t c_in = ch(rng), c_out = ch(rng), c_hid = ch(rng), h = hw(rng), w = hw(rng);
    for (Mechanism m : {Mechanism::se, Mechanism::sb}) {
      EXPECT_EQ(measured_overhead(c_in, c_out, c_hid, h, w, m, rng), attention_overhead(c_in, c_out, c_hid, h, w, m))
          << to_string(m) << " " << c_in << "," << c_out << "," << c_hid << "," << h << "," << w;
    }
  }
}

TEST(AttentionOverhead, SbTradesBroadcastMultipliesForAdds) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<std::size_t> ch(1, 512), hw(1, 64);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t c_in = ch(rng), c_out = ch(rng), c_hid = ch(rng), h = hw(rng), w = hw(rng);
    const OpCost sb = attention_overhead(c_in, c_out, c_hid, h, w, Mechanism::sb);
    const OpCost se = attention_overhead(c_in, c_out, c_hid, h, w, Mechanism::se);
    const auto delta = static_cast<std::int64_t>(sb.multiplies) - static_cast<std::int64_t>(se.multiplies);
    // SB's c_out lambda multiplies replace SE's c_out*h*w broadcast multiplies
    EXPECT_EQ(delta, static_cast<std::int64_t>(c_out) - static_cast<std::int64_t>(c_out * h * w));
    if (h * w > 1) EXPECT_LT(sb.multiplies, se.multiplies);
    EXPECT_EQ(sb.adds - se.adds, c_out * h * w);
  }
}

TEST(CountMadds, PointwiseConvExample) {
  Tape tape;
  conv2d(tape.constant(Tensor({1, 8, 32, 32})), tape.constant(Tensor({16, 8, 1, 1})));
  EXPECT_EQ(tape.counter().multiplies, 131072u);
}

TEST(CountParams, SingleFullyConnectedLayer) {
  std::mt19937_64 rng(1);
  const Linear fc = Linear::make("fc", 10, 5, rng);
  EXPECT_EQ(fc.weight.size() + fc.bias.size(), 55u);
}

TEST(CountMadds, ReportTotalsAreBreakdownSums) {
  for (Mechanism m : {Mechanism::none, Mechanism::se, Mechanism::sb, Mechanism::dyconv}) {
    const Model model =
        build_mobilenet_v2(imagenet(0.5, m, m == Mechanism::none ? AttentionPlacement{} : AttentionPlacement::all()));
    const CostReport r = count_madds(model, {3, 224, 224});
    std::uint64_t p = 0, mul = 0, add = 0;
    for (const LayerCost& l : r.breakdown) {
      p += l.params;
      mul += l.multiplies;
      add += l.adds;
    }
    EXPECT_EQ(r.params, p);
    EXPECT_EQ(r.multiplies, mul);
    EXPECT_EQ(r.adds, add);
    EXPECT_EQ(r.madds, r.multiplies);
    EXPECT_EQ(r.params, count_params(model)) << to_string(m);
  }
}

TEST(CountMadds, BatchAxisIsIgnored) {
  const Model model = build_mobilenet_v2(imagenet(0.35));
  EXPECT_EQ(count_madds(model, {1, 3, 224, 224}).multiplies, count_madds(model, {3, 224, 224}).multiplies);
}

TEST(CountMadds, ShapeErrors) {
  const Model model = build_mobilenet_v2(imagenet(0.35));
  EXPECT_THROW(count_madds(model, {1, 4, 224, 224}), DimensionError);
  EXPECT_THROW(count_madds(model, {224, 224}), DimensionError);
}

TEST(CountMadds, StaticWidthOneNear300M) {
  const CostReport r = count_madds(build_mobilenet_v2(imagenet(1.0)), {3, 224, 224});
  EXPECT_NEAR(static_cast<double>(r.madds) / 300.0e6, 1.0, 0.05) << r.madds;
}

TEST(CountMadds, SbNarrowNear60M) {
  const CostReport r =
      count_madds(build_mobilenet_v2(imagenet(0.35, Mechanism::sb, AttentionPlacement::all())), {3, 224, 224});
  EXPECT_NEAR(static_cast<double>(r.madds) / 60.2e6, 1.0, 0.05) << r.madds;
}

TEST(CountMadds, AttentionEntriesMatchOverheadFormula) {
  const Model model = build_mobilenet_v2(imagenet(0.35, Mechanism::sb, AttentionPlacement::all()));
  const CostReport r = count_madds(model, {3, 224, 224});
  std::size_t h = 224;
  std::size_t seen = 0;
  for (const ConvBnAct* u : model.units()) {
    const AttentiveConv& c = u->conv;
    const std::size_t oh = conv_out_extent(h, c.kernel, c.options.stride, c.options.padding);
    if (c.branch) {
      const auto it = std::find_if(r.breakdown.begin(), r.breakdown.end(),
                                   [&](const LayerCost& l) { return l.name == c.name + ".attention"; });
      ASSERT_NE(it, r.breakdown.end()) << c.name;
      const OpCost o = attention_overhead_strided(c.c_in, c.c_out, c.branch->c_hidden(), h * h, oh * oh, c.mechanism);
      EXPECT_EQ(it->multiplies, o.multiplies);
      EXPECT_EQ(it->adds, o.adds);
      if (c.options.stride == 1) {
        EXPECT_EQ(o, attention_overhead(c.c_in, c.c_out, c.branch->c_hidden(), h, h, c.mechanism));
      }
      ++seen;
    }
    h = oh;
  }
  EXPECT_EQ(seen, model.lambda_sites().size());
}

TEST(CountParams, SbMinusSeIsLambdaCount) {
  const AttentionPlacement p = AttentionPlacement::all();
  const Model se = build_mobilenet_v2(imagenet(0.35, Mechanism::se, p));
  const Model sb = build_mobilenet_v2(imagenet(0.35, Mechanism::sb, p));
  std::uint64_t placed = 0;
  for (const ConvBnAct* u : sb.units()) {
    if (u->conv.branch) placed += u->conv.c_out;
  }
  EXPECT_EQ(count_params(sb) - count_params(se), placed);
}

TEST(CountParams, DyConvExpertsAreNTimesStaticKernels) {
  for (std::size_t n : {1u, 2u, 4u}) {
    ModelConfig c = imagenet(0.5, Mechanism::dyconv, AttentionPlacement::all());
    c.attention.experts = n;
    const Model dy = build_mobilenet_v2(c);
    const Model st = build_mobilenet_v2(imagenet(0.5));
    const auto du = dy.units(), su = st.units();
    ASSERT_EQ(du.size(), su.size());
    for (std::size_t i = 0; i < du.size(); ++i) {
      const std::size_t expected = du[i]->conv.dynamic ? n * su[i]->conv.kernel_parameter_count()
                                                       : su[i]->conv.kernel_parameter_count();
      EXPECT_EQ(du[i]->conv.kernel_parameter_count(), expected) << du[i]->conv.name;
      if (du[i]->conv.dynamic) {
        EXPECT_EQ(du[i]->conv.attention_parameter_count(), du[i]->conv.dynamic->branch.parameter_count());
      }
    }
  }
}

TEST(CountParams, DyConvHalfWidthNear3951K) {
  const Model dy = build_mobilenet_v2(imagenet(0.5, Mechanism::dyconv, AttentionPlacement::all()));
  EXPECT_NEAR(static_cast<double>(count_params(dy)) / 3.951e6, 1.0, 0.03) << count_params(dy);
}

TEST(CostReport, CsvAndJson) {
  const Model model = build_mobilenet_v2(imagenet(0.35, Mechanism::se, AttentionPlacement{false, false, true}));
  const CostReport r = count_madds(model, {3, 224, 224});
  const std::string csv = to_csv(r);
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "name,type,params,multiplies,adds");
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 4) << line;
    ++rows;
  }
  EXPECT_EQ(rows, r.breakdown.size());
  const nlohmann::json j = to_json(r);
  EXPECT_EQ(j.at("madds").get<std::uint64_t>(), r.madds);
  EXPECT_EQ(j.at("params").get<std::uint64_t>(), r.params);
  EXPECT_EQ(j.at("breakdown").size(), r.breakdown.size());
  EXPECT_EQ(j.at("breakdown").back().at("type"), "fc");
  EXPECT_EQ(nlohmann::json::parse(j.dump()), j);
}

TEST(CostReport, AddAccumulates) {
  CostReport r;
  r.add({"a", "conv", 3, 10, 20});
  r.add({"b", "fc", 4, 1, 2});
  EXPECT_EQ(r.params, 7u);
  EXPECT_EQ(r.multiplies, 11u);
  EXPECT_EQ(r.adds, 22u);
  EXPECT_EQ(r.madds, 11u);
}
