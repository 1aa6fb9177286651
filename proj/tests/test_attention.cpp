#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "sbattn/attention.hpp"
#include "sbattn/diagnostics.hpp"
#include "sbattn/errors.hpp"
#include "sbattn/grad_check.hpp"
#include "sbattn/saturation.hpp"

using namespace sbattn;

namespace {

Tensor randn(Shape s, std::uint64_t seed, double stddev = 1.0) {
  std::mt19937_64 rng(seed);
  return random_normal(std::move(s), rng, 0.0, stddev);
}

void zero_branch(AttentionBranch& b) {
  for (Parameter* p : {&b.fc1.weight, &b.fc1.bias, &b.fc2.weight, &b.fc2.bias}) p->value.fill(0.0);
}

AttentionSettings settings_for(Mechanism m, GateKind gate, std::size_t hidden) {
  AttentionSettings s;
  s.mechanism = m;
  s.gate = gate;
  s.c_hidden = hidden;
  return s;
}

constexpr GateKind kAllGates[] = {GateKind::tanh, GateKind::sigmoid, GateKind::softmax, GateKind::relu,
                                  GateKind::none};

}  // namespace

// enumerations --------------------------------------------------------------------

TEST(Enums, RoundTrip) {
  for (GateKind g : kAllGates) EXPECT_EQ(parse_gate(to_string(g)), g);
  for (Mechanism m : {Mechanism::none, Mechanism::se, Mechanism::sb, Mechanism::dyconv}) {
    EXPECT_EQ(parse_mechanism(to_string(m)), m);
  }
  EXPECT_EQ(parse_mechanism("static"), Mechanism::none);
  EXPECT_EQ(parse_mechanism("none"), Mechanism::none);
  EXPECT_THROW(parse_gate("swish"), ConfigError);
  EXPECT_THROW(parse_mechanism("cbam"), ConfigError);
  EXPECT_EQ(default_gate(Mechanism::se), GateKind::sigmoid);
  EXPECT_EQ(default_gate(Mechanism::sb), GateKind::tanh);
  EXPECT_EQ(default_gate(Mechanism::dyconv), GateKind::softmax);
}

// attention branch --------------------------------------------------------------------

TEST(AttentionBranch, ZeroWeightsTanhGivesZero) {
  std::mt19937_64 rng(1);
  AttentionBranch b = AttentionBranch::make("b", 6, 4, 5, GateKind::tanh, rng);
  zero_branch(b);
  Tape tape;
  const Tensor a = attention_branch_forward(tape, tape.constant(randn({3, 6, 4, 4}, 2)), b).value();
  EXPECT_EQ(a.shape(), (Shape{3, 5}));
  for (double v : a.data()) EXPECT_EQ(v, 0.0);
}

TEST(AttentionBranch, ZeroWeightsSigmoidGivesHalf) {
  std::mt19937_64 rng(3);
  AttentionBranch b = AttentionBranch::make("b", 6, 4, 5, GateKind::sigmoid, rng);
  zero_branch(b);
  Tape tape;
  for (double v : attention_branch_forward(tape, tape.constant(randn({3, 6, 4, 4}, 4)), b).value().data()) {
    EXPECT_EQ(v, 0.5);
  }
}

TEST(AttentionBranch, MatchesHandComposedPipeline) {
  for (int t = 0; t < 10; ++t) {
    std::mt19937_64 rng(10 + t);
    AttentionBranch b = AttentionBranch::make("b", 5, 7, 6, GateKind::tanh, rng);
    b.bn.gamma.value = randn({7}, 20 + t) + Tensor({7}, 1.0);
    b.bn.beta.value = randn({7}, 30 + t, 0.3);
    const Tensor x = randn({4, 5, 3, 3}, 40 + t, 2.0);
    Tape tape;
    const Tensor a = attention_branch_forward(tape, tape.constant(x), b).value();

    Tensor h = oracle::fully_connected(oracle::gap(x), b.fc1.weight.value, b.fc1.bias.value);
    h = oracle::batch_norm_rows(h, b.bn.gamma.value, b.bn.beta.value, b.bn.epsilon);
    h = oracle::map(h, [](double v) { return v > 0 ? v : 0.0; });
    const Tensor ref = oracle::map(oracle::fully_connected(h, b.fc2.weight.value, b.fc2.bias.value),
                                   [](double v) { return std::tanh(v); });
    EXPECT_LT(max_abs_diff(a, ref), 1e-12) << t;
    for (double v : a.data()) {
      EXPECT_GT(v, -1.0);
      EXPECT_LT(v, 1.0);
    }
  }
}

TEST(AttentionBranch, GateRanges) {
  for (GateKind gate : {GateKind::tanh, GateKind::sigmoid, GateKind::softmax}) {
    for (int t = 0; t < 20; ++t) {
      std::mt19937_64 rng(50 + t);
      AttentionBranch b = AttentionBranch::make("b", 4, 4, 6, gate, rng);
      Tape tape;
      const Tensor a = attention_branch_forward(tape, tape.constant(randn({3, 4, 2, 2}, 60 + t, 5.0)), b).value();
      for (std::size_t n = 0; n < 3; ++n) {
        double row = 0.0;
        for (std::size_t c = 0; c < 6; ++c) {
          const double v = a.at(n, c);
          row += v;
          if (gate == GateKind::tanh) EXPECT_TRUE(v > -1.0 && v < 1.0);
          if (gate == GateKind::sigmoid) EXPECT_TRUE(v > 0.0 && v < 1.0);
          if (gate == GateKind::softmax) EXPECT_GE(v, 0.0);
        }
        if (gate == GateKind::softmax) EXPECT_NEAR(row, 1.0, 1e-12);
      }
    }
  }
}

TEST(AttentionBranch, NoneGateReturnsLogits) {
  std::mt19937_64 rng(5);
  AttentionBranch b = AttentionBranch::make("b", 4, 4, 3, GateKind::none, rng);
  const Tensor x = randn({2, 4, 3, 3}, 6);
  Tape tape;
  const Tensor a = attention_branch_forward(tape, tape.constant(x), b).value();
  const Tensor z = attention_branch_logits(tape, tape.constant(x), b).value();
  EXPECT_EQ(a, z);
}

TEST(AttentionBranch, BnAfterReluOrdering) {
  std::mt19937_64 rng(7);
  AttentionBranch b = AttentionBranch::make("b", 4, 6, 3, GateKind::none, rng);
  b.bn_after_relu = true;
  const Tensor x = randn({5, 4, 2, 2}, 8);
  Tape tape;
  const Tensor z = attention_branch_logits(tape, tape.constant(x), b).value();
  Tensor h = oracle::fully_connected(oracle::gap(x), b.fc1.weight.value, b.fc1.bias.value);
  h = oracle::map(h, [](double v) { return v > 0 ? v : 0.0; });
  // A hidden unit that is zero for the whole batch has zero variance; BN maps it to beta.
  h = oracle::batch_norm_rows(h, b.bn.gamma.value, b.bn.beta.value, b.bn.epsilon);
  EXPECT_LT(max_abs_diff(z, oracle::fully_connected(h, b.fc2.weight.value, b.fc2.bias.value)), 1e-12);
}

TEST(AttentionBranch, ChannelMismatch) {
  std::mt19937_64 rng(9);
  AttentionBranch b = AttentionBranch::make("b", 4, 4, 3, GateKind::tanh, rng);
  Tape tape;
  EXPECT_THROW(attention_branch_forward(tape, tape.constant(Tensor({2, 5, 3, 3})), b), DimensionError);
  EXPECT_THROW(attention_branch_forward(tape, tape.constant(Tensor({2, 4})), b), DimensionError);
  EXPECT_THROW(AttentionBranch::make("b", 4, 0, 3, GateKind::tanh, rng), ConfigError);
}

TEST(AttentionBranch, HiddenDropoutInTrainModeOnly) {
  std::mt19937_64 rng(11);
  AttentionBranch b = AttentionBranch::make("b", 4, 16, 3, GateKind::none, rng);
  b.hidden_dropout.config.rate = 0.5;
  const Tensor x = randn({4, 4, 2, 2}, 12);
  Tape tape;
  const Tensor with = attention_branch_logits(tape, tape.constant(x), b).value();
  b.hidden_dropout.config.rate = 0.0;
  const Tensor without = attention_branch_logits(tape, tape.constant(x), b).value();
  EXPECT_NE(with, without);
  b.hidden_dropout.config.rate = 0.5;
  b.set_mode(Mode::eval);
  AttentionBranch b2 = b;
  b2.hidden_dropout.config.rate = 0.0;
  EXPECT_EQ(attention_branch_logits(tape, tape.constant(x), b).value(),
            attention_branch_logits(tape, tape.constant(x), b2).value());
}

// combines -----------------------------------------------------------------------------

TEST(SeCombine, Examples) {
  const Tensor t = randn({2, 3, 4, 4}, 13);
  Tape tape;
  EXPECT_EQ(se_combine(tape.constant(t), tape.constant(Tensor::ones({2, 3}))).value(), t);
  EXPECT_EQ(se_combine(tape.constant(t), tape.constant(Tensor::zeros({2, 3}))).value(), Tensor::zeros(t.shape()));
  std::mt19937_64 rng(14);
  AttentionBranch b = AttentionBranch::make("b", 3, 3, 3, GateKind::sigmoid, rng);
  zero_branch(b);
  Var a = attention_branch_forward(tape, tape.constant(t), b);
  EXPECT_EQ(se_combine(tape.constant(t), a).value(), t * 0.5);
}

TEST(SeCombine, CountsAndErrors) {
  Tape tape;
  se_combine(tape.constant(Tensor({2, 3, 4, 5})), tape.constant(Tensor({2, 3})));
  EXPECT_EQ(tape.counter().multiplies, 2u * 3u * 4u * 5u);
  EXPECT_EQ(tape.counter().adds, 0u);
  EXPECT_THROW(se_combine(tape.constant(Tensor({2, 3, 4, 5})), tape.constant(Tensor({2, 4}))), DimensionError);
  EXPECT_THROW(se_combine(tape.constant(Tensor({2, 3, 4, 5})), tape.constant(Tensor({1, 3}))), DimensionError);
}

TEST(SbCombine, Examples) {
  const Tensor t = randn({2, 3, 4, 4}, 15);
  Tape tape;
  const Tensor a = randn({2, 3}, 16);
  EXPECT_EQ(sb_combine(tape.constant(t), tape.constant(a), tape.constant(Tensor::zeros({3}))).value(), t);
  EXPECT_EQ(sb_combine(tape.constant(t), tape.constant(Tensor::zeros({2, 3})), tape.constant(randn({3}, 17))).value(),
            t);
  const Tensor lam({3}, std::vector<double>{0.1, -0.5, 2.0});
  const Tensor y = sb_combine(tape.constant(t), tape.constant(a), tape.constant(lam)).value();
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 16; ++i) {
        EXPECT_DOUBLE_EQ(y.at(n, c, i / 4, i % 4), t.at(n, c, i / 4, i % 4) + lam[c] * a.at(n, c));
      }
}

TEST(SbCombine, ZeroBranchTanhIsIdentity) {
  const Tensor t = randn({2, 3, 4, 4}, 18);
  std::mt19937_64 rng(19);
  AttentionBranch b = AttentionBranch::make("b", 3, 3, 3, GateKind::tanh, rng);
  zero_branch(b);
  SBParams sb = SBParams::make("sb", 3);
  Tape tape;
  Var a = attention_branch_forward(tape, tape.constant(t), b);
  EXPECT_EQ(sb_combine(tape, tape.constant(t), a, sb).value(), t);
}

TEST(SbCombine, CountsAndErrors) {
  Tape tape;
  sb_combine(tape.constant(Tensor({2, 3, 4, 5})), tape.constant(Tensor({2, 3})), tape.constant(Tensor({3})));
  EXPECT_EQ(tape.counter().multiplies, 2u * 3u);
  EXPECT_EQ(tape.counter().adds, 2u * 3u * 4u * 5u);
  EXPECT_THROW(sb_combine(tape.constant(Tensor({2, 3, 4, 5})), tape.constant(Tensor({2, 3})),
                          tape.constant(Tensor({4}))),
               DimensionError);
  EXPECT_THROW(sb_combine(tape.constant(Tensor({2, 3, 4, 5})), tape.constant(Tensor({2, 2})),
                          tape.constant(Tensor({3}))),
               DimensionError);
}

TEST(SbParams, Defaults) {
  SBParams sb = SBParams::make("x", 7);
  EXPECT_EQ(sb.lambda.value, Tensor({7}, 0.1));
  EXPECT_TRUE(sb.lambda.decay_exempt);
  EXPECT_EQ(sb.lambda.grad.shape(), (Shape{7}));
}

TEST(Combines, GradCheck) {
  for (int t = 0; t < 20; ++t) {
    const Tensor g = randn({2, 3, 3, 3}, 100 + t);
    const ValueMap point{{"t", randn({2, 3, 3, 3}, 200 + t)}, {"a", randn({2, 3}, 300 + t)}, {"l", randn({3}, 400 + t)}};
    auto se = [&](Tape&, const VarMap& v) { return weighted_sum(se_combine(v.at("t"), v.at("a")), g); };
    auto sb = [&](Tape&, const VarMap& v) { return weighted_sum(sb_combine(v.at("t"), v.at("a"), v.at("l")), g); };
    EXPECT_LT(grad_check(se, point, 1e-5), 1e-4) << t;
    EXPECT_LT(grad_check(sb, point, 1e-5), 1e-4) << t;
  }
}

// range invariants -----------------------------------------------------------------------

TEST(RangeInvariant, SbTanhShiftBoundedByLambda) {
  for (int t = 0; t < 1000; ++t) {
    std::mt19937_64 rng(5000 + t);
    const std::size_t c = 1 + t % 5;
    AttentiveConv conv = AttentiveConv::make("c", c, c, 1, {}, settings_for(Mechanism::sb, GateKind::tanh, c), rng);
    conv.sb->lambda.value = random_normal({c}, rng, 0.0, 2.0);
    const Tensor x = random_normal({2, c, 3, 3}, rng, 0.0, 3.0);
    Tape tape;
    Var xv = tape.constant(x);
    const Tensor tt = conv2d(xv, tape.param(conv.weight)).value();
    const Tensor y = conv.forward(tape, xv).value();
    const double bound = conv.sb->lambda.value.max_abs();
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < 9; ++i) {
          const double d = std::abs(y.at(n, ch, i / 3, i % 3) - tt.at(n, ch, i / 3, i % 3));
          ASSERT_LE(d, bound) << t;
          ASSERT_LE(d, std::abs(conv.sb->lambda.value[ch]) * (1 + 1e-15)) << t;
        }
  }
}

TEST(RangeInvariant, SeSigmoidBetweenZeroAndTrunk) {
  for (int t = 0; t < 1000; ++t) {
    std::mt19937_64 rng(9000 + t);
    const std::size_t c = 1 + t % 5;
    AttentiveConv conv =
        AttentiveConv::make("c", c, c, 1, {}, settings_for(Mechanism::se, GateKind::sigmoid, c), rng);
    const Tensor x = random_normal({2, c, 3, 3}, rng, 0.0, 3.0);
    Tape tape;
    Var xv = tape.constant(x);
    const Tensor tt = conv2d(xv, tape.param(conv.weight)).value();
    const Tensor y = conv.forward(tape, xv).value();
    for (std::size_t i = 0; i < y.size(); ++i) {
      ASSERT_LE(std::abs(y[i]), std::abs(tt[i])) << t;
      ASSERT_GE(y[i] * tt[i], 0.0) << t;
    }
  }
}

// dynamic convolution --------------------------------------------------------------------

TEST(DyConv, SingleExpertIsStaticConv) {
  std::mt19937_64 rng(21);
  DyConvExperts d = DyConvExperts::make("d", 4, 6, 3, 1, 1, 30.0, 1, rng);
  const Tensor x = randn({3, 4, 5, 5}, 22);
  Tape tape;
  const Tensor y = dyconv_forward(tape, tape.constant(x), d, {1, 1, 1}).value();
  const Tensor ref = conv2d(tape.constant(x), tape.constant(d.experts[0].value), {1, 1, 1}).value();
  EXPECT_LT(max_abs_diff(y, ref), 1e-12);
}

TEST(DyConv, OneHotAttentionSelectsExpert) {
  for (std::size_t j = 0; j < 4; ++j) {
    std::mt19937_64 rng(23 + j);
    DyConvExperts d = DyConvExperts::make("d", 4, 4, 3, 2, 4, 1.0, 2, rng);
    d.branch.fc2.bias.value[j] = 1e3;
    const Tensor x = randn({2, 4, 5, 5}, 24);
    Tape tape;
    const Tensor pi = dyconv_attention(tape, tape.constant(x), d).value();
    EXPECT_NEAR(pi.at(0, j), 1.0, 1e-12);
    const Tensor y = dyconv_forward(tape, tape.constant(x), d, {2, 1, 2}).value();
    EXPECT_LT(max_abs_diff(y, oracle::conv2d(x, d.experts[j].value, 2, 1, 2)), 1e-9) << j;
  }
}

TEST(DyConv, IdenticalExpertsAreStaticConv) {
  std::mt19937_64 rng(25);
  DyConvExperts d = DyConvExperts::make("d", 6, 6, 3, 6, 4, 30.0, 2, rng);
  for (Parameter& e : d.experts) e.value = d.experts[0].value;
  d.branch.fc2.weight.value = randn(d.branch.fc2.weight.value.shape(), 26, 50.0);
  const Tensor x = randn({3, 6, 4, 4}, 27);
  Tape tape;
  const Tensor y = dyconv_forward(tape, tape.constant(x), d, {1, 1, 6}).value();
  EXPECT_LT(max_abs_diff(y, oracle::conv2d(x, d.experts[0].value, 1, 1, 6)), 1e-9);
}

TEST(DyConv, MatchesPerSampleMixedKernelOracle) {
  std::mt19937_64 rng(28);
  DyConvExperts d = DyConvExperts::make("d", 4, 6, 3, 2, 3, 2.0, 2, rng);
  d.branch.fc2.weight.value = randn(d.branch.fc2.weight.value.shape(), 29, 3.0);
  const Tensor x = randn({3, 4, 6, 6}, 30);
  Tape tape;
  const Tensor pi = dyconv_attention(tape, tape.constant(x), d).value();
  const Tensor y = dyconv_forward(tape, tape.constant(x), d, {2, 1, 2}).value();
  for (std::size_t n = 0; n < 3; ++n) {
    Tensor mixed(d.experts[0].value.shape());
    for (std::size_t j = 0; j < 3; ++j) mixed += d.experts[j].value * pi.at(n, j);
    Tensor xs({1, 4, 6, 6});
    std::copy(x.raw() + n * 144, x.raw() + (n + 1) * 144, xs.raw());
    const Tensor ref = oracle::conv2d(xs, mixed, 2, 1, 2);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[n * ref.size() + i], ref[i], 1e-12);
  }
}

TEST(DyConv, AttentionIsSimplexPerSample) {
  for (int t = 0; t < 50; ++t) {
    std::mt19937_64 rng(300 + t);
    DyConvExperts d = DyConvExperts::make("d", 8, 8, 3, 1, 1 + t % 6, t % 2 ? 30.0 : 1.0, 2, rng);
    d.branch.fc2.weight.value = random_normal(d.branch.fc2.weight.value.shape(), rng, 0.0, 10.0);
    Tape tape;
    const Tensor pi = dyconv_attention(tape, tape.constant(random_normal({4, 8, 3, 3}, rng)), d).value();
    for (std::size_t n = 0; n < 4; ++n) {
      double s = 0.0;
      for (std::size_t j = 0; j < d.n(); ++j) {
        EXPECT_GE(pi.at(n, j), 0.0);
        s += pi.at(n, j);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(DyConv, HugeTemperatureIsUniform) {
  std::mt19937_64 rng(31);
  DyConvExperts d = DyConvExperts::make("d", 8, 8, 3, 1, 4, 1e6, 2, rng);
  d.branch.fc2.weight.value = randn(d.branch.fc2.weight.value.shape(), 32, 100.0);
  Tape tape;
  const Tensor pi = dyconv_attention(tape, tape.constant(randn({4, 8, 3, 3}, 33, 5.0)), d).value();
  for (double v : pi.data()) EXPECT_LT(std::abs(v - 0.25), 1e-3);
}

TEST(DyConv, Errors) {
  std::mt19937_64 rng(34);
  EXPECT_THROW(DyConvExperts::make("d", 4, 4, 3, 1, 0, 30.0, 1, rng), ConfigError);
  EXPECT_THROW(DyConvExperts::make("d", 4, 6, 3, 4, 2, 30.0, 1, rng), ConfigError);
  DyConvExperts d = DyConvExperts::make("d", 4, 4, 3, 1, 2, 30.0, 1, rng);
  Tape tape;
  EXPECT_THROW(dyconv_forward(tape, tape.constant(Tensor({2, 5, 4, 4})), d, {1, 1, 1}), DimensionError);
  Var x = tape.constant(Tensor({2, 4, 4, 4}));
  Var pi = tape.constant(Tensor({2, 2}, 0.5));
  EXPECT_THROW(dyconv(x, pi, {}, {1, 1, 1}), ConfigError);
  EXPECT_THROW(dyconv(x, pi, {tape.constant(Tensor({4, 4, 3, 3})), tape.constant(Tensor({4, 4, 1, 1}))}, {1, 1, 1}),
               DimensionError);
  EXPECT_THROW(dyconv(x, tape.constant(Tensor({2, 3}, 0.5)),
                      {tape.constant(Tensor({4, 4, 3, 3})), tape.constant(Tensor({4, 4, 3, 3}))}, {1, 1, 1}),
               DimensionError);
}

TEST(DyConv, OpCountsIncludeKernelMixing) {
  std::mt19937_64 rng(35);
  DyConvExperts d = DyConvExperts::make("d", 4, 6, 3, 1, 3, 30.0, 1, rng);
  Tape tape;
  Var x = tape.constant(Tensor({2, 4, 5, 5}, 0.1));
  Var pi = tape.constant(Tensor({2, 3}, 1.0 / 3.0));
  std::vector<Var> experts;
  for (Parameter& e : d.experts) experts.push_back(tape.param(e));
  dyconv(x, pi, experts, {1, 1, 1});
  const std::uint64_t conv = 2ull * 6 * 25 * 4 * 9, kp = 6ull * 4 * 9;
  EXPECT_EQ(tape.counter().multiplies, conv + 2 * 3 * kp);
  EXPECT_EQ(tape.counter().adds, conv + 2 * 2 * kp);
}

// attentive conv ---------------------------------------------------------------------------

TEST(AttentiveConv, StaticIsPlainConv) {
  std::mt19937_64 rng(36);
  AttentiveConv conv = AttentiveConv::make("c", 4, 6, 3, {2, 1, 2}, {}, rng);
  EXPECT_FALSE(conv.branch);
  const Tensor x = randn({2, 4, 6, 6}, 37);
  Tape tape;
  EXPECT_EQ(conv.forward(tape, tape.constant(x)).value(), oracle::conv2d(x, conv.weight.value, 2, 1, 2));
  EXPECT_EQ(conv.attention_parameter_count(), 0u);
  EXPECT_EQ(conv.kernel_parameter_count(), 6u * 2u * 9u);
}

TEST(AttentiveConv, TrunkWeightsDoNotDependOnMechanism) {
  const Conv2dOptions o{1, 1, 1};
  std::mt19937_64 r0(38), r1(38), r2(38);
  AttentiveConv plain = AttentiveConv::make("c", 4, 4, 3, o, {}, r0);
  AttentiveConv se = AttentiveConv::make("c", 4, 4, 3, o, settings_for(Mechanism::se, GateKind::sigmoid, 4), r1);
  AttentiveConv sb = AttentiveConv::make("c", 4, 4, 3, o, settings_for(Mechanism::sb, GateKind::tanh, 4), r2);
  EXPECT_EQ(plain.weight.value, se.weight.value);
  EXPECT_EQ(plain.weight.value, sb.weight.value);
  EXPECT_EQ(sb.attention_parameter_count(), se.attention_parameter_count() + 4);
}

TEST(AttentiveConv, SbWithZeroLambdaIsBitIdenticalToStatic) {
  std::mt19937_64 r0(39), r1(39);
  AttentiveConv plain = AttentiveConv::make("c", 4, 8, 1, {}, {}, r0);
  AttentiveConv sb = AttentiveConv::make("c", 4, 8, 1, {}, settings_for(Mechanism::sb, GateKind::tanh, 8), r1);
  sb.sb->lambda.value.fill(0.0);
  const Tensor x = randn({3, 4, 5, 5}, 40);
  Tape tape;
  EXPECT_EQ(sb.forward(tape, tape.constant(x)).value(), plain.forward(tape, tape.constant(x)).value());
}

TEST(AttentiveConv, TrunkKernelInitScale) {
  std::mt19937_64 rng(41);
  const Tensor w = trunk_kernel_init(64, 32, 3, rng);
  EXPECT_EQ(w.shape(), (Shape{64, 32, 3, 3}));
  double ss = 0.0;
  for (double v : w.data()) ss += v * v;
  EXPECT_NEAR(ss / static_cast<double>(w.size()), 2.0 / (64.0 * 9.0), 0.1 * 2.0 / (64.0 * 9.0));
}

// whole-block gradient checks ----------------------------------------------------------------

namespace {

// fc1.bias feeds a train-mode BN that removes the batch mean, so its gradient is
// exactly zero; a relative error on it is roundoff over roundoff. It is asserted
// to vanish instead of being finite-differenced.
AttentionBranch& branch_of(AttentiveConv& conv) { return conv.dynamic ? conv.dynamic->branch : *conv.branch; }

double block_grad_error(AttentiveConv& conv, const Tensor& x, std::uint64_t seed) {
  Parameter xp("x", x);
  std::vector<Parameter*> all{&xp};
  conv.collect(all);
  std::vector<Parameter*> params;
  for (Parameter* p : all) {
    if (p != &branch_of(conv).fc1.bias) params.push_back(p);
  }
  const Tensor g = [&] {
    Tape probe;
    return randn(conv.forward(probe, probe.param(xp)).shape(), seed);
  }();
  auto out = [&](Tape& tape) { return conv.forward(tape, tape.param(xp)); };

  Tape tape;
  for (Parameter* p : all) p->zero_grad();
  tape.backward(weighted_sum(out(tape), g));
  EXPECT_LT(branch_of(conv).fc1.bias.grad.max_abs(), 1e-10);
  return grad_check_contraction(out, g, params).max_relative_error;
}

}  // namespace

class BlockGradients : public ::testing::TestWithParam<std::tuple<Mechanism, GateKind>> {};

TEST_P(BlockGradients, TwentyTrials) {
  const auto [mechanism, gate] = GetParam();
  for (int t = 0; t < 20; ++t) {
    std::mt19937_64 rng(7000 + t);
    const bool depthwise = t % 2 == 1;
    const std::size_t c = 4;
    const Conv2dOptions o{1 + static_cast<std::size_t>(t % 3 == 2), 1, depthwise ? c : 1};
    AttentiveConv conv = AttentiveConv::make("blk", c, c, 3, o, settings_for(mechanism, gate, 3), rng);
    if (conv.sb) conv.sb->lambda.value = random_normal({c}, rng, 0.0, 0.5);
    const Tensor x = random_normal({3, c, 5, 5}, rng);
    EXPECT_LT(block_grad_error(conv, x, 8000 + t), 1e-4) << to_string(mechanism) << "/" << to_string(gate) << " " << t;
  }
}

INSTANTIATE_TEST_SUITE_P(AllGates, BlockGradients,
                         ::testing::Combine(::testing::Values(Mechanism::se, Mechanism::sb),
                                            ::testing::ValuesIn(kAllGates)),
                         [](const auto& info) {
                           return std::string(to_string(std::get<0>(info.param))) + "_" +
                                  std::string(to_string(std::get<1>(info.param)));
                         });

class BlockGradientsDyConv : public ::testing::TestWithParam<GateKind> {};

TEST_P(BlockGradientsDyConv, TwentyTrials) {
  const GateKind gate = GetParam();
  for (int t = 0; t < 20; ++t) {
    std::mt19937_64 rng(9100 + t);
    const std::size_t c = 4;
    const Conv2dOptions o{1 + static_cast<std::size_t>(t % 3 == 2), 1, t % 2 ? c : 1};
    AttentionSettings s = settings_for(Mechanism::dyconv, gate, 2);
    s.temperature = t % 4 == 0 ? 1.0 : 30.0;
    s.experts = 2 + t % 3;
    AttentiveConv conv = AttentiveConv::make("dy", c, c, 3, o, s, rng);
    ASSERT_EQ(conv.dynamic->branch.gate, gate);
    const Tensor x = random_normal({3, c, 5, 5}, rng);
    EXPECT_LT(block_grad_error(conv, x, 9200 + t), 1e-4) << to_string(gate) << " " << t;
  }
}

INSTANTIATE_TEST_SUITE_P(AllGates, BlockGradientsDyConv, ::testing::ValuesIn(kAllGates),
                         [](const auto& info) { return std::string(to_string(info.param)); });

TEST(BlockGradCheck, StaticBlockHasNoBranch) {
  for (int t = 0; t < 4; ++t) {
    const BlockCheck b = block_grad_check(Mechanism::none, GateKind::tanh, t);
    EXPECT_LT(b.result.max_relative_error, 1e-4);
    EXPECT_EQ(b.removed_bias_grad, 0.0);
    EXPECT_EQ(b.result.coordinates_checked, 3u * 4u * 25u + 4u * (t % 2 ? 1u : 4u) * 9u);
  }
}

TEST(BlockGradCheck, IsSeededByTrial) {
  const BlockCheck a = block_grad_check(Mechanism::sb, GateKind::tanh, 3);
  const BlockCheck b = block_grad_check(Mechanism::sb, GateKind::tanh, 3);
  EXPECT_EQ(a.result.max_relative_error, b.result.max_relative_error);
  EXPECT_EQ(a.result.worst_tensor, b.result.worst_tensor);
  EXPECT_LT(a.removed_bias_grad, 1e-10);
}

// saturation sweep ------------------------------------------------------------------------------

TEST(Saturation, CsvHasOneRowPerOffset) {
  const double offsets[] = {-1.0, 0.5};
  const std::string csv = to_csv(saturation_sweep(Mechanism::sb, offsets));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "offset,trunk_grad_norm,branch_grad_norm,input_grad_norm");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_NE(csv.find("\n-1,"), std::string::npos);
  EXPECT_NE(csv.find("\n0.5,"), std::string::npos);
}

TEST(Saturation, SeVanishesWhenSigmoidSaturatesLow) {
  const double offsets[] = {0.0, -20.0};
  const SweepReport r = saturation_sweep(Mechanism::se, offsets);
  ASSERT_EQ(r.rows.size(), 2u);
  EXPECT_GT(r.rows[0].input_grad_norm, 0.0);
  EXPECT_LT(r.rows[1].input_grad_norm / r.rows[0].input_grad_norm, 1e-6);
  EXPECT_LT(r.rows[1].trunk_grad_norm / r.rows[0].trunk_grad_norm, 1e-6);
}

TEST(Saturation, SbTrunkGradientUnaffectedBySaturation) {
  const double offsets[] = {-20.0, 0.0, 20.0};
  const SweepReport r = saturation_sweep(Mechanism::sb, offsets);
  for (const SweepRow& row : r.rows) {
    EXPECT_NEAR(row.trunk_grad_norm, r.static_grad_norm, 1e-10) << row.offset;
    EXPECT_LT(max_abs_diff(row.trunk_grad, r.static_input_grad), 1e-10) << row.offset;
  }
  EXPECT_GT(r.rows[1].branch_grad_norm, 0.0);
  // tanh saturated on either side leaves only the trunk path
  EXPECT_LT(r.rows[0].branch_grad_norm, 1e-6 * r.rows[1].branch_grad_norm);
  EXPECT_LT(r.rows[2].branch_grad_norm, 1e-6 * r.rows[1].branch_grad_norm);
}

TEST(Saturation, PathsSumToFullGradient) {
  const double offsets[] = {-3.0, 0.0, 2.0};
  for (Mechanism m : {Mechanism::se, Mechanism::sb}) {
    const SweepReport r = saturation_sweep(m, offsets);
    for (const SweepRow& row : r.rows) {
      EXPECT_LT(max_abs_diff(row.trunk_grad + row.branch_grad, row.input_grad), 1e-12);
    }
  }
}

TEST(Saturation, SbZeroLambdaHasNoBranchGradient) {
  SweepSetup setup;
  setup.lambda = 0.0;
  const double offsets[] = {0.0};
  const SweepReport r = saturation_sweep(Mechanism::sb, offsets, setup);
  EXPECT_EQ(r.rows[0].branch_grad_norm, 0.0);
  EXPECT_EQ(r.rows[0].input_grad, r.static_input_grad);
}

TEST(Saturation, UnsupportedMechanism) {
  const double offsets[] = {0.0};
  EXPECT_THROW(saturation_sweep(Mechanism::dyconv, offsets), ConfigError);
  EXPECT_THROW(saturation_sweep(Mechanism::none, offsets), ConfigError);
}

TEST(Saturation, SeTrunkGradientScaledPerChannelByActivation) {
  // With a depthwise 1x1 trunk, the trunk-path input gradient of sum(a * T(x))
  // is a[n,c] * w[c], so its ratio to the static gradient w[c] is a[n,c].
  const std::size_t c = 6;
  std::mt19937_64 rng(42);
  AttentiveConv conv =
      AttentiveConv::make("se", c, c, 1, {1, 0, c}, settings_for(Mechanism::se, GateKind::sigmoid, c), rng);
  const Tensor x = randn({3, c, 4, 4}, 43);

  Tape tape;
  Var xin = tape.input(x);
  Var t = conv2d(xin, tape.param(conv.weight), conv.options);
  Var a = attention_branch_forward(tape, xin, *conv.branch);
  const Tensor a_value = a.value();
  const Tensor trunk = tape.backward(sum(se_combine(t, detach(a)))).at(xin);

  Tape plain;
  Var x2 = plain.input(x);
  const Tensor static_grad = plain.backward(sum(conv2d(x2, plain.param(conv.weight), conv.options))).at(x2);

  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < 16; ++i) {
        const double ratio = trunk.at(n, ch, i / 4, i % 4) / static_grad.at(n, ch, i / 4, i % 4);
        EXPECT_NEAR(ratio, a_value.at(n, ch), 1e-8);
      }
}
