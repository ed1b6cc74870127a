#include <gtest/gtest.h>

#include <cmath>

#include "jumbo/efficiency.hpp"
#include "jumbo/vit.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace jumbo;
using namespace jumbo::testing;

namespace {

ModelConfig vit_small(Variant v) {
  ModelConfig c;
  c.variant = v;
  c.depth = 12;
  c.width = 384;
  c.heads = 6;
  c.num_classes = 10450;
  c.jumbo_multiplier = v == Variant::jumbo ? 6 : 0;
  c.jumbo_ffn_multiplier = 4;
  c.discard_last_patch_ffn = v == Variant::jumbo;
  if (v == Variant::registers) c.register_count = 16;
  return c;
}

bool within(double got, double want, double rel) { return std::abs(got - want) <= rel * want; }

template <class T>
std::vector<T> logits(const Model<T>& m, const Tensor<T>& x) {
  auto tp = Tape<T>::no_grad();
  auto y = forward(tp, m, x);
  return {y.values().begin(), y.values().end()};
}

}  // namespace

TEST(Tie, DepthOneIsUnchanged) {
  auto c = tiny_jumbo();
  c.depth = 1;
  auto m = Model<float>::init(c, 1);
  auto t = tie_jumbo_ffn(m);
  Rng rng(2);
  auto x = random_tensor<float>({2, 4, 4, 1}, rng);
  EXPECT_EQ(logits(m, x), logits(t, x));
}

TEST(Tie, AllLayersAliasOneSet) {
  auto m = tie_jumbo_ffn(Model<float>::init(tiny_jumbo(), 3));
  ASSERT_TRUE(m.config().tie_jumbo_ffn);
  EXPECT_TRUE(m.blocks[0].jumbo_ffn->fc1.weight.same_storage(m.blocks[1].jumbo_ffn->fc1.weight));
  EXPECT_TRUE(m.blocks[0].jumbo_ffn->norm.gain.same_storage(m.blocks[1].jumbo_ffn->norm.gain));
  auto w = m.param("jumbo_ffn.shared.fc2.weight");
  w.mutable_values()[0] = 42.0f;
  EXPECT_EQ(m.blocks[1].jumbo_ffn->fc2.weight[0], 42.0f);
  EXPECT_FALSE(m.has_param("blocks.1.jumbo_ffn.fc1.weight"));
}

TEST(Tie, InitializedFromLayerZero) {
  auto m = Model<float>::init(tiny_jumbo(), 4);
  auto t = tie_jumbo_ffn(m);
  auto a = m.param("blocks.0.jumbo_ffn.fc1.weight").values();
  auto b = t.param("jumbo_ffn.shared.fc1.weight").values();
  EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
}

TEST(Tie, RejectsNonJumbo) {
  auto m = Model<float>::init(tiny_plain(), 0);
  EXPECT_THROW(tie_jumbo_ffn(m), ContractError);
  auto j = Model<float>::init(tiny_jumbo(), 0);
  EXPECT_THROW(add_lora(j, 4, LoraTarget::fc1, 0), ContractError);
}

TEST(Tie, SharedGradientIsSumOfLayerGradients) {
  auto untied = Model<double>::init(tiny_jumbo(), 5);
  randomize(untied, 6);
  // Make every layer's Jumbo FFN equal to layer 0 so both models compute the same function.
  for (const auto& [name, t] : untied.parameters()) {
    const std::string tag = ".jumbo_ffn.";
    auto pos = name.find(tag);
    if (pos == std::string::npos || name.rfind("blocks.0.", 0) == 0) continue;
    auto src = untied.param("blocks.0" + name.substr(pos)).values();
    auto dst = t;
    std::copy(src.begin(), src.end(), dst.mutable_values().begin());
  }
  auto tied = tie_jumbo_ffn(untied);
  Rng rng(7);
  auto x = random_tensor<double>({2, 4, 4, 1}, rng);
  const std::vector<int> y{1, 2};
  for (auto* m : {&untied, &tied}) {
    Tape<double> tp;
    tp.backward(ops::cross_entropy(tp, forward(tp, *m, x), y));
  }
  for (const char* leaf : {"norm.gain", "norm.bias", "fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"}) {
    auto shared = tied.param(std::string("jumbo_ffn.shared.") + leaf).grad();
    std::vector<double> sum(shared.size(), 0.0);
    for (std::size_t l = 0; l < 2; ++l) {
      auto g = untied.param(block_prefix(l) + "jumbo_ffn." + leaf).grad();
      for (std::size_t i = 0; i < g.size(); ++i) sum[i] += g[i];
    }
    for (std::size_t i = 0; i < sum.size(); ++i) ASSERT_NEAR(shared[i], sum[i], 1e-12 * (1 + std::abs(sum[i]))) << leaf;
  }
}

TEST(LoraLinear, ZeroBEqualsShared) {
  Rng rng(8);
  LinearParams<double> lin{random_tensor<double>({5, 3}, rng), random_tensor<double>({5}, rng)};
  LoraAdapter<double> ad{random_tensor<double>({2, 3}, rng), Tensor<double>({5, 2})};
  auto x = random_tensor<double>({4, 3}, rng);
  auto tp = Tape<double>::no_grad();
  auto a = ops::linear(tp, x, lin.weight, lin.bias);
  auto b = lora_linear(tp, x, lin, &ad);
  EXPECT_TRUE(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
}

TEST(LoraLinear, DenseSumOracle) {
  Rng rng(9);
  const std::size_t din = 4, dout = 6;
  auto w = random_tensor<double>({dout, din}, rng);
  auto dw = random_tensor<double>({dout, din}, rng);
  auto bias = random_tensor<double>({dout}, rng);
  Tensor<double> eye({din, din});
  for (std::size_t i = 0; i < din; ++i) eye.mutable_values()[i * din + i] = 1;
  auto x = random_tensor<double>({3, din}, rng);
  auto tp = Tape<double>::no_grad();
  const LoraAdapter<double> ad{eye, dw};
  auto got = lora_linear(tp, x, LinearParams<double>{w, bias}, &ad);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t o = 0; o < dout; ++o) {
      double want = bias[o];
      for (std::size_t i = 0; i < din; ++i) want += x[r * din + i] * (w[o * din + i] + dw[o * din + i]);
      EXPECT_NEAR(got[r * dout + o], want, 1e-6 * (1 + std::abs(want)));
    }
  }
}

TEST(LoraLinear, CounterChargesAdapterMacs) {
  Rng rng(10);
  const std::size_t rows = 7, din = 12, dout = 20, r = 3;
  LinearParams<float> lin{random_tensor<float>({dout, din}, rng), Tensor<float>({dout})};
  LoraAdapter<float> ad{random_tensor<float>({r, din}, rng), random_tensor<float>({dout, r}, rng)};
  FlopCounter fc;
  auto tp = Tape<float>::no_grad(&fc);
  lora_linear(tp, random_tensor<float>({rows, din}, rng), lin, &ad);
  EXPECT_EQ(fc.macs(), rows * din * dout + rows * r * (din + dout));
}

TEST(LoraLinear, RejectsRankZeroAndMismatch) {
  Rng rng(11);
  LinearParams<float> lin{random_tensor<float>({5, 3}, rng), Tensor<float>({5})};
  auto tp = Tape<float>::no_grad();
  auto x = random_tensor<float>({2, 3}, rng);
  LoraAdapter<float> empty{Tensor<float>({0, 3}), Tensor<float>({5, 0})};
  EXPECT_THROW(lora_linear(tp, x, lin, &empty), ContractError);
  LoraAdapter<float> bad{Tensor<float>({2, 4}), Tensor<float>({5, 2})};
  EXPECT_THROW(lora_linear(tp, x, lin, &bad), ShapeError);
}

TEST(Lora, ZeroInitLogitsBitIdentical) {
  for (auto target : {LoraTarget::fc1, LoraTarget::fc2, LoraTarget::both}) {
    auto tied = tie_jumbo_ffn(Model<float>::init(tiny_jumbo(), 12));
    auto lora = add_lora(tied, 4, target, 13);
    Rng rng(14);
    auto x = random_tensor<float>({3, 4, 4, 1}, rng);
    EXPECT_EQ(logits(tied, x), logits(lora, x)) << to_string(target);
    EXPECT_NE(lora.param(lora_name(0, 'A', target == LoraTarget::fc2 ? "fc2" : "fc1"))[0], 0.0f);
  }
}

TEST(Lora, AdaptersMakeLayersDiffer) {
  auto m = add_lora(tie_jumbo_ffn(Model<double>::init(tiny_jumbo(), 15)), 2, LoraTarget::both, 16);
  randomize(m, 17);
  Rng rng(18);
  auto x = random_tensor<double>({1, 1, 32}, rng);
  auto tp = Tape<double>::no_grad();
  auto a = ffn_sublayer(tp, *m.blocks[0].jumbo_ffn, x, {}, m.blocks[0].lora_fc1, m.blocks[0].lora_fc2);
  auto b = ffn_sublayer(tp, *m.blocks[1].jumbo_ffn, x, {}, m.blocks[1].lora_fc1, m.blocks[1].lora_fc2);
  EXPECT_GT(std::abs(a[0] - b[0]), 1e-9);
}

TEST(Lora, GradientMatchesFiniteDifferences) {
  auto m = add_lora(tie_jumbo_ffn(Model<double>::init(tiny_jumbo(), 19)), 2, LoraTarget::both, 20);
  randomize(m, 21);
  Rng rng(22);
  auto x = random_tensor<double>({2, 4, 4, 1}, rng);
  const std::vector<int> y{0, 1};
  {
    Tape<double> tp;
    tp.backward(ops::cross_entropy(tp, forward(tp, m, x), y));
  }
  std::vector<Tensor<double>> ps;
  std::vector<std::string> names;
  for (const auto& [name, t] : m.parameters()) {
    if (name.rfind("jumbo_ffn.", 0) == 0) {
      ps.push_back(t);
      names.push_back(name);
    }
  }
  ASSERT_EQ(ps.size(), 6u + 8u);
  const auto errs = fd_relative_errors(ps, [&] {
    auto tp = Tape<double>::no_grad();
    return ops::cross_entropy(tp, forward(tp, m, x), y).item();
  });
  for (std::size_t i = 0; i < errs.size(); ++i) EXPECT_LT(errs[i], 1e-4) << names[i];
}

TEST(CountParams, AdapterIncrementIsExact) {
  auto c = tiny_jumbo();
  c.tie_jumbo_ffn = true;
  const auto base = count_params(c);
  const std::size_t gw = 32, hidden = 64, r = 3;
  for (auto target : {LoraTarget::fc1, LoraTarget::fc2, LoraTarget::both}) {
    auto lc = c;
    lc.lora_rank = r;
    lc.lora_target = target;
    const auto pc = count_params(lc);
    std::uint64_t per_layer = 0;
    if (target != LoraTarget::fc2) per_layer += r * (gw + hidden);
    if (target != LoraTarget::fc1) per_layer += r * (hidden + gw);
    EXPECT_EQ(pc.total - base.total, c.depth * per_layer);
    EXPECT_EQ(pc.group(ParamGroup::adapters), c.depth * per_layer);
  }
}

TEST(CountParams, GroupsSumToTotalAndMatchStorage) {
  auto m = Model<float>::init(tiny_jumbo(), 0);
  const auto pc = count_params(m);
  std::uint64_t sum = 0;
  for (const auto& [g, n] : pc.groups) sum += n;
  EXPECT_EQ(sum, pc.total);
  EXPECT_EQ(pc.total, m.num_params());
  // Hand count of the tiny config: D=16, J=2, depth 2, 4 patches of 4 pixels, 3 classes.
  const std::uint64_t attn = 2 * (2 * 16 + 3 * 16 * 16 + 3 * 16 + 16 * 16 + 16);
  const std::uint64_t patch_ffn = 1 * (2 * 16 + 32 * 16 + 32 + 16 * 32 + 16);
  const std::uint64_t jumbo_ffn = 2 * (2 * 32 + 64 * 32 + 64 + 32 * 64 + 32);
  const std::uint64_t tokens = 16 * 4 + 16 + 4 * 16 + 32;
  const std::uint64_t head = 2 * 32 + 3 * 32 + 3;
  EXPECT_EQ(pc.group(ParamGroup::attention), attn);
  EXPECT_EQ(pc.group(ParamGroup::patch_ffn), patch_ffn);
  EXPECT_EQ(pc.group(ParamGroup::jumbo_ffn), jumbo_ffn);
  EXPECT_EQ(pc.group(ParamGroup::tokens), tokens);
  EXPECT_EQ(pc.group(ParamGroup::head), head);
}

TEST(CountParams, VitSmallReferenceCounts) {
  const auto reg = count_params(vit_small(Variant::registers)).total;
  const auto jumbo_cfg = vit_small(Variant::jumbo);
  const auto jumbo = count_params(jumbo_cfg);
  auto tied_cfg = jumbo_cfg;
  tied_cfg.tie_jumbo_ffn = true;
  const auto tied = count_params(tied_cfg);
  auto lora_cfg = tied_cfg;
  lora_cfg.lora_rank = 8;
  const auto lora8 = count_params(lora_cfg).total;
  lora_cfg.lora_rank = 32;
  const auto lora32 = count_params(lora_cfg).total;

  EXPECT_TRUE(within(reg, 25.7e6, 0.03)) << reg;
  EXPECT_TRUE(within(jumbo.total, 555.6e6, 0.03)) << jumbo.total;
  EXPECT_TRUE(within(tied.total, 88.3e6, 0.03)) << tied.total;
  EXPECT_TRUE(within(lora8, 88.8e6, 0.03)) << lora8;
  EXPECT_TRUE(within(lora32, 90.1e6, 0.03)) << lora32;
  EXPECT_EQ(jumbo.group(ParamGroup::jumbo_ffn), 12 * tied.group(ParamGroup::jumbo_ffn));
  EXPECT_EQ(jumbo.total - tied.total, 11 * tied.group(ParamGroup::jumbo_ffn));
}
