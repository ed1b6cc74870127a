#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "jumbo/vit.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"
#include "support/reference_vit.hpp"

using namespace jumbo;
using namespace jumbo::testing;

namespace {

template <class T>
Tensor<T> images(const ModelConfig& c, std::size_t b, Rng& rng) {
  return random_tensor<T>({b, c.image_y, c.image_x, c.in_channels}, rng);
}

template <class T>
std::vector<T> logits_of(const Model<T>& m, const Tensor<T>& x) {
  auto tp = Tape<T>::no_grad();
  auto y = forward(tp, m, x);
  return {y.values().begin(), y.values().end()};
}

}  // namespace

TEST(Patchify, HandLayout) {
  ModelConfig c = tiny_jumbo();  // 4x4x1 image, 2x2 patches
  std::vector<float> px(16);
  for (int i = 0; i < 16; ++i) px[i] = static_cast<float>(i);
  auto p = patchify(Tensor<float>({4, 4, 1}, px), c);
  ASSERT_EQ(p.shape(), (Shape{1, 4, 4}));
  const std::vector<float> want{0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15};
  EXPECT_EQ(std::vector<float>(p.values().begin(), p.values().end()), want);
}

TEST(Patchify, ChannelsInnermost) {
  ModelConfig c = tiny_jumbo();
  c.in_channels = 2;
  std::vector<float> px(32);
  for (int i = 0; i < 32; ++i) px[i] = static_cast<float>(i);
  auto p = patchify(Tensor<float>({4, 4, 2}, px), c);
  // First patch: pixels (0,0),(0,1),(1,0),(1,1), each with two channels.
  const std::vector<float> first{0, 1, 2, 3, 8, 9, 10, 11};
  EXPECT_TRUE(std::equal(first.begin(), first.end(), p.values().begin()));
}

TEST(Patchify, RejectsBadGeometry) {
  ModelConfig c = tiny_jumbo();
  EXPECT_THROW(patchify(Tensor<float>({5, 4, 1}), c), ConfigError);
  EXPECT_THROW(patchify(Tensor<float>({4, 4, 3}), c), ShapeError);
  EXPECT_THROW(patchify(Tensor<float>({4, 4}), c), ShapeError);
}

TEST(Embed, PositionOnlyWhenPatchesZero) {
  auto m = Model<double>::init(tiny_jumbo(), 1);
  auto tp = Tape<double>::no_grad();
  auto e = embed(tp, m, Tensor<double>({2, 4, 4}));
  for (std::size_t s = 0; s < 2; ++s)
    for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(e[s * 64 + i], m.pos_embed[i]);
}

TEST(JumboSplit, HandCaseAndRoundtrip) {
  auto tp = Tape<float>::no_grad();
  Tensor<float> t({1, 4}, {1, 2, 3, 4});
  auto rows = split_jumbo(tp, t, 2);
  EXPECT_EQ(rows.shape(), (Shape{2, 2}));
  EXPECT_EQ(rows[2], 3.0f);
  auto back = reassemble_jumbo(tp, rows);
  EXPECT_EQ(back.shape(), (Shape{1, 4}));
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t j = 1 + rng.below(8), d = 1 + rng.below(64);
    auto x = random_tensor<float>({3, 1, j * d}, rng);
    auto y = reassemble_jumbo(tp, split_jumbo(tp, x, d));
    ASSERT_EQ(y.shape(), x.shape());
    ASSERT_TRUE(std::equal(x.values().begin(), x.values().end(), y.values().begin()));
  }
  EXPECT_THROW(split_jumbo(tp, Tensor<float>({1, 7}), 2), ContractError);
  EXPECT_THROW(split_jumbo(tp, Tensor<float>({2, 4}), 2), ContractError);
}

TEST(Model, ParameterPresence) {
  auto c = tiny_jumbo();
  c.depth = 3;
  auto m = Model<float>::init(c, 0);
  EXPECT_TRUE(m.blocks[0].patch_ffn.has_value());
  EXPECT_TRUE(m.blocks[1].patch_ffn.has_value());
  EXPECT_FALSE(m.blocks[2].patch_ffn.has_value());
  for (const auto& b : m.blocks) EXPECT_TRUE(b.jumbo_ffn.has_value());
  EXPECT_FALSE(m.has_param("blocks.2.ffn.fc1.weight"));
  EXPECT_EQ(m.param("jumbo_token").shape(), (Shape{1, 32}));
  EXPECT_EQ(m.param("head.weight").shape(), (Shape{3, 32}));
  EXPECT_EQ(m.param("final_norm.gain").shape(), (Shape{32}));

  c.discard_last_patch_ffn = false;
  auto kept = Model<float>::init(c, 0);
  EXPECT_TRUE(kept.blocks[2].patch_ffn.has_value());
}

TEST(Model, ConfigValidation) {
  auto c = tiny_plain();
  c.discard_last_patch_ffn = true;
  EXPECT_THROW(Model<float>::init(c, 0), ConfigError);
  c = tiny_plain();
  c.register_count = 2;
  EXPECT_THROW(Model<float>::init(c, 0), ConfigError);
  c = tiny_jumbo();
  c.heads = 3;
  EXPECT_THROW(Model<float>::init(c, 0), ConfigError);
  c = tiny_jumbo();
  c.lora_rank = 4;
  EXPECT_THROW(Model<float>::init(c, 0), ConfigError);
}

TEST(Model, InitDeterministicAndSeedSensitive) {
  auto a = Model<float>::init(tiny_jumbo(), 7);
  auto b = Model<float>::init(tiny_jumbo(), 7);
  auto c = Model<float>::init(tiny_jumbo(), 8);
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    auto va = a.parameters()[i].second.values(), vb = b.parameters()[i].second.values();
    EXPECT_TRUE(std::equal(va.begin(), va.end(), vb.begin()));
  }
  EXPECT_NE(a.param("jumbo_token")[0], c.param("jumbo_token")[0]);
  EXPECT_EQ(a.param("final_norm.gain")[5], 1.0f);
  EXPECT_EQ(a.param("head.bias")[0], 0.0f);
  for (float v : a.param("pos_embed").values()) EXPECT_LE(std::abs(v), 0.04f + 1e-7f);
}

TEST(Layer, ZeroWeightsGiveResidualIdentity) {
  // All-zero weights: every sublayer adds zero, so the state passes through.
  auto m = Model<double>::zeros(tiny_jumbo());
  Rng rng(4);
  LayerState<double> in{random_tensor<double>({2, 4, 16}, rng), random_tensor<double>({2, 1, 32}, rng)};
  auto tp = Tape<double>::no_grad();
  auto out = layer_forward(tp, m, 0, in);
  EXPECT_TRUE(std::equal(in.patches.values().begin(), in.patches.values().end(), out.patches.values().begin()));
  EXPECT_TRUE(std::equal(in.globals.values().begin(), in.globals.values().end(), out.globals.values().begin()));
}

TEST(Layer, RejectsWrongGlobalShape) {
  auto m = Model<double>::init(tiny_jumbo(), 0);
  auto tp = Tape<double>::no_grad();
  LayerState<double> in{Tensor<double>({1, 4, 16}), Tensor<double>({1, 2, 16})};
  EXPECT_THROW(layer_forward(tp, m, 0, in), ContractError);
}

TEST(Forward, MatchesStraightLineReference) {
  for (auto variant : {Variant::jumbo, Variant::plain, Variant::registers}) {
    auto c = variant == Variant::jumbo ? tiny_jumbo(3) : tiny_plain();
    c.variant = variant;
    if (variant == Variant::registers) c.register_count = 2;
    auto m = Model<double>::init(c, 11);
    randomize(m, 12);
    Rng rng(13);
    auto x = images<double>(c, 1, rng);
    const auto got = logits_of(m, x);
    const auto want = ReferenceVit(m).logits({x.values().begin(), x.values().end()});
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-10 * (1 + std::abs(want[i]))) << to_string(variant);
  }
}

TEST(Forward, TiedMatchesReference) {
  auto c = tiny_jumbo();
  c.tie_jumbo_ffn = true;
  auto m = Model<double>::init(c, 2);
  randomize(m, 3);
  Rng rng(4);
  auto x = images<double>(c, 1, rng);
  const auto got = logits_of(m, x);
  const auto want = ReferenceVit(m).logits({x.values().begin(), x.values().end()});
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-10 * (1 + std::abs(want[i])));
}

TEST(Forward, BatchRowsIndependent) {
  auto m = Model<double>::init(tiny_jumbo(), 5);
  randomize(m, 6);
  Rng rng(7);
  auto x = images<double>(m.config(), 3, rng);
  const auto all = logits_of(m, x);
  for (std::size_t s = 0; s < 3; ++s) {
    Tensor<double> one({1, 4, 4, 1}, std::vector<double>(x.values().begin() + 16 * s, x.values().begin() + 16 * (s + 1)));
    const auto single = logits_of(m, one);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(all[s * 3 + k], single[k], 1e-12);
  }
}

TEST(Forward, SingleClassHead) {
  auto c = tiny_jumbo();
  c.num_classes = 1;
  auto m = Model<float>::init(c, 0);
  Rng rng(1);
  auto tp = Tape<float>::no_grad();
  EXPECT_EQ(forward(tp, m, images<float>(c, 2, rng)).shape(), (Shape{2, 1}));
}

TEST(Forward, HeadlessModelRefusesToClassify) {
  auto c = tiny_jumbo();
  c.num_classes = 0;
  auto m = Model<float>::init(c, 0);
  EXPECT_FALSE(m.has_param("head.weight"));
  Rng rng(1);
  auto tp = Tape<float>::no_grad();
  EXPECT_THROW(forward(tp, m, images<float>(c, 1, rng)), ContractError);
}

TEST(VariantReduction, JumboJ1AttentionEqualsPlain) {
  auto jc = tiny_jumbo(1);
  auto pc = tiny_plain();
  auto jm = Model<double>::init(jc, 21);
  randomize(jm, 22);
  auto pm = Model<double>::zeros(pc);
  copy_shared(jm, pm);
  Rng rng(23);
  auto seq = random_tensor<double>({2, 5, 16}, rng);
  auto tp = Tape<double>::no_grad();
  auto a = attention_sublayer(tp, jm.blocks[0], jc, seq);
  auto b = attention_sublayer(tp, pm.blocks[0], pc, seq);
  EXPECT_TRUE(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
}

TEST(VariantReduction, RegistersR0EqualsPlain) {
  auto pc = tiny_plain();
  auto rc = pc;
  rc.variant = Variant::registers;
  auto pm = Model<float>::init(pc, 31);
  auto rm = Model<float>::zeros(rc);
  copy_shared(pm, rm);
  ASSERT_EQ(pm.parameters().size(), rm.parameters().size());
  Rng rng(32);
  auto x = images<float>(pc, 4, rng);
  EXPECT_EQ(logits_of(pm, x), logits_of(rm, x));
}

TEST(Permutation, PatchRowsEquivariantJumboTokenInvariant) {
  auto m = Model<double>::init(tiny_jumbo(), 41);
  randomize(m, 42);
  Rng rng(43);
  LayerState<double> in{random_tensor<double>({1, 4, 16}, rng), random_tensor<double>({1, 1, 32}, rng)};
  const auto perm = random_permutation(4, rng);
  auto tp = Tape<double>::no_grad();
  auto permuted = ops::index_select(tp, ops::reshape(tp, in.patches, {4, 16}), perm);
  LayerState<double> pin{ops::reshape(tp, permuted, {1, 4, 16}), in.globals};
  auto a = layer_forward(tp, m, 0, in);
  auto b = layer_forward(tp, m, 0, pin);
  for (std::size_t i = 0; i < 32; ++i) EXPECT_NEAR(a.globals[i], b.globals[i], 1e-12);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t k = 0; k < 16; ++k) EXPECT_NEAR(b.patches[r * 16 + k], a.patches[perm[r] * 16 + k], 1e-12);
}

TEST(TokenDrop, KeepAllEqualsFullForward) {
  auto m = Model<float>::init(tiny_jumbo(), 51);
  Rng rng(52);
  auto x = images<float>(m.config(), 2, rng);
  auto tp = Tape<float>::no_grad();
  auto full = forward(tp, m, x);
  auto kept = forward_with_drop(tp, m, x, KeepSets{{0, 1, 2, 3}});
  EXPECT_TRUE(std::equal(full.values().begin(), full.values().end(), kept.values().begin()));
}

TEST(TokenDrop, EqualsForwardOnSubsetRows) {
  auto m = Model<double>::init(tiny_jumbo(), 53);
  randomize(m, 54);
  Rng rng(55);
  auto x = images<double>(m.config(), 1, rng);
  const std::vector<std::size_t> keep{3, 1};
  auto tp = Tape<double>::no_grad();
  auto dropped = forward_with_drop(tp, m, x, KeepSets{keep});
  // Hand-built subset: the kept patch rows and their own position rows.
  auto p = patchify(x, m.config());
  std::vector<double> rows, pos;
  for (auto i : keep) {
    rows.insert(rows.end(), p.values().begin() + 4 * i, p.values().begin() + 4 * (i + 1));
    pos.insert(pos.end(), m.pos_embed.values().begin() + 16 * i, m.pos_embed.values().begin() + 16 * (i + 1));
  }
  auto proj = ops::linear(tp, Tensor<double>({1, 2, 4}, rows), m.patch_embed.weight, m.patch_embed.bias);
  auto tokens = ops::add(tp, proj, Tensor<double>({2, 16}, pos));
  auto want = classify(tp, m, encode(tp, m, tokens));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(dropped[i], want[i], 1e-12);
}

TEST(TokenDrop, PerSampleSetsAndErrors) {
  auto m = Model<float>::init(tiny_jumbo(), 56);
  Rng rng(57);
  auto x = images<float>(m.config(), 2, rng);
  auto tp = Tape<float>::no_grad();
  EXPECT_EQ(forward_with_drop(tp, m, x, KeepSets{{0, 2}, {1, 3}}).shape(), (Shape{2, 3}));
  EXPECT_THROW(forward_with_drop(tp, m, x, KeepSets{{0, 0}}), ContractError);
  EXPECT_THROW(forward_with_drop(tp, m, x, KeepSets{{4}}), ContractError);
  EXPECT_THROW(forward_with_drop(tp, m, x, KeepSets{{0, 1}, {2}}), ContractError);
  EXPECT_THROW(forward_with_drop(tp, m, x, KeepSets{{0}, {1}, {2}}), ContractError);
  EXPECT_THROW(forward_with_drop(tp, m, x, KeepSets{{}}), ContractError);
}

TEST(TokenDrop, SequenceLengthSeenByAttention) {
  auto m = Model<float>::init(tiny_jumbo(), 58);
  Rng rng(59);
  auto x = images<float>(m.config(), 1, rng);
  FlopCounter fc(FlopCounter::Mode::counting, true);
  auto tp = Tape<float>::no_grad(&fc);
  forward_with_drop(tp, m, x, KeepSets{{0, 3}});
  // Score products are [heads, S, dh] x [heads, dh, S] with S = N' + J = 4.
  std::size_t score_products = 0;
  for (const auto& r : fc.log()) {
    if (r.batch == 2 && r.k == 8) {
      EXPECT_EQ(r.m, 4u);
      EXPECT_EQ(r.n, 4u);
      ++score_products;
    }
  }
  EXPECT_EQ(score_products, 2u);  // one per layer
}

TEST(Gradient, WholeModelMatchesFiniteDifferences) {
  auto m = Model<double>::init(tiny_jumbo(), 61);
  randomize(m, 62);
  Rng rng(63);
  auto x = images<double>(m.config(), 2, rng);
  const std::vector<int> y{0, 2};
  {
    Tape<double> tp;
    auto loss = ops::cross_entropy(tp, forward(tp, m, x), y);
    tp.backward(loss);
  }
  std::vector<Tensor<double>> params;
  for (const auto& p : m.parameters()) params.push_back(p.second);
  const auto errs = fd_relative_errors(params, [&] {
    auto tp = Tape<double>::no_grad();
    return ops::cross_entropy(tp, forward(tp, m, x), y).item();
  });
  for (std::size_t i = 0; i < errs.size(); ++i) EXPECT_LT(errs[i], 1e-4) << m.parameters()[i].first;
}

TEST(Dropout, InactiveWithoutRngAndStochasticWithIt) {
  auto m = Model<float>::init(tiny_jumbo(), 71);
  Rng rng(72);
  auto x = images<float>(m.config(), 2, rng);
  auto tp = Tape<float>::no_grad();
  auto base = forward(tp, m, x);
  auto no_rng = forward(tp, m, x, ForwardOptions{0.5, nullptr});
  EXPECT_TRUE(std::equal(base.values().begin(), base.values().end(), no_rng.values().begin()));
  Rng drop(73);
  auto noisy = forward(tp, m, x, ForwardOptions{0.5, &drop});
  EXPECT_FALSE(std::equal(base.values().begin(), base.values().end(), noisy.values().begin()));
}
