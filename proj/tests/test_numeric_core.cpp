#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "jumbo/ops.hpp"
#include "support/oracles.hpp"

using namespace jumbo;
using jumbo::testing::fd_relative_errors;
using jumbo::testing::random_tensor;

namespace {

Tensor<double> mat(std::size_t r, std::size_t c, std::vector<double> v, bool rg = false) {
  return Tensor<double>({r, c}, std::move(v), rg);
}

}  // namespace

TEST(Tensor, ShapeInvariant) {
  EXPECT_THROW(Tensor<float>({2, 3}, std::vector<float>(5)), ShapeError);
  Tensor<double> t({2, 3}, true);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.grad().size(), 6u);
  EXPECT_EQ(Tensor<double>::scalar(3.0).item(), 3.0);
  EXPECT_THROW(t.item(), ContractError);
}

TEST(Matmul, IdentityAndHandArithmetic) {
  Tape<double> tp;
  auto eye = mat(2, 2, {1, 0, 0, 1});
  auto m = mat(2, 2, {1, 2, 3, 4});
  auto r = ops::matmul(tp, eye, m);
  EXPECT_EQ(std::vector<double>(r.values().begin(), r.values().end()), (std::vector<double>{1, 2, 3, 4}));
  auto dot = ops::matmul(tp, mat(1, 2, {1, 2}), mat(2, 1, {3, 4}));
  EXPECT_EQ(dot.item(), 11.0);
  EXPECT_THROW(ops::matmul(tp, m, mat(1, 2, {1, 2})), ShapeError);
}

TEST(Matmul, CounterAddsTwoMacsPerMultiplyAdd) {
  Rng rng(1);
  FlopCounter counter;
  Tape<float> tp(&counter);
  auto a = random_tensor<float>({3, 4}, rng);
  auto b = random_tensor<float>({4, 2}, rng);
  ops::matmul(tp, a, b);
  // 3 rows x 2 cols outputs, 4 multiply-adds each.
  std::size_t tally = 0;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t k = 0; k < 4; ++k) tally += 2;
  EXPECT_EQ(counter.total_flops(), tally);
  EXPECT_EQ(counter.total_flops(), 48u);
}

TEST(FlopCounter, OffModeAddsNothingAndKeepsNumerics) {
  Rng rng(2);
  auto a = random_tensor<float>({5, 6}, rng);
  auto b = random_tensor<float>({6, 7}, rng);
  FlopCounter off(FlopCounter::Mode::off);
  Tape<float> t1(&off), t2;
  auto x = ops::matmul(t1, a, b);
  auto y = ops::matmul(t2, a, b);
  EXPECT_EQ(off.total_flops(), 0u);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(x[i], y[i]);
}

TEST(FlopCounter, Linearity) {
  Rng rng(3);
  auto a = random_tensor<float>({5, 6}, rng);
  auto b = random_tensor<float>({6, 7}, rng);
  auto c = random_tensor<float>({4, 3, 8}, rng);
  auto d = random_tensor<float>({4, 8, 2}, rng);
  FlopCounter both, first, second;
  {
    Tape<float> tp(&both);
    ops::matmul(tp, a, b);
    ops::bmm(tp, c, d);
  }
  {
    Tape<float> tp(&first);
    ops::matmul(tp, a, b);
  }
  {
    Tape<float> tp(&second);
    ops::bmm(tp, c, d);
  }
  EXPECT_EQ(both.macs(), first.macs() + second.macs());
}

TEST(Softmax, UniformShiftAndDirectFormula) {
  Tape<double> tp;
  auto u = ops::softmax(tp, Tensor<double>({3}, {0, 0, 0}), 0);
  for (double v : u.values()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);

  auto a = ops::softmax(tp, Tensor<double>({3}, {0.5, 1.5, 2.5}), 0);
  auto b = ops::softmax(tp, Tensor<double>({3}, {100.5, 101.5, 102.5}), 0);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(a[i], b[i], 1e-12);

  auto s = ops::softmax(tp, Tensor<double>({3}, {1, 2, 3}), 0);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) EXPECT_LT(std::abs(s[i] - std::exp(i + 1.0) / z) / (std::exp(i + 1.0) / z), 1e-12);
}

TEST(Softmax, RowsSumToOneAlongAnyAxis) {
  Rng rng(4);
  auto x = random_tensor<double>({3, 4, 5}, rng, 3.0);
  Tape<double> tp;
  auto y = ops::softmax(tp, x, 1);
  for (std::size_t o = 0; o < 3; ++o) {
    for (std::size_t in = 0; in < 5; ++in) {
      double s = 0;
      for (std::size_t j = 0; j < 4; ++j) {
        const double v = y[o * 20 + j * 5 + in];
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(LayerNorm, ConstantRowMapsToZero) {
  Tape<double> tp;
  auto y = ops::layer_norm(tp, Tensor<double>({1, 4}, {3, 3, 3, 3}), Tensor<double>::full({4}, 1), Tensor<double>({4}));
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, UnitVarianceRowUnchanged) {
  Tape<double> tp;
  auto y = ops::layer_norm(tp, Tensor<double>({1, 2}, {1, -1}), Tensor<double>::full({2}, 1), Tensor<double>({2}));
  EXPECT_NEAR(y[0], 1.0, 1e-6);
  EXPECT_NEAR(y[1], -1.0, 1e-6);
}

TEST(LayerNorm, Moments) {
  Rng rng(5);
  auto x = random_tensor<double>({1, 64}, rng, 4.0);
  Tape<double> tp;
  auto y = ops::layer_norm(tp, x, Tensor<double>::full({64}, 1), Tensor<double>({64}));
  double mean = 0, var = 0;
  for (double v : y.values()) mean += v;
  mean /= 64;
  for (double v : y.values()) var += (v - mean) * (v - mean);
  var /= 64;
  EXPECT_LT(std::abs(mean), 1e-6);
  EXPECT_LT(std::abs(var - 1), 1e-3);
}

TEST(Backward, SumAndSquare) {
  Rng rng(6);
  auto w = random_tensor<double>({2, 3}, rng, 1.0, true);
  {
    Tape<double> tp;
    tp.backward(ops::sum(tp, w));
    for (double g : w.grad()) EXPECT_EQ(g, 1.0);
  }
  w.zero_grad();
  {
    Tape<double> tp;
    tp.backward(ops::sum(tp, ops::mul(tp, w, w)));
    for (std::size_t i = 0; i < w.numel(); ++i) EXPECT_DOUBLE_EQ(w.grad()[i], 2 * w[i]);
  }
}

TEST(Backward, DisconnectedLeafStaysZeroAndNonScalarRejected) {
  Rng rng(7);
  auto w = random_tensor<double>({3}, rng, 1.0, true);
  auto unused = random_tensor<double>({3}, rng, 1.0, true);
  Tape<double> tp;
  auto y = ops::scale(tp, w, 2.0);
  EXPECT_THROW(tp.backward(y), ContractError);
  tp.backward(ops::sum(tp, y));
  for (double g : unused.grad()) EXPECT_EQ(g, 0.0);
  EXPECT_THROW(tp.backward(ops::sum(tp, y)), ContractError);
}

TEST(Numerics, NonFiniteIsAnError) {
  Tape<double> tp;
  auto big = Tensor<double>({1}, std::vector<double>{1e308});
  EXPECT_THROW(ops::scale(tp, big, 10.0), NumericError);
}

TEST(Gelu, ExactErfForm) {
  Tape<double> tp;
  auto y = ops::gelu(tp, Tensor<double>({3}, {-1.0, 0.0, 2.0}));
  EXPECT_NEAR(y[0], -0.15865525393145707, 1e-15);
  EXPECT_EQ(y[1], 0.0);
  EXPECT_NEAR(y[2], 1.9544997361036416, 1e-15);
}

TEST(ConcatSlice, RoundTripAlongMiddleAxis) {
  Rng rng(8);
  auto a = random_tensor<double>({2, 3, 4}, rng);
  auto b = random_tensor<double>({2, 5, 4}, rng);
  Tape<double> tp;
  auto c = ops::concat(tp, {a, b}, 1);
  EXPECT_EQ(c.shape(), (Shape{2, 8, 4}));
  auto parts = ops::split(tp, c, 1, {3, 5});
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(parts[0][i], a[i]);
  for (std::size_t i = 0; i < b.numel(); ++i) EXPECT_EQ(parts[1][i], b[i]);
}

TEST(Permute, MatchesIndexArithmetic) {
  Rng rng(9);
  auto x = random_tensor<double>({2, 3, 4}, rng);
  Tape<double> tp;
  auto y = ops::permute(tp, x, {2, 0, 1});
  ASSERT_EQ(y.shape(), (Shape{4, 2, 3}));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(y[k * 6 + i * 3 + j], x[i * 12 + j * 4 + k]);
}

TEST(CrossEntropy, UniformLogitsGiveLogC) {
  Tape<double> tp;
  std::vector<int> t{2};
  auto l = ops::cross_entropy(tp, Tensor<double>({1, 5}), t);
  EXPECT_NEAR(l.item(), std::log(5.0), 1e-14);
  std::vector<int> bad{7};
  EXPECT_THROW(ops::cross_entropy(tp, Tensor<double>({1, 5}), bad), ContractError);
}

// Every differentiable primitive composed into one loss, checked against
// central differences at double precision.
TEST(Gradient, AllPrimitivesMatchFiniteDifferences) {
  Rng rng(10);
  auto a = random_tensor<double>({3, 4}, rng, 0.7, true);
  auto b = random_tensor<double>({4, 6}, rng, 0.7, true);
  auto w = random_tensor<double>({6, 6}, rng, 0.5, true);
  auto bias = random_tensor<double>({6}, rng, 0.3, true);
  auto gain = random_tensor<double>({6}, rng, 1.0, true);
  auto beta = random_tensor<double>({6}, rng, 0.3, true);
  auto tok = random_tensor<double>({1, 6}, rng, 0.5, true);
  auto teacher = random_tensor<double>({2, 3}, rng, 1.0, true);
  const std::vector<int> targets{0, 2};
  const std::vector<std::size_t> pick{3, 0, 2};

  auto build = [&](Tape<double>& tp) {
    auto h = ops::matmul(tp, a, b);                                    // [3,6]
    h = ops::linear(tp, h, w, bias);                                   // [3,6]
    h = ops::layer_norm(tp, h, gain, beta);
    h = ops::gelu(tp, h);
    h = ops::concat(tp, {h, tok}, 0);                                  // [4,6]
    h = ops::index_select(tp, h, pick);                                // [3,6]
    auto t = ops::transpose(tp, h);                                    // [6,3]
    auto sm = ops::softmax(tp, t, 0);
    auto bat = ops::broadcast_leading(tp, ops::reshape(tp, sm, {3, 6}), 2);  // [2,3,6]
    auto sq = ops::bmm(tp, bat, bat, true);                            // [2,3,3]
    auto ctx = ops::bmm(tp, sq, bat);                                  // [2,3,6]
    auto perm = ops::permute(tp, ctx, {0, 2, 1});                      // [2,6,3]
    auto m = ops::mean(tp, perm, 1);                                   // [2,3]
    auto parts = ops::split(tp, m, 1, {1, 2});
    auto logits = ops::mul(tp, ops::concat(tp, {parts[1], parts[0]}, 1), ops::scale(tp, m, 3.0));
    Rng drop_rng(99);
    logits = ops::dropout(tp, logits, 0.25, drop_rng);
    auto ce = ops::cross_entropy(tp, logits, targets);
    auto kl = ops::kl_div(tp, ops::log_softmax(tp, teacher), ops::log_softmax(tp, logits));
    return ops::add(tp, ops::add(tp, ce, kl), ops::scale(tp, ops::sum(tp, m), 0.1));
  };

  Tape<double> tp;
  tp.backward(build(tp));
  const auto errs = fd_relative_errors({a, b, w, bias, gain, beta, tok, teacher}, [&] {
    auto nt = Tape<double>::no_grad();
    return build(nt).item();
  });
  for (std::size_t i = 0; i < errs.size(); ++i) EXPECT_LT(errs[i], 1e-4) << "parameter " << i;
}

TEST(Determinism, IdenticalInputsGiveBitIdenticalOutputs) {
  Rng r1(11), r2(11);
  auto x1 = random_tensor<float>({8, 16}, r1);
  auto x2 = random_tensor<float>({8, 16}, r2);
  auto w = random_tensor<float>({16, 16}, r1);
  Tape<float> t1, t2;
  auto y1 = ops::softmax(t1, ops::gelu(t1, ops::matmul(t1, x1, w)), -1);
  auto y2 = ops::softmax(t2, ops::gelu(t2, ops::matmul(t2, x2, w)), -1);
  for (std::size_t i = 0; i < y1.numel(); ++i) EXPECT_EQ(y1[i], y2[i]);
}
