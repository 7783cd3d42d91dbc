#include <gtest/gtest.h>

#include <cmath>

#include "ftgan/autograd/conv.hpp"
#include "ftgan/autograd/ops.hpp"
#include "ftgan/autograd/similarity.hpp"
#include "support/gradcheck.hpp"

using namespace ftgan;
using ag::Tensor;
using ftgan::testing::grad_check;
using ftgan::testing::random_tensor;
using ftgan::testing::weighted_sum;

namespace {

constexpr double kTol = 1e-5;

}  // namespace

TEST(Autograd, ElementwiseGradients) {
  Rng rng(1);
  auto a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng, 0.5, 2.0);
  auto r = grad_check(
      [&] {
        auto y = ag::add(ag::mul(a, b), ag::sub(ag::tanh(a), ag::sigmoid(b)));
        y = ag::add(y, ag::log(b));
        y = ag::add(y, ag::exp(ag::scale(a, 0.5)));
        y = ag::add(y, ag::log_sigmoid(ag::add_scalar(a, 0.3)));
        y = ag::add(y, ag::reciprocal(b));
        return weighted_sum(y);
      },
      {a, b});
  EXPECT_LT(r.worst_rel, kTol) << r.worst_where;
}

TEST(Autograd, PiecewiseActivationsAwayFromKink) {
  Rng rng(2);
  auto a = random_tensor({20}, rng);
  for (auto& v : a.mutable_data())
    if (std::abs(v) < 0.05) v = 0.3;
  auto r = grad_check([&] { return weighted_sum(ag::add(ag::relu(a), ag::leaky_relu(a, 0.2))); }, {a});
  EXPECT_LT(r.worst_rel, kTol) << r.worst_where;
}

TEST(Autograd, ChannelBroadcasts) {
  Rng rng(3);
  auto x = random_tensor({2, 3, 2, 2}, rng), w = random_tensor({3}, rng), b = random_tensor({3}, rng);
  auto s = random_tensor({1}, rng);
  auto r = grad_check(
      [&] { return weighted_sum(ag::mul_scalar(ag::add_channels(ag::mul_channels(x, w), b), s)); }, {x, w, b, s});
  EXPECT_LT(r.worst_rel, kTol) << r.worst_where;
}

TEST(Autograd, ShapeOps) {
  Rng rng(4);
  auto a = random_tensor({2, 3, 4}, rng), b = random_tensor({2, 2, 4}, rng), c = random_tensor({1, 3, 2}, rng);
  auto r = grad_check(
      [&] {
        auto cat = ag::concat<double>({a, b}, 1);                    // [2, 5, 4]
        auto nar = ag::narrow(cat, 2, 1, 2);                          // [2, 5, 2]
        auto tr = ag::transpose_last2(nar);                           // [2, 2, 5]
        auto st = ag::stack<double>({tr, tr}, 0);                     // [2, 2, 2, 5]
        auto rs = ag::reshape(st, {4, -1});                           // [4, 10]
        auto rep = ag::repeat_batch(c, 3);                            // [3, 3, 2]
        auto sp = ag::repeat_spatial(ag::reshape(c, {3, 2}), 2, 3);  // [3, 2, 2, 3]
        return ag::add(ag::add(weighted_sum(rs), weighted_sum(rep, 5)), weighted_sum(sp, 6));
      },
      {a, b, c});
  EXPECT_LT(r.worst_rel, kTol) << r.worst_where;
}

TEST(Autograd, ConcatPlacesPartsInOrder) {
  Tensor<double> a({2, 1}, {1, 2}), b({2, 2}, {3, 4, 5, 6});
  auto c = ag::concat<double>({a, b}, 1);
  EXPECT_EQ(c.values(), (std::vector<double>{1, 3, 4, 2, 5, 6}));
}

TEST(Autograd, MatmulAllTransposeCombinations) {
  Rng rng(5);
  for (int ta = 0; ta < 2; ++ta)
    for (int tb = 0; tb < 2; ++tb) {
      auto a = random_tensor(ta ? ag::Shape{4, 3} : ag::Shape{3, 4}, rng);
      auto b = random_tensor(tb ? ag::Shape{5, 4} : ag::Shape{4, 5}, rng);
      auto r = grad_check([&] { return weighted_sum(ag::matmul(a, b, ta, tb)); }, {a, b});
      EXPECT_LT(r.worst_rel, kTol) << ta << tb << " " << r.worst_where;
      auto x = random_tensor(ta ? ag::Shape{2, 4, 3} : ag::Shape{2, 3, 4}, rng);
      auto y = random_tensor(tb ? ag::Shape{2, 5, 4} : ag::Shape{2, 4, 5}, rng);
      r = grad_check([&] { return weighted_sum(ag::bmm(x, y, ta, tb)); }, {x, y});
      EXPECT_LT(r.worst_rel, kTol) << ta << tb << " " << r.worst_where;
    }
}

TEST(Autograd, MatmulValues) {
  Tensor<double> a({2, 2}, {1, 2, 3, 4}), b({2, 2}, {5, 6, 7, 8});
  EXPECT_EQ(ag::matmul(a, b).values(), (std::vector<double>{19, 22, 43, 50}));
  EXPECT_EQ(ag::matmul(a, b, true, false).values(), (std::vector<double>{26, 30, 38, 44}));
  EXPECT_EQ(ag::matmul(a, b, false, true).values(), (std::vector<double>{17, 23, 39, 53}));
}

TEST(Autograd, LinearAndEmbedding) {
  Rng rng(6);
  auto x = random_tensor({3, 4}, rng), w = random_tensor({2, 4}, rng), b = random_tensor({2}, rng);
  auto table = random_tensor({5, 3}, rng);
  std::vector<std::int64_t> ids{4, 0, 4, 2};
  auto r = grad_check(
      [&] { return ag::add(weighted_sum(ag::linear(x, w, b)), weighted_sum(ag::embedding(ids, table), 7)); },
      {x, w, b, table});
  EXPECT_LT(r.worst_rel, kTol) << r.worst_where;
  EXPECT_THROW(ag::embedding({5}, table), ContractViolation);
}

TEST(Autograd, SoftmaxWithLengths) {
  Rng rng(7);
  auto x = random_tensor({2, 3, 4}, rng, -2, 2);
  std::vector<std::int64_t> lengths{4, 2};
  auto y = ag::softmax_last(x, &lengths);
  for (int r = 0; r < 6; ++r) {
    double s = 0;
    for (int j = 0; j < 4; ++j) s += y[r * 4 + j];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  for (int r = 3; r < 6; ++r) {
    EXPECT_EQ(y[r * 4 + 2], 0.0);
    EXPECT_EQ(y[r * 4 + 3], 0.0);
  }
  auto r = grad_check([&] { return weighted_sum(ag::softmax_last(x, &lengths)); }, {x});
  EXPECT_LT(r.worst_rel, kTol) << r.worst_where;

  std::vector<std::int64_t> none{0, 4};
  auto z = ag::softmax_last(x, &none);
  for (int j = 0; j < 12; ++j) EXPECT_EQ(z[j], 0.0);
}

TEST(Autograd, SelectRowsCopiesExactly) {
  Tensor<double> a({3, 2}, {1, 2, 3, 4, 5, 6}, true), b({3, 2}, {7, 8, 9, 10, 11, 12}, true);
  auto y = ag::select_rows({1, 0, 1}, a, b);
  EXPECT_EQ(y.values(), (std::vector<double>{1, 2, 9, 10, 5, 6}));
  ag::backward(ag::sum(y));
  EXPECT_EQ(std::vector<double>(a.grad().begin(), a.grad().end()), (std::vector<double>{1, 1, 0, 0, 1, 1}));
  EXPECT_EQ(std::vector<double>(b.grad().begin(), b.grad().end()), (std::vector<double>{0, 0, 1, 1, 0, 0}));
}

TEST(Autograd, DropoutKeepsExpectation) {
  Rng rng(8);
  auto x = Tensor<double>::full({10000}, 1.0);
  auto y = ag::dropout(x, 0.5, rng);
  double s = 0;
  for (double v : y.values()) s += v;
  EXPECT_NEAR(s / 10000, 1.0, 0.05);
  EXPECT_EQ(ag::dropout(x, 0.0, rng).node(), x.node());
}

TEST(Autograd, Conv2dGradients) {
  Rng rng(9);
  for (int stride : {1, 2}) {
    auto x = random_tensor({2, 3, 6, 6}, rng), w = random_tensor({4, 3, 3, 3}, rng), b = random_tensor({4}, rng);
    auto r = grad_check([&] { return weighted_sum(ag::conv2d(x, w, b, stride, 1)); }, {x, w, b});
    EXPECT_LT(r.worst_rel, kTol) << "stride " << stride << " " << r.worst_where;
  }
  auto x = random_tensor({1, 2, 8, 8}, rng), w = random_tensor({3, 2, 4, 4}, rng);
  auto y = ag::conv2d(x, w, {}, 2, 1);
  EXPECT_EQ(y.shape(), (ag::Shape{1, 3, 4, 4}));
}

TEST(Autograd, Conv2dMatchesDirectSum) {
  Rng rng(10);
  auto x = random_tensor({1, 2, 5, 5}, rng, -1, 1, false), w = random_tensor({3, 2, 3, 3}, rng, -1, 1, false);
  auto y = ag::conv2d(x, w, {}, 2, 1);
  for (int o = 0; o < 3; ++o)
    for (int oy = 0; oy < 3; ++oy)
      for (int ox = 0; ox < 3; ++ox) {
        double acc = 0;
        for (int c = 0; c < 2; ++c)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int iy = oy * 2 - 1 + ky, ix = ox * 2 - 1 + kx;
              if (iy < 0 || iy >= 5 || ix < 0 || ix >= 5) continue;
              acc += x[(c * 5 + iy) * 5 + ix] * w[((o * 2 + c) * 3 + ky) * 3 + kx];
            }
        EXPECT_NEAR(y[(o * 3 + oy) * 3 + ox], acc, 1e-12);
      }
}

TEST(Autograd, ConvTransposeIsAdjointOfConv) {
  // <conv(x), y> == <x, conv_t(y)> for the same weight tensor.
  Rng rng(11);
  auto x = random_tensor({1, 3, 8, 8}, rng, -1, 1, false);
  auto w = random_tensor({2, 3, 4, 4}, rng, -1, 1, false);  // conv: 3 -> 2
  auto y = random_tensor({1, 2, 4, 4}, rng, -1, 1, false);
  auto cx = ag::conv2d(x, w, {}, 2, 1);
  auto ty = ag::conv_transpose2d(y, w, {}, 2, 1);  // weight read as [Ci=2, Co=3]
  ASSERT_EQ(ty.shape(), x.shape());
  double lhs = 0, rhs = 0;
  for (std::int64_t i = 0; i < cx.numel(); ++i) lhs += cx[i] * y[i];
  for (std::int64_t i = 0; i < x.numel(); ++i) rhs += x[i] * ty[i];
  EXPECT_NEAR(lhs, rhs, 1e-10);

  auto xt = random_tensor({2, 2, 3, 3}, rng), wt = random_tensor({2, 3, 4, 4}, rng), bt = random_tensor({3}, rng);
  auto r = grad_check([&] { return weighted_sum(ag::conv_transpose2d(xt, wt, bt, 2, 1)); }, {xt, wt, bt});
  EXPECT_LT(r.worst_rel, kTol) << r.worst_where;
}

TEST(Autograd, PoolingAndUpsample) {
  Rng rng(12);
  auto x = random_tensor({2, 2, 5, 7}, rng);
  auto r = grad_check(
      [&] {
        return ag::add(ag::add(weighted_sum(ag::adaptive_avg_pool2d(x, 3, 2)), weighted_sum(ag::global_avg_pool(x), 3)),
                       weighted_sum(ag::upsample_nearest2x(x), 4));
      },
      {x});
  EXPECT_LT(r.worst_rel, kTol) << r.worst_where;
  Tensor<double> sq({1, 1, 2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(ag::global_avg_pool(sq).item(), 2.5);
  EXPECT_EQ(ag::upsample_nearest2x(sq).values(),
            (std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4}));
}

TEST(Autograd, BatchNormTrainingAndEval) {
  Rng rng(13);
  auto x = random_tensor({3, 2, 2, 2}, rng), g = random_tensor({2}, rng, 0.5, 1.5), b = random_tensor({2}, rng);
  auto rm = Tensor<double>::zeros({2}), rv = Tensor<double>::full({2}, 1.0);
  for (bool training : {true, false}) {
    auto r = grad_check([&] { return weighted_sum(ag::batch_norm2d(x, g, b, rm, rv, training)); }, {x, g, b});
    EXPECT_LT(r.worst_rel, 1e-4) << training << " " << r.worst_where;
  }
  auto y = ag::batch_norm2d(x, Tensor<double>::full({2}, 1.0), Tensor<double>::zeros({2}), rm, rv, true);
  for (int c = 0; c < 2; ++c) {
    double s = 0, ss = 0;
    for (int n = 0; n < 3; ++n)
      for (int k = 0; k < 4; ++k) {
        const double v = y[(n * 2 + c) * 4 + k];
        s += v;
        ss += v * v;
      }
    EXPECT_NEAR(s / 12, 0.0, 1e-12);
    EXPECT_NEAR(ss / 12, 1.0, 1e-3);
  }
}

TEST(Autograd, SimilarityOps) {
  Rng rng(14);
  auto a = random_tensor({2, 4, 3}, rng), b = random_tensor({2, 4, 3}, rng);
  auto p = random_tensor({3, 4}, rng), q = random_tensor({2, 4}, rng);
  auto l = random_tensor({2, 5}, rng, -3, 3);
  auto logits = random_tensor({3, 4}, rng, -2, 2);
  std::vector<std::int64_t> labels{1, 0, 3};
  auto r = grad_check(
      [&] {
        auto s = weighted_sum(ag::cosine_columns(a, b));
        s = ag::add(s, weighted_sum(ag::cosine_matrix(p, q), 3));
        s = ag::add(s, weighted_sum(ag::logsumexp_last(l), 4));
        return ag::add(s, ag::cross_entropy(logits, labels));
      },
      {a, b, p, q, l, logits});
  EXPECT_LT(r.worst_rel, kTol) << r.worst_where;
}

TEST(Autograd, CosineGuardsZeroVectors) {
  auto a = Tensor<double>::zeros({1, 3, 2}, true), b = Tensor<double>::full({1, 3, 2}, 1.0, true);
  auto c = ag::cosine_columns(a, b);
  for (double v : c.values()) EXPECT_EQ(v, 0.0);
  ag::backward(ag::sum(c));
  for (double g : a.grad()) EXPECT_TRUE(std::isfinite(g));
}

TEST(Autograd, BackwardAccumulatesLeavesAndReleasesGraph) {
  auto x = Tensor<double>::scalar(3.0, true);
  auto y = ag::mul(x, x);
  ag::backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
  ag::backward(ag::mul(x, x));
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
  EXPECT_EQ(y.node()->parents.size(), 0u);
}

TEST(Autograd, NoGradGuardSkipsGraph) {
  auto x = Tensor<double>::scalar(2.0, true);
  ag::NoGradGuard guard;
  auto y = ag::mul(x, x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Autograd, RectifiersPropagateNan) {
  ag::Tensor<double> x({3}, {std::nan(""), -1.0, 2.0});
  auto r = ag::relu(x), l = ag::leaky_relu(x, 0.2);
  EXPECT_TRUE(std::isnan(r[0]));
  EXPECT_TRUE(std::isnan(l[0]));
  EXPECT_EQ(r[1], 0.0);
  EXPECT_EQ(l[1], -0.2);
  EXPECT_EQ(r[2], 2.0);
}
