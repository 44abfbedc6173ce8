#include <gtest/gtest.h>

#include <cmath>

#include "dudo/gradcheck.hpp"
#include "oracles.hpp"

using namespace dudo;
using V = Var<double>;

namespace {

V leaf(Tensor<double> t) { return V::leaf(std::move(t), true); }
V rand_leaf(Shape s, std::uint64_t seed, double scale = 1.0) { return leaf(oracle::random_tensor(std::move(s), seed, scale)); }

}  // namespace

TEST(Conv2d, CenterTapIsIdentity) {
  const auto x = oracle::random_tensor({2, 3, 7, 5}, 1);
  Tensor<double> w({3, 3, 3, 3});
  for (std::size_t c = 0; c < 3; ++c) w[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
  const auto y = conv2d(V::leaf(x), V::leaf(w), V::leaf(Tensor<double>({3})));
  EXPECT_EQ(y.value().storage(), x.storage());
}

TEST(Conv2d, BoxFilterCountsNeighbours) {
  Tensor<double> x({1, 1, 5, 5}, 1.0), w({1, 1, 3, 3}, 1.0);
  const auto y = conv2d(V::leaf(x), V::leaf(w), V::leaf(Tensor<double>({1}))).value();
  EXPECT_EQ(y.at(0, 0, 2, 2), 9.0);
  EXPECT_EQ(y.at(0, 0, 0, 0), 4.0);
  EXPECT_EQ(y.at(0, 0, 0, 2), 6.0);
}

TEST(Conv2d, MatchesLoopOracle) {
  struct Case {
    std::size_t cin, cout, k, dil, groups, h, w;
  };
  for (const Case& c : {Case{3, 4, 3, 1, 1, 6, 7}, Case{4, 6, 3, 2, 2, 9, 8}, Case{2, 2, 1, 1, 1, 4, 4},
                        Case{4, 4, 5, 1, 4, 8, 6}, Case{6, 3, 3, 3, 3, 11, 5}}) {
    const auto x = oracle::random_tensor({2, c.cin, c.h, c.w}, c.h);
    const auto w = oracle::random_tensor({c.cout, c.cin / c.groups, c.k, c.k}, c.w);
    const auto b = oracle::random_tensor({c.cout}, 3);
    const auto y = conv2d(V::leaf(x), V::leaf(w), V::leaf(b), c.dil, c.groups);
    EXPECT_LT(oracle::max_rel_diff_real(y.value(), oracle::conv2d(x, w, b, c.dil, c.groups)), 1e-10);
  }
}

TEST(Conv2d, DepthwiseMatchesGroupedOracle) {
  const auto x = oracle::random_tensor({1, 5, 9, 9}, 4);
  const auto w = oracle::random_tensor({5, 1, 3, 3}, 5);
  const auto b = oracle::random_tensor({5}, 6);
  for (std::size_t dil : {1u, 2u, 4u}) {
    const auto y = depthwise_conv2d(V::leaf(x), V::leaf(w), V::leaf(b), dil);
    EXPECT_LT(oracle::max_rel_diff_real(y.value(), oracle::conv2d(x, w, b, dil, 5)), 1e-10) << dil;
  }
}

TEST(Conv2d, RejectsMismatchedShapes) {
  const V x = V::leaf(Tensor<double>({1, 3, 4, 4}));
  EXPECT_THROW(conv2d(x, V::leaf(Tensor<double>({2, 2, 3, 3})), V()), ShapeError);
  EXPECT_THROW(conv2d(x, V::leaf(Tensor<double>({2, 3, 2, 2})), V()), ShapeError);
  EXPECT_THROW(conv2d(V::leaf(Tensor<double>({3, 4, 4})), V::leaf(Tensor<double>({2, 3, 3, 3})), V()), ShapeError);
}

TEST(Activations, PointValues) {
  const Tensor<double> x({4}, std::vector<double>{-2.0, 0.0, 0.5, 3.0});
  const auto r = relu(V::leaf(x)).value();
  EXPECT_EQ(std::vector<double>(r.data().begin(), r.data().end()), (std::vector<double>{0.0, 0.0, 0.5, 3.0}));
  const auto s = silu(V::leaf(x)).value();
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(s[i], x[i] / (1 + std::exp(-x[i])), 1e-15);
  EXPECT_EQ(s[1], 0.0);
}

TEST(Softmax, RowsSumToOneAndSurviveLargeLogits) {
  auto x = oracle::random_tensor({3, 5, 4}, 7, 3.0);
  x[0] = 1000.0;
  const auto y = softmax(V::leaf(x), 1).value();
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t in = 0; in < 4; ++in) {
      double s = 0;
      for (std::size_t l = 0; l < 5; ++l) {
        const double v = y[(o * 5 + l) * 4 + in];
        EXPECT_GE(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  EXPECT_TRUE(y.all_finite());
  EXPECT_NEAR(y[0], 1.0, 1e-12);
}

TEST(Matmul, MatchesLoops) {
  const auto a = oracle::random_tensor({2, 3, 4}, 1), b = oracle::random_tensor({2, 4, 5}, 2),
             c = oracle::random_tensor({2, 6, 4}, 3);
  const auto ab = matmul(V::leaf(a), V::leaf(b)).value();
  const auto act = matmul_nt(V::leaf(a), V::leaf(c)).value();
  for (std::size_t g = 0; g < 2; ++g)
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 5; ++j) {
        double s = 0;
        for (std::size_t k = 0; k < 4; ++k) s += a[(g * 3 + i) * 4 + k] * b[(g * 4 + k) * 5 + j];
        EXPECT_NEAR(ab[(g * 3 + i) * 5 + j], s, 1e-12);
      }
      for (std::size_t j = 0; j < 6; ++j) {
        double s = 0;
        for (std::size_t k = 0; k < 4; ++k) s += a[(g * 3 + i) * 4 + k] * c[(g * 6 + j) * 4 + k];
        EXPECT_NEAR(act[(g * 3 + i) * 6 + j], s, 1e-12);
      }
    }
}

TEST(WindowEmbed, MatchesLoopOracleIncludingOverhang) {
  for (std::size_t win : {1u, 2u, 3u, 4u}) {
    const auto x = oracle::random_tensor({2, 3, 10, 7}, win);
    const auto w = oracle::random_tensor({win * win, win * win}, 10 + win);
    const auto b = oracle::random_tensor({win * win}, 20 + win);
    const auto y = window_embed(V::leaf(x), V::leaf(w), V::leaf(b), win);
    EXPECT_LT(oracle::max_rel_diff_real(y.value(), oracle::window_embed(x, w.data(), b.data(), win)), 1e-10)
        << win;
  }
}

TEST(ComplexOps, MagnitudeAndFftChannels) {
  const auto z = oracle::random_complex({2, 4, 6}, 3);
  const auto x = to_channels(z);
  const auto m = complex_magnitude(V::leaf(x)).value();
  for (std::size_t i = 0; i < z.size(); ++i) EXPECT_NEAR(m[i], std::abs(z[i]), 1e-14);
  const auto k = from_channels(fft2c(V::leaf(x)).value());
  EXPECT_EQ(k, fft2c(z));
}

TEST(Loss, L1MeanAbsolute) {
  const Tensor<double> x({4}, std::vector<double>{1, -2, 3, 0.5}), t({4}, std::vector<double>{0, 0, 4, 0.5});
  EXPECT_DOUBLE_EQ(l1_loss(V::leaf(x), t).value()[0], (1 + 2 + 1 + 0) / 4.0);
}

TEST(Backward, SharedSubexpressionAccumulates) {
  V x = leaf(Tensor<double>({3}, std::vector<double>{1, -1, 2}));
  const V y = add(scale(x, 3.0), x);  // 4x
  backward(weighted_sum(y, Tensor<double>({3}, 1.0)));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(x.grad()[i], 4.0);
}

TEST(Backward, NoGradGuardRecordsNothing) {
  V x = rand_leaf({4}, 1);
  NoGradGuard guard;
  EXPECT_FALSE(scale(x, 2.0).requires_grad());
}

TEST(GradCheck, LinearOpsNearMachinePrecision) {
  V x = rand_leaf({2, 4, 6, 5}, 1), w = rand_leaf({6, 2, 3, 3}, 2), b = rand_leaf({6}, 3);
  EXPECT_LT(grad_check([&] { return conv2d(x, w, b, 2, 2); }, {x, w, b}).max_rel_error, 1e-7);

  V d = rand_leaf({4, 1, 3, 3}, 4), db = rand_leaf({4}, 5);
  EXPECT_LT(grad_check([&] { return depthwise_conv2d(x, d, db, 3); }, {x, d, db}).max_rel_error, 1e-7);

  V a = rand_leaf({2, 3, 4}, 6), m = rand_leaf({2, 4, 5}, 7), n = rand_leaf({2, 6, 4}, 8);
  EXPECT_LT(grad_check([&] { return matmul(a, m); }, {a, m}).max_rel_error, 1e-7);
  EXPECT_LT(grad_check([&] { return matmul_nt(a, n); }, {a, n}).max_rel_error, 1e-7);

  V ew = rand_leaf({9, 9}, 9), eb = rand_leaf({9}, 10);
  EXPECT_LT(grad_check([&] { return window_embed(x, ew, eb, 3); }, {x, ew, eb}).max_rel_error, 1e-7);

  V c = rand_leaf({2, 2, 8, 6}, 11);
  EXPECT_LT(grad_check([&] { return fft2c(c); }, {c}).max_rel_error, 1e-7);
  EXPECT_LT(grad_check([&] { return ifft2c(c); }, {c}).max_rel_error, 1e-7);

  const auto mask = make_cartesian_mask(8, 2.0, 0.25, 1);
  const Tensor<double> ku = oracle::random_tensor({2, 2, 8, 6}, 12);
  EXPECT_LT(grad_check([&] { return data_consistency(c, ku, mask, DcMode::hard()); }, {c}).max_rel_error, 1e-7);
  EXPECT_LT(grad_check([&] { return data_consistency(c, ku, mask, DcMode::soft(0.7)); }, {c}).max_rel_error, 1e-7);

  V p = rand_leaf({2, 3, 4, 4}, 13), q = rand_leaf({2, 2, 4, 4}, 14);
  EXPECT_LT(grad_check([&] { return slice_channels(concat_channels<double>({p, q}), 1, 3); }, {p, q}).max_rel_error,
            1e-7);
  EXPECT_LT(grad_check([&] { return reshape(add(q, scale(q, -0.5)), {4, 16}); }, {q}).max_rel_error, 1e-7);
}

TEST(GradCheck, NonlinearOps) {
  V x = rand_leaf({3, 7}, 21);
  EXPECT_LT(grad_check([&] { return silu(x); }, {x}, {}, 1e-4).max_rel_error, 1e-5);
  EXPECT_LT(grad_check([&] { return softmax(x, 1); }, {x}, {}, 1e-4).max_rel_error, 1e-5);
  EXPECT_LT(grad_check([&] { return softmax(x, 0); }, {x}, {}, 1e-4).max_rel_error, 1e-5);
  // Keep relu and |z| away from their kinks.
  Tensor<double> off = oracle::random_tensor({3, 7}, 22);
  for (auto& v : off.data()) v += v > 0 ? 0.2 : -0.2;
  V r = leaf(off);
  EXPECT_LT(grad_check([&] { return relu(r); }, {r}, {}, 1e-4).max_rel_error, 1e-7);
  V z = rand_leaf({2, 2, 4, 4}, 23);
  EXPECT_LT(grad_check([&] { return complex_magnitude(z); }, {z}, {}, 1e-4).max_rel_error, 1e-5);
}

TEST(GradCheck, NamesWorstInputAndValidatesArguments) {
  V x = rand_leaf({4}, 1);
  const auto rep = grad_check([&] { return scale(x, 2.0); }, {x}, {"x"});
  EXPECT_EQ(rep.worst_input, rep.max_rel_error > 0 ? "x" : "");
  EXPECT_THROW(grad_check([&] { return x; }, {x}, {}, 1e-2), ParameterError);
  EXPECT_THROW(grad_check([&] { return x; }, {V::leaf(Tensor<double>({1}))}), ParameterError);
}

TEST(Finite, DiagnosticNamesFirstBadOp) {
  V x = leaf(Tensor<double>({3}, std::vector<double>{0.0, 1.0, 2.0}));
  const V y = relu(scale(x, std::numeric_limits<double>::infinity()));
  try {
    check_graph_finite(y);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("'scale'"), std::string::npos) << e.what();
  }
  EXPECT_NO_THROW(check_graph_finite(relu(x)));
}
