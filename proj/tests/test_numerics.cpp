#include <gtest/gtest.h>

#include <random>

#include "fd_check.hpp"
#include "sgvl/nn/ops.hpp"
#include "sgvl/nn/optim.hpp"

using namespace sgvl;
using namespace sgvl::nn;
using sgvl::testing::fd_max_error;
using TD = Tensor<double>;

namespace {

TD randn(Shape s, Rng& rng, bool grad = true, double scale = 1.0) {
  std::normal_distribution<double> n(0, scale);
  std::vector<double> v(numel_of(s));
  for (auto& x : v) x = n(rng);
  return TD::from(std::move(s), std::move(v), grad);
}

std::size_t dim(Rng& rng, std::size_t lo = 1, std::size_t hi = 5) { return lo + uniform_index(rng, hi - lo + 1); }

// Contracts an op's output with fixed random weights so every output element
// carries a distinct upstream gradient.
TD probe_sum(const TD& y, const TD& w) { return sum(mul(y, w)); }

constexpr double kTol = 1e-5;
constexpr int kShapes = 20;

}  // namespace

TEST(Ops, SoftmaxOfEqualLogits) {
  auto y = softmax(TD::from({4}, {2, 2, 2, 2}), 0);
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Ops, SoftmaxRowsSumToOne) {
  Rng rng(1);
  auto x = randn({7, 13}, rng, false, 10.0);
  auto y = softmax(x, 1);
  for (std::size_t r = 0; r < 7; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 13; ++c) s += y.data()[r * 13 + c];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Ops, LayerNormOfConstantIsZero) {
  auto g = TD::from({4}, {1, 1, 1, 1});
  auto b = TD::zeros({4});
  auto y = layer_norm(TD::from({2, 4}, {3, 3, 3, 3, -1, -1, -1, -1}), g, b);
  for (double v : y.data()) {
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_EQ(v, 0.0);
  }
}

TEST(Ops, MatmulIdentity) {
  Rng rng(2);
  auto a = randn({3, 5}, rng, false);
  auto id = TD::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  EXPECT_EQ(matmul(id, a).values(), a.values());
}

TEST(Ops, ShapeErrorNamesBothShapes) {
  try {
    matmul(TD::zeros({2, 3}), TD::zeros({4, 5}));
    FAIL();
  } catch (const ShapeError& e) {
    std::string w = e.what();
    EXPECT_NE(w.find("[2,3]"), std::string::npos);
    EXPECT_NE(w.find("[4,5]"), std::string::npos);
  }
  EXPECT_THROW(add(TD::zeros({2, 3}), TD::zeros({2})), ShapeError);
}

TEST(Ops, CrossEntropyNonNegativeZeroOnlyWhenCertain) {
  std::vector<std::int32_t> labels{1};
  EXPECT_NEAR(cross_entropy(TD::from({1, 3}, {-1000, 1000, -1000}), labels).item(), 0.0, 1e-12);
  EXPECT_GT(cross_entropy(TD::from({1, 3}, {0, 1, 0}), labels).item(), 0.0);
  EXPECT_NEAR(cross_entropy(TD::from({1, 3}, {0, 0, 0}), labels).item(), std::log(3.0), 1e-12);
}

TEST(Ops, CrossEntropyIgnoresSentinel) {
  std::vector<std::int32_t> none{-1, -1};
  auto l = cross_entropy(TD::from({2, 3}, {1, 2, 3, 4, 5, 6}, true), none);
  EXPECT_EQ(l.item(), 0.0);
  EXPECT_FALSE(l.requires_grad());
}

TEST(Ops, DropoutRateZeroIsIdentity) {
  Rng rng(3);
  auto x = randn({4, 4}, rng);
  Rng r2(9);
  auto y = dropout(x, 0.0, r2);
  EXPECT_EQ(y.values(), x.values());
}

TEST(Ops, DropoutKeepsExpectation) {
  auto x = TD::from({100000}, std::vector<double>(100000, 1.0));
  Rng r(4);
  auto y = dropout(x, 0.1, r);
  double s = 0;
  std::size_t zeros = 0;
  for (double v : y.data()) {
    s += v;
    zeros += v == 0;
  }
  EXPECT_NEAR(s / 100000, 1.0, 0.01);
  EXPECT_NEAR(zeros / 100000.0, 0.1, 0.005);
}

TEST(Ops, MaskedSoftmaxGivesInvalidKeysNoMass) {
  std::vector<std::uint8_t> valid{1, 1, 0, 1, 0, 0};
  auto y = masked_softmax(TD::from({2, 3}, {1, 2, 3, 4, 5, 6}), valid);
  EXPECT_EQ(y.data()[2], 0.0);
  EXPECT_NEAR(y.data()[0] + y.data()[1], 1.0, 1e-12);
  EXPECT_EQ(y.data()[3], 1.0);
  EXPECT_EQ(y.data()[4], 0.0);
}

TEST(Ops, PermuteRoundTrip) {
  Rng rng(5);
  auto x = randn({2, 3, 4, 5}, rng, false);
  auto y = permute(permute(x, {0, 2, 1, 3}), {0, 2, 1, 3});
  EXPECT_EQ(y.values(), x.values());
  auto t = permute(randn({3, 4}, rng, false), {1, 0});
  EXPECT_EQ(t.shape(), (Shape{4, 3}));
}

TEST(Backward, SumGivesOnes) {
  auto p = TD::from({3}, {1, -2, 5}, true);
  backward(sum(p));
  for (double g : p.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, HalfSquaredNormGivesValue) {
  auto p = TD::from({4}, {1, -2, 0.5, 3}, true);
  backward(scale(sum(mul(p, p)), 0.5));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(p.grad()[i], p.data()[i]);
}

TEST(Backward, SecondCallAccumulates) {
  auto p = TD::from({2}, {1, 2}, true);
  auto loss = sum(p);
  backward(loss);
  backward(loss);
  EXPECT_EQ(p.grad()[0], 2.0);
}

TEST(Backward, NonScalarThrows) {
  auto p = TD::from({2}, {1, 2}, true);
  EXPECT_THROW(backward(scale(p, 2.0)), ShapeError);
}

TEST(Backward, SharedSubexpression) {
  auto p = TD::from({1}, {3}, true);
  auto q = mul(p, p);
  backward(sum(add(q, q)));  // 2 p^2
  EXPECT_DOUBLE_EQ(p.grad()[0], 12.0);
}

// Finite differences for each op over 20 random shapes.

TEST(GradCheck, Matmul) {
  Rng rng(10);
  for (int s = 0; s < kShapes; ++s) {
    const bool tb = s % 2;
    auto a = randn({dim(rng), dim(rng), dim(rng)}, rng);
    const std::size_t K = a.shape().back(), N = dim(rng);
    auto b = tb ? randn({N, K}, rng) : randn({K, N}, rng);
    Shape os = a.shape();
    os.back() = N;
    auto w = randn(os, rng, false);
    EXPECT_LT(fd_max_error([&] { return probe_sum(matmul(a, b, tb), w); }, {a, b}), kTol);
  }
}

TEST(GradCheck, Bmm) {
  Rng rng(11);
  for (int s = 0; s < kShapes; ++s) {
    const bool tb = s % 2;
    const std::size_t B = dim(rng, 1, 3), H = dim(rng, 1, 2), M = dim(rng), K = dim(rng), N = dim(rng);
    auto a = randn({B, H, M, K}, rng);
    auto b = tb ? randn({B, H, N, K}, rng) : randn({B, H, K, N}, rng);
    auto w = randn({B, H, M, N}, rng, false);
    EXPECT_LT(fd_max_error([&] { return probe_sum(bmm(a, b, tb), w); }, {a, b}), kTol);
  }
}

TEST(GradCheck, AddBroadcastMulScale) {
  Rng rng(12);
  for (int s = 0; s < kShapes; ++s) {
    auto a = randn({dim(rng), dim(rng), dim(rng)}, rng);
    Shape tail(a.shape().begin() + 1 + (s % 2), a.shape().end());
    auto b = randn(tail, rng);
    auto c = randn(a.shape(), rng);
    auto w = randn(a.shape(), rng, false);
    EXPECT_LT(fd_max_error([&] { return probe_sum(scale(mul(add(a, b), c), 0.7), w); }, {a, b, c}), kTol);
  }
}

TEST(GradCheck, MeanGeluTanh) {
  Rng rng(13);
  for (int s = 0; s < kShapes; ++s) {
    auto a = randn({dim(rng), dim(rng)}, rng, true, 2.0);
    auto w = randn(a.shape(), rng, false);
    EXPECT_LT(fd_max_error([&] { return add(mean(mul(gelu(a), w)), sum(mul(tanh(a), w))); }, {a}), kTol);
  }
}

TEST(GradCheck, LayerNorm) {
  Rng rng(14);
  for (int s = 0; s < kShapes; ++s) {
    const std::size_t H = dim(rng, 2, 8);
    auto x = randn({dim(rng), dim(rng), H}, rng);
    auto g = randn({H}, rng);
    auto b = randn({H}, rng);
    auto w = randn(x.shape(), rng, false);
    EXPECT_LT(fd_max_error([&] { return probe_sum(layer_norm(x, g, b), w); }, {x, g, b}), kTol);
  }
}

TEST(GradCheck, SoftmaxEveryAxis) {
  Rng rng(15);
  for (int s = 0; s < kShapes; ++s) {
    auto x = randn({dim(rng), dim(rng), dim(rng)}, rng);
    auto w = randn(x.shape(), rng, false);
    const std::size_t axis = static_cast<std::size_t>(s % 3);
    EXPECT_LT(fd_max_error([&] { return probe_sum(softmax(x, axis), w); }, {x}), kTol);
  }
}

TEST(GradCheck, MaskedSoftmax) {
  Rng rng(16);
  for (int s = 0; s < kShapes; ++s) {
    const std::size_t B = dim(rng, 1, 3), S = dim(rng, 2, 6);
    auto x = randn({B, dim(rng, 1, 2), dim(rng), S}, rng);
    std::vector<std::uint8_t> valid(B * S);
    for (auto& v : valid) v = uniform01(rng) < 0.7;
    for (std::size_t b = 0; b < B; ++b) valid[b * S] = 1;
    auto w = randn(x.shape(), rng, false);
    EXPECT_LT(fd_max_error([&] { return probe_sum(masked_softmax(x, valid), w); }, {x}), kTol);
  }
}

TEST(GradCheck, EmbeddingAndGather) {
  Rng rng(17);
  for (int s = 0; s < kShapes; ++s) {
    const std::size_t V = dim(rng, 2, 7), H = dim(rng);
    auto table = randn({V, H}, rng);
    std::vector<std::int32_t> ids(dim(rng, 1, 8));
    for (auto& i : ids) i = static_cast<std::int32_t>(uniform_index(rng, V));
    std::vector<std::size_t> rows(dim(rng, 1, 4));
    for (auto& r : rows) r = uniform_index(rng, ids.size());
    auto w = randn({rows.size(), H}, rng, false);
    EXPECT_LT(fd_max_error([&] { return probe_sum(gather_rows(embedding(table, ids, {ids.size()}), rows), w); }, {table}),
              kTol);
  }
}

TEST(GradCheck, Dropout) {
  Rng rng(18);
  for (int s = 0; s < kShapes; ++s) {
    auto x = randn({dim(rng), dim(rng)}, rng);
    auto w = randn(x.shape(), rng, false);
    EXPECT_LT(fd_max_error(
                  [&] {
                    Rng r(99);  // same mask on every evaluation
                    return probe_sum(dropout(x, 0.3, r), w);
                  },
                  {x}),
              kTol);
  }
}

TEST(GradCheck, CrossEntropyAndBce) {
  Rng rng(19);
  for (int s = 0; s < kShapes; ++s) {
    const std::size_t N = dim(rng, 1, 6), C = dim(rng, 2, 7);
    auto logits = randn({N, C}, rng, true, 2.0);
    std::vector<std::int32_t> labels(N);
    for (auto& l : labels) l = uniform01(rng) < 0.3 ? -1 : static_cast<std::int32_t>(uniform_index(rng, C));
    labels[0] = 0;
    auto scores = randn({N}, rng, true, 3.0);
    std::vector<double> y(N);
    for (auto& v : y) v = uniform01(rng) < 0.5;
    EXPECT_LT(fd_max_error([&] { return add(cross_entropy(logits, labels), bce_with_logits(scores, y)); },
                           {logits, scores}),
              kTol);
  }
}

TEST(GradCheck, ConcatSliceReshapePermute) {
  Rng rng(20);
  for (int s = 0; s < kShapes; ++s) {
    const std::size_t A = dim(rng), B = dim(rng, 2, 5), C = dim(rng);
    const std::size_t axis = static_cast<std::size_t>(s % 3);
    Shape s1{A, B, C}, s2{A, B, C};
    s2[axis] = dim(rng);
    auto x = randn(s1, rng), y = randn(s2, rng);
    auto cat = [&] { return concat(std::vector<TD>{x, y}, axis); };
    const std::size_t len = cat().dim(axis);
    const std::size_t lo = uniform_index(rng, len), hi = lo + 1 + uniform_index(rng, len - lo);
    Shape sl = cat().shape();
    sl[axis] = hi - lo;
    auto w = randn({sl[2], sl[0], sl[1]}, rng, false);
    EXPECT_LT(fd_max_error(
                  [&] {
                    auto z = slice(cat(), axis, lo, hi);
                    z = reshape(z, {numel_of(sl)});
                    z = reshape(z, sl);
                    return probe_sum(permute(z, {2, 0, 1}), w);
                  },
                  {x, y}),
              kTol);
  }
}

TEST(GradCheck, ThreeLayerMlp) {
  Rng rng(21);
  auto x = randn({5, 6}, rng, false);
  auto w1 = randn({6, 8}, rng), b1 = randn({8}, rng);
  auto w2 = randn({8, 8}, rng), b2 = randn({8}, rng);
  auto w3 = randn({8, 3}, rng), b3 = randn({3}, rng);
  std::vector<std::int32_t> labels{0, 2, 1, 1, 0};
  auto f = [&] {
    auto h = gelu(add(matmul(x, w1), b1));
    h = tanh(add(matmul(h, w2), b2));
    return cross_entropy(add(matmul(h, w3), b3), labels);
  };
  EXPECT_LT(fd_max_error(f, {w1, b1, w2, b2, w3, b3}), 1e-6);
}

TEST(Adam, ZeroGradientsLeaveParams) {
  ParamStore<double> ps;
  ps.add("p", TD::from({3}, {1, 2, 3}));
  ps.zero_grad();
  AdamState<double> st;
  adam_step(ps, st, 0.1);
  EXPECT_EQ(ps[0].values(), (std::vector<double>{1, 2, 3}));
  EXPECT_EQ(st.t, 1u);
}

TEST(Adam, FirstStepIsMinusLrSignG) {
  ParamStore<double> ps;
  ps.add("p", TD::scalar(0.0));
  ps.zero_grad();
  ps[0].grad()[0] = 1.0;
  AdamState<double> st;
  adam_step(ps, st, 0.1);
  EXPECT_NEAR(ps[0].item(), -0.1, 1e-6);
  EXPECT_EQ(ps[0].grad()[0], 0.0);  // zeroed afterwards
}

TEST(Adam, MirroredParamsStayMirrored) {
  ParamStore<double> ps;
  ps.add("a", TD::scalar(0.7));
  ps.add("b", TD::scalar(-0.7));
  AdamState<double> st;
  for (int i = 0; i < 2; ++i) {
    ps.zero_grad();
    ps[0].grad()[0] = -0.3;
    ps[1].grad()[0] = 0.3;
    adam_step(ps, st, 0.05);
  }
  EXPECT_EQ(ps[0].item(), -ps[1].item());
}

TEST(Adam, MissingGradientNamesParameter) {
  ParamStore<double> ps;
  ps.add("head.bias", TD::scalar(1.0));
  AdamState<double> st;
  try {
    adam_step(ps, st, 0.1);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("head.bias"), std::string::npos);
  }
}

TEST(Noam, PeakAtWarmup) {
  EXPECT_NEAR(noam_lr(100, 128, 100, 1e-4), 1e-4, 1e-18);
  // both branches agree at the peak
  const double w = 100;
  EXPECT_DOUBLE_EQ(std::pow(w, -0.5), w * std::pow(w, -1.5));
}

TEST(Noam, DecayAndWarmupBranches) {
  EXPECT_NEAR(noam_lr(400, 128, 100, 1e-4), 0.5e-4, 1e-18);
  EXPECT_NEAR(noam_lr(25, 128, 100, 1e-4), 0.25e-4, 1e-18);
}

TEST(Noam, ContinuousAndPeaked) {
  double prev = 0, best = 0;
  std::uint64_t best_step = 0;
  for (std::uint64_t s = 1; s <= 1000; ++s) {
    double v = noam_lr(s, 64, 200, 1e-4);
    if (s > 1) EXPECT_LT(std::abs(v - prev), 1e-6);
    if (v > best) best = v, best_step = s;
    prev = v;
  }
  EXPECT_EQ(best_step, 200u);
}

TEST(Noam, RejectsZero) {
  EXPECT_THROW(noam_lr(0, 64, 10, 1e-4), ConfigError);
  EXPECT_THROW(noam_lr(1, 64, 0, 1e-4), ConfigError);
}

TEST(Clip, ScalesToMaxNorm) {
  ParamStore<double> ps;
  ps.add("p", TD::from({2}, {0, 0}));
  ps.zero_grad();
  ps[0].grad()[0] = 3;
  ps[0].grad()[1] = 4;
  EXPECT_DOUBLE_EQ(clip_grad_norm(ps, 1.0), 5.0);
  EXPECT_NEAR(ps[0].grad()[0], 0.6, 1e-15);
  EXPECT_NEAR(ps[0].grad()[1], 0.8, 1e-15);
}
