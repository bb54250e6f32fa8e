#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "bicap/ops.hpp"
#include "test_support.hpp"

using namespace bicap;
using bicap::testing::random_f64;
using bicap::testing::weighted_sum;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::vector<double> vec(const Tensor& t) { return t.to_vector(); }

}  // namespace

// --- matmul ---------------------------------------------------------------

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Tensor eye = Tensor::from_vector({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::from_vector({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(vec(ops::matmul(eye, m)), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Matmul, RowTimesColumn) {
  Tensor a = Tensor::from_vector({1, 2}, {1, 2});
  Tensor b = Tensor::from_vector({2, 1}, {3, 4});
  EXPECT_EQ(vec(ops::matmul(a, b)), std::vector<double>{11});
}

TEST(Matmul, GradientsMatchFiniteDifferences) {
  auto f = [](const std::vector<Tensor>& in) { return weighted_sum(ops::matmul(in[0], in[1])); };
  EXPECT_LE(ops::grad_check(f, {random_f64({4, 5}, 1), random_f64({5, 3}, 2)}), 1e-6);
}

TEST(Matmul, BatchedBroadcastGradients) {
  auto f = [](const std::vector<Tensor>& in) { return weighted_sum(ops::matmul(in[0], in[1])); };
  EXPECT_LE(ops::grad_check(f, {random_f64({2, 3, 4, 5}, 3), random_f64({3, 5, 2}, 4)}), 1e-6);
  EXPECT_LE(ops::grad_check(f, {random_f64({2, 3, 4}, 5), random_f64({4, 2}, 6)}), 1e-6);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 5}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    EXPECT_NE(msg.find("[4,5]"), std::string::npos);
  }
}

// --- conv2d ---------------------------------------------------------------

TEST(Conv2d, UnitPointwiseKernelIsIdentity) {
  Tensor x = random_f64({1, 1, 4, 4}, 7);
  Tensor w = Tensor::ones({1, 1, 1, 1}, DType::f64);
  EXPECT_EQ(vec(ops::conv2d(x, w, Tensor{})), vec(x));
}

TEST(Conv2d, OnesKernelOnOnesInput) {
  Tensor y = ops::conv2d(Tensor::ones({1, 1, 3, 3}), Tensor::ones({1, 1, 3, 3}), Tensor{});
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y.item(), 9.0);
}

TEST(Conv2d, OutputGeometry) {
  Tensor y = ops::conv2d(Tensor::zeros({2, 3, 9, 7}), Tensor::zeros({5, 3, 3, 3}), Tensor{},
                         {.stride = 2, .padding = 1});
  EXPECT_EQ(y.shape(), (Shape{2, 5, 5, 4}));
}

TEST(Conv2d, GradientsMatchFiniteDifferences) {
  auto make = [](std::size_t stride, std::size_t pad) {
    return [=](const std::vector<Tensor>& in) {
      return weighted_sum(ops::conv2d(in[0], in[1], in[2], {.stride = stride, .padding = pad}));
    };
  };
  const std::vector<Tensor> inputs{random_f64({2, 3, 8, 8}, 8), random_f64({4, 3, 3, 3}, 9),
                                   random_f64({4}, 10)};
  EXPECT_LE(ops::grad_check(make(1, 1), inputs), 1e-6);
  EXPECT_LE(ops::grad_check(make(2, 1), inputs), 1e-6);
  EXPECT_LE(ops::grad_check(make(2, 0), inputs), 1e-6);
  const std::vector<Tensor> pointwise{random_f64({2, 3, 5, 5}, 11), random_f64({2, 3, 1, 1}, 12),
                                      random_f64({2}, 13)};
  EXPECT_LE(ops::grad_check(make(1, 0), pointwise), 1e-6);
}

TEST(Conv2d, KernelLargerThanPaddedInputIsRejected) {
  EXPECT_THROW(ops::conv2d(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 5, 5}), Tensor{},
                           {.stride = 1, .padding = 1}),
               DimensionError);
}

TEST(MaxPool2d, PicksWindowMaximumAndRoutesGradient) {
  Tensor x = Tensor::from_vector({1, 1, 2, 2}, {1, 4, 3, 2}, DType::f64).set_requires_grad(true);
  Tensor y = ops::max_pool2d(x, {.kernel = 2, .stride = 2, .padding = 0});
  EXPECT_EQ(y.item(), 4.0);
  backward(ops::sum(y));
  EXPECT_EQ(vec(x.grad()), (std::vector<double>{0, 1, 0, 0}));
  auto f = [](const std::vector<Tensor>& in) { return weighted_sum(ops::max_pool2d(in[0])); };
  EXPECT_LE(ops::grad_check(f, {random_f64({1, 2, 6, 6}, 14)}), 1e-6);
}

// --- batch norm -----------------------------------------------------------

TEST(BatchNorm, NormalizedBatchPassesThrough) {
  // Two channels, each already zero-mean with unit (biased) variance.
  Tensor x = Tensor::from_vector({2, 2, 1, 2}, {1, -1, 2, 0, -1, 1, -2, 0}, DType::f64);
  // channel 1 values: 2, 0, -2, 0 -> mean 0, var 2; rescale to unit variance
  auto v = vec(x);
  for (int i : {2, 3, 6, 7}) v[static_cast<std::size_t>(i)] /= std::sqrt(2.0);
  x = Tensor::from_vector({2, 2, 1, 2}, v, DType::f64);
  Tensor rm = Tensor::zeros({2}, DType::f64), rv = Tensor::ones({2}, DType::f64);
  Tensor y = ops::batch_norm2d(x, Tensor::ones({2}, DType::f64), Tensor::zeros({2}, DType::f64), rm, rv);
  EXPECT_LT(bicap::testing::max_abs_diff(vec(y), v), 1e-5);
}

TEST(BatchNorm, EvalModeUsesRunningStatistics) {
  const double m = 0.5, var = 4.0, gain = 1.5, bias = -0.25, eps = 1e-5;
  Tensor x = Tensor::from_vector({1, 1, 1, 3}, {1.0, 2.0, -3.0}, DType::f64);
  Tensor rm = Tensor::full({1}, m, DType::f64), rv = Tensor::full({1}, var, DType::f64);
  Tensor y = ops::batch_norm2d(x, Tensor::full({1}, gain, DType::f64), Tensor::full({1}, bias, DType::f64),
                               rm, rv, {.training = false});
  const auto xv = vec(x), yv = vec(y);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(yv[i], (xv[i] - m) / std::sqrt(var + eps) * gain + bias, 1e-12);
  }
  EXPECT_EQ(rm.item(), m);
}

TEST(BatchNorm, TrainingUpdatesRunningStatistics) {
  Tensor x = Tensor::from_vector({2, 1, 1, 1}, {1.0, 3.0}, DType::f64);
  Tensor rm = Tensor::zeros({1}, DType::f64), rv = Tensor::ones({1}, DType::f64);
  ops::batch_norm2d(x, Tensor::ones({1}, DType::f64), Tensor::zeros({1}, DType::f64), rm, rv);
  EXPECT_NEAR(rm.item(), 0.1 * 2.0, 1e-12);
  EXPECT_NEAR(rv.item(), 0.9 + 0.1 * 2.0, 1e-12);  // unbiased variance of {1,3} is 2
}

TEST(BatchNorm, TrainingBackwardMatchesFiniteDifferences) {
  auto f = [](const std::vector<Tensor>& in) {
    Tensor rm = Tensor::zeros({3}, DType::f64), rv = Tensor::ones({3}, DType::f64);
    return weighted_sum(ops::batch_norm2d(in[0], in[1], in[2], rm, rv));
  };
  EXPECT_LE(ops::grad_check(f, {random_f64({2, 3, 3, 3}, 15), random_f64({3}, 16), random_f64({3}, 17)}),
            1e-5);
}

TEST(BatchNorm, SingleValuePerChannelInTrainingIsRejected) {
  Tensor rm = Tensor::zeros({1}), rv = Tensor::ones({1});
  EXPECT_THROW(ops::batch_norm2d(Tensor::ones({1, 1, 1, 1}), Tensor::ones({1}), Tensor::zeros({1}), rm, rv),
               NumericError);
  EXPECT_NO_THROW(ops::batch_norm2d(Tensor::ones({1, 1, 1, 1}), Tensor::ones({1}), Tensor::zeros({1}), rm,
                                    rv, {.allow_single_value = true}));
}

// --- layer norm -----------------------------------------------------------

TEST(LayerNorm, ConstantRowNormalizesToZero) {
  Tensor y = ops::layer_norm(Tensor::full({1, 4}, 3.0, DType::f64), Tensor::ones({4}, DType::f64),
                             Tensor::zeros({4}, DType::f64));
  for (double v : vec(y)) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, TwoElementRow) {
  Tensor y = ops::layer_norm(Tensor::from_vector({1, 2}, {1, 3}, DType::f64), Tensor::ones({2}, DType::f64),
                             Tensor::zeros({2}, DType::f64), 1e-12);
  EXPECT_NEAR(vec(y)[0], -1.0, 1e-9);
  EXPECT_NEAR(vec(y)[1], 1.0, 1e-9);
}

TEST(LayerNorm, GradientsMatchFiniteDifferences) {
  auto f = [](const std::vector<Tensor>& in) { return weighted_sum(ops::layer_norm(in[0], in[1], in[2])); };
  EXPECT_LE(ops::grad_check(f, {random_f64({3, 2, 6}, 18), random_f64({6}, 19), random_f64({6}, 20)}), 1e-6);
}

TEST(LayerNorm, EmptyFeatureDimIsRejected) {
  EXPECT_THROW(ops::layer_norm(Tensor::zeros({2, 0}), Tensor::zeros({0}), Tensor::zeros({0})),
               DimensionError);
}

// --- activations ----------------------------------------------------------

TEST(Gelu, FixedPointsAndAsymptotes) {
  Tensor x = Tensor::from_vector({3}, {0.0, 30.0, -10.0}, DType::f64);
  auto y = vec(ops::gelu(x));
  EXPECT_EQ(y[0], 0.0);
  EXPECT_NEAR(y[1], 30.0, 1e-12);
  EXPECT_NEAR(y[2], 0.0, 1e-6);
}

TEST(Gelu, GradientOnRandomPoints) {
  auto f = [](const std::vector<Tensor>& in) { return weighted_sum(ops::gelu(in[0])); };
  EXPECT_LE(ops::grad_check(f, {random_f64({100}, 21)}), 1e-6);
}

TEST(Relu, GradientOnRandomPoints) {
  auto f = [](const std::vector<Tensor>& in) { return weighted_sum(ops::relu(in[0])); };
  EXPECT_LE(ops::grad_check(f, {random_f64({50}, 22)}), 1e-6);
}

// --- softmax --------------------------------------------------------------

TEST(Softmax, UniformRow) {
  for (double v : vec(ops::softmax(Tensor::zeros({1, 3}, DType::f64)))) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, MinusInfinityMapsToExactZero) {
  auto y = vec(ops::softmax(Tensor::from_vector({1, 2}, {0.7, -kInf}, DType::f64)));
  EXPECT_EQ(y[0], 1.0);
  EXPECT_EQ(y[1], 0.0);
}

TEST(Softmax, KnownValues) {
  const std::vector<double> x{1, 2, 3};
  double z = 0.0;
  for (double v : x) z += std::exp(v);
  auto y = vec(ops::softmax(Tensor::from_vector({3}, x, DType::f64)));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(y[i], std::exp(x[i]) / z, 1e-12);
  // frozen from the direct evaluation above
  EXPECT_NEAR(y[0], 0.09003, 1e-5);
  EXPECT_NEAR(y[1], 0.24473, 1e-5);
  EXPECT_NEAR(y[2], 0.66524, 1e-5);
}

TEST(Softmax, AllMinusInfinityRowIsDegenerate) {
  EXPECT_THROW(ops::softmax(Tensor::from_vector({2}, {-kInf, -kInf}, DType::f64)), NumericError);
}

TEST(Softmax, RowsAreDistributions) {
  Tensor y = ops::softmax(random_f64({7, 11}, 23, 5.0));
  auto v = vec(y);
  for (std::size_t r = 0; r < 7; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < 11; ++i) {
      EXPECT_GE(v[r * 11 + i], 0.0);
      EXPECT_LE(v[r * 11 + i], 1.0);
      s += v[r * 11 + i];
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Softmax, GradientsMatchFiniteDifferences) {
  auto last = [](const std::vector<Tensor>& in) { return weighted_sum(ops::softmax(in[0])); };
  auto middle = [](const std::vector<Tensor>& in) { return weighted_sum(ops::softmax(in[0], 1)); };
  auto logsm = [](const std::vector<Tensor>& in) { return weighted_sum(ops::log_softmax(in[0])); };
  EXPECT_LE(ops::grad_check(last, {random_f64({3, 5}, 24)}), 1e-6);
  EXPECT_LE(ops::grad_check(middle, {random_f64({2, 4, 3}, 25)}), 1e-6);
  EXPECT_LE(ops::grad_check(logsm, {random_f64({3, 5}, 26)}), 1e-6);
}

// --- cross entropy --------------------------------------------------------

TEST(CrossEntropy, UniformLogitsGiveLogVocab) {
  const std::vector<std::int64_t> targets{0, 17, 9999};
  Tensor loss = ops::cross_entropy_logits(Tensor::zeros({3, 10000}, DType::f64), targets);
  EXPECT_NEAR(loss.item(), std::log(10000.0), 1e-9);
  EXPECT_NEAR(loss.item(), 9.21034, 1e-5);
}

TEST(CrossEntropy, ConfidentCorrectLogitGivesZero) {
  Tensor logits = Tensor::from_vector({1, 3}, {0, 1e6, 0}, DType::f64);
  const std::vector<std::int64_t> t{1};
  EXPECT_NEAR(ops::cross_entropy_logits(logits, t).item(), 0.0, 1e-12);
}

TEST(CrossEntropy, IgnoredPositionsContributeNothing) {
  Tensor logits = random_f64({2, 4}, 27).set_requires_grad(true);
  const std::vector<std::int64_t> both{2, -100}, first{2};
  Tensor a = ops::cross_entropy_logits(logits, both);
  const auto lv = vec(logits);
  Tensor row0 = Tensor::from_vector({1, 4}, std::vector<double>(lv.begin(), lv.begin() + 4), DType::f64);
  EXPECT_DOUBLE_EQ(a.item(), ops::cross_entropy_logits(row0, first).item());
  backward(a);
  auto g = vec(logits.grad());
  for (std::size_t i = 4; i < 8; ++i) EXPECT_EQ(g[i], 0.0);
}

TEST(CrossEntropy, AllIgnoredIsEmptyReduction) {
  const std::vector<std::int64_t> t{-100, -100};
  EXPECT_THROW(ops::cross_entropy_logits(Tensor::zeros({2, 3}), t), NumericError);
}

TEST(CrossEntropy, OutOfRangeTargetIsRejected) {
  const std::vector<std::int64_t> t{3};
  EXPECT_THROW(ops::cross_entropy_logits(Tensor::zeros({1, 3}), t), IndexError);
}

TEST(CrossEntropy, GradientOnRandomLogits) {
  const std::vector<std::int64_t> t{1, -100, 4, 0};
  auto f = [&](const std::vector<Tensor>& in) { return ops::cross_entropy_logits(in[0], t); };
  EXPECT_LE(ops::grad_check(f, {random_f64({4, 6}, 28)}), 1e-6);
}

TEST(KlDiv, ZeroWhenLogitsMatchTarget) {
  const std::vector<double> q{0.5, 0.0, 0.5, 0.0};
  // log q up to a constant; zero-mass entries pushed far down
  Tensor logits = Tensor::from_vector({1, 4}, {std::log(0.5) + 3, -1e4, std::log(0.5) + 3, -1e4}, DType::f64);
  EXPECT_NEAR(ops::kl_div_logits(logits, Tensor::from_vector({1, 4}, q, DType::f64)).item(), 0.0, 1e-12);
}

TEST(KlDiv, GradientOnRandomLogits) {
  Tensor q = Tensor::from_vector({2, 3}, {0.5, 0.5, 0.0, 0.2, 0.3, 0.5}, DType::f64);
  auto f = [&](const std::vector<Tensor>& in) { return ops::kl_div_logits(in[0], q); };
  EXPECT_LE(ops::grad_check(f, {random_f64({2, 3}, 29)}), 1e-6);
}

// --- embedding ------------------------------------------------------------

TEST(Embedding, LookupReturnsTableRow) {
  Tensor table = random_f64({5, 3}, 30);
  const std::vector<std::int64_t> ids{4};
  auto row = vec(ops::embedding(table, ids, {1}));
  auto t = vec(table);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(row[j], t[12 + j]);
}

TEST(Embedding, DuplicateIdsAccumulate) {
  Tensor table = random_f64({4, 3}, 31).set_requires_grad(true);
  const std::vector<std::int64_t> ids{2, 2};
  backward(ops::sum(ops::embedding(table, ids, {2})));
  auto g = vec(table.grad());
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(g[r * 3 + j], r == 2 ? 2.0 : 0.0);
}

TEST(Embedding, GradientsMatchFiniteDifferences) {
  const std::vector<std::int64_t> ids{0, 2, 2, 1};
  auto f = [&](const std::vector<Tensor>& in) { return weighted_sum(ops::embedding(in[0], ids, {2, 2})); };
  EXPECT_LE(ops::grad_check(f, {random_f64({3, 4}, 32)}), 1e-8);
}

TEST(Embedding, OutOfRangeIdIsRejected) {
  const std::vector<std::int64_t> ids{3};
  EXPECT_THROW(ops::embedding(Tensor::zeros({3, 2}), ids, {1}), IndexError);
}

// --- dropout --------------------------------------------------------------

TEST(Dropout, ZeroRateAndEvalModeAreIdentity) {
  std::mt19937_64 rng(1);
  Tensor x = random_f64({10}, 33);
  EXPECT_EQ(vec(ops::dropout(x, 0.0, true, &rng)), vec(x));
  EXPECT_EQ(vec(ops::dropout(x, 0.0, false, &rng)), vec(x));
  EXPECT_EQ(vec(ops::dropout(x, 0.5, false, &rng)), vec(x));
}

TEST(Dropout, SurvivorFractionAndMean) {
  std::mt19937_64 rng(2);
  Tensor x = Tensor::ones({100000}, DType::f64);
  auto y = vec(ops::dropout(x, 0.5, true, &rng));
  double kept = 0.0, total = 0.0;
  for (double v : y) {
    kept += v != 0.0;
    total += v;
  }
  EXPECT_NEAR(kept / 1e5, 0.5, 0.01);
  EXPECT_NEAR(total / 1e5, 1.0, 0.02);
}

TEST(Dropout, DeterministicForSeed) {
  Tensor x = random_f64({64}, 34);
  std::mt19937_64 a(5), b(5);
  EXPECT_EQ(vec(ops::dropout(x, 0.3, true, &a)), vec(ops::dropout(x, 0.3, true, &b)));
}

TEST(Dropout, RateOfOneIsRejected) {
  std::mt19937_64 rng(3);
  EXPECT_THROW(ops::dropout(Tensor::ones({2}), 1.0, true, &rng), ParameterError);
}

// --- shape ops ------------------------------------------------------------

TEST(ShapeOps, GradientsMatchFiniteDifferences) {
  auto perm = [](const std::vector<Tensor>& in) { return weighted_sum(ops::permute(in[0], {2, 0, 1})); };
  auto red = [](const std::vector<Tensor>& in) { return weighted_sum(ops::mean_axis(in[0], 1)); };
  auto bcast = [](const std::vector<Tensor>& in) { return weighted_sum(ops::mul(in[0], in[1])); };
  const std::vector<std::size_t> index{2, 1, 0, 0, 1, 2};
  auto gather = [&](const std::vector<Tensor>& in) { return weighted_sum(ops::gather_time(in[0], index)); };
  EXPECT_LE(ops::grad_check(perm, {random_f64({2, 3, 4}, 35)}), 1e-6);
  EXPECT_LE(ops::grad_check(red, {random_f64({2, 3, 4}, 36)}), 1e-6);
  EXPECT_LE(ops::grad_check(bcast, {random_f64({2, 1, 4}, 37), random_f64({3, 1}, 38)}), 1e-6);
  EXPECT_LE(ops::grad_check(gather, {random_f64({2, 3, 2}, 39)}), 1e-6);
}

// --- grad_check itself ----------------------------------------------------

TEST(GradCheck, SumIsExact) {
  auto f = [](const std::vector<Tensor>& in) { return ops::sum(in[0]); };
  EXPECT_LE(ops::grad_check(f, {random_f64({6}, 40)}), 1e-10);
}

TEST(GradCheck, NonPositiveEpsIsRejected) {
  auto f = [](const std::vector<Tensor>& in) { return ops::sum(in[0]); };
  EXPECT_THROW(ops::grad_check(f, {random_f64({2}, 41)}, 0.0), ParameterError);
}

TEST(GradCheck, DetectsAWrongBackwardRule) {
  // Test double: forward is x^2 but the recorded rule claims d/dx = x.
  auto broken_square = [](const Tensor& x) {
    Tensor out = Tensor::from_vector(x.shape(), [&] {
      auto v = x.to_vector();
      for (auto& e : v) e *= e;
      return v;
    }(), x.dtype());
    detail::record(out, "broken_square", {x}, [xd = x.detach()](const Tensor& g) {
      return std::vector<Tensor>{ops::mul(g, xd)};
    });
    return out;
  };
  auto f = [&](const std::vector<Tensor>& in) { return ops::sum(broken_square(in[0])); };
  EXPECT_GT(ops::grad_check(f, {random_f64({5}, 42)}), 1e-2);
}
