#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "support.hpp"

using namespace t2u;
using t2u::test::random_tensor;
using t2u::test::values;

// ---------------------------------------------------------------------------
// Tensor basics and backward
// ---------------------------------------------------------------------------

TEST(Tensor, RejectsZeroDimsAndLengthMismatch) {
    EXPECT_THROW(Tensor<float>({2, 0}), ShapeError);
    EXPECT_THROW(Tensor<float>({2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
}

TEST(Backward, SumGivesOnes) {
    Tensor<double> x({3}, std::vector<double>{1, -2, 5}, true);
    sum(x).backward();
    EXPECT_EQ(values(Tensor<double>({3}, std::vector<double>(x.grad().begin(), x.grad().end()))),
              (std::vector<double>{1, 1, 1}));
}

TEST(Backward, SumOfSquares) {
    Tensor<double> x({2}, std::vector<double>{1, 2}, true);
    sum(mul(x, x)).backward();
    EXPECT_DOUBLE_EQ(x.grad()[0], 2);
    EXPECT_DOUBLE_EQ(x.grad()[1], 4);
}

TEST(Backward, RepeatedBackwardAccumulates) {
    Tensor<double> x({2}, std::vector<double>{1, 2}, true);
    const auto loss = sum(mul(x, x));
    loss.backward();
    loss.backward();
    EXPECT_DOUBLE_EQ(x.grad()[0], 4);
    EXPECT_DOUBLE_EQ(x.grad()[1], 8);
}

TEST(Backward, SharedSubexpressionCountedOnce) {
    // z = y + y with y = x*x: dz/dx = 4x, which fails if y's backward runs twice.
    Tensor<double> x({1}, 3.0, true);
    const auto y = mul(x, x);
    sum(add(y, y)).backward();
    EXPECT_DOUBLE_EQ(x.grad()[0], 12);
}

TEST(Backward, NonScalarLossRejected) {
    Tensor<double> x({2}, 1.0, true);
    EXPECT_THROW(mul(x, x).backward(), ShapeError);
}

TEST(Backward, ConstantsNeverAccumulate) {
    Tensor<double> x({2}, 1.0, true);
    Tensor<double> c({2}, 2.0, false);
    sum(mul(x, c)).backward();
    EXPECT_FALSE(c.has_grad());
    EXPECT_TRUE(x.has_grad());
}

TEST(Backward, NoGradGuardBuildsNoGraph) {
    Tensor<double> x({2}, 1.0, true);
    Tensor<double> y;
    {
        NoGradGuard guard;
        y = mul(x, x);
    }
    EXPECT_TRUE(y.is_leaf());
    EXPECT_FALSE(y.requires_grad());
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

TEST(Matmul, IdentityLeavesOperand) {
    Tensor<double> eye({2, 2}, std::vector<double>{1, 0, 0, 1});
    Tensor<double> b({2, 2}, std::vector<double>{3, -1, 4, 7});
    EXPECT_EQ(values(matmul(eye, b)), values(b));
}

TEST(Matmul, HandEvaluated) {
    Tensor<double> a({2, 2}, std::vector<double>{1, 2, 3, 4});
    Tensor<double> b({2, 1}, std::vector<double>{5, 6});
    const auto c = matmul(a, b);
    EXPECT_EQ(c.shape(), (Shape{2, 1}));
    EXPECT_EQ(values(c), (std::vector<double>{17, 39}));
}

TEST(Matmul, GradientOfSumIsOnesTimesBTransposed) {
    Rng rng(3);
    auto a = random_tensor({3, 4}, rng, -1, 1, true);
    auto b = random_tensor({4, 2}, rng);
    sum(matmul(a, b)).backward();
    const auto expected = matmul(Tensor<double>::ones({3, 2}), transpose_last2(b));
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.grad()[i], expected[i], 1e-12);

    // and both agree with central differences
    const double h = 1e-4;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const double orig = a[i];
        a[i] = orig + h;
        const double fp = sum(matmul(a, b)).item();
        a[i] = orig - h;
        const double fm = sum(matmul(a, b)).item();
        a[i] = orig;
        EXPECT_NEAR((fp - fm) / (2 * h), expected[i], 1e-8);
    }
}

TEST(Matmul, BatchBroadcast) {
    Rng rng(1);
    const auto a = random_tensor({2, 1, 3, 4}, rng);
    const auto b = random_tensor({5, 4, 2}, rng);
    const auto c = matmul(a, b);
    EXPECT_EQ(c.shape(), (Shape{2, 5, 3, 2}));
    // c[1, 3] == a[1, 0] @ b[3]
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 2; ++j) {
            double acc = 0;
            for (std::size_t k = 0; k < 4; ++k) acc += a[12 + i * 4 + k] * b[3 * 8 + k * 2 + j];
            EXPECT_NEAR(c[((1 * 5 + 3) * 3 + i) * 2 + j], acc, 1e-12);
        }
}

TEST(Matmul, MismatchNamesBothShapes) {
    Tensor<double> a({2, 3}), b({4, 2});
    try {
        matmul(a, b);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find(shape_str(a.shape())), std::string::npos) << msg;
        EXPECT_NE(msg.find(shape_str(b.shape())), std::string::npos) << msg;
    }
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

TEST(Conv2d, IdentityKernel) {
    Rng rng(2);
    const auto x = random_tensor({1, 1, 5, 5}, rng);
    Tensor<double> w({1, 1, 3, 3}, 0.0);
    w[4] = 1;
    const auto y = conv2d(x, w, Tensor<double>::zeros({1}));
    EXPECT_EQ(values(y), values(x));
}

TEST(Conv2d, DilatedOnesCenterAndCorner) {
    const auto x = Tensor<double>::ones({1, 1, 5, 5});
    const auto w = Tensor<double>::ones({1, 1, 3, 3});
    const auto y = conv2d(x, w, Tensor<double>::zeros({1}), {1, 2, Padding::same});
    EXPECT_EQ(y.shape(), (Shape{1, 1, 5, 5}));
    EXPECT_DOUBLE_EQ(y[12], 9);  // center
    EXPECT_DOUBLE_EQ(y[0], 4);   // corner
    const auto oracle = test::conv_oracle(values(x), 1, 1, 5, 5, values(w), 1, 3, {0.0}, 1, 2, 2, 5, 5);
    EXPECT_EQ(values(y), oracle);
}

struct ConvCase {
    std::size_t N, C, H, W, O, K, stride, dil;
    Padding pad;
};

std::string case_name(const ConvCase& c) {
    return "n" + std::to_string(c.N) + "c" + std::to_string(c.C) + "_" + std::to_string(c.H) + "x" + std::to_string(c.W) +
           "_o" + std::to_string(c.O) + "k" + std::to_string(c.K) + "s" + std::to_string(c.stride) + "d" +
           std::to_string(c.dil) + (c.pad == Padding::same ? "_same" : "_valid");
}

void PrintTo(const ConvCase& c, std::ostream* os) { *os << case_name(c); }

class ConvOracle : public ::testing::TestWithParam<ConvCase> {};

TEST_P(ConvOracle, MatchesDirectSummation) {
    const auto c = GetParam();
    Rng rng(c.N * 100 + c.K * 10 + c.stride);
    const auto x = random_tensor({c.N, c.C, c.H, c.W}, rng);
    const auto w = random_tensor({c.O, c.C, c.K, c.K}, rng);
    const auto b = random_tensor({c.O}, rng);
    const auto y = conv2d(x, w, b, {c.stride, c.dil, c.pad});
    const std::size_t ext = c.K + (c.K - 1) * (c.dil - 1);
    const std::size_t pad = c.pad == Padding::same ? (ext - 1) / 2 : 0;
    const std::size_t Ho = (c.H + 2 * pad - ext) / c.stride + 1;
    const std::size_t Wo = (c.W + 2 * pad - ext) / c.stride + 1;
    ASSERT_EQ(y.shape(), (Shape{c.N, c.O, Ho, Wo}));
    const auto oracle = test::conv_oracle(values(x), c.N, c.C, c.H, c.W, values(w), c.O, c.K, values(b), c.stride, c.dil, pad, Ho, Wo);
    for (std::size_t i = 0; i < oracle.size(); ++i) EXPECT_NEAR(y[i], oracle[i], 1e-12);
}

INSTANTIATE_TEST_SUITE_P(Shapes, ConvOracle,
                         ::testing::Values(ConvCase{1, 1, 5, 5, 1, 3, 1, 1, Padding::same},
                                           ConvCase{2, 3, 6, 7, 4, 3, 1, 2, Padding::same},
                                           ConvCase{1, 2, 8, 8, 3, 3, 2, 1, Padding::same},
                                           ConvCase{1, 2, 7, 5, 2, 1, 2, 1, Padding::same},
                                           ConvCase{2, 2, 6, 6, 3, 2, 2, 1, Padding::valid},
                                           ConvCase{1, 1, 9, 9, 2, 5, 1, 1, Padding::same},
                                           ConvCase{1, 3, 4, 4, 2, 3, 1, 1, Padding::valid}),
                         [](const ::testing::TestParamInfo<ConvCase>& info) { return case_name(info.param); });

TEST(Conv2d, InvalidArguments) {
    Tensor<double> x({1, 2, 5, 5}), w({1, 2, 3, 3}), b({1});
    EXPECT_THROW(conv2d(x, w, b, {0, 1, Padding::same}), std::invalid_argument);
    EXPECT_THROW(conv2d(x, w, b, {1, 0, Padding::same}), std::invalid_argument);
    EXPECT_THROW(conv2d(x, Tensor<double>({1, 3, 3, 3}), b), ShapeError);
    EXPECT_THROW(conv2d(x, Tensor<double>({1, 2, 2, 2}), b), ShapeError);
    EXPECT_THROW(conv2d(x, Tensor<double>({1, 2, 7, 7}), b, {1, 1, Padding::valid}), ShapeError);
}

TEST(Conv2d, EffectiveExtentWithDilation) {
    // valid padding with kernel 3, dilation 3: extent 7
    Tensor<double> x({1, 1, 9, 9}), w({1, 1, 3, 3});
    const auto y = conv2d(x, w, Tensor<double>(), {1, 3, Padding::valid});
    EXPECT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
}

// ---------------------------------------------------------------------------
// Pooling and resampling
// ---------------------------------------------------------------------------

TEST(Maxpool, ConstantInput) {
    const Tensor<double> x({1, 2, 4, 4}, 3.5);
    const auto y = maxpool2d(x);
    EXPECT_EQ(y.shape(), (Shape{1, 2, 2, 2}));
    for (double v : y.data()) EXPECT_EQ(v, 3.5);
}

TEST(Maxpool, GradientGoesToArgmax) {
    Tensor<double> x({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4}, true);
    const auto y = maxpool2d(x);
    EXPECT_EQ(y.item(), 4);
    sum(y).backward();
    EXPECT_EQ(values(Tensor<double>({4}, std::vector<double>(x.grad().begin(), x.grad().end()))),
              (std::vector<double>{0, 0, 0, 1}));
}

TEST(Maxpool, TieGoesToFirstInRowMajorOrder) {
    Tensor<double> x({1, 1, 2, 2}, std::vector<double>{5, 5, 5, 5}, true);
    sum(maxpool2d(x)).backward();
    EXPECT_EQ(x.grad()[0], 1);
    EXPECT_EQ(x.grad()[1] + x.grad()[2] + x.grad()[3], 0);
}

TEST(Maxpool, MatchesBruteForce) {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const auto x = random_tensor({1, 1, 4, 4}, rng);
        const auto y = maxpool2d(x);
        for (std::size_t oy = 0; oy < 2; ++oy)
            for (std::size_t ox = 0; ox < 2; ++ox) {
                double m = -1e300;
                for (std::size_t dy = 0; dy < 2; ++dy)
                    for (std::size_t dx = 0; dx < 2; ++dx) m = std::max(m, x[(2 * oy + dy) * 4 + 2 * ox + dx]);
                EXPECT_EQ(y[oy * 2 + ox], m);
            }
    }
}

TEST(Maxpool, OddDimsRejected) {
    EXPECT_THROW(maxpool2d(Tensor<double>({1, 1, 3, 4})), ShapeError);
    EXPECT_THROW(maxpool2d(Tensor<double>({1, 1, 4, 5})), ShapeError);
}

TEST(Upsample, FactorOneIsIdentity) {
    Rng rng(4);
    const auto x = random_tensor({1, 2, 3, 3}, rng);
    EXPECT_EQ(values(upsample_bilinear(x, 1)), values(x));
}

TEST(Upsample, ConstantStaysConstant) {
    const Tensor<double> x({1, 1, 3, 2}, -1.25);
    for (std::size_t f : {2u, 3u, 4u}) {
        const auto y = upsample_bilinear(x, f);
        EXPECT_EQ(y.shape(), (Shape{1, 1, 3 * f, 2 * f}));
        for (double v : y.data()) EXPECT_NEAR(v, -1.25, 1e-15);
    }
}

TEST(Upsample, MatchesPerPixelFormula) {
    const Tensor<double> x({1, 1, 2, 2}, std::vector<double>{0, 1, 2, 3});
    const auto y = upsample_bilinear(x, 2);
    // half-pixel centres: source coordinate (o + 0.5)/2 - 0.5, clamped to [0, 1]
    auto src = [](std::size_t o) { return std::clamp((static_cast<double>(o) + 0.5) / 2.0 - 0.5, 0.0, 1.0); };
    for (std::size_t oy = 0; oy < 4; ++oy)
        for (std::size_t ox = 0; ox < 4; ++ox) {
            const double sy = src(oy), sx = src(ox);
            const double expected = (1 - sy) * (1 - sx) * 0 + (1 - sy) * sx * 1 + sy * (1 - sx) * 2 + sy * sx * 3;
            EXPECT_NEAR(y[oy * 4 + ox], expected, 1e-15) << oy << "," << ox;
        }
    EXPECT_DOUBLE_EQ(y[0], 0.0);
    EXPECT_DOUBLE_EQ(y[5], 0.75);  // (1,1): sy = sx = 0.25
}

TEST(Upsample, FactorZeroRejected) { EXPECT_THROW(upsample_bilinear(Tensor<double>({1, 1, 2, 2}), 0), std::invalid_argument); }

TEST(GlobalAvgPool, ConstantMap) {
    const auto y = global_avg_pool(Tensor<double>({2, 3, 4, 5}, 0.75));
    EXPECT_EQ(y.shape(), (Shape{2, 3, 1, 1}));
    for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 0.75);
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

TEST(LayerNorm, ConstantRowGivesZeros) {
    const auto y = layernorm(Tensor<double>({1, 4}, 2.0), Tensor<double>::ones({4}), Tensor<double>::zeros({4}));
    for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, HandNormalized) {
    const auto y = layernorm(Tensor<double>({1, 2}, std::vector<double>{1, 3}), Tensor<double>::ones({2}),
                             Tensor<double>::zeros({2}), 1e-12);
    EXPECT_NEAR(y[0], -1, 1e-9);
    EXPECT_NEAR(y[1], 1, 1e-9);
}

TEST(LayerNorm, RowsHaveZeroMeanUnitVariance) {
    Rng rng(8);
    const auto x = random_tensor({5, 7}, rng, -3, 3);
    const auto y = layernorm(x, Tensor<double>::ones({7}), Tensor<double>::zeros({7}), 1e-12);
    for (std::size_t r = 0; r < 5; ++r) {
        double m = 0, v = 0;
        for (std::size_t i = 0; i < 7; ++i) m += y[r * 7 + i] / 7;
        for (std::size_t i = 0; i < 7; ++i) v += (y[r * 7 + i] - m) * (y[r * 7 + i] - m) / 7;
        EXPECT_NEAR(m, 0, 1e-12);
        EXPECT_NEAR(v, 1, 1e-9);
    }
}

TEST(BatchNorm, ConstantChannelTrainModeGivesZeros) {
    BatchNormStats<double> stats(1);
    const auto y = batchnorm2d(Tensor<double>({2, 1, 2, 2}, 4.0), Tensor<double>::ones({1}), Tensor<double>::zeros({1}),
                               stats, Mode::train);
    for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(BatchNorm, PopulationVarianceConvention) {
    BatchNormStats<double> stats(1);
    const auto y = batchnorm2d(Tensor<double>({2, 1, 1, 1}, std::vector<double>{1, 3}), Tensor<double>::ones({1}),
                               Tensor<double>::zeros({1}), stats, Mode::train);
    // (x - 2) / sqrt(1 + eps)
    EXPECT_NEAR(y[0], -1, 1e-5);
    EXPECT_NEAR(y[1], 1, 1e-5);
    EXPECT_NEAR(y[0], -1 / std::sqrt(1 + 1e-5), 1e-15);
}

TEST(BatchNorm, RunningStatsMomentumUpdate) {
    BatchNormStats<double> stats(1);
    batchnorm2d(Tensor<double>({2, 1, 1, 1}, std::vector<double>{1, 3}), Tensor<double>::ones({1}),
                Tensor<double>::zeros({1}), stats, Mode::train);
    EXPECT_NEAR(stats.mean[0], 0.1 * 2, 1e-15);
    // unbiased batch variance of {1, 3} is 2
    EXPECT_NEAR(stats.var[0], 0.9 * 1 + 0.1 * 2, 1e-15);
}

TEST(BatchNorm, EvalWithInitialStatsIsAffineOnly) {
    BatchNormStats<double> stats(2);
    Rng rng(5);
    const auto x = random_tensor({1, 2, 2, 2}, rng);
    const Tensor<double> g({2}, std::vector<double>{2, -1}), b({2}, std::vector<double>{0.5, 0.25});
    const auto y = batchnorm2d(x, g, b, stats, Mode::eval);
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t i = 0; i < 4; ++i)
            EXPECT_NEAR(y[c * 4 + i], g[c] * x[c * 4 + i] / std::sqrt(1 + 1e-5) + b[c], 1e-12);
}

TEST(BatchNorm, TrainModeNeedsTwoValuesPerChannel) {
    BatchNormStats<double> stats(1);
    EXPECT_THROW(batchnorm2d(Tensor<double>({1, 1, 1, 1}), Tensor<double>::ones({1}), Tensor<double>::zeros({1}), stats,
                             Mode::train),
                 std::invalid_argument);
}

// ---------------------------------------------------------------------------
// softmax, activations, concat, dropout
// ---------------------------------------------------------------------------

TEST(Softmax, ConstantRowIsUniform) {
    const auto y = softmax(Tensor<double>({1, 4}, 7.0));
    for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Softmax, HandEvaluated) {
    const auto y = softmax(Tensor<double>({2}, std::vector<double>{0, std::log(3.0)}));
    EXPECT_NEAR(y[0], 0.25, 1e-15);
    EXPECT_NEAR(y[1], 0.75, 1e-15);
}

TEST(Softmax, ShiftInvarianceAndRowSums) {
    Rng rng(9);
    const auto x = random_tensor({6, 5}, rng, -20, 20);
    Tensor<double> shifted = x.detach();
    for (auto& v : shifted.data()) v += 123.0;
    const auto a = softmax(x), b = softmax(shifted);
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
    for (std::size_t r = 0; r < 6; ++r) {
        double s = 0;
        for (std::size_t i = 0; i < 5; ++i) s += a[r * 5 + i];
        EXPECT_NEAR(s, 1, 1e-6);
    }
    // float rows too
    Rng rng2(10);
    const auto xf = random_tensor<float>({4, 9}, rng2, -50, 50);
    const auto yf = softmax(xf);
    for (std::size_t r = 0; r < 4; ++r) {
        double s = 0;
        for (std::size_t i = 0; i < 9; ++i) s += yf[r * 9 + i];
        EXPECT_NEAR(s, 1, 1e-6);
    }
}

TEST(Activations, PointValues) {
    const auto r = relu(Tensor<double>({2}, std::vector<double>{-1, 2}));
    EXPECT_EQ(r[0], 0);
    EXPECT_EQ(r[1], 2);
    EXPECT_EQ(sigmoid(Tensor<double>::scalar(0.0)).item(), 0.5);
    // gelu(x) = x * Phi(x); Phi(1) = 0.841344746068543 (normal table)
    EXPECT_NEAR(gelu(Tensor<double>::scalar(1.0)).item(), 0.841344746068543, 1e-12);
    EXPECT_NEAR(gelu(Tensor<double>::scalar(-1.0)).item(), -(1 - 0.841344746068543), 1e-12);
}

TEST(Activations, ReluGradientAtZeroIsZero) {
    Tensor<double> x({1}, 0.0, true);
    sum(relu(x)).backward();
    EXPECT_EQ(x.grad()[0], 0);
}

TEST(Activations, SigmoidStableAtExtremes) {
    const auto y = sigmoid(Tensor<float>({2}, std::vector<float>{-200, 200}));
    EXPECT_EQ(y[0], 0.0f);
    EXPECT_EQ(y[1], 1.0f);
}

TEST(Concat, ChannelAxis) {
    const auto y = concat<double>({Tensor<double>({2, 3, 4, 4}, 1.0), Tensor<double>({2, 5, 4, 4}, 2.0)}, 1);
    EXPECT_EQ(y.shape(), (Shape{2, 8, 4, 4}));
    EXPECT_EQ(y[0], 1.0);
    EXPECT_EQ(y[3 * 16], 2.0);
    EXPECT_EQ(y[8 * 16], 1.0);  // second batch item starts with part one
}

TEST(Concat, OffAxisMismatchRejected) {
    EXPECT_THROW(concat<double>({Tensor<double>({2, 3, 4, 4}), Tensor<double>({2, 3, 4, 5})}, 1), ShapeError);
    EXPECT_THROW(concat<double>({Tensor<double>({2, 3}), Tensor<double>({2, 3})}, 2), ShapeError);
}

TEST(Dropout, EvalModeIsExactIdentity) {
    Rng rng(1), data_rng(2);
    const auto x = random_tensor({3, 4}, data_rng);
    EXPECT_EQ(values(dropout(x, 0.5, Mode::eval, rng)), values(x));
    EXPECT_EQ(values(dropout(x, 0.0, Mode::train, rng)), values(x));
}

TEST(Dropout, TrainModeExpectation) {
    Rng rng(77);
    const Tensor<double> x({10000}, 2.0);
    const auto y = dropout(x, 0.2, Mode::train, rng);
    double mean = 0;
    std::size_t zeros = 0;
    for (double v : y.data()) {
        mean += v / 10000;
        zeros += v == 0;
        if (v != 0) {
            EXPECT_DOUBLE_EQ(v, 2.0 / 0.8);
        }
    }
    EXPECT_NEAR(mean, 2.0, 0.02 * 2.0);
    EXPECT_NEAR(static_cast<double>(zeros) / 10000, 0.2, 0.02);
}

TEST(Dropout, InvalidProbabilityRejected) {
    Rng rng(0);
    EXPECT_THROW(dropout(Tensor<double>({2}), 1.0, Mode::train, rng), std::invalid_argument);
    EXPECT_THROW(dropout(Tensor<double>({2}), -0.1, Mode::train, rng), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Shape algebra
// ---------------------------------------------------------------------------

TEST(ShapeAlgebra, NoSilentBroadcasting) {
    Tensor<double> a({2, 3}), b({3}), c({3, 2});
    EXPECT_THROW(add(a, b), ShapeError);
    EXPECT_THROW(mul(a, c), ShapeError);
    EXPECT_THROW(sub(a, c), ShapeError);
    EXPECT_THROW(reshape(a, {4}), ShapeError);
    EXPECT_THROW(permute(a, {0, 0}), ShapeError);
    EXPECT_THROW(add_trailing(a, Tensor<double>({2})), ShapeError);
    EXPECT_THROW(layernorm(a, Tensor<double>::ones({2}), Tensor<double>::zeros({2})), ShapeError);
}

TEST(ShapeAlgebra, RandomShapesFollowRules) {
    Rng rng(123);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t N = 1 + rng.uniform_int(2), C = 1 + rng.uniform_int(3);
        const std::size_t H = 2 * (1 + rng.uniform_int(3)), W = 2 * (1 + rng.uniform_int(3));
        const Tensor<double> x({N, C, H, W});
        EXPECT_EQ(maxpool2d(x).shape(), (Shape{N, C, H / 2, W / 2}));
        EXPECT_EQ(upsample_bilinear(x, 2).shape(), (Shape{N, C, 2 * H, 2 * W}));
        EXPECT_EQ(global_avg_pool(x).shape(), (Shape{N, C, 1, 1}));
        EXPECT_EQ(softmax(x).shape(), x.shape());
        EXPECT_EQ(permute(x, {0, 2, 3, 1}).shape(), (Shape{N, H, W, C}));
        const std::size_t O = 1 + rng.uniform_int(3);
        EXPECT_EQ(conv2d(x, Tensor<double>({O, C, 3, 3}), Tensor<double>()).shape(), (Shape{N, O, H, W}));
    }
}
