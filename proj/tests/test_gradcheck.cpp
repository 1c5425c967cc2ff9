#include <gtest/gtest.h>

#include "support.hpp"

using namespace t2u;

namespace {

std::vector<std::string> registry_names() {
    std::vector<std::string> names;
    for (const auto& [name, fn] : gradcheck_registry()) names.push_back(name);
    return names;
}

// y = x^3 with a deliberately wrong backward (2x^2 instead of 3x^2).
Tensor<double> wrong_cube(const Tensor<double>& x) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * x[i] * x[i];
    return Tensor<double>::make_result(x.shape(), std::move(out), {x}, "wrong_cube", [](auto& self) {
        auto& p = *self.parents[0];
        auto& g = p.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * 2 * p.data[i] * p.data[i];
    });
}

}  // namespace

class RegistryCheck : public ::testing::TestWithParam<std::string> {};

TEST_P(RegistryCheck, AnalyticMatchesFiniteDifferences) {
    const auto r = gradcheck_registry().at(GetParam())(0, GradCheckOptions{});
    EXPECT_TRUE(r.passed) << r.name << " max rel error " << r.max_rel_error;
    EXPECT_GT(r.checked, 0u);
    EXPECT_LT(r.max_rel_error, 1e-4);
    // kinks may force skips, but never the bulk of the elements
    EXPECT_LE(r.skipped * 10, r.checked + r.skipped);
}

INSTANTIATE_TEST_SUITE_P(AllOps, RegistryCheck, ::testing::ValuesIn(registry_names()),
                         [](const auto& info) { return info.param; });

TEST(RegistryContents, CoversEveryLayerFamily) {
    const auto& reg = gradcheck_registry();
    for (const char* name : {"matmul", "conv2d", "maxpool2d", "upsample_bilinear", "layernorm", "batchnorm2d", "softmax",
                             "relu", "gelu", "sigmoid", "concat", "bce_loss", "dice_loss", "mhsa", "transformer_block",
                             "wasp", "wasp_kc", "unet_branch", "transunet_branch", "model"})
        EXPECT_TRUE(reg.count(name)) << name;
}

TEST(RegistryContents, OtherSeedsPassForElementaryOps) {
    for (const char* name : {"matmul", "conv2d", "conv2d_strided", "maxpool2d", "softmax", "layernorm", "batchnorm2d",
                             "bce_loss", "dice_loss", "mhsa", "wasp_kc"}) {
        for (std::uint64_t seed : {1u, 2u, 3u}) {
            const auto r = gradcheck_registry().at(name)(seed, GradCheckOptions{});
            EXPECT_TRUE(r.passed) << name << " seed " << seed << " max rel error " << r.max_rel_error;
        }
    }
}

TEST(Harness, CorruptedGradientIsDetected) {
    GradCheckOptions opt;
    opt.corrupt = true;
    for (const char* name : {"add", "matmul", "conv2d", "relu", "softmax", "bce_loss", "wasp_kc"}) {
        const auto r = gradcheck_registry().at(name)(0, opt);
        EXPECT_FALSE(r.passed) << name;
        EXPECT_GE(r.max_rel_error, 1e-4) << name;
    }
}

TEST(Harness, WrongBackwardIsDetected) {
    Rng rng(1);
    auto x = test::random_tensor({5}, rng, 0.5, 1.5, true);
    const auto r = check_gradients("wrong_cube", {x}, [&] { return sum(wrong_cube(x)); });
    EXPECT_FALSE(r.passed);
    // analytic 2x^2 vs true 3x^2: relative error 1/3
    EXPECT_NEAR(r.max_rel_error, 1.0 / 3.0, 1e-6);
}

TEST(Harness, SmoothFunctionPasses) {
    Rng rng(2);
    auto x = test::random_tensor({4}, rng, -1, 1, true);
    auto y = test::random_tensor({4}, rng, -1, 1, true);
    const auto r = check_gradients("smooth", {x, y}, [&] { return sum(mul(sigmoid(x), gelu(y))); });
    EXPECT_TRUE(r.passed) << r.max_rel_error;
    EXPECT_EQ(r.checked, 8u);
    EXPECT_EQ(r.skipped, 0u);
}

TEST(Harness, ProbeOnKinkIsSkippedNotFailed) {
    // relu at exactly 0: every step crosses the kink, so no estimate is usable
    Tensor<double> x({3}, std::vector<double>{0.0, 0.7, -0.4}, true);
    const auto r = check_gradients("relu_kink", {x}, [&] { return sum(relu(x)); });
    EXPECT_EQ(r.skipped, 1u);
    EXPECT_EQ(r.checked, 2u);
    EXPECT_TRUE(r.passed);
}

TEST(Harness, InputsUnchangedAfterProbing) {
    Rng rng(4);
    auto x = test::random_tensor({6}, rng, -1, 1, true);
    const auto before = test::values(x);
    check_gradients("square", {x}, [&] { return sum(mul(x, x)); });
    EXPECT_EQ(test::values(x), before);
}
