#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "t2u/losses.hpp"
#include "t2u/model.hpp"
#include "t2u/nn.hpp"
#include "t2u/ops.hpp"

namespace t2u {

struct GradCheckOptions {
    double step = 1e-4;       // central-difference half width
    double tolerance = 1e-4;  // pass threshold on the max relative error
    double floor = 1e-3;      // relative error is |a - n| / max(|a|, |n|, floor)
    double consistency = 1e-5;  // max relative gap between the estimates at h and h/10
    bool corrupt = false;     // perturb the analytic gradient (harness self-test)
};

struct GradCheckResult {
    std::string name;
    double max_rel_error = 0;
    double max_abs_error = 0;
    std::size_t checked = 0;
    std::size_t reduced_steps = 0;  // step sizes rejected (kink crossed or estimate not converged)
    std::size_t skipped = 0;        // elements with no usable step
    bool passed = false;
};

/// Compares backprop gradients of `loss_fn` w.r.t. every element of `inputs`
/// against central differences in double precision.
///
/// Each element is probed at steps h, h/10, h/100 and h/1000. Piecewise ops
/// record their branch decisions in a kink trace, and a probe whose trace
/// differs from the base point crossed a kink and is discarded. The estimate
/// at the largest step is used once it agrees with the next smaller step;
/// otherwise the search moves down the ladder. Elements with no usable step
/// are skipped and counted.
inline GradCheckResult check_gradients(const std::string& name, std::vector<Tensor<double>> inputs,
                                       const std::function<Tensor<double>()>& loss_fn, const GradCheckOptions& opt = {}) {
    GradCheckResult res;
    res.name = name;
    for (auto& t : inputs) t.zero_grad();
    {
        const Tensor<double> loss = loss_fn();
        loss.backward();
    }
    std::vector<std::vector<double>> analytic;
    for (const auto& t : inputs) {
        analytic.emplace_back(t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                           : std::vector<double>(t.numel(), 0.0));
    }
    if (opt.corrupt && !analytic.empty() && !analytic[0].empty()) analytic[0][0] = analytic[0][0] * 1.01 + 1e-2;

    NoGradGuard no_grad;
    auto evaluate = [&](std::uint64_t& trace_hash) {
        detail::KinkTrace trace;
        KinkTraceScope scope(trace);
        const double v = loss_fn().item();
        trace_hash = trace.hash;
        return v;
    };
    std::uint64_t base_trace = 0;
    evaluate(base_trace);

    // Central difference at step h, or nullopt if either probe left the base piece.
    auto central = [&](std::vector<double>& data, std::size_t i, double h) -> std::optional<double> {
        const double orig = data[i];
        std::uint64_t tp = 0, tm = 0;
        data[i] = orig + h;
        const double fp = evaluate(tp);
        data[i] = orig - h;
        const double fm = evaluate(tm);
        data[i] = orig;
        if (tp != base_trace || tm != base_trace) return std::nullopt;
        return (fp - fm) / (2 * h);
    };
    constexpr int levels = 4;

    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto& data = inputs[k].storage();
        for (std::size_t i = 0; i < data.size(); ++i) {
            std::array<std::optional<double>, levels> est;
            std::array<bool, levels> done{};
            auto at = [&](int l) -> const std::optional<double>& {
                if (!done[l]) {
                    est[l] = central(data, i, opt.step * std::pow(10.0, -l));
                    done[l] = true;
                }
                return est[l];
            };
            std::optional<double> numeric;
            for (int l = 0; l < levels && !numeric; ++l) {
                if (!at(l)) {
                    ++res.reduced_steps;
                    continue;
                }
                const bool last = l + 1 == levels;
                const bool consistent =
                    last || (at(l + 1) && std::abs(*est[l] - *est[l + 1]) <=
                                              opt.consistency * std::max({std::abs(*est[l + 1]), opt.floor}));
                if (consistent) {
                    numeric = est[l];
                } else {
                    ++res.reduced_steps;
                }
            }
            if (!numeric) {
                ++res.skipped;
                continue;
            }
            const double a = analytic[k][i];
            const double abs_err = std::abs(a - *numeric);
            const double rel = abs_err / std::max({std::abs(a), std::abs(*numeric), opt.floor});
            res.max_rel_error = std::max(res.max_rel_error, rel);
            res.max_abs_error = std::max(res.max_abs_error, abs_err);
            ++res.checked;
        }
    }
    res.passed = res.checked > 0 && res.max_rel_error < opt.tolerance;
    return res;
}

// ---------------------------------------------------------------------------
// Registered checks
// ---------------------------------------------------------------------------

namespace gradcheck_detail {

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1, double hi = 1, bool requires_grad = true) {
    Tensor<double> t(std::move(shape), 0.0, requires_grad);
    for (auto& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

// Values in [-1, 1] pushed at least `gap` away from zero.
inline Tensor<double> away_from_zero(Shape shape, Rng& rng, double gap) {
    Tensor<double> t = random_tensor(std::move(shape), rng);
    for (auto& v : t.data())
        if (std::abs(v) < gap) v = v < 0 ? v - gap : v + gap;
    return t;
}

/// sum(out * w) with a fixed random w, so every output element matters.
struct Probe {
    Tensor<double> weights;
    Tensor<double> operator()(const Tensor<double>& out) {
        if (!weights.defined() || weights.shape() != out.shape()) {
            Rng rng(0xC0FFEE);
            weights = random_tensor(out.shape(), rng, -1, 1, false);
        }
        return sum(mul(out, weights));
    }
};

template <class Module>
std::vector<Tensor<double>> with_params(std::vector<Tensor<double>> inputs, const Module& m) {
    Registry<double> reg;
    m.collect("", reg);
    for (auto& p : reg.params) inputs.push_back(p.tensor);
    return inputs;
}

// Moves every weight away from its init so zero-initialized biases and
// position embeddings do not make checks trivially pass.
template <class Module>
void jitter(const Module& m, Rng& rng, double scale = 0.1) {
    Registry<double> reg;
    m.collect("", reg);
    for (auto& p : reg.params)
        for (auto& v : p.tensor.data()) v += rng.uniform(-scale, scale);
}

}  // namespace gradcheck_detail

using GradCheckFn = std::function<GradCheckResult(std::uint64_t seed, const GradCheckOptions&)>;

/// Every differentiable op and composite block, keyed by name.
inline const std::map<std::string, GradCheckFn>& gradcheck_registry() {
    using namespace gradcheck_detail;
    static const std::map<std::string, GradCheckFn> registry = [] {
        std::map<std::string, GradCheckFn> r;
        r["add"] = [](std::uint64_t seed, const GradCheckOptions& o) {
            Rng rng(seed);
            auto a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
            Probe probe;
            return check_gradients("add", {a, b}, [=]() mutable { return probe(add(a, b)); }, o);
        };
        r["sub_mul_scale"] = [](std::uint64_t seed, const GradCheckOptions& o) {
            Rng rng(seed);
            auto a = random_tensor({2, 5}, rng), b = random_tensor({2, 5}, rng);
            Probe probe;
            return check_gradients("sub_mul_scale", {a, b}, [=]() mutable { return probe(scale(mul(sub(a, b), a), 1.5)); }, o);
        };
        r["add_trailing"] = [](std::uint64_t seed, const GradCheckOptions& o) {
            Rng rng(seed);
            auto x = random_tensor({2, 3, 4}, rng), b = random_tensor({3, 4}, rng);
            Probe probe;
            return check_gradients("add_trailing", {x, b}, [=]() mutable { return probe(add_trailing(x, b)); }, o);
        };
        r["matmul"] = [](std::uint64_t seed, const GradCheckOptions& o) {
            Rng rng(seed);
            auto a = random_tensor({2, 3, 4}, rng), b = random_tensor({4, 5}, rng);
            Probe probe;
            return check_gradients("matmul", {a, b}, [=]() mutable { return probe(matmul(a, b)); }, o);
        };
        r["matmul_batched"] = [](std::uint64_t seed, const GradCheckOptions& o) {
            Rng rng(seed);
            auto a = random_tensor({2, 1, 3, 4}, rng), b = random_tensor({1, 3, 4, 2}, rng);
            Probe probe;
            return check_gradients("matmul_batched", {a, b}, [=]() mutable { return probe(matmul(a, b)); }, o);
        };
        r["conv2d"] = [](std::uint64_t seed, const GradCheckOptions& o) {
            Rng rng(seed);
            auto x = random_tensor({1, 2, 6, 6}, rng), w = random_tensor({3, 2, 3, 3}, rng), b = random_tensor({3}, rng);
            Probe probe;
            return check_gradients("conv2d", {x, w, b},
                                   [=]() mutable { return probe(conv2d(x, w, b, {1, 2, Padding::same})); }, o);
        };
        r["conv2d_strided"] = [](std::uint64_t seed, const GradCheckOptions& o) {
            Rng rng(seed);
            auto x = random_tensor({2, 2, 7, 6}, rng), w = random_tensor({2, 2, 3, 3}, rng), b = random_tensor({2}, rng);
            Probe probe;
            return check_gradients("conv2d_strided", {x, w, b},
                                   [=]() mutable { return probe(conv2d(x, w, b, {2, 1, Padding::same})); }, o);
        };
        r["conv2d_valid"] = [](std::uint64_t seed, const GradCheckOptions& o) {
            Rng rng(seed);
            auto x = random_tensor({1, 2, 6, 6}, rng), w = random_tensor({2, 2, 2, 2}, rng), b = random_tensor({2}, rng);
            Probe probe;
            return check_gradients("conv2d_valid", {x, w, b},
                                   [=]() mutable { return probe(conv2d(x, w, b, {2, 1, Padding::valid})); }, o);
        };
        r["maxpool2d"] = [](std::uint64_t seed, const GradCheckOptions& o) {
            Rng rng(seed);
            auto x = random_tensor({1, 2, 4, 4}, rng);
            Probe probe;
            return check_gradients("maxpool2d", {x}, [=]() mutable { return probe(maxpool2d(x)); }, o);
        };
        r["upsample_bilinear"] = [](std::uint64_t seed, const GradCheckOptions& o) {
            Rng rng(seed);
            auto x = random_tensor({1, 2, 3, 3}, rng);
            Probe probe;
            return check_gradients("upsample_bilinear", {x}, [=]() mutable { return probe(upsample_bilinear(x, 2)); }, o);
        };
        r["layernorm"] = [](std::uint64_t seed, const GradCheckOptions& o) {
            Rng rng(seed);
            auto x = random_tensor({2, 4}, rng), g = random_tensor({4}, rng, 0.5, 1.5), b = random_tensor({4}, rng);
            Probe probe;
            return check_gradients("layernorm", {x, g, b}, [=]() mutable { return probe(layernorm(x, g, b, 1e-5)); }, o);
        };
        r["batchnorm2d"] = [](std::uint64_t seed, const GradCheckOptions& o) {
            Rng rng(seed);
            auto x = random_tensor({2, 3, 3, 3}, rng), g = random_tensor({3}, rng, 0.5, 1.5), b = random_tensor({3}, rng);
            Probe probe;
            return check_gradients("batchnorm2d", {x, g, b},
                                   [=]() mutable {
                                       BatchNormStats<double> stats(3);
                                       return probe(batchnorm2d(x, g, b, stats, Mode::train));
                                   },
                                   o);
        };
        r["batchnorm2d_eval"] = [](std::uint64_t seed, const GradCheckOptions& o) {
            Rng rng(seed);
            auto x = random_tensor({2, 3, 2, 2}, rng), g = random_tensor({3}, rng, 0.5, 1.5), b = random_tensor({3}, rng);
            BatchNormStats<double> stats(3);
            for (std::size_t c = 0; c < 3; ++c) stats.mean[c] = rng.uniform(-0.5, 0.5), stats.var[c] = rng.uniform(0.5, 2);
            Probe probe;
            return check_gradients("batchnorm2d_eval", {x, g, b},
                                   [=]() mutable { return probe(batchnorm2d(x, g, b, stats, Mode::eval)); }, o);
        };
        r["softmax"] = [](std::uint64_t seed, const GradCheckOptions& o) {
            Rng rng(seed);
            auto x = random_tensor({3, 5}, rng, -2, 2);
            Probe probe;
            return check_gradients("softmax", {x}, [=]() mutable { return probe(softmax(x)); }, o);
        };
        r["relu"] = [](std::uint64_t seed, const GradCheckOptions& o) {
            Rng rng(seed);
            auto x = away_from_zero({4, 5}, rng, 1e-2);
            Probe probe;
            return check_gradients("relu", {x}, [=]() mutable { return probe(relu(x)); }, o);
        };
        r["gelu"] = [](std::uint64_t seed, const GradCheckOptions& o) {
            Rng rng(seed);
            auto x = random_tensor({10}, rng, -3, 3);
            Probe probe;
            return check_gradients("gelu", {x}, [=]() mutable { return probe(gelu(x)); }, o);
        };
        r["sigmoid"] = [](std::uint64_t seed, const GradCheckOptions& o) {
            Rng rng(seed);
            auto x = random_tensor({10}, rng, -4, 4);
            Probe probe;
            return check_gradients("sigmoid", {x}, [=]() mutable { return probe(sigmoid(x)); }, o);
        };
        r["concat"] = [](std::uint64_t seed, const GradCheckOptions& o) {
            Rng rng(seed);
            auto a = random_tensor({2, 3, 2, 2}, rng), b = random_tensor({2, 1, 2, 2}, rng);
            Probe probe;
            return check_gradients("concat", {a, b}, [=]() mutable { return probe(concat<double>({a, b}, 1)); }, o);
        };
        r["permute_reshape"] = [](std::uint64_t seed, const GradCheckOptions& o) {
            Rng rng(seed);
            auto x = random_tensor({2, 3, 4}, rng);
            Probe probe;
            return check_gradients("permute_reshape", {x},
                                   [=]() mutable { return probe(reshape(permute(x, {2, 0, 1}), {4, 6})); }, o);
        };
        r["global_avg_pool"] = [](std::uint64_t seed, const GradCheckOptions& o) {
            Rng rng(seed);
            auto x = random_tensor({2, 3, 3, 4}, rng);
            Probe probe;
            return check_gradients("global_avg_pool", {x}, [=]() mutable { return probe(global_avg_pool(x)); }, o);
        };
        r["expand_spatial"] = [](std::uint64_t seed, const GradCheckOptions& o) {
            Rng rng(seed);
            auto x = random_tensor({2, 3, 1, 1}, rng);
            Probe probe;
            return check_gradients("expand_spatial", {x}, [=]() mutable { return probe(expand_spatial(x, 3, 2)); }, o);
        };
        r["dropout"] = [](std::uint64_t seed, const GradCheckOptions& o) {
            Rng rng(seed);
            auto x = random_tensor({4, 6}, rng);
            Probe probe;
            return check_gradients("dropout", {x},
                                   [=]() mutable {
                                       Rng mask_rng(seed + 1);
                                       return probe(dropout(x, 0.3, Mode::train, mask_rng));
                                   },
                                   o);
        };
        r["sum_mean"] = [](std::uint64_t seed, const GradCheckOptions& o) {
            Rng rng(seed);
            auto x = random_tensor({3, 3}, rng);
            return check_gradients("sum_mean", {x}, [=]() { return add(sum(mul(x, x)), mean(x)); }, o);
        };
        r["bce_loss"] = [](std::uint64_t seed, const GradCheckOptions& o) {
            Rng rng(seed);
            auto q = random_tensor({2, 8}, rng, 0.05, 0.95);
            Tensor<double> p({2, 8}, 0.0);
            for (auto& v : p.data()) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
            return check_gradients("bce_loss", {q}, [=]() { return bce_loss(q, p, 1e-7); }, o);
        };
        r["dice_loss"] = [](std::uint64_t seed, const GradCheckOptions& o) {
            Rng rng(seed);
            auto q = random_tensor({2, 8}, rng, 0.05, 0.95);
            Tensor<double> p({2, 8}, 0.0);
            for (auto& v : p.data()) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
            return check_gradients("dice_loss", {q}, [=]() { return dice_loss(q, p, 1.0); }, o);
        };
        r["conv_relu_pool"] = [](std::uint64_t seed, const GradCheckOptions& o) {
            Rng rng(seed);
            auto x = random_tensor({1, 2, 4, 4}, rng), w = random_tensor({2, 2, 3, 3}, rng), b = random_tensor({2}, rng);
            return check_gradients("conv_relu_pool", {x, w, b},
                                   [=]() { return sum(maxpool2d(relu(conv2d(x, w, b)))); }, o);
        };
        r["conv_block"] = [](std::uint64_t seed, const GradCheckOptions& o) {
            Rng rng(seed);
            auto block = std::make_shared<ConvBlock<double>>(ConvBlockParams{2, 3, 3, 1, true}, rng);
            jitter(*block, rng);
            auto x = random_tensor({2, 2, 4, 4}, rng);
            Probe probe;
            return check_gradients("conv_block", with_params({x}, *block),
                                   [=]() mutable { return probe(block->forward(x, Mode::train)); }, o);
        };
        r["residual_stage"] = [](std::uint64_t seed, const GradCheckOptions& o) {
            Rng rng(seed);
            auto stage = std::make_shared<ResidualStage<double>>(2, 3, rng);
            jitter(*stage, rng);
            auto x = random_tensor({2, 2, 4, 4}, rng);
            Probe probe;
            return check_gradients("residual_stage", with_params({x}, *stage),
                                   [=]() mutable { return probe(stage->forward(x, Mode::train)); }, o);
        };
        r["patch_embed"] = [](std::uint64_t seed, const GradCheckOptions& o) {
            Rng rng(seed);
            auto embed = std::make_shared<PatchEmbed<double>>(2, 4, 4, 2, 3, rng);
            jitter(*embed, rng);
            auto x = random_tensor({2, 2, 4, 4}, rng);
            Probe probe;
            return check_gradients("patch_embed", with_params({x}, *embed), [=]() mutable { return probe(embed->forward(x)); }, o);
        };
        r["mhsa"] = [](std::uint64_t seed, const GradCheckOptions& o) {
            Rng rng(seed);
            auto attn = std::make_shared<MultiHeadSelfAttention<double>>(TransformerBlockParams{4, 2, 2.0, 0.0}, rng);
            jitter(*attn, rng, 0.5);
            auto x = random_tensor({2, 3, 4}, rng);
            Probe probe;
            return check_gradients("mhsa", with_params({x}, *attn), [=]() mutable {
                Rng r(1);
                return probe(attn->forward(x, Mode::train, r));
            }, o);
        };
        r["transformer_block"] = [](std::uint64_t seed, const GradCheckOptions& o) {
            Rng rng(seed);
            auto block = std::make_shared<TransformerBlock<double>>(TransformerBlockParams{4, 2, 2.0, 0.0}, rng);
            jitter(*block, rng, 0.5);
            auto x = random_tensor({1, 3, 4}, rng);
            Probe probe;
            return check_gradients("transformer_block", with_params({x}, *block), [=]() mutable {
                Rng r(1);
                return probe(block->forward(x, Mode::train, r));
            }, o);
        };
        auto wasp_check = [](bool dense) {
            return [dense](std::uint64_t seed, const GradCheckOptions& o) {
                Rng rng(seed);
                auto wasp = std::make_shared<Wasp<double>>(WaspConfig{2, 2, {1, 2, 4, 8}, dense}, rng);
                jitter(*wasp, rng);
                auto x = random_tensor({1, 2, 8, 8}, rng);
                Probe probe;
                const std::string name = dense ? "wasp_kc" : "wasp";
                return check_gradients(name, with_params({x}, *wasp),
                                       [=]() mutable { return probe(wasp->forward(x, Mode::train)); }, o);
            };
        };
        r["wasp"] = wasp_check(false);
        r["wasp_kc"] = wasp_check(true);
        r["unet_branch"] = [](std::uint64_t seed, const GradCheckOptions& o) {
            Rng rng(seed);
            auto unet = std::make_shared<UnetBranch<double>>(1, std::array<std::size_t, 4>{2, 4, 8, 8}, 2, rng);
            jitter(*unet, rng);
            auto x = random_tensor({1, 1, 16, 16}, rng, 0, 1);
            Probe probe;
            return check_gradients("unet_branch", with_params({x}, *unet),
                                   [=]() mutable { return probe(unet->forward(x, Mode::train)); }, o);
        };
        r["transunet_branch"] = [](std::uint64_t seed, const GradCheckOptions& o) {
            Rng rng(seed);
            auto branch = std::make_shared<TransUnetBranch<double>>(ModelConfig::micro(), rng);
            jitter(*branch, rng);
            auto x = random_tensor({1, 1, 16, 16}, rng, 0, 1);
            Probe probe;
            return check_gradients("transunet_branch", with_params({x}, *branch), [=]() mutable {
                Rng r(1);
                return probe(branch->forward(x, Mode::train, r));
            }, o);
        };
        r["model"] = [](std::uint64_t seed, const GradCheckOptions& o) {
            Rng rng(seed);
            auto model = std::make_shared<Trans2Unet<double>>(ModelConfig::micro(), seed);
            jitter(*model, rng);
            auto x = random_tensor({1, 1, 16, 16}, rng, 0, 1);
            Tensor<double> target({1, 1, 16, 16}, 0.0);
            for (auto& v : target.data()) v = rng.uniform() < 0.3 ? 1.0 : 0.0;
            return check_gradients("model", with_params({x}, *model), [=]() {
                return segmentation_loss(model->forward(x, Mode::train), target, LossConfig{});
            }, o);
        };
        return r;
    }();
    return registry;
}

}  // namespace t2u
