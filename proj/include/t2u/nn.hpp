#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "t2u/ops.hpp"
#include "t2u/rng.hpp"
#include "t2u/tensor.hpp"

namespace t2u {

template <class T>
struct NamedTensor {
    std::string name;
    Tensor<T> tensor;
};

/// Flat, ordered listing of a module tree. Parameters are learnable; buffers
/// (batch-norm running stats) are state that is checkpointed but not trained.
template <class T>
struct Registry {
    std::vector<NamedTensor<T>> params;
    std::vector<NamedTensor<T>> buffers;

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& p : params) n += p.tensor.numel();
        return n;
    }
};

template <class T>
std::size_t count_parameters(const T& module) {
    Registry<typename T::value_type> reg;
    module.collect("", reg);
    return reg.param_count();
}

namespace init {

template <class T>
Tensor<T> kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    Tensor<T> t(std::move(shape), T(0), true);
    for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
    return t;
}

template <class T>
Tensor<T> truncated_normal(Shape shape, double stddev, Rng& rng) {
    Tensor<T> t(std::move(shape), T(0), true);
    for (auto& v : t.data()) v = static_cast<T>(rng.truncated_normal(stddev));
    return t;
}

}  // namespace init

inline std::string join_name(const std::string& prefix, const std::string& name) {
    return prefix.empty() ? name : prefix + "." + name;
}

// ---------------------------------------------------------------------------

template <class T>
class Conv2d {
public:
    using value_type = T;

    Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, Rng& rng, Conv2dOptions opt = {},
           bool with_bias = true)
        : opt_(opt),
          weight(init::kaiming_uniform<T>({out_channels, in_channels, kernel, kernel}, in_channels * kernel * kernel, rng)) {
        if (with_bias) bias = Tensor<T>::zeros({out_channels}, true);
    }

    Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, weight, bias, opt_); }

    void collect(const std::string& prefix, Registry<T>& reg) const {
        reg.params.push_back({join_name(prefix, "weight"), weight});
        if (bias.defined()) reg.params.push_back({join_name(prefix, "bias"), bias});
    }

    const Conv2dOptions& options() const { return opt_; }

private:
    Conv2dOptions opt_;

public:
    Tensor<T> weight;
    Tensor<T> bias;  // undefined when the conv feeds a batch norm
};

template <class T>
class BatchNorm2d {
public:
    using value_type = T;

    explicit BatchNorm2d(std::size_t channels)
        : gamma(Tensor<T>::ones({channels}, true)), beta(Tensor<T>::zeros({channels}, true)), stats(channels) {}

    Tensor<T> forward(const Tensor<T>& x, Mode mode) { return batchnorm2d(x, gamma, beta, stats, mode); }

    void collect(const std::string& prefix, Registry<T>& reg) const {
        reg.params.push_back({join_name(prefix, "gamma"), gamma});
        reg.params.push_back({join_name(prefix, "beta"), beta});
        reg.buffers.push_back({join_name(prefix, "running_mean"), stats.mean});
        reg.buffers.push_back({join_name(prefix, "running_var"), stats.var});
    }

    Tensor<T> gamma;
    Tensor<T> beta;
    BatchNormStats<T> stats;
};

struct ConvBlockParams {
    std::size_t in_channels = 1;
    std::size_t out_channels = 1;
    std::size_t kernel = 3;
    std::size_t dilation = 1;
    bool use_bn = true;
    std::size_t stride = 1;
    bool relu = true;

    void validate() const {
        if (in_channels == 0 || out_channels == 0) throw std::invalid_argument("conv block: channels must be positive");
        if (kernel % 2 == 0) throw std::invalid_argument("conv block: kernel must be odd");
        if (dilation < 1 || stride < 1) throw std::invalid_argument("conv block: dilation and stride must be >= 1");
    }
};

/// conv -> (BN) -> (ReLU), same padding. The conv carries a bias only when no
/// batch norm follows it.
template <class T>
class ConvBlock {
public:
    using value_type = T;

    ConvBlock(const ConvBlockParams& p, Rng& rng)
        : params_((p.validate(), p)),
          conv(p.in_channels, p.out_channels, p.kernel, rng, {p.stride, p.dilation, Padding::same}, !p.use_bn) {
        if (p.use_bn) bn.emplace(p.out_channels);
    }

    Tensor<T> forward(const Tensor<T>& x, Mode mode) {
        Tensor<T> y = conv.forward(x);
        if (bn) y = bn->forward(y, mode);
        return params_.relu ? relu(y) : y;
    }

    void collect(const std::string& prefix, Registry<T>& reg) const {
        conv.collect(join_name(prefix, "conv"), reg);
        if (bn) bn->collect(join_name(prefix, "bn"), reg);
    }

    const ConvBlockParams& params() const { return params_; }

private:
    ConvBlockParams params_;

public:
    Conv2d<T> conv;
    std::optional<BatchNorm2d<T>> bn;
};

// ---------------------------------------------------------------------------
// CNN encoder (desk-scale stand-in for the ResNet backbone)
// ---------------------------------------------------------------------------

/// relu(body(x) + proj(x)); body = 3x3/2 conv block -> 3x3 conv+BN,
/// proj = 1x1/2 conv. Halves the spatial dims.
template <class T>
class ResidualStage {
public:
    using value_type = T;

    ResidualStage(std::size_t in_channels, std::size_t out_channels, Rng& rng)
        : first({in_channels, out_channels, 3, 1, true, 2, true}, rng),
          second({out_channels, out_channels, 3, 1, true, 1, false}, rng),
          proj(in_channels, out_channels, 1, rng, {2, 1, Padding::same}, true) {}

    Tensor<T> forward(const Tensor<T>& x, Mode mode) {
        return relu(add(second.forward(first.forward(x, mode), mode), proj.forward(x)));
    }

    void collect(const std::string& prefix, Registry<T>& reg) const {
        first.collect(join_name(prefix, "first"), reg);
        second.collect(join_name(prefix, "second"), reg);
        proj.collect(join_name(prefix, "proj"), reg);
    }

    ConvBlock<T> first;
    ConvBlock<T> second;
    Conv2d<T> proj;
};

template <class T>
struct EncoderOutput {
    Tensor<T> features;            // [N, C3, H/8, W/8]
    std::array<Tensor<T>, 2> skips;  // [N, C1, H/2, W/2], [N, C2, H/4, W/4]
};

template <class T>
class CnnEncoder {
public:
    using value_type = T;

    CnnEncoder(std::size_t in_channels, const std::array<std::size_t, 3>& widths, Rng& rng)
        : stages{ResidualStage<T>(in_channels, widths[0], rng), ResidualStage<T>(widths[0], widths[1], rng),
                 ResidualStage<T>(widths[1], widths[2], rng)} {}

    EncoderOutput<T> forward(const Tensor<T>& x, Mode mode) {
        if (x.ndim() != 4 || x.dim(2) % 8 || x.dim(3) % 8) {
            throw ShapeError("cnn encoder: spatial dims must be divisible by 8, got " + shape_str(x.shape()));
        }
        EncoderOutput<T> out;
        out.skips[0] = stages[0].forward(x, mode);
        out.skips[1] = stages[1].forward(out.skips[0], mode);
        out.features = stages[2].forward(out.skips[1], mode);
        return out;
    }

    void collect(const std::string& prefix, Registry<T>& reg) const {
        for (std::size_t i = 0; i < stages.size(); ++i) stages[i].collect(join_name(prefix, "stage" + std::to_string(i)), reg);
    }

    std::array<ResidualStage<T>, 3> stages;
};

// ---------------------------------------------------------------------------
// Transformer pieces
// ---------------------------------------------------------------------------

template <class T>
class Linear {
public:
    using value_type = T;

    Linear(std::size_t in_features, std::size_t out_features, Rng& rng)
        : weight(init::truncated_normal<T>({in_features, out_features}, 0.02, rng)),
          bias(Tensor<T>::zeros({out_features}, true)) {}

    Tensor<T> forward(const Tensor<T>& x) const { return add_trailing(matmul(x, weight), bias); }

    void collect(const std::string& prefix, Registry<T>& reg) const {
        reg.params.push_back({join_name(prefix, "weight"), weight});
        reg.params.push_back({join_name(prefix, "bias"), bias});
    }

    Tensor<T> weight;  // [in, out]
    Tensor<T> bias;
};

template <class T>
class LayerNorm {
public:
    using value_type = T;

    explicit LayerNorm(std::size_t dim) : gamma(Tensor<T>::ones({dim}, true)), beta(Tensor<T>::zeros({dim}, true)) {}

    Tensor<T> forward(const Tensor<T>& x) const { return layernorm(x, gamma, beta, T(1e-5)); }

    void collect(const std::string& prefix, Registry<T>& reg) const {
        reg.params.push_back({join_name(prefix, "gamma"), gamma});
        reg.params.push_back({join_name(prefix, "beta"), beta});
    }

    Tensor<T> gamma;
    Tensor<T> beta;
};

struct TransformerBlockParams {
    std::size_t embed_dim = 32;
    std::size_t heads = 4;
    double mlp_ratio = 2.0;
    double dropout_p = 0.0;

    std::size_t head_dim() const { return embed_dim / heads; }
    std::size_t hidden_dim() const {
        return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(embed_dim) * mlp_ratio)));
    }

    void validate() const {
        if (embed_dim == 0 || heads == 0) throw std::invalid_argument("transformer: embed_dim and heads must be positive");
        if (embed_dim % heads) {
            throw std::invalid_argument("transformer: embed_dim " + std::to_string(embed_dim) + " not divisible by heads " +
                                        std::to_string(heads));
        }
        if (!(mlp_ratio > 0)) throw std::invalid_argument("transformer: mlp_ratio must be positive");
        if (!(dropout_p >= 0 && dropout_p < 1)) throw std::invalid_argument("transformer: dropout must be in [0, 1)");
    }
};

/// h parallel softmax(Q K^T / sqrt(D/h)) V heads, concatenated and projected.
template <class T>
class MultiHeadSelfAttention {
public:
    using value_type = T;

    MultiHeadSelfAttention(const TransformerBlockParams& p, Rng& rng)
        : params_((p.validate(), p)),
          query(p.embed_dim, p.embed_dim, rng),
          key(p.embed_dim, p.embed_dim, rng),
          value(p.embed_dim, p.embed_dim, rng),
          proj(p.embed_dim, p.embed_dim, rng) {}

    /// tokens: [N, T, D]. If `attention` is non-null it receives the
    /// [N, h, T, T] attention weights.
    Tensor<T> forward(const Tensor<T>& tokens, Mode mode, Rng& rng, Tensor<T>* attention = nullptr) {
        if (tokens.ndim() != 3 || tokens.dim(2) != params_.embed_dim) {
            throw ShapeError("mhsa: expected [N, T, " + std::to_string(params_.embed_dim) + "], got " +
                             shape_str(tokens.shape()));
        }
        const std::size_t N = tokens.dim(0), Tn = tokens.dim(1), H = params_.heads, dh = params_.head_dim();
        auto split_heads = [&](const Tensor<T>& t) { return permute(reshape(t, {N, Tn, H, dh}), {0, 2, 1, 3}); };
        const Tensor<T> q = split_heads(query.forward(tokens));
        const Tensor<T> k = split_heads(key.forward(tokens));
        const Tensor<T> v = split_heads(value.forward(tokens));
        const Tensor<T> scores = scale(matmul(q, transpose_last2(k)), T(1) / std::sqrt(static_cast<T>(dh)));
        const Tensor<T> weights = softmax(scores);
        if (attention) *attention = weights;
        const Tensor<T> context = reshape(permute(matmul(weights, v), {0, 2, 1, 3}), {N, Tn, params_.embed_dim});
        return dropout(proj.forward(context), params_.dropout_p, mode, rng);
    }

    void collect(const std::string& prefix, Registry<T>& reg) const {
        query.collect(join_name(prefix, "query"), reg);
        key.collect(join_name(prefix, "key"), reg);
        value.collect(join_name(prefix, "value"), reg);
        proj.collect(join_name(prefix, "proj"), reg);
    }

private:
    TransformerBlockParams params_;

public:
    Linear<T> query, key, value, proj;
};

template <class T>
class Mlp {
public:
    using value_type = T;

    Mlp(const TransformerBlockParams& p, Rng& rng)
        : dropout_p_(p.dropout_p), fc1(p.embed_dim, p.hidden_dim(), rng), fc2(p.hidden_dim(), p.embed_dim, rng) {}

    Tensor<T> forward(const Tensor<T>& x, Mode mode, Rng& rng) {
        Tensor<T> h = dropout(gelu(fc1.forward(x)), dropout_p_, mode, rng);
        return dropout(fc2.forward(h), dropout_p_, mode, rng);
    }

    void collect(const std::string& prefix, Registry<T>& reg) const {
        fc1.collect(join_name(prefix, "fc1"), reg);
        fc2.collect(join_name(prefix, "fc2"), reg);
    }

private:
    double dropout_p_;

public:
    Linear<T> fc1, fc2;
};

/// Pre-norm encoder block: x + MHSA(LN(x)), then x + MLP(LN(x)).
template <class T>
class TransformerBlock {
public:
    using value_type = T;

    TransformerBlock(const TransformerBlockParams& p, Rng& rng)
        : norm1(p.embed_dim), attn(p, rng), norm2(p.embed_dim), mlp(p, rng) {}

    Tensor<T> forward(const Tensor<T>& x, Mode mode, Rng& rng) {
        Tensor<T> h = add(x, attn.forward(norm1.forward(x), mode, rng));
        return add(h, mlp.forward(norm2.forward(h), mode, rng));
    }

    void collect(const std::string& prefix, Registry<T>& reg) const {
        norm1.collect(join_name(prefix, "norm1"), reg);
        attn.collect(join_name(prefix, "attn"), reg);
        norm2.collect(join_name(prefix, "norm2"), reg);
        mlp.collect(join_name(prefix, "mlp"), reg);
    }

    LayerNorm<T> norm1;
    MultiHeadSelfAttention<T> attn;
    LayerNorm<T> norm2;
    Mlp<T> mlp;
};

/// Non-overlapping patch projection (conv with kernel = stride = patch) plus
/// a learned position embedding per token.
template <class T>
class PatchEmbed {
public:
    using value_type = T;

    PatchEmbed(std::size_t in_channels, std::size_t grid_h, std::size_t grid_w, std::size_t patch, std::size_t dim, Rng& rng)
        : patch_(patch),
          grid_h_(grid_h / patch),
          grid_w_(grid_w / patch),
          proj(in_channels, dim, patch, rng, {patch, 1, Padding::valid}, true) {
        if (patch == 0 || grid_h % patch || grid_w % patch) {
            throw std::invalid_argument("patch embed: feature map " + std::to_string(grid_h) + "x" +
                                        std::to_string(grid_w) + " not divisible by patch " + std::to_string(patch));
        }
        position = Tensor<T>::zeros({grid_h_ * grid_w_, dim}, true);
    }

    /// [N, C, Hf, Wf] -> [N, (Hf/p)(Wf/p), D]
    Tensor<T> forward(const Tensor<T>& x) const {
        if (x.ndim() != 4 || x.dim(2) != grid_h_ * patch_ || x.dim(3) != grid_w_ * patch_) {
            throw ShapeError("patch embed: expected spatial " + std::to_string(grid_h_ * patch_) + "x" +
                             std::to_string(grid_w_ * patch_) + ", got " + shape_str(x.shape()));
        }
        const Tensor<T> y = proj.forward(x);  // [N, D, h, w]
        const std::size_t N = y.dim(0), D = y.dim(1);
        const Tensor<T> tokens = permute(reshape(y, {N, D, grid_h_ * grid_w_}), {0, 2, 1});
        return add_trailing(tokens, position);
    }

    void collect(const std::string& prefix, Registry<T>& reg) const {
        proj.collect(join_name(prefix, "proj"), reg);
        reg.params.push_back({join_name(prefix, "position"), position});
    }

    std::size_t grid_h() const { return grid_h_; }
    std::size_t grid_w() const { return grid_w_; }
    std::size_t token_count() const { return grid_h_ * grid_w_; }

private:
    std::size_t patch_, grid_h_, grid_w_;

public:
    Conv2d<T> proj;
    Tensor<T> position;  // [tokens, D]
};

// ---------------------------------------------------------------------------
// Waterfall atrous spatial pooling
// ---------------------------------------------------------------------------

struct WaspConfig {
    std::size_t in_channels = 32;
    std::size_t branch_channels = 32;
    std::vector<std::size_t> dilation_rates{1, 2, 4, 8};
    bool dense_skip = true;

    void validate() const {
        if (in_channels == 0 || branch_channels == 0) throw std::invalid_argument("wasp: channels must be positive");
        if (dilation_rates.size() != 4) {
            throw std::invalid_argument("wasp: exactly 4 dilation rates required, got " +
                                        std::to_string(dilation_rates.size()));
        }
        for (std::size_t i = 0; i < 4; ++i) {
            if (dilation_rates[i] < 1) throw std::invalid_argument("wasp: dilation rates must be >= 1");
            if (i && dilation_rates[i] <= dilation_rates[i - 1]) {
                throw std::invalid_argument("wasp: dilation rates must be strictly increasing");
            }
        }
    }
};

/// Four cascaded atrous units plus a global-average-pooling branch, summed.
///
/// Unit i: d = atrous3x3(in_i, rate_i); a = 1x1(.); u = 1x1(.). The next unit
/// consumes d (in_{i+1} = d). Without dense skips the 1x1 convs see d and a.
/// With dense skips (WASP-KC) they see concat(in_i, d) and concat(in_i, d, a).
template <class T>
class Wasp {
public:
    using value_type = T;

    struct Unit {
        ConvBlock<T> atrous;
        ConvBlock<T> reduce;
        ConvBlock<T> expand;
    };

    Wasp(const WaspConfig& cfg, Rng& rng) : cfg_((cfg.validate(), cfg)), pool_proj(cfg.in_channels, cfg.branch_channels, 1, rng) {
        const std::size_t B = cfg.branch_channels;
        for (std::size_t i = 0; i < 4; ++i) {
            const std::size_t in_i = i == 0 ? cfg.in_channels : B;
            const std::size_t reduce_in = cfg.dense_skip ? in_i + B : B;
            const std::size_t expand_in = cfg.dense_skip ? in_i + 2 * B : B;
            units.push_back(Unit{ConvBlock<T>({in_i, B, 3, cfg.dilation_rates[i]}, rng),
                                 ConvBlock<T>({reduce_in, B, 1, 1}, rng), ConvBlock<T>({expand_in, B, 1, 1}, rng)});
        }
    }

    Tensor<T> forward(const Tensor<T>& x, Mode mode) {
        if (x.ndim() != 4 || x.dim(1) != cfg_.in_channels) {
            throw ShapeError("wasp: expected " + std::to_string(cfg_.in_channels) + " input channels, got " +
                             shape_str(x.shape()));
        }
        Tensor<T> input = x;
        Tensor<T> total;
        for (auto& unit : units) {
            const Tensor<T> d = unit.atrous.forward(input, mode);
            const Tensor<T> a = unit.reduce.forward(cfg_.dense_skip ? concat<T>({input, d}, 1) : d, mode);
            const Tensor<T> u = unit.expand.forward(cfg_.dense_skip ? concat<T>({input, d, a}, 1) : a, mode);
            total = total.defined() ? add(total, u) : u;
            input = d;
        }
        const Tensor<T> pooled = expand_spatial(pool_proj.forward(global_avg_pool(x)), x.dim(2), x.dim(3));
        return add(total, pooled);
    }

    void collect(const std::string& prefix, Registry<T>& reg) const {
        for (std::size_t i = 0; i < units.size(); ++i) {
            const std::string p = join_name(prefix, "unit" + std::to_string(i));
            units[i].atrous.collect(join_name(p, "atrous"), reg);
            units[i].reduce.collect(join_name(p, "reduce"), reg);
            units[i].expand.collect(join_name(p, "expand"), reg);
        }
        pool_proj.collect(join_name(prefix, "pool_proj"), reg);
    }

    const WaspConfig& config() const { return cfg_; }

private:
    WaspConfig cfg_;

public:
    std::vector<Unit> units;
    Conv2d<T> pool_proj;
};

}  // namespace t2u
