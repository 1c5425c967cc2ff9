#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "t2u/nn.hpp"

namespace t2u {

struct VitConfig {
    std::size_t patch = 1;
    std::size_t dim = 32;
    std::size_t layers = 2;
    std::size_t heads = 4;
    double mlp_ratio = 2.0;
};

/// Architecture hyperparameters. The three ablation variants differ only in
/// `use_unet_branch`, `use_wasp` and `wasp.dense_skip`.
struct ModelConfig {
    std::size_t input_size = 32;
    std::size_t in_channels = 1;
    bool use_unet_branch = true;
    std::array<std::size_t, 4> unet_widths{8, 16, 32, 64};
    std::size_t unet_out_channels = 16;
    std::array<std::size_t, 3> cnn_widths{8, 16, 32};
    bool use_wasp = true;
    WaspConfig wasp{32, 32, {1, 2, 4, 8}, true};  // in_channels is taken from cnn_widths[2]
    VitConfig vit;
    std::array<std::size_t, 3> decoder_widths{32, 16, 8};
    std::size_t transunet_out_channels = 16;
    std::size_t fusion_channels = 16;
    double dropout_p = 0.2;

    static ModelConfig desk() { return {}; }

    /// Smallest useful configuration; used by the full-model gradient check.
    static ModelConfig micro() {
        ModelConfig c;
        c.input_size = 16;
        c.unet_widths = {2, 4, 8, 8};
        c.unet_out_channels = 2;
        c.cnn_widths = {2, 4, 8};
        c.wasp = WaspConfig{8, 4, {1, 2, 4, 8}, true};
        c.vit = VitConfig{1, 8, 1, 2, 2.0};
        c.decoder_widths = {4, 4, 2};
        c.transunet_out_channels = 2;
        c.fusion_channels = 2;
        c.dropout_p = 0.0;
        return c;
    }

    WaspConfig resolved_wasp() const {
        WaspConfig w = wasp;
        w.in_channels = cnn_widths[2];
        return w;
    }

    std::size_t token_channels() const { return use_wasp ? wasp.branch_channels : cnn_widths[2]; }
    std::size_t token_grid() const { return input_size / 8 / vit.patch; }

    TransformerBlockParams transformer_params() const { return {vit.dim, vit.heads, vit.mlp_ratio, dropout_p}; }

    void validate() const {
        auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
        if (input_size == 0 || input_size % 16) fail("input_size must be a positive multiple of 16");
        if (in_channels == 0) fail("in_channels must be positive");
        for (auto w : unet_widths)
            if (!w) fail("unet widths must be positive");
        for (auto w : cnn_widths)
            if (!w) fail("cnn widths must be positive");
        for (auto w : decoder_widths)
            if (!w) fail("decoder widths must be positive");
        if (!unet_out_channels || !transunet_out_channels || !fusion_channels) fail("output channel counts must be positive");
        if (vit.patch == 0 || (input_size / 8) % vit.patch) fail("input_size/8 must be divisible by vit.patch");
        if (!(dropout_p >= 0 && dropout_p < 1)) fail("dropout must be in [0, 1)");
        transformer_params().validate();
        if (use_wasp) resolved_wasp().validate();
    }
};

// ---------------------------------------------------------------------------

/// Classic Unet without its final 1x1 classifier conv: the output is the
/// penultimate feature map.
template <class T>
class UnetBranch {
public:
    using value_type = T;

    struct DoubleConv {
        ConvBlock<T> first;
        ConvBlock<T> second;
        Tensor<T> forward(const Tensor<T>& x, Mode mode) { return second.forward(first.forward(x, mode), mode); }
        void collect(const std::string& prefix, Registry<T>& reg) const {
            first.collect(join_name(prefix, "conv0"), reg);
            second.collect(join_name(prefix, "conv1"), reg);
        }
    };

    UnetBranch(std::size_t in_channels, const std::array<std::size_t, 4>& widths, std::size_t out_channels, Rng& rng) {
        auto dc = [&](std::size_t cin, std::size_t mid, std::size_t cout) {
            return DoubleConv{ConvBlock<T>({cin, mid}, rng), ConvBlock<T>({mid, cout}, rng)};
        };
        down.push_back(dc(in_channels, widths[0], widths[0]));
        down.push_back(dc(widths[0], widths[1], widths[1]));
        down.push_back(dc(widths[1], widths[2], widths[2]));
        bottleneck.push_back(dc(widths[2], widths[3], widths[3]));
        // up-stage k sees the incoming width plus the mirrored encoder width
        up_in_ = {widths[3] + widths[2], widths[2] + widths[1], widths[1] + widths[0]};
        up.push_back(dc(up_in_[0], widths[2], widths[2]));
        up.push_back(dc(up_in_[1], widths[1], widths[1]));
        up.push_back(dc(up_in_[2], widths[0], out_channels));
    }

    Tensor<T> forward(const Tensor<T>& x, Mode mode) {
        if (x.ndim() != 4 || x.dim(2) % 8 || x.dim(3) % 8) {
            throw ShapeError("unet branch: spatial dims must be divisible by 8, got " + shape_str(x.shape()));
        }
        std::array<Tensor<T>, 3> skips;
        Tensor<T> h = x;
        for (std::size_t i = 0; i < 3; ++i) {
            skips[i] = down[i].forward(h, mode);
            h = maxpool2d(skips[i]);
        }
        h = bottleneck[0].forward(h, mode);
        for (std::size_t i = 0; i < 3; ++i) {
            h = concat<T>({upsample_bilinear(h, 2), skips[2 - i]}, 1);
            h = up[i].forward(h, mode);
        }
        return h;
    }

    void collect(const std::string& prefix, Registry<T>& reg) const {
        for (std::size_t i = 0; i < 3; ++i) down[i].collect(join_name(prefix, "down" + std::to_string(i)), reg);
        bottleneck[0].collect(join_name(prefix, "bottleneck"), reg);
        for (std::size_t i = 0; i < 3; ++i) up[i].collect(join_name(prefix, "up" + std::to_string(i)), reg);
    }

    const std::array<std::size_t, 3>& up_concat_channels() const { return up_in_; }

    std::vector<DoubleConv> down, bottleneck, up;

private:
    std::array<std::size_t, 3> up_in_{};
};

/// One decoder up-step of the TransUnet branch.
struct DecoderStep {
    std::size_t resolution_divisor;  // output resolution = input_size / divisor
    int skip_stage;                  // -1 = none, 0 = encoder stage 0 (H/2), 1 = stage 1 (H/4)
    std::size_t in_channels;
    std::size_t out_channels;
};

/// CNN encoder -> (WASP / WASP-KC) -> patch embed -> transformer blocks ->
/// LN -> token grid -> cascaded decoder -> full-resolution features.
template <class T>
class TransUnetBranch {
public:
    using value_type = T;

    TransUnetBranch(const ModelConfig& cfg, Rng& rng)
        : cfg_(cfg),
          encoder(cfg.in_channels, cfg.cnn_widths, rng),
          embed(cfg.token_channels(), cfg.input_size / 8, cfg.input_size / 8, cfg.vit.patch, cfg.vit.dim, rng),
          norm(cfg.vit.dim) {
        if (cfg.use_wasp) wasp.emplace(cfg.resolved_wasp(), rng);
        for (std::size_t i = 0; i < cfg.vit.layers; ++i) blocks.emplace_back(cfg.transformer_params(), rng);
        plan_ = decoder_plan(cfg);
        for (const auto& step : plan_) decoder.emplace_back(ConvBlockParams{step.in_channels, step.out_channels}, rng);
        head.emplace(ConvBlockParams{cfg.decoder_widths[2], cfg.transunet_out_channels}, rng);
    }

    /// Which encoder skip feeds which up-step. The token grid sits at
    /// H/(8*patch); each step doubles it, and a skip is concatenated whenever
    /// the step lands on H/4 (stage 1) or H/2 (stage 0).
    static std::vector<DecoderStep> decoder_plan(const ModelConfig& cfg) {
        std::vector<DecoderStep> plan;
        std::size_t divisor = 8 * cfg.vit.patch;
        std::size_t channels = cfg.vit.dim;
        for (std::size_t j = 0; j < 3; ++j) {
            divisor /= 2;
            int skip = divisor == 4 ? 1 : divisor == 2 ? 0 : -1;
            const std::size_t skip_ch = skip < 0 ? 0 : cfg.cnn_widths[static_cast<std::size_t>(skip)];
            plan.push_back({divisor, skip, channels + skip_ch, cfg.decoder_widths[j]});
            channels = cfg.decoder_widths[j];
        }
        return plan;
    }

    Tensor<T> forward(const Tensor<T>& x, Mode mode, Rng& rng) {
        const auto enc = encoder.forward(x, mode);
        Tensor<T> feat = wasp ? wasp->forward(enc.features, mode) : enc.features;
        Tensor<T> tokens = embed.forward(feat);
        for (auto& block : blocks) tokens = block.forward(tokens, mode, rng);
        tokens = norm.forward(tokens);
        const std::size_t N = tokens.dim(0), D = tokens.dim(2);
        Tensor<T> h = reshape(permute(tokens, {0, 2, 1}), {N, D, embed.grid_h(), embed.grid_w()});
        for (std::size_t j = 0; j < plan_.size(); ++j) {
            h = upsample_bilinear(h, 2);
            if (plan_[j].skip_stage >= 0) h = concat<T>({h, enc.skips[static_cast<std::size_t>(plan_[j].skip_stage)]}, 1);
            h = decoder[j].forward(h, mode);
        }
        if (plan_.back().resolution_divisor > 1) h = upsample_bilinear(h, plan_.back().resolution_divisor);
        return head->forward(h, mode);
    }

    void collect_encoder(const std::string& prefix, Registry<T>& reg) const { encoder.collect(join_name(prefix, "encoder"), reg); }
    void collect_wasp(const std::string& prefix, Registry<T>& reg) const {
        if (wasp) wasp->collect(join_name(prefix, "wasp"), reg);
    }
    void collect_vit(const std::string& prefix, Registry<T>& reg) const {
        embed.collect(join_name(prefix, "embed"), reg);
        for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(join_name(prefix, "block" + std::to_string(i)), reg);
        norm.collect(join_name(prefix, "norm"), reg);
    }
    void collect_decoder(const std::string& prefix, Registry<T>& reg) const {
        for (std::size_t j = 0; j < decoder.size(); ++j) decoder[j].collect(join_name(prefix, "decoder" + std::to_string(j)), reg);
        head->collect(join_name(prefix, "head"), reg);
    }

    void collect(const std::string& prefix, Registry<T>& reg) const {
        collect_encoder(prefix, reg);
        collect_wasp(prefix, reg);
        collect_vit(prefix, reg);
        collect_decoder(prefix, reg);
    }

    const std::vector<DecoderStep>& plan() const { return plan_; }

private:
    ModelConfig cfg_;
    std::vector<DecoderStep> plan_;

public:
    CnnEncoder<T> encoder;
    std::optional<Wasp<T>> wasp;
    PatchEmbed<T> embed;
    std::vector<TransformerBlock<T>> blocks;
    LayerNorm<T> norm;
    std::vector<ConvBlock<T>> decoder;
    std::optional<ConvBlock<T>> head;
};

struct ParameterBreakdown {
    std::size_t unet_branch = 0;
    std::size_t cnn_encoder = 0;
    std::size_t wasp = 0;
    std::size_t vit = 0;
    std::size_t decoder = 0;
    std::size_t fusion = 0;

    std::size_t total() const { return unet_branch + cnn_encoder + wasp + vit + decoder + fusion; }
};

/// Two-branch segmentation model: concat(Unet, TransUnet) -> conv block -> 1x1
/// conv to a single logit channel.
template <class T>
class Trans2Unet {
public:
    using value_type = T;

    Trans2Unet(const ModelConfig& cfg, std::uint64_t seed) : cfg_((cfg.validate(), cfg)), dropout_rng_(Rng::stream(seed, "dropout")) {
        Rng rng = Rng::stream(seed, "init");
        if (cfg.use_unet_branch) unet.emplace(cfg.in_channels, cfg.unet_widths, cfg.unet_out_channels, rng);
        transunet = std::make_unique<TransUnetBranch<T>>(cfg, rng);
        const std::size_t fused = (cfg.use_unet_branch ? cfg.unet_out_channels : 0) + cfg.transunet_out_channels;
        fusion = std::make_unique<ConvBlock<T>>(ConvBlockParams{fused, cfg.fusion_channels}, rng);
        head = std::make_unique<Conv2d<T>>(cfg.fusion_channels, 1, 1, rng);
    }

    Trans2Unet(const Trans2Unet&) = delete;
    Trans2Unet& operator=(const Trans2Unet&) = delete;
    Trans2Unet(Trans2Unet&&) noexcept = default;
    Trans2Unet& operator=(Trans2Unet&&) noexcept = default;

    void check_input(const Tensor<T>& x) const {
        if (x.ndim() != 4 || x.dim(1) != cfg_.in_channels || x.dim(2) != cfg_.input_size || x.dim(3) != cfg_.input_size) {
            throw ShapeError("model input must be [N, " + std::to_string(cfg_.in_channels) + ", " +
                             std::to_string(cfg_.input_size) + ", " + std::to_string(cfg_.input_size) + "], got " +
                             shape_str(x.shape()));
        }
    }

    Tensor<T> unet_forward(const Tensor<T>& x, Mode mode) { return unet->forward(x, mode); }
    Tensor<T> transunet_forward(const Tensor<T>& x, Mode mode) { return transunet->forward(x, mode, dropout_rng_); }

    /// [N, C, H, W] -> logits [N, 1, H, W]
    Tensor<T> forward(const Tensor<T>& x, Mode mode) {
        check_input(x);
        Tensor<T> features = transunet_forward(x, mode);
        if (unet) features = concat<T>({unet_forward(x, mode), features}, 1);
        return head->forward(fusion->forward(features, mode));
    }

    void collect(const std::string& prefix, Registry<T>& reg) const {
        if (unet) unet->collect(join_name(prefix, "unet"), reg);
        transunet->collect(join_name(prefix, "transunet"), reg);
        fusion->collect(join_name(prefix, "fusion.block"), reg);
        head->collect(join_name(prefix, "fusion.head"), reg);
    }

    Registry<T> registry() const {
        Registry<T> reg;
        collect("", reg);
        return reg;
    }

    std::size_t parameter_count() const { return registry().param_count(); }

    ParameterBreakdown breakdown() const {
        auto count = [](auto&& fn) {
            Registry<T> r;
            fn(r);
            return r.param_count();
        };
        ParameterBreakdown b;
        if (unet) b.unet_branch = count([&](auto& r) { unet->collect("", r); });
        b.cnn_encoder = count([&](auto& r) { transunet->collect_encoder("", r); });
        b.wasp = count([&](auto& r) { transunet->collect_wasp("", r); });
        b.vit = count([&](auto& r) { transunet->collect_vit("", r); });
        b.decoder = count([&](auto& r) { transunet->collect_decoder("", r); });
        b.fusion = count([&](auto& r) {
            fusion->collect("", r);
            head->collect("", r);
        });
        return b;
    }

    const ModelConfig& config() const { return cfg_; }
    Rng& dropout_rng() { return dropout_rng_; }

private:
    ModelConfig cfg_;
    Rng dropout_rng_;

public:
    std::optional<UnetBranch<T>> unet;
    std::unique_ptr<TransUnetBranch<T>> transunet;
    std::unique_ptr<ConvBlock<T>> fusion;
    std::unique_ptr<Conv2d<T>> head;
};

/// Copies parameter and buffer values between models with identical layouts
/// (possibly different precision).
template <class To, class From>
void copy_state(const Trans2Unet<From>& src, Trans2Unet<To>& dst) {
    const auto a = src.registry();
    auto b = dst.registry();
    auto copy = [](const auto& from, auto& to) {
        if (from.size() != to.size()) throw std::invalid_argument("copy_state: layouts differ");
        for (std::size_t i = 0; i < from.size(); ++i) {
            if (from[i].name != to[i].name || from[i].tensor.shape() != to[i].tensor.shape()) {
                throw std::invalid_argument("copy_state: mismatch at " + from[i].name);
            }
            auto dst_data = to[i].tensor.node()->data.begin();
            for (auto v : from[i].tensor.data()) *dst_data++ = static_cast<To>(v);
        }
    };
    copy(a.params, b.params);
    copy(a.buffers, b.buffers);
}

}  // namespace t2u
