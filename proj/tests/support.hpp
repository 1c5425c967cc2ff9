#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "t2u/t2u.hpp"

namespace t2u::test {

template <class T = double>
Tensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1, double hi = 1, bool requires_grad = false) {
    Tensor<T> t(std::move(shape), T(0), requires_grad);
    for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

template <class T>
std::vector<T> values(const Tensor<T>& t) {
    return std::vector<T>(t.data().begin(), t.data().end());
}

// Direct sliding-window cross-correlation, zero padding `pad` on every side.
inline std::vector<double> conv_oracle(const std::vector<double>& x, std::size_t N, std::size_t C, std::size_t H, std::size_t W,
                                       const std::vector<double>& w, std::size_t O, std::size_t K,
                                       const std::vector<double>& b, std::size_t stride, std::size_t dil, std::size_t pad,
                                       std::size_t Ho, std::size_t Wo) {
    std::vector<double> out(N * O * Ho * Wo, 0.0);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o)
            for (std::size_t y = 0; y < Ho; ++y)
                for (std::size_t xx = 0; xx < Wo; ++xx) {
                    double acc = b.empty() ? 0.0 : b[o];
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t ky = 0; ky < K; ++ky)
                            for (std::size_t kx = 0; kx < K; ++kx) {
                                const long iy = static_cast<long>(y * stride + ky * dil) - static_cast<long>(pad);
                                const long ix = static_cast<long>(xx * stride + kx * dil) - static_cast<long>(pad);
                                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
                                acc += x[((n * C + c) * H + iy) * W + ix] * w[((o * C + c) * K + ky) * K + kx];
                            }
                    out[((n * O + o) * Ho + y) * Wo + xx] = acc;
                }
    return out;
}

// ---------------------------------------------------------------------------
// Closed-form parameter counts
// ---------------------------------------------------------------------------

// conv k x k without bias + batch norm (gamma, beta)
inline std::size_t conv_bn(std::size_t k, std::size_t in, std::size_t out) { return k * k * in * out + 2 * out; }
inline std::size_t conv_bias(std::size_t k, std::size_t in, std::size_t out) { return k * k * in * out + out; }

inline std::size_t unet_count(std::size_t C, const std::array<std::size_t, 4>& w, std::size_t out) {
    auto dc = [](std::size_t i, std::size_t mid, std::size_t o) { return conv_bn(3, i, mid) + conv_bn(3, mid, o); };
    return dc(C, w[0], w[0]) + dc(w[0], w[1], w[1]) + dc(w[1], w[2], w[2]) + dc(w[2], w[3], w[3]) +
           dc(w[3] + w[2], w[2], w[2]) + dc(w[2] + w[1], w[1], w[1]) + dc(w[1] + w[0], w[0], out);
}

inline std::size_t stage_count(std::size_t in, std::size_t out) {
    return conv_bn(3, in, out) + conv_bn(3, out, out) + conv_bias(1, in, out);
}

inline std::size_t encoder_count(std::size_t C, const std::array<std::size_t, 3>& w) {
    return stage_count(C, w[0]) + stage_count(w[0], w[1]) + stage_count(w[1], w[2]);
}

inline std::size_t wasp_count(std::size_t C, std::size_t B, bool dense) {
    std::size_t total = conv_bias(1, C, B);
    for (std::size_t i = 0; i < 4; ++i) {
        const std::size_t in = i == 0 ? C : B;
        total += conv_bn(3, in, B);
        total += conv_bn(1, dense ? in + B : B, B);
        total += conv_bn(1, dense ? in + 2 * B : B, B);
    }
    return total;
}

inline std::size_t linear_count(std::size_t in, std::size_t out) { return in * out + out; }

inline std::size_t block_count(std::size_t D, double ratio) {
    const auto hid = static_cast<std::size_t>(std::lround(D * ratio));
    return 2 * D + 4 * linear_count(D, D) + 2 * D + linear_count(D, hid) + linear_count(hid, D);
}

inline std::size_t model_count(const ModelConfig& c) {
    std::size_t total = 0;
    if (c.use_unet_branch) total += unet_count(c.in_channels, c.unet_widths, c.unet_out_channels);
    total += encoder_count(c.in_channels, c.cnn_widths);
    std::size_t token_ch = c.cnn_widths[2];
    if (c.use_wasp) {
        total += wasp_count(c.cnn_widths[2], c.wasp.branch_channels, c.wasp.dense_skip);
        token_ch = c.wasp.branch_channels;
    }
    const std::size_t p = c.vit.patch, D = c.vit.dim;
    const std::size_t grid = c.input_size / 8 / p;
    total += p * p * token_ch * D + D + grid * grid * D;
    total += c.vit.layers * block_count(D, c.vit.mlp_ratio) + 2 * D;
    // decoder: the token grid doubles three times; skips join at H/4 and H/2
    std::size_t divisor = 8 * p, ch = D;
    for (std::size_t j = 0; j < 3; ++j) {
        divisor /= 2;
        const std::size_t skip = divisor == 4 ? c.cnn_widths[1] : divisor == 2 ? c.cnn_widths[0] : 0;
        total += conv_bn(3, ch + skip, c.decoder_widths[j]);
        ch = c.decoder_widths[j];
    }
    total += conv_bn(3, ch, c.transunet_out_channels);
    const std::size_t fused = (c.use_unet_branch ? c.unet_out_channels : 0) + c.transunet_out_channels;
    total += conv_bn(3, fused, c.fusion_channels) + conv_bias(1, c.fusion_channels, 1);
    return total;
}

// Run config matching ModelConfig::micro(), three epochs.
inline RunConfig micro_run_config() {
    RunConfig c = RunConfig::defaults();
    for (const auto& [k, v] : std::vector<std::pair<std::string, std::string>>{
             {"model.input_size", "16"}, {"model.dropout", "0"}, {"unet.widths", "2,4,8,8"}, {"unet.out_channels", "2"},
             {"cnn.widths", "2,4,8"}, {"wasp.branch_channels", "4"}, {"vit.dim", "8"}, {"vit.layers", "1"},
             {"vit.heads", "2"}, {"decoder.widths", "4,4,2"}, {"transunet.out_channels", "2"}, {"fusion.channels", "2"},
             {"train.epochs", "3"}})
        c.set(k, v);
    return c;
}

// ---------------------------------------------------------------------------
// WASP-KC with the extra skip inputs zeroed
// ---------------------------------------------------------------------------

// Copies `plain` into `kc`: reduce/expand weights go to the d and a channel
// slices, every weight reading the extra skip inputs is zeroed.
template <class T>
void embed_plain_wasp(const Wasp<T>& plain, Wasp<T>& kc) {
    auto copy_bn = [](const ConvBlock<T>& from, ConvBlock<T>& to) {
        std::ranges::copy(from.bn->gamma.data(), to.bn->gamma.data().begin());
        std::ranges::copy(from.bn->beta.data(), to.bn->beta.data().begin());
        std::ranges::copy(from.bn->stats.mean.data(), to.bn->stats.mean.data().begin());
        std::ranges::copy(from.bn->stats.var.data(), to.bn->stats.var.data().begin());
    };
    // 1x1 weights [B, Cin]; plain input channel j maps to kc channel offset + j
    auto embed_1x1 = [](const Tensor<T>& from, Tensor<T>& to, std::size_t offset) {
        const std::size_t B = from.dim(0), cin = from.dim(1), kin = to.dim(1);
        std::fill(to.data().begin(), to.data().end(), T(0));
        for (std::size_t o = 0; o < B; ++o)
            for (std::size_t j = 0; j < cin; ++j) to[o * kin + offset + j] = from[o * cin + j];
    };
    const std::size_t B = plain.config().branch_channels;
    for (std::size_t i = 0; i < 4; ++i) {
        const auto& pu = plain.units[i];
        auto& ku = kc.units[i];
        const std::size_t in_i = i == 0 ? plain.config().in_channels : B;
        std::ranges::copy(pu.atrous.conv.weight.data(), ku.atrous.conv.weight.data().begin());
        copy_bn(pu.atrous, ku.atrous);
        embed_1x1(pu.reduce.conv.weight, ku.reduce.conv.weight, in_i);
        copy_bn(pu.reduce, ku.reduce);
        embed_1x1(pu.expand.conv.weight, ku.expand.conv.weight, in_i + B);
        copy_bn(pu.expand, ku.expand);
    }
    std::ranges::copy(plain.pool_proj.weight.data(), kc.pool_proj.weight.data().begin());
    std::ranges::copy(plain.pool_proj.bias.data(), kc.pool_proj.bias.data().begin());
}

// ---------------------------------------------------------------------------
// Filesystem
// ---------------------------------------------------------------------------

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& tag) {
        static std::uint64_t counter = 0;
        path = std::filesystem::temp_directory_path() /
               ("t2u_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
};

inline std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

}  // namespace t2u::test
