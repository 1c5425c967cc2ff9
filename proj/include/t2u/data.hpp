#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "t2u/pnm.hpp"
#include "t2u/rng.hpp"
#include "t2u/tensor.hpp"

namespace t2u {

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// image: [C, H, W] in [0, 1]; mask: [H, W] in {0, 1}.
struct SegmentationSample {
    std::string id;
    Tensor<float> image;
    Tensor<float> mask;

    std::size_t channels() const { return image.dim(0); }
    std::size_t height() const { return image.dim(1); }
    std::size_t width() const { return image.dim(2); }
};

struct DatasetSplit {
    std::vector<std::string> train, val, test;
    std::uint64_t seed = 0;

    /// FNV-1a over the three id lists; equal hashes mean identical splits.
    std::uint64_t hash() const {
        std::string s;
        for (const auto* part : {&train, &val, &test}) {
            for (const auto& id : *part) s += id + ",";
            s += "|";
        }
        return Rng::fnv1a64(s);
    }
};

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

/// Bilinear resize of a [C, h, w] plane stack, align_corners = false.
inline std::vector<float> resize_bilinear(const std::vector<float>& src, std::size_t C, std::size_t h, std::size_t w,
                                          std::size_t oh, std::size_t ow) {
    std::vector<float> out(C * oh * ow);
    auto tap = [](std::size_t o, std::size_t in_len, std::size_t out_len) {
        double s = (static_cast<double>(o) + 0.5) * static_cast<double>(in_len) / static_cast<double>(out_len) - 0.5;
        s = std::clamp(s, 0.0, static_cast<double>(in_len - 1));
        const auto i0 = static_cast<std::size_t>(s);
        const std::size_t i1 = std::min(i0 + 1, in_len - 1);
        return std::tuple{i0, i1, s - static_cast<double>(i0)};
    };
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < oh; ++y) {
            const auto [y0, y1, ly] = tap(y, h, oh);
            for (std::size_t x = 0; x < ow; ++x) {
                const auto [x0, x1, lx] = tap(x, w, ow);
                const float* p = src.data() + c * h * w;
                const double top = p[y0 * w + x0] * (1 - lx) + p[y0 * w + x1] * lx;
                const double bot = p[y1 * w + x0] * (1 - lx) + p[y1 * w + x1] * lx;
                out[(c * oh + y) * ow + x] = static_cast<float>(top * (1 - ly) + bot * ly);
            }
        }
    return out;
}

/// Nearest-neighbour resize of an [h, w] plane: src = floor((dst + 0.5) * in / out).
inline std::vector<float> resize_nearest(const std::vector<float>& src, std::size_t h, std::size_t w, std::size_t oh,
                                         std::size_t ow) {
    std::vector<float> out(oh * ow);
    for (std::size_t y = 0; y < oh; ++y) {
        const std::size_t sy = std::min(h - 1, ((2 * y + 1) * h) / (2 * oh));
        for (std::size_t x = 0; x < ow; ++x) {
            const std::size_t sx = std::min(w - 1, ((2 * x + 1) * w) / (2 * ow));
            out[y * ow + x] = src[sy * w + sx];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

/// Converts a raster to [C, H, W] floats in [0, 1]. Gray input is replicated
/// when three channels are requested; RGB input is averaged for one channel.
inline std::vector<float> image_to_planes(const Image8& img, std::size_t channels) {
    const std::size_t H = img.height, W = img.width;
    std::vector<float> out(channels * H * W);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            if (channels == img.channels) {
                for (std::size_t c = 0; c < channels; ++c) out[(c * H + y) * W + x] = img.at(y, x, c) / 255.0f;
            } else if (img.channels == 1) {
                for (std::size_t c = 0; c < channels; ++c) out[(c * H + y) * W + x] = img.at(y, x) / 255.0f;
            } else {
                float s = 0;
                for (std::size_t c = 0; c < img.channels; ++c) s += img.at(y, x, c);
                out[y * W + x] = s / (255.0f * static_cast<float>(img.channels));
            }
        }
    return out;
}

/// Mask pixels above 127.5 become 1, the rest 0.
inline std::vector<float> binarize_mask(const Image8& img) {
    std::vector<float> out(img.width * img.height);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = img.pixels[i * img.channels] > 127.5 ? 1.0f : 0.0f;
    return out;
}

/// Loads `dir/images/*.pgm|*.ppm` with masks at `dir/masks/<stem>.pgm`,
/// resized to target_size x target_size and sorted by id.
inline std::vector<SegmentationSample> load_dataset(const std::filesystem::path& dir, std::size_t target_size,
                                                    std::size_t channels) {
    namespace fs = std::filesystem;
    if (target_size == 0) throw DataError("load_dataset: target size must be positive");
    if (channels != 1 && channels != 3) throw DataError("load_dataset: channels must be 1 or 3");
    const fs::path images = dir / "images";
    const fs::path masks = dir / "masks";
    if (!fs::is_directory(images)) throw DataError("load_dataset: missing directory " + images.string());
    std::map<std::string, fs::path> found;
    for (const auto& entry : fs::directory_iterator(images)) {
        const auto ext = entry.path().extension().string();
        if (!entry.is_regular_file() || (ext != ".pgm" && ext != ".ppm")) continue;
        const std::string stem = entry.path().stem().string();
        if (!found.emplace(stem, entry.path()).second) throw DataError("load_dataset: duplicate image id '" + stem + "'");
    }
    if (found.empty()) throw DataError("load_dataset: empty dataset, no .pgm/.ppm images in " + images.string());
    std::vector<SegmentationSample> out;
    for (const auto& [id, path] : found) {
        const fs::path mask_path = masks / (id + ".pgm");
        if (!fs::exists(mask_path)) throw DataError("load_dataset: missing mask for image '" + id + "' (" + mask_path.string() + ")");
        const Image8 img = read_pnm(path);
        const Image8 msk = read_pnm(mask_path);
        if (img.width != msk.width || img.height != msk.height) {
            throw DataError("load_dataset: image '" + id + "' is " + std::to_string(img.width) + "x" +
                            std::to_string(img.height) + " but its mask is " + std::to_string(msk.width) + "x" +
                            std::to_string(msk.height));
        }
        auto planes = resize_bilinear(image_to_planes(img, channels), channels, img.height, img.width, target_size, target_size);
        for (auto& v : planes) v = std::clamp(v, 0.0f, 1.0f);
        auto mask = resize_nearest(binarize_mask(msk), msk.height, msk.width, target_size, target_size);
        out.push_back({id, Tensor<float>({channels, target_size, target_size}, std::move(planes)),
                       Tensor<float>({target_size, target_size}, std::move(mask))});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

/// Split sizes by largest remainder: floor(n * r_i), then the leftover
/// samples go to the largest fractional parts (ties to the earlier split).
inline std::array<std::size_t, 3> split_sizes(std::size_t n, const std::array<double, 3>& ratios) {
    double total = 0;
    for (double r : ratios) {
        if (!(r >= 0)) throw DataError("split ratios must be non-negative");
        total += r;
    }
    if (std::abs(total - 1.0) > 1e-9) throw DataError("split ratios must sum to 1");
    std::array<std::size_t, 3> sizes{};
    std::array<double, 3> frac{};
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < 3; ++i) {
        const double exact = static_cast<double>(n) * ratios[i];
        sizes[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
        frac[i] = exact - static_cast<double>(sizes[i]);
        assigned += sizes[i];
    }
    while (assigned < n) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < 3; ++i)
            if (frac[i] > frac[best] + 1e-12) best = i;
        ++sizes[best];
        frac[best] = -1;
        ++assigned;
    }
    return sizes;
}

/// Seeded Fisher-Yates shuffle followed by contiguous slicing.
inline DatasetSplit split_dataset(std::vector<std::string> ids, const std::array<double, 3>& ratios, std::uint64_t seed) {
    if (ids.size() < 3) {
        throw DataError("split_dataset: fewer samples (" + std::to_string(ids.size()) + ") than splits (3)");
    }
    const auto sizes = split_sizes(ids.size(), ratios);
    Rng rng = Rng::stream(seed, "split");
    for (std::size_t i = ids.size(); i > 1; --i) std::swap(ids[i - 1], ids[rng.uniform_int(i)]);
    DatasetSplit split;
    split.seed = seed;
    auto it = ids.begin();
    split.train.assign(it, it + static_cast<std::ptrdiff_t>(sizes[0]));
    it += static_cast<std::ptrdiff_t>(sizes[0]);
    split.val.assign(it, it + static_cast<std::ptrdiff_t>(sizes[1]));
    it += static_cast<std::ptrdiff_t>(sizes[1]);
    split.test.assign(it, ids.end());
    return split;
}

inline DatasetSplit split_dataset(const std::vector<SegmentationSample>& samples, const std::array<double, 3>& ratios,
                                  std::uint64_t seed) {
    std::vector<std::string> ids;
    for (const auto& s : samples) ids.push_back(s.id);
    return split_dataset(std::move(ids), ratios, seed);
}

/// Samples whose ids appear in `ids`, in the order of `ids`.
inline std::vector<SegmentationSample> select(const std::vector<SegmentationSample>& samples,
                                              const std::vector<std::string>& ids) {
    std::map<std::string, const SegmentationSample*> by_id;
    for (const auto& s : samples) by_id[s.id] = &s;
    std::vector<SegmentationSample> out;
    for (const auto& id : ids) {
        auto it = by_id.find(id);
        if (it == by_id.end()) throw DataError("unknown sample id '" + id + "'");
        out.push_back(*it->second);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic nuclei
// ---------------------------------------------------------------------------

/// Dark noisy background with 1-5 bright, possibly overlapping ellipses. The
/// mask is the exact union of ellipse interiors (tested at pixel centres).
inline std::vector<SegmentationSample> generate_synthetic(std::size_t n, std::size_t size, std::uint64_t seed,
                                                          std::size_t channels = 1) {
    if (size == 0 || size % 16) throw DataError("generate_synthetic: size must be a positive multiple of 16");
    if (channels != 1 && channels != 3) throw DataError("generate_synthetic: channels must be 1 or 3");
    Rng rng = Rng::stream(seed, "synth");
    std::vector<SegmentationSample> out;
    const double S = static_cast<double>(size);
    for (std::size_t k = 0; k < n; ++k) {
        const double background = rng.uniform(0.05, 0.2);
        const std::size_t count = 1 + rng.uniform_int(5);
        std::vector<float> intensity(size * size, 0.0f);
        std::vector<float> mask(size * size, 0.0f);
        for (std::size_t e = 0; e < count; ++e) {
            // centres sit on pixel centres so the centre pixel is always foreground
            const double cx = std::floor(rng.uniform(0.15 * S, 0.85 * S)) + 0.5;
            const double cy = std::floor(rng.uniform(0.15 * S, 0.85 * S)) + 0.5;
            const double ax = rng.uniform(S / 12.0, S / 5.0);
            const double ay = rng.uniform(S / 12.0, S / 5.0);
            const double theta = rng.uniform(0.0, std::numbers::pi);
            const double bright = rng.uniform(0.6, 0.9);
            const double c = std::cos(theta), s = std::sin(theta);
            for (std::size_t y = 0; y < size; ++y)
                for (std::size_t x = 0; x < size; ++x) {
                    const double dx = static_cast<double>(x) + 0.5 - cx, dy = static_cast<double>(y) + 0.5 - cy;
                    const double u = (dx * c + dy * s) / ax, v = (-dx * s + dy * c) / ay;
                    if (u * u + v * v <= 1.0) {
                        mask[y * size + x] = 1.0f;
                        intensity[y * size + x] = std::max(intensity[y * size + x], static_cast<float>(bright));
                    }
                }
        }
        std::vector<float> image(channels * size * size);
        for (std::size_t ch = 0; ch < channels; ++ch) {
            const double tint = 1.0 - 0.1 * static_cast<double>(ch);
            for (std::size_t i = 0; i < size * size; ++i) {
                const double base = mask[i] > 0 ? intensity[i] * tint : background;
                image[ch * size * size + i] = static_cast<float>(std::clamp(base + rng.normal(0.0, 0.05), 0.0, 1.0));
            }
        }
        std::ostringstream id;
        id << "synth_" << (k < 1000 ? (k < 100 ? (k < 10 ? "000" : "00") : "0") : "") << k;
        out.push_back({id.str(), Tensor<float>({channels, size, size}, std::move(image)),
                       Tensor<float>({size, size}, std::move(mask))});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

inline SegmentationSample flip_horizontal(const SegmentationSample& s) {
    const std::size_t C = s.channels(), H = s.height(), W = s.width();
    std::vector<float> img(C * H * W), msk(H * W);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) img[(c * H + y) * W + x] = s.image[(c * H + y) * W + (W - 1 - x)];
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) msk[y * W + x] = s.mask[y * W + (W - 1 - x)];
    return {s.id, Tensor<float>(s.image.shape(), std::move(img)), Tensor<float>(s.mask.shape(), std::move(msk))};
}

inline SegmentationSample flip_vertical(const SegmentationSample& s) {
    const std::size_t C = s.channels(), H = s.height(), W = s.width();
    std::vector<float> img(C * H * W), msk(H * W);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
            std::copy_n(s.image.data().begin() + static_cast<std::ptrdiff_t>((c * H + (H - 1 - y)) * W), W,
                        img.begin() + static_cast<std::ptrdiff_t>((c * H + y) * W));
    for (std::size_t y = 0; y < H; ++y)
        std::copy_n(s.mask.data().begin() + static_cast<std::ptrdiff_t>((H - 1 - y) * W), W,
                    msk.begin() + static_cast<std::ptrdiff_t>(y * W));
    return {s.id, Tensor<float>(s.image.shape(), std::move(img)), Tensor<float>(s.mask.shape(), std::move(msk))};
}

/// Horizontal and vertical flips, each with probability 0.5, applied to image
/// and mask alike.
inline SegmentationSample augment_flip(const SegmentationSample& s, Rng& rng) {
    const bool h = rng.uniform() < 0.5;
    const bool v = rng.uniform() < 0.5;
    SegmentationSample out = s;
    if (h) out = flip_horizontal(out);
    if (v) out = flip_vertical(out);
    return out;
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> stack_images(const std::vector<SegmentationSample>& samples) {
    if (samples.empty()) throw DataError("stack_images: empty batch");
    const Shape& s0 = samples[0].image.shape();
    std::vector<T> data;
    data.reserve(samples.size() * samples[0].image.numel());
    for (const auto& s : samples) {
        if (s.image.shape() != s0) throw DataError("stack_images: inconsistent image shapes in batch");
        data.insert(data.end(), s.image.data().begin(), s.image.data().end());
    }
    return Tensor<T>({samples.size(), s0[0], s0[1], s0[2]}, std::move(data));
}

template <class T>
Tensor<T> stack_masks(const std::vector<SegmentationSample>& samples) {
    if (samples.empty()) throw DataError("stack_masks: empty batch");
    const Shape& s0 = samples[0].mask.shape();
    std::vector<T> data;
    for (const auto& s : samples) data.insert(data.end(), s.mask.data().begin(), s.mask.data().end());
    return Tensor<T>({samples.size(), 1, s0[0], s0[1]}, std::move(data));
}

}  // namespace t2u
