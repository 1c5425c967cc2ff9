#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "t2u/rng.hpp"
#include "t2u/tensor.hpp"

namespace t2u {

enum class Mode { train, eval };

namespace detail {

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
}

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
    if (s.size() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(s));
    }
}

template <class T>
void accumulate(typename Tensor<T>::Node& parent, const std::vector<T>& g) {
    if (!parent.requires_grad) return;
    auto& pg = parent.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "add");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, "add", [](auto& self) {
        for (auto& p : self.parents) detail::accumulate<T>(*p, self.grad);
    });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "sub");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, "sub", [](auto& self) {
        detail::accumulate<T>(*self.parents[0], self.grad);
        auto& pb = *self.parents[1];
        if (!pb.requires_grad) return;
        auto& g = pb.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "mul");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, "mul", [](auto& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            auto& g = pa.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.data[i];
        }
        if (pb.requires_grad) {
            auto& g = pb.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.data[i];
        }
    });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
    return Tensor<T>::make_result(a.shape(), std::move(out), {a}, "scale", [s](auto& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
    });
}

/// x + b where b's shape equals the trailing dims of x (bias / position
/// embedding broadcast). This is the only implicit broadcast besides the
/// batch broadcast in matmul.
template <class T>
Tensor<T> add_trailing(const Tensor<T>& x, const Tensor<T>& b) {
    const auto& xs = x.shape();
    const auto& bs = b.shape();
    bool ok = bs.size() <= xs.size();
    for (std::size_t i = 0; ok && i < bs.size(); ++i) ok = bs[bs.size() - 1 - i] == xs[xs.size() - 1 - i];
    if (!ok) throw ShapeError("add_trailing: " + shape_str(bs) + " is not a suffix of " + shape_str(xs));
    const std::size_t inner = b.numel();
    const std::size_t outer = x.numel() / inner;
    std::vector<T> out(x.numel());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] = x[o * inner + i] + b[i];
    return Tensor<T>::make_result(xs, std::move(out), {x, b}, "add_trailing", [outer, inner](auto& self) {
        detail::accumulate<T>(*self.parents[0], self.grad);
        auto& pb = *self.parents[1];
        if (!pb.requires_grad) return;
        auto& g = pb.ensure_grad();
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < inner; ++i) g[i] += self.grad[o * inner + i];
    });
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
    T s = 0;
    for (T v : x.data()) s += v;
    return Tensor<T>::make_result(Shape{1}, {s}, {x}, "sum", [](auto& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.ensure_grad();
        for (auto& v : g) v += self.grad[0];
    });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
    return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
    if (detail::tracing_kinks()) {
        std::uint64_t word = 0;
        for (std::size_t i = 0; i < out.size(); ++i) {
            word = (word << 1) | (x[i] > T(0) ? 1u : 0u);
            if (i % 64 == 63) detail::record_kink(word), word = 0;
        }
        detail::record_kink(word);
    }
    return Tensor<T>::make_result(x.shape(), std::move(out), {x}, "relu", [](auto& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (p.data[i] > T(0)) g[i] += self.grad[i];
    });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T v = x[i];
        if (v >= T(0)) {
            out[i] = T(1) / (T(1) + std::exp(-v));
        } else {
            const T e = std::exp(v);
            out[i] = e / (T(1) + e);
        }
    }
    return Tensor<T>::make_result(x.shape(), std::move(out), {x}, "sigmoid", [](auto& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T y = self.data[i];
            g[i] += self.grad[i] * y * (T(1) - y);
        }
    });
}

/// Exact (erf-based) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
    constexpr T inv_sqrt2 = T(0.70710678118654752440);
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(0.5) * x[i] * (T(1) + std::erf(x[i] * inv_sqrt2));
    return Tensor<T>::make_result(x.shape(), std::move(out), {x}, "gelu", [](auto& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        constexpr T inv_sqrt2 = T(0.70710678118654752440);
        constexpr T inv_sqrt2pi = T(0.39894228040143267794);
        auto& g = p.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T v = p.data[i];
            const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
            const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
            g[i] += self.grad[i] * (cdf + v * pdf);
        }
    });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    return Tensor<T>::make_result(std::move(shape), x.storage(), {x}, "reshape",
                                  [](auto& self) { detail::accumulate<T>(*self.parents[0], self.grad); });
}

/// out.shape[i] = x.shape[axes[i]]
template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
    const auto& xs = x.shape();
    const std::size_t rank = xs.size();
    if (axes.size() != rank) throw ShapeError("permute: axis list does not match rank of " + shape_str(xs));
    std::vector<bool> seen(rank, false);
    for (auto a : axes) {
        if (a >= rank || seen[a]) throw ShapeError("permute: invalid axis list for " + shape_str(xs));
        seen[a] = true;
    }
    Shape os(rank);
    for (std::size_t i = 0; i < rank; ++i) os[i] = xs[axes[i]];
    std::vector<std::size_t> in_strides(rank, 1);
    for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * xs[i];
    // src_index[k] = input offset of output element k
    std::vector<std::size_t> src(x.numel());
    std::vector<std::size_t> idx(rank, 0);
    for (std::size_t k = 0; k < src.size(); ++k) {
        std::size_t off = 0;
        for (std::size_t i = 0; i < rank; ++i) off += idx[i] * in_strides[axes[i]];
        src[k] = off;
        for (std::size_t i = rank; i-- > 0;) {
            if (++idx[i] < os[i]) break;
            idx[i] = 0;
        }
    }
    std::vector<T> out(x.numel());
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = x[src[k]];
    return Tensor<T>::make_result(os, std::move(out), {x}, "permute", [src = std::move(src)](auto& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.ensure_grad();
        for (std::size_t k = 0; k < src.size(); ++k) g[src[k]] += self.grad[k];
    });
}

template <class T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
    const std::size_t r = x.ndim();
    if (r < 2) throw ShapeError("transpose_last2: rank < 2 for " + shape_str(x.shape()));
    std::vector<std::size_t> axes(r);
    std::iota(axes.begin(), axes.end(), std::size_t{0});
    std::swap(axes[r - 1], axes[r - 2]);
    return permute(x, axes);
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.size()) throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " + shape_str(s0));
    Shape os = s0;
    os[axis] = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == s0.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == s0[i];
        if (!ok) throw ShapeError("concat: " + shape_str(s) + " does not match " + shape_str(s0) + " off axis " +
                                  std::to_string(axis));
        os[axis] += s[axis];
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
    for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
    std::vector<std::size_t> widths;
    for (const auto& p : parts) widths.push_back(p.shape()[axis] * inner);
    const std::size_t row = os[axis] * inner;
    std::vector<T> out(shape_numel(os));
    for (std::size_t o = 0; o < outer; ++o) {
        std::size_t off = o * row;
        for (std::size_t k = 0; k < parts.size(); ++k) {
            std::copy_n(parts[k].data().begin() + o * widths[k], widths[k], out.begin() + off);
            off += widths[k];
        }
    }
    return Tensor<T>::make_result(os, std::move(out), parts, "concat", [outer, row, widths](auto& self) {
        std::size_t start = 0;
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
            auto& p = *self.parents[k];
            if (p.requires_grad) {
                auto& g = p.ensure_grad();
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t i = 0; i < widths[k]; ++i) g[o * widths[k] + i] += self.grad[o * row + start + i];
            }
            start += widths[k];
        }
    });
}

// ---------------------------------------------------------------------------
// Matmul with batch broadcasting
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    auto mismatch = [&] { return ShapeError("matmul: incompatible shapes " + shape_str(as) + " and " + shape_str(bs)); };
    if (as.size() < 2 || bs.size() < 2) throw mismatch();
    const std::size_t M = as[as.size() - 2], K = as.back(), N = bs.back();
    if (bs[bs.size() - 2] != K) throw mismatch();

    const std::size_t ab = as.size() - 2, bb = bs.size() - 2;
    const std::size_t rank = std::max(ab, bb);
    Shape batch(rank);
    std::vector<std::size_t> a_dim(rank, 1), b_dim(rank, 1);
    for (std::size_t i = 0; i < rank; ++i) {
        if (i >= rank - ab) a_dim[i] = as[i - (rank - ab)];
        if (i >= rank - bb) b_dim[i] = bs[i - (rank - bb)];
        if (a_dim[i] != b_dim[i] && a_dim[i] != 1 && b_dim[i] != 1) throw mismatch();
        batch[i] = std::max(a_dim[i], b_dim[i]);
    }
    const std::size_t nbatch = shape_numel(batch);
    // per-batch element offsets (in matrices) into a and b
    std::vector<std::size_t> a_off(nbatch), b_off(nbatch);
    {
        std::vector<std::size_t> idx(rank, 0);
        for (std::size_t k = 0; k < nbatch; ++k) {
            std::size_t ao = 0, bo = 0;
            for (std::size_t i = 0; i < rank; ++i) {
                ao = ao * a_dim[i] + (a_dim[i] == 1 ? 0 : idx[i]);
                bo = bo * b_dim[i] + (b_dim[i] == 1 ? 0 : idx[i]);
            }
            a_off[k] = ao * M * K;
            b_off[k] = bo * K * N;
            for (std::size_t i = rank; i-- > 0;) {
                if (++idx[i] < batch[i]) break;
                idx[i] = 0;
            }
        }
    }
    Shape os = batch;
    os.push_back(M);
    os.push_back(N);
    std::vector<T> out(nbatch * M * N, T(0));
    for (std::size_t k = 0; k < nbatch; ++k) {
        const T* A = a.data().data() + a_off[k];
        const T* B = b.data().data() + b_off[k];
        T* C = out.data() + k * M * N;
        for (std::size_t i = 0; i < M; ++i)
            for (std::size_t kk = 0; kk < K; ++kk) {
                const T av = A[i * K + kk];
                const T* brow = B + kk * N;
                T* crow = C + i * N;
                for (std::size_t j = 0; j < N; ++j) crow[j] += av * brow[j];
            }
    }
    return Tensor<T>::make_result(
        os, std::move(out), {a, b}, "matmul",
        [M, K, N, nbatch, a_off = std::move(a_off), b_off = std::move(b_off)](auto& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            for (std::size_t k = 0; k < nbatch; ++k) {
                const T* G = self.grad.data() + k * M * N;
                if (pa.requires_grad) {
                    T* dA = pa.ensure_grad().data() + a_off[k];
                    const T* B = pb.data.data() + b_off[k];
                    for (std::size_t i = 0; i < M; ++i)
                        for (std::size_t kk = 0; kk < K; ++kk) {
                            T s = 0;
                            for (std::size_t j = 0; j < N; ++j) s += G[i * N + j] * B[kk * N + j];
                            dA[i * K + kk] += s;
                        }
                }
                if (pb.requires_grad) {
                    T* dB = pb.ensure_grad().data() + b_off[k];
                    const T* A = pa.data.data() + a_off[k];
                    for (std::size_t i = 0; i < M; ++i)
                        for (std::size_t kk = 0; kk < K; ++kk) {
                            const T av = A[i * K + kk];
                            for (std::size_t j = 0; j < N; ++j) dB[kk * N + j] += av * G[i * N + j];
                        }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

enum class Padding { same, valid };

struct Conv2dOptions {
    std::size_t stride = 1;
    std::size_t dilation = 1;
    Padding padding = Padding::same;
};

namespace detail {

// Output positions o in [lo, hi) whose input index o*stride + offset is in [0, in_len).
inline std::pair<std::ptrdiff_t, std::ptrdiff_t> conv_range(std::ptrdiff_t out_len, std::ptrdiff_t in_len,
                                                            std::ptrdiff_t stride, std::ptrdiff_t offset) {
    std::ptrdiff_t lo = offset < 0 ? (-offset + stride - 1) / stride : 0;
    std::ptrdiff_t last = in_len - 1 - offset;
    std::ptrdiff_t hi = last < 0 ? 0 : std::min(out_len, last / stride + 1);
    return {lo, std::max(lo, hi)};
}

struct ConvGeometry {
    std::size_t N, Cin, H, W, Cout, KH, KW, Ho, Wo, stride, dilation, pad_h, pad_w;
};

inline ConvGeometry conv_geometry(const Shape& xs, const Shape& ws, const Conv2dOptions& opt) {
    if (opt.stride < 1 || opt.dilation < 1) {
        throw std::invalid_argument("conv2d: stride and dilation must be >= 1");
    }
    require_rank(xs, 4, "conv2d input");
    require_rank(ws, 4, "conv2d weight");
    ConvGeometry g{};
    g.N = xs[0], g.Cin = xs[1], g.H = xs[2], g.W = xs[3];
    g.Cout = ws[0], g.KH = ws[2], g.KW = ws[3];
    g.stride = opt.stride, g.dilation = opt.dilation;
    if (ws[1] != g.Cin) {
        throw ShapeError("conv2d: channel mismatch, input " + shape_str(xs) + " weight " + shape_str(ws));
    }
    const std::size_t eh = g.KH + (g.KH - 1) * (g.dilation - 1);
    const std::size_t ew = g.KW + (g.KW - 1) * (g.dilation - 1);
    if (opt.padding == Padding::same) {
        if (g.KH % 2 == 0 || g.KW % 2 == 0) throw ShapeError("conv2d: same padding needs odd kernel, got " + shape_str(ws));
        g.pad_h = (eh - 1) / 2;
        g.pad_w = (ew - 1) / 2;
        g.Ho = (g.H - 1) / g.stride + 1;
        g.Wo = (g.W - 1) / g.stride + 1;
    } else {
        if (g.H < eh || g.W < ew) throw ShapeError("conv2d: kernel extent exceeds input " + shape_str(xs));
        g.pad_h = g.pad_w = 0;
        g.Ho = (g.H - eh) / g.stride + 1;
        g.Wo = (g.W - ew) / g.stride + 1;
    }
    return g;
}

// Calls f(oy_lo, oy_hi, ox_lo, ox_hi, iy_offset, ix_offset, ky, kx) for each kernel tap.
template <class F>
void for_each_tap(const ConvGeometry& g, F&& f) {
    const auto s = static_cast<std::ptrdiff_t>(g.stride);
    for (std::size_t ky = 0; ky < g.KH; ++ky) {
        const std::ptrdiff_t offy = static_cast<std::ptrdiff_t>(ky * g.dilation) - static_cast<std::ptrdiff_t>(g.pad_h);
        auto [ylo, yhi] = conv_range(g.Ho, g.H, s, offy);
        for (std::size_t kx = 0; kx < g.KW; ++kx) {
            const std::ptrdiff_t offx = static_cast<std::ptrdiff_t>(kx * g.dilation) - static_cast<std::ptrdiff_t>(g.pad_w);
            auto [xlo, xhi] = conv_range(g.Wo, g.W, s, offx);
            f(ylo, yhi, xlo, xhi, offy, offx, ky, kx);
        }
    }
}

}  // namespace detail

/// 2-D cross-correlation over NCHW input. `bias` may be undefined.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, const Conv2dOptions& opt = {}) {
    const auto g = detail::conv_geometry(x.shape(), w.shape(), opt);
    if (bias.defined() && bias.shape() != Shape{g.Cout}) {
        throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()) + " does not match " + std::to_string(g.Cout) +
                         " output channels");
    }
    const std::size_t plane = g.Ho * g.Wo;
    const auto s = static_cast<std::ptrdiff_t>(g.stride);
    std::vector<T> out(g.N * g.Cout * plane, T(0));
    const T* X = x.data().data();
    const T* Wt = w.data().data();
    for (std::size_t n = 0; n < g.N; ++n)
        for (std::size_t co = 0; co < g.Cout; ++co) {
            T* O = out.data() + (n * g.Cout + co) * plane;
            if (bias.defined()) std::fill(O, O + plane, bias[co]);
            for (std::size_t ci = 0; ci < g.Cin; ++ci) {
                const T* Xi = X + (n * g.Cin + ci) * g.H * g.W;
                const T* Wk = Wt + (co * g.Cin + ci) * g.KH * g.KW;
                detail::for_each_tap(g, [&](auto ylo, auto yhi, auto xlo, auto xhi, auto offy, auto offx, auto ky, auto kx) {
                    const T wv = Wk[ky * g.KW + kx];
                    for (auto oy = ylo; oy < yhi; ++oy) {
                        T* orow = O + oy * g.Wo;
                        const T* irow = Xi + (oy * s + offy) * static_cast<std::ptrdiff_t>(g.W) + offx;
                        for (auto ox = xlo; ox < xhi; ++ox) orow[ox] += wv * irow[ox * s];
                    }
                });
            }
        }
    std::vector<Tensor<T>> parents{x, w};
    if (bias.defined()) parents.push_back(bias);
    return Tensor<T>::make_result(Shape{g.N, g.Cout, g.Ho, g.Wo}, std::move(out), parents, "conv2d", [g](auto& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        const std::size_t plane = g.Ho * g.Wo;
        const auto s = static_cast<std::ptrdiff_t>(g.stride);
        const T* G = self.grad.data();
        T* dX = px.requires_grad ? px.ensure_grad().data() : nullptr;
        T* dW = pw.requires_grad ? pw.ensure_grad().data() : nullptr;
        for (std::size_t n = 0; n < g.N; ++n)
            for (std::size_t co = 0; co < g.Cout; ++co) {
                const T* Go = G + (n * g.Cout + co) * plane;
                for (std::size_t ci = 0; ci < g.Cin; ++ci) {
                    const std::size_t xoff = (n * g.Cin + ci) * g.H * g.W;
                    const std::size_t woff = (co * g.Cin + ci) * g.KH * g.KW;
                    detail::for_each_tap(g, [&](auto ylo, auto yhi, auto xlo, auto xhi, auto offy, auto offx, auto ky, auto kx) {
                        const std::size_t wi = woff + ky * g.KW + kx;
                        const T wv = pw.data[wi];
                        T acc = 0;
                        for (auto oy = ylo; oy < yhi; ++oy) {
                            const T* grow = Go + oy * g.Wo;
                            const std::ptrdiff_t ibase = (oy * s + offy) * static_cast<std::ptrdiff_t>(g.W) + offx;
                            const T* irow = px.data.data() + xoff + ibase;
                            if (dX) {
                                T* drow = dX + xoff + ibase;
                                for (auto ox = xlo; ox < xhi; ++ox) drow[ox * s] += wv * grow[ox];
                            }
                            if (dW) {
                                for (auto ox = xlo; ox < xhi; ++ox) acc += grow[ox] * irow[ox * s];
                            }
                        }
                        if (dW) dW[wi] += acc;
                    });
                }
            }
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
            auto& db = self.parents[2]->ensure_grad();
            for (std::size_t n = 0; n < g.N; ++n)
                for (std::size_t co = 0; co < g.Cout; ++co) {
                    const T* Go = G + (n * g.Cout + co) * plane;
                    T acc = 0;
                    for (std::size_t i = 0; i < plane; ++i) acc += Go[i];
                    db[co] += acc;
                }
        }
    });
}

// ---------------------------------------------------------------------------
// Pooling and resampling
// ---------------------------------------------------------------------------

/// 2x2 max pool, stride 2. Ties go to the first element in row-major order.
template <class T>
Tensor<T> maxpool2d(const Tensor<T>& x) {
    detail::require_rank(x.shape(), 4, "maxpool2d");
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H % 2 || W % 2) throw ShapeError("maxpool2d: spatial dims must be even, got " + shape_str(x.shape()));
    const std::size_t Ho = H / 2, Wo = W / 2;
    std::vector<T> out(N * C * Ho * Wo);
    std::vector<std::size_t> arg(out.size());
    for (std::size_t nc = 0; nc < N * C; ++nc)
        for (std::size_t oy = 0; oy < Ho; ++oy)
            for (std::size_t ox = 0; ox < Wo; ++ox) {
                std::size_t best = nc * H * W + (2 * oy) * W + 2 * ox;
                for (std::size_t dy = 0; dy < 2; ++dy)
                    for (std::size_t dx = 0; dx < 2; ++dx) {
                        const std::size_t i = nc * H * W + (2 * oy + dy) * W + 2 * ox + dx;
                        if (x[i] > x[best]) best = i;
                    }
                const std::size_t o = (nc * Ho + oy) * Wo + ox;
                out[o] = x[best];
                arg[o] = best;
            }
    if (detail::tracing_kinks())
        for (auto a : arg) detail::record_kink(a);
    return Tensor<T>::make_result(Shape{N, C, Ho, Wo}, std::move(out), {x}, "maxpool2d",
                                  [arg = std::move(arg)](auto& self) {
                                      auto& p = *self.parents[0];
                                      if (!p.requires_grad) return;
                                      auto& g = p.ensure_grad();
                                      for (std::size_t o = 0; o < arg.size(); ++o) g[arg[o]] += self.grad[o];
                                  });
}

/// Bilinear upsampling by an integer factor, align_corners = false:
/// src = (dst + 0.5) / factor - 0.5, clamped at the low border.
template <class T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, std::size_t factor) {
    if (factor < 1) throw std::invalid_argument("upsample_bilinear: factor must be >= 1");
    detail::require_rank(x.shape(), 4, "upsample_bilinear");
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t Ho = H * factor, Wo = W * factor;
    struct Tap {
        std::size_t i0, i1;
        T l1;
    };
    auto taps = [factor](std::size_t out_len, std::size_t in_len) {
        std::vector<Tap> t(out_len);
        for (std::size_t o = 0; o < out_len; ++o) {
            T src = (static_cast<T>(o) + T(0.5)) / static_cast<T>(factor) - T(0.5);
            if (src < T(0)) src = T(0);
            auto i0 = static_cast<std::size_t>(src);
            if (i0 > in_len - 1) i0 = in_len - 1;
            const std::size_t i1 = std::min(i0 + 1, in_len - 1);
            t[o] = {i0, i1, src - static_cast<T>(i0)};
        }
        return t;
    };
    auto ty = taps(Ho, H);
    auto tx = taps(Wo, W);
    std::vector<T> out(N * C * Ho * Wo);
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const T* X = x.data().data() + nc * H * W;
        T* O = out.data() + nc * Ho * Wo;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
            const auto& a = ty[oy];
            for (std::size_t ox = 0; ox < Wo; ++ox) {
                const auto& b = tx[ox];
                const T top = X[a.i0 * W + b.i0] * (T(1) - b.l1) + X[a.i0 * W + b.i1] * b.l1;
                const T bot = X[a.i1 * W + b.i0] * (T(1) - b.l1) + X[a.i1 * W + b.i1] * b.l1;
                O[oy * Wo + ox] = top * (T(1) - a.l1) + bot * a.l1;
            }
        }
    }
    return Tensor<T>::make_result(Shape{N, C, Ho, Wo}, std::move(out), {x}, "upsample_bilinear",
                                  [N, C, H, W, Ho, Wo, ty = std::move(ty), tx = std::move(tx)](auto& self) {
                                      auto& p = *self.parents[0];
                                      if (!p.requires_grad) return;
                                      auto& g = p.ensure_grad();
                                      for (std::size_t nc = 0; nc < N * C; ++nc) {
                                          T* D = g.data() + nc * H * W;
                                          const T* G = self.grad.data() + nc * Ho * Wo;
                                          for (std::size_t oy = 0; oy < Ho; ++oy) {
                                              const auto& a = ty[oy];
                                              for (std::size_t ox = 0; ox < Wo; ++ox) {
                                                  const auto& b = tx[ox];
                                                  const T v = G[oy * Wo + ox];
                                                  D[a.i0 * W + b.i0] += v * (T(1) - a.l1) * (T(1) - b.l1);
                                                  D[a.i0 * W + b.i1] += v * (T(1) - a.l1) * b.l1;
                                                  D[a.i1 * W + b.i0] += v * a.l1 * (T(1) - b.l1);
                                                  D[a.i1 * W + b.i1] += v * a.l1 * b.l1;
                                              }
                                          }
                                      }
                                  });
}

template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    detail::require_rank(x.shape(), 4, "global_avg_pool");
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    std::vector<T> out(N * C);
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        T s = 0;
        for (std::size_t i = 0; i < HW; ++i) s += x[nc * HW + i];
        out[nc] = s / static_cast<T>(HW);
    }
    return Tensor<T>::make_result(Shape{N, C, 1, 1}, std::move(out), {x}, "global_avg_pool", [HW](auto& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.ensure_grad();
        for (std::size_t nc = 0; nc < self.grad.size(); ++nc) {
            const T v = self.grad[nc] / static_cast<T>(HW);
            for (std::size_t i = 0; i < HW; ++i) g[nc * HW + i] += v;
        }
    });
}

/// [N,C,1,1] -> [N,C,H,W] by replication.
template <class T>
Tensor<T> expand_spatial(const Tensor<T>& x, std::size_t H, std::size_t W) {
    detail::require_rank(x.shape(), 4, "expand_spatial");
    if (x.dim(2) != 1 || x.dim(3) != 1) throw ShapeError("expand_spatial: expected [N,C,1,1], got " + shape_str(x.shape()));
    const std::size_t NC = x.dim(0) * x.dim(1), HW = H * W;
    std::vector<T> out(NC * HW);
    for (std::size_t nc = 0; nc < NC; ++nc) std::fill_n(out.begin() + nc * HW, HW, x[nc]);
    return Tensor<T>::make_result(Shape{x.dim(0), x.dim(1), H, W}, std::move(out), {x}, "expand_spatial",
                                  [NC, HW](auto& self) {
                                      auto& p = *self.parents[0];
                                      if (!p.requires_grad) return;
                                      auto& g = p.ensure_grad();
                                      for (std::size_t nc = 0; nc < NC; ++nc) {
                                          T s = 0;
                                          for (std::size_t i = 0; i < HW; ++i) s += self.grad[nc * HW + i];
                                          g[nc] += s;
                                      }
                                  });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Softmax over the last axis with max subtraction.
template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
    const std::size_t D = x.shape().back();
    const std::size_t rows = x.numel() / D;
    std::vector<T> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = x.data().data() + r * D;
        T* o = out.data() + r * D;
        const T m = *std::max_element(in, in + D);
        T s = 0;
        for (std::size_t i = 0; i < D; ++i) s += (o[i] = std::exp(in[i] - m));
        for (std::size_t i = 0; i < D; ++i) o[i] /= s;
    }
    return Tensor<T>::make_result(x.shape(), std::move(out), {x}, "softmax", [rows, D](auto& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const T* y = self.data.data() + r * D;
            const T* gy = self.grad.data() + r * D;
            T dot = 0;
            for (std::size_t i = 0; i < D; ++i) dot += y[i] * gy[i];
            for (std::size_t i = 0; i < D; ++i) g[r * D + i] += y[i] * (gy[i] - dot);
        }
    });
}

template <class T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
    if (!(eps > T(0))) throw std::invalid_argument("layernorm: eps must be positive");
    const std::size_t D = x.shape().back();
    if (gamma.shape() != Shape{D} || beta.shape() != Shape{D}) {
        throw ShapeError("layernorm: affine params must be [" + std::to_string(D) + "], got " + shape_str(gamma.shape()) +
                         " / " + shape_str(beta.shape()));
    }
    const std::size_t rows = x.numel() / D;
    std::vector<T> out(x.numel()), xhat(x.numel()), inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = x.data().data() + r * D;
        T mu = 0;
        for (std::size_t i = 0; i < D; ++i) mu += in[i];
        mu /= static_cast<T>(D);
        T var = 0;
        for (std::size_t i = 0; i < D; ++i) var += (in[i] - mu) * (in[i] - mu);
        var /= static_cast<T>(D);
        inv_std[r] = T(1) / std::sqrt(var + eps);
        for (std::size_t i = 0; i < D; ++i) {
            xhat[r * D + i] = (in[i] - mu) * inv_std[r];
            out[r * D + i] = xhat[r * D + i] * gamma[i] + beta[i];
        }
    }
    return Tensor<T>::make_result(
        x.shape(), std::move(out), {x, gamma, beta}, "layernorm",
        [rows, D, xhat = std::move(xhat), inv_std = std::move(inv_std)](auto& self) {
            auto& px = *self.parents[0];
            auto& pg = *self.parents[1];
            auto& pb = *self.parents[2];
            const T* G = self.grad.data();
            if (pg.requires_grad) {
                auto& g = pg.ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t i = 0; i < D; ++i) g[i] += G[r * D + i] * xhat[r * D + i];
            }
            if (pb.requires_grad) {
                auto& g = pb.ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t i = 0; i < D; ++i) g[i] += G[r * D + i];
            }
            if (px.requires_grad) {
                auto& g = px.ensure_grad();
                for (std::size_t r = 0; r < rows; ++r) {
                    T m1 = 0, m2 = 0;
                    for (std::size_t i = 0; i < D; ++i) {
                        const T d = G[r * D + i] * pg.data[i];
                        m1 += d;
                        m2 += d * xhat[r * D + i];
                    }
                    m1 /= static_cast<T>(D);
                    m2 /= static_cast<T>(D);
                    for (std::size_t i = 0; i < D; ++i) {
                        const T d = G[r * D + i] * pg.data[i];
                        g[r * D + i] += inv_std[r] * (d - m1 - xhat[r * D + i] * m2);
                    }
                }
            }
        });
}

/// Running statistics owned by a batch-norm layer. Initialized to mean 0, var 1.
template <class T>
struct BatchNormStats {
    Tensor<T> mean;
    Tensor<T> var;

    explicit BatchNormStats(std::size_t channels = 1)
        : mean(Tensor<T>::zeros({channels})), var(Tensor<T>::ones({channels})) {}
};

/// Batch norm over NCHW. Train mode normalizes with the biased batch variance
/// and updates running stats with the unbiased one; eval mode uses the running
/// stats only.
template <class T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormStats<T>& stats,
                      Mode mode, T momentum = T(0.1), T eps = T(1e-5)) {
    detail::require_rank(x.shape(), 4, "batchnorm2d");
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (gamma.shape() != Shape{C} || beta.shape() != Shape{C} || stats.mean.shape() != Shape{C}) {
        throw ShapeError("batchnorm2d: per-channel params must be [" + std::to_string(C) + "] for input " +
                         shape_str(x.shape()));
    }
    const std::size_t count = N * HW;
    std::vector<T> mu(C), inv_std(C);
    if (mode == Mode::train) {
        if (count < 2) throw ShapeError("batchnorm2d: train mode needs N*H*W >= 2 per channel, got " + shape_str(x.shape()));
        for (std::size_t c = 0; c < C; ++c) {
            T s = 0;
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t i = 0; i < HW; ++i) s += x[(n * C + c) * HW + i];
            const T m = s / static_cast<T>(count);
            T v = 0;
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t i = 0; i < HW; ++i) {
                    const T d = x[(n * C + c) * HW + i] - m;
                    v += d * d;
                }
            v /= static_cast<T>(count);
            mu[c] = m;
            inv_std[c] = T(1) / std::sqrt(v + eps);
            const T unbiased = v * static_cast<T>(count) / static_cast<T>(count - 1);
            stats.mean[c] = (T(1) - momentum) * stats.mean[c] + momentum * m;
            stats.var[c] = (T(1) - momentum) * stats.var[c] + momentum * unbiased;
        }
    } else {
        for (std::size_t c = 0; c < C; ++c) {
            mu[c] = stats.mean[c];
            inv_std[c] = T(1) / std::sqrt(stats.var[c] + eps);
        }
    }
    std::vector<T> out(x.numel()), xhat(x.numel());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < HW; ++i) {
                const std::size_t k = (n * C + c) * HW + i;
                xhat[k] = (x[k] - mu[c]) * inv_std[c];
                out[k] = xhat[k] * gamma[c] + beta[c];
            }
    const bool batch_stats = mode == Mode::train;
    return Tensor<T>::make_result(
        x.shape(), std::move(out), {x, gamma, beta}, "batchnorm2d",
        [N, C, HW, count, batch_stats, xhat = std::move(xhat), inv_std = std::move(inv_std)](auto& self) {
            auto& px = *self.parents[0];
            auto& pg = *self.parents[1];
            auto& pb = *self.parents[2];
            const T* G = self.grad.data();
            for (std::size_t c = 0; c < C; ++c) {
                T sg = 0, sgx = 0;
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t i = 0; i < HW; ++i) {
                        const std::size_t k = (n * C + c) * HW + i;
                        sg += G[k];
                        sgx += G[k] * xhat[k];
                    }
                if (pg.requires_grad) pg.ensure_grad()[c] += sgx;
                if (pb.requires_grad) pb.ensure_grad()[c] += sg;
                if (!px.requires_grad) continue;
                auto& g = px.ensure_grad();
                const T scale_c = pg.data[c] * inv_std[c];
                const T m1 = sg / static_cast<T>(count), m2 = sgx / static_cast<T>(count);
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t i = 0; i < HW; ++i) {
                        const std::size_t k = (n * C + c) * HW + i;
                        g[k] += batch_stats ? scale_c * (G[k] - m1 - xhat[k] * m2) : scale_c * G[k];
                    }
            }
        });
}

// ---------------------------------------------------------------------------
// Regularization
// ---------------------------------------------------------------------------

/// Inverted dropout: in train mode each element is zeroed with probability p
/// and survivors are scaled by 1/(1-p). Eval mode (or p == 0) is the identity.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double p, Mode mode, Rng& rng) {
    if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("dropout: p must be in [0, 1)");
    if (mode == Mode::eval || p == 0.0) return x;
    const T keep_scale = T(1) / static_cast<T>(1.0 - p);
    std::vector<T> mask(x.numel());
    for (auto& m : mask) m = rng.uniform() < p ? T(0) : keep_scale;
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * mask[i];
    return Tensor<T>::make_result(x.shape(), std::move(out), {x}, "dropout", [mask = std::move(mask)](auto& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
    });
}

}  // namespace t2u
