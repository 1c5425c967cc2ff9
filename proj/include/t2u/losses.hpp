#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "t2u/ops.hpp"
#include "t2u/tensor.hpp"

namespace t2u {

enum class LossKind { bce, dice, bce_plus_dice };

inline LossKind parse_loss_kind(const std::string& s) {
    if (s == "bce") return LossKind::bce;
    if (s == "dice") return LossKind::dice;
    if (s == "bce_plus_dice") return LossKind::bce_plus_dice;
    throw std::invalid_argument("unknown loss kind '" + s + "' (expected bce, dice or bce_plus_dice)");
}

inline std::string to_string(LossKind k) {
    switch (k) {
        case LossKind::bce: return "bce";
        case LossKind::dice: return "dice";
        case LossKind::bce_plus_dice: return "bce_plus_dice";
    }
    return "?";
}

struct LossConfig {
    LossKind kind = LossKind::bce_plus_dice;
    double dice_smooth = 1.0;
    double bce_epsilon = 1e-7;

    void validate() const {
        if (!(dice_smooth > 0)) throw std::invalid_argument("loss.dice_smooth must be positive");
        if (!(bce_epsilon > 0 && bce_epsilon < 0.5)) throw std::invalid_argument("loss.bce_epsilon must be in (0, 0.5)");
    }
};

/// Mean binary cross-entropy -p log q - (1-p) log(1-q), with q clamped to
/// [eps, 1-eps]. Clamped positions get no gradient.
template <class T>
Tensor<T> bce_loss(const Tensor<T>& q, const Tensor<T>& p, double eps = 1e-7) {
    detail::require_same_shape(q.shape(), p.shape(), "bce_loss");
    const T lo = static_cast<T>(eps), hi = static_cast<T>(1.0 - eps);
    const std::size_t n = q.numel();
    T total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const T qi = std::clamp(q[i], lo, hi);
        if (detail::tracing_kinks()) detail::record_kink(q[i] < lo ? 1u : q[i] > hi ? 2u : 0u);
        total += -p[i] * std::log(qi) - (T(1) - p[i]) * std::log(T(1) - qi);
    }
    return Tensor<T>::make_result(Shape{1}, {total / static_cast<T>(n)}, {q, p}, "bce_loss", [lo, hi, n](auto& self) {
        auto& pq = *self.parents[0];
        auto& pp = *self.parents[1];
        const T g0 = self.grad[0] / static_cast<T>(n);
        if (pq.requires_grad) {
            auto& g = pq.ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                const T qi = pq.data[i];
                if (qi < lo || qi > hi) continue;
                g[i] += g0 * (-pp.data[i] / qi + (T(1) - pp.data[i]) / (T(1) - qi));
            }
        }
        if (pp.requires_grad) {
            auto& g = pp.ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                const T qi = std::clamp(pq.data[i], lo, hi);
                g[i] += g0 * (std::log(T(1) - qi) - std::log(qi));
            }
        }
    });
}

/// 1 - (2 sum(pq) + s) / (sum(p) + sum(q) + s), sums over every element.
template <class T>
Tensor<T> dice_loss(const Tensor<T>& q, const Tensor<T>& p, double smooth = 1.0) {
    detail::require_same_shape(q.shape(), p.shape(), "dice_loss");
    const T s = static_cast<T>(smooth);
    T inter = 0, sp = 0, sq = 0;
    for (std::size_t i = 0; i < q.numel(); ++i) {
        inter += p[i] * q[i];
        sp += p[i];
        sq += q[i];
    }
    const T num = T(2) * inter + s, den = sp + sq + s;
    return Tensor<T>::make_result(Shape{1}, {T(1) - num / den}, {q, p}, "dice_loss", [num, den](auto& self) {
        auto& pq = *self.parents[0];
        auto& pp = *self.parents[1];
        const T g0 = self.grad[0];
        // d/dq_i = -(2 p_i den - num) / den^2, symmetric for p
        if (pq.requires_grad) {
            auto& g = pq.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += -g0 * (T(2) * pp.data[i] * den - num) / (den * den);
        }
        if (pp.requires_grad) {
            auto& g = pp.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += -g0 * (T(2) * pq.data[i] * den - num) / (den * den);
        }
    });
}

/// Segmentation loss on logits; probabilities are sigmoid(logits).
template <class T>
Tensor<T> segmentation_loss(const Tensor<T>& logits, const Tensor<T>& target, const LossConfig& cfg) {
    const Tensor<T> q = sigmoid(logits);
    switch (cfg.kind) {
        case LossKind::bce: return bce_loss(q, target, cfg.bce_epsilon);
        case LossKind::dice: return dice_loss(q, target, cfg.dice_smooth);
        case LossKind::bce_plus_dice:
            return add(bce_loss(q, target, cfg.bce_epsilon), dice_loss(q, target, cfg.dice_smooth));
    }
    throw std::logic_error("unreachable loss kind");
}

}  // namespace t2u
