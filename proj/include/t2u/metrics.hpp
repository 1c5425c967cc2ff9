#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>

namespace t2u {

struct ConfusionCounts {
    std::uint64_t tp = 0;
    std::uint64_t fp = 0;
    std::uint64_t fn = 0;
    std::uint64_t tn = 0;

    std::uint64_t total() const { return tp + fp + fn + tn; }

    ConfusionCounts& operator+=(const ConfusionCounts& o) {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        tn += o.tn;
        return *this;
    }
    friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

/// Binarizes q at `threshold` (q >= threshold is positive) and tallies it
/// against the binary target p.
template <class T, class U>
ConfusionCounts confusion_counts(std::span<const T> q, std::span<const U> p, double threshold = 0.5) {
    if (q.size() != p.size()) {
        throw std::invalid_argument("confusion_counts: size mismatch " + std::to_string(q.size()) + " vs " +
                                    std::to_string(p.size()));
    }
    ConfusionCounts c;
    for (std::size_t i = 0; i < q.size(); ++i) {
        const bool pred = static_cast<double>(q[i]) >= threshold;
        const bool truth = static_cast<double>(p[i]) >= 0.5;
        if (pred && truth) ++c.tp;
        else if (pred) ++c.fp;
        else if (truth) ++c.fn;
        else ++c.tn;
    }
    return c;
}

/// 2TP / (2TP + FP + FN); 1 when both masks are empty.
inline double dsc(const ConfusionCounts& c) {
    const std::uint64_t den = 2 * c.tp + c.fp + c.fn;
    return den == 0 ? 1.0 : static_cast<double>(2 * c.tp) / static_cast<double>(den);
}

/// TP / (TP + FP + FN); 1 when both masks are empty.
inline double iou(const ConfusionCounts& c) {
    const std::uint64_t den = c.tp + c.fp + c.fn;
    return den == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(den);
}

}  // namespace t2u
