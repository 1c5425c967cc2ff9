#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "t2u/nn.hpp"

namespace t2u {

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct AdamConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias correction. Moments are stored per parameter in the same
/// precision as the parameter.
template <class T>
class Adam {
public:
    Adam(std::vector<NamedTensor<T>> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        for (const auto& p : params_) {
            m_.emplace_back(p.tensor.numel(), T(0));
            v_.emplace_back(p.tensor.numel(), T(0));
        }
    }

    /// One update. Parameters without a gradient are treated as having a zero
    /// gradient. A non-finite gradient aborts before anything is modified.
    void step() {
        for (const auto& p : params_) {
            for (T g : p.tensor.grad()) {
                if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter '" + p.name + "'");
            }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
        const T lr = static_cast<T>(cfg_.lr), eps = static_cast<T>(cfg_.eps);
        const T c1 = static_cast<T>(bc1), c2 = static_cast<T>(bc2);
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto& theta = params_[k].tensor.storage();
            const auto grad = params_[k].tensor.grad();
            auto& m = m_[k];
            auto& v = v_[k];
            for (std::size_t i = 0; i < theta.size(); ++i) {
                const T g = grad.empty() ? T(0) : grad[i];
                m[i] = b1 * m[i] + (T(1) - b1) * g;
                v[i] = b2 * v[i] + (T(1) - b2) * g * g;
                const T mhat = m[i] / c1;
                const T vhat = v[i] / c2;
                theta[i] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

    double lr() const { return cfg_.lr; }
    void set_lr(double lr) { cfg_.lr = lr; }
    std::uint64_t step_count() const { return t_; }
    void set_step_count(std::uint64_t t) { t_ = t; }
    const AdamConfig& config() const { return cfg_; }

    const std::vector<NamedTensor<T>>& params() const { return params_; }
    std::vector<std::vector<T>>& first_moments() { return m_; }
    std::vector<std::vector<T>>& second_moments() { return v_; }
    const std::vector<std::vector<T>>& first_moments() const { return m_; }
    const std::vector<std::vector<T>>& second_moments() const { return v_; }

private:
    std::vector<NamedTensor<T>> params_;
    AdamConfig cfg_;
    std::vector<std::vector<T>> m_, v_;
    std::uint64_t t_ = 0;
};

struct PlateauConfig {
    std::size_t patience = 3;
    double factor = 0.1;
    double min_lr = 1e-6;
    double threshold = 1e-6;

    void validate() const {
        if (patience == 0) throw std::invalid_argument("sched.patience must be >= 1");
        if (!(factor > 0 && factor < 1)) throw std::invalid_argument("sched.factor must be in (0, 1)");
        if (!(min_lr > 0)) throw std::invalid_argument("sched.min_lr must be positive");
        if (!(threshold >= 0)) throw std::invalid_argument("sched.threshold must be non-negative");
    }
};

/// Reduce-on-plateau on a lower-is-better metric. A value counts as an
/// improvement when it beats the best so far by at least `threshold`.
class PlateauScheduler {
public:
    PlateauScheduler(PlateauConfig cfg, double initial_lr) : cfg_(cfg), lr_(std::max(initial_lr, 0.0)) {}

    /// Returns the learning rate to use from the next epoch on.
    double step(double metric) {
        if (!seen_ || metric < best_ - cfg_.threshold) {
            best_ = metric;
            seen_ = true;
            bad_epochs_ = 0;
        } else if (++bad_epochs_ >= cfg_.patience) {
            lr_ = std::max(lr_ * cfg_.factor, std::min(cfg_.min_lr, lr_));
            bad_epochs_ = 0;
        }
        return lr_;
    }

    double lr() const { return lr_; }
    double best() const { return best_; }
    bool has_best() const { return seen_; }
    std::size_t bad_epochs() const { return bad_epochs_; }
    const PlateauConfig& config() const { return cfg_; }

    void restore(double lr, double best, bool seen, std::size_t bad_epochs) {
        lr_ = lr;
        best_ = best;
        seen_ = seen;
        bad_epochs_ = bad_epochs;
    }

private:
    PlateauConfig cfg_;
    double lr_;
    double best_ = 0;
    bool seen_ = false;
    std::size_t bad_epochs_ = 0;
};

}  // namespace t2u
