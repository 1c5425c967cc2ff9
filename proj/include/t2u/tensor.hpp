#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace t2u {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

inline thread_local int no_grad_depth = 0;

// Running hash of every branch decision taken by piecewise ops (relu sign,
// max-pool argmax, clamp side). Finite-difference probes compare it against
// the base point to detect when a perturbation crossed a kink.
struct KinkTrace {
    std::uint64_t hash = 1469598103934665603ull;
    void mix(std::uint64_t v) {
        hash ^= v + 0x9e3779b97f4a7c15ull + (hash << 6) + (hash >> 2);
    }
};

inline thread_local KinkTrace* active_kink_trace = nullptr;

inline void record_kink(std::uint64_t v) {
    if (active_kink_trace) active_kink_trace->mix(v);
}

inline bool tracing_kinks() { return active_kink_trace != nullptr; }

}  // namespace detail

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

class NoGradGuard {
public:
    NoGradGuard() { ++detail::no_grad_depth; }
    ~NoGradGuard() { --detail::no_grad_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

class KinkTraceScope {
public:
    explicit KinkTraceScope(detail::KinkTrace& trace) : previous_(detail::active_kink_trace) {
        detail::active_kink_trace = &trace;
    }
    ~KinkTraceScope() { detail::active_kink_trace = previous_; }
    KinkTraceScope(const KinkTraceScope&) = delete;
    KinkTraceScope& operator=(const KinkTraceScope&) = delete;

private:
    detail::KinkTrace* previous_;
};

/// Dense row-major tensor with reverse-mode autodiff.
///
/// A Tensor is a cheap handle: copies share the same storage and graph node.
/// Operations record a backward closure on their result when gradient mode is
/// enabled and at least one input requires a gradient.
template <class T>
class Tensor {
public:
    using value_type = T;

    struct Node {
        Shape shape;
        std::vector<T> data;
        std::vector<T> grad;  // empty until first accumulation
        bool requires_grad = false;
        std::vector<std::shared_ptr<Node>> parents;
        std::function<void(Node&)> backward;  // reads this->grad, accumulates into parents
        const char* op = "leaf";

        std::vector<T>& ensure_grad() {
            if (grad.empty()) grad.assign(data.size(), T(0));
            return grad;
        }
    };

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
        : node_(std::make_shared<Node>()) {
        for (auto d : shape) {
            if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
        }
        node_->data.assign(shape_numel(shape), fill);
        node_->shape = std::move(shape);
        node_->requires_grad = requires_grad;
    }

    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
        : node_(std::make_shared<Node>()) {
        for (auto d : shape) {
            if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
        }
        if (shape_numel(shape) != data.size()) {
            throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                             shape_str(shape));
        }
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return Tensor(std::move(shape), T(0), requires_grad);
    }
    static Tensor ones(Shape shape, bool requires_grad = false) {
        return Tensor(std::move(shape), T(1), requires_grad);
    }
    static Tensor scalar(T v, bool requires_grad = false) { return Tensor(Shape{1}, v, requires_grad); }

    bool defined() const { return static_cast<bool>(node_); }

    const Shape& shape() const { return node_->shape; }
    std::size_t ndim() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const {
        if (i >= node_->shape.size()) {
            throw ShapeError("axis " + std::to_string(i) + " out of range for shape " + shape_str(shape()));
        }
        return node_->shape[i];
    }
    std::size_t numel() const { return node_->data.size(); }

    std::span<T> data() { return node_->data; }
    std::span<const T> data() const { return node_->data; }
    std::vector<T>& storage() { return node_->data; }
    const std::vector<T>& storage() const { return node_->data; }

    T& operator[](std::size_t i) { return node_->data[i]; }
    const T& operator[](std::size_t i) const { return node_->data[i]; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::vector<T>& grad_storage() { return node_->grad; }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        node_->requires_grad = v;
        if (!v) node_->grad.clear();
        return *this;
    }

    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    T item() const {
        if (numel() != 1) throw ShapeError("item() needs a single-element tensor, got " + shape_str(shape()));
        return node_->data[0];
    }

    bool is_leaf() const { return !node_->backward; }
    const char* op_name() const { return node_->op; }

    /// Copy of the values with no graph history.
    Tensor detach() const { return Tensor(node_->shape, node_->data, false); }

    const std::shared_ptr<Node>& node() const { return node_; }

    /// Backpropagate from a scalar. Leaf gradients accumulate across calls;
    /// intermediate gradients are rebuilt for every call and released after.
    void backward() const {
        if (numel() != 1) {
            throw ShapeError("backward() requires a scalar loss, got shape " + shape_str(shape()));
        }
        if (!node_->requires_grad) throw std::logic_error("backward() on a tensor that does not require grad");

        std::vector<Node*> order = topological_order();
        for (Node* n : order) {
            if (n->backward) n->grad.assign(n->data.size(), T(0));
        }
        node_->ensure_grad()[0] += T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node* n = *it;
            if (n->backward) n->backward(*n);
        }
        for (Node* n : order) {
            if (n->backward) std::vector<T>().swap(n->grad);
        }
    }

    /// Builds an op result. The backward closure is attached only when some
    /// parent participates in differentiation.
    static Tensor make_result(Shape shape, std::vector<T> data, std::vector<Tensor> parents, const char* op,
                              std::function<void(Node&)> backward) {
        Tensor out(std::move(shape), std::move(data), false);
        out.node_->op = op;
        bool needs = false;
        if (grad_enabled()) {
            for (const auto& p : parents) needs = needs || p.requires_grad();
        }
        if (needs) {
            out.node_->requires_grad = true;
            for (auto& p : parents) out.node_->parents.push_back(p.node_);
            out.node_->backward = std::move(backward);
        }
        return out;
    }

private:
    std::vector<Node*> topological_order() const {
        std::vector<Node*> order;
        std::unordered_set<Node*> visited;
        std::vector<std::pair<Node*, std::size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        visited.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, next] = stack.back();
            if (next < n->parents.size()) {
                Node* p = n->parents[next++].get();
                if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
        return order;
    }

    std::shared_ptr<Node> node_;
};

/// Copies values across precisions. The result is a leaf.
template <class To, class From>
Tensor<To> tensor_cast(const Tensor<From>& t, bool requires_grad = false) {
    std::vector<To> data(t.data().begin(), t.data().end());
    return Tensor<To>(t.shape(), std::move(data), requires_grad);
}

}  // namespace t2u
