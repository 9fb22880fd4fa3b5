#pragma once

// Dense tensor with a dynamic reverse-mode tape.
//
// Every op that sees an input with requires_grad records a Node holding its
// parents and a backward closure. The graph is rebuilt on each forward pass
// and released by backward(), so a second backward on the same root throws.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace solider {

using Shape = std::vector<std::size_t>;

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct UnknownPrimitiveError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct StaleGraphError : std::logic_error {
    using std::logic_error::logic_error;
};
struct NonFiniteError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline std::size_t numel_of(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
    os << ')';
    return os.str();
}

namespace detail {
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables tape recording for the enclosing scope.
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;
    bool is_leaf = true;
    bool released = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    std::vector<T>& ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), T(0));
        return grad;
    }
};

template <typename T>
class Tensor {
public:
    using value_type = T;
    using NodePtr = std::shared_ptr<Node<T>>;

    Tensor() = default;
    explicit Tensor(NodePtr n) : node_(std::move(n)) {}

    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
        if (numel_of(shape) != data.size())
            throw ShapeError("tensor: shape " + shape_str(shape) + " holds " + std::to_string(numel_of(shape)) +
                             " elements but data has " + std::to_string(data.size()));
        for (auto d : shape)
            if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_str(shape));
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto n = numel_of(shape);
        return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
    }
    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        auto n = numel_of(shape);
        return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
    }
    static Tensor scalar(T value, bool requires_grad = false) { return Tensor({1}, {value}, requires_grad); }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim() const { return node_->shape.size(); }
    std::size_t size(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t numel() const { return node_->data.size(); }

    std::vector<T>& data() { return node_->data; }
    const std::vector<T>& data() const { return node_->data; }
    std::vector<T>& grad() { return node_->grad; }
    const std::vector<T>& grad() const { return node_->grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    void zero_grad() { node_->grad.clear(); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool r) { node_->requires_grad = r; }
    bool is_leaf() const { return node_->is_leaf; }
    const char* op_name() const { return node_->op; }

    T item() const {
        if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not a scalar");
        return node_->data[0];
    }
    T operator[](std::size_t i) const { return node_->data[i]; }

    /// Copy of the values with no graph history.
    Tensor detach() const { return Tensor(shape(), data(), false); }
    Tensor clone(bool requires_grad) const { return Tensor(shape(), data(), requires_grad); }

    const NodePtr& node() const { return node_; }

private:
    NodePtr node_;
};

/// Creates the output tensor of a primitive and, when any input is tracked
/// and grad mode is on, links it into the tape.
template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> data, std::vector<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward) {
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->op = op;
    bool track = false;
    if (grad_enabled())
        for (const auto& in : inputs) track = track || in.requires_grad();
    if (track) {
        n->requires_grad = true;
        n->is_leaf = false;
        n->parents.reserve(inputs.size());
        for (auto& in : inputs) n->parents.push_back(in.node());
        n->backward_fn = std::move(backward);
    }
    return Tensor<T>(std::move(n));
}

/// Reverse-mode sweep from a scalar root. Leaf gradients accumulate; the
/// interior of the graph is released afterwards.
template <typename T>
void backward(const Tensor<T>& root) {
    if (!root.defined()) throw std::invalid_argument("backward: undefined root");
    if (root.numel() != 1) throw ShapeError("backward: root must be scalar, got " + shape_str(root.shape()));
    auto* r = root.node().get();
    if (r->released) throw StaleGraphError("backward: graph already consumed; run a new forward pass");
    if (!r->requires_grad) throw std::invalid_argument("backward: root does not depend on any tracked tensor");
    if (r->is_leaf) {
        r->ensure_grad()[0] += T(1);
        return;
    }

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{r, 0}};
    seen.insert(r);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* p = node->parents[next++].get();
            if (p->requires_grad && !p->is_leaf && !seen.count(p)) {
                if (p->released) throw StaleGraphError("backward: graph contains a consumed node");
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    r->ensure_grad()[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (!n->grad.empty() && n->backward_fn) n->backward_fn(*n);
    }
    for (Node<T>* n : order) {
        n->backward_fn = nullptr;
        n->parents.clear();
        n->grad.clear();
        n->grad.shrink_to_fit();
        n->released = true;
    }
}

template <typename T>
bool all_finite(const std::vector<T>& v) {
    for (T x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

}  // namespace solider
