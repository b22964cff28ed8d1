#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation.
//
// A Tensor is a shared handle to a Node. Ops that see at least one input with
// requires_grad (while grad mode is on) record their inputs and a backward
// closure on the output node, so the autograd graph is the set of nodes
// reachable from the loss. backward() linearises that graph into a GradTape
// (reverse topological order) and replays it once.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "errors.hpp"

namespace cvmh {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

namespace detail {
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// Disables graph recording for its lifetime (evaluation, optimizer updates).
class NoGradGuard {
   public:
    NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

   private:
    bool prev_;
};

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until a gradient reaches this node
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    Node() = default;
    Node(const Node&) = delete;
    Node& operator=(const Node&) = delete;

    // Unlinks long input chains iteratively so deep graphs cannot overflow the
    // stack through recursive shared_ptr destruction.
    ~Node() {
        std::vector<std::shared_ptr<Node>> stack = std::move(inputs);
        backward = nullptr;
        while (!stack.empty()) {
            auto n = std::move(stack.back());
            stack.pop_back();
            if (n.use_count() == 1) {
                for (auto& c : n->inputs) stack.push_back(std::move(c));
                n->inputs.clear();
                n->backward = nullptr;
            }
        }
    }

    bool is_leaf() const { return !backward; }
    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), T(0));
    }
};

template <typename T>
class Tensor {
   public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) { return full(std::move(shape), T(0), requires_grad); }
    static Tensor ones(Shape shape, bool requires_grad = false) { return full(std::move(shape), T(1), requires_grad); }
    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        auto n = std::make_shared<Node<T>>();
        n->data.assign(cvmh::numel(shape), value);
        n->shape = std::move(shape);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }
    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
        if (cvmh::numel(shape) != values.size())
            throw ConfigError("tensor shape " + shape_str(shape) + " does not match " +
                              std::to_string(values.size()) + " values");
        auto n = std::make_shared<Node<T>>();
        n->shape = std::move(shape);
        n->data = std::move(values);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<T> data() { return node_->data; }
    std::span<const T> data() const { return node_->data; }
    std::vector<T>& values() { return node_->data; }
    const std::vector<T>& values() const { return node_->data; }

    /// Gradient buffer; allocated (zero) on first access.
    std::span<T> grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    bool has_grad() const { return !node_->grad.empty(); }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool r) {
        node_->requires_grad = r;
        return *this;
    }

    T item() const {
        if (numel() != 1) throw ConfigError("item() on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }
    T& operator[](std::size_t i) { return node_->data[i]; }
    const T& operator[](std::size_t i) const { return node_->data[i]; }

    /// Value copy without graph history.
    Tensor detach() const { return from(shape(), node_->data, false); }

    bool all_finite() const {
        for (const T v : node_->data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(node_->data.begin(), node_->data.end());
        return Tensor<U>::from(shape(), std::move(out), requires_grad());
    }

    Node<T>& node() const { return *node_; }
    const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

   private:
    std::shared_ptr<Node<T>> node_;
};

/// Creates an op result. When grad mode is on and any input requires grad, the
/// output joins the graph with `backward` reading out.grad and accumulating
/// into the inputs' grad buffers.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::initializer_list<Tensor<T>> inputs, const char* op,
                      std::function<void(Node<T>&)> backward) {
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->op = op;
    if (grad_enabled()) {
        bool any = false;
        for (const auto& t : inputs) any = any || (t.defined() && t.requires_grad());
        if (any) {
            n->requires_grad = true;
            for (const auto& t : inputs)
                if (t.defined()) n->inputs.push_back(t.node_ptr());
            n->backward = std::move(backward);
        }
    }
    return Tensor<T>(std::move(n));
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const std::vector<Tensor<T>>& inputs, const char* op,
                      std::function<void(Node<T>&)> backward) {
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->op = op;
    if (grad_enabled()) {
        bool any = false;
        for (const auto& t : inputs) any = any || (t.defined() && t.requires_grad());
        if (any) {
            n->requires_grad = true;
            for (const auto& t : inputs)
                if (t.defined()) n->inputs.push_back(t.node_ptr());
            n->backward = std::move(backward);
        }
    }
    return Tensor<T>(std::move(n));
}

/// Gradient sink for an input node: nullptr when that input takes no gradient.
template <typename T>
T* grad_sink(const std::shared_ptr<Node<T>>& n) {
    if (!n || !n->requires_grad) return nullptr;
    n->ensure_grad();
    return n->grad.data();
}

/// Reverse topological order of the graph below a root.
template <typename T>
class GradTape {
   public:
    explicit GradTape(const Tensor<T>& root) {
        std::unordered_set<const Node<T>*> seen;
        // Iterative post-order DFS; post-order of a DAG is a topological order
        // with inputs before consumers.
        std::vector<std::pair<Node<T>*, std::size_t>> stack;
        Node<T>* r = &root.node();
        if (!r->requires_grad) return;
        stack.emplace_back(r, 0);
        seen.insert(r);
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->inputs.size()) {
                Node<T>* child = node->inputs[next++].get();
                if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
            } else {
                order_.push_back(node);
                stack.pop_back();
            }
        }
    }

    /// Nodes from the root down to the leaves; each appears once.
    std::vector<Node<T>*> reverse_order() const { return {order_.rbegin(), order_.rend()}; }
    std::size_t size() const { return order_.size(); }

   private:
    std::vector<Node<T>*> order_;
};

/// Backpropagates d(loss)/d(.) into every reachable tensor with requires_grad.
/// Leaf gradients accumulate across calls until zeroed; interior gradients
/// are reset on every call.
template <typename T>
void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) throw ConfigError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    if (!loss.requires_grad()) throw ConfigError("backward() on a tensor that is not part of a gradient tape");
    GradTape<T> tape(loss);
    const auto nodes = tape.reverse_order();
    for (Node<T>* n : nodes)
        if (!n->is_leaf()) n->grad.assign(n->data.size(), T(0));
    nodes.front()->grad[0] += T(1);
    for (Node<T>* n : nodes)
        if (!n->is_leaf()) n->backward(*n);
}

}  // namespace cvmh
