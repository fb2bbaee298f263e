// Reverse-mode autodiff tensor.
//
// A Tensor is a shared handle to a graph node holding a row-major value
// buffer, an optional gradient buffer, and the backward closure that pushes
// gradients to its parents. Values are immutable once created; parameter
// updates between optimizer steps go through mutable_data() on leaves.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <unordered_set>
#include <vector>

#include "rvernet/common.hpp"

namespace rvernet {

namespace detail {
inline thread_local int g_no_grad_depth = 0;
}

inline bool grad_enabled() { return detail::g_no_grad_depth == 0; }

// Scoped switch that disables graph construction (evaluation passes).
struct NoGradGuard {
    NoGradGuard() { ++detail::g_no_grad_depth; }
    ~NoGradGuard() { --detail::g_no_grad_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
struct TensorNode {
    std::vector<int64_t> shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until backward touches this node
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode<T>>> parents;
    // Reads this node's grad and accumulates into parents' grads.
    std::function<void(TensorNode<T>&)> backward_fn;
    const char* op = "leaf";

    int64_t numel() const {
        int64_t n = 1;
        for (int64_t d : shape) n *= d;
        return n;
    }
    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), T(0));
    }
};

template <typename T>
class Tensor {
public:
    using Node = TensorNode<T>;

    Tensor() = default;

    Tensor(std::vector<int64_t> shape, std::vector<T> data, bool requires_grad = false) {
        int64_t n = 1;
        for (int64_t d : shape) {
            RV_CHECK_DIM(d > 0, "tensor dimensions must be positive, got ", shape_str(shape));
            n *= d;
        }
        RV_CHECK_DIM(n == (int64_t)data.size(), "shape ", shape_str(shape), " implies ", n,
                     " elements but buffer holds ", data.size());
        n_ = std::make_shared<Node>();
        n_->shape = std::move(shape);
        n_->data = std::move(data);
        n_->requires_grad = requires_grad && grad_enabled();
    }

    static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false) {
        int64_t n = 1;
        for (int64_t d : shape) n *= d;
        return Tensor(std::move(shape), std::vector<T>((size_t)n, T(0)), requires_grad);
    }

    static Tensor full(std::vector<int64_t> shape, T value, bool requires_grad = false) {
        int64_t n = 1;
        for (int64_t d : shape) n *= d;
        return Tensor(std::move(shape), std::vector<T>((size_t)n, value), requires_grad);
    }

    static Tensor scalar(T value, bool requires_grad = false) {
        return Tensor({1}, {value}, requires_grad);
    }

    bool defined() const { return n_ != nullptr; }
    const std::vector<int64_t>& shape() const { return n_->shape; }
    int64_t dim(int i) const {
        int nd = (int)n_->shape.size();
        if (i < 0) i += nd;
        RV_CHECK_DIM(i >= 0 && i < nd, "axis ", i, " out of range for ", shape_str(n_->shape));
        return n_->shape[i];
    }
    int ndim() const { return (int)n_->shape.size(); }
    int64_t numel() const { return n_->numel(); }
    bool requires_grad() const { return n_->requires_grad; }

    const std::vector<T>& data() const { return n_->data; }
    // Leaf-only mutation hook for optimizers and initializers.
    std::vector<T>& mutable_data() { return n_->data; }
    const std::vector<T>& grad() const { return n_->grad; }
    bool has_grad() const { return !n_->grad.empty(); }
    void zero_grad() { n_->grad.clear(); }

    T item() const {
        RV_CHECK_DIM(numel() == 1, "item() requires a scalar tensor, got ", shape_str(shape()));
        return n_->data[0];
    }

    std::shared_ptr<Node> node() const { return n_; }

    static Tensor from_node(std::shared_ptr<Node> n) {
        Tensor t;
        t.n_ = std::move(n);
        return t;
    }

private:
    std::shared_ptr<Node> n_;
};

namespace detail {

// Creates a result node wired to its parents; backward_fn is attached only
// when some parent needs gradients and grad mode is on.
template <typename T>
Tensor<T> make_op_result(const char* op, std::vector<int64_t> shape, std::vector<T> data,
                         std::vector<std::shared_ptr<TensorNode<T>>> parents,
                         std::function<void(TensorNode<T>&)> backward_fn) {
    bool needs = false;
    if (grad_enabled()) {
        for (auto& p : parents)
            if (p->requires_grad) { needs = true; break; }
    }
    auto node = std::make_shared<TensorNode<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->op = op;
    if (needs) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor<T>::from_node(std::move(node));
}

}  // namespace detail

// Reverse traversal in topological order; each node visited exactly once.
// Gradients accumulate additively, so a leaf used twice receives both
// contributions.
template <typename T>
void backward(const Tensor<T>& loss) {
    RV_CHECK_DIM(loss.numel() == 1, "backward() requires a scalar loss, got ",
                 shape_str(loss.shape()));
    using Node = TensorNode<T>;
    Node* root = loss.node().get();

    // Iterative post-order DFS.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.push_back({root, 0});
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx++].get();
            if (!visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
}

// Central finite differences against the recorded gradients.
// Returns max over coordinates of |a-n| / max(1e-8, |a|+|n|).
// Callers pass f64 tensors; f is re-evaluated with perturbed leaf buffers.
inline double grad_check(const std::function<Tensor<double>()>& f,
                         std::vector<Tensor<double>> leaves, double h = 1e-5) {
    for (auto& leaf : leaves) leaf.zero_grad();
    Tensor<double> loss = f();
    backward(loss);

    std::vector<std::vector<double>> analytic;
    for (auto& leaf : leaves) {
        if (leaf.has_grad()) analytic.push_back(leaf.grad());
        else analytic.push_back(std::vector<double>(leaf.numel(), 0.0));
    }

    double max_err = 0.0;
    for (size_t li = 0; li < leaves.size(); ++li) {
        auto& buf = leaves[li].mutable_data();
        for (size_t i = 0; i < buf.size(); ++i) {
            double x0 = buf[i];
            buf[i] = x0 + h;
            double fp = f().item();
            buf[i] = x0 - h;
            double fm = f().item();
            buf[i] = x0;
            double numeric = (fp - fm) / (2.0 * h);
            double a = analytic[li][i];
            double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
            if (err > max_err) max_err = err;
        }
    }
    return max_err;
}

}  // namespace rvernet
