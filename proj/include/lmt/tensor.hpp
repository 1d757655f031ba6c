#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "lmt/common.hpp"
#include "lmt/rng.hpp"

namespace lmt {

// Thread-local switch; sampling and evaluation run with recording off.
struct GradMode {
    static bool &enabled() {
        thread_local bool on = true;
        return on;
    }
};

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(GradMode::enabled()) { GradMode::enabled() = false; }
    ~NoGradGuard() { GradMode::enabled() = prev; }
};

template <class S>
struct NodeT {
    Shape shape;
    std::vector<S> data;
    std::vector<S> grad;  // sized lazily, same length as data
    bool requires_grad = false;
    const char *op = "leaf";
    std::vector<std::shared_ptr<NodeT>> parents;
    std::function<void()> backward_fn;  // reads this->grad, accumulates into parents' grads

    int64_t numel() const { return int64_t(data.size()); }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), S(0));
    }
    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), S(0));
    }
};

// Value-semantics handle over a tape node. Copies share the node.
template <class S>
class TensorT {
  public:
    using Scalar = S;

    TensorT() = default;
    explicit TensorT(std::shared_ptr<NodeT<S>> n) : node_(std::move(n)) {}

    static TensorT from_data(Shape shape, std::vector<S> data, bool requires_grad = false) {
        if (shape_numel(shape) != int64_t(data.size()))
            throw ShapeError("from_data: " + shape_str(shape) + " vs " +
                             std::to_string(data.size()) + " values");
        auto n = std::make_shared<NodeT<S>>();
        n->shape = std::move(shape);
        n->data = std::move(data);
        n->requires_grad = requires_grad;
        return TensorT(std::move(n));
    }

    static TensorT zeros(Shape shape, bool requires_grad = false) {
        std::vector<S> d(size_t(shape_numel(shape)), S(0));
        return from_data(std::move(shape), std::move(d), requires_grad);
    }

    static TensorT full(Shape shape, S v, bool requires_grad = false) {
        std::vector<S> d(size_t(shape_numel(shape)), v);
        return from_data(std::move(shape), std::move(d), requires_grad);
    }

    static TensorT scalar(S v) { return from_data({}, {v}); }

    static TensorT randn(Shape shape, Rng &rng, S stddev = S(1), bool requires_grad = false) {
        std::vector<S> d(size_t(shape_numel(shape)));
        for (auto &x : d) x = S(rng.normal()) * stddev;
        return from_data(std::move(shape), std::move(d), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape &shape() const { return node_->shape; }
    int64_t dim(size_t i) const { return node_->shape.at(i); }
    size_t rank() const { return node_->shape.size(); }
    int64_t numel() const { return node_->numel(); }
    bool requires_grad() const { return node_->requires_grad; }
    bool is_leaf() const { return node_->parents.empty(); }

    const std::vector<S> &data() const { return node_->data; }
    // in-place mutation is reserved for leaves (parameter updates between steps)
    std::vector<S> &mutable_data() {
        if (!is_leaf()) throw ContractError("mutable_data on non-leaf tensor");
        return node_->data;
    }
    const std::vector<S> &grad() const {
        node_->ensure_grad();
        return node_->grad;
    }
    std::vector<S> &mutable_grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() { node_->zero_grad(); }

    S item() const {
        if (node_->numel() != 1) throw ContractError("item() on non-scalar tensor");
        return node_->data[0];
    }

    S at(std::initializer_list<int64_t> idx) const {
        const Shape &sh = node_->shape;
        if (idx.size() != sh.size()) throw ShapeError("at(): rank mismatch");
        int64_t flat = 0;
        size_t i = 0;
        for (int64_t v : idx) {
            flat = flat * sh[i] + v;
            ++i;
        }
        return node_->data[size_t(flat)];
    }

    NodeT<S> *node() const { return node_.get(); }
    std::shared_ptr<NodeT<S>> node_ptr() const { return node_; }

    // Runs reverse-mode accumulation from this scalar. Gradients of every node in
    // the reachable subgraph are reset first, so each call yields fresh gradients;
    // within a call, accumulation over shared inputs is additive.
    void backward() const {
        if (node_->numel() != 1) throw ContractError("backward() requires a scalar loss");
        std::vector<NodeT<S> *> order = topo_order();
        for (auto *n : order) {
            n->ensure_grad();
            n->zero_grad();
        }
        node_->grad[0] = S(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            NodeT<S> *n = *it;
            if (n->backward_fn) n->backward_fn();
        }
    }

    // detached copy: a fresh leaf with the same values and no gradient path
    TensorT detach() const {
        auto n = std::make_shared<NodeT<S>>();
        n->shape = node_->shape;
        n->data = node_->data;
        n->requires_grad = false;
        n->op = "detach";
        return TensorT(std::move(n));
    }

  private:
    std::vector<NodeT<S> *> topo_order() const {
        std::vector<NodeT<S> *> order;
        std::unordered_set<NodeT<S> *> seen;
        // iterative DFS; graphs from long training sequences can be deep
        struct Frame {
            NodeT<S> *n;
            size_t next_parent;
        };
        std::vector<Frame> stack;
        stack.push_back({node_.get(), 0});
        seen.insert(node_.get());
        while (!stack.empty()) {
            Frame &f = stack.back();
            if (f.next_parent < f.n->parents.size()) {
                NodeT<S> *p = f.n->parents[f.next_parent++].get();
                if (p->requires_grad && !seen.count(p)) {
                    seen.insert(p);
                    stack.push_back({p, 0});
                }
            } else {
                order.push_back(f.n);
                stack.pop_back();
            }
        }
        return order;
    }

    std::shared_ptr<NodeT<S>> node_;
};

template <class S>
inline void check_finite(const char *op, const std::vector<S> &v) {
    for (size_t i = 0; i < v.size(); ++i) {
        if (!std::isfinite(v[i]))
            throw NumericError(std::string(op) + ": non-finite value at flat index " +
                               std::to_string(i));
    }
}

// Builds the result node for an op: runs the finite check, and wires parents plus
// the backward closure only when recording is on and some input needs gradient.
// `backward_builder(self, parents)` must return the closure; it is not called when
// the result does not take part in differentiation.
template <class S, class BwdBuilder>
TensorT<S> make_op_result(const char *op, Shape shape, std::vector<S> data,
                          std::vector<TensorT<S>> inputs, BwdBuilder backward_builder) {
    check_finite(op, data);
    auto n = std::make_shared<NodeT<S>>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->op = op;
    bool need = false;
    if (GradMode::enabled()) {
        for (auto &t : inputs) need = need || t.requires_grad();
    }
    if (need) {
        n->requires_grad = true;
        std::vector<NodeT<S> *> raw;
        for (auto &t : inputs) {
            n->parents.push_back(t.node_ptr());
            raw.push_back(t.node());
        }
        n->backward_fn = backward_builder(n.get(), raw);
    }
    return TensorT<S>(std::move(n));
}

using Tensor = TensorT<float>;    // train mode
using Tensor64 = TensorT<double>; // test mode (tight tolerances)

}  // namespace lmt
