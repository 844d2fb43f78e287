#pragma once

// Reverse-mode autodiff over dense 64-bit row-major tensors. The graph is a
// DAG of shared nodes built dynamically by the ops in ops.hpp; backward()
// runs the recorded closures in reverse topological order. All state lives
// in the nodes themselves, so independent contexts are thread-safe.

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <unordered_set>
#include <vector>

#include "demuse/common.hpp"

namespace demuse {

inline thread_local bool g_grad_enabled = true;

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
    ~NoGradGuard() { g_grad_enabled = prev; }
};

class Tensor {
public:
    struct Node {
        std::vector<int64_t> shape;
        std::shared_ptr<std::vector<double>> data;
        std::vector<double> grad; // empty until first accumulation
        bool requires_grad = false;
        std::vector<std::shared_ptr<Node>> parents;
        std::function<void(Node&)> backward;

        int64_t size() const {
            int64_t n = 1;
            for (int64_t d : shape) n *= d;
            return n;
        }
        void ensure_grad() {
            if (grad.empty()) grad.assign(static_cast<size_t>(size()), 0.0);
        }
    };

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

    static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false) {
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->data = std::make_shared<std::vector<double>>(static_cast<size_t>(n->size()), 0.0);
        n->requires_grad = requires_grad && g_grad_enabled;
        return Tensor(n);
    }

    static Tensor full(std::vector<int64_t> shape, double v, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (double& x : t.data()) x = v;
        return t;
    }

    static Tensor from_vector(std::vector<int64_t> shape, std::vector<double> values,
                              bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        if (static_cast<int64_t>(values.size()) != t.size())
            throw RuntimeAbort("from_vector: size mismatch");
        t.data() = std::move(values);
        return t;
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return full({1}, v, requires_grad);
    }

    static Tensor randn(std::vector<int64_t> shape, Rng& rng, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (double& x : t.data()) x = rng.normal();
        return t;
    }

    bool defined() const { return n_ != nullptr; }
    const std::vector<int64_t>& shape() const { return n_->shape; }
    int64_t size() const { return n_->size(); }
    int64_t cols() const { return n_->shape.empty() ? 1 : n_->shape.back(); }
    int64_t rows() const { return n_->shape.empty() ? 1 : n_->size() / cols(); }

    std::vector<double>& data() { return *n_->data; }
    const std::vector<double>& data() const { return *n_->data; }
    double item() const {
        if (size() != 1) throw RuntimeAbort("item(): tensor is not scalar");
        return (*n_->data)[0];
    }

    std::vector<double>& grad() { n_->ensure_grad(); return n_->grad; }
    bool requires_grad() const { return n_->requires_grad; }

    std::shared_ptr<Node> node() const { return n_; }

    // Shares the value buffer, cuts the graph.
    Tensor detach() const {
        auto n = std::make_shared<Node>();
        n->shape = n_->shape;
        n->data = n_->data;
        n->requires_grad = false;
        return Tensor(n);
    }

    Tensor reshape(std::vector<int64_t> new_shape) const {
        auto n = std::make_shared<Node>();
        n->shape = std::move(new_shape);
        n->data = n_->data; // alias
        if (n->size() != n_->size()) throw RuntimeAbort("reshape: element count mismatch");
        n->requires_grad = n_->requires_grad && g_grad_enabled;
        if (n->requires_grad) {
            n->parents = {n_};
            n->backward = [](Node& self) {
                Node& p = *self.parents[0];
                p.ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
            };
        }
        return Tensor(n);
    }

    // Seeds d(this)/d(this) = 1 and propagates through the recorded graph.
    void backward() {
        if (size() != 1) throw RuntimeAbort("backward(): root must be scalar");
        std::vector<Node*> order;
        topo_sort(order);
        n_->ensure_grad();
        n_->grad[0] = 1.0;
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node* nd = *it;
            if (nd->backward && !nd->grad.empty()) nd->backward(*nd);
        }
    }

private:
    void topo_sort(std::vector<Node*>& order) {
        std::unordered_set<Node*> visited;
        // iterative post-order DFS
        std::vector<std::pair<Node*, size_t>> stack;
        stack.push_back({n_.get(), 0});
        visited.insert(n_.get());
        while (!stack.empty()) {
            auto& [nd, idx] = stack.back();
            if (idx < nd->parents.size()) {
                Node* p = nd->parents[idx++].get();
                if (p->requires_grad && !visited.count(p)) {
                    visited.insert(p);
                    stack.push_back({p, 0});
                }
            } else {
                order.push_back(nd);
                stack.pop_back();
            }
        }
    }

    std::shared_ptr<Node> n_;
};

// Helper used by ops to wire a result node.
inline Tensor make_op_result(std::vector<int64_t> shape,
                             std::vector<Tensor> parents,
                             std::function<void(Tensor::Node&)> backward) {
    auto n = std::make_shared<Tensor::Node>();
    n->shape = std::move(shape);
    int64_t sz = 1;
    for (int64_t d : n->shape) sz *= d;
    n->data = std::make_shared<std::vector<double>>(static_cast<size_t>(sz), 0.0);
    bool needs = false;
    for (const auto& p : parents) needs = needs || p.requires_grad();
    n->requires_grad = needs && g_grad_enabled;
    if (n->requires_grad) {
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backward = std::move(backward);
    }
    return Tensor(n);
}

} // namespace demuse
