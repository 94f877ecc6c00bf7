#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "stitch/rng.hpp"

namespace stitch {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

[[noreturn]] inline void shape_error(const std::string& op, const std::string& detail) {
    throw std::invalid_argument(op + ": " + detail);
}

namespace detail {
inline thread_local bool grad_enabled = true;
}

inline bool grad_enabled() { return detail::grad_enabled; }

// RAII scope that disables taping (inference mode).
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::grad_enabled) { detail::grad_enabled = false; }
    ~NoGradGuard() { detail::grad_enabled = prev; }
};

template <typename S>
struct Node {
    Shape shape;
    std::vector<S> value;
    std::vector<S> grad;  // allocated on demand during backward
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node<S>>> parents;
    std::function<void(Node<S>&)> backward;

    int64_t numel() const { return (int64_t)value.size(); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), S(0));
    }
};

template <typename S>
using NodePtr = std::shared_ptr<Node<S>>;

// Dense row-major tensor handle. Copies of a Tensor share the same node, so
// value/grad mutations are visible through every copy.
template <typename S>
class Tensor {
public:
    using Scalar = S;

    Tensor() = default;
    explicit Tensor(NodePtr<S> n) : node_(std::move(n)) {}

    static Tensor zeros(Shape shape) { return filled(std::move(shape), S(0)); }

    static Tensor filled(Shape shape, S v) {
        auto n = std::make_shared<Node<S>>();
        n->value.assign((size_t)shape_numel(shape), v);
        n->shape = std::move(shape);
        return Tensor(n);
    }

    static Tensor from(Shape shape, std::vector<S> data) {
        if ((int64_t)data.size() != shape_numel(shape))
            shape_error("Tensor::from", "data size " + std::to_string(data.size()) +
                                            " != numel of " + shape_str(shape));
        auto n = std::make_shared<Node<S>>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        return Tensor(n);
    }

    static Tensor randn(Shape shape, Rng& rng, S stddev = S(1)) {
        auto t = zeros(std::move(shape));
        for (auto& v : t.node_->value) v = (S)(rng.normal() * (double)stddev);
        return t;
    }

    static Tensor uniform(Shape shape, Rng& rng, S lo, S hi) {
        auto t = zeros(std::move(shape));
        for (auto& v : t.node_->value) v = (S)rng.uniform((double)lo, (double)hi);
        return t;
    }

    static Tensor scalar(S v) { return filled({1}, v); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape[(size_t)i]; }
    int ndim() const { return (int)node_->shape.size(); }
    int64_t numel() const { return node_->numel(); }

    S* data() { return node_->value.data(); }
    const S* data() const { return node_->value.data(); }
    std::vector<S>& vec() { return node_->value; }
    const std::vector<S>& vec() const { return node_->value; }
    S item() const {
        if (numel() != 1) shape_error("Tensor::item", "tensor " + shape_str(shape()) + " is not scalar");
        return node_->value[0];
    }

    Tensor& set_requires_grad(bool v) {
        node_->requires_grad = v;
        return *this;
    }
    bool requires_grad() const { return node_ && node_->requires_grad; }

    const std::vector<S>& grad() const { return node_->grad; }
    std::vector<S>& grad() { return node_->grad; }
    void zero_grad() { node_->grad.assign(node_->value.size(), S(0)); }

    NodePtr<S> node() const { return node_; }

private:
    NodePtr<S> node_;
};

// Reverse-mode sweep from a scalar loss. Grad accumulation order is fixed by
// the (deterministic) topological order of graph construction.
template <typename S>
inline void backward(const Tensor<S>& loss) {
    if (loss.numel() != 1) shape_error("backward", "loss must be scalar, got " + shape_str(loss.shape()));
    Node<S>* root = loss.node().get();
    if (!root->requires_grad) return;

    struct PtrSet {
        std::vector<std::vector<Node<S>*>> buckets;
        PtrSet() : buckets(4096) {}
        bool insert(Node<S>* p) {
            auto& b = buckets[(((uintptr_t)p) >> 4) & 4095];
            for (auto* q : b)
                if (q == p) return false;
            b.push_back(p);
            return true;
        }
    } seen;

    std::vector<Node<S>*> topo;
    std::vector<std::pair<Node<S>*, size_t>> st;
    st.push_back({root, 0});
    seen.insert(root);
    while (!st.empty()) {
        auto& [n, idx] = st.back();
        if (idx < n->parents.size()) {
            Node<S>* p = n->parents[idx].get();
            ++idx;
            if (p->requires_grad && seen.insert(p)) st.push_back({p, 0});
        } else {
            topo.push_back(n);
            st.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] += S(1);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Node<S>* n = *it;
        // a node may have received no contribution (e.g. an unselected branch)
        n->ensure_grad();
        if (n->backward) n->backward(*n);
    }
}

}  // namespace stitch
