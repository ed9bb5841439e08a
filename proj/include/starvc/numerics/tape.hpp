#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "starvc/error.hpp"
#include "starvc/numerics/tensor.hpp"

namespace starvc::num {

/// A named, persistent trainable tensor. Gradients from a tape are added
/// into `grad` and `touched` is raised so optimizers can skip parameters a
/// step never reached.
template <class T>
struct Param {
    std::string name;
    BasicTensor<T> value;
    BasicTensor<T> grad;
    bool frozen = false;
    bool touched = false;

    Param() = default;
    Param(std::string n, BasicTensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

    void zero_grad() {
        grad.fill(T(0));
        touched = false;
    }
};

template <class T>
class Tape;

/// Handle to a node recorded on a tape.
template <class T>
struct Var {
    Tape<T>* tape = nullptr;
    int id = -1;

    const BasicTensor<T>& value() const;
    const Shape& shape() const { return value().shape(); }
    int rows() const { return value().rows(); }
    int cols() const { return value().cols(); }
    bool requires_grad() const;
};

/// Reverse-mode autodiff tape. Node ids are assigned in creation order, which
/// is a topological order; backward walks them once in reverse.
template <class T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, int)>;

    struct Node {
        const char* op = "leaf";
        BasicTensor<T> value;
        BasicTensor<T> grad;  // empty until a gradient arrives
        bool requires_grad = false;
        Param<T>* sink = nullptr;
        std::vector<int> parents;
        BackwardFn backward;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> constant(BasicTensor<T> v) { return push("const", std::move(v), false, {}, nullptr); }

    Var<T> leaf(BasicTensor<T> v, bool requires_grad = true) {
        return push("leaf", std::move(v), requires_grad, {}, nullptr);
    }

    /// Frozen parameters enter as constants and never receive gradient.
    Var<T> param(Param<T>& p) {
        Var<T> v = push("param", p.value, !p.frozen, {}, nullptr);
        if (!p.frozen) nodes_[static_cast<std::size_t>(v.id)].sink = &p;
        return v;
    }

    Var<T> record(const char* op, BasicTensor<T> value, std::vector<int> parents, BackwardFn fn) {
        if (!value.all_finite()) throw NumericError(std::string("non-finite output from op '") + op + "'");
        bool rg = false;
        for (int p : parents) rg = rg || node(p).requires_grad;
        return push(op, std::move(value), rg, std::move(parents), rg ? std::move(fn) : BackwardFn{});
    }

    const BasicTensor<T>& value(int id) const { return node(id).value; }
    bool requires_grad(int id) const { return node(id).requires_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }
    const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }

    /// Gradient buffer for a node, allocated as zeros on first use.
    BasicTensor<T>& grad_buffer(int id) {
        Node& n = nodes_.at(static_cast<std::size_t>(id));
        if (n.grad.empty()) n.grad = BasicTensor<T>(n.value.shape());
        return n.grad;
    }

    /// Gradient of the last backward pass; zeros if the node was unreached.
    BasicTensor<T> grad(Var<T> v) const {
        const Node& n = node(v.id);
        return n.grad.empty() ? BasicTensor<T>(n.value.shape()) : n.grad;
    }

    void backward(Var<T> loss) {
        if (loss.tape != this) throw ContractError("backward: loss is not on this tape");
        const Node& ln = node(loss.id);
        if (ln.value.size() != 1)
            throw ContractError("backward: loss must be scalar, got shape " + shape_str(ln.value.shape()));
        grad_buffer(loss.id).fill(T(1));
        for (int id = loss.id; id >= 0; --id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            if (!n.requires_grad || n.grad.empty()) continue;
            if (n.backward) n.backward(*this, id);
            if (n.sink) {
                auto& g = n.sink->grad;
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
                n.sink->touched = true;
            }
        }
    }

    void reset() { nodes_.clear(); }

private:
    Var<T> push(const char* op, BasicTensor<T> v, bool rg, std::vector<int> parents, BackwardFn fn) {
        Node n;
        n.op = op;
        n.value = std::move(v);
        n.requires_grad = rg;
        n.parents = std::move(parents);
        n.backward = std::move(fn);
        nodes_.push_back(std::move(n));
        return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
    }

    std::vector<Node> nodes_;
};

template <class T>
const BasicTensor<T>& Var<T>::value() const {
    return tape->value(id);
}

template <class T>
bool Var<T>::requires_grad() const {
    return tape->requires_grad(id);
}

}  // namespace starvc::num
