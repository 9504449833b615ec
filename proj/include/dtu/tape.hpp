#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "dtu/tensor.hpp"

namespace dtu {

template <typename T>
class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <typename T>
struct Var {
    Tape<T>* tape = nullptr;
    int id = -1;

    const Tensor<T>& value() const { return tape->value(id); }
    const Shape& shape() const { return tape->value(id).shape(); }
    bool requires_grad() const { return tape->requires_grad(id); }
    // Gradient accumulated by backward(); zeros if never touched.
    const Tensor<T>& grad() const { return tape->grad(id); }
};

// Single-step reverse-mode tape. Nodes are appended in execution order,
// which is also a topological order for the backward sweep. A tape belongs
// to one forward/backward pass and is not thread-safe.
template <typename T>
class Tape {
  public:
    using value_type = T;

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const { return grad_enabled_; }

    // Toggle post-op finite checks (on by default; every primitive output is
    // scanned and a NaN/Inf raises NumericError instead of propagating).
    void set_finite_checks(bool on) { finite_checks_ = on; }
    bool finite_checks() const { return finite_checks_; }

    Var<T> input(Tensor<T> v, bool requires_grad = false) {
        return make_leaf(std::move(v), requires_grad && grad_enabled_);
    }

    // Parameter leaf; value buffer is shared, no copy. After backward(),
    // gradients are accumulated into p.grad.
    Var<T> param(Parameter<T>& p) {
        Var<T> v = make_leaf(p.value, grad_enabled_);
        if (grad_enabled_) param_leaves_.emplace_back(v.id, &p);
        return v;
    }

    // Record an op result. parents lists node ids the backward fn reads;
    // backward_fn may be empty for non-differentiable sinks.
    Var<T> emit(const char* op_name, Tensor<T> value, std::vector<int> parents,
                std::function<void(Tape&, int)> backward_fn) {
        if (finite_checks_ && !value.all_finite()) {
            throw NumericError(std::string("non-finite values in output of ") + op_name);
        }
        bool rg = false;
        if (grad_enabled_) {
            for (int p : parents) rg = rg || nodes_[static_cast<size_t>(p)].requires_grad;
        }
        Node n;
        n.value = std::move(value);
        n.requires_grad = rg;
        if (rg) {
            n.parents = std::move(parents);
            n.backward = std::move(backward_fn);
        }
        nodes_.push_back(std::move(n));
        return {this, static_cast<int>(nodes_.size()) - 1};
    }

    const Tensor<T>& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
    bool requires_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

    // Gradient buffer, allocated to zeros on first access.
    Tensor<T>& grad(int id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.numel() == 0 && n.value.numel() > 0) n.grad = Tensor<T>(n.value.shape());
        return n.grad;
    }

    void accumulate_grad(int id, const Tensor<T>& g) {
        Tensor<T>& dst = grad(id);
        if (!same_shape(dst, g)) {
            throw ShapeError("gradient shape " + shape_str(g.shape()) +
                             " does not match value shape " + shape_str(dst.shape()));
        }
        T* d = dst.data();
        const T* s = g.data();
        for (int64_t i = 0; i < g.numel(); ++i) d[i] += s[i];
    }

    // Reverse sweep from a scalar loss. Seeds d(loss)/d(loss) = 1 and runs
    // each recorded backward fn in reverse creation order, then flushes
    // gradients of parameter leaves into their Parameter::grad.
    void backward(Var<T> loss) {
        if (!grad_enabled_) throw ContractError("backward() on a no-grad tape");
        if (loss.tape != this) throw ContractError("backward() with a foreign Var");
        if (value(loss.id).numel() != 1) {
            throw ContractError("backward() requires a scalar, got shape " +
                                shape_str(value(loss.id).shape()));
        }
        grad(loss.id)[0] = T(1);
        for (int id = loss.id; id >= 0; --id) {
            Node& n = nodes_[static_cast<size_t>(id)];
            if (!n.requires_grad || !n.backward) continue;
            if (n.grad.numel() == 0) continue;  // not on any path to the loss
            n.backward(*this, id);
        }
        for (auto& [id, p] : param_leaves_) {
            Node& n = nodes_[static_cast<size_t>(id)];
            if (n.grad.numel() == 0) continue;
            T* dst = p->grad.data();
            const T* src = n.grad.data();
            for (int64_t i = 0; i < n.grad.numel(); ++i) dst[i] += src[i];
        }
    }

    size_t size() const { return nodes_.size(); }

  private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool requires_grad = false;
        std::vector<int> parents;
        std::function<void(Tape&, int)> backward;
    };

    Var<T> make_leaf(Tensor<T> v, bool requires_grad) {
        Node n;
        n.value = std::move(v);
        n.requires_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return {this, static_cast<int>(nodes_.size()) - 1};
    }

    std::vector<Node> nodes_;
    std::vector<std::pair<int, Parameter<T>*>> param_leaves_;
    bool grad_enabled_;
    bool finite_checks_ = true;
};

}  // namespace dtu
