#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tlkit/errors.hpp"

namespace tlkit {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) {
        if (d <= 0) throw DimensionError("non-positive dimension in shape " + shape_str(s));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

// Shared storage behind a Tensor: values plus an optional gradient slot of
// identical shape. Gradients are allocated lazily when the tensor enters a
// recorded computation.
struct TensorNode {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

// Dense row-major f64 tensor with value semantics over shared storage.
// Tensors that participate in a tape must not be mutated between forward
// and backward; the API only exposes mutation for setup (init, loaders,
// optimizer steps after the tape is dropped).
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape) : node_(std::make_shared<TensorNode>()) {
        std::size_t n = shape_numel(shape);
        node_->shape = std::move(shape);
        node_->value.assign(n, 0.0);
    }

    Tensor(Shape shape, std::vector<double> data) : node_(std::make_shared<TensorNode>()) {
        std::size_t n = shape_numel(shape);
        if (n != data.size()) {
            throw DimensionError("data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        }
        node_->shape = std::move(shape);
        node_->value = std::move(data);
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, double v) {
        Tensor t(std::move(shape));
        for (double& x : t.node_->value) x = v;
        return t;
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
    std::size_t numel() const { return node_->value.size(); }

    double* data() { return node_->value.data(); }
    const double* data() const { return node_->value.data(); }
    std::span<const double> values() const { return node_->value; }

    double& operator()(int i) { return node_->value[static_cast<std::size_t>(i)]; }
    double operator()(int i) const { return node_->value[static_cast<std::size_t>(i)]; }
    double& operator()(int i, int j) { return node_->value[flat(i, j)]; }
    double operator()(int i, int j) const { return node_->value[flat(i, j)]; }
    double& operator()(int i, int j, int k) { return node_->value[flat(i, j, k)]; }
    double operator()(int i, int j, int k) const { return node_->value[flat(i, j, k)]; }
    double& operator()(int i, int j, int k, int l) { return node_->value[flat(i, j, k, l)]; }
    double operator()(int i, int j, int k, int l) const { return node_->value[flat(i, j, k, l)]; }

    double item() const {
        if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
        return node_->value[0];
    }

    bool requires_grad() const { return node_ && node_->requires_grad; }

    Tensor& set_requires_grad(bool rg = true) {
        node_->requires_grad = rg;
        if (rg) node_->ensure_grad();
        return *this;
    }

    std::span<const double> grad() const { return node_->grad; }
    double* grad_data() { node_->ensure_grad(); return node_->grad.data(); }

    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    Tensor grad_tensor() const {
        Tensor g(node_->shape);
        if (!node_->grad.empty()) g.node_->value = node_->grad;
        return g;
    }

    // Deep copy of values only.
    Tensor clone() const {
        Tensor t(node_->shape);
        t.node_->value = node_->value;
        return t;
    }

    const std::shared_ptr<TensorNode>& node() const { return node_; }

private:
    std::size_t flat(int i, int j) const {
        return static_cast<std::size_t>(i) * node_->shape[1] + j;
    }
    std::size_t flat(int i, int j, int k) const {
        return (static_cast<std::size_t>(i) * node_->shape[1] + j) * node_->shape[2] + k;
    }
    std::size_t flat(int i, int j, int k, int l) const {
        return ((static_cast<std::size_t>(i) * node_->shape[1] + j) * node_->shape[2] + k) *
                   node_->shape[3] + l;
    }

    std::shared_ptr<TensorNode> node_;
};

// Records primitive operations in forward order; backward() replays the
// rules in reverse (forward order is a valid topological order, so no
// explicit graph sort is needed). One tape per training step / gradient
// query; tapes are independent, parallelism is across tapes only.
class Tape {
public:
    Tape() : prev_(current_) { current_ = this; }
    ~Tape() { current_ = prev_; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current() { return current_; }

    void record(std::function<void()> backward_rule) {
        ops_.push_back(std::move(backward_rule));
    }

    std::size_t size() const { return ops_.size(); }

    // Seeds d(loss)/d(loss) = 1 and replays all recorded rules in reverse.
    void backward(Tensor& loss) {
        if (loss.numel() != 1) {
            throw ContractError("backward requires a scalar loss, got shape " +
                                shape_str(loss.shape()));
        }
        loss.grad_data()[0] = 1.0;
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    }

private:
    inline static thread_local Tape* current_ = nullptr;

    std::vector<std::function<void()>> ops_;
    Tape* prev_;
};

namespace detail {

// True when the op must be recorded: a tape is active and some input tracks
// gradients.
inline bool tracing(std::initializer_list<const Tensor*> inputs) {
    if (!Tape::current()) return false;
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

inline void mark_output(Tensor& out) {
    out.set_requires_grad(true);
}

}  // namespace detail

// d(f())/d(p) for every p in params. f must build a scalar from recorded
// primitives; params' existing gradients are cleared first.
inline std::vector<Tensor> grad(const std::function<Tensor()>& f, std::vector<Tensor> params) {
    for (Tensor& p : params) {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    Tape tape;
    Tensor out = f();
    if (out.numel() != 1) {
        throw ContractError("grad requires a scalar-valued composition, got shape " +
                            shape_str(out.shape()));
    }
    tape.backward(out);
    std::vector<Tensor> grads;
    grads.reserve(params.size());
    for (Tensor& p : params) grads.push_back(p.grad_tensor());
    return grads;
}

}  // namespace tlkit
