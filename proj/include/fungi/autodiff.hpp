#pragma once

// Tape-based reverse-mode differentiation over dense tensors.
//
// Every primitive computes its forward value eagerly. A backward node is
// recorded only when at least one input requires a gradient, so a tape with
// no parameters is a plain forward pass. A tape is single-use: backward()
// consumes it. Tapes are not thread-safe; run one tape per task.

#include <cstdint>
#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "fungi/tensor.hpp"

namespace fungi::ad {

template <typename T>
class Tape;

template <typename T>
class Var {
public:
    Var() = default;
    Var(Tape<T>* tape, std::uint32_t id) : tape_(tape), id_(id) {}

    const Tensor<T>& value() const;
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const;
    std::uint32_t id() const noexcept { return id_; }
    Tape<T>* tape() const noexcept { return tape_; }
    bool valid() const noexcept { return tape_ != nullptr; }

private:
    Tape<T>* tape_ = nullptr;
    std::uint32_t id_ = 0;
};

// Gradients keyed by parameter variable.
template <typename T>
class GradMap {
public:
    const Tensor<T>& at(const Var<T>& param) const;
    bool contains(const Var<T>& param) const { return grads_.count(param.id()) != 0; }
    std::size_t size() const noexcept { return grads_.size(); }

    void insert(std::uint32_t id, Tensor<T> grad) { grads_.emplace(id, std::move(grad)); }

private:
    std::unordered_map<std::uint32_t, Tensor<T>> grads_;
};

template <typename T>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Leaf whose gradient backward() reports.
    Var<T> parameter(Tensor<T> value);
    // Leaf treated as a constant.
    Var<T> constant(Tensor<T> value);

    // Reverse sweep from a scalar loss; returns d(loss)/d(param) for every parameter.
    GradMap<T> backward(const Var<T>& loss);

    bool consumed() const noexcept { return consumed_; }
    std::size_t node_count() const noexcept { return nodes_.size(); }
    std::size_t value_count() const noexcept { return values_.size(); }

    const Tensor<T>& value(std::uint32_t id) const { return values_[id]; }
    bool requires_grad(std::uint32_t id) const { return requires_grad_[id] != 0; }

    // Primitive-implementation hooks.
    // Called with the tape and the output id once the output's gradient is known.
    using BackwardFn = std::function<void(Tape&, std::uint32_t)>;
    Var<T> record(Tensor<T> out, std::span<const Var<T>> inputs, const char* op, BackwardFn backward);
    const Tensor<T>& grad(std::uint32_t id) const { return grads_[id]; }
    bool has_grad(std::uint32_t id) const { return !grads_[id].empty(); }
    // Zero-initialised on first touch; gradients from multiple consumers accumulate.
    Tensor<T>& grad_slot(std::uint32_t id);
    void check_owner(const Var<T>& v, const char* op) const;

private:
    struct Node {
        std::uint32_t output;
        BackwardFn backward;
    };

    Var<T> push(Tensor<T> value, bool requires_grad, bool is_param);

    std::vector<Tensor<T>> values_;
    std::vector<char> requires_grad_;
    std::vector<std::uint32_t> params_;
    std::vector<Node> nodes_;
    std::vector<Tensor<T>> grads_;
    bool consumed_ = false;
};

enum class Transpose { no, yes };

// a[m,k] x b[k,n], or a[m,k] x b[n,k]^T.
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, Transpose tb = Transpose::no);

// Elementwise sum; b may also be a [n] row broadcast over the rows of a[m,n].
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> scale(const Var<T>& a, T factor);

// x[m,in] W^T + b, with W[out,in] and b[out].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

// Row-wise normalisation over the last axis followed by gamma/beta affine.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-6));

// softmax(x / tau) along the last axis.
template <typename T>
Var<T> softmax(const Var<T>& x, T tau = T(1));

template <typename T>
Var<T> log_softmax(const Var<T>& x, T tau = T(1));

// Exact (erf) GELU.
template <typename T>
Var<T> gelu(const Var<T>& x);

// Each row divided by its L2 norm; a zero row is a numeric error.
template <typename T>
Var<T> l2_normalize(const Var<T>& x);

// Mean of all elements (scalar result).
template <typename T>
Var<T> mean(const Var<T>& x);

// Column means of x[m,n] -> [n].
template <typename T>
Var<T> mean_rows(const Var<T>& x);

template <typename T>
Var<T> sum(const Var<T>& x);

// Row-wise concatenation of 2-D (or 1-D, treated as one row) inputs with equal column counts.
template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts);

// Rows [begin, end) of x.
template <typename T>
Var<T> slice(const Var<T>& x, std::size_t begin, std::size_t end);

// Multi-head attention over a fused qkv[T, 3d] input: softmax(Q K^T / sqrt(d/heads)) V per head.
template <typename T>
Var<T> scaled_dot_product_attention(const Var<T>& qkv, std::size_t heads);

// Same value, no gradient path.
template <typename T>
Var<T> detach(const Var<T>& x);

// ---- template definitions of trivial members ----

template <typename T>
const Tensor<T>& Var<T>::value() const {
    return tape_->value(id_);
}

template <typename T>
bool Var<T>::requires_grad() const {
    return tape_->requires_grad(id_);
}

template <typename T>
const Tensor<T>& GradMap<T>::at(const Var<T>& param) const {
    auto it = grads_.find(param.id());
    if (it == grads_.end()) throw DataError("no gradient recorded for variable");
    return it->second;
}

}  // namespace fungi::ad
