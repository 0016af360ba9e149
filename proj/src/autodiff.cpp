#include "fungi/autodiff.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <string>

namespace fungi::ad {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
ConstMatMap<T> as_mat(const Tensor<T>& t) {
    return ConstMatMap<T>(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

template <typename T>
MatMap<T> as_mat(Tensor<T>& t) {
    return MatMap<T>(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

template <typename T>
Tape<T>* common_tape(std::initializer_list<const Var<T>*> vars, const char* op) {
    Tape<T>* tape = nullptr;
    for (const Var<T>* v : vars) {
        if (!v->valid()) continue;
        if (tape == nullptr) tape = v->tape();
        if (v->tape() != tape) throw DataError(std::string(op) + ": operands live on different tapes");
    }
    if (tape == nullptr) throw DataError(std::string(op) + ": no operand");
    return tape;
}

// Shape with the last extent replaced.
inline Shape with_cols(const Shape& s, std::size_t cols) {
    if (s.empty()) return Shape{cols};
    Shape out = s;
    out.back() = cols;
    return out;
}

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
    T* d = dst.data();
    const T* s = src.data();
    for (std::size_t i = 0, n = dst.numel(); i < n; ++i) d[i] += s[i];
}

}  // namespace

// ---------------------------------------------------------------- Tape

template <typename T>
Var<T> Tape<T>::push(Tensor<T> value, bool requires_grad, bool is_param) {
    if (consumed_) throw DataError("tape already consumed by backward()");
    const auto id = static_cast<std::uint32_t>(values_.size());
    values_.push_back(std::move(value));
    requires_grad_.push_back(requires_grad ? 1 : 0);
    if (is_param) params_.push_back(id);
    return Var<T>(this, id);
}

template <typename T>
Var<T> Tape<T>::parameter(Tensor<T> value) {
    if (!value.all_finite()) throw NumericError("non-finite parameter value");
    return push(std::move(value), true, true);
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
    return push(std::move(value), false, false);
}

template <typename T>
void Tape<T>::check_owner(const Var<T>& v, const char* op) const {
    if (v.tape() != this) throw DataError(std::string(op) + ": variable belongs to another tape");
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> out, std::span<const Var<T>> inputs, const char* op, BackwardFn backward) {
    if (!out.all_finite()) throw NumericError(std::string("non-finite output from ") + op);
    bool needs = false;
    for (const auto& in : inputs) {
        if (in.valid() && requires_grad_[in.id()]) needs = true;
    }
    Var<T> v = push(std::move(out), needs, false);
    if (needs) nodes_.push_back(Node{v.id(), std::move(backward)});
    return v;
}

template <typename T>
Tensor<T>& Tape<T>::grad_slot(std::uint32_t id) {
    if (grads_[id].empty()) grads_[id] = Tensor<T>(values_[id].shape(), T{0});
    return grads_[id];
}

template <typename T>
GradMap<T> Tape<T>::backward(const Var<T>& loss) {
    if (consumed_) throw DataError("tape already consumed by backward()");
    check_owner(loss, "backward");
    if (values_[loss.id()].numel() != 1) {
        throw ShapeError("loss must be scalar, got " + shape_str(values_[loss.id()].shape()));
    }
    if (!requires_grad_[loss.id()]) throw DataError("loss is detached from the tape: no parameter reaches it");

    grads_.assign(values_.size(), Tensor<T>());
    grads_[loss.id()] = Tensor<T>(values_[loss.id()].shape(), T{1});
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (has_grad(it->output)) it->backward(*this, it->output);
    }

    GradMap<T> out;
    for (std::uint32_t p : params_) {
        Tensor<T> g = grads_[p].empty() ? Tensor<T>(values_[p].shape(), T{0}) : std::move(grads_[p]);
        if (!g.all_finite()) throw NumericError("non-finite gradient");
        out.insert(p, std::move(g));
    }
    consumed_ = true;
    nodes_.clear();
    grads_.clear();
    return out;
}

// ---------------------------------------------------------------- primitives

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, Transpose tb) {
    Tape<T>* tape = common_tape({&a, &b}, "matmul");
    const auto& av = a.value();
    const auto& bv = b.value();
    const std::size_t m = av.rows(), k = av.cols();
    const bool bt = tb == Transpose::yes;
    const std::size_t bk = bt ? bv.cols() : bv.rows();
    const std::size_t n = bt ? bv.rows() : bv.cols();
    if (k != bk || bv.rank() > 2 || av.rank() > 2) {
        throw ShapeError("matmul " + shape_str(av.shape()) + " x " + shape_str(bv.shape()) + (bt ? "^T" : ""));
    }
    Tensor<T> out(av.rank() == 1 ? Shape{n} : Shape{m, n});
    if (bt) {
        as_mat(out).noalias() = as_mat(av) * as_mat(bv).transpose();
    } else {
        as_mat(out).noalias() = as_mat(av) * as_mat(bv);
    }
    const auto ia = a.id(), ib = b.id();
    Var<T> inputs[] = {a, b};
    return tape->record(std::move(out), inputs, "matmul", [ia, ib, bt](Tape<T>& t, std::uint32_t o) {
        auto g = as_mat(t.grad(o));
        auto A = as_mat(t.value(ia));
        auto B = as_mat(t.value(ib));
        if (t.requires_grad(ia)) {
            auto ga = as_mat(t.grad_slot(ia));
            if (bt) ga.noalias() += g * B;
            else ga.noalias() += g * B.transpose();
        }
        if (t.requires_grad(ib)) {
            auto gb = as_mat(t.grad_slot(ib));
            if (bt) gb.noalias() += g.transpose() * A;
            else gb.noalias() += A.transpose() * g;
        }
    });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    Tape<T>* tape = common_tape({&a, &b}, "add");
    const auto& av = a.value();
    const auto& bv = b.value();
    enum class Mode { same, row, scalar } mode;
    if (av.shape() == bv.shape()) {
        mode = Mode::same;
    } else if (bv.numel() == 1) {
        mode = Mode::scalar;
    } else if (bv.rank() == 1 && bv.numel() == av.cols()) {
        mode = Mode::row;
    } else {
        throw ShapeError("add " + shape_str(av.shape()) + " + " + shape_str(bv.shape()));
    }
    Tensor<T> out = av;
    const std::size_t cols = av.cols();
    for (std::size_t i = 0, n = out.numel(); i < n; ++i) {
        out[i] += mode == Mode::same ? bv[i] : (mode == Mode::row ? bv[i % cols] : bv[0]);
    }
    const auto ia = a.id(), ib = b.id();
    Var<T> inputs[] = {a, b};
    return tape->record(std::move(out), inputs, "add", [ia, ib, mode, cols](Tape<T>& t, std::uint32_t o) {
        const auto& g = t.grad(o);
        if (t.requires_grad(ia)) add_into(t.grad_slot(ia), g);
        if (t.requires_grad(ib)) {
            auto& gb = t.grad_slot(ib);
            if (mode == Mode::same) {
                add_into(gb, g);
            } else {
                for (std::size_t i = 0, n = g.numel(); i < n; ++i) gb[mode == Mode::row ? i % cols : 0] += g[i];
            }
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    Tape<T>* tape = common_tape({&a, &b}, "mul");
    const auto& av = a.value();
    const auto& bv = b.value();
    if (av.shape() != bv.shape()) throw ShapeError("mul " + shape_str(av.shape()) + " * " + shape_str(bv.shape()));
    Tensor<T> out = av;
    for (std::size_t i = 0, n = out.numel(); i < n; ++i) out[i] *= bv[i];
    const auto ia = a.id(), ib = b.id();
    Var<T> inputs[] = {a, b};
    return tape->record(std::move(out), inputs, "mul", [ia, ib](Tape<T>& t, std::uint32_t o) {
        const auto& g = t.grad(o);
        if (t.requires_grad(ia)) {
            auto& ga = t.grad_slot(ia);
            const auto& bv = t.value(ib);
            for (std::size_t i = 0, n = g.numel(); i < n; ++i) ga[i] += g[i] * bv[i];
        }
        if (t.requires_grad(ib)) {
            auto& gb = t.grad_slot(ib);
            const auto& av = t.value(ia);
            for (std::size_t i = 0, n = g.numel(); i < n; ++i) gb[i] += g[i] * av[i];
        }
    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
    Tape<T>* tape = common_tape({&a}, "scale");
    Tensor<T> out = a.value();
    for (auto& v : out.values()) v *= factor;
    const auto ia = a.id();
    Var<T> inputs[] = {a};
    return tape->record(std::move(out), inputs, "scale", [ia, factor](Tape<T>& t, std::uint32_t o) {
        const auto& g = t.grad(o);
        auto& ga = t.grad_slot(ia);
        for (std::size_t i = 0, n = g.numel(); i < n; ++i) ga[i] += factor * g[i];
    });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
    Tape<T>* tape = common_tape({&x, &weight, &bias}, "linear");
    const auto& xv = x.value();
    const auto& wv = weight.value();
    if (wv.rank() != 2 || xv.cols() != wv.dim(1)) {
        throw ShapeError("linear x" + shape_str(xv.shape()) + " W" + shape_str(wv.shape()));
    }
    const std::size_t out_dim = wv.dim(0);
    const bool has_bias = bias.valid();
    if (has_bias && bias.value().numel() != out_dim) {
        throw ShapeError("linear bias " + shape_str(bias.value().shape()) + " for " + std::to_string(out_dim) + " outputs");
    }
    Tensor<T> out(with_cols(xv.shape(), out_dim));
    auto O = as_mat(out);
    O.noalias() = as_mat(xv) * as_mat(wv).transpose();
    if (has_bias) {
        Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(bias.value().data(), static_cast<Eigen::Index>(out_dim));
        O.rowwise() += b;
    }
    const auto ix = x.id(), iw = weight.id();
    const auto ib = bias.id();
    Var<T> inputs[] = {x, weight, bias};
    return tape->record(std::move(out), inputs, "linear", [ix, iw, ib, has_bias](Tape<T>& t, std::uint32_t o) {
        auto g = as_mat(t.grad(o));
        if (t.requires_grad(ix)) as_mat(t.grad_slot(ix)).noalias() += g * as_mat(t.value(iw));
        if (t.requires_grad(iw)) as_mat(t.grad_slot(iw)).noalias() += g.transpose() * as_mat(t.value(ix));
        if (has_bias && t.requires_grad(ib)) {
            auto& gb = t.grad_slot(ib);
            Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> b(gb.data(), static_cast<Eigen::Index>(gb.numel()));
            b += g.colwise().sum();
        }
    });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
    Tape<T>* tape = common_tape({&x, &gamma, &beta}, "layer_norm");
    const auto& xv = x.value();
    const std::size_t rows = xv.rows(), n = xv.cols();
    if (gamma.value().numel() != n || beta.value().numel() != n) {
        throw ShapeError("layer_norm affine for " + shape_str(xv.shape()));
    }
    const auto& gv = gamma.value();
    const auto& bv = beta.value();
    Tensor<T> out(xv.shape());
    Tensor<T> xhat(xv.shape());
    std::vector<T> rstd(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = xv.data() + r * n;
        T mu = 0;
        for (std::size_t j = 0; j < n; ++j) mu += xr[j];
        mu /= static_cast<T>(n);
        T var = 0;
        for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<T>(n);
        rstd[r] = T(1) / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            const T h = (xr[j] - mu) * rstd[r];
            xhat[r * n + j] = h;
            out[r * n + j] = h * gv[j] + bv[j];
        }
    }
    const auto ix = x.id(), ig = gamma.id(), ib = beta.id();
    Var<T> inputs[] = {x, gamma, beta};
    return tape->record(std::move(out), inputs, "layer_norm",
                        [ix, ig, ib, rows, n, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& t, std::uint32_t o) {
                            const auto& g = t.grad(o);
                            const auto& gv = t.value(ig);
                            if (t.requires_grad(ig)) {
                                auto& gg = t.grad_slot(ig);
                                for (std::size_t i = 0; i < rows * n; ++i) gg[i % n] += g[i] * xhat[i];
                            }
                            if (t.requires_grad(ib)) {
                                auto& gb = t.grad_slot(ib);
                                for (std::size_t i = 0; i < rows * n; ++i) gb[i % n] += g[i];
                            }
                            if (t.requires_grad(ix)) {
                                auto& gx = t.grad_slot(ix);
                                for (std::size_t r = 0; r < rows; ++r) {
                                    T mean_d = 0, mean_dh = 0;
                                    for (std::size_t j = 0; j < n; ++j) {
                                        const T d = g[r * n + j] * gv[j];
                                        mean_d += d;
                                        mean_dh += d * xhat[r * n + j];
                                    }
                                    mean_d /= static_cast<T>(n);
                                    mean_dh /= static_cast<T>(n);
                                    for (std::size_t j = 0; j < n; ++j) {
                                        const T d = g[r * n + j] * gv[j];
                                        gx[r * n + j] += rstd[r] * (d - mean_d - xhat[r * n + j] * mean_dh);
                                    }
                                }
                            }
                        });
}

template <typename T>
Var<T> softmax(const Var<T>& x, T tau) {
    Tape<T>* tape = common_tape({&x}, "softmax");
    if (!(tau > 0)) throw DataError("softmax temperature must be positive");
    const auto& xv = x.value();
    const std::size_t rows = xv.rows(), n = xv.cols();
    Tensor<T> out(xv.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = xv.data() + r * n;
        T* yr = out.data() + r * n;
        T mx = xr[0] / tau;
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xr[j] / tau);
        T s = 0;
        for (std::size_t j = 0; j < n; ++j) s += (yr[j] = std::exp(xr[j] / tau - mx));
        for (std::size_t j = 0; j < n; ++j) yr[j] /= s;
    }
    const auto ix = x.id();
    Var<T> inputs[] = {x};
    return tape->record(std::move(out), inputs, "softmax", [ix, rows, n, tau](Tape<T>& t, std::uint32_t o) {
        const auto& g = t.grad(o);
        const auto& y = t.value(o);
        auto& gx = t.grad_slot(ix);
        for (std::size_t r = 0; r < rows; ++r) {
            T dot = 0;
            for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
            for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += y[r * n + j] * (g[r * n + j] - dot) / tau;
        }
    });
}

template <typename T>
Var<T> log_softmax(const Var<T>& x, T tau) {
    Tape<T>* tape = common_tape({&x}, "log_softmax");
    if (!(tau > 0)) throw DataError("log_softmax temperature must be positive");
    const auto& xv = x.value();
    const std::size_t rows = xv.rows(), n = xv.cols();
    Tensor<T> out(xv.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = xv.data() + r * n;
        T* yr = out.data() + r * n;
        T mx = xr[0] / tau;
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xr[j] / tau);
        T s = 0;
        for (std::size_t j = 0; j < n; ++j) s += std::exp(xr[j] / tau - mx);
        const T lse = mx + std::log(s);
        for (std::size_t j = 0; j < n; ++j) yr[j] = xr[j] / tau - lse;
    }
    const auto ix = x.id();
    Var<T> inputs[] = {x};
    return tape->record(std::move(out), inputs, "log_softmax", [ix, rows, n, tau](Tape<T>& t, std::uint32_t o) {
        const auto& g = t.grad(o);
        const auto& y = t.value(o);
        auto& gx = t.grad_slot(ix);
        for (std::size_t r = 0; r < rows; ++r) {
            T gs = 0;
            for (std::size_t j = 0; j < n; ++j) gs += g[r * n + j];
            for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += (g[r * n + j] - std::exp(y[r * n + j]) * gs) / tau;
        }
    });
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
    Tape<T>* tape = common_tape({&x}, "gelu");
    const auto& xv = x.value();
    Tensor<T> out(xv.shape());
    const T inv_sqrt2 = T(0.70710678118654752440);
    for (std::size_t i = 0, n = xv.numel(); i < n; ++i) out[i] = T(0.5) * xv[i] * (T(1) + std::erf(xv[i] * inv_sqrt2));
    const auto ix = x.id();
    Var<T> inputs[] = {x};
    return tape->record(std::move(out), inputs, "gelu", [ix, inv_sqrt2](Tape<T>& t, std::uint32_t o) {
        const auto& g = t.grad(o);
        const auto& xv = t.value(ix);
        auto& gx = t.grad_slot(ix);
        const T inv_sqrt_2pi = T(0.39894228040143267794);
        for (std::size_t i = 0, n = g.numel(); i < n; ++i) {
            const T v = xv[i];
            const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
            const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
            gx[i] += g[i] * (cdf + v * pdf);
        }
    });
}

template <typename T>
Var<T> l2_normalize(const Var<T>& x) {
    Tape<T>* tape = common_tape({&x}, "l2_normalize");
    const auto& xv = x.value();
    const std::size_t rows = xv.rows(), n = xv.cols();
    Tensor<T> out(xv.shape());
    std::vector<T> norms(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        T s = 0;
        for (std::size_t j = 0; j < n; ++j) s += xv[r * n + j] * xv[r * n + j];
        norms[r] = std::sqrt(s);
        if (!(norms[r] > 0)) throw NumericError("l2_normalize of a zero-norm row");
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] = xv[r * n + j] / norms[r];
    }
    const auto ix = x.id();
    Var<T> inputs[] = {x};
    return tape->record(std::move(out), inputs, "l2_normalize",
                        [ix, rows, n, norms = std::move(norms)](Tape<T>& t, std::uint32_t o) {
                            const auto& g = t.grad(o);
                            const auto& y = t.value(o);
                            auto& gx = t.grad_slot(ix);
                            for (std::size_t r = 0; r < rows; ++r) {
                                T dot = 0;
                                for (std::size_t j = 0; j < n; ++j) dot += y[r * n + j] * g[r * n + j];
                                for (std::size_t j = 0; j < n; ++j) {
                                    gx[r * n + j] += (g[r * n + j] - y[r * n + j] * dot) / norms[r];
                                }
                            }
                        });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
    Tape<T>* tape = common_tape({&x}, "sum");
    T s = 0;
    for (T v : x.value().values()) s += v;
    const auto ix = x.id();
    Var<T> inputs[] = {x};
    return tape->record(Tensor<T>::scalar(s), inputs, "sum", [ix](Tape<T>& t, std::uint32_t o) {
        const T g = t.grad(o)[0];
        for (auto& v : t.grad_slot(ix).values()) v += g;
    });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
    const auto n = static_cast<T>(x.value().numel());
    if (x.value().numel() == 0) throw ShapeError("mean of empty tensor");
    return scale(sum(x), T(1) / n);
}

template <typename T>
Var<T> mean_rows(const Var<T>& x) {
    Tape<T>* tape = common_tape({&x}, "mean_rows");
    const auto& xv = x.value();
    const std::size_t rows = xv.rows(), n = xv.cols();
    if (rows == 0) throw ShapeError("mean_rows of empty tensor");
    Tensor<T> out(Shape{n});
    for (std::size_t i = 0; i < rows * n; ++i) out[i % n] += xv[i];
    for (auto& v : out.values()) v /= static_cast<T>(rows);
    const auto ix = x.id();
    Var<T> inputs[] = {x};
    return tape->record(std::move(out), inputs, "mean_rows", [ix, rows, n](Tape<T>& t, std::uint32_t o) {
        const auto& g = t.grad(o);
        auto& gx = t.grad_slot(ix);
        for (std::size_t i = 0; i < rows * n; ++i) gx[i] += g[i % n] / static_cast<T>(rows);
    });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat of nothing");
    Tape<T>* tape = parts.front().tape();
    const std::size_t n = parts.front().value().cols();
    std::size_t rows = 0;
    for (const auto& p : parts) {
        tape->check_owner(p, "concat");
        if (p.value().cols() != n) throw ShapeError("concat column mismatch");
        rows += p.value().rows();
    }
    Tensor<T> out(Shape{rows, n});
    std::vector<std::pair<std::uint32_t, std::size_t>> offsets;
    std::size_t at = 0;
    for (const auto& p : parts) {
        std::copy(p.value().values().begin(), p.value().values().end(), out.data() + at);
        offsets.emplace_back(p.id(), at);
        at += p.value().numel();
    }
    return tape->record(std::move(out), parts, "concat", [offsets = std::move(offsets)](Tape<T>& t, std::uint32_t o) {
        const auto& g = t.grad(o);
        for (const auto& [id, off] : offsets) {
            if (!t.requires_grad(id)) continue;
            auto& gp = t.grad_slot(id);
            for (std::size_t i = 0, m = gp.numel(); i < m; ++i) gp[i] += g[off + i];
        }
    });
}

template <typename T>
Var<T> slice(const Var<T>& x, std::size_t begin, std::size_t end) {
    Tape<T>* tape = common_tape({&x}, "slice");
    const auto& xv = x.value();
    const std::size_t n = xv.cols();
    if (begin > end || end > xv.rows()) {
        throw ShapeError("slice rows [" + std::to_string(begin) + "," + std::to_string(end) + ") of " + shape_str(xv.shape()));
    }
    Tensor<T> out(Shape{end - begin, n});
    std::copy(xv.data() + begin * n, xv.data() + end * n, out.data());
    const auto ix = x.id();
    Var<T> inputs[] = {x};
    return tape->record(std::move(out), inputs, "slice", [ix, begin, n](Tape<T>& t, std::uint32_t o) {
        const auto& g = t.grad(o);
        auto& gx = t.grad_slot(ix);
        for (std::size_t i = 0, m = g.numel(); i < m; ++i) gx[begin * n + i] += g[i];
    });
}

template <typename T>
Var<T> scaled_dot_product_attention(const Var<T>& qkv, std::size_t heads) {
    Tape<T>* tape = common_tape({&qkv}, "attention");
    const auto& in = qkv.value();
    if (in.rank() != 2 || in.cols() % 3 != 0) throw ShapeError("attention expects fused qkv[T,3d]");
    const std::size_t tokens = in.rows(), d = in.cols() / 3;
    if (heads == 0 || d % heads != 0) throw ShapeError("attention dim " + std::to_string(d) + " not divisible by heads");
    const std::size_t dh = d / heads;
    const T sc = T(1) / std::sqrt(static_cast<T>(dh));
    const auto Ti = static_cast<Eigen::Index>(tokens), Dh = static_cast<Eigen::Index>(dh);
    const Eigen::OuterStride<> in_stride(static_cast<Eigen::Index>(3 * d));
    const Eigen::OuterStride<> out_stride(static_cast<Eigen::Index>(d));

    Tensor<T> out(Shape{tokens, d});
    std::vector<RowMat<T>> probs(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        ConstStridedMap<T> Q(in.data() + h * dh, Ti, Dh, in_stride);
        ConstStridedMap<T> K(in.data() + d + h * dh, Ti, Dh, in_stride);
        ConstStridedMap<T> V(in.data() + 2 * d + h * dh, Ti, Dh, in_stride);
        RowMat<T> S = (Q * K.transpose()) * sc;
        for (Eigen::Index r = 0; r < Ti; ++r) {
            const T mx = S.row(r).maxCoeff();
            S.row(r) = (S.row(r).array() - mx).exp();
            S.row(r) /= S.row(r).sum();
        }
        StridedMap<T> O(out.data() + h * dh, Ti, Dh, out_stride);
        O.noalias() = S * V;
        probs[h] = std::move(S);
    }
    const auto ix = qkv.id();
    Var<T> inputs[] = {qkv};
    return tape->record(std::move(out), inputs, "attention",
                        [ix, heads, tokens, d, dh, sc, probs = std::move(probs)](Tape<T>& t, std::uint32_t o) {
                            const auto Ti = static_cast<Eigen::Index>(tokens), Dh = static_cast<Eigen::Index>(dh);
                            const Eigen::OuterStride<> in_stride(static_cast<Eigen::Index>(3 * d));
                            const Eigen::OuterStride<> out_stride(static_cast<Eigen::Index>(d));
                            const auto& in = t.value(ix);
                            const auto& g = t.grad(o);
                            auto& gin = t.grad_slot(ix);
                            for (std::size_t h = 0; h < heads; ++h) {
                                ConstStridedMap<T> Q(in.data() + h * dh, Ti, Dh, in_stride);
                                ConstStridedMap<T> K(in.data() + d + h * dh, Ti, Dh, in_stride);
                                ConstStridedMap<T> V(in.data() + 2 * d + h * dh, Ti, Dh, in_stride);
                                ConstStridedMap<T> G(g.data() + h * dh, Ti, Dh, out_stride);
                                StridedMap<T> GQ(gin.data() + h * dh, Ti, Dh, in_stride);
                                StridedMap<T> GK(gin.data() + d + h * dh, Ti, Dh, in_stride);
                                StridedMap<T> GV(gin.data() + 2 * d + h * dh, Ti, Dh, in_stride);
                                const RowMat<T>& A = probs[h];
                                GV.noalias() += A.transpose() * G;
                                RowMat<T> dA = G * V.transpose();
                                Eigen::Matrix<T, Eigen::Dynamic, 1> rs = (dA.array() * A.array()).rowwise().sum();
                                RowMat<T> dS = (A.array() * (dA.colwise() - rs).array()).matrix() * sc;
                                GQ.noalias() += dS * K;
                                GK.noalias() += dS.transpose() * Q;
                            }
                        });
}

template <typename T>
Var<T> detach(const Var<T>& x) {
    return x.tape()->constant(x.value());
}

// ---------------------------------------------------------------- instantiation

#define FUNGI_AD_INSTANTIATE(T)                                                            \
    template class Tape<T>;                                                                \
    template Var<T> matmul<T>(const Var<T>&, const Var<T>&, Transpose);                     \
    template Var<T> add<T>(const Var<T>&, const Var<T>&);                                   \
    template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                   \
    template Var<T> scale<T>(const Var<T>&, T);                                             \
    template Var<T> linear<T>(const Var<T>&, const Var<T>&, const Var<T>&);                 \
    template Var<T> layer_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, T);          \
    template Var<T> softmax<T>(const Var<T>&, T);                                           \
    template Var<T> log_softmax<T>(const Var<T>&, T);                                       \
    template Var<T> gelu<T>(const Var<T>&);                                                 \
    template Var<T> l2_normalize<T>(const Var<T>&);                                         \
    template Var<T> mean<T>(const Var<T>&);                                                 \
    template Var<T> mean_rows<T>(const Var<T>&);                                            \
    template Var<T> sum<T>(const Var<T>&);                                                  \
    template Var<T> concat<T>(const std::vector<Var<T>>&);                                  \
    template Var<T> slice<T>(const Var<T>&, std::size_t, std::size_t);                      \
    template Var<T> scaled_dot_product_attention<T>(const Var<T>&, std::size_t);            \
    template Var<T> detach<T>(const Var<T>&);

FUNGI_AD_INSTANTIATE(float)
FUNGI_AD_INSTANTIATE(double)

#undef FUNGI_AD_INSTANTIATE

}  // namespace fungi::ad
