#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "kan/common.hpp"

namespace kan {

template <typename Scalar>
struct TensorNode {
    Shape shape;
    std::vector<Scalar> data;
    std::vector<Scalar> grad;  // empty until backward touches this node
    bool requires_grad = false;
};

// Dense row-major tensor handle with value semantics over a shared node.
// Arithmetic lives in free functions; gradients are recorded on the active
// Tape and replayed in exact reverse order by backward().
template <typename Scalar>
class Tensor {
public:
    using Node = TensorNode<Scalar>;
    using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

    Tensor() = default;

    explicit Tensor(Shape shape, Scalar fill = Scalar(0)) : node_(std::make_shared<Node>()) {
        for (Index d : shape)
            require<ShapeError>(d > 0, "Tensor: non-positive dimension in ", shape_str(shape));
        node_->shape = std::move(shape);
        node_->data.assign(static_cast<std::size_t>(shape_numel(node_->shape)), fill);
    }

    Tensor(Shape shape, std::vector<Scalar> values) : node_(std::make_shared<Node>()) {
        require<ShapeError>(shape_numel(shape) == static_cast<Index>(values.size()),
                            "Tensor: ", values.size(), " values do not fill shape ", shape_str(shape));
        node_->shape = std::move(shape);
        node_->data = std::move(values);
    }

    static Tensor scalar(Scalar v) { return Tensor(Shape{1}, std::vector<Scalar>{v}); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    Index dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
    Index size() const { return static_cast<Index>(node_->data.size()); }

    Scalar* data() { return node_->data.data(); }
    const Scalar* data() const { return node_->data.data(); }
    std::vector<Scalar>& values() { return node_->data; }
    const std::vector<Scalar>& values() const { return node_->data; }

    Scalar& operator[](Index i) { return node_->data[static_cast<std::size_t>(i)]; }
    Scalar operator[](Index i) const { return node_->data[static_cast<std::size_t>(i)]; }

    Scalar item() const {
        require<ContractError>(size() == 1, "Tensor::item: tensor has ", size(), " elements");
        return node_->data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        node_->requires_grad = b;
        return *this;
    }

    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<Scalar>& grad() const { return node_->grad; }
    std::vector<Scalar>& grad_buffer() {
        if (node_->grad.empty()) node_->grad.assign(node_->data.size(), Scalar(0));
        return node_->grad;
    }
    void zero_grad() { node_->grad.clear(); }

    Tensor clone() const {
        Tensor t(node_->shape, node_->data);
        t.node_->requires_grad = node_->requires_grad;
        return t;
    }

    Tensor detach() const {
        Tensor t(node_->shape, node_->data);
        return t;
    }

    template <typename To>
    Tensor<To> cast() const {
        std::vector<To> v(node_->data.size());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<To>(node_->data[i]);
        return Tensor<To>(node_->shape, std::move(v));
    }

    bool all_finite() const {
        for (Scalar v : node_->data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    Eigen::Map<Mat> mat(Index rows, Index cols) {
        require<ShapeError>(rows * cols == size(), "Tensor::mat: ", rows, "x", cols,
                            " view does not cover ", shape_str(shape()));
        return Eigen::Map<Mat>(data(), rows, cols);
    }
    Eigen::Map<const Mat> mat(Index rows, Index cols) const {
        require<ShapeError>(rows * cols == size(), "Tensor::mat: ", rows, "x", cols,
                            " view does not cover ", shape_str(shape()));
        return Eigen::Map<const Mat>(data(), rows, cols);
    }

    std::shared_ptr<Node> node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

namespace detail {

template <typename Scalar>
std::vector<Scalar>& grad_of(const std::shared_ptr<TensorNode<Scalar>>& n) {
    if (n->grad.empty()) n->grad.assign(n->data.size(), Scalar(0));
    return n->grad;
}

}  // namespace detail

// Ordered record of backward rules. Operations append while a TapeScope is
// active; backward() seeds the loss gradient and replays in reverse.
template <typename Scalar>
class Tape {
public:
    void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }
    std::size_t size() const { return ops_.size(); }
    void clear() { ops_.clear(); }

    void backward(const Tensor<Scalar>& loss) {
        require<ContractError>(loss.defined() && loss.size() == 1,
                               "backward: loss must be a scalar tensor");
        detail::grad_of(loss.node())[0] += Scalar(1);
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    }

private:
    std::vector<std::function<void()>> ops_;
};

template <typename Scalar>
inline Tape<Scalar>*& active_tape() {
    thread_local Tape<Scalar>* tape = nullptr;
    return tape;
}

template <typename Scalar>
class TapeScope {
public:
    explicit TapeScope(Tape<Scalar>& t) : prev_(active_tape<Scalar>()) { active_tape<Scalar>() = &t; }
    ~TapeScope() { active_tape<Scalar>() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape<Scalar>* prev_;
};

template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
    Tape<Scalar>* t = active_tape<Scalar>();
    require<ContractError>(t != nullptr, "backward: no active tape on this thread");
    t->backward(loss);
}

namespace detail {

template <typename Scalar, typename Fn>
void maybe_record(bool needs_grad, Tensor<Scalar>& out, Fn&& fn) {
    Tape<Scalar>* t = active_tape<Scalar>();
    if (t && needs_grad) {
        out.set_requires_grad(true);
        t->record(std::forward<Fn>(fn));
    }
}

template <typename Scalar>
void check_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* op) {
    require<ShapeError>(a.shape() == b.shape(), op, ": shapes differ: ", shape_str(a.shape()),
                        " vs ", shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
    detail::check_same_shape(a, b, "add");
    Tensor<Scalar> out(a.shape());
    const Index n = a.size();
    for (Index i = 0; i < n; ++i) out[i] = a[i] + b[i];
    auto an = a.node(), bn = b.node(), on = out.node();
    detail::maybe_record(a.requires_grad() || b.requires_grad(), out, [an, bn, on]() {
        if (on->grad.empty()) return;
        if (an->requires_grad) {
            auto& g = detail::grad_of(an);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
        }
        if (bn->requires_grad) {
            auto& g = detail::grad_of(bn);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
        }
    });
    return out;
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor<Scalar> out(a.shape());
    const Index n = a.size();
    for (Index i = 0; i < n; ++i) out[i] = a[i] - b[i];
    auto an = a.node(), bn = b.node(), on = out.node();
    detail::maybe_record(a.requires_grad() || b.requires_grad(), out, [an, bn, on]() {
        if (on->grad.empty()) return;
        if (an->requires_grad) {
            auto& g = detail::grad_of(an);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
        }
        if (bn->requires_grad) {
            auto& g = detail::grad_of(bn);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= on->grad[i];
        }
    });
    return out;
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor<Scalar> out(a.shape());
    const Index n = a.size();
    for (Index i = 0; i < n; ++i) out[i] = a[i] * b[i];
    auto an = a.node(), bn = b.node(), on = out.node();
    detail::maybe_record(a.requires_grad() || b.requires_grad(), out, [an, bn, on]() {
        if (on->grad.empty()) return;
        if (an->requires_grad) {
            auto& g = detail::grad_of(an);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * bn->data[i];
        }
        if (bn->requires_grad) {
            auto& g = detail::grad_of(bn);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * an->data[i];
        }
    });
    return out;
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar c) {
    Tensor<Scalar> out(a.shape());
    const Index n = a.size();
    for (Index i = 0; i < n; ++i) out[i] = a[i] * c;
    auto an = a.node(), on = out.node();
    detail::maybe_record(a.requires_grad(), out, [an, on, c]() {
        if (on->grad.empty()) return;
        auto& g = detail::grad_of(an);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * c;
    });
    return out;
}

// y = s * x where s is a one-element tensor (learnable scalar gate).
template <typename Scalar>
Tensor<Scalar> scale_by(const Tensor<Scalar>& x, const Tensor<Scalar>& s) {
    require<ShapeError>(s.size() == 1, "scale_by: gate must hold one element, got ",
                        shape_str(s.shape()));
    Tensor<Scalar> out(x.shape());
    const Scalar sv = s[0];
    const Index n = x.size();
    for (Index i = 0; i < n; ++i) out[i] = x[i] * sv;
    auto xn = x.node(), sn = s.node(), on = out.node();
    detail::maybe_record(x.requires_grad() || s.requires_grad(), out, [xn, sn, on]() {
        if (on->grad.empty()) return;
        const Scalar sv = sn->data[0];
        if (xn->requires_grad) {
            auto& g = detail::grad_of(xn);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * sv;
        }
        if (sn->requires_grad) {
            Scalar acc = 0;
            for (std::size_t i = 0; i < on->grad.size(); ++i) acc += on->grad[i] * xn->data[i];
            detail::grad_of(sn)[0] += acc;
        }
    });
    return out;
}

// Row-broadcast subtraction: y[b, d] = x[b, d] - v[d].
template <typename Scalar>
Tensor<Scalar> sub_rowvec(const Tensor<Scalar>& x, const Tensor<Scalar>& v) {
    require<ShapeError>(x.rank() == 2 && v.size() == x.dim(1),
                        "sub_rowvec: ", shape_str(x.shape()), " vs ", shape_str(v.shape()));
    const Index B = x.dim(0), D = x.dim(1);
    Tensor<Scalar> out(x.shape());
    for (Index b = 0; b < B; ++b)
        for (Index d = 0; d < D; ++d) out[b * D + d] = x[b * D + d] - v[d];
    auto xn = x.node(), vn = v.node(), on = out.node();
    detail::maybe_record(x.requires_grad() || v.requires_grad(), out, [xn, vn, on, B, D]() {
        if (on->grad.empty()) return;
        if (xn->requires_grad) {
            auto& g = detail::grad_of(xn);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
        }
        if (vn->requires_grad) {
            auto& g = detail::grad_of(vn);
            for (Index b = 0; b < B; ++b)
                for (Index d = 0; d < D; ++d) g[static_cast<std::size_t>(d)] -= on->grad[static_cast<std::size_t>(b * D + d)];
        }
    });
    return out;
}

// Row-broadcast division: y[b, d] = x[b, d] / v[d].
template <typename Scalar>
Tensor<Scalar> div_rowvec(const Tensor<Scalar>& x, const Tensor<Scalar>& v) {
    require<ShapeError>(x.rank() == 2 && v.size() == x.dim(1),
                        "div_rowvec: ", shape_str(x.shape()), " vs ", shape_str(v.shape()));
    const Index B = x.dim(0), D = x.dim(1);
    Tensor<Scalar> out(x.shape());
    for (Index b = 0; b < B; ++b)
        for (Index d = 0; d < D; ++d) out[b * D + d] = x[b * D + d] / v[d];
    auto xn = x.node(), vn = v.node(), on = out.node();
    detail::maybe_record(x.requires_grad() || v.requires_grad(), out, [xn, vn, on, B, D]() {
        if (on->grad.empty()) return;
        if (xn->requires_grad) {
            auto& g = detail::grad_of(xn);
            for (Index b = 0; b < B; ++b)
                for (Index d = 0; d < D; ++d) {
                    const std::size_t i = static_cast<std::size_t>(b * D + d);
                    g[i] += on->grad[i] / vn->data[static_cast<std::size_t>(d)];
                }
        }
        if (vn->requires_grad) {
            auto& g = detail::grad_of(vn);
            for (Index b = 0; b < B; ++b)
                for (Index d = 0; d < D; ++d) {
                    const std::size_t i = static_cast<std::size_t>(b * D + d);
                    const Scalar vd = vn->data[static_cast<std::size_t>(d)];
                    g[static_cast<std::size_t>(d)] -= on->grad[i] * on->data[i] / vd;
                }
        }
    });
    return out;
}

// y[i, j, k] = t[i, j, k] * m[i, j]; the per-edge spline scaler contraction.
template <typename Scalar>
Tensor<Scalar> scale_last_dim(const Tensor<Scalar>& t, const Tensor<Scalar>& m) {
    require<ShapeError>(t.rank() == 3 && m.rank() == 2 && t.dim(0) == m.dim(0) && t.dim(1) == m.dim(1),
                        "scale_last_dim: ", shape_str(t.shape()), " vs ", shape_str(m.shape()));
    const Index A = t.dim(0), B = t.dim(1), K = t.dim(2);
    Tensor<Scalar> out(t.shape());
    for (Index i = 0; i < A * B; ++i) {
        const Scalar mi = m[i];
        for (Index k = 0; k < K; ++k) out[i * K + k] = t[i * K + k] * mi;
    }
    auto tn = t.node(), mn = m.node(), on = out.node();
    detail::maybe_record(t.requires_grad() || m.requires_grad(), out, [tn, mn, on, A, B, K]() {
        if (on->grad.empty()) return;
        if (tn->requires_grad) {
            auto& g = detail::grad_of(tn);
            for (Index i = 0; i < A * B; ++i) {
                const Scalar mi = mn->data[static_cast<std::size_t>(i)];
                for (Index k = 0; k < K; ++k) {
                    const std::size_t idx = static_cast<std::size_t>(i * K + k);
                    g[idx] += on->grad[idx] * mi;
                }
            }
        }
        if (mn->requires_grad) {
            auto& g = detail::grad_of(mn);
            for (Index i = 0; i < A * B; ++i) {
                Scalar acc = 0;
                for (Index k = 0; k < K; ++k) {
                    const std::size_t idx = static_cast<std::size_t>(i * K + k);
                    acc += on->grad[idx] * tn->data[idx];
                }
                g[static_cast<std::size_t>(i)] += acc;
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities
// ---------------------------------------------------------------------------

namespace detail {

template <typename Scalar>
Scalar sigmoid(Scalar x) {
    if (x >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-x));
    const Scalar e = std::exp(x);
    return e / (Scalar(1) + e);
}

// Generic unary op: out = f(x), backward multiplies by df evaluated on stored x.
template <typename Scalar, typename F, typename DF>
Tensor<Scalar> unary_op(const Tensor<Scalar>& x, F f, DF df) {
    Tensor<Scalar> out(x.shape());
    const Index n = x.size();
    for (Index i = 0; i < n; ++i) out[i] = f(x[i]);
    auto xn = x.node(), on = out.node();
    maybe_record(x.requires_grad(), out, [xn, on, df]() {
        if (on->grad.empty()) return;
        if (!xn->requires_grad) return;
        auto& g = grad_of(xn);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * df(xn->data[i]);
    });
    return out;
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> silu(const Tensor<Scalar>& x) {
    return detail::unary_op(
        x, [](Scalar v) { return v * detail::sigmoid(v); },
        [](Scalar v) {
            const Scalar s = detail::sigmoid(v);
            return s + v * s * (Scalar(1) - s);
        });
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
    return detail::unary_op(
        x, [](Scalar v) { return v > Scalar(0) ? v : Scalar(0); },
        [](Scalar v) { return v > Scalar(0) ? Scalar(1) : Scalar(0); });
}

// softplus(x) + shift, computed overflow-free; derivative is sigmoid(x).
template <typename Scalar>
Tensor<Scalar> softplus_shift(const Tensor<Scalar>& x, Scalar shift) {
    return detail::unary_op(
        x,
        [shift](Scalar v) {
            const Scalar sp = v > Scalar(0) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
            return sp + shift;
        },
        [](Scalar v) { return detail::sigmoid(v); });
}

// ---------------------------------------------------------------------------
// Reductions and structure
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
    Scalar acc = 0;
    const Index n = x.size();
    for (Index i = 0; i < n; ++i) acc += x[i];
    Tensor<Scalar> out = Tensor<Scalar>::scalar(acc);
    auto xn = x.node(), on = out.node();
    detail::maybe_record(x.requires_grad(), out, [xn, on]() {
        if (on->grad.empty()) return;
        const Scalar g0 = on->grad[0];
        auto& g = detail::grad_of(xn);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += g0;
    });
    return out;
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x) {
    return scale(sum(x), Scalar(1) / static_cast<Scalar>(x.size()));
}

template <typename Scalar>
Tensor<Scalar> take(const Tensor<Scalar>& x, Index flat) {
    require<IndexError>(flat >= 0 && flat < x.size(), "take: index ", flat, " out of range for ",
                        shape_str(x.shape()));
    Tensor<Scalar> out = Tensor<Scalar>::scalar(x[flat]);
    auto xn = x.node(), on = out.node();
    detail::maybe_record(x.requires_grad(), out, [xn, on, flat]() {
        if (on->grad.empty()) return;
        detail::grad_of(xn)[static_cast<std::size_t>(flat)] += on->grad[0];
    });
    return out;
}

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape) {
    require<ShapeError>(shape_numel(shape) == x.size(), "reshape: ", shape_str(x.shape()),
                        " cannot view as ", shape_str(shape));
    Tensor<Scalar> out(std::move(shape), x.values());
    auto xn = x.node(), on = out.node();
    detail::maybe_record(x.requires_grad(), out, [xn, on]() {
        if (on->grad.empty()) return;
        auto& g = detail::grad_of(xn);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
    });
    return out;
}

template <typename Scalar>
Tensor<Scalar> concat_cols(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
    require<ShapeError>(a.rank() == 2 && b.rank() == 2 && a.dim(0) == b.dim(0),
                        "concat_cols: ", shape_str(a.shape()), " vs ", shape_str(b.shape()));
    const Index B = a.dim(0), Da = a.dim(1), Db = b.dim(1);
    Tensor<Scalar> out(Shape{B, Da + Db});
    for (Index r = 0; r < B; ++r) {
        std::copy_n(a.data() + r * Da, Da, out.data() + r * (Da + Db));
        std::copy_n(b.data() + r * Db, Db, out.data() + r * (Da + Db) + Da);
    }
    auto an = a.node(), bn = b.node(), on = out.node();
    detail::maybe_record(a.requires_grad() || b.requires_grad(), out, [an, bn, on, B, Da, Db]() {
        if (on->grad.empty()) return;
        if (an->requires_grad) {
            auto& g = detail::grad_of(an);
            for (Index r = 0; r < B; ++r)
                for (Index c = 0; c < Da; ++c)
                    g[static_cast<std::size_t>(r * Da + c)] += on->grad[static_cast<std::size_t>(r * (Da + Db) + c)];
        }
        if (bn->requires_grad) {
            auto& g = detail::grad_of(bn);
            for (Index r = 0; r < B; ++r)
                for (Index c = 0; c < Db; ++c)
                    g[static_cast<std::size_t>(r * Db + c)] += on->grad[static_cast<std::size_t>(r * (Da + Db) + Da + c)];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
    require<ShapeError>(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
                        "matmul: inner dimensions disagree: ", shape_str(a.shape()), " vs ",
                        shape_str(b.shape()));
    const Index M = a.dim(0), K = a.dim(1), N = b.dim(1);
    Tensor<Scalar> out(Shape{M, N});
    out.mat(M, N).noalias() = a.mat(M, K) * b.mat(K, N);
    auto an = a.node(), bn = b.node(), on = out.node();
    detail::maybe_record(a.requires_grad() || b.requires_grad(), out, [an, bn, on, M, K, N]() {
        if (on->grad.empty()) return;
        using Mat = typename Tensor<Scalar>::Mat;
        Eigen::Map<const Mat> g(on->grad.data(), M, N);
        Eigen::Map<const Mat> av(an->data.data(), M, K);
        Eigen::Map<const Mat> bv(bn->data.data(), K, N);
        if (an->requires_grad) {
            Eigen::Map<Mat> ga(detail::grad_of(an).data(), M, K);
            ga.noalias() += g * bv.transpose();
        }
        if (bn->requires_grad) {
            Eigen::Map<Mat> gb(detail::grad_of(bn).data(), K, N);
            gb.noalias() += av.transpose() * g;
        }
    });
    return out;
}

// y = x * W^T for weight stored [out x in]; the layer-facing product.
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& w) {
    require<ShapeError>(x.rank() == 2 && w.rank() == 2 && x.dim(1) == w.dim(1),
                        "linear: input ", shape_str(x.shape()), " incompatible with weight ",
                        shape_str(w.shape()));
    const Index B = x.dim(0), In = x.dim(1), Out = w.dim(0);
    Tensor<Scalar> out(Shape{B, Out});
    out.mat(B, Out).noalias() = x.mat(B, In) * w.mat(Out, In).transpose();
    auto xn = x.node(), wn = w.node(), on = out.node();
    detail::maybe_record(x.requires_grad() || w.requires_grad(), out, [xn, wn, on, B, In, Out]() {
        if (on->grad.empty()) return;
        using Mat = typename Tensor<Scalar>::Mat;
        Eigen::Map<const Mat> g(on->grad.data(), B, Out);
        Eigen::Map<const Mat> xv(xn->data.data(), B, In);
        Eigen::Map<const Mat> wv(wn->data.data(), Out, In);
        if (xn->requires_grad) {
            Eigen::Map<Mat> gx(detail::grad_of(xn).data(), B, In);
            gx.noalias() += g * wv;
        }
        if (wn->requires_grad) {
            Eigen::Map<Mat> gw(detail::grad_of(wn).data(), Out, In);
            gw.noalias() += g.transpose() * xv;
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Convolution and pooling
// ---------------------------------------------------------------------------

namespace detail {

template <typename Scalar>
void im2col(const Scalar* x, Index cin, Index h, Index w, Index k, Index stride, Index pad,
            Index ho, Index wo, Scalar* col) {
    // col is [cin*k*k x ho*wo], row-major.
    for (Index ci = 0; ci < cin; ++ci) {
        for (Index ki = 0; ki < k; ++ki) {
            for (Index kj = 0; kj < k; ++kj) {
                Scalar* row = col + ((ci * k + ki) * k + kj) * (ho * wo);
                for (Index oy = 0; oy < ho; ++oy) {
                    const Index iy = oy * stride - pad + ki;
                    for (Index ox = 0; ox < wo; ++ox) {
                        const Index ix = ox * stride - pad + kj;
                        row[oy * wo + ox] = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                                ? x[(ci * h + iy) * w + ix]
                                                : Scalar(0);
                    }
                }
            }
        }
    }
}

template <typename Scalar>
void col2im_add(const Scalar* col, Index cin, Index h, Index w, Index k, Index stride, Index pad,
                Index ho, Index wo, Scalar* x) {
    for (Index ci = 0; ci < cin; ++ci) {
        for (Index ki = 0; ki < k; ++ki) {
            for (Index kj = 0; kj < k; ++kj) {
                const Scalar* row = col + ((ci * k + ki) * k + kj) * (ho * wo);
                for (Index oy = 0; oy < ho; ++oy) {
                    const Index iy = oy * stride - pad + ki;
                    if (iy < 0 || iy >= h) continue;
                    for (Index ox = 0; ox < wo; ++ox) {
                        const Index ix = ox * stride - pad + kj;
                        if (ix < 0 || ix >= w) continue;
                        x[(ci * h + iy) * w + ix] += row[oy * wo + ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// Cross-correlation (no kernel flip). bias may be an undefined tensor.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& kernel,
                      const Tensor<Scalar>& bias, Index stride, Index pad) {
    require<ShapeError>(x.rank() == 4, "conv2d: input must be BxCxHxW, got ", shape_str(x.shape()));
    require<ShapeError>(kernel.rank() == 4 && kernel.dim(2) == kernel.dim(3),
                        "conv2d: kernel must be OxIxkxk, got ", shape_str(kernel.shape()));
    require<ShapeError>(x.dim(1) == kernel.dim(1), "conv2d: input channels ", x.dim(1),
                        " vs kernel channels ", kernel.dim(1));
    require<ContractError>(stride >= 1, "conv2d: stride must be >= 1, got ", stride);
    require<ContractError>(pad >= 0, "conv2d: padding must be >= 0, got ", pad);
    const Index B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const Index Cout = kernel.dim(0), K = kernel.dim(2);
    require<ShapeError>(K <= H + 2 * pad && K <= W + 2 * pad, "conv2d: kernel ", K,
                        "x", K, " larger than padded input ", H + 2 * pad, "x", W + 2 * pad);
    if (bias.defined())
        require<ShapeError>(bias.size() == Cout, "conv2d: bias length ", bias.size(),
                            " vs output channels ", Cout);

    const Index Ho = (H + 2 * pad - K) / stride + 1;
    const Index Wo = (W + 2 * pad - K) / stride + 1;
    const Index ck2 = Cin * K * K, hw = Ho * Wo;

    Tensor<Scalar> out(Shape{B, Cout, Ho, Wo});
    using Mat = typename Tensor<Scalar>::Mat;
    auto cols = std::make_shared<std::vector<Scalar>>(static_cast<std::size_t>(B * ck2 * hw));
    Eigen::Map<const Mat> kmat(kernel.data(), Cout, ck2);
    for (Index b = 0; b < B; ++b) {
        Scalar* col = cols->data() + b * ck2 * hw;
        detail::im2col(x.data() + b * Cin * H * W, Cin, H, W, K, stride, pad, Ho, Wo, col);
        Eigen::Map<Mat> ob(out.data() + b * Cout * hw, Cout, hw);
        ob.noalias() = kmat * Eigen::Map<const Mat>(col, ck2, hw);
        if (bias.defined())
            for (Index c = 0; c < Cout; ++c) ob.row(c).array() += bias[c];
    }

    auto xn = x.node(), kn = kernel.node(), on = out.node();
    auto bn = bias.defined() ? bias.node() : nullptr;
    const bool needs = x.requires_grad() || kernel.requires_grad() ||
                       (bias.defined() && bias.requires_grad());
    detail::maybe_record(needs, out,
                         [xn, kn, bn, on, cols, B, Cin, H, W, Cout, K, stride, pad, Ho, Wo]() {
        if (on->grad.empty()) return;
        const Index ck2 = Cin * K * K, hw = Ho * Wo;
        for (Index b = 0; b < B; ++b) {
            Eigen::Map<const Mat> g(on->grad.data() + b * Cout * hw, Cout, hw);
            const Scalar* col = cols->data() + b * ck2 * hw;
            if (kn->requires_grad) {
                Eigen::Map<Mat> gk(detail::grad_of(kn).data(), Cout, ck2);
                gk.noalias() += g * Eigen::Map<const Mat>(col, ck2, hw).transpose();
            }
            if (bn && bn->requires_grad) {
                auto& gb = detail::grad_of(bn);
                for (Index c = 0; c < Cout; ++c) gb[static_cast<std::size_t>(c)] += g.row(c).sum();
            }
            if (xn->requires_grad) {
                Mat dcol(ck2, hw);
                dcol.noalias() = Eigen::Map<const Mat>(kn->data.data(), Cout, ck2).transpose() * g;
                detail::col2im_add(dcol.data(), Cin, H, W, K, stride, pad, Ho, Wo,
                                   detail::grad_of(xn).data() + b * Cin * H * W);
            }
        }
    });
    return out;
}

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& kernel, Index stride,
                      Index pad) {
    return conv2d(x, kernel, Tensor<Scalar>(), stride, pad);
}

// Gradient routes to the first maximum in row-major window order.
template <typename Scalar>
Tensor<Scalar> maxpool2d(const Tensor<Scalar>& x, Index window, Index stride) {
    require<ShapeError>(x.rank() == 4, "maxpool2d: input must be BxCxHxW, got ",
                        shape_str(x.shape()));
    require<ContractError>(window >= 1 && stride >= 1, "maxpool2d: window and stride must be >= 1");
    const Index B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    require<ShapeError>(window <= H && window <= W, "maxpool2d: window ", window,
                        " exceeds spatial dims ", H, "x", W);
    const Index Ho = (H - window) / stride + 1;
    const Index Wo = (W - window) / stride + 1;

    Tensor<Scalar> out(Shape{B, C, Ho, Wo});
    auto argmax = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(out.size()));
    for (Index bc = 0; bc < B * C; ++bc) {
        const Scalar* plane = x.data() + bc * H * W;
        for (Index oy = 0; oy < Ho; ++oy) {
            for (Index ox = 0; ox < Wo; ++ox) {
                Index best = (oy * stride) * W + (ox * stride);
                Scalar bv = plane[best];
                for (Index wy = 0; wy < window; ++wy)
                    for (Index wx = 0; wx < window; ++wx) {
                        const Index idx = (oy * stride + wy) * W + (ox * stride + wx);
                        if (plane[idx] > bv) {
                            bv = plane[idx];
                            best = idx;
                        }
                    }
                const Index oidx = (bc * Ho + oy) * Wo + ox;
                out[oidx] = bv;
                (*argmax)[static_cast<std::size_t>(oidx)] = bc * H * W + best;
            }
        }
    }
    auto xn = x.node(), on = out.node();
    detail::maybe_record(x.requires_grad(), out, [xn, on, argmax]() {
        if (on->grad.empty()) return;
        auto& g = detail::grad_of(xn);
        for (std::size_t i = 0; i < on->grad.size(); ++i)
            g[static_cast<std::size_t>((*argmax)[i])] += on->grad[i];
    });
    return out;
}

// ---------------------------------------------------------------------------
// Normalization and loss
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> softmax_rows(const Tensor<Scalar>& x) {
    require<ShapeError>(x.rank() == 2, "softmax_rows: expects BxC, got ", shape_str(x.shape()));
    const Index B = x.dim(0), C = x.dim(1);
    Tensor<Scalar> out(x.shape());
    for (Index b = 0; b < B; ++b) {
        const Scalar* row = x.data() + b * C;
        Scalar mx = row[0];
        for (Index c = 1; c < C; ++c) mx = std::max(mx, row[c]);
        Scalar denom = 0;
        for (Index c = 0; c < C; ++c) {
            const Scalar e = std::exp(row[c] - mx);
            out[b * C + c] = e;
            denom += e;
        }
        for (Index c = 0; c < C; ++c) out[b * C + c] /= denom;
    }
    auto xn = x.node(), on = out.node();
    detail::maybe_record(x.requires_grad(), out, [xn, on, B, C]() {
        if (on->grad.empty()) return;
        auto& g = detail::grad_of(xn);
        for (Index b = 0; b < B; ++b) {
            Scalar dot = 0;
            for (Index c = 0; c < C; ++c) {
                const std::size_t i = static_cast<std::size_t>(b * C + c);
                dot += on->grad[i] * on->data[i];
            }
            for (Index c = 0; c < C; ++c) {
                const std::size_t i = static_cast<std::size_t>(b * C + c);
                g[i] += on->data[i] * (on->grad[i] - dot);
            }
        }
    });
    return out;
}

namespace detail {

// Shared layer-norm kernel; gamma/beta may be undefined for the plain variant.
template <typename Scalar>
Tensor<Scalar> layer_norm_impl(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                               const Tensor<Scalar>& beta, Scalar eps) {
    require<ShapeError>(x.rank() == 2, "layer_norm: expects BxD, got ", shape_str(x.shape()));
    const Index B = x.dim(0), D = x.dim(1);
    const bool affine = gamma.defined();
    if (affine) {
        require<ShapeError>(gamma.size() == D && beta.size() == D,
                            "layer_norm: affine parameters must have length ", D);
    }
    Tensor<Scalar> out(x.shape());
    auto norm = std::make_shared<std::vector<Scalar>>(static_cast<std::size_t>(x.size()));
    auto inv_sigma = std::make_shared<std::vector<Scalar>>(static_cast<std::size_t>(B));
    for (Index b = 0; b < B; ++b) {
        const Scalar* row = x.data() + b * D;
        Scalar mu = 0;
        for (Index d = 0; d < D; ++d) mu += row[d];
        mu /= static_cast<Scalar>(D);
        Scalar var = 0;
        for (Index d = 0; d < D; ++d) var += (row[d] - mu) * (row[d] - mu);
        var /= static_cast<Scalar>(D);
        const Scalar is = Scalar(1) / std::sqrt(var + eps);
        (*inv_sigma)[static_cast<std::size_t>(b)] = is;
        for (Index d = 0; d < D; ++d) {
            const Scalar y = (row[d] - mu) * is;
            (*norm)[static_cast<std::size_t>(b * D + d)] = y;
            out[b * D + d] = affine ? gamma[d] * y + beta[d] : y;
        }
    }
    auto xn = x.node(), on = out.node();
    auto gn = affine ? gamma.node() : nullptr;
    auto bn = affine ? beta.node() : nullptr;
    const bool needs = x.requires_grad() || (affine && (gamma.requires_grad() || beta.requires_grad()));
    detail::maybe_record(needs, out, [xn, gn, bn, on, norm, inv_sigma, B, D]() {
        if (on->grad.empty()) return;
        for (Index b = 0; b < B; ++b) {
            const Scalar is = (*inv_sigma)[static_cast<std::size_t>(b)];
            if (xn->requires_grad) {
                Scalar mean_gy = 0, mean_gyy = 0;
                for (Index d = 0; d < D; ++d) {
                    const std::size_t i = static_cast<std::size_t>(b * D + d);
                    const Scalar gy = gn ? on->grad[i] * gn->data[static_cast<std::size_t>(d)] : on->grad[i];
                    mean_gy += gy;
                    mean_gyy += gy * (*norm)[i];
                }
                mean_gy /= static_cast<Scalar>(D);
                mean_gyy /= static_cast<Scalar>(D);
                auto& gx = detail::grad_of(xn);
                for (Index d = 0; d < D; ++d) {
                    const std::size_t i = static_cast<std::size_t>(b * D + d);
                    const Scalar gy = gn ? on->grad[i] * gn->data[static_cast<std::size_t>(d)] : on->grad[i];
                    gx[i] += (gy - mean_gy - (*norm)[i] * mean_gyy) * is;
                }
            }
            if (gn && gn->requires_grad) {
                auto& gg = detail::grad_of(gn);
                for (Index d = 0; d < D; ++d) {
                    const std::size_t i = static_cast<std::size_t>(b * D + d);
                    gg[static_cast<std::size_t>(d)] += on->grad[i] * (*norm)[i];
                }
            }
            if (bn && bn->requires_grad) {
                auto& gb = detail::grad_of(bn);
                for (Index d = 0; d < D; ++d)
                    gb[static_cast<std::size_t>(d)] += on->grad[static_cast<std::size_t>(b * D + d)];
            }
        }
    });
    return out;
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                          const Tensor<Scalar>& beta, Scalar eps = Scalar(1e-5)) {
    return detail::layer_norm_impl(x, gamma, beta, eps);
}

template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, Scalar eps = Scalar(1e-5)) {
    return detail::layer_norm_impl(x, Tensor<Scalar>(), Tensor<Scalar>(), eps);
}

// BatchNorm1d. In training mode normalizes by the biased batch statistics and
// updates running_mean/running_var in place (momentum convention: new = (1-m)*old + m*batch,
// running variance stored unbiased). Inference normalizes by the running statistics.
template <typename Scalar>
Tensor<Scalar> batch_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                          const Tensor<Scalar>& beta, Tensor<Scalar>& running_mean,
                          Tensor<Scalar>& running_var, bool training,
                          Scalar momentum = Scalar(0.1), Scalar eps = Scalar(1e-5)) {
    require<ShapeError>(x.rank() == 2, "batch_norm: expects BxD, got ", shape_str(x.shape()));
    const Index B = x.dim(0), D = x.dim(1);
    require<ShapeError>(gamma.size() == D && beta.size() == D && running_mean.size() == D &&
                            running_var.size() == D,
                        "batch_norm: parameter length mismatch for D=", D);
    if (training)
        require<ContractError>(B >= 2, "batch_norm: training mode requires batch size >= 2, got ", B);

    Tensor<Scalar> out(x.shape());
    auto norm = std::make_shared<std::vector<Scalar>>(static_cast<std::size_t>(x.size()));
    auto inv_sigma = std::make_shared<std::vector<Scalar>>(static_cast<std::size_t>(D));
    for (Index d = 0; d < D; ++d) {
        Scalar mu, var;
        if (training) {
            mu = 0;
            for (Index b = 0; b < B; ++b) mu += x[b * D + d];
            mu /= static_cast<Scalar>(B);
            var = 0;
            for (Index b = 0; b < B; ++b) {
                const Scalar c = x[b * D + d] - mu;
                var += c * c;
            }
            var /= static_cast<Scalar>(B);
            const Scalar unbiased = var * static_cast<Scalar>(B) / static_cast<Scalar>(B - 1);
            running_mean[d] = (Scalar(1) - momentum) * running_mean[d] + momentum * mu;
            running_var[d] = (Scalar(1) - momentum) * running_var[d] + momentum * unbiased;
        } else {
            mu = running_mean[d];
            var = running_var[d];
        }
        const Scalar is = Scalar(1) / std::sqrt(var + eps);
        (*inv_sigma)[static_cast<std::size_t>(d)] = is;
        for (Index b = 0; b < B; ++b) {
            const Scalar y = (x[b * D + d] - mu) * is;
            (*norm)[static_cast<std::size_t>(b * D + d)] = y;
            out[b * D + d] = gamma[d] * y + beta[d];
        }
    }
    auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
    const bool needs = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    detail::maybe_record(needs, out, [xn, gn, bn, on, norm, inv_sigma, B, D, training]() {
        if (on->grad.empty()) return;
        for (Index d = 0; d < D; ++d) {
            const Scalar is = (*inv_sigma)[static_cast<std::size_t>(d)];
            const Scalar gv = gn->data[static_cast<std::size_t>(d)];
            Scalar sum_g = 0, sum_gy = 0;
            for (Index b = 0; b < B; ++b) {
                const std::size_t i = static_cast<std::size_t>(b * D + d);
                sum_g += on->grad[i];
                sum_gy += on->grad[i] * (*norm)[i];
            }
            if (xn->requires_grad) {
                auto& gx = detail::grad_of(xn);
                for (Index b = 0; b < B; ++b) {
                    const std::size_t i = static_cast<std::size_t>(b * D + d);
                    if (training) {
                        gx[i] += gv * is *
                                 (on->grad[i] - sum_g / static_cast<Scalar>(B) -
                                  (*norm)[i] * sum_gy / static_cast<Scalar>(B));
                    } else {
                        gx[i] += gv * is * on->grad[i];
                    }
                }
            }
            if (gn->requires_grad) detail::grad_of(gn)[static_cast<std::size_t>(d)] += sum_gy;
            if (bn->requires_grad) detail::grad_of(bn)[static_cast<std::size_t>(d)] += sum_g;
        }
    });
    return out;
}

// Mean negative log-likelihood with a fused log-sum-exp.
template <typename Scalar>
Tensor<Scalar> cross_entropy(const Tensor<Scalar>& logits, const std::vector<int>& labels) {
    require<ShapeError>(logits.rank() == 2, "cross_entropy: logits must be BxC, got ",
                        shape_str(logits.shape()));
    const Index B = logits.dim(0), C = logits.dim(1);
    require<ShapeError>(static_cast<Index>(labels.size()) == B, "cross_entropy: ", labels.size(),
                        " labels for batch of ", B);
    auto probs = std::make_shared<std::vector<Scalar>>(static_cast<std::size_t>(logits.size()));
    Scalar total = 0;
    for (Index b = 0; b < B; ++b) {
        const int y = labels[static_cast<std::size_t>(b)];
        require<IndexError>(y >= 0 && y < C, "cross_entropy: label ", y, " out of range [0,", C,
                            ") at row ", b);
        const Scalar* row = logits.data() + b * C;
        Scalar mx = row[0];
        for (Index c = 1; c < C; ++c) mx = std::max(mx, row[c]);
        Scalar denom = 0;
        for (Index c = 0; c < C; ++c) denom += std::exp(row[c] - mx);
        const Scalar lse = mx + std::log(denom);
        for (Index c = 0; c < C; ++c)
            (*probs)[static_cast<std::size_t>(b * C + c)] = std::exp(row[c] - lse);
        total += lse - row[y];
    }
    Tensor<Scalar> out = Tensor<Scalar>::scalar(total / static_cast<Scalar>(B));
    auto xn = logits.node(), on = out.node();
    auto labels_copy = std::make_shared<std::vector<int>>(labels);
    detail::maybe_record(logits.requires_grad(), out, [xn, on, probs, labels_copy, B, C]() {
        if (on->grad.empty()) return;
        const Scalar g0 = on->grad[0] / static_cast<Scalar>(B);
        auto& g = detail::grad_of(xn);
        for (Index b = 0; b < B; ++b) {
            const int y = (*labels_copy)[static_cast<std::size_t>(b)];
            for (Index c = 0; c < C; ++c) {
                const std::size_t i = static_cast<std::size_t>(b * C + c);
                g[i] += g0 * ((*probs)[i] - (c == y ? Scalar(1) : Scalar(0)));
            }
        }
    });
    return out;
}

}  // namespace kan
