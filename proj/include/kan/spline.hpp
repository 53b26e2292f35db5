#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <cmath>
#include <limits>
#include <vector>

#include "kan/tensor.hpp"

namespace kan {

// Uniform B-spline grid: grid_size interior intervals on [g_min, g_max] with
// the knot vector extended spline_order steps past each end. Knots are kept in
// double regardless of the tensor scalar so the spacing invariant holds.
struct SplineGrid {
    double g_min = -1.0;
    double g_max = 1.0;
    int grid_size = 5;
    int spline_order = 3;
    std::vector<double> knots;

    SplineGrid(double gmin = -1.0, double gmax = 1.0, int gsize = 5, int order = 3)
        : g_min(gmin), g_max(gmax), grid_size(gsize), spline_order(order) {
        require<ContractError>(g_min < g_max, "SplineGrid: g_min must be < g_max, got ", g_min,
                               " and ", g_max);
        require<ContractError>(grid_size >= 1, "SplineGrid: grid_size must be >= 1, got ", grid_size);
        require<ContractError>(spline_order >= 0, "SplineGrid: spline_order must be >= 0, got ",
                               spline_order);
        const double h = (g_max - g_min) / grid_size;
        const int count = grid_size + 2 * spline_order + 1;
        knots.resize(static_cast<std::size_t>(count));
        for (int i = 0; i < count; ++i) knots[static_cast<std::size_t>(i)] = g_min + (i - spline_order) * h;
    }

    int basis_count() const { return grid_size + spline_order; }
    double spacing() const { return (g_max - g_min) / grid_size; }
};

namespace detail {

// Interval index for the order-0 indicator; half-open [t_i, t_{i+1}) with the
// interval ending at g_max closed so x = g_max keeps a live basis. Returns -1
// when x falls outside the extended knot span.
inline int knot_interval(const SplineGrid& grid, double x) {
    const auto& t = grid.knots;
    const int nint = static_cast<int>(t.size()) - 1;
    if (x == grid.g_max) return grid.spline_order + grid.grid_size - 1;
    if (x < t.front() || x >= t.back()) return -1;
    int lo = 0, hi = nint - 1;
    while (lo < hi) {
        const int mid = (lo + hi + 1) / 2;
        if (t[static_cast<std::size_t>(mid)] <= x)
            lo = mid;
        else
            hi = mid - 1;
    }
    return lo;
}

}  // namespace detail

// Cox-de Boor evaluation of all basis_count() degree-spline_order functions at
// x. values must hold basis_count() entries; derivs, when given, receives the
// first derivatives via the standard degree-lowering identity.
inline void bspline_eval(const SplineGrid& grid, double x, double* values, double* derivs = nullptr) {
    const auto& t = grid.knots;
    const int order = grid.spline_order;
    const int nint = static_cast<int>(t.size()) - 1;
    const int nbasis = grid.basis_count();

    std::vector<double> work(static_cast<std::size_t>(nint), 0.0);
    const int iv = detail::knot_interval(grid, x);
    if (iv < 0) {
        for (int i = 0; i < nbasis; ++i) values[i] = 0.0;
        if (derivs)
            for (int i = 0; i < nbasis; ++i) derivs[i] = 0.0;
        return;
    }
    work[static_cast<std::size_t>(iv)] = 1.0;

    std::vector<double> lower;  // degree order-1 values, kept for the derivative
    for (int k = 1; k <= order; ++k) {
        if (derivs && k == order) lower.assign(work.begin(), work.end());
        for (int i = 0; i + k < nint; ++i) {
            const double dl = t[static_cast<std::size_t>(i + k)] - t[static_cast<std::size_t>(i)];
            const double dr = t[static_cast<std::size_t>(i + k + 1)] - t[static_cast<std::size_t>(i + 1)];
            double v = 0.0;
            if (work[static_cast<std::size_t>(i)] != 0.0) v += (x - t[static_cast<std::size_t>(i)]) / dl * work[static_cast<std::size_t>(i)];
            if (work[static_cast<std::size_t>(i + 1)] != 0.0)
                v += (t[static_cast<std::size_t>(i + k + 1)] - x) / dr * work[static_cast<std::size_t>(i + 1)];
            work[static_cast<std::size_t>(i)] = v;
        }
    }
    for (int i = 0; i < nbasis; ++i) values[i] = work[static_cast<std::size_t>(i)];
    if (derivs) {
        if (order == 0) {
            for (int i = 0; i < nbasis; ++i) derivs[i] = 0.0;
        } else {
            for (int i = 0; i < nbasis; ++i) {
                const double dl = t[static_cast<std::size_t>(i + order)] - t[static_cast<std::size_t>(i)];
                const double dr = t[static_cast<std::size_t>(i + order + 1)] - t[static_cast<std::size_t>(i + 1)];
                derivs[i] = order * (lower[static_cast<std::size_t>(i)] / dl -
                                     lower[static_cast<std::size_t>(i + 1)] / dr);
            }
        }
    }
}

// Basis expansion of a batch: x[BxD] -> [BxDxK]. Differentiable w.r.t. x.
template <typename Scalar>
Tensor<Scalar> bspline_basis(const SplineGrid& grid, const Tensor<Scalar>& x) {
    require<ShapeError>(x.rank() == 2, "bspline_basis: expects BxD input, got ",
                        shape_str(x.shape()));
    const Index B = x.dim(0), D = x.dim(1);
    const int K = grid.basis_count();
    Tensor<Scalar> out(Shape{B, D, K});
    std::vector<double> vals(static_cast<std::size_t>(K));
    for (Index i = 0; i < B * D; ++i) {
        bspline_eval(grid, static_cast<double>(x[i]), vals.data());
        for (int k = 0; k < K; ++k) out[i * K + k] = static_cast<Scalar>(vals[static_cast<std::size_t>(k)]);
    }
    auto xn = x.node(), on = out.node();
    detail::maybe_record(x.requires_grad(), out, [xn, on, grid, K]() {
        if (on->grad.empty()) return;
        auto& g = detail::grad_of(xn);
        std::vector<double> vals(static_cast<std::size_t>(K)), ders(static_cast<std::size_t>(K));
        for (std::size_t i = 0; i < g.size(); ++i) {
            bspline_eval(grid, static_cast<double>(xn->data[i]), vals.data(), ders.data());
            double acc = 0.0;
            for (int k = 0; k < K; ++k)
                acc += static_cast<double>(on->grad[i * static_cast<std::size_t>(K) + static_cast<std::size_t>(k)]) *
                       ders[static_cast<std::size_t>(k)];
            g[i] += static_cast<Scalar>(acc);
        }
    });
    return out;
}

template <typename Scalar>
struct SplineFit {
    Tensor<Scalar> coefficients;  // [Out x D x K]
    double max_condition = 0.0;
    bool condition_warning = false;
};

// Damped normal-equation fit of spline coefficients: for each input dimension
// d solves min ||A c - y||_2 with A = bspline_basis(sample_x[:, d]) and
// Tikhonov damping 1e-8. Condition is estimated from the singular values of A.
template <typename Scalar>
SplineFit<Scalar> least_squares_fit(const SplineGrid& grid, const Tensor<Scalar>& sample_x,
                                    const Tensor<Scalar>& sample_y) {
    require<ShapeError>(sample_x.rank() == 2, "least_squares_fit: sample_x must be PxD, got ",
                        shape_str(sample_x.shape()));
    require<ShapeError>(sample_y.rank() == 3, "least_squares_fit: sample_y must be PxDxOut, got ",
                        shape_str(sample_y.shape()));
    const Index P = sample_x.dim(0), D = sample_x.dim(1);
    require<ShapeError>(sample_y.dim(0) == P && sample_y.dim(1) == D,
                        "least_squares_fit: sample_y ", shape_str(sample_y.shape()),
                        " does not match sample_x ", shape_str(sample_x.shape()));
    const Index Out = sample_y.dim(2);
    const int K = grid.basis_count();
    require<ContractError>(P >= K, "least_squares_fit: need at least ", K, " samples, got ", P);

    constexpr double lambda = 1e-8;
    SplineFit<Scalar> fit;
    fit.coefficients = Tensor<Scalar>(Shape{Out, D, static_cast<Index>(K)});
    Eigen::MatrixXd A(P, K), Y(P, Out);
    std::vector<double> vals(static_cast<std::size_t>(K));
    for (Index d = 0; d < D; ++d) {
        for (Index p = 0; p < P; ++p) {
            bspline_eval(grid, static_cast<double>(sample_x[p * D + d]), vals.data());
            for (int k = 0; k < K; ++k) A(p, k) = vals[static_cast<std::size_t>(k)];
            for (Index o = 0; o < Out; ++o) Y(p, o) = static_cast<double>(sample_y[(p * D + d) * Out + o]);
        }
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(A);
        const double smax = svd.singularValues()(0);
        const double smin = svd.singularValues()(svd.singularValues().size() - 1);
        const double cond = smin > 0.0 ? smax / smin : std::numeric_limits<double>::infinity();
        fit.max_condition = std::max(fit.max_condition, cond);

        Eigen::MatrixXd G = A.transpose() * A;
        G.diagonal().array() += lambda;
        Eigen::MatrixXd C = G.ldlt().solve(A.transpose() * Y);  // K x Out
        for (Index o = 0; o < Out; ++o)
            for (int k = 0; k < K; ++k)
                fit.coefficients[(o * D + d) * K + k] = static_cast<Scalar>(C(k, o));
    }
    fit.condition_warning = fit.max_condition > 1e8;
    return fit;
}

}  // namespace kan
