#pragma once

#include <cmath>

#include "kan/spline.hpp"
#include "kan/tensor.hpp"

namespace kan {

inline constexpr double kMorletOmega0 = 5.0;
inline constexpr double kWaveletScaleFloor = 1e-3;

// ---------------------------------------------------------------------------
// KANLinear: base SiLU path plus scaled B-spline path.
// ---------------------------------------------------------------------------

template <typename Scalar>
struct KanLinearParams {
    SplineGrid grid;
    Index in_dim = 0;
    Index out_dim = 0;
    Tensor<Scalar> base_weight;    // [out x in]
    Tensor<Scalar> spline_weight;  // [out x in x basis_count]
    Tensor<Scalar> spline_scaler;  // [out x in]
};

template <typename Scalar>
Tensor<Scalar> kan_linear_forward(const KanLinearParams<Scalar>& p, const Tensor<Scalar>& x) {
    require<ShapeError>(x.rank() == 2 && x.dim(1) == p.in_dim, "kan_linear_forward: input ",
                        shape_str(x.shape()), " does not match in_dim ", p.in_dim);
    const Index B = x.dim(0);
    const Index K = p.grid.basis_count();
    Tensor<Scalar> base = linear(silu(x), p.base_weight);
    Tensor<Scalar> basis = reshape(bspline_basis(p.grid, x), Shape{B, p.in_dim * K});
    Tensor<Scalar> scaled = scale_last_dim(p.spline_weight, p.spline_scaler);
    Tensor<Scalar> spline = linear(basis, reshape(scaled, Shape{p.out_dim, p.in_dim * K}));
    return add(base, spline);
}

// ---------------------------------------------------------------------------
// Gaussian RBF features.
// ---------------------------------------------------------------------------

// R[b, d, j] = exp(-(x[b,d] - centers[j])^2 / beta^2). Differentiable w.r.t.
// x and centers (centers stay frozen in the models, but the derivative is the
// textbook Gaussian pulled back through the distance).
template <typename Scalar>
Tensor<Scalar> rbf_transform(const Tensor<Scalar>& centers, Scalar beta, const Tensor<Scalar>& x) {
    require<Error>(beta > Scalar(0), "rbf_transform: beta must be positive, got ", beta);
    require<ShapeError>(centers.rank() == 1, "rbf_transform: centers must be rank 1, got ",
                        shape_str(centers.shape()));
    require<ShapeError>(x.rank() == 2, "rbf_transform: expects BxD input, got ",
                        shape_str(x.shape()));
    const Index B = x.dim(0), D = x.dim(1), M = centers.dim(0);
    Tensor<Scalar> out(Shape{B, D, M});
    const Scalar inv_b2 = Scalar(1) / (beta * beta);
    for (Index i = 0; i < B * D; ++i) {
        const Scalar xi = x[i];
        for (Index j = 0; j < M; ++j) {
            const Scalar dlt = xi - centers[j];
            out[i * M + j] = std::exp(-dlt * dlt * inv_b2);
        }
    }
    auto xn = x.node(), cn = centers.node(), on = out.node();
    detail::maybe_record(x.requires_grad() || centers.requires_grad(), out,
                         [xn, cn, on, B, D, M, inv_b2]() {
        if (on->grad.empty()) return;
        for (Index i = 0; i < B * D; ++i) {
            const Scalar xi = xn->data[static_cast<std::size_t>(i)];
            Scalar acc_x = 0;
            for (Index j = 0; j < M; ++j) {
                const std::size_t idx = static_cast<std::size_t>(i * M + j);
                const Scalar dlt = xi - cn->data[static_cast<std::size_t>(j)];
                const Scalar d_center = Scalar(2) * dlt * inv_b2 * on->data[idx];
                if (xn->requires_grad) acc_x += on->grad[idx] * (-d_center);
                if (cn->requires_grad)
                    detail::grad_of(cn)[static_cast<std::size_t>(j)] += on->grad[idx] * d_center;
            }
            if (xn->requires_grad) detail::grad_of(xn)[static_cast<std::size_t>(i)] += acc_x;
        }
    });
    return out;
}

// Fixed uniformly spaced centers on [g_min, g_max] with the Gaussian width
// beta = (g_max - g_min) / (m - 1).
template <typename Scalar>
Tensor<Scalar> make_rbf_centers(const SplineGrid& grid, Index m, Scalar* beta_out) {
    require<ContractError>(m >= 2, "make_rbf_centers: need at least 2 centers, got ", m);
    Tensor<Scalar> centers(Shape{m});
    const double step = (grid.g_max - grid.g_min) / static_cast<double>(m - 1);
    for (Index j = 0; j < m; ++j) centers[j] = static_cast<Scalar>(grid.g_min + step * j);
    if (beta_out) *beta_out = static_cast<Scalar>(step);
    return centers;
}

// ---------------------------------------------------------------------------
// SBRBF layer: LayerNorm -> SiLU base path + W_s [B-spline || RBF].
// ---------------------------------------------------------------------------

template <typename Scalar>
struct SbrbfLayerParams {
    SplineGrid grid;
    Index in_dim = 0;
    Index out_dim = 0;
    Tensor<Scalar> ln_weight;        // [in]
    Tensor<Scalar> ln_bias;          // [in]
    Tensor<Scalar> base_weight;      // [out x in]
    Tensor<Scalar> combined_weight;  // [out x in*(basis_count + rbf_centers)]
    Tensor<Scalar> centers;          // [m], fixed
    Scalar beta = 0;
};

// Returns the pre-activation h = base + spline/rbf mix; the model applies the
// ReLU on non-final layers.
template <typename Scalar>
Tensor<Scalar> sbrbf_layer_forward(const SbrbfLayerParams<Scalar>& p, const Tensor<Scalar>& v) {
    require<ShapeError>(v.rank() == 2 && v.dim(1) == p.in_dim, "sbrbf_layer_forward: input ",
                        shape_str(v.shape()), " does not match in_dim ", p.in_dim);
    const Index B = v.dim(0);
    const Index K = p.grid.basis_count();
    const Index M = p.centers.dim(0);
    Tensor<Scalar> vn = layer_norm(v, p.ln_weight, p.ln_bias);
    Tensor<Scalar> base = linear(silu(vn), p.base_weight);
    Tensor<Scalar> basis = reshape(bspline_basis(p.grid, vn), Shape{B, p.in_dim * K});
    Tensor<Scalar> rbf = reshape(rbf_transform(p.centers, p.beta, vn), Shape{B, p.in_dim * M});
    Tensor<Scalar> mix = linear(concat_cols(basis, rbf), p.combined_weight);
    return add(base, mix);
}

// ---------------------------------------------------------------------------
// Truncated sine-series input transform.
// ---------------------------------------------------------------------------

struct TaylorConfig {
    int n_terms = 5;
};

// x_T = sum_{n=0}^{N-1} (-1)^n x^{2n+1} / (2n+1)!, evaluated as x * P(x^2) so
// that the map is odd bit-for-bit. The derivative is the matching truncated
// cosine series. Unbounded inputs diverge; callers bound the magnitude.
template <typename Scalar>
Tensor<Scalar> taylor_expand(const TaylorConfig& cfg, const Tensor<Scalar>& x) {
    require<ContractError>(cfg.n_terms >= 1, "taylor_expand: need at least one term, got ",
                           cfg.n_terms);
    const int N = cfg.n_terms;
    std::vector<double> cv(static_cast<std::size_t>(N)), cd(static_cast<std::size_t>(N));
    double fac_odd = 1.0, fac_even = 1.0, sign = 1.0;
    for (int n = 0; n < N; ++n) {
        if (n > 0) {
            fac_even *= (2 * n - 1) * (2 * n);      // (2n)!
            fac_odd *= (2 * n) * (2 * n + 1);       // (2n+1)!
            sign = -sign;
        }
        cv[static_cast<std::size_t>(n)] = sign / fac_odd;
        cd[static_cast<std::size_t>(n)] = sign / fac_even;
    }
    auto horner = [N](const std::vector<double>& c, Scalar u) {
        Scalar acc = static_cast<Scalar>(c[static_cast<std::size_t>(N - 1)]);
        for (int n = N - 2; n >= 0; --n) acc = static_cast<Scalar>(c[static_cast<std::size_t>(n)]) + u * acc;
        return acc;
    };
    return detail::unary_op(
        x, [cv, horner](Scalar v) { return v * horner(cv, v * v); },
        [cd, horner](Scalar v) { return horner(cd, v * v); });
}

template <typename Scalar>
Tensor<Scalar> taylor_expand(int n_terms, const Tensor<Scalar>& x) {
    return taylor_expand(TaylorConfig{n_terms}, x);
}

// ---------------------------------------------------------------------------
// Morlet wavelet and the wavelet/B-spline fusion layer.
// ---------------------------------------------------------------------------

// psi(x) = exp(-x^2/2) cos(omega0 x) with omega0 = 5.
template <typename Scalar>
Tensor<Scalar> morlet(const Tensor<Scalar>& x) {
    const Scalar w0 = static_cast<Scalar>(kMorletOmega0);
    return detail::unary_op(
        x,
        [w0](Scalar v) { return std::exp(-v * v / Scalar(2)) * std::cos(w0 * v); },
        [w0](Scalar v) {
            const Scalar env = std::exp(-v * v / Scalar(2));
            return env * (-v * std::cos(w0 * v) - w0 * std::sin(w0 * v));
        });
}

template <typename Scalar>
struct WaveletParams {
    SplineGrid grid;
    Index in_dim = 0;
    Index out_dim = 0;
    Tensor<Scalar> scale_raw;       // [in]; s = softplus(scale_raw) + 1e-3 keeps s > 0
    Tensor<Scalar> translation;     // [in]
    Tensor<Scalar> wavelet_weight;  // [out x in]
    Tensor<Scalar> spline_weight;   // [out x in x basis_count]
    Tensor<Scalar> combine_logits;  // [2]
};

template <typename Scalar>
Tensor<Scalar> wavelet_scales(const WaveletParams<Scalar>& p) {
    return softplus_shift(p.scale_raw, static_cast<Scalar>(kWaveletScaleFloor));
}

// W[b, o] = sum_i wavelet_weight[o, i] * psi((v[b,i] - t_i)/s_i).
template <typename Scalar>
Tensor<Scalar> wavelet_transform(const WaveletParams<Scalar>& p, const Tensor<Scalar>& v) {
    require<ShapeError>(v.rank() == 2 && v.dim(1) == p.in_dim, "wavelet_transform: input ",
                        shape_str(v.shape()), " does not match in_dim ", p.in_dim);
    Tensor<Scalar> scaled = div_rowvec(sub_rowvec(v, p.translation), wavelet_scales(p));
    return linear(morlet(scaled), p.wavelet_weight);
}

// Softmax-blended combination of the wavelet and spline paths, before any
// normalization; the spline path consumes the raw input.
template <typename Scalar>
Tensor<Scalar> sbwavelet_combine(const WaveletParams<Scalar>& p, const Tensor<Scalar>& v) {
    const Index B = v.dim(0);
    const Index K = p.grid.basis_count();
    Tensor<Scalar> wave = wavelet_transform(p, v);
    Tensor<Scalar> basis = reshape(bspline_basis(p.grid, v), Shape{B, p.in_dim * K});
    Tensor<Scalar> spline = linear(basis, reshape(p.spline_weight, Shape{p.out_dim, p.in_dim * K}));
    Tensor<Scalar> c = softmax_rows(reshape(p.combine_logits, Shape{1, 2}));
    return add(scale_by(wave, take(c, 0)), scale_by(spline, take(c, 1)));
}

template <typename Scalar>
struct BatchNormState {
    Tensor<Scalar> weight;        // gamma
    Tensor<Scalar> bias;          // beta
    Tensor<Scalar> running_mean;  // non-trainable
    Tensor<Scalar> running_var;   // non-trainable
};

template <typename Scalar>
Tensor<Scalar> sbwavelet_layer_forward(const WaveletParams<Scalar>& p, BatchNormState<Scalar>& bn,
                                       const Tensor<Scalar>& v, bool training) {
    Tensor<Scalar> h = sbwavelet_combine(p, v);
    return batch_norm(h, bn.weight, bn.bias, bn.running_mean, bn.running_var, training);
}

}  // namespace kan
