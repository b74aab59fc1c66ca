#pragma once

// Central finite differences: the independent oracle every analytic gradient
// in this repository is validated against. Lives apart from the forward /
// backward code on purpose; it only ever calls the scalar function it is
// given.

#include <cmath>
#include <functional>

#include "moesim/tensor.hpp"

namespace moesim {

/// Thrown when the oracle itself cannot produce an answer (non-finite f).
struct oracle_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Central-difference gradient of a scalar function. Step per coordinate is
/// h_scale * max(1, |x_i|).
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                               double h_scale = 1e-5) {
    Tensor g(x.shape);
    Tensor probe = x;
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        const double xi = x.data[i];
        const double h = h_scale * std::max(1.0, std::abs(xi));
        probe.data[i] = xi + h;
        const double fp = f(probe);
        probe.data[i] = xi - h;
        const double fm = f(probe);
        probe.data[i] = xi;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw oracle_error("finite_diff_grad: non-finite function evaluation");
        g.data[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

/// Norm-based relative error between an analytic gradient and the oracle:
/// ||a - g||_2 / max(||a||_2, ||g||_2, atol/rtol). Pairs of near-zero
/// gradients compare equal instead of dividing by zero.
inline double gradient_rel_error(const Tensor& analytic, const Tensor& numeric,
                                 double rtol = 1e-5, double atol = 1e-9) {
    check_same_shape(analytic, numeric, "gradient_rel_error");
    double diff = 0.0;
    for (std::size_t i = 0; i < analytic.data.size(); ++i) {
        const double d = analytic.data[i] - numeric.data[i];
        diff += d * d;
    }
    diff = std::sqrt(diff);
    const double denom = std::max({l2_norm(analytic), l2_norm(numeric), atol / rtol});
    return diff / denom;
}

}  // namespace moesim
