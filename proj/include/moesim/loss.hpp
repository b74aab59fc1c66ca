#pragma once

// Task losses used by the training harness: mean squared error for the
// teacher-student regression task and softmax cross-entropy over the
// NormHead logits for classification.

#include <cmath>
#include <cstdint>
#include <vector>

#include "moesim/tensor.hpp"

namespace moesim {

struct LossValueGrad {
    double value = 0.0;
    Tensor grad;  // w.r.t. the first argument
};

/// Mean over all elements of (pred - target)^2.
inline LossValueGrad mse_loss(const Tensor& pred, const Tensor& target) {
    check_same_shape(pred, target, "mse_loss");
    LossValueGrad out;
    out.grad = Tensor(pred.shape);
    const double inv = 1.0 / static_cast<double>(pred.numel());
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const double d = pred.data[i] - target.data[i];
        out.value += d * d * inv;
        out.grad.data[i] = 2.0 * d * inv;
    }
    return out;
}

/// Mean negative log-likelihood of the labels under softmax(logits).
inline LossValueGrad softmax_cross_entropy(const Tensor& logits,
                                           const std::vector<std::int64_t>& labels) {
    if (logits.ndim() != 2 || logits.rows() != static_cast<std::int64_t>(labels.size()))
        throw invalid_input("softmax_cross_entropy: logits/labels mismatch");
    const std::int64_t tokens = logits.rows();
    const std::int64_t vocab = logits.cols();
    LossValueGrad out;
    out.grad = softmax(logits);
    double nll = 0.0;
    const double inv = 1.0 / static_cast<double>(tokens);
    for (std::int64_t t = 0; t < tokens; ++t) {
        const std::int64_t y = labels[static_cast<std::size_t>(t)];
        if (y < 0 || y >= vocab) throw invalid_input("softmax_cross_entropy: label out of range");
        nll -= std::log(std::max(out.grad(t, y), 1e-300));
        for (std::int64_t v = 0; v < vocab; ++v)
            out.grad(t, v) = (out.grad(t, v) - (v == y ? 1.0 : 0.0)) * inv;
    }
    out.value = nll * inv;
    return out;
}

}  // namespace moesim
