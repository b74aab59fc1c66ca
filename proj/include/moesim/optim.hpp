#pragma once

// AdamW with decoupled weight decay, global-norm gradient clipping, the
// warmup-stable-decay and inverse-square-root learning-rate schedules, and
// the staircase batch-size warmup. Schedules are pure functions of the step.

#include <cmath>
#include <cstdint>
#include <vector>

#include "moesim/tensor.hpp"

namespace moesim {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.1;
};

struct AdamWState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    std::int64_t step = 0;

    static AdamWState init_like(const std::vector<Tensor*>& params) {
        AdamWState s;
        s.m.reserve(params.size());
        s.v.reserve(params.size());
        for (const Tensor* p : params) {
            s.m.emplace_back(p->shape);
            s.v.emplace_back(p->shape);
        }
        return s;
    }
};

/// One AdamW update. Weight decay is decoupled (applied to the parameters,
/// never folded into the gradient); moments are bias-corrected. Non-finite
/// gradients raise numeric_error before anything is mutated, so a caller can
/// treat the step as skipped.
inline void adamw_step(std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
                       AdamWState& state, const AdamWConfig& cfg, double lr) {
    if (lr < 0.0) throw invalid_input("adamw_step: negative learning rate");
    if (params.size() != grads.size() || params.size() != state.m.size())
        throw invalid_input("adamw_step: parameter/gradient/state count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        check_same_shape(*params[i], *grads[i], "adamw_step");
        if (!grads[i]->all_finite())
            throw numeric_error("adamw_step: non-finite gradient");
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        const Tensor& g = *grads[i];
        Tensor& m = state.m[i];
        Tensor& v = state.v[i];
        for (std::size_t j = 0; j < p.data.size(); ++j) {
            m.data[j] = cfg.beta1 * m.data[j] + (1.0 - cfg.beta1) * g.data[j];
            v.data[j] = cfg.beta2 * v.data[j] + (1.0 - cfg.beta2) * g.data[j] * g.data[j];
            const double m_hat = m.data[j] / bc1;
            const double v_hat = v.data[j] / bc2;
            p.data[j] -= lr * (m_hat / (std::sqrt(v_hat) + cfg.eps) + cfg.weight_decay * p.data[j]);
        }
    }
}

/// Scale the gradient group so its global L2 norm is at most max_norm.
/// Returns the pre-clip norm.
inline double clip_global_norm(std::vector<Tensor*>& grads, double max_norm = 1.0) {
    double sq = 0.0;
    for (const Tensor* g : grads)
        for (double v : g->data) sq += v * v;
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw numeric_error("clip_global_norm: non-finite gradient norm");
    if (norm > max_norm) {
        const double s = max_norm / norm;
        for (Tensor* g : grads)
            for (double& v : g->data) v *= s;
    }
    return norm;
}

// ---- learning-rate schedules ----

struct WsdSchedule {
    double max_lr = 2.4e-4;
    std::int64_t warmup_steps = 2000;
    double halve_fraction = 0.6;  // fraction of total steps after which lr halves
};

/// Warmup-stable-decay: linear 0 -> max_lr over warmup_steps, flat, halved
/// once past halve_fraction of total_steps.
inline double wsd_lr(std::int64_t step, std::int64_t total_steps, const WsdSchedule& s) {
    if (step < 0) throw invalid_input("wsd_lr: negative step");
    if (s.warmup_steps > 0 && step < s.warmup_steps)
        return s.max_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
    const auto halve_at = static_cast<std::int64_t>(
        std::llround(s.halve_fraction * static_cast<double>(total_steps)));
    return step >= halve_at ? 0.5 * s.max_lr : s.max_lr;
}

struct InvSqrtSchedule {
    double start_lr = 1.2e-4;
    double end_lr = 1.2e-8;
};

/// Inverse-square-root annealing: lr(s) = start / sqrt(1 + c*s) with c pinned
/// so lr(anneal_steps) = end. Continuous and strictly decreasing.
inline double inv_sqrt_lr(std::int64_t step, std::int64_t anneal_steps,
                          const InvSqrtSchedule& s = {}) {
    if (anneal_steps < 1) throw invalid_input("inv_sqrt_lr: anneal_steps must be >= 1");
    if (step < 0) throw invalid_input("inv_sqrt_lr: negative step");
    const double ratio = s.start_lr / s.end_lr;
    const double c = (ratio * ratio - 1.0) / static_cast<double>(anneal_steps);
    return s.start_lr / std::sqrt(1.0 + c * static_cast<double>(step));
}

// ---- batch-size warmup ----

struct BatchSizeSchedule {
    std::int64_t initial = 2560;
    std::int64_t maximum = 8960;
    // (step boundary, batch size) pairs, strictly increasing in both fields.
    std::vector<std::pair<std::int64_t, std::int64_t>> ramp;

    void validate() const {
        if (initial < 1 || maximum < initial)
            throw invalid_input("BatchSizeSchedule: initial/maximum out of order");
        std::int64_t prev_step = -1, prev_size = initial;
        for (const auto& [at, size] : ramp) {
            if (at <= prev_step || size < prev_size)
                throw invalid_input("BatchSizeSchedule: ramp must be non-decreasing");
            prev_step = at;
            prev_size = size;
        }
    }

    /// Geometric doubling at the given step boundaries, clamped at maximum.
    static BatchSizeSchedule doubling(std::int64_t initial, std::int64_t maximum,
                                      const std::vector<std::int64_t>& boundaries) {
        BatchSizeSchedule s;
        s.initial = initial;
        s.maximum = maximum;
        std::int64_t size = initial;
        for (std::int64_t b : boundaries) {
            size = std::min(size * 2, maximum);
            s.ramp.emplace_back(b, size);
        }
        s.validate();
        return s;
    }

    static BatchSizeSchedule pretrain_default() { return doubling(2560, 8960, {2000, 4000}); }
};

inline std::int64_t batch_size_at(std::int64_t step, const BatchSizeSchedule& s) {
    if (step < 0) throw invalid_input("batch_size_at: negative step");
    std::int64_t size = s.initial;
    for (const auto& [at, sz] : s.ramp)
        if (step >= at) size = sz;
    return std::min(size, s.maximum);
}

}  // namespace moesim
