#pragma once

// Elastic synchronization: worker replicas take local optimizer steps
// between merges; each merge runs the three-stage pseudo-gradient penalty
// (EMA-based anomaly elimination, inverse-norm weighted averaging, global
// clipping) and broadcasts the new anchor to every worker. Synchronization
// triggers either every H local steps or on a simulated-time threshold, and
// parameters travel layer by layer with communication prefetched under the
// next layer's compute.
//
// Sign convention: delta = theta_anchor - theta_local, so the outer update
// is a descent-style subtraction theta_anchor -= outer_lr * delta_merged.

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "moesim/moe.hpp"
#include "moesim/optim.hpp"
#include "moesim/stats.hpp"
#include "moesim/tensor.hpp"

namespace moesim {

struct PenaltyConfig {
    bool enabled = true;
    double ema_decay = 0.9;
    double anomaly_multiplier = 3.0;  // exclude iff norm > mean + m * dev
    double clip_threshold = 1.0;
    double epsilon = 1e-8;  // weighting regularizer

    void validate() const {
        if (!(ema_decay > 0.0 && ema_decay < 1.0) || anomaly_multiplier <= 0.0 ||
            clip_threshold <= 0.0 || epsilon <= 0.0)
            throw invalid_input("PenaltyConfig: fields must be positive, decay in (0, 1)");
    }
};

struct SyncPolicy {
    enum class Kind { EveryHSteps, TimeThreshold };
    Kind kind = Kind::EveryHSteps;
    std::int64_t h = 1;
    double tau = 0.0;

    static SyncPolicy every_h(std::int64_t h) { return {Kind::EveryHSteps, h, 0.0}; }
    static SyncPolicy time_threshold(double tau) { return {Kind::TimeThreshold, 0, tau}; }
};

inline bool should_sync(const SyncPolicy& policy, std::int64_t local_steps, double elapsed) {
    if (policy.kind == SyncPolicy::Kind::EveryHSteps) return local_steps >= policy.h;
    return elapsed >= policy.tau;
}

struct PseudoGradient {
    std::int64_t worker_id = 0;
    std::vector<Tensor> delta;  // per layer, anchor - local
    double norm = 0.0;
};

inline PseudoGradient compute_pseudo_gradient(const std::vector<Tensor*>& anchor,
                                              const std::vector<Tensor*>& local,
                                              std::int64_t worker_id = 0) {
    if (anchor.size() != local.size())
        throw invalid_input("compute_pseudo_gradient: layer count mismatch");
    PseudoGradient pg;
    pg.worker_id = worker_id;
    pg.delta.reserve(anchor.size());
    double sq = 0.0;
    for (std::size_t i = 0; i < anchor.size(); ++i) {
        check_same_shape(*anchor[i], *local[i], "compute_pseudo_gradient");
        Tensor d = sub(*anchor[i], *local[i]);
        for (double v : d.data) sq += v * v;
        pg.delta.push_back(std::move(d));
    }
    pg.norm = std::sqrt(sq);
    return pg;
}

/// Per-worker EMA statistics over pseudo-gradient norms. The first observed
/// norm seeds the state and cannot trigger an exclusion.
struct EmaNormState {
    EmaState ema;
    bool initialized = false;
};

/// Returns an exclusion flag per worker. Worker j is excluded iff
/// norm_j > mean_j + m * dev_j against its own EMA statistics; statistics
/// advance only for included workers. If the rule would exclude everyone,
/// the single lowest-norm worker (lowest id on ties) is kept.
inline std::vector<bool> detect_anomalies(const std::vector<double>& norms,
                                          std::vector<EmaNormState>& states,
                                          const PenaltyConfig& cfg) {
    if (norms.empty()) throw invalid_input("detect_anomalies: no workers");
    if (states.size() != norms.size())
        throw invalid_input("detect_anomalies: state count mismatch");
    cfg.validate();
    std::vector<bool> excluded(norms.size(), false);
    for (std::size_t j = 0; j < norms.size(); ++j) {
        EmaNormState& st = states[j];
        if (st.initialized &&
            norms[j] > st.ema.mean + cfg.anomaly_multiplier * st.ema.deviation) {
            excluded[j] = true;
            continue;
        }
        if (!st.initialized) {
            st.ema = EmaState{norms[j], 0.0};
            st.initialized = true;
        } else {
            st.ema = ema_update(st.ema, norms[j], cfg.ema_decay);
        }
    }
    if (std::all_of(excluded.begin(), excluded.end(), [](bool b) { return b; })) {
        std::size_t keep = 0;
        for (std::size_t j = 1; j < norms.size(); ++j)
            if (norms[j] < norms[keep]) keep = j;
        excluded[keep] = false;
    }
    return excluded;
}

struct WeightedMerge {
    std::vector<Tensor> delta;
    std::vector<double> weights;  // aligned with the included inputs, sums to 1
};

/// Inverse-norm weighted average of the included pseudo-gradients:
/// w_j proportional to 1 / (norm_j + eps), normalized to sum 1.
inline WeightedMerge weighted_average(const std::vector<const PseudoGradient*>& included,
                                      double eps) {
    if (included.empty()) throw invalid_input("weighted_average: no included workers");
    WeightedMerge out;
    double total = 0.0;
    for (const PseudoGradient* pg : included) {
        out.weights.push_back(1.0 / (pg->norm + eps));
        total += out.weights.back();
    }
    for (double& w : out.weights) w /= total;
    out.delta.reserve(included[0]->delta.size());
    for (std::size_t layer = 0; layer < included[0]->delta.size(); ++layer) {
        Tensor merged(included[0]->delta[layer].shape);
        for (std::size_t j = 0; j < included.size(); ++j)
            axpy(out.weights[j], included[j]->delta[layer], merged);
        out.delta.push_back(std::move(merged));
    }
    return out;
}

/// Global-norm clip of a merged pseudo-gradient; returns the pre-clip norm.
inline double clip_pseudo_gradient(std::vector<Tensor>& delta, double threshold) {
    if (threshold <= 0.0) throw invalid_input("clip_pseudo_gradient: threshold must be positive");
    std::vector<Tensor*> view;
    for (Tensor& t : delta) view.push_back(&t);
    return clip_global_norm(view, threshold);
}

/// theta_anchor -= outer_lr * delta.
inline void outer_update(std::vector<Tensor*>& anchor, const std::vector<Tensor>& delta,
                         double outer_lr) {
    if (outer_lr <= 0.0) throw invalid_input("outer_update: outer_lr must be positive");
    if (anchor.size() != delta.size()) throw invalid_input("outer_update: layer count mismatch");
    for (std::size_t i = 0; i < anchor.size(); ++i) axpy(-outer_lr, delta[i], *anchor[i]);
}

struct MergeReport {
    std::vector<std::int64_t> included;
    std::vector<std::int64_t> excluded;
    std::vector<double> norms;    // per worker, in worker order
    std::vector<double> weights;  // aligned with included
    double merged_norm_pre = 0.0;
    double merged_norm_post = 0.0;
};

/// One full synchronization round over the workers' parameter tensors:
/// pseudo-gradients, anomaly elimination, weighted averaging, clipping,
/// outer update, broadcast. Workers are processed in ascending index order,
/// so the result is independent of how local rounds were scheduled.
///
/// When outer_lr == 1 and no clipping triggers, the new anchor is computed
/// directly as the weighted average of the worker parameters. That form is
/// algebraically identical to the subtractive update but exact in floating
/// point, which makes a single-worker H=1 run reproduce plain training
/// bit for bit.
inline MergeReport merge_round(std::vector<Tensor*>& anchor,
                               std::vector<std::vector<Tensor*>>& workers,
                               std::vector<EmaNormState>& ema_states,
                               const PenaltyConfig& penalty, double outer_lr = 1.0) {
    if (workers.empty()) throw invalid_input("merge_round: no workers");
    MergeReport report;
    std::vector<PseudoGradient> pgs;
    pgs.reserve(workers.size());
    for (std::size_t j = 0; j < workers.size(); ++j) {
        pgs.push_back(compute_pseudo_gradient(anchor, workers[j], static_cast<std::int64_t>(j)));
        report.norms.push_back(pgs.back().norm);
    }

    std::vector<bool> excluded(workers.size(), false);
    if (penalty.enabled) excluded = detect_anomalies(report.norms, ema_states, penalty);
    std::vector<const PseudoGradient*> included;
    for (std::size_t j = 0; j < workers.size(); ++j) {
        if (excluded[j])
            report.excluded.push_back(static_cast<std::int64_t>(j));
        else {
            report.included.push_back(static_cast<std::int64_t>(j));
            included.push_back(&pgs[j]);
        }
    }

    WeightedMerge merged;
    if (penalty.enabled) {
        merged = weighted_average(included, penalty.epsilon);
    } else {
        // uniform average, no exclusion, no clip
        std::vector<const PseudoGradient*> all;
        for (const PseudoGradient& pg : pgs) all.push_back(&pg);
        merged.weights.assign(all.size(), 1.0 / static_cast<double>(all.size()));
        merged.delta.reserve(anchor.size());
        for (std::size_t layer = 0; layer < anchor.size(); ++layer) {
            Tensor m(anchor[layer]->shape);
            for (std::size_t j = 0; j < all.size(); ++j)
                axpy(merged.weights[j], all[j]->delta[layer], m);
            merged.delta.push_back(std::move(m));
        }
    }
    report.weights = merged.weights;

    std::vector<const Tensor*> merged_view;
    for (const Tensor& t : merged.delta) merged_view.push_back(&t);
    report.merged_norm_pre = l2_norm(merged_view);
    double clip_scale = 1.0;
    if (penalty.enabled && report.merged_norm_pre > penalty.clip_threshold) {
        clip_scale = penalty.clip_threshold / report.merged_norm_pre;
        clip_pseudo_gradient(merged.delta, penalty.clip_threshold);
    }
    report.merged_norm_post = std::min(report.merged_norm_pre,
                                       penalty.enabled ? penalty.clip_threshold
                                                       : report.merged_norm_pre);

    if (outer_lr == 1.0 && clip_scale == 1.0) {
        // Exact consensus: anchor = sum_j w_j * theta_j over included workers.
        for (std::size_t layer = 0; layer < anchor.size(); ++layer) {
            Tensor next(anchor[layer]->shape);
            if (penalty.enabled) {
                for (std::size_t j = 0; j < report.included.size(); ++j)
                    axpy(merged.weights[j],
                         *workers[static_cast<std::size_t>(report.included[j])][layer], next);
            } else {
                for (std::size_t j = 0; j < workers.size(); ++j)
                    axpy(merged.weights[j], *workers[j][layer], next);
            }
            *anchor[layer] = std::move(next);
        }
    } else {
        outer_update(anchor, merged.delta, outer_lr);  // delta already clipped
    }

    // Broadcast: every worker (excluded ones too) restarts from the anchor.
    for (auto& w : workers)
        for (std::size_t layer = 0; layer < anchor.size(); ++layer) *w[layer] = *anchor[layer];
    return report;
}

// ---- layer-wise synchronization plan ----

struct SyncSlot {
    std::int64_t layer = 0;
    double comm_start = 0.0, comm_end = 0.0;
    double compute_start = 0.0, compute_end = 0.0;
};

struct SyncPlan {
    std::vector<SyncSlot> slots;
    double duration = 0.0;
    double total_compute = 0.0;

    /// Extra time the synchronization costs beyond the compute it overlaps.
    double overhead() const { return duration - total_compute; }
};

/// Pair layer l's compute with layer l+1's parameter communication:
/// duration = comm_1 + sum_l max(compute_l, comm_{l+1}) + compute_L.
/// Every layer is synchronized exactly once.
inline SyncPlan layerwise_sync_plan(const std::vector<double>& compute,
                                    const std::vector<double>& comm) {
    if (compute.empty() || compute.size() != comm.size())
        throw invalid_input("layerwise_sync_plan: need matching non-empty layer costs");
    const std::size_t layers = compute.size();
    SyncPlan plan;
    plan.slots.resize(layers);
    plan.slots[0].comm_start = 0.0;
    plan.slots[0].comm_end = comm[0];
    double t = comm[0];
    for (std::size_t l = 0; l < layers; ++l) {
        SyncSlot& slot = plan.slots[l];
        slot.layer = static_cast<std::int64_t>(l);
        slot.compute_start = t;
        slot.compute_end = t + compute[l];
        if (l + 1 < layers) {
            plan.slots[l + 1].comm_start = t;
            plan.slots[l + 1].comm_end = t + comm[l + 1];
            t += std::max(compute[l], comm[l + 1]);
        } else {
            t += compute[l];
        }
        plan.total_compute += compute[l];
    }
    plan.duration = t;
    return plan;
}

// ---- worker replica and local rounds ----

struct WorkerReplica {
    std::int64_t worker_id = 0;
    MoEParams params;
    AdamWState opt;
    std::int64_t local_step_count = 0;
    std::vector<double> loss_trace;
};

/// Run `steps` local iterations, each delegated to the caller's step
/// function (forward/backward/optimize on the worker's own shard). The
/// anchor is untouched.
inline void local_round(WorkerReplica& worker,
                        const std::function<double(WorkerReplica&, std::int64_t)>& step_fn,
                        std::int64_t steps) {
    if (steps < 1) throw invalid_input("local_round: steps must be >= 1");
    for (std::int64_t s = 0; s < steps; ++s) {
        const double loss = step_fn(worker, s);
        worker.loss_trace.push_back(loss);
        worker.local_step_count += 1;
    }
}

}  // namespace moesim
