#pragma once

// Synthetic tasks. Teacher-student regression: a frozen, randomly
// initialized layer of the configured shape produces the targets, so the
// student family can realize loss zero (plus any configured label noise).
// Classification: labels are the teacher's NormHead argmax.

#include <cstdint>
#include <vector>

#include "moesim/config.hpp"
#include "moesim/moe.hpp"

namespace moesim {

struct Dataset {
    Tensor inputs;                    // [n, d_model]
    Tensor targets;                   // [n, d_model] (regression)
    std::vector<std::int64_t> labels; // [n] (classification)
    bool classification = false;
};

/// Deterministic dataset from (config, seed). The teacher draws from its own
/// stream, so toggling anything else never changes the data.
inline Dataset generate_task(const ExperimentConfig& cfg) {
    cfg.validate();
    RngStream teacher_rng = RngStream::make(cfg.seed, StreamKind::Teacher);
    MoEParams teacher = MoEParams::init(cfg.model, teacher_rng);
    teacher.router.warmup_horizon = 0;  // teacher routes by its learned router only

    RngStream data = RngStream::make(cfg.seed, StreamKind::Data);
    Dataset ds;
    ds.inputs = data.normal_tensor({cfg.task.n_samples, cfg.model.d_model});
    ds.classification = cfg.task.kind == "classification";

    // Teacher forward in chunks; no noise stream is consumed (alpha = 1).
    RngStream unused = RngStream::make(cfg.seed, StreamKind::Teacher, 999);
    const std::int64_t chunk = 256;
    ds.targets = Tensor({cfg.task.n_samples, cfg.model.d_model});
    if (ds.classification) ds.labels.resize(static_cast<std::size_t>(cfg.task.n_samples));
    for (std::int64_t start = 0; start < cfg.task.n_samples; start += chunk) {
        const std::int64_t rows = std::min(chunk, cfg.task.n_samples - start);
        Tensor h({rows, cfg.model.d_model});
        std::copy_n(ds.inputs.data.begin() + start * cfg.model.d_model,
                    rows * cfg.model.d_model, h.data.begin());
        MoeForwardResult fwd = moe_forward(h, teacher, unused);
        if (ds.classification) {
            Tensor logits = normhead_forward(fwd.output, teacher.w_lm);
            for (std::int64_t t = 0; t < rows; ++t) {
                std::int64_t best = 0;
                for (std::int64_t v = 1; v < cfg.model.vocab; ++v)
                    if (logits(t, v) > logits(t, best)) best = v;
                ds.labels[static_cast<std::size_t>(start + t)] = best;
            }
        }
        std::copy_n(fwd.output.data.begin(), rows * cfg.model.d_model,
                    ds.targets.data.begin() + start * cfg.model.d_model);
    }
    if (!ds.classification && cfg.task.noise_std > 0.0) {
        for (double& v : ds.targets.data) v += cfg.task.noise_std * data.next_normal();
    }
    return ds;
}

/// Contiguous shard of sample indices for one worker.
struct Shard {
    std::int64_t begin = 0;
    std::int64_t size = 0;
};

inline Shard worker_shard(std::int64_t n_samples, std::int64_t workers, std::int64_t worker) {
    const std::int64_t base = n_samples / workers;
    return Shard{worker * base, base};
}

/// Batch slice [start, start+size) of a shard, cyclic over the shard.
inline void fill_batch(const Dataset& ds, const Shard& shard, std::int64_t cursor,
                       std::int64_t batch_size, Tensor& h, Tensor& targets,
                       std::vector<std::int64_t>* labels) {
    const std::int64_t d = ds.inputs.cols();
    h = Tensor({batch_size, d});
    targets = Tensor({batch_size, d});
    if (labels) labels->resize(static_cast<std::size_t>(batch_size));
    for (std::int64_t i = 0; i < batch_size; ++i) {
        const std::int64_t row = shard.begin + (cursor + i) % shard.size;
        std::copy_n(ds.inputs.data.begin() + row * d, d, h.data.begin() + i * d);
        std::copy_n(ds.targets.data.begin() + row * d, d, targets.data.begin() + i * d);
        if (labels) (*labels)[static_cast<std::size_t>(i)] = ds.labels[static_cast<std::size_t>(row)];
    }
}

}  // namespace moesim
