#pragma once

// Training loops: single worker, synchronous data-parallel (gradients
// averaged every step), and elastic multi-worker with periodic merges. All
// three share one per-step path (forward, spike guard, clip, AdamW), so a
// single-worker elastic run with H = 1, outer_lr = 1 and the penalty off
// reproduces plain training bit for bit. Every run is a pure function of
// (config, seed); metrics, spike events and round reports come back as JSON
// records in a deterministic order.

#include <cmath>
#include <cstdint>
#include <exception>
#include <string>
#include <thread>
#include <vector>

#include "moesim/checkpoint.hpp"
#include "moesim/config.hpp"
#include "moesim/edit.hpp"
#include "moesim/gradcheck.hpp"
#include "moesim/loss.hpp"
#include "moesim/moe.hpp"
#include "moesim/optim.hpp"
#include "moesim/spike.hpp"
#include "moesim/task.hpp"

#include "json.hpp"

namespace moesim {

struct Batch {
    std::int64_t id = 0;
    std::int64_t cursor = 0;  // sample offset within the worker's shard
    std::int64_t size = 0;
    bool poisoned = false;
    bool is_retry = false;
    std::int64_t original_step = 0;
};

struct TrainResult {
    std::vector<nlohmann::json> metrics;
    std::vector<nlohmann::json> spike_events;
    std::vector<nlohmann::json> rounds;  // edit mode only
    MoEParams params;                    // final parameters (anchor for edit)
    AdamWState opt;                      // final optimizer state (worker 0)
    double initial_eval_loss = 0.0;
    double final_eval_loss = 0.0;
    std::vector<std::vector<double>> worker_losses;
    std::int64_t scheduled = 0;  // original batches
    std::int64_t applied = 0;    // updates that changed parameters
    std::int64_t skipped = 0;    // skip events (batch re-enqueued)
    std::int64_t dropped = 0;    // retries abandoned (reported unconsumed)
    std::uint64_t state_digest_value = 0;
};

/// Task loss on a fixed evaluation slice with learned routing (alpha forced
/// to 1); pure, parameters and router statistics untouched.
inline double eval_loss(const ExperimentConfig& cfg, const Dataset& ds, const MoEParams& params) {
    const std::int64_t n = std::min<std::int64_t>(cfg.task.eval_samples, cfg.task.n_samples);
    MoEParams probe = params;
    probe.router.global_step = std::max(probe.router.global_step, probe.router.warmup_horizon);
    Tensor h({n, cfg.model.d_model}), targets({n, cfg.model.d_model});
    std::vector<std::int64_t> labels;
    Shard full{0, cfg.task.n_samples};
    fill_batch(ds, full, 0, n, h, targets, ds.classification ? &labels : nullptr);
    MoeForwardResult fwd = moe_forward_with_noise(h, probe, Tensor{});
    if (ds.classification) {
        Tensor logits = normhead_forward(fwd.output, probe.w_lm);
        return softmax_cross_entropy(logits, labels).value;
    }
    return mse_loss(fwd.output, targets).value;
}

class Trainer {
   public:
    Trainer(const ExperimentConfig& cfg, const Dataset& ds) : cfg_(cfg), ds_(ds) {
        cfg_.validate();
    }

    TrainResult run() {
        if (cfg_.train.mode == "edit") return run_edit();
        if (cfg_.train.mode == "sync") return run_sync();
        return run_single();
    }

   private:
    struct WorkerCtx {
        WorkerReplica replica;
        SpikeDetector detector;
        RetryQueue retry;
        RngStream noise;
        RngStream reinject_rng;
        Shard shard;
        std::vector<Batch> schedule;
        std::size_t pos = 0;
        double sim_time = 0.0;
        std::vector<nlohmann::json> metrics, spikes;
        std::int64_t applied = 0, skipped = 0, dropped = 0;
    };

    ExperimentConfig cfg_;
    const Dataset& ds_;

    double lr_at(std::int64_t step, std::int64_t total_steps) const {
        const LrConfig& lc = cfg_.lr;
        if (lc.kind == "constant") return lc.value;
        if (lc.kind == "inv_sqrt")
            return inv_sqrt_lr(step, std::max<std::int64_t>(total_steps, 1),
                               InvSqrtSchedule{lc.start_lr, lc.end_lr});
        WsdSchedule s;
        s.max_lr = lc.max_lr;
        s.warmup_steps = lc.warmup_steps;
        s.halve_fraction = lc.halve_fraction;
        return wsd_lr(step, total_steps, s);
    }

    WorkerCtx make_worker(std::int64_t worker_id, std::int64_t n_workers,
                          std::int64_t schedule_len, const MoEParams& init) {
        WorkerCtx w;
        w.replica.worker_id = worker_id;
        w.replica.params = init;
        auto tensors = w.replica.params.tensors();
        w.replica.opt = AdamWState::init_like(tensors);
        w.detector.cfg = cfg_.spike.detector;
        w.noise = RngStream::make(cfg_.seed, StreamKind::RoutingNoise,
                                  static_cast<std::uint64_t>(worker_id));
        w.reinject_rng = RngStream::make(cfg_.seed, StreamKind::Reinject,
                                         static_cast<std::uint64_t>(worker_id));
        const std::int64_t slots =
            cfg_.train.shard_slots > 0 ? cfg_.train.shard_slots : n_workers;
        w.shard = worker_shard(cfg_.task.n_samples, slots, worker_id);
        std::int64_t cursor = 0;
        for (std::int64_t s = 0; s < schedule_len; ++s) {
            Batch b;
            b.id = s;
            b.cursor = cursor;
            b.size = cfg_.train.batch_size;
            b.poisoned = (worker_id == 0 && s == cfg_.inject.poison_batch);
            b.original_step = s;
            cursor += b.size;
            w.schedule.push_back(b);
        }
        return w;
    }

    MoEParams init_params() {
        RngStream init_rng = RngStream::make(cfg_.seed, StreamKind::Init);
        MoEParams p = MoEParams::init(cfg_.model, init_rng);
        p.router.warmup_horizon = cfg_.router.warmup_steps;
        p.router.stats_decay = cfg_.router.stats_decay;
        p.router.mu_s = cfg_.router.init_mu;
        p.router.sigma_s = cfg_.router.init_sigma;
        return p;
    }

    struct StepEval {
        double task_loss = 0.0;
        double total_loss = 0.0;
        AuxLossReport report;
        MoeForwardCache cache;
        Tensor upstream;   // dL_task/d(output)
        Tensor d_w_lm;     // zero-shaped for regression
        Tensor output;
    };

    /// Forward pass plus task loss and its output gradient. No state beyond
    /// the router warmup statistics is touched.
    StepEval evaluate_batch(WorkerCtx& w, const Batch& b, std::int64_t step_idx) {
        StepEval ev;
        Tensor h, targets;
        std::vector<std::int64_t> labels;
        fill_batch(ds_, w.shard, b.cursor, b.size, h, targets,
                   ds_.classification ? &labels : nullptr);
        if (b.poisoned && !ds_.classification)
            for (double& v : targets.data) v *= cfg_.inject.poison_scale;

        w.replica.params.router.global_step = step_idx;
        MoeForwardResult fwd = moe_forward(h, w.replica.params, w.noise);
        ev.report = fwd.report;
        ev.cache = std::move(fwd.cache);
        ev.output = fwd.output;
        if (ds_.classification) {
            Tensor logits = normhead_forward(fwd.output, w.replica.params.w_lm);
            LossValueGrad ce = softmax_cross_entropy(logits, labels);
            ev.task_loss = ce.value;
            NormHeadGrads head = normhead_backward(fwd.output, w.replica.params.w_lm, ce.grad);
            ev.upstream = std::move(head.d_h);
            ev.d_w_lm = std::move(head.d_w_lm);
        } else {
            LossValueGrad mse = mse_loss(fwd.output, targets);
            ev.task_loss = mse.value;
            ev.upstream = std::move(mse.grad);
            ev.d_w_lm = Tensor(w.replica.params.w_lm.shape);
        }
        ev.total_loss = ev.task_loss + cfg_.optimizer.lambda_balance * ev.report.balance_loss +
                        cfg_.optimizer.lambda_z * ev.report.z_loss;
        return ev;
    }

    void log_spike(WorkerCtx& w, std::int64_t step_idx, double loss, SpikeClass cls,
                   SpikeAction action, double lr_eff) {
        w.spikes.push_back({{"step", step_idx},
                            {"worker", w.replica.worker_id},
                            {"loss", loss},
                            {"classification", to_string(cls)},
                            {"action", to_string(action)},
                            {"effective_lr", lr_eff}});
    }

    /// Process one schedule entry. Returns the observed total loss.
    double step_worker(WorkerCtx& w, std::int64_t total_steps) {
        const Batch b = w.schedule[w.pos];
        const std::int64_t step_idx = static_cast<std::int64_t>(w.pos);
        const double lr = lr_at(step_idx, total_steps);
        StepEval ev = evaluate_batch(w, b, step_idx);

        SpikeClass cls = SpikeClass::Normal;
        SpikeAction action = SpikeAction::Proceed;
        if (cfg_.spike.enabled) {
            cls = w.detector.observe(ev.total_loss);
            action = on_spike(cls, b.is_retry, std::isfinite(ev.total_loss));
        } else if (!std::isfinite(ev.total_loss)) {
            throw numeric_error("train: non-finite loss at step " + std::to_string(step_idx) +
                                ", worker " + std::to_string(w.replica.worker_id) +
                                " with the spike guard disabled");
        }

        // A skipped batch is enqueued exactly once; a skipped retry is
        // dropped and reported unconsumed.
        auto skip_batch = [&] {
            ++w.skipped;
            if (b.is_retry) {
                ++w.dropped;
                return;
            }
            w.retry.enqueue(b.id, step_idx);
            std::vector<Batch> tail(w.schedule.begin() + static_cast<std::ptrdiff_t>(w.pos) + 1,
                                    w.schedule.end());
            std::function<Batch(const PendingBatch&)> make = [&](const PendingBatch& pb) {
                Batch rb = b;
                rb.is_retry = true;
                rb.original_step = pb.original_step;
                return rb;
            };
            reinject(w.retry, tail, w.reinject_rng, cfg_.spike.detector.reinject_horizon, make);
            w.schedule.resize(w.pos + 1);
            w.schedule.insert(w.schedule.end(), tail.begin(), tail.end());
        };

        double lr_eff = lr;
        bool applied = false;
        if (action == SpikeAction::SkipAndRetry) {
            skip_batch();
            log_spike(w, step_idx, ev.total_loss, cls, action, 0.0);
        } else {
            if (action == SpikeAction::SkipRetryAndBackoff)
                lr_eff = lr * cfg_.spike.detector.backoff_factor;
            if (w.replica.worker_id == cfg_.edit.corrupt_worker)
                lr_eff *= cfg_.edit.corrupt_update_scale;
            if (cls != SpikeClass::Normal) log_spike(w, step_idx, ev.total_loss, cls, action, lr_eff);

            MoEGrads grads = moe_backward(w.replica.params, ev.cache, ev.upstream,
                                          cfg_.optimizer.lambda_balance, cfg_.optimizer.lambda_z);
            std::vector<Tensor*> grad_ptrs = grads.tensors(cfg_.model.shared_expert);
            grad_ptrs.push_back(&ev.d_w_lm);
            clip_global_norm(grad_ptrs, cfg_.optimizer.clip_norm);
            std::vector<Tensor*> params = w.replica.params.tensors();
            std::vector<const Tensor*> cgrads(grad_ptrs.begin(), grad_ptrs.end());
            AdamWConfig adam{cfg_.optimizer.beta1, cfg_.optimizer.beta2, cfg_.optimizer.eps,
                             cfg_.optimizer.weight_decay};
            try {
                adamw_step(params, cgrads, w.replica.opt, adam, lr_eff);
                applied = true;
                ++w.applied;
            } catch (const numeric_error&) {
                // Anomaly signal from the optimizer: treat like a wide spike.
                skip_batch();
                log_spike(w, step_idx, ev.total_loss, SpikeClass::WideSpike,
                          SpikeAction::SkipAndRetry, 0.0);
            }
        }

        if (cfg_.edit.policy == "time" && cfg_.train.mode == "edit")
            w.sim_time += cfg_.edit.step_time_base;
        else
            w.sim_time += 1.0;

        w.metrics.push_back({{"step", step_idx},
                             {"worker", w.replica.worker_id},
                             {"loss", ev.total_loss},
                             {"task_loss", ev.task_loss},
                             {"lr", lr_eff},
                             {"batch_size", b.size},
                             {"balance_loss", ev.report.balance_loss},
                             {"z_loss", ev.report.z_loss},
                             {"load_entropy", entropy(ev.report.expert_load.data)},
                             {"classification", to_string(cls)},
                             {"applied", applied},
                             {"poisoned", b.poisoned},
                             {"retry", b.is_retry},
                             {"sim_time", w.sim_time}});
        ++w.pos;
        return ev.total_loss;
    }

    void finalize(TrainResult& r, std::vector<WorkerCtx>& workers) {
        for (WorkerCtx& w : workers) {
            for (auto& m : w.metrics) r.metrics.push_back(std::move(m));
            for (auto& s : w.spikes) r.spike_events.push_back(std::move(s));
            r.applied += w.applied;
            r.skipped += w.skipped;
            r.dropped += w.dropped;
            r.worker_losses.push_back(w.replica.loss_trace);
        }
    }

    TrainResult run_single() {
        TrainResult r;
        MoEParams init = init_params();
        std::vector<WorkerCtx> workers;
        workers.push_back(make_worker(0, 1, cfg_.train.steps, init));
        WorkerCtx& w = workers[0];
        r.scheduled = cfg_.train.steps;
        r.initial_eval_loss = eval_loss(cfg_, ds_, w.replica.params);
        std::function<double(WorkerReplica&, std::int64_t)> step =
            [&](WorkerReplica&, std::int64_t) { return step_worker(w, cfg_.train.steps); };
        while (w.pos < w.schedule.size()) local_round(w.replica, step, 1);
        r.final_eval_loss = eval_loss(cfg_, ds_, w.replica.params);
        r.params = w.replica.params;
        r.opt = w.replica.opt;
        r.state_digest_value = state_digest(r.params, &r.opt);
        finalize(r, workers);
        return r;
    }

    TrainResult run_sync() {
        // Synchronous data-parallel baseline: one shared model, per-worker
        // batches, gradients averaged in worker order every step.
        TrainResult r;
        const std::int64_t n_workers = cfg_.train.workers;
        MoEParams model = init_params();
        auto tensors = model.tensors();
        AdamWState opt = AdamWState::init_like(tensors);
        SpikeDetector detector;
        detector.cfg = cfg_.spike.detector;
        std::vector<RngStream> noise;
        std::vector<Shard> shards;
        const std::int64_t slots =
            cfg_.train.shard_slots > 0 ? cfg_.train.shard_slots : n_workers;
        for (std::int64_t j = 0; j < n_workers; ++j) {
            noise.push_back(RngStream::make(cfg_.seed, StreamKind::RoutingNoise,
                                            static_cast<std::uint64_t>(j)));
            shards.push_back(worker_shard(cfg_.task.n_samples, slots, j));
        }
        r.scheduled = cfg_.train.steps;
        r.initial_eval_loss = eval_loss(cfg_, ds_, model);
        AdamWConfig adam{cfg_.optimizer.beta1, cfg_.optimizer.beta2, cfg_.optimizer.eps,
                         cfg_.optimizer.weight_decay};
        std::vector<double> losses;
        for (std::int64_t step = 0; step < cfg_.train.steps; ++step) {
            const double lr = lr_at(step, cfg_.train.steps);
            model.router.global_step = step;
            std::vector<Tensor> grad_sum;
            Tensor d_w_lm_sum(model.w_lm.shape);
            double loss_sum = 0.0, task_sum = 0.0, bal_sum = 0.0, z_sum = 0.0, ent_sum = 0.0;
            for (std::int64_t j = 0; j < n_workers; ++j) {
                Tensor h, targets;
                std::vector<std::int64_t> labels;
                fill_batch(ds_, shards[static_cast<std::size_t>(j)],
                           step * cfg_.train.batch_size, cfg_.train.batch_size, h, targets,
                           ds_.classification ? &labels : nullptr);
                MoeForwardResult fwd = moe_forward(h, model, noise[static_cast<std::size_t>(j)]);
                Tensor upstream;
                double task = 0.0;
                Tensor d_w_lm(model.w_lm.shape);
                if (ds_.classification) {
                    Tensor logits = normhead_forward(fwd.output, model.w_lm);
                    LossValueGrad ce = softmax_cross_entropy(logits, labels);
                    task = ce.value;
                    NormHeadGrads head = normhead_backward(fwd.output, model.w_lm, ce.grad);
                    upstream = std::move(head.d_h);
                    d_w_lm = std::move(head.d_w_lm);
                } else {
                    LossValueGrad mse = mse_loss(fwd.output, targets);
                    task = mse.value;
                    upstream = std::move(mse.grad);
                }
                loss_sum += task + cfg_.optimizer.lambda_balance * fwd.report.balance_loss +
                            cfg_.optimizer.lambda_z * fwd.report.z_loss;
                task_sum += task;
                bal_sum += fwd.report.balance_loss;
                z_sum += fwd.report.z_loss;
                ent_sum += entropy(fwd.report.expert_load.data);
                MoEGrads grads = moe_backward(model, fwd.cache, upstream,
                                              cfg_.optimizer.lambda_balance, cfg_.optimizer.lambda_z);
                std::vector<Tensor*> gp = grads.tensors(cfg_.model.shared_expert);
                gp.push_back(&d_w_lm);
                if (grad_sum.empty()) {
                    for (Tensor* g : gp) grad_sum.push_back(*g);
                } else {
                    for (std::size_t i = 0; i < gp.size(); ++i) axpy(1.0, *gp[i], grad_sum[i]);
                }
            }
            const double inv = 1.0 / static_cast<double>(n_workers);
            for (Tensor& g : grad_sum)
                for (double& v : g.data) v *= inv;
            const double mean_loss = loss_sum * inv;
            losses.push_back(mean_loss);

            SpikeClass cls = SpikeClass::Normal;
            SpikeAction action = SpikeAction::Proceed;
            if (cfg_.spike.enabled) {
                cls = detector.observe(mean_loss);
                action = on_spike(cls, false, std::isfinite(mean_loss));
            } else if (!std::isfinite(mean_loss)) {
                throw numeric_error("train: non-finite loss at step " + std::to_string(step) +
                                    " with the spike guard disabled");
            }
            bool applied = false;
            if (action == SpikeAction::Proceed) {
                std::vector<Tensor*> gp;
                for (Tensor& g : grad_sum) gp.push_back(&g);
                clip_global_norm(gp, cfg_.optimizer.clip_norm);
                std::vector<Tensor*> params = model.tensors();
                std::vector<const Tensor*> cg(gp.begin(), gp.end());
                try {
                    adamw_step(params, cg, opt, adam, lr);
                    applied = true;
                    ++r.applied;
                } catch (const numeric_error&) {
                    ++r.skipped;
                }
            } else {
                ++r.skipped;
            }
            r.metrics.push_back({{"step", step},
                                 {"worker", -1},
                                 {"loss", mean_loss},
                                 {"task_loss", task_sum * inv},
                                 {"lr", lr},
                                 {"batch_size", cfg_.train.batch_size * n_workers},
                                 {"balance_loss", bal_sum * inv},
                                 {"z_loss", z_sum * inv},
                                 {"load_entropy", ent_sum * inv},
                                 {"classification", to_string(cls)},
                                 {"applied", applied},
                                 {"poisoned", false},
                                 {"retry", false},
                                 {"sim_time", static_cast<double>(step + 1)}});
        }
        r.final_eval_loss = eval_loss(cfg_, ds_, model);
        r.params = model;
        r.opt = opt;
        r.state_digest_value = state_digest(r.params, &r.opt);
        r.worker_losses.push_back(losses);
        return r;
    }

    TrainResult run_edit() {
        TrainResult r;
        const std::int64_t n_workers = cfg_.train.workers;
        const bool time_policy = cfg_.edit.policy == "time";
        const std::int64_t schedule_len =
            time_policy ? cfg_.train.steps : cfg_.edit.rounds * cfg_.edit.h;
        MoEParams anchor = init_params();
        std::vector<WorkerCtx> workers;
        for (std::int64_t j = 0; j < n_workers; ++j)
            workers.push_back(make_worker(j, n_workers, schedule_len, anchor));
        r.scheduled = schedule_len * n_workers;
        r.initial_eval_loss = eval_loss(cfg_, ds_, anchor);

        std::vector<EmaNormState> ema(static_cast<std::size_t>(n_workers));
        if (cfg_.edit.detector_warm)
            for (EmaNormState& st : ema) {
                st.initialized = true;
                st.ema = EmaState{cfg_.edit.detector_warm_mean, cfg_.edit.detector_warm_dev};
            }

        auto anchor_tensors = anchor.tensors();
        std::int64_t round = 0;
        while (true) {
            auto run_local = [&](WorkerCtx& w) {
                std::int64_t count = 0;
                if (time_policy) {
                    const double deadline = cfg_.edit.tau;
                    double elapsed = 0.0;
                    std::int64_t remaining =
                        static_cast<std::int64_t>(w.schedule.size()) - static_cast<std::int64_t>(w.pos);
                    while (elapsed < deadline && count < remaining) {
                        elapsed += cfg_.edit.step_time_base;
                        ++count;
                    }
                } else {
                    count = std::min<std::int64_t>(
                        cfg_.edit.h,
                        static_cast<std::int64_t>(w.schedule.size()) - static_cast<std::int64_t>(w.pos));
                }
                if (count <= 0) return;
                std::function<double(WorkerReplica&, std::int64_t)> step =
                    [&](WorkerReplica&, std::int64_t) { return step_worker(w, schedule_len); };
                local_round(w.replica, step, count);
            };

            std::vector<std::size_t> busy;
            for (std::size_t j = 0; j < workers.size(); ++j)
                if (workers[j].pos < workers[j].schedule.size()) busy.push_back(j);
            if (busy.empty()) break;

            if (cfg_.edit.parallel_workers && busy.size() > 1) {
                std::vector<std::thread> threads;
                std::vector<std::exception_ptr> errors(busy.size());
                for (std::size_t i = 0; i < busy.size(); ++i)
                    threads.emplace_back([&, i] {
                        try {
                            run_local(workers[busy[i]]);
                        } catch (...) {
                            errors[i] = std::current_exception();
                        }
                    });
                for (auto& t : threads) t.join();
                for (auto& e : errors)
                    if (e) std::rethrow_exception(e);
            } else {
                for (std::size_t j : busy) run_local(workers[j]);
            }

            std::vector<std::vector<Tensor*>> worker_tensors;
            for (WorkerCtx& w : workers) worker_tensors.push_back(w.replica.params.tensors());
            MergeReport report = merge_round(anchor_tensors, worker_tensors, ema,
                                             cfg_.edit.penalty, cfg_.edit.outer_lr);
            for (WorkerCtx& w : workers) w.replica.local_step_count = 0;
            const double anchor_loss = eval_loss(cfg_, ds_, anchor);
            r.rounds.push_back({{"round", round},
                                {"included_workers", report.included},
                                {"excluded_workers", report.excluded},
                                {"worker_norms", report.norms},
                                {"weights", report.weights},
                                {"merged_norm_pre_clip", report.merged_norm_pre},
                                {"merged_norm_post_clip", report.merged_norm_post},
                                {"anchor_loss", anchor_loss}});
            ++round;
        }

        r.final_eval_loss = eval_loss(cfg_, ds_, anchor);
        r.params = anchor;
        r.opt = workers[0].replica.opt;
        r.state_digest_value = state_digest(r.params, &r.opt);
        finalize(r, workers);
        return r;
    }
};

inline TrainResult run_training(const ExperimentConfig& cfg) {
    Dataset ds = generate_task(cfg);
    Trainer t(cfg, ds);
    return t.run();
}

// ---- gradient check runner ----

struct GradCheckGroup {
    std::string name;
    double rel_error = 0.0;
    bool pass = false;
};

struct GradCheckReport {
    std::vector<GradCheckGroup> groups;
    bool pass = false;
    std::int64_t params_checked = 0;
    std::uint64_t seed = 0;
};

/// Compare every parameter group's analytic gradient of the full training
/// loss (task + balance + z) against central finite differences.
/// `corrupt_group` is a test hook: that group's analytic gradient is scaled
/// so the report must flag it.
inline GradCheckReport run_grad_check(const ExperimentConfig& cfg, double tolerance = 1e-5,
                                      const std::string& corrupt_group = "",
                                      double corrupt_scale = 2.0) {
    ExperimentConfig c = cfg;
    c.validate();
    GradCheckReport report;
    report.seed = c.seed;

    RngStream init_rng = RngStream::make(c.seed, StreamKind::Init);
    MoEParams params = MoEParams::init(c.model, init_rng);
    params.router.warmup_horizon = c.router.warmup_steps;
    params.router.mu_s = c.router.init_mu;
    params.router.sigma_s = c.router.init_sigma;
    // Keep the blended routing path live when warmup is configured.
    params.router.global_step = c.router.warmup_steps > 0 ? c.router.warmup_steps / 2 : 0;

    std::int64_t total_params = 0;
    params.for_each_tensor([&](const std::string&, Tensor& t) { total_params += t.numel(); });
    if (total_params > 1000)
        throw invalid_input("run_grad_check: config too large (" + std::to_string(total_params) +
                            " parameters; limit 1000)");
    report.params_checked = total_params;

    const std::int64_t tokens = 5;
    RngStream data = RngStream::make(c.seed, StreamKind::Data);
    RngStream noise = RngStream::make(c.seed, StreamKind::RoutingNoise);
    Tensor h, eps;
    std::vector<std::int64_t> labels;
    // Redraw until the top-k selection has enough margin for the probes.
    for (int attempt = 0; attempt < 64; ++attempt) {
        h = data.normal_tensor({tokens, c.model.d_model});
        eps = params.router.alpha() < 1.0 ? noise.normal_tensor({tokens, c.model.n_experts})
                                          : Tensor{};
        labels.clear();
        for (std::int64_t t = 0; t < tokens; ++t)
            labels.push_back(static_cast<std::int64_t>(
                data.next_below(static_cast<std::uint64_t>(c.model.vocab))));
        RouteResult route_probe = route_with_noise(h, params.router, eps, c.model.k_top);
        double margin = 1.0;
        for (std::int64_t t = 0; t < tokens; ++t) {
            auto sorted = topk_row(route_probe.p, t, c.model.n_experts);
            margin = std::min(margin,
                              sorted[static_cast<std::size_t>(c.model.k_top - 1)].second -
                                  sorted[static_cast<std::size_t>(c.model.k_top)].second);
        }
        if (margin > 1e-4) break;
    }

    const double lb = c.optimizer.lambda_balance, lz = c.optimizer.lambda_z;
    const bool classify = c.task.kind == "classification";
    auto total_loss = [&]() {
        MoeForwardResult fwd = moe_forward_with_noise(h, params, eps);
        double task;
        if (classify) {
            Tensor logits = normhead_forward(fwd.output, params.w_lm);
            task = softmax_cross_entropy(logits, labels).value;
        } else {
            task = mse_loss(fwd.output, Tensor(fwd.output.shape)).value;
        }
        return task + lb * fwd.report.balance_loss + lz * fwd.report.z_loss;
    };

    // Analytic gradients for every group.
    MoeForwardResult fwd = moe_forward_with_noise(h, params, eps);
    Tensor upstream, d_w_lm(params.w_lm.shape);
    if (classify) {
        Tensor logits = normhead_forward(fwd.output, params.w_lm);
        LossValueGrad ce = softmax_cross_entropy(logits, labels);
        NormHeadGrads head = normhead_backward(fwd.output, params.w_lm, ce.grad);
        upstream = std::move(head.d_h);
        d_w_lm = std::move(head.d_w_lm);
    } else {
        upstream = mse_loss(fwd.output, Tensor(fwd.output.shape)).grad;
    }
    MoEGrads grads = moe_backward(params, fwd.cache, upstream, lb, lz);
    std::vector<Tensor*> analytic = grads.tensors(c.model.shared_expert);
    analytic.push_back(&d_w_lm);

    std::vector<Tensor*> param_tensors = params.tensors();
    std::vector<std::string> names = params.tensor_names();
    report.pass = true;
    for (std::size_t i = 0; i < param_tensors.size(); ++i) {
        Tensor* p = param_tensors[i];
        auto f = [&](const Tensor& candidate) {
            Tensor saved = *p;
            *p = candidate;
            const double v = total_loss();
            *p = saved;
            return v;
        };
        Tensor numeric = finite_diff_grad(f, *p);
        Tensor a = *analytic[i];
        if (names[i] == corrupt_group)
            for (double& v : a.data) v *= corrupt_scale;
        GradCheckGroup g;
        g.name = names[i];
        g.rel_error = gradient_rel_error(a, numeric, tolerance);
        g.pass = g.rel_error < tolerance;
        report.pass = report.pass && g.pass;
        report.groups.push_back(std::move(g));
    }
    return report;
}

inline nlohmann::json grad_check_json(const GradCheckReport& r) {
    nlohmann::json groups = nlohmann::json::array();
    for (const auto& g : r.groups)
        groups.push_back({{"group", g.name}, {"rel_error", g.rel_error}, {"pass", g.pass}});
    return {{"pass", r.pass},
            {"params_checked", r.params_checked},
            {"seed", r.seed},
            {"groups", groups}};
}

}  // namespace moesim
