#pragma once

// Experiment configuration: a versioned JSON schema covering the model,
// optimizer, schedules, synchronization, spike handling and scenario knobs.
// A run is a pure function of (config, seed); parsing and re-serializing a
// config is byte-stable, which the determinism acceptance criterion relies
// on.

#include <cstdint>
#include <fstream>
#include <string>

#include "moesim/edit.hpp"
#include "moesim/moe.hpp"
#include "moesim/optim.hpp"
#include "moesim/spike.hpp"
#include "moesim/sim.hpp"

#include "json.hpp"

namespace moesim {

inline constexpr int kConfigSchemaVersion = 1;

struct TaskConfig {
    std::string kind = "regression";  // or "classification"
    std::int64_t n_samples = 4096;
    double noise_std = 0.05;
    std::int64_t eval_samples = 512;
};

struct RouterConfig {
    std::int64_t warmup_steps = 0;
    double stats_decay = 0.99;
    double init_mu = 0.0;
    double init_sigma = 1.0;
};

struct OptimizerConfig {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.1;
    double clip_norm = 1.0;
    double lambda_balance = 0.015;
    double lambda_z = 1e-4;
};

struct LrConfig {
    std::string kind = "wsd";  // "wsd", "inv_sqrt", "constant"
    double max_lr = 0.02;
    std::int64_t warmup_steps = 20;
    double halve_fraction = 0.6;
    double start_lr = 1.2e-4;
    double end_lr = 1.2e-8;
    double value = 0.01;  // constant kind
};

struct TrainConfig {
    std::int64_t steps = 400;
    std::int64_t batch_size = 16;
    std::int64_t workers = 1;
    std::string mode = "single";  // "single", "sync", "edit"
    // Shard denominator; 0 means "workers". Setting it above the worker
    // count keeps each worker's data shard stable when a worker is removed,
    // which leave-one-out comparisons rely on.
    std::int64_t shard_slots = 0;
};

struct EditConfig {
    std::string policy = "every_h";  // or "time"
    std::int64_t h = 4;
    double tau = 0.0;
    std::int64_t rounds = 100;
    double outer_lr = 1.0;
    bool parallel_workers = false;
    PenaltyConfig penalty;
    // scenario knobs
    bool detector_warm = false;
    double detector_warm_mean = 0.0;
    double detector_warm_dev = 0.0;
    std::int64_t corrupt_worker = -1;
    double corrupt_update_scale = 1.0;
    double step_time_base = 1.0;  // time policy only
};

struct SpikeGuardConfig {
    bool enabled = true;
    SpikeConfig detector;
};

struct InjectConfig {
    std::int64_t poison_batch = -1;  // schedule position; -1 disables
    double poison_scale = 100.0;
};

struct SimulationConfig {
    std::int64_t workers = 4;
    std::int64_t baseline_steps = 400;
    std::int64_t rounds = 50;
    std::string policy = "time";  // "time" or "every_h"
    double tau = 8.0;
    std::int64_t h = 8;
    double base_step_time = 1.0;
    double straggle_probability = 0.1;
    double straggle_multiplier = 4.0;
    std::vector<double> worker_slowdown;  // optional fixed per-worker factors
    std::vector<double> layer_compute = {0.25, 0.25, 0.25, 0.25};
    std::vector<double> layer_comm = {0.05, 0.05, 0.05, 0.05};
};

struct ExperimentConfig {
    std::uint64_t seed = 1;
    TaskConfig task;
    MoEConfig model;
    RouterConfig router;
    OptimizerConfig optimizer;
    LrConfig lr;
    TrainConfig train;
    EditConfig edit;
    SpikeGuardConfig spike;
    InjectConfig inject;
    SimulationConfig sim;

    void validate() const {
        model.validate();
        if (task.kind != "regression" && task.kind != "classification")
            throw invalid_input("config: task.kind must be regression or classification");
        if (train.mode != "single" && train.mode != "sync" && train.mode != "edit")
            throw invalid_input("config: train.mode must be single, sync or edit");
        if (lr.kind != "wsd" && lr.kind != "inv_sqrt" && lr.kind != "constant")
            throw invalid_input("config: lr.kind must be wsd, inv_sqrt or constant");
        if (train.workers < 1 || train.batch_size < 1 || train.steps < 0)
            throw invalid_input("config: train fields out of range");
        if (edit.policy != "every_h" && edit.policy != "time")
            throw invalid_input("config: edit.policy must be every_h or time");
        if (task.n_samples < train.batch_size)
            throw invalid_input("config: need at least one batch of samples");
        edit.penalty.validate();
    }
};

// JSON round trip. Keys are emitted in nlohmann's sorted order, so
// dump(parse(dump(x))) == dump(x).

inline void to_json(nlohmann::json& j, const TaskConfig& c) {
    j = {{"kind", c.kind},
         {"n_samples", c.n_samples},
         {"noise_std", c.noise_std},
         {"eval_samples", c.eval_samples}};
}
inline void from_json(const nlohmann::json& j, TaskConfig& c) {
    c.kind = j.value("kind", c.kind);
    c.n_samples = j.value("n_samples", c.n_samples);
    c.noise_std = j.value("noise_std", c.noise_std);
    c.eval_samples = j.value("eval_samples", c.eval_samples);
}

inline void to_json(nlohmann::json& j, const MoEConfig& c) {
    j = {{"d_model", c.d_model},
         {"n_experts", c.n_experts},
         {"k_top", c.k_top},
         {"d_expert_hidden", c.d_expert_hidden},
         {"shared_expert", c.shared_expert},
         {"d_shared_hidden", c.d_shared_hidden},
         {"vocab", c.vocab}};
}
inline void from_json(const nlohmann::json& j, MoEConfig& c) {
    c.d_model = j.value("d_model", c.d_model);
    c.n_experts = j.value("n_experts", c.n_experts);
    c.k_top = j.value("k_top", c.k_top);
    c.d_expert_hidden = j.value("d_expert_hidden", c.d_expert_hidden);
    c.shared_expert = j.value("shared_expert", c.shared_expert);
    c.d_shared_hidden = j.value("d_shared_hidden", c.d_shared_hidden);
    c.vocab = j.value("vocab", c.vocab);
}

inline void to_json(nlohmann::json& j, const RouterConfig& c) {
    j = {{"warmup_steps", c.warmup_steps},
         {"stats_decay", c.stats_decay},
         {"init_mu", c.init_mu},
         {"init_sigma", c.init_sigma}};
}
inline void from_json(const nlohmann::json& j, RouterConfig& c) {
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.stats_decay = j.value("stats_decay", c.stats_decay);
    c.init_mu = j.value("init_mu", c.init_mu);
    c.init_sigma = j.value("init_sigma", c.init_sigma);
}

inline void to_json(nlohmann::json& j, const OptimizerConfig& c) {
    j = {{"beta1", c.beta1},     {"beta2", c.beta2},
         {"eps", c.eps},         {"weight_decay", c.weight_decay},
         {"clip_norm", c.clip_norm}, {"lambda_balance", c.lambda_balance},
         {"lambda_z", c.lambda_z}};
}
inline void from_json(const nlohmann::json& j, OptimizerConfig& c) {
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.eps = j.value("eps", c.eps);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.lambda_balance = j.value("lambda_balance", c.lambda_balance);
    c.lambda_z = j.value("lambda_z", c.lambda_z);
}

inline void to_json(nlohmann::json& j, const LrConfig& c) {
    j = {{"kind", c.kind},
         {"max_lr", c.max_lr},
         {"warmup_steps", c.warmup_steps},
         {"halve_fraction", c.halve_fraction},
         {"start_lr", c.start_lr},
         {"end_lr", c.end_lr},
         {"value", c.value}};
}
inline void from_json(const nlohmann::json& j, LrConfig& c) {
    c.kind = j.value("kind", c.kind);
    c.max_lr = j.value("max_lr", c.max_lr);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.halve_fraction = j.value("halve_fraction", c.halve_fraction);
    c.start_lr = j.value("start_lr", c.start_lr);
    c.end_lr = j.value("end_lr", c.end_lr);
    c.value = j.value("value", c.value);
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"steps", c.steps},
         {"batch_size", c.batch_size},
         {"workers", c.workers},
         {"mode", c.mode},
         {"shard_slots", c.shard_slots}};
}
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.workers = j.value("workers", c.workers);
    c.mode = j.value("mode", c.mode);
    c.shard_slots = j.value("shard_slots", c.shard_slots);
}

inline void to_json(nlohmann::json& j, const PenaltyConfig& c) {
    j = {{"enabled", c.enabled},
         {"ema_decay", c.ema_decay},
         {"anomaly_multiplier", c.anomaly_multiplier},
         {"clip_threshold", c.clip_threshold},
         {"epsilon", c.epsilon}};
}
inline void from_json(const nlohmann::json& j, PenaltyConfig& c) {
    c.enabled = j.value("enabled", c.enabled);
    c.ema_decay = j.value("ema_decay", c.ema_decay);
    c.anomaly_multiplier = j.value("anomaly_multiplier", c.anomaly_multiplier);
    c.clip_threshold = j.value("clip_threshold", c.clip_threshold);
    c.epsilon = j.value("epsilon", c.epsilon);
}

inline void to_json(nlohmann::json& j, const EditConfig& c) {
    j = {{"policy", c.policy},
         {"h", c.h},
         {"tau", c.tau},
         {"rounds", c.rounds},
         {"outer_lr", c.outer_lr},
         {"parallel_workers", c.parallel_workers},
         {"penalty", c.penalty},
         {"detector_warm", c.detector_warm},
         {"detector_warm_mean", c.detector_warm_mean},
         {"detector_warm_dev", c.detector_warm_dev},
         {"corrupt_worker", c.corrupt_worker},
         {"corrupt_update_scale", c.corrupt_update_scale},
         {"step_time_base", c.step_time_base}};
}
inline void from_json(const nlohmann::json& j, EditConfig& c) {
    c.policy = j.value("policy", c.policy);
    c.h = j.value("h", c.h);
    c.tau = j.value("tau", c.tau);
    c.rounds = j.value("rounds", c.rounds);
    c.outer_lr = j.value("outer_lr", c.outer_lr);
    c.parallel_workers = j.value("parallel_workers", c.parallel_workers);
    if (j.contains("penalty")) c.penalty = j.at("penalty").get<PenaltyConfig>();
    c.detector_warm = j.value("detector_warm", c.detector_warm);
    c.detector_warm_mean = j.value("detector_warm_mean", c.detector_warm_mean);
    c.detector_warm_dev = j.value("detector_warm_dev", c.detector_warm_dev);
    c.corrupt_worker = j.value("corrupt_worker", c.corrupt_worker);
    c.corrupt_update_scale = j.value("corrupt_update_scale", c.corrupt_update_scale);
    c.step_time_base = j.value("step_time_base", c.step_time_base);
}

inline void to_json(nlohmann::json& j, const SpikeConfig& c) {
    j = {{"window", c.window},
         {"narrow_k", c.narrow_k},
         {"wide_run_len", c.wide_run_len},
         {"min_samples", c.min_samples},
         {"backoff_factor", c.backoff_factor},
         {"reinject_horizon", c.reinject_horizon}};
}
inline void from_json(const nlohmann::json& j, SpikeConfig& c) {
    c.window = j.value("window", c.window);
    c.narrow_k = j.value("narrow_k", c.narrow_k);
    c.wide_run_len = j.value("wide_run_len", c.wide_run_len);
    c.min_samples = j.value("min_samples", c.min_samples);
    c.backoff_factor = j.value("backoff_factor", c.backoff_factor);
    c.reinject_horizon = j.value("reinject_horizon", c.reinject_horizon);
}

inline void to_json(nlohmann::json& j, const SpikeGuardConfig& c) {
    j = {{"enabled", c.enabled}, {"detector", c.detector}};
}
inline void from_json(const nlohmann::json& j, SpikeGuardConfig& c) {
    c.enabled = j.value("enabled", c.enabled);
    if (j.contains("detector")) c.detector = j.at("detector").get<SpikeConfig>();
}

inline void to_json(nlohmann::json& j, const InjectConfig& c) {
    j = {{"poison_batch", c.poison_batch}, {"poison_scale", c.poison_scale}};
}
inline void from_json(const nlohmann::json& j, InjectConfig& c) {
    c.poison_batch = j.value("poison_batch", c.poison_batch);
    c.poison_scale = j.value("poison_scale", c.poison_scale);
}

inline void to_json(nlohmann::json& j, const SimulationConfig& c) {
    j = {{"workers", c.workers},
         {"baseline_steps", c.baseline_steps},
         {"rounds", c.rounds},
         {"policy", c.policy},
         {"tau", c.tau},
         {"h", c.h},
         {"base_step_time", c.base_step_time},
         {"straggle_probability", c.straggle_probability},
         {"straggle_multiplier", c.straggle_multiplier},
         {"worker_slowdown", c.worker_slowdown},
         {"layer_compute", c.layer_compute},
         {"layer_comm", c.layer_comm}};
}
inline void from_json(const nlohmann::json& j, SimulationConfig& c) {
    c.workers = j.value("workers", c.workers);
    c.baseline_steps = j.value("baseline_steps", c.baseline_steps);
    c.rounds = j.value("rounds", c.rounds);
    c.policy = j.value("policy", c.policy);
    c.tau = j.value("tau", c.tau);
    c.h = j.value("h", c.h);
    c.base_step_time = j.value("base_step_time", c.base_step_time);
    c.straggle_probability = j.value("straggle_probability", c.straggle_probability);
    c.straggle_multiplier = j.value("straggle_multiplier", c.straggle_multiplier);
    c.worker_slowdown = j.value("worker_slowdown", c.worker_slowdown);
    c.layer_compute = j.value("layer_compute", c.layer_compute);
    c.layer_comm = j.value("layer_comm", c.layer_comm);
}

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
    j = {{"schema_version", kConfigSchemaVersion},
         {"seed", c.seed},
         {"task", c.task},
         {"model", c.model},
         {"router", c.router},
         {"optimizer", c.optimizer},
         {"lr", c.lr},
         {"train", c.train},
         {"edit", c.edit},
         {"spike", c.spike},
         {"inject", c.inject},
         {"sim", c.sim}};
}
inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
    if (j.contains("schema_version") && j.at("schema_version").get<int>() != kConfigSchemaVersion)
        throw invalid_input("config: unsupported schema_version");
    c.seed = j.value("seed", c.seed);
    if (j.contains("task")) c.task = j.at("task").get<TaskConfig>();
    if (j.contains("model")) c.model = j.at("model").get<MoEConfig>();
    if (j.contains("router")) c.router = j.at("router").get<RouterConfig>();
    if (j.contains("optimizer")) c.optimizer = j.at("optimizer").get<OptimizerConfig>();
    if (j.contains("lr")) c.lr = j.at("lr").get<LrConfig>();
    if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
    if (j.contains("edit")) c.edit = j.at("edit").get<EditConfig>();
    if (j.contains("spike")) c.spike = j.at("spike").get<SpikeGuardConfig>();
    if (j.contains("inject")) c.inject = j.at("inject").get<InjectConfig>();
    if (j.contains("sim")) c.sim = j.at("sim").get<SimulationConfig>();
}

inline std::string canonical_dump(const nlohmann::json& j) { return j.dump(2) + "\n"; }

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("config: cannot open " + path);
    nlohmann::json j;
    f >> j;
    ExperimentConfig cfg = j.get<ExperimentConfig>();
    cfg.validate();
    return cfg;
}

}  // namespace moesim
