#pragma once

// Discrete-time simulation of heterogeneous training clusters. Workers draw
// per-step durations from a base-time-plus-Bernoulli-straggle model; the
// synchronous baseline pays the per-step max across workers plus an
// all-reduce, while the elastic pipeline time-boxes local steps per round and
// pays only the layer-wise merge overhead. Device economics come from the
// built-in accelerator presets.
//
// Throughput units: the baseline counts global steps per second; the elastic
// simulator counts total local steps across workers divided by
// (n_workers * time), i.e. global-step equivalents per second, so the two
// are directly comparable and equal for homogeneous workers with free
// communication.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "moesim/edit.hpp"
#include "moesim/rng.hpp"

#include "json.hpp"

namespace moesim {

struct DeviceProfile {
    std::string name;
    double peak_flops_t = 0.0;
    double memory_gb = 0.0;
    double cost_per_hour_rmb = 0.0;
    bool supports_fp8 = false;

    void validate() const {
        if (peak_flops_t <= 0.0 || memory_gb <= 0.0 || cost_per_hour_rmb <= 0.0)
            throw invalid_input("DeviceProfile: numeric fields must be positive");
    }
};

/// Built-in accelerator presets A through E.
inline DeviceProfile device_preset(const std::string& name) {
    if (name == "A") return {"A", 370.0, 64.0, 7.0, false};
    if (name == "B") return {"B", 120.0, 96.0, 4.5, false};
    if (name == "C") return {"C", 312.0, 80.0, 10.0, false};
    if (name == "D") return {"D", 989.0, 80.0, 27.5, true};
    if (name == "E") return {"E", 147.0, 96.0, 5.64, true};
    throw invalid_input("device_preset: unknown device " + name);
}

/// Profiles from a JSON file of the form
///   {"name": {"peak_flops_t": .., "memory_gb": .., "cost_per_hour_rmb": ..,
///             "supports_fp8": ..}, ...}
/// Entries override the built-in presets of the same name.
inline std::vector<DeviceProfile> load_device_profiles(const std::string& path);

/// Preset lookup with optional file overrides.
inline DeviceProfile device_profile(const std::string& name,
                                    const std::vector<DeviceProfile>& overrides) {
    for (const DeviceProfile& d : overrides)
        if (d.name == name) return d;
    return device_preset(name);
}

struct StepTimeModel {
    double base_step_time = 1.0;
    double straggle_probability = 0.0;
    double straggle_multiplier = 1.0;
    double slowdown = 1.0;  // fixed per-worker factor

    void validate() const {
        if (base_step_time <= 0.0 || slowdown < 1.0)
            throw invalid_input("StepTimeModel: base time must be positive, slowdown >= 1");
        if (straggle_probability < 0.0 || straggle_probability > 1.0)
            throw invalid_input("StepTimeModel: probability outside [0, 1]");
        if (straggle_multiplier < 1.0)
            throw invalid_input("StepTimeModel: multiplier must be >= 1");
    }

    double sample(RngStream& rng) const {
        const bool straggle = rng.next_double() < straggle_probability;
        return base_step_time * slowdown * (straggle ? straggle_multiplier : 1.0);
    }
};

enum class EventKind { Compute, Comm, Merge, Idle };

inline const char* to_string(EventKind k) {
    switch (k) {
        case EventKind::Compute: return "compute";
        case EventKind::Comm: return "comm";
        case EventKind::Merge: return "merge";
        default: return "idle";
    }
}

struct SimEvent {
    std::int64_t worker = 0;
    EventKind kind = EventKind::Compute;
    double start = 0.0;
    double end = 0.0;
};

struct SimTrace {
    std::vector<SimEvent> events;
    double total_time = 0.0;
    double throughput = 0.0;  // global-step equivalents per second

    void add(std::int64_t worker, EventKind kind, double start, double end) {
        if (end < start) throw invalid_input("SimTrace: event ends before it starts");
        if (end > start) events.push_back({worker, kind, start, end});
    }

    /// Busy plus idle time per worker; by construction it equals total_time
    /// for every worker, which trace consumers rely on.
    std::vector<double> per_worker_time(std::int64_t n_workers) const {
        std::vector<double> t(static_cast<std::size_t>(n_workers), 0.0);
        for (const SimEvent& e : events) t[static_cast<std::size_t>(e.worker)] += e.end - e.start;
        return t;
    }
};

struct BaselineResult {
    SimTrace trace;
    double throughput = 0.0;
};

/// Synchronous data-parallel baseline: every global step waits for the
/// slowest worker, then pays the all-reduce cost.
inline BaselineResult simulate_sync_baseline(const std::vector<StepTimeModel>& models,
                                             std::int64_t total_steps, double comm_per_step,
                                             std::uint64_t seed) {
    if (models.empty()) throw invalid_input("simulate_sync_baseline: no workers");
    if (total_steps < 1) throw invalid_input("simulate_sync_baseline: no steps");
    for (const auto& m : models) m.validate();
    const std::int64_t n = static_cast<std::int64_t>(models.size());
    std::vector<RngStream> streams;
    for (std::int64_t j = 0; j < n; ++j)
        streams.push_back(RngStream::make(seed, StreamKind::SimTime, static_cast<std::uint64_t>(j)));

    BaselineResult out;
    double now = 0.0;
    for (std::int64_t step = 0; step < total_steps; ++step) {
        double slowest = 0.0;
        std::vector<double> times(static_cast<std::size_t>(n));
        for (std::int64_t j = 0; j < n; ++j) {
            times[static_cast<std::size_t>(j)] = models[static_cast<std::size_t>(j)].sample(streams[static_cast<std::size_t>(j)]);
            slowest = std::max(slowest, times[static_cast<std::size_t>(j)]);
        }
        for (std::int64_t j = 0; j < n; ++j) {
            const double t = times[static_cast<std::size_t>(j)];
            out.trace.add(j, EventKind::Compute, now, now + t);
            out.trace.add(j, EventKind::Idle, now + t, now + slowest);
            out.trace.add(j, EventKind::Comm, now + slowest, now + slowest + comm_per_step);
        }
        now += slowest + comm_per_step;
    }
    out.trace.total_time = now;
    out.throughput = static_cast<double>(total_steps) / now;
    out.trace.throughput = out.throughput;
    return out;
}

struct EditSimResult {
    SimTrace trace;
    double throughput = 0.0;  // global-step equivalents per second
    std::vector<std::int64_t> local_steps;  // per worker, total
};

/// Elastic rounds: under the time policy each worker keeps starting local
/// steps while its round clock is below tau (so faster workers fit more
/// steps); under the step policy each worker runs exactly H steps. The merge
/// costs the layer-wise plan's overhead and ends the round for everyone.
inline EditSimResult simulate_edit(const std::vector<StepTimeModel>& models,
                                   const SyncPolicy& policy, std::int64_t total_rounds,
                                   double merge_overhead, std::uint64_t seed) {
    if (models.empty()) throw invalid_input("simulate_edit: no workers");
    if (total_rounds < 1) throw invalid_input("simulate_edit: no rounds");
    for (const auto& m : models) m.validate();
    const std::int64_t n = static_cast<std::int64_t>(models.size());
    std::vector<RngStream> streams;
    for (std::int64_t j = 0; j < n; ++j)
        streams.push_back(RngStream::make(seed, StreamKind::SimTime, static_cast<std::uint64_t>(j)));

    EditSimResult out;
    out.local_steps.assign(static_cast<std::size_t>(n), 0);
    double now = 0.0;
    std::int64_t total_local = 0;
    std::vector<double> round_elapsed(static_cast<std::size_t>(n), 0.0);
    for (std::int64_t round = 0; round < total_rounds; ++round) {
        double phase_end = now;
        for (std::int64_t j = 0; j < n; ++j) {
            double elapsed = 0.0;
            std::int64_t steps = 0;
            auto more = [&] {
                if (policy.kind == SyncPolicy::Kind::EveryHSteps) return steps < policy.h;
                return elapsed < policy.tau;
            };
            while (more()) {
                const double t = models[static_cast<std::size_t>(j)].sample(streams[static_cast<std::size_t>(j)]);
                out.trace.add(j, EventKind::Compute, now + elapsed, now + elapsed + t);
                elapsed += t;
                ++steps;
            }
            out.local_steps[static_cast<std::size_t>(j)] += steps;
            total_local += steps;
            round_elapsed[static_cast<std::size_t>(j)] = elapsed;
            phase_end = std::max(phase_end, now + elapsed);
        }
        // idle-fill to the slowest worker, then the shared merge window
        for (std::int64_t j = 0; j < n; ++j) {
            out.trace.add(j, EventKind::Idle, now + round_elapsed[static_cast<std::size_t>(j)], phase_end);
            out.trace.add(j, EventKind::Merge, phase_end, phase_end + merge_overhead);
        }
        now = phase_end + merge_overhead;
    }
    out.trace.total_time = now;
    out.throughput = static_cast<double>(total_local) / (static_cast<double>(n) * now);
    out.trace.throughput = out.throughput;
    return out;
}

/// (edit - baseline) / baseline, in percent.
inline double speedup_ratio(double edit_throughput, double baseline_throughput) {
    if (baseline_throughput <= 0.0) throw invalid_input("speedup_ratio: baseline must be positive");
    return (edit_throughput - baseline_throughput) / baseline_throughput * 100.0;
}

/// device_count * hours * cost_per_hour, in RMB.
inline double estimate_cost(const DeviceProfile& device, double device_count, double hours) {
    device.validate();
    if (device_count <= 0.0 || hours <= 0.0)
        throw invalid_input("estimate_cost: count and hours must be positive");
    return device_count * hours * device.cost_per_hour_rmb;
}

/// Savings of b relative to a, in percent: (a - b) / a * 100.
inline double compare_cost(double cost_a, double cost_b) {
    if (cost_a <= 0.0) throw invalid_input("compare_cost: reference cost must be positive");
    return (cost_a - cost_b) / cost_a * 100.0;
}

inline std::vector<DeviceProfile> load_device_profiles(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("device profiles: cannot open " + path);
    nlohmann::json j;
    f >> j;
    std::vector<DeviceProfile> out;
    for (const auto& [name, spec] : j.items()) {
        DeviceProfile d;
        d.name = name;
        d.peak_flops_t = spec.at("peak_flops_t").get<double>();
        d.memory_gb = spec.at("memory_gb").get<double>();
        d.cost_per_hour_rmb = spec.at("cost_per_hour_rmb").get<double>();
        d.supports_fp8 = spec.value("supports_fp8", false);
        d.validate();
        out.push_back(std::move(d));
    }
    return out;
}

/// CSV trace export with columns worker,kind,start,end.
inline void write_trace_csv(const SimTrace& trace, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("write_trace_csv: cannot open " + path);
    f << "worker,kind,start,end\n";
    char buf[160];
    for (const SimEvent& e : trace.events) {
        std::snprintf(buf, sizeof(buf), "%lld,%s,%.12g,%.12g\n",
                      static_cast<long long>(e.worker), to_string(e.kind), e.start, e.end);
        f << buf;
    }
}

}  // namespace moesim
