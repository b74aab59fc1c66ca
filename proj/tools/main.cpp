// moesim command-line front end: experiment orchestration over the library.
// Subcommands: grad-check, train, edit-train, inject-spike, simulate-cluster,
// fit-scaling, cost. Every run is a pure function of (config, seed); all
// output files are byte-reproducible. Wall-clock timing goes to stderr only.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "moesim/checkpoint.hpp"
#include "moesim/config.hpp"
#include "moesim/scaling.hpp"
#include "moesim/sim.hpp"
#include "moesim/task.hpp"
#include "moesim/train.hpp"

#include "CLI11.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace moesim;

namespace {

void write_text(const fs::path& path, const std::string& text) {
    if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::trunc | std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path.string());
    f << text;
}

void write_jsonl(const fs::path& path, const std::vector<json>& records) {
    std::string buf;
    for (const json& r : records) buf += r.dump() + "\n";
    write_text(path, buf);
}

ExperimentConfig load_or_default(const std::string& config_path, std::uint64_t seed_override,
                                 bool seed_given) {
    ExperimentConfig cfg;
    if (!config_path.empty()) cfg = load_config(config_path);
    if (seed_given) cfg.seed = seed_override;
    cfg.validate();
    return cfg;
}

json train_summary(const ExperimentConfig& cfg, const TrainResult& r) {
    char digest[32];
    std::snprintf(digest, sizeof(digest), "%016llx",
                  static_cast<unsigned long long>(r.state_digest_value));
    return {{"mode", cfg.train.mode},
            {"seed", cfg.seed},
            {"initial_eval_loss", r.initial_eval_loss},
            {"final_eval_loss", r.final_eval_loss},
            {"scheduled_batches", r.scheduled},
            {"applied_updates", r.applied},
            {"skip_events", r.skipped},
            {"dropped_batches", r.dropped},
            {"state_digest", digest}};
}

void emit_train_outputs(const ExperimentConfig& cfg, TrainResult& r, const fs::path& out) {
    write_jsonl(out / "metrics.jsonl", r.metrics);
    write_jsonl(out / "spikes.jsonl", r.spike_events);
    if (cfg.train.mode == "edit") write_jsonl(out / "rounds.jsonl", r.rounds);
    save_checkpoint((out / "checkpoint.bin").string(), r.params, &r.opt);
    const json summary = train_summary(cfg, r);
    write_text(out / "summary.json", canonical_dump(summary));
    std::cout << canonical_dump(summary);
}

int cmd_grad_check(const std::string& config_path, std::uint64_t seed, bool seed_given,
                   const fs::path& out) {
    ExperimentConfig cfg;
    if (config_path.empty()) {
        // Built-in small configuration covering every gradient path.
        cfg.task.kind = "classification";
        cfg.model.d_model = 8;
        cfg.model.n_experts = 4;
        cfg.model.k_top = 2;
        cfg.model.d_expert_hidden = 4;
        cfg.model.d_shared_hidden = 6;
        cfg.model.vocab = 7;
        cfg.router.warmup_steps = 10;
        cfg.router.init_sigma = 0.5;
        cfg.seed = 7;
    } else {
        cfg = load_config(config_path);
    }
    if (seed_given) cfg.seed = seed;
    GradCheckReport report = run_grad_check(cfg);
    const json j = grad_check_json(report);
    write_text(out / "gradcheck.json", canonical_dump(j));
    std::cout << canonical_dump(j);
    return report.pass ? 0 : 1;
}

int cmd_train(ExperimentConfig cfg, const fs::path& out, bool force_edit) {
    if (force_edit)
        cfg.train.mode = "edit";
    else if (cfg.train.mode == "edit")
        cfg.train.mode = "single";
    cfg.validate();
    TrainResult r = run_training(cfg);
    emit_train_outputs(cfg, r, out);
    return 0;
}

int cmd_inject_spike(ExperimentConfig cfg, const fs::path& out) {
    if (cfg.inject.poison_batch < 0) cfg.inject.poison_batch = cfg.train.steps / 2;
    cfg.train.mode = "single";

    ExperimentConfig clean = cfg;
    clean.inject.poison_batch = -1;
    ExperimentConfig unguarded = cfg;
    unguarded.spike.enabled = false;
    ExperimentConfig guarded = cfg;
    guarded.spike.enabled = true;

    TrainResult rc = run_training(clean);
    TrainResult ru = run_training(unguarded);
    TrainResult rg = run_training(guarded);

    // Excursion: the largest loss on non-poisoned batches strictly after the
    // poison step; the poisoned batch's own loss (and its retry) measures
    // the batch, not the model.
    auto excursion = [&](const TrainResult& r) {
        double worst = 0.0;
        for (const auto& m : r.metrics) {
            if (m["step"].get<std::int64_t>() <= cfg.inject.poison_batch) continue;
            if (m["poisoned"].get<bool>()) continue;
            worst = std::max(worst, m["loss"].get<double>());
        }
        return worst;
    };

    write_jsonl(out / "clean_metrics.jsonl", rc.metrics);
    write_jsonl(out / "unguarded_metrics.jsonl", ru.metrics);
    write_jsonl(out / "guarded_metrics.jsonl", rg.metrics);
    write_jsonl(out / "guarded_spikes.jsonl", rg.spike_events);
    const json summary = {{"poison_batch", cfg.inject.poison_batch},
                          {"poison_scale", cfg.inject.poison_scale},
                          {"clean_final_loss", rc.final_eval_loss},
                          {"unguarded_final_loss", ru.final_eval_loss},
                          {"guarded_final_loss", rg.final_eval_loss},
                          {"unguarded_excursion", excursion(ru)},
                          {"guarded_excursion", excursion(rg)},
                          {"guarded_skip_events", rg.skipped},
                          {"guarded_dropped", rg.dropped}};
    write_text(out / "summary.json", canonical_dump(summary));
    std::cout << canonical_dump(summary);
    return 0;
}

int cmd_simulate_cluster(const ExperimentConfig& cfg, const fs::path& out) {
    const SimulationConfig& sc = cfg.sim;
    StepTimeModel base;
    base.base_step_time = sc.base_step_time;
    base.straggle_probability = sc.straggle_probability;
    base.straggle_multiplier = sc.straggle_multiplier;
    std::vector<StepTimeModel> models(static_cast<std::size_t>(sc.workers), base);
    for (std::size_t j = 0; j < sc.worker_slowdown.size() && j < models.size(); ++j)
        models[j].slowdown = sc.worker_slowdown[j];

    double comm_per_step = 0.0;
    for (double c : sc.layer_comm) comm_per_step += c;
    SyncPlan plan = layerwise_sync_plan(sc.layer_compute, sc.layer_comm);

    BaselineResult baseline =
        simulate_sync_baseline(models, sc.baseline_steps, comm_per_step, cfg.seed);
    SyncPolicy policy =
        sc.policy == "time" ? SyncPolicy::time_threshold(sc.tau) : SyncPolicy::every_h(sc.h);
    EditSimResult elastic = simulate_edit(models, policy, sc.rounds, plan.overhead(), cfg.seed);

    write_trace_csv(baseline.trace, (out / "baseline_trace.csv").string());
    write_trace_csv(elastic.trace, (out / "edit_trace.csv").string());
    const json summary = {{"workers", sc.workers},
                          {"baseline_throughput", baseline.throughput},
                          {"edit_throughput", elastic.throughput},
                          {"speedup_pct", speedup_ratio(elastic.throughput, baseline.throughput)},
                          {"merge_overhead", plan.overhead()},
                          {"comm_per_step", comm_per_step},
                          {"local_steps", elastic.local_steps}};
    write_text(out / "summary.json", canonical_dump(summary));
    std::cout << canonical_dump(summary);
    return 0;
}

int cmd_fit_scaling(const std::string& csv_path, const std::vector<double>& lever_at,
                    const fs::path& out) {
    std::vector<RunRecord> records = load_run_records_csv(csv_path);
    json report;
    report["n_records"] = records.size();

    for (const std::string metric : {"batch_size", "lr"}) {
        std::vector<std::pair<double, double>> pts;
        for (const RunRecord& r : records)
            if (r.metric == metric) pts.emplace_back(r.compute_flops, r.value);
        if (pts.size() >= 3) report["power_law"][metric] = fit_report_json(fit_power_law(pts));
    }

    std::vector<std::pair<double, double>> moe_pts, dense_pts;
    for (const RunRecord& r : records) {
        if (r.metric != "loss") continue;
        (r.arch == "dense" ? dense_pts : moe_pts).emplace_back(r.compute_flops, r.value);
    }
    LossCurveFit moe_fit, dense_fit;
    bool have_moe = false, have_dense = false;
    if (moe_pts.size() >= 4) {
        moe_fit = fit_loss_curve(moe_pts);
        report["loss_curve"]["moe"] = fit_report_json(moe_fit);
        have_moe = true;
    }
    if (dense_pts.size() >= 4) {
        dense_fit = fit_loss_curve(dense_pts);
        report["loss_curve"]["dense"] = fit_report_json(dense_fit);
        have_dense = true;
    }
    if (have_moe && have_dense) {
        json levers = json::array();
        for (double c : lever_at)
            levers.push_back({{"compute", c}, {"lever", efficiency_lever(moe_fit, dense_fit, c)}});
        report["efficiency_lever"] = levers;
    }
    write_text(out / "fits.json", canonical_dump(report));
    std::cout << canonical_dump(report);
    return 0;
}

int cmd_cost(const std::string& device, double count, double hours, const std::string& device_b,
             double count_b, double hours_b, const std::string& devices_file,
             const fs::path& out) {
    std::vector<DeviceProfile> overrides;
    if (!devices_file.empty()) overrides = load_device_profiles(devices_file);
    const DeviceProfile a = device_profile(device, overrides);
    json summary = {{"device", a.name},
                    {"count", count},
                    {"hours", hours},
                    {"cost_rmb", estimate_cost(a, count, hours)}};
    if (!device_b.empty()) {
        const DeviceProfile b = device_profile(device_b, overrides);
        const double cost_a = estimate_cost(a, count, hours);
        const double cost_b =
            estimate_cost(b, count_b > 0 ? count_b : count, hours_b > 0 ? hours_b : hours);
        summary["compare"] = {{"device", b.name},
                              {"cost_rmb", cost_b},
                              {"savings_pct", compare_cost(cost_a, cost_b)}};
    }
    write_text(out / "cost.json", canonical_dump(summary));
    std::cout << canonical_dump(summary);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"moesim: deterministic MoE training engine and cluster simulator"};
    app.require_subcommand(1);
    app.fallthrough();  // global --config/--seed/--out-dir may follow the subcommand

    std::string config_path, out_dir = ".";
    std::uint64_t seed = 1;
    app.add_option("--config", config_path, "experiment config (JSON)");
    app.add_option("--out-dir", out_dir, "output directory");
    auto* seed_opt = app.add_option("--seed", seed, "seed override");

    auto* grad = app.add_subcommand("grad-check", "finite-difference gradient verification");
    auto* train = app.add_subcommand("train", "single-worker or synchronous training");
    auto* edit = app.add_subcommand("edit-train", "elastic multi-worker training");
    auto* inject = app.add_subcommand("inject-spike", "poisoned-batch spike scenario");
    auto* simulate = app.add_subcommand("simulate-cluster", "throughput simulation");
    auto* fit = app.add_subcommand("fit-scaling", "power-law and loss-curve fits");
    auto* cost = app.add_subcommand("cost", "device cost accounting");

    std::string csv_path;
    std::vector<double> lever_at = {1e21};
    fit->add_option("--csv", csv_path, "run records CSV")->required();
    fit->add_option("--lever-at", lever_at, "compute budgets for the efficiency lever");

    std::string device = "D", device_b, devices_file;
    double count = 1.0, hours = 1.0, count_b = 0.0, hours_b = 0.0;
    cost->add_option("--device", device, "device preset (A-E)");
    cost->add_option("--devices-file", devices_file, "JSON file of profile overrides");
    cost->add_option("--count", count, "device count");
    cost->add_option("--hours", hours, "hours of use");
    cost->add_option("--device2", device_b, "comparison device preset");
    cost->add_option("--count2", count_b, "comparison device count");
    cost->add_option("--hours2", hours_b, "comparison hours");

    CLI11_PARSE(app, argc, argv);
    const bool seed_given = seed_opt->count() > 0;
    const fs::path out(out_dir);

    const auto started = std::chrono::steady_clock::now();
    int rc = 0;
    try {
        fs::create_directories(out);
        if (grad->parsed()) {
            rc = cmd_grad_check(config_path, seed, seed_given, out);
        } else if (train->parsed()) {
            rc = cmd_train(load_or_default(config_path, seed, seed_given), out, false);
        } else if (edit->parsed()) {
            rc = cmd_train(load_or_default(config_path, seed, seed_given), out, true);
        } else if (inject->parsed()) {
            rc = cmd_inject_spike(load_or_default(config_path, seed, seed_given), out);
        } else if (simulate->parsed()) {
            rc = cmd_simulate_cluster(load_or_default(config_path, seed, seed_given), out);
        } else if (fit->parsed()) {
            rc = cmd_fit_scaling(csv_path, lever_at, out);
        } else if (cost->parsed()) {
            rc = cmd_cost(device, count, hours, device_b, count_b, hours_b, devices_file, out);
        }
    } catch (const std::exception& e) {
        const json err = {{"error", {{"type", typeid(e).name()}, {"message", e.what()}}}};
        std::cout << err.dump() << "\n";
        return 1;
    }
    const auto elapsed = std::chrono::duration_cast<std::chrono::milliseconds>(
        std::chrono::steady_clock::now() - started);
    std::cerr << "[moesim] done in " << elapsed.count() << " ms\n";
    return rc;
}
