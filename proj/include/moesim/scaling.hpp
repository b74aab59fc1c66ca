#pragma once

// Power-law fitting for scaling studies: y = a * C^b by least squares in
// log-log space for hyper-parameter curves, the saturating loss curve
// L(C) = L0 + a * C^b (b < 0) by profiled nonlinear least squares, and the
// compute-equivalence lever between two loss curves by numeric inversion.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "moesim/tensor.hpp"

#include "json.hpp"

namespace moesim {

/// Thrown when a nonlinear fit cannot be identified from the data.
struct fit_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct RunRecord {
    double compute_flops = 0.0;
    std::string metric;  // "batch_size", "lr", "loss"
    double value = 0.0;
    std::string arch;  // "moe" or "dense"
    double sparsity = 0.0;
};

/// CSV with header compute_flops,metric,value,arch,sparsity.
inline std::vector<RunRecord> parse_run_records_csv(std::istream& in) {
    std::vector<RunRecord> out;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (first) {
            first = false;
            if (line.find("compute_flops") != std::string::npos) continue;  // header
        }
        std::stringstream ss(line);
        std::string field;
        RunRecord r;
        std::getline(ss, field, ',');
        r.compute_flops = std::stod(field);
        std::getline(ss, r.metric, ',');
        std::getline(ss, field, ',');
        r.value = std::stod(field);
        std::getline(ss, r.arch, ',');
        if (std::getline(ss, field, ',')) r.sparsity = std::stod(field);
        out.push_back(std::move(r));
    }
    return out;
}

inline std::vector<RunRecord> load_run_records_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("run records: cannot open " + path);
    return parse_run_records_csv(f);
}

struct PowerLawFit {
    double coefficient = 0.0;  // a
    double exponent = 0.0;     // b
    double residual_rms = 0.0; // in log space

    double predict(double c) const { return coefficient * std::pow(c, exponent); }
};

/// Least squares on (log C, log y). Requires >= 3 points with at least three
/// distinct positive C values and positive y.
inline PowerLawFit fit_power_law(const std::vector<std::pair<double, double>>& points) {
    if (points.size() < 3) throw invalid_input("fit_power_law: need at least 3 records");
    std::vector<double> cs;
    for (const auto& [c, y] : points) {
        if (c <= 0.0 || y <= 0.0) throw invalid_input("fit_power_law: values must be positive");
        cs.push_back(c);
    }
    std::sort(cs.begin(), cs.end());
    if (std::unique(cs.begin(), cs.end()) - cs.begin() < 3)
        throw invalid_input("fit_power_law: need at least 3 distinct compute budgets");

    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    const double n = static_cast<double>(points.size());
    for (const auto& [c, y] : points) {
        const double x = std::log(c), v = std::log(y);
        sx += x;
        sy += v;
        sxx += x * x;
        sxy += x * v;
    }
    PowerLawFit fit;
    fit.exponent = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    const double intercept = (sy - fit.exponent * sx) / n;
    fit.coefficient = std::exp(intercept);
    double sse = 0.0;
    for (const auto& [c, y] : points) {
        const double r = std::log(y) - (intercept + fit.exponent * std::log(c));
        sse += r * r;
    }
    fit.residual_rms = std::sqrt(sse / n);
    return fit;
}

struct LossCurveFit {
    double l0 = 0.0;  // irreducible loss
    double a = 0.0;   // must be positive
    double b = 0.0;   // must be negative
    double residual_rms = 0.0;
    double domain_min = 0.0, domain_max = 0.0;

    double predict(double c) const { return l0 + a * std::pow(c, b); }
};

namespace detail {

// For a fixed exponent b the model is linear in (l0, a); solve the 2x2
// normal equations and return the sum of squared residuals.
struct ProfiledFit {
    double l0 = 0.0, a = 0.0, sse = 1e300;
};

inline ProfiledFit profile_loss_fit(const std::vector<std::pair<double, double>>& pts, double b) {
    const double n = static_cast<double>(pts.size());
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    for (const auto& [c, l] : pts) {
        const double x = std::pow(c, b);
        sx += x;
        sy += l;
        sxx += x * x;
        sxy += x * l;
    }
    const double det = n * sxx - sx * sx;
    ProfiledFit out;
    if (std::abs(det) < 1e-300) return out;
    out.a = (n * sxy - sx * sy) / det;
    out.l0 = (sy - out.a * sx) / n;
    out.sse = 0.0;
    for (const auto& [c, l] : pts) {
        const double r = l - (out.l0 + out.a * std::pow(c, b));
        out.sse += r * r;
    }
    return out;
}

}  // namespace detail

/// Nonlinear least squares for L(C) = L0 + a*C^b with b constrained
/// negative: a deterministic multi-start grid over b followed by golden-
/// section refinement of the profiled objective. Requires >= 4 records
/// spanning at least two decades of compute.
inline LossCurveFit fit_loss_curve(const std::vector<std::pair<double, double>>& points) {
    if (points.size() < 4) throw invalid_input("fit_loss_curve: need at least 4 records");
    double cmin = 1e300, cmax = 0.0;
    for (const auto& [c, l] : points) {
        if (c <= 0.0 || l <= 0.0) throw invalid_input("fit_loss_curve: values must be positive");
        cmin = std::min(cmin, c);
        cmax = std::max(cmax, c);
    }
    if (cmax / cmin < 99.999)
        throw invalid_input("fit_loss_curve: records must span at least two decades of compute");

    // Multi-start: log-spaced |b| grid in [1e-4, 2].
    const int grid = 200;
    double best_b = 0.0;
    detail::ProfiledFit best;
    for (int i = 0; i < grid; ++i) {
        const double t = static_cast<double>(i) / (grid - 1);
        const double b = -std::exp(std::log(1e-4) + t * (std::log(2.0) - std::log(1e-4)));
        detail::ProfiledFit f = detail::profile_loss_fit(points, b);
        if (f.sse < best.sse) {
            best = f;
            best_b = b;
        }
    }
    // Golden-section refinement on log|b| around the best grid cell.
    const double phi = 0.5 * (std::sqrt(5.0) - 1.0);
    double lo = std::log(std::max(std::abs(best_b) / 3.0, 1e-6));
    double hi = std::log(std::min(std::abs(best_b) * 3.0, 4.0));
    double x1 = hi - phi * (hi - lo), x2 = lo + phi * (hi - lo);
    double f1 = detail::profile_loss_fit(points, -std::exp(x1)).sse;
    double f2 = detail::profile_loss_fit(points, -std::exp(x2)).sse;
    for (int it = 0; it < 120; ++it) {
        if (f1 < f2) {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = detail::profile_loss_fit(points, -std::exp(x1)).sse;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = detail::profile_loss_fit(points, -std::exp(x2)).sse;
        }
    }
    const double b = -std::exp(0.5 * (lo + hi));
    detail::ProfiledFit f = detail::profile_loss_fit(points, b);

    LossCurveFit fit;
    fit.b = b;
    fit.a = f.a;
    fit.l0 = f.l0;
    fit.residual_rms = std::sqrt(f.sse / static_cast<double>(points.size()));
    fit.domain_min = cmin;
    fit.domain_max = cmax;
    // The curve must actually decrease over the fitted domain; constant or
    // increasing data cannot identify a negative exponent.
    const double drop = fit.a * (std::pow(cmin, b) - std::pow(cmax, b));
    if (!(fit.a > 0.0) || !(drop > 1e-9 * std::max(1.0, std::abs(fit.l0))))
        throw fit_error("fit_loss_curve: exponent not identifiable (flat or non-decreasing data); "
                        "best b = " + std::to_string(b) + ", a = " + std::to_string(f.a));
    return fit;
}

/// Compute-equivalence lever: lever(C) = C_dense / C where
/// L_dense(C_dense) = L_moe(C). The dense curve is inverted numerically by
/// bisection on its monotone domain to 1e-10 relative tolerance in C.
inline double efficiency_lever(const LossCurveFit& moe, const LossCurveFit& dense, double c) {
    if (c <= 0.0) throw invalid_input("efficiency_lever: compute must be positive");
    const double target = moe.predict(c);
    if (target <= dense.l0)
        throw invalid_input("efficiency_lever: target loss below the dense curve's floor");
    // Bracket: dense.predict is strictly decreasing in C.
    double lo = c, hi = c;
    while (dense.predict(lo) < target) {
        lo /= 8.0;
        if (lo < 1e-30) throw invalid_input("efficiency_lever: cannot bracket target loss");
    }
    while (dense.predict(hi) > target) {
        hi *= 8.0;
        if (hi > 1e60) throw invalid_input("efficiency_lever: cannot bracket target loss");
    }
    while ((hi - lo) / hi > 1e-10) {
        const double mid = std::sqrt(lo * hi);  // bisect in log space
        if (dense.predict(mid) > target)
            lo = mid;
        else
            hi = mid;
    }
    return 0.5 * (lo + hi) / c;
}

inline nlohmann::json fit_report_json(const PowerLawFit& fit) {
    return {{"coefficient", fit.coefficient},
            {"exponent", fit.exponent},
            {"residual_rms_log", fit.residual_rms}};
}

inline nlohmann::json fit_report_json(const LossCurveFit& fit) {
    return {{"l0", fit.l0},
            {"a", fit.a},
            {"b", fit.b},
            {"residual_rms", fit.residual_rms},
            {"domain", {fit.domain_min, fit.domain_max}}};
}

}  // namespace moesim
