#pragma once

// Small scalar statistics shared across modules: the EMA mean/deviation
// tracker used for anomaly detection, and robust median/MAD used by the
// loss-spike detector.

#include <algorithm>
#include <cmath>
#include <vector>

#include "moesim/tensor.hpp"

namespace moesim {

struct EmaState {
    double mean = 0.0;
    double deviation = 0.0;
};

/// mean' = decay*mean + (1-decay)*x; deviation tracks |x - mean'| the same way.
inline EmaState ema_update(EmaState state, double x, double decay) {
    if (!(decay > 0.0 && decay < 1.0)) throw invalid_input("ema_update: decay outside (0, 1)");
    EmaState next;
    next.mean = decay * state.mean + (1.0 - decay) * x;
    next.deviation = decay * state.deviation + (1.0 - decay) * std::abs(x - next.mean);
    return next;
}

inline double median(std::vector<double> v) {
    if (v.empty()) throw invalid_input("median: empty input");
    const std::size_t n = v.size();
    std::sort(v.begin(), v.end());
    if (n % 2 == 1) return v[n / 2];
    return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Median absolute deviation about the median (unscaled).
inline double mad(const std::vector<double>& v) {
    const double med = median(v);
    std::vector<double> dev(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) dev[i] = std::abs(v[i] - med);
    return median(std::move(dev));
}

inline double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

/// Population standard deviation.
inline double stddev_of(const std::vector<double>& v) {
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size()));
}

/// Shannon entropy (natural log) of a discrete distribution; 0*log(0) = 0.
inline double entropy(const std::vector<double>& p) {
    double h = 0.0;
    for (double x : p)
        if (x > 0.0) h -= x * std::log(x);
    return h;
}

}  // namespace moesim
