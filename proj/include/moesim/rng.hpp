#pragma once

// Counter-based seeded randomness. Each (seed, stream_id) pair is an
// independent stream whose n-th draw is a pure function of (seed, stream_id,
// n), so serializing the three integers and restoring them continues the
// exact sequence, and consuming one stream never perturbs another. Streams
// are named per purpose and per worker so that toggling a feature (warmup
// noise, stragglers, re-injection) leaves every other draw untouched.

#include <cstdint>
#include <cmath>

#include "moesim/tensor.hpp"

namespace moesim {

enum class StreamKind : std::uint64_t {
    Data = 1,
    Init = 2,
    RoutingNoise = 3,
    SimTime = 4,
    Reinject = 5,
    Teacher = 6,
};

namespace detail {
// murmur3 fmix64 finalizer; full avalanche on 64 bits.
inline std::uint64_t mix64(std::uint64_t z) {
    z ^= z >> 33;
    z *= 0xff51afd7ed558ccdULL;
    z ^= z >> 33;
    z *= 0xc4ceb9fe1a85ec53ULL;
    z ^= z >> 33;
    return z;
}
}  // namespace detail

struct RngStream {
    std::uint64_t seed = 0;
    std::uint64_t stream_id = 0;
    std::uint64_t counter = 0;

    static RngStream make(std::uint64_t seed, StreamKind kind, std::uint64_t worker = 0) {
        return RngStream{seed, (worker << 8) | static_cast<std::uint64_t>(kind), 0};
    }

    std::uint64_t next_u64() {
        const std::uint64_t key = detail::mix64(seed ^ 0x2545f4914f6cdd1dULL) ^ detail::mix64(stream_id);
        ++counter;
        return detail::mix64(key + 0x9e3779b97f4a7c15ULL * counter);
    }

    /// Uniform in [0, 1) with 53 random bits.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform in the open interval (0, 1); safe for inverse-CDF transforms.
    double next_open01() {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    }

    /// Standard normal via inverse CDF (one counter tick per draw).
    double next_normal() { return inverse_normal_cdf(next_open01()); }

    /// Integer in [0, n).
    std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

    void fill_normal(Tensor& t) {
        for (double& v : t.data) v = next_normal();
    }

    Tensor normal_tensor(std::vector<std::int64_t> shape) {
        Tensor t(std::move(shape));
        fill_normal(t);
        return t;
    }

    // Acklam's rational approximation of the normal quantile (~1.15e-9
    // relative error), enough for routing noise and simulation draws.
    static double inverse_normal_cdf(double p) {
        static constexpr double a[6] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                        -2.759285104469687e+02, 1.383577518672690e+02,
                                        -3.066479806614716e+01, 2.506628277459239e+00};
        static constexpr double b[5] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                        -1.556989798598866e+02, 6.680131188771972e+01,
                                        -1.328068155288572e+01};
        static constexpr double c[6] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                        -2.400758277161838e+00, -2.549732539343734e+00,
                                        4.374664141464968e+00,  2.938163982698783e+00};
        static constexpr double d[4] = {7.784695709041462e-03, 3.224671290700398e-01,
                                        2.445134137142996e+00, 3.754408661907416e+00};
        constexpr double p_low = 0.02425;
        if (p <= 0.0 || p >= 1.0) throw invalid_input("inverse_normal_cdf: p outside (0, 1)");
        if (p < p_low) {
            const double q = std::sqrt(-2.0 * std::log(p));
            return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
                   ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
        }
        if (p > 1.0 - p_low) {
            const double q = std::sqrt(-2.0 * std::log(1.0 - p));
            return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
                   ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
        }
        const double q = p - 0.5;
        const double r = q * q;
        return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
               (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    }
};

}  // namespace moesim
