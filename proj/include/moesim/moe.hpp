#pragma once

// Mixture-of-experts feed-forward block: linear router with stochastic
// routing warmup, fine-grained routed experts, an optional always-active
// shared expert, an L2-normalized output head, and the two auxiliary router
// losses (load balance, z-loss). Forward and backward passes are analytic;
// every gradient here is validated against the finite-difference oracle in
// gradcheck.hpp.
//
// Routing: p_t = softmax(s_hat_t), the top-k entries of p_t gate the selected
// experts directly (no renormalization of the selected gates). During warmup
// (global step i <= W) the effective logits interpolate between learned
// logits and synthesized random logits matched to the running logit
// statistics:
//     s_hat_t = alpha * s_t + (1 - alpha) * (mu_s + sigma_s * eps),
//     alpha   = min(i / W, 1),   eps ~ N(0, I).
// Routing is dropless: every token is processed by exactly k_top experts.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "moesim/rng.hpp"
#include "moesim/stats.hpp"
#include "moesim/tensor.hpp"

namespace moesim {

struct MoEConfig {
    std::int64_t d_model = 8;
    std::int64_t n_experts = 4;
    std::int64_t k_top = 2;
    std::int64_t d_expert_hidden = 4;
    bool shared_expert = true;
    std::int64_t d_shared_hidden = 8;
    std::int64_t vocab = 16;

    void validate() const {
        if (d_model < 1 || n_experts < 1 || d_expert_hidden < 1 || vocab < 1)
            throw invalid_input("MoEConfig: dimensions must be positive");
        if (k_top < 1 || k_top > n_experts)
            throw invalid_input("MoEConfig: k_top outside [1, n_experts]");
        if (shared_expert && d_shared_hidden < 1)
            throw invalid_input("MoEConfig: d_shared_hidden must be positive");
    }

    /// Fine-grained construction: g times more experts, each g times
    /// narrower, so total routed capacity is unchanged.
    static MoEConfig fine_grained(const MoEConfig& base, std::int64_t g) {
        if (g < 1 || base.d_expert_hidden % g != 0)
            throw invalid_input("fine_grained: granularity must divide the base hidden width");
        MoEConfig c = base;
        c.n_experts = base.n_experts * g;
        c.d_expert_hidden = base.d_expert_hidden / g;
        return c;
    }

    std::int64_t routed_param_count() const { return n_experts * 2 * d_model * d_expert_hidden; }
};

/// Two-matrix feed-forward unit with a sigmoid-weighted (silu) activation:
/// E(h) = silu(h W_in) W_out.
struct ExpertParams {
    Tensor w_in;   // [d_model, d_hidden]
    Tensor w_out;  // [d_hidden, d_model]
};

struct RouterState {
    Tensor w_router;  // [d_model, n_experts]
    double mu_s = 0.0;
    double sigma_s = 1.0;
    std::int64_t warmup_horizon = 0;  // W; 0 disables warmup (alpha = 1)
    std::int64_t global_step = 0;     // i
    double stats_decay = 0.99;        // EMA cadence for mu_s / sigma_s

    double alpha() const {
        if (global_step < 0) throw invalid_input("RouterState: negative global step");
        if (warmup_horizon <= 0 || global_step >= warmup_horizon) return 1.0;
        return static_cast<double>(global_step) / static_cast<double>(warmup_horizon);
    }
};

struct MoEParams {
    MoEConfig config;
    RouterState router;
    std::vector<ExpertParams> experts;
    ExpertParams shared;
    Tensor w_lm;  // [vocab, d_model]

    static MoEParams init(const MoEConfig& cfg, RngStream& rng, double init_scale = 0.4) {
        cfg.validate();
        MoEParams p;
        p.config = cfg;
        auto draw = [&](std::vector<std::int64_t> shape, double scale) {
            Tensor t = rng.normal_tensor(std::move(shape));
            for (double& v : t.data) v *= scale;
            return t;
        };
        const double s_in = init_scale / std::sqrt(static_cast<double>(cfg.d_model));
        p.router.w_router = draw({cfg.d_model, cfg.n_experts}, s_in);
        p.experts.resize(static_cast<std::size_t>(cfg.n_experts));
        for (auto& e : p.experts) {
            e.w_in = draw({cfg.d_model, cfg.d_expert_hidden}, s_in);
            e.w_out = draw({cfg.d_expert_hidden, cfg.d_model},
                           init_scale / std::sqrt(static_cast<double>(cfg.d_expert_hidden)));
        }
        if (cfg.shared_expert) {
            p.shared.w_in = draw({cfg.d_model, cfg.d_shared_hidden}, s_in);
            p.shared.w_out = draw({cfg.d_shared_hidden, cfg.d_model},
                                  init_scale / std::sqrt(static_cast<double>(cfg.d_shared_hidden)));
        }
        p.w_lm = draw({cfg.vocab, cfg.d_model}, s_in);
        return p;
    }

    /// Canonical tensor order; checkpoints, optimizer state and pseudo-
    /// gradients all follow it.
    void for_each_tensor(const std::function<void(const std::string&, Tensor&)>& fn) {
        fn("router.w", router.w_router);
        for (std::size_t i = 0; i < experts.size(); ++i) {
            fn("expert." + std::to_string(i) + ".w_in", experts[i].w_in);
            fn("expert." + std::to_string(i) + ".w_out", experts[i].w_out);
        }
        if (config.shared_expert) {
            fn("shared.w_in", shared.w_in);
            fn("shared.w_out", shared.w_out);
        }
        fn("lm_head.w", w_lm);
    }

    std::vector<Tensor*> tensors() {
        std::vector<Tensor*> out;
        for_each_tensor([&](const std::string&, Tensor& t) { out.push_back(&t); });
        return out;
    }

    std::vector<std::string> tensor_names() {
        std::vector<std::string> out;
        for_each_tensor([&](const std::string& n, Tensor&) { out.push_back(n); });
        return out;
    }
};

struct AuxLossReport {
    double balance_loss = 0.0;
    double z_loss = 0.0;
    Tensor expert_load;  // [n_experts], fraction of token-slots per expert
    Tensor mean_gate;    // [n_experts], mean softmax probability per expert
};

struct RouteResult {
    Tensor logits_raw;  // s_t = h W_r            [T, N]
    Tensor logits_eff;  // s_hat_t after warmup mix [T, N]
    Tensor p;           // softmax(s_hat)          [T, N]
    Tensor gates;       // p at selected indices   [T, k]
    std::vector<std::vector<std::int64_t>> indices;  // [T][k]
    double alpha = 1.0;
    Tensor eps;  // noise actually used; empty when alpha == 1
};

namespace detail {
inline double silu(double x) {
    const double s = 1.0 / (1.0 + std::exp(-x));
    return x * s;
}
inline double silu_grad(double x) {
    const double s = 1.0 / (1.0 + std::exp(-x));
    return s * (1.0 + x * (1.0 - s));
}
}  // namespace detail

/// Pure routing given an explicit noise tensor (empty when alpha == 1).
/// Does not touch the running logit statistics.
inline RouteResult route_with_noise(const Tensor& h, const RouterState& state, const Tensor& eps,
                                    std::int64_t k_top) {
    if (h.ndim() != 2) throw invalid_input("route: h must be [T, d_model]");
    RouteResult r;
    r.alpha = state.alpha();
    r.logits_raw = matmul(h, state.w_router);
    if (r.alpha >= 1.0) {
        r.logits_eff = r.logits_raw;
    } else {
        check_same_shape(eps, r.logits_raw, "route: noise");
        r.logits_eff = Tensor(r.logits_raw.shape);
        for (std::size_t i = 0; i < r.logits_eff.data.size(); ++i)
            r.logits_eff.data[i] = r.alpha * r.logits_raw.data[i] +
                                   (1.0 - r.alpha) * (state.mu_s + state.sigma_s * eps.data[i]);
        r.eps = eps;
    }
    r.p = softmax(r.logits_eff);
    const std::int64_t tokens = h.rows();
    r.gates = Tensor({tokens, k_top});
    r.indices.assign(static_cast<std::size_t>(tokens), {});
    for (std::int64_t t = 0; t < tokens; ++t) {
        auto sel = topk_row(r.p, t, k_top);
        auto& row = r.indices[static_cast<std::size_t>(t)];
        row.resize(static_cast<std::size_t>(k_top));
        for (std::int64_t j = 0; j < k_top; ++j) {
            row[static_cast<std::size_t>(j)] = sel[static_cast<std::size_t>(j)].first;
            r.gates(t, j) = sel[static_cast<std::size_t>(j)].second;
        }
    }
    return r;
}

/// Routing with warmup-noise draws from the routing-noise stream. When
/// alpha < 1, draws one normal per token per expert (row-major); at
/// alpha == 1 the stream is left untouched and s_hat is exactly s. Updates
/// the running logit statistics while the warmup phase lasts (i <= W).
inline RouteResult route(const Tensor& h, RouterState& state, RngStream& rng, std::int64_t k_top) {
    Tensor eps;
    if (state.alpha() < 1.0) eps = rng.normal_tensor({h.rows(), state.w_router.cols()});
    RouteResult r = route_with_noise(h, state, eps, k_top);
    if (state.global_step <= state.warmup_horizon && state.warmup_horizon > 0) {
        const double m = mean_of(r.logits_raw.data);
        const double sd = stddev_of(r.logits_raw.data);
        state.mu_s = state.stats_decay * state.mu_s + (1.0 - state.stats_decay) * m;
        state.sigma_s = state.stats_decay * state.sigma_s + (1.0 - state.stats_decay) * sd;
    }
    return r;
}

/// Switch-style load balance loss: N * sum_i f_i * P_i with f_i the fraction
/// of token-slots routed to expert i and P_i the mean gate probability.
/// Equals 1 at perfectly uniform routing.
inline double balance_loss(const Tensor& p, const std::vector<std::vector<std::int64_t>>& indices) {
    const std::int64_t tokens = p.rows();
    const std::int64_t n = p.cols();
    if (tokens < 1) throw invalid_input("balance_loss: empty batch");
    const std::int64_t k = static_cast<std::int64_t>(indices.empty() ? 0 : indices[0].size());
    std::vector<double> f(static_cast<std::size_t>(n), 0.0);
    for (const auto& row : indices)
        for (std::int64_t e : row) f[static_cast<std::size_t>(e)] += 1.0;
    const double slots = static_cast<double>(tokens * k);
    for (double& x : f) x /= slots;
    double loss = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        double col = 0.0;
        for (std::int64_t t = 0; t < tokens; ++t) col += p(t, i);
        loss += f[static_cast<std::size_t>(i)] * (col / static_cast<double>(tokens));
    }
    return static_cast<double>(n) * loss;
}

/// Router z-loss: mean squared logsumexp of the effective routing logits.
inline double z_loss(const Tensor& logits_eff) {
    const std::int64_t tokens = logits_eff.rows();
    auto lse = logsumexp_rows(logits_eff);
    double s = 0.0;
    for (double v : lse) s += v * v;
    return s / static_cast<double>(tokens);
}

struct MoeForwardCache {
    bool valid = false;
    double alpha = 1.0;
    Tensor h;
    RouteResult routing;
    Tensor u_sel, a_sel, y_sel;  // [T, k, d_hidden] x2, [T, k, d_model]
    Tensor u_sh, a_sh;           // [T, d_shared_hidden]
    Tensor output;               // o'_t [T, d_model]
};

struct MoeForwardResult {
    Tensor output;  // o'_t
    AuxLossReport report;
    MoeForwardCache cache;
};

namespace detail {
inline void throw_if_not_finite(const Tensor& t, const char* where) {
    if (!t.all_finite())
        throw numeric_error(std::string("moe_forward: non-finite activation in ") + where);
}
}  // namespace detail

/// Forward pass with an explicit noise tensor; pure (no state mutation), so
/// the finite-difference oracle can re-evaluate it freely.
inline MoeForwardResult moe_forward_with_noise(const Tensor& h, const MoEParams& params,
                                               const Tensor& eps) {
    const MoEConfig& cfg = params.config;
    if (h.ndim() != 2 || h.cols() != cfg.d_model)
        throw invalid_input("moe_forward: h must be [T, d_model]");
    detail::throw_if_not_finite(h, "input");
    const std::int64_t tokens = h.rows();
    const std::int64_t k = cfg.k_top;

    MoeForwardResult out;
    MoeForwardCache& c = out.cache;
    c.h = h;
    c.routing = route_with_noise(h, params.router, eps, k);
    c.alpha = c.routing.alpha;
    detail::throw_if_not_finite(c.routing.logits_eff, "router logits");

    c.u_sel = Tensor({tokens, k, cfg.d_expert_hidden});
    c.a_sel = Tensor({tokens, k, cfg.d_expert_hidden});
    c.y_sel = Tensor({tokens, k, cfg.d_model});
    Tensor o({tokens, cfg.d_model});

    const std::int64_t dh = cfg.d_expert_hidden;
    const std::int64_t d = cfg.d_model;
    for (std::int64_t t = 0; t < tokens; ++t) {
        const double* ht = &h.data[static_cast<std::size_t>(t * d)];
        for (std::int64_t j = 0; j < k; ++j) {
            const std::int64_t e = c.routing.indices[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)];
            const ExpertParams& ex = params.experts[static_cast<std::size_t>(e)];
            double* u = &c.u_sel.data[static_cast<std::size_t>((t * k + j) * dh)];
            double* a = &c.a_sel.data[static_cast<std::size_t>((t * k + j) * dh)];
            double* y = &c.y_sel.data[static_cast<std::size_t>((t * k + j) * d)];
            for (std::int64_t r = 0; r < dh; ++r) {
                double s = 0.0;
                for (std::int64_t cidx = 0; cidx < d; ++cidx) s += ht[cidx] * ex.w_in(cidx, r);
                u[r] = s;
                a[r] = detail::silu(s);
            }
            for (std::int64_t cidx = 0; cidx < d; ++cidx) {
                double s = 0.0;
                for (std::int64_t r = 0; r < dh; ++r) s += a[r] * ex.w_out(r, cidx);
                y[cidx] = s;
            }
            const double gate = c.routing.gates(t, j);
            double* orow = &o.data[static_cast<std::size_t>(t * d)];
            for (std::int64_t cidx = 0; cidx < d; ++cidx) orow[cidx] += gate * y[cidx];
        }
    }
    detail::throw_if_not_finite(o, "routed experts");

    if (cfg.shared_expert) {
        c.u_sh = matmul(h, params.shared.w_in);
        c.a_sh = c.u_sh;
        for (double& v : c.a_sh.data) v = detail::silu(v);
        Tensor y_sh = matmul(c.a_sh, params.shared.w_out);
        detail::throw_if_not_finite(y_sh, "shared expert");
        o = add(o, y_sh);
    }

    out.output = o;
    c.output = o;
    c.valid = true;

    out.report.balance_loss = balance_loss(c.routing.p, c.routing.indices);
    out.report.z_loss = z_loss(c.routing.logits_eff);
    out.report.expert_load = Tensor({cfg.n_experts});
    out.report.mean_gate = Tensor({cfg.n_experts});
    for (const auto& row : c.routing.indices)
        for (std::int64_t e : row) out.report.expert_load[e] += 1.0;
    for (double& v : out.report.expert_load.data) v /= static_cast<double>(tokens * k);
    for (std::int64_t i = 0; i < cfg.n_experts; ++i) {
        double col = 0.0;
        for (std::int64_t t = 0; t < tokens; ++t) col += c.routing.p(t, i);
        out.report.mean_gate[i] = col / static_cast<double>(tokens);
    }
    return out;
}

/// Stateful forward: draws warmup noise from the routing-noise stream and
/// updates the running logit statistics during warmup.
inline MoeForwardResult moe_forward(const Tensor& h, MoEParams& params, RngStream& rng) {
    Tensor eps;
    if (params.router.alpha() < 1.0)
        eps = rng.normal_tensor({h.rows(), params.config.n_experts});
    MoeForwardResult out = moe_forward_with_noise(h, params, eps);
    RouterState& st = params.router;
    if (st.warmup_horizon > 0 && st.global_step <= st.warmup_horizon) {
        const double m = mean_of(out.cache.routing.logits_raw.data);
        const double sd = stddev_of(out.cache.routing.logits_raw.data);
        st.mu_s = st.stats_decay * st.mu_s + (1.0 - st.stats_decay) * m;
        st.sigma_s = st.stats_decay * st.sigma_s + (1.0 - st.stats_decay) * sd;
    }
    return out;
}

struct MoEGrads {
    Tensor d_w_router;
    std::vector<ExpertParams> d_experts;  // same shapes as params.experts
    ExpertParams d_shared;
    Tensor d_h;

    std::vector<Tensor*> tensors(bool shared_expert) {
        std::vector<Tensor*> out{&d_w_router};
        for (auto& e : d_experts) {
            out.push_back(&e.w_in);
            out.push_back(&e.w_out);
        }
        if (shared_expert) {
            out.push_back(&d_shared.w_in);
            out.push_back(&d_shared.w_out);
        }
        return out;
    }
};

/// Backward pass for task_loss + lambda_bal * L_bal + lambda_z * L_z given
/// the upstream gradient dL_task/d(output). Gradient flows through the
/// selected gates and the softmax normalizer; the top-k selection itself and
/// the load fractions f_i are treated as locally constant, and the warmup
/// noise term is a constant (running statistics are not differentiated).
/// The cache is consumed: a second backward on it is rejected as stale.
inline MoEGrads moe_backward(const MoEParams& params, MoeForwardCache& cache,
                             const Tensor& upstream, double lambda_bal = 0.0,
                             double lambda_z = 0.0) {
    const MoEConfig& cfg = params.config;
    if (!cache.valid) throw invalid_input("moe_backward: stale or unset forward cache");
    if (cache.h.cols() != cfg.d_model ||
        cache.routing.p.cols() != cfg.n_experts)
        throw invalid_input("moe_backward: cache does not match params");
    check_same_shape(upstream, cache.output, "moe_backward: upstream");
    cache.valid = false;

    const std::int64_t tokens = cache.h.rows();
    const std::int64_t d = cfg.d_model;
    const std::int64_t dh = cfg.d_expert_hidden;
    const std::int64_t n = cfg.n_experts;
    const std::int64_t k = cfg.k_top;

    MoEGrads g;
    g.d_w_router = Tensor({d, n});
    g.d_experts.resize(static_cast<std::size_t>(n));
    for (std::int64_t e = 0; e < n; ++e) {
        g.d_experts[static_cast<std::size_t>(e)].w_in = Tensor({d, dh});
        g.d_experts[static_cast<std::size_t>(e)].w_out = Tensor({dh, d});
    }
    g.d_h = Tensor({tokens, d});

    // dL/dp: task term through the selected gates, balance term through P_i.
    Tensor dp({tokens, n});
    if (lambda_bal != 0.0) {
        std::vector<double> f(static_cast<std::size_t>(n), 0.0);
        for (const auto& row : cache.routing.indices)
            for (std::int64_t e : row) f[static_cast<std::size_t>(e)] += 1.0;
        for (double& x : f) x /= static_cast<double>(tokens * k);
        for (std::int64_t t = 0; t < tokens; ++t)
            for (std::int64_t i = 0; i < n; ++i)
                dp(t, i) = lambda_bal * static_cast<double>(n) * f[static_cast<std::size_t>(i)] /
                           static_cast<double>(tokens);
    }

    for (std::int64_t t = 0; t < tokens; ++t) {
        const double* gt = &upstream.data[static_cast<std::size_t>(t * d)];
        const double* ht = &cache.h.data[static_cast<std::size_t>(t * d)];
        double* dht = &g.d_h.data[static_cast<std::size_t>(t * d)];
        for (std::int64_t j = 0; j < k; ++j) {
            const std::int64_t e = cache.routing.indices[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)];
            const ExpertParams& ex = params.experts[static_cast<std::size_t>(e)];
            ExpertParams& dex = g.d_experts[static_cast<std::size_t>(e)];
            const double gate = cache.routing.gates(t, j);
            const double* u = &cache.u_sel.data[static_cast<std::size_t>((t * k + j) * dh)];
            const double* a = &cache.a_sel.data[static_cast<std::size_t>((t * k + j) * dh)];
            const double* y = &cache.y_sel.data[static_cast<std::size_t>((t * k + j) * d)];

            double dgate = 0.0;
            for (std::int64_t cidx = 0; cidx < d; ++cidx) dgate += gt[cidx] * y[cidx];
            dp(t, e) += dgate;

            // dy = gate * upstream; back through w_out, silu, w_in.
            for (std::int64_t r = 0; r < dh; ++r) {
                double da = 0.0;
                for (std::int64_t cidx = 0; cidx < d; ++cidx) {
                    const double dy = gate * gt[cidx];
                    dex.w_out(r, cidx) += a[r] * dy;
                    da += dy * ex.w_out(r, cidx);
                }
                const double du = da * detail::silu_grad(u[r]);
                for (std::int64_t cidx = 0; cidx < d; ++cidx) {
                    dex.w_in(cidx, r) += ht[cidx] * du;
                    dht[cidx] += du * ex.w_in(cidx, r);
                }
            }
        }
    }

    if (cfg.shared_expert) {
        // Same block without a gate.
        Tensor da = matmul_nt(upstream, params.shared.w_out);  // [T, dsh]
        Tensor du = da;
        for (std::size_t i = 0; i < du.data.size(); ++i)
            du.data[i] *= detail::silu_grad(cache.u_sh.data[i]);
        g.d_shared.w_out = matmul_tn(cache.a_sh, upstream);
        g.d_shared.w_in = matmul_tn(cache.h, du);
        Tensor dh_shared = matmul_nt(du, params.shared.w_in);
        axpy(1.0, dh_shared, g.d_h);
    } else {
        g.d_shared.w_in = Tensor({1});
        g.d_shared.w_out = Tensor({1});
    }

    // Softmax backward: ds_hat = p .* (dp - <dp, p>), plus the z-loss term
    // applied directly to s_hat.
    Tensor ds_hat({tokens, n});
    std::vector<double> lse;
    if (lambda_z != 0.0) lse = logsumexp_rows(cache.routing.logits_eff);
    for (std::int64_t t = 0; t < tokens; ++t) {
        double inner = 0.0;
        for (std::int64_t i = 0; i < n; ++i) inner += dp(t, i) * cache.routing.p(t, i);
        for (std::int64_t i = 0; i < n; ++i) {
            double v = cache.routing.p(t, i) * (dp(t, i) - inner);
            if (lambda_z != 0.0)
                v += lambda_z * (2.0 / static_cast<double>(tokens)) *
                     lse[static_cast<std::size_t>(t)] * cache.routing.p(t, i);
            ds_hat(t, i) = v;
        }
    }

    // Through the warmup mix: ds = alpha * ds_hat.
    if (cache.alpha != 0.0) {
        Tensor ds = cache.alpha == 1.0 ? ds_hat : scale(ds_hat, cache.alpha);
        g.d_w_router = matmul_tn(cache.h, ds);
        Tensor dh_router = matmul_nt(ds, params.router.w_router);
        axpy(1.0, dh_router, g.d_h);
    }
    return g;
}

// ---- NormHead ----

/// logits[t][v] = <h_t, w_v / ||w_v||>. Row norms must be nonzero.
inline Tensor normhead_forward(const Tensor& h, const Tensor& w_lm) {
    if (h.ndim() != 2 || w_lm.ndim() != 2 || h.cols() != w_lm.cols())
        throw invalid_input("normhead: shape mismatch");
    const std::int64_t vocab = w_lm.rows();
    Tensor wn = w_lm;
    for (std::int64_t v = 0; v < vocab; ++v) {
        double r = 0.0;
        for (std::int64_t c = 0; c < w_lm.cols(); ++c) r += w_lm(v, c) * w_lm(v, c);
        r = std::sqrt(r);
        if (!(r > 0.0)) throw invalid_input("normhead: zero-norm head row");
        for (std::int64_t c = 0; c < w_lm.cols(); ++c) wn(v, c) /= r;
    }
    return matmul_nt(h, wn);
}

struct NormHeadGrads {
    Tensor d_h;
    Tensor d_w_lm;
};

inline NormHeadGrads normhead_backward(const Tensor& h, const Tensor& w_lm,
                                       const Tensor& d_logits) {
    const std::int64_t tokens = h.rows();
    const std::int64_t vocab = w_lm.rows();
    const std::int64_t d = h.cols();
    NormHeadGrads g;
    g.d_h = Tensor({tokens, d});
    g.d_w_lm = Tensor({vocab, d});
    for (std::int64_t v = 0; v < vocab; ++v) {
        double r2 = 0.0;
        for (std::int64_t c = 0; c < d; ++c) r2 += w_lm(v, c) * w_lm(v, c);
        const double r = std::sqrt(r2);
        for (std::int64_t t = 0; t < tokens; ++t) {
            const double dl = d_logits(t, v);
            if (dl == 0.0) continue;
            double logit = 0.0;
            for (std::int64_t c = 0; c < d; ++c) logit += h(t, c) * w_lm(v, c);
            logit /= r;
            for (std::int64_t c = 0; c < d; ++c) {
                const double wn = w_lm(v, c) / r;
                g.d_h(t, c) += dl * wn;
                g.d_w_lm(v, c) += dl * (h(t, c) - logit * wn) / r;
            }
        }
    }
    return g;
}

// ---- routing diagnostics ----

struct LoadStats {
    Tensor load;  // [n_experts]
    double max_min_ratio = 1.0;
    double entropy = 0.0;
};

/// Empirical routing fractions over a window of selections plus balance
/// diagnostics. Ratio is +inf when some expert received nothing.
inline LoadStats expert_load_stats(const std::vector<std::vector<std::int64_t>>& selections,
                                   std::int64_t n_experts) {
    if (selections.empty()) throw invalid_input("expert_load_stats: empty window");
    LoadStats s;
    s.load = Tensor({n_experts});
    double total = 0.0;
    for (const auto& row : selections)
        for (std::int64_t e : row) {
            s.load[e] += 1.0;
            total += 1.0;
        }
    for (double& v : s.load.data) v /= total;
    double mn = s.load[0], mx = s.load[0];
    for (double v : s.load.data) {
        mn = std::min(mn, v);
        mx = std::max(mx, v);
    }
    s.max_min_ratio = mn > 0.0 ? mx / mn : std::numeric_limits<double>::infinity();
    s.entropy = moesim::entropy(s.load.data);
    return s;
}

}  // namespace moesim
