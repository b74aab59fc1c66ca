#include <gtest/gtest.h>

#include <cmath>

#include "moesim/gradcheck.hpp"
#include "moesim/loss.hpp"
#include "moesim/moe.hpp"
#include "moesim/rng.hpp"

using namespace moesim;

namespace {

MoEConfig small_config() {
    MoEConfig cfg;
    cfg.d_model = 8;
    cfg.n_experts = 4;
    cfg.k_top = 2;
    cfg.d_expert_hidden = 4;
    cfg.shared_expert = true;
    cfg.d_shared_hidden = 6;
    cfg.vocab = 7;
    return cfg;
}

MoEParams make_params(const MoEConfig& cfg, std::uint64_t seed) {
    RngStream rng = RngStream::make(seed, StreamKind::Init);
    return MoEParams::init(cfg, rng);
}

/// Direct evaluation of one expert on one token, independent of the layer's
/// batched loops.
std::vector<double> eval_expert(const ExpertParams& ex, const Tensor& h, std::int64_t t) {
    const std::int64_t d = h.cols();
    const std::int64_t dh = ex.w_in.cols();
    std::vector<double> hidden(static_cast<std::size_t>(dh), 0.0);
    for (std::int64_t r = 0; r < dh; ++r) {
        double s = 0.0;
        for (std::int64_t c = 0; c < d; ++c) s += h(t, c) * ex.w_in(c, r);
        const double sig = 1.0 / (1.0 + std::exp(-s));
        hidden[static_cast<std::size_t>(r)] = s * sig;
    }
    std::vector<double> out(static_cast<std::size_t>(d), 0.0);
    for (std::int64_t c = 0; c < d; ++c) {
        double s = 0.0;
        for (std::int64_t r = 0; r < dh; ++r) s += hidden[static_cast<std::size_t>(r)] * ex.w_out(r, c);
        out[static_cast<std::size_t>(c)] = s;
    }
    return out;
}

// Total training loss as a pure scalar function of the parameters, used by
// the finite-difference oracle. Noise and labels are held fixed.
double total_loss(const MoEParams& params, const Tensor& h, const std::vector<std::int64_t>& labels,
                  const Tensor& eps, double lambda_bal, double lambda_z) {
    MoeForwardResult fwd = moe_forward_with_noise(h, params, eps);
    Tensor logits = normhead_forward(fwd.output, params.w_lm);
    LossValueGrad ce = softmax_cross_entropy(logits, labels);
    return ce.value + lambda_bal * fwd.report.balance_loss + lambda_z * fwd.report.z_loss;
}

struct AnalyticGrads {
    MoEGrads moe;
    Tensor d_w_lm;
};

AnalyticGrads analytic_grads(const MoEParams& params, const Tensor& h,
                             const std::vector<std::int64_t>& labels, const Tensor& eps,
                             double lambda_bal, double lambda_z) {
    MoeForwardResult fwd = moe_forward_with_noise(h, params, eps);
    Tensor logits = normhead_forward(fwd.output, params.w_lm);
    LossValueGrad ce = softmax_cross_entropy(logits, labels);
    NormHeadGrads head = normhead_backward(fwd.output, params.w_lm, ce.grad);
    AnalyticGrads g;
    g.moe = moe_backward(params, fwd.cache, head.d_h, lambda_bal, lambda_z);
    g.d_w_lm = head.d_w_lm;
    return g;
}

/// Smallest per-token gap between the k-th and (k+1)-th routing probability;
/// finite differences are only meaningful when the selection cannot flip.
double selection_margin(const MoEParams& params, const Tensor& h, const Tensor& eps) {
    RouteResult r = route_with_noise(h, params.router, eps, params.config.k_top);
    double margin = 1.0;
    for (std::int64_t t = 0; t < h.rows(); ++t) {
        auto sorted = topk_row(r.p, t, params.config.n_experts);
        margin = std::min(margin, sorted[static_cast<std::size_t>(params.config.k_top - 1)].second -
                                      sorted[static_cast<std::size_t>(params.config.k_top)].second);
    }
    return margin;
}

}  // namespace

TEST(Route, FullyRandomAtStepZero) {
    MoEConfig cfg = small_config();
    MoEParams a = make_params(cfg, 1);
    MoEParams b = make_params(cfg, 2);  // different learned router
    a.router.warmup_horizon = b.router.warmup_horizon = 100;
    a.router.global_step = b.router.global_step = 0;
    a.router.mu_s = b.router.mu_s = 0.3;
    a.router.sigma_s = b.router.sigma_s = 0.7;
    RngStream noise = RngStream::make(9, StreamKind::RoutingNoise);
    Tensor h = RngStream::make(5, StreamKind::Data).normal_tensor({6, cfg.d_model});
    Tensor eps = noise.normal_tensor({6, cfg.n_experts});
    RouteResult ra = route_with_noise(h, a.router, eps, cfg.k_top);
    RouteResult rb = route_with_noise(h, b.router, eps, cfg.k_top);
    // alpha = 0: effective logits are mu + sigma*eps regardless of weights.
    for (std::size_t i = 0; i < ra.logits_eff.data.size(); ++i) {
        EXPECT_DOUBLE_EQ(ra.logits_eff.data[i], rb.logits_eff.data[i]);
        EXPECT_DOUBLE_EQ(ra.logits_eff.data[i], 0.3 + 0.7 * eps.data[i]);
    }
}

TEST(Route, WarmupCompleteIsBitwiseLearnedRouting) {
    MoEConfig cfg = small_config();
    MoEParams p = make_params(cfg, 3);
    p.router.warmup_horizon = 10;
    p.router.global_step = 10;  // i >= W
    RngStream noise = RngStream::make(4, StreamKind::RoutingNoise);
    const std::uint64_t counter_before = noise.counter;
    Tensor h = RngStream::make(6, StreamKind::Data).normal_tensor({5, cfg.d_model});
    RouteResult r = route(h, p.router, noise, cfg.k_top);
    EXPECT_EQ(noise.counter, counter_before);  // no draws consumed
    Tensor s = matmul(h, p.router.w_router);
    for (std::size_t i = 0; i < s.data.size(); ++i)
        EXPECT_EQ(r.logits_eff.data[i], s.data[i]);  // bitwise
    EXPECT_DOUBLE_EQ(r.alpha, 1.0);
}

TEST(Route, DegenerateNoiseGivesUniformGatesAndTieRule) {
    MoEConfig cfg = small_config();
    MoEParams p = make_params(cfg, 7);
    p.router.warmup_horizon = 50;
    p.router.global_step = 0;
    p.router.mu_s = 0.0;
    p.router.sigma_s = 0.0;
    RngStream noise = RngStream::make(8, StreamKind::RoutingNoise);
    Tensor h = RngStream::make(6, StreamKind::Data).normal_tensor({3, cfg.d_model});
    RouteResult r = route(h, p.router, noise, cfg.k_top);
    for (std::int64_t t = 0; t < 3; ++t) {
        for (std::int64_t j = 0; j < cfg.k_top; ++j) {
            EXPECT_NEAR(r.gates(t, j), 1.0 / static_cast<double>(cfg.n_experts), 1e-15);
            EXPECT_EQ(r.indices[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)], j);
        }
    }
}

TEST(Route, NegativeStepRejected) {
    MoEConfig cfg = small_config();
    MoEParams p = make_params(cfg, 7);
    p.router.global_step = -1;
    RngStream noise = RngStream::make(8, StreamKind::RoutingNoise);
    Tensor h({1, cfg.d_model});
    EXPECT_THROW(route(h, p.router, noise, cfg.k_top), invalid_input);
}

TEST(Route, AlphaMonotoneAndExactAtHorizon) {
    RouterState st;
    st.w_router = Tensor({2, 2});
    st.warmup_horizon = 8;
    double prev = -1.0;
    for (std::int64_t i = 0; i <= 12; ++i) {
        st.global_step = i;
        const double a = st.alpha();
        EXPECT_GE(a, prev);
        prev = a;
        if (i >= 8) EXPECT_DOUBLE_EQ(a, 1.0);
    }
    st.warmup_horizon = 0;
    st.global_step = 0;
    EXPECT_DOUBLE_EQ(st.alpha(), 1.0);  // W = 0 means no warmup
}

TEST(Route, WarmupLoadApproximatelyUniform) {
    // alpha = 0 with sigma > 0: each expert's empirical load within +-20% of
    // 1/N over at least 1e5 token-slots.
    MoEConfig cfg = small_config();
    cfg.n_experts = 8;
    cfg.k_top = 2;
    MoEParams p = make_params(cfg, 11);
    p.router.warmup_horizon = 1000;
    p.router.global_step = 0;
    p.router.mu_s = 0.0;
    p.router.sigma_s = 1.0;
    RngStream noise = RngStream::make(21, StreamKind::RoutingNoise);
    RngStream data = RngStream::make(22, StreamKind::Data);
    std::vector<double> slots(static_cast<std::size_t>(cfg.n_experts), 0.0);
    const std::int64_t batches = 200, tokens = 256;  // 200*256*2 > 1e5 slots
    for (std::int64_t b = 0; b < batches; ++b) {
        Tensor h = data.normal_tensor({tokens, cfg.d_model});
        Tensor eps = noise.normal_tensor({tokens, cfg.n_experts});
        RouteResult r = route_with_noise(h, p.router, eps, cfg.k_top);
        for (const auto& row : r.indices)
            for (std::int64_t e : row) slots[static_cast<std::size_t>(e)] += 1.0;
    }
    const double total = static_cast<double>(batches * tokens * cfg.k_top);
    const double uniform = 1.0 / static_cast<double>(cfg.n_experts);
    for (double c : slots) {
        const double load = c / total;
        EXPECT_GT(load, 0.8 * uniform);
        EXPECT_LT(load, 1.2 * uniform);
    }
}

TEST(Route, StatsUpdatedOnlyDuringWarmup) {
    MoEConfig cfg = small_config();
    MoEParams p = make_params(cfg, 13);
    p.router.warmup_horizon = 5;
    p.router.global_step = 2;
    RngStream noise = RngStream::make(2, StreamKind::RoutingNoise);
    Tensor h = RngStream::make(1, StreamKind::Data).normal_tensor({4, cfg.d_model});
    const double mu0 = p.router.mu_s;
    route(h, p.router, noise, cfg.k_top);
    EXPECT_NE(p.router.mu_s, mu0);
    EXPECT_GE(p.router.sigma_s, 0.0);
    p.router.global_step = 6;  // past horizon: frozen
    const double mu1 = p.router.mu_s, sg1 = p.router.sigma_s;
    route(h, p.router, noise, cfg.k_top);
    EXPECT_EQ(p.router.mu_s, mu1);
    EXPECT_EQ(p.router.sigma_s, sg1);
}

TEST(MoeForward, DenseMixtureOracleWhenKEqualsN) {
    MoEConfig cfg = small_config();
    cfg.k_top = cfg.n_experts;
    MoEParams p = make_params(cfg, 17);
    Tensor h = RngStream::make(18, StreamKind::Data).normal_tensor({5, cfg.d_model});
    RngStream noise = RngStream::make(19, StreamKind::RoutingNoise);
    MoeForwardResult fwd = moe_forward(h, p, noise);
    Tensor s = matmul(h, p.router.w_router);
    Tensor prob = softmax(s);
    for (std::int64_t t = 0; t < 5; ++t) {
        std::vector<double> want(static_cast<std::size_t>(cfg.d_model), 0.0);
        for (std::int64_t e = 0; e < cfg.n_experts; ++e) {
            auto y = eval_expert(p.experts[static_cast<std::size_t>(e)], h, t);
            for (std::int64_t c = 0; c < cfg.d_model; ++c)
                want[static_cast<std::size_t>(c)] += prob(t, e) * y[static_cast<std::size_t>(c)];
        }
        auto y_sh = eval_expert(p.shared, h, t);
        for (std::int64_t c = 0; c < cfg.d_model; ++c)
            EXPECT_NEAR(fwd.output(t, c),
                        want[static_cast<std::size_t>(c)] + y_sh[static_cast<std::size_t>(c)], 1e-10);
    }
}

TEST(MoeForward, NoSharedExpertMeansRoutedOnly) {
    MoEConfig cfg = small_config();
    MoEConfig cfg_ns = cfg;
    cfg_ns.shared_expert = false;
    MoEParams p = make_params(cfg, 23);
    MoEParams p_ns;
    p_ns.config = cfg_ns;
    p_ns.router = p.router;
    p_ns.experts = p.experts;
    p_ns.w_lm = p.w_lm;
    Tensor h = RngStream::make(24, StreamKind::Data).normal_tensor({4, cfg.d_model});
    RngStream n1 = RngStream::make(25, StreamKind::RoutingNoise);
    RngStream n2 = RngStream::make(25, StreamKind::RoutingNoise);
    MoeForwardResult with = moe_forward(h, p, n1);
    MoeForwardResult without = moe_forward(h, p_ns, n2);
    // o' = o exactly when the shared expert is disabled.
    Tensor y_sh = matmul(with.cache.a_sh, p.shared.w_out);
    for (std::size_t i = 0; i < with.output.data.size(); ++i)
        EXPECT_NEAR(with.output.data[i] - y_sh.data[i], without.output.data[i], 1e-12);
}

TEST(MoeForward, SaturatedGateRoutesToSingleExpert) {
    MoEConfig cfg = small_config();
    cfg.k_top = 1;
    MoEParams p = make_params(cfg, 29);
    // Push expert 3's logit far above the rest for every token.
    for (std::int64_t r = 0; r < cfg.d_model; ++r)
        for (std::int64_t c = 0; c < cfg.n_experts; ++c) p.router.w_router(r, c) = 0.0;
    Tensor h = Tensor::full({2, cfg.d_model}, 1.0);
    p.router.w_router(0, 3) = 1e3;
    RngStream noise = RngStream::make(2, StreamKind::RoutingNoise);
    MoeForwardResult fwd = moe_forward(h, p, noise);
    for (std::int64_t t = 0; t < 2; ++t) {
        EXPECT_EQ(fwd.cache.routing.indices[static_cast<std::size_t>(t)][0], 3);
        EXPECT_NEAR(fwd.cache.routing.gates(t, 0), 1.0, 1e-12);
        auto y3 = eval_expert(p.experts[3], h, t);
        auto y_sh = eval_expert(p.shared, h, t);
        for (std::int64_t c = 0; c < cfg.d_model; ++c)
            EXPECT_NEAR(fwd.output(t, c),
                        y3[static_cast<std::size_t>(c)] + y_sh[static_cast<std::size_t>(c)], 1e-9);
    }
}

TEST(MoeForward, DroplessConservation) {
    MoEConfig cfg = small_config();
    MoEParams p = make_params(cfg, 31);
    Tensor h = RngStream::make(32, StreamKind::Data).normal_tensor({17, cfg.d_model});
    RngStream noise = RngStream::make(33, StreamKind::RoutingNoise);
    MoeForwardResult fwd = moe_forward(h, p, noise);
    std::int64_t slots = 0;
    for (const auto& row : fwd.cache.routing.indices) slots += static_cast<std::int64_t>(row.size());
    EXPECT_EQ(slots, 17 * cfg.k_top);
    double sum = 0.0;
    for (double v : fwd.report.expert_load.data) {
        EXPECT_GE(v, 0.0);
        sum += v;
    }
    EXPECT_NEAR(sum, 1.0, 1e-9);
}

TEST(MoeForward, NonFiniteActivationNamesLayer) {
    MoEConfig cfg = small_config();
    cfg.k_top = cfg.n_experts;  // every expert selected, corruption must surface
    MoEParams p = make_params(cfg, 37);
    p.experts[0].w_out.data[0] = std::numeric_limits<double>::infinity();
    Tensor h = Tensor::full({3, cfg.d_model}, 1.0);
    RngStream noise = RngStream::make(2, StreamKind::RoutingNoise);
    try {
        moe_forward(h, p, noise);
        FAIL() << "expected numeric_error";
    } catch (const numeric_error& e) {
        EXPECT_NE(std::string(e.what()).find("routed experts"), std::string::npos);
    }
}

TEST(BalanceLoss, UniformIsOne) {
    // 4 tokens, N=4, k=1, each token to its own expert with gate 0.25.
    Tensor p = Tensor::full({4, 4}, 0.25);
    std::vector<std::vector<std::int64_t>> idx = {{0}, {1}, {2}, {3}};
    EXPECT_NEAR(balance_loss(p, idx), 1.0, 1e-12);
}

TEST(BalanceLoss, FullCollapseIsN) {
    Tensor p({3, 4});
    for (std::int64_t t = 0; t < 3; ++t) p(t, 0) = 1.0;
    std::vector<std::vector<std::int64_t>> idx = {{0}, {0}, {0}};
    EXPECT_NEAR(balance_loss(p, idx), 4.0, 1e-12);
}

TEST(BalanceLoss, MatchesCountingOracle) {
    MoEConfig cfg = small_config();
    cfg.n_experts = 8;
    cfg.k_top = 2;
    MoEParams params = make_params(cfg, 41);
    Tensor h = RngStream::make(42, StreamKind::Data).normal_tensor({64, cfg.d_model});
    RngStream noise = RngStream::make(43, StreamKind::RoutingNoise);
    RouteResult r = route(h, params.router, noise, cfg.k_top);
    // Brute-force counting oracle.
    std::vector<double> count(8, 0.0);
    for (const auto& row : r.indices)
        for (std::int64_t e : row) count[static_cast<std::size_t>(e)] += 1.0;
    double want = 0.0;
    for (std::int64_t i = 0; i < 8; ++i) {
        double pmean = 0.0;
        for (std::int64_t t = 0; t < 64; ++t) pmean += r.p(t, i) / 64.0;
        want += (count[static_cast<std::size_t>(i)] / (64.0 * 2.0)) * pmean;
    }
    want *= 8.0;
    EXPECT_NEAR(balance_loss(r.p, r.indices), want, 1e-12);
}

TEST(ZLoss, HandValues) {
    Tensor two({1, 2});  // logits [0, 0] -> (log 2)^2
    EXPECT_NEAR(z_loss(two), std::log(2.0) * std::log(2.0), 1e-12);
    Tensor one({1, 1});  // logits [0] -> 0
    EXPECT_NEAR(z_loss(one), 0.0, 1e-15);
}

TEST(ZLoss, MatchesDirectFormulaOracle) {
    Tensor logits = RngStream::make(44, StreamKind::Data).normal_tensor({9, 5});
    double want = 0.0;
    for (std::int64_t t = 0; t < 9; ++t) {
        double sum = 0.0;
        for (std::int64_t i = 0; i < 5; ++i) sum += std::exp(logits(t, i));
        want += std::log(sum) * std::log(sum);
    }
    want /= 9.0;
    EXPECT_NEAR(z_loss(logits), want, 1e-10);
}

TEST(NormHead, UnitRowsEqualPlainLinear) {
    RngStream rng = RngStream::make(45, StreamKind::Init);
    Tensor h = rng.normal_tensor({4, 6});
    Tensor w = rng.normal_tensor({5, 6});
    for (std::int64_t v = 0; v < 5; ++v) {
        double r = 0.0;
        for (std::int64_t c = 0; c < 6; ++c) r += w(v, c) * w(v, c);
        r = std::sqrt(r);
        for (std::int64_t c = 0; c < 6; ++c) w(v, c) /= r;
    }
    Tensor logits = normhead_forward(h, w);
    Tensor plain = matmul_nt(h, w);
    for (std::size_t i = 0; i < logits.data.size(); ++i)
        EXPECT_NEAR(logits.data[i], plain.data[i], 1e-12);
}

TEST(NormHead, ScaleInvariance) {
    RngStream rng = RngStream::make(46, StreamKind::Init);
    Tensor h = rng.normal_tensor({4, 6});
    Tensor w = rng.normal_tensor({5, 6});
    Tensor a = normhead_forward(h, w);
    Tensor b = normhead_forward(h, scale(w, 7.0));
    for (std::size_t i = 0; i < a.data.size(); ++i) EXPECT_NEAR(a.data[i], b.data[i], 1e-12);
}

TEST(NormHead, MatchesTwoStepOracle) {
    RngStream rng = RngStream::make(47, StreamKind::Init);
    Tensor h = rng.normal_tensor({3, 5});
    Tensor w = rng.normal_tensor({4, 5});
    Tensor got = normhead_forward(h, w);
    for (std::int64_t t = 0; t < 3; ++t)
        for (std::int64_t v = 0; v < 4; ++v) {
            double r = 0.0, ip = 0.0;
            for (std::int64_t c = 0; c < 5; ++c) r += w(v, c) * w(v, c);
            r = std::sqrt(r);
            for (std::int64_t c = 0; c < 5; ++c) ip += h(t, c) * (w(v, c) / r);
            EXPECT_NEAR(got(t, v), ip, 1e-12);
        }
}

TEST(NormHead, ZeroNormRowRejected) {
    Tensor h({2, 3});
    Tensor w({2, 3});
    w(0, 0) = 1.0;  // row 1 is all zeros
    EXPECT_THROW(normhead_forward(h, w), invalid_input);
}

TEST(ExpertLoadStats, UniformAndCollapse) {
    std::vector<std::vector<std::int64_t>> uniform = {{0, 1}, {2, 3}, {0, 1}, {2, 3}};
    LoadStats s = expert_load_stats(uniform, 4);
    EXPECT_NEAR(s.entropy, std::log(4.0), 1e-12);
    EXPECT_NEAR(s.max_min_ratio, 1.0, 1e-12);
    std::vector<std::vector<std::int64_t>> collapse = {{2}, {2}, {2}};
    LoadStats c = expert_load_stats(collapse, 4);
    EXPECT_DOUBLE_EQ(c.entropy, 0.0);
}

TEST(ExpertLoadStats, MatchesCountingOracle) {
    RngStream rng = RngStream::make(48, StreamKind::Data);
    std::vector<std::vector<std::int64_t>> window;
    std::vector<double> count(6, 0.0);
    for (int i = 0; i < 500; ++i) {
        std::vector<std::int64_t> row = {static_cast<std::int64_t>(rng.next_below(6)),
                                         static_cast<std::int64_t>(rng.next_below(6))};
        for (std::int64_t e : row) count[static_cast<std::size_t>(e)] += 1.0;
        window.push_back(row);
    }
    LoadStats s = expert_load_stats(window, 6);
    for (std::int64_t e = 0; e < 6; ++e)
        EXPECT_NEAR(s.load[e], count[static_cast<std::size_t>(e)] / 1000.0, 1e-12);
}

TEST(FineGrained, RoutedCapacityInvariant) {
    MoEConfig base = small_config();
    base.n_experts = 4;
    base.d_expert_hidden = 8;
    const std::int64_t want = base.routed_param_count();
    for (std::int64_t g : {1, 2, 4, 8}) {
        MoEConfig cfg = MoEConfig::fine_grained(base, g);
        EXPECT_EQ(cfg.routed_param_count(), want);
        EXPECT_EQ(cfg.n_experts, base.n_experts * g);
    }
    EXPECT_THROW(MoEConfig::fine_grained(base, 3), invalid_input);  // 8 % 3 != 0
}

TEST(MoeBackward, MatchesFiniteDifferenceOracle) {
    // Full pipeline: warmup-mixed router, routed + shared experts, NormHead,
    // cross-entropy, balance and z losses. 20 random instances.
    MoEConfig cfg = small_config();
    const double lambda_bal = 0.015, lambda_z = 1e-4;
    int checked = 0;
    std::uint64_t seed = 100;
    while (checked < 20) {
        ++seed;
        MoEParams params = make_params(cfg, seed);
        params.router.warmup_horizon = 10;
        params.router.global_step = 5;  // alpha = 0.5 keeps the router path live
        params.router.mu_s = 0.1;
        params.router.sigma_s = 0.5;
        RngStream data = RngStream::make(seed * 7 + 1, StreamKind::Data);
        RngStream noise = RngStream::make(seed * 7 + 2, StreamKind::RoutingNoise);
        Tensor h = data.normal_tensor({5, cfg.d_model});
        Tensor eps = noise.normal_tensor({5, cfg.n_experts});
        std::vector<std::int64_t> labels;
        for (int t = 0; t < 5; ++t)
            labels.push_back(
                static_cast<std::int64_t>(data.next_below(static_cast<std::uint64_t>(cfg.vocab))));
        if (selection_margin(params, h, eps) < 1e-3) continue;  // top-k must not flip under probes
        ++checked;

        AnalyticGrads g = analytic_grads(params, h, labels, eps, lambda_bal, lambda_z);
        MoEParams& p = params;
        auto check_tensor = [&](Tensor& param, const Tensor& analytic, const char* name) {
            auto f = [&](const Tensor& candidate) {
                Tensor saved = param;
                param = candidate;
                const double v = total_loss(p, h, labels, eps, lambda_bal, lambda_z);
                param = saved;
                return v;
            };
            Tensor numeric = finite_diff_grad(f, param);
            const double err = gradient_rel_error(analytic, numeric);
            EXPECT_LT(err, 1e-5) << name << " seed " << seed;
        };
        check_tensor(p.router.w_router, g.moe.d_w_router, "router");
        for (std::size_t e = 0; e < p.experts.size(); ++e) {
            check_tensor(p.experts[e].w_in, g.moe.d_experts[e].w_in, "expert.w_in");
            check_tensor(p.experts[e].w_out, g.moe.d_experts[e].w_out, "expert.w_out");
        }
        check_tensor(p.shared.w_in, g.moe.d_shared.w_in, "shared.w_in");
        check_tensor(p.shared.w_out, g.moe.d_shared.w_out, "shared.w_out");
        check_tensor(p.w_lm, g.d_w_lm, "lm_head");
    }
}

TEST(MoeBackward, InputGradientMatchesOracle) {
    MoEConfig cfg = small_config();
    MoEParams params = make_params(cfg, 77);
    RngStream data = RngStream::make(78, StreamKind::Data);
    Tensor h = data.normal_tensor({4, cfg.d_model});
    std::vector<std::int64_t> labels = {1, 3, 0, 5};
    Tensor eps;
    if (selection_margin(params, h, eps) < 1e-3) GTEST_SKIP();
    AnalyticGrads g = analytic_grads(params, h, labels, eps, 0.015, 1e-4);
    auto f = [&](const Tensor& candidate) {
        return total_loss(params, candidate, labels, eps, 0.015, 1e-4);
    };
    Tensor numeric = finite_diff_grad(f, h);
    EXPECT_LT(gradient_rel_error(g.moe.d_h, numeric), 1e-5);
}

TEST(MoeBackward, ZeroCoefficientsMatchTaskOnlyGradients) {
    MoEConfig cfg = small_config();
    MoEParams params = make_params(cfg, 55);
    Tensor h = RngStream::make(56, StreamKind::Data).normal_tensor({4, cfg.d_model});
    Tensor eps;
    MoeForwardResult f1 = moe_forward_with_noise(h, params, eps);
    MoeForwardResult f2 = moe_forward_with_noise(h, params, eps);
    Tensor upstream = RngStream::make(57, StreamKind::Data).normal_tensor({4, cfg.d_model});
    MoEGrads a = moe_backward(params, f1.cache, upstream, 0.0, 0.0);
    MoEGrads b = moe_backward(params, f2.cache, upstream, 0.0, 0.0);
    for (std::size_t i = 0; i < a.d_w_router.data.size(); ++i)
        EXPECT_DOUBLE_EQ(a.d_w_router.data[i], b.d_w_router.data[i]);
}

TEST(MoeBackward, NullUpstreamZeroCoefficientsGiveZeroGrads) {
    MoEConfig cfg = small_config();
    MoEParams params = make_params(cfg, 58);
    Tensor h = RngStream::make(59, StreamKind::Data).normal_tensor({4, cfg.d_model});
    Tensor eps;
    MoeForwardResult fwd = moe_forward_with_noise(h, params, eps);
    Tensor upstream({4, cfg.d_model});
    MoEGrads g = moe_backward(params, fwd.cache, upstream, 0.0, 0.0);
    auto all_zero = [](const Tensor& t) {
        for (double v : t.data)
            if (v != 0.0) return false;
        return true;
    };
    EXPECT_TRUE(all_zero(g.d_w_router));
    for (const auto& e : g.d_experts) {
        EXPECT_TRUE(all_zero(e.w_in));
        EXPECT_TRUE(all_zero(e.w_out));
    }
    EXPECT_TRUE(all_zero(g.d_shared.w_in));
    EXPECT_TRUE(all_zero(g.d_h));
}

TEST(MoeBackward, StaleCacheRejected) {
    MoEConfig cfg = small_config();
    MoEParams params = make_params(cfg, 60);
    Tensor h = RngStream::make(61, StreamKind::Data).normal_tensor({2, cfg.d_model});
    Tensor eps;
    MoeForwardResult fwd = moe_forward_with_noise(h, params, eps);
    Tensor upstream({2, cfg.d_model});
    moe_backward(params, fwd.cache, upstream);
    EXPECT_THROW(moe_backward(params, fwd.cache, upstream), invalid_input);
    MoeForwardCache blank;
    EXPECT_THROW(moe_backward(params, blank, upstream), invalid_input);
}
