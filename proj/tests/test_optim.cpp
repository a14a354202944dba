#include "doctest.h"

#include <cmath>

#include "flatdiff/optim.hpp"

using namespace flatdiff;
using namespace flatdiff::optim;
using numerics::Graph;
using numerics::GradResult;
using numerics::Matrix;
using numerics::ParamVector;
using numerics::Rng;

namespace {

ParamVector scalar_param(float w) {
    ParamVector p;
    p.add_segment("w", {1});
    p.values()[0] = w;
    return p;
}

// grad closure for L(w) = w^2 over the tape
GradFn quadratic_fn() {
    return [](const ParamVector& p) {
        return numerics::grad(
            [](Graph& g) { return g.mse(g.param("w"), g.input(Matrix(1, 1))); }, p);
    };
}

ParamVector random_params(Rng& rng, std::size_t n) {
    ParamVector p;
    p.add_segment("s", {n});
    rng.fill_gaussian(p.values());
    return p;
}

} // namespace

TEST_CASE("base_step: SGD arithmetic and stationary points") {
    OptimConfig cfg;
    cfg.kind = BaseKind::sgd;
    cfg.lr = 0.1;
    OptState state;
    SUBCASE("zero gradient leaves parameters unchanged") {
        ParamVector w = scalar_param(1.5f);
        ParamVector g = scalar_param(0.0f);
        ParamVector w2 = base_step(w, g, cfg, state);
        CHECK(w2.values()[0] == 1.5f);
    }
    SUBCASE("w=1, g=2, lr=0.1 -> 0.8") {
        ParamVector w = scalar_param(1.0f);
        ParamVector g = scalar_param(2.0f);
        ParamVector w2 = base_step(w, g, cfg, state);
        CHECK(w2.values()[0] == doctest::Approx(0.8));
    }
    SUBCASE("non-finite gradient raises") {
        ParamVector w = scalar_param(1.0f);
        ParamVector g = scalar_param(std::numeric_limits<float>::quiet_NaN());
        CHECK_THROWS_AS(base_step(w, g, cfg, state), NumericError);
    }
}

TEST_CASE("base_step: Adam first-step magnitude is ~lr regardless of gradient scale") {
    // bias correction: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
    for (float g0 : {2.0f, 200.0f, 0.02f}) {
        OptimConfig cfg;
        cfg.kind = BaseKind::adam;
        cfg.lr = 1e-3;
        OptState state;
        ParamVector w = scalar_param(1.0f);
        ParamVector g = scalar_param(g0);
        ParamVector w2 = base_step(w, g, cfg, state);
        double update = 1.0 - static_cast<double>(w2.values()[0]);
        CHECK(update == doctest::Approx(1e-3).epsilon(1e-3));
    }
}

TEST_CASE("sam_step: hand example and rho=0 degeneracy") {
    SUBCASE("hand example: L(w)=w^2, w=1, lr=0.1, rho=0.1 -> 0.78") {
        OptimConfig cfg;
        cfg.kind = BaseKind::sgd;
        cfg.lr = 0.1;
        cfg.sam_rho = 0.1;
        OptState state;
        ParamVector w = scalar_param(1.0f);
        double loss = 0.0;
        ParamVector w2 = sam_step(quadratic_fn(), w, cfg, state, &loss);
        CHECK(loss == doctest::Approx(1.0));
        CHECK(w2.values()[0] == doctest::Approx(0.78));
    }

    SUBCASE("rho=0 is bitwise identical to base_step over 100 random steps") {
        Rng rng(17);
        for (int trial = 0; trial < 100; ++trial) {
            Rng t_rng = rng.stream("t", static_cast<std::uint64_t>(trial));
            ParamVector w = random_params(t_rng, 13);
            // random quadratic: L(w) = mse(w, target)
            Matrix target(1, 13);
            t_rng.fill_gaussian(std::span<double>(target.v));
            GradFn fn = [&](const ParamVector& p) {
                return numerics::grad(
                    [&](Graph& g) { return g.mse(g.param("s"), g.input(target)); }, p);
            };
            OptimConfig cfg;
            cfg.kind = trial % 2 == 0 ? BaseKind::sgd : BaseKind::adam;
            cfg.lr = 0.05;
            cfg.sam_rho = 0.0;
            OptState s1, s2;
            ParamVector via_sam = sam_step(fn, w, cfg, s1);
            ParamVector via_base = base_step(w, fn(w).gradient, cfg, s2);
            CHECK(via_sam.values().size() == via_base.values().size());
            bool identical = true;
            for (std::size_t i = 0; i < via_sam.size(); ++i)
                if (via_sam.values()[i] != via_base.values()[i]) identical = false;
            CHECK(identical);
        }
    }

    SUBCASE("zero gradient with rho>0 falls back to the base step and records it") {
        OptimConfig cfg;
        cfg.kind = BaseKind::sgd;
        cfg.lr = 0.1;
        cfg.sam_rho = 0.1;
        OptState state;
        ParamVector w = scalar_param(2.0f);
        // constant loss: gradient is exactly zero
        GradFn fn = [](const ParamVector& p) {
            return numerics::grad(
                [](Graph& g) { return g.mse(g.scale(0.0, g.param("w")), g.input(Matrix(1, 1))); },
                p);
        };
        ParamVector w2 = sam_step(fn, w, cfg, state);
        CHECK(w2.values()[0] == 2.0f);
        CHECK(state.sam_zero_grad_events == 1);
    }

    SUBCASE("rho sweep values are accepted") {
        for (double rho : {1e-1, 1e-2, 1e-3}) {
            OptimConfig cfg;
            cfg.sam_rho = rho;
            cfg.validate();
        }
    }
}

TEST_CASE("swa_update: running mean matches the snapshot-mean oracle") {
    Rng rng(23);
    ParamVector w0 = random_params(rng, 29);
    AveragerState state = AveragerState::init(w0);
    OptimConfig cfg;
    cfg.swa_cycle = 3;
    cfg.swa_start = 6;

    std::vector<ParamVector> absorbed;
    ParamVector w = w0;
    for (std::int64_t step = 1; step <= 60; ++step) {
        Rng s_rng = rng.stream("walk", static_cast<std::uint64_t>(step));
        for (float& v : w.values()) v += static_cast<float>(0.1 * s_rng.gaussian());
        swa_update(state, w, step, cfg);
        if (step >= cfg.swa_start && step % cfg.swa_cycle == 0) absorbed.push_back(w);
    }
    CHECK(state.n_models == static_cast<std::int64_t>(absorbed.size()));
    // oracle: recompute the arithmetic mean of the absorbed snapshots
    for (std::size_t i = 0; i < w.size(); ++i) {
        double mean = 0.0;
        for (const ParamVector& snap : absorbed) mean += static_cast<double>(snap.values()[i]);
        mean /= static_cast<double>(absorbed.size());
        double got = state.w_swa[i];
        double denom = std::max(1.0, std::fabs(mean));
        CHECK(std::fabs(got - mean) / denom <= 1e-12);
    }

    SUBCASE("no-op outside the schedule") {
        AveragerState before = state;
        swa_update(state, w, 61, cfg);  // 61 % 3 != 0
        CHECK(state.n_models == before.n_models);
        CHECK(state.w_swa == before.w_swa);
    }
}

TEST_CASE("swa first absorption equals the snapshot; two-point mean") {
    ParamVector w0 = scalar_param(0.0f);
    OptimConfig cfg;
    cfg.swa_cycle = 1;
    cfg.swa_start = 0;
    AveragerState state = AveragerState::init(w0);
    ParamVector w = scalar_param(2.0f);
    swa_update(state, w, 1, cfg);
    CHECK(state.w_swa[0] == doctest::Approx(2.0));
    ParamVector w2 = scalar_param(4.0f);
    swa_update(state, w2, 2, cfg);
    CHECK(state.w_swa[0] == doctest::Approx(3.0));
}

TEST_CASE("ema_update: blend convention and geometric contraction") {
    SUBCASE("lambda=1 replaces the accumulator") {
        ParamVector w0 = scalar_param(0.0f);
        AveragerState state = AveragerState::init(w0);
        OptimConfig cfg;
        cfg.ema_lambda = 1.0;
        ParamVector w = scalar_param(5.0f);
        ema_update(state, w, cfg);
        CHECK(state.w_ema[0] == doctest::Approx(5.0));
    }
    SUBCASE("single blend from zero") {
        ParamVector w0 = scalar_param(0.0f);
        AveragerState state = AveragerState::init(w0);
        OptimConfig cfg;
        cfg.ema_lambda = 0.1;
        ParamVector w = scalar_param(1.0f);
        ema_update(state, w, cfg);
        CHECK(state.w_ema[0] == doctest::Approx(0.1));
    }
    SUBCASE("constant target: error contracts by exactly (1 - lambda) per step") {
        Rng rng(31);
        ParamVector w = random_params(rng, 7);
        ParamVector w0 = random_params(rng, 7);
        AveragerState state = AveragerState::init(w0);
        OptimConfig cfg;
        cfg.ema_lambda = 0.25;
        double prev_err = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            double d = state.w_ema[i] - static_cast<double>(w.values()[i]);
            prev_err += d * d;
        }
        prev_err = std::sqrt(prev_err);
        for (int step = 0; step < 40; ++step) {
            ema_update(state, w, cfg);
            double err = 0.0;
            for (std::size_t i = 0; i < w.size(); ++i) {
                double d = state.w_ema[i] - static_cast<double>(w.values()[i]);
                err += d * d;
            }
            err = std::sqrt(err);
            if (prev_err > 1e-12) CHECK(err / prev_err == doctest::Approx(0.75).epsilon(1e-10));
            prev_err = err;
        }
    }
}

TEST_CASE("averagers never mutate the live parameters") {
    Rng rng(37);
    ParamVector w = random_params(rng, 11);
    ParamVector w_copy = w;
    AveragerState state = AveragerState::init(w);
    OptimConfig cfg;
    cfg.swa_cycle = 1;
    cfg.swa_start = 0;
    cfg.ema_lambda = 0.3;
    swa_update(state, w, 1, cfg);
    ema_update(state, w, cfg);
    CHECK(std::equal(w.values().begin(), w.values().end(), w_copy.values().begin()));
}

TEST_CASE("posthoc_ema: recurrence endpoints and gamma=0 uniform mean") {
    Rng rng(41);
    CheckpointSeries series;
    std::vector<ParamVector> snaps;
    for (int i = 0; i < 9; ++i) {
        Rng s = rng.stream("snap", static_cast<std::uint64_t>(i));
        ParamVector p = random_params(s, 17);
        snaps.push_back(p);
        series.push(100 * (i + 1), p);
    }

    SUBCASE("single checkpoint returns it (beta(1) = 0)") {
        CheckpointSeries one;
        one.push(1, snaps[0]);
        ParamVector r = posthoc_ema(one, 3.7);
        CHECK(std::equal(r.values().begin(), r.values().end(), snaps[0].values().begin()));
    }

    SUBCASE("gamma=0, t=2 blends with beta = 0.5") {
        CheckpointSeries two;
        two.push(1, scalar_param(2.0f));
        two.push(2, scalar_param(4.0f));
        ParamVector r = posthoc_ema(two, 0.0);
        CHECK(r.values()[0] == doctest::Approx(3.0));
    }

    SUBCASE("gamma=0 equals the uniform mean of all checkpoints to 1e-10") {
        std::vector<double> acc = posthoc_ema_accumulator(series, 0.0);
        for (std::size_t i = 0; i < acc.size(); ++i) {
            double mean = 0.0;
            for (const ParamVector& snap : snaps) mean += static_cast<double>(snap.values()[i]);
            mean /= static_cast<double>(snaps.size());
            CHECK(std::fabs(acc[i] - mean) / std::max(1.0, std::fabs(mean)) <= 1e-10);
        }
        // the parameter-vector form is the float32 cast of the accumulator
        ParamVector r = posthoc_ema(series, 0.0);
        for (std::size_t i = 0; i < r.size(); ++i)
            CHECK(r.values()[i] == static_cast<float>(acc[i]));
    }

    SUBCASE("gamma>0 weights later checkpoints more") {
        std::vector<double> acc = posthoc_ema_accumulator(series, 8.0);
        // unrolled-recurrence oracle with explicit weights
        std::vector<double> weights(snaps.size(), 0.0);
        double carry = 1.0;
        for (std::size_t t = snaps.size(); t >= 1; --t) {
            double beta = std::pow(1.0 - 1.0 / static_cast<double>(t), 9.0);
            weights[t - 1] = (t == 1 ? 1.0 : (1.0 - beta)) * carry;
            carry *= (t == 1 ? 1.0 : beta);
            if (t == 1) break;
        }
        CHECK(weights.back() > weights.front());
        for (std::size_t i = 0; i < acc.size(); ++i) {
            double expect = 0.0;
            for (std::size_t t = 0; t < snaps.size(); ++t)
                expect += weights[t] * static_cast<double>(snaps[t].values()[i]);
            CHECK(acc[i] == doctest::Approx(expect).epsilon(1e-10));
        }
    }

    SUBCASE("empty series and bad steps rejected") {
        CheckpointSeries empty;
        CHECK_THROWS_AS(posthoc_ema(empty, 0.0), ConfigError);
        CheckpointSeries bad;
        bad.push(5, snaps[0]);
        CHECK_THROWS_AS(bad.push(5, snaps[1]), ConfigError);
    }
}

TEST_CASE("optim config validation") {
    OptimConfig cfg;
    cfg.swa_cycle = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = OptimConfig{};
    cfg.ema_lambda = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = OptimConfig{};
    cfg.sam_rho = -0.1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
