#include "doctest.h"

#include <cmath>

#include "flatdiff/flatness.hpp"

using namespace flatdiff;
using namespace flatdiff::flatness;
using numerics::ParamVector;
using numerics::Rng;

namespace {

ParamVector make_params(std::size_t n, float fill) {
    ParamVector p;
    p.add_segment("w", {n});
    for (float& v : p.values()) v = fill;
    return p;
}

// L(w) = 0.5 * a * ||w - w*||^2, the closed-form quadratic oracle.
LossFn quadratic_loss(double a, const ParamVector& wstar) {
    ParamVector center = wstar;
    return [a, center](const ParamVector& p) {
        double acc = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            double d = static_cast<double>(p.values()[i]) -
                       static_cast<double>(center.values()[i]);
            acc += d * d;
        }
        return 0.5 * a * acc;
    };
}

} // namespace

TEST_CASE("lpf: zero-sigma exactness and gaussian second-moment identity") {
    ParamVector w = make_params(40, 0.5f);
    LossFn loss = quadratic_loss(2.0, w);  // minimum at w, value 0

    SUBCASE("sigma = 0 returns the unperturbed loss exactly, no MC path") {
        LpfConfig cfg;
        cfg.sigma = 0.0;
        cfg.mc_samples = 8;
        Rng rng(1);
        LpfResult r = lpf(loss, w, cfg, rng);
        CHECK(r.value == 0.0);
        CHECK(r.stderr_ == 0.0);
        CHECK(r.excluded == 0);
    }

    SUBCASE("quadratic: LPF - L(w*) = 0.5 a sigma^2 dim within MC error") {
        // E[0.5 a ||z||^2] with z ~ N(0, sigma^2 I_n) is 0.5 a sigma^2 n
        LpfConfig cfg;
        cfg.sigma = 0.05;
        cfg.mc_samples = 4000;
        Rng rng(2);
        LpfResult r = lpf(loss, w, cfg, rng);
        double expect = 0.5 * 2.0 * cfg.sigma * cfg.sigma * 40.0;
        CHECK(r.value == doctest::Approx(expect).epsilon(0.05));
        CHECK(r.stderr_ > 0.0);
        CHECK(r.value - expect <= 4.0 * r.stderr_ + 1e-12);
    }

    SUBCASE("monotone in sigma for the convex oracle") {
        double prev = 0.0;
        for (double sigma : {0.0, 0.01, 0.05, 0.1}) {
            LpfConfig cfg;
            cfg.sigma = sigma;
            cfg.mc_samples = 2000;
            Rng rng(3);
            double v = lpf(loss, w, cfg, rng).value;
            CHECK(v >= prev - 1e-9);
            prev = v;
        }
    }

    SUBCASE("non-finite draws are excluded and counted") {
        // loss blows up outside a tiny ball
        LossFn spiky = [&](const ParamVector& p) {
            double d = 0.0;
            for (std::size_t i = 0; i < p.size(); ++i) {
                double diff = static_cast<double>(p.values()[i]) - 0.5;
                d += diff * diff;
            }
            return d > 1e-6 ? std::numeric_limits<double>::infinity() : d;
        };
        LpfConfig cfg;
        cfg.sigma = 0.1;
        cfg.mc_samples = 10;
        Rng rng(4);
        CHECK_THROWS_AS(lpf(spiky, w, cfg, rng), NumericError);  // all excluded
    }

    SUBCASE("default kernel scale is 0.01 of the parameter RMS") {
        CHECK(default_lpf_sigma(w) == doctest::Approx(0.01 * 0.5));
    }
}

TEST_CASE("perturbation_curve on the quadratic oracle") {
    ParamVector w = make_params(30, -0.25f);
    double a = 3.0;
    LossFn loss = quadratic_loss(a, w);
    std::vector<double> radii = {0.0, 0.1, 0.2, 0.4};
    Rng rng(5);
    auto curve = perturbation_curve(loss, w, radii, 16, rng);

    REQUIRE(curve.size() == 4);
    SUBCASE("r = 0 point matches the baseline with zero std") {
        CHECK(curve[0].mean_loss == doctest::Approx(0.0));
        CHECK(curve[0].std_loss == 0.0);
    }
    SUBCASE("unit directions make the quadratic value exactly 0.5 a r^2") {
        // the loss is isotropic, so every unit direction gives the same value
        for (std::size_t i = 1; i < curve.size(); ++i) {
            double expect = 0.5 * a * radii[i] * radii[i];
            CHECK(curve[i].mean_loss == doctest::Approx(expect).epsilon(1e-4));
            CHECK(curve[i].std_loss <= 1e-5 * std::max(1.0, expect));
        }
    }
    SUBCASE("radii must ascend") {
        std::vector<double> bad = {0.2, 0.1};
        CHECK_THROWS_AS(perturbation_curve(loss, w, bad, 4, rng), ConfigError);
    }
    SUBCASE("r = 0 matches the loss to 1e-7 relative for a nonzero baseline") {
        ParamVector off = make_params(30, 0.5f);  // loss > 0 here
        auto c2 = perturbation_curve(loss, off, radii, 4, rng);
        double base = loss(off);
        CHECK(std::fabs(c2[0].mean_loss - base) <= 1e-7 * base);
    }
}

TEST_CASE("loss_surface_grid on quadratic losses") {
    ParamVector w = make_params(25, 0.1f);
    double a = 1.7;
    LossFn loss = quadratic_loss(a, w);
    Rng rng(6);
    SurfaceGrid grid = loss_surface_grid(loss, w, 0.5, 11, rng);

    SUBCASE("center cell is the unperturbed loss") {
        CHECK(grid.at(5, 5) == doctest::Approx(loss(w)));
    }
    SUBCASE("grid is symmetric under direction negation for the quadratic") {
        for (int i = 0; i < 11; ++i)
            for (int j = 0; j < 11; ++j)
                CHECK(grid.at(i, j) == doctest::Approx(grid.at(10 - i, 10 - j)).epsilon(1e-6));
    }
    SUBCASE("convex along both axes (brute-force second differences)") {
        for (int i = 0; i < 11; ++i)
            for (int j = 1; j < 10; ++j) {
                CHECK(grid.at(i, j + 1) - 2.0 * grid.at(i, j) + grid.at(i, j - 1) >= -1e-9);
                CHECK(grid.at(j + 1, i) - 2.0 * grid.at(j, i) + grid.at(j - 1, i) >= -1e-9);
            }
    }
    SUBCASE("resolution must be at least 2") {
        CHECK_THROWS_AS(loss_surface_grid(loss, w, 0.5, 1, rng), ConfigError);
    }
}

TEST_CASE("flatness evaluations never mutate the parameters") {
    ParamVector w = make_params(12, 0.3f);
    ParamVector w_copy = w;
    LossFn loss = quadratic_loss(1.0, make_params(12, 0.0f));
    Rng rng(7);
    LpfConfig lc;
    lc.sigma = 0.1;
    lc.mc_samples = 16;
    lpf(loss, w, lc, rng);
    std::vector<double> radii = {0.0, 0.1};
    perturbation_curve(loss, w, radii, 4, rng);
    loss_surface_grid(loss, w, 0.3, 5, rng);
    CHECK(std::equal(w.values().begin(), w.values().end(), w_copy.values().begin()));
}
