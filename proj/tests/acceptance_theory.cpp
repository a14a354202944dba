// Acceptance suite, part 1: exact theory certification and mechanical
// identities. Prints one PASS/FAIL line per criterion and exits nonzero if
// any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <vector>

#include "flatdiff/diffusion.hpp"
#include "flatdiff/optim.hpp"
#include "flatdiff/robustness.hpp"
#include "flatdiff/theory.hpp"

using namespace flatdiff;
using numerics::Graph;
using numerics::Matrix;
using numerics::ParamVector;
using numerics::Rng;
using numerics::Tensor;

namespace {

int g_failures = 0;

void report(int criterion, bool pass, const char* what, double measured, double budget_s,
            double elapsed_s) {
    std::printf("[%s] criterion %2d: %s (measured %.3e, %.1fs of %.0fs budget)\n",
                pass ? "PASS" : "FAIL", criterion, what, measured, elapsed_s, budget_s);
    if (!pass) ++g_failures;
}

struct Timer {
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    double elapsed() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
};

double instance_cap(int d, int m) {
    return 0.3 * static_cast<double>(m) /
           (std::sqrt(static_cast<double>(d)) + std::sqrt(static_cast<double>(m)));
}

// ---- criteria 1-5: theory ----------------------------------------------

void criterion_1_loss_equality(Rng root) {
    Timer timer;
    Rng rng = root.stream("c1");
    const int dims[] = {2, 3, 5};
    const int widths[] = {4, 8};
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
        int d = dims[i % 3];
        int m = d == 5 ? 8 : widths[(i / 3) % 2];  // the sampler needs full-row-rank W
        theory::RandomFeatureScoreModel model =
            theory::RandomFeatureScoreModel::random(d, m, 4, theory::Activation::identity, rng);
        theory::Mat delta = theory::sample_admissible_delta(model.w, instance_cap(d, m), rng);
        std::vector<theory::Vec> xs;
        for (int b = 0; b < 8; ++b) {
            theory::Vec x(d);
            for (int j = 0; j < d; ++j) x(j) = rng.gaussian();
            xs.push_back(x);
        }
        worst = std::max(worst, theory::loss_equality_check(model, delta, xs));
    }
    double el = timer.elapsed();
    report(1, worst <= 1e-10 && el < 5.0,
           "loss equality over 100 identity-activation instances <= 1e-10", worst, 5, el);
}

struct DensityResults {
    double worst_pointwise = 0.0;
    double worst_mass = 0.0;
    double worst_c = 0.0;
    double elapsed_density = 0.0;
    double elapsed_c = 0.0;
};

DensityResults criteria_2_3_density(Rng root) {
    Rng rng = root.stream("c2");
    DensityResults res;
    for (int i = 0; i < 50; ++i) {
        int m = (i % 2 == 0) ? 4 : 8;
        theory::RandomFeatureScoreModel model =
            theory::RandomFeatureScoreModel::random(2, m, 4, theory::Activation::identity, rng);
        theory::Mat delta = theory::sample_regime_delta(model, instance_cap(2, m), rng);
        theory::Perturbation p = theory::make_perturbation(delta, model.w, model.u, model.e);
        Timer t_density;
        theory::DensityCheck dc = theory::density_identity_check(p, m, 8.0, 400);
        res.elapsed_density += t_density.elapsed();
        res.worst_pointwise = std::max(res.worst_pointwise, dc.max_pointwise_mismatch);
        res.worst_mass = std::max(res.worst_mass, dc.mass_error);
        Timer t_c;
        double c_quad = theory::quadrature_normalization_constant(p, m, 8.0, 400);
        res.elapsed_c += t_c.elapsed();
        res.worst_c = std::max(res.worst_c,
                               std::fabs(c_quad - theory::normalization_constant(p, m)));
    }
    return res;
}

void criterion_4_kl_chain(Rng root) {
    Timer timer;
    Rng rng = root.stream("c4");
    // closed form vs 1e6-sample MC
    double worst_rel = 0.0;
    for (int i = 0; i < 12; ++i) {
        const int dims[] = {2, 3, 5};
        int d = dims[i % 3];
        int m = d == 5 ? 8 : 4;
        theory::RandomFeatureScoreModel model =
            theory::RandomFeatureScoreModel::random(d, m, 4, theory::Activation::identity, rng);
        double cap = instance_cap(d, m);
        theory::PerturbedGaussian pg;
        double kl = 0.0;
        // pick instances the 1e6-sample estimator resolves at 2% with wide
        // margin: Var(llr) = tr((A-I)^2)/2 + ||A mu||^2 in closed form
        for (int attempt = 0; attempt < 128; ++attempt) {
            theory::Mat delta = theory::sample_regime_delta(model, cap, rng);
            theory::Perturbation p = theory::make_perturbation(delta, model.w, model.u, model.e);
            pg = theory::perturbed_gaussian(p, m);
            kl = theory::gaussian_kl(pg);
            theory::Mat b = pg.sigma_inv - theory::Mat::Identity(d, d);
            double var_llr = 0.5 * (b * b).trace() + (pg.sigma_inv * pg.mu).squaredNorm();
            double rel_se = std::sqrt(var_llr / 1e6) / std::max(kl, 1e-12);
            if (kl >= 0.1 && kl <= 0.8 && 5.0 * rel_se <= 0.02) break;
            if (kl < 0.1) cap = std::min(cap * 1.5, 3.0 * instance_cap(d, m));
            else cap *= 0.7;
        }
        Rng mc_rng = rng.stream("mc", static_cast<std::uint64_t>(i));
        double kl_mc = theory::mc_kl(pg, 1000000, mc_rng);
        worst_rel = std::max(worst_rel, std::fabs(kl_mc - kl) / kl);
    }
    // eigenvalue bound: 1000 sampled deltas per (d, Delta) cell
    int violations = 0;
    double worst_excess = 0.0;
    for (int d : {2, 3, 5}) {
        for (double frac : {0.5, 1.0}) {
            int m = d == 5 ? 8 : 4;
            theory::RandomFeatureScoreModel model = theory::RandomFeatureScoreModel::random(
                d, m, 4, theory::Activation::identity, rng);
            double Delta = frac * instance_cap(d, m);
            theory::EigenGapReport rep = theory::eigen_gap_bound(Delta, model, 1000, rng);
            violations += rep.violations;
            worst_excess = std::max(worst_excess, rep.worst_excess);
        }
    }
    double el = timer.elapsed();
    report(4,
           worst_rel <= 0.02 && violations == 0 && el < 60.0,
           "KL: MC within 2% and eigen bound unviolated over 6x1000 deltas", worst_rel, 60, el);
    std::printf("             (worst bound excess %.3e over %d cells, %d violations)\n",
                worst_excess, 6, violations);
}

void criterion_5_mu_sign(Rng root) {
    Timer timer;
    Rng rng = root.stream("c5");
    double worst_ratio = 0.0;
    for (int i = 0; i < 20; ++i) {
        int d = (i % 2 == 0) ? 2 : 3;
        int m = 4;
        theory::RandomFeatureScoreModel model =
            theory::RandomFeatureScoreModel::random(d, m, 4, theory::Activation::identity, rng);
        theory::Mat delta = theory::sample_regime_delta(model, instance_cap(d, m), rng);
        theory::Perturbation p = theory::make_perturbation(delta, model.w, model.u, model.e);
        theory::PerturbedGaussian pg = theory::perturbed_gaussian(p, m);
        Rng is_rng = rng.stream("is", static_cast<std::uint64_t>(i));
        theory::ImportanceMean im = theory::importance_sampled_mean(p, m, 400000, is_rng);
        double err = (im.mean - pg.mu).norm();
        double band = 3.0 * im.se.norm();
        worst_ratio = std::max(worst_ratio, band > 0.0 ? err / band : 1e300);
    }
    report(5, worst_ratio <= 1.0,
           "mu sign: IS mean within 3 stderr of constructed mu on 20 instances", worst_ratio, 30,
           timer.elapsed());
}

// ---- criteria 6-10: numerics and mechanics ------------------------------

struct MlpCase {
    ParamVector params;
    Matrix input, target;
    bool use_relu;

    numerics::LossClosure closure() const {
        return [this](Graph& g) {
            Graph::Id x = g.input(input);
            Graph::Id h = g.affine(x, g.param("layer0.weight"), g.param("layer0.bias"));
            h = use_relu ? g.relu(h) : g.silu(h);
            h = g.affine(h, g.param("layer1.weight"), g.param("layer1.bias"));
            h = use_relu ? g.relu(h) : g.silu(h);
            h = g.affine(h, g.param("out.weight"), g.param("out.bias"));
            return g.mse(h, g.input(target));
        };
    }
};

MlpCase random_case(Rng& rng, bool use_relu) {
    MlpCase c;
    c.use_relu = use_relu;
    c.params.add_segment("layer0.weight", {6, 2});
    c.params.add_segment("layer0.bias", {6});
    c.params.add_segment("layer1.weight", {6, 6});
    c.params.add_segment("layer1.bias", {6});
    c.params.add_segment("out.weight", {2, 6});
    c.params.add_segment("out.bias", {2});
    rng.fill_gaussian(c.params.values());
    for (float& v : c.params.values()) v *= 0.5f;
    c.input = Matrix(4, 2);
    c.target = Matrix(4, 2);
    rng.fill_gaussian(std::span<double>(c.input.v));
    rng.fill_gaussian(std::span<double>(c.target.v));
    return c;
}

bool relu_kink_adjacent(const MlpCase& c, double margin) {
    Graph g(c.params);
    Graph::Id x = g.input(c.input);
    Graph::Id z0 = g.affine(x, g.param("layer0.weight"), g.param("layer0.bias"));
    for (double v : g.value(z0).v)
        if (std::fabs(v) < margin) return true;
    Graph::Id h = g.relu(z0);
    Graph::Id z1 = g.affine(h, g.param("layer1.weight"), g.param("layer1.bias"));
    for (double v : g.value(z1).v)
        if (std::fabs(v) < margin) return true;
    return false;
}

void criterion_6_gradient_check(Rng root) {
    Timer timer;
    double worst = 0.0;
    int checked = 0;
    std::uint64_t draw = 0;
    while (checked < 100) {
        Rng rng = root.stream("c6", draw++);
        bool use_relu = checked % 4 == 3;  // mix of silu and (kink-safe) relu nets
        MlpCase c = random_case(rng, use_relu);
        if (use_relu && relu_kink_adjacent(c, 0.05)) continue;
        numerics::GradResult r = numerics::grad(c.closure(), c.params);
        double scale = 0.0, err = 0.0;
        for (std::size_t i = 0; i < c.params.size(); ++i) {
            ParamVector plus = c.params, minus = c.params;
            double w = static_cast<double>(c.params.values()[i]);
            plus.values()[i] = static_cast<float>(w + 1e-3);
            minus.values()[i] = static_cast<float>(w - 1e-3);
            double h_eff = static_cast<double>(plus.values()[i]) -
                           static_cast<double>(minus.values()[i]);
            Graph gp(plus);
            Graph gm(minus);
            double fd = (gp.scalar(c.closure()(gp)) - gm.scalar(c.closure()(gm))) / h_eff;
            double g = static_cast<double>(r.gradient.values()[i]);
            scale = std::max({scale, std::fabs(g), std::fabs(fd)});
            err = std::max(err, std::fabs(g - fd));
        }
        worst = std::max(worst, err / scale);
        ++checked;
    }
    report(6, worst <= 1e-4, "autodiff vs central differences over 100 random models", worst, 60,
           timer.elapsed());
}

void criterion_7_sam(Rng root) {
    Timer timer;
    // hand example: L(w) = w^2, w=1, lr=0.1, rho=0.1 -> 0.78
    ParamVector w;
    w.add_segment("w", {1});
    w.values()[0] = 1.0f;
    optim::OptimConfig cfg;
    cfg.kind = optim::BaseKind::sgd;
    cfg.lr = 0.1;
    cfg.sam_rho = 0.1;
    optim::OptState st;
    optim::GradFn quad = [](const ParamVector& p) {
        return numerics::grad(
            [](Graph& g) { return g.mse(g.param("w"), g.input(Matrix(1, 1))); }, p);
    };
    ParamVector w2 = optim::sam_step(quad, w, cfg, st);
    bool hand_ok = std::fabs(static_cast<double>(w2.values()[0]) - 0.78) <= 1e-6;

    // rho = 0 bitwise identical to the base step over 100 random steps
    bool bitwise_ok = true;
    for (int trial = 0; trial < 100; ++trial) {
        Rng rng = root.stream("c7", static_cast<std::uint64_t>(trial));
        MlpCase c = random_case(rng, false);
        optim::GradFn fn = [&](const ParamVector& p) { return numerics::grad(c.closure(), p); };
        optim::OptimConfig step_cfg;
        step_cfg.kind = trial % 2 == 0 ? optim::BaseKind::sgd : optim::BaseKind::adam;
        step_cfg.lr = 0.02;
        step_cfg.sam_rho = 0.0;
        optim::OptState s1, s2;
        ParamVector via_sam = optim::sam_step(fn, c.params, step_cfg, s1);
        ParamVector via_base = optim::base_step(c.params, fn(c.params).gradient, step_cfg, s2);
        for (std::size_t i = 0; i < via_sam.size(); ++i)
            if (via_sam.values()[i] != via_base.values()[i]) bitwise_ok = false;
    }
    report(7, hand_ok && bitwise_ok, "SAM degeneracy: rho=0 bitwise and 1-D example w=1 -> 0.78",
           std::fabs(static_cast<double>(w2.values()[0]) - 0.78), 30, timer.elapsed());
}

void criterion_8_averagers(Rng root) {
    Timer timer;
    Rng rng = root.stream("c8");
    // SWA equals the snapshot mean to 1e-12 relative
    ParamVector w0;
    w0.add_segment("s", {57});
    rng.fill_gaussian(w0.values());
    optim::AveragerState st = optim::AveragerState::init(w0);
    optim::OptimConfig cfg;
    cfg.swa_cycle = 2;
    cfg.swa_start = 4;
    std::vector<ParamVector> snaps;
    ParamVector w = w0;
    for (std::int64_t step = 1; step <= 100; ++step) {
        for (float& v : w.values()) v += static_cast<float>(0.05 * rng.gaussian());
        optim::swa_update(st, w, step, cfg);
        if (step >= cfg.swa_start && step % cfg.swa_cycle == 0) snaps.push_back(w);
    }
    double worst_swa = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        double mean = 0.0;
        for (const ParamVector& s : snaps) mean += static_cast<double>(s.values()[i]);
        mean /= static_cast<double>(snaps.size());
        worst_swa = std::max(worst_swa,
                             std::fabs(st.w_swa[i] - mean) / std::max(1.0, std::fabs(mean)));
    }

    // post-hoc EMA with gamma = 0 equals the uniform mean to 1e-10
    // (stated on the double accumulator, before the float32 cast)
    optim::CheckpointSeries series;
    for (std::size_t i = 0; i < snaps.size(); ++i)
        series.push(static_cast<std::int64_t>(i + 1), snaps[i]);
    std::vector<double> ph = optim::posthoc_ema_accumulator(series, 0.0);
    double worst_ph = 0.0;
    for (std::size_t i = 0; i < ph.size(); ++i) {
        double mean = 0.0;
        for (const ParamVector& s : snaps) mean += static_cast<double>(s.values()[i]);
        mean /= static_cast<double>(snaps.size());
        worst_ph =
            std::max(worst_ph, std::fabs(ph[i] - mean) / std::max(1.0, std::fabs(mean)));
    }
    report(8, worst_swa <= 1e-12 && worst_ph <= 1e-10,
           "averager identities: SWA mean 1e-12, post-hoc EMA gamma=0 1e-10",
           std::max(worst_swa, worst_ph), 30, timer.elapsed());
}

void criterion_9_quantizer(Rng root) {
    Timer timer;
    // hand example
    ParamVector hand;
    hand.add_segment("w", {3});
    hand.values()[0] = -1.0f;
    hand.values()[1] = 0.0f;
    hand.values()[2] = 0.5f;
    ParamVector hq = robustness::quantize(hand, robustness::QuantSpec{8});
    bool hand_ok = std::fabs(static_cast<double>(hq.values()[0]) + 1.0) < 1e-7 &&
                   hq.values()[1] == 0.0f &&
                   std::fabs(static_cast<double>(hq.values()[2]) - 64.0 / 127.0) < 1e-7;

    bool idempotent = true, bounded = true;
    for (int trial = 0; trial < 1000; ++trial) {
        Rng rng = root.stream("c9", static_cast<std::uint64_t>(trial));
        ParamVector p;
        p.add_segment("a", {11});
        p.add_segment("b", {6});
        rng.fill_gaussian(p.values());
        int bits = trial % 2 == 0 ? 8 : 4;
        long long levels = (1LL << (bits - 1)) - 1;
        ParamVector q = robustness::quantize(p, robustness::QuantSpec{bits});
        ParamVector qq = robustness::quantize(q, robustness::QuantSpec{bits});
        for (std::size_t i = 0; i < q.size(); ++i)
            if (q.values()[i] != qq.values()[i]) idempotent = false;
        for (std::size_t s = 0; s < p.segments().size(); ++s) {
            auto orig = p.segment_values(s);
            auto quant = q.segment_values(s);
            float max_abs = 0.0f;
            for (float v : orig) max_abs = std::max(max_abs, std::fabs(v));
            double scale = static_cast<double>(max_abs) / static_cast<double>(levels);
            for (std::size_t i = 0; i < orig.size(); ++i)
                if (std::fabs(static_cast<double>(orig[i]) - static_cast<double>(quant[i])) >
                    scale * (0.5 + 1e-6))
                    bounded = false;
        }
    }
    report(9, hand_ok && idempotent && bounded,
           "quantizer: hand example, bitwise idempotence, per-segment bound", hand_ok ? 0.0 : 1.0,
           30, timer.elapsed());
}

void criterion_10_sampler(Rng root) {
    Timer timer;
    diffusion::NoiseSchedule sched = diffusion::linear_schedule(100, 1e-4, 0.02);
    diffusion::AnalyticGaussianEps pred(0.5, sched);
    Rng rng = root.stream("c10");
    Tensor gen =
        diffusion::ddpm_sample(pred, 10000, 2, sched, diffusion::identity_respacing(100), rng);
    Rng oracle_rng = root.stream("c10-oracle");
    diffusion::IsotropicGaussianData target(2, 0.5);
    Tensor ref = target.sample(oracle_rng, 10000);
    Rng w2_rng = root.stream("c10-w2");
    double d = robustness::sliced_w2(gen, ref, 64, w2_rng);
    double el = timer.elapsed();
    report(10, d <= 0.05 && el < 30.0,
           "analytic-gaussian sampler: sliced-W2 to N(0, 0.25 I) <= 0.05", d, 30, el);
}

} // namespace

int main() {
    Rng root(20250809ULL);

    criterion_1_loss_equality(root);

    {
        Timer t2;
        DensityResults res = criteria_2_3_density(root);
        (void)t2;
        report(2, res.worst_pointwise <= 1e-6 && res.worst_mass <= 1e-6 &&
                      res.elapsed_density < 30.0,
               "density identity on 400^2 grids over 50 deltas (pointwise and mass)",
               std::max(res.worst_pointwise, res.worst_mass), 30, res.elapsed_density);
        report(3, res.worst_c <= 1e-6, "normalization constant: closed form vs quadrature",
               res.worst_c, 30, res.elapsed_c);
    }

    criterion_4_kl_chain(root);
    criterion_5_mu_sign(root);
    criterion_6_gradient_check(root);
    criterion_7_sam(root);
    criterion_8_averagers(root);
    criterion_9_quantizer(root);
    criterion_10_sampler(root);

    if (g_failures > 0) {
        std::printf("%d criterion(s) FAILED\n", g_failures);
        return 1;
    }
    std::printf("all criteria passed\n");
    return 0;
}
