#include "flatdiff/robustness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace flatdiff::robustness {

using numerics::Graph;

// ---------------------------------------------------------------------------
// Quantization
// ---------------------------------------------------------------------------

ParamVector quantize(const ParamVector& params, const QuantSpec& spec) {
    if (spec.bits < 2) throw ConfigError("quantize: bits must be >= 2");
    if (spec.bits > 30) throw ConfigError("quantize: bits must be <= 30");
    const long long levels = (1LL << (spec.bits - 1)) - 1;
    ParamVector out = params;
    for (std::size_t s = 0; s < out.segments().size(); ++s) {
        std::span<float> w = out.segment_values(s);
        float max_abs = 0.0f;
        for (float x : w) max_abs = std::max(max_abs, std::fabs(x));
        if (max_abs == 0.0f) continue;  // degenerate segment stays zero
        // The max-magnitude element maps to code +-levels and dequantizes back
        // to max_abs bitwise, which makes repeated quantization a fixed point.
        double scale = static_cast<double>(max_abs) / static_cast<double>(levels);
        for (float& x : w) {
            long long code = std::llround(static_cast<double>(x) / scale);
            code = std::clamp(code, -levels, levels);
            x = static_cast<float>(static_cast<double>(code) * scale);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Exposure-bias profiling
// ---------------------------------------------------------------------------

namespace {

// mean and standard error of per-row squared norms
std::pair<double, double> sq_norm_stats(const Matrix& m) {
    std::size_t n = m.rows;
    double mean = 0.0, m2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < m.cols; ++j) s += m(i, j) * m(i, j);
        double d = s - mean;
        mean += d / static_cast<double>(i + 1);
        m2 += d * (s - mean);
    }
    double var = n > 1 ? m2 / static_cast<double>(n - 1) : 0.0;
    return {mean, std::sqrt(var / static_cast<double>(n))};
}

} // namespace

EpsNormProfile exposure_profile(const EpsPredictor& model, const DataSampler& data,
                                const NoiseSchedule& sched, const RespacingMap& respacing,
                                Rng& rng, std::size_t n) {
    if (n < 1) throw ConfigError("exposure_profile: n must be >= 1");
    int d = data.dim();
    EpsNormProfile p;
    int K = respacing.t_prime;
    p.timesteps.reserve(static_cast<std::size_t>(K));
    for (int k = K; k >= 1; --k)
        p.timesteps.push_back(respacing.indices[static_cast<std::size_t>(k - 1)]);

    // reference: ground-truth noised inputs at each retained timestep
    for (std::size_t pos = 0; pos < p.timesteps.size(); ++pos) {
        int t = p.timesteps[pos];
        Rng ref_rng = rng.stream("exposure-ref", pos);
        Tensor x0 = data.sample(ref_rng, n);
        Tensor eps = numerics::gaussian_sample(ref_rng, x0.shape);
        Tensor xt = diffusion::forward_noise(x0, t, eps, sched);
        std::vector<int> ts(n, t);
        Matrix pred = model.predict(Matrix::from_tensor(xt), ts);
        auto [mean, se] = sq_norm_stats(pred);
        p.reference.push_back(mean);
        p.reference_se.push_back(se);
    }

    // trace: predictions along actual reverse trajectories
    p.trace.assign(p.timesteps.size(), 0.0);
    p.trace_se.assign(p.timesteps.size(), 0.0);
    Rng trace_rng = rng.stream("exposure-trace");
    Matrix start(n, static_cast<std::size_t>(d));
    trace_rng.fill_gaussian(std::span<double>(start.v));
    diffusion::run_reverse_chain(
        model, std::move(start), sched, respacing, trace_rng,
        [&](int k, int, const Matrix& eps_hat, const Matrix&) {
            std::size_t pos = static_cast<std::size_t>(K - k);
            auto [mean, se] = sq_norm_stats(eps_hat);
            p.trace[pos] = mean;
            p.trace_se[pos] = se;
        });

    double acc = 0.0, var_acc = 0.0, floor_acc = 0.0;
    for (std::size_t i = 0; i < p.trace.size(); ++i) {
        acc += std::fabs(p.trace[i] - p.reference[i]);
        double se_sq = p.trace_se[i] * p.trace_se[i] + p.reference_se[i] * p.reference_se[i];
        var_acc += se_sq;
        floor_acc += std::sqrt(se_sq);
    }
    double K_d = static_cast<double>(K);
    p.gap = acc / K_d;
    p.gap_se = std::sqrt(var_acc) / K_d;
    p.gap_noise_floor = std::sqrt(2.0 / M_PI) * floor_acc / K_d;
    p.end_signed = p.trace.back() - p.reference.back();
    return p;
}

void write_profile_csv(const EpsNormProfile& p, const std::string& path,
                       const std::string& meta_comment) {
    std::ofstream f(path);
    if (!f) throw ConfigError("cannot open '" + path + "' for writing");
    if (!meta_comment.empty()) f << "# " << meta_comment << "\n";
    f << "step_index,timestep,reference_sq_norm,sampling_sq_norm\n";
    for (std::size_t i = 0; i < p.timesteps.size(); ++i)
        f << i << ',' << p.timesteps[i] << ',' << p.reference[i] << ',' << p.trace[i] << "\n";
}

// ---------------------------------------------------------------------------
// Adversarial initial latents
// ---------------------------------------------------------------------------

namespace {

// Ascent objective: eps-prediction error of the latent against itself; at
// t = T with alpha_bar_T ~ 0 the latent is its own noise target.
double attack_loss_and_grad(const EpsModel& model, const Matrix& z, int T, Matrix* grad_out) {
    Graph g(model.params());
    Graph::Id z_node = g.input(z);
    std::vector<int> ts(z.rows, T);
    Graph::Id pred = model.build(g, z_node, ts);
    Graph::Id loss = g.mse(pred, z_node);
    double value = g.scalar(loss);
    if (grad_out) {
        g.backward(loss);
        *grad_out = g.adjoint(z_node);
    }
    return value;
}

} // namespace

AttackResult latent_attack(const EpsModel& model, const NoiseSchedule& sched,
                           const RespacingMap& respacing, double strength, int steps, Rng& rng,
                           std::size_t n) {
    if (strength < 0.0) throw ConfigError("latent_attack: strength must be >= 0");
    if (steps < 1) throw ConfigError("latent_attack: steps must be >= 1");
    (void)respacing;
    int d = model.spec().data_dim;
    AttackResult res;
    Matrix z0(n, static_cast<std::size_t>(d));
    rng.fill_gaussian(std::span<double>(z0.v));
    res.clean = z0.to_tensor();
    if (strength == 0.0) {
        res.attacked = res.clean;
        res.loss_before = res.loss_after =
            attack_loss_and_grad(model, z0, sched.T, nullptr);
        return res;
    }
    double budget = strength * std::sqrt(static_cast<double>(d));
    double step_len = budget / static_cast<double>(steps);
    Matrix z = z0;
    res.loss_before = attack_loss_and_grad(model, z, sched.T, nullptr);
    for (int it = 0; it < steps; ++it) {
        Matrix grad;
        double value = attack_loss_and_grad(model, z, sched.T, &grad);
        if (!std::isfinite(value))
            throw NumericError("latent_attack: non-finite ascent at step " + std::to_string(it));
        for (std::size_t i = 0; i < z.rows; ++i) {
            double gn = 0.0;
            for (std::size_t j = 0; j < z.cols; ++j) gn += grad(i, j) * grad(i, j);
            gn = std::sqrt(gn);
            if (gn == 0.0) continue;
            for (std::size_t j = 0; j < z.cols; ++j)
                z(i, j) += step_len * grad(i, j) / gn;
            // project the accumulated perturbation back onto the budget ball
            double pn = 0.0;
            for (std::size_t j = 0; j < z.cols; ++j) {
                double dz = z(i, j) - z0(i, j);
                pn += dz * dz;
            }
            pn = std::sqrt(pn);
            if (pn > budget) {
                double f = budget / pn;
                for (std::size_t j = 0; j < z.cols; ++j)
                    z(i, j) = z0(i, j) + f * (z(i, j) - z0(i, j));
            }
        }
    }
    res.loss_after = attack_loss_and_grad(model, z, sched.T, nullptr);
    res.attacked = z.to_tensor();
    return res;
}

// ---------------------------------------------------------------------------
// Distances
// ---------------------------------------------------------------------------

namespace {

// Exact squared 2-Wasserstein between two 1-D empirical distributions: the
// quantile functions are piecewise constant, so integrate interval by interval.
double w2_squared_1d(std::vector<double>& a, std::vector<double>& b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    std::size_t n = a.size(), m = b.size();
    double acc = 0.0, q = 0.0;
    std::size_t i = 0, j = 0;
    while (i < n && j < m) {
        double qa = static_cast<double>(i + 1) / static_cast<double>(n);
        double qb = static_cast<double>(j + 1) / static_cast<double>(m);
        double qn = std::min(qa, qb);
        double diff = a[i] - b[j];
        acc += (qn - q) * diff * diff;
        q = qn;
        if (qa == qn) ++i;
        if (qb == qn) ++j;
    }
    return acc;
}

} // namespace

double sliced_w2(const Tensor& a, const Tensor& b, int projections, Rng& rng) {
    if (projections < 1) throw ConfigError("sliced_w2: projections must be >= 1");
    if (a.rows() == 0 || b.rows() == 0) throw ConfigError("sliced_w2: empty sample set");
    if (a.cols() != b.cols()) throw LayoutError("sliced_w2: sample dimensions differ");
    std::size_t d = a.cols();
    std::vector<double> dir(d), pa(a.rows()), pb(b.rows());
    double acc = 0.0;
    for (int l = 0; l < projections; ++l) {
        double norm = 0.0;
        do {
            rng.fill_gaussian(std::span<double>(dir));
            norm = 0.0;
            for (double v : dir) norm += v * v;
            norm = std::sqrt(norm);
        } while (norm == 0.0);
        for (double& v : dir) v /= norm;
        for (std::size_t i = 0; i < a.rows(); ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < d; ++j) s += dir[j] * static_cast<double>(a.at(i, j));
            pa[i] = s;
        }
        for (std::size_t i = 0; i < b.rows(); ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < d; ++j) s += dir[j] * static_cast<double>(b.at(i, j));
            pb[i] = s;
        }
        acc += w2_squared_1d(pa, pb);
    }
    return std::sqrt(acc / static_cast<double>(projections));
}

double mmd_rbf(const Tensor& a, const Tensor& b, double bandwidth) {
    if (a.rows() == 0 || b.rows() == 0) throw ConfigError("mmd_rbf: empty sample set");
    if (a.cols() != b.cols()) throw LayoutError("mmd_rbf: sample dimensions differ");
    std::size_t d = a.cols();
    auto sq_dist = [d](const Tensor& x, std::size_t i, const Tensor& y, std::size_t j) {
        double s = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
            double diff = static_cast<double>(x.at(i, k)) - static_cast<double>(y.at(j, k));
            s += diff * diff;
        }
        return s;
    };
    if (bandwidth <= 0.0) {
        // median heuristic on a deterministic subsample of pooled pairs
        std::vector<double> dists;
        std::size_t cap = 256;
        std::size_t stride_a = std::max<std::size_t>(1, a.rows() / cap);
        std::size_t stride_b = std::max<std::size_t>(1, b.rows() / cap);
        for (std::size_t i = 0; i < a.rows(); i += stride_a)
            for (std::size_t j = 0; j < b.rows(); j += stride_b)
                dists.push_back(sq_dist(a, i, b, j));
        std::nth_element(dists.begin(), dists.begin() + dists.size() / 2, dists.end());
        double med = dists[dists.size() / 2];
        bandwidth = med > 0.0 ? std::sqrt(med / 2.0) : 1.0;
    }
    double gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    auto kernel_mean = [&](const Tensor& x, const Tensor& y) {
        double s = 0.0;
        for (std::size_t i = 0; i < x.rows(); ++i)
            for (std::size_t j = 0; j < y.rows(); ++j) s += std::exp(-gamma * sq_dist(x, i, y, j));
        return s / (static_cast<double>(x.rows()) * static_cast<double>(y.rows()));
    };
    double mmd2 = kernel_mean(a, a) + kernel_mean(b, b) - 2.0 * kernel_mean(a, b);
    return std::sqrt(std::max(0.0, mmd2));
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

std::vector<SweepCell> robustness_sweep(
    const std::vector<std::pair<std::string, ParamVector>>& variants, const EpsModelSpec& spec,
    const NoiseSchedule& sched, std::span<const int> bit_widths, std::span<const int> respacings,
    const Tensor& target_samples, std::size_t n_generate, int projections, Rng& rng) {
    if (variants.empty()) throw ConfigError("robustness_sweep: no variants");
    for (const auto& [name, params] : variants)
        variants.front().second.require_same_layout(params, "robustness_sweep(" + name + ")");
    // widest first so every row can report its delta against the 32-bit cell
    std::vector<int> bits_desc(bit_widths.begin(), bit_widths.end());
    std::sort(bits_desc.rbegin(), bits_desc.rend());
    std::vector<SweepCell> cells;
    std::size_t cell_idx = 0;
    for (const auto& [name, params] : variants) {
        for (int respace : respacings) {
            double fp32_value = 0.0;
            bool have_fp32 = false;
            for (int bits : bits_desc) {
                SweepCell cell;
                cell.variant = name;
                cell.bits = bits;
                cell.respacing = respace;
                try {
                    ParamVector p = bits >= 32 ? params : quantize(params, QuantSpec{bits});
                    diffusion::ModelPredictor pred(spec, std::move(p));
                    RespacingMap map = diffusion::even_respacing(sched.T, respace);
                    Rng cell_rng = rng.stream("sweep-cell", cell_idx);
                    Tensor gen = diffusion::ddpm_sample(pred, n_generate, spec.data_dim, sched,
                                                        map, cell_rng);
                    Rng dist_rng = rng.stream("sweep-dist", cell_idx);
                    cell.value = sliced_w2(gen, target_samples, projections, dist_rng);
                    if (bits >= 32) {
                        fp32_value = cell.value;
                        have_fp32 = true;
                    }
                    cell.delta_vs_fp32 = have_fp32 ? cell.value - fp32_value : 0.0;
                } catch (const Error& e) {
                    cell.failed = true;
                    cell.error = e.what();
                }
                cells.push_back(std::move(cell));
                ++cell_idx;
            }
        }
    }
    return cells;
}

void write_sweep_csv(const std::vector<SweepCell>& cells, const std::string& path,
                     const std::string& meta_comment) {
    std::ofstream f(path);
    if (!f) throw ConfigError("cannot open '" + path + "' for writing");
    if (!meta_comment.empty()) f << "# " << meta_comment << "\n";
    f << "variant,bits,respacing,metric,value,delta_vs_fp32\n";
    for (const SweepCell& c : cells) {
        if (c.failed)
            f << c.variant << ',' << c.bits << ',' << c.respacing << ',' << c.metric
              << ",failed,failed\n";
        else
            f << c.variant << ',' << c.bits << ',' << c.respacing << ',' << c.metric << ','
              << c.value << ',' << c.delta_vs_fp32 << "\n";
    }
}

} // namespace flatdiff::robustness
