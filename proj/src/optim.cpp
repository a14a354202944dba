#include "flatdiff/optim.hpp"

#include <cmath>

namespace flatdiff::optim {

BaseKind base_kind_from_string(std::string_view s) {
    if (s == "sgd") return BaseKind::sgd;
    if (s == "adam") return BaseKind::adam;
    throw ConfigError("unknown optimizer kind '" + std::string(s) + "' (expected sgd|adam)");
}

std::string to_string(BaseKind k) { return k == BaseKind::sgd ? "sgd" : "adam"; }

void OptimConfig::validate() const {
    if (!(lr > 0.0)) throw ConfigError("optim: learning rate must be > 0");
    if (sam_rho < 0.0) throw ConfigError("optim: SAM rho must be >= 0");
    if (swa_cycle < 1) throw ConfigError("optim: SWA cycle length must be >= 1");
    if (!(ema_lambda > 0.0) || ema_lambda > 1.0)
        throw ConfigError("optim: EMA lambda must be in (0, 1]");
    if (ip_strength < 0.0) throw ConfigError("optim: IP strength must be >= 0");
}

void AdamState::ensure_size(std::size_t n) {
    if (m.size() != n) {
        m.assign(n, 0.0);
        v.assign(n, 0.0);
        t = 0;
    }
}

namespace {

void require_finite_gradient(const ParamVector& gradient) {
    for (std::size_t s = 0; s < gradient.segments().size(); ++s)
        for (float g : gradient.segment_values(s))
            if (!std::isfinite(g))
                throw NumericError("non-finite gradient in segment " +
                                   gradient.segment(s).name);
}

} // namespace

ParamVector base_step(const ParamVector& params, const ParamVector& gradient,
                      const OptimConfig& cfg, OptState& state) {
    params.require_same_layout(gradient, "base_step");
    require_finite_gradient(gradient);
    ParamVector out = params;
    std::span<float> w = out.values();
    std::span<const float> g = gradient.values();
    if (cfg.kind == BaseKind::sgd) {
        for (std::size_t i = 0; i < w.size(); ++i)
            w[i] = static_cast<float>(static_cast<double>(w[i]) -
                                      cfg.lr * static_cast<double>(g[i]));
        return out;
    }
    AdamState& a = state.adam;
    a.ensure_size(w.size());
    a.t += 1;
    double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(a.t));
    double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(a.t));
    for (std::size_t i = 0; i < w.size(); ++i) {
        double gi = static_cast<double>(g[i]);
        a.m[i] = cfg.adam_beta1 * a.m[i] + (1.0 - cfg.adam_beta1) * gi;
        a.v[i] = cfg.adam_beta2 * a.v[i] + (1.0 - cfg.adam_beta2) * gi * gi;
        double m_hat = a.m[i] / bc1;
        double v_hat = a.v[i] / bc2;
        w[i] = static_cast<float>(static_cast<double>(w[i]) -
                                  cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.adam_eps));
    }
    return out;
}

ParamVector sam_step(const GradFn& fn, const ParamVector& params, const OptimConfig& cfg,
                     OptState& state, double* loss_out) {
    GradResult at_w = fn(params);
    if (loss_out) *loss_out = at_w.loss;
    if (cfg.sam_rho == 0.0) return base_step(params, at_w.gradient, cfg, state);
    double norm = at_w.gradient.norm();
    if (norm == 0.0) {
        ++state.sam_zero_grad_events;
        return base_step(params, at_w.gradient, cfg, state);
    }
    ParamVector ascent = param_axpy(cfg.sam_rho / norm, at_w.gradient, params);
    GradResult at_ascent = fn(ascent);
    return base_step(params, at_ascent.gradient, cfg, state);
}

// ---------------------------------------------------------------------------
// Averagers
// ---------------------------------------------------------------------------

AveragerState AveragerState::init(const ParamVector& w0) {
    AveragerState s;
    s.w_swa.assign(w0.values().begin(), w0.values().end());
    s.w_ema.assign(w0.values().begin(), w0.values().end());
    s.n_models = 0;
    return s;
}

namespace {

ParamVector to_params(const std::vector<double>& acc, const ParamVector& layout_like) {
    ParamVector out = layout_like;
    std::span<float> v = out.values();
    if (acc.size() != v.size()) throw LayoutError("averager state size differs from layout");
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(acc[i]);
    return out;
}

} // namespace

ParamVector AveragerState::swa_params(const ParamVector& layout_like) const {
    return to_params(w_swa, layout_like);
}

ParamVector AveragerState::ema_params(const ParamVector& layout_like) const {
    return to_params(w_ema, layout_like);
}

void swa_update(AveragerState& state, const ParamVector& w, std::int64_t step,
                const OptimConfig& cfg) {
    if (step < cfg.swa_start || step % cfg.swa_cycle != 0) return;
    if (state.w_swa.size() != w.size()) throw LayoutError("swa_update: layout mismatch");
    double n = static_cast<double>(state.n_models);
    std::span<const float> wv = w.values();
    for (std::size_t i = 0; i < state.w_swa.size(); ++i)
        state.w_swa[i] = (state.w_swa[i] * n + static_cast<double>(wv[i])) / (n + 1.0);
    state.n_models += 1;
}

void ema_update(AveragerState& state, const ParamVector& w, const OptimConfig& cfg) {
    if (state.w_ema.size() != w.size()) throw LayoutError("ema_update: layout mismatch");
    double lambda = cfg.ema_lambda;
    std::span<const float> wv = w.values();
    for (std::size_t i = 0; i < state.w_ema.size(); ++i)
        state.w_ema[i] = (1.0 - lambda) * state.w_ema[i] + lambda * static_cast<double>(wv[i]);
}

// ---------------------------------------------------------------------------
// Post-hoc EMA
// ---------------------------------------------------------------------------

void CheckpointSeries::push(std::int64_t step, ParamVector params) {
    if (!snapshots.empty()) {
        if (step <= snapshots.back().first)
            throw ConfigError("CheckpointSeries: steps must be strictly increasing");
        snapshots.back().second.require_same_layout(params, "CheckpointSeries");
    }
    snapshots.emplace_back(step, std::move(params));
}

std::vector<double> posthoc_ema_accumulator(const CheckpointSeries& series, double gamma) {
    if (series.snapshots.empty()) throw ConfigError("posthoc_ema: empty checkpoint series");
    if (gamma < 0.0) throw ConfigError("posthoc_ema: gamma must be >= 0");
    const ParamVector& first = series.snapshots.front().second;
    std::vector<double> acc(first.values().begin(), first.values().end());
    for (std::size_t idx = 1; idx < series.snapshots.size(); ++idx) {
        double t = static_cast<double>(idx + 1);
        double beta = std::pow(1.0 - 1.0 / t, gamma + 1.0);
        std::span<const float> theta = series.snapshots[idx].second.values();
        for (std::size_t i = 0; i < acc.size(); ++i)
            acc[i] = beta * acc[i] + (1.0 - beta) * static_cast<double>(theta[i]);
    }
    return acc;
}

ParamVector posthoc_ema(const CheckpointSeries& series, double gamma) {
    std::vector<double> acc = posthoc_ema_accumulator(series, gamma);
    ParamVector out = series.snapshots.front().second;
    std::span<float> v = out.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(acc[i]);
    return out;
}

} // namespace flatdiff::optim
