#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "flatdiff/numerics.hpp"

namespace flatdiff::optim {

using numerics::GradResult;
using numerics::ParamVector;

enum class BaseKind { sgd, adam };

BaseKind base_kind_from_string(std::string_view s);
std::string to_string(BaseKind k);

struct OptimConfig {
    BaseKind kind = BaseKind::adam;
    double lr = 1e-4;
    double sam_rho = 0.0;
    std::int64_t swa_cycle = 1;
    std::int64_t swa_start = 0;
    double ema_lambda = 1e-4;  // weights the NEW parameters
    double ip_strength = 0.0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const;
};

// Adam moments in double; step count drives bias correction.
struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    std::int64_t t = 0;

    void ensure_size(std::size_t n);
};

struct OptState {
    AdamState adam;
    std::uint64_t sam_zero_grad_events = 0;
};

// One base update (SGD or Adam). Gradient must share the parameter layout
// and be finite.
ParamVector base_step(const ParamVector& params, const ParamVector& gradient,
                      const OptimConfig& cfg, OptState& state);

// Computes (loss, gradient) of the step's frozen objective at given params.
using GradFn = std::function<GradResult(const ParamVector&)>;

// SAM: ascend by rho along the normalized gradient, take the base step with
// the gradient at the ascent point. rho = 0 reduces to base_step bitwise.
// A zero gradient with rho > 0 falls back to the base step and records the
// event in the state.
ParamVector sam_step(const GradFn& fn, const ParamVector& params, const OptimConfig& cfg,
                     OptState& state, double* loss_out = nullptr);

// ---------------------------------------------------------------------------
// Weight averaging
// ---------------------------------------------------------------------------

// Running averages kept in double so SWA matches the exact snapshot mean and
// EMA contracts geometrically at working precision. Never mutates live params.
struct AveragerState {
    std::vector<double> w_swa;
    std::int64_t n_models = 0;
    std::vector<double> w_ema;

    static AveragerState init(const ParamVector& w0);
    ParamVector swa_params(const ParamVector& layout_like) const;
    ParamVector ema_params(const ParamVector& layout_like) const;
};

// Absorbs w into the running mean when step >= swa_start and
// step % swa_cycle == 0; otherwise a no-op.
void swa_update(AveragerState& state, const ParamVector& w, std::int64_t step,
                const OptimConfig& cfg);

// w_ema <- (1 - lambda) w_ema + lambda w.
void ema_update(AveragerState& state, const ParamVector& w, const OptimConfig& cfg);

// ---------------------------------------------------------------------------
// Post-hoc EMA over a checkpoint series
// ---------------------------------------------------------------------------

struct CheckpointSeries {
    std::vector<std::pair<std::int64_t, ParamVector>> snapshots;  // steps strictly increasing

    void push(std::int64_t step, ParamVector params);
};

// Power-function averaging: theta_hat(t) = beta(t) theta_hat(t-1) +
// (1-beta(t)) theta(t) with beta(t) = (1 - 1/t)^(gamma+1), t the 1-based
// position in the series. gamma = 0 recovers the uniform mean.
ParamVector posthoc_ema(const CheckpointSeries& series, double gamma);

// The double accumulator behind posthoc_ema; this is the object the
// uniform-mean identity holds on at 1e-10 before the float32 cast.
std::vector<double> posthoc_ema_accumulator(const CheckpointSeries& series, double gamma);

} // namespace flatdiff::optim
