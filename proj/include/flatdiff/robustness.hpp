#pragma once

#include <string>
#include <vector>

#include "flatdiff/diffusion.hpp"
#include "flatdiff/numerics.hpp"

namespace flatdiff::robustness {

using diffusion::DataSampler;
using diffusion::EpsModel;
using diffusion::EpsModelSpec;
using diffusion::EpsPredictor;
using diffusion::NoiseSchedule;
using diffusion::RespacingMap;
using numerics::Matrix;
using numerics::ParamVector;
using numerics::Rng;
using numerics::Tensor;

// ---------------------------------------------------------------------------
// Direct post-training quantization
// ---------------------------------------------------------------------------

// Symmetric per-segment scheme with half-away-from-zero rounding.
struct QuantSpec {
    int bits = 8;
};

// Per segment: scale = max|w| / (2^{b-1}-1), codes = round(w/scale) clipped,
// output = codes*scale. All-zero segments pass through unchanged.
ParamVector quantize(const ParamVector& params, const QuantSpec& spec);

// ---------------------------------------------------------------------------
// Exposure-bias profiling
// ---------------------------------------------------------------------------

// Mean ||eps_theta||^2 per retained timestep, in sampling order (t = T first).
// reference: model conditioned on ground-truth noised data; trace: model fed
// its own reverse-trajectory states.
struct EpsNormProfile {
    std::vector<int> timesteps;
    std::vector<double> reference;
    std::vector<double> reference_se;
    std::vector<double> trace;
    std::vector<double> trace_se;
    double gap = 0.0;     // mean |trace - reference| over retained steps
    double gap_se = 0.0;  // MC standard error of the gap
    // expectation of the gap under zero true bias (|N(0,s)| has mean
    // s*sqrt(2/pi)); "gap ~ 0 up to MC error" means gap <= floor + 3 se
    double gap_noise_floor = 0.0;
    double end_signed = 0.0;  // trace - reference at the end of the chain
};

EpsNormProfile exposure_profile(const EpsPredictor& model, const DataSampler& data,
                                const NoiseSchedule& sched, const RespacingMap& respacing,
                                Rng& rng, std::size_t n);

void write_profile_csv(const EpsNormProfile& p, const std::string& path,
                       const std::string& meta_comment = "");

// ---------------------------------------------------------------------------
// Adversarial initial latents
// ---------------------------------------------------------------------------

struct AttackResult {
    Tensor clean;     // the unattacked latents
    Tensor attacked;  // perturbed latents, per-row perturbation norm <= strength*sqrt(d)
    double loss_before = 0.0;
    double loss_after = 0.0;
};

// Gradient ascent on the eps-prediction error of the initial latent (the
// latent is its own noise target in the alpha_bar_T -> 0 limit). The total
// per-latent perturbation is projected onto the strength*sqrt(d) ball after
// every step; strength 0 returns the latents unchanged.
AttackResult latent_attack(const EpsModel& model, const NoiseSchedule& sched,
                           const RespacingMap& respacing, double strength, int steps, Rng& rng,
                           std::size_t n);

// ---------------------------------------------------------------------------
// Two-sample distances (desk-scale stand-ins for FID)
// ---------------------------------------------------------------------------

struct DistanceReport {
    std::string metric;  // "sliced-w2" | "mmd-rbf"
    double value = 0.0;
    std::size_t n_a = 0;
    std::size_t n_b = 0;
    std::uint64_t seed = 0;
};

// Mean over L random unit projections of the exact 1-D squared-W2 between the
// projected empirical distributions, square-rooted. Symmetric, >= 0.
double sliced_w2(const Tensor& a, const Tensor& b, int projections, Rng& rng);

// Biased (V-statistic) RBF-kernel MMD; bandwidth <= 0 means median heuristic.
double mmd_rbf(const Tensor& a, const Tensor& b, double bandwidth = 0.0);

// ---------------------------------------------------------------------------
// Quantization-robustness sweep
// ---------------------------------------------------------------------------

struct SweepCell {
    std::string variant;
    int bits = 32;
    int respacing = 0;
    std::string metric = "sliced-w2";
    double value = 0.0;
    double delta_vs_fp32 = 0.0;
    bool failed = false;
    std::string error;
};

// For each (variant, bits, T') cell: quantize, sample, measure distance to the
// target set, and report the delta against the variant's 32-bit row. Failures
// are marked per cell and the sweep continues.
std::vector<SweepCell> robustness_sweep(
    const std::vector<std::pair<std::string, ParamVector>>& variants, const EpsModelSpec& spec,
    const NoiseSchedule& sched, std::span<const int> bit_widths, std::span<const int> respacings,
    const Tensor& target_samples, std::size_t n_generate, int projections, Rng& rng);

void write_sweep_csv(const std::vector<SweepCell>& cells, const std::string& path,
                     const std::string& meta_comment = "");

} // namespace flatdiff::robustness
