#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "flatdiff/numerics.hpp"

namespace flatdiff::flatness {

using numerics::ParamVector;
using numerics::Rng;

// Deterministic loss estimator over a fixed evaluation set. Perturbations are
// applied to copies; the passed parameters are never mutated.
using LossFn = std::function<double(const ParamVector&)>;

struct LpfConfig {
    double sigma = 0.0;   // std-dev of Gaussian parameter noise
    int mc_samples = 32;  // M
};

struct LpfResult {
    double value = 0.0;
    double stderr_ = 0.0;
    int excluded = 0;  // draws dropped for non-finite loss
    double sigma = 0.0;
    int m = 0;
};

// sigma = 0 returns the unperturbed loss exactly (no MC path).
LpfResult lpf(const LossFn& loss, const ParamVector& params, const LpfConfig& cfg, Rng& rng);

// 0.01 * RMS of the parameter values; the declared default LPF kernel scale.
double default_lpf_sigma(const ParamVector& params);

struct CurvePoint {
    double radius = 0.0;
    double mean_loss = 0.0;
    double std_loss = 0.0;
    int k = 0;
};

// For each radius, K unit directions (Gaussian, normalized over the full
// vector); reports mean and std of loss(params + r*u). radii must ascend.
std::vector<CurvePoint> perturbation_curve(const LossFn& loss, const ParamVector& params,
                                           std::span<const double> radii, int k, Rng& rng);

struct SurfaceGrid {
    double extent = 0.0;
    int resolution = 0;
    std::uint64_t direction_seed = 0;  // stream seed of the two orthonormal directions
    std::vector<double> coords;        // linspace(-extent, extent, resolution)
    std::vector<double> losses;        // row-major resolution x resolution
    double at(int i, int j) const {
        return losses[static_cast<std::size_t>(i) * static_cast<std::size_t>(resolution) +
                      static_cast<std::size_t>(j)];
    }
};

// Losses on an evenly spaced grid along two orthonormalized random parameter
// directions; odd resolutions place the unperturbed point at the center cell.
SurfaceGrid loss_surface_grid(const LossFn& loss, const ParamVector& params, double extent,
                              int resolution, Rng& rng);

void write_curve_csv(const std::vector<CurvePoint>& curve, const std::string& path,
                     const std::string& meta_comment = "");
void write_surface_csv(const SurfaceGrid& grid, const std::string& path,
                       const std::string& meta_comment = "");
void write_lpf_json(const LpfResult& r, const std::string& path,
                    std::uint64_t config_hash, std::uint64_t seed);

} // namespace flatdiff::flatness
