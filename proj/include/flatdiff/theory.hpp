#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "flatdiff/numerics.hpp"

namespace flatdiff::theory {

using numerics::Rng;
using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Random-feature score model: s(x) = (1/m) theta sigma(W^T x + U^T e)
// ---------------------------------------------------------------------------

enum class Activation { identity, relu };

struct RandomFeatureScoreModel {
    Mat theta;  // d x m, learnable
    Mat w;      // d x m, frozen
    Mat u;      // d_e x m, frozen
    Vec e;      // d_e, timestep embedding vector
    Activation act = Activation::identity;

    int d() const { return static_cast<int>(theta.rows()); }
    int m() const { return static_cast<int>(theta.cols()); }
    int d_e() const { return static_cast<int>(u.rows()); }

    Vec preactivation(const Vec& x) const;  // W^T x + U^T e
    Vec score(const Vec& x) const;
    Vec score_at(const Mat& theta_eff, const Vec& x) const;

    static RandomFeatureScoreModel random(int d, int m, int d_e, Activation act, Rng& rng);
};

using ScoreFn = std::function<Vec(const Vec&)>;

// Pointwise score-matching residual ||s_theta(x) - grad log p(x)||^2.
double score_loss(const RandomFeatureScoreModel& model, const Vec& x, const ScoreFn& score_p);

// ---------------------------------------------------------------------------
// Perturbations and the induced density
// ---------------------------------------------------------------------------

struct Perturbation {
    Mat delta;    // d x m
    Mat delta_w;  // delta W^T (must be symmetric for the identities)
    Vec delta_u;  // delta U^T e
    double frobenius_norm = 0.0;
};

Perturbation make_perturbation(const Mat& delta, const Mat& w, const Mat& u, const Vec& e);

// Symmetry gate for delta W^T; identities are only claimed in this regime.
void require_symmetric(const Perturbation& p, double tol = 1e-10);

// I(x, delta) = (1/2m) x^T (delta W^T) x + (1/m) x^T (delta U^T e) + C,
// the working scaling of the appendix derivation.
double perturbation_exponent(const Vec& x, const Perturbation& p, int m, double c);

// grad_x I = (1/m)(delta_w x + delta_u).
Vec exponent_gradient(const Vec& x, const Perturbation& p, int m);

// Max over the batch of |L(x; theta+delta, p) - L(x; theta, p_hat)| with p the
// standard normal and grad log p_hat = grad log p - grad I. relu models must
// have strictly positive pre-activations on every batch point.
double loss_equality_check(const RandomFeatureScoreModel& model, const Mat& delta,
                           std::span<const Vec> xs);

struct PerturbedGaussian {
    Vec mu;
    Mat sigma;             // Sigma_delta = (I + delta_w/m)^{-1}
    Mat sigma_inv;         // I + delta_w/m
    double log_det_sigma = 0.0;
    Vec sigma_inv_evals;   // ascending
};

// Requires I + delta_w/m positive definite; mu = -(1/m) Sigma delta_u.
PerturbedGaussian perturbed_gaussian(const Perturbation& p, int m);

// Closed form C = (1/2m^2) delta_u^T Sigma delta_u + (1/2) log|Sigma|.
double normalization_constant(const Perturbation& p, int m);

// KL(N(0,I) || N(mu, Sigma)) in closed form.
double gaussian_kl(const PerturbedGaussian& pg);

// ---------------------------------------------------------------------------
// Admissible perturbations and the flatness / gap bound
// ---------------------------------------------------------------------------

// Draws delta with delta W^T symmetric and ||delta||_F = radius_fraction * Delta
// via S (W W^T)^{-1} W with S a random symmetric matrix. Requires full-row-rank W.
Mat sample_admissible_delta(const Mat& w, double Delta, Rng& rng);

// Rejection wrapper keeping only draws with I + delta_w/m positive definite.
Mat sample_regime_delta(const RandomFeatureScoreModel& model, double Delta, Rng& rng,
                        int max_tries = 64);

struct GapBound {
    double kl_closed = 0.0;
    double kl_eigen_bound = 0.0;
    Vec sigma_inv_evals;
};

GapBound gap_bound_for(const Perturbation& p, const RandomFeatureScoreModel& model,
                       double Delta);

struct EigenGapReport {
    double delta_cap = 0.0;
    int n_samples = 0;
    double max_kl = 0.0;
    int violations = 0;
    double worst_excess = 0.0;     // max(kl - bound) over samples
    std::string violation_dump;    // serialized first offending instance, if any
};

// Samples admissible deltas in the Delta-ball, certifies kl <= bound per
// sample (slack 1e-9), reports the max KL seen.
EigenGapReport eigen_gap_bound(double Delta, const RandomFeatureScoreModel& model, int n_samples,
                               Rng& rng);

struct PerturbedSetMember {
    Mat delta;
    PerturbedGaussian gaussian;
};

// The set of perturbed distributions induced by admissible deltas; each
// member carries its delta so the density oracle can re-check it.
std::vector<PerturbedSetMember> perturbed_set_probe(double Delta,
                                                    const RandomFeatureScoreModel& model, int n,
                                                    Rng& rng);

// ---------------------------------------------------------------------------
// Brute-force oracles
// ---------------------------------------------------------------------------

// Tensor-product trapezoid over [-extent, extent]^d, d <= 3.
double trapezoid_integral(int d, double extent, int points_per_dim,
                          const std::function<double(const Vec&)>& f);

// C from the defining integral: log of the quadrature mass of e^{-I0} p.
double quadrature_normalization_constant(const Perturbation& p, int m, double extent,
                                         int points_per_dim);

struct DensityCheck {
    double max_pointwise_mismatch = 0.0;
    double mass_error = 0.0;
};

// d = 2 grid comparison of e^{-I} N(0,I) (closed-form C) against N(mu, Sigma).
DensityCheck density_identity_check(const Perturbation& p, int m, double extent,
                                    int points_per_dim);

// Monte-Carlo KL(N(0,I) || N(mu, Sigma)); optionally reports the relative
// standard error of the estimate.
double mc_kl(const PerturbedGaussian& pg, std::size_t n, Rng& rng,
             double* rel_se_out = nullptr);

struct ImportanceMean {
    Vec mean;
    Vec se;
};

// Self-normalized importance-sampling mean of e^{-I} N(0,I); pins the sign of
// mu_delta independently of the closed form.
ImportanceMean importance_sampled_mean(const Perturbation& p, int m, std::size_t n, Rng& rng);

// ---------------------------------------------------------------------------
// Certification suite
// ---------------------------------------------------------------------------

struct CertCheck {
    std::string name;
    std::string regime;
    double tolerance = 0.0;
    double measured = 0.0;
    bool pass = false;
    std::uint64_t seed = 0;
};

struct CertificationReport {
    std::vector<CertCheck> checks;
    std::string violation_dump;
    bool all_pass() const;
};

// Runs the full certification ladder (loss equality, density identity,
// normalization constant, KL chain + eigenvalue bound, mu-sign oracle).
// quick mode shrinks sample counts for unit tests.
CertificationReport run_certification(std::uint64_t seed, bool quick = false);

void write_certification_json(const CertificationReport& report, const std::string& path,
                              std::uint64_t seed);

} // namespace flatdiff::theory
