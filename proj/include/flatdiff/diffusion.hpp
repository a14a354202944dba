#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "flatdiff/numerics.hpp"

namespace flatdiff::diffusion {

using numerics::Matrix;
using numerics::ParamVector;
using numerics::Rng;
using numerics::Tensor;

// ---------------------------------------------------------------------------
// Variance schedules
// ---------------------------------------------------------------------------

// beta/alpha/alpha_bar tables, 1-indexed timesteps t in 1..T stored at [t-1].
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;

    double beta_at(int t) const { return beta[static_cast<std::size_t>(t - 1)]; }
    double alpha_at(int t) const { return alpha[static_cast<std::size_t>(t - 1)]; }
    double alpha_bar_at(int t) const { return alpha_bar[static_cast<std::size_t>(t - 1)]; }
    void check_t(int t) const;
};

NoiseSchedule linear_schedule(int T, double beta1, double betaT);

// Strictly increasing subsequence of 1..T, last element T.
struct RespacingMap {
    int t_prime = 0;
    std::vector<int> indices;
};

RespacingMap even_respacing(int T, int t_prime);
RespacingMap identity_respacing(int T);

// q(x_t | x_0) sample: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
Tensor forward_noise(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched);

// ---------------------------------------------------------------------------
// Eps-prediction model
// ---------------------------------------------------------------------------

enum class Activation { relu, silu };

Activation activation_from_string(std::string_view s);
std::string to_string(Activation a);

struct EpsModelSpec {
    int data_dim = 2;
    std::vector<int> hidden = {64, 64};
    int embed_dim = 32;
    Activation act = Activation::silu;

    bool operator==(const EpsModelSpec&) const = default;
};

// Sinusoidal embedding of integer timesteps; one row per entry of ts.
Matrix timestep_embedding(std::span<const int> ts, int embed_dim);

// Small MLP eps-predictor: [x ; embed(t)] -> hidden stack -> data_dim output.
// Segments: layer{k}.weight [out,in], layer{k}.bias [out], then out.weight/out.bias.
class EpsModel {
public:
    EpsModel(EpsModelSpec spec, ParamVector params);
    static EpsModel init(const EpsModelSpec& spec, Rng& rng);
    static ParamVector make_layout(const EpsModelSpec& spec);

    const EpsModelSpec& spec() const { return spec_; }
    const ParamVector& params() const { return params_; }
    ParamVector& params() { return params_; }
    void set_params(ParamVector p);

    // Builds the prediction sub-graph for a batch already on the tape.
    numerics::Graph::Id build(numerics::Graph& g, numerics::Graph::Id x_node,
                              std::span<const int> ts) const;

    // Forward evaluation at arbitrary parameters sharing this layout.
    static Matrix forward(const EpsModelSpec& spec, const ParamVector& params, const Matrix& x,
                          std::span<const int> ts);
    Matrix forward(const Matrix& x, std::span<const int> ts) const;

private:
    EpsModelSpec spec_;
    ParamVector params_;
};

// ---------------------------------------------------------------------------
// Toy datasets
// ---------------------------------------------------------------------------

class DataSampler {
public:
    virtual ~DataSampler() = default;
    virtual Tensor sample(Rng& rng, std::size_t n) const = 0;
    virtual int dim() const = 0;
};

enum class ToyKind { gaussian_mixture_8, swiss_roll, checkerboard };

ToyKind toy_kind_from_string(std::string_view s);
std::string to_string(ToyKind k);

// 2-D toy targets scaled to roughly [-1, 1]^2.
class ToyDataset final : public DataSampler {
public:
    explicit ToyDataset(ToyKind kind) : kind_(kind) {}
    Tensor sample(Rng& rng, std::size_t n) const override;
    int dim() const override { return 2; }
    ToyKind kind() const { return kind_; }

private:
    ToyKind kind_;
};

// x0 ~ N(0, stddev^2 I); reference data for the analytic-Gaussian oracle.
class IsotropicGaussianData final : public DataSampler {
public:
    IsotropicGaussianData(int dim, double stddev) : dim_(dim), stddev_(stddev) {}
    Tensor sample(Rng& rng, std::size_t n) const override;
    int dim() const override { return dim_; }

private:
    int dim_;
    double stddev_;
};

// ---------------------------------------------------------------------------
// Training loss
// ---------------------------------------------------------------------------

// One frozen stochastic instantiation of the eps-prediction objective:
// inputs x_t, per-row timesteps, and the regression targets. SAM evaluates
// the same instantiation twice; evaluation sets freeze one for all models.
struct LossSample {
    Matrix x_input;
    std::vector<int> t;
    Matrix target;
};

// Draws (t, eps, xi) for a batch and assembles x_t. With ip_strength > 0 the
// model input is noised with eps + ip_strength*xi while the target stays eps.
LossSample draw_loss_sample(const Tensor& batch, const NoiseSchedule& sched, Rng& rng,
                            double ip_strength);

double loss_on_sample(const EpsModelSpec& spec, const ParamVector& params,
                      const LossSample& sample);
numerics::GradResult loss_grad_on_sample(const EpsModelSpec& spec, const ParamVector& params,
                                         const LossSample& sample);

// Mean over the batch of ||eps_theta(x_t, t) - eps||^2, t uniform in 1..T.
double diffusion_loss(const EpsModel& model, const Tensor& batch, const NoiseSchedule& sched,
                      Rng& rng, double ip_strength);

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

class EpsPredictor {
public:
    virtual ~EpsPredictor() = default;
    virtual Matrix predict(const Matrix& x, std::span<const int> ts) const = 0;
    virtual int dim() const = 0;
    Matrix predict_at(const Matrix& x, int t) const;
};

class ModelPredictor final : public EpsPredictor {
public:
    ModelPredictor(EpsModelSpec spec, ParamVector params)
        : spec_(std::move(spec)), params_(std::move(params)) {}
    explicit ModelPredictor(const EpsModel& m) : spec_(m.spec()), params_(m.params()) {}
    Matrix predict(const Matrix& x, std::span<const int> ts) const override;
    int dim() const override { return spec_.data_dim; }

private:
    EpsModelSpec spec_;
    ParamVector params_;
};

// Exact eps-posterior-mean for x0 ~ N(0, c^2 I):
// eps_hat(x_t, t) = sqrt(1-abar_t) x_t / (abar_t c^2 + 1 - abar_t).
class AnalyticGaussianEps final : public EpsPredictor {
public:
    AnalyticGaussianEps(double c, const NoiseSchedule& sched);
    Matrix predict(const Matrix& x, std::span<const int> ts) const override;
    int dim() const override { return -1; }  // any

private:
    double c_;
    const NoiseSchedule* sched_;
};

class ZeroPredictor final : public EpsPredictor {
public:
    explicit ZeroPredictor(int dim) : dim_(dim) {}
    Matrix predict(const Matrix& x, std::span<const int>) const override {
        return Matrix(x.rows, x.cols);
    }
    int dim() const override { return dim_; }

private:
    int dim_;
};

// Called once per reverse step with the (descending) step index, the original
// timestep, the prediction batch, and the post-update state.
using ChainObserver =
    std::function<void(int step_index, int timestep, const Matrix& eps_hat, const Matrix& state)>;

// Runs the respaced reverse chain from the given start states and returns the
// final states. Non-finite intermediates raise NumericError with the step index.
Matrix run_reverse_chain(const EpsPredictor& model, Matrix start, const NoiseSchedule& sched,
                         const RespacingMap& respacing, Rng& rng,
                         const ChainObserver& observer = {});

// Ancestral sampling through the respaced chain, eps-parameterized posterior
// mean with variance beta_tilde; the final step adds no noise. Non-finite
// states raise NumericError naming the step index.
Tensor ddpm_sample(const EpsPredictor& model, std::size_t n, int dim, const NoiseSchedule& sched,
                   const RespacingMap& respacing, Rng& rng);

// Same chain started from caller-provided latents (adversarial-latent runs).
Tensor ddpm_sample_from(const EpsPredictor& model, const Tensor& latents,
                        const NoiseSchedule& sched, const RespacingMap& respacing, Rng& rng);

void write_samples_csv(const Tensor& samples, const std::string& path,
                       const std::string& meta_comment = "");

} // namespace flatdiff::diffusion
