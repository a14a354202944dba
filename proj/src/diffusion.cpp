#include "flatdiff/diffusion.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

namespace flatdiff::diffusion {

using numerics::Graph;
using numerics::GradResult;

// ---------------------------------------------------------------------------
// Schedules
// ---------------------------------------------------------------------------

void NoiseSchedule::check_t(int t) const {
    if (t < 1 || t > T) throw IndexError("timestep " + std::to_string(t) + " outside 1.." +
                                         std::to_string(T));
}

NoiseSchedule linear_schedule(int T, double beta1, double betaT) {
    if (T < 1) throw ConfigError("linear_schedule: T must be >= 1");
    if (!(beta1 > 0.0) || !(beta1 <= betaT) || !(betaT < 1.0))
        throw ConfigError("linear_schedule: requires 0 < beta1 <= betaT < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta.resize(static_cast<std::size_t>(T));
    s.alpha.resize(static_cast<std::size_t>(T));
    s.alpha_bar.resize(static_cast<std::size_t>(T));
    double prod = 1.0;
    for (int t = 1; t <= T; ++t) {
        double b = T == 1 ? beta1
                          : beta1 + (betaT - beta1) * static_cast<double>(t - 1) /
                                        static_cast<double>(T - 1);
        s.beta[static_cast<std::size_t>(t - 1)] = b;
        s.alpha[static_cast<std::size_t>(t - 1)] = 1.0 - b;
        prod *= 1.0 - b;
        s.alpha_bar[static_cast<std::size_t>(t - 1)] = prod;
    }
    return s;
}

RespacingMap even_respacing(int T, int t_prime) {
    if (t_prime < 1 || t_prime > T)
        throw ConfigError("even_respacing: requires 1 <= T' <= T");
    RespacingMap m;
    m.t_prime = t_prime;
    m.indices.resize(static_cast<std::size_t>(t_prime));
    for (int k = 1; k <= t_prime; ++k)
        m.indices[static_cast<std::size_t>(k - 1)] = static_cast<int>(
            std::llround(static_cast<double>(k) * static_cast<double>(T) /
                         static_cast<double>(t_prime)));
    m.indices.back() = T;
    for (std::size_t i = 1; i < m.indices.size(); ++i)
        if (m.indices[i] <= m.indices[i - 1])
            throw ConfigError("even_respacing: rounding produced a non-increasing subsequence");
    if (m.indices.front() < 1) throw ConfigError("even_respacing: index below 1");
    return m;
}

RespacingMap identity_respacing(int T) { return even_respacing(T, T); }

Tensor forward_noise(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched) {
    sched.check_t(t);
    if (x0.shape != eps.shape) throw LayoutError("forward_noise: eps shape differs from x0");
    double ab = sched.alpha_bar_at(t);
    double sa = std::sqrt(ab);
    double sn = std::sqrt(1.0 - ab);
    Tensor out = x0;
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = static_cast<float>(sa * static_cast<double>(x0.data[i]) +
                                         sn * static_cast<double>(eps.data[i]));
    return out;
}

// ---------------------------------------------------------------------------
// Eps model
// ---------------------------------------------------------------------------

Activation activation_from_string(std::string_view s) {
    if (s == "relu") return Activation::relu;
    if (s == "silu") return Activation::silu;
    throw ConfigError("unknown activation '" + std::string(s) + "' (expected relu|silu)");
}

std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "silu"; }

Matrix timestep_embedding(std::span<const int> ts, int embed_dim) {
    if (embed_dim < 2 || embed_dim % 2 != 0)
        throw ConfigError("timestep_embedding: embed_dim must be even and >= 2");
    int half = embed_dim / 2;
    Matrix m(ts.size(), static_cast<std::size_t>(embed_dim));
    for (std::size_t i = 0; i < ts.size(); ++i) {
        double t = static_cast<double>(ts[i]);
        for (int k = 0; k < half; ++k) {
            double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) /
                                   static_cast<double>(std::max(1, half - 1)));
            m(i, static_cast<std::size_t>(k)) = std::sin(t * freq);
            m(i, static_cast<std::size_t>(half + k)) = std::cos(t * freq);
        }
    }
    return m;
}

ParamVector EpsModel::make_layout(const EpsModelSpec& spec) {
    if (spec.data_dim < 1) throw ConfigError("EpsModel: data_dim must be >= 1");
    ParamVector p;
    std::size_t in = static_cast<std::size_t>(spec.data_dim + spec.embed_dim);
    for (std::size_t k = 0; k < spec.hidden.size(); ++k) {
        std::size_t out = static_cast<std::size_t>(spec.hidden[k]);
        std::string base = "layer" + std::to_string(k);
        p.add_segment(base + ".weight", {out, in});
        p.add_segment(base + ".bias", {out});
        in = out;
    }
    p.add_segment("out.weight", {static_cast<std::size_t>(spec.data_dim), in});
    p.add_segment("out.bias", {static_cast<std::size_t>(spec.data_dim)});
    return p;
}

EpsModel::EpsModel(EpsModelSpec spec, ParamVector params)
    : spec_(std::move(spec)), params_(std::move(params)) {
    make_layout(spec_).require_same_layout(params_, "EpsModel");
}

EpsModel EpsModel::init(const EpsModelSpec& spec, Rng& rng) {
    ParamVector p = make_layout(spec);
    for (std::size_t s = 0; s < p.segments().size(); ++s) {
        const numerics::Segment& seg = p.segment(s);
        std::span<float> vals = p.segment_values(s);
        if (seg.shape.size() == 2) {
            double fan_in = static_cast<double>(seg.shape[1]);
            bool output_layer = seg.name == "out.weight";
            double std_dev = std::sqrt((output_layer ? 1.0 : 2.0) / fan_in);
            for (float& v : vals) v = static_cast<float>(std_dev * rng.gaussian());
        }
        // biases stay zero
    }
    return EpsModel(spec, std::move(p));
}

void EpsModel::set_params(ParamVector p) {
    params_.require_same_layout(p, "EpsModel::set_params");
    params_ = std::move(p);
}

Graph::Id EpsModel::build(Graph& g, Graph::Id x_node, std::span<const int> ts) const {
    Graph::Id emb = g.input(timestep_embedding(ts, spec_.embed_dim));
    Graph::Id h = g.concat_cols(x_node, emb);
    for (std::size_t k = 0; k < spec_.hidden.size(); ++k) {
        std::string base = "layer" + std::to_string(k);
        h = g.affine(h, g.param(base + ".weight"), g.param(base + ".bias"));
        h = spec_.act == Activation::relu ? g.relu(h) : g.silu(h);
    }
    return g.affine(h, g.param("out.weight"), g.param("out.bias"));
}

Matrix EpsModel::forward(const EpsModelSpec& spec, const ParamVector& params, const Matrix& x,
                         std::span<const int> ts) {
    EpsModel m(spec, params);
    Graph g(params);
    Graph::Id out = m.build(g, g.input(x), ts);
    return g.value(out);
}

Matrix EpsModel::forward(const Matrix& x, std::span<const int> ts) const {
    Graph g(params_);
    Graph::Id out = build(g, g.input(x), ts);
    return g.value(out);
}

// ---------------------------------------------------------------------------
// Toy datasets
// ---------------------------------------------------------------------------

ToyKind toy_kind_from_string(std::string_view s) {
    if (s == "gaussian-mixture-8") return ToyKind::gaussian_mixture_8;
    if (s == "swiss-roll") return ToyKind::swiss_roll;
    if (s == "checkerboard") return ToyKind::checkerboard;
    throw ConfigError("unknown dataset kind '" + std::string(s) + "'");
}

std::string to_string(ToyKind k) {
    switch (k) {
    case ToyKind::gaussian_mixture_8: return "gaussian-mixture-8";
    case ToyKind::swiss_roll: return "swiss-roll";
    case ToyKind::checkerboard: return "checkerboard";
    }
    return "?";
}

Tensor ToyDataset::sample(Rng& rng, std::size_t n) const {
    Tensor out = Tensor::zeros({n, 2});
    switch (kind_) {
    case ToyKind::gaussian_mixture_8: {
        constexpr double radius = 0.75, sigma = 0.05;
        for (std::size_t i = 0; i < n; ++i) {
            std::uint64_t c = rng.below(8);
            double angle = 2.0 * M_PI * static_cast<double>(c) / 8.0;
            out.at(i, 0) = static_cast<float>(radius * std::cos(angle) + sigma * rng.gaussian());
            out.at(i, 1) = static_cast<float>(radius * std::sin(angle) + sigma * rng.gaussian());
        }
        break;
    }
    case ToyKind::swiss_roll: {
        constexpr double turns_lo = 1.5 * M_PI, turns_hi = 4.5 * M_PI, noise = 0.01;
        for (std::size_t i = 0; i < n; ++i) {
            double t = turns_lo + (turns_hi - turns_lo) * rng.uniform();
            out.at(i, 0) =
                static_cast<float>(t * std::cos(t) / turns_hi + noise * rng.gaussian());
            out.at(i, 1) =
                static_cast<float>(t * std::sin(t) / turns_hi + noise * rng.gaussian());
        }
        break;
    }
    case ToyKind::checkerboard: {
        // black cells of a 4x4 board over [-1, 1]^2
        for (std::size_t i = 0; i < n; ++i) {
            std::uint64_t c = rng.below(8);
            std::uint64_t row = c / 2;
            std::uint64_t col = 2 * (c % 2) + (row % 2);  // (row+col) even
            out.at(i, 0) = static_cast<float>(-1.0 + (static_cast<double>(col) + rng.uniform()) * 0.5);
            out.at(i, 1) = static_cast<float>(-1.0 + (static_cast<double>(row) + rng.uniform()) * 0.5);
        }
        break;
    }
    }
    return out;
}

Tensor IsotropicGaussianData::sample(Rng& rng, std::size_t n) const {
    Tensor out = gaussian_sample(rng, {n, static_cast<std::size_t>(dim_)});
    for (float& v : out.data) v = static_cast<float>(stddev_ * static_cast<double>(v));
    return out;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

LossSample draw_loss_sample(const Tensor& batch, const NoiseSchedule& sched, Rng& rng,
                            double ip_strength) {
    if (batch.rows() == 0) throw ConfigError("diffusion_loss: empty batch");
    if (ip_strength < 0.0) throw ConfigError("diffusion_loss: ip_strength must be >= 0");
    std::size_t n = batch.rows();
    std::size_t d = batch.cols();
    LossSample s;
    s.x_input = Matrix(n, d);
    s.target = Matrix(n, d);
    s.t.resize(n);
    std::vector<double> eps(d), xi(d);
    for (std::size_t i = 0; i < n; ++i) {
        int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.T)));
        s.t[i] = t;
        rng.fill_gaussian(std::span<double>(eps));
        if (ip_strength > 0.0) rng.fill_gaussian(std::span<double>(xi));
        double ab = sched.alpha_bar_at(t);
        double sa = std::sqrt(ab);
        double sn = std::sqrt(1.0 - ab);
        for (std::size_t j = 0; j < d; ++j) {
            double noise = ip_strength > 0.0 ? eps[j] + ip_strength * xi[j] : eps[j];
            s.x_input(i, j) = sa * static_cast<double>(batch.at(i, j)) + sn * noise;
            s.target(i, j) = eps[j];
        }
    }
    return s;
}

double loss_on_sample(const EpsModelSpec& spec, const ParamVector& params,
                      const LossSample& sample) {
    EpsModel m(spec, params);
    Graph g(params);
    Graph::Id pred = m.build(g, g.input(sample.x_input), sample.t);
    Graph::Id loss = g.mse(pred, g.input(sample.target));
    return g.scalar(loss);
}

GradResult loss_grad_on_sample(const EpsModelSpec& spec, const ParamVector& params,
                               const LossSample& sample) {
    EpsModel m(spec, params);
    return numerics::grad(
        [&](Graph& g) {
            Graph::Id pred = m.build(g, g.input(sample.x_input), sample.t);
            return g.mse(pred, g.input(sample.target));
        },
        params);
}

double diffusion_loss(const EpsModel& model, const Tensor& batch, const NoiseSchedule& sched,
                      Rng& rng, double ip_strength) {
    LossSample s = draw_loss_sample(batch, sched, rng, ip_strength);
    return loss_on_sample(model.spec(), model.params(), s);
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

Matrix EpsPredictor::predict_at(const Matrix& x, int t) const {
    std::vector<int> ts(x.rows, t);
    return predict(x, ts);
}

Matrix ModelPredictor::predict(const Matrix& x, std::span<const int> ts) const {
    return EpsModel::forward(spec_, params_, x, ts);
}

AnalyticGaussianEps::AnalyticGaussianEps(double c, const NoiseSchedule& sched)
    : c_(c), sched_(&sched) {
    if (!(c > 0.0)) throw ConfigError("AnalyticGaussianEps: c must be > 0");
}

Matrix AnalyticGaussianEps::predict(const Matrix& x, std::span<const int> ts) const {
    Matrix out(x.rows, x.cols);
    for (std::size_t i = 0; i < x.rows; ++i) {
        double ab = sched_->alpha_bar_at(ts[i]);
        double coef = std::sqrt(1.0 - ab) / (ab * c_ * c_ + 1.0 - ab);
        for (std::size_t j = 0; j < x.cols; ++j) out(i, j) = coef * x(i, j);
    }
    return out;
}

namespace {

void check_finite_state(const Matrix& x, int step_index) {
    for (double v : x.v)
        if (!std::isfinite(v))
            throw NumericError("sampling diverged at reverse step index " +
                               std::to_string(step_index));
}

} // namespace

Matrix run_reverse_chain(const EpsPredictor& model, Matrix x, const NoiseSchedule& sched,
                         const RespacingMap& respacing, Rng& rng, const ChainObserver& observer) {
    std::size_t n = x.rows, d = x.cols;
    std::vector<double> z(d);
    for (int k = respacing.t_prime; k >= 1; --k) {
        int t = respacing.indices[static_cast<std::size_t>(k - 1)];
        double ab = sched.alpha_bar_at(t);
        double ab_prev = k > 1 ? sched.alpha_bar_at(respacing.indices[static_cast<std::size_t>(k - 2)])
                               : 1.0;
        double beta_eff = 1.0 - ab / ab_prev;
        double alpha_eff = ab / ab_prev;
        double beta_tilde = (1.0 - ab_prev) / (1.0 - ab) * beta_eff;
        double eps_coef = beta_eff / std::sqrt(1.0 - ab);
        double inv_sqrt_alpha = 1.0 / std::sqrt(alpha_eff);
        Matrix eps_hat = model.predict_at(x, t);
        double noise_scale = k > 1 ? std::sqrt(beta_tilde) : 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (noise_scale > 0.0) rng.fill_gaussian(std::span<double>(z));
            for (std::size_t j = 0; j < d; ++j) {
                double mean = inv_sqrt_alpha * (x(i, j) - eps_coef * eps_hat(i, j));
                x(i, j) = noise_scale > 0.0 ? mean + noise_scale * z[j] : mean;
            }
        }
        check_finite_state(x, k);
        if (observer) observer(k, t, eps_hat, x);
    }
    return x;
}

Tensor ddpm_sample(const EpsPredictor& model, std::size_t n, int dim, const NoiseSchedule& sched,
                   const RespacingMap& respacing, Rng& rng) {
    if (respacing.indices.empty() || respacing.indices.back() != sched.T)
        throw ConfigError("ddpm_sample: respacing does not end at T");
    if (model.dim() >= 0 && model.dim() != dim)
        throw LayoutError("ddpm_sample: predictor dimension mismatch");
    Matrix x(n, static_cast<std::size_t>(dim));
    rng.fill_gaussian(std::span<double>(x.v));
    return run_reverse_chain(model, std::move(x), sched, respacing, rng).to_tensor();
}

Tensor ddpm_sample_from(const EpsPredictor& model, const Tensor& latents,
                        const NoiseSchedule& sched, const RespacingMap& respacing, Rng& rng) {
    if (respacing.indices.empty() || respacing.indices.back() != sched.T)
        throw ConfigError("ddpm_sample_from: respacing does not end at T");
    Matrix x = Matrix::from_tensor(latents);
    return run_reverse_chain(model, std::move(x), sched, respacing, rng).to_tensor();
}

void write_samples_csv(const Tensor& samples, const std::string& path,
                       const std::string& meta_comment) {
    std::ofstream f(path);
    if (!f) throw ConfigError("cannot open '" + path + "' for writing");
    if (!meta_comment.empty()) f << "# " << meta_comment << "\n";
    f << "sample_id";
    for (std::size_t j = 0; j < samples.cols(); ++j) f << ",dim" << j;
    f << "\n";
    for (std::size_t i = 0; i < samples.rows(); ++i) {
        f << i;
        for (std::size_t j = 0; j < samples.cols(); ++j) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(samples.at(i, j)));
            f << ',' << buf;
        }
        f << "\n";
    }
}

} // namespace flatdiff::diffusion
