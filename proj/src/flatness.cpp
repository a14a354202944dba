#include "flatdiff/flatness.hpp"

#include <cmath>
#include <fstream>

#include "json.hpp"

namespace flatdiff::flatness {

namespace {

// Gaussian direction over the full flat vector, normalized to unit l2.
std::vector<double> unit_direction(std::size_t n, Rng& rng) {
    std::vector<double> u(n);
    rng.fill_gaussian(std::span<double>(u));
    double norm = 0.0;
    for (double v : u) norm += v * v;
    norm = std::sqrt(norm);
    if (norm == 0.0) throw NumericError("degenerate zero direction draw");
    for (double& v : u) v /= norm;
    return u;
}

ParamVector displaced(const ParamVector& params, std::span<const double> dir, double r) {
    ParamVector out = params;
    std::span<float> v = out.values();
    for (std::size_t i = 0; i < v.size(); ++i)
        v[i] = static_cast<float>(static_cast<double>(v[i]) + r * dir[i]);
    return out;
}

} // namespace

double default_lpf_sigma(const ParamVector& params) { return 0.01 * params.rms(); }

LpfResult lpf(const LossFn& loss, const ParamVector& params, const LpfConfig& cfg, Rng& rng) {
    if (cfg.mc_samples < 1) throw ConfigError("lpf: M must be >= 1");
    if (cfg.sigma < 0.0) throw ConfigError("lpf: sigma must be >= 0");
    LpfResult r;
    r.sigma = cfg.sigma;
    r.m = cfg.mc_samples;
    if (cfg.sigma == 0.0) {
        r.value = loss(params);
        r.m = 1;
        return r;
    }
    std::vector<double> kept;
    kept.reserve(static_cast<std::size_t>(cfg.mc_samples));
    std::vector<double> z(params.size());
    for (int i = 0; i < cfg.mc_samples; ++i) {
        rng.fill_gaussian(std::span<double>(z));
        ParamVector p = params;
        std::span<float> v = p.values();
        for (std::size_t j = 0; j < v.size(); ++j)
            v[j] = static_cast<float>(static_cast<double>(v[j]) + cfg.sigma * z[j]);
        double l = loss(p);
        if (std::isfinite(l))
            kept.push_back(l);
        else
            ++r.excluded;
    }
    if (kept.empty()) throw NumericError("lpf: every perturbed draw produced a non-finite loss");
    double mean = 0.0;
    for (double l : kept) mean += l;
    mean /= static_cast<double>(kept.size());
    double var = 0.0;
    for (double l : kept) var += (l - mean) * (l - mean);
    var = kept.size() > 1 ? var / static_cast<double>(kept.size() - 1) : 0.0;
    r.value = mean;
    r.stderr_ = std::sqrt(var / static_cast<double>(kept.size()));
    return r;
}

std::vector<CurvePoint> perturbation_curve(const LossFn& loss, const ParamVector& params,
                                           std::span<const double> radii, int k, Rng& rng) {
    if (k < 1) throw ConfigError("perturbation_curve: K must be >= 1");
    for (std::size_t i = 1; i < radii.size(); ++i)
        if (!(radii[i] > radii[i - 1]))
            throw ConfigError("perturbation_curve: radii must be strictly ascending");
    std::vector<CurvePoint> curve;
    curve.reserve(radii.size());
    double base = loss(params);
    for (std::size_t ri = 0; ri < radii.size(); ++ri) {
        double r = radii[ri];
        CurvePoint pt;
        pt.radius = r;
        pt.k = k;
        if (r == 0.0) {
            pt.mean_loss = base;
            pt.std_loss = 0.0;
            curve.push_back(pt);
            continue;
        }
        Rng dir_rng = rng.stream("curve-dirs", ri);
        double mean = 0.0, m2 = 0.0;
        int kept = 0;
        for (int j = 0; j < k; ++j) {
            std::vector<double> u = unit_direction(params.size(), dir_rng);
            double l = loss(displaced(params, u, r));
            if (!std::isfinite(l)) continue;
            ++kept;
            double d = l - mean;
            mean += d / kept;
            m2 += d * (l - mean);
        }
        if (kept == 0)
            throw NumericError("perturbation_curve: all directions non-finite at r=" +
                               std::to_string(r));
        pt.mean_loss = mean;
        pt.std_loss = kept > 1 ? std::sqrt(m2 / static_cast<double>(kept - 1)) : 0.0;
        pt.k = kept;
        curve.push_back(pt);
    }
    return curve;
}

SurfaceGrid loss_surface_grid(const LossFn& loss, const ParamVector& params, double extent,
                              int resolution, Rng& rng) {
    if (resolution < 2) throw ConfigError("loss_surface_grid: resolution must be >= 2");
    if (!(extent > 0.0)) throw ConfigError("loss_surface_grid: extent must be > 0");
    SurfaceGrid grid;
    grid.extent = extent;
    grid.resolution = resolution;
    grid.direction_seed = rng.stream("surface-dirs").next_u64();
    Rng dir_rng = rng.stream("surface-dirs");
    std::vector<double> u = unit_direction(params.size(), dir_rng);
    std::vector<double> v = unit_direction(params.size(), dir_rng);
    // Gram-Schmidt
    double dot = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) dot += u[i] * v[i];
    double norm = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] -= dot * u[i];
        norm += v[i] * v[i];
    }
    norm = std::sqrt(norm);
    if (norm == 0.0) throw NumericError("loss_surface_grid: parallel direction draws");
    for (double& x : v) x /= norm;

    grid.coords.resize(static_cast<std::size_t>(resolution));
    for (int i = 0; i < resolution; ++i)
        grid.coords[static_cast<std::size_t>(i)] =
            -extent + 2.0 * extent * static_cast<double>(i) / static_cast<double>(resolution - 1);
    // an odd resolution puts 0 exactly on the axis
    if (resolution % 2 == 1) grid.coords[static_cast<std::size_t>(resolution / 2)] = 0.0;

    grid.losses.resize(static_cast<std::size_t>(resolution) * static_cast<std::size_t>(resolution));
    std::vector<double> dir(params.size());
    for (int i = 0; i < resolution; ++i) {
        double a = grid.coords[static_cast<std::size_t>(i)];
        for (int j = 0; j < resolution; ++j) {
            double b = grid.coords[static_cast<std::size_t>(j)];
            for (std::size_t s = 0; s < dir.size(); ++s) dir[s] = a * u[s] + b * v[s];
            double l = loss(displaced(params, dir, 1.0));
            grid.losses[static_cast<std::size_t>(i) * static_cast<std::size_t>(resolution) +
                        static_cast<std::size_t>(j)] = l;
        }
    }
    return grid;
}

void write_curve_csv(const std::vector<CurvePoint>& curve, const std::string& path,
                     const std::string& meta_comment) {
    std::ofstream f(path);
    if (!f) throw ConfigError("cannot open '" + path + "' for writing");
    if (!meta_comment.empty()) f << "# " << meta_comment << "\n";
    f << "radius,mean_loss,std_loss,k\n";
    for (const CurvePoint& p : curve)
        f << p.radius << ',' << p.mean_loss << ',' << p.std_loss << ',' << p.k << "\n";
}

void write_surface_csv(const SurfaceGrid& grid, const std::string& path,
                       const std::string& meta_comment) {
    std::ofstream f(path);
    if (!f) throw ConfigError("cannot open '" + path + "' for writing");
    if (!meta_comment.empty()) f << "# " << meta_comment << "\n";
    f << "i,j,u_coord,v_coord,loss\n";
    for (int i = 0; i < grid.resolution; ++i)
        for (int j = 0; j < grid.resolution; ++j)
            f << i << ',' << j << ',' << grid.coords[static_cast<std::size_t>(i)] << ','
              << grid.coords[static_cast<std::size_t>(j)] << ',' << grid.at(i, j) << "\n";
}

void write_lpf_json(const LpfResult& r, const std::string& path, std::uint64_t config_hash,
                    std::uint64_t seed) {
    nlohmann::json j;
    j["sigma"] = r.sigma;
    j["m"] = r.m;
    j["value"] = r.value;
    j["stderr"] = r.stderr_;
    j["exclusions"] = r.excluded;
    j["config_hash"] = config_hash;
    j["seed"] = seed;
    std::ofstream f(path);
    if (!f) throw ConfigError("cannot open '" + path + "' for writing");
    f << j.dump(2) << "\n";
}

} // namespace flatdiff::flatness
