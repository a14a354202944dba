#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "flatdiff/harness.hpp"
#include "flatdiff/theory.hpp"

namespace fs = std::filesystem;
using namespace flatdiff;

namespace {

harness::RunConfig load_config(const std::string& path) {
    if (path.empty()) return harness::RunConfig{};
    return harness::RunConfig::from_file(path);
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, ','))
        if (!part.empty()) out.push_back(part);
    return out;
}

std::vector<int> split_csv_int(const std::string& s, const char* what) {
    std::vector<int> out;
    for (const std::string& p : split_csv(s)) {
        try {
            out.push_back(std::stoi(p));
        } catch (const std::exception&) {
            throw UsageError(std::string(what) + ": '" + p + "' is not an integer");
        }
    }
    return out;
}

int run(int argc, char** argv) {
    CLI::App app{"flatdiff: a desk-scale laboratory for flat minima in diffusion models"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "out", ckpt_path, run_dir;
    std::uint64_t seed = 0;

    auto add_common = [&](CLI::App* sub, bool needs_ckpt) {
        sub->add_option("--config", config_path, "config file (key = value lines)");
        sub->add_option("--seed", seed, "master seed");
        sub->add_option("--out", out_dir, "output directory");
        if (needs_ckpt) sub->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
    };

    // train
    auto* train = app.add_subcommand("train", "train a model and write checkpoints");
    bool resume = false;
    add_common(train, false);
    train->add_flag("--resume", resume, "continue from snapshots/latest.ckpt");

    // eval
    auto* eval = app.add_subcommand("eval", "emit report files for a checkpoint");
    std::string metrics_csv = "loss,lpf,distance";
    add_common(eval, true);
    eval->add_option("--metrics", metrics_csv, "comma list: loss,lpf,curve,surface,samples,distance");

    // quantize-sweep
    auto* qsweep = app.add_subcommand("quantize-sweep",
                                      "distance sweep over bit widths and respacings");
    std::string bits_csv = "32,8,4", respacings_csv = "20,100";
    qsweep->add_option("--config", config_path, "config file");
    qsweep->add_option("--seed", seed, "master seed");
    qsweep->add_option("--run", run_dir, "run directory with final/ema/swa checkpoints")
        ->required();
    qsweep->add_option("--out", out_dir, "output directory (default: the run directory)");
    qsweep->add_option("--bits", bits_csv, "bit widths");
    qsweep->add_option("--respacings", respacings_csv, "respaced chain lengths");

    // exposure
    auto* exposure = app.add_subcommand("exposure", "exposure-bias profile along the chain");
    int exposure_n = 2000;
    add_common(exposure, true);
    exposure->add_option("--n", exposure_n, "trajectories per estimate");

    // flatness
    auto* flat = app.add_subcommand("flatness", "LPF metric and loss-vs-perturbation curve");
    add_common(flat, true);

    // surface
    auto* surface = app.add_subcommand("surface", "2-D loss-surface grid");
    double extent_frac = 0.02;
    int resolution = 21;
    add_common(surface, true);
    surface->add_option("--extent-frac", extent_frac, "grid extent as a fraction of ||params||");
    surface->add_option("--resolution", resolution, "grid resolution per axis");

    // attack
    auto* attack = app.add_subcommand("attack", "adversarial initial-latent evaluation");
    double strength = 0.05;
    std::string mults_csv = "1,7";
    int attack_steps = 10;
    int attack_n = 2000;
    add_common(attack, true);
    attack->add_option("--strength", strength, "attack strength");
    attack->add_option("--mult", mults_csv, "strength multipliers");
    attack->add_option("--steps", attack_steps, "ascent steps");
    attack->add_option("--n", attack_n, "latents");

    // theory-verify
    auto* verify = app.add_subcommand("theory-verify", "certify the theory identities");
    bool quick = false;
    verify->add_option("--seed", seed, "certification seed");
    verify->add_option("--out", out_dir, "output directory");
    verify->add_flag("--quick", quick, "reduced sample counts");

    // report
    auto* report = app.add_subcommand("report", "merge run directories into comparison tables");
    std::vector<std::string> report_dirs;
    report->add_option("dirs", report_dirs, "run directories")->required();
    report->add_option("--out", out_dir, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;  // --help exits 0, any parse failure is usage
    }

    if (train->parsed()) {
        harness::RunConfig cfg = load_config(config_path);
        harness::TrainResult res = harness::cmd_train(cfg, seed, out_dir, resume);
        std::printf("trained %lld steps; final loss %.6f; run dir %s\n",
                    static_cast<long long>(cfg.train_steps), res.final_loss,
                    res.run_dir.string().c_str());
        return 0;
    }

    if (eval->parsed()) {
        harness::RunConfig cfg = load_config(config_path);
        harness::cmd_eval(ckpt_path, cfg, seed, out_dir, split_csv(metrics_csv));
        std::printf("reports written to %s\n", out_dir.c_str());
        return 0;
    }

    if (qsweep->parsed()) {
        harness::RunConfig cfg = load_config(config_path);
        fs::path run(run_dir);
        fs::path out = qsweep->count("--out") ? fs::path(out_dir) : run;
        fs::create_directories(out);
        std::vector<std::pair<std::string, numerics::ParamVector>> variants;
        for (const char* name : {"plain", "ema", "swa"}) {
            fs::path p = run / (std::string(name) == "plain" ? "final.ckpt"
                                                             : std::string(name) + ".ckpt");
            if (fs::exists(p)) variants.emplace_back(name, harness::load_checkpoint(p).params);
        }
        if (variants.empty())
            throw UsageError("quantize-sweep: no final/ema/swa checkpoints in " + run.string());
        harness::Checkpoint head = harness::load_checkpoint(run / "final.ckpt");
        harness::EvalContext ctx = harness::EvalContext::make(cfg, seed);
        std::vector<int> bits = split_csv_int(bits_csv, "--bits");
        std::vector<int> respacings = split_csv_int(respacings_csv, "--respacings");
        numerics::Rng rng =
            numerics::Rng(seed).stream("quantize-sweep");
        auto cells = robustness::robustness_sweep(variants, head.spec, ctx.sched, bits,
                                                  respacings, ctx.target_samples,
                                                  static_cast<std::size_t>(cfg.eval_samples),
                                                  cfg.eval_projections, rng);
        robustness::write_sweep_csv(cells, (out / "sweep.csv").string(),
                                    harness::report_meta(cfg, seed));
        std::printf("sweep written to %s\n", (out / "sweep.csv").string().c_str());
        return 0;
    }

    if (exposure->parsed()) {
        harness::RunConfig cfg = load_config(config_path);
        harness::Checkpoint ckpt = harness::load_checkpoint(ckpt_path);
        fs::create_directories(out_dir);
        diffusion::NoiseSchedule sched = cfg.schedule();
        diffusion::ModelPredictor pred(ckpt.spec, ckpt.params);
        auto dataset = cfg.make_dataset();
        diffusion::RespacingMap map = diffusion::even_respacing(sched.T, cfg.eval_respacing);
        numerics::Rng rng = numerics::Rng(seed).stream("exposure");
        robustness::EpsNormProfile profile = robustness::exposure_profile(
            pred, *dataset, sched, map, rng, static_cast<std::size_t>(exposure_n));
        robustness::write_profile_csv(profile, (fs::path(out_dir) / "exposure.csv").string(),
                                      harness::report_meta(cfg, seed));
        nlohmann::json j;
        j["gap"] = profile.gap;
        j["gap_se"] = profile.gap_se;
        j["end_signed"] = profile.end_signed;
        j["config_hash"] = cfg.hash();
        j["seed"] = seed;
        std::ofstream f(fs::path(out_dir) / "exposure.json");
        f << j.dump(2) << "\n";
        std::printf("exposure gap %.4f (+-%.4f)\n", profile.gap, profile.gap_se);
        return 0;
    }

    if (flat->parsed()) {
        harness::RunConfig cfg = load_config(config_path);
        harness::cmd_eval(ckpt_path, cfg, seed, out_dir, {"lpf", "curve"});
        std::printf("flatness reports written to %s\n", out_dir.c_str());
        return 0;
    }

    if (surface->parsed()) {
        harness::RunConfig cfg = load_config(config_path);
        harness::Checkpoint ckpt = harness::load_checkpoint(ckpt_path);
        fs::create_directories(out_dir);
        harness::EvalContext ctx = harness::EvalContext::make(cfg, seed);
        numerics::Rng rng = numerics::Rng(seed).stream("surface");
        auto grid = flatness::loss_surface_grid(ctx.loss_fn(ckpt.spec), ckpt.params,
                                                extent_frac * ckpt.params.norm(), resolution,
                                                rng);
        flatness::write_surface_csv(grid, (fs::path(out_dir) / "surface.csv").string(),
                                    harness::report_meta(cfg, seed));
        std::printf("surface written to %s\n", out_dir.c_str());
        return 0;
    }

    if (attack->parsed()) {
        harness::RunConfig cfg = load_config(config_path);
        harness::Checkpoint ckpt = harness::load_checkpoint(ckpt_path);
        fs::create_directories(out_dir);
        harness::EvalContext ctx = harness::EvalContext::make(cfg, seed);
        diffusion::EpsModel model(ckpt.spec, ckpt.params);
        diffusion::ModelPredictor pred(ckpt.spec, ckpt.params);
        diffusion::RespacingMap map = diffusion::even_respacing(ctx.sched.T, cfg.eval_respacing);
        nlohmann::json out = nlohmann::json::array();
        for (int mult : split_csv_int(mults_csv, "--mult")) {
            numerics::Rng rng = numerics::Rng(seed).stream("attack", static_cast<std::uint64_t>(mult));
            robustness::AttackResult res = robustness::latent_attack(
                model, ctx.sched, map, strength * mult, attack_steps, rng,
                static_cast<std::size_t>(attack_n));
            numerics::Rng srng = rng.stream("chains");
            numerics::Tensor clean_samples =
                diffusion::ddpm_sample_from(pred, res.clean, ctx.sched, map, srng);
            numerics::Rng srng2 = rng.stream("chains");  // identical chain noise for both
            numerics::Tensor attacked_samples =
                diffusion::ddpm_sample_from(pred, res.attacked, ctx.sched, map, srng2);
            numerics::Rng w2_rng = rng.stream("w2");
            double d_clean = robustness::sliced_w2(clean_samples, ctx.target_samples,
                                                   cfg.eval_projections, w2_rng);
            numerics::Rng w2_rng2 = rng.stream("w2");
            double d_attacked = robustness::sliced_w2(attacked_samples, ctx.target_samples,
                                                      cfg.eval_projections, w2_rng2);
            nlohmann::json j;
            j["multiplier"] = mult;
            j["strength"] = strength * mult;
            j["distance_clean"] = d_clean;
            j["distance_attacked"] = d_attacked;
            j["degradation"] = d_attacked - d_clean;
            j["loss_before"] = res.loss_before;
            j["loss_after"] = res.loss_after;
            out.push_back(j);
            std::printf("attack x%d: distance %.4f -> %.4f (%+.4f)\n", mult, d_clean, d_attacked,
                        d_attacked - d_clean);
        }
        nlohmann::json root;
        root["results"] = out;
        root["config_hash"] = cfg.hash();
        root["seed"] = seed;
        std::ofstream f(fs::path(out_dir) / "attack.json");
        f << root.dump(2) << "\n";
        return 0;
    }

    if (verify->parsed()) {
        fs::create_directories(out_dir);
        theory::CertificationReport rep = theory::run_certification(seed, quick);
        theory::write_certification_json(rep, (fs::path(out_dir) / "theory_certification.json").string(),
                                         seed);
        for (const theory::CertCheck& c : rep.checks)
            std::printf("[%s] %-24s measured %.3e (tolerance %.3e)\n", c.pass ? "PASS" : "FAIL",
                        c.name.c_str(), c.measured, c.tolerance);
        if (!rep.all_pass())
            throw InvariantError("theory certification failed; see theory_certification.json");
        return 0;
    }

    if (report->parsed()) {
        std::vector<fs::path> dirs(report_dirs.begin(), report_dirs.end());
        harness::cmd_report(dirs, out_dir);
        std::printf("report written to %s\n", out_dir.c_str());
        return 0;
    }

    return 0;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const UsageError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 2;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const InvariantError& e) {
        std::fprintf(stderr, "invariant violation: %s\n", e.what());
        return 4;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return 3;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
