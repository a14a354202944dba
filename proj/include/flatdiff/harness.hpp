#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "flatdiff/diffusion.hpp"
#include "flatdiff/flatness.hpp"
#include "flatdiff/optim.hpp"
#include "flatdiff/robustness.hpp"

namespace flatdiff::harness {

namespace fs = std::filesystem;
using numerics::ParamVector;
using numerics::Rng;
using numerics::Tensor;

// ---------------------------------------------------------------------------
// Run configuration: flat typed key-value text with dotted section keys.
// Unknown keys are hard errors.
// ---------------------------------------------------------------------------

struct RunConfig {
    std::string dataset_kind = "gaussian-mixture-8";
    int schedule_steps = 1000;
    double beta1 = 1e-4;
    double beta_t = 0.02;
    std::vector<int> hidden = {64, 64};
    int embed_dim = 32;
    std::string activation = "silu";
    std::string optim_kind = "adam";
    double lr = 1e-4;
    double sam_rho = 0.0;
    std::int64_t swa_cycle = -1;  // -1: scaled from the 200K-step reference schedule
    std::int64_t swa_start = -1;  // -1: 90% of train.steps
    double ema_lambda = 1e-4;
    double ip_strength = 0.0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::int64_t train_steps = 20000;
    int batch = 256;
    std::int64_t snapshot_every = 1000;
    std::int64_t log_every = 200;
    int eval_batch = 2048;
    int eval_lpf_m = 32;
    double eval_lpf_sigma = 0.0;  // 0: 0.01 * parameter RMS
    int eval_samples = 4000;
    int eval_projections = 64;
    int eval_respacing = 20;

    static RunConfig from_file(const fs::path& path);
    static RunConfig from_text(const std::string& text);

    std::string canonical_text() const;
    std::uint64_t hash() const;

    // Resolved desk-scale SWA schedule.
    std::int64_t resolved_swa_start() const;
    std::int64_t resolved_swa_cycle() const;

    diffusion::EpsModelSpec model_spec() const;
    diffusion::NoiseSchedule schedule() const;
    optim::OptimConfig optim_config() const;
    std::unique_ptr<diffusion::DataSampler> make_dataset() const;

    // "ADM", "+IP", or "+SAM" depending on the training scheme.
    std::string algorithm_label() const;

    void validate() const;
};

// ---------------------------------------------------------------------------
// Checkpoints: magic "FLATDIFF1", version, architecture + schedule
// descriptors, segment table, little-endian float32 payload, optional
// averager/optimizer/meta trailers. Round-trips bitwise.
// ---------------------------------------------------------------------------

struct Checkpoint {
    diffusion::EpsModelSpec spec;
    int schedule_steps = 0;
    double beta1 = 0.0;
    double beta_t = 0.0;
    ParamVector params;

    bool has_swa = false;
    std::int64_t swa_n_models = 0;
    std::vector<double> swa;

    bool has_ema = false;
    std::vector<double> ema;

    bool has_adam = false;
    std::int64_t adam_t = 0;
    std::vector<double> adam_m;
    std::vector<double> adam_v;

    bool has_meta = false;
    std::int64_t step = 0;
    std::uint64_t run_seed = 0;
    std::uint64_t sam_zero_grad_events = 0;
};

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path);
Checkpoint load_checkpoint(const fs::path& path);

// ---------------------------------------------------------------------------
// Metrics log: append-only CSV, valid at every flush point.
// ---------------------------------------------------------------------------

class MetricsLog {
public:
    MetricsLog(const fs::path& path, bool append);
    void row(std::int64_t step, double loss, double lpf_spot, double wall_time);

private:
    std::ofstream out_;
};

// ---------------------------------------------------------------------------
// Training / evaluation / reporting drivers
// ---------------------------------------------------------------------------

struct TrainResult {
    ParamVector final_params;
    ParamVector ema_params;
    ParamVector swa_params;
    std::int64_t swa_n_models = 0;
    std::uint64_t sam_zero_grad_events = 0;
    double final_loss = 0.0;
    fs::path run_dir;
};

// Trains per config under out_dir (config copy, metrics.csv, snapshot series,
// final/ema/swa checkpoints, run_meta.json). A lock file guards the directory
// against concurrent trainers. With resume = true, continues from
// snapshots/latest.ckpt to cfg.train_steps. stop_after >= 0 halts the loop at
// that step without finalizing (simulates an interrupted run).
TrainResult cmd_train(const RunConfig& cfg, std::uint64_t seed, const fs::path& out_dir,
                      bool resume = false, std::int64_t stop_after = -1);

// Frozen evaluation context shared by every model under comparison.
struct EvalContext {
    RunConfig cfg;
    std::uint64_t seed = 0;
    diffusion::NoiseSchedule sched;
    diffusion::LossSample eval_set;
    Tensor target_samples;

    static EvalContext make(const RunConfig& cfg, std::uint64_t seed);
    double loss_of(const diffusion::EpsModelSpec& spec, const ParamVector& params) const;
    flatness::LossFn loss_fn(const diffusion::EpsModelSpec& spec) const;
};

// Writes the requested report files next to the checkpoint. Valid metric
// names: loss, lpf, curve, surface, samples, distance. Unknown names raise
// UsageError listing the valid set.
void cmd_eval(const fs::path& ckpt_path, const RunConfig& cfg, std::uint64_t seed,
              const fs::path& out_dir, const std::vector<std::string>& metrics);

// Merged comparison table over run directories; missing report files are
// listed and the partial table is still emitted.
void cmd_report(const std::vector<fs::path>& run_dirs, const fs::path& out_dir);

// Meta comment embedded at the top of emitted CSV reports.
std::string report_meta(const RunConfig& cfg, std::uint64_t seed);

} // namespace flatdiff::harness
