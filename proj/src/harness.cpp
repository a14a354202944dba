#include "flatdiff/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"

namespace flatdiff::harness {

// ---------------------------------------------------------------------------
// Config parsing
// ---------------------------------------------------------------------------

namespace {

enum class KeyType { integer, real, text, int_list };

struct KeySpec {
    const char* name;
    KeyType type;
};

// The full key registry; anything else in a config file is a hard error.
const KeySpec kKeys[] = {
    {"dataset.kind", KeyType::text},
    {"schedule.steps", KeyType::integer},
    {"schedule.beta1", KeyType::real},
    {"schedule.beta_t", KeyType::real},
    {"model.hidden", KeyType::int_list},
    {"model.embed_dim", KeyType::integer},
    {"model.activation", KeyType::text},
    {"optim.kind", KeyType::text},
    {"optim.lr", KeyType::real},
    {"optim.sam.rho", KeyType::real},
    {"optim.swa.cycle", KeyType::integer},
    {"optim.swa.start", KeyType::integer},
    {"optim.ema.lambda", KeyType::real},
    {"optim.ip.strength", KeyType::real},
    {"optim.adam.beta1", KeyType::real},
    {"optim.adam.beta2", KeyType::real},
    {"optim.adam.eps", KeyType::real},
    {"train.steps", KeyType::integer},
    {"train.batch", KeyType::integer},
    {"train.snapshot_every", KeyType::integer},
    {"train.log_every", KeyType::integer},
    {"eval.batch", KeyType::integer},
    {"eval.lpf_m", KeyType::integer},
    {"eval.lpf_sigma", KeyType::real},
    {"eval.samples", KeyType::integer},
    {"eval.projections", KeyType::integer},
    {"eval.respacing", KeyType::integer},
};

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<int> parse_int_list(const std::string& v, const std::string& key) {
    std::vector<int> out;
    if (trim(v).empty()) return out;
    std::stringstream ss(v);
    std::string part;
    while (std::getline(ss, part, ',')) {
        part = trim(part);
        try {
            std::size_t pos = 0;
            int x = std::stoi(part, &pos);
            if (pos != part.size()) throw std::invalid_argument(part);
            out.push_back(x);
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "': '" + part + "' is not an integer");
        }
    }
    return out;
}

double parse_real(const std::string& v, const std::string& key) {
    try {
        std::size_t pos = 0;
        double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': '" + v + "' is not a real number");
    }
}

std::int64_t parse_int(const std::string& v, const std::string& key) {
    try {
        std::size_t pos = 0;
        long long x = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': '" + v + "' is not an integer");
    }
}

std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string fmt_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace

RunConfig RunConfig::from_file(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read config file '" + path.string() + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return from_text(ss.str());
}

RunConfig RunConfig::from_text(const std::string& text) {
    RunConfig cfg;
    std::set<std::string> seen;
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        std::size_t hash_pos = line.find('#');
        if (hash_pos != std::string::npos) line = line.substr(0, hash_pos);
        line = trim(line);
        if (line.empty()) continue;
        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        const KeySpec* spec = nullptr;
        for (const KeySpec& k : kKeys)
            if (key == k.name) {
                spec = &k;
                break;
            }
        if (!spec) throw ConfigError("unknown config key '" + key + "'");
        if (!seen.insert(key).second)
            throw ConfigError("duplicate config key '" + key + "'");

        if (key == "dataset.kind") cfg.dataset_kind = value;
        else if (key == "schedule.steps") cfg.schedule_steps = static_cast<int>(parse_int(value, key));
        else if (key == "schedule.beta1") cfg.beta1 = parse_real(value, key);
        else if (key == "schedule.beta_t") cfg.beta_t = parse_real(value, key);
        else if (key == "model.hidden") cfg.hidden = parse_int_list(value, key);
        else if (key == "model.embed_dim") cfg.embed_dim = static_cast<int>(parse_int(value, key));
        else if (key == "model.activation") cfg.activation = value;
        else if (key == "optim.kind") cfg.optim_kind = value;
        else if (key == "optim.lr") cfg.lr = parse_real(value, key);
        else if (key == "optim.sam.rho") cfg.sam_rho = parse_real(value, key);
        else if (key == "optim.swa.cycle") cfg.swa_cycle = parse_int(value, key);
        else if (key == "optim.swa.start") cfg.swa_start = parse_int(value, key);
        else if (key == "optim.ema.lambda") cfg.ema_lambda = parse_real(value, key);
        else if (key == "optim.ip.strength") cfg.ip_strength = parse_real(value, key);
        else if (key == "optim.adam.beta1") cfg.adam_beta1 = parse_real(value, key);
        else if (key == "optim.adam.beta2") cfg.adam_beta2 = parse_real(value, key);
        else if (key == "optim.adam.eps") cfg.adam_eps = parse_real(value, key);
        else if (key == "train.steps") cfg.train_steps = parse_int(value, key);
        else if (key == "train.batch") cfg.batch = static_cast<int>(parse_int(value, key));
        else if (key == "train.snapshot_every") cfg.snapshot_every = parse_int(value, key);
        else if (key == "train.log_every") cfg.log_every = parse_int(value, key);
        else if (key == "eval.batch") cfg.eval_batch = static_cast<int>(parse_int(value, key));
        else if (key == "eval.lpf_m") cfg.eval_lpf_m = static_cast<int>(parse_int(value, key));
        else if (key == "eval.lpf_sigma") cfg.eval_lpf_sigma = parse_real(value, key);
        else if (key == "eval.samples") cfg.eval_samples = static_cast<int>(parse_int(value, key));
        else if (key == "eval.projections") cfg.eval_projections = static_cast<int>(parse_int(value, key));
        else if (key == "eval.respacing") cfg.eval_respacing = static_cast<int>(parse_int(value, key));
    }
    cfg.validate();
    return cfg;
}

std::string RunConfig::canonical_text() const {
    std::ostringstream out;
    out << "dataset.kind = " << dataset_kind << "\n";
    out << "schedule.steps = " << schedule_steps << "\n";
    out << "schedule.beta1 = " << fmt_real(beta1) << "\n";
    out << "schedule.beta_t = " << fmt_real(beta_t) << "\n";
    out << "model.hidden = ";
    for (std::size_t i = 0; i < hidden.size(); ++i) out << (i ? "," : "") << hidden[i];
    out << "\n";
    out << "model.embed_dim = " << embed_dim << "\n";
    out << "model.activation = " << activation << "\n";
    out << "optim.kind = " << optim_kind << "\n";
    out << "optim.lr = " << fmt_real(lr) << "\n";
    out << "optim.sam.rho = " << fmt_real(sam_rho) << "\n";
    out << "optim.swa.cycle = " << swa_cycle << "\n";
    out << "optim.swa.start = " << swa_start << "\n";
    out << "optim.ema.lambda = " << fmt_real(ema_lambda) << "\n";
    out << "optim.ip.strength = " << fmt_real(ip_strength) << "\n";
    out << "optim.adam.beta1 = " << fmt_real(adam_beta1) << "\n";
    out << "optim.adam.beta2 = " << fmt_real(adam_beta2) << "\n";
    out << "optim.adam.eps = " << fmt_real(adam_eps) << "\n";
    out << "train.steps = " << train_steps << "\n";
    out << "train.batch = " << batch << "\n";
    out << "train.snapshot_every = " << snapshot_every << "\n";
    out << "train.log_every = " << log_every << "\n";
    out << "eval.batch = " << eval_batch << "\n";
    out << "eval.lpf_m = " << eval_lpf_m << "\n";
    out << "eval.lpf_sigma = " << fmt_real(eval_lpf_sigma) << "\n";
    out << "eval.samples = " << eval_samples << "\n";
    out << "eval.projections = " << eval_projections << "\n";
    out << "eval.respacing = " << eval_respacing << "\n";
    return out.str();
}

std::uint64_t RunConfig::hash() const { return fnv1a64(canonical_text()); }

std::int64_t RunConfig::resolved_swa_start() const {
    if (swa_start >= 0) return swa_start;
    return static_cast<std::int64_t>(0.9 * static_cast<double>(train_steps));
}

std::int64_t RunConfig::resolved_swa_cycle() const {
    if (swa_cycle >= 1) return swa_cycle;
    // c = 100 at the paper's 200K-step budget, scaled proportionally
    std::int64_t c = static_cast<std::int64_t>(
        std::llround(100.0 * static_cast<double>(train_steps) / 200000.0));
    return std::max<std::int64_t>(1, c);
}

diffusion::EpsModelSpec RunConfig::model_spec() const {
    diffusion::EpsModelSpec spec;
    spec.data_dim = 2;
    spec.hidden = hidden;
    spec.embed_dim = embed_dim;
    spec.act = diffusion::activation_from_string(activation);
    return spec;
}

diffusion::NoiseSchedule RunConfig::schedule() const {
    return diffusion::linear_schedule(schedule_steps, beta1, beta_t);
}

optim::OptimConfig RunConfig::optim_config() const {
    optim::OptimConfig oc;
    oc.kind = optim::base_kind_from_string(optim_kind);
    oc.lr = lr;
    oc.sam_rho = sam_rho;
    oc.swa_cycle = resolved_swa_cycle();
    oc.swa_start = resolved_swa_start();
    oc.ema_lambda = ema_lambda;
    oc.ip_strength = ip_strength;
    oc.adam_beta1 = adam_beta1;
    oc.adam_beta2 = adam_beta2;
    oc.adam_eps = adam_eps;
    return oc;
}

std::unique_ptr<diffusion::DataSampler> RunConfig::make_dataset() const {
    return std::make_unique<diffusion::ToyDataset>(diffusion::toy_kind_from_string(dataset_kind));
}

std::string RunConfig::algorithm_label() const {
    if (sam_rho > 0.0) return "+SAM";
    if (ip_strength > 0.0) return "+IP";
    return "ADM";
}

void RunConfig::validate() const {
    diffusion::toy_kind_from_string(dataset_kind);
    diffusion::activation_from_string(activation);
    if (schedule_steps < 1) throw ConfigError("schedule.steps must be >= 1");
    if (train_steps < 0) throw ConfigError("train.steps must be >= 0");
    if (batch < 1) throw ConfigError("train.batch must be >= 1");
    if (snapshot_every < 1) throw ConfigError("train.snapshot_every must be >= 1");
    if (log_every < 1) throw ConfigError("train.log_every must be >= 1");
    if (eval_respacing < 1 || eval_respacing > schedule_steps)
        throw ConfigError("eval.respacing must lie in 1..schedule.steps");
    for (int h : hidden)
        if (h < 1) throw ConfigError("model.hidden entries must be >= 1");
    optim_config().validate();
    schedule();  // validates the beta range
}

// ---------------------------------------------------------------------------
// Checkpoint IO
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[9] = {'F', 'L', 'A', 'T', 'D', 'I', 'F', 'F', '1'};
constexpr std::uint32_t kVersion = 1;

void put_bytes(std::ostream& out, const void* p, std::size_t n) {
    out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename T>
void put_le(std::ostream& out, T v) {
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
#if defined(__BYTE_ORDER__) && __BYTE_ORDER__ == __ORDER_BIG_ENDIAN__
    std::reverse(buf, buf + sizeof(T));
#endif
    put_bytes(out, buf, sizeof(T));
}

void get_bytes(std::istream& in, void* p, std::size_t n, const char* what) {
    in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n)
        throw ConfigError(std::string("checkpoint truncated while reading ") + what);
}

template <typename T>
T get_le(std::istream& in, const char* what) {
    unsigned char buf[sizeof(T)];
    get_bytes(in, buf, sizeof(T), what);
#if defined(__BYTE_ORDER__) && __BYTE_ORDER__ == __ORDER_BIG_ENDIAN__
    std::reverse(buf, buf + sizeof(T));
#endif
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
}

void put_f64_vec(std::ostream& out, const std::vector<double>& v) {
    put_le<std::uint64_t>(out, v.size());
    for (double x : v) put_le<double>(out, x);
}

std::vector<double> get_f64_vec(std::istream& in, const char* what) {
    std::uint64_t n = get_le<std::uint64_t>(in, what);
    std::vector<double> v(n);
    for (double& x : v) x = get_le<double>(in, what);
    return v;
}

} // namespace

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot open checkpoint '" + path.string() + "' for writing");
    put_bytes(out, kMagic, sizeof(kMagic));
    put_le<std::uint32_t>(out, kVersion);

    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.spec.data_dim));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.spec.embed_dim));
    put_le<std::uint32_t>(out, ckpt.spec.act == diffusion::Activation::relu ? 0u : 1u);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.spec.hidden.size()));
    for (int h : ckpt.spec.hidden) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(h));

    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.schedule_steps));
    put_le<double>(out, ckpt.beta1);
    put_le<double>(out, ckpt.beta_t);

    const auto& segs = ckpt.params.segments();
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(segs.size()));
    for (const numerics::Segment& s : segs) {
        put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.name.size()));
        put_bytes(out, s.name.data(), s.name.size());
        put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.shape.size()));
        for (std::size_t d : s.shape) put_le<std::uint64_t>(out, d);
        put_le<std::uint64_t>(out, s.offset);
    }
    put_le<std::uint64_t>(out, ckpt.params.size());
    for (float v : ckpt.params.values()) put_le<float>(out, v);

    std::uint8_t flags = 0;
    if (ckpt.has_swa) flags |= 1;
    if (ckpt.has_ema) flags |= 2;
    if (ckpt.has_adam) flags |= 4;
    if (ckpt.has_meta) flags |= 8;
    put_le<std::uint8_t>(out, flags);
    if (ckpt.has_swa) {
        put_le<std::uint64_t>(out, static_cast<std::uint64_t>(ckpt.swa_n_models));
        put_f64_vec(out, ckpt.swa);
    }
    if (ckpt.has_ema) put_f64_vec(out, ckpt.ema);
    if (ckpt.has_adam) {
        put_le<std::uint64_t>(out, static_cast<std::uint64_t>(ckpt.adam_t));
        put_f64_vec(out, ckpt.adam_m);
        put_f64_vec(out, ckpt.adam_v);
    }
    if (ckpt.has_meta) {
        put_le<std::uint64_t>(out, static_cast<std::uint64_t>(ckpt.step));
        put_le<std::uint64_t>(out, ckpt.run_seed);
        put_le<std::uint64_t>(out, ckpt.sam_zero_grad_events);
    }
    if (!out) throw ConfigError("write failure on checkpoint '" + path.string() + "'");
}

Checkpoint load_checkpoint(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open checkpoint '" + path.string() + "'");
    char magic[sizeof(kMagic)];
    get_bytes(in, magic, sizeof(magic), "magic");
    if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw ConfigError("'" + path.string() + "' is not a FLATDIFF1 checkpoint");
    std::uint32_t version = get_le<std::uint32_t>(in, "version");
    if (version != kVersion)
        throw ConfigError("unsupported checkpoint version " + std::to_string(version));

    Checkpoint ckpt;
    ckpt.spec.data_dim = static_cast<int>(get_le<std::uint32_t>(in, "data_dim"));
    ckpt.spec.embed_dim = static_cast<int>(get_le<std::uint32_t>(in, "embed_dim"));
    ckpt.spec.act = get_le<std::uint32_t>(in, "activation") == 0 ? diffusion::Activation::relu
                                                                 : diffusion::Activation::silu;
    std::uint32_t n_hidden = get_le<std::uint32_t>(in, "n_hidden");
    ckpt.spec.hidden.clear();
    for (std::uint32_t i = 0; i < n_hidden; ++i)
        ckpt.spec.hidden.push_back(static_cast<int>(get_le<std::uint32_t>(in, "hidden")));

    ckpt.schedule_steps = static_cast<int>(get_le<std::uint32_t>(in, "schedule_steps"));
    ckpt.beta1 = get_le<double>(in, "beta1");
    ckpt.beta_t = get_le<double>(in, "beta_t");

    std::uint32_t n_segs = get_le<std::uint32_t>(in, "segment count");
    ParamVector params;
    std::vector<std::uint64_t> offsets;
    for (std::uint32_t i = 0; i < n_segs; ++i) {
        std::uint32_t name_len = get_le<std::uint32_t>(in, "segment name length");
        std::string name(name_len, '\0');
        get_bytes(in, name.data(), name_len, "segment name");
        std::uint32_t ndims = get_le<std::uint32_t>(in, "segment rank");
        numerics::Shape shape;
        for (std::uint32_t d = 0; d < ndims; ++d)
            shape.push_back(static_cast<std::size_t>(get_le<std::uint64_t>(in, "segment dim")));
        offsets.push_back(get_le<std::uint64_t>(in, "segment offset"));
        params.add_segment(std::move(name), std::move(shape));
    }
    for (std::uint32_t i = 0; i < n_segs; ++i)
        if (params.segment(i).offset != offsets[i])
            throw ConfigError("checkpoint segment table does not partition the payload");
    std::uint64_t count = get_le<std::uint64_t>(in, "payload count");
    if (count != params.size())
        throw ConfigError("checkpoint payload length does not match the segment table");
    for (float& v : params.values()) v = get_le<float>(in, "payload");
    ckpt.params = std::move(params);

    std::uint8_t flags = get_le<std::uint8_t>(in, "trailer flags");
    if (flags & 1) {
        ckpt.has_swa = true;
        ckpt.swa_n_models = static_cast<std::int64_t>(get_le<std::uint64_t>(in, "swa n_models"));
        ckpt.swa = get_f64_vec(in, "swa state");
    }
    if (flags & 2) {
        ckpt.has_ema = true;
        ckpt.ema = get_f64_vec(in, "ema state");
    }
    if (flags & 4) {
        ckpt.has_adam = true;
        ckpt.adam_t = static_cast<std::int64_t>(get_le<std::uint64_t>(in, "adam t"));
        ckpt.adam_m = get_f64_vec(in, "adam m");
        ckpt.adam_v = get_f64_vec(in, "adam v");
    }
    if (flags & 8) {
        ckpt.has_meta = true;
        ckpt.step = static_cast<std::int64_t>(get_le<std::uint64_t>(in, "meta step"));
        ckpt.run_seed = get_le<std::uint64_t>(in, "meta seed");
        ckpt.sam_zero_grad_events = get_le<std::uint64_t>(in, "meta sam events");
    }
    return ckpt;
}

// ---------------------------------------------------------------------------
// Metrics log
// ---------------------------------------------------------------------------

MetricsLog::MetricsLog(const fs::path& path, bool append)
    : out_(path, append ? std::ios::app : std::ios::trunc) {
    if (!out_) throw ConfigError("cannot open metrics log '" + path.string() + "'");
    if (!append || fs::file_size(path) == 0) {
        out_ << "step,loss,lpf_spot,wall_time\n";
        out_.flush();
    }
}

void MetricsLog::row(std::int64_t step, double loss, double lpf_spot, double wall_time) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%lld,%.9g,%.9g,%.3f\n", static_cast<long long>(step), loss,
                  lpf_spot, wall_time);
    out_ << buf;
    out_.flush();
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

// Exclusive lock file; removed when the trainer exits.
class RunLock {
public:
    explicit RunLock(const fs::path& dir) : path_(dir / ".lock") {
        std::FILE* f = std::fopen(path_.string().c_str(), "wx");
        if (!f)
            throw ConfigError("run directory '" + dir.string() +
                              "' is locked by another trainer (.lock exists)");
        std::fclose(f);
    }
    ~RunLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }

private:
    fs::path path_;
};

Checkpoint make_full_checkpoint(const RunConfig& cfg, const ParamVector& params,
                                const optim::AveragerState& avg, const optim::OptState& opt,
                                std::int64_t step, std::uint64_t seed) {
    Checkpoint c;
    c.spec = cfg.model_spec();
    c.schedule_steps = cfg.schedule_steps;
    c.beta1 = cfg.beta1;
    c.beta_t = cfg.beta_t;
    c.params = params;
    c.has_swa = true;
    c.swa_n_models = avg.n_models;
    c.swa = avg.w_swa;
    c.has_ema = true;
    c.ema = avg.w_ema;
    c.has_adam = true;
    c.adam_t = opt.adam.t;
    c.adam_m = opt.adam.m;
    c.adam_v = opt.adam.v;
    c.has_meta = true;
    c.step = step;
    c.run_seed = seed;
    c.sam_zero_grad_events = opt.sam_zero_grad_events;
    return c;
}

void write_run_meta(const fs::path& run_dir, const RunConfig& cfg, std::uint64_t seed,
                    std::int64_t step, std::uint64_t sam_events, const std::string& status) {
    nlohmann::json j;
    j["algorithm"] = cfg.algorithm_label();
    j["config_hash"] = cfg.hash();
    j["seed"] = seed;
    j["step"] = step;
    j["sam_zero_grad_events"] = sam_events;
    j["status"] = status;
    std::ofstream f(run_dir / "run_meta.json");
    f << j.dump(2) << "\n";
}

} // namespace

std::string report_meta(const RunConfig& cfg, std::uint64_t seed) {
    std::ostringstream s;
    s << "config_hash=" << cfg.hash() << " seed=" << seed;
    return s.str();
}

TrainResult cmd_train(const RunConfig& cfg, std::uint64_t seed, const fs::path& out_dir,
                      bool resume, std::int64_t stop_after) {
    cfg.validate();
    fs::create_directories(out_dir);
    fs::create_directories(out_dir / "snapshots");
    RunLock lock(out_dir);

    {
        std::ofstream cf(out_dir / "config.txt");
        cf << cfg.canonical_text();
    }

    diffusion::NoiseSchedule sched = cfg.schedule();
    diffusion::EpsModelSpec spec = cfg.model_spec();
    auto dataset = cfg.make_dataset();
    optim::OptimConfig ocfg = cfg.optim_config();
    Rng master(seed);

    ParamVector params;
    optim::AveragerState avg;
    optim::OptState opt;
    std::int64_t start_step = 0;

    fs::path latest = out_dir / "snapshots" / "latest.ckpt";
    if (resume) {
        if (!fs::exists(latest))
            throw ConfigError("resume requested but '" + latest.string() + "' does not exist");
        Checkpoint c = load_checkpoint(latest);
        if (!(c.spec == spec) || c.schedule_steps != cfg.schedule_steps)
            throw ConfigError("resume: checkpoint architecture/schedule differs from config");
        if (c.has_meta && c.run_seed != seed)
            throw ConfigError("resume: checkpoint was produced with a different seed");
        params = std::move(c.params);
        avg.w_swa = std::move(c.swa);
        avg.n_models = c.swa_n_models;
        avg.w_ema = std::move(c.ema);
        opt.adam.t = c.adam_t;
        opt.adam.m = std::move(c.adam_m);
        opt.adam.v = std::move(c.adam_v);
        opt.sam_zero_grad_events = c.sam_zero_grad_events;
        start_step = c.step;
    } else {
        Rng init_rng = master.stream("init");
        params = diffusion::EpsModel::init(spec, init_rng).params();
        avg = optim::AveragerState::init(params);
    }

    // fixed evaluation subset for the in-training LPF spot metric
    Rng eval_rng = master.stream("eval-set");
    Tensor eval_x0 = dataset->sample(eval_rng, std::min<std::size_t>(512, static_cast<std::size_t>(cfg.eval_batch)));
    diffusion::LossSample eval_set = diffusion::draw_loss_sample(eval_x0, sched, eval_rng, 0.0);

    MetricsLog log(out_dir / "metrics.csv", resume);
    auto t0 = std::chrono::steady_clock::now();
    double last_loss = 0.0;

    auto snapshot = [&](std::int64_t step) {
        Checkpoint c = make_full_checkpoint(cfg, params, avg, opt, step, seed);
        char name[48];
        std::snprintf(name, sizeof(name), "step_%08lld.ckpt", static_cast<long long>(step));
        save_checkpoint(c, out_dir / "snapshots" / name);
        save_checkpoint(c, latest);
    };

    if (!resume && cfg.train_steps == 0) snapshot(0);

    std::int64_t end_step =
        stop_after >= 0 ? std::min(stop_after, cfg.train_steps) : cfg.train_steps;
    try {
        for (std::int64_t i = start_step + 1; i <= end_step; ++i) {
            Rng step_rng = master.stream("step", static_cast<std::uint64_t>(i));
            Tensor batch = dataset->sample(step_rng, static_cast<std::size_t>(cfg.batch));
            diffusion::LossSample sample =
                diffusion::draw_loss_sample(batch, sched, step_rng, ocfg.ip_strength);
            optim::GradFn fn = [&](const ParamVector& p) {
                return diffusion::loss_grad_on_sample(spec, p, sample);
            };
            params = optim::sam_step(fn, params, ocfg, opt, &last_loss);
            optim::ema_update(avg, params, ocfg);
            optim::swa_update(avg, params, i, ocfg);

            if (i % cfg.log_every == 0 || i == cfg.train_steps) {
                Rng spot_rng = master.stream("lpf-spot", static_cast<std::uint64_t>(i));
                flatness::LpfConfig lc;
                lc.sigma = cfg.eval_lpf_sigma > 0.0 ? cfg.eval_lpf_sigma
                                                    : flatness::default_lpf_sigma(params);
                lc.mc_samples = 4;
                flatness::LpfResult spot = flatness::lpf(
                    [&](const ParamVector& p) { return diffusion::loss_on_sample(spec, p, eval_set); },
                    params, lc, spot_rng);
                double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                                  .count();
                log.row(i, last_loss, spot.value, wall);
            }
            if (i % cfg.snapshot_every == 0 || i == cfg.train_steps) snapshot(i);
        }
    } catch (const NumericError&) {
        write_run_meta(out_dir, cfg, seed, start_step, opt.sam_zero_grad_events,
                       "numeric-failure (last good checkpoint retained)");
        throw;
    }

    if (end_step < cfg.train_steps) {
        // interrupted: leave a resumable snapshot, no final artifacts
        snapshot(end_step);
        write_run_meta(out_dir, cfg, seed, end_step, opt.sam_zero_grad_events, "interrupted");
        TrainResult partial;
        partial.run_dir = out_dir;
        partial.final_params = params;
        partial.ema_params = avg.ema_params(params);
        partial.swa_params = avg.swa_params(params);
        partial.swa_n_models = avg.n_models;
        partial.sam_zero_grad_events = opt.sam_zero_grad_events;
        partial.final_loss = last_loss;
        return partial;
    }

    TrainResult res;
    res.run_dir = out_dir;
    res.final_params = params;
    res.ema_params = avg.ema_params(params);
    res.swa_params = avg.swa_params(params);
    res.swa_n_models = avg.n_models;
    res.sam_zero_grad_events = opt.sam_zero_grad_events;
    res.final_loss = last_loss;

    Checkpoint final_ckpt = make_full_checkpoint(cfg, params, avg, opt, cfg.train_steps, seed);
    save_checkpoint(final_ckpt, out_dir / "final.ckpt");
    Checkpoint ema_ckpt = final_ckpt;
    ema_ckpt.params = res.ema_params;
    save_checkpoint(ema_ckpt, out_dir / "ema.ckpt");
    Checkpoint swa_ckpt = final_ckpt;
    swa_ckpt.params = res.swa_params;
    save_checkpoint(swa_ckpt, out_dir / "swa.ckpt");
    write_run_meta(out_dir, cfg, seed, cfg.train_steps, opt.sam_zero_grad_events, "complete");
    return res;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

EvalContext EvalContext::make(const RunConfig& cfg, std::uint64_t seed) {
    EvalContext ctx;
    ctx.cfg = cfg;
    ctx.seed = seed;
    ctx.sched = cfg.schedule();
    Rng master(seed);
    auto dataset = cfg.make_dataset();
    Rng eval_rng = master.stream("eval-set");
    Tensor x0 = dataset->sample(eval_rng, static_cast<std::size_t>(cfg.eval_batch));
    ctx.eval_set = diffusion::draw_loss_sample(x0, ctx.sched, eval_rng, 0.0);
    Rng target_rng = master.stream("target");
    ctx.target_samples = dataset->sample(target_rng, static_cast<std::size_t>(cfg.eval_samples) * 4);
    return ctx;
}

double EvalContext::loss_of(const diffusion::EpsModelSpec& spec, const ParamVector& params) const {
    return diffusion::loss_on_sample(spec, params, eval_set);
}

flatness::LossFn EvalContext::loss_fn(const diffusion::EpsModelSpec& spec) const {
    return [this, spec](const ParamVector& p) {
        return diffusion::loss_on_sample(spec, p, eval_set);
    };
}

void cmd_eval(const fs::path& ckpt_path, const RunConfig& cfg, std::uint64_t seed,
              const fs::path& out_dir, const std::vector<std::string>& metrics) {
    static const std::vector<std::string> kValid = {"loss",    "lpf",     "curve",
                                                    "surface", "samples", "distance"};
    for (const std::string& m : metrics) {
        if (std::find(kValid.begin(), kValid.end(), m) == kValid.end()) {
            std::string valid;
            for (const std::string& v : kValid) valid += (valid.empty() ? "" : ", ") + v;
            throw UsageError("unknown metric '" + m + "'; valid metrics: " + valid);
        }
    }
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    fs::create_directories(out_dir);
    EvalContext ctx = EvalContext::make(cfg, seed);
    Rng master(seed);
    std::string meta = report_meta(cfg, seed);

    for (const std::string& m : metrics) {
        if (m == "loss") {
            nlohmann::json j;
            j["loss"] = ctx.loss_of(ckpt.spec, ckpt.params);
            j["config_hash"] = cfg.hash();
            j["seed"] = seed;
            std::ofstream f(out_dir / "loss.json");
            f << j.dump(2) << "\n";
        } else if (m == "lpf") {
            flatness::LpfConfig lc;
            lc.sigma = cfg.eval_lpf_sigma > 0.0 ? cfg.eval_lpf_sigma
                                                : flatness::default_lpf_sigma(ckpt.params);
            lc.mc_samples = cfg.eval_lpf_m;
            Rng rng = master.stream("lpf");
            flatness::LpfResult r = flatness::lpf(ctx.loss_fn(ckpt.spec), ckpt.params, lc, rng);
            flatness::write_lpf_json(r, (out_dir / "lpf.json").string(), cfg.hash(), seed);
        } else if (m == "curve") {
            double scale = ckpt.params.norm();
            std::vector<double> radii;
            for (double f : {0.0, 0.0025, 0.005, 0.01, 0.02, 0.04, 0.08}) radii.push_back(f * scale);
            Rng rng = master.stream("curve");
            auto curve = flatness::perturbation_curve(ctx.loss_fn(ckpt.spec), ckpt.params, radii,
                                                      8, rng);
            flatness::write_curve_csv(curve, (out_dir / "curve.csv").string(), meta);
        } else if (m == "surface") {
            Rng rng = master.stream("surface");
            auto grid = flatness::loss_surface_grid(ctx.loss_fn(ckpt.spec), ckpt.params,
                                                    0.02 * ckpt.params.norm(), 21, rng);
            flatness::write_surface_csv(grid, (out_dir / "surface.csv").string(), meta);
        } else if (m == "samples") {
            diffusion::ModelPredictor pred(ckpt.spec, ckpt.params);
            diffusion::RespacingMap map =
                diffusion::even_respacing(ctx.sched.T, cfg.eval_respacing);
            Rng rng = master.stream("samples");
            Tensor samples = diffusion::ddpm_sample(pred, static_cast<std::size_t>(cfg.eval_samples),
                                                    ckpt.spec.data_dim, ctx.sched, map, rng);
            diffusion::write_samples_csv(samples, (out_dir / "samples.csv").string(), meta);
        } else if (m == "distance") {
            diffusion::ModelPredictor pred(ckpt.spec, ckpt.params);
            diffusion::RespacingMap map =
                diffusion::even_respacing(ctx.sched.T, cfg.eval_respacing);
            Rng rng = master.stream("distance-samples");
            Tensor samples = diffusion::ddpm_sample(pred, static_cast<std::size_t>(cfg.eval_samples),
                                                    ckpt.spec.data_dim, ctx.sched, map, rng);
            Rng w2_rng = master.stream("distance-w2");
            double w2 = robustness::sliced_w2(samples, ctx.target_samples, cfg.eval_projections,
                                              w2_rng);
            double mmd = robustness::mmd_rbf(samples, ctx.target_samples);
            nlohmann::json j;
            j["sliced_w2"] = w2;
            j["mmd_rbf"] = mmd;
            j["n_generated"] = cfg.eval_samples;
            j["n_target"] = ctx.target_samples.rows();
            j["respacing"] = cfg.eval_respacing;
            j["config_hash"] = cfg.hash();
            j["seed"] = seed;
            std::ofstream f(out_dir / "distance.json");
            f << j.dump(2) << "\n";
        }
    }
}

// ---------------------------------------------------------------------------
// Report merging
// ---------------------------------------------------------------------------

namespace {

struct ReportRow {
    std::string algorithm;
    int respacing = 0;
    int bits = 32;
    std::string metric;
    std::vector<double> values;  // one per contributing run
};

std::string variant_suffix(const std::string& v) {
    if (v == "ema") return "+EMA";
    if (v == "swa") return "+SWA";
    return "";
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

} // namespace

void cmd_report(const std::vector<fs::path>& run_dirs, const fs::path& out_dir) {
    if (run_dirs.empty()) throw UsageError("report: at least one run directory required");
    fs::create_directories(out_dir);
    std::map<std::string, ReportRow> rows;
    std::vector<std::string> missing;
    std::set<std::string> seen_runs;  // dedupe identical (config, seed) runs

    for (const fs::path& dir : run_dirs) {
        fs::path meta_path = dir / "run_meta.json";
        if (!fs::exists(meta_path)) {
            missing.push_back(meta_path.string());
            continue;
        }
        std::ifstream mf(meta_path);
        nlohmann::json meta = nlohmann::json::parse(mf, nullptr, false);
        if (meta.is_discarded()) {
            missing.push_back(meta_path.string() + " (unparseable)");
            continue;
        }
        std::string algorithm = meta.value("algorithm", "?");
        std::string run_key = std::to_string(meta.value("config_hash", 0ULL)) + ":" +
                              std::to_string(meta.value("seed", 0ULL));
        if (!seen_runs.insert(run_key).second) continue;

        fs::path sweep_path = dir / "sweep.csv";
        if (!fs::exists(sweep_path)) {
            missing.push_back(sweep_path.string());
            continue;
        }
        std::ifstream sf(sweep_path);
        std::string line;
        bool header_seen = false;
        while (std::getline(sf, line)) {
            if (line.empty() || line[0] == '#') continue;
            if (!header_seen) {
                header_seen = true;
                continue;
            }
            std::stringstream ls(line);
            std::string variant, bits_s, respace_s, metric, value_s, delta_s;
            std::getline(ls, variant, ',');
            std::getline(ls, bits_s, ',');
            std::getline(ls, respace_s, ',');
            std::getline(ls, metric, ',');
            std::getline(ls, value_s, ',');
            std::getline(ls, delta_s, ',');
            if (value_s == "failed") continue;
            std::string label = algorithm + variant_suffix(variant);
            std::string key = label + "|" + respace_s + "|" + bits_s + "|" + metric;
            ReportRow& row = rows[key];
            row.algorithm = label;
            row.respacing = std::stoi(respace_s);
            row.bits = std::stoi(bits_s);
            row.metric = metric;
            row.values.push_back(std::stod(value_s));
        }
    }

    // merged CSV keyed by (algorithm, respacing, bits)
    {
        std::ofstream f(out_dir / "report.csv");
        f << "algorithm,respacing,bits,metric,median_value,n_runs\n";
        for (const auto& [key, row] : rows)
            f << row.algorithm << ',' << row.respacing << ',' << row.bits << ',' << row.metric
              << ',' << median(row.values) << ',' << row.values.size() << "\n";
    }

    // human-readable summary with 32 -> 8 bit arrows
    {
        std::ofstream f(out_dir / "summary.txt");
        f << "quantization robustness (distance proxy, lower is better)\n";
        std::set<std::pair<std::string, int>> combos;
        for (const auto& [key, row] : rows) combos.insert({row.algorithm, row.respacing});
        for (const auto& [algo, respace] : combos) {
            auto find_bits = [&](int bits) -> const ReportRow* {
                for (const auto& [key, row] : rows)
                    if (row.algorithm == algo && row.respacing == respace && row.bits == bits)
                        return &row;
                return nullptr;
            };
            const ReportRow* b32 = find_bits(32);
            const ReportRow* b8 = find_bits(8);
            if (!b32) continue;
            double v32 = median(b32->values);
            char buf[160];
            if (b8) {
                double v8 = median(b8->values);
                std::snprintf(buf, sizeof(buf), "%-12s T'=%-5d %.4f -> %.4f (%+.4f)\n",
                              algo.c_str(), respace, v32, v8, v8 - v32);
            } else {
                std::snprintf(buf, sizeof(buf), "%-12s T'=%-5d %.4f\n", algo.c_str(), respace,
                              v32);
            }
            f << buf;
        }
        if (!missing.empty()) {
            f << "\nmissing report files:\n";
            for (const std::string& m : missing) f << "  " << m << "\n";
        }
    }
}

} // namespace flatdiff::harness
