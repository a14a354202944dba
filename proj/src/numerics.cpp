#include "flatdiff/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

namespace flatdiff::numerics {

std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

Tensor::Tensor(Shape s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != shape_size(shape))
        throw LayoutError("tensor data length does not match shape extent product");
}

Tensor Tensor::zeros(Shape s) {
    std::size_t n = shape_size(s);
    return Tensor(std::move(s), std::vector<float>(n, 0.0f));
}

Matrix Matrix::from_tensor(const Tensor& t) {
    Matrix m(t.rows(), t.cols());
    for (std::size_t i = 0; i < m.v.size(); ++i) m.v[i] = static_cast<double>(t.data[i]);
    return m;
}

Tensor Matrix::to_tensor() const {
    Tensor t = Tensor::zeros({rows, cols});
    for (std::size_t i = 0; i < v.size(); ++i) t.data[i] = static_cast<float>(v[i]);
    return t;
}

// ---------------------------------------------------------------------------
// Rng
// ---------------------------------------------------------------------------

namespace {

constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

inline std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace

Rng::Rng(std::uint64_t seed) : key_(mix64(seed + kGolden)) {}

Rng::Rng(std::uint64_t key, int) : key_(key) {}

Rng Rng::stream(std::string_view label) const {
    return Rng(mix64(key_ ^ fnv1a(label)), 0);
}

Rng Rng::stream(std::string_view label, std::uint64_t index) const {
    std::uint64_t k = mix64(key_ ^ fnv1a(label));
    return Rng(mix64(k + (index + 1) * kGolden), 0);
}

std::uint64_t Rng::next_u64() {
    ++counter_;
    return mix64(key_ + counter_ * kGolden);
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::gaussian() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    // Box-Muller; u1 in (0,1] so the log is finite.
    double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

std::uint64_t Rng::below(std::uint64_t n) {
    if (n == 0) throw ConfigError("Rng::below requires n > 0");
    std::uint64_t threshold = (~n + 1) % n;  // 2^64 mod n
    for (;;) {
        std::uint64_t x = next_u64();
        if (x >= threshold) return x % n;
    }
}

void Rng::fill_gaussian(std::span<float> out) {
    for (float& x : out) x = static_cast<float>(gaussian());
}

void Rng::fill_gaussian(std::span<double> out) {
    for (double& x : out) x = gaussian();
}

Tensor gaussian_sample(Rng& rng, Shape shape) {
    Tensor t = Tensor::zeros(std::move(shape));
    rng.fill_gaussian(t.data);
    return t;
}

// ---------------------------------------------------------------------------
// ParamVector
// ---------------------------------------------------------------------------

std::size_t ParamVector::add_segment(std::string name, Shape shape) {
    Segment seg;
    seg.name = std::move(name);
    seg.size = shape_size(shape);
    seg.shape = std::move(shape);
    seg.offset = values_.size();
    values_.resize(values_.size() + seg.size, 0.0f);
    segments_.push_back(std::move(seg));
    return segments_.size() - 1;
}

std::span<float> ParamVector::segment_values(std::size_t idx) {
    const Segment& s = segments_[idx];
    return std::span<float>(values_.data() + s.offset, s.size);
}

std::span<const float> ParamVector::segment_values(std::size_t idx) const {
    const Segment& s = segments_[idx];
    return std::span<const float>(values_.data() + s.offset, s.size);
}

std::size_t ParamVector::segment_index(std::string_view name) const {
    for (std::size_t i = 0; i < segments_.size(); ++i)
        if (segments_[i].name == name) return i;
    throw LayoutError("no parameter segment named '" + std::string(name) + "'");
}

bool ParamVector::same_layout(const ParamVector& other) const {
    if (segments_.size() != other.segments_.size()) return false;
    for (std::size_t i = 0; i < segments_.size(); ++i) {
        const Segment& a = segments_[i];
        const Segment& b = other.segments_[i];
        if (a.name != b.name || a.shape != b.shape || a.offset != b.offset) return false;
    }
    return values_.size() == other.values_.size();
}

void ParamVector::require_same_layout(const ParamVector& other, std::string_view what) const {
    if (!same_layout(other))
        throw LayoutError(std::string(what) + ": parameter layouts differ");
}

double ParamVector::norm() const {
    double acc = 0.0;
    for (float x : values_) acc += static_cast<double>(x) * static_cast<double>(x);
    return std::sqrt(acc);
}

double ParamVector::rms() const {
    if (values_.empty()) return 0.0;
    return norm() / std::sqrt(static_cast<double>(values_.size()));
}

ParamVector param_axpy(double a, const ParamVector& x, const ParamVector& y) {
    x.require_same_layout(y, "param_axpy");
    ParamVector out = y;
    std::span<float> ov = out.values();
    std::span<const float> xv = x.values();
    for (std::size_t i = 0; i < ov.size(); ++i)
        ov[i] = static_cast<float>(a * static_cast<double>(xv[i]) + static_cast<double>(ov[i]));
    return out;
}

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

namespace {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void require_same_dims(const Matrix& a, const Matrix& b, const char* what) {
    if (a.rows != b.rows || a.cols != b.cols)
        throw LayoutError(std::string(what) + ": operand shapes differ");
}

} // namespace

Graph::Graph(const ParamVector& params) : params_(&params) {}

Graph::Id Graph::push(Op op, Matrix value, Id a, Id b, Id c) {
    Node n;
    n.op = op;
    n.a = a;
    n.b = b;
    n.c = c;
    nodes_.push_back(n);
    values_.push_back(std::move(value));
    return static_cast<Id>(nodes_.size() - 1);
}

Graph::Id Graph::input(Matrix m) { return push(Op::input, std::move(m)); }

Graph::Id Graph::param(std::size_t segment_index) {
    const Segment& seg = params_->segment(segment_index);
    std::size_t r = seg.shape.empty() ? 1 : seg.shape[0];
    std::size_t c = seg.shape.size() >= 2 ? seg.shape[1] : 1;
    if (seg.shape.size() == 1) {
        r = 1;
        c = seg.shape[0];
    }
    Matrix m(r, c);
    std::span<const float> vals = params_->segment_values(segment_index);
    for (std::size_t i = 0; i < vals.size(); ++i) m.v[i] = static_cast<double>(vals[i]);
    Id id = push(Op::param, std::move(m));
    nodes_.back().segment = segment_index;
    return id;
}

Graph::Id Graph::param(std::string_view segment_name) {
    return param(params_->segment_index(segment_name));
}

Graph::Id Graph::affine(Id x, Id weight, Id bias) {
    const Matrix& xm = value(x);
    const Matrix& wm = value(weight);
    const Matrix& bm = value(bias);
    if (xm.cols != wm.cols)
        throw LayoutError("affine: input feature count does not match weight columns");
    if (bm.rows != 1 || bm.cols != wm.rows)
        throw LayoutError("affine: bias length does not match weight rows");
    Matrix y(xm.rows, wm.rows);
    for (std::size_t i = 0; i < xm.rows; ++i) {
        const double* xi = xm.v.data() + i * xm.cols;
        double* yi = y.v.data() + i * y.cols;
        for (std::size_t o = 0; o < wm.rows; ++o) {
            const double* wo = wm.v.data() + o * wm.cols;
            double acc = bm.v[o];
            for (std::size_t k = 0; k < xm.cols; ++k) acc += xi[k] * wo[k];
            yi[o] = acc;
        }
    }
    return push(Op::affine, std::move(y), x, weight, bias);
}

Graph::Id Graph::relu(Id x) {
    Matrix y = value(x);
    for (double& v : y.v) v = v > 0.0 ? v : 0.0;
    return push(Op::relu, std::move(y), x);
}

Graph::Id Graph::silu(Id x) {
    Matrix y = value(x);
    for (double& v : y.v) v = v * sigmoid(v);
    return push(Op::silu, std::move(y), x);
}

Graph::Id Graph::add(Id a, Id b) {
    Matrix y = value(a);
    const Matrix& bm = value(b);
    require_same_dims(y, bm, "add");
    for (std::size_t i = 0; i < y.v.size(); ++i) y.v[i] += bm.v[i];
    return push(Op::add, std::move(y), a, b);
}

Graph::Id Graph::scale(double a, Id x) {
    Matrix y = value(x);
    for (double& v : y.v) v *= a;
    Id id = push(Op::scale, std::move(y), x);
    nodes_.back().factor = a;
    return id;
}

Graph::Id Graph::concat_cols(Id a, Id b) {
    const Matrix& am = value(a);
    const Matrix& bm = value(b);
    if (am.rows != bm.rows) throw LayoutError("concat_cols: row counts differ");
    Matrix y(am.rows, am.cols + bm.cols);
    for (std::size_t i = 0; i < am.rows; ++i) {
        std::memcpy(y.v.data() + i * y.cols, am.v.data() + i * am.cols, am.cols * sizeof(double));
        std::memcpy(y.v.data() + i * y.cols + am.cols, bm.v.data() + i * bm.cols,
                    bm.cols * sizeof(double));
    }
    return push(Op::concat, std::move(y), a, b);
}

Graph::Id Graph::mse(Id pred, Id target) {
    const Matrix& pm = value(pred);
    const Matrix& tm = value(target);
    require_same_dims(pm, tm, "mse");
    double acc = 0.0;
    for (std::size_t i = 0; i < pm.v.size(); ++i) {
        double d = pm.v[i] - tm.v[i];
        acc += d * d;
    }
    Matrix y(1, 1);
    y.v[0] = acc / static_cast<double>(pm.rows);
    return push(Op::mse, std::move(y), pred, target);
}

double Graph::scalar(Id id) const {
    const Matrix& m = value(id);
    if (m.v.size() != 1) throw LayoutError("scalar: node is not 1x1");
    return m.v[0];
}

void Graph::backward(Id output) {
    adjoints_.assign(values_.size(), Matrix());
    for (std::size_t i = 0; i < values_.size(); ++i)
        adjoints_[i] = Matrix(values_[i].rows, values_[i].cols);
    adjoints_[static_cast<std::size_t>(output)].v[0] = 1.0;

    for (Id id = output; id >= 0; --id) {
        const Node& n = nodes_[static_cast<std::size_t>(id)];
        const Matrix& g = adjoints_[static_cast<std::size_t>(id)];
        bool any = false;
        for (double v : g.v)
            if (v != 0.0) {
                any = true;
                break;
            }
        if (!any) continue;
        switch (n.op) {
        case Op::input:
        case Op::param:
            break;
        case Op::affine: {
            const Matrix& xm = values_[static_cast<std::size_t>(n.a)];
            const Matrix& wm = values_[static_cast<std::size_t>(n.b)];
            Matrix& dx = adjoints_[static_cast<std::size_t>(n.a)];
            Matrix& dw = adjoints_[static_cast<std::size_t>(n.b)];
            Matrix& db = adjoints_[static_cast<std::size_t>(n.c)];
            for (std::size_t i = 0; i < xm.rows; ++i) {
                const double* gi = g.v.data() + i * g.cols;
                const double* xi = xm.v.data() + i * xm.cols;
                double* dxi = dx.v.data() + i * dx.cols;
                for (std::size_t o = 0; o < wm.rows; ++o) {
                    double go = gi[o];
                    if (go == 0.0) continue;
                    const double* wo = wm.v.data() + o * wm.cols;
                    double* dwo = dw.v.data() + o * wm.cols;
                    for (std::size_t k = 0; k < xm.cols; ++k) {
                        dxi[k] += go * wo[k];
                        dwo[k] += go * xi[k];
                    }
                    db.v[o] += go;
                }
            }
            break;
        }
        case Op::relu: {
            const Matrix& xm = values_[static_cast<std::size_t>(n.a)];
            Matrix& dx = adjoints_[static_cast<std::size_t>(n.a)];
            for (std::size_t i = 0; i < xm.v.size(); ++i)
                if (xm.v[i] > 0.0) dx.v[i] += g.v[i];
            break;
        }
        case Op::silu: {
            const Matrix& xm = values_[static_cast<std::size_t>(n.a)];
            Matrix& dx = adjoints_[static_cast<std::size_t>(n.a)];
            for (std::size_t i = 0; i < xm.v.size(); ++i) {
                double s = sigmoid(xm.v[i]);
                dx.v[i] += g.v[i] * s * (1.0 + xm.v[i] * (1.0 - s));
            }
            break;
        }
        case Op::add: {
            Matrix& da = adjoints_[static_cast<std::size_t>(n.a)];
            Matrix& db = adjoints_[static_cast<std::size_t>(n.b)];
            for (std::size_t i = 0; i < g.v.size(); ++i) {
                da.v[i] += g.v[i];
                db.v[i] += g.v[i];
            }
            break;
        }
        case Op::scale: {
            Matrix& dx = adjoints_[static_cast<std::size_t>(n.a)];
            for (std::size_t i = 0; i < g.v.size(); ++i) dx.v[i] += n.factor * g.v[i];
            break;
        }
        case Op::concat: {
            Matrix& da = adjoints_[static_cast<std::size_t>(n.a)];
            Matrix& db = adjoints_[static_cast<std::size_t>(n.b)];
            for (std::size_t i = 0; i < da.rows; ++i) {
                for (std::size_t k = 0; k < da.cols; ++k)
                    da.v[i * da.cols + k] += g.v[i * g.cols + k];
                for (std::size_t k = 0; k < db.cols; ++k)
                    db.v[i * db.cols + k] += g.v[i * g.cols + da.cols + k];
            }
            break;
        }
        case Op::mse: {
            const Matrix& pm = values_[static_cast<std::size_t>(n.a)];
            const Matrix& tm = values_[static_cast<std::size_t>(n.b)];
            Matrix& dp = adjoints_[static_cast<std::size_t>(n.a)];
            Matrix& dt = adjoints_[static_cast<std::size_t>(n.b)];
            double go = g.v[0] * 2.0 / static_cast<double>(pm.rows);
            for (std::size_t i = 0; i < pm.v.size(); ++i) {
                double d = go * (pm.v[i] - tm.v[i]);
                dp.v[i] += d;
                dt.v[i] -= d;
            }
            break;
        }
        }
    }
    backward_done_ = true;
}

ParamVector Graph::param_gradient() const {
    if (!backward_done_) throw Error("param_gradient called before backward");
    ParamVector out;
    for (const Segment& s : params_->segments()) out.add_segment(s.name, s.shape);
    std::span<float> ov = out.values();
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
        if (nodes_[id].op != Op::param) continue;
        const Segment& seg = params_->segment(nodes_[id].segment);
        const Matrix& g = adjoints_[id];
        for (std::size_t i = 0; i < seg.size; ++i)
            ov[seg.offset + i] =
                static_cast<float>(static_cast<double>(ov[seg.offset + i]) + g.v[i]);
    }
    return out;
}

GradResult grad(const LossClosure& closure, const ParamVector& params) {
    Graph g(params);
    Graph::Id out = closure(g);
    double loss = g.scalar(out);
    if (!std::isfinite(loss)) {
        // Name the first segment carrying a non-finite parameter; if the
        // parameters are clean the failure came from the closure itself.
        for (std::size_t i = 0; i < params.segments().size(); ++i)
            for (float v : params.segment_values(i))
                if (!std::isfinite(v))
                    throw NumericError("non-finite loss; first offending segment: " +
                                       params.segment(i).name);
        throw NumericError("non-finite loss produced by closure at finite parameters");
    }
    g.backward(out);
    GradResult r;
    r.loss = loss;
    r.gradient = g.param_gradient();
    for (std::size_t i = 0; i < r.gradient.segments().size(); ++i)
        for (float v : r.gradient.segment_values(i))
            if (!std::isfinite(v))
                throw NumericError("non-finite gradient; first offending segment: " +
                                   r.gradient.segment(i).name);
    return r;
}

} // namespace flatdiff::numerics
