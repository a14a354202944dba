#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flatdiff/errors.hpp"

namespace flatdiff::numerics {

// ---------------------------------------------------------------------------
// Shapes and tensors
// ---------------------------------------------------------------------------

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);

// Row-major 32-bit tensor. Parameters and data interchange live here; all
// arithmetic kernels lift to double internally.
struct Tensor {
    Shape shape;
    std::vector<float> data;

    Tensor() = default;
    Tensor(Shape s, std::vector<float> d);
    static Tensor zeros(Shape s);

    std::size_t size() const { return data.size(); }
    float& at(std::size_t i) { return data[i]; }
    float at(std::size_t i) const { return data[i]; }
    // 2-D access for [rows, cols] tensors.
    float& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
    float at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }
    std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
    std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }
};

// Dense double matrix used by the evaluation kernels.
struct Matrix {
    std::size_t rows = 0, cols = 0;
    std::vector<double> v;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0) {}
    double& operator()(std::size_t i, std::size_t j) { return v[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return v[i * cols + j]; }
    std::size_t size() const { return v.size(); }

    static Matrix from_tensor(const Tensor& t);
    Tensor to_tensor() const;
};

// ---------------------------------------------------------------------------
// Seeded randomness
// ---------------------------------------------------------------------------

// Counter-based generator: outputs depend only on (key, counter), so streams
// can be re-created mid-run (training resume) without replaying history.
// Sub-streams for distinct purposes are derived from string labels.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    Rng stream(std::string_view label) const;
    Rng stream(std::string_view label, std::uint64_t index) const;

    std::uint64_t next_u64();
    double uniform();  // [0, 1)
    double gaussian();
    std::uint64_t below(std::uint64_t n);  // unbiased in [0, n)

    void fill_gaussian(std::span<float> out);
    void fill_gaussian(std::span<double> out);

private:
    Rng(std::uint64_t key, int);  // raw-key constructor

    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

Tensor gaussian_sample(Rng& rng, Shape shape);

// ---------------------------------------------------------------------------
// Parameter vectors
// ---------------------------------------------------------------------------

struct Segment {
    std::string name;
    Shape shape;
    std::size_t offset = 0;
    std::size_t size = 0;
};

// Flat, ordered view of all trainable parameters. The unit of perturbation,
// averaging, and quantization. Segment order is fixed per architecture.
class ParamVector {
public:
    ParamVector() = default;

    // Appends a zero-initialized segment; offsets partition the value array.
    std::size_t add_segment(std::string name, Shape shape);

    std::size_t size() const { return values_.size(); }
    std::span<float> values() { return values_; }
    std::span<const float> values() const { return values_; }
    const std::vector<Segment>& segments() const { return segments_; }

    std::span<float> segment_values(std::size_t idx);
    std::span<const float> segment_values(std::size_t idx) const;
    const Segment& segment(std::size_t idx) const { return segments_[idx]; }
    std::size_t segment_index(std::string_view name) const;

    bool same_layout(const ParamVector& other) const;
    void require_same_layout(const ParamVector& other, std::string_view what) const;

    double norm() const;  // global l2, double accumulation
    double rms() const;

private:
    std::vector<Segment> segments_;
    std::vector<float> values_;
};

// a*x + y elementwise; layouts must match.
ParamVector param_axpy(double a, const ParamVector& x, const ParamVector& y);

// ---------------------------------------------------------------------------
// Reverse-mode gradients over a fixed layer vocabulary
// ---------------------------------------------------------------------------

// Tape for the closed primitive set used by the eps-prediction models:
// dense affine, ReLU/SiLU, add, scale, mean-squared-error, plus constant
// inputs (data batches, timestep embeddings) and column concatenation.
// Values are computed eagerly in double; backward() fills adjoints.
class Graph {
public:
    using Id = int;

    explicit Graph(const ParamVector& params);

    Id input(Matrix m);
    Id param(std::size_t segment_index);  // segment viewed as [shape0, shape1] or [1, shape0]
    Id param(std::string_view segment_name);

    // x:[n,in], weight:[out,in], bias:[out] (as [1,out]) -> [n,out]
    Id affine(Id x, Id weight, Id bias);
    Id relu(Id x);
    Id silu(Id x);
    Id add(Id a, Id b);
    Id scale(double a, Id x);
    Id concat_cols(Id a, Id b);
    // Scalar: sum of squared differences divided by the row count
    // (mean over the batch of per-row squared norms).
    Id mse(Id pred, Id target);

    const Matrix& value(Id id) const { return values_[static_cast<std::size_t>(id)]; }
    double scalar(Id id) const;

    void backward(Id output);
    const Matrix& adjoint(Id id) const { return adjoints_[static_cast<std::size_t>(id)]; }

    // Gradient with respect to every param leaf, accumulated into the
    // parameter layout. Untouched segments stay zero. Call after backward().
    ParamVector param_gradient() const;

private:
    enum class Op { input, param, affine, relu, silu, add, scale, concat, mse };
    struct Node {
        Op op;
        Id a = -1, b = -1, c = -1;
        double factor = 0.0;
        std::size_t segment = 0;
    };

    Id push(Op op, Matrix value, Id a = -1, Id b = -1, Id c = -1);

    const ParamVector* params_;
    std::vector<Node> nodes_;
    std::vector<Matrix> values_;
    std::vector<Matrix> adjoints_;
    bool backward_done_ = false;
};

// A loss closure builds a scalar node from the tape primitives.
using LossClosure = std::function<Graph::Id(Graph&)>;

struct GradResult {
    double loss = 0.0;
    ParamVector gradient;
};

// Evaluates the closure at `params` and returns (loss, gradient) with the
// gradient in the same segment layout. Non-finite results raise NumericError
// naming the first offending segment.
GradResult grad(const LossClosure& closure, const ParamVector& params);

} // namespace flatdiff::numerics
