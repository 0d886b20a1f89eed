#pragma once

// Small dense-network toolkit: multilayer perceptrons with hand-written
// backpropagation and first-order optimizers. Everything is float64 so that
// finite-difference gradient checks are meaningful.

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mmbind/rng.hpp"

namespace mmbind {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

enum class Activation { linear, relu, tanh };

std::string_view to_string(Activation a);
Activation activation_from_string(std::string_view name);

/// One affine layer, y = x W^T + b, with W stored out x in.
struct Dense {
    Matrix weight;
    Vector bias;  // empty when the layer has no bias
    bool has_bias() const { return bias.size() > 0; }
};

class Mlp;

/// Gradient buffers shaped like an Mlp's parameters.
struct MlpGrad {
    std::vector<Dense> layers;

    explicit MlpGrad(const Mlp& net);
    MlpGrad() = default;
    void zero();
};

/// Intermediate values kept from a forward pass for backpropagation.
struct MlpTrace {
    std::vector<Matrix> inputs;       // input to layer l
    std::vector<Matrix> preactivations;
};

/// Multilayer perceptron over row-major batches (one sample per row).
class Mlp {
public:
    Mlp() = default;

    /// dims = {in, h1, ..., out}. Hidden layers use `hidden`, the last layer
    /// uses `output`. Weights use Glorot-uniform initialization, biases zero.
    Mlp(const std::vector<int>& dims, Activation hidden, Activation output, Rng& rng,
        bool bias = true);

    Matrix forward(const Matrix& x) const;
    Matrix forward(const Matrix& x, MlpTrace& trace) const;

    /// Accumulates parameter gradients into `grad` and returns dL/dx.
    Matrix backward(const MlpTrace& trace, const Matrix& grad_out, MlpGrad& grad) const;

    int input_dim() const;
    int output_dim() const;
    std::size_t parameter_count() const;
    bool empty() const { return layers_.empty(); }

    const std::vector<Dense>& layers() const { return layers_; }
    std::vector<Dense>& layers() { return layers_; }
    Activation hidden_activation() const { return hidden_; }
    Activation output_activation() const { return output_; }
    std::vector<int> dims() const;

    /// Flat copy of all parameters, layer by layer (weight then bias).
    std::vector<double> flatten() const;
    /// Inverse of flatten(); size must equal parameter_count().
    void assign(std::span<const double> values);

    bool operator==(const Mlp& other) const;

private:
    std::vector<Dense> layers_;
    Activation hidden_ = Activation::relu;
    Activation output_ = Activation::linear;
};

/// A parameter tensor and its gradient, viewed as flat arrays.
struct ParamSlot {
    std::span<double> value;
    std::span<const double> grad;
};

/// Append (parameter, gradient) slots for every tensor of `net`.
void collect_slots(Mlp& net, const MlpGrad& grad, std::vector<ParamSlot>& out);

enum class OptimizerKind { sgd_momentum, adam };

std::string_view to_string(OptimizerKind k);
OptimizerKind optimizer_from_string(std::string_view name);

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::sgd_momentum;
    double learning_rate = 1e-3;
    double momentum = 0.9;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.0;
};

/// Stateful first-order optimizer. Slots must be passed in the same order
/// on every step; state is keyed by slot position.
class Optimizer {
public:
    explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {}

    void step(std::span<const ParamSlot> slots);
    const OptimizerConfig& config() const { return cfg_; }

private:
    OptimizerConfig cfg_;
    std::vector<std::vector<double>> first_;
    std::vector<std::vector<double>> second_;
    std::int64_t steps_ = 0;
};

/// Row-wise L2 normalization z = v / (||v|| + eps).
inline constexpr double kNormEpsilon = 1e-12;
Matrix normalize_rows(const Matrix& v);
/// Backprop of normalize_rows: given v and dL/dz, returns dL/dv.
Matrix normalize_rows_backward(const Matrix& v, const Matrix& grad_z);

/// Numerically stable row-wise softmax.
Matrix softmax_rows(const Matrix& logits);

/// Gather rows by index.
Matrix take_rows(const Matrix& m, std::span<const std::size_t> rows);

}  // namespace mmbind
