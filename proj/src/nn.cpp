#include "mmbind/nn.hpp"

#include <cmath>
#include <stdexcept>

#include "mmbind/error.hpp"

namespace mmbind {

std::string_view to_string(Activation a) {
    switch (a) {
        case Activation::linear: return "linear";
        case Activation::relu: return "relu";
        case Activation::tanh: return "tanh";
    }
    return "linear";
}

Activation activation_from_string(std::string_view name) {
    if (name == "linear" || name == "identity") return Activation::linear;
    if (name == "relu") return Activation::relu;
    if (name == "tanh") return Activation::tanh;
    throw ValidationError("activation", "unknown activation '" + std::string(name) + "'");
}

std::string_view to_string(OptimizerKind k) {
    return k == OptimizerKind::adam ? "adam" : "sgd_momentum";
}

OptimizerKind optimizer_from_string(std::string_view name) {
    if (name == "adam") return OptimizerKind::adam;
    if (name == "sgd_momentum" || name == "sgd") return OptimizerKind::sgd_momentum;
    throw ValidationError("optimizer", "unknown optimizer '" + std::string(name) + "'");
}

namespace {

void apply_activation(Matrix& m, Activation a) {
    switch (a) {
        case Activation::linear: break;
        case Activation::relu: m = m.cwiseMax(0.0); break;
        case Activation::tanh: m = m.array().tanh().matrix(); break;
    }
}

// Multiplies grad in place by f'(pre).
void activation_backward(Matrix& grad, const Matrix& pre, Activation a) {
    switch (a) {
        case Activation::linear: break;
        case Activation::relu:
            grad = (pre.array() > 0.0).select(grad.array(), 0.0).matrix();
            break;
        case Activation::tanh: {
            const auto t = pre.array().tanh();
            grad = (grad.array() * (1.0 - t * t)).matrix();
            break;
        }
    }
}

}  // namespace

MlpGrad::MlpGrad(const Mlp& net) {
    layers.reserve(net.layers().size());
    for (const Dense& l : net.layers()) {
        Dense g;
        g.weight = Matrix::Zero(l.weight.rows(), l.weight.cols());
        if (l.has_bias()) g.bias = Vector::Zero(l.bias.size());
        layers.push_back(std::move(g));
    }
}

void MlpGrad::zero() {
    for (Dense& l : layers) {
        l.weight.setZero();
        if (l.has_bias()) l.bias.setZero();
    }
}

Mlp::Mlp(const std::vector<int>& dims, Activation hidden, Activation output, Rng& rng,
         bool bias)
    : hidden_(hidden), output_(output) {
    if (dims.size() < 2) throw ValidationError("dims", "an MLP needs at least input and output dims");
    for (int d : dims) {
        if (d < 1) throw ValidationError("dims", "layer widths must be >= 1");
    }
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        const int in = dims[l];
        const int out = dims[l + 1];
        const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
        Dense layer;
        layer.weight.resize(out, in);
        for (int r = 0; r < out; ++r)
            for (int c = 0; c < in; ++c) layer.weight(r, c) = rng.uniform(-limit, limit);
        if (bias) layer.bias = Vector::Zero(out);
        layers_.push_back(std::move(layer));
    }
}

Matrix Mlp::forward(const Matrix& x) const {
    Matrix h = x;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const Dense& layer = layers_[l];
        Matrix pre = h * layer.weight.transpose();
        if (layer.has_bias()) pre.rowwise() += layer.bias.transpose();
        apply_activation(pre, l + 1 == layers_.size() ? output_ : hidden_);
        h = std::move(pre);
    }
    return h;
}

Matrix Mlp::forward(const Matrix& x, MlpTrace& trace) const {
    trace.inputs.clear();
    trace.preactivations.clear();
    Matrix h = x;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const Dense& layer = layers_[l];
        Matrix pre = h * layer.weight.transpose();
        if (layer.has_bias()) pre.rowwise() += layer.bias.transpose();
        trace.inputs.push_back(std::move(h));
        trace.preactivations.push_back(pre);
        apply_activation(pre, l + 1 == layers_.size() ? output_ : hidden_);
        h = std::move(pre);
    }
    return h;
}

Matrix Mlp::backward(const MlpTrace& trace, const Matrix& grad_out, MlpGrad& grad) const {
    Matrix g = grad_out;
    for (std::size_t li = layers_.size(); li-- > 0;) {
        const Dense& layer = layers_[li];
        activation_backward(g, trace.preactivations[li], li + 1 == layers_.size() ? output_ : hidden_);
        grad.layers[li].weight.noalias() += g.transpose() * trace.inputs[li];
        if (layer.has_bias()) grad.layers[li].bias.noalias() += g.colwise().sum().transpose();
        g = g * layer.weight;
    }
    return g;
}

int Mlp::input_dim() const { return layers_.empty() ? 0 : static_cast<int>(layers_.front().weight.cols()); }
int Mlp::output_dim() const { return layers_.empty() ? 0 : static_cast<int>(layers_.back().weight.rows()); }

std::vector<int> Mlp::dims() const {
    std::vector<int> d;
    if (layers_.empty()) return d;
    d.push_back(input_dim());
    for (const Dense& l : layers_) d.push_back(static_cast<int>(l.weight.rows()));
    return d;
}

std::size_t Mlp::parameter_count() const {
    std::size_t n = 0;
    for (const Dense& l : layers_) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
}

std::vector<double> Mlp::flatten() const {
    std::vector<double> out;
    out.reserve(parameter_count());
    for (const Dense& l : layers_) {
        out.insert(out.end(), l.weight.data(), l.weight.data() + l.weight.size());
        out.insert(out.end(), l.bias.data(), l.bias.data() + l.bias.size());
    }
    return out;
}

void Mlp::assign(std::span<const double> values) {
    if (values.size() != parameter_count())
        throw ShapeError("parameter count mismatch: expected " + std::to_string(parameter_count()) +
                         ", got " + std::to_string(values.size()));
    std::size_t at = 0;
    for (Dense& l : layers_) {
        std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(at), l.weight.size(), l.weight.data());
        at += static_cast<std::size_t>(l.weight.size());
        std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(at), l.bias.size(), l.bias.data());
        at += static_cast<std::size_t>(l.bias.size());
    }
}

bool Mlp::operator==(const Mlp& other) const {
    if (hidden_ != other.hidden_ || output_ != other.output_) return false;
    if (dims() != other.dims()) return false;
    return flatten() == other.flatten();
}

void collect_slots(Mlp& net, const MlpGrad& grad, std::vector<ParamSlot>& out) {
    auto& layers = net.layers();
    for (std::size_t l = 0; l < layers.size(); ++l) {
        Dense& p = layers[l];
        const Dense& g = grad.layers[l];
        out.push_back({{p.weight.data(), static_cast<std::size_t>(p.weight.size())},
                       {g.weight.data(), static_cast<std::size_t>(g.weight.size())}});
        if (p.has_bias())
            out.push_back({{p.bias.data(), static_cast<std::size_t>(p.bias.size())},
                           {g.bias.data(), static_cast<std::size_t>(g.bias.size())}});
    }
}

void Optimizer::step(std::span<const ParamSlot> slots) {
    if (first_.size() != slots.size()) {
        first_.assign(slots.size(), {});
        second_.assign(slots.size(), {});
        for (std::size_t s = 0; s < slots.size(); ++s) {
            first_[s].assign(slots[s].value.size(), 0.0);
            if (cfg_.kind == OptimizerKind::adam) second_[s].assign(slots[s].value.size(), 0.0);
        }
    }
    ++steps_;
    const double lr = cfg_.learning_rate;
    if (cfg_.kind == OptimizerKind::sgd_momentum) {
        for (std::size_t s = 0; s < slots.size(); ++s) {
            auto value = slots[s].value;
            auto grad = slots[s].grad;
            auto& vel = first_[s];
            for (std::size_t i = 0; i < value.size(); ++i) {
                const double g = grad[i] + cfg_.weight_decay * value[i];
                vel[i] = cfg_.momentum * vel[i] + g;
                value[i] -= lr * vel[i];
            }
        }
        return;
    }
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
    for (std::size_t s = 0; s < slots.size(); ++s) {
        auto value = slots[s].value;
        auto grad = slots[s].grad;
        auto& m = first_[s];
        auto& v = second_[s];
        for (std::size_t i = 0; i < value.size(); ++i) {
            const double g = grad[i] + cfg_.weight_decay * value[i];
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
            value[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.epsilon);
        }
    }
}

Matrix normalize_rows(const Matrix& v) {
    Matrix z(v.rows(), v.cols());
    for (Eigen::Index i = 0; i < v.rows(); ++i) z.row(i) = v.row(i) / (v.row(i).norm() + kNormEpsilon);
    return z;
}

Matrix normalize_rows_backward(const Matrix& v, const Matrix& grad_z) {
    // z = v / (n + e), n = |v|:  dz/dv = I/(n+e) - v v^T / (n (n+e)^2)
    Matrix out(v.rows(), v.cols());
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
        const double n = v.row(i).norm();
        const double d = n + kNormEpsilon;
        if (n == 0.0) {
            out.row(i) = grad_z.row(i) / d;
            continue;
        }
        const double dot = v.row(i).dot(grad_z.row(i));
        out.row(i) = grad_z.row(i) / d - v.row(i) * (dot / (n * d * d));
    }
    return out;
}

Matrix softmax_rows(const Matrix& logits) {
    Matrix p(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const double mx = logits.row(i).maxCoeff();
        RowVector e = (logits.row(i).array() - mx).exp().matrix();
        p.row(i) = e / e.sum();
    }
    return p;
}

Matrix take_rows(const Matrix& m, std::span<const std::size_t> rows) {
    Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
    return out;
}

}  // namespace mmbind
