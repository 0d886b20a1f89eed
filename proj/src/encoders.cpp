#include "mmbind/encoders.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "mmbind/checkpoint.hpp"
#include "mmbind/error.hpp"
#include "mmbind/io.hpp"
#include "mmbind/rng.hpp"

namespace mmbind {

using nlohmann::json;

void EncoderSpec::validate(int input_dim) const {
    if (latent_dim < 1) throw ValidationError("latent_dim", "must be >= 1");
    if (latent_dim > input_dim)
        throw ValidationError("latent_dim", "must not exceed the input dim (" + std::to_string(input_dim) + ")");
    for (int h : hidden_dims)
        if (h < 1) throw ValidationError("hidden_dims", "widths must be >= 1");
    if (epochs < 0) throw ValidationError("epochs", "must be >= 0");
    if (batch_size < 1) throw ValidationError("batch_size", "must be >= 1");
    if (!(learning_rate > 0.0)) throw ValidationError("learning_rate", "must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("momentum", "must be in [0, 1)");
}

UnimodalEncoder::UnimodalEncoder(ModalityId modality, Mlp net) : modality_(std::move(modality)), net_(std::move(net)) {}

Matrix UnimodalEncoder::encode(const Matrix& samples) const {
    if (samples.cols() != input_dim())
        throw ShapeError("encode(" + modality_ + "): expected " + std::to_string(input_dim()) + " columns, got " +
                         std::to_string(samples.cols()));
    if (samples.rows() == 0) return Matrix(0, latent_dim());
    return net_.forward(samples);
}

Matrix encode(const UnimodalEncoder& encoder, const Matrix& samples) { return encoder.encode(samples); }

Autoencoder make_autoencoder(const EncoderSpec& spec, int input_dim, std::uint64_t seed) {
    spec.validate(input_dim);
    Rng rng(derive_seed(seed, "autoencoder:" + spec.modality));
    std::vector<int> enc_dims{input_dim};
    enc_dims.insert(enc_dims.end(), spec.hidden_dims.begin(), spec.hidden_dims.end());
    enc_dims.push_back(spec.latent_dim);
    std::vector<int> dec_dims(enc_dims.rbegin(), enc_dims.rend());
    Autoencoder ae;
    ae.spec = spec;
    ae.seed = seed;
    ae.encoder = UnimodalEncoder(spec.modality, Mlp(enc_dims, spec.activation, Activation::linear, rng));
    ae.decoder = Mlp(dec_dims, spec.activation, Activation::linear, rng);
    return ae;
}

double reconstruction_loss(const Mlp& encoder, const Mlp& decoder, const Matrix& x, MlpGrad* encoder_grad,
                           MlpGrad* decoder_grad) {
    if (x.rows() == 0) return 0.0;
    const double n = static_cast<double>(x.rows());
    MlpTrace enc_trace;
    MlpTrace dec_trace;
    const Matrix h = encoder.forward(x, enc_trace);
    const Matrix recon = decoder.forward(h, dec_trace);
    const Matrix diff = recon - x;
    const double loss = diff.squaredNorm() / n;
    if (encoder_grad != nullptr && decoder_grad != nullptr) {
        const Matrix grad_recon = (2.0 / n) * diff;
        const Matrix grad_h = decoder.backward(dec_trace, grad_recon, *decoder_grad);
        encoder.backward(enc_trace, grad_h, *encoder_grad);
    }
    return loss;
}

Autoencoder train_autoencoder(const Matrix& data, const EncoderSpec& spec, std::uint64_t seed) {
    if (data.rows() == 0) throw ValidationError("data", "autoencoder training needs at least one sample");
    Autoencoder ae = make_autoencoder(spec, static_cast<int>(data.cols()), seed);
    Mlp& enc = ae.encoder.net();
    Mlp& dec = ae.decoder;
    MlpGrad enc_grad(enc);
    MlpGrad dec_grad(dec);
    std::vector<ParamSlot> slots;
    collect_slots(enc, enc_grad, slots);
    collect_slots(dec, dec_grad, slots);
    OptimizerConfig oc;
    oc.kind = OptimizerKind::sgd_momentum;
    oc.learning_rate = spec.learning_rate;
    oc.momentum = spec.momentum;
    Optimizer opt(oc);

    Rng rng(derive_seed(seed, "autoencoder-batches:" + spec.modality));
    const auto n = static_cast<std::size_t>(data.rows());
    const auto batch = static_cast<std::size_t>(spec.batch_size);
    for (int epoch = 0; epoch < spec.epochs; ++epoch) {
        const auto order = rng.permutation(n);
        double total = 0.0;
        for (std::size_t start = 0; start < n; start += batch) {
            const std::size_t stop = std::min(n, start + batch);
            const Matrix x = take_rows(data, std::span(order).subspan(start, stop - start));
            enc_grad.zero();
            dec_grad.zero();
            const double loss = reconstruction_loss(enc, dec, x, &enc_grad, &dec_grad);
            if (!std::isfinite(loss)) throw TrainingError("autoencoder loss became non-finite", spec.learning_rate, epoch);
            total += loss * static_cast<double>(stop - start);
            opt.step(slots);
        }
        ae.loss_curve.push_back(total / static_cast<double>(n));
    }
    return ae;
}

Matrix stack_rows(std::span<const Matrix> parts) {
    Eigen::Index rows = 0;
    Eigen::Index cols = parts.empty() ? 0 : parts.front().cols();
    for (const auto& p : parts) {
        if (p.cols() != cols) throw ShapeError("stack_rows: views have different widths");
        rows += p.rows();
    }
    Matrix out(rows, cols);
    Eigen::Index at = 0;
    for (const auto& p : parts) {
        out.middleRows(at, p.rows()) = p;
        at += p.rows();
    }
    return out;
}

void save_autoencoder(const std::filesystem::path& dir, const Autoencoder& ae) {
    json extra;
    extra["kind"] = "autoencoder";
    extra["modality"] = ae.spec.modality;
    extra["seed"] = ae.seed;
    extra["spec"] = {{"hidden_dims", ae.spec.hidden_dims},
                     {"latent_dim", ae.spec.latent_dim},
                     {"activation", to_string(ae.spec.activation)},
                     {"epochs", ae.spec.epochs},
                     {"batch_size", ae.spec.batch_size},
                     {"learning_rate", ae.spec.learning_rate},
                     {"momentum", ae.spec.momentum}};
    extra["loss_curve"] = ae.loss_curve;
    save_checkpoint(dir, {{"encoder", ae.encoder.net()}, {"decoder", ae.decoder}}, extra);
}

Autoencoder load_autoencoder(const std::filesystem::path& dir) {
    const auto ck = load_checkpoint(dir);
    if (ck.extra.value("kind", "") != "autoencoder") throw FormatError("not an autoencoder checkpoint: " + dir.string());
    Autoencoder ae;
    const json& s = ck.extra.at("spec");
    ae.spec.modality = ck.extra.at("modality").get<std::string>();
    ae.spec.hidden_dims = s.at("hidden_dims").get<std::vector<int>>();
    ae.spec.latent_dim = s.at("latent_dim").get<int>();
    ae.spec.activation = activation_from_string(s.at("activation").get<std::string>());
    ae.spec.epochs = s.at("epochs").get<int>();
    ae.spec.batch_size = s.at("batch_size").get<int>();
    ae.spec.learning_rate = s.at("learning_rate").get<double>();
    ae.spec.momentum = s.at("momentum").get<double>();
    ae.seed = ck.extra.at("seed").get<std::uint64_t>();
    ae.loss_curve = ck.extra.value("loss_curve", std::vector<double>{});
    ae.encoder = UnimodalEncoder(ae.spec.modality, ck.net("encoder"));
    ae.decoder = ck.net("decoder");
    return ae;
}

// ---------------------------------------------------------------------------
// Label embeddings

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::string cur;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isalnum(c) != 0) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            tokens.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) tokens.push_back(std::move(cur));
    return tokens;
}

OfflineLabelEmbedder::OfflineLabelEmbedder(int dim, std::uint64_t seed, std::map<std::string, double> field_weights)
    : dim_(dim), seed_(seed), field_weights_(std::move(field_weights)) {
    if (dim < 1) throw ValidationError("label_embedding.dim", "must be >= 1");
}

Vector OfflineLabelEmbedder::token_vector(std::string_view token) const {
    Rng rng(derive_seed(seed_, std::string("token:") + std::string(token)));
    Vector v(dim_);
    for (int i = 0; i < dim_; ++i) v(i) = rng.normal();
    return v / v.norm();
}

Vector OfflineLabelEmbedder::embed(std::string_view text) const {
    if (tokenize(text).empty()) throw ValidationError("text", "label text must contain at least one token");
    Vector sum = Vector::Zero(dim_);
    auto add_tokens = [&](std::string_view part, double weight) {
        for (const auto& t : tokenize(part)) sum += weight * token_vector(t);
    };
    if (text.find('=') == std::string_view::npos) {
        add_tokens(text, 1.0);
    } else {
        std::size_t begin = 0;
        while (begin <= text.size()) {
            std::size_t end = text.find_first_of(";,", begin);
            if (end == std::string_view::npos) end = text.size();
            const std::string_view field = text.substr(begin, end - begin);
            const std::size_t eq = field.find('=');
            if (eq == std::string_view::npos) {
                add_tokens(field, 1.0);
            } else {
                const auto key_tokens = tokenize(field.substr(0, eq));
                const std::string key = key_tokens.empty() ? std::string() : key_tokens.front();
                auto it = field_weights_.find(key);
                add_tokens(field.substr(eq + 1), it == field_weights_.end() ? 1.0 : it->second);
            }
            begin = end + 1;
        }
    }
    return sum / (sum.norm() + kNormEpsilon);
}

ExternalLabelEmbedder::ExternalLabelEmbedder(const std::filesystem::path& table) {
    const json j = io::read_json(table);
    try {
        dim_ = j.at("dim").get<int>();
        for (const auto& [text, values] : j.at("embeddings").items()) {
            const auto v = values.get<std::vector<double>>();
            if (static_cast<int>(v.size()) != dim_)
                throw ShapeError("embedding for '" + text + "' has " + std::to_string(v.size()) + " values, expected " +
                                 std::to_string(dim_));
            table_.emplace(text, Eigen::Map<const Vector>(v.data(), dim_));
        }
    } catch (const json::exception& e) {
        throw FormatError("malformed embedding table " + table.string() + ": " + e.what());
    }
}

Vector ExternalLabelEmbedder::embed(std::string_view text) const {
    if (text.empty()) throw ValidationError("text", "label text must be non-empty");
    auto it = table_.find(text);
    if (it == table_.end()) throw ValidationError("text", "no external embedding for '" + std::string(text) + "'");
    return it->second / (it->second.norm() + kNormEpsilon);
}

Matrix embed_labels(std::span<const std::string> texts, const LabelEmbeddingProvider& provider) {
    Matrix out(static_cast<Eigen::Index>(texts.size()), provider.dim());
    for (std::size_t i = 0; i < texts.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = provider.embed(texts[i]).transpose();
    return out;
}

std::string label_text(const std::string& class_name, const Meta& meta, std::span<const std::string> meta_keys) {
    if (meta_keys.empty()) return class_name;
    std::string out = "class=" + class_name;
    for (const auto& k : meta_keys) {
        auto it = meta.find(k);
        if (it != meta.end()) out += "; " + k + "=" + it->second;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Projection heads

ProjectionHead::ProjectionHead(int input_dim, Rng& rng, int output_dim, std::vector<int> hidden, bool bias) {
    std::vector<int> dims{input_dim};
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    dims.push_back(output_dim);
    net_ = Mlp(dims, Activation::relu, Activation::linear, rng, bias);
}

Matrix project_and_normalize(const Matrix& features, const ProjectionHead& head) {
    if (features.cols() != head.input_dim())
        throw ShapeError("projection head expects " + std::to_string(head.input_dim()) + " features, got " +
                         std::to_string(features.cols()));
    return normalize_rows(head.net().forward(features));
}

}  // namespace mmbind
