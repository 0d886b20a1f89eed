#pragma once

// Unimodal encoders: autoencoder pre-training for a shared sensor modality,
// label-text embedding providers, and projection heads onto the unit sphere.

#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mmbind/corpus.hpp"
#include "mmbind/nn.hpp"

namespace mmbind {

struct EncoderSpec {
    ModalityId modality;
    std::vector<int> hidden_dims = {64};
    int latent_dim = 32;
    Activation activation = Activation::relu;
    int epochs = 100;
    int batch_size = 32;
    double learning_rate = 1e-3;
    double momentum = 0.9;

    /// Throws ValidationError; `input_dim` is the modality's view width.
    void validate(int input_dim) const;
    bool operator==(const EncoderSpec&) const = default;
};

/// Feature extractor for one modality; encode() is a pure function.
class UnimodalEncoder {
public:
    UnimodalEncoder() = default;
    UnimodalEncoder(ModalityId modality, Mlp net);

    /// N x latent_dim. N may be zero.
    Matrix encode(const Matrix& samples) const;

    const ModalityId& modality() const { return modality_; }
    int input_dim() const { return net_.input_dim(); }
    int latent_dim() const { return net_.output_dim(); }
    const Mlp& net() const { return net_; }
    Mlp& net() { return net_; }

private:
    ModalityId modality_;
    Mlp net_;
};

Matrix encode(const UnimodalEncoder& encoder, const Matrix& samples);

struct Autoencoder {
    UnimodalEncoder encoder;
    Mlp decoder;
    EncoderSpec spec;
    std::uint64_t seed = 0;
    std::vector<double> loss_curve;  // mean reconstruction loss per epoch
};

/// Symmetric MLP autoencoder: encoder dims {in, hidden..., latent} and a
/// mirrored decoder. Hidden layers use spec.activation; the latent and
/// output layers are linear.
Autoencoder make_autoencoder(const EncoderSpec& spec, int input_dim, std::uint64_t seed);

/// Mean over samples of ||dec(enc(x)) - x||^2. When grads are given,
/// accumulates dL/dtheta for both networks.
double reconstruction_loss(const Mlp& encoder, const Mlp& decoder, const Matrix& x,
                           MlpGrad* encoder_grad = nullptr, MlpGrad* decoder_grad = nullptr);

/// Train on the union of shared-modality views (rows of `data`) with SGD +
/// momentum. Throws TrainingError on a non-finite loss.
Autoencoder train_autoencoder(const Matrix& data, const EncoderSpec& spec, std::uint64_t seed);

/// Stack the given views (all with equal width) into one matrix.
Matrix stack_rows(std::span<const Matrix> parts);

void save_autoencoder(const std::filesystem::path& dir, const Autoencoder& ae);
Autoencoder load_autoencoder(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Label embeddings

/// Maps label text to a fixed-width vector. Identical text always yields an
/// identical embedding.
class LabelEmbeddingProvider {
public:
    virtual ~LabelEmbeddingProvider() = default;
    virtual int dim() const = 0;
    virtual std::string_view kind() const = 0;
    /// Throws ValidationError on empty text.
    virtual Vector embed(std::string_view text) const = 0;
};

/// Hermetic default. Each token maps to a fixed random unit vector seeded by
/// a hash of (seed, token); a text embeds to the normalized weighted mean of
/// its token vectors.
///
/// Text is either free-form ("walking") or structured metadata
/// ("class=walking; env=indoor"). In structured text each `key=value` field
/// contributes the tokens of its value, weighted by field_weights[key]
/// (default 1). The default weights give the class field twice the pull of
/// any other field.
class OfflineLabelEmbedder final : public LabelEmbeddingProvider {
public:
    explicit OfflineLabelEmbedder(int dim = 64, std::uint64_t seed = 0,
                                  std::map<std::string, double> field_weights = {{"class", 2.0}});

    int dim() const override { return dim_; }
    std::string_view kind() const override { return "offline_deterministic"; }
    Vector embed(std::string_view text) const override;

    Vector token_vector(std::string_view token) const;

private:
    int dim_;
    std::uint64_t seed_;
    std::map<std::string, double> field_weights_;
};

/// Adapter for embeddings produced by an external sentence-embedding model.
/// Reads a JSON object {"dim": d, "embeddings": {"text": [..], ...}} written
/// offline by whatever model is in use; lookups of unknown text throw.
class ExternalLabelEmbedder final : public LabelEmbeddingProvider {
public:
    explicit ExternalLabelEmbedder(const std::filesystem::path& table);

    int dim() const override { return dim_; }
    std::string_view kind() const override { return "external_model"; }
    Vector embed(std::string_view text) const override;

private:
    int dim_ = 0;
    std::map<std::string, Vector, std::less<>> table_;
};

/// One row per text.
Matrix embed_labels(std::span<const std::string> texts, const LabelEmbeddingProvider& provider);

/// Lowercased alphanumeric tokens.
std::vector<std::string> tokenize(std::string_view text);

/// Label text for one sample: the class name alone, or structured
/// "class=<name>; <key>=<value>..." when metadata keys are requested.
std::string label_text(const std::string& class_name, const Meta& meta,
                       std::span<const std::string> meta_keys);

// ---------------------------------------------------------------------------
// Projection heads

inline constexpr int kDefaultProjectionDim = 128;

/// Per-modality MLP mapping encoder features to a common width F.
class ProjectionHead {
public:
    ProjectionHead() = default;
    ProjectionHead(int input_dim, Rng& rng, int output_dim = kDefaultProjectionDim,
                   std::vector<int> hidden = {}, bool bias = true);
    explicit ProjectionHead(Mlp net) : net_(std::move(net)) {}

    int input_dim() const { return net_.input_dim(); }
    int output_dim() const { return net_.output_dim(); }
    const Mlp& net() const { return net_; }
    Mlp& net() { return net_; }

private:
    Mlp net_;
};

/// Rows z = h / (||h|| + 1e-12) with h = head(features). A zero h maps to the
/// zero vector; any other row has norm 1 up to rounding.
Matrix project_and_normalize(const Matrix& features, const ProjectionHead& head);

}  // namespace mmbind
