#pragma once

// Aggregated heterogeneous training data, similarity-weighted multimodal
// contrastive pre-training, supervised fine-tuning and masked evaluation.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmbind/binding.hpp"
#include "mmbind/corpus.hpp"
#include "mmbind/encoders.hpp"
#include "mmbind/nn.hpp"

namespace mmbind {

// ---------------------------------------------------------------------------
// Aggregated training set

enum class RowSource { incomplete, pseudo_paired };

/// Row-aligned union of dummy-padded incomplete samples and pseudo-paired
/// samples over a fixed modality list.
struct AggregatedTrainingSet {
    std::vector<ModalityDecl> modalities;   // column order of `presence`
    std::map<ModalityId, Matrix> views;     // N x dim, exact zeros where absent
    Matrix presence;                        // N x M, entries 0 or 1
    std::vector<double> weights;            // N
    std::vector<int> labels;                // N, -1 where unknown
    std::vector<RowSource> sources;         // N

    std::size_t size() const { return weights.size(); }
    std::size_t modality_index(const ModalityId& m) const;
    std::size_t count(RowSource s) const;
};

/// Materializes the "label" modality as text embeddings of class names.
struct LabelViews {
    std::shared_ptr<const LabelEmbeddingProvider> provider;
    std::vector<std::string> meta_keys;
};

/// `modalities` is the global list (may contain "label", whose dim must
/// equal the provider's). Incomplete rows get weight 1; pseudo-paired rows
/// get `pair_weights` (same length as `pairs`). Every row must have at least
/// two present modalities.
AggregatedTrainingSet build_training_set(const std::vector<ModalityDecl>& modalities,
                                         std::span<const IncompleteDataset> incomplete,
                                         const PseudoPairedDataset* pairs, std::span<const double> pair_weights,
                                         const LabelViews& label_views = {});

/// Label-modality view for a set of labeled rows: one embedding per row.
Matrix label_view(const std::vector<std::string>& class_names, std::span<const int> labels,
                  std::span<const Meta> meta, const LabelViews& label_views);

// ---------------------------------------------------------------------------
// Weighted contrastive loss

/// z[m] is the B x F unit-norm embedding matrix of modality m; mask is
/// B x M (0/1). Returns
///   L = - sum_i w_i sum_{p != q, mask(i,p) = mask(i,q) = 1}
///         [ s_ii^pq - log sum_{j != i, mask(j,q) = 1} exp(s_ij^pq) ]
/// with s_ij^pq = z_i^p . z_j^q / tau. Terms with no admissible negative are
/// skipped. When `grad` is given it receives dL/dz[m].
double weighted_contrastive_loss(const std::vector<Matrix>& z, std::span<const double> weights, const Matrix& mask,
                                 double tau, std::vector<Matrix>* grad = nullptr);

// ---------------------------------------------------------------------------
// Model

struct ModelSpec {
    std::vector<ModalityDecl> modalities;
    std::vector<int> encoder_hidden = {64};
    int feature_dim = 32;
    int projection_dim = kDefaultProjectionDim;
    std::vector<int> classifier_hidden = {64};
    int num_classes = 0;
    /// Append the presence mask to the classifier input.
    bool prompt = false;

    void validate() const;
    bool operator==(const ModelSpec&) const = default;
};

nlohmann::json to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const nlohmann::json& j);

struct ModalityBranch {
    ModalityDecl decl;
    Mlp encoder;
    ProjectionHead head;

    bool operator==(const ModalityBranch& o) const {
        return decl == o.decl && encoder == o.encoder && head.net() == o.head.net();
    }
};

/// Per-modality encoder and projection head plus a classifier over the
/// concatenated features of every sensor modality ("label" is excluded).
class MultimodalModel {
public:
    MultimodalModel() = default;
    MultimodalModel(ModelSpec spec, std::uint64_t seed);

    const ModelSpec& spec() const { return spec_; }
    const std::vector<ModalityBranch>& branches() const { return branches_; }
    std::vector<ModalityBranch>& branches() { return branches_; }
    ModalityBranch& branch(const ModalityId& m);
    const ModalityBranch& branch(const ModalityId& m) const;
    bool has(const ModalityId& m) const;

    /// Sensor modalities feeding the classifier, in spec order.
    std::vector<ModalityId> classifier_modalities() const;
    const Mlp& classifier() const { return classifier_; }
    Mlp& classifier() { return classifier_; }
    /// Replace the classifier with a freshly initialized one.
    void reset_classifier(std::uint64_t seed);

    /// Unit-norm projections of modality m for the given raw views.
    Matrix embed(const ModalityId& m, const Matrix& views) const;
    /// Classifier logits; modalities outside `mask` (or missing from `views`)
    /// are fed as zero tensors. An empty mask means every modality.
    Matrix logits(const std::map<ModalityId, Matrix>& views, const std::vector<ModalityId>& mask) const;
    /// Logits with per-row presence (N x K over classifier_modalities()).
    Matrix logits(const std::map<ModalityId, Matrix>& views, const Matrix& presence) const;

    std::vector<double> flatten() const;
    bool operator==(const MultimodalModel&) const = default;

private:
    ModelSpec spec_;
    std::vector<ModalityBranch> branches_;
    Mlp classifier_;
};

void save_model(const std::filesystem::path& dir, const MultimodalModel& model,
                const nlohmann::json& extra = nlohmann::json::object());
MultimodalModel load_model(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Pre-training

struct ContrastiveConfig {
    double temperature = 0.07;
    int batch_size = 64;
    int epochs = 100;
    double learning_rate = 1e-3;
    bool mask_dummy_pairs = true;
    WeightNorm weight_norm = WeightNorm::max;
    /// Encoders kept fixed (their projection heads still train).
    std::set<ModalityId> frozen_encoders;

    void validate() const;
    bool operator==(const ContrastiveConfig&) const = default;
};

struct EpochLog {
    int epoch = 0;
    double loss = 0.0;
    double learning_rate = 0.0;
};

struct PretrainResult {
    MultimodalModel model;
    std::vector<EpochLog> curve;
};

/// Mini-batch Adam on L / B. Batches follow a seeded permutation; a trailing
/// batch with fewer than two rows is merged into the previous one. Throws
/// TrainingError on a non-finite loss.
PretrainResult pretrain(const AggregatedTrainingSet& set, MultimodalModel model, const ContrastiveConfig& cfg,
                        std::uint64_t seed);

/// Mean cosine between the projections of modalities p and q over rows where
/// both are present.
double mean_positive_cosine(const MultimodalModel& model, const AggregatedTrainingSet& set, const ModalityId& p,
                            const ModalityId& q);

// ---------------------------------------------------------------------------
// Fine-tuning and evaluation

enum class FinetuneMode { full, linear_probe };

std::string to_string(FinetuneMode m);
FinetuneMode finetune_mode_from_string(std::string_view name);

struct FinetuneConfig {
    int epochs = 50;
    int batch_size = 32;
    double learning_rate = 1e-3;
    FinetuneMode mode = FinetuneMode::full;
    /// Modalities fed to the classifier; empty means all.
    std::vector<ModalityId> mask;

    void validate() const;
    bool operator==(const FinetuneConfig&) const = default;
};

struct FinetuneResult {
    MultimodalModel model;
    std::vector<EpochLog> curve;
};

/// Rows for classifier training. presence is N x K over the model's
/// classifier modalities; absent entries are fed as zero inputs (and zero
/// prompt bits). Views may omit modalities that are absent everywhere.
struct SupervisedData {
    std::map<ModalityId, Matrix> views;
    Matrix presence;
    std::vector<int> labels;

    std::size_t size() const { return labels.size(); }
};

/// Whole dataset with the modalities selected by `mask` present.
SupervisedData supervised_data(const MultimodalModel& model, const IncompleteDataset& data,
                               const std::vector<ModalityId>& mask = {});
/// Zero-padded union of labeled incomplete datasets.
SupervisedData supervised_data(const MultimodalModel& model, std::span<const IncompleteDataset> datasets);

/// Cross-entropy training on arbitrary rows; cfg.mask is ignored. Encoders
/// train in full mode when their modality is present in some row.
FinetuneResult train_supervised(MultimodalModel model, const SupervisedData& data, const FinetuneConfig& cfg,
                                std::uint64_t seed);

/// Cross-entropy training of the classifier (and encoders in full mode) on a
/// labeled dataset. Throws ValidationError on labels outside [0, C).
FinetuneResult finetune(MultimodalModel model, const IncompleteDataset& labeled, const FinetuneConfig& cfg,
                        std::uint64_t seed);

std::vector<int> predict(const MultimodalModel& model, const IncompleteDataset& data,
                         const std::vector<ModalityId>& mask = {});

struct ClassMetrics {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t support = 0;
};

struct EvalResult {
    double accuracy = 0.0;
    double macro_f1 = 0.0;
    std::vector<ClassMetrics> per_class;
    std::vector<std::vector<std::size_t>> confusion;  // [truth][prediction]
};

/// Macro F1 averages over classes that occur in the truth or the predictions.
EvalResult classification_metrics(std::span<const int> truth, std::span<const int> predicted, int num_classes);

/// Scores predictions against the dataset's evaluation labels. Throws on an
/// empty set or a mask without any classifier modality.
EvalResult evaluate(const MultimodalModel& model, const IncompleteDataset& test,
                    const std::vector<ModalityId>& mask = {});

}  // namespace mmbind
