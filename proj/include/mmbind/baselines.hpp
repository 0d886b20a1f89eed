#pragma once

// MMBind and its comparison methods behind one trainer interface:
// (datasets, fine-tune set, config, seed) -> model.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mmbind/binding.hpp"
#include "mmbind/corpus.hpp"
#include "mmbind/encoders.hpp"
#include "mmbind/training.hpp"

namespace mmbind {

enum class MethodId { lower_bound, unimodal, mim, mpm, cmg, dcm, imagebind, mmbind, upper_bound };

std::string_view to_string(MethodId m);
MethodId method_from_string(std::string_view name);
const std::vector<MethodId>& all_methods();

/// MMBind ablation variants: pseudo pairs only (C1), plus incomplete data
/// (C1+C2), plus similarity weights (C1+C2+C3, the full method).
enum class MMBindVariant { pairs_only, unweighted, full };

std::string_view to_string(MMBindVariant v);
MMBindVariant variant_from_string(std::string_view name);

enum class EmbedderKind { autoencoder, raw, label };

std::string_view to_string(EmbedderKind k);
EmbedderKind embedder_from_string(std::string_view name);

struct LabelEmbeddingConfig {
    std::string kind = "offline";  // offline | external
    int dim = 64;
    std::uint64_t seed = 0;
    std::filesystem::path table;   // external only
    std::vector<std::string> meta_keys;

    bool operator==(const LabelEmbeddingConfig&) const = default;
};

std::shared_ptr<const LabelEmbeddingProvider> make_label_provider(const LabelEmbeddingConfig& cfg);

struct BindingConfig {
    /// selectors[i] binds the running result with dataset i + 1; a single
    /// entry applies to every step.
    std::vector<ModalityId> shared;
    PairingScheme scheme;
    EmbedderKind embedder = EmbedderKind::autoencoder;
    EncoderSpec encoder;
    TieBreak tie_break = TieBreak::lowest_index;
    LabelEmbeddingConfig label;

    bool label_case() const;
    bool operator==(const BindingConfig&) const = default;
};

struct MethodConfig {
    MethodId method = MethodId::mmbind;
    MMBindVariant variant = MMBindVariant::full;
    BindingConfig binding;
    ModelSpec model;  // modalities and classes are filled from the data
    ContrastiveConfig pretrain;
    FinetuneConfig finetune;
    /// Autoencoder / translator / unimodal-supervised schedule. Widths come
    /// from the model spec.
    EncoderSpec auxiliary;

    bool operator==(const MethodConfig&) const = default;
};

/// Everything a trainer could be handed. Which parts it may read is decided
/// by data_access().
struct TrainingInputs {
    std::vector<IncompleteDataset> datasets;
    IncompleteDataset finetune;
    std::optional<IncompleteDataset> natural;
};

struct DataAccess {
    bool incomplete = false;
    bool natural = false;
    bool pseudo_pairs = false;
    bool operator==(const DataAccess&) const = default;
};

/// What each method is permitted to see (all may read the fine-tune set).
DataAccess data_access(MethodId method, MMBindVariant variant = MMBindVariant::full);

/// Thrown when a trainer reads data its method may not see.
class VisibilityError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Gatekeeper over TrainingInputs. Records every category that was read.
class VisibleData {
public:
    VisibleData(const TrainingInputs& inputs, DataAccess access);

    const std::vector<IncompleteDataset>& incomplete() const;
    const IncompleteDataset& natural() const;
    const IncompleteDataset& finetune() const { return inputs_->finetune; }
    void note_binding() const;

    const DataAccess& permitted() const { return access_; }
    const DataAccess& touched() const { return touched_; }

private:
    const TrainingInputs* inputs_;
    DataAccess access_;
    mutable DataAccess touched_;
};

struct MethodOutput {
    MultimodalModel model;
    std::vector<EpochLog> pretrain_curve;
    std::vector<EpochLog> finetune_curve;
    std::optional<PseudoPairedDataset> pairs;
    DataAccess touched;
};

/// Global modality list for a method: every sensor modality in the inputs
/// plus "label" in the label-binding case.
std::vector<ModalityDecl> method_modalities(const MethodConfig& cfg, const TrainingInputs& inputs);

/// Model initialization and any self-supervised / auxiliary stage, without
/// the final fine-tuning. For mmbind, `pairs` replaces the binding stage.
MethodOutput pretrain_method(const MethodConfig& cfg, const TrainingInputs& inputs, std::uint64_t seed,
                             const PseudoPairedDataset* pairs = nullptr);

/// pretrain_method followed by fine-tuning on inputs.finetune.
MethodOutput train_method(const MethodConfig& cfg, const TrainingInputs& inputs, std::uint64_t seed);

/// MMBind stage one: pseudo-paired data from the incomplete datasets.
PseudoPairedDataset bind_datasets(const BindingConfig& cfg, const std::vector<IncompleteDataset>& datasets,
                                  std::uint64_t seed);

/// Per-step selectors expanded to one per adjacent pair.
std::vector<ModalityId> binding_selectors(const BindingConfig& cfg, std::size_t datasets);

}  // namespace mmbind
