#pragma once

// Synthetic multimodal corpora with known ground truth, modality-incomplete
// datasets, and their on-disk format.
//
// Generative model (per sample i of dataset k, class y):
//   z_i    = [ c_y + d_k ; u_i ]          class centre + domain offset, nuisance
//   view_m = a_m * (M_m z_i + P_m v_im) + b_m * eps,
//   a_m = snr / sqrt(1 + snr^2),  b_m = 1 / sqrt(1 + snr^2)
// so snr = 0 yields pure noise and the signal-to-noise amplitude ratio is snr.
// u_i is a per-sample nuisance shared by every modality of the sample but
// independent of the class; it is zero-dimensional unless nuisance_dim > 0.
// With private_dim > 0 each view also carries P_m v_{i,m}, a per-modality
// factor that is neither shared across modalities nor tied to the class.
// A modality may observe only some class-latent coordinates (the remaining
// columns of M_m are zero), so two modalities can share structure that a
// third one never sees.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmbind/nn.hpp"

namespace mmbind {

using ModalityId = std::string;

/// Reserved identifier for the class-label pseudo-modality.
inline const ModalityId kLabelModality = "label";

struct ModalityDecl {
    ModalityId name;
    int dim = 0;
    bool operator==(const ModalityDecl&) const = default;
};

using Meta = std::map<std::string, std::string>;

/// Row view of one sample.
struct Sample {
    std::int64_t sample_id = 0;
    std::map<ModalityId, Vector> views;
    std::optional<int> label;
    Meta meta;
};

/// Ordered samples that all carry the same modality subset. Storage is
/// columnar: one N x dim matrix per sensor modality.
struct IncompleteDataset {
    std::string name;
    int num_classes = 0;
    std::vector<std::string> class_names;
    std::vector<ModalityDecl> modalities;  // sensor modalities, label excluded
    bool labeled = false;                  // "label" is part of the modality set
    std::vector<std::int64_t> ids;
    std::map<ModalityId, Matrix> views;
    std::vector<int> labels;  // visible labels, only when labeled
    std::vector<Meta> meta;
    /// Hidden labels for evaluation; never read by binding or training.
    std::optional<std::vector<int>> ground_truth;

    std::size_t size() const { return ids.size(); }
    bool empty() const { return ids.empty(); }
    bool has(const ModalityId& m) const;
    int dim(const ModalityId& m) const;
    const Matrix& view(const ModalityId& m) const;
    /// Sensor modalities plus "label" when labeled.
    std::vector<ModalityId> modality_set() const;
    Sample sample(std::size_t i) const;

    /// Labels usable for scoring: visible labels if present, else the hidden
    /// ground truth. Throws if neither exists.
    const std::vector<int>& evaluation_labels() const;

    IncompleteDataset subset(std::span<const std::size_t> rows) const;
    /// Keep only `keep` (may include "label"; dropping it hides the labels).
    IncompleteDataset project(const std::vector<ModalityId>& keep) const;

    /// Throws ShapeError / ValidationError on any broken invariant.
    void validate() const;

    bool operator==(const IncompleteDataset&) const = default;
};

struct DatasetSpec {
    std::string name;
    std::vector<ModalityId> modalities;  // may include "label"
    int size = 0;
    double domain_shift = 0.0;
    /// Seed for the domain offset direction; defaults to a per-name stream.
    std::optional<std::uint64_t> domain_seed;
    /// Restrict to a subset of classes (partial class overlap); empty = all.
    std::vector<int> classes;
    bool operator==(const DatasetSpec&) const = default;
};

struct CorpusSpec {
    int num_classes = 5;
    std::vector<std::string> class_names;  // defaults filled by resolved()
    std::vector<ModalityDecl> modalities;  // sensor modalities
    int latent_dim = 8;
    double class_separation = 1.0;
    std::map<ModalityId, double> modality_snr;  // missing entries default to 1
    /// Class-latent coordinates a modality observes; missing = all. The
    /// map columns of unobserved coordinates are zero.
    std::map<ModalityId, std::vector<int>> modality_latent_dims;
    /// Per-modality override of private_std.
    std::map<ModalityId, double> modality_private_std;
    int nuisance_dim = 0;
    double nuisance_std = 0.0;
    int private_dim = 0;
    double private_std = 0.0;
    std::vector<DatasetSpec> datasets;
    int finetune_size = 0;
    int test_size = 0;
    bool natural_pairs = true;
    std::uint64_t seed = 0;

    /// Throws ValidationError naming the first invalid field.
    void validate() const;
    /// Copy with defaulted class names filled in.
    CorpusSpec resolved() const;
    double snr(const ModalityId& m) const;
    double private_scale(const ModalityId& m) const;
    const ModalityDecl& modality(const ModalityId& m) const;

    bool operator==(const CorpusSpec&) const = default;
};

nlohmann::json to_json(const CorpusSpec& spec);
CorpusSpec corpus_spec_from_json(const nlohmann::json& j);

/// Everything one generator call produces.
struct Corpus {
    CorpusSpec spec;
    std::vector<IncompleteDataset> datasets;  // in spec order
    IncompleteDataset finetune;               // labeled, fully paired
    IncompleteDataset test;                   // labeled, fully paired
    IncompleteDataset natural;                // unlabeled, fully paired, sum of dataset sizes

    const IncompleteDataset& dataset(const std::string& name) const;
};

Corpus generate_corpus(const CorpusSpec& spec);

/// Class-conditional latent centres and modality maps used by the generator;
/// exposed so tests can reason about ground truth.
struct GenerativeModel {
    Matrix class_centers;                   // num_classes x latent_dim
    std::map<ModalityId, Matrix> maps;      // dim x (latent_dim + nuisance_dim)
    std::map<ModalityId, Matrix> private_maps;  // dim x private_dim
};
GenerativeModel generative_model(const CorpusSpec& spec);

/// Disjoint stratified partitions of `full`, each projected onto its modality
/// set. Partition p takes the next floor(cumsum(fractions)[p] * N) samples of
/// a class-interleaved ordering.
std::vector<IncompleteDataset> split_complete_dataset(
    const IncompleteDataset& full, const std::vector<std::vector<ModalityId>>& modality_sets,
    const std::vector<double>& fractions);

struct LoadOptions {
    /// Load hidden ground-truth labels. Evaluation code only.
    bool with_ground_truth = false;
};

/// One directory per dataset: manifest.json, <modality>.f32, ids.i64,
/// labels.i32 (labeled only), ground_truth.i32 (hidden), meta.jsonl.
void save_corpus(const std::filesystem::path& dir, const IncompleteDataset& ds,
                 const nlohmann::json& extra = nlohmann::json::object());
IncompleteDataset load_corpus(const std::filesystem::path& dir, LoadOptions opts = {});

/// Whole generator output: corpus.json + one dataset directory per part.
void save_bundle(const std::filesystem::path& dir, const Corpus& corpus);
Corpus load_bundle(const std::filesystem::path& dir, LoadOptions opts = {});

/// Nearest-class-centroid accuracy of `test` using centroids of `train`.
double nearest_centroid_accuracy(const Matrix& train, std::span<const int> train_labels,
                                 const Matrix& test, std::span<const int> test_labels,
                                 int num_classes);

}  // namespace mmbind
