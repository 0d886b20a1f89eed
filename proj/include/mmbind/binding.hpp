#pragma once

// Cross-dataset binding: shared-modality similarity, pseudo-pair
// construction, pairing weights, and pairing-quality scoring.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mmbind/corpus.hpp"
#include "mmbind/encoders.hpp"
#include "mmbind/nn.hpp"

namespace mmbind {

/// values(j, k) = cosine(e_j, e_k) between row j of D_A and row k of D_B.
struct SimilarityMatrix {
    Matrix values;
    std::vector<std::int64_t> row_ids;
    std::vector<std::int64_t> col_ids;

    Eigen::Index rows() const { return values.rows(); }
    Eigen::Index cols() const { return values.cols(); }
};

/// Exhaustive O(N_A * N_B * d) cosine similarity. Zero-norm rows are treated
/// as having norm 1e-12 and score 0 against everything. Ids default to row
/// positions.
SimilarityMatrix similarity_matrix(const Matrix& a, const Matrix& b, std::vector<std::int64_t> row_ids = {},
                                   std::vector<std::int64_t> col_ids = {});

/// A sample position in one of the bound input datasets.
struct Origin {
    int dataset = 0;
    std::int64_t index = 0;
    bool operator==(const Origin&) const = default;
};

struct PseudoPairedSample {
    std::map<ModalityId, Vector> views;
    std::optional<int> label;
    double similarity = 1.0;
    Origin source;   // the anchor sample
    Origin matched;  // the sample its missing views came from
};

/// Full-modality pseudo-paired samples, stored columnar. origins[i] lists
/// every input sample that contributed to row i; origins[i].front() is the
/// anchor and origins[i].back() the most recent match.
struct PseudoPairedDataset {
    int num_classes = 0;
    std::vector<std::string> class_names;
    std::vector<std::string> dataset_names;  // index -> name for Origin::dataset
    std::vector<ModalityDecl> modalities;
    std::map<ModalityId, Matrix> views;
    bool labeled = false;
    std::vector<int> labels;
    std::vector<Meta> meta;
    std::vector<double> similarity;
    std::vector<std::vector<Origin>> origins;

    std::size_t size() const { return similarity.size(); }
    bool empty() const { return similarity.empty(); }
    bool has(const ModalityId& m) const;
    std::vector<ModalityId> modality_set() const;
    PseudoPairedSample sample(std::size_t i) const;

    /// Wrap an incomplete dataset as rows with similarity 1 and a single
    /// origin, so successive binding can treat both uniformly.
    static PseudoPairedDataset from_incomplete(const IncompleteDataset& ds, int dataset_index);
};

enum class TieBreak { lowest_index, random };

struct PairingOptions {
    TieBreak tie_break = TieBreak::lowest_index;
    std::uint64_t tie_seed = 0;
};

/// Column index of the maximum in each row (ties per options).
std::vector<std::size_t> argmax_rows(const Matrix& values, const PairingOptions& opts = {});

/// For each row j of A: match k* = argmax_k a_jk, emit (A_j views, B_k*
/// views for modalities A lacks, a_jk*); then symmetrically for each column
/// k of B. Many-to-one matches are allowed. Result size is |A| + |B|.
PseudoPairedDataset pair_argmax(const SimilarityMatrix& sim, const PseudoPairedDataset& a,
                                const PseudoPairedDataset& b, const PairingOptions& opts = {});
PseudoPairedDataset pair_argmax(const SimilarityMatrix& sim, const IncompleteDataset& a, const IncompleteDataset& b,
                                const PairingOptions& opts = {});

struct PairingScheme {
    enum class Kind { top1, threshold, topk };
    Kind kind = Kind::top1;
    double theta = 0.0;  // threshold mode
    int k = 1;           // topk mode

    static PairingScheme top1() { return {}; }
    static PairingScheme threshold(double theta) { return {Kind::threshold, theta, 1}; }
    static PairingScheme topk(int k) { return {Kind::topk, 0.0, k}; }
    void validate() const;
    bool operator==(const PairingScheme&) const = default;
};

std::string to_string(PairingScheme::Kind k);
PairingScheme::Kind pairing_kind_from_string(std::string_view name);

/// top1 is pair_argmax. threshold emits one A-anchored pair per entry
/// a_jk >= theta (row-major order). topk emits, per row and per column, the
/// k most similar counterparts (ties to the lowest index).
PseudoPairedDataset pair_threshold(const SimilarityMatrix& sim, const PairingScheme& scheme,
                                   const IncompleteDataset& a, const IncompleteDataset& b,
                                   const PairingOptions& opts = {});

/// Embeds the shared modality of both sides of one binding step.
using SharedEmbedder = std::function<std::pair<Matrix, Matrix>(
    const ModalityId& shared, const PseudoPairedDataset& left, const PseudoPairedDataset& right)>;

/// Trains an autoencoder on the union of both sides' shared views and
/// encodes each side with it.
SharedEmbedder autoencoder_embedder(EncoderSpec spec, std::uint64_t seed);
/// Embeds class-label text (optionally with metadata fields).
SharedEmbedder label_embedder(std::shared_ptr<const LabelEmbeddingProvider> provider,
                              std::vector<std::string> meta_keys = {});
/// Uses the raw shared views as embeddings.
SharedEmbedder raw_embedder();

/// Successive argmax binding. selectors[i] is the modality shared by the
/// running result and datasets[i + 1]. Views bound earlier are carried
/// forward; a row's similarity is the minimum over its binding steps.
PseudoPairedDataset bind_many(const std::vector<IncompleteDataset>& datasets,
                              const std::vector<ModalityId>& selectors, const SharedEmbedder& embedder,
                              const PairingOptions& opts = {});

enum class WeightNorm { max, sum, none };

std::string to_string(WeightNorm w);
WeightNorm weight_norm_from_string(std::string_view name);

/// max: w_i = clamp(a_i, 0, 1) / max_j clamp(a_j, 0, 1), or all 1 when no
/// a_j > 0. sum: divide by the clamped sum instead (same fallback).
/// none: all 1.
std::vector<double> normalize_weights(std::span<const double> similarities, WeightNorm mode = WeightNorm::max);

struct PairingScore {
    double accuracy = 0.0;
    std::size_t correct = 0;
    std::size_t total = 0;
    /// confusion[anchor class][matched class]
    std::vector<std::vector<std::size_t>> confusion;
};

/// Fraction of pseudo pairs whose contributing samples all share the
/// anchor's ground-truth class. ground_truth[d] holds the hidden labels of
/// input dataset d.
PairingScore pairing_accuracy(const PseudoPairedDataset& pairs, const std::vector<std::vector<int>>& ground_truth);

/// manifest.json, <modality>.f32, similarity.f32, labels.i32 (if labeled),
/// provenance.jsonl (one line per row).
void save_pseudo_paired(const std::filesystem::path& dir, const PseudoPairedDataset& pairs);
PseudoPairedDataset load_pseudo_paired(const std::filesystem::path& dir);

}  // namespace mmbind
