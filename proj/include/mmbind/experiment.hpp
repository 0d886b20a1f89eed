#pragma once

// Declarative experiments: YAML configs, multi-seed runs with result files,
// and summary reports.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmbind/baselines.hpp"
#include "mmbind/corpus.hpp"
#include "mmbind/training.hpp"

namespace mmbind {

/// One trainer in an experiment. `name` is what appears in result rows.
struct MethodEntry {
    std::string name;
    MethodId method = MethodId::mmbind;
    MMBindVariant variant = MMBindVariant::full;
    bool operator==(const MethodEntry&) const = default;
};

struct EvaluationConfig {
    /// Classifier modality masks; empty means one full-modality mask.
    std::vector<std::vector<ModalityId>> masks;
    /// Fine-tune a separate classifier per mask instead of one for all.
    bool finetune_per_mask = false;
    bool operator==(const EvaluationConfig&) const = default;
};

struct ExperimentConfig {
    std::string id;
    CorpusSpec corpus;
    /// When set, the fine-tune set holds round(fraction * sum of dataset
    /// sizes) samples (at least one per class).
    std::optional<double> finetune_fraction;
    BindingConfig binding;
    std::vector<MethodEntry> methods;
    ModelSpec model;
    ContrastiveConfig training;
    FinetuneConfig finetune;
    EncoderSpec auxiliary;
    EvaluationConfig evaluation;
    std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
    std::string outputs = "results";

    /// Throws ValidationError naming the config path of the first problem.
    void validate() const;
    bool operator==(const ExperimentConfig&) const = default;
};

/// Parses an already-loaded document. Relative file references resolve
/// against `base_dir`.
ExperimentConfig experiment_from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
nlohmann::json to_json(const ExperimentConfig& cfg);

/// YAML or JSON file. The config id defaults to the file stem.
ExperimentConfig load_experiment(const std::filesystem::path& path);
/// Fully resolved YAML; parsing it yields an equal config.
std::string to_yaml(const ExperimentConfig& cfg);
nlohmann::json parse_yaml(const std::string& text);

/// Corpus for one run seed: the configured spec with its seed mixed with
/// the run seed and the fine-tune fraction applied.
CorpusSpec corpus_for_seed(const ExperimentConfig& cfg, std::uint64_t seed);
MethodConfig method_config(const ExperimentConfig& cfg, const MethodEntry& entry);
/// Explicit classifier modality list for a mask ("" joins with '+').
std::string mask_name(const std::vector<ModalityId>& mask);

struct ResultRow {
    std::string config_id;
    std::string method;
    std::uint64_t seed = 0;
    std::string mask;
    double accuracy = 0.0;
    double macro_f1 = 0.0;
    std::optional<double> pairing_accuracy;
    double wall_time_s = 0.0;
    bool operator==(const ResultRow&) const = default;
};

inline constexpr const char* kResultsHeader =
    "config_id,method,seed,mask,accuracy,macro_f1,pairing_accuracy,wall_time_s";

void write_results_csv(const std::filesystem::path& path, const std::vector<ResultRow>& rows);
std::vector<ResultRow> read_results_csv(const std::filesystem::path& path);

struct RunOptions {
    std::filesystem::path out_root;  // results go to out_root / config id
    bool force = false;
    bool dry_run = false;
    std::ostream* log = nullptr;
};

struct RunSummary {
    std::filesystem::path dir;
    std::vector<ResultRow> rows;
};

/// Human-readable plan: seeds, methods, masks, corpus and output paths.
std::string describe_plan(const ExperimentConfig& cfg, const RunOptions& opts);

/// generate -> (bind) -> pretrain -> finetune -> evaluate for every seed and
/// method. Writes results.csv, results.json, pairing_confusion.json,
/// loss_curves.jsonl and config.resolved.yaml. An INCOMPLETE marker exists
/// until the run finishes. Refuses to overwrite finished results without
/// `force`.
RunSummary run_experiment(const ExperimentConfig& cfg, const RunOptions& opts);

struct AggregateRow {
    std::string config_id;
    std::string method;
    std::string mask;
    std::size_t runs = 0;
    double accuracy_mean = 0.0;
    double accuracy_std = 0.0;
    double f1_mean = 0.0;
    double f1_std = 0.0;
    std::optional<double> pairing_mean;
};

/// Mean and sample standard deviation (0 for a single run) per
/// (config, method, mask), in first-appearance order.
std::vector<AggregateRow> aggregate(const std::vector<ResultRow>& rows);

struct OrderingRow {
    std::string config_id;
    std::string mask;
    double mmbind_accuracy = 0.0;
    std::string best_baseline;
    double best_baseline_accuracy = 0.0;
    bool mmbind_best = false;
};

/// Per (config, mask): does the method named "mmbind" beat every other
/// method's mean accuracy?
std::vector<OrderingRow> ordering(const std::vector<AggregateRow>& aggregates);

/// Reads every results.csv under `results_dir`, writes summary.md and one
/// SVG bar chart per config into `out_dir`. Throws on an empty directory.
std::vector<AggregateRow> report(const std::filesystem::path& results_dir, const std::filesystem::path& out_dir);

}  // namespace mmbind
