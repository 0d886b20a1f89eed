// Command-line front end. Stage subcommands read and write the on-disk
// artifacts of the stage before them; `run` drives a whole experiment.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mmbind/baselines.hpp"
#include "mmbind/binding.hpp"
#include "mmbind/corpus.hpp"
#include "mmbind/encoders.hpp"
#include "mmbind/error.hpp"
#include "mmbind/experiment.hpp"
#include "mmbind/rng.hpp"
#include "mmbind/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mmbind;

namespace {

struct Globals {
    std::optional<std::uint64_t> seed;
    std::string out;
    bool force = false;
    bool dry_run = false;
};

fs::path output_root(const Globals& g) {
    if (!g.out.empty()) return g.out;
    if (const char* env = std::getenv("MMBIND_OUT"); env && *env) return env;
    return "results";
}

/// Stage output directory: --out itself, or <MMBIND_OUT>/<stage>.
fs::path stage_dir(const Globals& g, const std::string& stage) {
    if (!g.out.empty()) return g.out;
    return output_root(g) / stage;
}

void claim(const fs::path& dir, const Globals& g) {
    if (fs::exists(dir) && !fs::is_empty(dir) && !g.force)
        throw ValidationError("out", dir.string() + " is not empty; pass --force to overwrite");
    fs::create_directories(dir);
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

void write_curve(const fs::path& path, const std::vector<EpochLog>& curve) {
    std::ofstream out(path, std::ios::trunc);
    for (const auto& e : curve) out << json{{"epoch", e.epoch}, {"loss", e.loss}, {"lr", e.learning_rate}}.dump() << "\n";
}

std::uint64_t stage_seed(const Globals& g, const ExperimentConfig& cfg) {
    return g.seed ? *g.seed : cfg.seeds.front();
}

MethodEntry find_method(const ExperimentConfig& cfg, const std::string& name) {
    if (name.empty()) {
        if (cfg.methods.size() != 1) throw ValidationError("method", "the config lists several methods; pick one");
        return cfg.methods.front();
    }
    for (const auto& m : cfg.methods)
        if (m.name == name) return m;
    return MethodEntry{name, method_from_string(name), MMBindVariant::full};
}

std::vector<ModalityId> parse_mask(const std::string& text) {
    std::vector<ModalityId> out;
    std::string cur;
    for (char c : text + ",") {
        if (c == ',' || c == '+') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    return out;
}

CorpusSpec corpus_from_file(const fs::path& path, const Globals& g) {
    std::ifstream in(path);
    if (!in) throw ValidationError("config", "cannot read " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    json doc = path.extension() == ".json" ? json::parse(buf.str()) : parse_yaml(buf.str());
    if (doc.is_object() && doc.contains("corpus")) {
        const ExperimentConfig cfg = load_experiment(path);
        return corpus_for_seed(cfg, stage_seed(g, cfg));
    }
    CorpusSpec spec = corpus_spec_from_json(doc);
    if (g.seed) spec.seed = *g.seed;
    spec.validate();
    return spec;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Cross-dataset binding of modality-incomplete data for multimodal pre-training"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--seed", g.seed, "Run seed (stages) or the single seed to run (run)");
    app.add_option("--out", g.out, "Output directory (default: $MMBIND_OUT, else ./results)");
    app.add_flag("--force", g.force, "Overwrite existing outputs");
    app.add_flag("--dry-run", g.dry_run, "Validate inputs and print the plan without computing");

    std::string config, data, model_dir, pairs_dir, encoder_dir, method, modality, mask_text, results_dir;

    auto* gen = app.add_subcommand("generate", "Generate a synthetic corpus bundle");
    gen->add_option("--config", config, "Corpus spec or experiment config (YAML/JSON)")->required();

    auto* enc = app.add_subcommand("train-encoder", "Train a shared-modality autoencoder");
    enc->add_option("--data", data, "Corpus bundle directory")->required();
    enc->add_option("--config", config, "Experiment config (binding.encoder schedule)");
    enc->add_option("--modality", modality, "Modality to encode (default: binding.shared_modality)");

    auto* bind = app.add_subcommand("bind", "Pair incomplete datasets into pseudo-paired data");
    bind->add_option("--data", data, "Corpus bundle directory")->required();
    bind->add_option("--config", config, "Experiment config (binding section)")->required();
    bind->add_option("--encoder", encoder_dir, "Pre-trained encoder from train-encoder");

    auto* pre = app.add_subcommand("pretrain", "Pre-train a multimodal model with one method");
    pre->add_option("--data", data, "Corpus bundle directory")->required();
    pre->add_option("--config", config, "Experiment config")->required();
    pre->add_option("--method", method, "Method name from the config (or a method id)");
    pre->add_option("--pairs", pairs_dir, "Pseudo pairs from bind (mmbind only)");

    auto* fin = app.add_subcommand("finetune", "Fine-tune a pre-trained model on the labeled split");
    fin->add_option("--model", model_dir, "Model checkpoint directory")->required();
    fin->add_option("--data", data, "Corpus bundle directory")->required();
    fin->add_option("--config", config, "Experiment config (finetune section)")->required();
    fin->add_option("--mask", mask_text, "Classifier modalities, comma separated (default: all)");

    auto* ev = app.add_subcommand("evaluate", "Score a model on the test split");
    ev->add_option("--model", model_dir, "Model checkpoint directory")->required();
    ev->add_option("--data", data, "Corpus bundle directory")->required();
    ev->add_option("--mask", mask_text, "Classifier modalities, comma separated (default: all)");

    auto* run = app.add_subcommand("run", "Run an experiment config end to end");
    run->add_option("config", config, "Experiment config (YAML/JSON)")->required();

    auto* rep = app.add_subcommand("report", "Summarize result directories");
    rep->add_option("results_dir", results_dir, "Directory holding results.csv files")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            const CorpusSpec spec = corpus_from_file(config, g);
            const fs::path dir = stage_dir(g, "corpus");
            if (g.dry_run) {
                std::cout << "would write corpus (seed " << spec.seed << ") to " << dir << "\n"
                          << to_json(spec).dump(2) << "\n";
                return 0;
            }
            claim(dir, g);
            save_bundle(dir, generate_corpus(spec));
            std::cout << dir.string() << "\n";
        } else if (enc->parsed()) {
            const Corpus c = load_bundle(data);
            ExperimentConfig cfg;
            if (!config.empty()) cfg = load_experiment(config);
            if (modality.empty()) {
                if (cfg.binding.shared.empty()) throw ValidationError("modality", "give --modality or a config");
                modality = cfg.binding.shared.front();
            }
            std::vector<Matrix> parts;
            for (const auto& d : c.datasets)
                if (d.has(modality)) parts.push_back(d.view(modality));
            if (parts.empty()) throw ValidationError("modality", "no dataset carries '" + modality + "'");
            EncoderSpec spec = cfg.binding.encoder;
            spec.modality = modality;
            const Matrix x = stack_rows(parts);
            spec.validate(static_cast<int>(x.cols()));
            const fs::path dir = stage_dir(g, "encoder");
            if (g.dry_run) {
                std::cout << "would train a " << modality << " autoencoder on " << x.rows() << " samples into " << dir
                          << "\n";
                return 0;
            }
            claim(dir, g);
            const std::uint64_t seed = g.seed.value_or(config.empty() ? 0 : cfg.seeds.front());
            save_autoencoder(dir, train_autoencoder(x, spec, derive_seed(seed, "binding-encoder")));
            std::cout << dir.string() << "\n";
        } else if (bind->parsed()) {
            const Corpus c = load_bundle(data);
            const ExperimentConfig cfg = load_experiment(config);
            const fs::path dir = stage_dir(g, "pairs");
            if (g.dry_run) {
                std::cout << "would bind " << c.datasets.size() << " datasets via "
                          << mask_name(cfg.binding.shared) << " into " << dir << "\n";
                return 0;
            }
            const std::uint64_t seed = stage_seed(g, cfg);
            PseudoPairedDataset pairs;
            if (!encoder_dir.empty()) {
                const Autoencoder ae = load_autoencoder(encoder_dir);
                const SharedEmbedder embed = [&](const ModalityId& m, const PseudoPairedDataset& l,
                                                 const PseudoPairedDataset& r) {
                    if (m != ae.encoder.modality())
                        throw ValidationError("encoder", "encoder is for '" + ae.encoder.modality() + "', not '" + m + "'");
                    return std::pair{ae.encoder.encode(l.views.at(m)), ae.encoder.encode(r.views.at(m))};
                };
                const PairingOptions opts{cfg.binding.tie_break, derive_seed(derive_seed(seed, "binding"), "binding-ties")};
                pairs = bind_many(c.datasets, binding_selectors(cfg.binding, c.datasets.size()), embed, opts);
            } else {
                pairs = bind_datasets(cfg.binding, c.datasets, derive_seed(seed, "binding"));
            }
            claim(dir, g);
            save_pseudo_paired(dir, pairs);
            const Corpus truth = load_bundle(data, LoadOptions{true});
            std::vector<std::vector<int>> gt;
            for (const auto& d : truth.datasets) gt.push_back(d.ground_truth.value_or(std::vector<int>{}));
            const PairingScore ps = pairing_accuracy(pairs, gt);
            write_json(dir / "pairing.json", {{"pairs", pairs.size()}, {"accuracy", ps.accuracy},
                                              {"correct", ps.correct}, {"confusion", ps.confusion}});
            std::cout << "pairs " << pairs.size() << ", pairing accuracy " << ps.accuracy << "\n";
        } else if (pre->parsed()) {
            const Corpus c = load_bundle(data);
            const ExperimentConfig cfg = load_experiment(config);
            const MethodEntry entry = find_method(cfg, method);
            const fs::path dir = stage_dir(g, "model");
            const std::uint64_t seed = stage_seed(g, cfg);
            if (g.dry_run) {
                std::cout << "would pre-train " << entry.name << " (seed " << seed << ") into " << dir << "\n";
                return 0;
            }
            std::optional<PseudoPairedDataset> pairs;
            if (!pairs_dir.empty()) {
                if (entry.method != MethodId::mmbind) throw ValidationError("pairs", "only mmbind consumes pseudo pairs");
                pairs = load_pseudo_paired(pairs_dir);
            }
            const TrainingInputs inputs{c.datasets, c.finetune, c.natural};
            MethodOutput out = pretrain_method(method_config(cfg, entry), inputs, seed, pairs ? &*pairs : nullptr);
            claim(dir, g);
            save_model(dir, out.model, {{"method", entry.name}, {"seed", seed}, {"stage", "pretrain"}});
            write_curve(dir / "loss_curve.jsonl", out.pretrain_curve);
            std::cout << dir.string() << "\n";
        } else if (fin->parsed()) {
            const Corpus c = load_bundle(data);
            const ExperimentConfig cfg = load_experiment(config);
            FinetuneConfig fc = cfg.finetune;
            if (!mask_text.empty()) fc.mask = parse_mask(mask_text);
            const fs::path dir = stage_dir(g, "finetuned");
            const std::uint64_t seed = stage_seed(g, cfg);
            if (g.dry_run) {
                std::cout << "would fine-tune " << model_dir << " on " << c.finetune.size() << " samples into " << dir
                          << "\n";
                return 0;
            }
            FinetuneResult r = finetune(load_model(model_dir), c.finetune, fc, derive_seed(seed, "finetune"));
            claim(dir, g);
            save_model(dir, r.model, {{"seed", seed}, {"stage", "finetune"}, {"mask", fc.mask}});
            write_curve(dir / "loss_curve.jsonl", r.curve);
            std::cout << dir.string() << "\n";
        } else if (ev->parsed()) {
            const Corpus c = load_bundle(data, LoadOptions{true});
            const std::vector<ModalityId> mask = parse_mask(mask_text);
            if (g.dry_run) {
                std::cout << "would evaluate " << model_dir << " on " << c.test.size() << " test samples\n";
                return 0;
            }
            const EvalResult r = evaluate(load_model(model_dir), c.test, mask);
            json per_class = json::array();
            for (const auto& m : r.per_class)
                per_class.push_back({{"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}, {"support", m.support}});
            const json report{{"mask", mask}, {"accuracy", r.accuracy}, {"macro_f1", r.macro_f1},
                              {"per_class", per_class}, {"confusion", r.confusion}};
            if (!g.out.empty()) {
                claim(g.out, g);
                write_json(fs::path(g.out) / "evaluation.json", report);
            }
            std::cout << report.dump(2) << "\n";
        } else if (run->parsed()) {
            ExperimentConfig cfg = load_experiment(config);
            if (g.seed) cfg.seeds = {*g.seed};
            RunOptions opts;
            opts.out_root = !g.out.empty() || std::getenv("MMBIND_OUT") ? output_root(g) : fs::path(cfg.outputs);
            opts.force = g.force;
            opts.dry_run = g.dry_run;
            opts.log = &std::cerr;
            const RunSummary s = run_experiment(cfg, opts);
            if (!g.dry_run) std::cout << s.dir.string() << "\n";
        } else if (rep->parsed()) {
            const fs::path out = g.out.empty() ? fs::path(results_dir) : fs::path(g.out);
            if (g.dry_run) {
                std::cout << "would summarize " << results_dir << " into " << out << "\n";
                return 0;
            }
            report(results_dir, out);
            std::cout << (out / "summary.md").string() << "\n";
        }
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
