#include "mmbind/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "mmbind/error.hpp"
#include "mmbind/rng.hpp"

namespace mmbind {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// YAML <-> JSON

namespace {

json scalar_to_json(const YAML::Node& n) {
    const std::string& s = n.Scalar();
    if (n.Tag() == "!") return s;  // quoted
    if (s == "~" || s == "null" || s.empty()) return nullptr;
    if (s == "true") return true;
    if (s == "false") return false;
    if (!s.empty() && (std::isdigit(static_cast<unsigned char>(s[0])) || s[0] == '-' || s[0] == '+' || s[0] == '.')) {
        try {
            std::size_t pos = 0;
            const long long v = std::stoll(s, &pos);
            if (pos == s.size()) return v;
        } catch (const std::exception&) {
        }
        try {
            std::size_t pos = 0;
            const double v = std::stod(s, &pos);
            if (pos == s.size()) return v;
        } catch (const std::exception&) {
        }
    }
    return s;
}

json yaml_to_json(const YAML::Node& n) {
    switch (n.Type()) {
        case YAML::NodeType::Null:
        case YAML::NodeType::Undefined:
            return nullptr;
        case YAML::NodeType::Scalar:
            return scalar_to_json(n);
        case YAML::NodeType::Sequence: {
            json a = json::array();
            for (const auto& e : n) a.push_back(yaml_to_json(e));
            return a;
        }
        case YAML::NodeType::Map: {
            json o = json::object();
            for (const auto& kv : n) o[kv.first.Scalar()] = yaml_to_json(kv.second);
            return o;
        }
    }
    return nullptr;
}

void emit_json(YAML::Emitter& out, const json& j) {
    if (j.is_object()) {
        out << YAML::BeginMap;
        for (const auto& [k, v] : j.items()) {
            out << YAML::Key << k << YAML::Value;
            emit_json(out, v);
        }
        out << YAML::EndMap;
    } else if (j.is_array()) {
        const bool flat = std::all_of(j.begin(), j.end(), [](const json& e) { return e.is_primitive(); });
        out << (flat ? YAML::Flow : YAML::Block) << YAML::BeginSeq;
        for (const auto& e : j) emit_json(out, e);
        out << YAML::EndSeq;
    } else if (j.is_string()) {
        out << YAML::DoubleQuoted << j.get<std::string>();
    } else if (j.is_boolean()) {
        out << (j.get<bool>() ? "true" : "false");
    } else if (j.is_number_unsigned()) {
        out << j.get<std::uint64_t>();
    } else if (j.is_number_integer()) {
        out << j.get<std::int64_t>();
    } else if (j.is_number_float()) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.17g", j.get<double>());
        std::string s = buf;
        if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
        out << s;
    } else {
        out << YAML::Null;
    }
}

}  // namespace

json parse_yaml(const std::string& text) {
    try {
        return yaml_to_json(YAML::Load(text));
    } catch (const YAML::Exception& e) {
        throw ValidationError("config", std::string("invalid YAML: ") + e.what());
    }
}

// ---------------------------------------------------------------------------
// Config parsing

namespace {

/// Typed access to one mapping with its config path for error messages.
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ValidationError(path_.empty() ? "config" : path_, "must be a mapping");
    }

    std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
    bool has(const std::string& key) const { return j_.contains(key) && !j_.at(key).is_null(); }
    const json& raw(const std::string& key) const { return j_.at(key); }

    template <typename T>
    T get(const std::string& key, T fallback) const {
        if (!has(key)) return fallback;
        const json& v = j_.at(key);
        if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) throw ValidationError(at(key), "must be true or false");
        } else if constexpr (std::is_integral_v<T>) {
            if (!v.is_number_integer()) throw ValidationError(at(key), "must be an integer");
            if (std::is_unsigned_v<T> && v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)
                throw ValidationError(at(key), "must be >= 0");
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!v.is_number()) throw ValidationError(at(key), "must be a number");
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!v.is_string()) throw ValidationError(at(key), "must be a string");
        }
        try {
            return v.get<T>();
        } catch (const json::exception&) {
            throw ValidationError(at(key), "has the wrong type");
        }
    }

    std::vector<std::string> strings(const std::string& key, std::vector<std::string> fallback) const {
        if (!has(key)) return fallback;
        const json& v = j_.at(key);
        if (v.is_string()) return {v.get<std::string>()};
        if (!v.is_array()) throw ValidationError(at(key), "must be a string or a list of strings");
        std::vector<std::string> out;
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (!v[i].is_string()) throw ValidationError(at(key) + "[" + std::to_string(i) + "]", "must be a string");
            out.push_back(v[i].get<std::string>());
        }
        return out;
    }

    std::vector<int> ints(const std::string& key, std::vector<int> fallback) const {
        if (!has(key)) return fallback;
        const json& v = j_.at(key);
        if (!v.is_array()) throw ValidationError(at(key), "must be a list of integers");
        std::vector<int> out;
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (!v[i].is_number_integer())
                throw ValidationError(at(key) + "[" + std::to_string(i) + "]", "must be an integer");
            out.push_back(v[i].get<int>());
        }
        return out;
    }

    void allow(std::initializer_list<const char*> keys) const {
        const std::set<std::string> ok(keys.begin(), keys.end());
        for (const auto& [k, v] : j_.items())
            if (!ok.count(k)) throw ValidationError(at(k), "unknown key");
    }

    template <typename E>
    E parse_enum(const std::string& key, E fallback, const std::function<E(std::string_view)>& parse) const {
        if (!has(key)) return fallback;
        const auto name = get<std::string>(key, "");
        try {
            return parse(name);
        } catch (const std::exception& e) {
            throw ValidationError(at(key), "unsupported value '" + name + "'");
        }
    }

private:
    const json& j_;
    std::string path_;
};

/// Re-raise a ValidationError from a sub-parser with the section prefix.
template <typename F>
auto prefixed(const std::string& prefix, F&& f) {
    try {
        return f();
    } catch (const ValidationError& e) {
        const std::string what = e.what();
        const auto colon = what.find(": ");
        const std::string msg = colon == std::string::npos ? what : what.substr(colon + 2);
        std::string field = e.field();
        if (field.rfind(prefix + ".", 0) != 0) field = prefix + "." + field;
        throw ValidationError(field, msg);
    }
}

json load_document(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("config", "cannot read " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    const std::string ext = path.extension().string();
    if (ext == ".json") {
        try {
            return json::parse(buf.str());
        } catch (const json::exception& e) {
            throw ValidationError("config", std::string("invalid JSON: ") + e.what());
        }
    }
    return parse_yaml(buf.str());
}

EncoderSpec parse_encoder(const Section& s, EncoderSpec e) {
    s.allow({"hidden_dims", "latent_dim", "activation", "epochs", "batch_size", "learning_rate", "momentum"});
    e.hidden_dims = s.ints("hidden_dims", e.hidden_dims);
    e.latent_dim = s.get("latent_dim", e.latent_dim);
    e.activation = s.parse_enum<Activation>("activation", e.activation, activation_from_string);
    e.epochs = s.get("epochs", e.epochs);
    e.batch_size = s.get("batch_size", e.batch_size);
    e.learning_rate = s.get("learning_rate", e.learning_rate);
    e.momentum = s.get("momentum", e.momentum);
    return e;
}

json encoder_json(const EncoderSpec& e) {
    return {{"hidden_dims", e.hidden_dims}, {"latent_dim", e.latent_dim},
            {"activation", std::string(to_string(e.activation))},
            {"epochs", e.epochs}, {"batch_size", e.batch_size},
            {"learning_rate", e.learning_rate}, {"momentum", e.momentum}};
}

MethodEntry parse_method(const json& j, const std::string& path) {
    MethodEntry m;
    if (j.is_string()) {
        try {
            m.method = method_from_string(j.get<std::string>());
        } catch (const std::exception&) {
            throw ValidationError(path, "unknown method '" + j.get<std::string>() + "'");
        }
        m.name = j.get<std::string>();
        return m;
    }
    const Section s(j, path);
    s.allow({"name", "method", "variant"});
    if (!s.has("method")) throw ValidationError(s.at("method"), "required");
    m.method = s.parse_enum<MethodId>("method", m.method, method_from_string);
    m.variant = s.parse_enum<MMBindVariant>("variant", m.variant, variant_from_string);
    if (m.variant != MMBindVariant::full && m.method != MethodId::mmbind)
        throw ValidationError(s.at("variant"), "variants apply to mmbind only");
    std::string fallback(to_string(m.method));
    if (m.variant != MMBindVariant::full) fallback += "_" + std::string(to_string(m.variant));
    m.name = s.get<std::string>("name", fallback);
    return m;
}

json method_json(const MethodEntry& m) {
    return {{"name", m.name}, {"method", std::string(to_string(m.method))},
            {"variant", std::string(to_string(m.variant))}};
}

bool valid_id(const std::string& id) {
    return !id.empty() && std::all_of(id.begin(), id.end(), [](char c) {
        return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
    });
}

}  // namespace

ExperimentConfig experiment_from_json(const json& doc, const fs::path& base_dir) {
    const Section root(doc, "");
    root.allow({"id", "seeds", "outputs", "corpus", "finetune_fraction", "binding", "method", "methods", "model",
                "training", "finetune", "auxiliary", "evaluation"});
    ExperimentConfig cfg;
    cfg.id = root.get<std::string>("id", "");
    cfg.outputs = root.get<std::string>("outputs", cfg.outputs);

    if (root.has("seeds")) {
        const json& s = root.raw("seeds");
        if (!s.is_array()) throw ValidationError("seeds", "must be a list of integers");
        cfg.seeds.clear();
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (!s[i].is_number_integer() || (!s[i].is_number_unsigned() && s[i].get<std::int64_t>() < 0))
                throw ValidationError("seeds[" + std::to_string(i) + "]", "must be a non-negative integer");
            cfg.seeds.push_back(s[i].get<std::uint64_t>());
        }
    }

    if (!root.has("corpus")) throw ValidationError("corpus", "required");
    {
        json cj = root.raw("corpus");
        if (cj.is_string()) {
            fs::path p = cj.get<std::string>();
            if (p.is_relative()) p = base_dir / p;
            cj = prefixed("corpus", [&] { return load_document(p); });
        }
        cfg.corpus = prefixed("corpus", [&] { return corpus_spec_from_json(cj); });
    }
    if (root.has("finetune_fraction")) cfg.finetune_fraction = root.get("finetune_fraction", 0.0);

    if (root.has("method") && root.has("methods")) throw ValidationError("methods", "give either method or methods");
    if (root.has("method")) cfg.methods.push_back(parse_method(root.raw("method"), "method"));
    if (root.has("methods")) {
        const json& ms = root.raw("methods");
        if (!ms.is_array()) throw ValidationError("methods", "must be a list");
        for (std::size_t i = 0; i < ms.size(); ++i)
            cfg.methods.push_back(parse_method(ms[i], "methods[" + std::to_string(i) + "]"));
    }

    if (root.has("binding")) {
        const Section b(root.raw("binding"), "binding");
        b.allow({"shared_modality", "scheme", "theta", "k", "weight_norm", "embedder", "tie_break", "encoder",
                 "label_embedding"});
        auto& bc = cfg.binding;
        bc.shared = b.strings("shared_modality", {});
        bc.scheme.kind = b.parse_enum<PairingScheme::Kind>("scheme", bc.scheme.kind, pairing_kind_from_string);
        bc.scheme.theta = b.get("theta", bc.scheme.theta);
        bc.scheme.k = b.get("k", bc.scheme.k);
        cfg.training.weight_norm = b.parse_enum<WeightNorm>("weight_norm", cfg.training.weight_norm,
                                                            weight_norm_from_string);
        bc.embedder = b.parse_enum<EmbedderKind>("embedder", bc.embedder, embedder_from_string);
        bc.tie_break = b.parse_enum<TieBreak>("tie_break", bc.tie_break, [](std::string_view n) {
            if (n == "lowest_index") return TieBreak::lowest_index;
            if (n == "random") return TieBreak::random;
            throw std::invalid_argument("tie_break");
        });
        if (b.has("encoder")) bc.encoder = parse_encoder(Section(b.raw("encoder"), "binding.encoder"), bc.encoder);
        if (b.has("label_embedding")) {
            const Section l(b.raw("label_embedding"), "binding.label_embedding");
            l.allow({"kind", "dim", "seed", "table", "meta_keys"});
            auto& lc = bc.label;
            lc.kind = l.get<std::string>("kind", lc.kind);
            lc.dim = l.get("dim", lc.dim);
            lc.seed = l.get<std::uint64_t>("seed", lc.seed);
            if (l.has("table")) {
                fs::path p = l.get<std::string>("table", "");
                lc.table = p.is_relative() && !base_dir.empty() ? base_dir / p : p;
            }
            lc.meta_keys = l.strings("meta_keys", lc.meta_keys);
        }
    }

    if (root.has("model")) {
        const Section m(root.raw("model"), "model");
        m.allow({"encoder_hidden", "feature_dim", "projection_dim", "classifier_hidden"});
        cfg.model.encoder_hidden = m.ints("encoder_hidden", cfg.model.encoder_hidden);
        cfg.model.feature_dim = m.get("feature_dim", cfg.model.feature_dim);
        cfg.model.projection_dim = m.get("projection_dim", cfg.model.projection_dim);
        cfg.model.classifier_hidden = m.ints("classifier_hidden", cfg.model.classifier_hidden);
    }

    if (root.has("training")) {
        const Section t(root.raw("training"), "training");
        t.allow({"temperature", "batch_size", "epochs", "learning_rate", "mask_dummy_pairs", "weight_norm"});
        auto& tc = cfg.training;
        tc.temperature = t.get("temperature", tc.temperature);
        tc.batch_size = t.get("batch_size", tc.batch_size);
        tc.epochs = t.get("epochs", tc.epochs);
        tc.learning_rate = t.get("learning_rate", tc.learning_rate);
        tc.mask_dummy_pairs = t.get("mask_dummy_pairs", tc.mask_dummy_pairs);
        tc.weight_norm = t.parse_enum<WeightNorm>("weight_norm", tc.weight_norm, weight_norm_from_string);
    }

    if (root.has("finetune")) {
        const Section f(root.raw("finetune"), "finetune");
        f.allow({"epochs", "batch_size", "learning_rate", "mode", "mask"});
        auto& fc = cfg.finetune;
        fc.epochs = f.get("epochs", fc.epochs);
        fc.batch_size = f.get("batch_size", fc.batch_size);
        fc.learning_rate = f.get("learning_rate", fc.learning_rate);
        fc.mode = f.parse_enum<FinetuneMode>("mode", fc.mode, finetune_mode_from_string);
        fc.mask = f.strings("mask", fc.mask);
    }

    if (root.has("auxiliary"))
        cfg.auxiliary = parse_encoder(Section(root.raw("auxiliary"), "auxiliary"), cfg.auxiliary);

    if (root.has("evaluation")) {
        const Section e(root.raw("evaluation"), "evaluation");
        e.allow({"masks", "finetune_per_mask"});
        if (e.has("masks")) {
            const json& ms = e.raw("masks");
            if (!ms.is_array()) throw ValidationError("evaluation.masks", "must be a list of modality lists");
            for (std::size_t i = 0; i < ms.size(); ++i) {
                const std::string p = "evaluation.masks[" + std::to_string(i) + "]";
                std::vector<ModalityId> mask;
                const json& m = ms[i];
                if (m.is_string()) {
                    mask.push_back(m.get<std::string>());
                } else if (m.is_array()) {
                    for (const auto& x : m) {
                        if (!x.is_string()) throw ValidationError(p, "must list modality names");
                        mask.push_back(x.get<std::string>());
                    }
                } else {
                    throw ValidationError(p, "must be a modality name or a list of names");
                }
                cfg.evaluation.masks.push_back(mask);
            }
        }
        cfg.evaluation.finetune_per_mask = e.get("finetune_per_mask", cfg.evaluation.finetune_per_mask);
    }

    cfg.validate();
    return cfg;
}

void ExperimentConfig::validate() const {
    if (!valid_id(id)) throw ValidationError("id", "must be a non-empty name of letters, digits, '_', '-' or '.'");
    if (seeds.empty()) throw ValidationError("seeds", "must not be empty");
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
        throw ValidationError("seeds", "must not repeat");
    if (outputs.empty()) throw ValidationError("outputs", "must not be empty");
    prefixed("corpus", [&] {
        corpus.validate();
        return 0;
    });
    if (corpus.datasets.empty()) throw ValidationError("corpus.datasets", "at least one dataset is required");
    if (corpus.test_size < 1) throw ValidationError("corpus.test_size", "must be >= 1");
    if (finetune_fraction) {
        if (!(*finetune_fraction > 0.0 && *finetune_fraction <= 1.0))
            throw ValidationError("finetune_fraction", "must be in (0, 1]");
    } else if (corpus.finetune_size < 1) {
        throw ValidationError("corpus.finetune_size", "set it or finetune_fraction");
    }
    if (methods.empty()) throw ValidationError("methods", "name at least one method");
    std::set<std::string> names;
    for (std::size_t i = 0; i < methods.size(); ++i) {
        if (!valid_id(methods[i].name))
            throw ValidationError("methods[" + std::to_string(i) + "].name", "must be a plain name");
        if (!names.insert(methods[i].name).second)
            throw ValidationError("methods[" + std::to_string(i) + "].name", "duplicate '" + methods[i].name + "'");
    }

    std::set<ModalityId> sensors;
    for (const auto& m : corpus.modalities) sensors.insert(m.name);
    auto known = [&](const ModalityId& m, const std::string& where, bool allow_label) {
        if (m == kLabelModality && allow_label) return;
        if (!sensors.count(m)) throw ValidationError(where, "modality '" + m + "' is not declared in corpus.modalities");
    };

    const bool binds = std::any_of(methods.begin(), methods.end(), [](const MethodEntry& m) {
        return m.method == MethodId::mmbind || m.method == MethodId::cmg || m.method == MethodId::imagebind;
    });
    if (binds && binding.shared.empty())
        throw ValidationError("binding.shared_modality", "required by mmbind, cmg and imagebind");
    const std::size_t steps = corpus.datasets.size() > 1 ? corpus.datasets.size() - 1 : 1;
    if (binding.shared.size() > 1 && binding.shared.size() != steps)
        throw ValidationError("binding.shared_modality",
                              "give one modality or one per binding step (" + std::to_string(steps) + ")");
    for (std::size_t i = 0; i < binding.shared.size(); ++i)
        known(binding.shared[i], "binding.shared_modality", true);
    prefixed("binding", [&] {
        binding.scheme.validate();
        return 0;
    });
    if (binding.scheme.kind != PairingScheme::Kind::top1 && binding.shared.size() <= 1 && corpus.datasets.size() > 2)
        throw ValidationError("binding.scheme", "threshold and topk bind exactly two datasets");
    if (binding.label.kind != "offline" && binding.label.kind != "external")
        throw ValidationError("binding.label_embedding.kind", "must be offline or external");
    if (binding.label.kind == "external" && binding.label.table.empty())
        throw ValidationError("binding.label_embedding.table", "required for external embeddings");
    if (binding.label.dim < 1) throw ValidationError("binding.label_embedding.dim", "must be >= 1");
    if (!binding.shared.empty() && binding.embedder == EmbedderKind::autoencoder && !binding.label_case()) {
        for (const auto& m : binding.shared)
            prefixed("binding.encoder", [&] {
                binding.encoder.validate(corpus.modality(m).dim);
                return 0;
            });
    }

    for (int h : model.encoder_hidden)
        if (h < 1) throw ValidationError("model.encoder_hidden", "widths must be >= 1");
    for (int h : model.classifier_hidden)
        if (h < 1) throw ValidationError("model.classifier_hidden", "widths must be >= 1");
    if (model.feature_dim < 1) throw ValidationError("model.feature_dim", "must be >= 1");
    if (model.projection_dim < 1) throw ValidationError("model.projection_dim", "must be >= 1");

    training.validate();
    finetune.validate();
    for (const auto& m : finetune.mask) known(m, "finetune.mask", false);
    prefixed("auxiliary", [&] {
        EncoderSpec aux = auxiliary;
        aux.hidden_dims = model.encoder_hidden;
        aux.latent_dim = 1;
        aux.validate(1);
        return 0;
    });
    for (std::size_t i = 0; i < evaluation.masks.size(); ++i) {
        const std::string p = "evaluation.masks[" + std::to_string(i) + "]";
        if (evaluation.masks[i].empty()) throw ValidationError(p, "must name at least one modality");
        for (const auto& m : evaluation.masks[i]) known(m, p, false);
    }
}

json to_json(const ExperimentConfig& cfg) {
    json j;
    j["id"] = cfg.id;
    j["seeds"] = cfg.seeds;
    j["outputs"] = cfg.outputs;
    j["corpus"] = to_json(cfg.corpus);
    if (cfg.finetune_fraction) j["finetune_fraction"] = *cfg.finetune_fraction;
    json methods = json::array();
    for (const auto& m : cfg.methods) methods.push_back(method_json(m));
    j["methods"] = methods;
    const auto& b = cfg.binding;
    json label{{"kind", b.label.kind}, {"dim", b.label.dim}, {"seed", b.label.seed},
               {"meta_keys", b.label.meta_keys}};
    if (!b.label.table.empty()) label["table"] = b.label.table.string();
    j["binding"] = {{"shared_modality", b.shared},
                    {"scheme", to_string(b.scheme.kind)},
                    {"theta", b.scheme.theta},
                    {"k", b.scheme.k},
                    {"embedder", std::string(to_string(b.embedder))},
                    {"tie_break", b.tie_break == TieBreak::random ? "random" : "lowest_index"},
                    {"encoder", encoder_json(b.encoder)},
                    {"label_embedding", label}};
    j["model"] = {{"encoder_hidden", cfg.model.encoder_hidden},
                  {"feature_dim", cfg.model.feature_dim},
                  {"projection_dim", cfg.model.projection_dim},
                  {"classifier_hidden", cfg.model.classifier_hidden}};
    const auto& t = cfg.training;
    j["training"] = {{"temperature", t.temperature}, {"batch_size", t.batch_size},
                     {"epochs", t.epochs}, {"learning_rate", t.learning_rate},
                     {"mask_dummy_pairs", t.mask_dummy_pairs}, {"weight_norm", to_string(t.weight_norm)}};
    const auto& f = cfg.finetune;
    j["finetune"] = {{"epochs", f.epochs}, {"batch_size", f.batch_size}, {"learning_rate", f.learning_rate},
                     {"mode", to_string(f.mode)}, {"mask", f.mask}};
    j["auxiliary"] = encoder_json(cfg.auxiliary);
    j["evaluation"] = {{"masks", cfg.evaluation.masks}, {"finetune_per_mask", cfg.evaluation.finetune_per_mask}};
    return j;
}

ExperimentConfig load_experiment(const fs::path& path) {
    json doc = load_document(path);
    if (doc.is_object() && (!doc.contains("id") || doc["id"].is_null())) doc["id"] = path.stem().string();
    return experiment_from_json(doc, path.parent_path());
}

std::string to_yaml(const ExperimentConfig& cfg) {
    YAML::Emitter out;
    emit_json(out, to_json(cfg));
    return std::string(out.c_str()) + "\n";
}

// ---------------------------------------------------------------------------
// Run plumbing

CorpusSpec corpus_for_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
    CorpusSpec s = cfg.corpus;
    s.seed = cfg.corpus.seed + seed;
    if (cfg.finetune_fraction) {
        long total = 0;
        for (const auto& d : s.datasets) total += d.size;
        const long n = std::lround(*cfg.finetune_fraction * static_cast<double>(total));
        s.finetune_size = static_cast<int>(std::max<long>(n, s.num_classes));
    }
    return s;
}

MethodConfig method_config(const ExperimentConfig& cfg, const MethodEntry& entry) {
    MethodConfig mc;
    mc.method = entry.method;
    mc.variant = entry.variant;
    mc.binding = cfg.binding;
    mc.model = cfg.model;
    mc.pretrain = cfg.training;
    mc.finetune = cfg.finetune;
    mc.auxiliary = cfg.auxiliary;
    return mc;
}

std::string mask_name(const std::vector<ModalityId>& mask) {
    std::string s;
    for (const auto& m : mask) s += (s.empty() ? "" : "+") + m;
    return s;
}

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

json row_json(const ResultRow& r) {
    json j{{"config_id", r.config_id}, {"method", r.method}, {"seed", r.seed}, {"mask", r.mask},
           {"accuracy", r.accuracy},   {"macro_f1", r.macro_f1}, {"wall_time_s", r.wall_time_s}};
    j["pairing_accuracy"] = r.pairing_accuracy ? json(*r.pairing_accuracy) : json(nullptr);
    return j;
}

json aggregate_json(const AggregateRow& a) {
    json j{{"config_id", a.config_id},         {"method", a.method},         {"mask", a.mask},
           {"runs", a.runs},                   {"accuracy_mean", a.accuracy_mean},
           {"accuracy_std", a.accuracy_std},   {"macro_f1_mean", a.f1_mean}, {"macro_f1_std", a.f1_std}};
    j["pairing_accuracy_mean"] = a.pairing_mean ? json(*a.pairing_mean) : json(nullptr);
    return j;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path.string());
    out << text;
}

const char* const kOutputFiles[] = {"results.csv", "results.json", "pairing_confusion.json", "loss_curves.jsonl",
                                    "config.resolved.yaml", "INCOMPLETE"};

std::vector<std::vector<ModalityId>> eval_masks(const ExperimentConfig& cfg) {
    if (!cfg.evaluation.masks.empty()) return cfg.evaluation.masks;
    std::vector<ModalityId> all;
    for (const auto& m : cfg.corpus.modalities) all.push_back(m.name);
    return {all};
}

}  // namespace

void write_results_csv(const fs::path& path, const std::vector<ResultRow>& rows) {
    std::string out = std::string(kResultsHeader) + "\n";
    for (const auto& r : rows) {
        out += r.config_id + "," + r.method + "," + std::to_string(r.seed) + "," + r.mask + "," + fmt(r.accuracy) +
               "," + fmt(r.macro_f1) + "," + (r.pairing_accuracy ? fmt(*r.pairing_accuracy) : std::string()) + "," +
               fmt(r.wall_time_s) + "\n";
    }
    write_text(path, out);
}

std::vector<ResultRow> read_results_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot read " + path.string());
    std::string line;
    if (!std::getline(in, line) || split_csv_line(line) != split_csv_line(kResultsHeader))
        throw FormatError(path.string() + ": unexpected header");
    std::vector<ResultRow> rows;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        const auto f = split_csv_line(line);
        if (f.size() != 8) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 8 fields");
        try {
            ResultRow r;
            r.config_id = f[0];
            r.method = f[1];
            r.seed = std::stoull(f[2]);
            r.mask = f[3];
            r.accuracy = std::stod(f[4]);
            r.macro_f1 = std::stod(f[5]);
            if (!f[6].empty()) r.pairing_accuracy = std::stod(f[6]);
            r.wall_time_s = std::stod(f[7]);
            rows.push_back(r);
        } catch (const std::exception&) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": malformed number");
        }
    }
    return rows;
}

std::string describe_plan(const ExperimentConfig& cfg, const RunOptions& opts) {
    std::ostringstream o;
    o << "config " << cfg.id << "\n";
    o << "output " << (opts.out_root / cfg.id).string() << "\n";
    o << "seeds";
    for (auto s : cfg.seeds) o << " " << s;
    o << "\ncorpus " << cfg.corpus.num_classes << " classes,";
    for (const auto& m : cfg.corpus.modalities) o << " " << m.name << "(" << m.dim << ")";
    o << "\n";
    const CorpusSpec first = corpus_for_seed(cfg, cfg.seeds.front());
    for (const auto& d : first.datasets) {
        o << "  dataset " << d.name << " [" << mask_name(d.modalities) << "] n=" << d.size
          << " shift=" << fmt(d.domain_shift) << "\n";
    }
    o << "  finetune n=" << first.finetune_size << ", test n=" << first.test_size << "\n";
    if (!cfg.binding.shared.empty()) {
        o << "binding via " << mask_name(cfg.binding.shared) << ", scheme " << to_string(cfg.binding.scheme.kind);
        if (cfg.binding.scheme.kind == PairingScheme::Kind::threshold) o << " theta=" << fmt(cfg.binding.scheme.theta);
        if (cfg.binding.scheme.kind == PairingScheme::Kind::topk) o << " k=" << cfg.binding.scheme.k;
        o << ", embedder " << to_string(cfg.binding.embedder) << ", weights " << to_string(cfg.training.weight_norm)
          << "\n";
    }
    o << "pretrain " << cfg.training.epochs << " epochs, tau=" << fmt(cfg.training.temperature)
      << "; finetune " << cfg.finetune.epochs << " epochs (" << to_string(cfg.finetune.mode) << ")\n";
    o << "masks";
    for (const auto& m : eval_masks(cfg)) o << " " << mask_name(m);
    if (cfg.evaluation.finetune_per_mask) o << " (classifier per mask)";
    o << "\nmethods";
    for (const auto& m : cfg.methods) {
        o << " " << m.name;
        if (m.name != to_string(m.method)) o << "=" << to_string(m.method) << "/" << to_string(m.variant);
    }
    o << "\nruns " << cfg.seeds.size() * cfg.methods.size() << "\n";
    return o.str();
}

RunSummary run_experiment(const ExperimentConfig& cfg, const RunOptions& opts) {
    cfg.validate();
    RunSummary summary;
    summary.dir = opts.out_root / cfg.id;
    if (opts.dry_run) {
        if (opts.log) *opts.log << describe_plan(cfg, opts);
        return summary;
    }
    const fs::path dir = summary.dir;
    if (!opts.force && (fs::exists(dir / "results.csv") || fs::exists(dir / "INCOMPLETE")))
        throw ValidationError("outputs", dir.string() + " already holds results; pass --force to overwrite");
    fs::create_directories(dir);
    for (const char* f : kOutputFiles) fs::remove(dir / f);
    write_text(dir / "INCOMPLETE", "run started\n");
    write_text(dir / "config.resolved.yaml", to_yaml(cfg));

    std::ofstream curves(dir / "loss_curves.jsonl", std::ios::binary | std::ios::trunc);
    json confusion{{"config_id", cfg.id}, {"runs", json::array()}};
    const auto masks = eval_masks(cfg);
    auto log_curve = [&](const std::string& method, std::uint64_t seed, const std::string& stage,
                         const std::vector<EpochLog>& curve) {
        for (const auto& e : curve) {
            curves << json{{"config_id", cfg.id}, {"method", method}, {"seed", seed}, {"stage", stage},
                           {"epoch", e.epoch},    {"loss", e.loss},    {"lr", e.learning_rate}}
                          .dump()
                   << "\n";
        }
        curves.flush();
    };

    try {
        for (const auto seed : cfg.seeds) {
            const CorpusSpec spec = corpus_for_seed(cfg, seed);
            const Corpus corpus = generate_corpus(spec);
            if (confusion.find("class_names") == confusion.end()) confusion["class_names"] = corpus.test.class_names;
            TrainingInputs inputs{corpus.datasets, corpus.finetune, corpus.natural};
            std::vector<std::vector<int>> truth;
            for (const auto& d : corpus.datasets) truth.push_back(d.ground_truth.value_or(std::vector<int>{}));

            for (const auto& entry : cfg.methods) {
                if (opts.log) *opts.log << "[" << cfg.id << "] seed " << seed << " " << entry.name << std::endl;
                const MethodConfig mc = method_config(cfg, entry);
                const auto t0 = std::chrono::steady_clock::now();
                MethodOutput pre = pretrain_method(mc, inputs, seed);
                const double pre_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                log_curve(entry.name, seed, "pretrain", pre.pretrain_curve);

                std::optional<double> pairing;
                if (pre.pairs) {
                    const PairingScore ps = pairing_accuracy(*pre.pairs, truth);
                    pairing = ps.accuracy;
                    confusion["runs"].push_back({{"method", entry.name}, {"seed", seed}, {"accuracy", ps.accuracy},
                                                 {"correct", ps.correct}, {"total", ps.total},
                                                 {"confusion", ps.confusion}});
                }

                auto score = [&](const MultimodalModel& model, const std::vector<ModalityId>& mask, double secs) {
                    const EvalResult r = evaluate(model, corpus.test, mask);
                    summary.rows.push_back({cfg.id, entry.name, seed, mask_name(mask), r.accuracy, r.macro_f1,
                                            pairing, secs});
                };

                if (cfg.evaluation.finetune_per_mask) {
                    for (const auto& mask : masks) {
                        const auto t1 = std::chrono::steady_clock::now();
                        FinetuneConfig fc = mc.finetune;
                        fc.mask = mask;
                        FinetuneResult ft = finetune(pre.model, corpus.finetune, fc, derive_seed(seed, "finetune"));
                        log_curve(entry.name, seed, "finetune:" + mask_name(mask), ft.curve);
                        const double secs =
                            std::chrono::duration<double>(std::chrono::steady_clock::now() - t1).count();
                        score(ft.model, mask, pre_time + secs);
                    }
                } else {
                    const auto t1 = std::chrono::steady_clock::now();
                    FinetuneResult ft = finetune(std::move(pre.model), corpus.finetune, mc.finetune,
                                                 derive_seed(seed, "finetune"));
                    log_curve(entry.name, seed, "finetune", ft.curve);
                    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t1).count();
                    for (const auto& mask : masks) score(ft.model, mask, pre_time + secs);
                }
                write_results_csv(dir / "results.csv", summary.rows);
            }
        }
    } catch (const std::exception& e) {
        write_results_csv(dir / "results.csv", summary.rows);
        write_text(dir / "pairing_confusion.json", confusion.dump(2) + "\n");
        write_text(dir / "INCOMPLETE", std::string("run failed: ") + e.what() + "\n");
        throw;
    }

    write_results_csv(dir / "results.csv", summary.rows);
    write_text(dir / "pairing_confusion.json", confusion.dump(2) + "\n");
    json rows = json::array();
    for (const auto& r : summary.rows) rows.push_back(row_json(r));
    json aggs = json::array();
    for (const auto& a : aggregate(summary.rows)) aggs.push_back(aggregate_json(a));
    write_text(dir / "results.json", json{{"config_id", cfg.id}, {"rows", rows}, {"aggregates", aggs}}.dump(2) + "\n");
    fs::remove(dir / "INCOMPLETE");
    return summary;
}

// ---------------------------------------------------------------------------
// Reporting

namespace {

/// Mean and sample standard deviation. Computed around the first value so a
/// constant series yields exactly that constant and zero spread.
std::pair<double, double> mean_std(const std::vector<double>& xs) {
    if (xs.empty()) return {0.0, 0.0};
    const double x0 = xs.front();
    double shift = 0.0;
    for (double x : xs) shift += x - x0;
    const double mean = x0 + shift / static_cast<double>(xs.size());
    if (xs.size() < 2) return {mean, 0.0};
    double ss = 0.0;
    for (double x : xs) ss += (x - mean) * (x - mean);
    return {mean, std::sqrt(ss / static_cast<double>(xs.size() - 1))};
}

bool is_mmbind_name(const std::string& name) { return name.rfind("mmbind", 0) == 0; }

std::string pct(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", 100.0 * v);
    return buf;
}

std::string xml_escape(const std::string& s) {
    std::string o;
    for (char c : s) {
        if (c == '<') o += "&lt;";
        else if (c == '>') o += "&gt;";
        else if (c == '&') o += "&amp;";
        else o += c;
    }
    return o;
}

std::string bar_chart_svg(const std::string& title, const std::vector<AggregateRow>& rows) {
    const double bar = 36.0, gap = 14.0, left = 60.0, top = 40.0, height = 240.0;
    const double width = left + 20.0 + static_cast<double>(rows.size()) * (bar + gap);
    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << top + height + 110
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    s << "<text x=\"" << left << "\" y=\"20\" font-size=\"14\">" << xml_escape(title) << "</text>\n";
    for (int t = 0; t <= 4; ++t) {
        const double y = top + height - height * t / 4.0;
        s << "<line x1=\"" << left << "\" x2=\"" << width - 10 << "\" y1=\"" << y << "\" y2=\"" << y
          << "\" stroke=\"#ddd\"/>\n";
        s << "<text x=\"" << left - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << 25 * t << "%</text>\n";
    }
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& r = rows[i];
        const double x = left + gap / 2 + static_cast<double>(i) * (bar + gap);
        const double h = height * std::clamp(r.accuracy_mean, 0.0, 1.0);
        const char* colour = is_mmbind_name(r.method) ? "#d95f02" : "#7570b3";
        s << "<rect x=\"" << x << "\" y=\"" << top + height - h << "\" width=\"" << bar << "\" height=\"" << h
          << "\" fill=\"" << colour << "\"/>\n";
        const double lo = top + height - height * std::clamp(r.accuracy_mean - r.accuracy_std, 0.0, 1.0);
        const double hi = top + height - height * std::clamp(r.accuracy_mean + r.accuracy_std, 0.0, 1.0);
        s << "<line x1=\"" << x + bar / 2 << "\" x2=\"" << x + bar / 2 << "\" y1=\"" << lo << "\" y2=\"" << hi
          << "\" stroke=\"black\"/>\n";
        s << "<text x=\"" << x + bar / 2 << "\" y=\"" << top + height - h - 4 << "\" text-anchor=\"middle\">"
          << pct(r.accuracy_mean) << "</text>\n";
        s << "<text transform=\"translate(" << x + bar / 2 << "," << top + height + 10 << ") rotate(45)\">"
          << xml_escape(r.method + (r.mask.empty() ? "" : " [" + r.mask + "]")) << "</text>\n";
    }
    s << "</svg>\n";
    return s.str();
}

}  // namespace

std::vector<AggregateRow> aggregate(const std::vector<ResultRow>& rows) {
    using Key = std::tuple<std::string, std::string, std::string>;
    std::vector<Key> order;
    std::map<Key, std::vector<const ResultRow*>> groups;
    for (const auto& r : rows) {
        Key k{r.config_id, r.method, r.mask};
        if (!groups.count(k)) order.push_back(k);
        groups[k].push_back(&r);
    }
    std::vector<AggregateRow> out;
    for (const auto& k : order) {
        const auto& g = groups[k];
        std::vector<double> acc, f1, pa;
        for (const auto* r : g) {
            acc.push_back(r->accuracy);
            f1.push_back(r->macro_f1);
            if (r->pairing_accuracy) pa.push_back(*r->pairing_accuracy);
        }
        AggregateRow a;
        std::tie(a.config_id, a.method, a.mask) = k;
        a.runs = g.size();
        std::tie(a.accuracy_mean, a.accuracy_std) = mean_std(acc);
        std::tie(a.f1_mean, a.f1_std) = mean_std(f1);
        if (!pa.empty()) a.pairing_mean = mean_std(pa).first;
        out.push_back(a);
    }
    return out;
}

std::vector<OrderingRow> ordering(const std::vector<AggregateRow>& aggregates) {
    std::vector<OrderingRow> out;
    std::set<std::pair<std::string, std::string>> seen;
    for (const auto& a : aggregates) {
        if (a.method != "mmbind" || !seen.insert({a.config_id, a.mask}).second) continue;
        OrderingRow o{a.config_id, a.mask, a.accuracy_mean, "", 0.0, true};
        bool any = false;
        for (const auto& b : aggregates) {
            if (b.config_id != a.config_id || b.mask != a.mask || is_mmbind_name(b.method) ||
                b.method == "upper_bound")
                continue;
            if (!any || b.accuracy_mean > o.best_baseline_accuracy) {
                o.best_baseline = b.method;
                o.best_baseline_accuracy = b.accuracy_mean;
            }
            any = true;
        }
        o.mmbind_best = !any || o.mmbind_accuracy > o.best_baseline_accuracy;
        out.push_back(o);
    }
    return out;
}

std::vector<AggregateRow> report(const fs::path& results_dir, const fs::path& out_dir) {
    if (!fs::is_directory(results_dir)) throw ValidationError("results_dir", results_dir.string() + " is not a directory");
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(results_dir))
        if (e.is_regular_file() && e.path().filename() == "results.csv") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::vector<ResultRow> rows;
    std::vector<std::string> incomplete;
    for (const auto& f : files) {
        auto part = read_results_csv(f);
        if (fs::exists(f.parent_path() / "INCOMPLETE")) incomplete.push_back(f.parent_path().string());
        rows.insert(rows.end(), part.begin(), part.end());
    }
    if (rows.empty()) throw ValidationError("results_dir", "no result rows under " + results_dir.string());

    const auto aggs = aggregate(rows);
    fs::create_directories(out_dir);
    std::ostringstream md;
    md << "# Results summary\n\n";
    for (const auto& d : incomplete) md << "**Incomplete run:** `" << d << "`\n\n";
    std::vector<std::string> configs;
    for (const auto& a : aggs)
        if (std::find(configs.begin(), configs.end(), a.config_id) == configs.end()) configs.push_back(a.config_id);

    for (const auto& c : configs) {
        md << "## " << c << "\n\n";
        md << "| method | mask | runs | accuracy (%) | macro F1 (%) | pairing accuracy (%) |\n";
        md << "|---|---|---|---|---|---|\n";
        std::vector<AggregateRow> mine;
        for (const auto& a : aggs) {
            if (a.config_id != c) continue;
            mine.push_back(a);
            md << "| " << a.method << " | " << a.mask << " | " << a.runs << " | " << pct(a.accuracy_mean) << " ± "
               << pct(a.accuracy_std) << " | " << pct(a.f1_mean) << " ± " << pct(a.f1_std) << " | "
               << (a.pairing_mean ? pct(*a.pairing_mean) : std::string("")) << " |\n";
        }
        const std::string svg = c + "_accuracy.svg";
        write_text(out_dir / svg, bar_chart_svg(c + ": mean test accuracy", mine));
        md << "\n![" << c << "](" << svg << ")\n\n";
    }

    const auto ord = ordering(aggs);
    if (!ord.empty()) {
        md << "## Ordering\n\nmmbind against the strongest other method (upper bound excluded).\n\n";
        md << "| config | mask | mmbind (%) | best other | best other (%) | mmbind best |\n";
        md << "|---|---|---|---|---|---|\n";
        for (const auto& o : ord) {
            md << "| " << o.config_id << " | " << o.mask << " | " << pct(o.mmbind_accuracy) << " | "
               << (o.best_baseline.empty() ? "-" : o.best_baseline) << " | "
               << (o.best_baseline.empty() ? "-" : pct(o.best_baseline_accuracy)) << " | "
               << (o.mmbind_best ? "yes" : "no") << " |\n";
        }
        md << "\n";
    }
    write_text(out_dir / "summary.md", md.str());
    return aggs;
}

}  // namespace mmbind
