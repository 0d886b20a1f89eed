#include "mmbind/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "mmbind/error.hpp"
#include "mmbind/io.hpp"
#include "mmbind/rng.hpp"

namespace mmbind {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::vector<std::string> kDefaultClassNames = {
    "walking", "jogging",  "sitting", "standing", "cycling", "climbing", "lying",
    "jumping", "throwing", "waving",  "clapping", "boxing",  "bowling",  "swiping"};

}  // namespace

// ---------------------------------------------------------------------------
// IncompleteDataset

bool IncompleteDataset::has(const ModalityId& m) const {
    if (m == kLabelModality) return labeled;
    return views.contains(m);
}

int IncompleteDataset::dim(const ModalityId& m) const {
    for (const auto& d : modalities)
        if (d.name == m) return d.dim;
    throw ValidationError("modality", "dataset '" + name + "' has no modality '" + m + "'");
}

const Matrix& IncompleteDataset::view(const ModalityId& m) const {
    auto it = views.find(m);
    if (it == views.end()) throw ValidationError("modality", "dataset '" + name + "' has no modality '" + m + "'");
    return it->second;
}

std::vector<ModalityId> IncompleteDataset::modality_set() const {
    std::vector<ModalityId> out;
    for (const auto& d : modalities) out.push_back(d.name);
    if (labeled) out.push_back(kLabelModality);
    return out;
}

Sample IncompleteDataset::sample(std::size_t i) const {
    Sample s;
    s.sample_id = ids.at(i);
    for (const auto& [m, mat] : views) s.views[m] = mat.row(static_cast<Eigen::Index>(i)).transpose();
    if (labeled) s.label = labels.at(i);
    if (i < meta.size()) s.meta = meta[i];
    return s;
}

const std::vector<int>& IncompleteDataset::evaluation_labels() const {
    if (labeled) return labels;
    if (ground_truth) return *ground_truth;
    throw ValidationError("ground_truth", "dataset '" + name + "' has neither labels nor ground truth");
}

IncompleteDataset IncompleteDataset::subset(std::span<const std::size_t> rows) const {
    IncompleteDataset out;
    out.name = name;
    out.num_classes = num_classes;
    out.class_names = class_names;
    out.modalities = modalities;
    out.labeled = labeled;
    for (const auto& [m, mat] : views) out.views[m] = take_rows(mat, rows);
    if (ground_truth) out.ground_truth.emplace();
    for (std::size_t r : rows) {
        out.ids.push_back(ids.at(r));
        if (labeled) out.labels.push_back(labels.at(r));
        if (!meta.empty()) out.meta.push_back(meta.at(r));
        if (ground_truth) out.ground_truth->push_back(ground_truth->at(r));
    }
    return out;
}

IncompleteDataset IncompleteDataset::project(const std::vector<ModalityId>& keep) const {
    IncompleteDataset out;
    out.name = name;
    out.num_classes = num_classes;
    out.class_names = class_names;
    out.ids = ids;
    out.meta = meta;
    out.ground_truth = ground_truth;
    for (const auto& m : keep) {
        if (m == kLabelModality) {
            if (!labeled) throw ValidationError("modality_sets", "cannot keep 'label': dataset '" + name + "' is unlabeled");
            out.labeled = true;
            out.labels = labels;
            continue;
        }
        if (!views.contains(m)) throw ValidationError("modality_sets", "dataset '" + name + "' has no modality '" + m + "'");
        out.modalities.push_back({m, dim(m)});
        out.views[m] = views.at(m);
    }
    // Labels that are projected away stay available as hidden ground truth.
    if (labeled && !out.labeled && !out.ground_truth) out.ground_truth = labels;
    return out;
}

void IncompleteDataset::validate() const {
    const std::size_t n = ids.size();
    std::set<ModalityId> seen;
    for (const auto& d : modalities) {
        if (d.name == kLabelModality) throw ValidationError("modalities", "'label' is reserved and has no view array");
        if (!seen.insert(d.name).second) throw ValidationError("modalities", "duplicate modality '" + d.name + "'");
        if (d.dim < 1) throw ValidationError("modalities." + d.name + ".dim", "must be >= 1");
        auto it = views.find(d.name);
        if (it == views.end()) throw ShapeError("modality '" + d.name + "' declared but has no data");
        if (static_cast<std::size_t>(it->second.rows()) != n || it->second.cols() != d.dim)
            throw ShapeError("modality '" + d.name + "': expected " + std::to_string(n) + "x" +
                             std::to_string(d.dim) + ", got " + std::to_string(it->second.rows()) + "x" +
                             std::to_string(it->second.cols()));
    }
    if (views.size() != modalities.size()) throw ShapeError("view arrays present for undeclared modalities");
    auto check_labels = [&](const std::vector<int>& l, const char* field) {
        if (l.size() != n) throw ShapeError(std::string(field) + ": expected " + std::to_string(n) + " entries");
        for (int y : l)
            if (y < 0 || y >= num_classes) throw ValidationError(field, "label " + std::to_string(y) + " outside [0, num_classes)");
    };
    if (labeled) check_labels(labels, "labels");
    else if (!labels.empty()) throw ValidationError("labels", "unlabeled dataset carries visible labels");
    if (ground_truth) check_labels(*ground_truth, "ground_truth");
    if (!meta.empty() && meta.size() != n) throw ShapeError("meta: expected " + std::to_string(n) + " entries");
}

// ---------------------------------------------------------------------------
// CorpusSpec

double CorpusSpec::snr(const ModalityId& m) const {
    auto it = modality_snr.find(m);
    return it == modality_snr.end() ? 1.0 : it->second;
}

double CorpusSpec::private_scale(const ModalityId& m) const {
    auto it = modality_private_std.find(m);
    return it == modality_private_std.end() ? private_std : it->second;
}

const ModalityDecl& CorpusSpec::modality(const ModalityId& m) const {
    for (const auto& d : modalities)
        if (d.name == m) return d;
    throw ValidationError("modalities", "unknown modality '" + m + "'");
}

void CorpusSpec::validate() const {
    if (num_classes < 1) throw ValidationError("num_classes", "must be >= 1");
    if (!class_names.empty() && static_cast<int>(class_names.size()) != num_classes)
        throw ValidationError("class_names", "must list exactly num_classes names");
    if (modalities.empty()) throw ValidationError("modalities", "at least one sensor modality is required");
    std::set<ModalityId> names;
    for (const auto& d : modalities) {
        if (d.name.empty()) throw ValidationError("modalities", "empty modality name");
        if (d.name == kLabelModality) throw ValidationError("modalities", "'label' is reserved for the class-label pseudo-modality");
        if (!names.insert(d.name).second) throw ValidationError("modalities", "duplicate modality '" + d.name + "'");
        if (d.dim < 1) throw ValidationError("modalities." + d.name + ".dim", "must be >= 1");
    }
    if (latent_dim < 1) throw ValidationError("latent_dim", "must be >= 1");
    if (!(class_separation >= 0.0)) throw ValidationError("class_separation", "must be >= 0");
    if (nuisance_dim < 0) throw ValidationError("nuisance_dim", "must be >= 0");
    if (!(nuisance_std >= 0.0)) throw ValidationError("nuisance_std", "must be >= 0");
    if (private_dim < 0) throw ValidationError("private_dim", "must be >= 0");
    if (!(private_std >= 0.0)) throw ValidationError("private_std", "must be >= 0");
    for (const auto& [m, v] : modality_snr) {
        if (!names.contains(m)) throw ValidationError("modality_snr." + m, "unknown modality");
        if (!(v >= 0.0)) throw ValidationError("modality_snr." + m, "must be >= 0");
    }
    for (const auto& [m, dims] : modality_latent_dims) {
        if (!names.contains(m)) throw ValidationError("modalities." + m + ".latent_dims", "unknown modality");
        if (dims.empty()) throw ValidationError("modalities." + m + ".latent_dims", "must be non-empty");
        for (int d : dims)
            if (d < 0 || d >= latent_dim)
                throw ValidationError("modalities." + m + ".latent_dims", "index outside [0, latent_dim)");
    }
    for (const auto& [m, v] : modality_private_std) {
        if (!names.contains(m)) throw ValidationError("modalities." + m + ".private_std", "unknown modality");
        if (!(v >= 0.0)) throw ValidationError("modalities." + m + ".private_std", "must be >= 0");
    }
    std::set<std::string> ds_names;
    for (std::size_t k = 0; k < datasets.size(); ++k) {
        const auto& ds = datasets[k];
        const std::string field = "datasets[" + std::to_string(k) + "]";
        if (ds.name.empty()) throw ValidationError(field + ".name", "must be non-empty");
        if (ds.name == "finetune" || ds.name == "test" || ds.name == "natural")
            throw ValidationError(field + ".name", "'" + ds.name + "' is reserved");
        if (!ds_names.insert(ds.name).second) throw ValidationError(field + ".name", "duplicate dataset name");
        if (ds.modalities.empty()) throw ValidationError(field + ".modalities", "must be non-empty");
        for (const auto& m : ds.modalities)
            if (m != kLabelModality && !names.contains(m))
                throw ValidationError(field + ".modalities", "unknown modality '" + m + "'");
        const int classes = ds.classes.empty() ? num_classes : static_cast<int>(ds.classes.size());
        if (ds.size < classes) throw ValidationError(field + ".size", "must be >= number of classes");
        if (!(ds.domain_shift >= 0.0)) throw ValidationError(field + ".domain_shift", "must be >= 0");
        for (int c : ds.classes)
            if (c < 0 || c >= num_classes) throw ValidationError(field + ".classes", "class index out of range");
    }
    if (finetune_size != 0 && finetune_size < num_classes) throw ValidationError("finetune_size", "must be 0 or >= num_classes");
    if (test_size != 0 && test_size < num_classes) throw ValidationError("test_size", "must be 0 or >= num_classes");
}

CorpusSpec CorpusSpec::resolved() const {
    CorpusSpec out = *this;
    if (out.class_names.empty()) {
        for (int c = 0; c < num_classes; ++c)
            out.class_names.push_back(c < static_cast<int>(kDefaultClassNames.size())
                                          ? kDefaultClassNames[static_cast<std::size_t>(c)]
                                          : "activity" + std::to_string(c));
    }
    return out;
}

json to_json(const CorpusSpec& s) {
    json j;
    j["num_classes"] = s.num_classes;
    j["class_names"] = s.class_names;
    j["modalities"] = json::array();
    for (const auto& d : s.modalities) {
        json m{{"name", d.name}, {"dim", d.dim}};
        if (s.modality_snr.contains(d.name)) m["snr"] = s.modality_snr.at(d.name);
        if (s.modality_latent_dims.contains(d.name)) m["latent_dims"] = s.modality_latent_dims.at(d.name);
        if (s.modality_private_std.contains(d.name)) m["private_std"] = s.modality_private_std.at(d.name);
        j["modalities"].push_back(m);
    }
    j["latent_dim"] = s.latent_dim;
    j["class_separation"] = s.class_separation;
    j["nuisance_dim"] = s.nuisance_dim;
    j["nuisance_std"] = s.nuisance_std;
    j["private_dim"] = s.private_dim;
    j["private_std"] = s.private_std;
    j["datasets"] = json::array();
    for (const auto& d : s.datasets) {
        json dj{{"name", d.name}, {"modalities", d.modalities}, {"size", d.size}, {"domain_shift", d.domain_shift}};
        if (d.domain_seed) dj["domain_seed"] = *d.domain_seed;
        if (!d.classes.empty()) dj["classes"] = d.classes;
        j["datasets"].push_back(dj);
    }
    j["finetune_size"] = s.finetune_size;
    j["test_size"] = s.test_size;
    j["natural_pairs"] = s.natural_pairs;
    j["seed"] = s.seed;
    return j;
}

namespace {

template <typename T>
T get_or(const json& j, const char* key, T fallback, const std::string& path) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ValidationError(path + key, "has the wrong type");
    }
}

}  // namespace

CorpusSpec corpus_spec_from_json(const json& j) {
    if (!j.is_object()) throw ValidationError("corpus", "must be a mapping");
    CorpusSpec s;
    s.num_classes = get_or(j, "num_classes", s.num_classes, "");
    s.class_names = get_or(j, "class_names", s.class_names, "");
    s.latent_dim = get_or(j, "latent_dim", s.latent_dim, "");
    s.class_separation = get_or(j, "class_separation", s.class_separation, "");
    s.nuisance_dim = get_or(j, "nuisance_dim", s.nuisance_dim, "");
    s.nuisance_std = get_or(j, "nuisance_std", s.nuisance_std, "");
    s.private_dim = get_or(j, "private_dim", s.private_dim, "");
    s.private_std = get_or(j, "private_std", s.private_std, "");
    s.finetune_size = get_or(j, "finetune_size", s.finetune_size, "");
    s.test_size = get_or(j, "test_size", s.test_size, "");
    s.natural_pairs = get_or(j, "natural_pairs", s.natural_pairs, "");
    s.seed = get_or<std::uint64_t>(j, "seed", s.seed, "");
    if (!j.contains("modalities") || !j["modalities"].is_array())
        throw ValidationError("modalities", "required list of {name, dim}");
    for (std::size_t i = 0; i < j["modalities"].size(); ++i) {
        const json& m = j["modalities"][i];
        const std::string p = "modalities[" + std::to_string(i) + "].";
        if (!m.is_object() || !m.contains("name") || !m.contains("dim"))
            throw ValidationError(p.substr(0, p.size() - 1), "requires name and dim");
        ModalityDecl d{get_or<std::string>(m, "name", "", p), get_or(m, "dim", 0, p)};
        if (m.contains("snr")) s.modality_snr[d.name] = get_or(m, "snr", 1.0, p);
        if (m.contains("latent_dims")) s.modality_latent_dims[d.name] = get_or(m, "latent_dims", std::vector<int>{}, p);
        if (m.contains("private_std")) s.modality_private_std[d.name] = get_or(m, "private_std", 0.0, p);
        s.modalities.push_back(d);
    }
    if (j.contains("modality_snr")) {
        for (const auto& [k, v] : j["modality_snr"].items()) {
            if (!v.is_number()) throw ValidationError("modality_snr." + k, "must be a number");
            s.modality_snr[k] = v.get<double>();
        }
    }
    if (j.contains("datasets")) {
        if (!j["datasets"].is_array()) throw ValidationError("datasets", "must be a list");
        for (std::size_t i = 0; i < j["datasets"].size(); ++i) {
            const json& d = j["datasets"][i];
            const std::string p = "datasets[" + std::to_string(i) + "].";
            DatasetSpec ds;
            ds.name = get_or<std::string>(d, "name", "", p);
            ds.modalities = get_or(d, "modalities", ds.modalities, p);
            ds.size = get_or(d, "size", 0, p);
            ds.domain_shift = get_or(d, "domain_shift", 0.0, p);
            if (d.contains("domain_seed")) ds.domain_seed = get_or<std::uint64_t>(d, "domain_seed", 0, p);
            ds.classes = get_or(d, "classes", ds.classes, p);
            s.datasets.push_back(ds);
        }
    }
    return s;
}

// ---------------------------------------------------------------------------
// Generator

const IncompleteDataset& Corpus::dataset(const std::string& name) const {
    for (const auto& d : datasets)
        if (d.name == name) return d;
    if (name == "finetune") return finetune;
    if (name == "test") return test;
    if (name == "natural") return natural;
    throw ValidationError("dataset", "no dataset named '" + name + "'");
}

GenerativeModel generative_model(const CorpusSpec& spec) {
    GenerativeModel g;
    Rng centers(derive_seed(spec.seed, "class-centers"));
    g.class_centers.resize(spec.num_classes, spec.latent_dim);
    for (int c = 0; c < spec.num_classes; ++c)
        for (int d = 0; d < spec.latent_dim; ++d) g.class_centers(c, d) = spec.class_separation * centers.normal();
    const int total = spec.latent_dim + spec.nuisance_dim;
    for (const auto& m : spec.modalities) {
        Rng rng(derive_seed(spec.seed, "modality-map:" + m.name));
        Matrix map(m.dim, total);
        const double scale = 1.0 / std::sqrt(static_cast<double>(total));
        for (int r = 0; r < m.dim; ++r)
            for (int c = 0; c < total; ++c) map(r, c) = scale * rng.normal();
        if (auto it = spec.modality_latent_dims.find(m.name); it != spec.modality_latent_dims.end()) {
            for (int c = 0; c < spec.latent_dim; ++c)
                if (std::find(it->second.begin(), it->second.end(), c) == it->second.end()) map.col(c).setZero();
        }
        g.maps[m.name] = std::move(map);
        if (spec.private_dim > 0) {
            Matrix priv(m.dim, spec.private_dim);
            const double pscale = 1.0 / std::sqrt(static_cast<double>(spec.private_dim));
            for (int r = 0; r < m.dim; ++r)
                for (int c = 0; c < spec.private_dim; ++c) priv(r, c) = pscale * rng.normal();
            g.private_maps[m.name] = std::move(priv);
        }
    }
    return g;
}

namespace {

struct PartRequest {
    std::string name;
    std::vector<ModalityId> modalities;  // may include label
    int size = 0;
    Vector domain_offset;
    std::vector<int> classes;
    std::string stream;
};

IncompleteDataset generate_part(const CorpusSpec& spec, const GenerativeModel& g, const PartRequest& req) {
    Rng rng(derive_seed(spec.seed, req.stream));
    const int n = req.size;
    std::vector<int> classes = req.classes;
    if (classes.empty()) {
        classes.resize(static_cast<std::size_t>(spec.num_classes));
        std::iota(classes.begin(), classes.end(), 0);
    }
    std::vector<int> y(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) y[static_cast<std::size_t>(i)] = classes[static_cast<std::size_t>(i) % classes.size()];
    rng.shuffle(y);

    const int total = spec.latent_dim + spec.nuisance_dim;
    Matrix latent(n, total);
    for (int i = 0; i < n; ++i) {
        latent.row(i).head(spec.latent_dim) =
            g.class_centers.row(y[static_cast<std::size_t>(i)]) + req.domain_offset.transpose();
        for (int d = 0; d < spec.nuisance_dim; ++d) latent(i, spec.latent_dim + d) = spec.nuisance_std * rng.normal();
    }

    IncompleteDataset ds;
    ds.name = req.name;
    ds.num_classes = spec.num_classes;
    ds.class_names = spec.class_names;
    for (const auto& m : spec.modalities) {
        const bool wanted = std::find(req.modalities.begin(), req.modalities.end(), m.name) != req.modalities.end();
        // Every modality's noise is drawn so that adding or removing one
        // modality does not perturb the others.
        Rng noise(derive_seed(spec.seed, req.stream + "/noise:" + m.name));
        if (!wanted) continue;
        const double snr = spec.snr(m.name);
        const double a = snr / std::sqrt(1.0 + snr * snr);
        const double b = 1.0 / std::sqrt(1.0 + snr * snr);
        Matrix signal = latent * g.maps.at(m.name).transpose();
        if (spec.private_dim > 0) {
            Matrix priv(n, spec.private_dim);
            for (int i = 0; i < n; ++i)
                for (int d = 0; d < spec.private_dim; ++d) priv(i, d) = spec.private_scale(m.name) * noise.normal();
            signal += priv * g.private_maps.at(m.name).transpose();
        }
        Matrix view = a * signal;
        for (int i = 0; i < n; ++i)
            for (int d = 0; d < m.dim; ++d) view(i, d) = io::to_f32(view(i, d) + b * noise.normal());
        ds.modalities.push_back(m);
        ds.views[m.name] = std::move(view);
    }
    ds.labeled = std::find(req.modalities.begin(), req.modalities.end(), kLabelModality) != req.modalities.end();
    for (int i = 0; i < n; ++i) {
        ds.ids.push_back(i);
        ds.meta.push_back({{"subject", req.name + "-s" + std::to_string(i % 4)},
                           {"environment", req.name},
                           {"device", "node-" + req.name}});
    }
    if (ds.labeled) ds.labels = y;
    ds.ground_truth = y;
    return ds;
}

Vector domain_offset(const CorpusSpec& spec, const DatasetSpec& d) {
    const std::uint64_t seed = d.domain_seed ? *d.domain_seed : derive_seed(spec.seed, "domain:" + d.name);
    Rng rng(seed);
    Vector off(spec.latent_dim);
    for (int i = 0; i < spec.latent_dim; ++i) off(i) = d.domain_shift * rng.normal();
    return off;
}

}  // namespace

Corpus generate_corpus(const CorpusSpec& input) {
    input.validate();
    const CorpusSpec spec = input.resolved();
    const GenerativeModel g = generative_model(spec);

    std::vector<ModalityId> all;
    for (const auto& m : spec.modalities) all.push_back(m.name);
    std::vector<ModalityId> all_labeled = all;
    all_labeled.push_back(kLabelModality);

    Corpus corpus;
    corpus.spec = spec;
    std::vector<IncompleteDataset> natural_parts;
    for (const auto& d : spec.datasets) {
        const Vector off = domain_offset(spec, d);
        corpus.datasets.push_back(generate_part(spec, g, {d.name, d.modalities, d.size, off, d.classes, "dataset:" + d.name}));
        if (spec.natural_pairs)
            natural_parts.push_back(generate_part(spec, g, {"natural", all, d.size, off, d.classes, "natural:" + d.name}));
    }
    const Vector zero = Vector::Zero(spec.latent_dim);
    if (spec.finetune_size > 0)
        corpus.finetune = generate_part(spec, g, {"finetune", all_labeled, spec.finetune_size, zero, {}, "finetune"});
    else
        corpus.finetune = generate_part(spec, g, {"finetune", all_labeled, 0, zero, {}, "finetune"});
    corpus.test = generate_part(spec, g, {"test", all_labeled, spec.test_size, zero, {}, "test"});

    // Natural pairs: concatenate per-dataset parts, renumbering ids.
    IncompleteDataset natural = generate_part(spec, g, {"natural", all, 0, zero, {}, "natural"});
    for (const auto& part : natural_parts) {
        for (auto& [m, mat] : natural.views) {
            Matrix merged(mat.rows() + part.views.at(m).rows(), mat.cols());
            merged << mat, part.views.at(m);
            mat = std::move(merged);
        }
        for (std::size_t i = 0; i < part.size(); ++i) {
            natural.ids.push_back(static_cast<std::int64_t>(natural.ids.size()));
            natural.meta.push_back(part.meta[i]);
            natural.ground_truth->push_back(part.ground_truth->at(i));
        }
    }
    corpus.natural = std::move(natural);
    return corpus;
}

// ---------------------------------------------------------------------------
// Splitting

std::vector<IncompleteDataset> split_complete_dataset(const IncompleteDataset& full,
                                                      const std::vector<std::vector<ModalityId>>& modality_sets,
                                                      const std::vector<double>& fractions) {
    if (modality_sets.size() != fractions.size())
        throw ValidationError("fractions", "need one fraction per modality set");
    double sum = 0.0;
    for (double f : fractions) {
        if (!(f >= 0.0)) throw ValidationError("fractions", "must be non-negative");
        sum += f;
    }
    if (sum > 1.0 + 1e-9) throw ValidationError("fractions", "sum exceeds 1");

    // Class-interleaved ordering: round-robin over classes, preserving the
    // original order within each class.
    const std::size_t n = full.size();
    std::vector<std::size_t> order;
    order.reserve(n);
    if (full.labeled || full.ground_truth) {
        const auto& y = full.evaluation_labels();
        std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(std::max(full.num_classes, 1)));
        for (std::size_t i = 0; i < n; ++i) by_class.at(static_cast<std::size_t>(y[i])).push_back(i);
        for (std::size_t round = 0; order.size() < n; ++round)
            for (const auto& members : by_class)
                if (round < members.size()) order.push_back(members[round]);
    } else {
        for (std::size_t i = 0; i < n; ++i) order.push_back(i);
    }

    std::vector<IncompleteDataset> parts;
    double cum = 0.0;
    std::size_t begin = 0;
    for (std::size_t p = 0; p < fractions.size(); ++p) {
        cum += fractions[p];
        const auto end = std::min(n, static_cast<std::size_t>(std::floor(cum * static_cast<double>(n) + 1e-9)));
        std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                      order.begin() + static_cast<std::ptrdiff_t>(end));
        std::sort(rows.begin(), rows.end());
        parts.push_back(full.subset(rows).project(modality_sets[p]));
        begin = end;
    }
    return parts;
}

// ---------------------------------------------------------------------------
// Persistence

void save_corpus(const fs::path& dir, const IncompleteDataset& ds, const json& extra) {
    ds.validate();
    fs::create_directories(dir);
    json manifest = extra.is_object() ? extra : json::object();
    manifest["format"] = "mmbind-dataset";
    manifest["version"] = 1;
    manifest["name"] = ds.name;
    manifest["count"] = ds.size();
    manifest["num_classes"] = ds.num_classes;
    manifest["class_names"] = ds.class_names;
    manifest["labeled"] = ds.labeled;
    manifest["modalities"] = json::array();
    for (const auto& d : ds.modalities) {
        const std::string file = d.name + ".f32";
        manifest["modalities"].push_back({{"name", d.name}, {"dim", d.dim}, {"file", file}});
        io::write_f32(dir / file, ds.views.at(d.name));
    }
    manifest["ids_file"] = "ids.i64";
    io::write_i64(dir / "ids.i64", ds.ids);
    if (ds.labeled) {
        manifest["labels_file"] = "labels.i32";
        io::write_i32(dir / "labels.i32", ds.labels);
    }
    if (ds.ground_truth) {
        manifest["ground_truth_file"] = "ground_truth.i32";
        io::write_i32(dir / "ground_truth.i32", *ds.ground_truth);
    } else {
        fs::remove(dir / "ground_truth.i32");
    }
    manifest["meta_file"] = "meta.jsonl";
    std::ofstream meta(dir / "meta.jsonl", std::ios::trunc);
    for (const auto& m : ds.meta) meta << json(m).dump() << '\n';
    io::write_json(dir / "manifest.json", manifest);
}

IncompleteDataset load_corpus(const fs::path& dir, LoadOptions opts) {
    const json manifest = io::read_json(dir / "manifest.json");
    IncompleteDataset ds;
    try {
        if (manifest.at("format") != "mmbind-dataset") throw FormatError("not an mmbind dataset manifest: " + dir.string());
        ds.name = manifest.at("name").get<std::string>();
        ds.num_classes = manifest.at("num_classes").get<int>();
        ds.class_names = manifest.at("class_names").get<std::vector<std::string>>();
        ds.labeled = manifest.at("labeled").get<bool>();
        const auto count = manifest.at("count").get<Eigen::Index>();
        ds.ids = io::read_i64(dir / manifest.at("ids_file").get<std::string>());
        if (static_cast<Eigen::Index>(ds.ids.size()) != count)
            throw ShapeError("ids: manifest declares " + std::to_string(count) + " samples, found " + std::to_string(ds.ids.size()));
        for (const auto& m : manifest.at("modalities")) {
            ModalityDecl d{m.at("name").get<std::string>(), m.at("dim").get<int>()};
            ds.views[d.name] = io::read_f32(dir / m.at("file").get<std::string>(), count, d.dim);
            ds.modalities.push_back(d);
        }
        if (ds.labeled) ds.labels = io::read_i32(dir / manifest.at("labels_file").get<std::string>());
        if (opts.with_ground_truth && manifest.contains("ground_truth_file"))
            ds.ground_truth = io::read_i32(dir / manifest.at("ground_truth_file").get<std::string>());
        std::ifstream meta(dir / manifest.value("meta_file", "meta.jsonl"));
        std::string line;
        while (std::getline(meta, line)) {
            if (line.empty()) continue;
            ds.meta.push_back(json::parse(line).get<Meta>());
        }
    } catch (const json::exception& e) {
        throw FormatError("malformed manifest in " + dir.string() + ": " + e.what());
    }
    ds.validate();
    return ds;
}

void save_bundle(const fs::path& dir, const Corpus& corpus) {
    fs::create_directories(dir);
    json index;
    index["format"] = "mmbind-corpus";
    index["version"] = 1;
    index["spec"] = to_json(corpus.spec);
    index["datasets"] = json::array();
    const json echo{{"seed", corpus.spec.seed}, {"spec", to_json(corpus.spec)}};
    for (const auto& d : corpus.datasets) {
        index["datasets"].push_back(d.name);
        save_corpus(dir / d.name, d, echo);
    }
    save_corpus(dir / "finetune", corpus.finetune, echo);
    save_corpus(dir / "test", corpus.test, echo);
    save_corpus(dir / "natural", corpus.natural, echo);
    io::write_json(dir / "corpus.json", index);
}

Corpus load_bundle(const fs::path& dir, LoadOptions opts) {
    const json index = io::read_json(dir / "corpus.json");
    if (index.value("format", "") != "mmbind-corpus") throw FormatError("not an mmbind corpus: " + dir.string());
    Corpus c;
    c.spec = corpus_spec_from_json(index.at("spec"));
    for (const auto& name : index.at("datasets")) c.datasets.push_back(load_corpus(dir / name.get<std::string>(), opts));
    c.finetune = load_corpus(dir / "finetune", opts);
    c.test = load_corpus(dir / "test", opts);
    c.natural = load_corpus(dir / "natural", opts);
    return c;
}

double nearest_centroid_accuracy(const Matrix& train, std::span<const int> train_labels, const Matrix& test,
                                 std::span<const int> test_labels, int num_classes) {
    Matrix centroids = Matrix::Zero(num_classes, train.cols());
    std::vector<int> counts(static_cast<std::size_t>(num_classes), 0);
    for (Eigen::Index i = 0; i < train.rows(); ++i) {
        centroids.row(train_labels[static_cast<std::size_t>(i)]) += train.row(i);
        ++counts[static_cast<std::size_t>(train_labels[static_cast<std::size_t>(i)])];
    }
    for (int c = 0; c < num_classes; ++c)
        if (counts[static_cast<std::size_t>(c)] > 0) centroids.row(c) /= counts[static_cast<std::size_t>(c)];
    std::size_t correct = 0;
    for (Eigen::Index i = 0; i < test.rows(); ++i) {
        int best = -1;
        double best_d = 0.0;
        for (int c = 0; c < num_classes; ++c) {
            if (counts[static_cast<std::size_t>(c)] == 0) continue;
            const double d = (test.row(i) - centroids.row(c)).squaredNorm();
            if (best < 0 || d < best_d) {
                best = c;
                best_d = d;
            }
        }
        if (best == test_labels[static_cast<std::size_t>(i)]) ++correct;
    }
    return test.rows() == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(test.rows());
}

}  // namespace mmbind
