#include "mmbind/binding.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>

#include "mmbind/error.hpp"
#include "mmbind/io.hpp"
#include "mmbind/rng.hpp"

namespace mmbind {

namespace fs = std::filesystem;
using nlohmann::json;

SimilarityMatrix similarity_matrix(const Matrix& a, const Matrix& b, std::vector<std::int64_t> row_ids,
                                   std::vector<std::int64_t> col_ids) {
    if (a.cols() != b.cols())
        throw ShapeError("similarity_matrix: embedding dims differ (" + std::to_string(a.cols()) + " vs " +
                         std::to_string(b.cols()) + ")");
    if (a.cols() < 1) throw ShapeError("similarity_matrix: embedding dim must be >= 1");
    SimilarityMatrix s;
    s.values = normalize_rows(a) * normalize_rows(b).transpose();
    if (row_ids.empty()) {
        row_ids.resize(static_cast<std::size_t>(a.rows()));
        std::iota(row_ids.begin(), row_ids.end(), std::int64_t{0});
    }
    if (col_ids.empty()) {
        col_ids.resize(static_cast<std::size_t>(b.rows()));
        std::iota(col_ids.begin(), col_ids.end(), std::int64_t{0});
    }
    if (row_ids.size() != static_cast<std::size_t>(a.rows()) || col_ids.size() != static_cast<std::size_t>(b.rows()))
        throw ShapeError("similarity_matrix: id lists do not match row counts");
    s.row_ids = std::move(row_ids);
    s.col_ids = std::move(col_ids);
    return s;
}

// ---------------------------------------------------------------------------
// PseudoPairedDataset

bool PseudoPairedDataset::has(const ModalityId& m) const {
    if (m == kLabelModality) return labeled;
    return views.contains(m);
}

std::vector<ModalityId> PseudoPairedDataset::modality_set() const {
    std::vector<ModalityId> out;
    for (const auto& d : modalities) out.push_back(d.name);
    if (labeled) out.push_back(kLabelModality);
    return out;
}

PseudoPairedSample PseudoPairedDataset::sample(std::size_t i) const {
    PseudoPairedSample s;
    for (const auto& [m, mat] : views) s.views[m] = mat.row(static_cast<Eigen::Index>(i)).transpose();
    if (labeled) s.label = labels.at(i);
    s.similarity = similarity.at(i);
    s.source = origins.at(i).front();
    s.matched = origins.at(i).back();
    return s;
}

PseudoPairedDataset PseudoPairedDataset::from_incomplete(const IncompleteDataset& ds, int dataset_index) {
    PseudoPairedDataset p;
    p.num_classes = ds.num_classes;
    p.class_names = ds.class_names;
    p.dataset_names.assign(static_cast<std::size_t>(dataset_index) + 1, "");
    p.dataset_names.back() = ds.name;
    p.modalities = ds.modalities;
    p.views = ds.views;
    p.labeled = ds.labeled;
    p.labels = ds.labels;
    p.meta = ds.meta;
    if (p.meta.size() != ds.size()) p.meta.assign(ds.size(), Meta{});
    p.similarity.assign(ds.size(), 1.0);
    for (std::size_t i = 0; i < ds.size(); ++i) p.origins.push_back({{dataset_index, static_cast<std::int64_t>(i)}});
    return p;
}

namespace {

struct RowRef {
    bool anchor_in_a;
    std::size_t anchor;
    std::size_t matched;
    double similarity;
};

PseudoPairedDataset assemble(const PseudoPairedDataset& a, const PseudoPairedDataset& b,
                             const std::vector<RowRef>& rows) {
    PseudoPairedDataset out;
    out.num_classes = std::max(a.num_classes, b.num_classes);
    out.class_names = a.class_names.size() >= b.class_names.size() ? a.class_names : b.class_names;
    out.dataset_names = a.dataset_names.size() >= b.dataset_names.size() ? a.dataset_names : b.dataset_names;
    for (std::size_t i = 0; i < std::min(a.dataset_names.size(), b.dataset_names.size()); ++i) {
        if (out.dataset_names[i].empty()) out.dataset_names[i] = a.dataset_names[i].empty() ? b.dataset_names[i] : a.dataset_names[i];
    }
    out.modalities = a.modalities;
    for (const auto& d : b.modalities) {
        auto it = std::find_if(out.modalities.begin(), out.modalities.end(), [&](const ModalityDecl& x) { return x.name == d.name; });
        if (it == out.modalities.end()) out.modalities.push_back(d);
        else if (it->dim != d.dim) throw ShapeError("modality '" + d.name + "' has different dims in the two datasets");
    }
    out.labeled = a.labeled || b.labeled;

    const auto n = static_cast<Eigen::Index>(rows.size());
    for (const auto& d : out.modalities) out.views[d.name] = Matrix(n, d.dim);
    for (Eigen::Index r = 0; r < n; ++r) {
        const RowRef& ref = rows[static_cast<std::size_t>(r)];
        const PseudoPairedDataset& anchor = ref.anchor_in_a ? a : b;
        const PseudoPairedDataset& other = ref.anchor_in_a ? b : a;
        const auto ai = static_cast<Eigen::Index>(ref.anchor);
        const auto mi = static_cast<Eigen::Index>(ref.matched);
        for (auto& [m, mat] : out.views) {
            auto it = anchor.views.find(m);
            mat.row(r) = it != anchor.views.end() ? it->second.row(ai) : other.views.at(m).row(mi);
        }
        if (out.labeled) out.labels.push_back(anchor.labeled ? anchor.labels[ref.anchor] : other.labels[ref.matched]);
        out.meta.push_back(anchor.meta.empty() ? Meta{} : anchor.meta[ref.anchor]);
        out.similarity.push_back(
            std::min({ref.similarity, anchor.similarity[ref.anchor], other.similarity[ref.matched]}));
        std::vector<Origin> origin = anchor.origins[ref.anchor];
        origin.insert(origin.end(), other.origins[ref.matched].begin(), other.origins[ref.matched].end());
        out.origins.push_back(std::move(origin));
    }
    return out;
}

void check_dims(const SimilarityMatrix& sim, std::size_t na, std::size_t nb) {
    if (na == 0 || nb == 0) throw ValidationError("datasets", "binding needs non-empty datasets on both sides");
    if (static_cast<std::size_t>(sim.rows()) != na || static_cast<std::size_t>(sim.cols()) != nb)
        throw ShapeError("similarity matrix is " + std::to_string(sim.rows()) + "x" + std::to_string(sim.cols()) +
                         " but datasets have " + std::to_string(na) + " and " + std::to_string(nb) + " samples");
}

std::size_t argmax_of(const auto& row, Eigen::Index n, Rng* rng) {
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < n; ++k)
        if (row(k) > row(best)) best = k;
    if (rng == nullptr) return static_cast<std::size_t>(best);
    std::vector<std::size_t> ties;
    for (Eigen::Index k = 0; k < n; ++k)
        if (row(k) == row(best)) ties.push_back(static_cast<std::size_t>(k));
    return ties[rng->index(ties.size())];
}

}  // namespace

std::vector<std::size_t> argmax_rows(const Matrix& values, const PairingOptions& opts) {
    Rng rng(derive_seed(opts.tie_seed, "tie-break"));
    Rng* tie = opts.tie_break == TieBreak::random ? &rng : nullptr;
    std::vector<std::size_t> out(static_cast<std::size_t>(values.rows()));
    for (Eigen::Index j = 0; j < values.rows(); ++j) out[static_cast<std::size_t>(j)] = argmax_of(values.row(j), values.cols(), tie);
    return out;
}

PseudoPairedDataset pair_argmax(const SimilarityMatrix& sim, const PseudoPairedDataset& a,
                                const PseudoPairedDataset& b, const PairingOptions& opts) {
    check_dims(sim, a.size(), b.size());
    const auto row_match = argmax_rows(sim.values, opts);
    PairingOptions col_opts = opts;
    col_opts.tie_seed = derive_seed(opts.tie_seed, "columns");
    const Matrix transposed = sim.values.transpose();
    const auto col_match = argmax_rows(transposed, col_opts);
    std::vector<RowRef> rows;
    rows.reserve(a.size() + b.size());
    for (std::size_t j = 0; j < a.size(); ++j)
        rows.push_back({true, j, row_match[j], sim.values(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(row_match[j]))});
    for (std::size_t k = 0; k < b.size(); ++k)
        rows.push_back({false, k, col_match[k], sim.values(static_cast<Eigen::Index>(col_match[k]), static_cast<Eigen::Index>(k))});
    return assemble(a, b, rows);
}

PseudoPairedDataset pair_argmax(const SimilarityMatrix& sim, const IncompleteDataset& a, const IncompleteDataset& b,
                                const PairingOptions& opts) {
    return pair_argmax(sim, PseudoPairedDataset::from_incomplete(a, 0), PseudoPairedDataset::from_incomplete(b, 1), opts);
}

void PairingScheme::validate() const {
    if (kind == Kind::threshold && !(theta >= -1.0 && theta <= 1.0))
        throw ValidationError("binding.theta", "must lie in [-1, 1]");
    if (kind == Kind::topk && k < 1) throw ValidationError("binding.k", "must be >= 1");
}

std::string to_string(PairingScheme::Kind k) {
    switch (k) {
        case PairingScheme::Kind::top1: return "top1";
        case PairingScheme::Kind::threshold: return "threshold";
        case PairingScheme::Kind::topk: return "topk";
    }
    return "top1";
}

PairingScheme::Kind pairing_kind_from_string(std::string_view name) {
    if (name == "top1" || name == "argmax") return PairingScheme::Kind::top1;
    if (name == "threshold") return PairingScheme::Kind::threshold;
    if (name == "topk") return PairingScheme::Kind::topk;
    throw ValidationError("binding.scheme", "unknown pairing scheme '" + std::string(name) + "'");
}

PseudoPairedDataset pair_threshold(const SimilarityMatrix& sim, const PairingScheme& scheme,
                                   const IncompleteDataset& a, const IncompleteDataset& b,
                                   const PairingOptions& opts) {
    scheme.validate();
    const auto pa = PseudoPairedDataset::from_incomplete(a, 0);
    const auto pb = PseudoPairedDataset::from_incomplete(b, 1);
    if (scheme.kind == PairingScheme::Kind::top1) return pair_argmax(sim, pa, pb, opts);
    check_dims(sim, a.size(), b.size());
    std::vector<RowRef> rows;
    const Matrix& v = sim.values;
    if (scheme.kind == PairingScheme::Kind::threshold) {
        for (Eigen::Index j = 0; j < v.rows(); ++j)
            for (Eigen::Index k = 0; k < v.cols(); ++k)
                if (v(j, k) >= scheme.theta)
                    rows.push_back({true, static_cast<std::size_t>(j), static_cast<std::size_t>(k), v(j, k)});
        return assemble(pa, pb, rows);
    }
    auto top = [&](const auto& line, Eigen::Index n) {
        std::vector<std::size_t> idx(static_cast<std::size_t>(n));
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) {
            return line(static_cast<Eigen::Index>(x)) > line(static_cast<Eigen::Index>(y));
        });
        idx.resize(std::min(idx.size(), static_cast<std::size_t>(scheme.k)));
        return idx;
    };
    for (Eigen::Index j = 0; j < v.rows(); ++j)
        for (std::size_t k : top(v.row(j), v.cols()))
            rows.push_back({true, static_cast<std::size_t>(j), k, v(j, static_cast<Eigen::Index>(k))});
    for (Eigen::Index k = 0; k < v.cols(); ++k)
        for (std::size_t j : top(v.col(k), v.rows()))
            rows.push_back({false, static_cast<std::size_t>(k), j, v(static_cast<Eigen::Index>(j), k)});
    return assemble(pa, pb, rows);
}

// ---------------------------------------------------------------------------
// Embedders and successive binding

SharedEmbedder autoencoder_embedder(EncoderSpec spec, std::uint64_t seed) {
    return [spec, seed](const ModalityId& shared, const PseudoPairedDataset& left, const PseudoPairedDataset& right) {
        EncoderSpec s = spec;
        s.modality = shared;
        const std::array<Matrix, 2> parts{left.views.at(shared), right.views.at(shared)};
        const Autoencoder ae = train_autoencoder(stack_rows(parts), s, derive_seed(seed, "bind:" + shared));
        return std::pair{ae.encoder.encode(parts[0]), ae.encoder.encode(parts[1])};
    };
}

SharedEmbedder label_embedder(std::shared_ptr<const LabelEmbeddingProvider> provider,
                              std::vector<std::string> meta_keys) {
    return [provider, meta_keys](const ModalityId&, const PseudoPairedDataset& left, const PseudoPairedDataset& right) {
        auto side = [&](const PseudoPairedDataset& p) {
            if (!p.labeled) throw ValidationError("binding.shared_modality", "label binding requires labeled datasets");
            std::vector<std::string> texts;
            for (std::size_t i = 0; i < p.size(); ++i)
                texts.push_back(label_text(p.class_names.at(static_cast<std::size_t>(p.labels[i])),
                                           p.meta.empty() ? Meta{} : p.meta[i], meta_keys));
            return embed_labels(texts, *provider);
        };
        return std::pair{side(left), side(right)};
    };
}

SharedEmbedder raw_embedder() {
    return [](const ModalityId& shared, const PseudoPairedDataset& left, const PseudoPairedDataset& right) {
        return std::pair{left.views.at(shared), right.views.at(shared)};
    };
}

PseudoPairedDataset bind_many(const std::vector<IncompleteDataset>& datasets, const std::vector<ModalityId>& selectors,
                              const SharedEmbedder& embedder, const PairingOptions& opts) {
    if (datasets.size() < 2) throw ValidationError("datasets", "binding needs at least two datasets");
    if (selectors.size() != datasets.size() - 1)
        throw ValidationError("selectors", "need one shared modality per adjacent pair");
    PseudoPairedDataset acc = PseudoPairedDataset::from_incomplete(datasets[0], 0);
    std::string acc_name = datasets[0].name;
    for (std::size_t i = 1; i < datasets.size(); ++i) {
        const ModalityId& shared = selectors[i - 1];
        const auto next = PseudoPairedDataset::from_incomplete(datasets[i], static_cast<int>(i));
        if (!acc.has(shared) || !next.has(shared))
            throw ValidationError("selectors[" + std::to_string(i - 1) + "]",
                                  "modality '" + shared + "' is not shared by '" + acc_name + "' and '" +
                                      datasets[i].name + "'");
        const auto [left, right] = embedder(shared, acc, next);
        const SimilarityMatrix sim = similarity_matrix(left, right);
        PairingOptions step = opts;
        step.tie_seed = derive_seed(opts.tie_seed, "step:" + std::to_string(i));
        acc = pair_argmax(sim, acc, next, step);
        acc_name += "+" + datasets[i].name;
    }
    return acc;
}

// ---------------------------------------------------------------------------
// Weights and scoring

std::string to_string(WeightNorm w) {
    switch (w) {
        case WeightNorm::max: return "max";
        case WeightNorm::sum: return "sum";
        case WeightNorm::none: return "none";
    }
    return "max";
}

WeightNorm weight_norm_from_string(std::string_view name) {
    if (name == "max") return WeightNorm::max;
    if (name == "sum") return WeightNorm::sum;
    if (name == "none") return WeightNorm::none;
    throw ValidationError("weight_norm", "unknown weight normalization '" + std::string(name) + "'");
}

std::vector<double> normalize_weights(std::span<const double> similarities, WeightNorm mode) {
    if (similarities.empty()) throw ValidationError("similarities", "must be non-empty");
    std::vector<double> w(similarities.size(), 1.0);
    if (mode == WeightNorm::none) return w;
    double mx = 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] = std::clamp(similarities[i], 0.0, 1.0);
        mx = std::max(mx, w[i]);
        total += w[i];
    }
    if (mx <= 0.0) return std::vector<double>(w.size(), 1.0);
    const double denom = mode == WeightNorm::max ? mx : total;
    for (double& x : w) x /= denom;
    return w;
}

PairingScore pairing_accuracy(const PseudoPairedDataset& pairs, const std::vector<std::vector<int>>& ground_truth) {
    PairingScore s;
    int classes = pairs.num_classes;
    for (const auto& gt : ground_truth)
        for (int y : gt) classes = std::max(classes, y + 1);
    s.confusion.assign(static_cast<std::size_t>(classes), std::vector<std::size_t>(static_cast<std::size_t>(classes), 0));
    auto lookup = [&](const Origin& o) {
        if (o.dataset < 0 || static_cast<std::size_t>(o.dataset) >= ground_truth.size() ||
            o.index < 0 || static_cast<std::size_t>(o.index) >= ground_truth[static_cast<std::size_t>(o.dataset)].size())
            throw ValidationError("ground_truth", "missing ground truth for dataset " + std::to_string(o.dataset) +
                                                      " sample " + std::to_string(o.index));
        return ground_truth[static_cast<std::size_t>(o.dataset)][static_cast<std::size_t>(o.index)];
    };
    for (const auto& chain : pairs.origins) {
        const int anchor = lookup(chain.front());
        bool all_same = true;
        for (const auto& o : chain) all_same = all_same && lookup(o) == anchor;
        ++s.confusion[static_cast<std::size_t>(anchor)][static_cast<std::size_t>(lookup(chain.back()))];
        if (all_same) ++s.correct;
        ++s.total;
    }
    s.accuracy = s.total == 0 ? 0.0 : static_cast<double>(s.correct) / static_cast<double>(s.total);
    return s;
}

// ---------------------------------------------------------------------------
// Persistence

void save_pseudo_paired(const fs::path& dir, const PseudoPairedDataset& p) {
    fs::create_directories(dir);
    json manifest;
    manifest["format"] = "mmbind-pseudo-paired";
    manifest["version"] = 1;
    manifest["count"] = p.size();
    manifest["num_classes"] = p.num_classes;
    manifest["class_names"] = p.class_names;
    manifest["datasets"] = p.dataset_names;
    manifest["labeled"] = p.labeled;
    manifest["modalities"] = json::array();
    for (const auto& d : p.modalities) {
        manifest["modalities"].push_back({{"name", d.name}, {"dim", d.dim}, {"file", d.name + ".f32"}});
        io::write_f32(dir / (d.name + ".f32"), p.views.at(d.name));
    }
    manifest["similarity_file"] = "similarity.f32";
    io::write_f32(dir / "similarity.f32", p.similarity);
    if (p.labeled) io::write_i32(dir / "labels.i32", p.labels);
    manifest["provenance_file"] = "provenance.jsonl";
    std::ofstream prov(dir / "provenance.jsonl", std::ios::trunc);
    for (std::size_t i = 0; i < p.size(); ++i) {
        json line;
        line["row"] = i;
        line["similarity"] = p.similarity[i];
        auto origin_json = [&](const Origin& o) {
            json oj{{"dataset", o.dataset}, {"index", o.index}};
            if (static_cast<std::size_t>(o.dataset) < p.dataset_names.size()) oj["name"] = p.dataset_names[static_cast<std::size_t>(o.dataset)];
            return oj;
        };
        line["source"] = origin_json(p.origins[i].front());
        line["matched"] = origin_json(p.origins[i].back());
        line["origins"] = json::array();
        for (const auto& o : p.origins[i]) line["origins"].push_back(origin_json(o));
        if (!p.meta.empty() && !p.meta[i].empty()) line["meta"] = p.meta[i];
        prov << line.dump() << '\n';
    }
    io::write_json(dir / "manifest.json", manifest);
}

PseudoPairedDataset load_pseudo_paired(const fs::path& dir) {
    const json manifest = io::read_json(dir / "manifest.json");
    if (manifest.value("format", "") != "mmbind-pseudo-paired") throw FormatError("not a pseudo-paired dataset: " + dir.string());
    PseudoPairedDataset p;
    try {
        const auto count = manifest.at("count").get<Eigen::Index>();
        p.num_classes = manifest.at("num_classes").get<int>();
        p.class_names = manifest.at("class_names").get<std::vector<std::string>>();
        p.dataset_names = manifest.at("datasets").get<std::vector<std::string>>();
        p.labeled = manifest.at("labeled").get<bool>();
        for (const auto& m : manifest.at("modalities")) {
            ModalityDecl d{m.at("name").get<std::string>(), m.at("dim").get<int>()};
            p.views[d.name] = io::read_f32(dir / m.at("file").get<std::string>(), count, d.dim);
            p.modalities.push_back(d);
        }
        p.similarity = io::read_f32(dir / manifest.at("similarity_file").get<std::string>());
        if (static_cast<Eigen::Index>(p.similarity.size()) != count) throw ShapeError("similarity array length mismatch");
        if (p.labeled) p.labels = io::read_i32(dir / "labels.i32");
        std::ifstream prov(dir / manifest.at("provenance_file").get<std::string>());
        std::string line;
        while (std::getline(prov, line)) {
            if (line.empty()) continue;
            const json j = json::parse(line);
            std::vector<Origin> chain;
            for (const auto& o : j.at("origins")) chain.push_back({o.at("dataset").get<int>(), o.at("index").get<std::int64_t>()});
            p.origins.push_back(std::move(chain));
            p.meta.push_back(j.contains("meta") ? j["meta"].get<Meta>() : Meta{});
        }
        if (static_cast<Eigen::Index>(p.origins.size()) != count) throw ShapeError("provenance length mismatch");
    } catch (const json::exception& e) {
        throw FormatError("malformed pseudo-paired manifest in " + dir.string() + ": " + e.what());
    }
    return p;
}

}  // namespace mmbind
