#include "mmbind/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mmbind/checkpoint.hpp"
#include "mmbind/error.hpp"
#include "mmbind/rng.hpp"

namespace mmbind {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Aggregated training set

std::size_t AggregatedTrainingSet::modality_index(const ModalityId& m) const {
    for (std::size_t i = 0; i < modalities.size(); ++i)
        if (modalities[i].name == m) return i;
    throw ValidationError("modality", "unknown modality '" + m + "'");
}

std::size_t AggregatedTrainingSet::count(RowSource s) const {
    return static_cast<std::size_t>(std::count(sources.begin(), sources.end(), s));
}

Matrix label_view(const std::vector<std::string>& class_names, std::span<const int> labels, std::span<const Meta> meta,
                  const LabelViews& label_views) {
    if (!label_views.provider) throw ValidationError("label_embedding", "a label embedding provider is required");
    std::vector<std::string> texts;
    texts.reserve(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= class_names.size())
            throw ValidationError("labels", "label " + std::to_string(y) + " has no class name");
        texts.push_back(label_text(class_names[static_cast<std::size_t>(y)], i < meta.size() ? meta[i] : Meta{},
                                   label_views.meta_keys));
    }
    return embed_labels(texts, *label_views.provider);
}

namespace {

void check_modality_list(const std::vector<ModalityDecl>& modalities) {
    std::set<ModalityId> seen;
    for (const auto& d : modalities) {
        if (d.dim < 1) throw ValidationError("modalities." + d.name, "dim must be >= 1");
        if (!seen.insert(d.name).second) throw ValidationError("modalities", "duplicate modality '" + d.name + "'");
    }
    if (modalities.size() < 2) throw ValidationError("modalities", "need at least two modalities");
}

void check_known(const std::vector<ModalityDecl>& global, const std::vector<ModalityDecl>& local,
                 const std::string& where) {
    for (const auto& d : local) {
        auto it = std::find_if(global.begin(), global.end(), [&](const ModalityDecl& g) { return g.name == d.name; });
        if (it == global.end())
            throw ValidationError(where, "modality '" + d.name + "' is not in the global modality list");
        if (it->dim != d.dim)
            throw ShapeError(where + ": modality '" + d.name + "' has dim " + std::to_string(d.dim) +
                             " but the global list says " + std::to_string(it->dim));
    }
}

}  // namespace

AggregatedTrainingSet build_training_set(const std::vector<ModalityDecl>& modalities,
                                         std::span<const IncompleteDataset> incomplete,
                                         const PseudoPairedDataset* pairs, std::span<const double> pair_weights,
                                         const LabelViews& label_views) {
    check_modality_list(modalities);
    const std::size_t n_pairs = pairs ? pairs->size() : 0;
    if (pair_weights.size() != n_pairs)
        throw ShapeError("pair weights have " + std::to_string(pair_weights.size()) + " entries for " +
                         std::to_string(n_pairs) + " pseudo pairs");
    for (double w : pair_weights)
        if (!(w >= 0.0 && w <= 1.0)) throw ValidationError("weights", "pairing weights must lie in [0, 1]");

    std::size_t total = n_pairs;
    for (const auto& ds : incomplete) total += ds.size();

    AggregatedTrainingSet set;
    set.modalities = modalities;
    const auto n = static_cast<Eigen::Index>(total);
    for (const auto& d : modalities) set.views[d.name] = Matrix::Zero(n, d.dim);
    set.presence = Matrix::Zero(n, static_cast<Eigen::Index>(modalities.size()));
    set.weights.reserve(total);
    set.labels.reserve(total);
    set.sources.reserve(total);

    Eigen::Index offset = 0;
    auto place = [&](std::size_t col, const Matrix& block) {
        const ModalityDecl& d = modalities[col];
        if (block.cols() != d.dim)
            throw ShapeError("modality '" + d.name + "' has width " + std::to_string(block.cols()) + ", expected " +
                             std::to_string(d.dim));
        set.views[d.name].middleRows(offset, block.rows()) = block;
        set.presence.block(offset, static_cast<Eigen::Index>(col), block.rows(), 1).setOnes();
    };

    for (const auto& ds : incomplete) {
        check_known(modalities, ds.modalities, "dataset '" + ds.name + "'");
        for (std::size_t c = 0; c < modalities.size(); ++c) {
            const ModalityId& m = modalities[c].name;
            if (m == kLabelModality) {
                if (ds.labeled) place(c, label_view(ds.class_names, ds.labels, ds.meta, label_views));
            } else if (ds.has(m)) {
                place(c, ds.view(m));
            }
        }
        for (std::size_t i = 0; i < ds.size(); ++i) {
            set.weights.push_back(1.0);
            set.labels.push_back(ds.labeled ? ds.labels[i] : -1);
            set.sources.push_back(RowSource::incomplete);
        }
        offset += static_cast<Eigen::Index>(ds.size());
    }
    if (pairs) {
        check_known(modalities, pairs->modalities, "pseudo-paired data");
        for (std::size_t c = 0; c < modalities.size(); ++c) {
            const ModalityId& m = modalities[c].name;
            if (m == kLabelModality) {
                if (pairs->labeled) place(c, label_view(pairs->class_names, pairs->labels, pairs->meta, label_views));
            } else if (pairs->views.contains(m)) {
                place(c, pairs->views.at(m));
            }
        }
        for (std::size_t i = 0; i < n_pairs; ++i) {
            set.weights.push_back(pair_weights[i]);
            set.labels.push_back(pairs->labeled ? pairs->labels[i] : -1);
            set.sources.push_back(RowSource::pseudo_paired);
        }
    }
    for (Eigen::Index i = 0; i < n; ++i)
        if (set.presence.row(i).sum() < 2.0)
            throw ValidationError("training_set", "row " + std::to_string(i) + " has fewer than two present modalities");
    return set;
}

// ---------------------------------------------------------------------------
// Weighted contrastive loss

double weighted_contrastive_loss(const std::vector<Matrix>& z, std::span<const double> weights, const Matrix& mask,
                                 double tau, std::vector<Matrix>* grad) {
    if (!(tau > 0.0)) throw ValidationError("temperature", "must be > 0");
    if (z.empty()) throw ShapeError("weighted_contrastive_loss: no modalities");
    const Eigen::Index b = z.front().rows();
    const Eigen::Index f = z.front().cols();
    if (b < 2) throw ValidationError("batch_size", "contrastive loss needs B >= 2 (no negatives otherwise)");
    const auto m = static_cast<Eigen::Index>(z.size());
    for (const auto& zm : z)
        if (zm.rows() != b || zm.cols() != f) throw ShapeError("weighted_contrastive_loss: embedding shapes differ");
    if (mask.rows() != b || mask.cols() != m) throw ShapeError("weighted_contrastive_loss: mask must be B x M");
    if (static_cast<Eigen::Index>(weights.size()) != b) throw ShapeError("weighted_contrastive_loss: need B weights");

    if (grad) {
        grad->assign(z.size(), Matrix());
        for (auto& g : *grad) g = Matrix::Zero(b, f);
    }
    double loss = 0.0;
    Matrix g_s(b, b);
    for (Eigen::Index p = 0; p < m; ++p) {
        for (Eigen::Index q = 0; q < m; ++q) {
            if (p == q) continue;
            const Matrix s = z[static_cast<std::size_t>(p)] * z[static_cast<std::size_t>(q)].transpose() / tau;
            g_s.setZero();
            bool any = false;
            for (Eigen::Index i = 0; i < b; ++i) {
                if (mask(i, p) == 0.0 || mask(i, q) == 0.0) continue;
                double mx = -std::numeric_limits<double>::infinity();
                for (Eigen::Index j = 0; j < b; ++j)
                    if (j != i && mask(j, q) != 0.0) mx = std::max(mx, s(i, j));
                if (mx == -std::numeric_limits<double>::infinity()) continue;
                double denom = 0.0;
                for (Eigen::Index j = 0; j < b; ++j)
                    if (j != i && mask(j, q) != 0.0) denom += std::exp(s(i, j) - mx);
                const double lse = mx + std::log(denom);
                const double w = weights[static_cast<std::size_t>(i)];
                loss -= w * (s(i, i) - lse);
                if (grad) {
                    any = true;
                    g_s(i, i) -= w;
                    for (Eigen::Index j = 0; j < b; ++j)
                        if (j != i && mask(j, q) != 0.0) g_s(i, j) += w * std::exp(s(i, j) - lse);
                }
            }
            if (any) {
                (*grad)[static_cast<std::size_t>(p)] += g_s * z[static_cast<std::size_t>(q)] / tau;
                (*grad)[static_cast<std::size_t>(q)] += g_s.transpose() * z[static_cast<std::size_t>(p)] / tau;
            }
        }
    }
    return loss;
}

// ---------------------------------------------------------------------------
// Model

void ModelSpec::validate() const {
    std::set<ModalityId> seen;
    int sensors = 0;
    for (const auto& d : modalities) {
        if (d.dim < 1) throw ValidationError("model.modalities." + d.name, "dim must be >= 1");
        if (!seen.insert(d.name).second) throw ValidationError("model.modalities", "duplicate modality '" + d.name + "'");
        if (d.name != kLabelModality) ++sensors;
    }
    if (sensors < 1) throw ValidationError("model.modalities", "need at least one sensor modality");
    for (int h : encoder_hidden)
        if (h < 1) throw ValidationError("model.encoder_hidden", "widths must be >= 1");
    for (int h : classifier_hidden)
        if (h < 1) throw ValidationError("model.classifier_hidden", "widths must be >= 1");
    if (feature_dim < 1) throw ValidationError("model.feature_dim", "must be >= 1");
    if (projection_dim < 1) throw ValidationError("model.projection_dim", "must be >= 1");
    if (num_classes < 2) throw ValidationError("model.num_classes", "must be >= 2");
}

json to_json(const ModelSpec& spec) {
    json mods = json::array();
    for (const auto& d : spec.modalities) mods.push_back({{"name", d.name}, {"dim", d.dim}});
    return {{"modalities", mods},
            {"encoder_hidden", spec.encoder_hidden},
            {"feature_dim", spec.feature_dim},
            {"projection_dim", spec.projection_dim},
            {"classifier_hidden", spec.classifier_hidden},
            {"num_classes", spec.num_classes},
            {"prompt", spec.prompt}};
}

ModelSpec model_spec_from_json(const json& j) {
    ModelSpec s;
    try {
        for (const auto& m : j.at("modalities")) s.modalities.push_back({m.at("name").get<std::string>(), m.at("dim").get<int>()});
        s.encoder_hidden = j.at("encoder_hidden").get<std::vector<int>>();
        s.feature_dim = j.at("feature_dim").get<int>();
        s.projection_dim = j.at("projection_dim").get<int>();
        s.classifier_hidden = j.at("classifier_hidden").get<std::vector<int>>();
        s.num_classes = j.at("num_classes").get<int>();
        s.prompt = j.at("prompt").get<bool>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed model spec: ") + e.what());
    }
    return s;
}

namespace {

Mlp make_classifier(const ModelSpec& spec, int inputs, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "classifier"));
    std::vector<int> dims{inputs};
    dims.insert(dims.end(), spec.classifier_hidden.begin(), spec.classifier_hidden.end());
    dims.push_back(spec.num_classes);
    return Mlp(dims, Activation::relu, Activation::linear, rng);
}

int classifier_inputs(const ModelSpec& spec) {
    int sensors = 0;
    for (const auto& d : spec.modalities)
        if (d.name != kLabelModality) ++sensors;
    return sensors * spec.feature_dim + (spec.prompt ? sensors : 0);
}

}  // namespace

MultimodalModel::MultimodalModel(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    spec_.validate();
    for (const auto& d : spec_.modalities) {
        Rng enc_rng(derive_seed(seed, "encoder:" + d.name));
        std::vector<int> dims{d.dim};
        dims.insert(dims.end(), spec_.encoder_hidden.begin(), spec_.encoder_hidden.end());
        dims.push_back(spec_.feature_dim);
        Rng head_rng(derive_seed(seed, "head:" + d.name));
        branches_.push_back({d, Mlp(dims, Activation::relu, Activation::linear, enc_rng),
                             ProjectionHead(spec_.feature_dim, head_rng, spec_.projection_dim)});
    }
    classifier_ = make_classifier(spec_, classifier_inputs(spec_), seed);
}

void MultimodalModel::reset_classifier(std::uint64_t seed) {
    classifier_ = make_classifier(spec_, classifier_inputs(spec_), seed);
}

ModalityBranch& MultimodalModel::branch(const ModalityId& m) {
    for (auto& b : branches_)
        if (b.decl.name == m) return b;
    throw ValidationError("modality", "model has no modality '" + m + "'");
}

const ModalityBranch& MultimodalModel::branch(const ModalityId& m) const {
    return const_cast<MultimodalModel*>(this)->branch(m);
}

bool MultimodalModel::has(const ModalityId& m) const {
    return std::any_of(branches_.begin(), branches_.end(), [&](const ModalityBranch& b) { return b.decl.name == m; });
}

std::vector<ModalityId> MultimodalModel::classifier_modalities() const {
    std::vector<ModalityId> out;
    for (const auto& d : spec_.modalities)
        if (d.name != kLabelModality) out.push_back(d.name);
    return out;
}

Matrix MultimodalModel::embed(const ModalityId& m, const Matrix& views) const {
    const ModalityBranch& b = branch(m);
    if (views.cols() != b.decl.dim)
        throw ShapeError("embed: modality '" + m + "' expects width " + std::to_string(b.decl.dim) + ", got " +
                         std::to_string(views.cols()));
    return project_and_normalize(b.encoder.forward(views), b.head);
}

namespace {

/// Which classifier modalities the mask selects and the data provides.
std::vector<bool> active_modalities(const MultimodalModel& model, const std::vector<ModalityId>& mask,
                                    const std::map<ModalityId, Matrix>& views) {
    const auto mods = model.classifier_modalities();
    for (const auto& m : mask) {
        if (m == kLabelModality) throw ValidationError("mask", "the label modality cannot be a classifier input");
        if (std::find(mods.begin(), mods.end(), m) == mods.end())
            throw ValidationError("mask", "unknown modality '" + m + "'");
    }
    std::vector<bool> active;
    for (const auto& m : mods) {
        const bool selected = mask.empty() || std::find(mask.begin(), mask.end(), m) != mask.end();
        active.push_back(selected && views.contains(m));
    }
    if (std::none_of(active.begin(), active.end(), [](bool x) { return x; }))
        throw ValidationError("mask", "selects no classifier modality present in the data");
    return active;
}

Matrix presence_from(const std::vector<bool>& active, Eigen::Index rows) {
    Matrix p(rows, static_cast<Eigen::Index>(active.size()));
    for (std::size_t c = 0; c < active.size(); ++c) p.col(static_cast<Eigen::Index>(c)).setConstant(active[c] ? 1.0 : 0.0);
    return p;
}

Eigen::Index row_count(const std::map<ModalityId, Matrix>& views, const std::vector<ModalityId>& mods,
                       const Matrix& presence) {
    for (const auto& m : mods)
        if (views.contains(m)) return views.at(m).rows();
    return presence.rows();
}

struct ClassifierPass {
    std::vector<MlpTrace> encoder_traces;
    MlpTrace classifier_trace;
    Matrix logits;
};

ClassifierPass classifier_forward(const MultimodalModel& model, const std::map<ModalityId, Matrix>& views,
                                  const Matrix& presence, bool keep_traces) {
    const auto mods = model.classifier_modalities();
    const int fd = model.spec().feature_dim;
    const auto k = static_cast<Eigen::Index>(mods.size());
    const Eigen::Index rows = presence.rows();
    if (presence.cols() != k) throw ShapeError("presence must have one column per classifier modality");
    Matrix input = Matrix::Zero(rows, k * fd + (model.spec().prompt ? k : 0));
    ClassifierPass pass;
    pass.encoder_traces.resize(mods.size());
    for (std::size_t c = 0; c < mods.size(); ++c) {
        const auto col = static_cast<Eigen::Index>(c);
        const ModalityBranch& br = model.branch(mods[c]);
        Matrix x = Matrix::Zero(rows, br.decl.dim);
        if (presence.col(col).any()) {
            const Matrix& v = views.at(mods[c]);
            if (v.cols() != br.decl.dim || v.rows() != rows)
                throw ShapeError("classifier input for '" + mods[c] + "' has shape " + std::to_string(v.rows()) + "x" +
                                 std::to_string(v.cols()));
            for (Eigen::Index i = 0; i < rows; ++i)
                if (presence(i, col) != 0.0) x.row(i) = v.row(i);
        }
        input.middleCols(col * fd, fd) = keep_traces ? br.encoder.forward(x, pass.encoder_traces[c]) : br.encoder.forward(x);
        if (model.spec().prompt) input.col(k * fd + col) = presence.col(col);
    }
    pass.logits = keep_traces ? model.classifier().forward(input, pass.classifier_trace) : model.classifier().forward(input);
    return pass;
}

}  // namespace

Matrix MultimodalModel::logits(const std::map<ModalityId, Matrix>& views, const std::vector<ModalityId>& mask) const {
    const auto active = active_modalities(*this, mask, views);
    return logits(views, presence_from(active, row_count(views, classifier_modalities(), Matrix())));
}

Matrix MultimodalModel::logits(const std::map<ModalityId, Matrix>& views, const Matrix& presence) const {
    return classifier_forward(*this, views, presence, false).logits;
}

std::vector<double> MultimodalModel::flatten() const {
    std::vector<double> out;
    for (const auto& b : branches_) {
        const auto e = b.encoder.flatten();
        const auto h = b.head.net().flatten();
        out.insert(out.end(), e.begin(), e.end());
        out.insert(out.end(), h.begin(), h.end());
    }
    const auto c = classifier_.flatten();
    out.insert(out.end(), c.begin(), c.end());
    return out;
}

void save_model(const std::filesystem::path& dir, const MultimodalModel& model, const json& extra) {
    std::vector<NamedNet> nets;
    for (const auto& b : model.branches()) {
        nets.push_back({"encoder:" + b.decl.name, b.encoder});
        nets.push_back({"head:" + b.decl.name, b.head.net()});
    }
    nets.push_back({"classifier", model.classifier()});
    json x = extra;
    x["model_spec"] = to_json(model.spec());
    save_checkpoint(dir, nets, x);
}

MultimodalModel load_model(const std::filesystem::path& dir) {
    const LoadedCheckpoint ck = load_checkpoint(dir);
    if (!ck.extra.contains("model_spec")) throw FormatError("checkpoint has no model spec: " + dir.string());
    MultimodalModel model(model_spec_from_json(ck.extra["model_spec"]), 0);
    for (auto& b : model.branches()) {
        b.encoder = ck.net("encoder:" + b.decl.name);
        b.head = ProjectionHead(ck.net("head:" + b.decl.name));
    }
    model.classifier() = ck.net("classifier");
    return model;
}

// ---------------------------------------------------------------------------
// Pre-training

void ContrastiveConfig::validate() const {
    if (!(temperature > 0.0)) throw ValidationError("training.temperature", "must be > 0");
    if (batch_size < 2) throw ValidationError("training.batch_size", "must be >= 2");
    if (epochs < 0) throw ValidationError("training.epochs", "must be >= 0");
    if (!(learning_rate > 0.0)) throw ValidationError("training.learning_rate", "must be > 0");
}

namespace {

std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order, std::size_t batch,
                                                   std::size_t min_size) {
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t start = 0; start < order.size(); start += batch) {
        const std::size_t stop = std::min(order.size(), start + batch);
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(stop));
    }
    if (out.size() >= 2 && out.back().size() < min_size) {
        auto tail = std::move(out.back());
        out.pop_back();
        out.back().insert(out.back().end(), tail.begin(), tail.end());
    }
    return out;
}

}  // namespace

PretrainResult pretrain(const AggregatedTrainingSet& set, MultimodalModel model, const ContrastiveConfig& cfg,
                        std::uint64_t seed) {
    cfg.validate();
    PretrainResult result;
    if (cfg.epochs == 0) {
        result.model = std::move(model);
        return result;
    }
    if (set.size() < 2) throw ValidationError("training_set", "pre-training needs at least two rows");
    for (const auto& d : set.modalities) {
        if (!model.has(d.name)) throw ValidationError("model", "model lacks modality '" + d.name + "'");
        if (model.branch(d.name).decl.dim != d.dim) throw ShapeError("model and training set disagree on '" + d.name + "' width");
    }
    for (const auto& m : cfg.frozen_encoders)
        if (!model.has(m)) throw ValidationError("training.frozen_encoders", "unknown modality '" + m + "'");

    const std::size_t mcount = set.modalities.size();
    std::vector<ModalityBranch*> branches;
    std::vector<MlpGrad> enc_grads, head_grads;
    std::vector<bool> frozen;
    for (const auto& d : set.modalities) {
        ModalityBranch& b = model.branch(d.name);
        branches.push_back(&b);
        enc_grads.emplace_back(b.encoder);
        head_grads.emplace_back(b.head.net());
        frozen.push_back(cfg.frozen_encoders.contains(d.name));
    }
    std::vector<ParamSlot> slots;
    for (std::size_t c = 0; c < mcount; ++c) {
        if (!frozen[c]) collect_slots(branches[c]->encoder, enc_grads[c], slots);
        collect_slots(branches[c]->head.net(), head_grads[c], slots);
    }
    OptimizerConfig oc;
    oc.kind = OptimizerKind::adam;
    oc.learning_rate = cfg.learning_rate;
    Optimizer opt(oc);

    Rng rng(derive_seed(seed, "pretrain-batches"));
    const Matrix ones = Matrix::Ones(static_cast<Eigen::Index>(set.size()), static_cast<Eigen::Index>(mcount));
    const Matrix& mask_all = cfg.mask_dummy_pairs ? set.presence : ones;

    std::vector<MlpTrace> enc_traces(mcount), head_traces(mcount);
    std::vector<Matrix> h(mcount), z(mcount), gz;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto batches = make_batches(rng.permutation(set.size()), static_cast<std::size_t>(cfg.batch_size), 2);
        double total = 0.0;
        for (const auto& idx : batches) {
            const auto bsz = static_cast<Eigen::Index>(idx.size());
            const Matrix mask = take_rows(mask_all, idx);
            std::vector<double> w(idx.size());
            for (std::size_t i = 0; i < idx.size(); ++i) w[i] = set.weights[idx[i]];
            std::vector<bool> used(mcount, false);
            for (std::size_t c = 0; c < mcount; ++c) {
                used[c] = mask.col(static_cast<Eigen::Index>(c)).sum() > 0.0;
                if (!used[c]) {
                    z[c] = Matrix::Zero(bsz, model.spec().projection_dim);
                    continue;
                }
                const Matrix x = take_rows(set.views.at(set.modalities[c].name), idx);
                const Matrix f = branches[c]->encoder.forward(x, enc_traces[c]);
                h[c] = branches[c]->head.net().forward(f, head_traces[c]);
                z[c] = normalize_rows(h[c]);
            }
            const double loss = weighted_contrastive_loss(z, w, mask, cfg.temperature, &gz) / static_cast<double>(bsz);
            if (!std::isfinite(loss)) throw TrainingError("contrastive loss became non-finite", cfg.learning_rate, epoch);
            total += loss * static_cast<double>(bsz);
            for (std::size_t c = 0; c < mcount; ++c) {
                enc_grads[c].zero();
                head_grads[c].zero();
                if (!used[c]) continue;
                const Matrix gh = normalize_rows_backward(h[c], gz[c] / static_cast<double>(bsz));
                const Matrix gf = branches[c]->head.net().backward(head_traces[c], gh, head_grads[c]);
                if (!frozen[c]) branches[c]->encoder.backward(enc_traces[c], gf, enc_grads[c]);
            }
            opt.step(slots);
        }
        result.curve.push_back({epoch, total / static_cast<double>(set.size()), cfg.learning_rate});
    }
    result.model = std::move(model);
    return result;
}

double mean_positive_cosine(const MultimodalModel& model, const AggregatedTrainingSet& set, const ModalityId& p,
                            const ModalityId& q) {
    const std::size_t ip = set.modality_index(p);
    const std::size_t iq = set.modality_index(q);
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < set.size(); ++i)
        if (set.presence(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(ip)) != 0.0 &&
            set.presence(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(iq)) != 0.0)
            rows.push_back(i);
    if (rows.empty()) throw ValidationError("training_set", "no rows contain both '" + p + "' and '" + q + "'");
    const Matrix zp = model.embed(p, take_rows(set.views.at(p), rows));
    const Matrix zq = model.embed(q, take_rows(set.views.at(q), rows));
    return zp.cwiseProduct(zq).rowwise().sum().mean();
}

// ---------------------------------------------------------------------------
// Fine-tuning

std::string to_string(FinetuneMode m) { return m == FinetuneMode::full ? "full" : "linear_probe"; }

FinetuneMode finetune_mode_from_string(std::string_view name) {
    if (name == "full") return FinetuneMode::full;
    if (name == "linear_probe") return FinetuneMode::linear_probe;
    throw ValidationError("finetune.mode", "unknown mode '" + std::string(name) + "'");
}

void FinetuneConfig::validate() const {
    if (epochs < 0) throw ValidationError("finetune.epochs", "must be >= 0");
    if (batch_size < 1) throw ValidationError("finetune.batch_size", "must be >= 1");
    if (!(learning_rate > 0.0)) throw ValidationError("finetune.learning_rate", "must be > 0");
}

SupervisedData supervised_data(const MultimodalModel& model, const IncompleteDataset& data,
                               const std::vector<ModalityId>& mask) {
    if (!data.labeled) throw ValidationError("finetune", "fine-tuning needs a labeled dataset");
    const auto mods = model.classifier_modalities();
    const auto active = active_modalities(model, mask, data.views);
    SupervisedData out;
    for (std::size_t c = 0; c < mods.size(); ++c)
        if (active[c]) out.views[mods[c]] = data.view(mods[c]);
    out.presence = presence_from(active, static_cast<Eigen::Index>(data.size()));
    out.labels = data.labels;
    return out;
}

SupervisedData supervised_data(const MultimodalModel& model, std::span<const IncompleteDataset> datasets) {
    const auto mods = model.classifier_modalities();
    std::size_t total = 0;
    for (const auto& ds : datasets) {
        if (!ds.labeled) throw ValidationError("datasets", "dataset '" + ds.name + "' is unlabeled");
        total += ds.size();
    }
    SupervisedData out;
    const auto n = static_cast<Eigen::Index>(total);
    out.presence = Matrix::Zero(n, static_cast<Eigen::Index>(mods.size()));
    Eigen::Index offset = 0;
    for (const auto& ds : datasets) {
        const auto rows = static_cast<Eigen::Index>(ds.size());
        for (std::size_t c = 0; c < mods.size(); ++c) {
            if (!ds.has(mods[c])) continue;
            auto [it, fresh] = out.views.try_emplace(mods[c], Matrix::Zero(n, model.branch(mods[c]).decl.dim));
            if (ds.dim(mods[c]) != it->second.cols()) throw ShapeError("dataset '" + ds.name + "' has the wrong width for '" + mods[c] + "'");
            it->second.middleRows(offset, rows) = ds.view(mods[c]);
            out.presence.block(offset, static_cast<Eigen::Index>(c), rows, 1).setOnes();
        }
        out.labels.insert(out.labels.end(), ds.labels.begin(), ds.labels.end());
        offset += rows;
    }
    return out;
}

FinetuneResult train_supervised(MultimodalModel model, const SupervisedData& data, const FinetuneConfig& cfg,
                                std::uint64_t seed) {
    cfg.validate();
    if (data.size() == 0) throw ValidationError("finetune", "fine-tuning set is empty");
    const int classes = model.spec().num_classes;
    for (int y : data.labels)
        if (y < 0 || y >= classes)
            throw ValidationError("finetune.labels", "label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    const auto mods = model.classifier_modalities();
    if (data.presence.rows() != static_cast<Eigen::Index>(data.size()) ||
        data.presence.cols() != static_cast<Eigen::Index>(mods.size()))
        throw ShapeError("presence must be N x (number of classifier modalities)");

    MlpGrad cls_grad(model.classifier());
    std::vector<MlpGrad> enc_grads;
    for (const auto& m : mods) enc_grads.emplace_back(model.branch(m).encoder);
    std::vector<ParamSlot> slots;
    collect_slots(model.classifier(), cls_grad, slots);
    std::vector<bool> train_enc(mods.size(), false);
    if (cfg.mode == FinetuneMode::full)
        for (std::size_t c = 0; c < mods.size(); ++c) {
            train_enc[c] = data.presence.col(static_cast<Eigen::Index>(c)).any();
            if (train_enc[c]) collect_slots(model.branch(mods[c]).encoder, enc_grads[c], slots);
        }

    OptimizerConfig oc;
    oc.kind = OptimizerKind::adam;
    oc.learning_rate = cfg.learning_rate;
    Optimizer opt(oc);
    Rng rng(derive_seed(seed, "finetune-batches"));
    const int fd = model.spec().feature_dim;

    FinetuneResult result;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto batches = make_batches(rng.permutation(data.size()), static_cast<std::size_t>(cfg.batch_size), 1);
        double total = 0.0;
        for (const auto& idx : batches) {
            const auto bsz = static_cast<Eigen::Index>(idx.size());
            std::map<ModalityId, Matrix> views;
            for (const auto& [m, v] : data.views) views[m] = take_rows(v, idx);
            const Matrix presence = take_rows(data.presence, idx);
            ClassifierPass pass = classifier_forward(model, views, presence, true);
            const Matrix prob = softmax_rows(pass.logits);
            Matrix g = prob;
            double loss = 0.0;
            for (Eigen::Index i = 0; i < bsz; ++i) {
                const int y = data.labels[idx[static_cast<std::size_t>(i)]];
                loss -= std::log(std::max(prob(i, y), std::numeric_limits<double>::min()));
                g(i, y) -= 1.0;
            }
            loss /= static_cast<double>(bsz);
            if (!std::isfinite(loss)) throw TrainingError("cross-entropy loss became non-finite", cfg.learning_rate, epoch);
            g /= static_cast<double>(bsz);
            total += loss * static_cast<double>(bsz);
            cls_grad.zero();
            for (auto& eg : enc_grads) eg.zero();
            const Matrix gin = model.classifier().backward(pass.classifier_trace, g, cls_grad);
            for (std::size_t c = 0; c < mods.size(); ++c)
                if (train_enc[c])
                    model.branch(mods[c]).encoder.backward(pass.encoder_traces[c],
                                                           gin.middleCols(static_cast<Eigen::Index>(c) * fd, fd), enc_grads[c]);
            opt.step(slots);
        }
        result.curve.push_back({epoch, total / static_cast<double>(data.size()), cfg.learning_rate});
    }
    result.model = std::move(model);
    return result;
}

FinetuneResult finetune(MultimodalModel model, const IncompleteDataset& labeled, const FinetuneConfig& cfg,
                        std::uint64_t seed) {
    cfg.validate();
    if (labeled.empty()) throw ValidationError("finetune", "fine-tuning set is empty");
    SupervisedData data = supervised_data(model, labeled, cfg.mask);
    return train_supervised(std::move(model), data, cfg, seed);
}

// ---------------------------------------------------------------------------
// Evaluation

std::vector<int> predict(const MultimodalModel& model, const IncompleteDataset& data, const std::vector<ModalityId>& mask) {
    if (data.empty()) throw ValidationError("test_set", "is empty");
    const Matrix logits = model.logits(data.views, mask);
    std::vector<int> out(static_cast<std::size_t>(logits.rows()));
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        Eigen::Index best = 0;
        for (Eigen::Index k = 1; k < logits.cols(); ++k)
            if (logits(i, k) > logits(i, best)) best = k;
        out[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    return out;
}

EvalResult classification_metrics(std::span<const int> truth, std::span<const int> predicted, int num_classes) {
    if (truth.empty()) throw ValidationError("test_set", "is empty");
    if (truth.size() != predicted.size()) throw ShapeError("truth and predictions differ in length");
    const auto c = static_cast<std::size_t>(num_classes);
    EvalResult r;
    r.confusion.assign(c, std::vector<std::size_t>(c, 0));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] < 0 || truth[i] >= num_classes || predicted[i] < 0 || predicted[i] >= num_classes)
            throw ValidationError("labels", "class index outside [0, " + std::to_string(num_classes) + ")");
        ++r.confusion[static_cast<std::size_t>(truth[i])][static_cast<std::size_t>(predicted[i])];
        if (truth[i] == predicted[i]) ++correct;
    }
    r.accuracy = static_cast<double>(correct) / static_cast<double>(truth.size());
    double f1_sum = 0.0;
    std::size_t counted = 0;
    for (std::size_t k = 0; k < c; ++k) {
        std::size_t tp = r.confusion[k][k], row = 0, col = 0;
        for (std::size_t j = 0; j < c; ++j) {
            row += r.confusion[k][j];
            col += r.confusion[j][k];
        }
        ClassMetrics m;
        m.support = row;
        m.precision = col == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(col);
        m.recall = row == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(row);
        m.f1 = m.precision + m.recall == 0.0 ? 0.0 : 2.0 * m.precision * m.recall / (m.precision + m.recall);
        r.per_class.push_back(m);
        if (row > 0 || col > 0) {
            f1_sum += m.f1;
            ++counted;
        }
    }
    r.macro_f1 = f1_sum / static_cast<double>(counted);
    return r;
}

EvalResult evaluate(const MultimodalModel& model, const IncompleteDataset& test, const std::vector<ModalityId>& mask) {
    if (test.empty()) throw ValidationError("test_set", "is empty");
    const auto pred = predict(model, test, mask);
    return classification_metrics(test.evaluation_labels(), pred, model.spec().num_classes);
}

}  // namespace mmbind
