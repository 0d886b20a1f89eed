#include "mmbind/baselines.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "mmbind/error.hpp"
#include "mmbind/rng.hpp"

namespace mmbind {

namespace {

template <typename E, std::size_t N>
E parse_enum(std::string_view name, const std::array<std::pair<std::string_view, E>, N>& table,
             const std::string& field) {
    for (const auto& [k, v] : table)
        if (k == name) return v;
    std::string known;
    for (const auto& [k, v] : table) known += (known.empty() ? "" : ", ") + std::string(k);
    throw ValidationError(field, "unknown value '" + std::string(name) + "' (expected one of: " + known + ")");
}

template <typename E, std::size_t N>
std::string_view enum_name(E value, const std::array<std::pair<std::string_view, E>, N>& table) {
    for (const auto& [k, v] : table)
        if (v == value) return k;
    return "?";
}

constexpr std::array<std::pair<std::string_view, MethodId>, 9> kMethods{{
    {"lower_bound", MethodId::lower_bound},
    {"unimodal", MethodId::unimodal},
    {"mim", MethodId::mim},
    {"mpm", MethodId::mpm},
    {"cmg", MethodId::cmg},
    {"dcm", MethodId::dcm},
    {"imagebind", MethodId::imagebind},
    {"mmbind", MethodId::mmbind},
    {"upper_bound", MethodId::upper_bound},
}};

constexpr std::array<std::pair<std::string_view, MMBindVariant>, 3> kVariants{{
    {"pairs_only", MMBindVariant::pairs_only},
    {"unweighted", MMBindVariant::unweighted},
    {"full", MMBindVariant::full},
}};

constexpr std::array<std::pair<std::string_view, EmbedderKind>, 3> kEmbedders{{
    {"autoencoder", EmbedderKind::autoencoder},
    {"raw", EmbedderKind::raw},
    {"label", EmbedderKind::label},
}};

}  // namespace

std::string_view to_string(MethodId m) { return enum_name(m, kMethods); }
MethodId method_from_string(std::string_view name) { return parse_enum(name, kMethods, "method"); }

const std::vector<MethodId>& all_methods() {
    static const std::vector<MethodId> methods = [] {
        std::vector<MethodId> out;
        for (const auto& [k, v] : kMethods) out.push_back(v);
        return out;
    }();
    return methods;
}

std::string_view to_string(MMBindVariant v) { return enum_name(v, kVariants); }
MMBindVariant variant_from_string(std::string_view name) { return parse_enum(name, kVariants, "variant"); }

std::string_view to_string(EmbedderKind k) { return enum_name(k, kEmbedders); }
EmbedderKind embedder_from_string(std::string_view name) { return parse_enum(name, kEmbedders, "binding.embedder"); }

std::shared_ptr<const LabelEmbeddingProvider> make_label_provider(const LabelEmbeddingConfig& cfg) {
    if (cfg.kind == "offline") return std::make_shared<OfflineLabelEmbedder>(cfg.dim, cfg.seed);
    if (cfg.kind == "external") return std::make_shared<ExternalLabelEmbedder>(cfg.table);
    throw ValidationError("binding.label.kind", "unknown label embedding provider '" + cfg.kind + "'");
}

bool BindingConfig::label_case() const {
    return std::find(shared.begin(), shared.end(), kLabelModality) != shared.end();
}

// ---------------------------------------------------------------------------
// Data visibility

DataAccess data_access(MethodId method, MMBindVariant) {
    switch (method) {
        case MethodId::lower_bound: return {};
        case MethodId::upper_bound: return {false, true, false};
        case MethodId::mmbind: return {true, false, true};
        default: return {true, false, false};
    }
}

VisibleData::VisibleData(const TrainingInputs& inputs, DataAccess access) : inputs_(&inputs), access_(access) {}

const std::vector<IncompleteDataset>& VisibleData::incomplete() const {
    if (!access_.incomplete) throw VisibilityError("this method may not read the incomplete datasets");
    touched_.incomplete = true;
    return inputs_->datasets;
}

const IncompleteDataset& VisibleData::natural() const {
    if (!access_.natural) throw VisibilityError("this method may not read naturally paired data");
    if (!inputs_->natural) throw ValidationError("natural", "naturally paired data is required but absent");
    touched_.natural = true;
    return *inputs_->natural;
}

void VisibleData::note_binding() const {
    if (!access_.pseudo_pairs) throw VisibilityError("this method may not build pseudo-paired data");
    touched_.pseudo_pairs = true;
}

// ---------------------------------------------------------------------------
// Binding

std::vector<ModalityId> binding_selectors(const BindingConfig& cfg, std::size_t datasets) {
    if (datasets < 2) throw ValidationError("corpus.datasets", "binding needs at least two datasets");
    if (cfg.shared.empty()) throw ValidationError("binding.shared_modality", "must name the shared modality");
    if (cfg.shared.size() == 1) return std::vector<ModalityId>(datasets - 1, cfg.shared.front());
    if (cfg.shared.size() != datasets - 1)
        throw ValidationError("binding.shared_modality", "need one shared modality per adjacent dataset pair");
    return cfg.shared;
}

PseudoPairedDataset bind_datasets(const BindingConfig& cfg, const std::vector<IncompleteDataset>& datasets,
                                  std::uint64_t seed) {
    cfg.scheme.validate();
    const auto selectors = binding_selectors(cfg, datasets.size());
    const bool label = cfg.label_case();
    SharedEmbedder embedder;
    if (label || cfg.embedder == EmbedderKind::label)
        embedder = label_embedder(make_label_provider(cfg.label), cfg.label.meta_keys);
    else if (cfg.embedder == EmbedderKind::raw)
        embedder = raw_embedder();
    else
        embedder = autoencoder_embedder(cfg.encoder, derive_seed(seed, "binding-encoder"));
    PairingOptions opts{cfg.tie_break, derive_seed(seed, "binding-ties")};

    if (cfg.scheme.kind == PairingScheme::Kind::top1) return bind_many(datasets, selectors, embedder, opts);
    if (datasets.size() != 2)
        throw ValidationError("binding.scheme", "threshold and top-k pairing support exactly two datasets");
    const auto a = PseudoPairedDataset::from_incomplete(datasets[0], 0);
    const auto b = PseudoPairedDataset::from_incomplete(datasets[1], 1);
    const ModalityId& shared = selectors.front();
    if (!a.has(shared) || !b.has(shared))
        throw ValidationError("binding.shared_modality", "modality '" + shared + "' is not shared by '" +
                                                             datasets[0].name + "' and '" + datasets[1].name + "'");
    const auto [left, right] = embedder(shared, a, b);
    return pair_threshold(similarity_matrix(left, right), cfg.scheme, datasets[0], datasets[1], opts);
}

// ---------------------------------------------------------------------------
// Trainers

std::vector<ModalityDecl> method_modalities(const MethodConfig& cfg, const TrainingInputs& inputs) {
    std::vector<ModalityDecl> out;
    auto add = [&](const IncompleteDataset& ds) {
        for (const auto& d : ds.modalities) {
            auto it = std::find_if(out.begin(), out.end(), [&](const ModalityDecl& x) { return x.name == d.name; });
            if (it == out.end()) out.push_back(d);
            else if (it->dim != d.dim) throw ShapeError("modality '" + d.name + "' has inconsistent widths across datasets");
        }
    };
    for (const auto& ds : inputs.datasets) add(ds);
    add(inputs.finetune);
    if (inputs.natural) add(*inputs.natural);
    if (cfg.binding.label_case()) out.push_back({kLabelModality, make_label_provider(cfg.binding.label)->dim()});
    return out;
}

namespace {

struct Context {
    const MethodConfig& cfg;
    const VisibleData& data;
    std::uint64_t seed;
    LabelViews labels;
    MethodOutput& out;
    const PseudoPairedDataset* given_pairs = nullptr;
};

EncoderSpec auxiliary_spec(const MethodConfig& cfg, const ModalityId& m) {
    EncoderSpec s = cfg.auxiliary;
    s.modality = m;
    s.hidden_dims = cfg.model.encoder_hidden;
    s.latent_dim = cfg.model.feature_dim;
    return s;
}

ModalityId single_shared(const MethodConfig& cfg, std::size_t datasets, const char* method) {
    const auto sel = binding_selectors(cfg.binding, datasets);
    if (std::adjacent_find(sel.begin(), sel.end(), std::not_equal_to<>()) != sel.end())
        throw ValidationError("binding.shared_modality", std::string(method) + " needs a single shared modality");
    return sel.front();
}

/// Stacked views of modality m over every incomplete dataset holding it.
Matrix pooled_views(const Context& ctx, const ModalityId& m) {
    std::vector<Matrix> parts;
    for (const auto& ds : ctx.data.incomplete()) {
        if (m == kLabelModality) {
            if (ds.labeled) parts.push_back(label_view(ds.class_names, ds.labels, ds.meta, ctx.labels));
        } else if (ds.has(m)) {
            parts.push_back(ds.view(m));
        }
    }
    if (parts.empty()) throw ValidationError("datasets", "no dataset provides modality '" + m + "'");
    return stack_rows(parts);
}

void load_autoencoder_into(Context& ctx, MultimodalModel& model, const ModalityId& m) {
    const Autoencoder ae = train_autoencoder(pooled_views(ctx, m), auxiliary_spec(ctx.cfg, m),
                                             derive_seed(ctx.seed, "auxiliary-autoencoder:" + m));
    model.branch(m).encoder = ae.encoder.net();
}

MultimodalModel contrastive(Context& ctx, MultimodalModel model, const AggregatedTrainingSet& set,
                            ContrastiveConfig cc) {
    PretrainResult r = pretrain(set, std::move(model), cc, derive_seed(ctx.seed, "pretrain"));
    ctx.out.pretrain_curve = std::move(r.curve);
    return std::move(r.model);
}

FinetuneConfig supervised_pretrain_config(const MethodConfig& cfg) {
    FinetuneConfig f = cfg.finetune;
    f.epochs = cfg.pretrain.epochs;
    f.learning_rate = cfg.pretrain.learning_rate;
    f.batch_size = cfg.pretrain.batch_size;
    f.mode = FinetuneMode::full;
    return f;
}

MultimodalModel train_unimodal(Context& ctx, MultimodalModel model) {
    if (ctx.cfg.binding.label_case()) {
        for (const auto& m : model.classifier_modalities()) {
            std::vector<IncompleteDataset> parts;
            for (const auto& ds : ctx.data.incomplete())
                if (ds.has(m) && ds.labeled) parts.push_back(ds.project({m, kLabelModality}));
            if (parts.empty()) continue;
            const SupervisedData sd = supervised_data(model, parts);
            model = train_supervised(std::move(model), sd, supervised_pretrain_config(ctx.cfg),
                                     derive_seed(ctx.seed, "unimodal-supervised:" + m)).model;
        }
        model.reset_classifier(derive_seed(ctx.seed, "classifier-reset"));
        return model;
    }
    for (const auto& m : model.classifier_modalities()) {
        bool present = false;
        for (const auto& ds : ctx.data.incomplete()) present = present || ds.has(m);
        if (present) load_autoencoder_into(ctx, model, m);
    }
    return model;
}

MultimodalModel train_mim(Context& ctx, MultimodalModel model) {
    const auto& datasets = ctx.data.incomplete();
    if (ctx.cfg.binding.label_case()) {
        const SupervisedData sd = supervised_data(model, datasets);
        FinetuneResult r = train_supervised(std::move(model), sd, supervised_pretrain_config(ctx.cfg),
                                            derive_seed(ctx.seed, "mim-supervised"));
        ctx.out.pretrain_curve = std::move(r.curve);
        return std::move(r.model);
    }
    const auto set = build_training_set(model.spec().modalities, datasets, nullptr, {}, ctx.labels);
    ContrastiveConfig cc = ctx.cfg.pretrain;
    cc.mask_dummy_pairs = false;
    return contrastive(ctx, std::move(model), set, cc);
}

Mlp train_translator(const Matrix& source, const Matrix& target, const MethodConfig& cfg, std::uint64_t seed) {
    Rng init(derive_seed(seed, "init"));
    std::vector<int> dims{static_cast<int>(source.cols())};
    dims.insert(dims.end(), cfg.model.encoder_hidden.begin(), cfg.model.encoder_hidden.end());
    dims.push_back(static_cast<int>(target.cols()));
    Mlp net(dims, Activation::relu, Activation::linear, init);
    MlpGrad grad(net);
    std::vector<ParamSlot> slots;
    collect_slots(net, grad, slots);
    OptimizerConfig oc;
    oc.kind = OptimizerKind::adam;
    oc.learning_rate = cfg.auxiliary.learning_rate;
    Optimizer opt(oc);
    Rng rng(derive_seed(seed, "batches"));
    const auto n = static_cast<std::size_t>(source.rows());
    const auto batch = static_cast<std::size_t>(std::max(1, cfg.auxiliary.batch_size));
    for (int epoch = 0; epoch < cfg.auxiliary.epochs; ++epoch) {
        const auto order = rng.permutation(n);
        for (std::size_t start = 0; start < n; start += batch) {
            const std::span<const std::size_t> idx(order.data() + start, std::min(batch, n - start));
            const Matrix x = take_rows(source, idx);
            MlpTrace trace;
            const Matrix diff = net.forward(x, trace) - take_rows(target, idx);
            const double loss = diff.squaredNorm() / static_cast<double>(idx.size());
            if (!std::isfinite(loss)) throw TrainingError("translator loss became non-finite", oc.learning_rate, epoch);
            grad.zero();
            net.backward(trace, 2.0 * diff / static_cast<double>(idx.size()), grad);
            opt.step(slots);
        }
    }
    return net;
}

MultimodalModel train_cmg(Context& ctx, MultimodalModel model) {
    if (ctx.cfg.binding.label_case())
        throw ValidationError("method", "cmg generates sensor views and needs a sensor shared modality");
    const auto& datasets = ctx.data.incomplete();
    const ModalityId shared = single_shared(ctx.cfg, datasets.size(), "cmg");
    for (const auto& ds : datasets)
        if (!ds.has(shared)) throw ValidationError("binding.shared_modality", "dataset '" + ds.name + "' lacks '" + shared + "'");

    std::map<ModalityId, Mlp> translators;
    for (const auto& m : model.classifier_modalities()) {
        if (m == shared) continue;
        std::vector<Matrix> src, dst;
        for (const auto& ds : datasets)
            if (ds.has(m)) {
                src.push_back(ds.view(shared));
                dst.push_back(ds.view(m));
            }
        if (src.empty()) continue;
        translators[m] = train_translator(stack_rows(src), stack_rows(dst), ctx.cfg,
                                          derive_seed(ctx.seed, "translator:" + m));
    }
    std::vector<IncompleteDataset> completed;
    for (IncompleteDataset ds : datasets) {
        for (const auto& [m, net] : translators) {
            if (ds.has(m)) continue;
            ds.views[m] = net.forward(ds.view(shared));
            ds.modalities.push_back({m, net.output_dim()});
        }
        completed.push_back(std::move(ds));
    }
    const auto set = build_training_set(model.spec().modalities, completed, nullptr, {}, ctx.labels);
    return contrastive(ctx, std::move(model), set, ctx.cfg.pretrain);
}

MultimodalModel train_dcm(Context& ctx, MultimodalModel model, std::set<ModalityId> frozen = {}) {
    const auto set = build_training_set(model.spec().modalities, ctx.data.incomplete(), nullptr, {}, ctx.labels);
    ContrastiveConfig cc = ctx.cfg.pretrain;
    cc.mask_dummy_pairs = true;
    cc.frozen_encoders.insert(frozen.begin(), frozen.end());
    return contrastive(ctx, std::move(model), set, cc);
}

MultimodalModel train_imagebind(Context& ctx, MultimodalModel model) {
    const ModalityId shared = single_shared(ctx.cfg, ctx.data.incomplete().size(), "imagebind");
    load_autoencoder_into(ctx, model, shared);
    return train_dcm(ctx, std::move(model), {shared});
}

MultimodalModel train_upper_bound(Context& ctx, MultimodalModel model) {
    const std::array<IncompleteDataset, 1> natural{ctx.data.natural()};
    const auto set = build_training_set(model.spec().modalities, natural, nullptr, {}, ctx.labels);
    return contrastive(ctx, std::move(model), set, ctx.cfg.pretrain);
}

MultimodalModel train_mmbind(Context& ctx, MultimodalModel model) {
    const auto& datasets = ctx.data.incomplete();
    ctx.data.note_binding();
    PseudoPairedDataset pairs = ctx.given_pairs ? *ctx.given_pairs
                                                : bind_datasets(ctx.cfg.binding, datasets, derive_seed(ctx.seed, "binding"));
    if (pairs.empty()) throw ValidationError("binding", "pairing produced no pseudo pairs");
    const std::vector<double> weights = ctx.cfg.variant == MMBindVariant::full
                                            ? normalize_weights(pairs.similarity, ctx.cfg.pretrain.weight_norm)
                                            : std::vector<double>(pairs.size(), 1.0);
    const std::span<const IncompleteDataset> incomplete =
        ctx.cfg.variant == MMBindVariant::pairs_only ? std::span<const IncompleteDataset>() : std::span(datasets);
    const auto set = build_training_set(model.spec().modalities, incomplete, &pairs, weights, ctx.labels);
    ContrastiveConfig cc = ctx.cfg.pretrain;
    model = contrastive(ctx, std::move(model), set, cc);
    ctx.out.pairs = std::move(pairs);
    return model;
}

}  // namespace

MethodOutput pretrain_method(const MethodConfig& cfg, const TrainingInputs& inputs, std::uint64_t seed,
                             const PseudoPairedDataset* pairs) {
    const VisibleData data(inputs, data_access(cfg.method, cfg.variant));
    ModelSpec spec = cfg.model;
    spec.modalities = method_modalities(cfg, inputs);
    spec.num_classes = inputs.finetune.num_classes;
    spec.prompt = cfg.method == MethodId::mpm;
    MethodOutput out;
    Context ctx{cfg, data, seed, {}, out, pairs};
    if (cfg.binding.label_case()) ctx.labels = {make_label_provider(cfg.binding.label), cfg.binding.label.meta_keys};
    MultimodalModel model(spec, derive_seed(seed, "model-init"));
    switch (cfg.method) {
        case MethodId::lower_bound: break;
        case MethodId::unimodal: model = train_unimodal(ctx, std::move(model)); break;
        case MethodId::mim:
        case MethodId::mpm: model = train_mim(ctx, std::move(model)); break;
        case MethodId::cmg: model = train_cmg(ctx, std::move(model)); break;
        case MethodId::dcm: model = train_dcm(ctx, std::move(model)); break;
        case MethodId::imagebind: model = train_imagebind(ctx, std::move(model)); break;
        case MethodId::upper_bound: model = train_upper_bound(ctx, std::move(model)); break;
        case MethodId::mmbind: model = train_mmbind(ctx, std::move(model)); break;
    }
    out.model = std::move(model);
    out.touched = data.touched();
    return out;
}

MethodOutput train_method(const MethodConfig& cfg, const TrainingInputs& inputs, std::uint64_t seed) {
    MethodOutput out = pretrain_method(cfg, inputs, seed);
    FinetuneResult r = finetune(std::move(out.model), inputs.finetune, cfg.finetune, derive_seed(seed, "finetune"));
    out.model = std::move(r.model);
    out.finetune_curve = std::move(r.curve);
    return out;
}

}  // namespace mmbind
