// Acceptance gate: runs every criterion at its stated tolerance and prints
// one PASS/FAIL line per criterion. Exit status is nonzero if any fails.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "mmbind/baselines.hpp"
#include "mmbind/experiment.hpp"
#include "mmbind/io.hpp"
#include "mmbind/rng.hpp"
#include "oracles.hpp"

using namespace mmbind;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Dataset of n rows with random two-wide views; only sizes and
/// provenance matter for matching checks.
IncompleteDataset stub_dataset(const std::string& name, const std::vector<ModalityId>& mods, std::size_t n,
                               Rng& rng) {
    IncompleteDataset ds;
    ds.name = name;
    ds.num_classes = 1;
    ds.class_names = {"c0"};
    for (const auto& m : mods) {
        ds.modalities.push_back({m, 2});
        Matrix v(static_cast<Eigen::Index>(n), 2);
        for (Eigen::Index i = 0; i < v.rows(); ++i) v.row(i) << rng.normal(), rng.normal();
        ds.views[m] = v;
    }
    for (std::size_t i = 0; i < n; ++i) ds.ids.push_back(static_cast<std::int64_t>(i));
    ds.ground_truth = std::vector<int>(n, 0);
    return ds;
}

// ---------------------------------------------------------------------------

Outcome pairing_oracle() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(derive_seed(1, "acceptance-pairing"));
    std::size_t mismatches = 0, tied = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t na = trial == 0 ? 200 : 1 + rng.index(200);
        const std::size_t nb = trial == 0 ? 300 : 1 + rng.index(300);
        SimilarityMatrix sim;
        sim.values = Matrix(static_cast<Eigen::Index>(na), static_cast<Eigen::Index>(nb));
        // Every third matrix is coarsely quantized so rows and columns hold ties.
        const bool coarse = trial % 3 == 1;
        for (Eigen::Index j = 0; j < sim.values.rows(); ++j)
            for (Eigen::Index k = 0; k < sim.values.cols(); ++k) {
                const double v = rng.uniform(-1.0, 1.0);
                sim.values(j, k) = coarse ? std::round(v * 4.0) / 4.0 : v;
            }
        if (coarse) ++tied;
        const auto a = stub_dataset("A", {"m1", "ms"}, na, rng);
        const auto b = stub_dataset("B", {"m2", "ms"}, nb, rng);
        const auto pairs = pair_argmax(sim, a, b);
        const auto rows = oracle::row_argmax(sim.values);
        const auto cols = oracle::col_argmax(sim.values);
        if (pairs.size() != na + nb) {
            ++mismatches;
            continue;
        }
        for (std::size_t j = 0; j < na; ++j) {
            const auto& o = pairs.origins[j];
            if (!(o.front() == Origin{0, static_cast<std::int64_t>(j)}) ||
                !(o.back() == Origin{1, static_cast<std::int64_t>(rows[j])}))
                ++mismatches;
        }
        for (std::size_t k = 0; k < nb; ++k) {
            const auto& o = pairs.origins[na + k];
            if (!(o.front() == Origin{1, static_cast<std::int64_t>(k)}) ||
                !(o.back() == Origin{0, static_cast<std::int64_t>(cols[k])}))
                ++mismatches;
        }
    }
    const double dt = seconds_since(t0);
    return {mismatches == 0 && dt < 30.0,
            fmt("100 matrices up to 200x300 (%zu with ties), %zu mismatched matches, %.1f s", tied, mismatches, dt)};
}

Outcome loss_oracle() {
    Rng rng(derive_seed(2, "acceptance-loss"));
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const auto b = static_cast<Eigen::Index>(2 + rng.index(3));
        const std::size_t m = 2 + rng.index(2);
        const auto f = static_cast<Eigen::Index>(1 + rng.index(4));
        std::vector<Matrix> z;
        for (std::size_t p = 0; p < m; ++p) {
            Matrix x(b, f);
            for (Eigen::Index i = 0; i < b; ++i)
                for (Eigen::Index c = 0; c < f; ++c) x(i, c) = rng.normal();
            z.push_back(normalize_rows(x));
        }
        Matrix mask(b, static_cast<Eigen::Index>(m));
        for (Eigen::Index i = 0; i < b; ++i)
            for (Eigen::Index p = 0; p < static_cast<Eigen::Index>(m); ++p) mask(i, p) = rng.uniform() < 0.75 ? 1.0 : 0.0;
        std::vector<double> w(static_cast<std::size_t>(b));
        for (double& x : w) x = rng.uniform();
        const double tau = rng.uniform(0.05, 1.0);
        worst = std::max(worst, std::abs(weighted_contrastive_loss(z, w, mask, tau) - oracle::weighted_loss(z, w, mask, tau)));
    }
    return {worst <= 1e-10, fmt("50 instances (B<=4, M<=3, F<=4), max |diff| %.2e (tolerance 1e-10)", worst)};
}

double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
    double diff = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    const double scale = std::max(std::sqrt(std::max(na, nb)), 1e-12);
    return std::sqrt(diff) / scale;
}

std::vector<double> flatten_grad(const MlpGrad& g) {
    std::vector<double> out;
    for (const auto& l : g.layers) {
        out.insert(out.end(), l.weight.data(), l.weight.data() + l.weight.size());
        out.insert(out.end(), l.bias.data(), l.bias.data() + l.bias.size());
    }
    return out;
}

Outcome gradient_check() {
    Rng rng(derive_seed(3, "acceptance-gradients"));
    const double h = 1e-6;
    double worst_recon = 0.0, worst_contrastive = 0.0;

    // Reconstruction loss: gradients w.r.t. every encoder and decoder parameter.
    for (int trial = 0; trial < 20; ++trial) {
        const int in = 2 + static_cast<int>(rng.index(5));
        EncoderSpec spec;
        spec.latent_dim = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(in)));
        spec.hidden_dims = rng.uniform() < 0.5 ? std::vector<int>{} : std::vector<int>{2 + static_cast<int>(rng.index(5))};
        spec.activation = trial % 2 == 0 ? Activation::tanh : Activation::relu;
        const Autoencoder ae = make_autoencoder(spec, in, derive_seed(trial, "ae"));
        Matrix x(static_cast<Eigen::Index>(3 + rng.index(6)), in);
        for (Eigen::Index i = 0; i < x.rows(); ++i)
            for (Eigen::Index c = 0; c < in; ++c) x(i, c) = rng.normal();
        const Mlp enc = ae.encoder.net();
        const Mlp dec = ae.decoder;
        MlpGrad ge(enc), gd(dec);
        ge.zero();
        gd.zero();
        reconstruction_loss(enc, dec, x, &ge, &gd);
        std::vector<double> analytic = flatten_grad(ge);
        const auto gdf = flatten_grad(gd);
        analytic.insert(analytic.end(), gdf.begin(), gdf.end());
        std::vector<double> numeric;
        for (int side = 0; side < 2; ++side) {
            const Mlp& net = side == 0 ? enc : dec;
            const auto theta = net.flatten();
            for (std::size_t k = 0; k < theta.size(); ++k) {
                auto tp = theta, tm = theta;
                tp[k] += h;
                tm[k] -= h;
                Mlp a = net, b = net;
                a.assign(tp);
                b.assign(tm);
                const double lp = side == 0 ? reconstruction_loss(a, dec, x) : reconstruction_loss(enc, a, x);
                const double lm = side == 0 ? reconstruction_loss(b, dec, x) : reconstruction_loss(enc, b, x);
                numeric.push_back((lp - lm) / (2 * h));
            }
        }
        worst_recon = std::max(worst_recon, relative_error(analytic, numeric));
    }

    // Weighted contrastive loss: gradients w.r.t. the unnormalized projections.
    for (int trial = 0; trial < 20; ++trial) {
        const auto b = static_cast<Eigen::Index>(2 + rng.index(5));
        const std::size_t m = 2 + rng.index(2);
        const auto f = static_cast<Eigen::Index>(2 + rng.index(4));
        std::vector<Matrix> hs;
        for (std::size_t p = 0; p < m; ++p) {
            Matrix x(b, f);
            for (Eigen::Index i = 0; i < b; ++i)
                for (Eigen::Index c = 0; c < f; ++c) x(i, c) = rng.normal();
            hs.push_back(x);
        }
        Matrix mask(b, static_cast<Eigen::Index>(m));
        for (Eigen::Index i = 0; i < b; ++i)
            for (Eigen::Index p = 0; p < static_cast<Eigen::Index>(m); ++p) mask(i, p) = rng.uniform() < 0.8 ? 1.0 : 0.0;
        std::vector<double> w(static_cast<std::size_t>(b));
        for (double& x : w) x = rng.uniform();
        const double tau = rng.uniform(0.1, 1.0);
        auto loss = [&](const std::vector<Matrix>& hv, std::vector<Matrix>* gz) {
            std::vector<Matrix> z;
            for (const auto& x : hv) z.push_back(normalize_rows(x));
            return weighted_contrastive_loss(z, w, mask, tau, gz);
        };
        std::vector<Matrix> gz;
        loss(hs, &gz);
        std::vector<double> analytic, numeric;
        for (std::size_t p = 0; p < m; ++p) {
            const Matrix gh = normalize_rows_backward(hs[p], gz[p]);
            for (Eigen::Index i = 0; i < b; ++i)
                for (Eigen::Index c = 0; c < f; ++c) {
                    analytic.push_back(gh(i, c));
                    auto up = hs, down = hs;
                    up[p](i, c) += h;
                    down[p](i, c) -= h;
                    numeric.push_back((loss(up, nullptr) - loss(down, nullptr)) / (2 * h));
                }
        }
        worst_contrastive = std::max(worst_contrastive, relative_error(analytic, numeric));
    }
    return {worst_recon <= 1e-4 && worst_contrastive <= 1e-4,
            fmt("20+20 configurations, max relative error reconstruction %.2e, contrastive %.2e (tolerance 1e-4)",
                worst_recon, worst_contrastive)};
}

Outcome reduction_identity() {
    Rng rng(derive_seed(4, "acceptance-reduction"));
    double worst_nce = 0.0, worst_lin = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const auto b = static_cast<Eigen::Index>(2 + rng.index(15));
        const auto f = static_cast<Eigen::Index>(1 + rng.index(8));
        std::vector<Matrix> z;
        for (int p = 0; p < 2; ++p) {
            Matrix x(b, f);
            for (Eigen::Index i = 0; i < b; ++i)
                for (Eigen::Index c = 0; c < f; ++c) x(i, c) = rng.normal();
            z.push_back(normalize_rows(x));
        }
        const double tau = rng.uniform(0.05, 1.0);
        const std::vector<double> ones(static_cast<std::size_t>(b), 1.0);
        const double l = weighted_contrastive_loss(z, ones, Matrix::Ones(b, 2), tau);
        worst_nce = std::max(worst_nce, std::abs(l - oracle::symmetric_infonce(z[0], z[1], tau)));

        Matrix mask(b, 2);
        for (Eigen::Index i = 0; i < b; ++i)
            for (int p = 0; p < 2; ++p) mask(i, p) = rng.uniform() < 0.8 ? 1.0 : 0.0;
        std::vector<double> w(static_cast<std::size_t>(b));
        for (double& x : w) x = rng.uniform();
        const double base = weighted_contrastive_loss(z, w, mask, tau);
        for (double lambda : {0.0, 0.25, 0.5, 2.0, 3.7}) {
            std::vector<double> scaled(w);
            for (double& x : scaled) x *= lambda;
            worst_lin = std::max(worst_lin, std::abs(weighted_contrastive_loss(z, scaled, mask, tau) - lambda * base));
        }
    }
    return {worst_nce <= 1e-10 && worst_lin <= 1e-12,
            fmt("symmetric InfoNCE max |diff| %.2e (tolerance 1e-10), weight linearity max |diff| %.2e (tolerance 1e-12)",
                worst_nce, worst_lin)};
}

Outcome size_invariant() {
    Rng rng(derive_seed(5, "acceptance-sizes"));
    std::size_t violations = 0;
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t na = 1 + rng.index(120), nb = 1 + rng.index(120);
        const auto a = stub_dataset("A", {"m1", "ms"}, na, rng);
        const auto b = stub_dataset("B", {"m2", "ms"}, nb, rng);
        const auto pairs = bind_many({a, b}, {"ms"}, raw_embedder());
        const std::vector<ModalityDecl> mods{{"m1", 2}, {"m2", 2}, {"ms", 2}};
        const auto set = build_training_set(mods, std::vector<IncompleteDataset>{a, b}, &pairs,
                                            normalize_weights(pairs.similarity));
        if (pairs.size() != na + nb || set.size() != 2 * (na + nb)) ++violations;
    }
    return {violations == 0, fmt("50 random size pairs in [1, 120], %zu violations", violations)};
}

// ---------------------------------------------------------------------------

struct Paths {
    fs::path configs;
    fs::path out;
};

std::vector<std::vector<int>> truth_of(const Corpus& c) {
    std::vector<std::vector<int>> gt;
    for (const auto& d : c.datasets) gt.push_back(*d.ground_truth);
    return gt;
}

Outcome binding_contrast(const Paths& paths) {
    const auto t0 = std::chrono::steady_clock::now();
    const ExperimentConfig cfg = load_experiment(paths.configs / "benchmark.yaml");
    double good = 0.0, noise = 0.0, random = 0.0;
    std::string per_seed;
    for (std::uint64_t seed : cfg.seeds) {
        const CorpusSpec spec = corpus_for_seed(cfg, seed);
        const Corpus c = generate_corpus(spec);
        const double g = pairing_accuracy(bind_datasets(cfg.binding, c.datasets, derive_seed(seed, "binding")), truth_of(c)).accuracy;
        CorpusSpec noisy = spec;
        noisy.modality_snr["ms"] = 0.0;
        const Corpus n = generate_corpus(noisy);
        const double z = pairing_accuracy(bind_datasets(cfg.binding, n.datasets, derive_seed(seed, "binding")), truth_of(n)).accuracy;
        Rng rng(derive_seed(seed, "random-similarity"));
        SimilarityMatrix sim;
        sim.values = Matrix(static_cast<Eigen::Index>(c.datasets[0].size()), static_cast<Eigen::Index>(c.datasets[1].size()));
        for (Eigen::Index j = 0; j < sim.values.rows(); ++j)
            for (Eigen::Index k = 0; k < sim.values.cols(); ++k) sim.values(j, k) = rng.uniform(-1.0, 1.0);
        const double r = pairing_accuracy(pair_argmax(sim, c.datasets[0], c.datasets[1]), truth_of(c)).accuracy;
        good += g;
        noise += z;
        random += r;
        per_seed += fmt(" %.3f/%.3f/%.3f", g, z, r);
    }
    const double k = static_cast<double>(cfg.seeds.size());
    good /= k;
    noise /= k;
    random /= k;
    const double dt = seconds_since(t0);
    const bool pass = good >= 0.80 && noise >= 0.10 && noise <= 0.40 && std::abs(random - 0.20) <= 0.03 && dt < 120.0;
    return {pass, fmt("mean over %zu seeds: discriminative %.3f (>= 0.80), noise %.3f (in [0.10, 0.40]), random %.3f "
                      "(0.20 +- 0.03), %.1f s; per seed%s",
                      cfg.seeds.size(), good, noise, random, dt, per_seed.c_str())};
}

/// Runs a bundled config into the acceptance output directory and returns
/// mean accuracy per (method, mask).
std::map<std::pair<std::string, std::string>, double> run_config(const Paths& paths, const std::string& name,
                                                                 double* seconds) {
    const auto t0 = std::chrono::steady_clock::now();
    const ExperimentConfig cfg = load_experiment(paths.configs / (name + ".yaml"));
    RunOptions opts;
    opts.out_root = paths.out;
    opts.force = true;
    const RunSummary s = run_experiment(cfg, opts);
    std::map<std::pair<std::string, std::string>, double> out;
    for (const auto& a : aggregate(s.rows)) out[{a.method, a.mask}] = a.accuracy_mean;
    if (seconds) *seconds = seconds_since(t0);
    return out;
}

Outcome comparative_ordering(const Paths& paths) {
    double dt = 0.0;
    const auto acc = run_config(paths, "benchmark", &dt);
    const std::string full = "m1+m2+ms";
    auto mean = [&](const std::string& m) { return acc.at({m, full}); };
    const double lb = mean("lower_bound"), mm = mean("mmbind"), mim = mean("mim"), dcm = mean("dcm"),
                 ub = mean("upper_bound");
    const bool pass = lb + 0.10 <= mm && mm >= mim && mm >= dcm && mm >= ub - 0.03 && dt < 600.0;
    std::string others;
    for (const auto& [key, v] : acc) others += fmt(" %s=%.1f", key.first.c_str(), 100 * v);
    return {pass, fmt("5 seeds: lower_bound %.1f, mmbind %.1f, mim %.1f, dcm %.1f, upper_bound %.1f, %.0f s; all:%s",
                      100 * lb, 100 * mm, 100 * mim, 100 * dcm, 100 * ub, dt, others.c_str())};
}

Outcome ablation(const Paths& paths) {
    double dt = 0.0;
    const auto acc = run_config(paths, "ablation", &dt);
    const std::string full = "m1+m2+ms";
    const double lb = acc.at({"lower_bound", full}), c1 = acc.at({"c1", full}), c12 = acc.at({"c1_c2", full}),
                 c123 = acc.at({"c1_c2_c3", full});
    const double tol = 0.01;
    const bool pass = c1 <= c12 + tol && c12 <= c123 + tol && c123 - lb >= 0.10;
    return {pass, fmt("5 seeds: lower_bound %.1f, C1 %.1f, C1+C2 %.1f, C1+C2+C3 %.1f (drops allowed up to 1 pt), %.0f s",
                      100 * lb, 100 * c1, 100 * c12, 100 * c123, dt)};
}

Outcome threshold_tradeoff(const Paths& paths) {
    const ExperimentConfig cfg = load_experiment(paths.configs / "benchmark.yaml");
    const std::vector<double> thetas{0.5, 0.6, 0.7, 0.8};
    bool pass = true;
    std::string detail = "theta";
    for (double t : thetas) detail += fmt(" %.1f", t);
    detail += ";";
    for (std::uint64_t seed : cfg.seeds) {
        const Corpus c = generate_corpus(corpus_for_seed(cfg, seed));
        double last_acc = -1.0;
        std::size_t last_count = std::numeric_limits<std::size_t>::max();
        detail += fmt(" seed %llu:", static_cast<unsigned long long>(seed));
        for (double t : thetas) {
            BindingConfig b = cfg.binding;
            b.scheme = PairingScheme::threshold(t);
            const auto pairs = bind_datasets(b, c.datasets, derive_seed(seed, "binding"));
            const double acc = pairs.empty() ? 0.0 : pairing_accuracy(pairs, truth_of(c)).accuracy;
            pass = pass && !pairs.empty() && acc > last_acc && pairs.size() < last_count;
            last_acc = acc;
            last_count = pairs.size();
            detail += fmt(" %zu@%.3f", pairs.size(), acc);
        }
    }
    return {pass, "pairs@accuracy per " + detail};
}

Outcome deployment(const Paths& paths) {
    double dt = 0.0;
    const auto acc = run_config(paths, "deployment", &dt);
    bool pass = true;
    std::string detail;
    for (const std::string mask : {"m1+m2+ms", "m1", "m2", "ms"}) {
        const double gain = acc.at({"mmbind", mask}) - acc.at({"lower_bound", mask});
        pass = pass && gain >= 0.05;
        detail += fmt(" %s %+.1f", mask.c_str(), 100 * gain);
    }
    std::string seen;
    for (const std::string mask : {"m1+m2", "m1+ms", "m2+ms"})
        seen += fmt(" %s %+.1f", mask.c_str(), 100 * (acc.at({"mmbind", mask}) - acc.at({"lower_bound", mask})));
    return {pass, fmt("mmbind - lower_bound (pts, >= 5 required):%s; other masks:%s; %.0f s", detail.c_str(), seen.c_str(), dt)};
}

// ---------------------------------------------------------------------------

std::string file_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

/// Relative path -> contents for every regular file below `dir`.
std::map<std::string, std::string> tree(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = file_bytes(e.path());
    return out;
}

Outcome determinism(const Paths& paths) {
    const ExperimentConfig cfg = load_experiment(paths.configs / "benchmark.yaml");
    const std::uint64_t seed = cfg.seeds.front();
    std::vector<std::string> failed;
    auto expect = [&](bool ok, const std::string& stage) {
        if (!ok) failed.push_back(stage);
    };
    const fs::path scratch = paths.out / "determinism";
    fs::remove_all(scratch);

    const CorpusSpec spec = corpus_for_seed(cfg, seed);
    const Corpus c1 = generate_corpus(spec), c2 = generate_corpus(spec);
    expect(c1.datasets == c2.datasets && c1.finetune == c2.finetune && c1.test == c2.test && c1.natural == c2.natural,
           "generate");
    save_bundle(scratch / "corpus1", c1);
    save_bundle(scratch / "corpus2", c2);
    expect(tree(scratch / "corpus1") == tree(scratch / "corpus2"), "generate (files)");

    EncoderSpec es = cfg.binding.encoder;
    es.modality = "ms";
    const std::array<Matrix, 2> parts{c1.datasets[0].view("ms"), c1.datasets[1].view("ms")};
    const Matrix x = stack_rows(parts);
    const Autoencoder ae1 = train_autoencoder(x, es, seed), ae2 = train_autoencoder(x, es, seed);
    expect(ae1.encoder.net() == ae2.encoder.net() && ae1.decoder == ae2.decoder && ae1.loss_curve == ae2.loss_curve,
           "train-encoder");

    const auto p1 = bind_datasets(cfg.binding, c1.datasets, seed), p2 = bind_datasets(cfg.binding, c1.datasets, seed);
    expect(p1.views == p2.views && p1.similarity == p2.similarity && p1.origins == p2.origins, "bind");

    const TrainingInputs inputs{c1.datasets, c1.finetune, c1.natural};
    for (const auto& entry : cfg.methods) {
        const MethodConfig mc = method_config(cfg, entry);
        const auto a = pretrain_method(mc, inputs, seed), b = pretrain_method(mc, inputs, seed);
        expect(a.model == b.model, "pretrain " + entry.name);
        if (entry.method != MethodId::mmbind) continue;
        const auto fa = finetune(a.model, c1.finetune, mc.finetune, seed), fb = finetune(b.model, c1.finetune, mc.finetune, seed);
        expect(fa.model == fb.model, "finetune");
        save_model(scratch / "model1", fa.model);
        save_model(scratch / "model2", fb.model);
        expect(tree(scratch / "model1") == tree(scratch / "model2"), "finetune (files)");
        const auto ea = evaluate(fa.model, c1.test), eb = evaluate(fb.model, c1.test);
        expect(ea.accuracy == eb.accuracy && ea.confusion == eb.confusion && predict(fa.model, c1.test) == predict(fb.model, c1.test),
               "evaluate");
    }

    ExperimentConfig small = cfg;
    small.id = "determinism_run";
    small.seeds = {seed};
    small.methods = {{"lower_bound", MethodId::lower_bound, MMBindVariant::full}, {"mmbind", MethodId::mmbind, MMBindVariant::full}};
    RunOptions opts;
    opts.force = true;
    opts.out_root = scratch / "run1";
    const auto r1 = run_experiment(small, opts);
    opts.out_root = scratch / "run2";
    const auto r2 = run_experiment(small, opts);
    auto strip = [](std::vector<ResultRow> rows) {
        for (auto& r : rows) r.wall_time_s = 0.0;
        return rows;
    };
    expect(strip(r1.rows) == strip(r2.rows), "run (results)");
    for (const char* f : {"pairing_confusion.json", "loss_curves.jsonl", "config.resolved.yaml"})
        expect(file_bytes(r1.dir / f) == file_bytes(r2.dir / f), std::string("run (") + f + ")");

    std::string detail = "generate, train-encoder, bind, pretrain (all methods), finetune, evaluate and run compared bitwise";
    if (!failed.empty()) {
        detail += "; differing:";
        for (const auto& f : failed) detail += " " + f;
    }
    return {failed.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance checks"};
    Paths paths;
    paths.configs = fs::path(MMBIND_SOURCE_DIR) / "configs";
    paths.out = "acceptance_results";
    std::vector<int> only;
    app.add_option("--configs", paths.configs, "Directory of bundled experiment configs");
    app.add_option("--out", paths.out, "Directory for experiment outputs");
    app.add_option("--only", only, "Run only these criteria (1-11)");
    CLI11_PARSE(app, argc, argv);

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"pairing oracle equivalence", pairing_oracle},
        {"loss oracle equivalence", loss_oracle},
        {"gradient check", gradient_check},
        {"reduction identity", reduction_identity},
        {"size invariant", size_invariant},
        {"binding-modality contrast", [&] { return binding_contrast(paths); }},
        {"comparative ordering", [&] { return comparative_ordering(paths); }},
        {"ablation monotonicity", [&] { return ablation(paths); }},
        {"pairing-scheme trade-off", [&] { return threshold_tradeoff(paths); }},
        {"deployment robustness", [&] { return deployment(paths); }},
        {"determinism", [&] { return determinism(paths); }},
    };
    const std::set<int> selected(only.begin(), only.end());
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!selected.empty() && !selected.count(id)) continue;
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        failures += o.pass ? 0 : 1;
        std::cout << (o.pass ? "PASS" : "FAIL") << " " << id << " " << criteria[i].first << ": " << o.detail << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
