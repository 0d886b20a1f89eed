#include <doctest.h>

#include <cmath>

#include "mmbind/error.hpp"
#include "mmbind/rng.hpp"
#include "mmbind/training.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace mmbind;

namespace {

std::vector<Matrix> unit_embeddings(Rng& rng, std::size_t modalities, Eigen::Index b, Eigen::Index f) {
    std::vector<Matrix> z;
    for (std::size_t m = 0; m < modalities; ++m) z.push_back(normalize_rows(testing::random_matrix(rng, b, f)));
    return z;
}

Matrix random_mask(Rng& rng, Eigen::Index b, Eigen::Index m) {
    Matrix mask(b, m);
    for (Eigen::Index i = 0; i < b; ++i)
        for (Eigen::Index j = 0; j < m; ++j) mask(i, j) = rng.uniform() < 0.7 ? 1.0 : 0.0;
    return mask;
}

std::vector<double> random_weights(Rng& rng, std::size_t n) {
    std::vector<double> w(n);
    for (double& x : w) x = rng.uniform();
    return w;
}

ModelSpec small_model(const Corpus& c) {
    ModelSpec spec;
    spec.modalities = c.spec.modalities;
    spec.encoder_hidden = {16};
    spec.feature_dim = 8;
    spec.projection_dim = 8;
    spec.classifier_hidden = {16};
    spec.num_classes = c.spec.num_classes;
    return spec;
}

double max_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
    return d;
}

std::vector<double> encoder_params(const MultimodalModel& m) {
    std::vector<double> out;
    for (const auto& b : m.branches()) {
        const auto f = b.encoder.flatten();
        out.insert(out.end(), f.begin(), f.end());
    }
    return out;
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("weighted contrastive loss matches the term-by-term oracle") {
    Rng rng(1);
    for (int trial = 0; trial < 5; ++trial) {
        const auto z = unit_embeddings(rng, 3, 9, 4);
        const Matrix mask = random_mask(rng, 9, 3);
        const auto w = random_weights(rng, 9);
        const double tau = 0.05 + 0.3 * rng.uniform();
        CHECK(weighted_contrastive_loss(z, w, mask, tau) == doctest::Approx(oracle::weighted_loss(z, w, mask, tau)).epsilon(1e-10));
    }
}

TEST_CASE("two fully present modalities with unit weights reduce to symmetric InfoNCE") {
    Rng rng(2);
    const auto z = unit_embeddings(rng, 2, 12, 5);
    const std::vector<double> w(12, 1.0);
    CHECK(weighted_contrastive_loss(z, w, Matrix::Ones(12, 2), 0.1) ==
          doctest::Approx(oracle::symmetric_infonce(z[0], z[1], 0.1)).epsilon(1e-10));
}

TEST_CASE("loss gradient matches finite differences") {
    Rng rng(3);
    const auto z = unit_embeddings(rng, 3, 6, 3);
    const Matrix mask = random_mask(rng, 6, 3);
    const auto w = random_weights(rng, 6);
    std::vector<Matrix> grad;
    weighted_contrastive_loss(z, w, mask, 0.2, &grad);
    const double h = 1e-6;
    for (std::size_t m = 0; m < 3; ++m)
        for (Eigen::Index i = 0; i < 6; ++i)
            for (Eigen::Index f = 0; f < 3; ++f) {
                auto up = z, down = z;
                up[m](i, f) += h;
                down[m](i, f) -= h;
                const double num = (weighted_contrastive_loss(up, w, mask, 0.2) - weighted_contrastive_loss(down, w, mask, 0.2)) / (2 * h);
                CHECK(grad[m](i, f) == doctest::Approx(num).epsilon(1e-5).scale(1.0));
            }
}

TEST_CASE("loss is linear in the weights") {
    Rng rng(4);
    const auto z = unit_embeddings(rng, 3, 8, 4);
    const Matrix mask = random_mask(rng, 8, 3);
    const auto w1 = random_weights(rng, 8);
    const auto w2 = random_weights(rng, 8);
    std::vector<double> sum(8), scaled(8);
    for (std::size_t i = 0; i < 8; ++i) {
        sum[i] = w1[i] + w2[i];
        scaled[i] = 2.5 * w1[i];
    }
    const double l1 = weighted_contrastive_loss(z, w1, mask, 0.1);
    const double l2 = weighted_contrastive_loss(z, w2, mask, 0.1);
    CHECK(weighted_contrastive_loss(z, sum, mask, 0.1) == doctest::Approx(l1 + l2).epsilon(1e-12));
    CHECK(weighted_contrastive_loss(z, scaled, mask, 0.1) == doctest::Approx(2.5 * l1).epsilon(1e-12));
    CHECK(weighted_contrastive_loss(z, std::vector<double>(8, 0.0), mask, 0.1) == 0.0);
}

TEST_CASE("loss is invariant to permuting the batch") {
    Rng rng(5);
    auto z = unit_embeddings(rng, 3, 10, 4);
    const Matrix mask = random_mask(rng, 10, 3);
    const auto w = random_weights(rng, 10);
    const auto perm = rng.permutation(10);
    std::vector<Matrix> zp;
    for (const auto& m : z) zp.push_back(take_rows(m, perm));
    std::vector<double> wp;
    for (std::size_t i : perm) wp.push_back(w[i]);
    CHECK(weighted_contrastive_loss(zp, wp, take_rows(mask, perm), 0.1) ==
          doctest::Approx(weighted_contrastive_loss(z, w, mask, 0.1)).epsilon(1e-12));
}

TEST_CASE("an absent modality contributes nothing") {
    Rng rng(6);
    auto z = unit_embeddings(rng, 2, 7, 3);
    const Matrix mask = random_mask(rng, 7, 2);
    const auto w = random_weights(rng, 7);
    const double base = weighted_contrastive_loss(z, w, mask, 0.1);
    auto z3 = z;
    z3.push_back(normalize_rows(testing::random_matrix(rng, 7, 3)));
    Matrix mask3(7, 3);
    mask3 << mask, Matrix::Zero(7, 1);
    std::vector<Matrix> grad;
    CHECK(weighted_contrastive_loss(z3, w, mask3, 0.1, &grad) == doctest::Approx(base).epsilon(1e-12));
    CHECK(grad[2].cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("loss argument errors") {
    Rng rng(7);
    const auto one = unit_embeddings(rng, 2, 1, 3);
    CHECK_THROWS_AS(weighted_contrastive_loss(one, std::vector<double>{1.0}, Matrix::Ones(1, 2), 0.1), ValidationError);
    const auto z = unit_embeddings(rng, 2, 4, 3);
    const std::vector<double> w(4, 1.0);
    CHECK_THROWS_AS(weighted_contrastive_loss(z, w, Matrix::Ones(4, 2), 0.0), ValidationError);
    CHECK_THROWS_AS(weighted_contrastive_loss(z, w, Matrix::Ones(4, 2), -1.0), ValidationError);
    CHECK_THROWS_AS(weighted_contrastive_loss(z, w, Matrix::Ones(4, 3), 0.1), ShapeError);
    CHECK_THROWS_AS(weighted_contrastive_loss(z, std::vector<double>(3, 1.0), Matrix::Ones(4, 2), 0.1), ShapeError);
}

TEST_CASE("aggregated training set layout") {
    const Corpus c = generate_corpus(testing::small_spec(20));
    const auto pairs = pair_argmax(similarity_matrix(c.datasets[0].view("ms"), c.datasets[1].view("ms")),
                                   c.datasets[0], c.datasets[1]);
    const auto w = normalize_weights(pairs.similarity);
    const auto set = build_training_set(c.spec.modalities, c.datasets, &pairs, w);
    REQUIRE(set.size() == 20 + 20 + 40);
    CHECK(set.count(RowSource::incomplete) == 40);
    CHECK(set.count(RowSource::pseudo_paired) == 40);
    const std::size_t im1 = set.modality_index("m1"), im2 = set.modality_index("m2"), ims = set.modality_index("ms");
    for (Eigen::Index i = 0; i < 80; ++i) {
        const auto e = [&](std::size_t col) { return set.presence(i, static_cast<Eigen::Index>(col)); };
        if (i < 20) {
            CHECK((e(im1) == 1.0 && e(im2) == 0.0 && e(ims) == 1.0));
            CHECK(set.views.at("m2").row(i).cwiseAbs().maxCoeff() == 0.0);
        } else if (i < 40) {
            CHECK((e(im1) == 0.0 && e(im2) == 1.0 && e(ims) == 1.0));
            CHECK(set.views.at("m1").row(i).cwiseAbs().maxCoeff() == 0.0);
        } else {
            CHECK(set.presence.row(i).sum() == 3.0);
            CHECK(set.weights[static_cast<std::size_t>(i)] == w[static_cast<std::size_t>(i - 40)]);
        }
        if (i < 40) CHECK(set.weights[static_cast<std::size_t>(i)] == 1.0);
        CHECK(set.labels[static_cast<std::size_t>(i)] == -1);
    }
    CHECK(set.views.at("m1").topRows(20) == c.datasets[0].view("m1"));

    CHECK_THROWS_AS(build_training_set(c.spec.modalities, c.datasets, &pairs, std::vector<double>(3, 1.0)), ShapeError);
    std::vector<double> bad(w);
    bad[0] = 1.5;
    CHECK_THROWS_AS(build_training_set(c.spec.modalities, c.datasets, &pairs, bad), ValidationError);
    const auto single = c.datasets[0].project({"m1"});
    CHECK_THROWS_AS(build_training_set(c.spec.modalities, std::span(&single, 1), nullptr, {}), ValidationError);
}

TEST_CASE("label modality rows carry text embeddings of the class") {
    Corpus c = generate_corpus(testing::small_spec(10));
    IncompleteDataset ds = c.datasets[0].project({"ms"});
    ds.labeled = true;
    ds.labels = *ds.ground_truth;
    LabelViews lv{std::make_shared<OfflineLabelEmbedder>(12, 0), {}};
    std::vector<ModalityDecl> mods{{"ms", 4}, {kLabelModality, 12}};
    const auto set = build_training_set(mods, std::span(&ds, 1), nullptr, {}, lv);
    CHECK(set.presence.sum() == 20.0);
    for (std::size_t i = 0; i < 10; ++i) {
        CHECK(set.labels[i] == ds.labels[i]);
        const Vector expected = lv.provider->embed(ds.class_names[static_cast<std::size_t>(ds.labels[i])]);
        CHECK((set.views.at(kLabelModality).row(static_cast<Eigen::Index>(i)).transpose() - expected).norm() < 1e-12);
    }
}

TEST_CASE("pre-training is deterministic and epochs = 0 is the identity") {
    const Corpus c = generate_corpus(testing::small_spec(20));
    const auto set = build_training_set(c.spec.modalities, c.datasets, nullptr, {});
    const MultimodalModel init(small_model(c), 3);
    ContrastiveConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 8;
    const auto a = pretrain(set, init, cfg, 9);
    const auto b = pretrain(set, init, cfg, 9);
    CHECK(a.model == b.model);
    CHECK(a.curve.size() == 3);
    CHECK_FALSE(a.model == init);
    cfg.epochs = 0;
    const auto idle = pretrain(set, init, cfg, 9);
    CHECK(idle.model == init);
    CHECK(idle.curve.empty());
}

TEST_CASE("zero weights leave the model unchanged") {
    const Corpus c = generate_corpus(testing::small_spec(15));
    const auto pairs = pair_argmax(similarity_matrix(c.datasets[0].view("ms"), c.datasets[1].view("ms")),
                                   c.datasets[0], c.datasets[1]);
    const auto set = build_training_set(c.spec.modalities, {}, &pairs, std::vector<double>(pairs.size(), 0.0));
    const MultimodalModel init(small_model(c), 4);
    ContrastiveConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 10;
    const auto out = pretrain(set, init, cfg, 1);
    CHECK(out.model == init);
    for (const auto& e : out.curve) CHECK(e.loss == 0.0);
}

TEST_CASE("pre-training aligns paired modalities") {
    const Corpus c = generate_corpus(testing::small_spec(60));
    const auto set = build_training_set(c.spec.modalities, c.datasets, nullptr, {});
    const MultimodalModel init(small_model(c), 5);
    ContrastiveConfig cfg;
    cfg.epochs = 30;
    cfg.batch_size = 32;
    cfg.temperature = 0.1;
    const double before = mean_positive_cosine(init, set, "m1", "ms");
    const auto out = pretrain(set, init, cfg, 2);
    CHECK(mean_positive_cosine(out.model, set, "m1", "ms") > before + 0.2);
    CHECK(out.curve.back().loss < out.curve.front().loss);
    CHECK_THROWS_AS(mean_positive_cosine(out.model, set, "m1", "m2"), ValidationError);
}

TEST_CASE("frozen encoders keep their parameters during pre-training") {
    const Corpus c = generate_corpus(testing::small_spec(20));
    const auto set = build_training_set(c.spec.modalities, c.datasets, nullptr, {});
    const MultimodalModel init(small_model(c), 6);
    ContrastiveConfig cfg;
    cfg.epochs = 2;
    cfg.frozen_encoders = {"ms"};
    const auto out = pretrain(set, init, cfg, 3);
    CHECK(out.model.branch("ms").encoder == init.branch("ms").encoder);
    CHECK_FALSE(out.model.branch("ms").head.net() == init.branch("ms").head.net());
    CHECK_FALSE(out.model.branch("m1").encoder == init.branch("m1").encoder);
    cfg.frozen_encoders = {"nope"};
    CHECK_THROWS_AS(pretrain(set, init, cfg, 3), ValidationError);
}

TEST_CASE("pre-training config validation") {
    ContrastiveConfig cfg;
    cfg.temperature = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
    cfg = {};
    cfg.batch_size = 1;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
    cfg = {};
    cfg.epochs = -1;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
}

TEST_CASE("fine-tuning on a single class predicts that class") {
    Corpus c = generate_corpus(testing::small_spec(20));
    IncompleteDataset one = c.finetune;
    for (int& y : one.labels) y = 2;
    FinetuneConfig cfg;
    cfg.epochs = 60;
    cfg.learning_rate = 1e-2;
    const auto out = finetune(MultimodalModel(small_model(c), 1), one, cfg, 0);
    for (int p : predict(out.model, c.test)) CHECK(p == 2);
    CHECK(out.curve.back().loss < out.curve.front().loss);
}

TEST_CASE("linear probing trains only the classifier") {
    const Corpus c = generate_corpus(testing::small_spec(20));
    const MultimodalModel init(small_model(c), 2);
    FinetuneConfig cfg;
    cfg.epochs = 5;
    cfg.mode = FinetuneMode::linear_probe;
    const auto probe = finetune(init, c.finetune, cfg, 0);
    CHECK(max_diff(encoder_params(probe.model), encoder_params(init)) == 0.0);
    CHECK_FALSE(probe.model.classifier() == init.classifier());
    cfg.mode = FinetuneMode::full;
    const auto full = finetune(init, c.finetune, cfg, 0);
    CHECK(max_diff(encoder_params(full.model), encoder_params(init)) > 0.0);
    // Masked modalities never receive gradient.
    cfg.mask = {"m1"};
    const auto masked = finetune(init, c.finetune, cfg, 0);
    CHECK(masked.model.branch("m2").encoder == init.branch("m2").encoder);
    CHECK_FALSE(masked.model.branch("m1").encoder == init.branch("m1").encoder);
}

TEST_CASE("fine-tuning rejects bad labels and empty sets") {
    Corpus c = generate_corpus(testing::small_spec(20));
    IncompleteDataset bad = c.finetune;
    bad.labels[0] = 7;
    CHECK_THROWS_AS(finetune(MultimodalModel(small_model(c), 1), bad, {}, 0), ValidationError);
    const IncompleteDataset empty = c.finetune.subset(std::vector<std::size_t>{});
    CHECK_THROWS_AS(finetune(MultimodalModel(small_model(c), 1), empty, {}, 0), ValidationError);
}

TEST_CASE("classification metrics examples") {
    const std::vector<int> truth{0, 0, 1, 1};
    const std::vector<int> pred{0, 1, 1, 1};
    const auto r = classification_metrics(truth, pred, 2);
    CHECK(r.accuracy == doctest::Approx(0.75));
    CHECK(r.per_class[0].f1 == doctest::Approx(2.0 / 3.0));
    CHECK(r.per_class[1].f1 == doctest::Approx(0.8));
    CHECK(r.macro_f1 == doctest::Approx((2.0 / 3.0 + 0.8) / 2.0));
    CHECK(r.confusion[0][1] == 1);

    const std::vector<int> constant(4, 1);
    const auto k = classification_metrics(truth, constant, 3);
    CHECK(k.accuracy == doctest::Approx(0.5));
    CHECK(k.macro_f1 == doctest::Approx((0.0 + 2.0 / 3.0) / 2.0));
    CHECK_THROWS_AS(classification_metrics(std::vector<int>{}, std::vector<int>{}, 2), ValidationError);
    CHECK_THROWS_AS(classification_metrics(truth, std::vector<int>{0}, 2), ShapeError);
}

TEST_CASE("classification metrics match the oracle on random labels") {
    Rng rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        const int classes = 2 + static_cast<int>(rng.index(5));
        std::vector<int> truth, pred;
        for (int i = 0; i < 50; ++i) {
            truth.push_back(static_cast<int>(rng.index(static_cast<std::size_t>(classes))));
            pred.push_back(static_cast<int>(rng.index(static_cast<std::size_t>(classes))));
        }
        const auto r = classification_metrics(truth, pred, classes);
        const auto o = oracle::metrics(truth, pred, classes);
        CHECK(r.accuracy == doctest::Approx(o.accuracy).epsilon(1e-12));
        CHECK(r.macro_f1 == doctest::Approx(o.macro_f1).epsilon(1e-12));
    }
}

TEST_CASE("evaluation with the full mask equals the explicit modality list") {
    const Corpus c = generate_corpus(testing::small_spec(20));
    const MultimodalModel model(small_model(c), 3);
    const auto a = evaluate(model, c.test);
    const auto b = evaluate(model, c.test, {"m1", "m2", "ms"});
    CHECK(a.accuracy == b.accuracy);
    CHECK(a.confusion == b.confusion);
    // A masked modality is the same as a zero view.
    std::map<ModalityId, Matrix> zeroed = c.test.views;
    zeroed["m2"].setZero();
    CHECK((model.logits(c.test.views, std::vector<ModalityId>{"m1", "ms"}) - model.logits(zeroed, std::vector<ModalityId>{})).cwiseAbs().maxCoeff() == 0.0);
    CHECK_THROWS(evaluate(model, c.test, {"nope"}));
    CHECK_THROWS_AS(evaluate(model, c.test.subset(std::vector<std::size_t>{})), ValidationError);
}

TEST_CASE("models round-trip through disk at float32 precision") {
    testing::TempDir dir("model");
    const Corpus c = generate_corpus(testing::small_spec(10));
    ModelSpec spec = small_model(c);
    spec.prompt = true;
    const MultimodalModel model(spec, 8);
    save_model(dir / "a", model);
    const MultimodalModel loaded = load_model(dir / "a");
    CHECK(loaded.spec() == spec);
    CHECK(max_diff(loaded.flatten(), model.flatten()) < 1e-6);
    save_model(dir / "b", loaded);
    CHECK(load_model(dir / "b") == loaded);
    CHECK(predict(loaded, c.test) == predict(load_model(dir / "b"), c.test));
    CHECK_THROWS(load_model(dir / "missing"));
}

TEST_CASE("model spec validation and JSON round trip") {
    const Corpus c = generate_corpus(testing::small_spec(10));
    ModelSpec spec = small_model(c);
    CHECK(model_spec_from_json(to_json(spec)) == spec);
    spec.num_classes = 0;
    CHECK_THROWS_AS(spec.validate(), ValidationError);
    CHECK(finetune_mode_from_string(to_string(FinetuneMode::linear_probe)) == FinetuneMode::linear_probe);
    CHECK_THROWS_AS(finetune_mode_from_string("partial"), ValidationError);
}

}  // TEST_SUITE
