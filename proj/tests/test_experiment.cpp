#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "mmbind/error.hpp"
#include "mmbind/experiment.hpp"
#include "support.hpp"

using namespace mmbind;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"(id: tiny
seeds: [0, 1]
corpus:
  num_classes: 3
  latent_dim: 4
  class_separation: 2.0
  modalities:
    - {name: m1, dim: 6, snr: 3.0}
    - {name: m2, dim: 5, snr: 3.0}
    - {name: ms, dim: 4, snr: 5.0}
  datasets:
    - {name: A, modalities: [m1, ms], size: 30, domain_shift: 0.1}
    - {name: B, modalities: [m2, ms], size: 30, domain_shift: 0.1}
  finetune_size: 9
  test_size: 30
  seed: 7
binding:
  shared_modality: ms
  encoder: {hidden_dims: [8], latent_dim: 4, epochs: 3}
methods: [lower_bound, mmbind, {name: c1, method: mmbind, variant: pairs_only}]
model: {encoder_hidden: [16], feature_dim: 4, projection_dim: 8, classifier_hidden: [16]}
training: {epochs: 2, batch_size: 16}
finetune: {epochs: 3}
auxiliary: {epochs: 2}
evaluation:
  masks: [[m1, m2, ms], [ms]]
)";

fs::path write_file(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    std::ofstream(path) << text;
    return path;
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path);
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

ExperimentConfig tiny() { return experiment_from_json(parse_yaml(kTinyConfig)); }

/// Field named by the ValidationError thrown for `yaml`, or "" if none.
std::string failing_field(const std::string& yaml) {
    try {
        experiment_from_json(parse_yaml(yaml)).validate();
    } catch (const ValidationError& e) {
        return e.field();
    }
    return "";
}

std::string with(const std::string& from, const std::string& to) {
    std::string text = kTinyConfig;
    const auto at = text.find(from);
    REQUIRE(at != std::string::npos);
    text.replace(at, from.size(), to);
    return text;
}

std::vector<ResultRow> without_time(std::vector<ResultRow> rows) {
    for (auto& r : rows) r.wall_time_s = 0.0;
    return rows;
}

int run_cli(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string(MMBIND_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

ResultRow row(const std::string& cfg, const std::string& method, std::uint64_t seed, double acc,
              std::optional<double> pairing = std::nullopt) {
    return {cfg, method, seed, "m1+m2+ms", acc, acc / 2.0, pairing, 0.5};
}

}  // namespace

TEST_SUITE("experiment") {

TEST_CASE("configs parse with defaults and named methods") {
    const ExperimentConfig cfg = tiny();
    CHECK(cfg.id == "tiny");
    CHECK(cfg.seeds == std::vector<std::uint64_t>{0, 1});
    REQUIRE(cfg.methods.size() == 3);
    CHECK(cfg.methods[2] == MethodEntry{"c1", MethodId::mmbind, MMBindVariant::pairs_only});
    CHECK(cfg.binding.shared == std::vector<ModalityId>{"ms"});
    CHECK(cfg.training.epochs == 2);
    CHECK(cfg.training.temperature == ContrastiveConfig{}.temperature);
    CHECK(cfg.evaluation.masks.size() == 2);
    CHECK(mask_name(cfg.evaluation.masks[1]) == "ms");
    CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("resolved YAML parses back to an equal config") {
    const ExperimentConfig cfg = tiny();
    CHECK(experiment_from_json(parse_yaml(to_yaml(cfg))) == cfg);
    CHECK(experiment_from_json(to_json(cfg)) == cfg);
    testing::TempDir dir("cfg");
    ExperimentConfig named = cfg;
    const fs::path p = write_file(dir / "named.yaml", to_yaml(named));
    CHECK(load_experiment(p) == named);
}

TEST_CASE("config errors name the offending path") {
    CHECK(failing_field(with("training: {epochs: 2, batch_size: 16}", "training: {epochs: 2, temperature: -1}")) ==
          "training.temperature");
    CHECK(failing_field(with("training:", "trainin:")) == "trainin");
    CHECK(failing_field(with("finetune: {epochs: 3}", "finetune: {epochs: 3, rate: 1}")) == "finetune.rate");
    CHECK(failing_field(with("lower_bound, mmbind", "lower_bound, magic")).rfind("methods", 0) == 0);
    CHECK(failing_field(with("{name: c1, method: mmbind, variant: pairs_only}", "mmbind")).rfind("methods", 0) == 0);
    CHECK(failing_field(with("shared_modality: ms", "shared_modality: m9")).rfind("binding", 0) == 0);
    CHECK(failing_field(with("seeds: [0, 1]", "seeds: []")) == "seeds");
    CHECK(failing_field(with("seeds: [0, 1]", "seeds: [1, 1]")) == "seeds");
    CHECK(failing_field(with("id: tiny", "id: \"bad id/\"")) == "id");
    CHECK(failing_field(with("test_size: 30", "test_size: 0")).rfind("corpus", 0) == 0);
    CHECK(failing_field(with("epochs: 3}", "epochs: \"three\"}")).rfind("binding.encoder", 0) == 0);
    CHECK(failing_field(with("masks: [[m1, m2, ms], [ms]]", "masks: [[m7]]")).rfind("evaluation", 0) == 0);
    CHECK(failing_field(kTinyConfig).empty());
}

TEST_CASE("methods that bind require a shared modality") {
    std::string text = kTinyConfig;
    const auto begin = text.find("binding:");
    const auto end = text.find("methods:");
    text.erase(begin, end - begin);
    CHECK(failing_field(text) == "binding.shared_modality");
    CHECK(failing_field(text.replace(text.find("[lower_bound, mmbind, {name: c1, method: mmbind, variant: pairs_only}]"),
                                     std::string("[lower_bound, mmbind, {name: c1, method: mmbind, variant: pairs_only}]").size(),
                                     "[lower_bound, dcm]"))
              .empty());
}

TEST_CASE("corpus may be a file relative to the config") {
    testing::TempDir dir("corpus-ref");
    const auto begin = std::string(kTinyConfig).find("corpus:");
    const auto end = std::string(kTinyConfig).find("binding:");
    std::string corpus = std::string(kTinyConfig).substr(begin, end - begin);
    std::string body;
    std::istringstream lines(corpus);
    std::string line;
    std::getline(lines, line);
    while (std::getline(lines, line)) body += line.substr(2) + "\n";
    write_file(dir / "corpora" / "c.yaml", body);
    std::string text = kTinyConfig;
    text.replace(begin, end - begin, "corpus: corpora/c.yaml\n");
    write_file(dir / "exp.yaml", text);
    CHECK(load_experiment(dir / "exp.yaml").corpus == tiny().corpus);
}

TEST_CASE("run seeds shift the corpus seed and apply the fine-tune fraction") {
    ExperimentConfig cfg = tiny();
    CHECK(corpus_for_seed(cfg, 3).seed == 10);
    cfg.finetune_fraction = 0.1;
    CHECK(corpus_for_seed(cfg, 0).finetune_size == 6);
}

TEST_CASE("bundled configs load and validate") {
    const fs::path root = fs::path(MMBIND_SOURCE_DIR) / "configs";
    std::size_t count = 0;
    for (const auto& entry : fs::directory_iterator(root)) {
        if (entry.path().extension() != ".yaml") continue;
        CAPTURE(entry.path().string());
        ExperimentConfig cfg;
        CHECK_NOTHROW(cfg = load_experiment(entry.path()));
        CHECK(cfg.id == entry.path().stem().string());
        CHECK_NOTHROW(cfg.validate());
        ++count;
    }
    CHECK(count >= 3);
}

TEST_CASE("results CSV round-trips") {
    testing::TempDir dir("csv");
    const std::vector<ResultRow> rows{row("x", "mmbind", 0, 0.75, 0.8), row("x", "dcm", 1, 0.5)};
    write_results_csv(dir / "results.csv", rows);
    CHECK(read_file(dir / "results.csv").rfind(kResultsHeader, 0) == 0);
    const auto back = read_results_csv(dir / "results.csv");
    REQUIRE(back.size() == 2);
    CHECK(back[0].pairing_accuracy.has_value());
    CHECK_FALSE(back[1].pairing_accuracy.has_value());
    CHECK(back[0].accuracy == doctest::Approx(0.75));
    CHECK(back[1].method == "dcm");
}

TEST_CASE("an experiment run writes complete, reproducible outputs") {
    testing::TempDir dir("run");
    const ExperimentConfig cfg = tiny();
    RunOptions opts;
    opts.out_root = dir / "a";
    const RunSummary first = run_experiment(cfg, opts);
    CHECK(first.dir == dir / "a" / "tiny");
    CHECK(first.rows.size() == 2 * 3 * 2);
    for (const char* f : {"results.csv", "results.json", "pairing_confusion.json", "loss_curves.jsonl", "config.resolved.yaml"})
        CHECK(fs::exists(first.dir / f));
    CHECK_FALSE(fs::exists(first.dir / "INCOMPLETE"));
    for (const auto& r : first.rows) {
        CHECK(r.pairing_accuracy.has_value() == (r.method != "lower_bound"));
        CHECK(r.accuracy >= 0.0);
        CHECK(r.accuracy <= 1.0);
    }
    CHECK(load_experiment(first.dir / "config.resolved.yaml") == cfg);

    opts.out_root = dir / "b";
    const RunSummary second = run_experiment(cfg, opts);
    CHECK(without_time(read_results_csv(first.dir / "results.csv")) ==
          without_time(read_results_csv(second.dir / "results.csv")));
    CHECK(read_file(first.dir / "pairing_confusion.json") == read_file(second.dir / "pairing_confusion.json"));

    opts.out_root = dir / "a";
    CHECK_THROWS(run_experiment(cfg, opts));
    opts.force = true;
    CHECK_NOTHROW(run_experiment(cfg, opts));
}

TEST_CASE("dry runs validate and write nothing") {
    testing::TempDir dir("dry");
    RunOptions opts;
    opts.out_root = dir / "out";
    opts.dry_run = true;
    const auto s = run_experiment(tiny(), opts);
    CHECK(s.rows.empty());
    CHECK_FALSE(fs::exists(dir / "out" / "tiny" / "results.csv"));
    const std::string plan = describe_plan(tiny(), opts);
    CHECK(plan.find("mmbind") != std::string::npos);
    CHECK(plan.find("c1") != std::string::npos);
}

TEST_CASE("a failing run leaves an INCOMPLETE marker and partial results") {
    testing::TempDir dir("fail");
    // The shared-modality autoencoder of imagebind cannot be wider than ms.
    const auto text = with("methods: [lower_bound, mmbind, {name: c1, method: mmbind, variant: pairs_only}]",
                           "methods: [lower_bound, imagebind]");
    ExperimentConfig cfg = experiment_from_json(parse_yaml(text));
    cfg.model.feature_dim = 6;
    RunOptions opts;
    opts.out_root = dir.path();
    CHECK_THROWS(run_experiment(cfg, opts));
    REQUIRE(fs::exists(dir / "tiny" / "INCOMPLETE"));
    CHECK(read_file(dir / "tiny" / "INCOMPLETE").find("latent_dim") != std::string::npos);
    const auto partial = read_results_csv(dir / "tiny" / "results.csv");
    CHECK(partial.size() == 2);
    for (const auto& r : partial) CHECK(r.method == "lower_bound");
    CHECK_THROWS(run_experiment(cfg, opts));
}

TEST_CASE("aggregation statistics") {
    const std::vector<ResultRow> rows{row("x", "mmbind", 0, 0.8, 0.9), row("x", "mmbind", 1, 0.6, 0.7),
                                      row("x", "dcm", 0, 0.7), row("x", "dcm", 1, 0.7), row("y", "dcm", 0, 0.3)};
    const auto agg = aggregate(rows);
    REQUIRE(agg.size() == 3);
    CHECK(agg[0].method == "mmbind");
    CHECK(agg[0].runs == 2);
    CHECK(agg[0].accuracy_mean == doctest::Approx(0.7));
    CHECK(agg[0].accuracy_std == doctest::Approx(std::sqrt(0.02)));
    CHECK(agg[0].pairing_mean.value() == doctest::Approx(0.8));
    CHECK(agg[1].accuracy_mean == 0.7);
    CHECK(agg[1].accuracy_std == 0.0);
    CHECK_FALSE(agg[1].pairing_mean.has_value());
    CHECK(agg[2].runs == 1);
    CHECK(agg[2].accuracy_std == 0.0);
    CHECK(agg[2].accuracy_mean == 0.3);
}

TEST_CASE("ordering compares mmbind against every other method except the upper bound") {
    const std::vector<ResultRow> rows{row("x", "mmbind", 0, 0.7), row("x", "dcm", 0, 0.6),
                                      row("x", "upper_bound", 0, 0.9), row("x", "mmbind_c1", 0, 0.95),
                                      row("y", "mmbind", 0, 0.5), row("y", "mim", 0, 0.55)};
    const auto ord = ordering(aggregate(rows));
    REQUIRE(ord.size() == 2);
    CHECK(ord[0].mmbind_best);
    CHECK(ord[0].best_baseline == "dcm");
    CHECK_FALSE(ord[1].mmbind_best);
    CHECK(ord[1].best_baseline == "mim");
}

TEST_CASE("reports summarize every results file below a directory") {
    testing::TempDir dir("report");
    fs::create_directories(dir / "runs" / "x");
    fs::create_directories(dir / "runs" / "nested" / "y");
    write_results_csv(dir / "runs" / "x" / "results.csv", {row("x", "mmbind", 0, 0.7), row("x", "dcm", 0, 0.6)});
    write_results_csv(dir / "runs" / "nested" / "y" / "results.csv", {row("y", "mmbind", 0, 0.4)});
    const auto agg = report(dir / "runs", dir / "out");
    CHECK(agg.size() == 3);
    const std::string md = read_file(dir / "out" / "summary.md");
    CHECK(md.find("70.0") != std::string::npos);
    CHECK(md.find("dcm") != std::string::npos);
    CHECK(fs::exists(dir / "out" / "x_accuracy.svg"));
    CHECK(fs::exists(dir / "out" / "y_accuracy.svg"));
    fs::create_directories(dir / "empty");
    CHECK_THROWS(report(dir / "empty", dir / "out2"));
}

TEST_CASE("command line: dry run, errors and the staged pipeline") {
    testing::TempDir dir("cli");
    const fs::path cfg = write_file(dir / "tiny.yaml", kTinyConfig);
    const fs::path log = dir / "log.txt";

    CHECK(run_cli("run " + cfg.string() + " --dry-run --out " + (dir / "r").string(), log) == 0);
    CHECK_FALSE(fs::exists(dir / "r" / "tiny" / "results.csv"));
    CHECK(read_file(log).find("mmbind") != std::string::npos);

    write_file(dir / "bad.yaml", with("training:", "trainin:"));
    CHECK(run_cli("run " + (dir / "bad.yaml").string() + " --dry-run", log) == 2);
    CHECK(read_file(log).find("trainin") != std::string::npos);
    CHECK(run_cli("frobnicate", log) != 0);

    const fs::path st = dir / "stages";
    const std::string corpus = " --data " + (st / "corpus").string();
    const std::string config = " --config " + cfg.string();
    auto to = [&](const char* stage) { return " --out " + (st / stage).string(); };
    REQUIRE(run_cli("generate" + config + to("corpus"), log) == 0);
    CHECK(fs::exists(st / "corpus" / "corpus.json"));
    CHECK(run_cli("generate" + config + to("corpus"), log) == 2);
    CHECK(run_cli("generate" + config + to("corpus") + " --force", log) == 0);
    REQUIRE(run_cli("train-encoder" + corpus + config + to("encoder"), log) == 0);
    REQUIRE(run_cli("bind" + corpus + config + " --encoder " + (st / "encoder").string() + to("pairs"), log) == 0);
    CHECK(fs::exists(st / "pairs" / "pairing.json"));
    REQUIRE(run_cli("pretrain" + corpus + config + " --method mmbind --pairs " + (st / "pairs").string() + to("model"),
                    log) == 0);
    CHECK(fs::exists(st / "model" / "loss_curve.jsonl"));
    REQUIRE(run_cli("finetune --model " + (st / "model").string() + corpus + config + to("finetuned"), log) == 0);
    REQUIRE(run_cli("evaluate --model " + (st / "finetuned").string() + corpus + to("eval"), log) == 0);
    const auto eval = nlohmann::json::parse(read_file(st / "eval" / "evaluation.json"));
    CHECK(eval.at("accuracy").get<double>() >= 0.0);
    CHECK(eval.at("confusion").size() == 3);

    REQUIRE(run_cli("run " + cfg.string() + " --seed 1 --out " + (dir / "r").string(), log) == 0);
    const auto rows = read_results_csv(dir / "r" / "tiny" / "results.csv");
    CHECK(rows.size() == 3 * 2);
    for (const auto& r : rows) CHECK(r.seed == 1);
    REQUIRE(run_cli("report " + (dir / "r").string() + " --out " + (dir / "rep").string(), log) == 0);
    CHECK(fs::exists(dir / "rep" / "summary.md"));
}

}  // TEST_SUITE
