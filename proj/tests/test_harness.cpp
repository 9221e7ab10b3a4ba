#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <set>

#include <nlohmann/json.hpp>

#include "fedos/config.hpp"
#include "fedos/experiment.hpp"
#include "fedos/report.hpp"
#include "fixtures.hpp"

using namespace fedos;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("fedos_harness_" + name)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& leaf) const { return (path / leaf).string(); }
};

/// A federated synthetic config that trains in well under a second.
ExperimentConfig small_config(const std::string& out) {
    auto cfg = parse_config(R"(
data:
  source: synthetic
  synthetic_size: 32
  val_samples: 200
partition:
  clients: 4
  samples_per_client: 100
  alpha: 1.0
run:
  rounds: 3
  client_fraction: 0.5
  lr: 0.05
  seeds: [1]
)");
    cfg.output.dir = out;
    return cfg;
}

std::string error_field(const std::string& text) {
    try {
        parse_config(text);
    } catch (const ConfigError& e) {
        return e.field();
    }
    return "<no error>";
}

MetricTrace make_trace(const std::string& variant, double alpha, std::vector<double> rel) {
    MetricTrace t;
    t.variant = variant;
    t.alpha = alpha;
    for (std::size_t i = 0; i < rel.size(); ++i) {
        RoundRecord r;
        r.round = static_cast<int>(i) + 1;
        r.val_acc = rel[i] / 100.0;
        r.rel_val_acc = rel[i];
        r.selected = {0};
        t.records.push_back(r);
    }
    return t;
}

} // namespace

TEST_CASE("empty config gives the baseline defaults") {
    const auto cfg = parse_config("");
    CHECK(cfg.partition.clients == 20);
    CHECK(cfg.partition.samples_per_client == 2000);
    CHECK(cfg.run.client_fraction == 0.2);
    CHECK(cfg.run.local_epochs == 1);
    CHECK(cfg.run.lr == 0.1);
    CHECK(cfg.run.batch_size == 32);
    CHECK(cfg.data.preprocessing == Preprocessing::Standardized);
    CHECK(cfg.data.source == "cifar10");
    CHECK(cfg.variant.name == "fedavg");
    CHECK(cfg.run.seeds == std::vector<std::uint64_t>{0});
    CHECK(config_hash(cfg) == config_hash(parse_config("data:\nrun:\n")));
}

TEST_CASE("config errors name the field") {
    CHECK(error_field("partition:\n  alpha: -1\n") == "partition.alpha");
    CHECK(error_field("partition:\n  alpha: 0\n") == "partition.alpha");
    CHECK(error_field("partition:\n  clients: many\n") == "partition.clients");
    CHECK(error_field("partition:\n  clients: 2.5\n") == "partition.clients");
    CHECK(error_field("partition:\n  colour: red\n") == "partition.colour");
    CHECK(error_field("telemetry:\n  on: true\n") == "telemetry");
    CHECK(error_field("model:\n  groups: [2, x, 30]\n") == "model.groups[1]");
    CHECK(error_field("model:\n  groups: [2, 0, 30]\n") == "model.groups[1]");
    CHECK(error_field("model:\n  norm: layer\n") == "model.norm");
    CHECK(error_field("run:\n  client_fraction: 1.5\n") == "run.client_fraction");
    CHECK(error_field("run:\n  seeds: [1, 1]\n") == "run.seeds");
    CHECK(error_field("variant:\n  name: fedsgd\n") == "variant.name");
    CHECK(error_field("variant:\n  name: fedos\n  generator: tiny_gan\n") == "variant.generator_checkpoint");
    CHECK(error_field("ablation:\n  axis: lr\n  values: [1]\n") == "ablation.axis");
    CHECK(error_field("data:\n  preprocessing: whitened\n") == "data.preprocessing");
    CHECK(error_field("[1, 2]") == "<file>");
    CHECK(error_field("data: [oops") == "<file>");
    CHECK(error_field("run:\n  lr: .nan\n") == "run.lr");
}

TEST_CASE("normalization is idempotent and the hash tracks content") {
    const std::vector<std::string> texts{
        "",
        "partition:\n  alpha: 0.01\nrun:\n  seeds: 7\n",
        "variant:\n  name: fedos\n  unknown_weight: 1.5\n  unknown_fraction: 0.4\nmodel:\n  norm: group\n",
        "data:\n  source: synthetic\n  root: \"odd: path, with \\\"quotes\\\"\"\nrun:\n  lr: 1e-3\n  seeds: [3, 1, 2]\n",
    };
    for (const auto& t : texts) {
        const auto c = parse_config(t);
        const auto once = normalize_config(c);
        const auto twice = normalize_config(parse_config(once));
        CHECK(once == twice);
        CHECK(config_hash(c) == config_hash(parse_config(once)));
        CHECK(config_hash(c).size() == 16);
    }
    auto a = parse_config("");
    auto b = a;
    b.output.dir = "elsewhere";
    CHECK(config_hash(a) == config_hash(b));
    b.partition.alpha = 0.5;
    CHECK(config_hash(a) != config_hash(b));
    CHECK(parse_config(texts[3]).data.root == "odd: path, with \"quotes\"");
    CHECK(parse_config(texts[1]).run.seeds == std::vector<std::uint64_t>{7});

    CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
}

TEST_CASE("set_config_value") {
    auto c = parse_config("");
    set_config_value(c, "partition.alpha", "0.25");
    set_config_value(c, "run.seeds", "[4, 5]");
    set_config_value(c, "model.norm", "batch");
    CHECK(c.partition.alpha == 0.25);
    CHECK(c.run.seeds == std::vector<std::uint64_t>{4, 5});
    CHECK(c.model.norm == NormKind::Batch);
    CHECK_THROWS_AS(set_config_value(c, "partition.beta", "1"), ConfigError);
    CHECK_THROWS_AS(set_config_value(c, "alpha", "1"), ConfigError);
    CHECK_THROWS_AS(set_config_value(c, "run.rounds", "ten"), ConfigError);
}

TEST_CASE("missing paths are reported at validation") {
    auto c = parse_config("data:\n  root: /definitely/not/here\n");
    try {
        check_paths(c);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(e.field() == "data.root");
    }
    c.data.source = "synthetic";
    CHECK_NOTHROW(check_paths(c));
    c.variant.generator_pool = "/no/such/pool";
    CHECK_THROWS_AS(check_paths(c), ConfigError);
}

TEST_CASE("synthetic experiment data") {
    auto cfg = small_config("unused");
    const auto a = load_experiment_data(cfg);
    CHECK(a.train.size() == 400);
    CHECK(a.val.size() == 200);
    cfg.run.seeds = {9};
    const auto b = load_experiment_data(cfg);
    CHECK(a.train.images == b.train.images);  // data ignores the run seed
    CHECK(experiment_model(cfg, a).output_classes() == 10);
    cfg.variant.name = "fedos";
    CHECK(experiment_model(cfg, a).output_classes() == 11);
}

TEST_CASE("centralized runs") {
    auto cfg = small_config("unused");
    cfg.run.mode = RunMode::Centralized;
    cfg.data.train_samples = 300;
    const auto data = load_experiment_data(cfg);

    cfg.run.epochs = 0;
    const auto zero = run_centralized(cfg, data, 3);
    CHECK(zero.trace.records.empty());
    CHECK(zero.reference_accuracy == zero.initial_accuracy);

    cfg.run.epochs = 2;
    cfg.run.batch_size = 16;
    const auto two = run_centralized(cfg, data, 3);
    REQUIRE(two.trace.records.size() == 2);
    CHECK(two.reference_accuracy == two.trace.records.back().val_acc);
    CHECK(two.initial_accuracy == zero.initial_accuracy);

    // one client holding everything, C = 1, E = 1, same seed
    const auto spec = experiment_model(cfg, data);
    RoundConfig rc = round_config(cfg, 3);
    rc.rounds = 2;
    rc.client_fraction = 1.0;
    const auto [state, trace] = run_training<float>(data.view(), fixture::single_client(data.train), spec, rc,
                                                    VariantConfig::fedavg());
    CHECK(encode_weights(state.weights) == encode_weights(two.final_weights));
    for (std::size_t i = 0; i < 2; ++i) CHECK(trace.records[i].val_acc == two.trace.records[i].val_acc);

    cfg.run.mode = RunMode::Federated;
    CHECK_THROWS_AS(run_centralized(cfg, data, 3), ConfigError);
}

TEST_CASE("run_experiment artifacts") {
    TempDir tmp("experiment");
    auto cfg = small_config(tmp / "fedavg");
    cfg.run.seeds = {1, 2, 3};
    const auto art = run_experiment(cfg);
    REQUIRE(art.seeds.size() == 3);
    std::set<std::uint64_t> seeds;
    for (const auto& s : art.seeds) {
        seeds.insert(s.seed);
        const auto csv = read_file(s.dir + "/trace.csv");
        CHECK(csv.rfind("# config_hash=" + art.config_hash + "\n", 0) == 0);
        CHECK(csv.find("# seed=" + std::to_string(s.seed)) != std::string::npos);
        CHECK(csv.find("# reference_accuracy=") != std::string::npos);
        CHECK(trace_from_csv(csv).seed == s.seed);
        CHECK(fs::exists(s.dir + "/best.fsw"));
        CHECK(fs::exists(s.dir + "/final.fsw"));
        const auto summary = nlohmann::json::parse(read_file(s.dir + "/summary.json"));
        CHECK(summary["config_hash"] == art.config_hash);
        CHECK(summary["seed"] == s.seed);
        CHECK(summary["max_rel_val_acc"].get<double>() == doctest::Approx(s.trace.max_rel()));
    }
    CHECK(seeds.size() == 3);
    CHECK(fs::exists(tmp / "fedavg/config.yaml"));
    CHECK(fs::exists(tmp / "fedavg/summary.json"));

    const auto spec = experiment_model(cfg, load_experiment_data(cfg));
    const auto best = decode_fsw1(read_file(art.seeds[0].dir + "/best.fsw"));
    REQUIRE(best.metadata);
    CHECK(best.metadata->find(art.config_hash) != std::string::npos);
    CHECK_NOTHROW(decode_weights<float>(spec, read_file(art.seeds[0].dir + "/final.fsw")));

    SUBCASE("rerun is bit-identical") {
        auto again = cfg;
        again.output.dir = tmp / "again";
        const auto art2 = run_experiment(again);
        CHECK(art2.config_hash == art.config_hash);
        for (std::size_t i = 0; i < 3; ++i) {
            CHECK(read_file(art.seeds[i].dir + "/trace.csv") == read_file(art2.seeds[i].dir + "/trace.csv"));
            CHECK(read_file(art.seeds[i].dir + "/final.fsw") == read_file(art2.seeds[i].dir + "/final.fsw"));
        }
    }

    SUBCASE("FedProx with mu = 0 reproduces FedAvg") {
        auto prox = cfg;
        prox.variant.name = "fedprox";
        prox.variant.mu = 0.0;
        prox.output.dir = tmp / "prox";
        const auto art2 = run_experiment(prox);
        for (std::size_t i = 0; i < 3; ++i) {
            const auto a = art.seeds[i].trace;
            const auto b = art2.seeds[i].trace;
            REQUIRE(a.records.size() == b.records.size());
            for (std::size_t r = 0; r < a.records.size(); ++r) {
                CHECK(a.records[r].train_loss == b.records[r].train_loss);
                CHECK(a.records[r].val_acc == b.records[r].val_acc);
                CHECK(a.records[r].selected == b.records[r].selected);
            }
            CHECK(read_file(art.seeds[i].dir + "/final.fsw").substr(0, 1000) ==
                  read_file(art2.seeds[i].dir + "/final.fsw").substr(0, 1000));
        }
    }

    SUBCASE("reference accuracy from a centralized summary") {
        auto central = cfg;
        central.run.mode = RunMode::Centralized;
        central.run.epochs = 1;
        central.run.seeds = {1};
        central.output.dir = tmp / "central";
        run_experiment(central);
        auto rel = cfg;
        rel.run.seeds = {1};
        rel.run.reference_summary = tmp / "central/summary.json";
        rel.output.dir = tmp / "rel";
        const double ref = reference_accuracy(rel);
        const auto top = nlohmann::json::parse(read_file(tmp / "central/summary.json"));
        CHECK(ref == top["reference_accuracy"].get<double>());
        const auto art2 = run_experiment(rel);
        CHECK(art2.seeds[0].trace.reference_accuracy == ref);
        const auto& r0 = art2.seeds[0].trace.records[0];
        CHECK(r0.rel_val_acc == doctest::Approx(100.0 * r0.val_acc / ref));
        CHECK(read_file(art2.seeds[0].dir + "/trace.csv").find("# reference_accuracy=") != std::string::npos);
    }
}

TEST_CASE("FedOS experiment records generator bytes once") {
    TempDir tmp("fedos");
    auto cfg = small_config(tmp / "fedos");
    cfg.variant.name = "fedos";
    cfg.variant.unknown_fraction = 0.5;
    const auto art = run_experiment(cfg);
    const auto s = nlohmann::json::parse(read_file(art.seeds[0].dir + "/summary.json"));
    CHECK(s["communication"]["generator_bytes_per_client"] == 2 * 3072 * 8);
    CHECK(s["communication"]["generator_bytes_total"] == 4 * 2 * 3072 * 8);
    CHECK(s["variant"] == "fedos");
}

TEST_CASE("ablation matrix") {
    TempDir tmp("ablation");
    auto cfg = small_config(tmp.path.string());
    cfg.run.rounds = 2;

    SUBCASE("single value matches run_experiment") {
        const auto table = run_ablation_matrix(cfg, "alpha", {0.5});
        REQUIRE(table.rows.size() == 1);
        auto direct = with_axis(cfg, "alpha", 0.5);
        direct.output.dir = tmp / "direct";
        const auto art = run_experiment(direct);
        CHECK(table.rows[0].max_rel == art.seeds[0].trace.max_rel());
        CHECK(table.rows[0].mean_rel == art.seeds[0].trace.mean_rel());
        CHECK(table.rows[0].alpha == 0.5);
        CHECK(fs::exists(tmp / "ablation.csv"));
        CHECK(fs::exists(tmp / "alpha=0.5/seed_1/trace.csv"));
    }

    SUBCASE("a failing cell is recorded and the matrix continues") {
        const auto table = run_ablation_matrix(cfg, "local_epochs", {1, 1.5, 2});
        REQUIRE(table.rows.size() == 3);
        CHECK(table.rows[0].error.empty());
        CHECK(table.rows[1].error.find("integer") != std::string::npos);
        CHECK(table.rows[2].error.empty());
        CHECK(table.rows[2].seeds == 1);
        const auto csv = read_file(tmp / "ablation.csv");
        CHECK(csv.find("local_epochs=1.5") != std::string::npos);
    }

    SUBCASE("axes") {
        CHECK(with_axis(cfg, "client_fraction", 1.0).run.client_fraction == 1.0);
        CHECK(with_axis(cfg, "W_U", 1.5).variant.unknown_weight == 1.5);
        CHECK(with_axis(cfg, "F_U", 0.4).variant.unknown_fraction == 0.4);
        CHECK_THROWS_AS(with_axis(cfg, "alpha", -2.0), ConfigError);
        CHECK_THROWS_AS(with_axis(cfg, "lr", 0.1), ConfigError);
    }
}

TEST_CASE("report tables") {
    SUBCASE("empty trace set") {
        ReportTable t;
        t.checkpoints = evaluated_checkpoints({125, 250}, {});
        CHECK(t.checkpoints.empty());
        CHECK(table_to_csv(t) == "method,alpha,setting,seeds,max_rel,mean_rel,error\n");
    }

    SUBCASE("method by alpha layout with checkpoint columns") {
        const std::vector<int> cps{2, 4, 6};
        ReportTable t;
        t.checkpoints = cps;
        const std::vector<std::string> methods{"fedavg", "fedprox", "fedir", "fedos"};
        for (std::size_t m = 0; m < methods.size(); ++m) {
            const auto a = make_trace(methods[m], 0.01, {10, 30, 20, 40 + double(m), 35, 50});
            const auto b = make_trace(methods[m], 0.01, {20, 10, 30, 20, 60, 40});
            t.rows.push_back(summarize_traces(methods[m], 0.01, "", {a, b}, cps));
        }
        const auto csv = table_to_csv(t);
        CHECK(csv.substr(0, csv.find('\n')) == "method,alpha,setting,seeds,max_rel,mean_rel,rel@2,rel@4,rel@6,error");
        CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
        // fedavg: best-so-far at 2 = (30 + 20) / 2, at 4 = (40 + 30) / 2, at 6 = (50 + 60) / 2
        CHECK(csv.find("fedavg,0.01,,2,55,") != std::string::npos);
        CHECK(t.rows[0].at_checkpoint == std::vector<double>{25, 35, 55});
        CHECK(t.rows[3].at_checkpoint[1] == 36.5);
        CHECK(table_to_csv(t) == csv);
    }

    SUBCASE("checkpoints beyond the traces are dropped") {
        const auto a = make_trace("fedavg", 1, {1, 2, 3});
        CHECK(evaluated_checkpoints({2, 3, 125}, {a}) == std::vector<int>{2, 3});
        const auto row = summarize_traces("fedavg", 1, "", {a, make_trace("fedavg", 1, {5})}, {2});
        CHECK(std::isnan(row.at_checkpoint[0]));
    }

    SUBCASE("chart") {
        const auto a = make_trace("fedavg", 1, {10, 20, 30});
        const auto b = make_trace("fedos", 1, {15, 25, 35});
        const auto svg = line_chart_svg({mean_curve("fedavg", {a}), mean_curve("fedos", {b})}, "t", "round", "acc");
        std::size_t count = 0;
        for (auto pos = svg.find("<polyline"); pos != std::string::npos; pos = svg.find("<polyline", pos + 1)) ++count;
        CHECK(count == 2);
        CHECK(svg.rfind("<svg", 0) == 0);
        CHECK(mean_curve("x", {a, b}).y == std::vector<double>{12.5, 22.5, 32.5});
    }
}

TEST_CASE("emit_report lists missing traces and is deterministic") {
    TempDir tmp("report");
    auto cfg = small_config(tmp / "runA");
    cfg.run.seeds = {1, 2};
    run_experiment(cfg);
    auto b = cfg;
    b.variant.name = "fedir";
    b.output.dir = tmp / "runB";
    run_experiment(b);

    std::vector<ReportInput> inputs{report_input_from_dir(tmp / "runA"), report_input_from_dir(tmp / "runB"),
                                    report_input_from_dir(tmp / "nothing")};
    CHECK(inputs[0].trace_paths.size() == 2);
    CHECK(inputs[0].label == "runA");
    const auto out = emit_report(inputs, {1, 3, 500}, tmp / "rep1");
    CHECK(out.table.rows.size() == 2);
    CHECK(out.table.checkpoints == std::vector<int>{1, 3});
    REQUIRE(out.missing.size() == 1);
    CHECK(out.missing[0].find("nothing") != std::string::npos);
    emit_report(inputs, {1, 3, 500}, tmp / "rep2");
    CHECK(read_file(tmp / "rep1/report.csv") == read_file(tmp / "rep2/report.csv"));
    CHECK(read_file(tmp / "rep1/accuracy.svg") == read_file(tmp / "rep2/accuracy.svg"));
    const auto j = nlohmann::json::parse(read_file(tmp / "rep1/report.json"));
    CHECK(j["missing"].size() == 1);
}

TEST_CASE("partition inspection inputs") {
    const auto cfg = small_config("unused");
    const auto a = partition_spec(cfg, 5);
    CHECK(a.n_clients == 4);
    CHECK(a.samples_per_client == 100);
    CHECK(a.seed == 5);
    const auto r = round_config(cfg, 5);
    CHECK(r.rounds == 3);
    CHECK(r.client_fraction == 0.5);
    CHECK(r.seed == 5);
}

TEST_CASE("generator training entry point") {
    TempDir tmp("gan");
    auto cfg = parse_config(R"(
data:
  source: synthetic
  synthetic_size: 32
gan:
  pool_samples: 64
  latent_dim: 8
  generator_widths: [16, 8]
  discriminator_widths: [8]
  norm_groups: 2
  epochs: 1
)");
    cfg.output.dir = tmp.path.string();
    const auto run = run_gan_training(cfg, 3);
    CHECK(run.gan.history.size() == 1);
    CHECK(run.generator_parameters <= 2 * run.classifier_parameters);
    CHECK(fs::exists(tmp / "generator.fsw"));
    CHECK(fs::file_size(tmp / "samples.rgb") == 64 * 3 * 32 * 32);
    const auto loaded = TinyGanGenerator::deserialize(read_file(tmp / "generator.fsw"));
    CHECK(loaded.sample(3, 1) == run.gan.generator.sample(3, 1));

    cfg.gan.generator_widths = {512, 256};
    CHECK_THROWS_AS(run_gan_training(cfg, 3), ConfigError);
}
