// Acceptance runner. Prints one line per criterion:
//   criterion <n> <PASS|FAIL|BLOCKED> <title>: <measurements>
// BLOCKED means a required input (the CIFAR-10 binaries) is absent; the line
// says what is missing. The exit code is zero iff the set of failing criteria
// equals --expect-fail (empty by default), so a known shortfall stays visible
// as FAIL and an unexpected pass or failure still breaks the run.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "fedos/config.hpp"
#include "fedos/error.hpp"
#include "fedos/experiment.hpp"
#include "fixtures.hpp"
#include "gradcheck.hpp"

namespace fs = std::filesystem;
using namespace fedos;

namespace {

enum class Status { Pass, Fail, Blocked };

struct Verdict {
    Status status = Status::Fail;
    std::string detail;
};

const char* status_name(Status s) {
    switch (s) {
    case Status::Pass: return "PASS";
    case Status::Fail: return "FAIL";
    case Status::Blocked: return "BLOCKED";
    }
    return "?";
}

class Stopwatch {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(double v, int digits = 3) {
    std::ostringstream s;
    s.precision(digits);
    s << v;
    return s.str();
}

double mean(const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

bool same_records(const MetricTrace& a, const MetricTrace& b) {
    if (a.records.size() != b.records.size()) return false;
    for (std::size_t i = 0; i < a.records.size(); ++i) {
        const auto &x = a.records[i], &y = b.records[i];
        if (x.round != y.round || x.train_loss != y.train_loss || x.val_acc != y.val_acc ||
            x.rel_val_acc != y.rel_val_acc || x.selected != y.selected) {
            return false;
        }
    }
    return true;
}

template <class Scalar>
double max_abs_diff(const WeightSet<Scalar>& a, const WeightSet<Scalar>& b) {
    double worst = 0.0;
    for (std::size_t p = 0; p < a.size(); ++p) {
        const auto d = (a[p].value.data.template cast<double>() - b[p].value.data.template cast<double>());
        if (d.size() > 0) worst = std::max(worst, d.cwiseAbs().maxCoeff());
    }
    return worst;
}

// ---------------------------------------------------------------- 1

Verdict gradient_suite() {
    Stopwatch clock;
    double worst = 0.0;
    int checked = 0, cases = 0;
    bool complete = true;
    for (const auto& c : gradcheck::layer_cases()) {
        ++cases;
        int valid = 0;
        for (std::uint64_t seed = 0; valid < 10 && seed < 40; ++seed) {
            const double err = gradcheck::gradient_error(c.spec, seed, c.mode);
            if (err < 0.0) continue;  // draw too close to an activation kink
            worst = std::max(worst, err);
            ++valid;
        }
        checked += valid;
        complete = complete && valid == 10;
    }
    const double t = clock.seconds();
    const bool ok = complete && worst < 1e-4 && t < 120.0;
    return {ok ? Status::Pass : Status::Fail,
            "worst relative error " + fmt(worst) + " over " + std::to_string(cases) + " layer stacks, " +
                std::to_string(checked) + " seeded checks (need < 1e-4, 10 seeds each), " + fmt(t) + " s (need < 120)"};
}

// ---------------------------------------------------------------- 2

ExperimentConfig equivalence_config() {
    ExperimentConfig cfg;
    cfg.data.source = "synthetic";
    cfg.data.train_samples = 500;
    cfg.data.val_samples = 100;
    cfg.partition.clients = 4;
    cfg.partition.samples_per_client = 125;
    cfg.partition.alpha = 0.5;
    cfg.run.rounds = 4;
    cfg.run.client_fraction = 0.5;
    cfg.run.lr = 0.05;
    return cfg;
}

Verdict oracle_equivalences() {
    auto cfg = equivalence_config();
    const auto data = load_experiment_data(cfg);
    const std::uint64_t seed = 5;
    std::vector<std::string> notes;
    bool ok = true;
    const auto check = [&](const std::string& name, auto&& body) {
        Stopwatch clock;
        const bool pass = body();
        const double t = clock.seconds();
        ok = ok && pass && t < 60.0;
        notes.push_back(name + (pass ? " ok" : " MISMATCH") + " (" + fmt(t, 2) + " s)");
    };

    auto spec = experiment_model(cfg, data);
    const auto part = dirichlet_partition(data.train, partition_spec(cfg, seed));
    const auto rc = round_config(cfg, seed);

    check("FedProx(mu=0)==FedAvg", [&] {
        const auto a = run_training<float>(data.view(), part, spec, rc, VariantConfig::fedavg());
        const auto b = run_training<float>(data.view(), part, spec, rc, VariantConfig::fedprox(0.0));
        return a.first.weights == b.first.weights && same_records(a.second, b.second);
    });
    check("FedIR(q_k=p)==FedAvg", [&] {
        const auto iid = fixture::iid_partition(data.train, 4);
        const auto a = run_training<float>(data.view(), iid, spec, rc, VariantConfig::fedavg());
        const auto b = run_training<float>(data.view(), iid, spec, rc, VariantConfig::fedir(0.0));
        return a.first.weights == b.first.weights && same_records(a.second, b.second);
    });
    check("FedOS(F_U=0)==FedAvg on K+1 head", [&] {
        auto os_cfg = cfg;
        os_cfg.variant.name = "fedos";
        const auto open = experiment_model(os_cfg, data);
        UnknownConfig u;
        u.fraction = 0.0;
        u.weight = 2.5;
        u.generator = std::make_shared<NoiseGenerator>(open.input);
        const auto a = run_training<float>(data.view(), part, open, rc, VariantConfig::fedavg());
        const auto b = run_training<float>(data.view(), part, open, rc, VariantConfig::fedos(u));
        return a.first.weights == b.first.weights && same_records(a.second, b.second);
    });
    check("single client C=1 == centralized", [&] {
        auto central = cfg;
        central.run.mode = RunMode::Centralized;
        central.run.epochs = 3;
        const auto c = run_centralized(central, data, seed);
        auto one = rc;
        one.rounds = 3;
        one.client_fraction = 1.0;
        const auto f = run_training<float>(data.view(), fixture::single_client(data.train), spec, one,
                                           VariantConfig::fedavg());
        const double diff = max_abs_diff(c.final_weights, f.first.weights);
        bool acc = f.second.records.size() == c.trace.records.size();
        for (std::size_t i = 0; acc && i < c.trace.records.size(); ++i) {
            acc = std::abs(c.trace.records[i].val_acc - f.second.records[i].val_acc) <= 1e-12;
        }
        notes.push_back("max |w_central - w_fed| = " + fmt(diff));
        return diff <= 1e-12 && acc;
    });

    std::string detail;
    for (const auto& n : notes) detail += (detail.empty() ? "" : "; ") + n;
    return {ok ? Status::Pass : Status::Fail, detail + " [500 synthetic samples, LeNet-5]"};
}

// ---------------------------------------------------------------- 3

Verdict partition_statistics() {
    // Balanced labels the size of the CIFAR-10 training set; 20 clients x 2000.
    const int classes = 10, per_class = 5000;
    std::vector<int> labels;
    for (int i = 0; i < classes * per_class; ++i) labels.push_back(i % classes);
    std::vector<int> order(20);
    std::iota(order.begin(), order.end(), 0);

    const std::vector<double> alphas{0.01, 0.1, 1.0, 100.0};
    const int seeds = 20;
    bool exact = true, disjoint = true;
    std::vector<double> entropy;
    std::vector<double> shares_low;
    for (double alpha : alphas) {
        std::vector<double> h;
        for (int s = 0; s < seeds; ++s) {
            PartitionSpec spec{20, alpha, 2000, static_cast<std::uint64_t>(s)};
            const auto p = dirichlet_partition(labels, classes, spec, order);
            std::vector<char> used(labels.size(), 0);
            for (int k = 0; k < p.n_clients(); ++k) {
                const auto& a = p.assignments[static_cast<std::size_t>(k)];
                exact = exact && a.size() == 2000;
                std::vector<int> hist(classes, 0);
                for (int i : a) {
                    if (i < 0 || i >= static_cast<int>(labels.size()) || used[static_cast<std::size_t>(i)]) {
                        disjoint = false;
                        continue;
                    }
                    used[static_cast<std::size_t>(i)] = 1;
                    ++hist[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])];
                }
                exact = exact && hist == p.histograms[static_cast<std::size_t>(k)];
                h.push_back(histogram_entropy(hist));
                if (alpha == alphas.front()) shares_low.push_back(dominant_share(hist));
            }
        }
        entropy.push_back(mean(h));
    }
    bool monotone = true;
    for (std::size_t i = 1; i < entropy.size(); ++i) monotone = monotone && entropy[i] > entropy[i - 1];
    std::sort(shares_low.begin(), shares_low.end());
    const double median = shares_low[shares_low.size() / 2];

    std::string ent;
    for (std::size_t i = 0; i < alphas.size(); ++i) {
        ent += (i ? ", " : "") + fmt(alphas[i]) + ":" + fmt(entropy[i]);
    }
    const bool ok = exact && disjoint && monotone && median >= 0.95;
    return {ok ? Status::Pass : Status::Fail,
            std::string("disjoint ") + (disjoint ? "yes" : "NO") + ", exact 2000/client " + (exact ? "yes" : "NO") +
                ", mean client entropy (nats) by alpha {" + ent + "} " + (monotone ? "increasing" : "NOT increasing") +
                ", median dominant share at alpha=0.01 " + fmt(median) + " (need >= 0.95); " +
                std::to_string(seeds) + " seeds x 20 clients per alpha"};
}

// ---------------------------------------------------------------- 4, 5

bool cifar_present(const ExperimentConfig& cfg) {
    const fs::path dir = cifar_dir(cfg);
    if (dir.empty() || !fs::is_directory(dir)) return false;
    for (const char* f : {"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin",
                          "data_batch_5.bin", "test_batch.bin"}) {
        if (!fs::exists(dir / f)) return false;
    }
    return true;
}

Verdict blocked_without_cifar(const ExperimentConfig& cfg) {
    const std::string where = cifar_dir(cfg);
    return {Status::Blocked, "CIFAR-10 binary batches not found (looked in '" + where +
                                 "'; set FEDOS_DATA_ROOT to the directory holding cifar-10-batches-bin)"};
}

Verdict centralized_desk() {
    ExperimentConfig cfg;
    cfg.run.mode = RunMode::Centralized;
    cfg.data.train_samples = 10000;
    cfg.run.epochs = 20;
    cfg.run.lr = 0.1;
    if (!cifar_present(cfg)) return blocked_without_cifar(cfg);

    Stopwatch clock;
    const std::vector<std::pair<Preprocessing, const char*>> modes{
        {Preprocessing::Standardized, "standardized"}, {Preprocessing::Scaled, "scaled"}, {Preprocessing::Raw, "raw"}};
    std::vector<double> best, final_acc;
    for (const auto& [pre, name] : modes) {
        cfg.data.preprocessing = pre;
        const auto data = load_experiment_data(cfg);
        std::vector<double> b, f;
        for (std::uint64_t seed : {0, 1, 2}) {
            try {
                const auto r = run_centralized(cfg, data, seed);
                b.push_back(r.trace.max_val());
                f.push_back(r.trace.final_val());
            } catch (const DivergenceError&) {
                b.push_back(0.0);  // a diverged run contributes chance-or-worse
                f.push_back(0.0);
            }
        }
        best.push_back(mean(b));
        final_acc.push_back(mean(f));
    }
    const double t = clock.seconds();
    const bool ordering = best[0] >= best[1] && best[1] >= best[2];
    const bool ok = final_acc[0] >= 0.35 && ordering && t < 1800.0;
    return {ok ? Status::Pass : Status::Fail,
            "standardized final val acc " + fmt(final_acc[0]) + " (need >= 0.35); best-over-epochs seed mean " +
                "standardized " + fmt(best[0]) + ", scaled " + fmt(best[1]) + ", raw " + fmt(best[2]) +
                (ordering ? " (ordered)" : " (NOT ordered)") + "; " + fmt(t, 4) + " s (need < 1800)"};
}

/// Seed-averaged metric of one federated configuration, written under `dir`.
struct Arm {
    std::vector<MetricTrace> traces;

    double mean_of(double (MetricTrace::*metric)() const) const {
        std::vector<double> v;
        for (const auto& t : traces) v.push_back((t.*metric)());
        return mean(v);
    }
};

Arm run_arm(ExperimentConfig cfg, const fs::path& dir, const ExperimentData* data = nullptr) {
    cfg.output.dir = dir.string();
    const auto art = run_experiment(cfg, data);
    Arm arm;
    for (const auto& s : art.seeds) arm.traces.push_back(s.trace);
    return arm;
}

/// Federated desk scale shared by the trend criteria: 8 clients drawing 200
/// samples each from a 4000-image pool (so low alpha can isolate classes),
/// 500 validation images, 32 x 32 LeNet-5, C = 0.25 (two clients a round),
/// three seeds.
ExperimentConfig desk_config() {
    ExperimentConfig cfg;
    cfg.data.source = "synthetic";
    cfg.data.train_samples = 4000;
    cfg.data.val_samples = 500;
    cfg.partition.clients = 8;
    cfg.partition.samples_per_client = 200;
    cfg.run.client_fraction = 0.25;
    cfg.run.seeds = {1, 2, 3};
    return cfg;
}

Verdict heterogeneity_trend(const fs::path& work) {
    ExperimentConfig cfg;
    cfg.data.train_samples = 10000;
    cfg.data.val_samples = 2000;
    cfg.partition.clients = 8;
    cfg.partition.samples_per_client = 1000;
    cfg.run.client_fraction = 0.5;
    cfg.run.rounds = 30;
    cfg.run.seeds = {1, 2, 3};
    if (!cifar_present(cfg)) return blocked_without_cifar(cfg);

    const auto data = load_experiment_data(cfg);
    cfg.partition.alpha = 100.0;
    const auto iid = run_arm(cfg, work / "c5" / "alpha=100", &data);
    cfg.partition.alpha = 0.01;
    const auto skew = run_arm(cfg, work / "c5" / "alpha=0.01", &data);
    const double gap = 100.0 * (iid.mean_of(&MetricTrace::final_val) - skew.mean_of(&MetricTrace::final_val));
    return {gap >= 5.0 ? Status::Pass : Status::Fail,
            "FedAvg final val acc alpha=100 " + fmt(iid.mean_of(&MetricTrace::final_val)) + " vs alpha=0.01 " +
                fmt(skew.mean_of(&MetricTrace::final_val)) + ", gap " + fmt(gap) + " points (need >= 5)"};
}

// ---------------------------------------------------------------- 6

Verdict normalization_trend(const fs::path& work) {
    auto cfg = desk_config();
    cfg.run.rounds = 30;
    const auto data = load_experiment_data(cfg);
    const auto arm = [&](double alpha, NormKind norm, const char* tag) {
        auto c = cfg;
        c.partition.alpha = alpha;
        c.model.norm = norm;
        return run_arm(c, work / "c6" / (std::string(tag) + "_alpha=" + fmt(alpha)), &data).mean_of(&MetricTrace::mean_val);
    };
    const double bn_hi = arm(100.0, NormKind::Batch, "batch");
    const double none_hi = arm(100.0, NormKind::None, "none");
    const double gn_lo = arm(0.01, NormKind::Group, "group");
    const double bn_lo = arm(0.01, NormKind::Batch, "batch");
    const bool ok = bn_hi >= none_hi && gn_lo >= bn_lo;
    return {ok ? Status::Pass : Status::Fail,
            "mean val acc over rounds, seed mean: alpha=100 batch " + fmt(bn_hi) + " vs none " + fmt(none_hi) +
                "; alpha=0.01 group " + fmt(gn_lo) + " vs batch " + fmt(bn_lo) +
                " [synthetic desk scale: 8 clients x 200, C=0.25, 30 rounds, 3 seeds]"};
}

// ---------------------------------------------------------------- 7

Verdict fedos_trend(const fs::path& work) {
    auto cfg = desk_config();
    cfg.run.rounds = 60;
    const auto data = load_experiment_data(cfg);
    const auto pair = [&](double alpha, double w_u, double f_u) {
        auto c = cfg;
        c.partition.alpha = alpha;
        const auto tag = "alpha=" + fmt(alpha);
        const auto avg = run_arm(c, work / "c7" / ("fedavg_" + tag), &data);
        c.variant.name = "fedos";
        c.variant.unknown_weight = w_u;
        c.variant.unknown_fraction = f_u;
        c.variant.generator = "gaussian_fit";
        const auto os = run_arm(c, work / "c7" / ("fedos_" + tag), &data);
        return std::pair{avg, os};
    };
    const auto [avg_lo, os_lo] = pair(0.01, 1.0, 0.8);
    const auto [avg_mid, os_mid] = pair(1.0, 1.5, 0.4);
    const double a = avg_lo.mean_of(&MetricTrace::mean_rel), b = os_lo.mean_of(&MetricTrace::mean_rel);
    const double c = avg_mid.mean_of(&MetricTrace::max_rel), d = os_mid.mean_of(&MetricTrace::max_rel);
    const bool ok = b >= a && d >= c;
    return {ok ? Status::Pass : Status::Fail,
            "alpha=0.01 (W_U=1, F_U=0.8) mean rel acc FedOS " + fmt(b) + " vs FedAvg " + fmt(a) +
                "; alpha=1 (W_U=1.5, F_U=0.4) max rel acc FedOS " + fmt(d) + " vs FedAvg " + fmt(c) +
                " [synthetic desk scale: 8 clients x 200, C=0.25, 60 rounds, 3 seeds, GaussianFit generator]"};
}

// ---------------------------------------------------------------- 8

bool same_tree(const fs::path& a, const fs::path& b, int& files) {
    std::set<fs::path> names_a, names_b;
    for (const auto& e : fs::recursive_directory_iterator(a)) {
        if (e.is_regular_file()) names_a.insert(fs::relative(e.path(), a));
    }
    for (const auto& e : fs::recursive_directory_iterator(b)) {
        if (e.is_regular_file()) names_b.insert(fs::relative(e.path(), b));
    }
    if (names_a != names_b) return false;
    files = static_cast<int>(names_a.size());
    for (const auto& n : names_a) {
        if (read_file((a / n).string()) != read_file((b / n).string())) return false;
    }
    return true;
}

Verdict determinism(const fs::path& work) {
    auto cfg = equivalence_config();
    cfg.partition.clients = 5;
    cfg.partition.samples_per_client = 100;
    cfg.partition.alpha = 0.1;
    cfg.run.rounds = 3;
    cfg.run.client_fraction = 0.8;
    cfg.run.seeds = {3, 4};
    cfg.variant.name = "fedos";
    cfg.variant.unknown_fraction = 0.5;
    cfg.model.norm = NormKind::Group;

    // rerun in place; the first run's tree is kept as a snapshot
    const auto out = work / "c8" / "run", snapshot = work / "c8" / "first";
    fs::remove_all(work / "c8");
    cfg.output.dir = out.string();
    const auto a = run_experiment(cfg);
    fs::copy(out, snapshot, fs::copy_options::recursive);
    const auto b = run_experiment(cfg);
    int files = 0;
    const bool rerun = a.config_hash == b.config_hash && same_tree(snapshot, out, files);

    // parallel clients: only run.threads differs
    const auto data = load_experiment_data(cfg);
    auto par = cfg;
    par.run.threads = 4;
    const auto seq_run = run_federated(cfg, data, 3);
    const auto par_run = run_federated(par, data, 3);
    const bool parallel = seq_run.state.weights == par_run.state.weights &&
                          same_records(seq_run.trace, par_run.trace);

    return {rerun && parallel ? Status::Pass : Status::Fail,
            std::string("rerun with hash ") + a.config_hash + ": " + std::to_string(files) + " files " +
                (rerun ? "byte-identical" : "DIFFER") + "; 4 threads vs 1 thread (4 clients per round): " +
                (parallel ? "identical weights and trace" : "DIFFER")};
}

// ---------------------------------------------------------------- 9

Verdict gan_sanity(const fs::path& work) {
    ExperimentConfig cfg;
    cfg.data.source = "synthetic";
    cfg.output.dir = (work / "c9").string();
    Stopwatch clock;
    std::optional<GanRun> trained;
    try {
        trained.emplace(run_gan_training(cfg, 0));
    } catch (const DivergenceError& e) {
        return {Status::Fail, std::string("non-finite loss: ") + e.what()};
    }
    const auto& run = *trained;
    const double ratio =
        static_cast<double>(run.generator_parameters) / static_cast<double>(run.classifier_parameters);
    const bool ok = run.mean_image_error <= 0.2 && ratio <= 2.0;
    return {ok ? Status::Pass : Status::Fail,
            "pool " + std::to_string(cfg.gan.pool_samples) + " images, " + std::to_string(cfg.gan.epochs) +
                " epochs, losses finite; per-pixel mean relative error " + fmt(run.mean_image_error) +
                " (need <= 0.2); generator " + std::to_string(run.generator_parameters) + " params = " + fmt(ratio) +
                " x classifier (need <= 2); discriminator accuracy " + fmt(run.discriminator_accuracy) +
                " (informational); " + fmt(clock.seconds(), 4) + " s"};
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria runner"};
    std::vector<int> only, expect_fail;
    std::string work = "acceptance_work";
    app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',');
    app.add_option("--expect-fail", expect_fail, "criteria known to fail")->delimiter(',');
    app.add_option("--work", work, "directory for run artifacts");
    CLI11_PARSE(app, argc, argv);

    const fs::path dir(work);
    fs::create_directories(dir);
    const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria{
        {"gradient suite", gradient_suite},
        {"oracle equivalences", oracle_equivalences},
        {"partition statistics", partition_statistics},
        {"centralized desk scale", centralized_desk},
        {"heterogeneity trend", [&] { return heterogeneity_trend(dir); }},
        {"normalization trend", [&] { return normalization_trend(dir); }},
        {"FedOS trend", [&] { return fedos_trend(dir); }},
        {"determinism and parallelism", [&] { return determinism(dir); }},
        {"generator sanity", [&] { return gan_sanity(dir); }},
    };

    std::ofstream report(dir / "acceptance.txt");
    const auto emit = [&](const std::string& line) {
        std::cout << line << std::endl;
        report << line << '\n';
    };
    std::set<int> failed;
    int passed = 0, blocked = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int n = static_cast<int>(i) + 1;
        if (!only.empty() && std::find(only.begin(), only.end(), n) == only.end()) continue;
        Verdict v;
        try {
            v = criteria[i].second();
        } catch (const std::exception& e) {
            v = {Status::Fail, std::string("error: ") + e.what()};
        }
        if (v.status == Status::Fail) failed.insert(n);
        passed += v.status == Status::Pass ? 1 : 0;
        blocked += v.status == Status::Blocked ? 1 : 0;
        emit("criterion " + std::to_string(n) + ' ' + status_name(v.status) + ' ' + criteria[i].first + ": " +
             v.detail);
    }
    std::set<int> expected;
    for (int n : expect_fail) {
        if (only.empty() || std::find(only.begin(), only.end(), n) != only.end()) expected.insert(n);
    }
    std::string expected_list;
    for (int n : expected) expected_list += (expected_list.empty() ? "" : ",") + std::to_string(n);
    emit("summary: " + std::to_string(passed) + " PASS, " + std::to_string(failed.size()) + " FAIL, " +
         std::to_string(blocked) + " BLOCKED; expected failures {" + expected_list + "}" +
         (failed == expected ? "" : " - MISMATCH"));
    return failed == expected ? 0 : 1;
}
