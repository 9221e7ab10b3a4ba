#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <map>
#include <set>

#include "fixtures.hpp"

using namespace fedos;
using fixture::make_problem;
using fixture::tiny_spec;

namespace {

bool same_records(const MetricTrace& a, const MetricTrace& b) {
    if (a.records.size() != b.records.size()) return false;
    for (std::size_t i = 0; i < a.records.size(); ++i) {
        const auto& x = a.records[i];
        const auto& y = b.records[i];
        if (x.round != y.round || x.train_loss != y.train_loss || x.val_acc != y.val_acc ||
            x.rel_val_acc != y.rel_val_acc || x.selected != y.selected) {
            return false;
        }
    }
    return true;
}

RoundConfig quick_config(int rounds, double fraction, std::uint64_t seed) {
    RoundConfig cfg;
    cfg.rounds = rounds;
    cfg.client_fraction = fraction;
    cfg.batch_size = 16;
    cfg.lr = 0.05;
    cfg.seed = seed;
    return cfg;
}

} // namespace

TEST_CASE("sample_clients") {
    SUBCASE("full fraction selects everyone") {
        const auto s = sample_clients(7, 1.0, 3, 1);
        CHECK(s == std::vector<int>{0, 1, 2, 3, 4, 5, 6});
    }
    SUBCASE("20% of 20 clients is 4 distinct ids") {
        for (int r = 1; r <= 50; ++r) {
            const auto s = sample_clients(20, 0.2, 9, r);
            CHECK(s.size() == 4);
            CHECK(std::set<int>(s.begin(), s.end()).size() == 4);
            CHECK(std::is_sorted(s.begin(), s.end()));
            CHECK(s.back() < 20);
        }
    }
    SUBCASE("at least one client") { CHECK(sample_clients(20, 0.01, 0, 1).size() == 1); }
    SUBCASE("deterministic per seed and round") {
        CHECK(sample_clients(20, 0.2, 5, 3) == sample_clients(20, 0.2, 5, 3));
        int differ = 0;
        for (int r = 1; r <= 20; ++r) differ += sample_clients(20, 0.2, 5, r) != sample_clients(20, 0.2, 5, r + 1);
        CHECK(differ > 10);
    }
    SUBCASE("selection frequency is uniform") {
        std::vector<int> hits(20, 0);
        for (int r = 1; r <= 10000; ++r) {
            for (int c : sample_clients(20, 0.2, 1234, r)) ++hits[static_cast<std::size_t>(c)];
        }
        for (int h : hits) CHECK(std::abs(h / 10000.0 - 0.2) <= 0.01);
    }
    SUBCASE("invalid fraction") {
        CHECK_THROWS_AS(sample_clients(20, 0.0, 0, 1), ValueError);
        CHECK_THROWS_AS(sample_clients(20, 1.5, 0, 1), ValueError);
    }
}

TEST_CASE("fedir_weights") {
    SUBCASE("client matching the global distribution gets unit weights") {
        const std::vector<int> q{30, 10, 60};
        const std::vector<double> p{0.3, 0.1, 0.6};
        for (double w : fedir_weights(q, p, 0.0)) CHECK(w == doctest::Approx(1.0).epsilon(1e-15));
    }
    SUBCASE("single-class client, smoothing 1, n = 2000") {
        std::vector<int> q(10, 0);
        q[0] = 2000;
        const std::vector<double> p(10, 0.1);
        const auto w = fedir_weights(q, p, 1.0);
        // q(0) = 2001/2010, q(other) = 1/2010.
        CHECK(w[0] == doctest::Approx(0.1 * 2010.0 / 2001.0).epsilon(1e-14));
        for (int c = 1; c < 10; ++c) CHECK(w[static_cast<std::size_t>(c)] == doctest::Approx(201.0).epsilon(1e-14));
    }
    SUBCASE("importance-sampling identity") {
        CounterRng rng{42};
        for (int trial = 0; trial < 20; ++trial) {
            std::vector<int> q(6);
            for (auto& c : q) c = 1 + static_cast<int>(rng.below(50));
            const auto p = rng.dirichlet(1.0, 6);
            std::vector<double> loss(6);
            for (auto& l : loss) l = rng.uniform(0.0, 5.0);
            const auto w = fedir_weights(q, p, 0.0);
            const double n = std::accumulate(q.begin(), q.end(), 0.0);
            double eq = 0.0, ep = 0.0;
            for (std::size_t y = 0; y < 6; ++y) {
                eq += q[y] / n * w[y] * loss[y];
                ep += p[y] * loss[y];
            }
            CHECK(eq == doctest::Approx(ep).epsilon(1e-12));
        }
    }
    SUBCASE("absent global class gives zero weight, absent local class stays finite") {
        const std::vector<int> q{5, 0, 5};
        const std::vector<double> p{0.5, 0.5, 0.0};
        const auto w = fedir_weights(q, p, 1.0);
        CHECK(w[2] == 0.0);
        CHECK(std::isfinite(w[1]));
        CHECK(w[1] > w[0]);
    }
    SUBCASE("errors") {
        const std::vector<int> q{1, 2};
        const std::vector<double> p{1.0};
        CHECK_THROWS_AS(fedir_weights(q, p, 1.0), ShapeError);
        const std::vector<double> p2{0.5, 0.5};
        CHECK_THROWS_AS(fedir_weights(q, p2, -1.0), ValueError);
    }
}

TEST_CASE("aggregate") {
    const auto spec = tiny_spec(10, NormKind::Batch);
    const auto base = init_weights<double>(spec, 1);

    SUBCASE("identical updates") {
        const std::vector<std::pair<WeightSet<double>, Index>> u{{base, 3}, {base, 5}};
        const auto agg = aggregate(u);
        for (std::size_t i = 0; i < base.size(); ++i) {
            CHECK((agg[i].value.data - base[i].value.data).cwiseAbs().maxCoeff() < 1e-15);
        }
    }
    SUBCASE("equal counts of zeros and ones average to one half") {
        auto zeros = base.zeros_like(), ones = base.zeros_like();
        for (auto& p : ones.params) p.value.data.setOnes();
        const auto agg = aggregate(std::vector<std::pair<WeightSet<double>, Index>>{{zeros, 10}, {ones, 10}});
        for (const auto& p : agg.params) CHECK((p.value.data.array() == 0.5).all());
    }
    SUBCASE("weighted arithmetic, running statistics included") {
        std::vector<std::pair<WeightSet<double>, Index>> u;
        for (auto [v, n] : {std::pair{3.0, 1}, {0.0, 2}, {1.0, 3}}) {
            auto w = base.zeros_like();
            for (auto& p : w.params) p.value.data.setConstant(v);
            u.emplace_back(w, n);
        }
        const auto agg = aggregate(u);
        for (const auto& p : agg.params) CHECK((p.value.data.array() - 1.0).abs().maxCoeff() < 1e-15);
        CHECK(agg.find("norm1.running_var")->value.data[0] == doctest::Approx(1.0));
    }
    SUBCASE("single update is returned unchanged") {
        const auto agg = aggregate(std::vector<std::pair<WeightSet<double>, Index>>{{base, 7}});
        CHECK(agg == base);
    }
    SUBCASE("convexity") {
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            std::vector<std::pair<WeightSet<double>, Index>> u;
            CounterRng rng{seed, 3};
            for (int c = 0; c < 4; ++c) u.emplace_back(init_weights<double>(spec, seed * 10 + c), 1 + rng.below(100));
            const auto agg = aggregate(u);
            for (std::size_t p = 0; p < agg.size(); ++p) {
                for (Index i = 0; i < agg[p].value.size(); ++i) {
                    double lo = 1e300, hi = -1e300;
                    for (const auto& [w, n] : u) {
                        lo = std::min(lo, w[p].value.data[i]);
                        hi = std::max(hi, w[p].value.data[i]);
                    }
                    CHECK(agg[p].value.data[i] >= lo - 1e-15);
                    CHECK(agg[p].value.data[i] <= hi + 1e-15);
                }
            }
        }
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(aggregate(std::vector<std::pair<WeightSet<double>, Index>>{}), ValueError);
        const auto other = init_weights<double>(tiny_spec(10), 1);
        CHECK_THROWS_AS(aggregate(std::vector<std::pair<WeightSet<double>, Index>>{{base, 1}, {other, 1}}),
                        ShapeError);
    }
}

TEST_CASE("local_train") {
    const auto prob = make_problem(200, 16, 3);
    const auto part = fixture::dirichlet_clients(prob.train, 2, 100, 0.5, 3);
    auto clients = make_clients(part);
    const auto dist = global_label_distribution(part);
    RoundConfig cfg = quick_config(1, 1.0, 3);
    cfg.local_epochs = 2;

    SUBCASE("zero learning rate leaves the weights unchanged") {
        for (auto norm : {NormKind::None, NormKind::Group}) {
            const auto spec = tiny_spec(10, norm);
            const auto w0 = init_weights<double>(spec, 5);
            auto c0 = cfg;
            c0.lr = 0.0;
            for (auto v : {VariantConfig::fedavg(), VariantConfig::fedprox(1.0), VariantConfig::fedir(1.0)}) {
                const auto r = local_train(spec, w0, prob.train, clients[0], c0, v, 1, dist);
                CHECK(r.weights == w0);
                CHECK(r.sample_count == 100);
                CHECK(r.mean_loss > 0.0);
            }
        }
    }
    SUBCASE("FedProx with mu 0 is FedAvg bit for bit") {
        const auto spec = tiny_spec(10, NormKind::Batch);
        const auto w0 = init_weights<float>(spec, 5);
        const auto a = local_train(spec, w0, prob.train, clients[1], cfg, VariantConfig::fedavg(), 4, dist);
        const auto b = local_train(spec, w0, prob.train, clients[1], cfg, VariantConfig::fedprox(0.0), 4, dist);
        CHECK(a.weights == b.weights);
        CHECK(a.mean_loss == b.mean_loss);
    }
    SUBCASE("FedProx gradient adds mu (w - w_global)") {
        // Two plain SGD steps on a one-batch client, replayed by hand.
        const auto spec = tiny_spec(10);
        const auto w0 = init_weights<double>(spec, 8);
        ClientState c = clients[0];
        c.indices.resize(16);
        auto c1 = cfg;
        c1.batch_size = 16;
        c1.local_epochs = 2;
        const double mu = 0.7;
        const auto got = local_train(spec, w0, prob.train, c, c1, VariantConfig::fedprox(mu), 2, dist);

        const std::vector<double> unit(10, 1.0);
        auto w = w0;
        for (int epoch = 0; epoch < 2; ++epoch) {
            const auto order = epoch_order(16, c1.seed, 2, c.id, epoch);
            std::vector<int> idx;
            for (int o : order) idx.push_back(c.indices[static_cast<std::size_t>(o)]);
            auto r = backward<double>(spec, w, prob.train.batch<double>(idx), unit);
            for (std::size_t p = 0; p < w.size(); ++p) {
                r.grads[p].value.data += mu * (w[p].value.data - w0[p].value.data);
            }
            sgd_update(w, r.grads, c1.lr);
        }
        for (std::size_t p = 0; p < w.size(); ++p) {
            CHECK((got.weights[p].value.data - w[p].value.data).cwiseAbs().maxCoeff() < 1e-13);
        }
    }
    SUBCASE("larger mu keeps the update closer to the global model") {
        const auto spec = tiny_spec(10);
        const auto w0 = init_weights<double>(spec, 2);
        auto c5 = cfg;
        c5.local_epochs = 5;
        const auto drift = [&](double mu) {
            const auto r = local_train(spec, w0, prob.train, clients[0], c5, VariantConfig::fedprox(mu), 1, dist);
            double d = 0.0;
            for (std::size_t p = 0; p < w0.size(); ++p) d += (r.weights[p].value.data - w0[p].value.data).squaredNorm();
            return d;
        };
        CHECK(drift(5.0) < drift(0.0));
        CHECK_THROWS_AS(drift(-1.0), ValueError);
    }
    SUBCASE("FedIR applies per-class loss weights") {
        const auto spec = tiny_spec(10);
        const auto w0 = init_weights<double>(spec, 2);
        const auto v = VariantConfig::fedir(1.0);
        const auto weights = client_class_weights(v, clients[0], 10, 10, dist);
        CHECK(weights == fedir_weights(clients[0].histogram, dist, 1.0));
        const auto a = local_train(spec, w0, prob.train, clients[0], cfg, v, 1, dist);
        const auto b = local_train(spec, w0, prob.train, clients[0], cfg, VariantConfig::fedavg(), 1, dist);
        CHECK_FALSE(a.weights == b.weights);
        CHECK_THROWS_AS(local_train(spec, w0, prob.train, clients[0], cfg, v, 1, {}), ValueError);
    }
    SUBCASE("deterministic and finite") {
        const auto spec = tiny_spec(10, NormKind::Group);
        const auto w0 = init_weights<float>(spec, 2);
        const auto a = local_train(spec, w0, prob.train, clients[0], cfg, VariantConfig::fedavg(), 3, dist);
        const auto b = local_train(spec, w0, prob.train, clients[0], cfg, VariantConfig::fedavg(), 3, dist);
        CHECK(a.weights == b.weights);
        CHECK(a.weights.all_finite());
    }
    SUBCASE("empty client") {
        const auto spec = tiny_spec(10);
        ClientState empty;
        empty.histogram.assign(10, 0);
        CHECK_THROWS_AS(local_train(spec, init_weights<float>(spec, 0), prob.train, empty, cfg,
                                    VariantConfig::fedavg(), 1, dist),
                        ValueError);
    }
}

TEST_CASE("evaluate") {
    const auto prob = make_problem(300, 16, 4);

    SUBCASE("constant predictor on a single-label set") {
        const auto spec = tiny_spec(10);
        auto w = init_weights<double>(spec, 1);
        auto& bias = w.params.back();
        auto& weight = w.params[w.size() - 2];
        weight.value.data.setZero();
        bias.value.data.setZero();
        bias.value.data[3] = 5.0;
        auto ds = prob.val;
        std::fill(ds.labels.begin(), ds.labels.end(), 3);
        CHECK(evaluate(spec, w, ds, false) == 1.0);
    }
    SUBCASE("random weights score chance on a balanced set") {
        const auto spec = lenet5(10);
        const auto ds = preprocess(synthesize_dataset(10, 500, 32, 32, 8), Preprocessing::Standardized);
        double sum = 0.0;
        for (std::uint64_t seed = 0; seed < 20; ++seed) sum += evaluate(spec, init_weights<float>(spec, seed), ds, false);
        CHECK(std::abs(sum / 20.0 - 0.1) <= 0.02);
    }
    SUBCASE("masking is a no-op without an unknown head") {
        const auto spec = tiny_spec(10);
        const auto w = init_weights<double>(spec, 6);
        CHECK(predict(spec, w, prob.val, true) == predict(spec, w, prob.val, false));
    }
    SUBCASE("masking ignores the unknown logit") {
        const auto spec = tiny_spec(10, NormKind::None, true);
        auto w = init_weights<double>(spec, 6);
        w.params.back().value.data[10] = 1e6;
        for (int p : predict(spec, w, prob.val, false)) CHECK(p == 10);
        for (int p : predict(spec, w, prob.val, true)) CHECK(p < 10);
    }
}

TEST_CASE("run_training") {
    const auto prob = make_problem(400, 16, 5);
    const auto spec = tiny_spec(10, NormKind::Batch);
    const auto part = fixture::dirichlet_clients(prob.train, 5, 80, 0.5, 5);

    SUBCASE("zero rounds returns the initial weights") {
        auto cfg = quick_config(0, 0.4, 1);
        const auto [state, trace] = run_training<float>(prob.data(), part, spec, cfg, VariantConfig::fedavg());
        CHECK(trace.records.empty());
        CHECK(state.weights == init_weights<float>(spec, derive_seed({1, 0x1417ULL})));
        CHECK(state.round == 0);
    }
    SUBCASE("trace bookkeeping") {
        auto cfg = quick_config(6, 0.4, 2);
        RunOptions opts;
        opts.alpha = 0.5;
        opts.reference_accuracy = 0.8;
        int calls = 0;
        opts.on_round = [&](const RoundRecord&) { ++calls; };
        const auto [state, trace] = run_training<float>(prob.data(), part, spec, cfg, VariantConfig::fedavg(), opts);
        REQUIRE(trace.records.size() == 6);
        CHECK(calls == 6);
        double best = -1.0;
        for (const auto& r : trace.records) {
            CHECK(r.selected.size() == 2);
            CHECK(r.rel_val_acc == doctest::Approx(100.0 * r.val_acc / 0.8));
            CHECK(std::isfinite(r.train_loss));
            best = std::max(best, r.val_acc);
        }
        CHECK(state.best_accuracy == best);
        CHECK(evaluate(spec, state.best_weights, prob.val, true) == best);
        CHECK(trace.max_val() == best);
        CHECK(trace.best_rel_until(6) == trace.max_rel());
        CHECK(trace.best_rel_until(0) == 0.0);
        CHECK(trace.variant == "fedavg");
        CHECK(trace.alpha == 0.5);
    }
    SUBCASE("rerun is bit-identical") {
        auto cfg = quick_config(3, 0.6, 7);
        const auto a = run_training<float>(prob.data(), part, spec, cfg, VariantConfig::fedavg());
        const auto b = run_training<float>(prob.data(), part, spec, cfg, VariantConfig::fedavg());
        CHECK(a.first.weights == b.first.weights);
        CHECK(same_records(a.second, b.second));
    }
    SUBCASE("parallel clients equal sequential clients") {
        auto cfg = quick_config(3, 1.0, 8);
        const auto seq = run_training<float>(prob.data(), part, spec, cfg, VariantConfig::fedprox(0.5));
        cfg.threads = 4;
        const auto par = run_training<float>(prob.data(), part, spec, cfg, VariantConfig::fedprox(0.5));
        CHECK(seq.first.weights == par.first.weights);
        CHECK(same_records(seq.second, par.second));
    }
    SUBCASE("FedProx mu 0 trace equals FedAvg") {
        auto cfg = quick_config(3, 0.6, 9);
        const auto a = run_training<float>(prob.data(), part, spec, cfg, VariantConfig::fedavg());
        const auto b = run_training<float>(prob.data(), part, spec, cfg, VariantConfig::fedprox(0.0));
        CHECK(a.first.weights == b.first.weights);
        CHECK(same_records(a.second, b.second));
    }
    SUBCASE("FedIR on identically distributed clients equals FedAvg") {
        const auto iid = fixture::iid_partition(prob.train, 4);
        const auto dist = global_label_distribution(iid);
        for (const auto& c : make_clients(iid)) {
            for (double w : fedir_weights(c.histogram, dist, 0.0)) CHECK(w == 1.0);
        }
        auto cfg = quick_config(3, 0.5, 10);
        const auto a = run_training<float>(prob.data(), iid, spec, cfg, VariantConfig::fedavg());
        const auto b = run_training<float>(prob.data(), iid, spec, cfg, VariantConfig::fedir(0.0));
        CHECK(a.first.weights == b.first.weights);
        CHECK(same_records(a.second, b.second));
    }
    SUBCASE("relative accuracy against itself is 100") {
        auto cfg = quick_config(2, 0.6, 11);
        const auto first = run_training<float>(prob.data(), part, spec, cfg, VariantConfig::fedavg());
        RunOptions opts;
        opts.reference_accuracy = first.second.records.back().val_acc;
        const auto again = run_training<float>(prob.data(), part, spec, cfg, VariantConfig::fedavg(), opts);
        CHECK(again.second.records.back().rel_val_acc == 100.0);
        CHECK(relative_accuracy(0.37, 0.37) == 100.0);
        CHECK_THROWS_AS(relative_accuracy(0.5, 0.0), ValueError);
    }
    SUBCASE("numerical blow-up aborts and names the round") {
        auto cfg = quick_config(5, 1.0, 12);
        cfg.lr = 1e5;
        try {
            run_training<float>(prob.data(), part, tiny_spec(10), cfg, VariantConfig::fedavg());
            FAIL("expected DivergenceError");
        } catch (const DivergenceError& e) {
            CHECK(e.round() >= 1);
            CHECK(e.round() <= 5);
        }
    }
    SUBCASE("invalid configuration") {
        auto cfg = quick_config(1, 0.0, 1);
        CHECK_THROWS_AS(run_training<float>(prob.data(), part, spec, cfg, VariantConfig::fedavg()), ValueError);
        cfg.client_fraction = 1.0;
        TrainingData missing;
        CHECK_THROWS_AS(run_training<float>(missing, part, spec, cfg, VariantConfig::fedavg()), ValueError);
    }
}

TEST_CASE("one client with full participation is centralized SGD") {
    const auto prob = make_problem(240, 32, 6);
    const auto spec = lenet5(10, NormKind::Batch);
    const auto part = fixture::single_client(prob.train);
    auto cfg = quick_config(3, 1.0, 13);
    const auto [state, trace] = run_training<double>(prob.data(), part, spec, cfg, VariantConfig::fedavg());

    // Centralized oracle: the same batch order, one epoch per round.
    auto w = init_weights<double>(spec, derive_seed({cfg.seed, 0x1417ULL}));
    const std::vector<double> unit(10, 1.0);
    for (int epoch = 1; epoch <= 3; ++epoch) {
        const auto order = epoch_order(static_cast<int>(prob.train.size()), cfg.seed, epoch, 0, 0);
        for (std::size_t s = 0; s < order.size(); s += 16) {
            const std::vector<int> idx(order.begin() + static_cast<std::ptrdiff_t>(s),
                                       order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), s + 16)));
            const auto r = backward<double>(spec, w, prob.train.batch<double>(idx), unit);
            sgd_update(w, r.grads, cfg.lr);
            apply_batch_stats(w, r.batch_stats);
        }
        CHECK(trace.records[static_cast<std::size_t>(epoch - 1)].val_acc == evaluate(spec, w, prob.val, true));
    }
    for (std::size_t p = 0; p < w.size(); ++p) {
        CHECK((state.weights[p].value.data - w[p].value.data).cwiseAbs().maxCoeff() <= 1e-12);
    }
}

TEST_CASE("trace CSV") {
    MetricTrace t;
    t.variant = "fedprox";
    t.alpha = 0.1;
    t.seed = 17;
    t.reference_accuracy = 0.6;
    t.records.push_back({1, 2.25, 0.3, 50.0, {0, 3}});
    t.records.push_back({2, 1.0 / 3.0, 0.35, 0.35 / 0.6 * 100.0, {1}});
    const auto csv = trace_to_csv(t, "abc123");
    CHECK(csv.find("# config_hash=abc123\n") == 0);
    CHECK(csv.find("round,variant,alpha,seed,train_loss,val_acc,rel_val_acc,selected_clients\n") != std::string::npos);
    CHECK(csv.find(",0;3\n") != std::string::npos);
    const auto back = trace_from_csv(csv);
    CHECK(back.variant == "fedprox");
    CHECK(back.seed == 17);
    CHECK(back.reference_accuracy == 0.6);
    CHECK(same_records(back, t));
    CHECK_THROWS_AS(trace_from_csv("1,2,3\n"), IoError);
}

TEST_CASE("variant names") {
    for (auto k : {VariantKind::FedAvg, VariantKind::FedProx, VariantKind::FedIR, VariantKind::FedOS}) {
        CHECK(variant_kind_from_string(to_string(k)) == k);
    }
    CHECK_THROWS_AS(variant_kind_from_string("fedsgd"), ValueError);
}
