#pragma once

// Small shared problem builders for the federated and open-set tests.

#include <numeric>

#include "fedos/federated.hpp"

namespace fixture {

using namespace fedos;

/// A LeNet-shaped net on 16x16 inputs: quick enough to train many times per test.
inline ModelSpec tiny_spec(int k = 10, NormKind norm = NormKind::None, bool unknown_head = false) {
    ModelSpec s;
    s.input = {3, 16, 16};
    s.num_known_classes = k;
    s.has_unknown_head = unknown_head;
    s.layers.push_back(layer::Conv{6, 5});
    if (norm != NormKind::None) s.layers.push_back(layer::Norm{norm, 2});
    s.layers.push_back(layer::Act{Activation::Relu});
    s.layers.push_back(layer::AvgPool{2});
    s.layers.push_back(layer::Conv{16, 3});
    if (norm != NormKind::None) s.layers.push_back(layer::Norm{norm, 4});
    s.layers.push_back(layer::Act{Activation::Relu});
    s.layers.push_back(layer::AvgPool{2});
    s.layers.push_back(layer::Dense{32});
    s.layers.push_back(layer::Act{Activation::Relu});
    s.layers.push_back(layer::Dense{s.output_classes()});
    return s;
}

/// Synthetic train/validation pair, standardized with train statistics.
struct Problem {
    Dataset train;
    Dataset val;
    Preprocessor pre;

    TrainingData data() const { return {&train, &val, pre}; }
};

inline Problem make_problem(Index n, Index side, std::uint64_t seed, int k = 10) {
    auto raw = synthesize_dataset(k, n + n / 5, side, side, seed);
    auto [train, val] = split_holdout(raw, static_cast<double>(n / 5) / static_cast<double>(raw.size()), seed);
    Problem p;
    p.pre = fit_preprocessor(train, Preprocessing::Standardized);
    p.train = preprocess(train, Preprocessing::Standardized);
    p.val = preprocess(val, Preprocessing::Standardized, &p.pre.stats);
    return p;
}

inline Partition partition_from(const Dataset& ds, std::vector<std::vector<int>> assignments) {
    Partition p;
    p.num_classes = ds.num_classes;
    for (auto& a : assignments) {
        std::vector<int> h(static_cast<std::size_t>(ds.num_classes), 0);
        for (int i : a) ++h[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(i)])];
        p.assignments.push_back(std::move(a));
        p.histograms.push_back(std::move(h));
    }
    return p;
}

/// One client holding the whole training set.
inline Partition single_client(const Dataset& ds) {
    std::vector<int> all(static_cast<std::size_t>(ds.size()));
    std::iota(all.begin(), all.end(), 0);
    return partition_from(ds, {all});
}

/// `clients` clients with identical class histograms (every class split evenly).
inline Partition iid_partition(const Dataset& ds, int clients) {
    std::vector<std::vector<int>> pools(static_cast<std::size_t>(ds.num_classes));
    for (std::size_t i = 0; i < ds.labels.size(); ++i) pools[static_cast<std::size_t>(ds.labels[i])].push_back(static_cast<int>(i));
    std::size_t per_class = pools[0].size();
    for (const auto& p : pools) per_class = std::min(per_class, p.size());
    per_class -= per_class % static_cast<std::size_t>(clients);
    std::vector<std::vector<int>> a(static_cast<std::size_t>(clients));
    for (const auto& pool : pools) {
        for (std::size_t j = 0; j < per_class; ++j) a[j % static_cast<std::size_t>(clients)].push_back(pool[j]);
    }
    for (auto& v : a) std::sort(v.begin(), v.end());
    return partition_from(ds, std::move(a));
}

inline Partition dirichlet_clients(const Dataset& ds, int clients, int per_client, double alpha, std::uint64_t seed) {
    PartitionSpec spec;
    spec.n_clients = clients;
    spec.samples_per_client = per_client;
    spec.alpha = alpha;
    spec.seed = seed;
    return dirichlet_partition(ds, spec);
}

} // namespace fixture
