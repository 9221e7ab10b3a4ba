#include "fedos/partition.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "fedos/bytes.hpp"
#include "fedos/rng.hpp"

namespace fedos {
namespace {

/// Capped largest-remainder fill; may stop short when no weighted entry has room.
std::vector<int> fill_capped(std::span<const double> weights, int total, std::span<const int> caps,
                             std::vector<int> result) {
    const std::size_t n = weights.size();
    int left = total;
    while (left > 0) {
        std::vector<std::size_t> open;
        double mass = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const bool room = caps.empty() || result[i] < caps[i];
            if (room && weights[i] > 0.0) {
                open.push_back(i);
                mass += weights[i];
            }
        }
        if (open.empty() || !(mass > 0.0)) break;

        std::vector<int> share(n, 0);
        std::vector<std::pair<double, std::size_t>> remainders;
        int given = 0;
        for (auto i : open) {
            const double exact = static_cast<double>(left) * weights[i] / mass;
            share[i] = static_cast<int>(std::floor(exact));
            given += share[i];
            remainders.emplace_back(exact - std::floor(exact), i);
        }
        std::stable_sort(remainders.begin(), remainders.end(),
                         [](const auto& a, const auto& b) { return a.first > b.first; });
        for (std::size_t r = 0; given < left && r < remainders.size(); ++r, ++given) {
            ++share[remainders[r].second];
        }
        int placed = 0;
        for (auto i : open) {
            const int room = caps.empty() ? share[i] : std::min(share[i], caps[i] - result[i]);
            result[i] += room;
            placed += room;
        }
        left -= placed;
        if (placed == 0) break;
    }
    return result;
}

} // namespace

std::vector<int> apportion(std::span<const double> weights, int total, std::span<const int> caps) {
    if (total < 0) throw ValueError("apportion: negative total");
    if (!caps.empty() && caps.size() != weights.size()) throw ShapeError("apportion", "caps size mismatch");
    auto result = fill_capped(weights, total, caps, std::vector<int>(weights.size(), 0));
    if (std::accumulate(result.begin(), result.end(), 0) != total) {
        throw ValueError("apportion: weights/caps cannot absorb " + std::to_string(total) + " units");
    }
    return result;
}

Partition dirichlet_partition(const Dataset& ds, const PartitionSpec& spec) {
    std::vector<int> order(static_cast<std::size_t>(std::max(spec.n_clients, 0)));
    std::iota(order.begin(), order.end(), 0);
    return dirichlet_partition(ds.labels, ds.num_classes, spec, order);
}

Partition dirichlet_partition(std::span<const int> labels, int num_classes, const PartitionSpec& spec,
                              std::span<const int> client_order) {
    if (spec.n_clients <= 0 || spec.samples_per_client <= 0) {
        throw ValueError("partition needs positive n_clients and samples_per_client");
    }
    if (!(spec.alpha > 0.0)) throw ValueError("partition alpha must be positive");
    if (static_cast<std::size_t>(spec.n_clients) * static_cast<std::size_t>(spec.samples_per_client) >
        labels.size()) {
        throw ValueError("n_clients x samples_per_client = " +
                         std::to_string(spec.n_clients * spec.samples_per_client) + " exceeds " +
                         std::to_string(labels.size()) + " source samples");
    }
    if (client_order.size() != static_cast<std::size_t>(spec.n_clients)) {
        throw ValueError("client order must list every client once");
    }
    const auto k = static_cast<std::size_t>(num_classes);

    std::vector<std::vector<int>> pools(k);
    for (std::size_t i = 0; i < labels.size(); ++i) pools[static_cast<std::size_t>(labels[i])].push_back(static_cast<int>(i));
    for (std::size_t c = 0; c < k; ++c) {
        CounterRng rng{spec.seed, 0x9001ULL, c};
        rng.shuffle(std::span<int>(pools[c]));
    }
    std::vector<std::size_t> cursor(k, 0);

    Partition part;
    part.num_classes = num_classes;
    part.assignments.assign(static_cast<std::size_t>(spec.n_clients), {});
    part.histograms.assign(static_cast<std::size_t>(spec.n_clients), std::vector<int>(k, 0));

    for (int client : client_order) {
        CounterRng rng{spec.seed, 0xd1c1ULL, static_cast<std::uint64_t>(client)};
        const auto p = rng.dirichlet(spec.alpha, num_classes);
        std::vector<int> available(k);
        for (std::size_t c = 0; c < k; ++c) available[c] = static_cast<int>(pools[c].size() - cursor[c]);

        auto counts = fill_capped(p, spec.samples_per_client, available, std::vector<int>(k, 0));
        int placed = std::accumulate(counts.begin(), counts.end(), 0);
        if (placed < spec.samples_per_client) {
            // No probability mass left on classes with stock: fall back to stock.
            std::vector<double> stock(k);
            for (std::size_t c = 0; c < k; ++c) stock[c] = static_cast<double>(available[c] - counts[c]);
            counts = fill_capped(stock, spec.samples_per_client - placed, available, std::move(counts));
            placed = std::accumulate(counts.begin(), counts.end(), 0);
        }
        if (placed != spec.samples_per_client) {
            throw ValueError("partition: source exhausted at client " + std::to_string(client));
        }
        auto& idx = part.assignments[static_cast<std::size_t>(client)];
        for (std::size_t c = 0; c < k; ++c) {
            for (int j = 0; j < counts[c]; ++j) idx.push_back(pools[c][cursor[c]++]);
        }
        std::sort(idx.begin(), idx.end());
        part.histograms[static_cast<std::size_t>(client)] = counts;
    }
    return part;
}

double dominant_share(std::span<const int> histogram) {
    const int total = std::accumulate(histogram.begin(), histogram.end(), 0);
    if (total == 0) return 0.0;
    return static_cast<double>(*std::max_element(histogram.begin(), histogram.end())) / total;
}

double histogram_entropy(std::span<const int> histogram) {
    const double total = std::accumulate(histogram.begin(), histogram.end(), 0.0);
    double h = 0.0;
    for (int c : histogram) {
        if (c > 0) {
            const double q = c / total;
            h -= q * std::log(q);
        }
    }
    return h;
}

std::string encode_partition(const Partition& p) {
    ByteWriter w;
    w.raw("FSP1");
    w.u32(static_cast<std::uint32_t>(p.n_clients()));
    w.u32(static_cast<std::uint32_t>(p.num_classes));
    for (const auto& a : p.assignments) {
        w.u32(static_cast<std::uint32_t>(a.size()));
        for (int i : a) w.u32(static_cast<std::uint32_t>(i));
    }
    return w.take();
}

Partition decode_partition(const std::string& bytes, std::span<const int> labels) {
    ByteReader r(bytes, "FSP1");
    r.expect_magic("FSP1");
    Partition p;
    const auto n = r.u32();
    p.num_classes = static_cast<int>(r.u32());
    for (std::uint32_t c = 0; c < n; ++c) {
        std::vector<int> idx(r.u32());
        std::vector<int> hist(static_cast<std::size_t>(p.num_classes), 0);
        for (auto& i : idx) {
            i = static_cast<int>(r.u32());
            if (static_cast<std::size_t>(i) >= labels.size()) throw IoError("FSP1: index out of range");
            ++hist[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])];
        }
        p.assignments.push_back(std::move(idx));
        p.histograms.push_back(std::move(hist));
    }
    return p;
}

std::string partition_summary_json(const Partition& p, const PartitionSpec& spec) {
    nlohmann::ordered_json j;
    j["format"] = "FSP1";
    j["n_clients"] = spec.n_clients;
    j["alpha"] = spec.alpha;
    j["samples_per_client"] = spec.samples_per_client;
    j["seed"] = spec.seed;
    j["num_classes"] = p.num_classes;
    auto clients = nlohmann::ordered_json::array();
    for (int c = 0; c < p.n_clients(); ++c) {
        const auto& h = p.histograms[static_cast<std::size_t>(c)];
        clients.push_back({{"id", c},
                           {"histogram", h},
                           {"dominant_share", dominant_share(h)},
                           {"entropy", histogram_entropy(h)}});
    }
    j["clients"] = clients;
    return j.dump(2) + "\n";
}

} // namespace fedos
