#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fedos/dataset.hpp"

namespace fedos {

struct PartitionSpec {
    int n_clients = 20;
    double alpha = 1.0;
    int samples_per_client = 2000;
    std::uint64_t seed = 0;
};

/// Per-client sample indices into the source dataset plus class histograms.
struct Partition {
    int num_classes = 0;
    std::vector<std::vector<int>> assignments;
    std::vector<std::vector<int>> histograms;

    int n_clients() const { return static_cast<int>(assignments.size()); }
};

/// Splits `total` into integer parts proportional to `weights` that sum to
/// exactly `total` (largest remainder, ties to the lowest index). Parts are
/// capped by `caps` when given; the excess flows to uncapped entries.
std::vector<int> apportion(std::span<const double> weights, int total, std::span<const int> caps = {});

/// Label-skewed split. Client k draws class proportions from
/// Dirichlet(alpha * 1_K) on its own stream (seed, k), turns them into exact
/// per-class counts summing to samples_per_client, and takes that many unused
/// indices from shuffled per-class pools. When a pool runs dry the shortfall
/// is redistributed over the client's remaining classes in proportion to its
/// probabilities (or to pool availability if those are all zero).
Partition dirichlet_partition(const Dataset& ds, const PartitionSpec& spec);

/// Same, with labels given directly and an explicit client processing order.
Partition dirichlet_partition(std::span<const int> labels, int num_classes, const PartitionSpec& spec,
                              std::span<const int> client_order);

/// Fraction of the client's samples in its most frequent class.
double dominant_share(std::span<const int> histogram);

/// Shannon entropy (nats) of a histogram.
double histogram_entropy(std::span<const int> histogram);

// FSP1 container: "FSP1", u32 n_clients, u32 K, per client {u32 count, u32 idx[count]}.
std::string encode_partition(const Partition& p);
Partition decode_partition(const std::string& bytes, std::span<const int> labels);

/// JSON sidecar with per-client histograms.
std::string partition_summary_json(const Partition& p, const PartitionSpec& spec);

} // namespace fedos
