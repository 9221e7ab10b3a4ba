#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

namespace fedos {

/// Mixes a sequence of integers into a single 64-bit stream key.
std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts);

/// Counter-based generator: output i is a bijective mix of (key, i).
///
/// Streams are keyed, so any (seed, round, client) triple can be reconstructed
/// without replaying earlier draws. All distributions below are implemented
/// here rather than through <random> so results are identical across
/// standard libraries.
class CounterRng {
public:
    explicit CounterRng(std::uint64_t key) : key_(key) {}
    CounterRng(std::initializer_list<std::uint64_t> parts) : key_(derive_seed(parts)) {}

    std::uint64_t next_u64();

    /// Uniform in [0, 1) with 53 random bits.
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Unbiased integer in [0, n).
    std::uint64_t below(std::uint64_t n);

    double normal();
    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// log of a Gamma(shape, 1) draw; stays finite for tiny shapes where the
    /// draw itself underflows.
    double log_gamma(double shape);
    double gamma(double shape);

    /// Dirichlet(alpha * 1_k) sample, normalised in log space.
    std::vector<double> dirichlet(double alpha, int k);

    template <class T>
    void shuffle(std::span<T> items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

    std::vector<int> permutation(int n);

    std::uint64_t key() const noexcept { return key_; }
    std::uint64_t counter() const noexcept { return counter_; }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace fedos
