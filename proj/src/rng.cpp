#include "fedos/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "fedos/error.hpp"

namespace fedos {
namespace {

constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

} // namespace

std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts) {
    std::uint64_t h = 0x6a09e667f3bcc908ULL;
    for (auto p : parts) {
        h = mix64(h ^ mix64(p + kGolden));
    }
    return h;
}

std::uint64_t CounterRng::next_u64() {
    // Two rounds so that nearby keys do not produce correlated streams.
    return mix64(mix64(key_ + kGolden * ++counter_) ^ key_);
}

double CounterRng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t CounterRng::below(std::uint64_t n) {
    if (n == 0) {
        throw ValueError("CounterRng::below: n must be positive");
    }
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
        x = next_u64();
    } while (x >= limit);
    return x % n;
}

double CounterRng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

double CounterRng::log_gamma(double shape) {
    if (!(shape > 0.0)) {
        throw ValueError("gamma shape must be positive");
    }
    if (shape < 1.0) {
        // G(a) = G(a + 1) * U^(1/a)
        double u;
        do {
            u = uniform();
        } while (u <= 0.0);
        return log_gamma(shape + 1.0) + std::log(u) / shape;
    }
    // Marsaglia & Tsang.
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
        double x;
        double v;
        do {
            x = normal();
            v = 1.0 + c * x;
        } while (v <= 0.0);
        v = v * v * v;
        const double u = uniform();
        if (u < 1.0 - 0.0331 * x * x * x * x) {
            return std::log(d * v);
        }
        if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) {
            return std::log(d * v);
        }
    }
}

double CounterRng::gamma(double shape) { return std::exp(log_gamma(shape)); }

std::vector<double> CounterRng::dirichlet(double alpha, int k) {
    if (k <= 0) {
        throw ValueError("dirichlet: dimension must be positive");
    }
    std::vector<double> logs(static_cast<std::size_t>(k));
    for (auto& l : logs) {
        l = log_gamma(alpha);
    }
    const double top = *std::max_element(logs.begin(), logs.end());
    double total = 0.0;
    for (auto& l : logs) {
        l = std::exp(l - top);
        total += l;
    }
    for (auto& l : logs) {
        l /= total;
    }
    return logs;
}

std::vector<int> CounterRng::permutation(int n) {
    std::vector<int> p(static_cast<std::size_t>(n));
    std::iota(p.begin(), p.end(), 0);
    shuffle(std::span<int>(p));
    return p;
}

} // namespace fedos
