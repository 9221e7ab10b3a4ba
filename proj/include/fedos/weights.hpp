#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fedos/model.hpp"
#include "fedos/rng.hpp"
#include "fedos/tensor.hpp"

namespace fedos {

template <class Scalar>
struct Param {
    std::string name;
    Tensor<Scalar> value;
    bool trainable = true;

    bool operator==(const Param&) const = default;
};

/// Ordered collection of named tensors; the canonical order comes from `param_layout`.
template <class Scalar>
struct WeightSet {
    std::vector<Param<Scalar>> params;

    std::size_t size() const { return params.size(); }
    Param<Scalar>& operator[](std::size_t i) { return params[i]; }
    const Param<Scalar>& operator[](std::size_t i) const { return params[i]; }

    const Param<Scalar>* find(const std::string& name) const {
        for (const auto& p : params) {
            if (p.name == name) return &p;
        }
        return nullptr;
    }

    /// Same names and shapes, all values zero.
    WeightSet zeros_like() const {
        WeightSet out;
        out.params.reserve(params.size());
        for (const auto& p : params) {
            out.params.push_back({p.name, Tensor<Scalar>(p.value.shape), p.trainable});
        }
        return out;
    }

    template <class Other>
    WeightSet<Other> cast() const {
        WeightSet<Other> out;
        for (const auto& p : params) {
            out.params.push_back({p.name, p.value.template cast<Other>(), p.trainable});
        }
        return out;
    }

    bool all_finite() const {
        for (const auto& p : params) {
            if (!p.value.all_finite()) return false;
        }
        return true;
    }

    bool operator==(const WeightSet&) const = default;
};

/// Throws ShapeError unless `a` and `b` share names, order and shapes.
template <class A, class B>
void require_aligned(const WeightSet<A>& a, const WeightSet<B>& b, const std::string& context) {
    if (a.size() != b.size()) {
        throw ShapeError(context, "weight sets hold " + std::to_string(a.size()) + " and " +
                                      std::to_string(b.size()) + " tensors");
    }
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].name != b[i].name || a[i].value.shape != b[i].value.shape) {
            throw ShapeError(context, "tensor " + std::to_string(i) + " mismatch: " + a[i].name +
                                          shape_string(a[i].value.shape) + " vs " + b[i].name +
                                          shape_string(b[i].value.shape));
        }
    }
}

/// Kaiming-uniform weights U(-sqrt(6/fan_in), sqrt(6/fan_in)), zero biases,
/// norm affine (1, 0), running statistics (0, 1). Deterministic in `seed`.
template <class Scalar>
WeightSet<Scalar> init_weights(const ModelSpec& spec, std::uint64_t seed) {
    const auto layout = param_layout(spec);
    WeightSet<Scalar> w;
    for (std::size_t i = 0; i < layout.params.size(); ++i) {
        const auto& info = layout.params[i];
        Tensor<Scalar> t(info.shape);
        const auto ends_with = [&](const std::string& suffix) {
            return info.name.size() >= suffix.size() &&
                   info.name.compare(info.name.size() - suffix.size(), suffix.size(), suffix) == 0;
        };
        if (ends_with(".weight")) {
            const double bound = std::sqrt(6.0 / static_cast<double>(info.fan_in));
            CounterRng rng{seed, 0x5eedULL, i};
            for (Index k = 0; k < t.size(); ++k) {
                t.data[k] = static_cast<Scalar>(rng.uniform(-bound, bound));
            }
        } else if (ends_with(".scale") || ends_with(".running_var")) {
            t.data.setOnes();
        }
        w.params.push_back({info.name, std::move(t), info.trainable});
    }
    return w;
}

/// In-place w -= lr * g on trainable tensors.
template <class Scalar>
void sgd_update(WeightSet<Scalar>& weights, const WeightSet<Scalar>& grads, Scalar lr) {
    require_aligned(weights, grads, "sgd_step");
    for (std::size_t i = 0; i < weights.size(); ++i) {
        if (weights[i].trainable) {
            weights[i].value.data -= lr * grads[i].value.data;
        }
    }
}

template <class Scalar>
WeightSet<Scalar> sgd_step(WeightSet<Scalar> weights, const WeightSet<Scalar>& grads, Scalar lr) {
    if (!(lr >= Scalar(0))) {
        throw ValueError("learning rate must be non-negative");
    }
    sgd_update(weights, grads, lr);
    return weights;
}

/// Adam state for the adversarial trainer. The classifier path uses plain SGD.
template <class Scalar>
struct AdamState {
    WeightSet<Scalar> m;
    WeightSet<Scalar> v;
    int step = 0;
};

template <class Scalar>
void adam_update(WeightSet<Scalar>& weights, const WeightSet<Scalar>& grads, AdamState<Scalar>& state,
                 Scalar lr, Scalar beta1 = Scalar(0.5), Scalar beta2 = Scalar(0.999),
                 Scalar eps = Scalar(1e-8)) {
    if (state.m.size() == 0) {
        state.m = weights.zeros_like();
        state.v = weights.zeros_like();
    }
    ++state.step;
    const Scalar c1 = Scalar(1) - std::pow(beta1, Scalar(state.step));
    const Scalar c2 = Scalar(1) - std::pow(beta2, Scalar(state.step));
    for (std::size_t i = 0; i < weights.size(); ++i) {
        if (!weights[i].trainable) continue;
        auto& m = state.m[i].value.data;
        auto& v = state.v[i].value.data;
        const auto& g = grads[i].value.data;
        m = beta1 * m + (Scalar(1) - beta1) * g;
        v = beta2 * v + (Scalar(1) - beta2) * g.cwiseProduct(g);
        weights[i].value.data.array() -=
            lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
    }
}

// FSW1 container: "FSW1", u32 count, per tensor {u32 name_len, name, u8 rank,
// u32 dims[rank], f32 payload}, all little-endian. An optional trailer
// {"META", u32 len, JSON bytes} carries generator metadata.

struct RawTensor {
    std::string name;
    Shape shape;
    std::vector<float> values;
};

std::string encode_fsw1(const std::vector<RawTensor>& tensors, const std::optional<std::string>& metadata = {});

struct Fsw1Contents {
    std::vector<RawTensor> tensors;
    std::optional<std::string> metadata;
};

Fsw1Contents decode_fsw1(const std::string& bytes);

void write_file(const std::string& path, const std::string& bytes);
std::string read_file(const std::string& path);

template <class Scalar>
std::string encode_weights(const WeightSet<Scalar>& w, const std::optional<std::string>& metadata = {}) {
    std::vector<RawTensor> raw;
    raw.reserve(w.size());
    for (const auto& p : w.params) {
        RawTensor r{p.name, p.value.shape, std::vector<float>(static_cast<std::size_t>(p.value.size()))};
        for (Index k = 0; k < p.value.size(); ++k) {
            r.values[static_cast<std::size_t>(k)] = static_cast<float>(p.value.data[k]);
        }
        raw.push_back(std::move(r));
    }
    return encode_fsw1(raw, metadata);
}

/// Decodes into the layout of `spec`; names and shapes must match exactly.
template <class Scalar>
WeightSet<Scalar> decode_weights(const ModelSpec& spec, const std::string& bytes,
                                 std::optional<std::string>* metadata = nullptr) {
    auto contents = decode_fsw1(bytes);
    const auto layout = param_layout(spec);
    if (contents.tensors.size() != layout.params.size()) {
        throw ShapeError("FSW1", "container holds " + std::to_string(contents.tensors.size()) +
                                     " tensors, model expects " + std::to_string(layout.params.size()));
    }
    WeightSet<Scalar> w;
    for (std::size_t i = 0; i < layout.params.size(); ++i) {
        auto& raw = contents.tensors[i];
        const auto& info = layout.params[i];
        if (raw.name != info.name || raw.shape != info.shape) {
            throw ShapeError(info.name, "stored tensor " + raw.name + shape_string(raw.shape) +
                                            " does not match " + shape_string(info.shape));
        }
        Tensor<Scalar> t(info.shape);
        for (Index k = 0; k < t.size(); ++k) {
            t.data[k] = static_cast<Scalar>(raw.values[static_cast<std::size_t>(k)]);
        }
        w.params.push_back({info.name, std::move(t), info.trainable});
    }
    if (metadata) *metadata = contents.metadata;
    return w;
}

} // namespace fedos
