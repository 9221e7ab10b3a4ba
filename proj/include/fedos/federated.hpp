#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <future>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedos/dataset.hpp"
#include "fedos/network.hpp"
#include "fedos/open_set.hpp"
#include "fedos/partition.hpp"
#include "fedos/rng.hpp"
#include "fedos/weights.hpp"

namespace fedos {

struct RoundConfig {
    int rounds = 30;
    double client_fraction = 0.2;
    int local_epochs = 1;
    int batch_size = 32;
    double lr = 0.1;
    std::uint64_t seed = 0;
    int threads = 1;  // concurrent local_train calls per round
};

enum class VariantKind { FedAvg, FedProx, FedIR, FedOS };

std::string to_string(VariantKind kind);
VariantKind variant_kind_from_string(const std::string& name);

struct VariantConfig {
    VariantKind kind = VariantKind::FedAvg;
    double mu = 1.0;         // FedProx
    double smoothing = 1.0;  // FedIR additive count smoothing
    UnknownConfig unknown;   // FedOS

    static VariantConfig fedavg() { return {}; }
    static VariantConfig fedprox(double mu) { return {VariantKind::FedProx, mu, 1.0, {}}; }
    static VariantConfig fedir(double smoothing) { return {VariantKind::FedIR, 1.0, smoothing, {}}; }
    static VariantConfig fedos(UnknownConfig u) { return {VariantKind::FedOS, 1.0, 1.0, std::move(u)}; }
};

/// A client's view: its sample indices, label histogram, and (FedOS) the
/// cached, already preprocessed unknown images.
struct ClientState {
    int id = 0;
    std::vector<int> indices;
    std::vector<int> histogram;
    RowMatrix<float> unknown_images;

    Index local_count() const { return static_cast<Index>(indices.size()); }
};

std::vector<ClientState> make_clients(const Partition& partition);

/// Normalised total label histogram over all clients.
std::vector<double> global_label_distribution(const Partition& partition);

/// max(1, round(C * n)) distinct ids, uniform without replacement, sorted.
/// Deterministic per (seed, round).
std::vector<int> sample_clients(int n_clients, double fraction, std::uint64_t seed, int round);

/// Label-marginal importance weights p(y) / q_k(y), with q_k the client
/// histogram after adding `smoothing` to every class count.
std::vector<double> fedir_weights(std::span<const int> client_histogram, std::span<const double> global_distribution,
                                  double smoothing);

/// Visiting order for one local epoch; the stream is keyed by (seed, round, client, epoch).
std::vector<int> epoch_order(int count, std::uint64_t seed, int round, int client, int epoch);

/// Stream key for a client's unknown-sample cache.
std::uint64_t unknown_cache_seed(std::uint64_t seed, int client, int round = -1, int epoch = -1);

struct RoundRecord {
    int round = 0;
    double train_loss = 0.0;
    double val_acc = 0.0;
    double rel_val_acc = 0.0;
    std::vector<int> selected;
};

/// Per-round metrics. rel_val_acc = 100 * val_acc / reference_accuracy.
struct MetricTrace {
    std::string variant;
    double alpha = 0.0;
    std::uint64_t seed = 0;
    double reference_accuracy = 1.0;
    std::vector<RoundRecord> records;

    double max_rel() const;
    double mean_rel() const;
    double max_val() const;
    double mean_val() const;
    double final_val() const;
    /// Best relative accuracy among rounds <= `round`.
    double best_rel_until(int round) const;
};

double relative_accuracy(double accuracy, double reference);

/// CSV with a '#' provenance header (config hash, seed, reference accuracy)
/// followed by: round,variant,alpha,seed,train_loss,val_acc,rel_val_acc,selected_clients
std::string trace_to_csv(const MetricTrace& trace, const std::string& config_hash);
MetricTrace trace_from_csv(const std::string& text);

template <class Scalar>
struct LocalResult {
    WeightSet<Scalar> weights;
    Index sample_count = 0;
    double mean_loss = 0.0;
};

/// Per-class loss weights for a client under `variant` on a model with `output_classes` outputs.
std::vector<double> client_class_weights(const VariantConfig& variant, const ClientState& client, int output_classes,
                                         int num_known_classes, std::span<const double> global_distribution);

/// E epochs of mini-batch SGD from `global`. FedProx adds mu * (w - global)
/// to every trainable gradient; FedIR reweights classes by p(y)/q_k(y);
/// FedOS trains on the union of local and cached unknown samples (label K)
/// with the unknown class weighted by W_U.
template <class Scalar>
LocalResult<Scalar> local_train(const ModelSpec& spec, const WeightSet<Scalar>& global, const Dataset& data,
                                const ClientState& client, const RoundConfig& cfg, const VariantConfig& variant,
                                int round, std::span<const double> global_distribution = {},
                                const Preprocessor* unknown_pre = nullptr) {
    if (client.local_count() == 0) throw ValueError("client " + std::to_string(client.id) + " has no data");
    if (cfg.batch_size <= 0 || cfg.local_epochs < 0) throw ValueError("invalid batch size or local epochs");
    if (variant.kind == VariantKind::FedOS && !spec.has_unknown_head) {
        throw ValueError("FedOS needs a model with an unknown-class head");
    }
    const int known = spec.num_known_classes;
    const auto cw_d = client_class_weights(variant, client, spec.output_classes(), known, global_distribution);
    std::vector<Scalar> class_weights(cw_d.begin(), cw_d.end());
    const Scalar lr = static_cast<Scalar>(cfg.lr);
    const Scalar mu = static_cast<Scalar>(variant.mu);
    if (variant.kind == VariantKind::FedProx && !(variant.mu >= 0.0)) throw ValueError("FedProx mu must be >= 0");
    const bool prox = variant.kind == VariantKind::FedProx && variant.mu != 0.0;
    const bool fedos = variant.kind == VariantKind::FedOS;

    LocalResult<Scalar> out{global, client.local_count(), 0.0};
    const Index n_local = client.local_count();
    double loss_sum = 0.0;
    int steps = 0;
    for (int epoch = 0; epoch < cfg.local_epochs; ++epoch) {
        RowMatrix<float> resampled;
        const RowMatrix<float>* unknown = fedos ? &client.unknown_images : nullptr;
        if (fedos && variant.unknown.resample_each_epoch && variant.unknown.generator) {
            resampled = generate_unknown_images(*variant.unknown.generator, client.unknown_images.rows(),
                                                unknown_cache_seed(cfg.seed, client.id, round, epoch), spec.input,
                                                unknown_pre);
            unknown = &resampled;
        }
        const Index n_unknown = unknown ? unknown->rows() : 0;
        const auto order = epoch_order(static_cast<int>(n_local + n_unknown), cfg.seed, round, client.id, epoch);
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t bsz = std::min(order.size() - start, static_cast<std::size_t>(cfg.batch_size));
            Batch<Scalar> batch;
            batch.images = Tensor<Scalar>({static_cast<Index>(bsz), spec.input.channels, spec.input.height,
                                           spec.input.width});
            auto rows = batch.images.rows();
            batch.labels.resize(bsz);
            for (std::size_t i = 0; i < bsz; ++i) {
                const int ref = order[start + i];
                if (ref < n_local) {
                    const int idx = client.indices[static_cast<std::size_t>(ref)];
                    rows.row(static_cast<Index>(i)) = data.images.row(idx).template cast<Scalar>();
                    batch.labels[i] = data.labels[static_cast<std::size_t>(idx)];
                } else {
                    rows.row(static_cast<Index>(i)) = unknown->row(ref - n_local).template cast<Scalar>();
                    batch.labels[i] = known;
                }
            }
            auto res = backward(spec, out.weights, batch, std::span<const Scalar>(class_weights));
            if (prox) {
                for (std::size_t p = 0; p < out.weights.size(); ++p) {
                    if (out.weights[p].trainable) {
                        res.grads[p].value.data += mu * (out.weights[p].value.data - global[p].value.data);
                    }
                }
            }
            sgd_update(out.weights, res.grads, lr);
            apply_batch_stats(out.weights, res.batch_stats);
            loss_sum += static_cast<double>(res.loss);
            ++steps;
        }
    }
    out.mean_loss = steps ? loss_sum / steps : 0.0;
    return out;
}

/// Sample-count weighted mean of every tensor, running statistics included.
/// Accumulates in double in the given order.
template <class Scalar>
WeightSet<Scalar> aggregate(std::span<const std::pair<const WeightSet<Scalar>*, Index>> updates) {
    if (updates.empty()) throw ValueError("aggregate needs at least one update");
    if (updates.size() == 1) return *updates[0].first;
    double total = 0.0;
    for (const auto& [w, n] : updates) {
        require_aligned(*updates[0].first, *w, "aggregate");
        if (n < 0) throw ValueError("negative sample count");
        total += static_cast<double>(n);
    }
    if (!(total > 0.0)) throw ValueError("aggregate: total sample count is zero");
    WeightSet<Scalar> out = updates[0].first->zeros_like();
    for (std::size_t p = 0; p < out.size(); ++p) {
        Vector<double> acc = Vector<double>::Zero(out[p].value.size());
        for (const auto& [w, n] : updates) {
            acc += static_cast<double>(n) * (*w)[p].value.data.template cast<double>();
        }
        out[p].value.data = (acc / total).template cast<Scalar>();
    }
    return out;
}

template <class Scalar>
WeightSet<Scalar> aggregate(const std::vector<std::pair<WeightSet<Scalar>, Index>>& updates) {
    std::vector<std::pair<const WeightSet<Scalar>*, Index>> refs;
    for (const auto& [w, n] : updates) refs.emplace_back(&w, n);
    return aggregate<Scalar>(std::span<const std::pair<const WeightSet<Scalar>*, Index>>(refs));
}

/// Predicted class per row; K+1-output models predict among the first K when `mask_unknown_head`.
template <class Scalar>
std::vector<int> predict(const ModelSpec& spec, const WeightSet<Scalar>& weights, const Dataset& ds,
                         bool mask_unknown_head) {
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(ds.size()));
    const Index limit = (mask_unknown_head && spec.has_unknown_head) ? spec.num_known_classes : spec.output_classes();
    constexpr Index kChunk = 256;
    std::vector<int> idx;
    for (Index start = 0; start < ds.size(); start += kChunk) {
        const Index n = std::min(kChunk, ds.size() - start);
        idx.resize(static_cast<std::size_t>(n));
        for (Index i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = static_cast<int>(start + i);
        const auto logits = forward_images(spec, weights, ds.batch<Scalar>(idx).images, Mode::Eval);
        const auto rows = logits.rows();
        for (Index i = 0; i < n; ++i) out.push_back(argmax_prefix(rows.row(i), limit));
    }
    return out;
}

/// Top-1 accuracy in eval mode.
template <class Scalar>
double evaluate(const ModelSpec& spec, const WeightSet<Scalar>& weights, const Dataset& ds, bool mask_unknown_head) {
    if (ds.size() == 0) return 0.0;
    const auto pred = predict(spec, weights, ds, mask_unknown_head);
    Index hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == ds.labels[i] ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(ds.size());
}

template <class Scalar>
struct GlobalState {
    WeightSet<Scalar> weights;
    int round = 0;
    WeightSet<Scalar> best_weights;
    double best_accuracy = -1.0;
    int best_round = 0;
    std::vector<double> label_distribution;
};

/// Inputs shared by every round: preprocessed train/validation sets and the
/// fitted preprocessing (applied to generated unknown samples).
struct TrainingData {
    const Dataset* train = nullptr;
    const Dataset* val = nullptr;
    Preprocessor preprocessor;
};

struct RunOptions {
    double reference_accuracy = 1.0;  // 1.0 -> rel_val_acc is the percentage accuracy
    double alpha = 0.0;               // recorded in the trace only
    std::optional<std::uint64_t> init_seed;
    std::function<void(const RoundRecord&)> on_round;
};

inline constexpr double kDivergenceLoss = 1e4;

/// Builds each client's unknown cache: round(F_U * N_local) generated,
/// preprocessed samples from stream (seed, client id).
void attach_unknown_caches(std::vector<ClientState>& clients, const UnknownConfig& unknown, const ModelSpec& spec,
                           std::uint64_t seed, const Preprocessor* pre);

template <class Scalar>
std::pair<GlobalState<Scalar>, MetricTrace> run_training(const TrainingData& data, const Partition& partition,
                                                         const ModelSpec& spec, const RoundConfig& cfg,
                                                         const VariantConfig& variant, const RunOptions& opts = {}) {
    if (!data.train || !data.val) throw ValueError("run_training needs train and validation data");
    if (!(cfg.client_fraction > 0.0 && cfg.client_fraction <= 1.0)) {
        throw ValueError("client fraction must be in (0, 1]");
    }
    if (cfg.rounds < 0) throw ValueError("rounds must be non-negative");
    auto clients = make_clients(partition);
    GlobalState<Scalar> state;
    state.weights = init_weights<Scalar>(spec, opts.init_seed.value_or(derive_seed({cfg.seed, 0x1417ULL})));
    state.best_weights = state.weights;
    state.label_distribution = global_label_distribution(partition);

    if (variant.kind == VariantKind::FedOS) {
        if (!spec.has_unknown_head) throw ValueError("FedOS needs a model with an unknown-class head");
        attach_unknown_caches(clients, variant.unknown, spec, cfg.seed, &data.preprocessor);
    }

    MetricTrace trace;
    trace.variant = to_string(variant.kind);
    trace.alpha = opts.alpha;
    trace.seed = cfg.seed;
    trace.reference_accuracy = opts.reference_accuracy;

    for (int round = 1; round <= cfg.rounds; ++round) {
        const auto selected = sample_clients(partition.n_clients(), cfg.client_fraction, cfg.seed, round);
        std::vector<LocalResult<Scalar>> results(selected.size());
        const auto train_one = [&](std::size_t i) {
            results[i] = local_train(spec, state.weights, *data.train, clients[static_cast<std::size_t>(selected[i])],
                                     cfg, variant, round, state.label_distribution, &data.preprocessor);
        };
        const auto threads = static_cast<std::size_t>(std::max(cfg.threads, 1));
        for (std::size_t start = 0; start < selected.size(); start += threads) {
            const std::size_t end = std::min(selected.size(), start + threads);
            if (end - start == 1) {
                train_one(start);
                continue;
            }
            std::vector<std::future<void>> jobs;
            for (std::size_t i = start; i < end; ++i) jobs.push_back(std::async(std::launch::async, train_one, i));
            for (auto& j : jobs) j.get();
        }

        std::vector<std::pair<const WeightSet<Scalar>*, Index>> updates;
        double loss = 0.0;
        for (const auto& r : results) {
            updates.emplace_back(&r.weights, r.sample_count);
            loss += r.mean_loss;
        }
        loss /= static_cast<double>(results.size());
        if (!std::isfinite(loss) || loss > kDivergenceLoss) {
            throw DivergenceError(round, "mean client loss " + std::to_string(loss));
        }
        state.weights = aggregate<Scalar>(updates);
        state.round = round;

        RoundRecord rec;
        rec.round = round;
        rec.train_loss = loss;
        rec.val_acc = evaluate(spec, state.weights, *data.val, true);
        rec.rel_val_acc = relative_accuracy(rec.val_acc, opts.reference_accuracy);
        rec.selected = selected;
        if (rec.val_acc > state.best_accuracy) {
            state.best_accuracy = rec.val_acc;
            state.best_weights = state.weights;
            state.best_round = round;
        }
        if (opts.on_round) opts.on_round(rec);
        trace.records.push_back(std::move(rec));
    }
    return {std::move(state), std::move(trace)};
}

} // namespace fedos
