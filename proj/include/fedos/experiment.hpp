#pragma once

#include <optional>
#include <string>
#include <vector>

#include "fedos/config.hpp"
#include "fedos/federated.hpp"
#include "fedos/open_set.hpp"
#include "fedos/partition.hpp"

namespace fedos {

/// Train/validation sets of one experiment, before and after preprocessing.
/// They depend on data.* only, never on the run seed.
struct ExperimentData {
    Dataset train_raw;
    Dataset train;
    Dataset val;
    Preprocessor preprocessor;

    TrainingData view() const { return {&train, &val, preprocessor}; }
};

ExperimentData load_experiment_data(const ExperimentConfig& cfg);

/// LeNet-5 for the configured data and norm; a K+1 head for FedOS.
ModelSpec experiment_model(const ExperimentConfig& cfg, const ExperimentData& data);

PartitionSpec partition_spec(const ExperimentConfig& cfg, std::uint64_t seed);
RoundConfig round_config(const ExperimentConfig& cfg, std::uint64_t seed);

/// Variant with its generator built (FedOS); `data` supplies the default pool.
VariantConfig variant_config(const ExperimentConfig& cfg, const ExperimentData& data);

/// run.reference_summary when set, else run.reference_accuracy.
double reference_accuracy(const ExperimentConfig& cfg);

struct CentralizedResult {
    MetricTrace trace;  // one record per epoch
    double initial_accuracy = 0.0;
    double reference_accuracy = 0.0;  // final validation accuracy; the initial one for 0 epochs
    WeightSet<float> final_weights;
    WeightSet<float> best_weights;
    int best_epoch = 0;
};

/// Plain mini-batch SGD over the whole training set. Epoch e visits samples in
/// epoch_order(n, seed, e + 1, 0, 0), so it matches a one-client federated run
/// with C = 1 and E = 1.
CentralizedResult run_centralized(const ExperimentConfig& cfg, const ExperimentData& data, std::uint64_t seed);

struct FederatedResult {
    GlobalState<float> state;
    MetricTrace trace;
    Index generator_bytes = 0;  // shipped once to every client
    Index model_bytes = 0;
};

FederatedResult run_federated(const ExperimentConfig& cfg, const ExperimentData& data, std::uint64_t seed);

/// Artifacts of one seed.
struct SeedArtifacts {
    std::uint64_t seed = 0;
    std::string dir;
    MetricTrace trace;
};

struct ExperimentArtifacts {
    std::string dir;
    std::string config_hash;
    std::vector<SeedArtifacts> seeds;
};

/// Runs every seed of `cfg` and writes under output.dir:
///   config.yaml (normalized), summary.json,
///   seed_<s>/trace.csv, seed_<s>/best.fsw, seed_<s>/final.fsw, seed_<s>/summary.json.
/// `data` may be passed in to share one load across calls.
ExperimentArtifacts run_experiment(const ExperimentConfig& cfg, const ExperimentData* data = nullptr);

/// Per-seed summary: max/mean relative accuracy, bests, communication.
std::string seed_summary_json(const ExperimentConfig& cfg, const MetricTrace& trace, const std::string& hash,
                              Index generator_bytes, Index model_bytes, int best_round);

/// Image pool for generator training: gan.pool (an image folder) or a
/// synthetic multi-class pool, cut to gan.pool_samples.
Dataset load_gan_pool(const ExperimentConfig& cfg);

GanSpec gan_spec(const ExperimentConfig& cfg, std::uint64_t seed);

struct GanRun {
    TrainedGan gan;
    Index generator_parameters = 0;
    Index classifier_parameters = 0;
    double mean_image_error = 0.0;  // ||mean generated - mean pool|| / ||mean pool|| over per-pixel means
    double discriminator_accuracy = 0.0;
};

/// Trains a generator on load_gan_pool and writes <output.dir>/generator.fsw,
/// samples.rgb (64 raw samples) and gan_summary.json. Throws ConfigError before
/// training when the generator exceeds twice the classifier's parameter count.
GanRun run_gan_training(const ExperimentConfig& cfg, std::uint64_t seed);

/// Copy of `base` with one axis set to `value`.
ExperimentConfig with_axis(const ExperimentConfig& base, const std::string& axis, double value);

} // namespace fedos
