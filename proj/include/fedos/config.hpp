#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "fedos/dataset.hpp"
#include "fedos/model.hpp"

namespace fedos {

enum class RunMode { Centralized, Federated };

std::string to_string(RunMode mode);

struct DataSection {
    std::string source = "cifar10";  // cifar10 | synthetic
    std::string root;                // cifar10 batches; empty -> $FEDOS_DATA_ROOT/cifar-10-batches-bin
    Index train_samples = 0;         // 0: all 50k (cifar10) or clients * samples_per_client (synthetic)
    Index val_samples = 0;           // 0: the 10k test batch (cifar10) or train_samples / 5 (synthetic)
    Preprocessing preprocessing = Preprocessing::Standardized;
    int synthetic_classes = 10;
    Index synthetic_size = 32;
    std::uint64_t seed = 1234;  // synthetic images and subset selection; independent of run seeds
    double synthetic_noise = 25.0;
};

struct ModelSection {
    NormKind norm = NormKind::None;
    std::vector<Index> groups{2, 4, 30};
};

struct RunSection {
    RunMode mode = RunMode::Federated;
    int rounds = 500;
    int epochs = 20;  // centralized
    double client_fraction = 0.2;
    int local_epochs = 1;
    int batch_size = 32;
    double lr = 0.1;
    int threads = 1;
    std::vector<std::uint64_t> seeds{0};
    double reference_accuracy = 1.0;  // centralized accuracy relative numbers are quoted against
    std::string reference_summary;    // centralized summary.json; overrides reference_accuracy
};

struct PartitionSection {
    int clients = 20;
    int samples_per_client = 2000;
    double alpha = 1.0;
};

struct VariantSection {
    std::string name = "fedavg";  // fedavg | fedprox | fedir | fedos
    double mu = 1.0;
    double smoothing = 1.0;
    double unknown_weight = 1.0;
    double unknown_fraction = 0.8;
    std::string generator = "gaussian_fit";  // noise | gaussian_fit | tiny_gan
    std::string generator_pool;              // image folder; empty -> the raw training images
    std::string generator_checkpoint;
    bool resample_each_epoch = false;
};

struct GanSection {
    std::string pool;     // image folder; empty -> synthetic pool
    Index pool_samples = 5000;
    int latent_dim = 32;
    std::vector<Index> generator_widths{64, 32, 16};
    std::vector<Index> discriminator_widths{16, 32, 64};
    Index norm_groups = 4;
    int epochs = 5;
    double lr = 2e-4;
    int batch_size = 32;
};

struct AblationSection {
    std::string axis;  // alpha | local_epochs | client_fraction | W_U | F_U
    std::vector<double> values;
};

struct ReportSection {
    std::vector<int> checkpoints{125, 250, 375, 500};
};

struct OutputSection {
    std::string dir = "runs";
};

struct ExperimentConfig {
    DataSection data;
    ModelSection model;
    RunSection run;
    PartitionSection partition;
    VariantSection variant;
    GanSection gan;
    AblationSection ablation;
    ReportSection report;
    OutputSection output;
};

/// Parses YAML text. Unknown keys, wrong types and out-of-range values throw
/// ConfigError naming the offending field ("partition.alpha"). Missing keys
/// keep their defaults. Paths are not checked here; see check_paths.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);

/// Range and consistency checks (also run by parse_config).
void validate_config(const ExperimentConfig& cfg);

/// Throws ConfigError when a referenced file or directory is missing.
void check_paths(const ExperimentConfig& cfg);

/// Canonical YAML with every key present, in schema order.
std::string normalize_config(const ExperimentConfig& cfg);

/// 16 hex digits of FNV-1a over the canonical text, output.dir excluded.
std::string config_hash(const ExperimentConfig& cfg);

/// Sets `section.key` from a string as if it appeared in the file.
void set_config_value(ExperimentConfig& cfg, const std::string& path, const std::string& value);

std::uint64_t fnv1a64(std::string_view bytes);

/// Relative paths are taken from $FEDOS_DATA_ROOT when it is set.
std::string resolve_data_path(const std::string& path);

/// data.root, or $FEDOS_DATA_ROOT/cifar-10-batches-bin when empty.
std::string cifar_dir(const ExperimentConfig& cfg);

} // namespace fedos
