#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fedos/model.hpp"
#include "fedos/network.hpp"

namespace fedos {

enum class Split { Train, Val, Test };

std::string to_string(Split split);

/// Images stored one per row, channel-major (C, H, W), as floats. Before
/// preprocessing values are in the raw byte range 0..255.
struct Dataset {
    InputShape shape;
    RowMatrix<float> images;
    std::vector<int> labels;
    int num_classes = 0;
    Split split = Split::Train;

    Index size() const { return static_cast<Index>(labels.size()); }

    template <class Scalar>
    Batch<Scalar> batch(std::span<const int> indices) const {
        Batch<Scalar> b;
        b.images = Tensor<Scalar>({static_cast<Index>(indices.size()), shape.channels, shape.height, shape.width});
        auto rows = b.images.rows();
        for (std::size_t i = 0; i < indices.size(); ++i) {
            rows.row(static_cast<Index>(i)) = images.row(indices[i]).template cast<Scalar>();
            b.labels.push_back(labels[static_cast<std::size_t>(indices[i])]);
        }
        return b;
    }

    /// Per-class sample counts.
    std::vector<int> class_counts() const;
};

/// Throws ValueError when labels/shape invariants are violated.
void validate(const Dataset& ds);

Dataset subset(const Dataset& ds, std::span<const int> indices);

/// Deterministic split of `ds` into (rest, held_out) with `fraction` of the
/// samples held out.
std::pair<Dataset, Dataset> split_holdout(const Dataset& ds, double fraction, std::uint64_t seed);

// CIFAR-10 binary batches: 10000 records of 1 label byte + 3072 pixel bytes
// (R plane, G plane, B plane; 32x32 each).
inline constexpr std::size_t kCifarRecordBytes = 3073;
inline constexpr std::size_t kCifarRecordsPerFile = 10000;

Dataset read_cifar_batch(const std::string& path, Split split, std::size_t expected_records = kCifarRecordsPerFile);

struct CifarData {
    Dataset train;
    Dataset test;
};

/// Reads data_batch_{1..5}.bin and test_batch.bin from `dir`.
CifarData load_cifar10(const std::string& dir);

/// Unlabelled 32x32 RGB pool from every regular file under `dir`, in name
/// order. A file of whole 3072-byte records is read as bare images; a file of
/// whole 3073-byte records as CIFAR records with the label byte dropped.
/// All labels are 0 and `num_classes` is 1.
Dataset load_image_folder(const std::string& dir);

/// Tunables of the synthetic image generator.
struct SyntheticParams {
    int blobs_per_class = 3;
    double blob_amplitude = 70.0;  // stddev of a class blob's per-channel colour offset
    double min_sigma = 2.5;
    double max_sigma = 6.0;
    double center_jitter = 2.5;    // pixels
    double amplitude_jitter = 0.4; // multiplicative, uniform +-
    int distractor_blobs = 2;
    double distractor_amplitude = 60.0;
    double pixel_noise = 25.0;
};

/// Class-conditional Gaussian-blob images. Each class owns a fixed set of
/// coloured blobs; samples jitter their position and strength and add
/// class-independent distractors and pixel noise. Labels cycle through the
/// classes before shuffling, so per-class counts differ by at most one.
Dataset synthesize_dataset(int num_classes, Index count, Index height, Index width, std::uint64_t seed,
                           const SyntheticParams& params = {});

enum class Preprocessing { Raw, Scaled, Standardized };

std::string to_string(Preprocessing p);
Preprocessing preprocessing_from_string(const std::string& name);

struct ChannelStats {
    std::vector<double> mean;
    std::vector<double> stddev;
};

/// Population mean/stddev per channel.
ChannelStats channel_stats(const Dataset& ds);

/// A fitted preprocessing step that can be applied to any image matrix with
/// the same channel layout (datasets and generated samples alike).
struct Preprocessor {
    Preprocessing kind = Preprocessing::Raw;
    ChannelStats stats;
    InputShape shape;

    void apply(RowMatrix<float>& images) const;
};

/// Standardized preprocessing computes statistics on `train`.
Preprocessor fit_preprocessor(const Dataset& train, Preprocessing kind);

/// Applies `p`. Standardized on a non-train split requires `train_stats`.
Dataset preprocess(const Dataset& ds, Preprocessing p, const ChannelStats* train_stats = nullptr);

// FSD1 container: "FSD1", u32 N, u32 C, u32 H, u32 W, u32 K, u8 split,
// u32 labels[N], f32 pixels[N*C*H*W].
std::string encode_dataset(const Dataset& ds);
Dataset decode_dataset(const std::string& bytes);

} // namespace fedos
