#include "fedos/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "fedos/bytes.hpp"
#include "fedos/rng.hpp"

namespace fs = std::filesystem;

namespace fedos {

std::string to_string(Split split) {
    switch (split) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "train";
}

std::vector<int> Dataset::class_counts() const {
    std::vector<int> counts(static_cast<std::size_t>(num_classes), 0);
    for (int y : labels) ++counts[static_cast<std::size_t>(y)];
    return counts;
}

void validate(const Dataset& ds) {
    if (ds.size() == 0) throw ValueError("dataset is empty");
    if (ds.images.rows() != ds.size() || ds.images.cols() != ds.shape.size()) {
        throw ShapeError("dataset", "image matrix does not match labels/shape");
    }
    for (int y : ds.labels) {
        if (y < 0 || y >= ds.num_classes) {
            throw ValueError("label " + std::to_string(y) + " outside [0, " + std::to_string(ds.num_classes) + ")");
        }
    }
}

Dataset subset(const Dataset& ds, std::span<const int> indices) {
    Dataset out;
    out.shape = ds.shape;
    out.num_classes = ds.num_classes;
    out.split = ds.split;
    out.images.resize(static_cast<Index>(indices.size()), ds.shape.size());
    out.labels.reserve(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        out.images.row(static_cast<Index>(i)) = ds.images.row(indices[i]);
        out.labels.push_back(ds.labels[static_cast<std::size_t>(indices[i])]);
    }
    return out;
}

std::pair<Dataset, Dataset> split_holdout(const Dataset& ds, double fraction, std::uint64_t seed) {
    if (!(fraction >= 0.0 && fraction < 1.0)) throw ValueError("holdout fraction must be in [0, 1)");
    CounterRng rng{seed, 0x401d07ULL};
    auto order = rng.permutation(static_cast<int>(ds.size()));
    const auto held = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(ds.size())));
    std::vector<int> held_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(held));
    std::vector<int> rest_idx(order.begin() + static_cast<std::ptrdiff_t>(held), order.end());
    std::sort(held_idx.begin(), held_idx.end());
    std::sort(rest_idx.begin(), rest_idx.end());
    auto held_ds = subset(ds, held_idx);
    held_ds.split = Split::Val;
    return {subset(ds, rest_idx), std::move(held_ds)};
}

Dataset read_cifar_batch(const std::string& path, Split split, std::size_t expected_records) {
    const std::size_t expected = expected_records * kCifarRecordBytes;
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw IoError(path + ": missing (expected " + std::to_string(expected) + " bytes)");
    }
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (bytes.size() != expected) {
        throw IoError(path + ": " + std::to_string(bytes.size()) + " bytes, expected " + std::to_string(expected));
    }
    Dataset ds;
    ds.shape = {3, 32, 32};
    ds.num_classes = 10;
    ds.split = split;
    ds.images.resize(static_cast<Index>(expected_records), 3072);
    ds.labels.resize(expected_records);
    for (std::size_t r = 0; r < expected_records; ++r) {
        const auto* rec = reinterpret_cast<const unsigned char*>(bytes.data() + r * kCifarRecordBytes);
        if (rec[0] > 9) {
            throw IoError(path + ": record " + std::to_string(r) + " has label byte " + std::to_string(rec[0]));
        }
        ds.labels[r] = rec[0];
        for (Index k = 0; k < 3072; ++k) {
            ds.images(static_cast<Index>(r), k) = static_cast<float>(rec[1 + k]);
        }
    }
    return ds;
}

namespace {

Dataset concat(std::vector<Dataset> parts) {
    Dataset out;
    out.shape = parts.front().shape;
    out.num_classes = parts.front().num_classes;
    out.split = parts.front().split;
    Index rows = 0;
    for (const auto& p : parts) rows += p.size();
    out.images.resize(rows, out.shape.size());
    Index at = 0;
    for (auto& p : parts) {
        out.images.middleRows(at, p.size()) = p.images;
        at += p.size();
        out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
    }
    return out;
}

} // namespace

CifarData load_cifar10(const std::string& dir) {
    std::vector<Dataset> train_parts;
    for (int i = 1; i <= 5; ++i) {
        train_parts.push_back(
            read_cifar_batch((fs::path(dir) / ("data_batch_" + std::to_string(i) + ".bin")).string(), Split::Train));
    }
    CifarData data;
    data.train = concat(std::move(train_parts));
    data.test = read_cifar_batch((fs::path(dir) / "test_batch.bin").string(), Split::Test);
    return data;
}

Dataset load_image_folder(const std::string& dir) {
    if (!fs::is_directory(dir)) throw IoError(dir + ": not a directory");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file()) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    constexpr std::size_t kPixels = 3072;
    Dataset ds;
    ds.shape = {3, 32, 32};
    ds.num_classes = 1;
    ds.split = Split::Train;
    std::vector<std::string> blobs;
    std::vector<std::size_t> strides;
    std::size_t total = 0;
    for (const auto& path : files) {
        std::ifstream f(path, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        std::size_t stride = 0;
        if (!bytes.empty() && bytes.size() % kPixels == 0) {
            stride = kPixels;
        } else if (!bytes.empty() && bytes.size() % kCifarRecordBytes == 0) {
            stride = kCifarRecordBytes;
        } else {
            throw IoError(path.string() + ": " + std::to_string(bytes.size()) +
                          " bytes is not a whole number of 3072-byte images or 3073-byte records");
        }
        total += bytes.size() / stride;
        strides.push_back(stride);
        blobs.push_back(std::move(bytes));
    }
    if (total == 0) throw IoError(dir + ": no images found");
    ds.images.resize(static_cast<Index>(total), static_cast<Index>(kPixels));
    ds.labels.assign(total, 0);
    Index row = 0;
    for (std::size_t b = 0; b < blobs.size(); ++b) {
        const auto* base = reinterpret_cast<const unsigned char*>(blobs[b].data());
        const std::size_t skip = strides[b] - kPixels;
        for (std::size_t r = 0; r < blobs[b].size() / strides[b]; ++r, ++row) {
            const auto* px = base + r * strides[b] + skip;
            for (std::size_t k = 0; k < kPixels; ++k) ds.images(row, static_cast<Index>(k)) = static_cast<float>(px[k]);
        }
    }
    return ds;
}

Dataset synthesize_dataset(int num_classes, Index count, Index height, Index width, std::uint64_t seed,
                           const SyntheticParams& params) {
    if (num_classes <= 0 || count <= 0 || height <= 0 || width <= 0) {
        throw ValueError("synthesize_dataset: sizes must be positive");
    }
    struct Blob {
        double cx, cy, sigma;
        std::array<double, 3> color;
    };
    const auto draw_blob = [&](CounterRng& rng, double amplitude) {
        Blob b;
        b.cx = rng.uniform(0.2, 0.8) * static_cast<double>(width);
        b.cy = rng.uniform(0.2, 0.8) * static_cast<double>(height);
        b.sigma = rng.uniform(params.min_sigma, params.max_sigma);
        for (auto& c : b.color) c = rng.normal(0.0, amplitude);
        return b;
    };

    std::vector<std::vector<Blob>> templates(static_cast<std::size_t>(num_classes));
    for (int k = 0; k < num_classes; ++k) {
        CounterRng rng{seed, 0xc1a55ULL, static_cast<std::uint64_t>(k)};
        for (int j = 0; j < params.blobs_per_class; ++j) {
            templates[static_cast<std::size_t>(k)].push_back(draw_blob(rng, params.blob_amplitude));
        }
    }

    Dataset ds;
    ds.shape = {3, height, width};
    ds.num_classes = num_classes;
    ds.split = Split::Train;
    ds.labels.resize(static_cast<std::size_t>(count));
    for (Index i = 0; i < count; ++i) ds.labels[static_cast<std::size_t>(i)] = static_cast<int>(i % num_classes);
    CounterRng label_rng{seed, 0x1abe1ULL};
    label_rng.shuffle(std::span<int>(ds.labels));

    ds.images.resize(count, ds.shape.size());
    const Index plane = height * width;
    for (Index i = 0; i < count; ++i) {
        CounterRng rng{seed, 0x1aa9eULL, static_cast<std::uint64_t>(i)};
        std::vector<Blob> blobs;
        for (auto b : templates[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(i)])]) {
            b.cx += rng.normal(0.0, params.center_jitter);
            b.cy += rng.normal(0.0, params.center_jitter);
            const double s = 1.0 + rng.uniform(-params.amplitude_jitter, params.amplitude_jitter);
            for (auto& c : b.color) c *= s;
            blobs.push_back(b);
        }
        for (int j = 0; j < params.distractor_blobs; ++j) {
            blobs.push_back(draw_blob(rng, params.distractor_amplitude));
        }
        auto row = ds.images.row(i);
        for (Index y = 0; y < height; ++y) {
            for (Index x = 0; x < width; ++x) {
                std::array<double, 3> px{128.0, 128.0, 128.0};
                for (const auto& b : blobs) {
                    const double dx = static_cast<double>(x) - b.cx;
                    const double dy = static_cast<double>(y) - b.cy;
                    const double g = std::exp(-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma));
                    for (int c = 0; c < 3; ++c) px[static_cast<std::size_t>(c)] += g * b.color[static_cast<std::size_t>(c)];
                }
                for (int c = 0; c < 3; ++c) {
                    const double v = px[static_cast<std::size_t>(c)] + rng.normal(0.0, params.pixel_noise);
                    row(c * plane + y * width + x) = static_cast<float>(std::clamp(std::round(v), 0.0, 255.0));
                }
            }
        }
    }
    return ds;
}

std::string to_string(Preprocessing p) {
    switch (p) {
        case Preprocessing::Raw: return "raw";
        case Preprocessing::Scaled: return "scaled";
        case Preprocessing::Standardized: return "standardized";
    }
    return "raw";
}

Preprocessing preprocessing_from_string(const std::string& name) {
    if (name == "raw") return Preprocessing::Raw;
    if (name == "scaled") return Preprocessing::Scaled;
    if (name == "standardized") return Preprocessing::Standardized;
    throw ValueError("unknown preprocessing '" + name + "' (expected raw|scaled|standardized)");
}

ChannelStats channel_stats(const Dataset& ds) {
    const Index ch = ds.shape.channels;
    const Index plane = ds.shape.height * ds.shape.width;
    ChannelStats s;
    for (Index c = 0; c < ch; ++c) {
        const auto block = ds.images.middleCols(c * plane, plane).cast<double>();
        const double mean = block.mean();
        const double var = (block.array() - mean).square().mean();
        s.mean.push_back(mean);
        s.stddev.push_back(std::sqrt(var));
    }
    return s;
}

void Preprocessor::apply(RowMatrix<float>& images) const {
    switch (kind) {
        case Preprocessing::Raw: return;
        case Preprocessing::Scaled: images /= 255.0f; return;
        case Preprocessing::Standardized: {
            const Index plane = shape.height * shape.width;
            for (Index c = 0; c < shape.channels; ++c) {
                const double mean = stats.mean.at(static_cast<std::size_t>(c));
                const double sd = std::max(stats.stddev.at(static_cast<std::size_t>(c)), 1e-12);
                auto block = images.middleCols(c * plane, plane);
                block = ((block.cast<double>().array() - mean) / sd).cast<float>().matrix();
            }
            return;
        }
    }
}

Preprocessor fit_preprocessor(const Dataset& train, Preprocessing kind) {
    Preprocessor p;
    p.kind = kind;
    p.shape = train.shape;
    if (kind == Preprocessing::Standardized) p.stats = channel_stats(train);
    return p;
}

Dataset preprocess(const Dataset& ds, Preprocessing p, const ChannelStats* train_stats) {
    Preprocessor pre;
    pre.kind = p;
    pre.shape = ds.shape;
    if (p == Preprocessing::Standardized) {
        if (train_stats) {
            pre.stats = *train_stats;
        } else if (ds.split == Split::Train) {
            pre.stats = channel_stats(ds);
        } else {
            throw ValueError("standardizing a " + to_string(ds.split) + " split requires training statistics");
        }
    }
    Dataset out = ds;
    pre.apply(out.images);
    return out;
}

std::string encode_dataset(const Dataset& ds) {
    ByteWriter w;
    w.raw("FSD1");
    w.u32(static_cast<std::uint32_t>(ds.size()));
    w.u32(static_cast<std::uint32_t>(ds.shape.channels));
    w.u32(static_cast<std::uint32_t>(ds.shape.height));
    w.u32(static_cast<std::uint32_t>(ds.shape.width));
    w.u32(static_cast<std::uint32_t>(ds.num_classes));
    w.u8(static_cast<std::uint8_t>(ds.split));
    for (int y : ds.labels) w.u32(static_cast<std::uint32_t>(y));
    for (Index i = 0; i < ds.images.rows(); ++i) {
        for (Index j = 0; j < ds.images.cols(); ++j) w.f32(ds.images(i, j));
    }
    return w.take();
}

Dataset decode_dataset(const std::string& bytes) {
    ByteReader r(bytes, "FSD1");
    r.expect_magic("FSD1");
    Dataset ds;
    const auto n = r.u32();
    ds.shape.channels = r.u32();
    ds.shape.height = r.u32();
    ds.shape.width = r.u32();
    ds.num_classes = static_cast<int>(r.u32());
    const auto split = r.u8();
    if (split > 2) throw IoError("FSD1: bad split tag");
    ds.split = static_cast<Split>(split);
    ds.labels.resize(n);
    for (auto& y : ds.labels) y = static_cast<int>(r.u32());
    ds.images.resize(n, ds.shape.size());
    for (Index i = 0; i < ds.images.rows(); ++i) {
        for (Index j = 0; j < ds.images.cols(); ++j) ds.images(i, j) = r.f32();
    }
    validate(ds);
    return ds;
}

} // namespace fedos
