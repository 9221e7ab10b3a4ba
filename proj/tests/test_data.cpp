#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Cholesky>
#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

#include "fedos/dataset.hpp"
#include "fedos/partition.hpp"

using namespace fedos;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("fedos_test_data_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// Record r: label r % 10, pixel k = (r + k) % 256.
std::string cifar_records(std::size_t count) {
    std::string bytes;
    for (std::size_t r = 0; r < count; ++r) {
        bytes.push_back(static_cast<char>(r % 10));
        for (std::size_t k = 0; k < 3072; ++k) bytes.push_back(static_cast<char>((r + k) % 256));
    }
    return bytes;
}

void write_bytes(const fs::path& p, const std::string& bytes) {
    std::ofstream f(p, std::ios::binary);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::vector<int> cycling_labels(int n, int k) {
    std::vector<int> l(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) l[static_cast<std::size_t>(i)] = i % k;
    return l;
}

std::vector<int> identity_order(int n) {
    std::vector<int> o(static_cast<std::size_t>(n));
    std::iota(o.begin(), o.end(), 0);
    return o;
}

Partition partition_labels(const std::vector<int>& labels, int k, int clients, int per_client, double alpha,
                           std::uint64_t seed) {
    PartitionSpec spec;
    spec.n_clients = clients;
    spec.samples_per_client = per_client;
    spec.alpha = alpha;
    spec.seed = seed;
    return dirichlet_partition(labels, k, spec, identity_order(clients));
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const auto n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

} // namespace

TEST_CASE("CIFAR batch parsing") {
    const auto dir = scratch_dir("cifar");

    SUBCASE("well-formed file of 10000 records") {
        write_bytes(dir / "full.bin", cifar_records(10000));
        const auto ds = read_cifar_batch((dir / "full.bin").string(), Split::Train);
        CHECK(ds.size() == 10000);
        CHECK(ds.images.rows() == 10000);
        CHECK(ds.images.cols() == 3072);
        CHECK(ds.labels[9999] == 9);
        CHECK_NOTHROW(validate(ds));
    }
    SUBCASE("first record matches byte-level inspection") {
        const auto bytes = cifar_records(3);
        write_bytes(dir / "small.bin", bytes);
        const auto ds = read_cifar_batch((dir / "small.bin").string(), Split::Test, 3);
        CHECK(ds.labels[0] == static_cast<unsigned char>(bytes[0]));
        CHECK(ds.images(0, 0) == static_cast<float>(static_cast<unsigned char>(bytes[1])));
        // Plane order: R, G then B; the first green pixel sits 1024 bytes after the first red.
        CHECK(ds.images(1, 1024) == static_cast<float>(static_cast<unsigned char>(bytes[3073 + 1 + 1024])));
        CHECK(ds.split == Split::Test);
    }
    SUBCASE("truncated file is rejected with name and expected size") {
        auto bytes = cifar_records(4);
        bytes.resize(bytes.size() - 100);
        write_bytes(dir / "short.bin", bytes);
        try {
            read_cifar_batch((dir / "short.bin").string(), Split::Train, 4);
            FAIL("expected IoError");
        } catch (const IoError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("short.bin") != std::string::npos);
            CHECK(msg.find(std::to_string(4 * 3073)) != std::string::npos);
        }
    }
    SUBCASE("missing file") {
        try {
            read_cifar_batch((dir / "nope.bin").string(), Split::Train);
            FAIL("expected IoError");
        } catch (const IoError& e) {
            CHECK(std::string(e.what()).find("nope.bin") != std::string::npos);
            CHECK(std::string(e.what()).find("30730000") != std::string::npos);
        }
        CHECK_THROWS_AS(load_cifar10(dir.string()), IoError);
    }
    SUBCASE("label byte out of range") {
        auto bytes = cifar_records(2);
        bytes[3073] = 12;
        write_bytes(dir / "bad.bin", bytes);
        CHECK_THROWS_AS(read_cifar_batch((dir / "bad.bin").string(), Split::Train, 2), IoError);
    }
}

TEST_CASE("real CIFAR-10 archive, when present") {
    const char* root = std::getenv("FEDOS_DATA_ROOT");
    const auto dir = root ? fs::path(root) / "cifar-10-batches-bin" : fs::path();
    if (!root || !fs::exists(dir / "test_batch.bin")) {
        MESSAGE("FEDOS_DATA_ROOT does not hold cifar-10-batches-bin; archive check not run");
        return;
    }
    std::ifstream f(dir / "test_batch.bin", std::ios::binary);
    std::string head(3073, '\0');
    f.read(head.data(), 3073);
    const auto data = load_cifar10(dir.string());
    CHECK(data.train.size() == 50000);
    CHECK(data.test.size() == 10000);
    CHECK(data.test.labels[0] == static_cast<unsigned char>(head[0]));
    CHECK(data.test.images(0, 0) == static_cast<float>(static_cast<unsigned char>(head[1])));
}

TEST_CASE("image folder pool") {
    const auto dir = scratch_dir("folder");
    std::string bare(2 * 3072, '\0');
    for (std::size_t i = 0; i < bare.size(); ++i) bare[i] = static_cast<char>(i % 7);
    write_bytes(dir / "a.raw", bare);
    write_bytes(dir / "b.bin", cifar_records(3));
    const auto ds = load_image_folder(dir.string());
    CHECK(ds.size() == 5);
    CHECK(ds.num_classes == 1);
    CHECK(ds.images(1, 0) == static_cast<float>(3072 % 7));
    CHECK(ds.images(2, 5) == 5.0f);  // first CIFAR record, label byte skipped
    write_bytes(dir / "c.bin", std::string(100, 'x'));
    CHECK_THROWS_AS(load_image_folder(dir.string()), IoError);
    CHECK_THROWS_AS(load_image_folder((dir / "missing").string()), IoError);
}

TEST_CASE("synthetic dataset") {
    SUBCASE("same seed gives the same dataset") {
        const auto a = synthesize_dataset(10, 300, 32, 32, 5);
        const auto b = synthesize_dataset(10, 300, 32, 32, 5);
        CHECK(a.images == b.images);
        CHECK(a.labels == b.labels);
        CHECK_FALSE(a.images == synthesize_dataset(10, 300, 32, 32, 6).images);
    }
    SUBCASE("class counts are N/K up to rounding") {
        const auto ds = synthesize_dataset(10, 2000, 32, 32, 1);
        for (int c : ds.class_counts()) CHECK(c == 200);
        const auto odd = synthesize_dataset(7, 1000, 8, 8, 1);
        for (int c : odd.class_counts()) CHECK((c == 142 || c == 143));
    }
    SUBCASE("raw byte range and invariants") {
        const auto ds = synthesize_dataset(10, 200, 32, 32, 3);
        CHECK(ds.images.minCoeff() >= 0.0f);
        CHECK(ds.images.maxCoeff() <= 255.0f);
        CHECK((ds.images.array() == ds.images.array().round()).all());
        CHECK_NOTHROW(validate(ds));
    }
    SUBCASE("well separated classes: nearest centroid is near perfect") {
        SyntheticParams p;
        p.blob_amplitude = 120.0;
        p.pixel_noise = 5.0;
        p.distractor_blobs = 0;
        const auto ds = synthesize_dataset(2, 400, 32, 32, 11, p);
        Eigen::MatrixXd centroid = Eigen::MatrixXd::Zero(2, 3072);
        std::vector<int> n(2, 0);
        for (Index i = 0; i < 200; ++i) {
            centroid.row(ds.labels[i]) += ds.images.row(i).cast<double>();
            ++n[static_cast<std::size_t>(ds.labels[i])];
        }
        for (int c = 0; c < 2; ++c) centroid.row(c) /= n[static_cast<std::size_t>(c)];
        int ok = 0;
        for (Index i = 200; i < 400; ++i) {
            const Eigen::RowVectorXd x = ds.images.row(i).cast<double>();
            const int pred = (x - centroid.row(0)).squaredNorm() <= (x - centroid.row(1)).squaredNorm() ? 0 : 1;
            ok += pred == ds.labels[i];
        }
        CHECK(ok >= 198);
    }
    SUBCASE("a linear probe separates the default classes") {
        // Ridge regression onto one-hot targets, kernel form, held-out accuracy.
        const auto ds = synthesize_dataset(10, 3000, 32, 32, 7);
        Eigen::MatrixXd x = ds.images.cast<double>() / 255.0;
        const Eigen::RowVectorXd mu = x.topRows(2000).colwise().mean();
        x.rowwise() -= mu;
        Eigen::MatrixXd y = Eigen::MatrixXd::Zero(3000, 10);
        for (int i = 0; i < 3000; ++i) y(i, ds.labels[static_cast<std::size_t>(i)]) = 1.0;
        const Eigen::MatrixXd xt = x.topRows(2000);
        Eigen::MatrixXd gram = xt * xt.transpose();
        gram.diagonal().array() += 100.0;
        const Eigen::MatrixXd w = xt.transpose() * gram.ldlt().solve(y.topRows(2000));
        const Eigen::MatrixXd scores = x.bottomRows(1000) * w;
        int ok = 0;
        for (int i = 0; i < 1000; ++i) {
            Eigen::Index j;
            scores.row(i).maxCoeff(&j);
            ok += j == ds.labels[static_cast<std::size_t>(2000 + i)];
        }
        CHECK(ok > 800);
    }
}

TEST_CASE("preprocessing") {
    const auto train = synthesize_dataset(10, 500, 32, 32, 2);
    const auto val = synthesize_dataset(10, 100, 32, 32, 3);

    SUBCASE("raw is identity") { CHECK(preprocess(train, Preprocessing::Raw).images == train.images); }
    SUBCASE("scaled maps 255 to 1") {
        auto white = train;
        white.images.setConstant(255.0f);
        CHECK((preprocess(white, Preprocessing::Scaled).images.array() == 1.0f).all());
        const auto s = preprocess(train, Preprocessing::Scaled);
        CHECK(s.images.minCoeff() >= 0.0f);
        CHECK(s.images.maxCoeff() <= 1.0f);
    }
    SUBCASE("standardized train split has zero mean and unit std per channel") {
        const auto s = preprocess(train, Preprocessing::Standardized);
        for (Index c = 0; c < 3; ++c) {
            const Eigen::MatrixXd block = s.images.middleCols(c * 1024, 1024).cast<double>();
            const double mean = block.mean();
            const double sd = std::sqrt((block.array() - mean).square().mean());
            CHECK(std::abs(mean) < 1e-6);
            CHECK(std::abs(sd - 1.0) < 1e-6);
        }
    }
    SUBCASE("non-train split needs train statistics") {
        auto v = val;
        v.split = Split::Val;
        CHECK_THROWS_AS(preprocess(v, Preprocessing::Standardized), ValueError);
        const auto stats = channel_stats(train);
        const auto sv = preprocess(v, Preprocessing::Standardized, &stats);
        // Same affine map as the train split: spot-check one pixel.
        const float expected = static_cast<float>((v.images(3, 2048 + 5) - stats.mean[2]) / stats.stddev[2]);
        CHECK(sv.images(3, 2048 + 5) == doctest::Approx(expected).epsilon(1e-6));
    }
    SUBCASE("preprocessor matches dataset preprocessing") {
        const auto pre = fit_preprocessor(train, Preprocessing::Standardized);
        RowMatrix<float> imgs = train.images;
        pre.apply(imgs);
        CHECK((imgs - preprocess(train, Preprocessing::Standardized).images).cwiseAbs().maxCoeff() < 1e-5f);
        CHECK(preprocessing_from_string(to_string(Preprocessing::Scaled)) == Preprocessing::Scaled);
        CHECK_THROWS_AS(preprocessing_from_string("whitened"), ValueError);
    }
}

TEST_CASE("holdout split and subsets") {
    const auto ds = synthesize_dataset(10, 1000, 8, 8, 4);
    const auto [rest, held] = split_holdout(ds, 0.1, 9);
    CHECK(held.size() == 100);
    CHECK(rest.size() == 900);
    CHECK(held.split == Split::Val);
    const auto again = split_holdout(ds, 0.1, 9);
    CHECK(again.second.images == held.images);
    auto cr = rest.class_counts(), ch = held.class_counts(), ca = ds.class_counts();
    for (std::size_t c = 0; c < ca.size(); ++c) CHECK(cr[c] + ch[c] == ca[c]);

    const std::vector<int> idx{5, 1, 7};
    const auto sub = subset(ds, idx);
    CHECK(sub.size() == 3);
    CHECK(sub.labels[0] == ds.labels[5]);
    CHECK(sub.images.row(2) == ds.images.row(7));
}

TEST_CASE("dataset validation") {
    auto ds = synthesize_dataset(3, 30, 8, 8, 1);
    ds.labels[4] = 3;
    CHECK_THROWS_AS(validate(ds), ValueError);
    ds.labels[4] = 0;
    ds.labels.pop_back();
    CHECK_THROWS_AS(validate(ds), ShapeError);
}

TEST_CASE("FSD1 round trip") {
    const auto ds = synthesize_dataset(4, 50, 16, 16, 8);
    const auto bytes = encode_dataset(ds);
    CHECK(bytes.substr(0, 4) == "FSD1");
    const auto back = decode_dataset(bytes);
    CHECK(back.images == ds.images);
    CHECK(back.labels == ds.labels);
    CHECK(back.num_classes == 4);
    CHECK(back.shape == ds.shape);
    CHECK_THROWS_AS(decode_dataset(bytes.substr(0, bytes.size() - 1)), IoError);
    CHECK_THROWS_AS(decode_dataset("FSDX" + bytes.substr(4)), IoError);
}

TEST_CASE("apportion") {
    const std::vector<double> w{0.5, 0.3, 0.2};
    CHECK(apportion(w, 10) == std::vector<int>{5, 3, 2});
    CHECK(apportion(w, 7) == std::vector<int>{4, 2, 1});
    const std::vector<int> caps{2, 10, 10};
    const auto capped = apportion(w, 10, caps);
    CHECK(capped[0] == 2);
    CHECK(std::accumulate(capped.begin(), capped.end(), 0) == 10);
    const std::vector<int> tight{1, 1, 1};
    CHECK_THROWS_AS(apportion(w, 10, tight), ValueError);
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        CounterRng rng{seed};
        const auto p = rng.dirichlet(0.3, 10);
        const auto parts = apportion(p, 2000);
        CHECK(std::accumulate(parts.begin(), parts.end(), 0) == 2000);
        for (std::size_t i = 0; i < p.size(); ++i) CHECK(std::abs(parts[i] - 2000 * p[i]) <= 1.0);
    }
}

TEST_CASE("Dirichlet partition: disjoint, exact counts, within availability") {
    const int k = 10;
    const auto labels = cycling_labels(50000, k);
    for (double alpha : {0.01, 0.1, 1.0, 100.0}) {
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            CAPTURE(alpha);
            CAPTURE(seed);
            const auto p = partition_labels(labels, k, 20, 2000, alpha, seed);
            std::vector<char> used(labels.size(), 0);
            bool disjoint = true;
            std::vector<int> total(k, 0);
            for (int c = 0; c < 20; ++c) {
                const auto& a = p.assignments[static_cast<std::size_t>(c)];
                CHECK(a.size() == 2000);
                std::vector<int> h(k, 0);
                for (int i : a) {
                    disjoint = disjoint && !used[static_cast<std::size_t>(i)];
                    used[static_cast<std::size_t>(i)] = 1;
                    ++h[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])];
                }
                CHECK(h == p.histograms[static_cast<std::size_t>(c)]);
                for (int j = 0; j < k; ++j) total[static_cast<std::size_t>(j)] += h[static_cast<std::size_t>(j)];
            }
            CHECK(disjoint);
            for (int t : total) CHECK(t <= 5000);
        }
    }
}

TEST_CASE("Dirichlet partition is deterministic and seed dependent") {
    const auto labels = cycling_labels(20000, 10);
    const auto a = partition_labels(labels, 10, 8, 500, 0.5, 3);
    CHECK(a.assignments == partition_labels(labels, 10, 8, 500, 0.5, 3).assignments);
    CHECK_FALSE(a.assignments == partition_labels(labels, 10, 8, 500, 0.5, 4).assignments);
}

TEST_CASE("concentration limit: huge alpha is near uniform") {
    const auto labels = cycling_labels(50000, 10);
    const auto p = partition_labels(labels, 10, 20, 2000, 1e6, 1);
    for (const auto& h : p.histograms) {
        for (int c : h) CHECK(std::abs(c - 200) <= 10);
    }
}

TEST_CASE("alpha 0.01: median client is essentially single-class") {
    const auto labels = cycling_labels(50000, 10);
    std::vector<double> medians;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto p = partition_labels(labels, 10, 20, 2000, 0.01, seed);
        std::vector<double> shares;
        for (const auto& h : p.histograms) shares.push_back(dominant_share(h));
        medians.push_back(median(shares));
    }
    CHECK(median(medians) >= 0.95);
    CHECK(std::count_if(medians.begin(), medians.end(), [](double m) { return m >= 0.95; }) >= 18);
}

TEST_CASE("alpha 1: mean max-class share matches the Dirichlet expectation") {
    // Monte-Carlo oracle: E[max] of Dirichlet(1_10) is H_10 / 10 = 0.29290.
    const auto labels = cycling_labels(50000, 10);
    double sum = 0.0;
    int n = 0;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        for (const auto& h : partition_labels(labels, 10, 20, 2000, 1.0, seed).histograms) {
            sum += dominant_share(h);
            ++n;
        }
    }
    const double mean = sum / n;
    CHECK(mean > 0.2);
    CHECK(mean < 0.7);
    CHECK(std::abs(mean - 0.2929) < 0.02);
}

TEST_CASE("client relabelling leaves the histogram multiset unchanged") {
    // Ample stock, so no pool runs dry and the processing order cannot matter.
    const auto labels = cycling_labels(200000, 10);
    PartitionSpec spec;
    spec.n_clients = 12;
    spec.samples_per_client = 500;
    for (double alpha : {0.05, 1.0}) {
        spec.alpha = alpha;
        const auto base = dirichlet_partition(labels, 10, spec, identity_order(12));
        auto order = identity_order(12);
        CounterRng rng{77};
        rng.shuffle(std::span<int>(order));
        const auto perm = dirichlet_partition(labels, 10, spec, order);
        std::multiset<std::vector<int>> a(base.histograms.begin(), base.histograms.end());
        std::multiset<std::vector<int>> b(perm.histograms.begin(), perm.histograms.end());
        CHECK(a == b);
    }
}

TEST_CASE("average histogram entropy grows with alpha") {
    const auto labels = cycling_labels(50000, 10);
    std::vector<double> mean_entropy;
    for (double alpha : {0.01, 0.1, 1.0, 100.0}) {
        double s = 0.0;
        int n = 0;
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            for (const auto& h : partition_labels(labels, 10, 20, 2000, alpha, seed).histograms) {
                s += histogram_entropy(h);
                ++n;
            }
        }
        mean_entropy.push_back(s / n);
    }
    for (std::size_t i = 1; i < mean_entropy.size(); ++i) CHECK(mean_entropy[i] >= mean_entropy[i - 1]);
    CHECK(mean_entropy.back() == doctest::Approx(std::log(10.0)).epsilon(0.01));
}

TEST_CASE("partition errors") {
    const auto labels = cycling_labels(1000, 10);
    CHECK_THROWS_AS(partition_labels(labels, 10, 20, 100, 1.0, 0), ValueError);  // 2000 > 1000
    CHECK_THROWS_AS(partition_labels(labels, 10, 2, 100, 0.0, 0), ValueError);
    CHECK_THROWS_AS(partition_labels(labels, 10, 0, 100, 1.0, 0), ValueError);
}

TEST_CASE("FSP1 round trip and JSON sidecar") {
    const auto labels = cycling_labels(5000, 10);
    PartitionSpec spec;
    spec.n_clients = 6;
    spec.samples_per_client = 300;
    spec.alpha = 0.3;
    spec.seed = 12;
    const auto p = dirichlet_partition(labels, 10, spec, identity_order(6));
    const auto bytes = encode_partition(p);
    CHECK(bytes.substr(0, 4) == "FSP1");
    const auto back = decode_partition(bytes, labels);
    CHECK(back.assignments == p.assignments);
    CHECK(back.histograms == p.histograms);
    CHECK_THROWS_AS(decode_partition(bytes.substr(0, bytes.size() - 2), labels), IoError);

    const auto j = nlohmann::json::parse(partition_summary_json(p, spec));
    CHECK(j["n_clients"] == 6);
    CHECK(j["clients"].size() == 6);
    CHECK(j["clients"][2]["histogram"].get<std::vector<int>>() == p.histograms[2]);
}

TEST_CASE("dominant share and entropy helpers") {
    const std::vector<int> single{0, 10, 0};
    CHECK(dominant_share(single) == 1.0);
    CHECK(histogram_entropy(single) == 0.0);
    const std::vector<int> even{5, 5};
    CHECK(histogram_entropy(even) == doctest::Approx(std::log(2.0)));
}
