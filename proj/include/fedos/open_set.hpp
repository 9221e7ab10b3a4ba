#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fedos/dataset.hpp"
#include "fedos/network.hpp"

namespace fedos {

/// Source of synthetic "unknown" images. Samples are emitted in the raw
/// 0..255 pixel range; callers apply the classifier's preprocessing.
class UnknownGenerator {
public:
    virtual ~UnknownGenerator() = default;

    virtual std::string kind() const = 0;
    virtual InputShape shape() const = 0;

    /// `count` images, one per row. Pure in (this, count, seed).
    virtual RowMatrix<float> sample(Index count, std::uint64_t seed) const = 0;
};

/// Uniform pixel noise.
class NoiseGenerator final : public UnknownGenerator {
public:
    explicit NoiseGenerator(InputShape shape) : shape_(shape) {}

    std::string kind() const override { return "noise"; }
    InputShape shape() const override { return shape_; }
    RowMatrix<float> sample(Index count, std::uint64_t seed) const override;

private:
    InputShape shape_;
};

/// Independent per-pixel Gaussian fitted to an image pool. Samples are not
/// clipped to the byte range.
class GaussianFitGenerator final : public UnknownGenerator {
public:
    static GaussianFitGenerator fit(const Dataset& pool);

    GaussianFitGenerator(InputShape shape, Vector<double> mean, Vector<double> stddev);

    std::string kind() const override { return "gaussian_fit"; }
    InputShape shape() const override { return shape_; }
    RowMatrix<float> sample(Index count, std::uint64_t seed) const override;

    const Vector<double>& mean() const { return mean_; }
    const Vector<double>& stddev() const { return stddev_; }

private:
    InputShape shape_;
    Vector<double> mean_;
    Vector<double> stddev_;
};

/// Widths and schedule of the small DCGAN-style generator/discriminator pair.
struct GanSpec {
    int latent_dim = 32;
    std::vector<Index> generator_widths{64, 32, 16};
    std::vector<Index> discriminator_widths{16, 32, 64};
    Index norm_groups = 4;
    int epochs = 5;
    double lr = 2e-4;
    int batch_size = 32;
    std::uint64_t seed = 0;
};

/// Latent (latent_dim, 1, 1) -> dense -> 3x (upsample, conv3x3, group norm, relu) -> tanh image.
ModelSpec generator_spec(const GanSpec& spec, InputShape image);

/// Strided 4x4 convs with leaky ReLU, then one logit.
ModelSpec discriminator_spec(const GanSpec& spec, InputShape image);

/// Generator network sampled at latent z ~ N(0, I).
class TinyGanGenerator final : public UnknownGenerator {
public:
    TinyGanGenerator(ModelSpec spec, WeightSet<float> weights, int latent_dim, InputShape image);

    std::string kind() const override { return "tiny_gan"; }
    InputShape shape() const override { return image_; }
    RowMatrix<float> sample(Index count, std::uint64_t seed) const override;

    const ModelSpec& spec() const { return spec_; }
    const WeightSet<float>& weights() const { return weights_; }
    int latent_dim() const { return latent_dim_; }

    /// FSW1 container with a metadata trailer (kind, latent_dim, widths, shape, preprocessing).
    std::string serialize(const GanSpec& gan) const;
    static TinyGanGenerator deserialize(const std::string& bytes);

private:
    ModelSpec spec_;
    WeightSet<float> weights_;
    int latent_dim_;
    InputShape image_;
};

struct GanEpochStats {
    int epoch;
    double discriminator_loss;
    double generator_loss;
};

struct TrainedGan {
    TinyGanGenerator generator;
    WeightSet<float> discriminator;
    ModelSpec discriminator_model;
    std::vector<GanEpochStats> history;
};

/// Adversarial training on an unlabeled image pool (labels ignored), with a
/// binary discriminator and the non-saturating generator loss. Deterministic
/// in `spec.seed`; throws DivergenceError on non-finite losses.
TrainedGan train_generator(const Dataset& pool, const GanSpec& spec);

/// Fraction of `real` and `fake` rows the discriminator classifies correctly.
double discriminator_accuracy(const TrainedGan& gan, const RowMatrix<float>& real, const RowMatrix<float>& fake);

/// Unknown-class augmentation parameters.
struct UnknownConfig {
    double weight = 1.0;    // W_U: loss weight of the unknown class
    double fraction = 0.6;  // F_U: generated samples per local sample
    std::shared_ptr<const UnknownGenerator> generator;
    bool resample_each_epoch = false;
};

/// Raw images as bytes (rounded, clipped to 0..255), one 3xHxW record per row,
/// plane order as in the CIFAR binaries.
std::string encode_raw_rgb(const RowMatrix<float>& images);

/// round(F_U * N_local).
Index unknown_sample_count(double fraction, Index local_samples);

/// Generated images passed through `pre` (when given). Throws ShapeError if
/// the generator's image shape differs from `classifier_input`.
RowMatrix<float> generate_unknown_images(const UnknownGenerator& gen, Index count, std::uint64_t seed,
                                         InputShape classifier_input, const Preprocessor* pre = nullptr);

/// Same samples as a batch labelled with the unknown index K.
template <class Scalar>
Batch<Scalar> generate_unknown(const UnknownGenerator& gen, Index count, std::uint64_t seed, int num_known_classes,
                               InputShape classifier_input, const Preprocessor* pre = nullptr) {
    const auto images = generate_unknown_images(gen, count, seed, classifier_input, pre);
    Batch<Scalar> b;
    b.images = Tensor<Scalar>({count, classifier_input.channels, classifier_input.height, classifier_input.width});
    if (count > 0) b.images.rows() = images.template cast<Scalar>();
    b.labels.assign(static_cast<std::size_t>(count), num_known_classes);
    return b;
}

/// Per-class loss weights of length K+1: 1 for known classes, W_U for the unknown class.
std::vector<double> fedos_loss_weights(int num_known_classes, double unknown_weight);

/// Closed-set prediction from a K+1 logit row: argmax over the first K entries.
template <class Derived>
int mask_unknown(const Eigen::DenseBase<Derived>& logits) {
    if (logits.size() < 2) throw ShapeError("mask_unknown", "needs at least K+1 = 2 logits");
    return argmax_prefix(logits, logits.size() - 1);
}

/// Throws ValueError when a network generator has more than twice the
/// classifier's trainable parameters. Other generator kinds always pass.
void check_generator_size(const UnknownGenerator& gen, const ModelSpec& classifier);

/// Builds a generator from its kind name: "noise", "gaussian_fit" (fitted on
/// `pool`) or "tiny_gan" (loaded from `checkpoint`).
std::shared_ptr<const UnknownGenerator> make_generator(const std::string& kind, InputShape shape,
                                                       const Dataset* pool, const std::string& checkpoint);

} // namespace fedos
