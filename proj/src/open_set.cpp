#include "fedos/open_set.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "fedos/rng.hpp"

namespace fedos {

RowMatrix<float> NoiseGenerator::sample(Index count, std::uint64_t seed) const {
    RowMatrix<float> out(count, shape_.size());
    for (Index i = 0; i < count; ++i) {
        CounterRng rng{seed, 0x4015eULL, static_cast<std::uint64_t>(i)};
        for (Index j = 0; j < out.cols(); ++j) out(i, j) = static_cast<float>(std::floor(rng.uniform() * 256.0));
    }
    return out;
}

GaussianFitGenerator::GaussianFitGenerator(InputShape shape, Vector<double> mean, Vector<double> stddev)
    : shape_(shape), mean_(std::move(mean)), stddev_(std::move(stddev)) {
    if (mean_.size() != shape_.size() || stddev_.size() != shape_.size()) {
        throw ShapeError("gaussian_fit", "statistics do not match image shape");
    }
}

GaussianFitGenerator GaussianFitGenerator::fit(const Dataset& pool) {
    validate(pool);
    const auto x = pool.images.cast<double>();
    Vector<double> mean = x.colwise().mean().transpose();
    Vector<double> var = (x.rowwise() - mean.transpose()).array().square().colwise().mean().transpose();
    return {pool.shape, std::move(mean), var.cwiseSqrt()};
}

RowMatrix<float> GaussianFitGenerator::sample(Index count, std::uint64_t seed) const {
    RowMatrix<float> out(count, shape_.size());
    for (Index i = 0; i < count; ++i) {
        CounterRng rng{seed, 0x9a055ULL, static_cast<std::uint64_t>(i)};
        for (Index j = 0; j < out.cols(); ++j) {
            out(i, j) = static_cast<float>(rng.normal(mean_[j], stddev_[j]));
        }
    }
    return out;
}

ModelSpec generator_spec(const GanSpec& spec, InputShape image) {
    const auto ups = static_cast<Index>(spec.generator_widths.size());
    if (ups == 0) throw ValueError("generator needs at least one width");
    const Index base_h = image.height >> ups;
    const Index base_w = image.width >> ups;
    if (base_h <= 0 || (base_h << ups) != image.height || (base_w << ups) != image.width) {
        throw ShapeError("generator", "image size is not divisible by 2^" + std::to_string(ups));
    }
    ModelSpec m;
    m.input = {spec.latent_dim, 1, 1};
    const Index w0 = spec.generator_widths[0];
    m.layers.emplace_back(layer::Dense{w0 * base_h * base_w});
    m.layers.emplace_back(layer::Reshape{w0, base_h, base_w});
    m.layers.emplace_back(layer::Norm{NormKind::Group, std::min(spec.norm_groups, w0)});
    m.layers.emplace_back(layer::Act{Activation::Relu});
    for (std::size_t i = 1; i <= spec.generator_widths.size(); ++i) {
        const bool last = i == spec.generator_widths.size();
        const Index width = last ? image.channels : spec.generator_widths[i];
        m.layers.emplace_back(layer::Upsample{2});
        m.layers.emplace_back(layer::Conv{width, 3, 1, 1});
        if (last) {
            m.layers.emplace_back(layer::Act{Activation::Tanh});
        } else {
            m.layers.emplace_back(layer::Norm{NormKind::Group, std::min(spec.norm_groups, width)});
            m.layers.emplace_back(layer::Act{Activation::Relu});
        }
    }
    m.num_known_classes = static_cast<int>(image.size());
    return m;
}

ModelSpec discriminator_spec(const GanSpec& spec, InputShape image) {
    ModelSpec m;
    m.input = image;
    for (auto w : spec.discriminator_widths) {
        m.layers.emplace_back(layer::Conv{w, 4, 2, 1});
        m.layers.emplace_back(layer::Act{Activation::LeakyRelu});
    }
    m.layers.emplace_back(layer::Dense{1});
    m.num_known_classes = 1;
    return m;
}

TinyGanGenerator::TinyGanGenerator(ModelSpec spec, WeightSet<float> weights, int latent_dim, InputShape image)
    : spec_(std::move(spec)), weights_(std::move(weights)), latent_dim_(latent_dim), image_(image) {
    check_weights(spec_, weights_);
    const auto shapes = infer_shapes(spec_);
    if (shapes.back() != Shape{image_.channels, image_.height, image_.width}) {
        throw ShapeError("tiny_gan", "generator emits " + shape_string(shapes.back()));
    }
}

namespace {

Tensor<float> latent_batch(Index count, int latent_dim, std::uint64_t seed) {
    Tensor<float> z({count, latent_dim, 1, 1});
    CounterRng rng{seed, 0x1a7e47ULL};
    for (Index k = 0; k < z.size(); ++k) z.data[k] = static_cast<float>(rng.normal());
    return z;
}

/// Mean binary cross-entropy on logits against a constant target.
std::pair<double, Tensor<float>> bce_logits(const Tensor<float>& logits, float target) {
    Tensor<float> d(logits.shape);
    double loss = 0.0;
    const auto n = static_cast<double>(logits.size());
    for (Index i = 0; i < logits.size(); ++i) {
        const double s = logits.data[i];
        // softplus(-s) for target 1, softplus(s) for target 0
        const double z = target > 0.5f ? -s : s;
        loss += std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
        const double sig = 1.0 / (1.0 + std::exp(-s));
        d.data[i] = static_cast<float>((sig - target) / n);
    }
    return {loss / n, d};
}

Tensor<float> to_tanh_range(const RowMatrix<float>& images, std::span<const int> idx, InputShape shape) {
    Tensor<float> t({static_cast<Index>(idx.size()), shape.channels, shape.height, shape.width});
    auto rows = t.rows();
    for (std::size_t i = 0; i < idx.size(); ++i) {
        rows.row(static_cast<Index>(i)) = images.row(idx[i]).array() / 127.5f - 1.0f;
    }
    return t;
}

} // namespace

RowMatrix<float> TinyGanGenerator::sample(Index count, std::uint64_t seed) const {
    RowMatrix<float> out(count, image_.size());
    constexpr Index kChunk = 256;
    for (Index start = 0; start < count; start += kChunk) {
        const Index n = std::min(kChunk, count - start);
        const auto z = latent_batch(n, latent_dim_, derive_seed({seed, static_cast<std::uint64_t>(start)}));
        const auto x = forward_images(spec_, weights_, z, Mode::Eval);
        out.middleRows(start, n) = ((x.rows().array() + 1.0f) * 127.5f).cwiseMax(0.0f).cwiseMin(255.0f).matrix();
    }
    return out;
}

std::string TinyGanGenerator::serialize(const GanSpec& gan) const {
    nlohmann::ordered_json meta;
    meta["kind"] = kind();
    meta["latent_dim"] = latent_dim_;
    meta["generator_widths"] = gan.generator_widths;
    meta["norm_groups"] = gan.norm_groups;
    meta["input_shape"] = {image_.channels, image_.height, image_.width};
    meta["preprocessing"] = "raw";
    return encode_weights(weights_, meta.dump());
}

TinyGanGenerator TinyGanGenerator::deserialize(const std::string& bytes) {
    const auto contents = decode_fsw1(bytes);
    if (!contents.metadata) throw IoError("generator checkpoint lacks a metadata record");
    const auto meta = nlohmann::json::parse(*contents.metadata);
    if (meta.at("kind").get<std::string>() != "tiny_gan") {
        throw IoError("checkpoint kind is " + meta.at("kind").get<std::string>() + ", expected tiny_gan");
    }
    GanSpec gan;
    gan.latent_dim = meta.at("latent_dim").get<int>();
    gan.generator_widths = meta.at("generator_widths").get<std::vector<Index>>();
    gan.norm_groups = meta.at("norm_groups").get<Index>();
    const auto shape = meta.at("input_shape").get<std::vector<Index>>();
    if (shape.size() != 3) throw IoError("generator metadata: input_shape must have 3 entries");
    const InputShape image{shape[0], shape[1], shape[2]};
    auto spec = generator_spec(gan, image);
    auto weights = decode_weights<float>(spec, bytes);
    return {std::move(spec), std::move(weights), gan.latent_dim, image};
}

TrainedGan train_generator(const Dataset& pool, const GanSpec& spec) {
    validate(pool);
    const ModelSpec g_spec = generator_spec(spec, pool.shape);
    const ModelSpec d_spec = discriminator_spec(spec, pool.shape);
    auto g_w = init_weights<float>(g_spec, derive_seed({spec.seed, 0x6e4ULL}));
    auto d_w = init_weights<float>(d_spec, derive_seed({spec.seed, 0xd15cULL}));
    AdamState<float> g_opt, d_opt;
    const auto lr = static_cast<float>(spec.lr);

    std::vector<GanEpochStats> history;
    const auto n = static_cast<int>(pool.size());
    for (int epoch = 0; epoch < spec.epochs; ++epoch) {
        CounterRng order_rng{spec.seed, 0x0de7ULL, static_cast<std::uint64_t>(epoch)};
        const auto order = order_rng.permutation(n);
        double d_sum = 0.0, g_sum = 0.0;
        int steps = 0;
        for (int start = 0; start < n; start += spec.batch_size) {
            const int bsz = std::min(spec.batch_size, n - start);
            const std::span<const int> idx(order.data() + start, static_cast<std::size_t>(bsz));
            const auto real = to_tanh_range(pool.images, idx, pool.shape);
            const auto step_seed = derive_seed({spec.seed, static_cast<std::uint64_t>(epoch),
                                                static_cast<std::uint64_t>(start)});

            // Discriminator: real -> 1, fake -> 0.
            const auto fake = forward_images(g_spec, g_w, latent_batch(bsz, spec.latent_dim, step_seed), Mode::Train);
            auto d_grads = d_w.zeros_like();
            ForwardTrace<float> tr_real, tr_fake;
            const auto [loss_real, d_real] = bce_logits(forward_images(d_spec, d_w, real, Mode::Train, &tr_real), 1.0f);
            backprop(d_spec, d_w, tr_real, d_real, d_grads);
            const auto [loss_fake, d_fake] = bce_logits(forward_images(d_spec, d_w, fake, Mode::Train, &tr_fake), 0.0f);
            backprop(d_spec, d_w, tr_fake, d_fake, d_grads);
            adam_update(d_w, d_grads, d_opt, lr);

            // Generator: non-saturating loss -log D(G(z)).
            ForwardTrace<float> tr_g, tr_d;
            const auto gen = forward_images(g_spec, g_w, latent_batch(bsz, spec.latent_dim, step_seed + 1), Mode::Train,
                                            &tr_g);
            const auto [loss_g, d_logit] = bce_logits(forward_images(d_spec, d_w, gen, Mode::Train, &tr_d), 1.0f);
            auto scratch = d_w.zeros_like();
            const auto d_image = backprop(d_spec, d_w, tr_d, d_logit, scratch);
            auto g_grads = g_w.zeros_like();
            backprop(g_spec, g_w, tr_g, d_image, g_grads);
            adam_update(g_w, g_grads, g_opt, lr);

            const double d_loss = loss_real + loss_fake;
            if (!std::isfinite(d_loss) || !std::isfinite(loss_g)) {
                throw DivergenceError(epoch, "adversarial loss is not finite at sample " + std::to_string(start));
            }
            d_sum += d_loss;
            g_sum += loss_g;
            ++steps;
        }
        history.push_back({epoch, d_sum / std::max(steps, 1), g_sum / std::max(steps, 1)});
    }
    return {TinyGanGenerator(g_spec, std::move(g_w), spec.latent_dim, pool.shape), std::move(d_w), d_spec,
            std::move(history)};
}

double discriminator_accuracy(const TrainedGan& gan, const RowMatrix<float>& real, const RowMatrix<float>& fake) {
    const auto score = [&](const RowMatrix<float>& images, bool is_real) {
        std::vector<int> idx(static_cast<std::size_t>(images.rows()));
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
        const auto x = to_tanh_range(images, idx, gan.generator.shape());
        const auto logits = forward_images(gan.discriminator_model, gan.discriminator, x, Mode::Eval);
        int correct = 0;
        for (Index i = 0; i < logits.size(); ++i) correct += ((logits.data[i] > 0.0f) == is_real) ? 1 : 0;
        return correct;
    };
    const int hits = score(real, true) + score(fake, false);
    return static_cast<double>(hits) / static_cast<double>(real.rows() + fake.rows());
}

std::string encode_raw_rgb(const RowMatrix<float>& images) {
    std::string bytes(static_cast<std::size_t>(images.size()), '\0');
    std::size_t k = 0;
    for (Index i = 0; i < images.rows(); ++i) {
        for (Index j = 0; j < images.cols(); ++j) {
            const float v = std::clamp(std::round(images(i, j)), 0.0f, 255.0f);
            bytes[k++] = static_cast<char>(static_cast<unsigned char>(v));
        }
    }
    return bytes;
}

Index unknown_sample_count(double fraction, Index local_samples) {
    if (!(fraction >= 0.0)) throw ValueError("unknown fraction must be non-negative");
    return static_cast<Index>(std::llround(fraction * static_cast<double>(local_samples)));
}

RowMatrix<float> generate_unknown_images(const UnknownGenerator& gen, Index count, std::uint64_t seed,
                                         InputShape classifier_input, const Preprocessor* pre) {
    if (count < 0) throw ValueError("unknown sample count must be non-negative");
    if (!(gen.shape() == classifier_input)) {
        throw ShapeError(gen.kind(), "generator emits " + std::to_string(gen.shape().channels) + "x" +
                                         std::to_string(gen.shape().height) + "x" + std::to_string(gen.shape().width) +
                                         " images, classifier expects " + std::to_string(classifier_input.channels) +
                                         "x" + std::to_string(classifier_input.height) + "x" +
                                         std::to_string(classifier_input.width));
    }
    auto images = gen.sample(count, seed);
    if (pre) pre->apply(images);
    return images;
}

std::vector<double> fedos_loss_weights(int num_known_classes, double unknown_weight) {
    if (!(unknown_weight >= 0.0)) throw ValueError("W_U must be non-negative");
    std::vector<double> w(static_cast<std::size_t>(num_known_classes) + 1, 1.0);
    w.back() = unknown_weight;
    return w;
}

void check_generator_size(const UnknownGenerator& gen, const ModelSpec& classifier) {
    const auto* gan = dynamic_cast<const TinyGanGenerator*>(&gen);
    if (!gan) return;
    const Index g = parameter_count(gan->spec());
    const Index c = parameter_count(classifier);
    if (g > 2 * c) {
        throw ValueError("generator has " + std::to_string(g) + " parameters, more than twice the classifier's " +
                         std::to_string(c));
    }
}

std::shared_ptr<const UnknownGenerator> make_generator(const std::string& kind, InputShape shape,
                                                       const Dataset* pool, const std::string& checkpoint) {
    if (kind == "noise") return std::make_shared<NoiseGenerator>(shape);
    if (kind == "gaussian_fit") {
        if (!pool) throw ValueError("gaussian_fit generator needs an image pool");
        return std::make_shared<GaussianFitGenerator>(GaussianFitGenerator::fit(*pool));
    }
    if (kind == "tiny_gan") {
        if (checkpoint.empty()) throw ValueError("tiny_gan generator needs a checkpoint path");
        return std::make_shared<TinyGanGenerator>(TinyGanGenerator::deserialize(read_file(checkpoint)));
    }
    throw ValueError("unknown generator kind '" + kind + "' (expected noise|gaussian_fit|tiny_gan)");
}

} // namespace fedos
