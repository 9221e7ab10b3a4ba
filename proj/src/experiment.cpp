#include "fedos/experiment.hpp"

#include <cmath>
#include <filesystem>

#include <nlohmann/json.hpp>

#include "fedos/error.hpp"
#include "fedos/rng.hpp"

namespace fedos {

namespace fs = std::filesystem;

namespace {

Dataset random_subset(const Dataset& ds, Index count, std::uint64_t seed, std::uint64_t stream) {
    if (count <= 0 || count >= ds.size()) return ds;
    CounterRng rng{seed, stream};
    auto order = rng.permutation(static_cast<int>(ds.size()));
    order.resize(static_cast<std::size_t>(count));
    std::sort(order.begin(), order.end());
    return subset(ds, order);
}

Index generator_payload_bytes(const UnknownGenerator& gen, const VariantSection& v) {
    if (gen.kind() == "tiny_gan") return static_cast<Index>(fs::file_size(v.generator_checkpoint));
    if (gen.kind() == "gaussian_fit") return 2 * gen.shape().size() * static_cast<Index>(sizeof(double));
    return 0;
}

std::string checkpoint_metadata(const std::string& hash, std::uint64_t seed, int round, const std::string& which) {
    nlohmann::ordered_json j;
    j["kind"] = "classifier";
    j["checkpoint"] = which;
    j["config_hash"] = hash;
    j["seed"] = seed;
    j["round"] = round;
    return j.dump();
}

void write_text(const fs::path& path, const std::string& text) { write_file(path.string(), text); }

} // namespace

ExperimentData load_experiment_data(const ExperimentConfig& cfg) {
    const auto& d = cfg.data;
    Dataset train_raw, val_raw;
    if (d.source == "cifar10") {
        auto cifar = load_cifar10(cifar_dir(cfg));
        train_raw = random_subset(cifar.train, d.train_samples, d.seed, 0xc1fa7ULL);
        val_raw = random_subset(cifar.test, d.val_samples, d.seed, 0xc1fa8ULL);
    } else {
        Index train_n = d.train_samples;
        if (train_n == 0) {
            train_n = cfg.run.mode == RunMode::Federated
                          ? static_cast<Index>(cfg.partition.clients) * cfg.partition.samples_per_client
                          : 10000;
        }
        const Index val_n = d.val_samples > 0 ? d.val_samples : std::max<Index>(train_n / 5, 1);
        SyntheticParams params;
        params.pixel_noise = d.synthetic_noise;
        auto all = synthesize_dataset(d.synthetic_classes, train_n + val_n, d.synthetic_size, d.synthetic_size, d.seed,
                                      params);
        std::vector<int> head(static_cast<std::size_t>(train_n)), tail(static_cast<std::size_t>(val_n));
        std::iota(head.begin(), head.end(), 0);
        std::iota(tail.begin(), tail.end(), static_cast<int>(train_n));
        train_raw = subset(all, head);
        val_raw = subset(all, tail);
        val_raw.split = Split::Val;
    }
    ExperimentData out;
    out.preprocessor = fit_preprocessor(train_raw, d.preprocessing);
    out.train = preprocess(train_raw, d.preprocessing, &out.preprocessor.stats);
    out.val = preprocess(val_raw, d.preprocessing, &out.preprocessor.stats);
    out.train_raw = std::move(train_raw);
    return out;
}

ModelSpec experiment_model(const ExperimentConfig& cfg, const ExperimentData& data) {
    const bool unknown_head = cfg.variant.name == "fedos" && cfg.run.mode == RunMode::Federated;
    return lenet5(data.train.num_classes, cfg.model.norm, cfg.model.groups, unknown_head, data.train.shape);
}

PartitionSpec partition_spec(const ExperimentConfig& cfg, std::uint64_t seed) {
    PartitionSpec p;
    p.n_clients = cfg.partition.clients;
    p.samples_per_client = cfg.partition.samples_per_client;
    p.alpha = cfg.partition.alpha;
    p.seed = seed;
    return p;
}

RoundConfig round_config(const ExperimentConfig& cfg, std::uint64_t seed) {
    RoundConfig r;
    r.rounds = cfg.run.rounds;
    r.client_fraction = cfg.run.client_fraction;
    r.local_epochs = cfg.run.local_epochs;
    r.batch_size = cfg.run.batch_size;
    r.lr = cfg.run.lr;
    r.seed = seed;
    r.threads = cfg.run.threads;
    return r;
}

VariantConfig variant_config(const ExperimentConfig& cfg, const ExperimentData& data) {
    const auto& v = cfg.variant;
    const auto kind = variant_kind_from_string(v.name);
    switch (kind) {
        case VariantKind::FedAvg: return VariantConfig::fedavg();
        case VariantKind::FedProx: return VariantConfig::fedprox(v.mu);
        case VariantKind::FedIR: return VariantConfig::fedir(v.smoothing);
        case VariantKind::FedOS: break;
    }
    UnknownConfig u;
    u.weight = v.unknown_weight;
    u.fraction = v.unknown_fraction;
    u.resample_each_epoch = v.resample_each_epoch;
    std::optional<Dataset> folder;
    if (!v.generator_pool.empty()) folder = load_image_folder(resolve_data_path(v.generator_pool));
    u.generator = make_generator(v.generator, data.train.shape, folder ? &*folder : &data.train_raw,
                                 v.generator_checkpoint);
    return VariantConfig::fedos(std::move(u));
}

double reference_accuracy(const ExperimentConfig& cfg) {
    if (cfg.run.reference_summary.empty()) return cfg.run.reference_accuracy;
    const auto j = nlohmann::json::parse(read_file(cfg.run.reference_summary), nullptr, false);
    if (j.is_discarded() || !j.contains("reference_accuracy") || !j["reference_accuracy"].is_number()) {
        throw ConfigError("run.reference_summary", "'" + cfg.run.reference_summary + "' has no reference_accuracy");
    }
    const double r = j["reference_accuracy"].get<double>();
    if (!(r > 0.0 && r <= 1.0)) throw ConfigError("run.reference_summary", "reference_accuracy must be in (0, 1]");
    return r;
}

CentralizedResult run_centralized(const ExperimentConfig& cfg, const ExperimentData& data, std::uint64_t seed) {
    if (cfg.run.mode != RunMode::Centralized) throw ConfigError("run.mode", "run_centralized needs mode centralized");
    const auto spec = experiment_model(cfg, data);
    const auto& train = data.train;
    const std::vector<float> class_weights(static_cast<std::size_t>(spec.output_classes()), 1.0f);
    const auto lr = static_cast<float>(cfg.run.lr);
    const auto bs = static_cast<std::size_t>(cfg.run.batch_size);

    CentralizedResult out;
    out.final_weights = init_weights<float>(spec, derive_seed({seed, 0x1417ULL}));
    out.initial_accuracy = evaluate(spec, out.final_weights, data.val, true);
    out.best_weights = out.final_weights;
    double best = out.initial_accuracy;
    out.trace.variant = "centralized";
    out.trace.seed = seed;
    out.trace.reference_accuracy = reference_accuracy(cfg);

    for (int e = 0; e < cfg.run.epochs; ++e) {
        const auto order = epoch_order(static_cast<int>(train.size()), seed, e + 1, 0, 0);
        double loss_sum = 0.0;
        int steps = 0;
        for (std::size_t start = 0; start < order.size(); start += bs) {
            const std::size_t n = std::min(bs, order.size() - start);
            Batch<float> batch;
            batch.images = Tensor<float>({static_cast<Index>(n), spec.input.channels, spec.input.height,
                                          spec.input.width});
            batch.labels.resize(n);
            auto rows = batch.images.rows();
            for (std::size_t i = 0; i < n; ++i) {
                const int idx = order[start + i];
                rows.row(static_cast<Index>(i)) = train.images.row(idx);
                batch.labels[i] = train.labels[static_cast<std::size_t>(idx)];
            }
            auto res = backward(spec, out.final_weights, batch, std::span<const float>(class_weights));
            sgd_update(out.final_weights, res.grads, lr);
            apply_batch_stats(out.final_weights, res.batch_stats);
            loss_sum += static_cast<double>(res.loss);
            ++steps;
        }
        const double loss = steps ? loss_sum / steps : 0.0;
        if (!std::isfinite(loss) || loss > kDivergenceLoss) {
            throw DivergenceError(e + 1, "mean epoch loss " + std::to_string(loss));
        }
        RoundRecord rec;
        rec.round = e + 1;
        rec.train_loss = loss;
        rec.val_acc = evaluate(spec, out.final_weights, data.val, true);
        rec.rel_val_acc = relative_accuracy(rec.val_acc, out.trace.reference_accuracy);
        rec.selected = {0};
        if (rec.val_acc > best) {
            best = rec.val_acc;
            out.best_weights = out.final_weights;
            out.best_epoch = e + 1;
        }
        out.trace.records.push_back(std::move(rec));
    }
    out.reference_accuracy = out.trace.records.empty() ? out.initial_accuracy : out.trace.records.back().val_acc;
    return out;
}

FederatedResult run_federated(const ExperimentConfig& cfg, const ExperimentData& data, std::uint64_t seed) {
    if (cfg.run.mode != RunMode::Federated) throw ConfigError("run.mode", "run_federated needs mode federated");
    const auto spec = experiment_model(cfg, data);
    const auto partition = dirichlet_partition(data.train, partition_spec(cfg, seed));
    const auto variant = variant_config(cfg, data);
    if (variant.unknown.generator) check_generator_size(*variant.unknown.generator, spec);

    RunOptions opts;
    opts.reference_accuracy = reference_accuracy(cfg);
    opts.alpha = cfg.partition.alpha;
    auto [state, trace] = run_training<float>(data.view(), partition, spec, round_config(cfg, seed), variant, opts);
    FederatedResult out{std::move(state), std::move(trace), 0, 0};
    out.model_bytes = static_cast<Index>(encode_weights(out.state.weights).size());
    if (variant.unknown.generator) out.generator_bytes = generator_payload_bytes(*variant.unknown.generator, cfg.variant);
    return out;
}

std::string seed_summary_json(const ExperimentConfig& cfg, const MetricTrace& trace, const std::string& hash,
                              Index generator_bytes, Index model_bytes, int best_round) {
    nlohmann::ordered_json j;
    j["config_hash"] = hash;
    j["seed"] = trace.seed;
    j["mode"] = to_string(cfg.run.mode);
    j["variant"] = trace.variant;
    j["alpha"] = trace.alpha;
    j["rounds"] = static_cast<int>(trace.records.size());
    j["reference_accuracy"] = trace.reference_accuracy;
    j["max_rel_val_acc"] = trace.max_rel();
    j["mean_rel_val_acc"] = trace.mean_rel();
    j["max_val_acc"] = trace.max_val();
    j["mean_val_acc"] = trace.mean_val();
    j["final_val_acc"] = trace.final_val();
    j["best_round"] = best_round;
    if (cfg.run.mode == RunMode::Federated) {
        Index rounds_bytes = 0;
        for (const auto& r : trace.records) rounds_bytes += 2 * model_bytes * static_cast<Index>(r.selected.size());
        j["communication"] = {{"model_bytes", model_bytes},
                              {"generator_bytes_per_client", generator_bytes},
                              {"generator_bytes_total", generator_bytes * cfg.partition.clients},
                              {"round_bytes_total", rounds_bytes}};
    }
    return j.dump(2) + "\n";
}

ExperimentArtifacts run_experiment(const ExperimentConfig& cfg, const ExperimentData* shared) {
    validate_config(cfg);
    check_paths(cfg);
    std::optional<ExperimentData> own;
    if (!shared) own = load_experiment_data(cfg);
    const ExperimentData& data = shared ? *shared : *own;

    ExperimentArtifacts art;
    art.dir = cfg.output.dir;
    art.config_hash = config_hash(cfg);
    const fs::path root(cfg.output.dir);
    fs::create_directories(root);
    write_text(root / "config.yaml", "# config_hash: " + art.config_hash + "\n" + normalize_config(cfg));

    nlohmann::ordered_json top;
    top["config_hash"] = art.config_hash;
    top["mode"] = to_string(cfg.run.mode);
    top["variant"] = cfg.run.mode == RunMode::Centralized ? "centralized" : cfg.variant.name;
    top["alpha"] = cfg.partition.alpha;
    auto seeds = nlohmann::ordered_json::array();
    double max_sum = 0.0, mean_sum = 0.0, ref_sum = 0.0;

    for (const auto seed : cfg.run.seeds) {
        const fs::path dir = root / ("seed_" + std::to_string(seed));
        fs::create_directories(dir);
        SeedArtifacts sa;
        sa.seed = seed;
        sa.dir = dir.string();
        std::string summary;
        if (cfg.run.mode == RunMode::Centralized) {
            auto res = run_centralized(cfg, data, seed);
            const int last = static_cast<int>(res.trace.records.size());
            write_file((dir / "best.fsw").string(),
                       encode_weights(res.best_weights, checkpoint_metadata(art.config_hash, seed, res.best_epoch, "best")));
            write_file((dir / "final.fsw").string(),
                       encode_weights(res.final_weights, checkpoint_metadata(art.config_hash, seed, last, "final")));
            auto j = nlohmann::ordered_json::parse(seed_summary_json(cfg, res.trace, art.config_hash, 0, 0, res.best_epoch));
            j["initial_val_acc"] = res.initial_accuracy;
            j["reference_accuracy"] = res.reference_accuracy;
            summary = j.dump(2) + "\n";
            ref_sum += res.reference_accuracy;
            sa.trace = std::move(res.trace);
        } else {
            auto res = run_federated(cfg, data, seed);
            write_file((dir / "best.fsw").string(),
                       encode_weights(res.state.best_weights,
                                      checkpoint_metadata(art.config_hash, seed, res.state.best_round, "best")));
            write_file((dir / "final.fsw").string(),
                       encode_weights(res.state.weights,
                                      checkpoint_metadata(art.config_hash, seed, res.state.round, "final")));
            summary = seed_summary_json(cfg, res.trace, art.config_hash, res.generator_bytes, res.model_bytes,
                                        res.state.best_round);
            sa.trace = std::move(res.trace);
        }
        write_text(dir / "trace.csv", trace_to_csv(sa.trace, art.config_hash));
        write_text(dir / "summary.json", summary);
        seeds.push_back({{"seed", seed},
                         {"max_rel_val_acc", sa.trace.max_rel()},
                         {"mean_rel_val_acc", sa.trace.mean_rel()},
                         {"final_val_acc", sa.trace.final_val()}});
        max_sum += sa.trace.max_rel();
        mean_sum += sa.trace.mean_rel();
        art.seeds.push_back(std::move(sa));
    }
    const auto n = static_cast<double>(cfg.run.seeds.size());
    top["seeds"] = seeds;
    top["max_rel_val_acc"] = max_sum / n;
    top["mean_rel_val_acc"] = mean_sum / n;
    if (cfg.run.mode == RunMode::Centralized) top["reference_accuracy"] = ref_sum / n;
    write_text(root / "summary.json", top.dump(2) + "\n");
    return art;
}

Dataset load_gan_pool(const ExperimentConfig& cfg) {
    const auto& g = cfg.gan;
    if (!g.pool.empty()) return random_subset(load_image_folder(resolve_data_path(g.pool)), g.pool_samples, cfg.data.seed, 0x9a1ULL);
    if (g.pool_samples <= 0) throw ConfigError("gan.pool_samples", "a synthetic pool needs a positive size");
    SyntheticParams params;
    params.pixel_noise = cfg.data.synthetic_noise;
    // a different draw from the classifier's synthetic data
    return synthesize_dataset(cfg.data.synthetic_classes, g.pool_samples, cfg.data.synthetic_size,
                              cfg.data.synthetic_size, derive_seed({cfg.data.seed, 0x9a1ULL}), params);
}

GanSpec gan_spec(const ExperimentConfig& cfg, std::uint64_t seed) {
    GanSpec s;
    s.latent_dim = cfg.gan.latent_dim;
    s.generator_widths = cfg.gan.generator_widths;
    s.discriminator_widths = cfg.gan.discriminator_widths;
    s.norm_groups = cfg.gan.norm_groups;
    s.epochs = cfg.gan.epochs;
    s.lr = cfg.gan.lr;
    s.batch_size = cfg.gan.batch_size;
    s.seed = seed;
    return s;
}

GanRun run_gan_training(const ExperimentConfig& cfg, std::uint64_t seed) {
    const auto pool = load_gan_pool(cfg);
    const auto spec = gan_spec(cfg, seed);
    const int classes = cfg.data.source == "synthetic" ? cfg.data.synthetic_classes : 10;
    const auto classifier = lenet5(classes, cfg.model.norm, cfg.model.groups, true, pool.shape);
    const Index g_params = parameter_count(generator_spec(spec, pool.shape));
    const Index c_params = parameter_count(classifier);
    if (g_params > 2 * c_params) {
        throw ConfigError("gan.generator_widths", "generator has " + std::to_string(g_params) +
                                                      " parameters, more than twice the classifier's " +
                                                      std::to_string(c_params));
    }
    GanRun run{train_generator(pool, spec), g_params, c_params, 0.0, 0.0};

    constexpr Index kEvalSamples = 2000;
    const auto fake = run.gan.generator.sample(kEvalSamples, derive_seed({seed, 0xe7a1ULL}));
    const Eigen::RowVectorXd gm = fake.cast<double>().colwise().mean();
    const Eigen::RowVectorXd pm = pool.images.cast<double>().colwise().mean();
    run.mean_image_error = (gm - pm).norm() / pm.norm();
    const Index n_disc = std::min<Index>(pool.size(), 1000);
    run.discriminator_accuracy = discriminator_accuracy(run.gan, pool.images.topRows(n_disc),
                                                        run.gan.generator.sample(n_disc, derive_seed({seed, 0xd15eULL})));

    const fs::path root(cfg.output.dir);
    fs::create_directories(root);
    write_file((root / "generator.fsw").string(), run.gan.generator.serialize(spec));
    write_file((root / "samples.rgb").string(), encode_raw_rgb(fake.topRows(std::min<Index>(64, kEvalSamples))));
    nlohmann::ordered_json j;
    j["config_hash"] = config_hash(cfg);
    j["seed"] = seed;
    j["pool_samples"] = pool.size();
    j["generator_parameters"] = run.generator_parameters;
    j["classifier_parameters"] = run.classifier_parameters;
    j["mean_image_error"] = run.mean_image_error;
    j["discriminator_accuracy"] = run.discriminator_accuracy;
    auto hist = nlohmann::ordered_json::array();
    for (const auto& h : run.gan.history) {
        hist.push_back({{"epoch", h.epoch}, {"discriminator_loss", h.discriminator_loss}, {"generator_loss", h.generator_loss}});
    }
    j["history"] = hist;
    write_file((root / "gan_summary.json").string(), j.dump(2) + "\n");
    return run;
}

ExperimentConfig with_axis(const ExperimentConfig& base, const std::string& axis, double value) {
    auto cfg = base;
    if (axis == "alpha") {
        cfg.partition.alpha = value;
    } else if (axis == "local_epochs") {
        if (value != std::floor(value)) throw ConfigError("ablation.values", "local_epochs values must be integers");
        cfg.run.local_epochs = static_cast<int>(value);
    } else if (axis == "client_fraction") {
        cfg.run.client_fraction = value;
    } else if (axis == "W_U") {
        cfg.variant.unknown_weight = value;
    } else if (axis == "F_U") {
        cfg.variant.unknown_fraction = value;
    } else {
        throw ConfigError("ablation.axis", "unknown axis '" + axis + "'");
    }
    validate_config(cfg);
    return cfg;
}

} // namespace fedos
