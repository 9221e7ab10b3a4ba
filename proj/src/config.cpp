#include "fedos/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <set>

#include <yaml-cpp/yaml.h>

#include "fedos/error.hpp"
#include "fedos/weights.hpp"

namespace fedos {

namespace fs = std::filesystem;

std::string to_string(RunMode mode) { return mode == RunMode::Centralized ? "centralized" : "federated"; }

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

namespace {

// Scalar readers. Each throws ConfigError carrying the field path.

template <class T>
T read_scalar(const YAML::Node& node, const std::string& path, const char* what) {
    if (!node.IsScalar()) throw ConfigError(path, std::string("expected ") + what);
    try {
        return node.as<T>();
    } catch (const YAML::Exception&) {
        throw ConfigError(path, std::string("expected ") + what + ", got '" + node.Scalar() + "'");
    }
}

double read_real(const YAML::Node& node, const std::string& path) {
    const double v = read_scalar<double>(node, path, "a number");
    if (!std::isfinite(v)) throw ConfigError(path, "must be finite");
    return v;
}

long long read_integer(const YAML::Node& node, const std::string& path) {
    return read_scalar<long long>(node, path, "an integer");
}

std::string read_string(const YAML::Node& node, const std::string& path) {
    if (node.IsNull()) return "";
    return read_scalar<std::string>(node, path, "a string");
}

template <class T, class F>
std::vector<T> read_list(const YAML::Node& node, const std::string& path, F&& item) {
    if (!node.IsSequence()) throw ConfigError(path, "expected a list");
    std::vector<T> out;
    for (std::size_t i = 0; i < node.size(); ++i) out.push_back(item(node[i], path + "[" + std::to_string(i) + "]"));
    return out;
}

template <class E, class F>
E read_enum(const YAML::Node& node, const std::string& path, F&& parse) {
    const auto s = read_string(node, path);
    try {
        return parse(s);
    } catch (const ValueError& e) {
        throw ConfigError(path, e.what());
    }
}

RunMode run_mode_from_string(const std::string& s) {
    if (s == "centralized") return RunMode::Centralized;
    if (s == "federated") return RunMode::Federated;
    throw ValueError("unknown mode '" + s + "' (expected centralized|federated)");
}

// Canonical scalar spelling: shortest round-trip form for reals.
std::string format_real(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    std::string s(buf, end);
    if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
    return s;
}

std::string quote(const std::string& s) {
    YAML::Emitter e;
    e << YAML::DoubleQuoted << s;
    return e.c_str();
}

template <class T, class F>
std::string format_list(const std::vector<T>& v, F&& item) {
    std::string s = "[";
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + item(v[i]);
    return s + "]";
}

// One read/write pair per field type.

void decode(const YAML::Node& n, const std::string& p, int& out) { out = static_cast<int>(read_integer(n, p)); }
void decode(const YAML::Node& n, const std::string& p, long& out) { out = static_cast<long>(read_integer(n, p)); }
void decode(const YAML::Node& n, const std::string& p, double& out) { out = read_real(n, p); }
void decode(const YAML::Node& n, const std::string& p, bool& out) { out = read_scalar<bool>(n, p, "true or false"); }
void decode(const YAML::Node& n, const std::string& p, std::string& out) { out = read_string(n, p); }
void decode(const YAML::Node& n, const std::string& p, std::uint64_t& out) {
    out = read_scalar<std::uint64_t>(n, p, "a non-negative integer");
}
void decode(const YAML::Node& n, const std::string& p, Preprocessing& out) {
    out = read_enum<Preprocessing>(n, p, preprocessing_from_string);
}
void decode(const YAML::Node& n, const std::string& p, NormKind& out) {
    out = read_enum<NormKind>(n, p, norm_kind_from_string);
}
void decode(const YAML::Node& n, const std::string& p, RunMode& out) {
    out = read_enum<RunMode>(n, p, run_mode_from_string);
}
template <class T>
void decode(const YAML::Node& n, const std::string& p, std::vector<T>& out) {
    const auto item = [](const YAML::Node& x, const std::string& q) {
        T v{};
        decode(x, q, v);
        return v;
    };
    // a bare scalar is read as a one-element list
    out = n.IsSequence() ? read_list<T>(n, p, item) : std::vector<T>{item(n, p)};
}

std::string encode(int v) { return std::to_string(v); }
std::string encode(long v) { return std::to_string(v); }
std::string encode(std::uint64_t v) { return std::to_string(v); }
std::string encode(double v) { return format_real(v); }
std::string encode(bool v) { return v ? "true" : "false"; }
std::string encode(const std::string& v) { return quote(v); }
std::string encode(Preprocessing v) { return quote(to_string(v)); }
std::string encode(NormKind v) { return quote(to_string(v)); }
std::string encode(RunMode v) { return quote(to_string(v)); }
template <class T>
std::string encode(const std::vector<T>& v) {
    return format_list(v, [](const T& x) { return encode(x); });
}

struct Field {
    std::string section;
    std::string key;
    std::function<void(ExperimentConfig&, const YAML::Node&, const std::string&)> read;
    std::function<std::string(const ExperimentConfig&)> write;
};

template <class S, class T>
Field field(std::string section, std::string key, S ExperimentConfig::*sec, T S::*member) {
    return {std::move(section), std::move(key),
            [sec, member](ExperimentConfig& c, const YAML::Node& n, const std::string& p) { decode(n, p, c.*sec.*member); },
            [sec, member](const ExperimentConfig& c) { return encode(c.*sec.*member); }};
}

const std::vector<Field>& schema() {
    using C = ExperimentConfig;
    static const std::vector<Field> fields{
        field("data", "source", &C::data, &DataSection::source),
        field("data", "root", &C::data, &DataSection::root),
        field("data", "train_samples", &C::data, &DataSection::train_samples),
        field("data", "val_samples", &C::data, &DataSection::val_samples),
        field("data", "preprocessing", &C::data, &DataSection::preprocessing),
        field("data", "synthetic_classes", &C::data, &DataSection::synthetic_classes),
        field("data", "synthetic_size", &C::data, &DataSection::synthetic_size),
        field("data", "seed", &C::data, &DataSection::seed),
        field("data", "synthetic_noise", &C::data, &DataSection::synthetic_noise),

        field("model", "norm", &C::model, &ModelSection::norm),
        field("model", "groups", &C::model, &ModelSection::groups),

        field("run", "mode", &C::run, &RunSection::mode),
        field("run", "rounds", &C::run, &RunSection::rounds),
        field("run", "epochs", &C::run, &RunSection::epochs),
        field("run", "client_fraction", &C::run, &RunSection::client_fraction),
        field("run", "local_epochs", &C::run, &RunSection::local_epochs),
        field("run", "batch_size", &C::run, &RunSection::batch_size),
        field("run", "lr", &C::run, &RunSection::lr),
        field("run", "threads", &C::run, &RunSection::threads),
        field("run", "seeds", &C::run, &RunSection::seeds),
        field("run", "reference_accuracy", &C::run, &RunSection::reference_accuracy),
        field("run", "reference_summary", &C::run, &RunSection::reference_summary),

        field("partition", "clients", &C::partition, &PartitionSection::clients),
        field("partition", "samples_per_client", &C::partition, &PartitionSection::samples_per_client),
        field("partition", "alpha", &C::partition, &PartitionSection::alpha),

        field("variant", "name", &C::variant, &VariantSection::name),
        field("variant", "mu", &C::variant, &VariantSection::mu),
        field("variant", "smoothing", &C::variant, &VariantSection::smoothing),
        field("variant", "unknown_weight", &C::variant, &VariantSection::unknown_weight),
        field("variant", "unknown_fraction", &C::variant, &VariantSection::unknown_fraction),
        field("variant", "generator", &C::variant, &VariantSection::generator),
        field("variant", "generator_pool", &C::variant, &VariantSection::generator_pool),
        field("variant", "generator_checkpoint", &C::variant, &VariantSection::generator_checkpoint),
        field("variant", "resample_each_epoch", &C::variant, &VariantSection::resample_each_epoch),

        field("gan", "pool", &C::gan, &GanSection::pool),
        field("gan", "pool_samples", &C::gan, &GanSection::pool_samples),
        field("gan", "latent_dim", &C::gan, &GanSection::latent_dim),
        field("gan", "generator_widths", &C::gan, &GanSection::generator_widths),
        field("gan", "discriminator_widths", &C::gan, &GanSection::discriminator_widths),
        field("gan", "norm_groups", &C::gan, &GanSection::norm_groups),
        field("gan", "epochs", &C::gan, &GanSection::epochs),
        field("gan", "lr", &C::gan, &GanSection::lr),
        field("gan", "batch_size", &C::gan, &GanSection::batch_size),

        field("ablation", "axis", &C::ablation, &AblationSection::axis),
        field("ablation", "values", &C::ablation, &AblationSection::values),

        field("report", "checkpoints", &C::report, &ReportSection::checkpoints),

        field("output", "dir", &C::output, &OutputSection::dir),
    };
    return fields;
}

const Field* find_field(const std::string& section, const std::string& key) {
    for (const auto& f : schema()) {
        if (f.section == section && f.key == key) return &f;
    }
    return nullptr;
}

bool known_section(const std::string& section) {
    for (const auto& f : schema()) {
        if (f.section == section) return true;
    }
    return false;
}

void require(bool ok, const std::string& field, const std::string& message) {
    if (!ok) throw ConfigError(field, message);
}

bool exists(const std::string& path) {
    std::error_code ec;
    return fs::exists(path, ec);
}

} // namespace

std::string resolve_data_path(const std::string& path) {
    if (path.empty() || fs::path(path).is_absolute()) return path;
    if (const char* root = std::getenv("FEDOS_DATA_ROOT"); root && *root) return (fs::path(root) / path).string();
    return path;
}

std::string cifar_dir(const ExperimentConfig& cfg) {
    if (!cfg.data.root.empty()) return resolve_data_path(cfg.data.root);
    const char* root = std::getenv("FEDOS_DATA_ROOT");
    return (fs::path(root && *root ? root : ".") / "cifar-10-batches-bin").string();
}

void validate_config(const ExperimentConfig& c) {
    require(c.data.source == "cifar10" || c.data.source == "synthetic", "data.source",
            "expected cifar10|synthetic, got '" + c.data.source + "'");
    require(c.data.train_samples >= 0, "data.train_samples", "must be >= 0");
    require(c.data.val_samples >= 0, "data.val_samples", "must be >= 0");
    require(c.data.synthetic_classes >= 2, "data.synthetic_classes", "must be >= 2");
    require(c.data.synthetic_size >= 1, "data.synthetic_size", "must be >= 1");
    require(c.data.synthetic_noise >= 0.0, "data.synthetic_noise", "must be >= 0");

    require(c.model.groups.size() == 3, "model.groups", "needs one group count per conv layer (3)");
    for (std::size_t i = 0; i < c.model.groups.size(); ++i) {
        require(c.model.groups[i] >= 1, "model.groups[" + std::to_string(i) + "]", "must be >= 1");
    }

    require(c.run.rounds >= 0, "run.rounds", "must be >= 0");
    require(c.run.epochs >= 0, "run.epochs", "must be >= 0");
    require(c.run.client_fraction > 0.0 && c.run.client_fraction <= 1.0, "run.client_fraction", "must be in (0, 1]");
    require(c.run.local_epochs >= 0, "run.local_epochs", "must be >= 0");
    require(c.run.batch_size >= 1, "run.batch_size", "must be >= 1");
    require(c.run.lr >= 0.0, "run.lr", "must be >= 0");
    require(c.run.threads >= 1, "run.threads", "must be >= 1");
    require(!c.run.seeds.empty(), "run.seeds", "needs at least one seed");
    require(std::set<std::uint64_t>(c.run.seeds.begin(), c.run.seeds.end()).size() == c.run.seeds.size(), "run.seeds",
            "seeds must be distinct");
    require(c.run.reference_accuracy > 0.0 && c.run.reference_accuracy <= 1.0, "run.reference_accuracy",
            "must be in (0, 1]");

    require(c.partition.clients >= 1, "partition.clients", "must be >= 1");
    require(c.partition.samples_per_client >= 1, "partition.samples_per_client", "must be >= 1");
    require(c.partition.alpha > 0.0, "partition.alpha", "must be > 0");

    const auto& v = c.variant;
    require(v.name == "fedavg" || v.name == "fedprox" || v.name == "fedir" || v.name == "fedos", "variant.name",
            "expected fedavg|fedprox|fedir|fedos, got '" + v.name + "'");
    require(v.mu >= 0.0, "variant.mu", "must be >= 0");
    require(v.smoothing >= 0.0, "variant.smoothing", "must be >= 0");
    require(v.unknown_weight >= 0.0, "variant.unknown_weight", "must be >= 0");
    require(v.unknown_fraction >= 0.0, "variant.unknown_fraction", "must be >= 0");
    require(v.generator == "noise" || v.generator == "gaussian_fit" || v.generator == "tiny_gan", "variant.generator",
            "expected noise|gaussian_fit|tiny_gan, got '" + v.generator + "'");
    if (v.name == "fedos" && v.generator == "tiny_gan") {
        require(!v.generator_checkpoint.empty(), "variant.generator_checkpoint", "required for the tiny_gan generator");
    }

    require(c.gan.pool_samples >= 0, "gan.pool_samples", "must be >= 0");
    require(c.gan.latent_dim >= 1, "gan.latent_dim", "must be >= 1");
    require(!c.gan.generator_widths.empty(), "gan.generator_widths", "needs at least one width");
    require(!c.gan.discriminator_widths.empty(), "gan.discriminator_widths", "needs at least one width");
    for (std::size_t i = 0; i < c.gan.generator_widths.size(); ++i) {
        require(c.gan.generator_widths[i] >= 1, "gan.generator_widths[" + std::to_string(i) + "]", "must be >= 1");
    }
    for (std::size_t i = 0; i < c.gan.discriminator_widths.size(); ++i) {
        require(c.gan.discriminator_widths[i] >= 1, "gan.discriminator_widths[" + std::to_string(i) + "]",
                "must be >= 1");
    }
    require(c.gan.norm_groups >= 1, "gan.norm_groups", "must be >= 1");
    require(c.gan.epochs >= 0, "gan.epochs", "must be >= 0");
    require(c.gan.lr > 0.0, "gan.lr", "must be > 0");
    require(c.gan.batch_size >= 1, "gan.batch_size", "must be >= 1");

    const auto& a = c.ablation;
    if (!a.axis.empty()) {
        require(a.axis == "alpha" || a.axis == "local_epochs" || a.axis == "client_fraction" || a.axis == "W_U" ||
                    a.axis == "F_U",
                "ablation.axis", "expected alpha|local_epochs|client_fraction|W_U|F_U, got '" + a.axis + "'");
        require(!a.values.empty(), "ablation.values", "needs at least one value");
    }

    for (std::size_t i = 0; i < c.report.checkpoints.size(); ++i) {
        require(c.report.checkpoints[i] >= 1, "report.checkpoints[" + std::to_string(i) + "]", "must be >= 1");
    }
    require(!c.output.dir.empty(), "output.dir", "must not be empty");
}

void check_paths(const ExperimentConfig& c) {
    if (c.data.source == "cifar10") {
        const auto dir = cifar_dir(c);
        require(exists(dir), "data.root", "CIFAR-10 directory '" + dir + "' does not exist (set FEDOS_DATA_ROOT)");
    }
    if (!c.variant.generator_pool.empty()) {
        const auto p = resolve_data_path(c.variant.generator_pool);
        require(exists(p), "variant.generator_pool", "'" + p + "' does not exist");
    }
    if (c.variant.name == "fedos" && c.variant.generator == "tiny_gan") {
        require(exists(c.variant.generator_checkpoint), "variant.generator_checkpoint",
                "'" + c.variant.generator_checkpoint + "' does not exist");
    }
    if (!c.run.reference_summary.empty()) {
        require(exists(c.run.reference_summary), "run.reference_summary",
                "'" + c.run.reference_summary + "' does not exist");
    }
}

void set_config_value(ExperimentConfig& cfg, const std::string& path, const std::string& value) {
    const auto dot = path.find('.');
    if (dot == std::string::npos) throw ConfigError(path, "expected section.key");
    const Field* f = find_field(path.substr(0, dot), path.substr(dot + 1));
    if (!f) throw ConfigError(path, "unknown key");
    YAML::Node node;
    try {
        node = YAML::Load(value);
    } catch (const YAML::Exception& e) {
        throw ConfigError(path, std::string("cannot parse value: ") + e.what());
    }
    f->read(cfg, node, path);
}

ExperimentConfig parse_config(const std::string& text) {
    YAML::Node root;
    try {
        root = YAML::Load(text);
    } catch (const YAML::Exception& e) {
        throw ConfigError("<file>", std::string("not valid YAML: ") + e.what());
    }
    ExperimentConfig cfg;
    if (root.IsNull()) {
        validate_config(cfg);
        return cfg;
    }
    if (!root.IsMap()) throw ConfigError("<file>", "top level must be a mapping of sections");
    for (const auto& sec : root) {
        const auto section = sec.first.as<std::string>();
        if (!known_section(section)) throw ConfigError(section, "unknown section");
        if (sec.second.IsNull()) continue;
        if (!sec.second.IsMap()) throw ConfigError(section, "expected a mapping of keys");
        for (const auto& kv : sec.second) {
            const auto key = kv.first.as<std::string>();
            const Field* f = find_field(section, key);
            if (!f) throw ConfigError(section + "." + key, "unknown key");
            f->read(cfg, kv.second, section + "." + key);
        }
    }
    validate_config(cfg);
    return cfg;
}

ExperimentConfig load_config(const std::string& path) {
    std::string text;
    try {
        text = read_file(path);
    } catch (const IoError& e) {
        throw ConfigError("<file>", e.what());
    }
    return parse_config(text);
}

std::string normalize_config(const ExperimentConfig& cfg) {
    std::string out;
    std::string current;
    for (const auto& f : schema()) {
        if (f.section != current) {
            current = f.section;
            out += current + ":\n";
        }
        out += "  " + f.key + ": " + f.write(cfg) + "\n";
    }
    return out;
}

std::string config_hash(const ExperimentConfig& cfg) {
    auto copy = cfg;
    copy.output.dir = "-";
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(normalize_config(copy))));
    return buf;
}

} // namespace fedos
