#include "fedos/federated.hpp"

#include <iomanip>
#include <numeric>
#include <sstream>

namespace fedos {

std::string to_string(VariantKind kind) {
    switch (kind) {
        case VariantKind::FedAvg: return "fedavg";
        case VariantKind::FedProx: return "fedprox";
        case VariantKind::FedIR: return "fedir";
        case VariantKind::FedOS: return "fedos";
    }
    return "fedavg";
}

VariantKind variant_kind_from_string(const std::string& name) {
    if (name == "fedavg") return VariantKind::FedAvg;
    if (name == "fedprox") return VariantKind::FedProx;
    if (name == "fedir") return VariantKind::FedIR;
    if (name == "fedos") return VariantKind::FedOS;
    throw ValueError("unknown variant '" + name + "' (expected fedavg|fedprox|fedir|fedos)");
}

std::vector<ClientState> make_clients(const Partition& partition) {
    std::vector<ClientState> clients;
    for (int c = 0; c < partition.n_clients(); ++c) {
        ClientState s;
        s.id = c;
        s.indices = partition.assignments[static_cast<std::size_t>(c)];
        s.histogram = partition.histograms[static_cast<std::size_t>(c)];
        clients.push_back(std::move(s));
    }
    return clients;
}

std::vector<double> global_label_distribution(const Partition& partition) {
    std::vector<double> p(static_cast<std::size_t>(partition.num_classes), 0.0);
    double total = 0.0;
    for (const auto& h : partition.histograms) {
        for (std::size_t c = 0; c < h.size(); ++c) {
            p[c] += h[c];
            total += h[c];
        }
    }
    if (total > 0.0) {
        for (auto& v : p) v /= total;
    }
    return p;
}

std::vector<int> sample_clients(int n_clients, double fraction, std::uint64_t seed, int round) {
    if (n_clients <= 0) throw ValueError("sample_clients: no clients");
    if (!(fraction > 0.0 && fraction <= 1.0)) throw ValueError("client fraction must be in (0, 1]");
    const int m = std::clamp(static_cast<int>(std::llround(fraction * n_clients)), 1, n_clients);
    CounterRng rng{seed, 0x5e1ecULL, static_cast<std::uint64_t>(round)};
    auto perm = rng.permutation(n_clients);
    std::vector<int> chosen(perm.begin(), perm.begin() + m);
    std::sort(chosen.begin(), chosen.end());
    return chosen;
}

std::vector<double> fedir_weights(std::span<const int> client_histogram, std::span<const double> global_distribution,
                                  double smoothing) {
    if (client_histogram.size() != global_distribution.size()) {
        throw ShapeError("fedir_weights", "histogram and global distribution differ in length");
    }
    if (!(smoothing >= 0.0)) throw ValueError("FedIR smoothing must be non-negative");
    const auto k = client_histogram.size();
    double total = 0.0;
    for (int c : client_histogram) total += c + smoothing;
    std::vector<double> w(k);
    for (std::size_t y = 0; y < k; ++y) {
        const double q = (client_histogram[y] + smoothing) / total;
        // A class absent locally with no smoothing never contributes a sample.
        w[y] = q > 0.0 ? global_distribution[y] / q : 0.0;
    }
    return w;
}

std::vector<int> epoch_order(int count, std::uint64_t seed, int round, int client, int epoch) {
    CounterRng rng{seed, 0x0bd3ULL, static_cast<std::uint64_t>(round), static_cast<std::uint64_t>(client),
                   static_cast<std::uint64_t>(epoch)};
    return rng.permutation(count);
}

std::uint64_t unknown_cache_seed(std::uint64_t seed, int client, int round, int epoch) {
    return derive_seed({seed, 0xfed05ULL, static_cast<std::uint64_t>(client), static_cast<std::uint64_t>(round),
                        static_cast<std::uint64_t>(epoch)});
}

std::vector<double> client_class_weights(const VariantConfig& variant, const ClientState& client, int output_classes,
                                         int num_known_classes, std::span<const double> global_distribution) {
    switch (variant.kind) {
        case VariantKind::FedAvg:
        case VariantKind::FedProx: return std::vector<double>(static_cast<std::size_t>(output_classes), 1.0);
        case VariantKind::FedIR: {
            if (global_distribution.empty()) throw ValueError("FedIR needs the global label distribution");
            auto w = fedir_weights(client.histogram, global_distribution, variant.smoothing);
            w.resize(static_cast<std::size_t>(output_classes), 1.0);
            return w;
        }
        case VariantKind::FedOS: {
            auto w = fedos_loss_weights(num_known_classes, variant.unknown.weight);
            if (static_cast<int>(w.size()) != output_classes) {
                throw ShapeError("fedos", "model has " + std::to_string(output_classes) + " outputs, expected K+1 = " +
                                              std::to_string(w.size()));
            }
            return w;
        }
    }
    return {};
}

void attach_unknown_caches(std::vector<ClientState>& clients, const UnknownConfig& unknown, const ModelSpec& spec,
                           std::uint64_t seed, const Preprocessor* pre) {
    if (!(unknown.weight >= 0.0) || !(unknown.fraction >= 0.0)) {
        throw ValueError("W_U and F_U must be non-negative");
    }
    for (auto& c : clients) {
        const Index n = unknown_sample_count(unknown.fraction, c.local_count());
        if (n > 0 && !unknown.generator) throw ValueError("FedOS with F_U > 0 needs a generator");
        if (n == 0) {
            c.unknown_images.resize(0, spec.input.size());
            continue;
        }
        check_generator_size(*unknown.generator, spec);
        c.unknown_images = generate_unknown_images(*unknown.generator, n, unknown_cache_seed(seed, c.id), spec.input, pre);
    }
}

double relative_accuracy(double accuracy, double reference) {
    if (!(reference > 0.0)) throw ValueError("reference accuracy must be positive");
    return 100.0 * accuracy / reference;
}

double MetricTrace::max_rel() const {
    double m = 0.0;
    for (const auto& r : records) m = std::max(m, r.rel_val_acc);
    return m;
}

double MetricTrace::mean_rel() const {
    if (records.empty()) return 0.0;
    double s = 0.0;
    for (const auto& r : records) s += r.rel_val_acc;
    return s / static_cast<double>(records.size());
}

double MetricTrace::max_val() const {
    double m = 0.0;
    for (const auto& r : records) m = std::max(m, r.val_acc);
    return m;
}

double MetricTrace::mean_val() const {
    if (records.empty()) return 0.0;
    double s = 0.0;
    for (const auto& r : records) s += r.val_acc;
    return s / static_cast<double>(records.size());
}

double MetricTrace::final_val() const { return records.empty() ? 0.0 : records.back().val_acc; }

double MetricTrace::best_rel_until(int round) const {
    double m = 0.0;
    for (const auto& r : records) {
        if (r.round <= round) m = std::max(m, r.rel_val_acc);
    }
    return m;
}

namespace {

std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(s);
    while (std::getline(is, cur, sep)) out.push_back(cur);
    if (!s.empty() && s.back() == sep) out.emplace_back();
    return out;
}

} // namespace

std::string trace_to_csv(const MetricTrace& trace, const std::string& config_hash) {
    std::ostringstream os;
    os << "# config_hash=" << config_hash << "\n";
    os << "# seed=" << trace.seed << "\n";
    os << "# reference_accuracy=" << fmt(trace.reference_accuracy) << "\n";
    os << "round,variant,alpha,seed,train_loss,val_acc,rel_val_acc,selected_clients\n";
    for (const auto& r : trace.records) {
        os << r.round << ',' << trace.variant << ',' << fmt(trace.alpha) << ',' << trace.seed << ','
           << fmt(r.train_loss) << ',' << fmt(r.val_acc) << ',' << fmt(r.rel_val_acc) << ',';
        for (std::size_t i = 0; i < r.selected.size(); ++i) os << (i ? ";" : "") << r.selected[i];
        os << '\n';
    }
    return os.str();
}

MetricTrace trace_from_csv(const std::string& text) {
    MetricTrace t;
    std::istringstream is(text);
    std::string line;
    bool header_seen = false;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            const auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            const auto key = line.substr(2, eq - 2);
            const auto value = line.substr(eq + 1);
            if (key == "seed") t.seed = std::stoull(value);
            if (key == "reference_accuracy") t.reference_accuracy = std::stod(value);
            continue;
        }
        if (!header_seen) {
            if (line.rfind("round,", 0) != 0) throw IoError("trace CSV: missing header");
            header_seen = true;
            continue;
        }
        const auto cols = split(line, ',');
        if (cols.size() != 8) throw IoError("trace CSV: expected 8 columns, got " + std::to_string(cols.size()));
        RoundRecord r;
        r.round = std::stoi(cols[0]);
        t.variant = cols[1];
        t.alpha = std::stod(cols[2]);
        r.train_loss = std::stod(cols[4]);
        r.val_acc = std::stod(cols[5]);
        r.rel_val_acc = std::stod(cols[6]);
        for (const auto& id : split(cols[7], ';')) {
            if (!id.empty()) r.selected.push_back(std::stoi(id));
        }
        t.records.push_back(std::move(r));
    }
    if (!header_seen) throw IoError("trace CSV: missing header");
    return t;
}

} // namespace fedos
