#include "fedos/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "fedos/error.hpp"

namespace fedos {

namespace fs = std::filesystem;

namespace {

std::string num(double v) {
    if (std::isnan(v)) return "";
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return {buf, end};
}

std::string fixed(double v, int digits = 2) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(digits);
    os << v;
    return os.str();
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
    return out + "\"";
}

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '&': out += "&amp;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

std::string value_label(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return {buf, end};
}

} // namespace

std::vector<int> evaluated_checkpoints(const std::vector<int>& wanted, const std::vector<MetricTrace>& traces) {
    int longest = 0;
    for (const auto& t : traces) {
        if (!t.records.empty()) longest = std::max(longest, t.records.back().round);
    }
    std::vector<int> out;
    for (int c : wanted) {
        if (c <= longest) out.push_back(c);
    }
    return out;
}

ReportRow summarize_traces(const std::string& method, double alpha, const std::string& setting,
                           const std::vector<MetricTrace>& traces, const std::vector<int>& checkpoints) {
    ReportRow row;
    row.method = method;
    row.alpha = alpha;
    row.setting = setting;
    row.seeds = static_cast<int>(traces.size());
    row.at_checkpoint.assign(checkpoints.size(), std::numeric_limits<double>::quiet_NaN());
    if (traces.empty()) return row;
    for (const auto& t : traces) {
        row.max_rel += t.max_rel();
        row.mean_rel += t.mean_rel();
    }
    row.max_rel /= static_cast<double>(traces.size());
    row.mean_rel /= static_cast<double>(traces.size());
    for (std::size_t i = 0; i < checkpoints.size(); ++i) {
        double sum = 0.0;
        bool all = true;
        for (const auto& t : traces) {
            if (t.records.empty() || t.records.back().round < checkpoints[i]) {
                all = false;
                break;
            }
            sum += t.best_rel_until(checkpoints[i]);
        }
        if (all) row.at_checkpoint[i] = sum / static_cast<double>(traces.size());
    }
    return row;
}

std::string table_to_csv(const ReportTable& table) {
    std::ostringstream os;
    os << "method,alpha,setting,seeds,max_rel,mean_rel";
    for (int c : table.checkpoints) os << ",rel@" << c;
    os << ",error\n";
    for (const auto& r : table.rows) {
        os << csv_field(r.method) << ',' << num(r.alpha) << ',' << csv_field(r.setting) << ',' << r.seeds << ','
           << (r.error.empty() ? num(r.max_rel) : "") << ',' << (r.error.empty() ? num(r.mean_rel) : "");
        for (std::size_t i = 0; i < table.checkpoints.size(); ++i) {
            os << ',' << (i < r.at_checkpoint.size() ? num(r.at_checkpoint[i]) : "");
        }
        os << ',' << csv_field(r.error) << '\n';
    }
    return os.str();
}

ChartSeries mean_curve(const std::string& label, const std::vector<MetricTrace>& traces) {
    ChartSeries s;
    s.label = label;
    std::map<int, std::pair<double, int>> by_round;
    for (const auto& t : traces) {
        for (const auto& r : t.records) {
            auto& [sum, n] = by_round[r.round];
            sum += r.rel_val_acc;
            ++n;
        }
    }
    for (const auto& [round, acc] : by_round) {
        s.x.push_back(round);
        s.y.push_back(acc.first / acc.second);
    }
    return s;
}

std::string line_chart_svg(const std::vector<ChartSeries>& series, const std::string& title, const std::string& x_label,
                           const std::string& y_label) {
    constexpr double W = 640, H = 400, L = 60, R = 150, T = 40, B = 50;
    double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    bool first = true;
    for (const auto& s : series) {
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (first) {
                x0 = x1 = s.x[i];
                y0 = y1 = s.y[i];
                first = false;
            }
            x0 = std::min(x0, s.x[i]);
            x1 = std::max(x1, s.x[i]);
            y0 = std::min(y0, s.y[i]);
            y1 = std::max(y1, s.y[i]);
        }
    }
    y0 = std::min(y0, 0.0);
    if (x1 <= x0) x1 = x0 + 1;
    if (y1 <= y0) y1 = y0 + 1;
    const auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
    const auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
       << ' ' << H << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" << xml_escape(title)
       << "</text>\n";
    os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
       << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    for (int k = 0; k <= 4; ++k) {
        const double xv = x0 + (x1 - x0) * k / 4.0, yv = y0 + (y1 - y0) * k / 4.0;
        os << "<text x=\"" << fixed(px(xv), 1) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\" font-size=\"11\">"
           << fixed(xv, 0) << "</text>\n";
        os << "<text x=\"" << L - 6 << "\" y=\"" << fixed(py(yv) + 4, 1) << "\" text-anchor=\"end\" font-size=\"11\">"
           << fixed(yv, 1) << "</text>\n";
    }
    os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-size=\"12\">"
       << xml_escape(x_label) << "</text>\n";
    os << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 "
       << (T + H - B) / 2 << ")\">" << xml_escape(y_label) << "</text>\n";
    for (std::size_t k = 0; k < series.size(); ++k) {
        const auto& s = series[k];
        const char* color = colors[k % 8];
        os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            os << (i ? " " : "") << fixed(px(s.x[i])) << ',' << fixed(py(s.y[i]));
        }
        os << "\"/>\n";
        const double ly = T + 16.0 * static_cast<double>(k);
        os << "<text x=\"" << W - R + 10 << "\" y=\"" << ly + 4 << "\" font-size=\"11\" fill=\"" << color << "\">"
           << xml_escape(s.label) << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

ReportInput report_input_from_dir(const std::string& dir) {
    ReportInput in;
    in.label = fs::path(dir).filename().string();
    if (in.label.empty()) in.label = fs::path(dir).parent_path().filename().string();
    std::vector<std::string> paths;
    std::error_code ec;
    for (const auto& e : fs::directory_iterator(dir, ec)) {
        if (e.is_directory() && e.path().filename().string().rfind("seed_", 0) == 0) {
            paths.push_back((e.path() / "trace.csv").string());
        }
    }
    if (ec || paths.empty()) paths.push_back((fs::path(dir) / "trace.csv").string());
    std::sort(paths.begin(), paths.end());
    in.trace_paths = std::move(paths);
    return in;
}

ReportOutput emit_report(const std::vector<ReportInput>& inputs, const std::vector<int>& checkpoints,
                         const std::string& out_dir) {
    ReportOutput out;
    std::vector<std::pair<std::string, std::vector<MetricTrace>>> groups;
    std::vector<MetricTrace> all;
    for (const auto& in : inputs) {
        std::vector<MetricTrace> traces;
        for (const auto& p : in.trace_paths) {
            try {
                traces.push_back(trace_from_csv(read_file(p)));
            } catch (const Error&) {
                out.missing.push_back(p);
            } catch (const std::exception&) {
                out.missing.push_back(p);
            }
        }
        all.insert(all.end(), traces.begin(), traces.end());
        groups.emplace_back(in.label, std::move(traces));
    }
    out.table.checkpoints = evaluated_checkpoints(checkpoints, all);
    std::vector<ChartSeries> series;
    for (const auto& [label, traces] : groups) {
        if (traces.empty()) continue;
        const auto& t0 = traces.front();
        out.table.rows.push_back(summarize_traces(t0.variant, t0.alpha, label, traces, out.table.checkpoints));
        series.push_back(mean_curve(label, traces));
    }

    const fs::path dir(out_dir);
    fs::create_directories(dir);
    write_file((dir / "report.csv").string(), table_to_csv(out.table));
    write_file((dir / "accuracy.svg").string(),
               line_chart_svg(series, "Relative validation accuracy", "round", "relative accuracy (%)"));
    nlohmann::ordered_json j;
    j["rows"] = static_cast<int>(out.table.rows.size());
    j["checkpoints"] = out.table.checkpoints;
    j["missing"] = out.missing;
    write_file((dir / "report.json").string(), j.dump(2) + "\n");
    return out;
}

ReportTable run_ablation_matrix(const ExperimentConfig& base, const std::string& axis, const std::vector<double>& values,
                                const ExperimentData* data) {
    if (values.empty()) throw ConfigError("ablation.values", "needs at least one value");
    std::optional<ExperimentData> own;
    // alpha, E, C, W_U and F_U leave the data untouched, so one load serves every cell
    if (!data) {
        own = load_experiment_data(base);
        data = &*own;
    }
    struct Cell {
        std::string label;
        std::vector<MetricTrace> traces;
        std::string error;
        double alpha;
    };
    std::vector<Cell> cells;
    std::vector<MetricTrace> all;
    const fs::path root(base.output.dir);
    for (double v : values) {
        Cell cell{axis + "=" + value_label(v), {}, {}, axis == "alpha" ? v : base.partition.alpha};
        try {
            auto cfg = with_axis(base, axis, v);
            cfg.output.dir = (root / cell.label).string();
            for (auto& s : run_experiment(cfg, data).seeds) cell.traces.push_back(std::move(s.trace));
            all.insert(all.end(), cell.traces.begin(), cell.traces.end());
        } catch (const std::exception& e) {
            cell.error = e.what();
        }
        cells.push_back(std::move(cell));
    }
    ReportTable table;
    table.checkpoints = evaluated_checkpoints(base.report.checkpoints, all);
    std::vector<ChartSeries> series;
    for (const auto& c : cells) {
        auto row = summarize_traces(base.variant.name, c.alpha, c.label, c.traces, table.checkpoints);
        row.error = c.error;
        table.rows.push_back(std::move(row));
        if (!c.traces.empty()) series.push_back(mean_curve(c.label, c.traces));
    }
    fs::create_directories(root);
    write_file((root / "ablation.csv").string(), table_to_csv(table));
    write_file((root / "ablation.svg").string(),
               line_chart_svg(series, "Ablation over " + axis, "round", "relative accuracy (%)"));
    return table;
}

} // namespace fedos
