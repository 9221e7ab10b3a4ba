#pragma once

#include <string>
#include <vector>

#include "fedos/experiment.hpp"

namespace fedos {

/// One method/setting: per-seed statistics averaged over seeds.
struct ReportRow {
    std::string method;
    double alpha = 0.0;
    std::string setting;  // ablation value or run label
    int seeds = 0;
    double max_rel = 0.0;
    double mean_rel = 0.0;
    std::vector<double> at_checkpoint;  // best relative accuracy up to each checkpoint; NaN when not reached
    std::string error;                  // non-empty for a failed cell
};

/// Rows keyed (method, alpha, setting); columns "Relative accuracy @N rounds".
struct ReportTable {
    std::vector<int> checkpoints;
    std::vector<ReportRow> rows;
};

/// Statistics of one group of traces (one per seed).
ReportRow summarize_traces(const std::string& method, double alpha, const std::string& setting,
                           const std::vector<MetricTrace>& traces, const std::vector<int>& checkpoints);

/// Drops checkpoints beyond the longest trace.
std::vector<int> evaluated_checkpoints(const std::vector<int>& wanted, const std::vector<MetricTrace>& traces);

/// Header: method,alpha,setting,seeds,max_rel,mean_rel,rel@<N>...,error
std::string table_to_csv(const ReportTable& table);

struct ChartSeries {
    std::string label;
    std::vector<double> x;
    std::vector<double> y;
};

/// Line chart, one polyline per series.
std::string line_chart_svg(const std::vector<ChartSeries>& series, const std::string& title, const std::string& x_label,
                           const std::string& y_label);

/// Seed-averaged relative accuracy per round.
ChartSeries mean_curve(const std::string& label, const std::vector<MetricTrace>& traces);

/// One experiment family: its label and per-seed trace files.
struct ReportInput {
    std::string label;
    std::vector<std::string> trace_paths;
};

struct ReportOutput {
    ReportTable table;
    std::vector<std::string> missing;
};

/// Reads traces, writes <out>/report.csv, <out>/accuracy.svg and
/// <out>/report.json (missing traces listed there). Unreadable traces are
/// skipped, not fatal.
ReportOutput emit_report(const std::vector<ReportInput>& inputs, const std::vector<int>& checkpoints,
                         const std::string& out_dir);

/// Trace files of a run directory written by run_experiment.
ReportInput report_input_from_dir(const std::string& dir);

/// One run_experiment per value under <output.dir>/<axis>=<value>. Failed cells
/// keep their error and the matrix continues. Writes ablation.csv and
/// ablation.svg to output.dir.
ReportTable run_ablation_matrix(const ExperimentConfig& base, const std::string& axis, const std::vector<double>& values,
                                const ExperimentData* data = nullptr);

} // namespace fedos
