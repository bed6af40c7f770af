#pragma once

// CSV artifacts (metrics history, epsilon sweeps) and the static report:
// SVG line plots plus a summary table, rendered purely from CSV input.

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "hmtl/trainer.hpp"

namespace hmtl::report {

inline constexpr const char* kMetricsSchema = "# schema: hmtl-metrics v1";
inline constexpr const char* kMetricsHeader = "epoch,split,head,metric,value";
inline constexpr const char* kAttackSchema = "# schema: hmtl-attack v1";
inline constexpr const char* kAttackHeader = "epsilon,n,correct,accuracy";

/// Append rows; writes schema and header lines when the file is new.
void append_metrics(const std::filesystem::path& file, std::span<const train::MetricRow> rows);
/// Throws SchemaError on an unknown schema line, header or malformed row.
std::vector<train::MetricRow> read_metrics(const std::filesystem::path& file);

struct AttackRow {
    double epsilon = 0.0;
    std::int64_t n = 0;
    std::int64_t correct = 0;
    double accuracy = 0.0;
    friend bool operator==(const AttackRow&, const AttackRow&) = default;
};

void write_attack(const std::filesystem::path& file, std::span<const AttackRow> rows);
std::vector<AttackRow> read_attack(const std::filesystem::path& file);

/// Shortest round-trip text for a double.
std::string format_number(double v);

struct Series {
    std::string label;
    std::vector<double> x, y;
};

/// Minimal SVG line chart.
std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series);

struct ReportInput {
    std::string name;  ///< run label, e.g. the CSV file stem
    std::vector<train::MetricRow> metrics;
};

struct ReportFiles {
    std::vector<std::filesystem::path> written;
};

/// Render every metrics CSV under `inputs` (files or directories searched
/// recursively for metrics.csv / attack.csv) into `out_dir`: one SVG per
/// (split, metric) with a line per (run, head), one epsilon-accuracy SVG,
/// and summary.md / summary.csv. Output depends only on the CSV contents.
ReportFiles render(const std::vector<std::filesystem::path>& inputs, const std::filesystem::path& out_dir);

}  // namespace hmtl::report
