#include "hmtl/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "hmtl/error.hpp"

namespace fs = std::filesystem;

namespace hmtl::report {

std::string format_number(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, end);
}

namespace {

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream is(line);
    while (std::getline(is, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

double parse_double(const std::string& s, const std::string& where) {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) throw SchemaError(where + ": bad number '" + s + "'");
    return v;
}

std::int64_t parse_int(const std::string& s, const std::string& where) {
    std::int64_t v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) throw SchemaError(where + ": bad integer '" + s + "'");
    return v;
}

void check_field(const std::string& s, const std::string& what) {
    if (s.find_first_of(",\n\r") != std::string::npos) throw std::invalid_argument(what + " must not contain ',' or newlines");
}

/// Opens `file`, checks the schema and header lines, returns the stream.
std::ifstream open_csv(const fs::path& file, const char* schema, const char* header) {
    std::ifstream in(file);
    if (!in) throw SchemaError("cannot open " + file.string());
    std::string line;
    if (!std::getline(in, line) || line != schema)
        throw SchemaError(file.string() + ": expected schema line '" + schema + "'");
    if (!std::getline(in, line) || line != header)
        throw SchemaError(file.string() + ": expected header '" + header + "'");
    return in;
}

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

std::string fixed(double v, int digits) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(digits);
    os << v;
    return os.str();
}

}  // namespace

void append_metrics(const fs::path& file, std::span<const train::MetricRow> rows) {
    const bool fresh = !fs::exists(file) || fs::file_size(file) == 0;
    if (file.has_parent_path()) fs::create_directories(file.parent_path());
    std::ofstream out(file, std::ios::app);
    if (!out) throw std::runtime_error("cannot append to " + file.string());
    if (fresh) out << kMetricsSchema << '\n' << kMetricsHeader << '\n';
    for (const auto& r : rows) {
        check_field(r.split, "split");
        check_field(r.head, "head");
        check_field(r.metric, "metric");
        out << r.epoch << ',' << r.split << ',' << r.head << ',' << r.metric << ',' << format_number(r.value) << '\n';
    }
}

std::vector<train::MetricRow> read_metrics(const fs::path& file) {
    auto in = open_csv(file, kMetricsSchema, kMetricsHeader);
    std::vector<train::MetricRow> rows;
    std::string line;
    int line_no = 2;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const std::string where = file.filename().string() + ":" + std::to_string(line_no);
        const auto cells = split_line(line);
        if (cells.size() != 5) throw SchemaError(where + ": expected 5 columns");
        rows.push_back({static_cast<int>(parse_int(cells[0], where)), cells[1], cells[2], cells[3],
                        parse_double(cells[4], where)});
    }
    return rows;
}

void write_attack(const fs::path& file, std::span<const AttackRow> rows) {
    if (file.has_parent_path()) fs::create_directories(file.parent_path());
    std::ofstream out(file);
    if (!out) throw std::runtime_error("cannot write " + file.string());
    out << kAttackSchema << '\n' << kAttackHeader << '\n';
    for (const auto& r : rows)
        out << format_number(r.epsilon) << ',' << r.n << ',' << r.correct << ',' << format_number(r.accuracy) << '\n';
}

std::vector<AttackRow> read_attack(const fs::path& file) {
    auto in = open_csv(file, kAttackSchema, kAttackHeader);
    std::vector<AttackRow> rows;
    std::string line;
    int line_no = 2;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const std::string where = file.filename().string() + ":" + std::to_string(line_no);
        const auto cells = split_line(line);
        if (cells.size() != 4) throw SchemaError(where + ": expected 4 columns");
        rows.push_back({parse_double(cells[0], where), parse_int(cells[1], where), parse_int(cells[2], where),
                        parse_double(cells[3], where)});
    }
    return rows;
}

std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series) {
    constexpr double W = 640, H = 400, L = 70, R = 170, T = 40, B = 50;
    double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
    for (const auto& s : series)
        for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
            if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
            x0 = std::min(x0, s.x[i]);
            x1 = std::max(x1, s.x[i]);
            y0 = std::min(y0, s.y[i]);
            y1 = std::max(y1, s.y[i]);
        }
    if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    if (x1 == x0) x1 = x0 + 1;
    if (y1 == y0) y1 = y0 + 1;
    const double pad = 0.05 * (y1 - y0);
    y0 -= pad;
    y1 += pad;
    auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
    auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                   "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
       << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << xml_escape(title) << "</text>\n";
    os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double yv = y0 + (y1 - y0) * i / 4.0, xv = x0 + (x1 - x0) * i / 4.0;
        os << "<line x1=\"" << L - 4 << "\" y1=\"" << fixed(py(yv), 1) << "\" x2=\"" << W - R << "\" y2=\""
           << fixed(py(yv), 1) << "\" stroke=\"#ddd\"/>\n";
        os << "<text x=\"" << L - 6 << "\" y=\"" << fixed(py(yv) + 4, 1) << "\" text-anchor=\"end\">" << fixed(yv, 3)
           << "</text>\n";
        os << "<text x=\"" << fixed(px(xv), 1) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">"
           << fixed(xv, xv == std::round(xv) ? 0 : 3) << "</text>\n";
    }
    os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << xml_escape(x_label)
       << "</text>\n";
    os << "<text transform=\"translate(16," << (T + H - B) / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
       << xml_escape(y_label) << "</text>\n";
    for (std::size_t k = 0; k < series.size(); ++k) {
        const auto& s = series[k];
        const char* color = colors[k % 10];
        os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i)
            if (std::isfinite(s.y[i])) os << fixed(px(s.x[i]), 2) << ',' << fixed(py(s.y[i]), 2) << ' ';
        os << "\"/>\n";
        const double ly = T + 14 + 16.0 * static_cast<double>(k);
        os << "<line x1=\"" << W - R + 10 << "\" y1=\"" << ly - 4 << "\" x2=\"" << W - R + 30 << "\" y2=\"" << ly - 4
           << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        os << "<text x=\"" << W - R + 34 << "\" y=\"" << ly << "\">" << xml_escape(s.label) << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

namespace {

std::string run_name(const fs::path& file, const fs::path& root) {
    fs::path rel = file.parent_path().lexically_relative(root);
    std::string name = rel.empty() || rel == "." ? file.parent_path().filename().string() : rel.generic_string();
    if (name.empty()) name = file.stem().string();
    return name;
}

std::string sanitize(std::string s) {
    for (char& c : s)
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_') c = '_';
    return s;
}

void write_text(const fs::path& file, const std::string& text, ReportFiles& files) {
    std::ofstream(file) << text;
    files.written.push_back(file);
}

}  // namespace

ReportFiles render(const std::vector<fs::path>& inputs, const fs::path& out_dir) {
    // Collect files in a deterministic order.
    std::vector<std::pair<std::string, fs::path>> metric_files, attack_files;
    for (const auto& in : inputs) {
        if (!fs::exists(in)) throw SchemaError("report input " + in.string() + " does not exist");
        auto consider = [&](const fs::path& f, const fs::path& root) {
            const auto name = f.filename().string();
            if (name == "metrics.csv" || (name.ends_with(".csv") && name.find("metrics") != std::string::npos))
                metric_files.emplace_back(run_name(f, root), f);
            else if (name == "attack.csv" || (name.ends_with(".csv") && name.find("attack") != std::string::npos))
                attack_files.emplace_back(run_name(f, root), f);
        };
        if (fs::is_directory(in)) {
            for (const auto& e : fs::recursive_directory_iterator(in))
                if (e.is_regular_file()) consider(e.path(), in.parent_path());
        } else {
            consider(in, in.parent_path().parent_path());
        }
    }
    std::sort(metric_files.begin(), metric_files.end());
    std::sort(attack_files.begin(), attack_files.end());
    if (metric_files.empty() && attack_files.empty()) throw SchemaError("report: no metrics.csv or attack.csv found");

    fs::create_directories(out_dir);
    ReportFiles files;

    // (split, metric) -> list of series; summary rows per run.
    std::map<std::pair<std::string, std::string>, std::vector<Series>> charts;
    std::ostringstream md, csv;
    md << "# Run summary\n\n| run | split | head | metric | last | best | epochs |\n|---|---|---|---|---|---|---|\n";
    csv << "run,split,head,metric,last,best,epochs\n";
    for (const auto& [name, file] : metric_files) {
        const auto rows = read_metrics(file);
        std::map<std::tuple<std::string, std::string, std::string>, Series> by_key;
        for (const auto& r : rows) {
            auto& s = by_key[{r.split, r.head, r.metric}];
            s.x.push_back(r.epoch);
            s.y.push_back(r.value);
        }
        for (auto& [k, s] : by_key) {
            const auto& [split, head, metric] = k;
            s.label = name + " " + head;
            const bool lower_better = metric == "loss" || metric == "rmse" || metric == "mae" ||
                                      metric == "regression" || metric == "categorical";
            const double best = lower_better ? *std::min_element(s.y.begin(), s.y.end())
                                             : *std::max_element(s.y.begin(), s.y.end());
            md << "| " << name << " | " << split << " | " << head << " | " << metric << " | " << fixed(s.y.back(), 4)
               << " | " << fixed(best, 4) << " | " << s.x.size() << " |\n";
            csv << name << ',' << split << ',' << head << ',' << metric << ',' << format_number(s.y.back()) << ','
                << format_number(best) << ',' << s.x.size() << '\n';
            if (metric == "steps" || metric == "lambda") continue;
            charts[{split, metric}].push_back(s);
        }
    }
    for (const auto& [k, series] : charts) {
        const auto& [split, metric] = k;
        const std::string title = split + " " + metric;
        write_text(out_dir / (sanitize(split + "_" + metric) + ".svg"), line_chart_svg(title, "epoch", metric, series),
                   files);
    }
    if (!attack_files.empty()) {
        std::vector<Series> series;
        md << "\n## Epsilon sweep\n\n| run | epsilon | n | correct | accuracy |\n|---|---|---|---|---|\n";
        csv << "\nrun,epsilon,n,correct,accuracy\n";
        for (const auto& [name, file] : attack_files) {
            Series s;
            s.label = name;
            for (const auto& r : read_attack(file)) {
                s.x.push_back(r.epsilon);
                s.y.push_back(r.accuracy);
                md << "| " << name << " | " << format_number(r.epsilon) << " | " << r.n << " | " << r.correct << " | "
                   << fixed(r.accuracy, 4) << " |\n";
                csv << name << ',' << format_number(r.epsilon) << ',' << r.n << ',' << r.correct << ','
                    << format_number(r.accuracy) << '\n';
            }
            series.push_back(std::move(s));
        }
        write_text(out_dir / "epsilon_accuracy.svg", line_chart_svg("accuracy under FGSM", "epsilon", "accuracy", series),
                   files);
    }
    write_text(out_dir / "summary.md", md.str(), files);
    write_text(out_dir / "summary.csv", csv.str(), files);
    return files;
}

}  // namespace hmtl::report
