#include "hmtl/metrics.hpp"

#include <cmath>
#include <stdexcept>

namespace hmtl::metrics {

std::int64_t Confusion::total() const {
    std::int64_t s = 0;
    for (auto v : counts) s += v;
    return s;
}

std::int64_t Confusion::row_sum(int truth) const {
    std::int64_t s = 0;
    for (int p = 0; p < num_classes; ++p) s += at(truth, p);
    return s;
}

std::int64_t Confusion::col_sum(int pred) const {
    std::int64_t s = 0;
    for (int t = 0; t < num_classes; ++t) s += at(t, pred);
    return s;
}

Confusion confusion(std::span<const int> truth, std::span<const int> pred, int num_classes) {
    if (truth.size() != pred.size()) throw std::invalid_argument("confusion: length mismatch");
    Confusion c(num_classes);
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] < 0 || truth[i] >= num_classes || pred[i] < 0 || pred[i] >= num_classes)
            throw std::out_of_range("confusion: class index out of range");
        ++c.at(truth[i], pred[i]);
    }
    return c;
}

double accuracy(const Confusion& c) {
    const auto n = c.total();
    if (n == 0) throw std::invalid_argument("accuracy: empty confusion matrix");
    std::int64_t hit = 0;
    for (int k = 0; k < c.num_classes; ++k) hit += c.at(k, k);
    return static_cast<double>(hit) / static_cast<double>(n);
}

std::vector<double> per_class_f1(const Confusion& c) {
    std::vector<double> f1(c.num_classes, 0.0);
    for (int k = 0; k < c.num_classes; ++k) {
        const double tp = static_cast<double>(c.at(k, k));
        const double denom = static_cast<double>(c.row_sum(k) + c.col_sum(k));
        f1[k] = denom > 0.0 ? 2.0 * tp / denom : 0.0;
    }
    return f1;
}

double macro_f1(const Confusion& c) {
    if (c.num_classes == 0 || c.total() == 0) throw std::invalid_argument("macro_f1: all-zero confusion matrix");
    double s = 0.0;
    for (double f : per_class_f1(c)) s += f;
    return s / c.num_classes;
}

std::vector<double> per_class_recall(const Confusion& c) {
    std::vector<double> r(c.num_classes, 0.0);
    for (int k = 0; k < c.num_classes; ++k) {
        const auto support = c.row_sum(k);
        r[k] = support > 0 ? static_cast<double>(c.at(k, k)) / static_cast<double>(support) : 0.0;
    }
    return r;
}

double rmse(std::span<const double> pred, std::span<const double> truth) {
    if (pred.size() != truth.size()) throw std::invalid_argument("rmse: length mismatch");
    if (pred.empty()) throw std::invalid_argument("rmse: empty input");
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - truth[i]) * (pred[i] - truth[i]);
    return std::sqrt(s / static_cast<double>(pred.size()));
}

EulerMae euler_mae(std::span<const std::array<double, 3>> pred, std::span<const std::array<double, 3>> truth) {
    if (pred.size() != truth.size()) throw std::invalid_argument("euler_mae: length mismatch");
    if (pred.empty()) throw std::invalid_argument("euler_mae: empty input");
    std::array<double, 3> sum{0, 0, 0};
    for (std::size_t i = 0; i < pred.size(); ++i)
        for (int a = 0; a < 3; ++a) sum[a] += std::abs(pred[i][a] - truth[i][a]);
    const double n = static_cast<double>(pred.size());
    EulerMae m{sum[0] / n, sum[1] / n, sum[2] / n, 0.0};
    m.average = (m.yaw + m.pitch + m.roll) / 3.0;
    return m;
}

}  // namespace hmtl::metrics
