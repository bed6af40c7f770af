#pragma once

// Evaluation metrics: confusion matrix, accuracy, macro F1, RMSE, angle MAE.

#include <array>
#include <cstdint>
#include <span>
#include <vector>

namespace hmtl::metrics {

/// counts[t * K + p] = number of samples with true class t predicted as p.
struct Confusion {
    int num_classes = 0;
    std::vector<std::int64_t> counts;

    explicit Confusion(int k = 0) : num_classes(k), counts(static_cast<std::size_t>(k) * k, 0) {}
    std::int64_t& at(int truth, int pred) { return counts[static_cast<std::size_t>(truth) * num_classes + pred]; }
    std::int64_t at(int truth, int pred) const { return counts[static_cast<std::size_t>(truth) * num_classes + pred]; }
    std::int64_t total() const;
    std::int64_t row_sum(int truth) const;
    std::int64_t col_sum(int pred) const;
};

Confusion confusion(std::span<const int> truth, std::span<const int> pred, int num_classes);
double accuracy(const Confusion& c);
/// Per-class F1; a class with no support and no predictions scores 0.
std::vector<double> per_class_f1(const Confusion& c);
/// Unweighted mean of per-class F1. Throws std::invalid_argument on an all-zero matrix.
double macro_f1(const Confusion& c);
std::vector<double> per_class_recall(const Confusion& c);

double rmse(std::span<const double> pred, std::span<const double> truth);

struct EulerMae {
    double yaw = 0.0, pitch = 0.0, roll = 0.0, average = 0.0;
};
EulerMae euler_mae(std::span<const std::array<double, 3>> pred, std::span<const std::array<double, 3>> truth);

}  // namespace hmtl::metrics
