#pragma once

// Fast gradient sign attacks against the supervised head and epsilon sweeps.

#include <span>
#include <vector>

#include "hmtl/dataset.hpp"
#include "hmtl/model.hpp"
#include "hmtl/report.hpp"

namespace hmtl::adversarial {

struct AttackConfig {
    std::vector<double> epsilons{0.0, 0.001, 0.005, 0.01, 0.02, 0.05};
    float clamp_lo = 0.0f, clamp_hi = 1.0f;
    /// Throws std::invalid_argument unless epsilons are non-empty, >= 0 and ascending.
    void validate() const;
};

/// dJ/dX of the mean cross-entropy of the first supervised head (a
/// classifier) on an (N, 3, H, W) batch. Rows are independent, so each
/// row equals the single-sample gradient up to the 1/N factor.
Tensor input_gradient(const model::ModelAssembly& model, const Tensor& images, std::span<const int> labels);

/// clamp(X + eps * sign(grad)), with sign(0) = 0.
Tensor perturb(const Tensor& images, const Tensor& grad, double epsilon, float lo = 0.0f, float hi = 1.0f);

/// X_adv = clamp(X + eps * sign(dJ/dX)) against the stripped model.
Tensor fgsm(const model::ModelAssembly& model, const Tensor& images, std::span<const int> labels, double epsilon);
Image fgsm(const model::ModelAssembly& model, const Image& image, int label, double epsilon);

/// One row per epsilon. Chunking matches train::evaluate, so the
/// epsilon = 0 row reproduces the clean accuracy exactly.
std::vector<report::AttackRow> epsilon_sweep(const model::ModelAssembly& model, const data::LabeledDataset& dataset,
                                             const AttackConfig& config);

}  // namespace hmtl::adversarial
