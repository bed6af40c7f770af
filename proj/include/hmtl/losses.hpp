#pragma once

// Loss functions for supervised and self-supervised heads.
//
// Two layers of API:
//   * probability-space functions mirroring the loss formulas one sample at a
//     time (weighted_ce, focal_loss, hmtl_*_loss, ...), each with an analytic
//     gradient w.r.t. its probability inputs;
//   * logit-space batch forms used by the trainer, returning the batch-mean
//     value and d(loss)/d(logits).
// All arithmetic is double precision.

#include <span>
#include <string>
#include <vector>

#include "hmtl/image.hpp"
#include "hmtl/tensor.hpp"

namespace hmtl::losses {

/// log(p) is evaluated as log(max(p, kLogFloor)).
constexpr double kLogFloor = 1e-12;

/// Per-class weights, normalized to mean 1.
class ClassWeights {
public:
    ClassWeights() = default;
    /// Normalizes `raw` to mean 1. Entries must be > 0.
    explicit ClassWeights(std::vector<double> raw);
    static ClassWeights unit(int num_classes);

    double operator[](int k) const { return w_.at(static_cast<std::size_t>(k)); }
    int size() const { return static_cast<int>(w_.size()); }
    const std::vector<double>& values() const { return w_; }

private:
    std::vector<double> w_;
};

/// Head multipliers. `ssh` holds one weight per puzzle head; the
/// probability-space hmtl losses use it as given (the dynamic per-region
/// weights of a PuzzleSample go here). Zero disables a term.
struct HeadLossWeights {
    double sl = 1.0;
    std::vector<double> ssh;
    double rotation = 1.0;
    double dec = 1.0;
};

/// n equal bins over [lo, hi]; bin k covers [lo + k*w, lo + (k+1)*w) and
/// the last bin also includes hi.
struct BinScheme {
    int n_bins = 20;
    double lo = -1.0;
    double hi = 1.0;

    double width() const { return (hi - lo) / n_bins; }
    double center(int k) const { return lo + (k + 0.5) * width(); }
    std::vector<double> centers() const;
    /// Throws std::out_of_range for values outside [lo, hi].
    int bin_of(double value) const;
    friend bool operator==(const BinScheme&, const BinScheme&) = default;
};

struct LossTerm {
    std::string name;
    double value = 0.0;
};

/// Per-head terms of one loss evaluation; total is the plain sum of terms.
struct LossReport {
    std::vector<LossTerm> terms;
    double total = 0.0;

    void add(std::string name, double value) {
        terms.push_back({std::move(name), value});
        total += value;
    }
    double term(const std::string& name) const;
};

/// Probabilities and target of one classification head.
struct HeadPrediction {
    std::vector<double> probs;
    int label = 0;
};

std::vector<double> softmax(std::span<const double> logits);
std::vector<double> softmax(std::span<const float> logits);

// -- probability space ------------------------------------------------------

/// -w_label * sum_k t_k log p_k with t the (optionally smoothed) one-hot target.
double weighted_ce(std::span<const double> probs, int label, const ClassWeights& weights,
                   double smoothing = 0.0);
std::vector<double> weighted_ce_grad(std::span<const double> probs, int label, const ClassWeights& weights,
                                     double smoothing = 0.0);

/// -alpha (1 - p_label)^gamma log p_label
double focal_loss(std::span<const double> probs, int label, double alpha, double gamma);
std::vector<double> focal_loss_grad(std::span<const double> probs, int label, double alpha, double gamma);

/// lambda_sl * weighted_ce(sl) + sum_j lambda_j * ce(ssh_j)
LossReport hmtl_puzzle_loss(const HeadPrediction& sl, const ClassWeights& sl_weights,
                            std::span<const HeadPrediction> puzzle, const HeadLossWeights& weights);

/// hmtl_puzzle_loss plus lambda_rot * ce(rotation).
LossReport hmtl_puzzle_rotation_loss(const HeadPrediction& sl, const ClassWeights& sl_weights,
                                     std::span<const HeadPrediction> puzzle, const HeadPrediction& rotation,
                                     const HeadLossWeights& weights);

/// lambda_sl * weighted_ce(sl) + dec_term. `dec_term` already carries lambda_dec.
LossReport hmtl_inpaint_loss(const HeadPrediction& sl, const ClassWeights& sl_weights, double dec_term,
                             const HeadLossWeights& weights);

/// lambda * RMSE(softmax(feat_rec), softmax(feat_orig)).
double perceptual_decoder_loss(std::span<const double> feat_rec, std::span<const double> feat_orig,
                               double lambda);
/// Gradient w.r.t. feat_rec.
std::vector<double> perceptual_decoder_loss_grad(std::span<const double> feat_rec,
                                                 std::span<const double> feat_orig, double lambda);

/// sqrt(mean squared difference) over all pixels and channels, or only over
/// pixels where `mask` (H x W x 1) is nonzero.
double pixelwise_rmse(const Image& rec, const Image& orig, const Image* mask = nullptr);

/// sum_k probs[k] * centers[k]
double expectation_from_bins(std::span<const double> probs, const BinScheme& scheme);

/// Single-sample categorical-regression loss: alpha * CE(probs, bin(y)) + |E - y|.
/// (A batch of one: the RMSE term reduces to the absolute error.)
LossReport cat_reg_loss(std::span<const double> probs, double y_reg, const BinScheme& scheme, double alpha);
/// Gradient of cat_reg_loss's total w.r.t. probs (sign(0) = 0 for the absolute error).
std::vector<double> cat_reg_loss_grad(std::span<const double> probs, double y_reg, const BinScheme& scheme,
                                      double alpha);

// -- logit space, batched ---------------------------------------------------

/// Value and gradient w.r.t. the logits of one batch (rows = samples).
struct BatchLoss {
    double value = 0.0;
    std::vector<double> dlogits;  ///< row-major, same shape as the logits
};

/// Mean over the batch of weights[label] * CE(softmax(z), smoothed target),
/// each row additionally scaled by row_scale[i] when given.
BatchLoss ce_logits(std::span<const float> logits, int num_classes, std::span<const int> labels,
                    const ClassWeights* weights = nullptr, double smoothing = 0.0,
                    std::span<const double> row_scale = {});

/// Mean over the batch of the focal loss on softmax(z), rows optionally scaled.
BatchLoss focal_logits(std::span<const float> logits, int num_classes, std::span<const int> labels, double alpha,
                       double gamma, std::span<const double> row_scale = {});

/// alpha * mean CE(bin(y)) + sqrt(mean (E - y)^2). Terms reported separately.
struct CatRegBatch {
    double categorical = 0.0;  ///< already multiplied by alpha
    double regression = 0.0;   ///< RMSE of the expectations
    double value = 0.0;
    std::vector<double> dlogits;
    std::vector<double> expectations;
};
CatRegBatch cat_reg_logits(std::span<const float> logits, std::span<const double> targets,
                           const BinScheme& scheme, double alpha);

/// Per-sample pixel RMSE averaged over the batch. Tensors are (N, C, H, W);
/// `mask` is (N, 1, H, W) and restricts each sample's mean to the masked pixels.
BatchLoss pixel_rmse_batch(const Tensor& rec, const Tensor& orig, const Tensor* mask = nullptr);

/// Per-sample perceptual loss averaged over the batch; features are (N, D).
/// Gradient is w.r.t. feat_rec.
BatchLoss perceptual_batch(const Tensor& feat_rec, const Tensor& feat_orig, double lambda);

/// sqrt(mean (pred - y)^2) and its gradient w.r.t. pred.
BatchLoss rmse(std::span<const float> pred, std::span<const double> targets);

}  // namespace hmtl::losses
