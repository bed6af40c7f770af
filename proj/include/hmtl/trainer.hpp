#pragma once

// Training protocols: supervised baselines, self-supervised pre-training,
// frozen-feature evaluation, fine-tuning, HMTL co-training, the two-stage
// perceptual in-painting variant and the pretext-without-SSH ablation.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "hmtl/config.hpp"
#include "hmtl/dataset.hpp"
#include "hmtl/metrics.hpp"
#include "hmtl/model.hpp"

namespace hmtl::train {

/// One line of the metrics CSV.
struct MetricRow {
    int epoch = 0;
    std::string split;   ///< train | val
    std::string head;    ///< label, valence, yaw, puzzle, rotation, decoder, all, ...
    std::string metric;  ///< loss, accuracy, macro_f1, rmse, mae, lr, steps
    double value = 0.0;
    friend bool operator==(const MetricRow&, const MetricRow&) = default;
};

/// "head/metric" -> value
using MetricMap = std::map<std::string, double>;

/// Supervised evaluation of a model on clean (untransformed) images.
struct Evaluation {
    MetricMap metrics;
    std::optional<metrics::Confusion> confusion;
    std::vector<int> predictions;                   ///< categorical tasks
    std::vector<std::vector<double>> regressions;   ///< per head, per sample
    /// Scalar used for model selection: accuracy, or minus the mean error.
    double score = 0.0;
};

struct SeedResult {
    std::uint64_t seed = 0;
    std::vector<MetricRow> history;
    int epochs_run = 0;
    int best_epoch = 0;   ///< 1-based; 0 = initial model
    double best_score = 0.0;
    MetricMap final_val;  ///< validation metrics of the selected (best) model
    MetricMap final_train;
    int steps_per_epoch = 0;
    /// First step count at which the SH val accuracy reached each threshold.
    std::map<double, std::optional<std::int64_t>> steps_to;
    /// Same for the mean SSH training accuracy.
    std::map<double, std::optional<std::int64_t>> ssh_steps_to;
    std::filesystem::path checkpoint;
    model::ModelAssembly model;

    /// Values of one (split, head, metric) series in epoch order.
    std::vector<double> series(const std::string& split, const std::string& head, const std::string& metric) const;
};

struct RunResult {
    config::Protocol protocol = config::Protocol::Sl;
    std::vector<SeedResult> seeds;
    std::size_t best = 0;  ///< index of the seed with the highest best_score
    const SeedResult& best_seed() const { return seeds.at(best); }
    double mean_final(const std::string& key) const;
};

/// Training and validation data after loading, resizing and subsetting.
struct DataSplit {
    data::LabeledDataset train;
    data::LabeledDataset val;
};

/// Load or synthesize the datasets described by `config.data`, resize to
/// image_size and apply `fraction` (stratified for categorical tasks).
DataSplit prepare_data(const config::RunConfig& config);

/// Stratified per-class subset: each class keeps round(fraction * n_c)
/// items; a class rounded down to none is rejected. Regression datasets
/// are sampled uniformly.
data::LabeledDataset subsample(const data::LabeledDataset& dataset, double fraction, std::uint64_t seed);

/// Supervised heads for a task: one classifier, two (valence, arousal) or
/// three (yaw, pitch, roll) cat-reg or regression heads.
std::vector<model::HeadSpec> supervised_heads(const config::RunConfig& config, const data::LabeledDataset& dataset);

/// Evaluate the SH of `model` (stripped of its SSHs) on clean images in
/// fixed chunks. Never applies a pretext transform.
Evaluation evaluate(const model::ModelAssembly& model, const data::LabeledDataset& dataset);

/// Mean SSH accuracy (puzzle positions, rotation) or decoder RMSE on
/// pretext-transformed images drawn with a fixed seed.
MetricMap evaluate_ssh(const model::ModelAssembly& model, const data::LabeledDataset& dataset,
                       const config::RunConfig& config, std::uint64_t seed);

/// Frozen feature extractor for the perceptual decoder loss. Features of
/// images seen before are served from a content-addressed cache.
class TeacherFeatures {
public:
    TeacherFeatures(std::shared_ptr<const model::Backbone> backbone, bool cache);

    /// Pooled features (N, D) of an (N, 3, H, W) batch.
    Tensor features(const Tensor& images);
    std::int64_t hits() const { return hits_; }
    std::int64_t misses() const { return misses_; }

private:
    std::shared_ptr<const model::Backbone> backbone_;
    bool cache_;
    std::map<std::uint64_t, std::vector<float>> store_;
    std::int64_t hits_ = 0, misses_ = 0;
};

/// Hook called after every epoch (for progress output).
using EpochCallback = std::function<void(std::uint64_t seed, int epoch, const MetricMap& val)>;

struct Options {
    EpochCallback on_epoch;
    /// Assert (InvariantError) that SH validation never calls a pretext transform.
    bool check_validation_path = true;
};

/// Dispatch on config.protocol.
RunResult run(const config::RunConfig& config, const DataSplit& data, const Options& options = {});

RunResult train_sl(const config::RunConfig& config, const DataSplit& data, const Options& options = {});
RunResult pretrain_ssl(const config::RunConfig& config, const DataSplit& data, const Options& options = {});
RunResult frozen_eval(const config::RunConfig& config, const DataSplit& data, const Options& options = {});
RunResult fine_tune(const config::RunConfig& config, const DataSplit& data, const Options& options = {});
RunResult train_hmtl(const config::RunConfig& config, const DataSplit& data, const Options& options = {});
RunResult train_inpaint_pl_two_stage(const config::RunConfig& config, const DataSplit& data,
                                     const Options& options = {});
RunResult pretext_without_ssh(const config::RunConfig& config, const DataSplit& data, const Options& options = {});

/// Index of the maximum best_score (first on ties).
std::size_t best_of_seeds(const std::vector<SeedResult>& seeds);

/// First step count (epoch * steps_per_epoch) at which `values[e-1] >= threshold`.
std::optional<std::int64_t> steps_to_threshold(const std::vector<double>& values, double threshold,
                                               int steps_per_epoch);

/// Convert images to an (N, 3, H, W) tensor.
Tensor to_tensor(const std::vector<const Image*>& images);

}  // namespace hmtl::train
