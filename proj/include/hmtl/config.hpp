#pragma once

// Experiment configuration and its text form.
//
// Grammar (one statement per line):
//   [section]            one of data, model, pretext, loss, optim, run
//   key = value          value runs to end of line, surrounding blanks trimmed
//   # comment / ; comment
// Lists are comma-separated; the decay schedule is "epoch:factor, ...".
// Unknown sections or keys and repeated keys are errors.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "hmtl/dataset.hpp"
#include "hmtl/optim.hpp"
#include "hmtl/pretext.hpp"

namespace hmtl::config {

enum class Protocol { Sl, SslPretrain, FrozenEval, FineTune, Hmtl, InpaintPlTwoStage, PretextWithoutSsh };
std::string to_string(Protocol p);
Protocol parse_protocol(const std::string& text);

enum class PretextKind { None, Puzzle, Rotation, PuzzleRotation, InpaintPwl, InpaintPl };
std::string to_string(PretextKind k);
PretextKind parse_pretext_kind(const std::string& text);
bool is_inpaint(PretextKind k);

struct DataConfig {
    data::Task task = data::Task::Classification;
    std::string root;      ///< training folder; empty = synthetic
    std::string val_root;  ///< validation folder; empty = split off / synthesize
    double val_split = 0.2;
    int synth_n = 2000;
    int synth_val_n = 500;
    std::uint64_t synth_seed = 1;
    int num_classes = 8;
    std::vector<double> proportions;
    double margin = 0.3;
    double render_noise = 0.0;
    double pose_range = 90.0;
    int image_size = 64;
    double fraction = 1.0;
    std::uint64_t subsample_seed = 0;
    pretext::AugmentLevel augment = pretext::AugmentLevel::Weak;
    bool cutout = true;
    friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct ModelConfig {
    std::vector<int> channels{16, 32, 64, 128};
    int convs_per_block = 1;
    std::string regression_head = "cat_reg";  ///< cat_reg | regression
    int bins = 20;         ///< valence/arousal bins on [-1, 1]
    int pose_bins = 66;    ///< head-pose bins on [-99, 99]
    double dropout = 0.2;
    double label_smoothing = 0.1;
    int ssh_hidden = -1;
    std::string frozen_head = "nonlinear";  ///< nonlinear | linear
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct PretextConfig {
    PretextKind kind = PretextKind::None;
    int grid = 2;
    std::vector<double> region_weights;  ///< empty = defaults for the grid
    bool identity = false;               ///< keep pieces in place (ablation control)
    pretext::Region region;
    double square_side = 0.4;
    bool pixel_mask = false;             ///< pixel-wise RMSE only inside the cut square
    friend bool operator==(const PretextConfig&, const PretextConfig&) = default;
};

struct LossConfig {
    std::string class_weights = "inverse";  ///< inverse | unit
    double lambda_sl = 1.0;
    double lambda_ssh = 1.0;
    double lambda_rotation = 1.0;
    std::string lambda_dec_mode = "fixed";  ///< fixed | auto
    double lambda_dec = 1.0;
    std::string puzzle_loss = "auto";       ///< auto | ce | focal
    double focal_alpha = 1.0;
    double focal_gamma = 2.0;
    double cat_reg_alpha = 1.0;
    friend bool operator==(const LossConfig&, const LossConfig&) = default;
};

struct OptimConfig {
    optim::OptimizerConfig optimizer;
    double lr = -1.0;  ///< < 0: 1e-3 from scratch, 1e-4 when fine-tuning
    optim::DecaySchedule decay{{25, 0.1}};
    friend bool operator==(const OptimConfig&, const OptimConfig&) = default;
};

struct RunConfig {
    Protocol protocol = Protocol::Sl;
    std::vector<std::uint64_t> seeds{0, 1, 2};
    int epochs = 40;
    int batch_size = -1;   ///< < 0: 64, or 32 with an in-painting pretext
    int patience = 10;     ///< epochs without improvement; 0 disables early stopping
    std::vector<double> thresholds{0.5};
    std::string output;    ///< output directory; empty = nothing written
    std::string checkpoint;
    std::string teacher;
    int teacher_epochs = -1;  ///< < 0: same as epochs
    bool resume = false;
    bool eval_train = false;  ///< also evaluate the clean train set every epoch
    bool ssh_val = true;      ///< evaluate SSH accuracy on transformed val images

    DataConfig data;
    ModelConfig model;
    PretextConfig pretext;
    LossConfig loss;
    OptimConfig optim;

    int effective_batch_size() const;
    double effective_lr() const;
    int effective_teacher_epochs() const { return teacher_epochs < 0 ? epochs : teacher_epochs; }
    /// Throws ConfigError when required fields are missing or inconsistent.
    void validate() const;
    friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

RunConfig parse(const std::string& text);
/// Assign one field from its text form, as parse() would.
void set_field(RunConfig& config, const std::string& section, const std::string& key, const std::string& value);
RunConfig load(const std::string& path);
/// Canonical text: every key, fixed order, round-trips through parse().
std::string to_text(const RunConfig& config);

}  // namespace hmtl::config
