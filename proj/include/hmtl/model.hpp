#pragma once

// Backbone, task heads and the in-painting decoder, assembled into one
// model that shares the backbone between a supervised head (SH) and any
// number of self-supervised heads (SSH).

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "hmtl/losses.hpp"
#include "hmtl/nn.hpp"
#include "hmtl/tensor.hpp"

namespace hmtl::model {

/// Desk-scale backbone: one stride-2 3x3 conv block per entry of
/// `channels` (optionally followed by stride-1 convs), ReLU, then global
/// average pooling. The pooled feature length is channels.back().
struct BackboneConfig {
    int resolution = 64;
    std::vector<int> channels{16, 32, 64, 128};
    int convs_per_block = 1;
    std::uint64_t seed = 0;

    int num_blocks() const { return static_cast<int>(channels.size()); }
    int feature_dim() const { return channels.empty() ? 0 : channels.back(); }
    int final_resolution() const { return resolution >> num_blocks(); }
    /// Resolution of the output of block b (0-based).
    int block_resolution(int b) const { return resolution >> (b + 1); }
    friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

struct BackboneForward {
    Tensor input;
    std::vector<Tensor> conv_inputs;   ///< input of every conv, in order
    std::vector<Tensor> conv_outputs;  ///< post-ReLU output of every conv
    std::vector<int> block_last_conv;  ///< index into conv_outputs of each block's output map
    Tensor pooled;                     ///< (N, D)

    const Tensor& map(int block) const { return conv_outputs[block_last_conv[block]]; }
    const Tensor& final_map() const { return map(static_cast<int>(block_last_conv.size()) - 1); }
};

class Backbone {
public:
    /// Throws std::invalid_argument when the resolution is not a multiple
    /// of 2^blocks.
    explicit Backbone(BackboneConfig config);

    BackboneForward forward(const Tensor& images) const;
    /// `dpooled` may be empty; `map_grads[b]` (optional, may be shorter or
    /// contain empty tensors) are extra gradients arriving at block outputs.
    Tensor backward(const BackboneForward& fwd, const Tensor& dpooled, const std::vector<Tensor>& map_grads,
                    bool need_dx, bool param_grads = true);

    const BackboneConfig& config() const { return config_; }
    int feature_dim() const { return config_.feature_dim(); }
    std::vector<nn::Param*> params();
    std::vector<const nn::Param*> params() const;

private:
    BackboneConfig config_;
    std::vector<nn::Conv2d> convs_;
};

enum class HeadKind { Classifier, CatReg, Regression, Puzzle, Rotation, Decoder };

std::string to_string(HeadKind kind);
HeadKind parse_head_kind(const std::string& text);

struct HeadSpec {
    HeadKind kind = HeadKind::Classifier;
    std::string name;
    int classes = 0;       ///< classifier: K; cat-reg: n_bins; rotation: 8
    int grid = 0;          ///< puzzle: g (g^2 heads of g^2 classes)
    int hidden = -1;       ///< SSH branch width; -1 = 512 for joint puzzle+rotation, else linear
    double dropout = 0.2;  ///< supervised heads only
    double label_smoothing = 0.1;
    losses::BinScheme scheme;  ///< cat-reg only

    bool supervised() const {
        return kind == HeadKind::Classifier || kind == HeadKind::CatReg || kind == HeadKind::Regression;
    }
    int outputs() const;

    static HeadSpec classifier(std::string name, int num_classes);
    static HeadSpec cat_reg(std::string name, losses::BinScheme scheme);
    static HeadSpec regression(std::string name);
    static HeadSpec puzzle(int grid);
    static HeadSpec rotation();
    static HeadSpec decoder();

    friend bool operator==(const HeadSpec&, const HeadSpec&) = default;
};

/// Decoder blocks: concat(previous, skip) -> conv3x3+ReLU -> conv3x3+ReLU ->
/// nearest 2x upsample; then a 1x1 conv to 3 channels and a sigmoid.
struct DecoderSpec {
    std::vector<int> filters;
    /// Backbone block feeding each decoder block's skip connection, -1 for none.
    std::vector<int> skip_blocks;

    /// Filters are the last log2(resolution / final_resolution) entries of
    /// {256, 128, 64, 32, 16}; block i > 0 takes the backbone map of its
    /// input resolution as skip.
    static DecoderSpec for_backbone(const BackboneConfig& config);
    friend bool operator==(const DecoderSpec&, const DecoderSpec&) = default;
};

struct DecoderForward {
    std::vector<Tensor> block_inputs;  ///< after concatenation
    std::vector<Tensor> a_outputs;
    std::vector<Tensor> b_outputs;
    std::vector<Tensor> upsampled;
    Tensor reconstruction;
};

class Decoder {
public:
    Decoder(DecoderSpec spec, const BackboneConfig& backbone);

    void init(Rng& rng);
    DecoderForward forward(const BackboneForward& bb) const;
    /// Returns gradients for each backbone block output.
    std::vector<Tensor> backward(const BackboneForward& bb, const DecoderForward& fwd, const Tensor& drec);

    const DecoderSpec& spec() const { return spec_; }
    std::vector<nn::Param*> params();
    std::vector<const nn::Param*> params() const;

private:
    DecoderSpec spec_;
    std::vector<int> skip_channels_;
    int feature_channels_ = 0;
    std::vector<nn::Conv2d> a_, b_;
    std::unique_ptr<nn::Conv2d> out_;
};

struct ForwardOptions {
    bool training = false;   ///< enables dropout (needs rng)
    Rng* rng = nullptr;
    bool supervised = true;  ///< evaluate supervised heads
    bool ssh = true;         ///< evaluate puzzle/rotation/decoder heads
};

struct Outputs {
    BackboneForward backbone;
    std::vector<Tensor> sh_inputs;  ///< pooled features after dropout, per SH
    std::vector<Tensor> sh_masks;
    std::vector<Tensor> sh;         ///< logits (or raw regression output) per SH
    Tensor puzzle_pre, puzzle_hidden;
    std::vector<Tensor> puzzle;     ///< logits per puzzle position
    Tensor rotation_pre, rotation_hidden;
    Tensor rotation;
    DecoderForward decoder;

    const Tensor& reconstruction() const { return decoder.reconstruction; }
};

/// d(loss)/d(output) for each head; empty tensors mean "no gradient".
struct OutputGrads {
    std::vector<Tensor> sh;
    std::vector<Tensor> puzzle;
    Tensor rotation;
    Tensor reconstruction;
    Tensor pooled;  ///< extra gradient straight into the pooled features
};

/// Shared backbone plus independent heads. Components are held by
/// shared_ptr so a stripped view shares parameters with its source.
class ModelAssembly {
public:
    struct SupervisedHead {
        HeadSpec spec;
        std::shared_ptr<nn::Linear> fc;
    };
    struct Branch {
        HeadSpec spec;
        std::shared_ptr<nn::Linear> hidden;  ///< null for linear heads
        std::vector<std::shared_ptr<nn::Linear>> heads;
    };

    std::shared_ptr<Backbone> backbone;
    std::vector<SupervisedHead> supervised;
    std::optional<Branch> puzzle;
    std::optional<Branch> rotation;
    std::shared_ptr<Decoder> decoder;

    Outputs forward(const Tensor& images, const ForwardOptions& options = {}) const;
    /// Backpropagates `grads`; returns dL/d(images) when requested.
    Tensor backward(const Outputs& out, const OutputGrads& grads, bool need_input_grad = false,
                    bool param_grads = true);

    bool has_ssh() const { return puzzle.has_value() || rotation.has_value() || decoder != nullptr; }
    std::vector<HeadSpec> head_specs() const;
    int supervised_index(const std::string& name) const;

    /// Parameters grouped by component name: "backbone", "sh.<name>",
    /// "puzzle", "rotation", "decoder". Components are shared objects, so
    /// this hands out mutable parameters even from a const assembly.
    std::map<std::string, std::vector<nn::Param*>> components() const;
    std::vector<nn::Param*> params() const;
    std::int64_t param_count() const;
    void zero_grad();
};

/// Build fresh heads (seeded) on top of `backbone`.
ModelAssembly assemble(std::shared_ptr<Backbone> backbone, const std::vector<HeadSpec>& heads, std::uint64_t seed);
/// Build a fresh backbone from `config` and heads on top.
ModelAssembly assemble(const BackboneConfig& config, const std::vector<HeadSpec>& heads, std::uint64_t seed);

/// View of `model` with only its supervised head(s). Shares parameters.
ModelAssembly strip_ssh(const ModelAssembly& model);

/// Closed-form parameter counts.
std::int64_t conv_param_count(int in, int out, int kernel);
std::int64_t linear_param_count(int in, int out);

}  // namespace hmtl::model
