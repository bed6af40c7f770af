#include "hmtl/model.hpp"

#include <algorithm>
#include <set>
#include <utility>
#include <stdexcept>

namespace hmtl::model {

std::int64_t conv_param_count(int in, int out, int kernel) {
    return static_cast<std::int64_t>(out) * in * kernel * kernel + out;
}

std::int64_t linear_param_count(int in, int out) { return static_cast<std::int64_t>(out) * in + out; }

// -- Backbone -------------------------------------------------------------------

Backbone::Backbone(BackboneConfig config) : config_(std::move(config)) {
    if (config_.channels.empty()) throw std::invalid_argument("Backbone: needs at least one block");
    if (config_.convs_per_block < 1) throw std::invalid_argument("Backbone: convs_per_block must be >= 1");
    const int factor = 1 << config_.num_blocks();
    if (config_.resolution <= 0 || config_.resolution % factor != 0)
        throw std::invalid_argument("Backbone: resolution " + std::to_string(config_.resolution) +
                                    " is not a multiple of 2^" + std::to_string(config_.num_blocks()));
    int in = 3;
    for (int b = 0; b < config_.num_blocks(); ++b) {
        const int out = config_.channels[b];
        if (out <= 0) throw std::invalid_argument("Backbone: channel counts must be positive");
        const std::string prefix = "backbone.block" + std::to_string(b + 1);
        convs_.emplace_back(in, out, 3, 2, 1, prefix + ".conv0");
        for (int k = 1; k < config_.convs_per_block; ++k)
            convs_.emplace_back(out, out, 3, 1, 1, prefix + ".conv" + std::to_string(k));
        in = out;
    }
    Rng rng(config_.seed);
    for (auto& c : convs_) c.init(rng);
}

BackboneForward Backbone::forward(const Tensor& images) const {
    if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != config_.resolution ||
        images.dim(3) != config_.resolution)
        throw std::invalid_argument("Backbone: expected (N, 3, " + std::to_string(config_.resolution) + ", " +
                                    std::to_string(config_.resolution) + "), got " + shape_string(images.shape));
    BackboneForward f;
    f.input = images;
    const Tensor* x = &f.input;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
        f.conv_inputs.push_back(*x);
        f.conv_outputs.push_back(nn::relu(convs_[i].forward(*x)));
        x = &f.conv_outputs.back();
        if ((i + 1) % static_cast<std::size_t>(config_.convs_per_block) == 0)
            f.block_last_conv.push_back(static_cast<int>(i));
    }
    f.pooled = nn::global_avg_pool(f.final_map());
    return f;
}

Tensor Backbone::backward(const BackboneForward& fwd, const Tensor& dpooled, const std::vector<Tensor>& map_grads,
                          bool need_dx, bool param_grads) {
    Tensor grad;
    if (!dpooled.empty()) grad = nn::global_avg_pool_backward(fwd.final_map().shape, dpooled);
    const int per = config_.convs_per_block;
    for (int i = static_cast<int>(convs_.size()) - 1; i >= 0; --i) {
        if ((i + 1) % per == 0) {
            const int b = (i + 1) / per - 1;
            if (b < static_cast<int>(map_grads.size()) && !map_grads[b].empty()) nn::add_inplace(grad, map_grads[b]);
        }
        if (grad.empty()) continue;
        const Tensor g = nn::relu_backward(fwd.conv_outputs[i], grad);
        grad = convs_[i].backward(fwd.conv_inputs[i], g, i > 0 || need_dx, param_grads);
    }
    if (need_dx && grad.empty()) grad = Tensor(fwd.input.shape);
    return grad;
}

std::vector<nn::Param*> Backbone::params() {
    std::vector<nn::Param*> out;
    for (auto& c : convs_)
        for (auto* p : c.params()) out.push_back(p);
    return out;
}

std::vector<const nn::Param*> Backbone::params() const {
    std::vector<const nn::Param*> out;
    for (const auto& c : convs_)
        for (const auto* p : c.params()) out.push_back(p);
    return out;
}

// -- HeadSpec -------------------------------------------------------------------

std::string to_string(HeadKind kind) {
    switch (kind) {
        case HeadKind::Classifier: return "classifier";
        case HeadKind::CatReg: return "cat_reg";
        case HeadKind::Regression: return "regression";
        case HeadKind::Puzzle: return "puzzle";
        case HeadKind::Rotation: return "rotation";
        case HeadKind::Decoder: return "decoder";
    }
    return "classifier";
}

HeadKind parse_head_kind(const std::string& text) {
    for (auto k : {HeadKind::Classifier, HeadKind::CatReg, HeadKind::Regression, HeadKind::Puzzle,
                   HeadKind::Rotation, HeadKind::Decoder})
        if (to_string(k) == text) return k;
    throw std::invalid_argument("unknown head kind '" + text + "'");
}

int HeadSpec::outputs() const {
    switch (kind) {
        case HeadKind::Classifier: return classes;
        case HeadKind::CatReg: return scheme.n_bins;
        case HeadKind::Regression: return 1;
        case HeadKind::Puzzle: return grid * grid;
        case HeadKind::Rotation: return 8;
        case HeadKind::Decoder: return 3;
    }
    return 0;
}

HeadSpec HeadSpec::classifier(std::string name, int num_classes) {
    HeadSpec s;
    s.kind = HeadKind::Classifier;
    s.name = std::move(name);
    s.classes = num_classes;
    return s;
}

HeadSpec HeadSpec::cat_reg(std::string name, losses::BinScheme scheme) {
    HeadSpec s;
    s.kind = HeadKind::CatReg;
    s.name = std::move(name);
    s.classes = scheme.n_bins;
    s.scheme = scheme;
    s.label_smoothing = 0.0;
    return s;
}

HeadSpec HeadSpec::regression(std::string name) {
    HeadSpec s;
    s.kind = HeadKind::Regression;
    s.name = std::move(name);
    s.classes = 1;
    s.label_smoothing = 0.0;
    return s;
}

HeadSpec HeadSpec::puzzle(int grid) {
    HeadSpec s;
    s.kind = HeadKind::Puzzle;
    s.name = "puzzle";
    s.grid = grid;
    s.classes = grid * grid;
    s.dropout = 0.0;
    s.label_smoothing = 0.0;
    return s;
}

HeadSpec HeadSpec::rotation() {
    HeadSpec s;
    s.kind = HeadKind::Rotation;
    s.name = "rotation";
    s.classes = 8;
    s.dropout = 0.0;
    s.label_smoothing = 0.0;
    return s;
}

HeadSpec HeadSpec::decoder() {
    HeadSpec s;
    s.kind = HeadKind::Decoder;
    s.name = "decoder";
    s.dropout = 0.0;
    s.label_smoothing = 0.0;
    return s;
}

// -- Decoder --------------------------------------------------------------------

DecoderSpec DecoderSpec::for_backbone(const BackboneConfig& config) {
    static constexpr int kFilters[] = {256, 128, 64, 32, 16};
    const int n = config.num_blocks();
    if (n > 5) throw std::invalid_argument("DecoderSpec: at most 5 decoder blocks are supported");
    DecoderSpec spec;
    for (int i = 0; i < n; ++i) {
        spec.filters.push_back(kFilters[5 - n + i]);
        spec.skip_blocks.push_back(i == 0 ? -1 : n - 1 - i);
    }
    return spec;
}

Decoder::Decoder(DecoderSpec spec, const BackboneConfig& backbone)
    : spec_(std::move(spec)), feature_channels_(backbone.feature_dim()) {
    if (spec_.filters.empty() || spec_.filters.size() != spec_.skip_blocks.size())
        throw std::invalid_argument("Decoder: filters/skip_blocks mismatch");
    if ((backbone.final_resolution() << spec_.filters.size()) != backbone.resolution)
        throw std::invalid_argument("Decoder: block count does not restore the input resolution");
    int prev = feature_channels_;
    for (std::size_t i = 0; i < spec_.filters.size(); ++i) {
        const int skip = spec_.skip_blocks[i];
        if (skip >= backbone.num_blocks()) throw std::invalid_argument("Decoder: skip source out of range");
        const int skip_ch = skip >= 0 ? backbone.channels[skip] : 0;
        if (skip >= 0 && backbone.block_resolution(skip) != (backbone.final_resolution() << i))
            throw std::invalid_argument("Decoder: skip map resolution mismatch");
        skip_channels_.push_back(skip_ch);
        const int f = spec_.filters[i];
        const std::string prefix = "decoder.block" + std::to_string(i + 1);
        a_.emplace_back(prev + skip_ch, f, 3, 1, 1, prefix + ".conv_a");
        b_.emplace_back(f, f, 3, 1, 1, prefix + ".conv_b");
        prev = f;
    }
    out_ = std::make_unique<nn::Conv2d>(prev, 3, 1, 1, 0, "decoder.out");
}

void Decoder::init(Rng& rng) {
    for (std::size_t i = 0; i < a_.size(); ++i) {
        a_[i].init(rng);
        b_[i].init(rng);
    }
    out_->init(rng);
}

DecoderForward Decoder::forward(const BackboneForward& bb) const {
    DecoderForward f;
    Tensor prev = bb.final_map();
    for (std::size_t i = 0; i < a_.size(); ++i) {
        const int skip = spec_.skip_blocks[i];
        f.block_inputs.push_back(skip >= 0 ? nn::concat_channels(prev, bb.map(skip)) : prev);
        f.a_outputs.push_back(nn::relu(a_[i].forward(f.block_inputs.back())));
        f.b_outputs.push_back(nn::relu(b_[i].forward(f.a_outputs.back())));
        f.upsampled.push_back(nn::upsample2x(f.b_outputs.back()));
        prev = f.upsampled.back();
    }
    f.reconstruction = nn::sigmoid(out_->forward(prev));
    return f;
}

std::vector<Tensor> Decoder::backward(const BackboneForward& bb, const DecoderForward& fwd, const Tensor& drec) {
    std::vector<Tensor> map_grads(bb.block_last_conv.size());
    const Tensor dz = nn::sigmoid_backward(fwd.reconstruction, drec);
    Tensor dprev = out_->backward(fwd.upsampled.back(), dz, true);
    for (int i = static_cast<int>(a_.size()) - 1; i >= 0; --i) {
        Tensor g = nn::upsample2x_backward(dprev);
        g = nn::relu_backward(fwd.b_outputs[i], g);
        g = b_[i].backward(fwd.a_outputs[i], g, true);
        g = nn::relu_backward(fwd.a_outputs[i], g);
        Tensor dx = a_[i].backward(fwd.block_inputs[i], g, true);
        const int skip = spec_.skip_blocks[i];
        if (skip >= 0) {
            const int prev_ch = fwd.block_inputs[i].dim(1) - skip_channels_[i];
            auto [dp, ds] = nn::split_channels(dx, prev_ch);
            nn::add_inplace(map_grads[skip], ds);
            dprev = std::move(dp);
        } else {
            dprev = std::move(dx);
        }
    }
    nn::add_inplace(map_grads.back(), dprev);
    return map_grads;
}

std::vector<nn::Param*> Decoder::params() {
    std::vector<nn::Param*> out;
    for (std::size_t i = 0; i < a_.size(); ++i) {
        for (auto* p : a_[i].params()) out.push_back(p);
        for (auto* p : b_[i].params()) out.push_back(p);
    }
    for (auto* p : out_->params()) out.push_back(p);
    return out;
}

std::vector<const nn::Param*> Decoder::params() const {
    std::vector<const nn::Param*> out;
    for (std::size_t i = 0; i < a_.size(); ++i) {
        for (const auto* p : a_[i].params()) out.push_back(p);
        for (const auto* p : b_[i].params()) out.push_back(p);
    }
    for (const auto* p : static_cast<const nn::Conv2d&>(*out_).params()) out.push_back(p);
    return out;
}

// -- ModelAssembly --------------------------------------------------------------

namespace {

std::uint64_t name_key(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) h = (h ^ c) * 1099511628211ULL;
    return h;
}

void branch_forward(const ModelAssembly::Branch& br, const Tensor& pooled, Tensor& pre, Tensor& hidden,
                    std::vector<Tensor>& logits) {
    const Tensor* in = &pooled;
    if (br.hidden) {
        pre = br.hidden->forward(pooled);
        hidden = nn::relu(pre);
        in = &hidden;
    }
    logits.clear();
    for (const auto& h : br.heads) logits.push_back(h->forward(*in));
}

void branch_backward(ModelAssembly::Branch& br, const Tensor& pooled, const Tensor& hidden,
                     const std::vector<Tensor>& dlogits, Tensor& dpooled, bool param_grads) {
    const Tensor& in = br.hidden ? hidden : pooled;
    Tensor din;
    for (std::size_t j = 0; j < br.heads.size(); ++j) {
        if (j >= dlogits.size() || dlogits[j].empty()) continue;
        nn::add_inplace(din, br.heads[j]->backward(in, dlogits[j], true, param_grads));
    }
    if (din.empty()) return;
    if (br.hidden) {
        din = nn::relu_backward(hidden, din);
        din = br.hidden->backward(pooled, din, true, param_grads);
    }
    nn::add_inplace(dpooled, din);
}

}  // namespace

Outputs ModelAssembly::forward(const Tensor& images, const ForwardOptions& options) const {
    if (!backbone) throw std::logic_error("ModelAssembly: no backbone");
    if (options.training && !options.rng) throw std::invalid_argument("ModelAssembly: training forward needs rng");
    Outputs out;
    out.backbone = backbone->forward(images);
    const Tensor& pooled = out.backbone.pooled;
    if (options.supervised) {
        for (const auto& h : supervised) {
            Tensor mask;
            Tensor in = pooled;
            if (options.training && h.spec.dropout > 0.0) {
                mask = nn::dropout_mask(pooled.shape, h.spec.dropout, *options.rng);
                in = nn::multiply(pooled, mask);
            }
            out.sh.push_back(h.fc->forward(in));
            out.sh_inputs.push_back(std::move(in));
            out.sh_masks.push_back(std::move(mask));
        }
    }
    if (options.ssh) {
        if (puzzle) branch_forward(*puzzle, pooled, out.puzzle_pre, out.puzzle_hidden, out.puzzle);
        if (rotation) {
            std::vector<Tensor> r;
            branch_forward(*rotation, pooled, out.rotation_pre, out.rotation_hidden, r);
            out.rotation = std::move(r.front());
        }
        if (decoder) out.decoder = decoder->forward(out.backbone);
    }
    return out;
}

Tensor ModelAssembly::backward(const Outputs& out, const OutputGrads& grads, bool need_input_grad,
                               bool param_grads) {
    if (!puzzle && !grads.puzzle.empty()) throw std::invalid_argument("backward: model has no puzzle heads");
    if (!rotation && !grads.rotation.empty()) throw std::invalid_argument("backward: model has no rotation head");
    if (!decoder && !grads.reconstruction.empty()) throw std::invalid_argument("backward: model has no decoder");
    Tensor dpooled = grads.pooled;
    for (std::size_t i = 0; i < supervised.size() && i < grads.sh.size(); ++i) {
        if (grads.sh[i].empty()) continue;
        if (i >= out.sh.size()) throw std::invalid_argument("backward: supervised head was not evaluated");
        Tensor d = supervised[i].fc->backward(out.sh_inputs[i], grads.sh[i], true, param_grads);
        if (!out.sh_masks[i].empty()) d = nn::multiply(d, out.sh_masks[i]);
        nn::add_inplace(dpooled, d);
    }
    if (puzzle && !grads.puzzle.empty())
        branch_backward(*puzzle, out.backbone.pooled, out.puzzle_hidden, grads.puzzle, dpooled, param_grads);
    if (rotation && !grads.rotation.empty())
        branch_backward(*rotation, out.backbone.pooled, out.rotation_hidden, {grads.rotation}, dpooled,
                        param_grads);
    std::vector<Tensor> map_grads;
    if (decoder && !grads.reconstruction.empty()) {
        if (!param_grads) throw std::invalid_argument("backward: decoder requires parameter gradients");
        map_grads = decoder->backward(out.backbone, out.decoder, grads.reconstruction);
    }
    return backbone->backward(out.backbone, dpooled, map_grads, need_input_grad, param_grads);
}

std::vector<HeadSpec> ModelAssembly::head_specs() const {
    std::vector<HeadSpec> specs;
    for (const auto& h : supervised) specs.push_back(h.spec);
    if (puzzle) specs.push_back(puzzle->spec);
    if (rotation) specs.push_back(rotation->spec);
    if (decoder) specs.push_back(HeadSpec::decoder());
    return specs;
}

int ModelAssembly::supervised_index(const std::string& name) const {
    for (std::size_t i = 0; i < supervised.size(); ++i)
        if (supervised[i].spec.name == name) return static_cast<int>(i);
    throw std::out_of_range("model has no supervised head '" + name + "'");
}

std::map<std::string, std::vector<nn::Param*>> ModelAssembly::components() const {
    std::map<std::string, std::vector<nn::Param*>> c;
    c["backbone"] = backbone->params();
    for (const auto& h : supervised) c["sh." + h.spec.name] = h.fc->params();
    auto add_branch = [&](const std::optional<Branch>& br, const std::string& name) {
        if (!br) return;
        auto& v = c[name];
        if (br->hidden)
            for (auto* p : br->hidden->params()) v.push_back(p);
        for (const auto& h : br->heads)
            for (auto* p : h->params()) v.push_back(p);
    };
    add_branch(puzzle, "puzzle");
    add_branch(rotation, "rotation");
    if (decoder) c["decoder"] = decoder->params();
    return c;
}

std::vector<nn::Param*> ModelAssembly::params() const {
    std::vector<nn::Param*> all;
    for (auto& [name, ps] : components()) all.insert(all.end(), ps.begin(), ps.end());
    return all;
}

std::int64_t ModelAssembly::param_count() const {
    std::int64_t n = nn::param_count(std::as_const(*backbone).params());
    for (const auto& h : supervised) n += nn::param_count(std::as_const(*h.fc).params());
    for (const auto* br : {&puzzle, &rotation}) {
        if (!*br) continue;
        if ((*br)->hidden) n += nn::param_count(std::as_const(*(*br)->hidden).params());
        for (const auto& h : (*br)->heads) n += nn::param_count(std::as_const(*h).params());
    }
    if (decoder) n += nn::param_count(std::as_const(*decoder).params());
    return n;
}

void ModelAssembly::zero_grad() {
    for (auto* p : params()) p->grad.zero();
}

ModelAssembly assemble(std::shared_ptr<Backbone> backbone, const std::vector<HeadSpec>& heads, std::uint64_t seed) {
    if (!backbone) throw std::invalid_argument("assemble: null backbone");
    ModelAssembly m;
    m.backbone = std::move(backbone);
    const int D = m.backbone->feature_dim();

    int classifiers = 0, regressors = 0;
    std::set<std::string> names;
    const HeadSpec* puzzle_spec = nullptr;
    const HeadSpec* rotation_spec = nullptr;
    bool want_decoder = false;
    for (const auto& h : heads) {
        if (!names.insert(h.name).second) {
            if (h.kind == HeadKind::Classifier) throw std::invalid_argument("assemble: duplicate supervised classifier");
            throw std::invalid_argument("assemble: duplicate head name '" + h.name + "'");
        }
        switch (h.kind) {
            case HeadKind::Classifier:
                if (++classifiers > 1) throw std::invalid_argument("assemble: duplicate supervised classifier");
                if (h.classes < 2) throw std::invalid_argument("assemble: classifier needs >= 2 classes");
                break;
            case HeadKind::CatReg:
            case HeadKind::Regression:
                ++regressors;
                break;
            case HeadKind::Puzzle:
                if (puzzle_spec) throw std::invalid_argument("assemble: more than one puzzle head set");
                if (h.grid < 2) throw std::invalid_argument("assemble: puzzle grid must be >= 2");
                puzzle_spec = &h;
                break;
            case HeadKind::Rotation:
                if (rotation_spec) throw std::invalid_argument("assemble: more than one rotation head");
                rotation_spec = &h;
                break;
            case HeadKind::Decoder:
                if (want_decoder) throw std::invalid_argument("assemble: more than one decoder");
                want_decoder = true;
                break;
        }
    }
    if (classifiers > 0 && regressors > 0)
        throw std::invalid_argument("assemble: a classifier cannot be combined with regression supervised heads");

    for (const auto& h : heads) {
        if (!h.supervised()) continue;
        Rng rng(derive_seed(seed, {name_key("sh." + h.name)}));
        auto fc = std::make_shared<nn::Linear>(D, h.outputs(), "sh." + h.name);
        fc->init(rng);
        m.supervised.push_back({h, std::move(fc)});
    }
    const bool joint = puzzle_spec && rotation_spec;
    auto make_branch = [&](const HeadSpec& spec, int num_heads, int classes) {
        ModelAssembly::Branch br;
        br.spec = spec;
        const int hidden = spec.hidden >= 0 ? spec.hidden : (joint ? 512 : 0);
        br.spec.hidden = hidden;
        Rng rng(derive_seed(seed, {name_key(spec.name)}));
        int in = D;
        if (hidden > 0) {
            br.hidden = std::make_shared<nn::Linear>(D, hidden, spec.name + ".hidden");
            br.hidden->init(rng);
            in = hidden;
        }
        for (int j = 0; j < num_heads; ++j) {
            auto fc = std::make_shared<nn::Linear>(in, classes, spec.name + ".head" + std::to_string(j));
            fc->init(rng);
            br.heads.push_back(std::move(fc));
        }
        return br;
    };
    if (puzzle_spec) {
        const int n = puzzle_spec->grid * puzzle_spec->grid;
        m.puzzle = make_branch(*puzzle_spec, n, n);
    }
    if (rotation_spec) m.rotation = make_branch(*rotation_spec, 1, 8);
    if (want_decoder) {
        m.decoder = std::make_shared<Decoder>(DecoderSpec::for_backbone(m.backbone->config()), m.backbone->config());
        Rng rng(derive_seed(seed, {name_key("decoder")}));
        m.decoder->init(rng);
    }
    return m;
}

ModelAssembly assemble(const BackboneConfig& config, const std::vector<HeadSpec>& heads, std::uint64_t seed) {
    return assemble(std::make_shared<Backbone>(config), heads, seed);
}

ModelAssembly strip_ssh(const ModelAssembly& model) {
    ModelAssembly m;
    m.backbone = model.backbone;
    m.supervised = model.supervised;
    return m;
}

}  // namespace hmtl::model
