#include "hmtl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <json.hpp>
#include <limits>
#include <numeric>

#include "hmtl/checkpoint.hpp"
#include "hmtl/error.hpp"
#include "hmtl/losses.hpp"
#include "hmtl/optim.hpp"
#include "hmtl/pretext.hpp"
#include "hmtl/report.hpp"
#include "hmtl/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace hmtl::train {

using config::PretextKind;
using config::Protocol;
using config::RunConfig;
using data::Task;
using model::HeadKind;
using model::HeadSpec;
using model::ModelAssembly;

namespace {

// Stream tags for derive_seed.
constexpr std::uint64_t kShuffleTag = 0x73687566;
constexpr std::uint64_t kAugmentTag = 0x61756731;
constexpr std::uint64_t kPretextTag = 0x70726574;
constexpr std::uint64_t kDropoutTag = 0x64726f70;
constexpr std::uint64_t kBackboneTag = 0x62616b62;
constexpr std::uint64_t kHeadTag = 0x68656164;
constexpr std::uint64_t kSshValTag = 0x73736876;
constexpr std::uint64_t kValSynthTag = 0x76616c73;
constexpr std::uint64_t kSplitTag = 0x73706c74;

constexpr int kEvalChunk = 64;
constexpr double kPoseScale = data::kMaxPoseDegrees;

std::string key(const std::string& head, const std::string& metric) { return head + "/" + metric; }

bool has_puzzle(PretextKind k) { return k == PretextKind::Puzzle || k == PretextKind::PuzzleRotation; }
bool has_rotation(PretextKind k) { return k == PretextKind::Rotation || k == PretextKind::PuzzleRotation; }

std::uint64_t fnv1a(const float* p, std::size_t n) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    const auto* bytes = reinterpret_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n * sizeof(float); ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::vector<FloatBuffer> snapshot(const ModelAssembly& m) {
    std::vector<FloatBuffer> s;
    for (const auto* p : m.params()) s.push_back(p->value.data);
    return s;
}

void restore(const ModelAssembly& m, const std::vector<FloatBuffer>& s) {
    const auto ps = m.params();
    for (std::size_t i = 0; i < ps.size(); ++i) ps[i]->value.data = s[i];
}

std::vector<FloatBuffer> snapshot(const std::vector<nn::Param*>& ps) {
    std::vector<FloatBuffer> s;
    for (const auto* p : ps) s.push_back(p->value.data);
    return s;
}

bool same_values(const std::vector<nn::Param*>& ps, const std::vector<FloatBuffer>& s) {
    for (std::size_t i = 0; i < ps.size(); ++i)
        if (ps[i]->value.data != s[i]) return false;
    return true;
}

/// Per-sample transform output.
struct SampleOut {
    Image input;
    std::vector<int> puzzle_labels;
    std::vector<double> puzzle_weights;
    int rotation = -1;
    Image original;
    Image mask;
};

std::vector<double> region_weights(const RunConfig& cfg) {
    if (!cfg.pretext.region_weights.empty()) return cfg.pretext.region_weights;
    return pretext::default_region_weights(cfg.pretext.grid);
}

SampleOut apply_pretext(Image img, PretextKind kind, const RunConfig& cfg, Rng& rng) {
    SampleOut out;
    if (has_rotation(kind)) {
        auto r = pretext::make_rotation(img, rng);
        out.rotation = r.label;
        img = std::move(r.image);
    }
    if (has_puzzle(kind)) {
        const auto weights = region_weights(cfg);
        pretext::PuzzleSample p;
        if (cfg.pretext.identity) {
            std::vector<int> perm(static_cast<std::size_t>(cfg.pretext.grid * cfg.pretext.grid));
            std::iota(perm.begin(), perm.end(), 0);
            p = pretext::make_puzzle(img, cfg.pretext.grid, weights, perm);
        } else {
            p = pretext::make_puzzle(img, cfg.pretext.grid, weights, rng);
        }
        out.puzzle_labels = std::move(p.labels);
        out.puzzle_weights = std::move(p.head_weights);
        img = std::move(p.image);
    }
    if (config::is_inpaint(kind)) {
        auto s = pretext::make_inpaint(img, cfg.pretext.region, cfg.pretext.square_side, rng);
        out.original = std::move(s.original);
        out.mask = std::move(s.mask);
        img = std::move(s.image);
    }
    out.input = std::move(img);
    return out;
}

struct Batch {
    std::vector<std::size_t> indices;
    Tensor images;
    std::vector<int> labels;
    std::vector<std::vector<double>> targets;        ///< per supervised head
    std::vector<std::vector<int>> puzzle_labels;     ///< [position][sample]
    std::vector<std::vector<double>> puzzle_weights;  ///< [position][sample]
    std::vector<int> rotation_labels;
    Tensor originals;
    Tensor masks;
};

Tensor masks_to_tensor(const std::vector<const Image*>& masks) {
    const int N = static_cast<int>(masks.size());
    const int H = masks.front()->height(), W = masks.front()->width();
    Tensor t({N, 1, H, W});
    for (int n = 0; n < N; ++n) std::copy(masks[n]->data().begin(), masks[n]->data().end(), t.row(n).begin());
    return t;
}

/// Per-head scale applied to continuous targets for raw regression heads.
double target_scale(Task task) { return task == Task::HeadPose ? kPoseScale : 1.0; }

int argmax(std::span<const float> row) {
    return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

double expectation(std::span<const float> logits, const losses::BinScheme& scheme) {
    return losses::expectation_from_bins(losses::softmax(logits), scheme);
}

/// Continuous prediction of one supervised head for sample n.
double regress(const HeadSpec& spec, const Tensor& out, int n, Task task) {
    if (spec.kind == HeadKind::CatReg) return expectation(out.row(n), spec.scheme);
    return static_cast<double>(out.row(n)[0]) * target_scale(task);
}

Task task_of(const ModelAssembly& m, const data::LabeledDataset& ds) {
    if (m.supervised.empty()) throw std::invalid_argument("evaluate: model has no supervised head");
    return ds.task;
}

void append_loss(std::map<std::string, double>& acc, const std::string& name, double v) { acc[name] += v; }

}  // namespace

// -- public helpers -----------------------------------------------------------------

std::vector<double> SeedResult::series(const std::string& split, const std::string& head,
                                       const std::string& metric) const {
    std::vector<double> v;
    for (const auto& r : history)
        if (r.split == split && r.head == head && r.metric == metric) v.push_back(r.value);
    return v;
}

double RunResult::mean_final(const std::string& k) const {
    if (seeds.empty()) throw std::invalid_argument("mean_final: no seeds");
    double s = 0.0;
    for (const auto& r : seeds) s += r.final_val.at(k);
    return s / static_cast<double>(seeds.size());
}

std::size_t best_of_seeds(const std::vector<SeedResult>& seeds) {
    if (seeds.empty()) throw std::invalid_argument("best_of_seeds: no results");
    std::size_t best = 0;
    for (std::size_t i = 1; i < seeds.size(); ++i)
        if (seeds[i].best_score > seeds[best].best_score) best = i;
    return best;
}

std::optional<std::int64_t> steps_to_threshold(const std::vector<double>& values, double threshold,
                                               int steps_per_epoch) {
    for (std::size_t e = 0; e < values.size(); ++e)
        if (values[e] >= threshold) return static_cast<std::int64_t>(e + 1) * steps_per_epoch;
    return std::nullopt;
}

Tensor to_tensor(const std::vector<const Image*>& images) {
    if (images.empty()) return Tensor({0, 3, 0, 0});
    const int N = static_cast<int>(images.size());
    const int H = images.front()->height(), W = images.front()->width(), C = images.front()->channels();
    Tensor t({N, C, H, W});
    for (int n = 0; n < N; ++n) {
        const Image& img = *images[n];
        if (img.height() != H || img.width() != W || img.channels() != C)
            throw std::invalid_argument("to_tensor: images differ in shape");
        float* dst = t.row(n).data();
        const float* src = img.data().data();
        for (int r = 0; r < H; ++r)
            for (int c = 0; c < W; ++c)
                for (int ch = 0; ch < C; ++ch) dst[(ch * H + r) * W + c] = src[(r * W + c) * C + ch];
    }
    return t;
}

data::LabeledDataset subsample(const data::LabeledDataset& ds, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("subsample: fraction must be in (0, 1]");
    if (fraction == 1.0) return ds;
    data::LabeledDataset out = ds;
    out.records.clear();
    std::vector<std::size_t> keep;
    if (data::is_categorical(ds.task)) {
        std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(ds.num_classes));
        for (std::size_t i = 0; i < ds.records.size(); ++i) by_class[*ds.records[i].label].push_back(i);
        for (int k = 0; k < ds.num_classes; ++k) {
            auto& idx = by_class[k];
            if (idx.empty()) continue;
            const long m = std::lround(fraction * static_cast<double>(idx.size()));
            if (m == 0)
                throw std::invalid_argument("subsample: fraction " + report::format_number(fraction) + " leaves class '" +
                                            (k < static_cast<int>(ds.class_names.size()) ? ds.class_names[k] : std::to_string(k)) +
                                            "' (" + std::to_string(idx.size()) + " items) empty");
            Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(k)}));
            rng.shuffle(idx.begin(), idx.end());
            keep.insert(keep.end(), idx.begin(), idx.begin() + m);
        }
    } else {
        std::vector<std::size_t> idx(ds.records.size());
        std::iota(idx.begin(), idx.end(), 0);
        const long m = std::lround(fraction * static_cast<double>(idx.size()));
        if (m == 0) throw std::invalid_argument("subsample: fraction leaves the dataset empty");
        Rng rng(seed);
        rng.shuffle(idx.begin(), idx.end());
        keep.assign(idx.begin(), idx.begin() + m);
    }
    std::sort(keep.begin(), keep.end());
    for (auto i : keep) out.records.push_back(ds.records[i]);
    return out;
}

namespace {

void resize_all(data::LabeledDataset& ds, int size) {
    for (auto& r : ds.records)
        if (r.image.height() != size || r.image.width() != size) r.image = pretext::resize(r.image, size, size);
}

/// Stratified split of `ds` into (train, val).
std::pair<data::LabeledDataset, data::LabeledDataset> split(const data::LabeledDataset& ds, double val_fraction,
                                                            std::uint64_t seed) {
    data::LabeledDataset val = subsample(ds, val_fraction, seed);
    std::vector<std::string> ids;
    for (const auto& r : val.records) ids.push_back(r.id);
    std::sort(ids.begin(), ids.end());
    data::LabeledDataset train = ds;
    train.records.clear();
    for (const auto& r : ds.records)
        if (!std::binary_search(ids.begin(), ids.end(), r.id)) train.records.push_back(r);
    return {train, val};
}

}  // namespace

DataSplit prepare_data(const RunConfig& cfg) {
    DataSplit out;
    const auto& d = cfg.data;
    if (d.root.empty()) {
        data::SynthOptions o;
        o.n = d.synth_n;
        o.seed = d.synth_seed;
        o.task = d.task;
        o.image_size = d.image_size;
        o.num_classes = d.num_classes;
        o.proportions = d.proportions;
        o.margin = d.margin;
        o.render_noise = d.render_noise;
        o.pose_range = d.pose_range;
        out.train = data::synth_faces(o);
        o.n = d.synth_val_n;
        o.seed = derive_seed(d.synth_seed, {kValSynthTag});
        o.proportions.clear();  // validation is balanced
        out.val = data::synth_faces(o);
    } else {
        auto full = data::load_folder(d.root, d.task);
        if (!d.val_root.empty()) {
            out.train = std::move(full);
            out.val = data::load_folder(d.val_root, d.task);
        } else {
            std::tie(out.train, out.val) = split(full, d.val_split, derive_seed(d.synth_seed, {kSplitTag}));
        }
        resize_all(out.train, d.image_size);
        resize_all(out.val, d.image_size);
    }
    out.train = subsample(out.train, d.fraction, d.subsample_seed);
    if (out.train.empty() || out.val.empty()) throw SchemaError("training or validation set is empty");
    return out;
}

std::vector<HeadSpec> supervised_heads(const RunConfig& cfg, const data::LabeledDataset& ds) {
    std::vector<HeadSpec> heads;
    const bool cat_reg = cfg.model.regression_head == "cat_reg";
    switch (ds.task) {
        case Task::Classification:
        case Task::Gender:
            heads.push_back(HeadSpec::classifier("label", ds.num_classes));
            break;
        case Task::ValenceArousal:
            for (const auto& n : data::target_names(ds.task))
                heads.push_back(cat_reg ? HeadSpec::cat_reg(n, losses::BinScheme{cfg.model.bins, -1.0, 1.0})
                                        : HeadSpec::regression(n));
            break;
        case Task::HeadPose:
            for (const auto& n : data::target_names(ds.task))
                heads.push_back(cat_reg ? HeadSpec::cat_reg(n, losses::BinScheme{cfg.model.pose_bins, -kPoseScale, kPoseScale})
                                        : HeadSpec::regression(n));
            break;
    }
    for (auto& h : heads) {
        h.dropout = cfg.model.dropout;
        h.label_smoothing = h.kind == HeadKind::Classifier ? cfg.model.label_smoothing : 0.0;
    }
    return heads;
}

Evaluation evaluate(const ModelAssembly& full, const data::LabeledDataset& ds) {
    const Task task = task_of(full, ds);
    const ModelAssembly m = model::strip_ssh(full);
    Evaluation ev;
    const std::size_t N = ds.records.size();
    if (N == 0) throw std::invalid_argument("evaluate: empty dataset");
    const auto& heads = m.supervised;
    ev.regressions.assign(heads.size(), {});
    for (std::size_t start = 0; start < N; start += kEvalChunk) {
        const std::size_t end = std::min(N, start + kEvalChunk);
        std::vector<const Image*> imgs;
        for (std::size_t i = start; i < end; ++i) imgs.push_back(&ds.records[i].image);
        const auto out = m.forward(to_tensor(imgs), {.training = false, .rng = nullptr, .supervised = true, .ssh = false});
        for (int n = 0; n < static_cast<int>(end - start); ++n) {
            if (data::is_categorical(task)) {
                ev.predictions.push_back(argmax(out.sh[0].row(n)));
            } else {
                for (std::size_t h = 0; h < heads.size(); ++h)
                    ev.regressions[h].push_back(regress(heads[h].spec, out.sh[h], n, task));
            }
        }
    }
    if (data::is_categorical(task)) {
        std::vector<int> truth;
        for (const auto& r : ds.records) truth.push_back(*r.label);
        ev.confusion = metrics::confusion(truth, ev.predictions, ds.num_classes);
        ev.metrics[key("label", "accuracy")] = metrics::accuracy(*ev.confusion);
        ev.metrics[key("label", "macro_f1")] = metrics::macro_f1(*ev.confusion);
        ev.score = ev.metrics[key("label", "accuracy")];
    } else if (task == Task::ValenceArousal) {
        double mean = 0.0;
        for (std::size_t h = 0; h < heads.size(); ++h) {
            std::vector<double> truth;
            for (const auto& r : ds.records) truth.push_back(r.targets[h]);
            const double e = metrics::rmse(ev.regressions[h], truth);
            ev.metrics[key(heads[h].spec.name, "rmse")] = e;
            mean += e / static_cast<double>(heads.size());
        }
        ev.metrics[key("all", "rmse")] = mean;
        ev.score = -mean;
    } else {
        std::vector<std::array<double, 3>> pred, truth;
        for (std::size_t i = 0; i < N; ++i) {
            pred.push_back({ev.regressions[0][i], ev.regressions[1][i], ev.regressions[2][i]});
            truth.push_back({ds.records[i].targets[0], ds.records[i].targets[1], ds.records[i].targets[2]});
        }
        const auto mae = metrics::euler_mae(pred, truth);
        ev.metrics[key("yaw", "mae")] = mae.yaw;
        ev.metrics[key("pitch", "mae")] = mae.pitch;
        ev.metrics[key("roll", "mae")] = mae.roll;
        ev.metrics[key("all", "mae")] = mae.average;
        ev.score = -mae.average;
    }
    return ev;
}

MetricMap evaluate_ssh(const ModelAssembly& m, const data::LabeledDataset& ds, const RunConfig& cfg,
                       std::uint64_t seed) {
    MetricMap out;
    if (!m.has_ssh()) return out;
    const std::size_t N = ds.records.size();
    std::int64_t puzzle_hits = 0, puzzle_total = 0, rot_hits = 0;
    double dec_sum = 0.0;
    PretextKind kind = cfg.pretext.kind;
    for (std::size_t start = 0; start < N; start += kEvalChunk) {
        const std::size_t end = std::min(N, start + kEvalChunk);
        std::vector<SampleOut> samples;
        for (std::size_t i = start; i < end; ++i) {
            Rng rng(derive_seed(seed, {kSshValTag, i}));
            samples.push_back(apply_pretext(ds.records[i].image, kind, cfg, rng));
        }
        std::vector<const Image*> imgs;
        for (const auto& s : samples) imgs.push_back(&s.input);
        const auto o = m.forward(to_tensor(imgs), {.training = false, .rng = nullptr, .supervised = false, .ssh = true});
        for (std::size_t n = 0; n < samples.size(); ++n) {
            const int ni = static_cast<int>(n);
            for (std::size_t j = 0; j < o.puzzle.size(); ++j) {
                puzzle_hits += argmax(o.puzzle[j].row(ni)) == samples[n].puzzle_labels[j];
                ++puzzle_total;
            }
            if (!o.rotation.empty()) rot_hits += argmax(o.rotation.row(ni)) == samples[n].rotation;
        }
        if (m.decoder) {
            std::vector<const Image*> origs;
            for (const auto& s : samples) origs.push_back(&s.original);
            const auto orig = to_tensor(origs);
            dec_sum += losses::pixel_rmse_batch(o.reconstruction(), orig).value * static_cast<double>(samples.size());
        }
    }
    if (m.puzzle) out[key("puzzle", "accuracy")] = static_cast<double>(puzzle_hits) / static_cast<double>(puzzle_total);
    if (m.rotation) out[key("rotation", "accuracy")] = static_cast<double>(rot_hits) / static_cast<double>(N);
    if (m.decoder) out[key("decoder", "rmse")] = dec_sum / static_cast<double>(N);
    return out;
}

// -- teacher ---------------------------------------------------------------------------

TeacherFeatures::TeacherFeatures(std::shared_ptr<const model::Backbone> backbone, bool cache)
    : backbone_(std::move(backbone)), cache_(cache) {}

Tensor TeacherFeatures::features(const Tensor& images) {
    const int N = images.dim(0);
    const int D = backbone_->feature_dim();
    Tensor out({N, D});
    std::vector<int> missing;
    std::vector<std::uint64_t> keys(N);
    for (int n = 0; n < N; ++n) {
        const auto row = images.row(n);
        keys[n] = fnv1a(row.data(), row.size());
        auto it = cache_ ? store_.find(keys[n]) : store_.end();
        if (it != store_.end()) {
            std::copy(it->second.begin(), it->second.end(), out.row(n).begin());
            ++hits_;
        } else {
            missing.push_back(n);
            ++misses_;
        }
    }
    if (missing.empty()) return out;
    std::vector<int> shape = images.shape;
    shape[0] = static_cast<int>(missing.size());
    Tensor sub(shape);
    for (std::size_t i = 0; i < missing.size(); ++i)
        std::copy(images.row(missing[i]).begin(), images.row(missing[i]).end(), sub.row(static_cast<int>(i)).begin());
    const auto f = backbone_->forward(sub);
    for (std::size_t i = 0; i < missing.size(); ++i) {
        const auto r = f.pooled.row(static_cast<int>(i));
        std::copy(r.begin(), r.end(), out.row(missing[i]).begin());
        if (cache_) store_[keys[missing[i]]] = std::vector<float>(r.begin(), r.end());
    }
    return out;
}

// -- training session ------------------------------------------------------------------

namespace {

struct SessionSpec {
    PretextKind input_pretext = PretextKind::None;  ///< transform applied to training inputs
    bool supervised = true;                          ///< SH present and trained
    bool ssh = false;                                ///< SSHs present and trained
    bool focal_puzzle = false;
    bool perceptual = false;
    std::string protocol;
};

class Session {
public:
    Session(const RunConfig& cfg, const DataSplit& data, std::uint64_t seed, SessionSpec spec, const Options& options,
            fs::path out_dir)
        : cfg_(cfg), data_(data), seed_(seed), spec_(std::move(spec)), options_(options), out_dir_(std::move(out_dir)) {}

    /// Builds a fresh model. `backbone` (optional) replaces the new backbone;
    /// `sh_source` (optional) supplies supervised head parameters.
    void build(std::shared_ptr<model::Backbone> backbone = nullptr, const ModelAssembly* sh_source = nullptr) {
        std::vector<HeadSpec> heads;
        if (spec_.supervised) heads = supervised_heads(cfg_, data_.train);
        if (spec_.ssh) {
            if (has_puzzle(cfg_.pretext.kind)) {
                auto h = HeadSpec::puzzle(cfg_.pretext.grid);
                h.hidden = cfg_.model.ssh_hidden;
                heads.push_back(h);
            }
            if (has_rotation(cfg_.pretext.kind)) {
                auto h = HeadSpec::rotation();
                h.hidden = cfg_.model.ssh_hidden;
                heads.push_back(h);
            }
            if (config::is_inpaint(cfg_.pretext.kind)) heads.push_back(HeadSpec::decoder());
        }
        if (!backbone) {
            model::BackboneConfig bc;
            bc.resolution = cfg_.data.image_size;
            bc.channels = cfg_.model.channels;
            bc.convs_per_block = cfg_.model.convs_per_block;
            bc.seed = derive_seed(seed_, {kBackboneTag});
            backbone = std::make_shared<model::Backbone>(bc);
        }
        head_seed_ = derive_seed(seed_, {kHeadTag});
        model_ = model::assemble(backbone, heads, head_seed_);
        if (sh_source) {
            for (auto& h : model_.supervised)
                for (const auto& src : sh_source->supervised)
                    if (src.spec == h.spec) {
                        h.fc->weight.value = src.fc->weight.value;
                        h.fc->bias.value = src.fc->bias.value;
                    }
        }
        if (spec_.supervised && data::is_categorical(data_.train.task)) {
            const auto counts = data_.train.class_counts();
            if (cfg_.loss.class_weights == "inverse")
                class_weights_ = data::class_weights(counts);
            else
                class_weights_ = losses::ClassWeights::unit(data_.train.num_classes);
        }
        optimizer_ = std::make_unique<optim::Optimizer>(cfg_.optim.optimizer, model_.params());
        lambda_dec_ = cfg_.loss.lambda_dec;
        lambda_dec_set_ = cfg_.loss.lambda_dec_mode == "fixed";
    }

    void set_teacher(std::shared_ptr<model::Backbone> teacher) {
        teacher_backbone_ = std::move(teacher);
        teacher_ = std::make_unique<TeacherFeatures>(teacher_backbone_, true);
    }

    SeedResult run() {
        SeedResult res;
        res.seed = seed_;
        const int bs = cfg_.effective_batch_size();
        const std::size_t n = data_.train.records.size();
        res.steps_per_epoch = static_cast<int>((n + bs - 1) / bs);
        int start_epoch = 0;
        best_score_ = -std::numeric_limits<double>::infinity();
        best_epoch_ = 0;
        std::vector<FloatBuffer> teacher_snapshot;
        std::vector<nn::Param*> teacher_params;
        if (teacher_backbone_) {
            teacher_params = teacher_backbone_->params();
            teacher_snapshot = snapshot(teacher_params);
        }
        if (cfg_.resume && !out_dir_.empty() && fs::exists(out_dir_ / "last" / "manifest.json"))
            start_epoch = resume(res);

        if (cfg_.epochs == 0) {
            const auto val = validate();
            best_score_ = val.score;
            best_val_ = val.metrics;
            record_val(res, 0, val.metrics);
            best_params_ = snapshot(model_);
        }
        int since_best = start_epoch - best_epoch_;
        for (int epoch = start_epoch; epoch < cfg_.epochs; ++epoch) {
            const double lr = optim::step_decay_lr(epoch, cfg_.effective_lr(), cfg_.optim.decay);
            auto train_rows = train_epoch(epoch, lr);
            for (auto& r : train_rows) res.history.push_back(r);
            const auto val = validate();
            MetricMap val_metrics = val.metrics;
            if (spec_.ssh && cfg_.ssh_val) {
                const auto s = evaluate_ssh(model_, data_.val, cfg_, seed_);
                val_metrics.insert(s.begin(), s.end());
            }
            if (cfg_.eval_train && spec_.supervised) {
                const auto tr = evaluate(model_, data_.train);
                for (const auto& [k, v] : tr.metrics) push(res, epoch + 1, "train_clean", k, v);
            }
            const double score = spec_.supervised ? val.score : ssh_score(val_metrics);
            std::vector<MetricRow> epoch_rows = std::move(train_rows);
            const auto before = res.history.size();
            record_val(res, epoch + 1, val_metrics);
            epoch_rows.insert(epoch_rows.end(), res.history.begin() + static_cast<std::ptrdiff_t>(before), res.history.end());
            res.epochs_run = epoch + 1;
            if (score > best_score_) {
                best_score_ = score;
                best_epoch_ = epoch + 1;
                best_val_ = val_metrics;
                best_params_ = snapshot(model_);
                since_best = 0;
                if (!out_dir_.empty()) save(out_dir_ / "best", epoch + 1, best_val_, false, res);
            } else {
                ++since_best;
            }
            if (!out_dir_.empty()) {
                report::append_metrics(out_dir_ / "metrics.csv", epoch_rows);
                save(out_dir_ / "last", epoch + 1, val_metrics, true, res);
            }
            if (options_.on_epoch) options_.on_epoch(seed_, epoch + 1, val_metrics);
            if (teacher_backbone_ && !same_values(teacher_params, teacher_snapshot))
                throw InvariantError("teacher parameters changed during student training");
            if (cfg_.patience > 0 && since_best >= cfg_.patience) break;
        }
        if (!best_params_.empty()) restore(model_, best_params_);
        res.best_epoch = best_epoch_;
        res.best_score = best_score_;
        res.final_val = best_val_;
        if (spec_.supervised) res.final_train = evaluate(model_, data_.train).metrics;
        for (double th : cfg_.thresholds) {
            res.steps_to[th] = steps_to_threshold(res.series("val", "label", "accuracy"), th, res.steps_per_epoch);
            res.ssh_steps_to[th] = steps_to_threshold(res.series("train", "ssh", "accuracy"), th, res.steps_per_epoch);
        }
        if (!out_dir_.empty()) {
            save(out_dir_ / "best", best_epoch_, best_val_, false, res);
            res.checkpoint = out_dir_ / "best";
        }
        res.model = std::move(model_);
        return res;
    }

    ModelAssembly& model() { return model_; }

private:
    static double ssh_score(const MetricMap& m) {
        double s = 0.0;
        int k = 0;
        for (const char* name : {"puzzle/accuracy", "rotation/accuracy"})
            if (auto it = m.find(name); it != m.end()) {
                s += it->second;
                ++k;
            }
        if (k > 0) return s / k;
        if (auto it = m.find("decoder/rmse"); it != m.end()) return -it->second;
        return 0.0;
    }

    static void push(SeedResult& res, int epoch, const std::string& split, const std::string& k, double v) {
        const auto slash = k.find('/');
        res.history.push_back({epoch, split, k.substr(0, slash), k.substr(slash + 1), v});
    }

    void record_val(SeedResult& res, int epoch, const MetricMap& m) {
        for (const auto& [k, v] : m) push(res, epoch, "val", k, v);
    }

    Evaluation validate() {
        if (!spec_.supervised) return {};
        const long before = pretext::call_counters().total();
        auto ev = evaluate(model_, data_.val);
        if (options_.check_validation_path && pretext::call_counters().total() != before)
            throw InvariantError("validation applied a pretext transform");
        return ev;
    }

    SampleOut make_sample(std::size_t idx, int epoch) const {
        const auto& rec = data_.train.records[idx];
        Rng aug_rng(derive_seed(seed_, {kAugmentTag, static_cast<std::uint64_t>(epoch), idx}));
        pretext::AugmentOptions ao;
        ao.level = cfg_.data.augment;
        ao.allow_rotation = !has_rotation(spec_.input_pretext);
        ao.allow_cutout = cfg_.data.cutout && !config::is_inpaint(spec_.input_pretext);
        Image img = pretext::augment(rec.image, ao, aug_rng);
        Rng pre_rng(derive_seed(seed_, {kPretextTag, static_cast<std::uint64_t>(epoch), idx}));
        return apply_pretext(std::move(img), spec_.input_pretext, cfg_, pre_rng);
    }

    Batch make_batch(const std::vector<std::size_t>& idx, int epoch) const {
        Batch b;
        b.indices = idx;
        std::vector<SampleOut> samples;
        samples.reserve(idx.size());
        for (auto i : idx) samples.push_back(make_sample(i, epoch));
        std::vector<const Image*> imgs;
        for (const auto& s : samples) imgs.push_back(&s.input);
        b.images = to_tensor(imgs);
        const auto& recs = data_.train.records;
        if (spec_.supervised) {
            if (data::is_categorical(data_.train.task)) {
                for (auto i : idx) b.labels.push_back(*recs[i].label);
            } else {
                const std::size_t h = recs[idx.front()].targets.size();
                b.targets.assign(h, {});
                for (auto i : idx)
                    for (std::size_t k = 0; k < h; ++k) b.targets[k].push_back(recs[i].targets[k]);
            }
        }
        if (!samples.front().puzzle_labels.empty()) {
            const std::size_t P = samples.front().puzzle_labels.size();
            b.puzzle_labels.assign(P, {});
            b.puzzle_weights.assign(P, {});
            for (const auto& s : samples)
                for (std::size_t j = 0; j < P; ++j) {
                    b.puzzle_labels[j].push_back(s.puzzle_labels[j]);
                    b.puzzle_weights[j].push_back(s.puzzle_weights[j] * cfg_.loss.lambda_ssh);
                }
        }
        if (samples.front().rotation >= 0)
            for (const auto& s : samples) b.rotation_labels.push_back(s.rotation);
        if (config::is_inpaint(spec_.input_pretext)) {
            std::vector<const Image*> origs, masks;
            for (const auto& s : samples) {
                origs.push_back(&s.original);
                masks.push_back(&s.mask);
            }
            b.originals = to_tensor(origs);
            b.masks = masks_to_tensor(masks);
        }
        return b;
    }

    static Tensor to_grad(const std::vector<double>& g, const std::vector<int>& shape) {
        Tensor t(shape);
        for (std::size_t i = 0; i < g.size(); ++i) t.data[i] = static_cast<float>(g[i]);
        return t;
    }

    std::vector<MetricRow> train_epoch(int epoch, double lr) {
        const std::size_t n = data_.train.records.size();
        const int bs = cfg_.effective_batch_size();
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng(derive_seed(seed_, {kShuffleTag, static_cast<std::uint64_t>(epoch)}));
        shuffle_rng.shuffle(order.begin(), order.end());

        std::map<std::string, double> loss_sum;
        std::int64_t sh_hits = 0, sh_total = 0, puzzle_hits = 0, puzzle_total = 0, rot_hits = 0, rot_total = 0;
        int batches = 0;
        const double lsl = cfg_.loss.lambda_sl;
        for (std::size_t start = 0, b = 0; start < n; start += bs, ++b) {
            std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + bs)));
            const Batch batch = make_batch(idx, epoch);
            const int N = static_cast<int>(idx.size());
            Rng drop_rng(derive_seed(seed_, {kDropoutTag, static_cast<std::uint64_t>(epoch), b}));
            const auto out = model_.forward(batch.images, {.training = true, .rng = &drop_rng,
                                                           .supervised = spec_.supervised, .ssh = spec_.ssh});
            model::OutputGrads grads;
            double total = 0.0;
            double sl_value = 0.0;

            if (spec_.supervised) {
                grads.sh.resize(model_.supervised.size());
                for (std::size_t h = 0; h < model_.supervised.size(); ++h) {
                    const auto& hs = model_.supervised[h].spec;
                    const Tensor& z = out.sh[h];
                    std::vector<double> g;
                    double v = 0.0;
                    if (hs.kind == HeadKind::Classifier) {
                        auto l = losses::ce_logits(z.data, hs.classes, batch.labels,
                                                   class_weights_ ? &*class_weights_ : nullptr, hs.label_smoothing);
                        v = l.value;
                        g = std::move(l.dlogits);
                        for (int i = 0; i < N; ++i) sh_hits += argmax(z.row(i)) == batch.labels[i];
                        sh_total += N;
                    } else if (hs.kind == HeadKind::CatReg) {
                        auto l = losses::cat_reg_logits(z.data, batch.targets[h], hs.scheme, cfg_.loss.cat_reg_alpha);
                        v = l.value;
                        g = std::move(l.dlogits);
                        append_loss(loss_sum, hs.name + "/categorical", lsl * l.categorical);
                        append_loss(loss_sum, hs.name + "/regression", lsl * l.regression);
                    } else {
                        std::vector<double> t = batch.targets[h];
                        for (double& x : t) x /= target_scale(data_.train.task);
                        auto l = losses::rmse(z.data, t);
                        v = l.value;
                        g = std::move(l.dlogits);
                    }
                    for (double& x : g) x *= lsl;
                    grads.sh[h] = to_grad(g, z.shape);
                    append_loss(loss_sum, hs.name + "/loss", lsl * v);
                    sl_value += lsl * v;
                }
                total += sl_value;
            }
            if (spec_.ssh && model_.puzzle) {
                const int P = static_cast<int>(out.puzzle.size());
                const int K = P;
                double sum = 0.0;
                for (int j = 0; j < P; ++j) {
                    const Tensor& z = out.puzzle[j];
                    auto l = spec_.focal_puzzle
                                 ? losses::focal_logits(z.data, K, batch.puzzle_labels[j], cfg_.loss.focal_alpha,
                                                        cfg_.loss.focal_gamma, batch.puzzle_weights[j])
                                 : losses::ce_logits(z.data, K, batch.puzzle_labels[j], nullptr, 0.0,
                                                     batch.puzzle_weights[j]);
                    sum += l.value;
                    grads.puzzle.push_back(to_grad(l.dlogits, z.shape));
                    for (int i = 0; i < N; ++i) puzzle_hits += argmax(z.row(i)) == batch.puzzle_labels[j][i];
                    puzzle_total += N;
                }
                append_loss(loss_sum, "puzzle/loss", sum);
                total += sum;
            }
            if (spec_.ssh && model_.rotation) {
                std::vector<double> scale(static_cast<std::size_t>(N), cfg_.loss.lambda_rotation);
                auto l = losses::ce_logits(out.rotation.data, pretext::kRotationClasses, batch.rotation_labels, nullptr,
                                           0.0, scale);
                grads.rotation = to_grad(l.dlogits, out.rotation.shape);
                for (int i = 0; i < N; ++i) rot_hits += argmax(out.rotation.row(i)) == batch.rotation_labels[i];
                rot_total += N;
                append_loss(loss_sum, "rotation/loss", l.value);
                total += l.value;
            }
            if (spec_.ssh && model_.decoder) {
                const Tensor& rec = out.reconstruction();
                losses::BatchLoss raw;
                std::optional<model::BackboneForward> tf;
                if (spec_.perceptual) {
                    tf = teacher_backbone_->forward(rec);
                    const Tensor orig_feat = teacher_->features(batch.originals);
                    raw = losses::perceptual_batch(tf->pooled, orig_feat, 1.0);
                } else {
                    raw = losses::pixel_rmse_batch(rec, batch.originals, cfg_.pretext.pixel_mask ? &batch.masks : nullptr);
                }
                if (!lambda_dec_set_) {
                    lambda_dec_ = raw.value > 0.0 && sl_value > 0.0 ? sl_value / raw.value : 1.0;
                    lambda_dec_set_ = true;
                }
                for (double& x : raw.dlogits) x *= lambda_dec_;
                Tensor drec;
                if (spec_.perceptual) {
                    const Tensor dfeat = to_grad(raw.dlogits, tf->pooled.shape);
                    drec = teacher_backbone_->backward(*tf, dfeat, {}, true, false);
                } else {
                    drec = to_grad(raw.dlogits, rec.shape);
                }
                grads.reconstruction = std::move(drec);
                append_loss(loss_sum, "decoder/loss", lambda_dec_ * raw.value);
                total += lambda_dec_ * raw.value;
            }
            append_loss(loss_sum, "all/loss", total);
            model_.zero_grad();
            model_.backward(out, grads);
            optimizer_->step(lr);
            ++batches;
        }
        std::vector<MetricRow> rows;
        const int e = epoch + 1;
        for (const auto& [k, v] : loss_sum) {
            const auto slash = k.find('/');
            rows.push_back({e, "train", k.substr(0, slash), k.substr(slash + 1), v / batches});
        }
        if (sh_total > 0) rows.push_back({e, "train", "label", "accuracy", static_cast<double>(sh_hits) / sh_total});
        double ssh_acc = 0.0;
        int ssh_k = 0;
        if (puzzle_total > 0) {
            const double a = static_cast<double>(puzzle_hits) / puzzle_total;
            rows.push_back({e, "train", "puzzle", "accuracy", a});
            ssh_acc += a;
            ++ssh_k;
        }
        if (rot_total > 0) {
            const double a = static_cast<double>(rot_hits) / rot_total;
            rows.push_back({e, "train", "rotation", "accuracy", a});
            ssh_acc += a;
            ++ssh_k;
        }
        if (ssh_k > 0) rows.push_back({e, "train", "ssh", "accuracy", ssh_acc / ssh_k});
        if (model_.decoder) rows.push_back({e, "train", "decoder", "lambda", lambda_dec_});
        rows.push_back({e, "train", "all", "lr", lr});
        rows.push_back({e, "train", "all", "steps", static_cast<double>(optimizer_->steps())});
        return rows;
    }

    checkpoint::Meta meta(int epoch, const MetricMap& metrics) const {
        checkpoint::Meta m;
        m.task = data_.train.task;
        m.num_classes = data_.train.num_classes;
        m.class_names = data_.train.class_names;
        m.head_seed = head_seed_;
        m.epoch = epoch;
        m.metrics = metrics;
        m.protocol = spec_.protocol;
        return m;
    }

    void save(const fs::path& dir, int epoch, const MetricMap& metrics, bool with_state, const SeedResult& res) {
        auto m = meta(epoch, metrics);
        if (with_state) {
            json st;
            st["epoch"] = epoch;
            st["best_epoch"] = best_epoch_;
            st["best_score"] = best_score_;
            st["best_val"] = best_val_;
            st["lambda_dec"] = lambda_dec_;
            st["lambda_dec_set"] = lambda_dec_set_;
            json hist = json::array();
            for (const auto& r : res.history) hist.push_back({r.epoch, r.split, r.head, r.metric, r.value});
            st["history"] = hist;
            m.trainer_state = st.dump();
        }
        checkpoint::save(dir, model_, m, with_state ? optimizer_.get() : nullptr);
    }

    int resume(SeedResult& res) {
        auto last = checkpoint::load(out_dir_ / "last");
        if (last.model.head_specs() != model_.head_specs())
            throw ConfigError("cannot resume: checkpoint heads differ from the configured model");
        restore(model_, snapshot(last.model));
        checkpoint::load_optimizer(out_dir_ / "last", *optimizer_);
        const json st = json::parse(last.meta.trainer_state);
        best_epoch_ = st.at("best_epoch").get<int>();
        best_score_ = st.at("best_score").get<double>();
        best_val_ = st.at("best_val").get<MetricMap>();
        lambda_dec_ = st.at("lambda_dec").get<double>();
        lambda_dec_set_ = st.at("lambda_dec_set").get<bool>();
        for (const auto& r : st.at("history"))
            res.history.push_back({r[0].get<int>(), r[1].get<std::string>(), r[2].get<std::string>(),
                                   r[3].get<std::string>(), r[4].get<double>()});
        if (best_epoch_ > 0) {
            auto best = checkpoint::load(out_dir_ / "best");
            best_params_ = snapshot(best.model);
        }
        res.epochs_run = st.at("epoch").get<int>();
        return res.epochs_run;
    }

    const RunConfig& cfg_;
    const DataSplit& data_;
    std::uint64_t seed_;
    SessionSpec spec_;
    const Options& options_;
    fs::path out_dir_;

    ModelAssembly model_;
    std::uint64_t head_seed_ = 0;
    std::unique_ptr<optim::Optimizer> optimizer_;
    std::optional<losses::ClassWeights> class_weights_;
    double lambda_dec_ = 1.0;
    bool lambda_dec_set_ = true;
    std::shared_ptr<model::Backbone> teacher_backbone_;
    std::unique_ptr<TeacherFeatures> teacher_;

    double best_score_ = 0.0;
    int best_epoch_ = 0;
    MetricMap best_val_;
    std::vector<FloatBuffer> best_params_;
};

fs::path seed_dir(const RunConfig& cfg, std::uint64_t seed) {
    if (cfg.output.empty()) return {};
    return fs::path(cfg.output) / ("seed_" + std::to_string(seed));
}

RunResult finish(Protocol p, std::vector<SeedResult> seeds) {
    RunResult r;
    r.protocol = p;
    r.seeds = std::move(seeds);
    r.best = best_of_seeds(r.seeds);
    return r;
}

void require_supervised_labels(const DataSplit& data) {
    if (data.train.empty()) throw SchemaError("training set is empty");
    data.train.validate();
}

}  // namespace

// -- protocols ----------------------------------------------------------------------------

RunResult train_sl(const RunConfig& cfg, const DataSplit& data, const Options& options) {
    cfg.validate();
    require_supervised_labels(data);
    std::vector<SeedResult> out;
    for (auto seed : cfg.seeds) {
        Session s(cfg, data, seed, {.input_pretext = PretextKind::None, .protocol = "sl"}, options, seed_dir(cfg, seed));
        s.build();
        out.push_back(s.run());
    }
    return finish(Protocol::Sl, std::move(out));
}

RunResult pretext_without_ssh(const RunConfig& cfg, const DataSplit& data, const Options& options) {
    cfg.validate();
    require_supervised_labels(data);
    std::vector<SeedResult> out;
    for (auto seed : cfg.seeds) {
        Session s(cfg, data, seed, {.input_pretext = cfg.pretext.kind, .protocol = "pretext_without_ssh"}, options,
                  seed_dir(cfg, seed));
        s.build();
        out.push_back(s.run());
    }
    return finish(Protocol::PretextWithoutSsh, std::move(out));
}

RunResult train_hmtl(const RunConfig& cfg, const DataSplit& data, const Options& options) {
    cfg.validate();
    require_supervised_labels(data);
    if (cfg.loss.puzzle_loss == "focal")
        throw ConfigError("hmtl trains puzzle heads with cross-entropy, not focal loss");
    std::vector<SeedResult> out;
    for (auto seed : cfg.seeds) {
        Session s(cfg, data, seed,
                  {.input_pretext = cfg.pretext.kind, .supervised = true, .ssh = true, .protocol = "hmtl"}, options,
                  seed_dir(cfg, seed));
        s.build();
        out.push_back(s.run());
    }
    return finish(Protocol::Hmtl, std::move(out));
}

RunResult pretrain_ssl(const RunConfig& cfg, const DataSplit& data, const Options& options) {
    cfg.validate();
    if (cfg.pretext.kind == PretextKind::None || cfg.pretext.kind == PretextKind::InpaintPl)
        throw ConfigError("ssl_pretrain needs pretext.kind puzzle, rotation, puzzle_rotation or inpaint_pwl");
    const bool focal = cfg.loss.puzzle_loss != "ce";
    std::vector<SeedResult> out;
    for (auto seed : cfg.seeds) {
        Session s(cfg, data, seed,
                  {.input_pretext = cfg.pretext.kind, .supervised = false, .ssh = true, .focal_puzzle = focal,
                   .protocol = "ssl_pretrain"},
                  options, seed_dir(cfg, seed));
        s.build();
        if (!s.model().supervised.empty()) throw ConfigError("ssl_pretrain takes no supervised head");
        out.push_back(s.run());
    }
    return finish(Protocol::SslPretrain, std::move(out));
}

RunResult fine_tune(const RunConfig& cfg, const DataSplit& data, const Options& options) {
    cfg.validate();
    require_supervised_labels(data);
    std::vector<SeedResult> out;
    for (auto seed : cfg.seeds) {
        auto ck = checkpoint::load(cfg.checkpoint);
        Session s(cfg, data, seed, {.input_pretext = PretextKind::None, .protocol = "fine_tune"}, options,
                  seed_dir(cfg, seed));
        s.build(ck.model.backbone, &ck.model);
        out.push_back(s.run());
    }
    return finish(Protocol::FineTune, std::move(out));
}

RunResult train_inpaint_pl_two_stage(const RunConfig& cfg, const DataSplit& data, const Options& options) {
    cfg.validate();
    require_supervised_labels(data);
    std::vector<SeedResult> out;
    for (auto seed : cfg.seeds) {
        std::shared_ptr<model::Backbone> teacher;
        if (!cfg.teacher.empty()) {
            if (!fs::exists(fs::path(cfg.teacher) / "manifest.json"))
                throw ConfigError("teacher checkpoint not found at " + cfg.teacher);
            teacher = checkpoint::load(cfg.teacher).model.backbone;
        } else {
            RunConfig stage1 = cfg;
            stage1.protocol = Protocol::Sl;
            stage1.pretext.kind = PretextKind::None;
            stage1.data.cutout = false;
            stage1.epochs = cfg.effective_teacher_epochs();
            stage1.seeds = {seed};
            stage1.batch_size = cfg.batch_size > 0 ? cfg.batch_size : 64;
            stage1.output = cfg.output.empty() ? "" : (fs::path(cfg.output) / ("seed_" + std::to_string(seed)) / "teacher").string();
            auto t = train_sl(stage1, data, options);
            teacher = t.seeds.front().model.backbone;
        }
        Session s(cfg, data, seed,
                  {.input_pretext = PretextKind::InpaintPl, .supervised = true, .ssh = true, .perceptual = true,
                   .protocol = "hmtl_inpaint_pl_two_stage"},
                  options, seed_dir(cfg, seed));
        s.build();
        s.set_teacher(teacher);
        out.push_back(s.run());
    }
    return finish(Protocol::InpaintPlTwoStage, std::move(out));
}

namespace {

/// Classifier trained on frozen pooled features.
struct FeatureHead {
    std::unique_ptr<nn::Linear> hidden;
    nn::Linear out;

    FeatureHead(int D, int K, bool nonlinear, std::uint64_t seed)
        : hidden(nonlinear ? std::make_unique<nn::Linear>(D, 512, "frozen.hidden") : nullptr),
          out(nonlinear ? 512 : D, K, "frozen.out") {
        Rng rng(seed);
        if (hidden) hidden->init(rng);
        out.init(rng);
    }

    std::vector<nn::Param*> params() {
        std::vector<nn::Param*> p;
        if (hidden)
            for (auto* q : hidden->params()) p.push_back(q);
        for (auto* q : out.params()) p.push_back(q);
        return p;
    }

    Tensor logits(const Tensor& x, Tensor* h = nullptr) const {
        if (!hidden) return out.forward(x);
        Tensor a = nn::relu(hidden->forward(x));
        Tensor z = out.forward(a);
        if (h) *h = std::move(a);
        return z;
    }
};

Tensor pooled_features(const model::Backbone& bb, const data::LabeledDataset& ds) {
    const int N = static_cast<int>(ds.size());
    Tensor f({N, bb.feature_dim()});
    for (int start = 0; start < N; start += kEvalChunk) {
        const int end = std::min(N, start + kEvalChunk);
        std::vector<const Image*> imgs;
        for (int i = start; i < end; ++i) imgs.push_back(&ds.records[i].image);
        const auto out = bb.forward(to_tensor(imgs));
        std::copy(out.pooled.data.begin(), out.pooled.data.end(), f.row(start).begin());
    }
    return f;
}

Tensor gather_rows(const Tensor& t, const std::vector<std::size_t>& idx) {
    Tensor out({static_cast<int>(idx.size()), t.dim(1)});
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy(t.row(static_cast<int>(idx[i])).begin(), t.row(static_cast<int>(idx[i])).end(),
                  out.row(static_cast<int>(i)).begin());
    return out;
}

}  // namespace

RunResult frozen_eval(const RunConfig& cfg, const DataSplit& data, const Options& options) {
    cfg.validate();
    require_supervised_labels(data);
    if (!data::is_categorical(data.train.task)) throw ConfigError("frozen_eval supports categorical tasks");
    std::vector<SeedResult> out;
    for (auto seed : cfg.seeds) {
        auto ck = checkpoint::load(cfg.checkpoint);
        const auto backbone = ck.model.backbone;
        const auto bb_params = backbone->params();
        const auto bb_before = snapshot(bb_params);
        const Tensor train_f = pooled_features(*backbone, data.train);
        const Tensor val_f = pooled_features(*backbone, data.val);
        const int K = data.train.num_classes;
        FeatureHead head(backbone->feature_dim(), K, cfg.model.frozen_head == "nonlinear", derive_seed(seed, {kHeadTag}));
        optim::Optimizer opt(cfg.optim.optimizer, head.params());
        const auto weights = cfg.loss.class_weights == "inverse" ? data::class_weights(data.train.class_counts())
                                                                 : losses::ClassWeights::unit(K);
        std::vector<int> val_truth;
        for (const auto& r : data.val.records) val_truth.push_back(*r.label);

        SeedResult res;
        res.seed = seed;
        const int bs = cfg.effective_batch_size();
        const std::size_t n = data.train.size();
        res.steps_per_epoch = static_cast<int>((n + bs - 1) / bs);
        res.best_score = -std::numeric_limits<double>::infinity();
        std::vector<FloatBuffer> best;
        int since_best = 0;
        auto eval_val = [&]() {
            const Tensor z = head.logits(val_f);
            std::vector<int> pred;
            for (int i = 0; i < z.dim(0); ++i) pred.push_back(argmax(z.row(i)));
            const auto c = metrics::confusion(val_truth, pred, K);
            return MetricMap{{"label/accuracy", metrics::accuracy(c)}, {"label/macro_f1", metrics::macro_f1(c)}};
        };
        for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
            const double lr = optim::step_decay_lr(epoch, cfg.effective_lr(), cfg.optim.decay);
            std::vector<std::size_t> order(n);
            std::iota(order.begin(), order.end(), 0);
            Rng rng(derive_seed(seed, {kShuffleTag, static_cast<std::uint64_t>(epoch)}));
            rng.shuffle(order.begin(), order.end());
            double loss = 0.0;
            int batches = 0;
            for (std::size_t start = 0; start < n; start += bs) {
                std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                             order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + bs)));
                const Tensor x = gather_rows(train_f, idx);
                std::vector<int> y;
                for (auto i : idx) y.push_back(*data.train.records[i].label);
                Tensor h;
                const Tensor z = head.logits(x, &h);
                auto l = losses::ce_logits(z.data, K, y, &weights, 0.0);
                loss += l.value;
                ++batches;
                opt.zero_grad();
                Tensor dz(z.shape);
                for (std::size_t i = 0; i < dz.size(); ++i) dz.data[i] = static_cast<float>(l.dlogits[i]);
                if (head.hidden) {
                    Tensor dh = head.out.backward(h, dz, true);
                    head.hidden->backward(x, nn::relu_backward(h, dh), false);
                } else {
                    head.out.backward(x, dz, false);
                }
                opt.step(lr);
            }
            const auto val = eval_val();
            res.history.push_back({epoch + 1, "train", "label", "loss", loss / batches});
            for (const auto& [k, v] : val) {
                const auto slash = k.find('/');
                res.history.push_back({epoch + 1, "val", k.substr(0, slash), k.substr(slash + 1), v});
            }
            res.epochs_run = epoch + 1;
            const double score = val.at("label/accuracy");
            if (score > res.best_score) {
                res.best_score = score;
                res.best_epoch = epoch + 1;
                res.final_val = val;
                best = snapshot(head.params());
                since_best = 0;
            } else if (cfg.patience > 0 && ++since_best >= cfg.patience) {
                if (options.on_epoch) options.on_epoch(seed, epoch + 1, val);
                break;
            }
            if (options.on_epoch) options.on_epoch(seed, epoch + 1, val);
        }
        if (cfg.epochs == 0) {
            res.final_val = eval_val();
            res.best_score = res.final_val.at("label/accuracy");
        }
        if (!same_values(bb_params, bb_before)) throw InvariantError("frozen backbone parameters changed");
        for (double th : cfg.thresholds)
            res.steps_to[th] = steps_to_threshold(res.series("val", "label", "accuracy"), th, res.steps_per_epoch);
        if (!cfg.output.empty()) {
            const auto dir = seed_dir(cfg, seed);
            fs::create_directories(dir);
            report::append_metrics(dir / "metrics.csv", res.history);
        }
        res.model = model::strip_ssh(ck.model);
        res.model.supervised.clear();
        out.push_back(std::move(res));
    }
    return finish(Protocol::FrozenEval, std::move(out));
}

RunResult run(const RunConfig& cfg, const DataSplit& data, const Options& options) {
    switch (cfg.protocol) {
        case Protocol::Sl: return train_sl(cfg, data, options);
        case Protocol::SslPretrain: return pretrain_ssl(cfg, data, options);
        case Protocol::FrozenEval: return frozen_eval(cfg, data, options);
        case Protocol::FineTune: return fine_tune(cfg, data, options);
        case Protocol::Hmtl: return train_hmtl(cfg, data, options);
        case Protocol::InpaintPlTwoStage: return train_inpaint_pl_two_stage(cfg, data, options);
        case Protocol::PretextWithoutSsh: return pretext_without_ssh(cfg, data, options);
    }
    throw ConfigError("unknown protocol");
}

}  // namespace hmtl::train
