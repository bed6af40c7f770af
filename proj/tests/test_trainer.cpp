#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "hmtl/checkpoint.hpp"
#include "hmtl/config.hpp"
#include "hmtl/error.hpp"
#include "hmtl/pretext.hpp"
#include "hmtl/trainer.hpp"
#include "support.hpp"

using namespace hmtl;
using namespace hmtl::train;
using config::PretextKind;
using config::Protocol;
using config::RunConfig;
using hmtl::testing::TempDir;

namespace {

RunConfig tiny(Protocol p = Protocol::Sl) {
    RunConfig c;
    c.protocol = p;
    c.seeds = {0};
    c.epochs = 3;
    c.batch_size = 32;
    c.patience = 0;
    c.data.synth_n = 160;
    c.data.synth_val_n = 64;
    c.data.image_size = 16;
    c.data.num_classes = 4;
    c.data.augment = pretext::AugmentLevel::No;
    c.model.channels = {8, 16};
    return c;
}

std::vector<FloatBuffer> values(const model::ModelAssembly& m) {
    std::vector<FloatBuffer> v;
    for (auto* p : m.params()) v.push_back(p->value.data);
    return v;
}

data::LabeledDataset labelled(const std::vector<int>& counts) {
    data::LabeledDataset ds;
    ds.num_classes = static_cast<int>(counts.size());
    for (int k = 0; k < ds.num_classes; ++k) {
        ds.class_names.push_back("c" + std::to_string(k));
        for (int i = 0; i < counts[k]; ++i) {
            data::ImageRecord r;
            r.id = ds.class_names.back() + "_" + std::to_string(i);
            r.image = Image(2, 2, 3);
            r.label = k;
            ds.records.push_back(std::move(r));
        }
    }
    return ds;
}

// Linear separability of raw pixels: the perceptron terminates exactly
// when some hyperplane (a logistic model's decision boundary) fits the set.
bool linearly_separable(const data::LabeledDataset& ds) {
    const std::size_t d = ds.records.front().image.data().size();
    std::vector<double> w(d + 1, 0.0);
    for (int epoch = 0; epoch < 5000; ++epoch) {
        int errors = 0;
        for (const auto& r : ds.records) {
            const auto& x = r.image.data();
            double z = w[d];
            for (std::size_t j = 0; j < d; ++j) z += w[j] * x[j];
            const double y = *r.label == 1 ? 1.0 : -1.0;
            if (y * z <= 0.0) {
                ++errors;
                for (std::size_t j = 0; j < d; ++j) w[j] += y * x[j];
                w[d] += y;
            }
        }
        if (errors == 0) return true;
    }
    return false;
}

}  // namespace

TEST_CASE("subsample is stratified and deterministic") {
    const auto ds = labelled({100, 50});
    const auto s = subsample(ds, 0.2, 7);
    CHECK(s.class_counts() == std::vector<int>{20, 10});
    CHECK(subsample(ds, 0.2, 7).records == s.records);
    CHECK_FALSE(subsample(ds, 0.2, 8).records == s.records);
    CHECK(subsample(ds, 1.0, 7).records == ds.records);
    CHECK_THROWS_AS(subsample(ds, 0.0, 7), std::invalid_argument);
    CHECK_THROWS_AS(subsample(ds, 1.5, 7), std::invalid_argument);
    // round(0.2 * 2) = 0 leaves the class empty
    CHECK_THROWS_AS(subsample(labelled({100, 2}), 0.2, 7), std::invalid_argument);

    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<int> counts(rng.uniform_int(2, 6));
        for (int& c : counts) c = rng.uniform_int(5, 200);
        const double f = rng.uniform(0.2, 1.0);
        const auto sub = subsample(labelled(counts), f, trial);
        const auto got = sub.class_counts();
        for (std::size_t k = 0; k < counts.size(); ++k) CHECK(got[k] == std::lround(f * counts[k]));
        // no duplicates
        std::set<std::string> ids;
        for (const auto& r : sub.records) ids.insert(r.id);
        CHECK(ids.size() == sub.size());
    }
}

TEST_CASE("step decay examples") {
    const optim::DecaySchedule s{{10, 0.1}, {20, 0.1}};
    CHECK(optim::step_decay_lr(0, 1e-3, s) == 1e-3);
    CHECK(optim::step_decay_lr(25, 1e-3, s) == doctest::Approx(1e-5).epsilon(1e-12));
    CHECK(optim::step_decay_lr(100, 1e-3, {}) == 1e-3);
}

TEST_CASE("best of seeds picks the first maximum") {
    std::vector<SeedResult> r(1);
    r[0].best_score = -3;
    CHECK(best_of_seeds(r) == 0);
    Rng rng(4);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<SeedResult> s(rng.uniform_int(1, 6));
        for (auto& x : s) x.best_score = rng.uniform_int(0, 3) / 3.0;
        const auto b = best_of_seeds(s);
        for (std::size_t i = 0; i < s.size(); ++i) {
            CHECK(s[i].best_score <= s[b].best_score);
            if (i < b) CHECK(s[i].best_score < s[b].best_score);
        }
    }
    CHECK_THROWS(best_of_seeds({}));
}

TEST_CASE("steps-to-threshold bookkeeping is consistent") {
    CHECK(steps_to_threshold({0.2, 0.4, 0.6, 0.7}, 0.5, 10) == 30);
    CHECK(steps_to_threshold({0.2, 0.4}, 0.5, 10) == std::nullopt);
    Rng rng(5);
    for (int trial = 0; trial < 500; ++trial) {
        std::vector<double> v(rng.uniform_int(0, 12));
        for (double& x : v) x = rng.uniform();
        const double th = rng.uniform();
        const int spe = rng.uniform_int(1, 50);
        const auto s = steps_to_threshold(v, th, spe);
        for (std::size_t e = 1; e <= v.size(); ++e) {
            if (v[e - 1] >= th) {
                REQUIRE(s);
                CHECK(*s <= static_cast<std::int64_t>(e) * spe);
            }
        }
        if (s) {
            CHECK(*s % spe == 0);
            CHECK(v[*s / spe - 1] >= th);
        }
    }
}

TEST_CASE("training is deterministic per seed") {
    const auto cfg = tiny();
    const auto data = prepare_data(cfg);
    const auto a = train_sl(cfg, data);
    const auto b = train_sl(cfg, data);
    CHECK(a.seeds[0].history == b.seeds[0].history);
    CHECK(values(a.seeds[0].model) == values(b.seeds[0].model));
    auto other = cfg;
    other.seeds = {1};
    CHECK_FALSE(train_sl(other, data).seeds[0].history == a.seeds[0].history);
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
    auto cfg = tiny();
    const auto data = prepare_data(cfg);
    cfg.epochs = 0;
    const auto before = train_sl(cfg, data);
    cfg.epochs = 1;
    cfg.optim.lr = 0.0;
    const auto after = train_sl(cfg, data);
    CHECK(after.seeds[0].epochs_run == 1);
    CHECK(values(before.seeds[0].model) == values(after.seeds[0].model));
}

TEST_CASE("identity pretext without SSHs reproduces supervised training") {
    auto cfg = tiny();
    const auto data = prepare_data(cfg);
    const auto sl = train_sl(cfg, data);
    auto ab = cfg;
    ab.protocol = Protocol::PretextWithoutSsh;
    ab.pretext.kind = PretextKind::Puzzle;
    ab.pretext.identity = true;
    const auto id = pretext_without_ssh(ab, data);
    CHECK(id.seeds[0].history == sl.seeds[0].history);
    CHECK(values(id.seeds[0].model) == values(sl.seeds[0].model));

    ab.pretext.identity = false;
    const auto real = pretext_without_ssh(ab, data);
    CHECK_FALSE(real.seeds[0].history == sl.seeds[0].history);
    CHECK(real.seeds[0].steps_to.count(0.5) == 1);
}

TEST_CASE("validation never applies a pretext transform") {
    auto cfg = tiny(Protocol::Hmtl);
    cfg.pretext.kind = PretextKind::PuzzleRotation;
    cfg.epochs = 1;
    const auto data = prepare_data(cfg);
    const long before = pretext::call_counters().total();
    const auto r = train_hmtl(cfg, data);
    const long during = pretext::call_counters().total() - before;
    CHECK(during > 0);
    // SH evaluation alone leaves the counters untouched
    const long mark = pretext::call_counters().total();
    const auto ev = evaluate(r.seeds[0].model, data.val);
    CHECK(pretext::call_counters().total() == mark);
    CHECK(ev.metrics.at("label/accuracy") == r.seeds[0].final_val.at("label/accuracy"));
    CHECK(r.seeds[0].final_val.count("puzzle/accuracy") == 1);
    CHECK(r.seeds[0].final_val.count("rotation/accuracy") == 1);
}

TEST_CASE("HMTL with zero SSH weights matches pretext inputs without SSHs on the SH") {
    auto cfg = tiny(Protocol::Hmtl);
    cfg.pretext.kind = PretextKind::Puzzle;
    cfg.loss.lambda_ssh = 0.0;
    cfg.ssh_val = false;
    const auto data = prepare_data(cfg);
    const auto h = train_hmtl(cfg, data);
    auto ab = cfg;
    ab.protocol = Protocol::PretextWithoutSsh;
    const auto p = pretext_without_ssh(ab, data);
    CHECK(h.seeds[0].series("val", "label", "accuracy") == p.seeds[0].series("val", "label", "accuracy"));
    CHECK(h.seeds[0].series("train", "label", "loss") == p.seeds[0].series("train", "label", "loss"));
}

TEST_CASE("HMTL rejects focal puzzle loss") {
    auto cfg = tiny(Protocol::Hmtl);
    cfg.pretext.kind = PretextKind::Puzzle;
    cfg.loss.puzzle_loss = "focal";
    const auto data = prepare_data(cfg);
    CHECK_THROWS_AS(train_hmtl(cfg, data), ConfigError);
}

TEST_CASE("separable binary set is fitted") {
    auto cfg = tiny();
    cfg.data.num_classes = 2;
    cfg.data.synth_n = 200;
    cfg.data.image_size = 64;
    cfg.model.channels = {16, 32, 64, 128};
    cfg.batch_size = 16;
    cfg.epochs = 30;
    const auto data = prepare_data(cfg);
    REQUIRE(linearly_separable(data.train));
    const auto r = train_sl(cfg, data);
    CHECK(r.seeds[0].final_train.at("label/accuracy") >= 0.99);
}

TEST_CASE("rotation pre-training beats the majority baseline") {
    auto cfg = tiny(Protocol::SslPretrain);
    cfg.pretext.kind = PretextKind::Rotation;
    cfg.data.synth_n = 400;
    cfg.data.image_size = 32;
    cfg.model.channels = {8, 16, 32};
    cfg.epochs = 12;
    const auto data = prepare_data(cfg);
    const auto r = pretrain_ssl(cfg, data);
    CHECK(r.seeds[0].model.supervised.empty());
    CHECK(r.seeds[0].final_val.at("rotation/accuracy") > 1.0 / 8 + 0.2);
}

TEST_CASE("pre-train checkpoint, frozen evaluation and fine-tuning") {
    TempDir dir("protocols");
    auto cfg = tiny(Protocol::SslPretrain);
    cfg.pretext.kind = PretextKind::Puzzle;
    cfg.epochs = 2;
    cfg.output = (dir / "pre").string();
    const auto data = prepare_data(cfg);
    const auto pre = pretrain_ssl(cfg, data);
    const auto ck = pre.seeds[0].checkpoint;
    REQUIRE(std::filesystem::exists(ck / "manifest.json"));

    // round trip: loaded model reproduces the trained forward pass
    const auto loaded = checkpoint::load(ck);
    const Tensor x = to_tensor({&data.val.records[0].image, &data.val.records[1].image});
    const auto a = pre.seeds[0].model.forward(x), b = loaded.model.forward(x);
    for (std::size_t j = 0; j < a.puzzle.size(); ++j) CHECK(a.puzzle[j] == b.puzzle[j]);

    auto fz = tiny(Protocol::FrozenEval);
    fz.checkpoint = ck.string();
    fz.epochs = 2;
    const auto frozen = frozen_eval(fz, data);
    CHECK(values(checkpoint::load(ck).model) == values(loaded.model));
    CHECK(frozen.seeds[0].final_val.count("label/accuracy") == 1);

    auto sl = tiny();
    sl.output = (dir / "sl").string();
    const auto base = train_sl(sl, data);
    auto ft = tiny(Protocol::FineTune);
    ft.checkpoint = base.seeds[0].checkpoint.string();
    ft.epochs = 0;
    const auto zero = fine_tune(ft, data);
    const auto ev = evaluate(checkpoint::load(ft.checkpoint).model, data.val);
    CHECK(zero.seeds[0].final_val == ev.metrics);

    ft.epochs = 1;
    CHECK(fine_tune(ft, data).seeds[0].history == fine_tune(ft, data).seeds[0].history);
}

TEST_CASE("frozen evaluation of a random backbone stays near chance") {
    TempDir dir("random");
    auto cfg = tiny();
    cfg.data.num_classes = 8;
    cfg.data.synth_n = 320;
    cfg.data.synth_val_n = 160;
    cfg.epochs = 0;
    cfg.output = (dir / "init").string();
    const auto data = prepare_data(cfg);
    const auto init = train_sl(cfg, data);

    auto fz = tiny(Protocol::FrozenEval);
    fz.checkpoint = init.seeds[0].checkpoint.string();
    fz.model.frozen_head = "linear";
    fz.epochs = 3;
    const auto r = frozen_eval(fz, data);
    const double acc = r.seeds[0].final_val.at("label/accuracy");
    CHECK(acc >= 0.05);
    CHECK(acc <= 0.35);

    // shuffled-label control: the same head cannot do better than chance by much
    auto shuffled = data;
    Rng rng(1);
    std::vector<int> labels;
    for (const auto& rec : shuffled.train.records) labels.push_back(*rec.label);
    rng.shuffle(labels.begin(), labels.end());
    for (std::size_t i = 0; i < labels.size(); ++i) shuffled.train.records[i].label = labels[i];
    const double control = frozen_eval(fz, shuffled).seeds[0].final_val.at("label/accuracy");
    CHECK(control <= 0.35);
}

TEST_CASE("teacher feature cache returns identical features") {
    model::BackboneConfig bc;
    bc.resolution = 16;
    bc.channels = {4, 8};
    auto bb = std::make_shared<model::Backbone>(bc);
    Rng rng(2);
    const Tensor x = hmtl::testing::random_tensor({3, 3, 16, 16}, rng);
    TeacherFeatures cached(bb, true), plain(bb, false);
    const Tensor a = cached.features(x);
    const Tensor b = cached.features(x);
    CHECK(cached.hits() == 3);
    CHECK(cached.misses() == 3);
    CHECK(a == b);
    CHECK(plain.features(x) == a);
    CHECK(a == bb->forward(x).pooled);
}

TEST_CASE("two-stage perceptual in-painting keeps the teacher frozen") {
    auto cfg = tiny(Protocol::InpaintPlTwoStage);
    cfg.pretext.kind = PretextKind::InpaintPl;
    cfg.epochs = 1;
    cfg.teacher_epochs = 1;
    const auto data = prepare_data(cfg);
    const auto r = train_inpaint_pl_two_stage(cfg, data);  // throws InvariantError if the teacher moves
    CHECK(r.seeds[0].model.decoder != nullptr);
    CHECK(std::isfinite(r.seeds[0].series("train", "decoder", "loss").at(0)));

    cfg.teacher = "/nonexistent/teacher";
    CHECK_THROWS_AS(train_inpaint_pl_two_stage(cfg, data), ConfigError);
}

TEST_CASE("resume continues to the same history") {
    TempDir dir("resume");
    auto cfg = tiny();
    cfg.epochs = 4;
    cfg.output = (dir / "full").string();
    const auto data = prepare_data(cfg);
    const auto full = train_sl(cfg, data);

    auto part = cfg;
    part.output = (dir / "part").string();
    part.epochs = 2;
    train_sl(part, data);
    part.epochs = 4;
    part.resume = true;
    const auto resumed = train_sl(part, data);
    CHECK(resumed.seeds[0].history == full.seeds[0].history);
    CHECK(values(resumed.seeds[0].model) == values(full.seeds[0].model));
}

TEST_CASE("regression tasks train cat-reg heads") {
    auto cfg = tiny();
    cfg.data.task = data::Task::HeadPose;
    cfg.epochs = 1;
    const auto data = prepare_data(cfg);
    const auto heads = supervised_heads(cfg, data.train);
    REQUIRE(heads.size() == 3);
    CHECK(heads[0].kind == model::HeadKind::CatReg);
    CHECK(heads[0].classes == 66);
    const auto r = train_sl(cfg, data);
    CHECK(r.seeds[0].final_val.count("yaw/mae") == 1);
}
