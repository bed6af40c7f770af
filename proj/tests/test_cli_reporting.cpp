#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>
#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "hmtl/checkpoint.hpp"
#include "hmtl/cli.hpp"
#include "hmtl/config.hpp"
#include "hmtl/error.hpp"
#include "hmtl/metrics.hpp"
#include "hmtl/report.hpp"
#include "hmtl/trainer.hpp"
#include "support.hpp"

using namespace hmtl;
using hmtl::testing::TempDir;
namespace fs = std::filesystem;

namespace {

int run(std::vector<std::string> args) {
    args.insert(args.begin(), "hmtl");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    return cli::run_cli(argv);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

// Brute-force per-sample F1: walk the samples once per class.
std::vector<double> oracle_f1(const std::vector<int>& truth, const std::vector<int>& pred, int K) {
    std::vector<double> f(K, 0.0);
    for (int k = 0; k < K; ++k) {
        long tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < truth.size(); ++i) {
            if (pred[i] == k && truth[i] == k) ++tp;
            else if (pred[i] == k) ++fp;
            else if (truth[i] == k) ++fn;
        }
        if (tp + fp + fn > 0) f[k] = 2.0 * tp / static_cast<double>(2 * tp + fp + fn);
    }
    return f;
}

const char* kTinyConfig = R"(# small run for CLI tests
[data]
num_classes = 4
synth_n = 96
synth_val_n = 48
image_size = 16
augment = no

[model]
channels = 8, 16

[run]
seeds = 3
epochs = 2
batch_size = 32
patience = 0
)";

}  // namespace

TEST_CASE("macro F1 closed-form examples") {
    metrics::Confusion c(2);
    c.at(0, 0) = 5;
    c.at(0, 1) = 5;
    c.at(1, 0) = 5;
    c.at(1, 1) = 5;
    CHECK(metrics::per_class_f1(c) == std::vector<double>{0.5, 0.5});
    CHECK(metrics::macro_f1(c) == 0.5);
    CHECK(metrics::accuracy(c) == 0.5);

    metrics::Confusion d(3);
    for (int k = 0; k < 3; ++k) d.at(k, k) = 7;
    CHECK(metrics::macro_f1(d) == 1.0);

    // class 2 has no support and is never predicted: contributes 0
    metrics::Confusion z(3);
    z.at(0, 0) = 4;
    z.at(1, 1) = 4;
    CHECK(metrics::macro_f1(z) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));

    CHECK_THROWS_AS(metrics::macro_f1(metrics::Confusion(3)), std::invalid_argument);
    CHECK_THROWS_AS(metrics::macro_f1(metrics::Confusion(0)), std::invalid_argument);
}

TEST_CASE("classification metrics agree with per-sample oracles") {
    Rng rng(11);
    for (int trial = 0; trial < 300; ++trial) {
        const int K = rng.uniform_int(2, 9);
        const int n = rng.uniform_int(1, 60);
        std::vector<int> t(n), p(n);
        for (int i = 0; i < n; ++i) {
            t[i] = rng.uniform_int(0, K - 1);
            // skewed predictions so some classes are never predicted
            p[i] = rng.uniform() < 0.5 ? t[i] : rng.uniform_int(0, K / 2);
        }
        const auto c = metrics::confusion(t, p, K);

        long hit = 0;
        for (int i = 0; i < n; ++i) hit += t[i] == p[i];
        CHECK(metrics::accuracy(c) == static_cast<double>(hit) / n);

        const auto f = oracle_f1(t, p, K);
        CHECK(metrics::per_class_f1(c) == f);
        double s = 0.0;
        for (double v : f) s += v;
        CHECK(metrics::macro_f1(c) == s / K);
        CHECK(metrics::macro_f1(c) >= 0.0);
        CHECK(metrics::macro_f1(c) <= 1.0);

        // precision/recall form of the same quantity
        for (int k = 0; k < K; ++k) {
            const double tp = c.at(k, k), pp = c.col_sum(k), sup = c.row_sum(k);
            if (tp == 0) continue;
            const double prec = tp / pp, rec = tp / sup;
            CHECK(f[k] == doctest::Approx(2 * prec * rec / (prec + rec)).epsilon(1e-12));
        }

        for (int k = 0; k < K; ++k) {
            long support = 0;
            for (int v : t) support += v == k;
            CHECK(c.row_sum(k) == support);
        }
        CHECK(c.total() == n);
    }
    CHECK_THROWS_AS(metrics::confusion(std::vector<int>{0, 3}, std::vector<int>{0, 1}, 3), std::out_of_range);
    CHECK_THROWS_AS(metrics::confusion(std::vector<int>{0}, std::vector<int>{0, 1}, 3), std::invalid_argument);
}

TEST_CASE("regression metrics agree with oracles") {
    std::vector<std::array<double, 3>> truth{{10, -5, 3}, {0, 0, 0}, {-40, 20, 1}};
    auto pred = truth;
    const auto same = metrics::euler_mae(pred, truth);
    CHECK(same.yaw == 0.0);
    CHECK(same.average == 0.0);
    for (auto& p : pred) p[0] += 2.0;
    const auto off = metrics::euler_mae(pred, truth);
    CHECK(off.yaw == 2.0);
    CHECK(off.pitch == 0.0);
    CHECK(off.roll == 0.0);
    CHECK(off.average == doctest::Approx(2.0 / 3.0).epsilon(1e-15));

    Rng rng(12);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = rng.uniform_int(1, 40);
        std::vector<double> a(n), b(n);
        std::vector<std::array<double, 3>> pa(n), pb(n);
        for (int i = 0; i < n; ++i) {
            a[i] = rng.uniform(-1, 1);
            b[i] = rng.uniform(-1, 1);
            for (int k = 0; k < 3; ++k) {
                pa[i][k] = rng.uniform(-99, 99);
                pb[i][k] = rng.uniform(-99, 99);
            }
        }
        double sq = 0.0;
        for (int i = 0; i < n; ++i) sq += (a[i] - b[i]) * (a[i] - b[i]);
        CHECK(metrics::rmse(a, b) == std::sqrt(sq / n));

        const auto m = metrics::euler_mae(pa, pb);
        std::array<double, 3> abs_sum{0, 0, 0};
        for (int i = 0; i < n; ++i)
            for (int k = 0; k < 3; ++k) abs_sum[k] += std::abs(pa[i][k] - pb[i][k]);
        CHECK(m.yaw == abs_sum[0] / n);
        CHECK(m.pitch == abs_sum[1] / n);
        CHECK(m.roll == abs_sum[2] / n);
        CHECK(m.average == (m.yaw + m.pitch + m.roll) / 3.0);
    }
    CHECK_THROWS_AS(metrics::rmse(std::vector<double>{}, std::vector<double>{}), std::invalid_argument);
    CHECK_THROWS_AS(metrics::euler_mae(truth, std::vector<std::array<double, 3>>{}), std::invalid_argument);
}

TEST_CASE("config text round-trips") {
    const config::RunConfig def;
    CHECK(config::parse(config::to_text(def)) == def);
    CHECK(config::parse("") == def);

    const std::vector<std::string> protocols{"sl", "ssl_pretrain", "frozen_eval", "fine_tune", "hmtl",
                                             "hmtl_inpaint_pl_two_stage", "pretext_without_ssh"};
    const std::vector<std::string> kinds{"none", "puzzle", "rotation", "puzzle_rotation", "inpaint_pwl", "inpaint_pl"};
    Rng rng(13);
    for (int trial = 0; trial < 200; ++trial) {
        config::RunConfig c;
        c.protocol = config::parse_protocol(protocols[rng.uniform_int(0, 6)]);
        c.pretext.kind = config::parse_pretext_kind(kinds[rng.uniform_int(0, 5)]);
        c.seeds.clear();
        for (int k = rng.uniform_int(1, 4); k > 0; --k) c.seeds.push_back(static_cast<std::uint64_t>(rng.uniform_int(0, 1000)));
        c.epochs = rng.uniform_int(0, 200);
        c.batch_size = rng.uniform_int(1, 128);
        c.data.fraction = rng.uniform(0.01, 1.0);
        c.data.num_classes = std::vector<int>{2, 4, 8}[rng.uniform_int(0, 2)];
        c.data.proportions.clear();
        if (rng.uniform() < 0.5)
            for (int k = 0; k < c.data.num_classes; ++k) c.data.proportions.push_back(rng.uniform(0.01, 1.0));
        c.data.augment = rng.uniform() < 0.5 ? pretext::AugmentLevel::No : pretext::AugmentLevel::Strong;
        c.data.cutout = rng.uniform() < 0.5;
        c.model.channels = {rng.uniform_int(1, 64), rng.uniform_int(1, 64)};
        c.model.dropout = rng.uniform(0.0, 0.9);
        c.pretext.grid = rng.uniform_int(2, 4);
        c.pretext.identity = rng.uniform() < 0.5;
        c.pretext.region = {rng.uniform(0, 0.4), rng.uniform(0.6, 1), rng.uniform(0, 0.4), rng.uniform(0.6, 1)};
        c.loss.lambda_ssh = rng.uniform(0.0, 3.0);
        c.loss.focal_gamma = rng.uniform(0.0, 5.0);
        c.optim.lr = std::exp(rng.uniform(-12, -2));
        c.optim.decay = {{rng.uniform_int(1, 50), rng.uniform(0.01, 1)}, {rng.uniform_int(51, 100), 0.5}};
        c.optim.optimizer.weight_decay = rng.uniform(0.0, 0.1);
        c.thresholds = {rng.uniform(0.1, 0.9)};
        c.output = "runs/trial_" + std::to_string(trial);
        c.resume = rng.uniform() < 0.5;
        const auto text = config::to_text(c);
        const auto back = config::parse(text);
        CHECK(back == c);
        CHECK(config::to_text(back) == text);
    }
}

TEST_CASE("config grammar errors") {
    CHECK_NOTHROW(config::parse("; comment\n\n[run]\n  epochs =  7  \n# trailing\n"));
    CHECK(config::parse("[run]\nepochs = 7\n").epochs == 7);
    CHECK(config::parse("[optim]\ndecay = 10:0.5, 20:0.1\n").optim.decay ==
          optim::DecaySchedule{{10, 0.5}, {20, 0.1}});
    CHECK_THROWS_AS(config::parse("[nope]\nx = 1\n"), ConfigError);
    CHECK_THROWS_AS(config::parse("[run]\nbogus = 1\n"), ConfigError);
    CHECK_THROWS_AS(config::parse("[run]\nepochs = 1\nepochs = 2\n"), ConfigError);
    CHECK_THROWS_AS(config::parse("[run]\nepochs = seven\n"), ConfigError);
    CHECK_THROWS_AS(config::parse("[run]\nepochs 7\n"), ConfigError);
    CHECK_THROWS_AS(config::parse("epochs = 7\n"), ConfigError);
    CHECK_THROWS_AS(config::parse("[run]\nprotocol = magic\n"), ConfigError);

    config::RunConfig c;
    config::set_field(c, "loss", "lambda_ssh", "0.25");
    CHECK(c.loss.lambda_ssh == 0.25);
    CHECK_THROWS_AS(config::set_field(c, "loss", "lambda_nope", "1"), ConfigError);
    CHECK_THROWS_AS(config::load("/nonexistent/run.cfg"), ConfigError);
}

TEST_CASE("metrics CSV is schema-versioned, append-only and round-trips") {
    TempDir dir("csv");
    const auto file = dir / "metrics.csv";
    Rng rng(14);
    std::vector<train::MetricRow> all;
    std::string prefix;
    for (int batch = 0; batch < 5; ++batch) {
        std::vector<train::MetricRow> rows;
        for (int k = rng.uniform_int(0, 6); k > 0; --k)
            rows.push_back({rng.uniform_int(0, 99), rng.uniform() < 0.5 ? "train" : "val", "label",
                            rng.uniform() < 0.5 ? "loss" : "accuracy", rng.normal() * std::exp(rng.uniform(-30, 30))});
        report::append_metrics(file, rows);
        const auto now = slurp(file);
        CHECK(now.compare(0, prefix.size(), prefix) == 0);
        prefix = now;
        all.insert(all.end(), rows.begin(), rows.end());
        CHECK(report::read_metrics(file) == all);
    }
    CHECK(prefix.rfind(report::kMetricsSchema, 0) == 0);

    const std::vector<train::MetricRow> bad{{1, "val", "a,b", "loss", 1.0}};
    CHECK_THROWS_AS(report::append_metrics(dir / "x.csv", bad), std::invalid_argument);

    write_text(dir / "old.csv", "# schema: hmtl-metrics v0\nepoch,split,head,metric,value\n");
    CHECK_THROWS_AS(report::read_metrics(dir / "old.csv"), SchemaError);
    write_text(dir / "hdr.csv", std::string(report::kMetricsSchema) + "\nepoch,head,split,metric,value\n");
    CHECK_THROWS_AS(report::read_metrics(dir / "hdr.csv"), SchemaError);
    write_text(dir / "row.csv", std::string(report::kMetricsSchema) + "\n" + report::kMetricsHeader + "\n1,val,label,loss\n");
    CHECK_THROWS_AS(report::read_metrics(dir / "row.csv"), SchemaError);
    write_text(dir / "num.csv", std::string(report::kMetricsSchema) + "\n" + report::kMetricsHeader + "\n1,val,label,loss,x1\n");
    CHECK_THROWS_AS(report::read_metrics(dir / "num.csv"), SchemaError);
    CHECK_THROWS_AS(report::read_metrics(dir / "missing.csv"), SchemaError);

    const std::vector<report::AttackRow> attack{{0.0, 10, 9, 0.9}, {0.05, 10, 3, 0.3}};
    report::write_attack(dir / "attack.csv", attack);
    CHECK(report::read_attack(dir / "attack.csv") == attack);
}

TEST_CASE("report output depends only on the input CSVs") {
    TempDir dir("report");
    std::vector<train::MetricRow> rows;
    for (int e = 1; e <= 6; ++e) {
        rows.push_back({e, "val", "label", "accuracy", 0.1 * e});
        rows.push_back({e, "train", "label", "loss", 2.0 / e});
        rows.push_back({e, "val", "puzzle", "accuracy", 0.15 * e});
    }
    report::append_metrics(dir / "runs" / "a" / "metrics.csv", rows);
    for (auto& r : rows) r.value *= 0.9;
    report::append_metrics(dir / "runs" / "b" / "metrics.csv", rows);
    report::write_attack(dir / "runs" / "a" / "attack.csv",
                         std::vector<report::AttackRow>{{0.0, 4, 4, 1.0}, {0.1, 4, 1, 0.25}});

    const auto first = report::render({dir / "runs"}, dir / "out1");
    const auto second = report::render({dir / "runs"}, dir / "out2");
    REQUIRE(first.written.size() == second.written.size());
    REQUIRE(first.written.size() >= 3);
    bool summary = false, svg = false;
    for (std::size_t i = 0; i < first.written.size(); ++i) {
        CHECK(first.written[i].filename() == second.written[i].filename());
        CHECK(slurp(first.written[i]) == slurp(second.written[i]));
        summary |= first.written[i].filename() == "summary.md";
        svg |= first.written[i].extension() == ".svg";
    }
    CHECK(summary);
    CHECK(svg);
    // re-rendering into the same directory is idempotent
    const auto md = slurp(dir / "out1" / "summary.md");
    report::render({dir / "runs"}, dir / "out1");
    CHECK(slurp(dir / "out1" / "summary.md") == md);
}

TEST_CASE("cli usage and error exit codes") {
    CHECK(run({}) == cli::kUsage);
    CHECK(run({"frobnicate"}) == cli::kUsage);
    CHECK(run({"train"}) == cli::kUsage);
    CHECK(run({"train", "/nonexistent/run.cfg"}) == cli::kUsage);
    CHECK(run({"--help"}) == cli::kOk);

    TempDir dir("cli_err");
    write_text(dir / "bad.cfg", "[run]\nepochs = lots\n");
    CHECK(run({"train", (dir / "bad.cfg").string()}) == cli::kConfig);
    write_text(dir / "ok.cfg", kTinyConfig);
    CHECK(run({"train", (dir / "ok.cfg").string(), "--set", "run.nope=1"}) == cli::kConfig);
    CHECK(run({"train", (dir / "ok.cfg").string(), "--set", "garbage"}) == cli::kConfig);
    CHECK(run({"report", (dir / "missing").string(), "-o", (dir / "r").string()}) == cli::kConfig);
    CHECK(run({"synth", "--classes", "3", "-o", (dir / "s").string()}) != cli::kOk);
}

TEST_CASE("cli train, eval, attack and report are consistent") {
    TempDir dir("cli");
    const auto cfg_path = dir / "run.cfg";
    write_text(cfg_path, kTinyConfig);
    const auto out = dir / "run";
    REQUIRE(run({"train", cfg_path.string(), "-o", out.string(), "-q"}) == cli::kOk);

    nlohmann::json result;
    std::ifstream(out / "result.json") >> result;
    REQUIRE(result["seeds"].size() == 1);
    const auto& seed = result["seeds"][0];
    CHECK(seed["seed"] == 3);
    const std::string ckpt = seed["checkpoint"];
    REQUIRE(fs::exists(ckpt));
    CHECK(fs::exists(out / "seed_3" / "metrics.csv"));
    CHECK(config::load((out / "config.txt").string()).output == out.string());

    // eval reproduces the run's final validation metrics exactly
    const auto eval_json = dir / "eval.json";
    REQUIRE(run({"eval", ckpt, "--config", cfg_path.string(), "--json", eval_json.string()}) == cli::kOk);
    nlohmann::json ev;
    std::ifstream(eval_json) >> ev;
    CHECK(ev["n"] == 48);
    for (const auto& [k, v] : seed["final_val"].items()) {
        CAPTURE(k);
        CHECK(ev["metrics"][k].get<double>() == v.get<double>());
    }
    std::int64_t total = 0;
    for (auto c : ev["confusion"]) total += c.get<std::int64_t>();
    CHECK(total == 48);

    // the same images from a folder give the same numbers
    auto cfg = config::load(cfg_path.string());
    const auto split = train::prepare_data(cfg);
    data::write_folder(split.val, dir / "valdir");
    const auto eval2 = dir / "eval2.json";
    REQUIRE(run({"eval", ckpt, "--data", (dir / "valdir").string(), "--size", "16", "--json", eval2.string()}) ==
            cli::kOk);
    nlohmann::json ev2;
    std::ifstream(eval2) >> ev2;
    CHECK(ev2["metrics"] == ev["metrics"]);

    CHECK(run({"eval", ckpt}) == cli::kConfig);
    CHECK(run({"eval", ckpt, "--config", cfg_path.string(), "--data", (dir / "valdir").string()}) == cli::kConfig);

    // epsilon 0 is the clean accuracy
    const auto attack_csv = dir / "attack.csv";
    REQUIRE(run({"attack", ckpt, "--config", cfg_path.string(), "--epsilons", "0", "-o", attack_csv.string()}) ==
            cli::kOk);
    const auto rows = report::read_attack(attack_csv);
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].epsilon == 0.0);
    CHECK(rows[0].n == 48);
    CHECK(rows[0].accuracy == seed["final_val"]["label/accuracy"].get<double>());
    CHECK(run({"attack", ckpt, "--config", cfg_path.string(), "--epsilons", "0.1,0.05"}) == cli::kConfig);
    CHECK(run({"attack", ckpt, "--config", cfg_path.string(), "--epsilons", "x"}) == cli::kConfig);

    REQUIRE(run({"report", out.string(), attack_csv.string(), "-o", (dir / "rep").string()}) == cli::kOk);
    CHECK(fs::exists(dir / "rep" / "summary.md"));
}

TEST_CASE("cli synth writes a loadable folder and the output env var is honoured") {
    TempDir dir("synth");
    const auto folder = dir / "faces";
    REQUIRE(run({"synth", "-n", "40", "--classes", "2", "--size", "16", "--proportions", "3,1", "-o",
                 folder.string()}) == cli::kOk);
    const auto ds = data::load_folder(folder, data::Task::Classification);
    CHECK(ds.size() == 40);
    CHECK(ds.class_counts() == std::vector<int>{30, 10});

    write_text(dir / "run.cfg", std::string(kTinyConfig));
    ::setenv(cli::kOutputEnv, (dir / "envout").string().c_str(), 1);
    const int code = run({"train", (dir / "run.cfg").string(), "-q", "--set", "run.epochs=1"});
    ::unsetenv(cli::kOutputEnv);
    REQUIRE(code == cli::kOk);
    CHECK(fs::exists(dir / "envout" / "result.json"));
    CHECK(config::load((dir / "envout" / "config.txt").string()).epochs == 1);
}
