#include "hmtl/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "hmtl/adversarial.hpp"
#include "hmtl/checkpoint.hpp"
#include "hmtl/config.hpp"
#include "hmtl/error.hpp"
#include "hmtl/pretext.hpp"
#include "hmtl/report.hpp"
#include "hmtl/trainer.hpp"

namespace hmtl::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != ' ') {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

std::vector<double> parse_doubles(const std::string& s) {
    std::vector<double> out;
    for (const auto& t : split_list(s)) {
        std::size_t pos = 0;
        double v = 0.0;
        try {
            v = std::stod(t, &pos);
        } catch (const std::exception&) {
            pos = 0;
        }
        if (pos != t.size() || t.empty()) throw std::invalid_argument("not a number: '" + t + "'");
        out.push_back(v);
    }
    return out;
}

/// "section.key=value"
void apply_override(config::RunConfig& cfg, const std::string& item) {
    const auto eq = item.find('=');
    const auto dot = item.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq)
        throw ConfigError("override must look like section.key=value, got '" + item + "'");
    config::set_field(cfg, item.substr(0, dot), item.substr(dot + 1, eq - dot - 1), item.substr(eq + 1));
}

std::string default_output() {
    if (const char* env = std::getenv(kOutputEnv); env && *env) return env;
    return "runs";
}

json metric_json(const train::MetricMap& m) {
    json j = json::object();
    for (const auto& [k, v] : m) j[k] = v;
    return j;
}

void print_metrics(const train::MetricMap& m, const std::string& prefix) {
    for (const auto& [k, v] : m) std::cout << prefix << k << " = " << report::format_number(v) << "\n";
}

void write_json(const fs::path& file, const json& j) {
    if (file.has_parent_path()) fs::create_directories(file.parent_path());
    std::ofstream out(file);
    if (!out) throw std::runtime_error("cannot write " + file.string());
    out << j.dump(2) << "\n";
}

struct DataSource {
    std::string config;
    std::string folder;
    std::string task = "classification";
    int size = 64;
    std::string split = "val";
};

void add_data_options(CLI::App* cmd, DataSource& src) {
    cmd->add_option("--config", src.config, "Run config; evaluates on its prepared data")->check(CLI::ExistingFile);
    cmd->add_option("--data", src.folder, "Dataset folder")->check(CLI::ExistingDirectory);
    cmd->add_option("--task", src.task, "Task of --data")->capture_default_str();
    cmd->add_option("--size", src.size, "Image size for --data")->capture_default_str();
    cmd->add_option("--split", src.split, "train or val (with --config)")
        ->check(CLI::IsMember({"train", "val"}))
        ->capture_default_str();
}

data::LabeledDataset load_source(const DataSource& src, const checkpoint::Meta& meta) {
    if (src.config.empty() == src.folder.empty()) throw ConfigError("give exactly one of --config or --data");
    data::LabeledDataset ds;
    if (!src.config.empty()) {
        const auto cfg = config::load(src.config);
        auto split = train::prepare_data(cfg);
        ds = src.split == "train" ? std::move(split.train) : std::move(split.val);
    } else {
        ds = data::load_folder(src.folder, data::parse_task(src.task));
        for (auto& r : ds.records)
            if (r.image.height() != src.size || r.image.width() != src.size)
                r.image = pretext::resize(r.image, src.size, src.size);
    }
    if (ds.task != meta.task) throw SchemaError("dataset task does not match the checkpoint");
    if (data::is_categorical(ds.task) && ds.class_names != meta.class_names) {
        // Folder classes come sorted by name; map them onto the checkpoint's order.
        std::vector<int> to_ckpt;
        for (const auto& name : ds.class_names) {
            const auto it = std::find(meta.class_names.begin(), meta.class_names.end(), name);
            if (it == meta.class_names.end() || ds.class_names.size() != meta.class_names.size())
                throw SchemaError("dataset classes do not match the checkpoint");
            to_ckpt.push_back(static_cast<int>(it - meta.class_names.begin()));
        }
        for (auto& r : ds.records)
            if (r.label) r.label = to_ckpt[static_cast<std::size_t>(*r.label)];
        ds.class_names = meta.class_names;
    }
    return ds;
}

int cmd_synth(const data::SynthOptions& o, const std::string& out) {
    const auto ds = data::synth_faces(o);
    data::write_folder(ds, out);
    std::cout << "wrote " << ds.size() << " images to " << out << "\n";
    if (data::is_categorical(ds.task)) {
        const auto counts = ds.class_counts();
        for (std::size_t k = 0; k < counts.size(); ++k)
            std::cout << "  " << ds.class_names[k] << " " << counts[k] << "\n";
    }
    return kOk;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides, const std::string& output,
              bool quiet, std::optional<config::Protocol> force) {
    auto cfg = config::load(config_path);
    for (const auto& o : overrides) apply_override(cfg, o);
    if (force) {
        if (cfg.protocol != config::Protocol::Sl && cfg.protocol != *force)
            throw ConfigError("pretrain runs protocol ssl_pretrain, config says " + config::to_string(cfg.protocol));
        cfg.protocol = *force;
    }
    if (!output.empty()) cfg.output = output;
    if (cfg.output.empty()) cfg.output = default_output();
    cfg.validate();
    fs::create_directories(cfg.output);
    {
        std::ofstream(fs::path(cfg.output) / "config.txt") << config::to_text(cfg);
    }

    const auto data = train::prepare_data(cfg);
    std::cout << "protocol " << config::to_string(cfg.protocol) << ": " << data.train.size() << " train, "
              << data.val.size() << " val, output " << cfg.output << "\n";
    train::Options opts;
    if (!quiet)
        opts.on_epoch = [](std::uint64_t seed, int epoch, const train::MetricMap& val) {
            std::cout << "seed " << seed << " epoch " << epoch;
            for (const auto& [k, v] : val) std::cout << " " << k << "=" << report::format_number(v);
            std::cout << std::endl;
        };
    const auto result = train::run(cfg, data, opts);

    json j;
    j["protocol"] = config::to_string(result.protocol);
    j["best_seed"] = result.best_seed().seed;
    j["seeds"] = json::array();
    for (const auto& s : result.seeds) {
        json js;
        js["seed"] = s.seed;
        js["epochs_run"] = s.epochs_run;
        js["best_epoch"] = s.best_epoch;
        js["best_score"] = s.best_score;
        js["final_val"] = metric_json(s.final_val);
        js["final_train"] = metric_json(s.final_train);
        js["checkpoint"] = s.checkpoint.string();
        json steps = json::object();
        for (const auto& [th, st] : s.steps_to) steps[report::format_number(th)] = st ? json(*st) : json(nullptr);
        js["steps_to"] = steps;
        j["seeds"].push_back(js);
        std::cout << "seed " << s.seed << " best epoch " << s.best_epoch << " of " << s.epochs_run << "\n";
        print_metrics(s.final_val, "  val ");
    }
    write_json(fs::path(cfg.output) / "result.json", j);
    return kOk;
}

int cmd_eval(const std::string& ckpt, const DataSource& src, const std::string& json_out) {
    const auto loaded = checkpoint::load(ckpt);
    if (loaded.model.supervised.empty()) throw ConfigError("checkpoint has no supervised head to evaluate");
    const auto ds = load_source(src, loaded.meta);
    const auto ev = train::evaluate(loaded.model, ds);
    std::cout << ds.size() << " samples\n";
    print_metrics(ev.metrics, "");
    if (ev.confusion) {
        std::cout << "confusion (rows = true):\n";
        for (int i = 0; i < ev.confusion->num_classes; ++i) {
            std::cout << "  ";
            for (int k = 0; k < ev.confusion->num_classes; ++k) std::cout << (k ? " " : "") << ev.confusion->at(i, k);
            std::cout << "  " << ds.class_names[static_cast<std::size_t>(i)] << "\n";
        }
    }
    if (!json_out.empty()) {
        json j;
        j["n"] = ds.size();
        j["metrics"] = metric_json(ev.metrics);
        if (ev.confusion) j["confusion"] = ev.confusion->counts;
        write_json(json_out, j);
    }
    return kOk;
}

int cmd_attack(const std::string& ckpt, const DataSource& src, const std::string& eps, std::string out) {
    const auto loaded = checkpoint::load(ckpt);
    if (loaded.model.supervised.empty()) throw ConfigError("checkpoint has no supervised head to attack");
    const auto ds = load_source(src, loaded.meta);
    adversarial::AttackConfig ac;
    if (!eps.empty()) ac.epsilons = parse_doubles(eps);
    ac.validate();
    const auto rows = adversarial::epsilon_sweep(loaded.model, ds, ac);
    if (out.empty()) out = (fs::path(default_output()) / "attack.csv").string();
    if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
    report::write_attack(out, rows);
    std::cout << "epsilon accuracy\n";
    for (const auto& r : rows)
        std::cout << report::format_number(r.epsilon) << " " << report::format_number(r.accuracy) << "\n";
    std::cout << "wrote " << out << "\n";
    return kOk;
}

int cmd_report(const std::vector<std::string>& inputs, const std::string& out) {
    std::vector<fs::path> paths;
    for (const auto& i : inputs) {
        if (!fs::exists(i)) throw SchemaError("no such file or directory: " + i);
        paths.emplace_back(i);
    }
    const auto files = report::render(paths, out);
    for (const auto& f : files.written) std::cout << f.string() << "\n";
    return kOk;
}

}  // namespace

int run_cli(std::span<const char* const> argv) {
    CLI::App app{"Hybrid multi-task learning toolkit"};
    app.require_subcommand(1);

    data::SynthOptions synth;
    std::string synth_task = "classification", synth_props, synth_out;
    auto* s = app.add_subcommand("synth", "Write a synthetic face dataset folder");
    s->add_option("--task", synth_task)->capture_default_str();
    s->add_option("-n,--n", synth.n)->capture_default_str();
    s->add_option("--seed", synth.seed)->capture_default_str();
    s->add_option("--size", synth.image_size)->capture_default_str();
    s->add_option("--classes", synth.num_classes, "2, 4 or 8")->capture_default_str();
    s->add_option("--proportions", synth_props, "Comma-separated class proportions");
    s->add_option("--margin", synth.margin)->capture_default_str();
    s->add_option("--render-noise", synth.render_noise)->capture_default_str();
    s->add_option("--pose-range", synth.pose_range)->capture_default_str();
    s->add_option("-o,--out", synth_out, "Output folder")->required();

    std::string cfg_path, output;
    std::vector<std::string> overrides;
    bool quiet = false;
    auto* t = app.add_subcommand("train", "Run a config file");
    auto* p = app.add_subcommand("pretrain", "Run a config file as self-supervised pre-training");
    for (auto* c : {t, p}) {
        c->add_option("config", cfg_path, "Config file")->required()->check(CLI::ExistingFile);
        c->add_option("--set", overrides, "Override a field: section.key=value");
        c->add_option("-o,--output", output, "Output directory (default: run.output, then $HMTL_OUTPUT_DIR)");
        c->add_flag("-q,--quiet", quiet, "No per-epoch progress");
    }

    std::string ckpt, json_out;
    DataSource eval_src;
    auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on clean images");
    e->add_option("checkpoint", ckpt, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
    add_data_options(e, eval_src);
    e->add_option("--json", json_out, "Also write metrics as JSON");

    std::string eps, attack_out;
    DataSource attack_src;
    auto* a = app.add_subcommand("attack", "FGSM epsilon sweep");
    a->add_option("checkpoint", ckpt, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
    add_data_options(a, attack_src);
    a->add_option("--epsilons", eps, "Comma-separated, ascending");
    a->add_option("-o,--out", attack_out, "Attack CSV (default: $HMTL_OUTPUT_DIR/attack.csv)");

    std::vector<std::string> report_inputs;
    std::string report_out = "report";
    auto* r = app.add_subcommand("report", "Render metric and attack CSVs into plots and a summary");
    r->add_option("inputs", report_inputs, "CSV files or run directories")->required();
    r->add_option("-o,--out", report_out)->capture_default_str();

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*s) {
            synth.task = data::parse_task(synth_task);
            if (!synth_props.empty()) synth.proportions = parse_doubles(synth_props);
            return cmd_synth(synth, synth_out);
        }
        if (*t) return cmd_train(cfg_path, overrides, output, quiet, std::nullopt);
        if (*p) return cmd_train(cfg_path, overrides, output, quiet, config::Protocol::SslPretrain);
        if (*e) return cmd_eval(ckpt, eval_src, json_out);
        if (*a) return cmd_attack(ckpt, attack_src, eps, attack_out);
        if (*r) return cmd_report(report_inputs, report_out);
    } catch (const ConfigError& err) {
        std::cerr << "config error: " << err.what() << "\n";
        return kConfig;
    } catch (const SchemaError& err) {
        std::cerr << "data error: " << err.what() << "\n";
        return kConfig;
    } catch (const std::invalid_argument& err) {
        std::cerr << "invalid argument: " << err.what() << "\n";
        return kConfig;
    } catch (const InvariantError& err) {
        std::cerr << "invariant violated: " << err.what() << "\n";
        return kRuntime;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return kRuntime;
    }
    return kUsage;
}

}  // namespace hmtl::cli
