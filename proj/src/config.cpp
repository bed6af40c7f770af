#include "hmtl/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "hmtl/error.hpp"

namespace hmtl::config {

std::string to_string(Protocol p) {
    switch (p) {
        case Protocol::Sl: return "sl";
        case Protocol::SslPretrain: return "ssl_pretrain";
        case Protocol::FrozenEval: return "frozen_eval";
        case Protocol::FineTune: return "fine_tune";
        case Protocol::Hmtl: return "hmtl";
        case Protocol::InpaintPlTwoStage: return "hmtl_inpaint_pl_two_stage";
        case Protocol::PretextWithoutSsh: return "pretext_without_ssh";
    }
    return "sl";
}

Protocol parse_protocol(const std::string& text) {
    for (auto p : {Protocol::Sl, Protocol::SslPretrain, Protocol::FrozenEval, Protocol::FineTune, Protocol::Hmtl,
                   Protocol::InpaintPlTwoStage, Protocol::PretextWithoutSsh})
        if (to_string(p) == text) return p;
    throw std::invalid_argument("unknown protocol '" + text + "'");
}

std::string to_string(PretextKind k) {
    switch (k) {
        case PretextKind::None: return "none";
        case PretextKind::Puzzle: return "puzzle";
        case PretextKind::Rotation: return "rotation";
        case PretextKind::PuzzleRotation: return "puzzle_rotation";
        case PretextKind::InpaintPwl: return "inpaint_pwl";
        case PretextKind::InpaintPl: return "inpaint_pl";
    }
    return "none";
}

PretextKind parse_pretext_kind(const std::string& text) {
    for (auto k : {PretextKind::None, PretextKind::Puzzle, PretextKind::Rotation, PretextKind::PuzzleRotation,
                   PretextKind::InpaintPwl, PretextKind::InpaintPl})
        if (to_string(k) == text) return k;
    throw std::invalid_argument("unknown pretext kind '" + text + "'");
}

bool is_inpaint(PretextKind k) { return k == PretextKind::InpaintPwl || k == PretextKind::InpaintPl; }

int RunConfig::effective_batch_size() const {
    if (batch_size > 0) return batch_size;
    return is_inpaint(pretext.kind) || protocol == Protocol::InpaintPlTwoStage ? 32 : 64;
}

double RunConfig::effective_lr() const {
    if (optim.lr >= 0.0) return optim.lr;
    return protocol == Protocol::FineTune ? 1e-4 : 1e-3;
}

void RunConfig::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (seeds.empty()) fail("run.seeds must list at least one seed");
    if (epochs < 0) fail("run.epochs must be >= 0");
    if (patience < 0) fail("run.patience must be >= 0");
    if (!(data.fraction > 0.0 && data.fraction <= 1.0)) fail("data.fraction must be in (0, 1]");
    if (!(data.val_split > 0.0 && data.val_split < 1.0)) fail("data.val_split must be in (0, 1)");
    if (data.image_size < 8) fail("data.image_size too small");
    if (model.channels.empty()) fail("model.channels must not be empty");
    if (data.image_size % (1 << model.channels.size()) != 0)
        fail("data.image_size must be a multiple of 2^" + std::to_string(model.channels.size()));
    if (model.regression_head != "cat_reg" && model.regression_head != "regression")
        fail("model.regression_head must be cat_reg or regression");
    if (model.frozen_head != "nonlinear" && model.frozen_head != "linear")
        fail("model.frozen_head must be nonlinear or linear");
    if (loss.class_weights != "inverse" && loss.class_weights != "unit")
        fail("loss.class_weights must be inverse or unit");
    if (loss.lambda_dec_mode != "fixed" && loss.lambda_dec_mode != "auto")
        fail("loss.lambda_dec_mode must be fixed or auto");
    if (loss.puzzle_loss != "auto" && loss.puzzle_loss != "ce" && loss.puzzle_loss != "focal")
        fail("loss.puzzle_loss must be auto, ce or focal");
    for (double l : {loss.lambda_sl, loss.lambda_ssh, loss.lambda_rotation, loss.lambda_dec})
        if (l < 0.0) fail("loss weights must be >= 0");
    const bool puzzle = pretext.kind == PretextKind::Puzzle || pretext.kind == PretextKind::PuzzleRotation;
    if (puzzle) {
        if (pretext.grid < 2) fail("pretext.grid must be >= 2");
        if (data.image_size % pretext.grid != 0) fail("data.image_size must be divisible by pretext.grid");
        if (!pretext.region_weights.empty() &&
            pretext.region_weights.size() != static_cast<std::size_t>(pretext.grid * pretext.grid))
            fail("pretext.region_weights needs grid^2 entries");
    }
    switch (protocol) {
        case Protocol::Sl:
            if (pretext.kind != PretextKind::None) fail("protocol sl takes no pretext (use pretext_without_ssh)");
            break;
        case Protocol::SslPretrain:
            if (pretext.kind == PretextKind::None || pretext.kind == PretextKind::InpaintPl)
                fail("ssl_pretrain needs pretext.kind puzzle, rotation, puzzle_rotation or inpaint_pwl");
            break;
        case Protocol::FrozenEval:
        case Protocol::FineTune:
            if (checkpoint.empty()) fail(to_string(protocol) + " needs run.checkpoint");
            break;
        case Protocol::Hmtl:
            if (pretext.kind == PretextKind::None) fail("hmtl needs a pretext.kind");
            if (pretext.kind == PretextKind::InpaintPl) fail("inpaint_pl runs under hmtl_inpaint_pl_two_stage");
            if (loss.puzzle_loss == "focal") fail("hmtl trains puzzle heads with cross-entropy, not focal loss");
            break;
        case Protocol::InpaintPlTwoStage:
            if (pretext.kind != PretextKind::InpaintPl) fail("hmtl_inpaint_pl_two_stage needs pretext.kind = inpaint_pl");
            break;
        case Protocol::PretextWithoutSsh:
            if (pretext.kind == PretextKind::None) fail("pretext_without_ssh needs a pretext.kind");
            break;
    }
}

// -- text form ------------------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    if (trim(s).empty()) return out;
    std::string cell;
    std::istringstream is(s);
    while (std::getline(is, cell, sep)) out.push_back(trim(cell));
    return out;
}

std::string fmt(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, end);
}

double to_double(const std::string& s) {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) throw std::invalid_argument("expected a number, got '" + s + "'");
    return v;
}

template <typename Int>
Int to_int(const std::string& s) {
    Int v{};
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) throw std::invalid_argument("expected an integer, got '" + s + "'");
    return v;
}

bool to_bool(const std::string& s) {
    if (s == "true" || s == "yes" || s == "on" || s == "1") return true;
    if (s == "false" || s == "no" || s == "off" || s == "0") return false;
    throw std::invalid_argument("expected true/false, got '" + s + "'");
}

template <typename T, typename F>
std::string join(const std::vector<T>& v, F f) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + f(v[i]);
    return out;
}

struct Field {
    std::string section, key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

#define HMTL_DOUBLE(sec, key, member) \
    Field{sec, key, [](const RunConfig& c) { return fmt(c.member); }, [](RunConfig& c, const std::string& v) { c.member = to_double(v); }}
#define HMTL_INT(sec, key, member)                                                 \
    Field{sec, key, [](const RunConfig& c) { return std::to_string(c.member); }, \
          [](RunConfig& c, const std::string& v) { c.member = to_int<decltype(c.member)>(v); }}
#define HMTL_BOOL(sec, key, member)                                                          \
    Field{sec, key, [](const RunConfig& c) { return std::string(c.member ? "true" : "false"); }, \
          [](RunConfig& c, const std::string& v) { c.member = to_bool(v); }}
#define HMTL_STRING(sec, key, member) \
    Field{sec, key, [](const RunConfig& c) { return c.member; }, [](RunConfig& c, const std::string& v) { c.member = v; }}
#define HMTL_DOUBLES(sec, key, member)                                                                      \
    Field{sec, key, [](const RunConfig& c) { return join(c.member, [](double d) { return fmt(d); }); }, \
          [](RunConfig& c, const std::string& v) {                                                          \
              c.member.clear();                                                                             \
              for (const auto& s : split(v, ',')) c.member.push_back(to_double(s));                         \
          }}

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        // [data]
        Field{"data", "task", [](const RunConfig& c) { return data::to_string(c.data.task); },
              [](RunConfig& c, const std::string& v) { c.data.task = data::parse_task(v); }},
        HMTL_STRING("data", "root", data.root),
        HMTL_STRING("data", "val_root", data.val_root),
        HMTL_DOUBLE("data", "val_split", data.val_split),
        HMTL_INT("data", "synth_n", data.synth_n),
        HMTL_INT("data", "synth_val_n", data.synth_val_n),
        HMTL_INT("data", "synth_seed", data.synth_seed),
        HMTL_INT("data", "num_classes", data.num_classes),
        HMTL_DOUBLES("data", "proportions", data.proportions),
        HMTL_DOUBLE("data", "margin", data.margin),
        HMTL_DOUBLE("data", "render_noise", data.render_noise),
        HMTL_DOUBLE("data", "pose_range", data.pose_range),
        HMTL_INT("data", "image_size", data.image_size),
        HMTL_DOUBLE("data", "fraction", data.fraction),
        HMTL_INT("data", "subsample_seed", data.subsample_seed),
        Field{"data", "augment", [](const RunConfig& c) { return pretext::to_string(c.data.augment); },
              [](RunConfig& c, const std::string& v) { c.data.augment = pretext::parse_augment_level(v); }},
        HMTL_BOOL("data", "cutout", data.cutout),
        // [model]
        Field{"model", "channels", [](const RunConfig& c) { return join(c.model.channels, [](int d) { return std::to_string(d); }); },
              [](RunConfig& c, const std::string& v) {
                  c.model.channels.clear();
                  for (const auto& s : split(v, ',')) c.model.channels.push_back(to_int<int>(s));
              }},
        HMTL_INT("model", "convs_per_block", model.convs_per_block),
        HMTL_STRING("model", "regression_head", model.regression_head),
        HMTL_INT("model", "bins", model.bins),
        HMTL_INT("model", "pose_bins", model.pose_bins),
        HMTL_DOUBLE("model", "dropout", model.dropout),
        HMTL_DOUBLE("model", "label_smoothing", model.label_smoothing),
        HMTL_INT("model", "ssh_hidden", model.ssh_hidden),
        HMTL_STRING("model", "frozen_head", model.frozen_head),
        // [pretext]
        Field{"pretext", "kind", [](const RunConfig& c) { return to_string(c.pretext.kind); },
              [](RunConfig& c, const std::string& v) { c.pretext.kind = parse_pretext_kind(v); }},
        HMTL_INT("pretext", "grid", pretext.grid),
        HMTL_DOUBLES("pretext", "region_weights", pretext.region_weights),
        HMTL_BOOL("pretext", "identity", pretext.identity),
        Field{"pretext", "region",
              [](const RunConfig& c) {
                  const auto& r = c.pretext.region;
                  return fmt(r.row0) + ", " + fmt(r.row1) + ", " + fmt(r.col0) + ", " + fmt(r.col1);
              },
              [](RunConfig& c, const std::string& v) {
                  const auto parts = split(v, ',');
                  if (parts.size() != 4) throw std::invalid_argument("region needs row0, row1, col0, col1");
                  c.pretext.region = {to_double(parts[0]), to_double(parts[1]), to_double(parts[2]), to_double(parts[3])};
              }},
        HMTL_DOUBLE("pretext", "square_side", pretext.square_side),
        HMTL_BOOL("pretext", "pixel_mask", pretext.pixel_mask),
        // [loss]
        HMTL_STRING("loss", "class_weights", loss.class_weights),
        HMTL_DOUBLE("loss", "lambda_sl", loss.lambda_sl),
        HMTL_DOUBLE("loss", "lambda_ssh", loss.lambda_ssh),
        HMTL_DOUBLE("loss", "lambda_rotation", loss.lambda_rotation),
        HMTL_STRING("loss", "lambda_dec_mode", loss.lambda_dec_mode),
        HMTL_DOUBLE("loss", "lambda_dec", loss.lambda_dec),
        HMTL_STRING("loss", "puzzle_loss", loss.puzzle_loss),
        HMTL_DOUBLE("loss", "focal_alpha", loss.focal_alpha),
        HMTL_DOUBLE("loss", "focal_gamma", loss.focal_gamma),
        HMTL_DOUBLE("loss", "cat_reg_alpha", loss.cat_reg_alpha),
        // [optim]
        Field{"optim", "kind", [](const RunConfig& c) { return optim::to_string(c.optim.optimizer.kind); },
              [](RunConfig& c, const std::string& v) { c.optim.optimizer.kind = optim::parse_kind(v); }},
        HMTL_DOUBLE("optim", "lr", optim.lr),
        Field{"optim", "decay",
              [](const RunConfig& c) {
                  return join(c.optim.decay, [](const std::pair<int, double>& d) { return std::to_string(d.first) + ":" + fmt(d.second); });
              },
              [](RunConfig& c, const std::string& v) {
                  c.optim.decay.clear();
                  for (const auto& item : split(v, ',')) {
                      const auto parts = split(item, ':');
                      if (parts.size() != 2) throw std::invalid_argument("decay entries are epoch:factor, got '" + item + "'");
                      c.optim.decay.emplace_back(to_int<int>(parts[0]), to_double(parts[1]));
                  }
              }},
        HMTL_DOUBLE("optim", "beta1", optim.optimizer.beta1),
        HMTL_DOUBLE("optim", "beta2", optim.optimizer.beta2),
        HMTL_DOUBLE("optim", "eps", optim.optimizer.eps),
        HMTL_DOUBLE("optim", "weight_decay", optim.optimizer.weight_decay),
        // [run]
        Field{"run", "protocol", [](const RunConfig& c) { return to_string(c.protocol); },
              [](RunConfig& c, const std::string& v) { c.protocol = parse_protocol(v); }},
        Field{"run", "seeds", [](const RunConfig& c) { return join(c.seeds, [](std::uint64_t s) { return std::to_string(s); }); },
              [](RunConfig& c, const std::string& v) {
                  c.seeds.clear();
                  for (const auto& s : split(v, ',')) c.seeds.push_back(to_int<std::uint64_t>(s));
              }},
        HMTL_INT("run", "epochs", epochs),
        HMTL_INT("run", "batch_size", batch_size),
        HMTL_INT("run", "patience", patience),
        HMTL_DOUBLES("run", "thresholds", thresholds),
        HMTL_STRING("run", "output", output),
        HMTL_STRING("run", "checkpoint", checkpoint),
        HMTL_STRING("run", "teacher", teacher),
        HMTL_INT("run", "teacher_epochs", teacher_epochs),
        HMTL_BOOL("run", "resume", resume),
        HMTL_BOOL("run", "eval_train", eval_train),
        HMTL_BOOL("run", "ssh_val", ssh_val),
    };
    return table;
}

#undef HMTL_DOUBLE
#undef HMTL_INT
#undef HMTL_BOOL
#undef HMTL_STRING
#undef HMTL_DOUBLES

const std::vector<std::string> kSections{"data", "model", "pretext", "loss", "optim", "run"};

}  // namespace

void set_field(RunConfig& config, const std::string& section, const std::string& key, const std::string& value) {
    const auto& table = fields();
    auto it = std::find_if(table.begin(), table.end(),
                           [&](const Field& f) { return f.section == section && f.key == key; });
    if (it == table.end()) throw ConfigError("unknown key '" + key + "' in [" + section + "]");
    try {
        it->set(config, value);
    } catch (const std::exception& e) {
        throw ConfigError(section + "." + key + ": " + e.what());
    }
}

RunConfig parse(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line, section;
    std::set<std::string> seen;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string where = "line " + std::to_string(line_no) + ": ";
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']') throw ConfigError(where + "unterminated section header");
            section = trim(t.substr(1, t.size() - 2));
            if (std::find(kSections.begin(), kSections.end(), section) == kSections.end())
                throw ConfigError(where + "unknown section [" + section + "]");
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
        if (section.empty()) throw ConfigError(where + "key outside of any section");
        const std::string key = trim(t.substr(0, eq));
        const std::string value = trim(t.substr(eq + 1));
        if (!seen.insert(section + "." + key).second) throw ConfigError(where + "duplicate key " + section + "." + key);
        try {
            set_field(cfg, section, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError(where + e.what());
        }
    }
    return cfg;
}

RunConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

std::string to_text(const RunConfig& config) {
    std::string out;
    for (const auto& section : kSections) {
        out += "[" + section + "]\n";
        for (const auto& f : fields())
            if (f.section == section) out += f.key + " = " + f.get(config) + "\n";
        out += "\n";
    }
    return out;
}

}  // namespace hmtl::config
