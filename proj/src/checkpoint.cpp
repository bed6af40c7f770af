#include "hmtl/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <json.hpp>

#include "hmtl/error.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace hmtl::checkpoint {

namespace {

constexpr char kBlobMagic[8] = {'H', 'M', 'T', 'L', 'B', 'L', 'O', 'B'};
constexpr std::uint32_t kBlobVersion = 1;

template <typename T>
void put(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const fs::path& file) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw SchemaError("truncated blob " + file.string());
    return v;
}

std::string blob_file(const std::string& component) { return component + ".bin"; }

json head_to_json(const model::HeadSpec& h) {
    json j{{"kind", model::to_string(h.kind)},
           {"name", h.name},
           {"classes", h.classes},
           {"grid", h.grid},
           {"hidden", h.hidden},
           {"dropout", h.dropout},
           {"label_smoothing", h.label_smoothing}};
    if (h.kind == model::HeadKind::CatReg)
        j["bins"] = {{"n", h.scheme.n_bins}, {"lo", h.scheme.lo}, {"hi", h.scheme.hi}};
    return j;
}

model::HeadSpec head_from_json(const json& j) {
    model::HeadSpec h;
    h.kind = model::parse_head_kind(j.at("kind").get<std::string>());
    h.name = j.at("name").get<std::string>();
    h.classes = j.at("classes").get<int>();
    h.grid = j.at("grid").get<int>();
    h.hidden = j.at("hidden").get<int>();
    h.dropout = j.at("dropout").get<double>();
    h.label_smoothing = j.at("label_smoothing").get<double>();
    if (j.contains("bins"))
        h.scheme = losses::BinScheme(j["bins"].at("n").get<int>(), j["bins"].at("lo").get<double>(),
                                     j["bins"].at("hi").get<double>());
    return h;
}

}  // namespace

void write_blob(const fs::path& file, const std::vector<nn::Param*>& params) {
    std::ofstream os(file, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + file.string());
    os.write(kBlobMagic, sizeof(kBlobMagic));
    put(os, kBlobVersion);
    put(os, static_cast<std::uint32_t>(params.size()));
    for (const auto* p : params) {
        put(os, static_cast<std::uint32_t>(p->name.size()));
        os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
        put(os, static_cast<std::uint32_t>(p->value.shape.size()));
        for (int d : p->value.shape) put(os, static_cast<std::int32_t>(d));
        os.write(reinterpret_cast<const char*>(p->value.data.data()),
                 static_cast<std::streamsize>(p->value.data.size() * sizeof(float)));
    }
    if (!os) throw std::runtime_error("write failed for " + file.string());
}

void read_blob(const fs::path& file, const std::vector<nn::Param*>& params) {
    std::ifstream is(file, std::ios::binary);
    if (!is) throw SchemaError("missing blob " + file.string());
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kBlobMagic, sizeof(magic)) != 0) throw SchemaError("bad blob header in " + file.string());
    if (get<std::uint32_t>(is, file) != kBlobVersion) throw SchemaError("unsupported blob version in " + file.string());
    const auto n = get<std::uint32_t>(is, file);
    if (n != params.size())
        throw SchemaError(file.string() + ": expected " + std::to_string(params.size()) + " tensors, found " +
                          std::to_string(n));
    for (auto* p : params) {
        const auto len = get<std::uint32_t>(is, file);
        std::string name(len, '\0');
        is.read(name.data(), len);
        if (name != p->name) throw SchemaError(file.string() + ": expected tensor '" + p->name + "', found '" + name + "'");
        const auto rank = get<std::uint32_t>(is, file);
        std::vector<int> shape;
        for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(get<std::int32_t>(is, file));
        if (shape != p->value.shape)
            throw SchemaError(file.string() + ": tensor '" + name + "' has shape " + shape_string(shape) + ", model expects " +
                              shape_string(p->value.shape));
        is.read(reinterpret_cast<char*>(p->value.data.data()),
                static_cast<std::streamsize>(p->value.data.size() * sizeof(float)));
        if (!is) throw SchemaError("truncated blob " + file.string());
    }
}

void save(const fs::path& dir, const model::ModelAssembly& model, const Meta& meta, const optim::Optimizer* optimizer) {
    fs::create_directories(dir);
    const auto& bc = model.backbone->config();
    json manifest;
    manifest["format"] = "hmtl-checkpoint";
    manifest["version"] = kFormatVersion;
    manifest["backbone"] = {{"resolution", bc.resolution},
                            {"channels", bc.channels},
                            {"convs_per_block", bc.convs_per_block},
                            {"seed", bc.seed}};
    json heads = json::array();
    for (const auto& h : model.head_specs()) heads.push_back(head_to_json(h));
    manifest["heads"] = heads;
    manifest["head_seed"] = meta.head_seed;
    manifest["task"] = data::to_string(meta.task);
    manifest["num_classes"] = meta.num_classes;
    manifest["class_names"] = meta.class_names;
    manifest["epoch"] = meta.epoch;
    manifest["protocol"] = meta.protocol;
    manifest["metrics"] = meta.metrics;
    json components = json::array();
    for (const auto& [name, params] : model.components()) {
        write_blob(dir / blob_file(name), params);
        components.push_back({{"name", name}, {"file", blob_file(name)}, {"tensors", params.size()}});
    }
    manifest["components"] = components;
    if (optimizer) {
        std::ofstream os(dir / "optimizer.bin", std::ios::binary);
        optimizer->save(os);
        manifest["optimizer"] = "optimizer.bin";
    } else if (fs::exists(dir / "optimizer.bin")) {
        fs::remove(dir / "optimizer.bin");
    }
    if (!meta.trainer_state.empty()) manifest["trainer_state"] = json::parse(meta.trainer_state);
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

Loaded load(const fs::path& dir) {
    const fs::path mf = dir / "manifest.json";
    std::ifstream in(mf);
    if (!in) throw SchemaError("no checkpoint manifest at " + mf.string());
    json manifest;
    try {
        manifest = json::parse(in);
    } catch (const json::exception& e) {
        throw SchemaError("malformed checkpoint manifest " + mf.string() + ": " + e.what());
    }
    try {
        if (manifest.at("format") != "hmtl-checkpoint") throw SchemaError("not a checkpoint manifest: " + mf.string());
        if (manifest.at("version").get<int>() != kFormatVersion)
            throw SchemaError("unsupported checkpoint version " + manifest["version"].dump());
        model::BackboneConfig bc;
        const auto& b = manifest.at("backbone");
        bc.resolution = b.at("resolution").get<int>();
        bc.channels = b.at("channels").get<std::vector<int>>();
        bc.convs_per_block = b.at("convs_per_block").get<int>();
        bc.seed = b.at("seed").get<std::uint64_t>();
        std::vector<model::HeadSpec> heads;
        for (const auto& h : manifest.at("heads")) heads.push_back(head_from_json(h));

        Loaded out;
        out.meta.head_seed = manifest.at("head_seed").get<std::uint64_t>();
        out.meta.task = data::parse_task(manifest.at("task").get<std::string>());
        out.meta.num_classes = manifest.at("num_classes").get<int>();
        out.meta.class_names = manifest.at("class_names").get<std::vector<std::string>>();
        out.meta.epoch = manifest.at("epoch").get<int>();
        out.meta.protocol = manifest.value("protocol", "");
        out.meta.metrics = manifest.at("metrics").get<std::map<std::string, double>>();
        if (manifest.contains("trainer_state")) out.meta.trainer_state = manifest["trainer_state"].dump();
        out.model = model::assemble(bc, heads, out.meta.head_seed);
        const auto comps = out.model.components();
        for (const auto& c : manifest.at("components")) {
            const auto name = c.at("name").get<std::string>();
            auto it = comps.find(name);
            if (it == comps.end()) throw SchemaError("checkpoint component '" + name + "' not in the model");
            read_blob(dir / c.at("file").get<std::string>(), it->second);
        }
        if (manifest.at("components").size() != comps.size())
            throw SchemaError("checkpoint is missing model components");
        out.has_optimizer = manifest.contains("optimizer");
        return out;
    } catch (const json::exception& e) {
        throw SchemaError("invalid checkpoint manifest " + mf.string() + ": " + e.what());
    }
}

void load_optimizer(const fs::path& dir, optim::Optimizer& optimizer) {
    std::ifstream is(dir / "optimizer.bin", std::ios::binary);
    if (!is) throw SchemaError("checkpoint " + dir.string() + " has no optimizer state");
    optimizer.load(is);
}

}  // namespace hmtl::checkpoint
