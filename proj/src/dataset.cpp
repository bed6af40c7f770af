#include "hmtl/dataset.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "hmtl/error.hpp"
#include "hmtl/rng.hpp"

namespace fs = std::filesystem;

namespace hmtl::data {

std::string to_string(Task task) {
    switch (task) {
        case Task::Classification: return "classification";
        case Task::ValenceArousal: return "valence_arousal";
        case Task::HeadPose: return "head_pose";
        case Task::Gender: return "gender";
    }
    return "classification";
}

Task parse_task(const std::string& text) {
    if (text == "classification" || text == "expression") return Task::Classification;
    if (text == "valence_arousal" || text == "dimensional") return Task::ValenceArousal;
    if (text == "head_pose" || text == "pose") return Task::HeadPose;
    if (text == "gender") return Task::Gender;
    throw std::invalid_argument("unknown task '" + text + "'");
}

bool is_categorical(Task task) { return task == Task::Classification || task == Task::Gender; }

std::vector<std::string> target_names(Task task) {
    if (task == Task::ValenceArousal) return {"valence", "arousal"};
    if (task == Task::HeadPose) return {"yaw", "pitch", "roll"};
    return {};
}

std::vector<int> LabeledDataset::class_counts() const {
    std::vector<int> counts(static_cast<std::size_t>(std::max(num_classes, 0)), 0);
    for (const auto& r : records)
        if (r.label && *r.label >= 0 && *r.label < num_classes) ++counts[*r.label];
    return counts;
}

void LabeledDataset::validate() const {
    const auto names = target_names(task);
    for (const auto& r : records) {
        if (!r.label && r.targets.empty()) throw SchemaError("record '" + r.id + "' has no label");
        if (r.label && (*r.label < 0 || *r.label >= num_classes))
            throw SchemaError("record '" + r.id + "' label out of range");
        if (is_categorical(task) && !r.label) throw SchemaError("record '" + r.id + "' missing class label");
        if (!names.empty()) {
            if (r.targets.size() != names.size())
                throw SchemaError("record '" + r.id + "' has " + std::to_string(r.targets.size()) + " targets");
            const double bound = task == Task::HeadPose ? kMaxPoseDegrees : 1.0;
            for (double t : r.targets)
                if (!(std::abs(t) <= bound)) throw SchemaError("record '" + r.id + "' target out of range");
        }
    }
}

// -- image IO -------------------------------------------------------------------

Image read_image(const fs::path& path) {
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) throw std::runtime_error("cannot read image " + path.string());
    Image img(bgr.rows, bgr.cols, 3);
    for (int r = 0; r < bgr.rows; ++r) {
        const auto* row = bgr.ptr<cv::Vec3b>(r);
        for (int c = 0; c < bgr.cols; ++c)
            for (int ch = 0; ch < 3; ++ch) img.at(r, c, ch) = static_cast<float>(row[c][2 - ch]) / 255.0f;
    }
    return img;
}

void write_image(const Image& image, const fs::path& path) {
    if (image.channels() != 3) throw std::invalid_argument("write_image: expects 3 channels");
    cv::Mat bgr(image.height(), image.width(), CV_8UC3);
    for (int r = 0; r < image.height(); ++r) {
        auto* row = bgr.ptr<cv::Vec3b>(r);
        for (int c = 0; c < image.width(); ++c)
            for (int ch = 0; ch < 3; ++ch) {
                const float v = std::clamp(image.at(r, c, ch), 0.0f, 1.0f);
                row[c][2 - ch] = static_cast<unsigned char>(std::lround(v * 255.0f));
            }
    }
    if (!cv::imwrite(path.string(), bgr)) throw std::runtime_error("cannot write image " + path.string());
}

void quantize8(Image& image) {
    for (float& v : image.data()) {
        const long k = std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f);
        v = static_cast<float>(k) / 255.0f;
    }
}

// -- folder layout ----------------------------------------------------------------

namespace {

bool is_image_file(const fs::path& p) {
    auto ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp" || ext == ".ppm" || ext == ".pgm";
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream is(line);
    while (std::getline(is, cell, ',')) {
        while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
        while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
        out.push_back(cell);
    }
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

double parse_number(const std::string& s, const std::string& where) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw SchemaError(where + ": '" + s + "' is not a number");
    }
}

LabeledDataset load_classes(const fs::path& root, Task task, LoadReport& report) {
    LabeledDataset ds;
    ds.task = task;
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory()) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    for (std::size_t k = 0; k < dirs.size(); ++k) {
        ds.class_names.push_back(dirs[k].filename().string());
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(dirs[k]))
            if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            ImageRecord rec;
            rec.id = f.stem().string();
            try {
                rec.image = read_image(f);
            } catch (const std::exception& ex) {
                std::cerr << "warning: skipping " << f.string() << ": " << ex.what() << '\n';
                ++report.skipped_images;
                continue;
            }
            rec.label = static_cast<int>(k);
            ds.records.push_back(std::move(rec));
        }
    }
    ds.num_classes = static_cast<int>(dirs.size());
    if (task == Task::Gender && ds.num_classes != 2)
        throw SchemaError("gender dataset needs exactly 2 class folders, found " + std::to_string(ds.num_classes));
    return ds;
}

LabeledDataset load_manifest(const fs::path& root, Task task, LoadReport& report) {
    const fs::path manifest = root / "labels.csv";
    if (!fs::exists(manifest)) throw SchemaError("missing labels manifest " + manifest.string());
    std::ifstream in(manifest);
    std::string line;
    if (!std::getline(in, line)) throw SchemaError("empty labels manifest " + manifest.string());
    const auto header = split_csv(line);
    const auto names = target_names(task);
    std::vector<std::string> expected{"id"};
    expected.insert(expected.end(), names.begin(), names.end());
    const bool has_label = task == Task::ValenceArousal && header.size() == expected.size() + 1 &&
                           header.back() == "label";
    if (!std::equal(expected.begin(), expected.end(), header.begin(), header.begin() + std::min(header.size(), expected.size())) ||
        (header.size() != expected.size() && !has_label)) {
        std::string want;
        for (const auto& e : expected) want += (want.empty() ? "" : ",") + e;
        throw SchemaError("labels manifest header must be '" + want + (task == Task::ValenceArousal ? "[,label]" : "") +
                          "', got '" + line + "'");
    }

    LabeledDataset ds;
    ds.task = task;
    if (task == Task::ValenceArousal && has_label) {
        ds.class_names = expression_names();
        ds.num_classes = static_cast<int>(ds.class_names.size());
    }
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        const auto cells = split_csv(line);
        const std::string where = manifest.filename().string() + ":" + std::to_string(line_no);
        if (cells.size() != header.size())
            throw SchemaError(where + ": expected " + std::to_string(header.size()) + " columns, got " +
                              std::to_string(cells.size()));
        ImageRecord rec;
        rec.id = cells[0];
        if (rec.id.empty()) throw SchemaError(where + ": empty id");
        for (std::size_t j = 0; j < names.size(); ++j) rec.targets.push_back(parse_number(cells[1 + j], where));
        if (has_label && !cells.back().empty()) {
            const double v = parse_number(cells.back(), where);
            if (v != std::floor(v) || v < 0 || v >= ds.num_classes) throw SchemaError(where + ": bad label");
            rec.label = static_cast<int>(v);
        }
        if (task == Task::HeadPose &&
            std::any_of(rec.targets.begin(), rec.targets.end(), [](double a) { return std::abs(a) > kMaxPoseDegrees; })) {
            ++report.filtered_rows;
            continue;
        }
        if (task == Task::ValenceArousal &&
            std::any_of(rec.targets.begin(), rec.targets.end(), [](double a) { return std::abs(a) > 1.0; }))
            throw SchemaError(where + ": valence/arousal must be in [-1, 1]");
        fs::path img = root / "images" / (rec.id + ".png");
        try {
            rec.image = read_image(img);
        } catch (const std::exception& ex) {
            std::cerr << "warning: skipping " << img.string() << ": " << ex.what() << '\n';
            ++report.skipped_images;
            continue;
        }
        ds.records.push_back(std::move(rec));
    }
    return ds;
}

std::string format_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

}  // namespace

LabeledDataset load_folder(const fs::path& root, Task task, LoadReport* report) {
    if (!fs::is_directory(root)) throw SchemaError("dataset root " + root.string() + " is not a directory");
    LoadReport local;
    LoadReport& rep = report ? *report : local;
    LabeledDataset ds = is_categorical(task) ? load_classes(root, task, rep) : load_manifest(root, task, rep);
    if (ds.empty()) throw SchemaError("dataset at " + root.string() + " is empty");
    ds.validate();
    return ds;
}

void write_folder(const LabeledDataset& dataset, const fs::path& root) {
    fs::create_directories(root);
    if (is_categorical(dataset.task)) {
        for (const auto& name : dataset.class_names) fs::create_directories(root / name);
        for (const auto& r : dataset.records) {
            if (!r.label) throw SchemaError("write_folder: record '" + r.id + "' has no class label");
            write_image(r.image, root / dataset.class_names.at(*r.label) / (r.id + ".png"));
        }
        return;
    }
    fs::create_directories(root / "images");
    std::ofstream out(root / "labels.csv");
    out << "id";
    for (const auto& n : target_names(dataset.task)) out << ',' << n;
    const bool with_label = dataset.task == Task::ValenceArousal && dataset.num_classes > 0;
    if (with_label) out << ",label";
    out << '\n';
    for (const auto& r : dataset.records) {
        out << r.id;
        for (double t : r.targets) out << ',' << format_double(t);
        if (with_label) out << ',' << (r.label ? std::to_string(*r.label) : std::string());
        out << '\n';
        write_image(r.image, root / "images" / (r.id + ".png"));
    }
}

// -- statistics -------------------------------------------------------------------

losses::ClassWeights class_weights(std::span<const int> counts) {
    if (counts.empty()) throw std::invalid_argument("class_weights: no classes");
    double total = 0.0;
    for (int c : counts) {
        if (c <= 0) throw std::invalid_argument("class_weights: every class needs at least one sample");
        total += c;
    }
    const double K = static_cast<double>(counts.size());
    std::vector<double> w;
    for (int c : counts) w.push_back(total / (K * c));
    return losses::ClassWeights(std::move(w));
}

int bin_label(double value, const losses::BinScheme& scheme) { return scheme.bin_of(value); }

std::vector<int> allocate_counts(int n, std::span<const double> proportions) {
    if (proportions.empty()) throw std::invalid_argument("allocate_counts: no classes");
    const double sum = std::accumulate(proportions.begin(), proportions.end(), 0.0);
    if (!(sum > 0.0)) throw std::invalid_argument("allocate_counts: proportions must sum to > 0");
    std::vector<int> counts;
    std::vector<std::pair<double, int>> rem;
    int used = 0;
    for (std::size_t k = 0; k < proportions.size(); ++k) {
        if (proportions[k] < 0.0) throw std::invalid_argument("allocate_counts: negative proportion");
        const double exact = n * proportions[k] / sum;
        const int base = static_cast<int>(std::floor(exact + 1e-9));
        counts.push_back(base);
        used += base;
        rem.emplace_back(-(exact - base), static_cast<int>(k));
    }
    std::sort(rem.begin(), rem.end());
    for (int i = 0; used < n; ++i, ++used) ++counts[rem[i % rem.size()].second];
    return counts;
}

// -- synthetic faces ----------------------------------------------------------------

const std::vector<std::string>& expression_names() {
    static const std::vector<std::string> names{"neutral", "happy",   "sad",   "surprise",
                                                "fear",    "disgust", "anger", "contempt"};
    return names;
}

namespace {

// (valence level, arousal level) per expression class. Valence levels
// -0.75/-0.25/0.25/0.75 are separated at -0.5/0/0.5; arousal at 0.
constexpr double kExpressionTable[8][2] = {
    {0.25, -0.6},  {0.75, 0.6},  {-0.75, -0.6}, {0.25, 0.6},
    {-0.25, 0.6},  {-0.25, -0.6}, {-0.75, 0.6}, {0.75, -0.6},
};

int expression_from(double valence, double arousal) {
    const int vl = std::clamp(static_cast<int>(std::floor((valence + 1.0) / 0.5)), 0, 3);
    const double vc = -0.75 + 0.5 * vl;
    const double ac = arousal > 0.0 ? 0.6 : -0.6;
    for (int k = 0; k < 8; ++k)
        if (kExpressionTable[k][0] == vc && kExpressionTable[k][1] == ac) return k;
    return 0;
}

struct Rgb {
    double r, g, b;
};

}  // namespace

Image render_face(const FaceParams& p, int size, std::uint64_t noise_seed) {
    Rng rng(noise_seed);
    const double bg = rng.uniform(0.3, 0.5);
    const Rgb back{bg + rng.uniform(-0.05, 0.05), bg + rng.uniform(-0.05, 0.05), bg + rng.uniform(-0.05, 0.05)};
    const double skin_shift = rng.uniform(-0.06, 0.06);
    const Rgb skin{0.82 + skin_shift, 0.66 + skin_shift, 0.54 + skin_shift};
    const Rgb hair{0.22 + rng.uniform(-0.05, 0.05), 0.14, 0.08};
    const double cx = 0.5 + rng.uniform(-0.03, 0.03);
    const double cy = 0.5 + rng.uniform(-0.03, 0.03);

    const double deg = std::numbers::pi / 180.0;
    const double ax = p.jaw_width, ay = 0.38;
    const double cr = std::cos(p.roll * deg), sr = std::sin(p.roll * deg);
    const double su = std::sin(p.yaw * deg) * 0.45, sv = std::sin(p.pitch * deg) * 0.45;
    const double ku = std::max(std::cos(p.yaw * deg), 0.2), kv = std::max(std::cos(p.pitch * deg), 0.2);
    const double eye_open = std::clamp((p.arousal + 1.0) / 2.0, 0.0, 1.0);
    const double eye_h = 0.03 + 0.13 * eye_open;
    const double brow_v = -0.2 - (0.22 + 0.12 * eye_open);

    auto shade = [&](double X, double Y) -> Rgb {
        // Face frame: undo roll (counter-clockwise on screen).
        const double fx = cr * X - sr * Y;
        const double fy = sr * X + cr * Y;
        const double hu = fx / ax, hv = fy / ay;
        const double rr = hu * hu + hv * hv;
        if (rr > 1.0) {
            if (p.long_hair) {
                const double lu = fx / (ax * 1.18), lv = fy / (ay * 1.08);
                if (lu * lu + lv * lv <= 1.0 && hv < 0.55) return hair;
            }
            return back;
        }
        if (!p.long_hair && hv < -0.62 && rr > 0.35) return hair;
        if (p.long_hair && hv < -0.55 && rr > 0.45) return hair;
        const double lu = (hu - su) / ku, lv = (hv - sv) / kv;
        for (double side : {-1.0, 1.0}) {
            const double eu = (lu - side * 0.38) / 0.16, ev = (lv + 0.2) / eye_h;
            if (eu * eu + ev * ev <= 1.0) return {0.08, 0.06, 0.1};
            if (std::abs(lu - side * 0.38) <= 0.18 && std::abs(lv - brow_v) <= 0.035) return hair;
        }
        {
            const double nu = lu / 0.07, nv = (lv - 0.12) / 0.12;
            if (nu * nu + nv * nv <= 1.0) return {skin.r * 0.8, skin.g * 0.8, skin.b * 0.8};
        }
        if (std::abs(lu) <= 0.38) {
            const double t = lu / 0.38;
            const double mv = 0.5 + p.mouth_curve * 0.22 * (1.0 - t * t);
            if (std::abs(lv - mv) <= 0.055) return {0.55, 0.12, 0.15};
        }
        return skin;
    };

    constexpr int kSuper = 3;
    Image img(size, size, 3);
    for (int r = 0; r < size; ++r)
        for (int c = 0; c < size; ++c) {
            Rgb acc{0, 0, 0};
            for (int sy = 0; sy < kSuper; ++sy)
                for (int sx = 0; sx < kSuper; ++sx) {
                    const double X = (c + (sx + 0.5) / kSuper) / size - cx;
                    const double Y = (r + (sy + 0.5) / kSuper) / size - cy;
                    const Rgb v = shade(X, Y);
                    acc.r += v.r;
                    acc.g += v.g;
                    acc.b += v.b;
                }
            const double inv = 1.0 / (kSuper * kSuper);
            img.at(r, c, 0) = static_cast<float>(acc.r * inv + rng.uniform(-0.02, 0.02));
            img.at(r, c, 1) = static_cast<float>(acc.g * inv + rng.uniform(-0.02, 0.02));
            img.at(r, c, 2) = static_cast<float>(acc.b * inv + rng.uniform(-0.02, 0.02));
        }
    quantize8(img);
    return img;
}

LabeledDataset synth_faces(const SynthOptions& o) {
    if (o.n <= 0) throw std::invalid_argument("synth_faces: n must be > 0");
    if (o.image_size < 8) throw std::invalid_argument("synth_faces: image_size too small");
    LabeledDataset ds;
    ds.task = o.task;
    Rng rng(derive_seed(o.seed, {0x5f17}));

    int K = 0;
    switch (o.task) {
        case Task::Classification:
            K = o.num_classes;
            if (K != 2 && K != 4 && K != 8)
                throw std::invalid_argument("synth_faces: classification supports 2, 4 or 8 classes");
            if (K == 8) ds.class_names = expression_names();
            else if (K == 4) ds.class_names = {"very_negative", "negative", "positive", "very_positive"};
            else ds.class_names = {"negative", "positive"};
            break;
        case Task::Gender:
            K = 2;
            ds.class_names = {"female", "male"};
            break;
        case Task::ValenceArousal:
            K = 8;
            ds.class_names = expression_names();
            break;
        case Task::HeadPose:
            K = 0;
            break;
    }
    ds.num_classes = K;

    std::vector<int> labels;
    if (is_categorical(o.task)) {
        std::vector<double> props = o.proportions;
        if (props.empty()) props.assign(K, 1.0);
        if (static_cast<int>(props.size()) != K)
            throw std::invalid_argument("synth_faces: proportions length != number of classes");
        const auto counts = allocate_counts(o.n, props);
        for (int k = 0; k < K; ++k) labels.insert(labels.end(), counts[k], k);
        rng.shuffle(labels.begin(), labels.end());
    }

    const int width = std::max(4, static_cast<int>(std::to_string(o.n).size()));
    for (int i = 0; i < o.n; ++i) {
        FaceParams p;
        p.valence = rng.uniform(-1.0, 1.0);
        p.arousal = rng.uniform(-1.0, 1.0);
        const bool expression_task = o.task == Task::Classification;
        const double nuisance = expression_task ? 1.0 : 0.0;
        p.yaw = rng.uniform(-8.0, 8.0) * nuisance;
        p.pitch = rng.uniform(-8.0, 8.0) * nuisance;
        p.roll = rng.uniform(-6.0, 6.0) * nuisance;
        const bool female = rng.bernoulli(0.5);
        p.jaw_width = female ? rng.uniform(0.26, 0.285) : rng.uniform(0.315, 0.34);
        p.long_hair = female;

        ImageRecord rec;
        std::ostringstream id;
        id << to_string(o.task) << '_' << std::setw(width) << std::setfill('0') << i;
        rec.id = id.str();

        switch (o.task) {
            case Task::Classification: {
                const int k = labels[i];
                if (K == 8) {
                    p.valence = kExpressionTable[k][0] + rng.uniform(-0.1, 0.1);
                    p.arousal = kExpressionTable[k][1] + rng.uniform(-0.25, 0.25);
                } else if (K == 4) {
                    p.valence = -0.75 + 0.5 * k + rng.uniform(-0.25 + o.margin / 2, 0.25 - o.margin / 2);
                } else {
                    const double lo = o.margin / 2;
                    p.valence = k == 1 ? rng.uniform(lo, 1.0) : -rng.uniform(lo, 1.0);
                }
                rec.label = k;
                break;
            }
            case Task::Gender:
                p.jaw_width = labels[i] == 0 ? rng.uniform(0.26, 0.285) : rng.uniform(0.315, 0.34);
                p.long_hair = labels[i] == 0;
                rec.label = labels[i];
                break;
            case Task::ValenceArousal:
                rec.targets = {p.valence, p.arousal};
                rec.label = expression_from(p.valence, p.arousal);
                break;
            case Task::HeadPose:
                p.yaw = rng.uniform(-o.pose_range, o.pose_range);
                p.pitch = rng.uniform(-o.pose_range, o.pose_range);
                p.roll = rng.uniform(-o.pose_range * 2.0 / 3.0, o.pose_range * 2.0 / 3.0);
                rec.targets = {p.yaw, p.pitch, p.roll};
                break;
        }
        p.mouth_curve = p.valence + (o.render_noise > 0.0 ? o.render_noise * rng.normal() : 0.0);
        rec.image = render_face(p, o.image_size, rng.next());
        rec.params = p;
        ds.records.push_back(std::move(rec));
    }
    return ds;
}

}  // namespace hmtl::data
