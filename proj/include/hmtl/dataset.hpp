#pragma once

// Labeled datasets: records, folder ingestion, class statistics and a
// procedural face generator used as a desk-scale benchmark.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hmtl/image.hpp"
#include "hmtl/losses.hpp"

namespace hmtl::data {

enum class Task {
    Classification,  ///< K categorical classes (expressions for synthetic data)
    ValenceArousal,  ///< targets (valence, arousal) in [-1, 1]; optional categorical label
    HeadPose,        ///< targets (yaw, pitch, roll) in degrees, |angle| <= 99
    Gender,          ///< two classes
};

std::string to_string(Task task);
Task parse_task(const std::string& text);
bool is_categorical(Task task);
/// Names of the continuous targets: {"valence","arousal"} or {"yaw","pitch","roll"}.
std::vector<std::string> target_names(Task task);

constexpr double kMaxPoseDegrees = 99.0;

/// Generative parameters of a synthetic face.
struct FaceParams {
    double valence = 0.0;     ///< latent, drives mouth curvature
    double arousal = 0.0;     ///< latent, drives eye openness and brows
    double mouth_curve = 0.0; ///< rendered curvature (valence plus render noise)
    double yaw = 0.0, pitch = 0.0, roll = 0.0;  ///< degrees
    double jaw_width = 0.30;
    bool long_hair = false;
    friend bool operator==(const FaceParams&, const FaceParams&) = default;
};

struct ImageRecord {
    std::string id;
    Image image;
    std::optional<int> label;
    std::vector<double> targets;
    std::optional<FaceParams> params;  ///< only for generated data; not persisted

    friend bool operator==(const ImageRecord& a, const ImageRecord& b) {
        return a.id == b.id && a.image == b.image && a.label == b.label && a.targets == b.targets;
    }
};

struct LabeledDataset {
    Task task = Task::Classification;
    int num_classes = 0;  ///< 0 when there is no categorical label
    std::vector<std::string> class_names;
    std::vector<ImageRecord> records;

    std::size_t size() const { return records.size(); }
    bool empty() const { return records.empty(); }
    /// Per-class counts over records that carry a label.
    std::vector<int> class_counts() const;
    /// Throws SchemaError when a record violates the task's label ranges.
    void validate() const;
};

struct LoadReport {
    int skipped_images = 0;  ///< unreadable files
    int filtered_rows = 0;   ///< pose rows with |angle| > 99
};

/// Classification/gender: one sub-folder per class (sorted by name), image
/// files inside. Regression tasks: `labels.csv` at the root with header
/// `id,valence,arousal[,label]` or `id,yaw,pitch,roll`, images under
/// `images/<id>.png`.
LabeledDataset load_folder(const std::filesystem::path& root, Task task, LoadReport* report = nullptr);
/// Inverse of load_folder (PNG, lossless for 8-bit quantized images).
void write_folder(const LabeledDataset& dataset, const std::filesystem::path& root);

Image read_image(const std::filesystem::path& path);
void write_image(const Image& image, const std::filesystem::path& path);
/// Round to the nearest 1/255 step, as stored on disk.
void quantize8(Image& image);

/// w_c = N / (K n_c), normalized to mean 1. All counts must be > 0.
losses::ClassWeights class_weights(std::span<const int> counts);

/// Half-open binning with the top value in the last bin.
int bin_label(double value, const losses::BinScheme& scheme);

struct SynthOptions {
    int n = 800;
    std::uint64_t seed = 0;
    Task task = Task::Classification;
    int image_size = 64;
    int num_classes = 8;               ///< classification: 2, 4 or 8
    std::vector<double> proportions;   ///< per-class; empty = balanced
    double margin = 0.3;               ///< binary/4-class: valence gap around class boundaries
    double render_noise = 0.0;         ///< std of mouth curvature noise around the latent valence
    double pose_range = 90.0;          ///< head pose: |yaw|,|pitch| <= range, |roll| <= 2/3 range
};

/// Expression names for the 8-class task.
const std::vector<std::string>& expression_names();

LabeledDataset synth_faces(const SynthOptions& options);
/// Render one face from parameters. Background, skin tone, placement
/// jitter and pixel noise come from `noise_seed`.
Image render_face(const FaceParams& params, int size, std::uint64_t noise_seed);

/// Exact per-class counts for n samples: largest remainder of n * p_k.
std::vector<int> allocate_counts(int n, std::span<const double> proportions);

}  // namespace hmtl::data
