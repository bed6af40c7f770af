#pragma once

// Pre-text input construction: jigsaw puzzling, rotation, in-painting cutout
// and the three augmentation levels. Every randomized entry point takes its
// generator by reference and touches no other state, so calls are pure given
// (input, seed).

#include <array>
#include <atomic>
#include <span>
#include <string>
#include <vector>

#include "hmtl/image.hpp"
#include "hmtl/rng.hpp"

namespace hmtl::pretext {

struct PuzzleSample {
    Image image;
    /// labels[j] = original slot of the piece now sitting at position j
    /// (row-major slot numbering).
    std::vector<int> labels;
    /// head_weights[j] = weight_map[labels[j]]: a region's weight follows its piece.
    std::vector<double> head_weights;
};

struct RotationSample {
    Image image;
    int label = 0;  ///< rotated by label * 45 degrees counter-clockwise
};

struct InpaintSample {
    Image image;     ///< original with the square zeroed
    Image mask;      ///< H x W x 1, 1 inside the cut square
    Image original;
    int top = 0, left = 0, side = 0;
};

/// Rectangle in relative image coordinates, fractions of the side in [0,1].
struct Region {
    double row0 = 0.20, row1 = 0.85;
    double col0 = 0.15, col1 = 0.85;
    friend bool operator==(const Region&, const Region&) = default;
};

/// Default per-region weights for a g x g puzzle. 4x4 puzzles down-weight
/// the border (corners 0.5, edges 0.75, interior 1.0); other sizes are uniform.
std::vector<double> default_region_weights(int grid);

// -- puzzling ---------------------------------------------------------------

/// Slice into grid^2 squares, permute uniformly at random, merge.
PuzzleSample make_puzzle(const Image& image, int grid, std::span<const double> weight_map, Rng& rng);

/// Same with an explicit permutation: permutation[j] is the original slot
/// placed at position j.
PuzzleSample make_puzzle(const Image& image, int grid, std::span<const double> weight_map,
                         std::span<const int> permutation);

/// Put the piece at position j back into slot labels[j].
Image unscramble(const Image& puzzled, int grid, std::span<const int> labels);

// -- rotation ---------------------------------------------------------------

constexpr int kRotationClasses = 8;

/// Rotate counter-clockwise about the center. Bilinear, zero fill outside
/// the source.
Image rotate_degrees(const Image& image, double degrees);

/// Rotate by label * 45 degrees CCW. Multiples of 90 degrees are exact
/// index remaps; odd labels interpolate.
Image rotate_label(const Image& image, int label);

RotationSample make_rotation(const Image& image, Rng& rng);
RotationSample make_rotation(const Image& image, int label);

// -- in-painting ------------------------------------------------------------

/// Cut one square of side round(square_side * S) at a uniformly drawn
/// position fully inside `region`.
InpaintSample make_inpaint(const Image& image, const Region& region, double square_side, Rng& rng);

// -- augmentation -----------------------------------------------------------

enum class AugmentLevel { No, Weak, Strong };

std::string to_string(AugmentLevel level);
AugmentLevel parse_augment_level(const std::string& text);

struct AugmentOptions {
    AugmentLevel level = AugmentLevel::No;
    bool allow_rotation = true;  ///< off while a rotation SSH is active
    bool allow_cutout = true;    ///< off while the in-painting pretext owns the cutout
};

/// Sampled magnitudes of one augmentation draw. Identity values mean the
/// sub-transform is skipped.
struct AugmentParams {
    bool flip = false;
    double zoom = 1.0;          ///< central crop scale in [0.69, 1]
    double rotation_deg = 0.0;
    double contrast = 1.0;
    double brightness = 0.0;
    std::array<int, 3> channel_order{0, 1, 2};
    int blur_kernel = 1;
    double noise_variance = 0.0;
    std::uint64_t noise_seed = 0;
    int cutout_side = 0;
    int cutout_top = 0, cutout_left = 0;
};

/// Draw parameters for `side` x `side` inputs.
AugmentParams sample_augment(const AugmentOptions& options, int side, Rng& rng);
/// Apply a parameter set; output is clamped to [0,1].
Image apply_augment(const Image& image, const AugmentParams& params);
/// sample_augment followed by apply_augment.
Image augment(const Image& image, const AugmentOptions& options, Rng& rng);

Image hflip(const Image& image);
Image central_zoom(const Image& image, double scale);
Image adjust_contrast(const Image& image, double factor);
Image adjust_brightness(const Image& image, double delta);
Image swap_channels(const Image& image, const std::array<int, 3>& order);
Image box_blur(const Image& image, int kernel);
Image add_gaussian_noise(const Image& image, double variance, std::uint64_t seed);
Image cutout(const Image& image, int top, int left, int side);
/// Bilinear resize.
Image resize(const Image& image, int height, int width);

/// Cutout side for a given input size: 60 px at 224 px, same area fraction
/// elsewhere.
int scaled_cutout_side(int side);

/// Call counters for the pretext constructors. The validation path is
/// tested against these.
struct CallCounters {
    std::atomic<long> puzzle{0};
    std::atomic<long> rotation{0};
    std::atomic<long> inpaint{0};
    long total() const { return puzzle + rotation + inpaint; }
};
CallCounters& call_counters();

}  // namespace hmtl::pretext
