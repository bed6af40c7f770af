#include "hmtl/pretext.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace hmtl::pretext {

CallCounters& call_counters() {
    static CallCounters counters;
    return counters;
}

std::vector<double> default_region_weights(int grid) {
    if (grid < 1) throw std::invalid_argument("default_region_weights: grid must be >= 1");
    std::vector<double> w(static_cast<std::size_t>(grid) * grid, 1.0);
    if (grid != 4) return w;
    for (int r = 0; r < grid; ++r) {
        for (int c = 0; c < grid; ++c) {
            const bool row_edge = r == 0 || r == grid - 1;
            const bool col_edge = c == 0 || c == grid - 1;
            double v = 1.0;
            if (row_edge && col_edge) v = 0.5;
            else if (row_edge || col_edge) v = 0.75;
            w[static_cast<std::size_t>(r) * grid + c] = v;
        }
    }
    return w;
}

namespace {

void check_puzzle_args(const Image& image, int grid, std::span<const double> weight_map) {
    if (grid < 2) throw std::invalid_argument("make_puzzle: grid must be >= 2");
    if (!image.square()) throw std::invalid_argument("make_puzzle: image must be square");
    if (image.height() % grid != 0)
        throw std::invalid_argument("make_puzzle: image side " + std::to_string(image.height()) +
                                    " is not divisible by grid " + std::to_string(grid));
    const auto n = static_cast<std::size_t>(grid) * grid;
    if (weight_map.size() != n)
        throw std::invalid_argument("make_puzzle: weight_map has " + std::to_string(weight_map.size()) +
                                    " entries, expected " + std::to_string(n));
    for (double w : weight_map)
        if (!(w > 0.0)) throw std::invalid_argument("make_puzzle: weight_map entries must be > 0");
}

void copy_piece(const Image& src, int src_slot, Image& dst, int dst_slot, int grid) {
    const int piece = src.height() / grid;
    const int sr = (src_slot / grid) * piece, sc = (src_slot % grid) * piece;
    const int dr = (dst_slot / grid) * piece, dc = (dst_slot % grid) * piece;
    const int ch = src.channels();
    for (int r = 0; r < piece; ++r) {
        const float* from = src.ptr(sr + r, sc);
        float* to = dst.ptr(dr + r, dc);
        std::copy(from, from + piece * ch, to);
    }
}

}  // namespace

PuzzleSample make_puzzle(const Image& image, int grid, std::span<const double> weight_map,
                         std::span<const int> permutation) {
    check_puzzle_args(image, grid, weight_map);
    const int n = grid * grid;
    if (static_cast<int>(permutation.size()) != n)
        throw std::invalid_argument("make_puzzle: permutation length mismatch");
    std::vector<char> seen(n, 0);
    for (int p : permutation) {
        if (p < 0 || p >= n || seen[p]) throw std::invalid_argument("make_puzzle: not a permutation");
        seen[p] = 1;
    }
    ++call_counters().puzzle;

    PuzzleSample out;
    out.image = Image(image.height(), image.width(), image.channels());
    out.labels.assign(permutation.begin(), permutation.end());
    out.head_weights.resize(n);
    for (int j = 0; j < n; ++j) {
        copy_piece(image, permutation[j], out.image, j, grid);
        out.head_weights[j] = weight_map[permutation[j]];
    }
    return out;
}

PuzzleSample make_puzzle(const Image& image, int grid, std::span<const double> weight_map, Rng& rng) {
    check_puzzle_args(image, grid, weight_map);
    std::vector<int> perm(static_cast<std::size_t>(grid) * grid);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm.begin(), perm.end());
    return make_puzzle(image, grid, weight_map, std::span<const int>(perm));
}

Image unscramble(const Image& puzzled, int grid, std::span<const int> labels) {
    if (!puzzled.square() || grid < 1 || puzzled.height() % grid != 0)
        throw std::invalid_argument("unscramble: incompatible image/grid");
    if (static_cast<int>(labels.size()) != grid * grid)
        throw std::invalid_argument("unscramble: label count mismatch");
    Image out(puzzled.height(), puzzled.width(), puzzled.channels());
    for (int j = 0; j < grid * grid; ++j) copy_piece(puzzled, j, out, labels[j], grid);
    return out;
}

// -- rotation ---------------------------------------------------------------

namespace {

// out(r, c) = in(c, W-1-r): one quarter turn counter-clockwise.
Image rot90_ccw(const Image& in) {
    const int s = in.height();
    Image out(s, s, in.channels());
    for (int r = 0; r < s; ++r)
        for (int c = 0; c < s; ++c)
            for (int ch = 0; ch < in.channels(); ++ch) out.at(r, c, ch) = in.at(c, s - 1 - r, ch);
    return out;
}

float sample_zero(const Image& img, double y, double x, int ch) {
    const int y0 = static_cast<int>(std::floor(y));
    const int x0 = static_cast<int>(std::floor(x));
    const double fy = y - y0, fx = x - x0;
    double acc = 0.0;
    for (int dy = 0; dy < 2; ++dy) {
        const int yy = y0 + dy;
        if (yy < 0 || yy >= img.height()) continue;
        const double wy = dy ? fy : 1.0 - fy;
        for (int dx = 0; dx < 2; ++dx) {
            const int xx = x0 + dx;
            if (xx < 0 || xx >= img.width()) continue;
            const double wx = dx ? fx : 1.0 - fx;
            acc += wy * wx * img.at(yy, xx, ch);
        }
    }
    return static_cast<float>(acc);
}

float sample_clamped(const Image& img, double y, double x, int ch) {
    y = std::clamp(y, 0.0, img.height() - 1.0);
    x = std::clamp(x, 0.0, img.width() - 1.0);
    const int y0 = static_cast<int>(std::floor(y));
    const int x0 = static_cast<int>(std::floor(x));
    const int y1 = std::min(y0 + 1, img.height() - 1);
    const int x1 = std::min(x0 + 1, img.width() - 1);
    const double fy = y - y0, fx = x - x0;
    const double top = (1 - fx) * img.at(y0, x0, ch) + fx * img.at(y0, x1, ch);
    const double bot = (1 - fx) * img.at(y1, x0, ch) + fx * img.at(y1, x1, ch);
    return static_cast<float>((1 - fy) * top + fy * bot);
}

}  // namespace

Image rotate_degrees(const Image& image, double degrees) {
    if (degrees == 0.0) return image;
    const double theta = degrees * std::numbers::pi / 180.0;
    const double cs = std::cos(theta), sn = std::sin(theta);
    const double cy = (image.height() - 1) / 2.0, cx = (image.width() - 1) / 2.0;
    Image out(image.height(), image.width(), image.channels());
    for (int r = 0; r < image.height(); ++r) {
        for (int c = 0; c < image.width(); ++c) {
            const double xo = c - cx, yo = r - cy;
            // Inverse of the CCW map (x, y) -> (x cos + y sin, -x sin + y cos), y down.
            const double xs = cs * xo - sn * yo + cx;
            const double ys = sn * xo + cs * yo + cy;
            for (int ch = 0; ch < image.channels(); ++ch) out.at(r, c, ch) = sample_zero(image, ys, xs, ch);
        }
    }
    return out;
}

Image rotate_label(const Image& image, int label) {
    if (!image.square()) throw std::invalid_argument("rotate: image must be square");
    if (label < 0 || label >= kRotationClasses) throw std::invalid_argument("rotate: label out of [0,8)");
    if (label % 2 == 1) return rotate_degrees(image, 45.0 * label);
    Image out = image;
    for (int k = 0; k < label / 2; ++k) out = rot90_ccw(out);
    return out;
}

RotationSample make_rotation(const Image& image, int label) {
    if (!image.square()) throw std::invalid_argument("make_rotation: image must be square");
    ++call_counters().rotation;
    return {rotate_label(image, label), label};
}

RotationSample make_rotation(const Image& image, Rng& rng) {
    if (!image.square()) throw std::invalid_argument("make_rotation: image must be square");
    return make_rotation(image, static_cast<int>(rng.below(kRotationClasses)));
}

// -- in-painting ------------------------------------------------------------

InpaintSample make_inpaint(const Image& image, const Region& region, double square_side, Rng& rng) {
    if (!image.square()) throw std::invalid_argument("make_inpaint: image must be square");
    if (square_side < 0.0 || square_side > 1.0)
        throw std::invalid_argument("make_inpaint: square_side must be in [0,1]");
    if (!(0.0 <= region.row0 && region.row0 < region.row1 && region.row1 <= 1.0 && 0.0 <= region.col0 &&
          region.col0 < region.col1 && region.col1 <= 1.0))
        throw std::invalid_argument("make_inpaint: invalid region");
    const int s = image.height();
    const int r0 = static_cast<int>(std::lround(region.row0 * s));
    const int r1 = static_cast<int>(std::lround(region.row1 * s));
    const int c0 = static_cast<int>(std::lround(region.col0 * s));
    const int c1 = static_cast<int>(std::lround(region.col1 * s));
    const int side = static_cast<int>(std::lround(square_side * s));
    if (side > r1 - r0 || side > c1 - c0)
        throw std::invalid_argument("make_inpaint: square of " + std::to_string(side) +
                                    " px does not fit inside the region");
    ++call_counters().inpaint;

    InpaintSample out;
    out.original = image;
    out.side = side;
    out.top = r0 + static_cast<int>(rng.below(static_cast<std::uint64_t>(r1 - r0 - side) + 1));
    out.left = c0 + static_cast<int>(rng.below(static_cast<std::uint64_t>(c1 - c0 - side) + 1));
    out.mask = Image(s, s, 1, 0.0f);
    for (int r = out.top; r < out.top + side; ++r)
        for (int c = out.left; c < out.left + side; ++c) out.mask.at(r, c) = 1.0f;
    out.image = cutout(image, out.top, out.left, side);
    return out;
}

// -- augmentation -----------------------------------------------------------

std::string to_string(AugmentLevel level) {
    switch (level) {
        case AugmentLevel::No: return "no";
        case AugmentLevel::Weak: return "weak";
        case AugmentLevel::Strong: return "strong";
    }
    return "no";
}

AugmentLevel parse_augment_level(const std::string& text) {
    if (text == "no" || text == "none") return AugmentLevel::No;
    if (text == "weak") return AugmentLevel::Weak;
    if (text == "strong") return AugmentLevel::Strong;
    throw std::invalid_argument("unknown augment level '" + text + "' (expected no|weak|strong)");
}

Image hflip(const Image& image) {
    Image out(image.height(), image.width(), image.channels());
    for (int r = 0; r < image.height(); ++r)
        for (int c = 0; c < image.width(); ++c)
            for (int ch = 0; ch < image.channels(); ++ch)
                out.at(r, image.width() - 1 - c, ch) = image.at(r, c, ch);
    return out;
}

Image resize(const Image& image, int height, int width) {
    if (height == image.height() && width == image.width()) return image;
    Image out(height, width, image.channels());
    const double sy = static_cast<double>(image.height()) / height;
    const double sx = static_cast<double>(image.width()) / width;
    for (int r = 0; r < height; ++r)
        for (int c = 0; c < width; ++c)
            for (int ch = 0; ch < image.channels(); ++ch)
                out.at(r, c, ch) = sample_clamped(image, (r + 0.5) * sy - 0.5, (c + 0.5) * sx - 0.5, ch);
    return out;
}

Image central_zoom(const Image& image, double scale) {
    if (!(scale > 0.0 && scale <= 1.0)) throw std::invalid_argument("central_zoom: scale must be in (0,1]");
    const int ch = std::max(1, static_cast<int>(std::lround(image.height() * scale)));
    const int cw = std::max(1, static_cast<int>(std::lround(image.width() * scale)));
    if (ch == image.height() && cw == image.width()) return image;
    const int top = (image.height() - ch) / 2, left = (image.width() - cw) / 2;
    Image crop(ch, cw, image.channels());
    for (int r = 0; r < ch; ++r)
        for (int c = 0; c < cw; ++c)
            for (int k = 0; k < image.channels(); ++k) crop.at(r, c, k) = image.at(top + r, left + c, k);
    return resize(crop, image.height(), image.width());
}

Image adjust_contrast(const Image& image, double factor) {
    if (factor == 1.0) return image;
    Image out = image;
    const int n = image.height() * image.width();
    for (int ch = 0; ch < image.channels(); ++ch) {
        double mean = 0.0;
        for (int r = 0; r < image.height(); ++r)
            for (int c = 0; c < image.width(); ++c) mean += image.at(r, c, ch);
        mean /= n;
        for (int r = 0; r < image.height(); ++r)
            for (int c = 0; c < image.width(); ++c)
                out.at(r, c, ch) = static_cast<float>((image.at(r, c, ch) - mean) * factor + mean);
    }
    return out;
}

Image adjust_brightness(const Image& image, double delta) {
    if (delta == 0.0) return image;
    Image out = image;
    for (float& v : out.data()) v = static_cast<float>(v + delta);
    return out;
}

Image swap_channels(const Image& image, const std::array<int, 3>& order) {
    if (image.channels() != 3) throw std::invalid_argument("swap_channels: expects 3 channels");
    if (order == std::array<int, 3>{0, 1, 2}) return image;
    Image out(image.height(), image.width(), 3);
    for (int r = 0; r < image.height(); ++r)
        for (int c = 0; c < image.width(); ++c)
            for (int ch = 0; ch < 3; ++ch) out.at(r, c, ch) = image.at(r, c, order[ch]);
    return out;
}

Image box_blur(const Image& image, int kernel) {
    if (kernel < 1 || kernel % 2 == 0) throw std::invalid_argument("box_blur: kernel must be odd and >= 1");
    if (kernel == 1) return image;
    const int h = kernel / 2;
    const int H = image.height(), W = image.width(), C = image.channels();
    Image tmp(H, W, C), out(H, W, C);
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c)
            for (int ch = 0; ch < C; ++ch) {
                double s = 0.0;
                for (int d = -h; d <= h; ++d) s += image.at(r, std::clamp(c + d, 0, W - 1), ch);
                tmp.at(r, c, ch) = static_cast<float>(s / kernel);
            }
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c)
            for (int ch = 0; ch < C; ++ch) {
                double s = 0.0;
                for (int d = -h; d <= h; ++d) s += tmp.at(std::clamp(r + d, 0, H - 1), c, ch);
                out.at(r, c, ch) = static_cast<float>(s / kernel);
            }
    return out;
}

Image add_gaussian_noise(const Image& image, double variance, std::uint64_t seed) {
    if (variance < 0.0) throw std::invalid_argument("add_gaussian_noise: negative variance");
    if (variance == 0.0) return image;
    Rng rng(seed);
    const double sd = std::sqrt(variance);
    Image out = image;
    for (float& v : out.data()) v = static_cast<float>(v + sd * rng.normal());
    return out;
}

Image cutout(const Image& image, int top, int left, int side) {
    Image out = image;
    for (int r = std::max(0, top); r < std::min(image.height(), top + side); ++r)
        for (int c = std::max(0, left); c < std::min(image.width(), left + side); ++c)
            for (int ch = 0; ch < image.channels(); ++ch) out.at(r, c, ch) = 0.0f;
    return out;
}

int scaled_cutout_side(int side) {
    return static_cast<int>(std::lround(60.0 * side / 224.0));
}

AugmentParams sample_augment(const AugmentOptions& options, int side, Rng& rng) {
    AugmentParams p;
    // Every level draws from the generator in the same order so that
    // enabling a later transform does not shift earlier draws.
    p.flip = rng.bernoulli(0.5);
    if (options.level == AugmentLevel::No) return p;

    p.zoom = rng.uniform(0.69, 1.0);
    p.contrast = rng.uniform(0.6, 1.4);
    const double max_rot = options.level == AugmentLevel::Weak ? 15.0 : 20.0;
    const double rot = rng.uniform(-max_rot, max_rot);
    if (options.allow_rotation) p.rotation_deg = rot;
    if (options.level == AugmentLevel::Weak) return p;

    p.brightness = rng.uniform(-0.05, 0.05);
    rng.shuffle(p.channel_order.begin(), p.channel_order.end());
    static constexpr int kKernels[] = {1, 3, 5};
    p.blur_kernel = kKernels[rng.below(3)];
    p.noise_variance = rng.uniform(0.0, 0.05);
    p.noise_seed = rng.next();
    const int cut = std::min(side, scaled_cutout_side(side));
    const int top = static_cast<int>(rng.below(static_cast<std::uint64_t>(side - cut) + 1));
    const int left = static_cast<int>(rng.below(static_cast<std::uint64_t>(side - cut) + 1));
    if (options.allow_cutout) {
        p.cutout_side = cut;
        p.cutout_top = top;
        p.cutout_left = left;
    }
    return p;
}

Image apply_augment(const Image& image, const AugmentParams& p) {
    Image out = p.flip ? hflip(image) : image;
    if (p.zoom != 1.0) out = central_zoom(out, p.zoom);
    if (p.rotation_deg != 0.0) out = rotate_degrees(out, p.rotation_deg);
    out = adjust_contrast(out, p.contrast);
    out = adjust_brightness(out, p.brightness);
    if (out.channels() == 3) out = swap_channels(out, p.channel_order);
    out = box_blur(out, p.blur_kernel);
    out = add_gaussian_noise(out, p.noise_variance, p.noise_seed);
    if (p.cutout_side > 0) out = cutout(out, p.cutout_top, p.cutout_left, p.cutout_side);
    clamp01(out);
    return out;
}

Image augment(const Image& image, const AugmentOptions& options, Rng& rng) {
    return apply_augment(image, sample_augment(options, image.height(), rng));
}

}  // namespace hmtl::pretext
