#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <set>

#include "hmtl/pretext.hpp"
#include "support.hpp"

using namespace hmtl;
using namespace hmtl::pretext;
using hmtl::testing::random_image;
using hmtl::testing::smooth_image;

namespace {

bool is_permutation_of_range(const std::vector<int>& v) {
    std::vector<int> s = v;
    std::sort(s.begin(), s.end());
    for (std::size_t i = 0; i < s.size(); ++i)
        if (s[i] != static_cast<int>(i)) return false;
    return true;
}

// Independent reassembly: copy the piece at position j into slot labels[j].
Image oracle_unscramble(const Image& puzzled, int g, const std::vector<int>& labels) {
    const int p = puzzled.height() / g;
    Image out(puzzled.height(), puzzled.width(), puzzled.channels());
    for (int j = 0; j < g * g; ++j) {
        const int sr = (labels[j] / g) * p, sc = (labels[j] % g) * p;
        const int pr = (j / g) * p, pc = (j % g) * p;
        for (int r = 0; r < p; ++r)
            for (int c = 0; c < p; ++c)
                for (int ch = 0; ch < puzzled.channels(); ++ch)
                    out.at(sr + r, sc + c, ch) = puzzled.at(pr + r, pc + c, ch);
    }
    return out;
}

float max_diff_in_disk(const Image& a, const Image& b, double radius_frac) {
    const double cy = (a.height() - 1) / 2.0, cx = (a.width() - 1) / 2.0;
    const double rad = radius_frac * a.height() / 2.0;
    float m = 0.0f;
    for (int r = 0; r < a.height(); ++r)
        for (int c = 0; c < a.width(); ++c) {
            if ((r - cy) * (r - cy) + (c - cx) * (c - cx) > rad * rad) continue;
            for (int ch = 0; ch < a.channels(); ++ch) m = std::max(m, std::abs(a.at(r, c, ch) - b.at(r, c, ch)));
        }
    return m;
}

}  // namespace

TEST_SUITE("puzzle") {

TEST_CASE("identity permutation leaves the image and labels unchanged") {
    Rng rng(1);
    for (int g : {2, 3, 4}) {
        const Image img = random_image(12 * g, 12 * g, 3, rng);
        std::vector<int> perm(g * g);
        std::iota(perm.begin(), perm.end(), 0);
        const auto w = default_region_weights(g);
        const auto s = make_puzzle(img, g, w, perm);
        CHECK(s.image == img);
        CHECK(s.labels == perm);
    }
}

TEST_CASE("quadrant swap on a 4x4 image") {
    Image img(4, 4, 1);
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) img.at(r, c) = static_cast<float>((r / 2) * 2 + c / 2 + 1);
    const std::vector<int> perm{1, 0, 3, 2};
    const std::vector<double> w(4, 1.0);
    const auto s = make_puzzle(img, 2, w, perm);
    CHECK(s.labels == std::vector<int>{1, 0, 3, 2});
    CHECK(s.image.at(0, 0) == 2.0f);
    CHECK(s.image.at(0, 2) == 1.0f);
    CHECK(s.image.at(2, 0) == 4.0f);
    CHECK(oracle_unscramble(s.image, 2, s.labels) == img);
}

TEST_CASE("uniform weight map gives unit head weights for any permutation") {
    Rng rng(7);
    const Image img = random_image(9, 9, 3, rng);
    const std::vector<double> w(9, 1.0);
    for (int t = 0; t < 50; ++t) {
        const auto s = make_puzzle(img, 3, w, rng);
        CHECK(s.head_weights == std::vector<double>(9, 1.0));
    }
}

TEST_CASE("labels are a bijection and the round trip is pixel exact") {
    for (int g : {2, 3, 4}) {
        Rng img_rng(100 + g);
        const Image img = random_image(8 * g, 8 * g, 3, img_rng);
        std::vector<double> wm(g * g);
        for (int k = 0; k < g * g; ++k) wm[k] = 0.5 + k;
        for (std::uint64_t seed = 0; seed < 1000; ++seed) {
            Rng rng(seed);
            const auto s = make_puzzle(img, g, wm, rng);
            REQUIRE(is_permutation_of_range(s.labels));
            REQUIRE(unscramble(s.image, g, s.labels) == img);
            REQUIRE(oracle_unscramble(s.image, g, s.labels) == img);
            // weights travel with the pieces
            for (int j = 0; j < g * g; ++j) REQUIRE(s.head_weights[j] == wm[s.labels[j]]);
            auto a = s.head_weights, b = wm;
            std::sort(a.begin(), a.end());
            std::sort(b.begin(), b.end());
            REQUIRE(a == b);
        }
    }
}

TEST_CASE("permutations are drawn uniformly") {
    Rng img_rng(3);
    const Image img = random_image(8, 8, 1, img_rng);
    const std::vector<double> w(4, 1.0);
    std::map<std::vector<int>, int> seen;
    Rng rng(11);
    const int n = 24000;
    for (int i = 0; i < n; ++i) ++seen[make_puzzle(img, 2, w, rng).labels];
    CHECK(seen.size() == 24);
    // chi-square with 23 dof; 0.999 quantile is about 49.7
    double chi = 0.0;
    for (const auto& [k, c] : seen) chi += (c - 1000.0) * (c - 1000.0) / 1000.0;
    CHECK(chi < 49.7);
}

TEST_CASE("rejections") {
    Rng rng(0);
    const Image img = random_image(10, 10, 3, rng);
    const std::vector<double> w4(4, 1.0), w9(9, 1.0);
    CHECK_THROWS_AS(make_puzzle(img, 3, w9, rng), std::invalid_argument);
    CHECK_THROWS_AS(make_puzzle(img, 2, w9, rng), std::invalid_argument);
    const std::vector<double> bad{1.0, 0.0, 1.0, 1.0};
    CHECK_THROWS_AS(make_puzzle(img, 2, bad, rng), std::invalid_argument);
    CHECK_THROWS_AS(make_puzzle(random_image(10, 12, 3, rng), 2, w4, rng), std::invalid_argument);
}

TEST_CASE("default region weights") {
    CHECK(default_region_weights(2) == std::vector<double>(4, 1.0));
    CHECK(default_region_weights(3) == std::vector<double>(9, 1.0));
    const auto w = default_region_weights(4);
    REQUIRE(w.size() == 16);
    CHECK(w[0] == 0.5);
    CHECK(w[3] == 0.5);
    CHECK(w[12] == 0.5);
    CHECK(w[15] == 0.5);
    CHECK(w[1] == 0.75);
    CHECK(w[4] == 0.75);
    CHECK(w[5] == 1.0);
    CHECK(w[10] == 1.0);
}

}  // TEST_SUITE

TEST_SUITE("rotation") {

TEST_CASE("label 0 is the identity") {
    Rng rng(2);
    const Image img = random_image(16, 16, 3, rng);
    CHECK(make_rotation(img, 0).image == img);
}

TEST_CASE("90 degrees on a 2x2 image") {
    Image img(2, 2, 1);
    img.at(0, 0) = 1;
    img.at(0, 1) = 2;
    img.at(1, 0) = 3;
    img.at(1, 1) = 4;
    const Image out = make_rotation(img, 2).image;
    // (r, c) -> (W-1-c, r)
    Image expect(2, 2, 1);
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 2; ++c) expect.at(1 - c, r) = img.at(r, c);
    CHECK(out == expect);
    CHECK(out.at(0, 0) == 2.0f);
    CHECK(out.at(0, 1) == 4.0f);
    CHECK(out.at(1, 0) == 1.0f);
    CHECK(out.at(1, 1) == 3.0f);
}

TEST_CASE("right-angle compositions are exact") {
    Rng rng(5);
    for (int t = 0; t < 20; ++t) {
        const Image img = random_image(13, 13, 3, rng);
        for (int a : {0, 2, 4, 6})
            for (int b : {0, 2, 4, 6})
                CHECK(rotate_label(rotate_label(img, a), b) == rotate_label(img, (a + b) % 8));
        CHECK(rotate_label(img, 4) == rotate_label(rotate_label(img, 2), 2));
    }
}

TEST_CASE("mixed compositions agree on the inscribed disk") {
    // Zero fill outside the source makes the corners differ; compare inside
    // the disk that every rotation keeps, on low-frequency images.
    Rng rng(9);
    for (int t = 0; t < 5; ++t) {
        const Image img = smooth_image(48, rng);
        for (int a = 0; a < 8; ++a)
            for (int b = 0; b < 8; ++b) {
                const Image lhs = rotate_label(rotate_label(img, a), b);
                const Image rhs = rotate_label(img, (a + b) % 8);
                CHECK(max_diff_in_disk(lhs, rhs, 0.9) <= 0.05f);
            }
    }
}

TEST_CASE("odd labels rotate by 45 degrees about the center") {
    // A single bright pixel on the +x axis moves to the upper-right diagonal.
    Image img(33, 33, 1, 0.0f);
    img.at(16, 26) = 1.0f;
    const Image out = rotate_label(img, 1);
    int br = 0, bc = 0;
    float best = -1.0f;
    for (int r = 0; r < 33; ++r)
        for (int c = 0; c < 33; ++c)
            if (out.at(r, c) > best) {
                best = out.at(r, c);
                br = r;
                bc = c;
            }
    CHECK(br == 16 - 7);
    CHECK(bc == 16 + 7);
}

TEST_CASE("random labels cover all eight classes") {
    Rng img_rng(1);
    const Image img = random_image(8, 8, 3, img_rng);
    Rng rng(4);
    std::set<int> labels;
    for (int i = 0; i < 200; ++i) {
        const auto s = make_rotation(img, rng);
        CHECK(s.label >= 0);
        CHECK(s.label < 8);
        labels.insert(s.label);
    }
    CHECK(labels.size() == 8);
}

TEST_CASE("non-square input is rejected") {
    Rng rng(0);
    CHECK_THROWS_AS(make_rotation(random_image(8, 10, 3, rng), rng), std::invalid_argument);
}

}  // TEST_SUITE

TEST_SUITE("inpaint") {

TEST_CASE("zero side is a no-op") {
    Rng rng(0);
    const Image img = random_image(32, 32, 3, rng);
    const auto s = make_inpaint(img, Region{}, 0.0, rng);
    CHECK(s.image == img);
    CHECK(std::all_of(s.mask.data().begin(), s.mask.data().end(), [](float v) { return v == 0.0f; }));
}

TEST_CASE("half side on the full image cuts exactly 1024 pixels") {
    Rng rng(1);
    const Image img = random_image(64, 64, 3, rng);
    const Region full{0.0, 1.0, 0.0, 1.0};
    for (int t = 0; t < 20; ++t) {
        const auto s = make_inpaint(img, full, 0.5, rng);
        double sum = 0.0;
        for (float v : s.mask.data()) sum += v;
        CHECK(sum == 1024.0);
    }
}

TEST_CASE("mask invariants hold for random draws") {
    Rng rng(2);
    const Region region{};
    for (int t = 0; t < 300; ++t) {
        const int side = 16 * (1 + static_cast<int>(rng.below(4)));
        const Image img = random_image(side, side, 3, rng);
        const double frac = rng.uniform(0.05, 0.6);
        const auto s = make_inpaint(img, region, frac, rng);
        REQUIRE(s.original == img);
        int min_r = side, max_r = -1, min_c = side, max_c = -1, ones = 0;
        for (int r = 0; r < side; ++r)
            for (int c = 0; c < side; ++c) {
                const float m = s.mask.at(r, c);
                REQUIRE((m == 0.0f || m == 1.0f));
                for (int ch = 0; ch < 3; ++ch) {
                    if (m == 0.0f) REQUIRE(s.image.at(r, c, ch) == img.at(r, c, ch));
                    else REQUIRE(s.image.at(r, c, ch) == 0.0f);
                }
                if (m == 1.0f) {
                    ++ones;
                    min_r = std::min(min_r, r);
                    max_r = std::max(max_r, r);
                    min_c = std::min(min_c, c);
                    max_c = std::max(max_c, c);
                }
            }
        // one axis-aligned square
        const int h = max_r - min_r + 1, w = max_c - min_c + 1;
        REQUIRE(h == w);
        REQUIRE(ones == h * w);
        REQUIRE(h == s.side);
        // inside the region
        REQUIRE(min_r >= std::lround(region.row0 * side));
        REQUIRE(max_r < std::lround(region.row1 * side));
        REQUIRE(min_c >= std::lround(region.col0 * side));
        REQUIRE(max_c < std::lround(region.col1 * side));
    }
}

TEST_CASE("square larger than the region is rejected") {
    Rng rng(0);
    const Image img = random_image(64, 64, 3, rng);
    CHECK_THROWS_AS(make_inpaint(img, Region{0.2, 0.4, 0.2, 0.9}, 0.4, rng), std::invalid_argument);
}

}  // TEST_SUITE

TEST_SUITE("augment") {

TEST_CASE("each level samples exactly its transform set") {
    Rng rng(12);
    const int side = 64;
    for (int t = 0; t < 500; ++t) {
        const auto no = sample_augment({AugmentLevel::No}, side, rng);
        CHECK(no.zoom == 1.0);
        CHECK(no.contrast == 1.0);
        CHECK(no.rotation_deg == 0.0);
        CHECK(no.brightness == 0.0);
        CHECK(no.blur_kernel == 1);
        CHECK(no.noise_variance == 0.0);
        CHECK(no.cutout_side == 0);

        const auto weak = sample_augment({AugmentLevel::Weak}, side, rng);
        CHECK(weak.zoom >= 0.69);
        CHECK(weak.zoom <= 1.0);
        CHECK(weak.contrast >= 0.6);
        CHECK(weak.contrast <= 1.4);
        CHECK(std::abs(weak.rotation_deg) <= 15.0);
        CHECK(weak.brightness == 0.0);
        CHECK(weak.channel_order == std::array<int, 3>{0, 1, 2});
        CHECK(weak.blur_kernel == 1);
        CHECK(weak.noise_variance == 0.0);
        CHECK(weak.cutout_side == 0);

        const auto strong = sample_augment({AugmentLevel::Strong}, side, rng);
        CHECK(std::abs(strong.rotation_deg) <= 20.0);
        CHECK(std::abs(strong.brightness) <= 0.05);
        auto order = strong.channel_order;
        std::sort(order.begin(), order.end());
        CHECK(order == std::array<int, 3>{0, 1, 2});
        CHECK((strong.blur_kernel == 1 || strong.blur_kernel == 3 || strong.blur_kernel == 5));
        CHECK(strong.noise_variance >= 0.0);
        CHECK(strong.noise_variance <= 0.05);
        CHECK(strong.cutout_side == scaled_cutout_side(side));
        CHECK(strong.cutout_top + strong.cutout_side <= side);
        CHECK(strong.cutout_left + strong.cutout_side <= side);
    }
    CHECK(scaled_cutout_side(224) == 60);
    CHECK(scaled_cutout_side(64) == 17);
}

TEST_CASE("rotation and cutout can be switched off") {
    Rng a(5), b(5);
    const auto on = sample_augment({AugmentLevel::Strong}, 64, a);
    const auto off = sample_augment({AugmentLevel::Strong, false, false}, 64, b);
    CHECK(off.rotation_deg == 0.0);
    CHECK(off.cutout_side == 0);
    // other draws are unaffected
    CHECK(off.zoom == on.zoom);
    CHECK(off.contrast == on.contrast);
    CHECK(off.brightness == on.brightness);
    CHECK(off.noise_seed == on.noise_seed);
}

TEST_CASE("identity parameters leave the image untouched") {
    Rng rng(3);
    const Image img = random_image(32, 32, 3, rng);
    CHECK(apply_augment(img, AugmentParams{}) == img);
    CHECK(box_blur(img, 1) == img);
    CHECK(adjust_contrast(img, 1.0) == img);
    CHECK(adjust_brightness(img, 0.0) == img);
    CHECK(add_gaussian_noise(img, 0.0, 7) == img);
    CHECK(central_zoom(img, 1.0) == img);
    CHECK(swap_channels(img, {0, 1, 2}) == img);
}

TEST_CASE("level No with the flip drawn false is the identity") {
    Rng img_rng(4);
    const Image img = random_image(16, 16, 3, img_rng);
    int identities = 0, flips = 0;
    for (std::uint64_t s = 0; s < 100; ++s) {
        Rng probe(s), rng(s);
        const bool flip = sample_augment({AugmentLevel::No}, 16, probe).flip;
        const Image out = augment(img, {AugmentLevel::No}, rng);
        if (flip) {
            CHECK(out == hflip(img));
            ++flips;
        } else {
            CHECK(out == img);
            ++identities;
        }
    }
    CHECK(identities > 0);
    CHECK(flips > 0);
}

TEST_CASE("outputs stay in [0,1] and are reproducible") {
    Rng img_rng(8);
    const Image img = random_image(32, 32, 3, img_rng);
    for (std::uint64_t s = 0; s < 50; ++s) {
        Rng a(s), b(s);
        const Image x = augment(img, {AugmentLevel::Strong}, a);
        const Image y = augment(img, {AugmentLevel::Strong}, b);
        CHECK(x == y);
        CHECK(std::all_of(x.data().begin(), x.data().end(), [](float v) { return v >= 0.0f && v <= 1.0f; }));
    }
}

TEST_CASE("simple transform oracles") {
    Image img(2, 3, 3);
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 3; ++c)
            for (int ch = 0; ch < 3; ++ch) img.at(r, c, ch) = 0.1f * (r * 3 + c) + 0.01f * ch;
    const Image f = hflip(img);
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 3; ++c) CHECK(f.at(r, c, 1) == img.at(r, 2 - c, 1));
    const Image sw = swap_channels(img, {2, 0, 1});
    CHECK(sw.at(1, 1, 0) == img.at(1, 1, 2));
    CHECK(sw.at(1, 1, 1) == img.at(1, 1, 0));
    const Image cut = cutout(img, 0, 1, 1);
    CHECK(cut.at(0, 1, 0) == 0.0f);
    CHECK(cut.at(0, 0, 0) == img.at(0, 0, 0));
}

}  // TEST_SUITE

TEST_SUITE("determinism") {

TEST_CASE("same seed gives bit-identical outputs") {
    Rng img_rng(21);
    const Image img = random_image(24, 24, 3, img_rng);
    const auto w = default_region_weights(3);
    for (std::uint64_t s = 0; s < 30; ++s) {
        Rng a(s), b(s);
        const auto p1 = make_puzzle(img, 3, w, a);
        const auto p2 = make_puzzle(img, 3, w, b);
        CHECK(p1.image == p2.image);
        CHECK(p1.labels == p2.labels);
        const auto r1 = make_rotation(img, a);
        const auto r2 = make_rotation(img, b);
        CHECK(r1.image == r2.image);
        const auto i1 = make_inpaint(img, Region{}, 0.4, a);
        const auto i2 = make_inpaint(img, Region{}, 0.4, b);
        CHECK(i1.image == i2.image);
        CHECK(i1.mask == i2.mask);
    }
}

TEST_CASE("golden fixtures") {
    namespace fs = std::filesystem;
    const fs::path dir = HMTL_GOLDEN_DIR;
    const bool update = std::getenv("HMTL_UPDATE_GOLDEN") != nullptr;
    Image base(16, 16, 3);
    for (int r = 0; r < 16; ++r)
        for (int c = 0; c < 16; ++c)
            for (int ch = 0; ch < 3; ++ch)
                base.at(r, c, ch) = static_cast<float>(((r * 7 + c * 13 + ch * 5) % 17) / 16.0);
    const std::uint64_t seed = 2024;
    struct Case {
        std::string name;
        Image out;
    };
    std::vector<Case> cases;
    {
        Rng rng(seed);
        cases.push_back({"puzzle_g4", make_puzzle(base, 4, default_region_weights(4), rng).image});
    }
    cases.push_back({"rotation_label3", rotate_label(base, 3)});
    {
        Rng rng(seed);
        cases.push_back({"inpaint", make_inpaint(base, Region{}, 0.4, rng).image});
    }
    {
        Rng rng(seed);
        cases.push_back({"augment_strong", augment(base, {AugmentLevel::Strong}, rng)});
    }
    for (const auto& c : cases) {
        CAPTURE(c.name);
        if (update) {
            fs::create_directories(dir);
            hmtl::testing::write_golden(dir / c.name, c.out, seed, c.name);
            continue;
        }
        Image golden;
        hmtl::testing::GoldenHeader h;
        REQUIRE(hmtl::testing::read_golden(dir / c.name, golden, h));
        CHECK(h.seed == seed);
        CHECK(h.transform == c.name);
        CHECK(golden == c.out);
    }
}

}  // TEST_SUITE

TEST_CASE("call counters track pretext constructors") {
    auto& cc = call_counters();
    const long p0 = cc.puzzle, r0 = cc.rotation, i0 = cc.inpaint;
    Rng rng(0);
    const Image img = random_image(16, 16, 3, rng);
    make_puzzle(img, 2, default_region_weights(2), rng);
    make_rotation(img, rng);
    make_inpaint(img, Region{}, 0.25, rng);
    augment(img, {AugmentLevel::Strong}, rng);
    CHECK(cc.puzzle == p0 + 1);
    CHECK(cc.rotation == r0 + 1);
    CHECK(cc.inpaint == i0 + 1);
}
