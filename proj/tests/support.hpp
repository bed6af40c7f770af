#pragma once

// Shared helpers for the test binaries: generators, finite differences,
// scratch directories and the float32 golden-fixture format.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "hmtl/image.hpp"
#include "hmtl/rng.hpp"
#include "hmtl/tensor.hpp"

namespace hmtl::testing {

inline Image random_image(int h, int w, int c, Rng& rng) {
    Image img(h, w, c);
    for (float& v : img.data()) v = static_cast<float>(rng.uniform());
    return img;
}

/// Low-frequency image: a few random sinusoids, values in [0,1].
inline Image smooth_image(int side, Rng& rng) {
    Image img(side, side, 3);
    for (int ch = 0; ch < 3; ++ch) {
        double fx[3], fy[3], ph[3];
        for (int k = 0; k < 3; ++k) {
            fx[k] = rng.uniform(-1.5, 1.5);
            fy[k] = rng.uniform(-1.5, 1.5);
            ph[k] = rng.uniform(0.0, 6.28);
        }
        for (int r = 0; r < side; ++r)
            for (int c = 0; c < side; ++c) {
                double v = 0.0;
                for (int k = 0; k < 3; ++k)
                    v += std::sin(6.283185307 * (fx[k] * r + fy[k] * c) / side + ph[k]);
                img.at(r, c, ch) = static_cast<float>(0.5 + v / 6.0);
            }
    }
    return img;
}

/// Strictly positive probability vector.
inline std::vector<double> random_simplex(int k, Rng& rng, double spread = 2.0) {
    std::vector<double> p(static_cast<std::size_t>(k));
    double s = 0.0;
    for (double& v : p) {
        v = std::exp(spread * rng.normal());
        s += v;
    }
    for (double& v : p) v /= s;
    return p;
}

inline std::vector<double> random_vector(int n, Rng& rng, double scale = 1.0) {
    std::vector<double> v(static_cast<std::size_t>(n));
    for (double& x : v) x = scale * rng.normal();
    return v;
}

inline Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (float& v : t.data) v = static_cast<float>(rng.uniform(lo, hi));
    return t;
}

/// Central differences of f at x.
inline std::vector<double> numeric_grad(const std::function<double(const std::vector<double>&)>& f,
                                        std::vector<double> x, double h = 1e-5) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double x0 = x[i];
        x[i] = x0 + h;
        const double fp = f(x);
        x[i] = x0 - h;
        const double fm = f(x);
        x[i] = x0;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

/// ||a - b|| / max(||a||, ||b||, floor)
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-8) {
    double d = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        d += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return std::sqrt(d) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

/// Scratch directory removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("hmtl_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

private:
    std::filesystem::path path_;
};

// Golden fixtures: <name>.f32 holds little-endian float32 H x W x C values,
// <name>.txt the header lines "height", "width", "channels", "seed", "transform".

struct GoldenHeader {
    int height = 0, width = 0, channels = 3;
    std::uint64_t seed = 0;
    std::string transform;
};

inline void write_golden(const std::filesystem::path& stem, const Image& img, std::uint64_t seed,
                         const std::string& transform) {
    std::ofstream hdr(stem.string() + ".txt");
    hdr << "height " << img.height() << "\nwidth " << img.width() << "\nchannels " << img.channels() << "\nseed "
        << seed << "\ntransform " << transform << "\n";
    std::ofstream bin(stem.string() + ".f32", std::ios::binary);
    for (float v : img.data()) {
        std::uint32_t u;
        std::memcpy(&u, &v, 4);
        const unsigned char b[4] = {static_cast<unsigned char>(u), static_cast<unsigned char>(u >> 8),
                                    static_cast<unsigned char>(u >> 16), static_cast<unsigned char>(u >> 24)};
        bin.write(reinterpret_cast<const char*>(b), 4);
    }
}

inline bool read_golden(const std::filesystem::path& stem, Image& img, GoldenHeader& h) {
    std::ifstream hdr(stem.string() + ".txt");
    if (!hdr) return false;
    std::string key;
    while (hdr >> key) {
        if (key == "height") hdr >> h.height;
        else if (key == "width") hdr >> h.width;
        else if (key == "channels") hdr >> h.channels;
        else if (key == "seed") hdr >> h.seed;
        else if (key == "transform") hdr >> h.transform;
    }
    img = Image(h.height, h.width, h.channels);
    std::ifstream bin(stem.string() + ".f32", std::ios::binary);
    for (float& v : img.data()) {
        unsigned char b[4];
        if (!bin.read(reinterpret_cast<char*>(b), 4)) return false;
        const std::uint32_t u = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
        std::memcpy(&v, &u, 4);
    }
    return true;
}

}  // namespace hmtl::testing
