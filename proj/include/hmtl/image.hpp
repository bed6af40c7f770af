#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace hmtl {

/// Interleaved H x W x C float image, values nominally in [0,1].
class Image {
public:
    Image() = default;
    Image(int height, int width, int channels = 3, float fill = 0.0f)
        : height_(height), width_(width), channels_(channels),
          data_(static_cast<std::size_t>(height) * width * channels, fill) {
        if (height < 0 || width < 0 || channels <= 0)
            throw std::invalid_argument("Image: negative dimensions");
    }

    int height() const { return height_; }
    int width() const { return width_; }
    int channels() const { return channels_; }
    bool square() const { return height_ == width_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    float& at(int r, int c, int ch = 0) { return data_[index(r, c, ch)]; }
    float at(int r, int c, int ch = 0) const { return data_[index(r, c, ch)]; }

    float* ptr(int r, int c) { return data_.data() + index(r, c, 0); }
    const float* ptr(int r, int c) const { return data_.data() + index(r, c, 0); }

    std::span<float> data() { return data_; }
    std::span<const float> data() const { return data_; }

    bool same_shape(const Image& o) const {
        return height_ == o.height_ && width_ == o.width_ && channels_ == o.channels_;
    }

    friend bool operator==(const Image&, const Image&) = default;

private:
    std::size_t index(int r, int c, int ch) const {
        return (static_cast<std::size_t>(r) * width_ + c) * channels_ + ch;
    }

    int height_ = 0;
    int width_ = 0;
    int channels_ = 3;
    std::vector<float> data_;
};

/// Largest absolute per-element difference. Shapes must match.
float max_abs_diff(const Image& a, const Image& b);

/// Clamp every value into [0,1] in place.
void clamp01(Image& img);

}  // namespace hmtl
