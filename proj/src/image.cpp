#include "hmtl/image.hpp"

#include <algorithm>
#include <cmath>

namespace hmtl {

float max_abs_diff(const Image& a, const Image& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
    float m = 0.0f;
    auto da = a.data();
    auto db = b.data();
    for (std::size_t i = 0; i < da.size(); ++i) m = std::max(m, std::abs(da[i] - db[i]));
    return m;
}

void clamp01(Image& img) {
    for (float& v : img.data()) v = std::clamp(v, 0.0f, 1.0f);
}

}  // namespace hmtl
