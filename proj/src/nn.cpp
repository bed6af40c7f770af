#include "hmtl/nn.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <sstream>

namespace hmtl {

std::string shape_string(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
    os << ')';
    return os.str();
}

}  // namespace hmtl

namespace hmtl::nn {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;
using ConstMapVec = Eigen::Map<const Eigen::VectorXf>;

void he_uniform(Tensor& w, int fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / fan_in);
    for (float& v : w.data) v = static_cast<float>(rng.uniform(-bound, bound));
}

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

}  // namespace

// -- Conv2d -------------------------------------------------------------------

Conv2d::Conv2d(int in_channels, int out_channels, int kernel, int stride, int padding, const std::string& name)
    : weight(name + ".weight", {out_channels, in_channels, kernel, kernel}),
      bias(name + ".bias", {out_channels}),
      in_(in_channels), out_(out_channels), kernel_(kernel), stride_(stride), padding_(padding) {
    require(in_channels > 0 && out_channels > 0 && kernel > 0 && stride > 0 && padding >= 0,
            "Conv2d: invalid geometry");
}

void Conv2d::init(Rng& rng) {
    he_uniform(weight.value, in_ * kernel_ * kernel_, rng);
    bias.value.zero();
}

void Conv2d::im2col(const float* x, int H, int W, float* col) const {
    const int Ho = out_size(H), Wo = out_size(W);
    const int P = Ho * Wo;
    for (int c = 0; c < in_; ++c)
        for (int ky = 0; ky < kernel_; ++ky)
            for (int kx = 0; kx < kernel_; ++kx) {
                float* dst = col + static_cast<std::size_t>((c * kernel_ + ky) * kernel_ + kx) * P;
                const float* plane = x + static_cast<std::size_t>(c) * H * W;
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * stride_ - padding_ + ky;
                    if (iy < 0 || iy >= H) {
                        std::fill(dst + oy * Wo, dst + (oy + 1) * Wo, 0.0f);
                        continue;
                    }
                    for (int ox = 0; ox < Wo; ++ox) {
                        const int ix = ox * stride_ - padding_ + kx;
                        dst[oy * Wo + ox] = (ix >= 0 && ix < W) ? plane[iy * W + ix] : 0.0f;
                    }
                }
            }
}

void Conv2d::col2im(const float* col, int H, int W, float* dx) const {
    const int Ho = out_size(H), Wo = out_size(W);
    const int P = Ho * Wo;
    for (int c = 0; c < in_; ++c)
        for (int ky = 0; ky < kernel_; ++ky)
            for (int kx = 0; kx < kernel_; ++kx) {
                const float* src = col + static_cast<std::size_t>((c * kernel_ + ky) * kernel_ + kx) * P;
                float* plane = dx + static_cast<std::size_t>(c) * H * W;
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * stride_ - padding_ + ky;
                    if (iy < 0 || iy >= H) continue;
                    for (int ox = 0; ox < Wo; ++ox) {
                        const int ix = ox * stride_ - padding_ + kx;
                        if (ix >= 0 && ix < W) plane[iy * W + ix] += src[oy * Wo + ox];
                    }
                }
            }
}

Tensor Conv2d::forward(const Tensor& x) const {
    require(x.rank() == 4 && x.dim(1) == in_,
            weight.name + ": expected (N, " + std::to_string(in_) + ", H, W), got " + shape_string(x.shape));
    const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
    const int Ho = out_size(H), Wo = out_size(W), P = Ho * Wo;
    const int K = in_ * kernel_ * kernel_;
    Tensor y({N, out_, Ho, Wo});
    FloatBuffer col(static_cast<std::size_t>(K) * P);
    ConstMapMat Wm(weight.value.data.data(), out_, K);
    ConstMapVec b(bias.value.data.data(), out_);
    for (int n = 0; n < N; ++n) {
        im2col(x.row(n).data(), H, W, col.data());
        MapMat Y(y.row(n).data(), out_, P);
        Y.noalias() = Wm * ConstMapMat(col.data(), K, P);
        Y.colwise() += b;
    }
    return y;
}

Tensor Conv2d::backward(const Tensor& x, const Tensor& dy, bool need_dx, bool param_grads) {
    const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
    const int Ho = out_size(H), Wo = out_size(W), P = Ho * Wo;
    const int K = in_ * kernel_ * kernel_;
    require(dy.shape == std::vector<int>({N, out_, Ho, Wo}), weight.name + ": gradient shape mismatch");
    FloatBuffer col(static_cast<std::size_t>(K) * P);
    FloatBuffer dcol;
    if (need_dx) dcol.resize(col.size());
    MapMat dW(weight.grad.data.data(), out_, K);
    Eigen::Map<Eigen::VectorXf> db(bias.grad.data.data(), out_);
    ConstMapMat Wm(weight.value.data.data(), out_, K);
    Tensor dx;
    if (need_dx) dx = Tensor(x.shape);
    for (int n = 0; n < N; ++n) {
        if (param_grads) im2col(x.row(n).data(), H, W, col.data());
        ConstMapMat dY(dy.row(n).data(), out_, P);
        if (param_grads) {
            ConstMapMat C(col.data(), K, P);
            dW.noalias() += dY * C.transpose();
            db += dY.rowwise().sum();
        }
        if (need_dx) {
            MapMat dC(dcol.data(), K, P);
            dC.noalias() = Wm.transpose() * dY;
            col2im(dcol.data(), H, W, dx.row(n).data());
        }
    }
    return dx;
}

// -- Linear -------------------------------------------------------------------

Linear::Linear(int in_features, int out_features, const std::string& name)
    : weight(name + ".weight", {out_features, in_features}), bias(name + ".bias", {out_features}),
      in_(in_features), out_(out_features) {
    require(in_features > 0 && out_features > 0, "Linear: invalid size");
}

void Linear::init(Rng& rng) {
    // Glorot-uniform keeps the initial logits of wide heads near zero.
    const double bound = std::sqrt(6.0 / (in_ + out_));
    for (float& v : weight.value.data) v = static_cast<float>(rng.uniform(-bound, bound));
    bias.value.zero();
}

Tensor Linear::forward(const Tensor& x) const {
    require(x.rank() == 2 && x.dim(1) == in_,
            weight.name + ": expected (N, " + std::to_string(in_) + "), got " + shape_string(x.shape));
    const int N = x.dim(0);
    Tensor y({N, out_});
    ConstMapMat X(x.data.data(), N, in_);
    ConstMapMat Wm(weight.value.data.data(), out_, in_);
    // Row by row so that a sample's output does not depend on batch size.
    for (int n = 0; n < N; ++n) {
        Eigen::Map<Eigen::RowVectorXf> yr(y.row(n).data(), out_);
        yr.noalias() = X.row(n) * Wm.transpose();
        yr += Eigen::Map<const Eigen::RowVectorXf>(bias.value.data.data(), out_);
    }
    return y;
}

Tensor Linear::backward(const Tensor& x, const Tensor& dy, bool need_dx, bool param_grads) {
    const int N = x.dim(0);
    require(dy.shape == std::vector<int>({N, out_}), weight.name + ": gradient shape mismatch");
    ConstMapMat X(x.data.data(), N, in_);
    ConstMapMat dY(dy.data.data(), N, out_);
    if (param_grads) {
        MapMat dW(weight.grad.data.data(), out_, in_);
        dW.noalias() += dY.transpose() * X;
        Eigen::Map<Eigen::RowVectorXf>(bias.grad.data.data(), out_) += dY.colwise().sum();
    }
    Tensor dx;
    if (need_dx) {
        dx = Tensor(x.shape);
        MapMat(dx.data.data(), N, in_).noalias() = dY * ConstMapMat(weight.value.data.data(), out_, in_);
    }
    return dx;
}

// -- stateless ops ------------------------------------------------------------

Tensor relu(const Tensor& x) {
    Tensor y = x;
    for (float& v : y.data) v = v > 0.0f ? v : 0.0f;
    return y;
}

Tensor relu_backward(const Tensor& y, const Tensor& dy) {
    Tensor dx = dy;
    for (std::size_t i = 0; i < dx.size(); ++i)
        if (!(y.data[i] > 0.0f)) dx.data[i] = 0.0f;
    return dx;
}

Tensor sigmoid(const Tensor& x) {
    Tensor y = x;
    for (float& v : y.data) v = 1.0f / (1.0f + std::exp(-v));
    return y;
}

Tensor sigmoid_backward(const Tensor& y, const Tensor& dy) {
    Tensor dx = dy;
    for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] *= y.data[i] * (1.0f - y.data[i]);
    return dx;
}

Tensor global_avg_pool(const Tensor& x) {
    require(x.rank() == 4, "global_avg_pool: expected (N, C, H, W)");
    const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    Tensor y({N, C});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const float* p = x.data.data() + (static_cast<std::size_t>(n) * C + c) * HW;
            double s = 0.0;
            for (int i = 0; i < HW; ++i) s += p[i];
            y.data[static_cast<std::size_t>(n) * C + c] = static_cast<float>(s / HW);
        }
    return y;
}

Tensor global_avg_pool_backward(const std::vector<int>& x_shape, const Tensor& dy) {
    Tensor dx(x_shape);
    const int N = x_shape[0], C = x_shape[1], HW = x_shape[2] * x_shape[3];
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const float g = dy.data[static_cast<std::size_t>(n) * C + c] / static_cast<float>(HW);
            float* p = dx.data.data() + (static_cast<std::size_t>(n) * C + c) * HW;
            std::fill(p, p + HW, g);
        }
    return dx;
}

Tensor upsample2x(const Tensor& x) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor y({N, C, 2 * H, 2 * W});
    for (int nc = 0; nc < N * C; ++nc) {
        const float* src = x.data.data() + static_cast<std::size_t>(nc) * H * W;
        float* dst = y.data.data() + static_cast<std::size_t>(nc) * 4 * H * W;
        for (int r = 0; r < 2 * H; ++r)
            for (int c = 0; c < 2 * W; ++c) dst[r * 2 * W + c] = src[(r / 2) * W + c / 2];
    }
    return y;
}

Tensor upsample2x_backward(const Tensor& dy) {
    const int N = dy.dim(0), C = dy.dim(1), H = dy.dim(2) / 2, W = dy.dim(3) / 2;
    Tensor dx({N, C, H, W});
    for (int nc = 0; nc < N * C; ++nc) {
        const float* src = dy.data.data() + static_cast<std::size_t>(nc) * 4 * H * W;
        float* dst = dx.data.data() + static_cast<std::size_t>(nc) * H * W;
        for (int r = 0; r < 2 * H; ++r)
            for (int c = 0; c < 2 * W; ++c) dst[(r / 2) * W + c / 2] += src[r * 2 * W + c];
    }
    return dx;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    require(a.rank() == 4 && b.rank() == 4 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
            "concat_channels: incompatible shapes " + shape_string(a.shape) + " and " + shape_string(b.shape));
    const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), HW = a.dim(2) * a.dim(3);
    Tensor y({N, Ca + Cb, a.dim(2), a.dim(3)});
    for (int n = 0; n < N; ++n) {
        auto ra = a.row(n);
        auto rb = b.row(n);
        auto ry = y.row(n);
        std::copy(ra.begin(), ra.end(), ry.begin());
        std::copy(rb.begin(), rb.end(), ry.begin() + static_cast<std::ptrdiff_t>(Ca) * HW);
    }
    (void)Cb;
    return y;
}

std::pair<Tensor, Tensor> split_channels(const Tensor& d, int channels_a) {
    const int N = d.dim(0), C = d.dim(1), H = d.dim(2), W = d.dim(3), HW = H * W;
    Tensor a({N, channels_a, H, W}), b({N, C - channels_a, H, W});
    for (int n = 0; n < N; ++n) {
        auto rd = d.row(n);
        auto ra = a.row(n);
        auto rb = b.row(n);
        std::copy(rd.begin(), rd.begin() + static_cast<std::ptrdiff_t>(channels_a) * HW, ra.begin());
        std::copy(rd.begin() + static_cast<std::ptrdiff_t>(channels_a) * HW, rd.end(), rb.begin());
    }
    return {std::move(a), std::move(b)};
}

Tensor dropout_mask(const std::vector<int>& shape, double rate, Rng& rng) {
    require(rate >= 0.0 && rate < 1.0, "dropout rate must be in [0,1)");
    Tensor m(shape, 1.0f);
    if (rate == 0.0) return m;
    const float keep = static_cast<float>(1.0 / (1.0 - rate));
    for (float& v : m.data) v = rng.bernoulli(rate) ? 0.0f : keep;
    return m;
}

Tensor multiply(const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), "multiply: shape mismatch");
    Tensor y = a;
    for (std::size_t i = 0; i < y.size(); ++i) y.data[i] *= b.data[i];
    return y;
}

void add_inplace(Tensor& acc, const Tensor& x) {
    if (acc.empty()) {
        acc = x;
        return;
    }
    require(acc.same_shape(x), "add_inplace: shape mismatch");
    for (std::size_t i = 0; i < acc.size(); ++i) acc.data[i] += x.data[i];
}

std::int64_t param_count(const std::vector<const Param*>& params) {
    std::int64_t n = 0;
    for (const Param* p : params) n += static_cast<std::int64_t>(p->value.size());
    return n;
}

}  // namespace hmtl::nn
