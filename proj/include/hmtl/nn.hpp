#pragma once

// Minimal layer engine: layers own their parameters, forward passes are
// const and return activations to the caller, backward passes take the
// saved activations, accumulate parameter gradients and return the input
// gradient.

#include <memory>
#include <string>
#include <vector>

#include "hmtl/rng.hpp"
#include "hmtl/tensor.hpp"

namespace hmtl::nn {

struct Param {
    std::string name;
    Tensor value;
    Tensor grad;

    Param() = default;
    Param(std::string n, std::vector<int> shape) : name(std::move(n)), value(shape), grad(shape) {}
};

/// 2-D convolution, square kernel, zero padding. Weight (F, C, k, k), bias (F).
class Conv2d {
public:
    Conv2d(int in_channels, int out_channels, int kernel, int stride, int padding, const std::string& name);

    /// He-uniform weights, zero bias.
    void init(Rng& rng);

    Tensor forward(const Tensor& x) const;
    /// Accumulates weight/bias gradients (unless `param_grads` is false);
    /// returns dL/dx when `need_dx`.
    Tensor backward(const Tensor& x, const Tensor& dy, bool need_dx, bool param_grads = true);

    int out_size(int in) const { return (in + 2 * padding_ - kernel_) / stride_ + 1; }
    int in_channels() const { return in_; }
    int out_channels() const { return out_; }
    std::vector<Param*> params() { return {&weight, &bias}; }
    std::vector<const Param*> params() const { return {&weight, &bias}; }

    Param weight;
    Param bias;

private:
    void im2col(const float* x, int H, int W, float* col) const;
    void col2im(const float* col, int H, int W, float* dx) const;

    int in_, out_, kernel_, stride_, padding_;
};

/// y = x W^T + b. Weight (out, in), bias (out).
class Linear {
public:
    Linear(int in_features, int out_features, const std::string& name);

    void init(Rng& rng);
    Tensor forward(const Tensor& x) const;
    Tensor backward(const Tensor& x, const Tensor& dy, bool need_dx, bool param_grads = true);

    int in_features() const { return in_; }
    int out_features() const { return out_; }
    std::vector<Param*> params() { return {&weight, &bias}; }
    std::vector<const Param*> params() const { return {&weight, &bias}; }

    Param weight;
    Param bias;

private:
    int in_, out_;
};

// Stateless ops. Backward helpers take the forward output where that is
// all they need.
Tensor relu(const Tensor& x);
Tensor relu_backward(const Tensor& y, const Tensor& dy);
Tensor sigmoid(const Tensor& x);
Tensor sigmoid_backward(const Tensor& y, const Tensor& dy);
/// (N, C, H, W) -> (N, C)
Tensor global_avg_pool(const Tensor& x);
Tensor global_avg_pool_backward(const std::vector<int>& x_shape, const Tensor& dy);
/// Nearest-neighbour 2x.
Tensor upsample2x(const Tensor& x);
Tensor upsample2x_backward(const Tensor& dy);
Tensor concat_channels(const Tensor& a, const Tensor& b);
/// Splits dL/d(concat) back into the two inputs' channel ranges.
std::pair<Tensor, Tensor> split_channels(const Tensor& d, int channels_a);

/// Inverted dropout: mask entries are 0 or 1/(1-rate).
Tensor dropout_mask(const std::vector<int>& shape, double rate, Rng& rng);
Tensor multiply(const Tensor& a, const Tensor& b);
void add_inplace(Tensor& acc, const Tensor& x);

std::int64_t param_count(const std::vector<const Param*>& params);

}  // namespace hmtl::nn
