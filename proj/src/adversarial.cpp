#include "hmtl/adversarial.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "hmtl/error.hpp"
#include "hmtl/losses.hpp"
#include "hmtl/trainer.hpp"

namespace hmtl::adversarial {

namespace {

constexpr int kChunk = 64;

const model::ModelAssembly::SupervisedHead& classifier(const model::ModelAssembly& m) {
    if (m.supervised.empty()) throw std::invalid_argument("fgsm: model has no supervised head");
    const auto& h = m.supervised.front();
    if (h.spec.kind != model::HeadKind::Classifier) throw std::invalid_argument("fgsm: supervised head is not a classifier");
    return h;
}

Tensor image_to_tensor(const Image& img) { return train::to_tensor({&img}); }

Image tensor_to_image(const Tensor& t) {
    const int C = t.dim(1), H = t.dim(2), W = t.dim(3);
    Image img(H, W, C);
    for (int ch = 0; ch < C; ++ch)
        for (int r = 0; r < H; ++r)
            for (int c = 0; c < W; ++c) img.at(r, c, ch) = t.data[(ch * H + r) * W + c];
    return img;
}

}  // namespace

void AttackConfig::validate() const {
    if (epsilons.empty()) throw std::invalid_argument("attack: empty epsilon list");
    for (std::size_t i = 0; i < epsilons.size(); ++i) {
        if (!(epsilons[i] >= 0.0)) throw std::invalid_argument("attack: epsilons must be >= 0");
        if (i > 0 && epsilons[i] < epsilons[i - 1]) throw std::invalid_argument("attack: epsilons must be ascending");
    }
}

Tensor input_gradient(const model::ModelAssembly& full, const Tensor& images, std::span<const int> labels) {
    model::ModelAssembly m = model::strip_ssh(full);
    const auto& head = classifier(m);
    const auto out = m.forward(images, {.training = false, .rng = nullptr, .supervised = true, .ssh = false});
    const auto loss = losses::ce_logits(out.sh[0].data, head.spec.classes, labels);
    model::OutputGrads grads;
    Tensor dz(out.sh[0].shape);
    for (std::size_t i = 0; i < dz.size(); ++i) dz.data[i] = static_cast<float>(loss.dlogits[i]);
    grads.sh.push_back(std::move(dz));
    Tensor g = m.backward(out, grads, true, false);
    for (float v : g.data)
        if (!std::isfinite(v)) throw InvariantError("fgsm: non-finite input gradient");
    return g;
}

Tensor perturb(const Tensor& images, const Tensor& grad, double epsilon, float lo, float hi) {
    if (!images.same_shape(grad)) throw std::invalid_argument("perturb: shape mismatch");
    if (!(epsilon >= 0.0)) throw std::invalid_argument("perturb: epsilon must be >= 0");
    Tensor out = images;
    if (epsilon == 0.0) return out;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const float g = grad.data[i];
        if (g == 0.0f) continue;
        const float x = images.data[i];
        const double s = g > 0.0f ? 1.0 : -1.0;
        float v = std::clamp(static_cast<float>(x + epsilon * s), lo, hi);
        // rounding to float may overshoot by an ulp; the L-inf bound is exact
        if (std::abs(static_cast<double>(v) - x) > epsilon) v = std::nextafter(v, x);
        out.data[i] = v;
    }
    return out;
}

Tensor fgsm(const model::ModelAssembly& model, const Tensor& images, std::span<const int> labels, double epsilon) {
    if (epsilon == 0.0) return images;
    return perturb(images, input_gradient(model, images, labels), epsilon);
}

Image fgsm(const model::ModelAssembly& model, const Image& image, int label, double epsilon) {
    const int labels[] = {label};
    return tensor_to_image(fgsm(model, image_to_tensor(image), labels, epsilon));
}

std::vector<report::AttackRow> epsilon_sweep(const model::ModelAssembly& full, const data::LabeledDataset& ds,
                                             const AttackConfig& config) {
    config.validate();
    if (ds.empty()) throw std::invalid_argument("epsilon_sweep: empty dataset");
    model::ModelAssembly m = model::strip_ssh(full);
    classifier(m);
    std::vector<report::AttackRow> rows;
    for (double e : config.epsilons) rows.push_back({e, 0, 0, 0.0});
    const std::size_t N = ds.size();
    for (std::size_t start = 0; start < N; start += kChunk) {
        const std::size_t end = std::min(N, start + kChunk);
        std::vector<const Image*> imgs;
        std::vector<int> labels;
        for (std::size_t i = start; i < end; ++i) {
            imgs.push_back(&ds.records[i].image);
            labels.push_back(*ds.records[i].label);
        }
        const Tensor x = train::to_tensor(imgs);
        Tensor grad;
        for (auto& row : rows) {
            if (row.epsilon > 0.0 && grad.empty()) grad = input_gradient(m, x, labels);
            const Tensor adv = row.epsilon > 0.0 ? perturb(x, grad, row.epsilon, config.clamp_lo, config.clamp_hi) : x;
            const auto out = m.forward(adv, {.training = false, .rng = nullptr, .supervised = true, .ssh = false});
            for (std::size_t n = 0; n < labels.size(); ++n) {
                const auto r = out.sh[0].row(static_cast<int>(n));
                const int pred = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
                row.correct += pred == labels[n];
                ++row.n;
            }
        }
    }
    for (auto& row : rows) row.accuracy = static_cast<double>(row.correct) / static_cast<double>(row.n);
    return rows;
}

}  // namespace hmtl::adversarial
