#include "hmtl/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace hmtl::losses {

ClassWeights::ClassWeights(std::vector<double> raw) : w_(std::move(raw)) {
    if (w_.empty()) throw std::invalid_argument("ClassWeights: empty");
    double sum = 0.0;
    for (double v : w_) {
        if (!(v > 0.0)) throw std::invalid_argument("ClassWeights: entries must be > 0");
        sum += v;
    }
    const double mean = sum / static_cast<double>(w_.size());
    for (double& v : w_) v /= mean;
}

ClassWeights ClassWeights::unit(int num_classes) {
    return ClassWeights(std::vector<double>(static_cast<std::size_t>(num_classes), 1.0));
}

std::vector<double> BinScheme::centers() const {
    std::vector<double> c(static_cast<std::size_t>(n_bins));
    for (int k = 0; k < n_bins; ++k) c[k] = center(k);
    return c;
}

int BinScheme::bin_of(double value) const {
    if (!(value >= lo && value <= hi))
        throw std::out_of_range("value " + std::to_string(value) + " outside bin range [" + std::to_string(lo) +
                                ", " + std::to_string(hi) + "]");
    // values within 1e-9 bin widths below an edge count as on it, so decimal
    // boundaries such as -0.9 land in the upper bin
    const int k = static_cast<int>(std::floor((value - lo) / width() + 1e-9));
    return std::clamp(k, 0, n_bins - 1);
}

double LossReport::term(const std::string& name) const {
    for (const auto& t : terms)
        if (t.name == name) return t.value;
    throw std::out_of_range("LossReport: no term '" + name + "'");
}

namespace {

template <typename T>
std::vector<double> softmax_impl(std::span<const T> logits) {
    if (logits.empty()) return {};
    double mx = -INFINITY;
    for (T v : logits) mx = std::max(mx, static_cast<double>(v));
    std::vector<double> p(logits.size());
    double sum = 0.0;
    for (std::size_t k = 0; k < logits.size(); ++k) {
        p[k] = std::exp(static_cast<double>(logits[k]) - mx);
        sum += p[k];
    }
    for (double& v : p) v /= sum;
    return p;
}

double safe_log(double p) { return std::log(std::max(p, kLogFloor)); }

void check_label(std::span<const double> probs, int label, const char* who) {
    if (label < 0 || label >= static_cast<int>(probs.size()))
        throw std::invalid_argument(std::string(who) + ": label out of range");
}

std::vector<double> smoothed_target(int num_classes, int label, double smoothing) {
    std::vector<double> t(static_cast<std::size_t>(num_classes), smoothing / num_classes);
    t[label] += 1.0 - smoothing;
    return t;
}

double ce(const HeadPrediction& h) {
    check_label(h.probs, h.label, "ce");
    return -safe_log(h.probs[h.label]);
}

}  // namespace

std::vector<double> softmax(std::span<const double> logits) { return softmax_impl(logits); }
std::vector<double> softmax(std::span<const float> logits) { return softmax_impl(logits); }

double weighted_ce(std::span<const double> probs, int label, const ClassWeights& weights, double smoothing) {
    check_label(probs, label, "weighted_ce");
    if (weights.size() != static_cast<int>(probs.size()))
        throw std::invalid_argument("weighted_ce: class weight count mismatch");
    if (smoothing == 0.0) return -weights[label] * safe_log(probs[label]);
    const auto t = smoothed_target(static_cast<int>(probs.size()), label, smoothing);
    double s = 0.0;
    for (std::size_t k = 0; k < probs.size(); ++k) s += t[k] * safe_log(probs[k]);
    return -weights[label] * s;
}

std::vector<double> weighted_ce_grad(std::span<const double> probs, int label, const ClassWeights& weights,
                                     double smoothing) {
    check_label(probs, label, "weighted_ce_grad");
    const auto t = smoothed_target(static_cast<int>(probs.size()), label, smoothing);
    std::vector<double> g(probs.size(), 0.0);
    for (std::size_t k = 0; k < probs.size(); ++k)
        if (probs[k] > kLogFloor) g[k] = -weights[label] * t[k] / probs[k];
    return g;
}

double focal_loss(std::span<const double> probs, int label, double alpha, double gamma) {
    check_label(probs, label, "focal_loss");
    if (gamma < 0.0) throw std::invalid_argument("focal_loss: gamma must be >= 0");
    const double p = probs[label];
    const double mod = gamma == 0.0 ? 1.0 : std::pow(std::max(0.0, 1.0 - p), gamma);
    return -alpha * mod * safe_log(p);
}

std::vector<double> focal_loss_grad(std::span<const double> probs, int label, double alpha, double gamma) {
    check_label(probs, label, "focal_loss_grad");
    std::vector<double> g(probs.size(), 0.0);
    const double p = probs[label];
    if (p <= kLogFloor) return g;
    const double q = std::max(0.0, 1.0 - p);
    double d = -alpha * (gamma == 0.0 ? 1.0 : std::pow(q, gamma)) / p;
    if (gamma != 0.0 && q > 0.0) d += alpha * gamma * std::pow(q, gamma - 1.0) * std::log(p);
    g[label] = d;
    return g;
}

LossReport hmtl_puzzle_loss(const HeadPrediction& sl, const ClassWeights& sl_weights,
                            std::span<const HeadPrediction> puzzle, const HeadLossWeights& weights) {
    if (puzzle.size() != weights.ssh.size())
        throw std::invalid_argument("hmtl_puzzle_loss: " + std::to_string(puzzle.size()) + " puzzle heads but " +
                                    std::to_string(weights.ssh.size()) + " head weights");
    LossReport r;
    r.add("sl", weights.sl * weighted_ce(sl.probs, sl.label, sl_weights));
    for (std::size_t j = 0; j < puzzle.size(); ++j)
        r.add("puzzle_" + std::to_string(j), weights.ssh[j] * ce(puzzle[j]));
    return r;
}

LossReport hmtl_puzzle_rotation_loss(const HeadPrediction& sl, const ClassWeights& sl_weights,
                                     std::span<const HeadPrediction> puzzle, const HeadPrediction& rotation,
                                     const HeadLossWeights& weights) {
    LossReport r = hmtl_puzzle_loss(sl, sl_weights, puzzle, weights);
    r.add("rotation", weights.rotation * ce(rotation));
    return r;
}

LossReport hmtl_inpaint_loss(const HeadPrediction& sl, const ClassWeights& sl_weights, double dec_term,
                             const HeadLossWeights& weights) {
    if (dec_term < 0.0) throw std::invalid_argument("hmtl_inpaint_loss: decoder term must be >= 0");
    LossReport r;
    r.add("sl", weights.sl * weighted_ce(sl.probs, sl.label, sl_weights));
    r.add("decoder", dec_term);
    return r;
}

double perceptual_decoder_loss(std::span<const double> feat_rec, std::span<const double> feat_orig,
                               double lambda) {
    if (feat_rec.size() != feat_orig.size())
        throw std::invalid_argument("perceptual_decoder_loss: feature length mismatch");
    if (feat_rec.empty()) return 0.0;
    const auto p = softmax(feat_rec);
    const auto q = softmax(feat_orig);
    double s = 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) s += (p[j] - q[j]) * (p[j] - q[j]);
    return lambda * std::sqrt(s / static_cast<double>(p.size()));
}

std::vector<double> perceptual_decoder_loss_grad(std::span<const double> feat_rec,
                                                 std::span<const double> feat_orig, double lambda) {
    if (feat_rec.size() != feat_orig.size())
        throw std::invalid_argument("perceptual_decoder_loss_grad: feature length mismatch");
    const auto n = feat_rec.size();
    std::vector<double> dz(n, 0.0);
    if (n == 0) return dz;
    const auto p = softmax(feat_rec);
    const auto q = softmax(feat_orig);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += (p[j] - q[j]) * (p[j] - q[j]);
    const double r = std::sqrt(s / static_cast<double>(n));
    if (r == 0.0) return dz;
    std::vector<double> g(n);
    double gp = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        g[j] = lambda * (p[j] - q[j]) / (static_cast<double>(n) * r);
        gp += g[j] * p[j];
    }
    for (std::size_t j = 0; j < n; ++j) dz[j] = p[j] * (g[j] - gp);
    return dz;
}

double pixelwise_rmse(const Image& rec, const Image& orig, const Image* mask) {
    if (!rec.same_shape(orig)) throw std::invalid_argument("pixelwise_rmse: shape mismatch");
    if (mask && (mask->height() != rec.height() || mask->width() != rec.width()))
        throw std::invalid_argument("pixelwise_rmse: mask shape mismatch");
    double s = 0.0;
    std::size_t count = 0;
    for (int r = 0; r < rec.height(); ++r)
        for (int c = 0; c < rec.width(); ++c) {
            if (mask && mask->at(r, c) == 0.0f) continue;
            for (int ch = 0; ch < rec.channels(); ++ch) {
                const double d = static_cast<double>(rec.at(r, c, ch)) - orig.at(r, c, ch);
                s += d * d;
                ++count;
            }
        }
    return count ? std::sqrt(s / static_cast<double>(count)) : 0.0;
}

double expectation_from_bins(std::span<const double> probs, const BinScheme& scheme) {
    if (static_cast<int>(probs.size()) != scheme.n_bins)
        throw std::invalid_argument("expectation_from_bins: probability count != n_bins");
    double e = 0.0;
    for (int k = 0; k < scheme.n_bins; ++k) e += probs[k] * scheme.center(k);
    return e;
}

LossReport cat_reg_loss(std::span<const double> probs, double y_reg, const BinScheme& scheme, double alpha) {
    if (!(y_reg >= scheme.lo && y_reg <= scheme.hi))
        throw std::invalid_argument("cat_reg_loss: target outside [lo, hi]");
    const int bin = scheme.bin_of(y_reg);
    LossReport r;
    r.add("categorical", alpha * -safe_log(probs[bin]));
    r.add("regression", std::abs(expectation_from_bins(probs, scheme) - y_reg));
    return r;
}

std::vector<double> cat_reg_loss_grad(std::span<const double> probs, double y_reg, const BinScheme& scheme,
                                      double alpha) {
    if (!(y_reg >= scheme.lo && y_reg <= scheme.hi))
        throw std::invalid_argument("cat_reg_loss_grad: target outside [lo, hi]");
    const int bin = scheme.bin_of(y_reg);
    const double e = expectation_from_bins(probs, scheme);
    const double sgn = e > y_reg ? 1.0 : (e < y_reg ? -1.0 : 0.0);
    std::vector<double> g(probs.size());
    for (int k = 0; k < scheme.n_bins; ++k) g[k] = sgn * scheme.center(k);
    if (probs[bin] > kLogFloor) g[bin] -= alpha / probs[bin];
    return g;
}

// -- logit space --------------------------------------------------------------

namespace {

void check_batch(std::span<const float> logits, int num_classes, std::size_t rows, const char* who) {
    if (num_classes <= 0 || logits.size() != rows * static_cast<std::size_t>(num_classes))
        throw std::invalid_argument(std::string(who) + ": logits shape does not match batch");
}

}  // namespace

BatchLoss ce_logits(std::span<const float> logits, int num_classes, std::span<const int> labels,
                    const ClassWeights* weights, double smoothing, std::span<const double> row_scale) {
    const std::size_t n = labels.size();
    check_batch(logits, num_classes, n, "ce_logits");
    if (!row_scale.empty() && row_scale.size() != n) throw std::invalid_argument("ce_logits: row_scale size");
    if (weights && weights->size() != num_classes) throw std::invalid_argument("ce_logits: class weight count");
    BatchLoss out;
    out.dlogits.assign(logits.size(), 0.0);
    if (n == 0) return out;
    const double log_floor = std::log(kLogFloor);
    for (std::size_t i = 0; i < n; ++i) {
        const int y = labels[i];
        if (y < 0 || y >= num_classes) throw std::invalid_argument("ce_logits: label out of range");
        auto row = logits.subspan(i * num_classes, num_classes);
        double mx = -INFINITY;
        for (float v : row) mx = std::max(mx, static_cast<double>(v));
        double sum = 0.0;
        for (float v : row) sum += std::exp(v - mx);
        const double lse = mx + std::log(sum);
        const double scale = (weights ? (*weights)[y] : 1.0) * (row_scale.empty() ? 1.0 : row_scale[i]);
        double l = 0.0;
        for (int k = 0; k < num_classes; ++k) {
            const double t = smoothing / num_classes + (k == y ? 1.0 - smoothing : 0.0);
            const double logp = std::max(row[k] - lse, log_floor);
            l -= t * logp;
            out.dlogits[i * num_classes + k] = scale * (std::exp(row[k] - lse) - t) / static_cast<double>(n);
        }
        out.value += scale * l;
    }
    out.value /= static_cast<double>(n);
    return out;
}

BatchLoss focal_logits(std::span<const float> logits, int num_classes, std::span<const int> labels, double alpha,
                       double gamma, std::span<const double> row_scale) {
    const std::size_t n = labels.size();
    check_batch(logits, num_classes, n, "focal_logits");
    if (!row_scale.empty() && row_scale.size() != n) throw std::invalid_argument("focal_logits: row_scale size");
    BatchLoss out;
    out.dlogits.assign(logits.size(), 0.0);
    if (n == 0) return out;
    for (std::size_t i = 0; i < n; ++i) {
        const int y = labels[i];
        const auto p = softmax(logits.subspan(i * num_classes, num_classes));
        const double scale = row_scale.empty() ? 1.0 : row_scale[i];
        out.value += scale * focal_loss(p, y, alpha, gamma);
        const double dldp = scale * focal_loss_grad(p, y, alpha, gamma)[y];
        for (int k = 0; k < num_classes; ++k)
            out.dlogits[i * num_classes + k] = dldp * p[y] * ((k == y ? 1.0 : 0.0) - p[k]) / static_cast<double>(n);
    }
    out.value /= static_cast<double>(n);
    return out;
}

CatRegBatch cat_reg_logits(std::span<const float> logits, std::span<const double> targets,
                           const BinScheme& scheme, double alpha) {
    const std::size_t n = targets.size();
    const int B = scheme.n_bins;
    check_batch(logits, B, n, "cat_reg_logits");
    CatRegBatch out;
    out.dlogits.assign(logits.size(), 0.0);
    out.expectations.assign(n, 0.0);
    if (n == 0) return out;
    const auto centers = scheme.centers();
    std::vector<std::vector<double>> probs(n);
    double sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        probs[i] = softmax(logits.subspan(i * B, B));
        const int bin = scheme.bin_of(targets[i]);
        out.categorical += -safe_log(probs[i][bin]);
        double e = 0.0;
        for (int k = 0; k < B; ++k) {
            e += probs[i][k] * centers[k];
            out.dlogits[i * B + k] = alpha * (probs[i][k] - (k == bin ? 1.0 : 0.0)) / static_cast<double>(n);
        }
        out.expectations[i] = e;
        sq += (e - targets[i]) * (e - targets[i]);
    }
    out.categorical *= alpha / static_cast<double>(n);
    out.regression = std::sqrt(sq / static_cast<double>(n));
    out.value = out.categorical + out.regression;
    if (out.regression > 0.0) {
        for (std::size_t i = 0; i < n; ++i) {
            const double de = (out.expectations[i] - targets[i]) / (static_cast<double>(n) * out.regression);
            for (int k = 0; k < B; ++k)
                out.dlogits[i * B + k] += de * probs[i][k] * (centers[k] - out.expectations[i]);
        }
    }
    return out;
}

BatchLoss rmse(std::span<const float> pred, std::span<const double> targets) {
    if (pred.size() != targets.size()) throw std::invalid_argument("rmse: size mismatch");
    BatchLoss out;
    out.dlogits.assign(pred.size(), 0.0);
    const std::size_t n = pred.size();
    if (n == 0) return out;
    double sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) sq += (pred[i] - targets[i]) * (pred[i] - targets[i]);
    out.value = std::sqrt(sq / static_cast<double>(n));
    if (out.value > 0.0)
        for (std::size_t i = 0; i < n; ++i)
            out.dlogits[i] = (pred[i] - targets[i]) / (static_cast<double>(n) * out.value);
    return out;
}

BatchLoss pixel_rmse_batch(const Tensor& rec, const Tensor& orig, const Tensor* mask) {
    if (!rec.same_shape(orig) || rec.rank() != 4)
        throw std::invalid_argument("pixel_rmse_batch: shape mismatch " + shape_string(rec.shape) + " vs " +
                                    shape_string(orig.shape));
    const int N = rec.dim(0), C = rec.dim(1), HW = rec.dim(2) * rec.dim(3);
    if (mask && (mask->rank() != 4 || mask->dim(0) != N || mask->dim(1) != 1 || mask->dim(2) * mask->dim(3) != HW))
        throw std::invalid_argument("pixel_rmse_batch: mask shape " + shape_string(mask->shape));
    BatchLoss out;
    out.dlogits.assign(rec.size(), 0.0);
    if (N == 0) return out;
    for (int n = 0; n < N; ++n) {
        const float* r = rec.data.data() + static_cast<std::size_t>(n) * C * HW;
        const float* o = orig.data.data() + static_cast<std::size_t>(n) * C * HW;
        const float* m = mask ? mask->data.data() + static_cast<std::size_t>(n) * HW : nullptr;
        double sq = 0.0;
        std::int64_t count = 0;
        for (int c = 0; c < C; ++c)
            for (int p = 0; p < HW; ++p) {
                if (m && m[p] == 0.0f) continue;
                const double d = static_cast<double>(r[c * HW + p]) - o[c * HW + p];
                sq += d * d;
                ++count;
            }
        if (count == 0) continue;
        const double rm = std::sqrt(sq / static_cast<double>(count));
        out.value += rm;
        if (rm == 0.0) continue;
        double* g = out.dlogits.data() + static_cast<std::size_t>(n) * C * HW;
        const double k = 1.0 / (static_cast<double>(N) * static_cast<double>(count) * rm);
        for (int c = 0; c < C; ++c)
            for (int p = 0; p < HW; ++p) {
                if (m && m[p] == 0.0f) continue;
                g[c * HW + p] = k * (static_cast<double>(r[c * HW + p]) - o[c * HW + p]);
            }
    }
    out.value /= static_cast<double>(N);
    return out;
}

BatchLoss perceptual_batch(const Tensor& feat_rec, const Tensor& feat_orig, double lambda) {
    if (!feat_rec.same_shape(feat_orig) || feat_rec.rank() != 2)
        throw std::invalid_argument("perceptual_batch: feature shape mismatch");
    const int N = feat_rec.dim(0), D = feat_rec.dim(1);
    BatchLoss out;
    out.dlogits.assign(feat_rec.size(), 0.0);
    if (N == 0) return out;
    for (int n = 0; n < N; ++n) {
        std::vector<double> a(feat_rec.row(n).begin(), feat_rec.row(n).end());
        std::vector<double> b(feat_orig.row(n).begin(), feat_orig.row(n).end());
        out.value += perceptual_decoder_loss(a, b, lambda);
        const auto g = perceptual_decoder_loss_grad(a, b, lambda);
        for (int d = 0; d < D; ++d) out.dlogits[static_cast<std::size_t>(n) * D + d] = g[d] / N;
    }
    out.value /= N;
    return out;
}

}  // namespace hmtl::losses
