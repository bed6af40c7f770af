#include "hmtl/optim.hpp"

#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>

#include "hmtl/error.hpp"

namespace hmtl::optim {

std::string to_string(Kind kind) { return kind == Kind::Adam ? "adam" : "adabelief"; }

Kind parse_kind(const std::string& text) {
    if (text == "adabelief") return Kind::AdaBelief;
    if (text == "adam") return Kind::Adam;
    throw std::invalid_argument("unknown optimizer '" + text + "'");
}

Optimizer::Optimizer(OptimizerConfig config, std::vector<nn::Param*> params)
    : config_(config), params_(std::move(params)) {
    for (auto* p : params_) {
        m_.emplace_back(p->value.size(), 0.0);
        s_.emplace_back(p->value.size(), 0.0);
    }
}

void Optimizer::zero_grad() {
    for (auto* p : params_) p->grad.zero();
}

void Optimizer::step(double lr) {
    ++t_;
    const double b1 = config_.beta1, b2 = config_.beta2, eps = config_.effective_eps();
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    const bool belief = config_.kind == Kind::AdaBelief;
    for (std::size_t k = 0; k < params_.size(); ++k) {
        auto& value = params_[k]->value.data;
        const auto& grad = params_[k]->grad.data;
        auto& m = m_[k];
        auto& s = s_[k];
        for (std::size_t i = 0; i < value.size(); ++i) {
            const double g = grad[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            const double d = belief ? g - m[i] : g;
            s[i] = b2 * s[i] + (1.0 - b2) * d * d + (belief ? eps : 0.0);
            const double mhat = m[i] / c1;
            const double shat = s[i] / c2;
            double update = mhat / (std::sqrt(shat) + eps);
            if (config_.weight_decay > 0.0) update += config_.weight_decay * value[i];
            value[i] = static_cast<float>(value[i] - lr * update);
        }
    }
}

namespace {

template <typename T>
void put(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw SchemaError("optimizer state: truncated stream");
    return v;
}

constexpr std::uint32_t kMagic = 0x4f505431;  // "OPT1"

}  // namespace

void Optimizer::save(std::ostream& os) const {
    put(os, kMagic);
    put(os, static_cast<std::int64_t>(t_));
    put(os, static_cast<std::uint32_t>(params_.size()));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        put(os, static_cast<std::uint64_t>(m_[k].size()));
        os.write(reinterpret_cast<const char*>(m_[k].data()), static_cast<std::streamsize>(m_[k].size() * sizeof(double)));
        os.write(reinterpret_cast<const char*>(s_[k].data()), static_cast<std::streamsize>(s_[k].size() * sizeof(double)));
    }
}

void Optimizer::load(std::istream& is) {
    if (get<std::uint32_t>(is) != kMagic) throw SchemaError("optimizer state: bad magic");
    const auto t = get<std::int64_t>(is);
    const auto n = get<std::uint32_t>(is);
    if (n != params_.size()) throw SchemaError("optimizer state: parameter count mismatch");
    for (std::size_t k = 0; k < params_.size(); ++k) {
        const auto len = get<std::uint64_t>(is);
        if (len != m_[k].size()) throw SchemaError("optimizer state: size mismatch for " + params_[k]->name);
        is.read(reinterpret_cast<char*>(m_[k].data()), static_cast<std::streamsize>(len * sizeof(double)));
        is.read(reinterpret_cast<char*>(s_[k].data()), static_cast<std::streamsize>(len * sizeof(double)));
        if (!is) throw SchemaError("optimizer state: truncated stream");
    }
    t_ = t;
}

double step_decay_lr(int epoch, double base_lr, const DecaySchedule& schedule) {
    double lr = base_lr;
    for (const auto& [threshold, factor] : schedule)
        if (epoch >= threshold) lr *= factor;
    return lr;
}

}  // namespace hmtl::optim
