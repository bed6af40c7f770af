#pragma once

// Adaptive-moment optimizers (AdaBelief, Adam) and the step-decay schedule.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "hmtl/nn.hpp"

namespace hmtl::optim {

enum class Kind { AdaBelief, Adam };
std::string to_string(Kind kind);
Kind parse_kind(const std::string& text);

struct OptimizerConfig {
    Kind kind = Kind::AdaBelief;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = -1.0;          ///< < 0: 1e-16 for AdaBelief, 1e-8 for Adam
    double weight_decay = 0.0;  ///< decoupled
    double effective_eps() const { return eps >= 0.0 ? eps : (kind == Kind::AdaBelief ? 1e-16 : 1e-8); }
    friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

class Optimizer {
public:
    Optimizer(OptimizerConfig config, std::vector<nn::Param*> params);

    /// One update with learning rate `lr` from the accumulated gradients.
    void step(double lr);
    void zero_grad();

    std::int64_t steps() const { return t_; }
    const std::vector<nn::Param*>& params() const { return params_; }

    void save(std::ostream& os) const;
    /// Throws SchemaError when the stored state does not match the parameters.
    void load(std::istream& is);

private:
    OptimizerConfig config_;
    std::vector<nn::Param*> params_;
    std::vector<std::vector<double>> m_, s_;
    std::int64_t t_ = 0;
};

/// (epoch threshold, multiplier) pairs.
using DecaySchedule = std::vector<std::pair<int, double>>;

/// base_lr times the product of multipliers whose threshold is <= epoch.
double step_decay_lr(int epoch, double base_lr, const DecaySchedule& schedule);

}  // namespace hmtl::optim
