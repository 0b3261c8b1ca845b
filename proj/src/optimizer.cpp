#include "groupalign/optimizer.hpp"

#include <cmath>

namespace groupalign {

AdamW::AdamW(std::vector<Tensor> params, Config config)
    : params_(std::move(params)), config_(config) {
    if (config_.lr <= 0.0) throw ConfigError("AdamW: learning rate must be positive");
    if (config_.warmup_steps < 0) throw ConfigError("AdamW: negative warmup_steps");
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
        if (!p.requires_grad()) throw ContractError("AdamW: parameter without gradient");
        m_.emplace_back(p.numel(), 0.0);
        v_.emplace_back(p.numel(), 0.0);
    }
}

void AdamW::step() {
    ++step_;
    double warm = config_.warmup_steps == 0
                      ? 1.0
                      : std::min(1.0, static_cast<double>(step_) / config_.warmup_steps);
    double lr_t = config_.lr * warm;
    double bc1 = 1.0 - std::pow(config_.beta1, step_);
    double bc2 = 1.0 - std::pow(config_.beta2, step_);

    for (std::size_t k = 0; k < params_.size(); ++k) {
        auto& theta = params_[k].data();
        const auto& g = params_[k].grad();
        auto& m = m_[k];
        auto& v = v_[k];
        for (std::size_t i = 0; i < theta.size(); ++i) {
            m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
            v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
            double mhat = m[i] / bc1;
            double vhat = v[i] / bc2;
            theta[i] -= lr_t * (mhat / (std::sqrt(vhat) + config_.eps)
                                + config_.weight_decay * theta[i]);
            if (!std::isfinite(theta[i])) throw NumericalError("AdamW: non-finite parameter");
        }
    }
}

void AdamW::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

}  // namespace groupalign
