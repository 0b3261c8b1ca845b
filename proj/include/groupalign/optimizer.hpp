#pragma once

#include <vector>

#include "groupalign/tensor.hpp"

namespace groupalign {

// AdamW with decoupled weight decay and a linear learning-rate warmup.
// Every tracked tensor must require grad; the caller zeroes grads between
// steps (zero_grad here does all of them).
class AdamW {
  public:
    struct Config {
        double lr = 1e-3;
        double weight_decay = 0.0;
        int warmup_steps = 0;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
    };

    AdamW(std::vector<Tensor> params, Config config);

    // One update from the current grads. Decay is applied to the weights
    // directly, not through the moments; both terms share the warmup-scaled
    // learning rate.
    void step();

    void zero_grad();

    int step_count() const { return step_; }
    const Config& config() const { return config_; }

  private:
    std::vector<Tensor> params_;
    Config config_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    int step_ = 0;
};

}  // namespace groupalign
