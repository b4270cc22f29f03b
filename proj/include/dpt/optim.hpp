#pragma once

#include <cstdint>
#include <vector>

#include "dpt/tensor.hpp"

namespace dpt {

// base_lr * (1 + cos(pi * step / total)) / 2, no warmup.
double cosine_lr(std::int64_t step, std::int64_t total, double base_lr);

struct AdamOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    std::int64_t t = 0;
};

// One bias-corrected Adam update of `param` from its accumulated gradient.
// No weight decay. A parameter without a gradient buffer is treated as
// having a zero gradient.
void adam_step(Tensor& param, AdamState& state, double lr, const AdamOptions& opts = {});

/// Adam over a fixed parameter list.
class Adam {
public:
    explicit Adam(std::vector<Tensor> params, AdamOptions opts = {});

    void step(double lr);
    void zero_grad();
    std::int64_t steps_taken() const { return states_.empty() ? 0 : states_.front().t; }

private:
    std::vector<Tensor> params_;
    std::vector<AdamState> states_;
    AdamOptions opts_;
};

}  // namespace dpt
