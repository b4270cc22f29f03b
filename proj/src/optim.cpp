#include "dpt/optim.hpp"

#include <cmath>
#include <numbers>

#include "dpt/error.hpp"

namespace dpt {

double cosine_lr(std::int64_t step, std::int64_t total, double base_lr) {
    if (total <= 0) throw InvalidArgument("cosine_lr needs total > 0");
    const double progress = static_cast<double>(step) / static_cast<double>(total);
    return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

void adam_step(Tensor& param, AdamState& state, double lr, const AdamOptions& opts) {
    const std::size_t n = param.numel();
    if (state.m.size() != n) {
        state.m.assign(n, 0.0);
        state.v.assign(n, 0.0);
        state.t = 0;
    }
    ++state.t;
    const double c1 = 1.0 - std::pow(opts.beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(opts.beta2, static_cast<double>(state.t));
    auto w = param.mutable_data();
    auto g = param.grad();
    const bool has_grad = !g.empty();
    for (std::size_t i = 0; i < n; ++i) {
        const double gi = has_grad ? g[i] : 0.0;
        state.m[i] = opts.beta1 * state.m[i] + (1.0 - opts.beta1) * gi;
        state.v[i] = opts.beta2 * state.v[i] + (1.0 - opts.beta2) * gi * gi;
        const double mhat = state.m[i] / c1;
        const double vhat = state.v[i] / c2;
        w[i] -= lr * mhat / (std::sqrt(vhat) + opts.eps);
    }
}

Adam::Adam(std::vector<Tensor> params, AdamOptions opts)
    : params_(std::move(params)), states_(params_.size()), opts_(opts) {}

void Adam::step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) adam_step(params_[i], states_[i], lr, opts_);
}

void Adam::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

}  // namespace dpt
