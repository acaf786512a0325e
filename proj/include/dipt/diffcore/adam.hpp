#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dipt/diffcore/tensor.hpp"

namespace dipt {

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Moment buffers for one optimizer; buffers line up with the parameter list.
template <class T>
struct AdamState {
    std::vector<std::vector<T>> first_moment;
    std::vector<std::vector<T>> second_moment;
    std::uint64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

template <class T>
struct NamedParam {
    std::string name;
    BasicTensor<T> tensor;
};

/// One bias-corrected Adam update over all params. Throws std::domain_error naming
/// the first parameter whose gradient holds a NaN; in that case nothing is modified.
template <class T>
void adam_step(std::span<NamedParam<T>> params, std::span<const std::span<const T>> grads, AdamState<T>& state,
               double learning_rate) {
    if (params.size() != grads.size()) {
        throw std::invalid_argument("adam_step: " + std::to_string(params.size()) + " params but " +
                                    std::to_string(grads.size()) + " gradients");
    }
    if (state.first_moment.empty()) {
        for (const auto& p : params) {
            state.first_moment.emplace_back(p.tensor.size(), T(0));
            state.second_moment.emplace_back(p.tensor.size(), T(0));
        }
    }
    if (state.first_moment.size() != params.size()) {
        throw std::invalid_argument("adam_step: state tracks " + std::to_string(state.first_moment.size()) +
                                    " params, got " + std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (grads[i].size() != params[i].tensor.size() || state.first_moment[i].size() != params[i].tensor.size()) {
            throw ShapeError("adam_step", std::to_string(params[i].tensor.size()) + " gradient entries for " +
                                              params[i].name,
                             Shape{grads[i].size()});
        }
        for (T g : grads[i]) {
            if (std::isnan(g)) throw std::domain_error("adam_step: NaN gradient in parameter '" + params[i].name + "'");
        }
    }

    ++state.step;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    const T b1 = T(state.beta1), b2 = T(state.beta2);
    const T step_size = T(learning_rate / bc1);
    const T inv_sqrt_bc2 = T(1.0 / std::sqrt(bc2));
    const T eps = T(state.epsilon);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto w = params[i].tensor.mutable_data();
        auto& m = state.first_moment[i];
        auto& v = state.second_moment[i];
        const auto& g = grads[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
            m[j] = b1 * m[j] + (T(1) - b1) * g[j];
            v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
            w[j] -= step_size * m[j] / (std::sqrt(v[j]) * inv_sqrt_bc2 + eps);
        }
    }
}

/// Adam bound to a fixed parameter list; reads gradients straight from the tensors.
template <class T>
class Adam {
public:
    Adam(std::vector<NamedParam<T>> params, AdamConfig config) : params_(std::move(params)), config_(config) {
        state_.beta1 = config.beta1;
        state_.beta2 = config.beta2;
        state_.epsilon = config.epsilon;
    }

    void step() {
        std::vector<std::span<const T>> grads;
        grads.reserve(params_.size());
        for (auto& p : params_) grads.push_back(p.tensor.grad());
        adam_step<T>(params_, grads, state_, config_.learning_rate);
    }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

    const AdamState<T>& state() const { return state_; }
    const std::vector<NamedParam<T>>& params() const { return params_; }
    double learning_rate() const { return config_.learning_rate; }
    void set_learning_rate(double lr) { config_.learning_rate = lr; }

private:
    std::vector<NamedParam<T>> params_;
    AdamConfig config_;
    AdamState<T> state_;
};

}  // namespace dipt
