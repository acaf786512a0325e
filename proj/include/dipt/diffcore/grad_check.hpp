#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dipt/diffcore/tensor.hpp"

namespace dipt {

namespace detail {

template <class T>
T relative_error(T analytic, T numeric) {
    return std::abs(analytic - numeric) / (std::abs(analytic) + std::abs(numeric) + T(1e-8));
}

template <class T>
T checked_scalar(const BasicTensor<T>& out) {
    if (out.size() != 1) throw AutogradError("grad_check: function must return a scalar, got " + to_string(out.shape()));
    const T v = out.item();
    if (!std::isfinite(v)) throw std::domain_error("grad_check: function returned a non-finite value");
    return v;
}

}  // namespace detail

/// Max over coordinates of |analytic - central difference| / (|analytic| + |central| + 1e-8)
/// for a scalar function of one tensor.
template <class T>
T grad_check(const std::function<BasicTensor<T>(const BasicTensor<T>&)>& f, const BasicTensor<T>& point, T h) {
    if (!(h > T(0))) throw std::invalid_argument("grad_check: step must be positive");
    BasicTensor<T> x(point.shape(), point.values(), true);
    std::vector<T> analytic;
    {
        BasicTape<T> tape;
        BasicTapeScope<T> scope(tape);
        auto out = f(x);
        detail::checked_scalar(out);
        tape.backward(out);
        analytic.assign(x.grad().begin(), x.grad().end());
    }
    T worst = 0;
    auto values = x.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
        const T orig = values[i];
        T plus, minus;
        {
            NoGradGuard no_grad;
            values[i] = orig + h;
            plus = detail::checked_scalar(f(x));
            values[i] = orig - h;
            minus = detail::checked_scalar(f(x));
        }
        values[i] = orig;
        const T numeric = (plus - minus) / (T(2) * h);
        if (!std::isfinite(analytic[i])) throw std::domain_error("grad_check: non-finite analytic gradient");
        worst = std::max(worst, detail::relative_error(analytic[i], numeric));
    }
    return worst;
}

/// Same measure, for a loss closure over several leaf parameters that are perturbed in place.
template <class T>
T grad_check_params(const std::function<BasicTensor<T>()>& loss, std::vector<BasicTensor<T>> params, T h) {
    if (!(h > T(0))) throw std::invalid_argument("grad_check_params: step must be positive");
    for (auto& p : params) p.zero_grad();
    std::vector<std::vector<T>> analytic;
    {
        BasicTape<T> tape;
        BasicTapeScope<T> scope(tape);
        auto out = loss();
        detail::checked_scalar(out);
        tape.backward(out);
        for (auto& p : params) analytic.emplace_back(p.grad().begin(), p.grad().end());
    }
    T worst = 0;
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto values = params[k].mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const T orig = values[i];
            T plus, minus;
            {
                NoGradGuard no_grad;
                values[i] = orig + h;
                plus = detail::checked_scalar(loss());
                values[i] = orig - h;
                minus = detail::checked_scalar(loss());
            }
            values[i] = orig;
            worst = std::max(worst, detail::relative_error(analytic[k][i], (plus - minus) / (T(2) * h)));
        }
    }
    for (auto& p : params) p.zero_grad();
    return worst;
}

}  // namespace dipt
