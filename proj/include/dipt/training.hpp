#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "dipt/image.hpp"

namespace dipt {

/// Non-finite loss or similar failure during an optimization loop.
class TrainingError : public std::runtime_error {
public:
    TrainingError(const std::string& what, std::size_t epoch)
        : std::runtime_error(what + " (epoch " + std::to_string(epoch) + ")"), epoch_(epoch) {}

    std::size_t epoch() const noexcept { return epoch_; }

private:
    std::size_t epoch_;
};

/// Shuffled minibatch index lists covering [0, count).
inline std::vector<std::vector<std::size_t>> shuffled_batches(std::size_t count, std::size_t batch_size, Rng& rng) {
    if (batch_size == 0) throw std::invalid_argument("shuffled_batches: batch_size must be positive");
    std::vector<std::size_t> order(count);
    std::iota(order.begin(), order.end(), std::size_t{0});
    // Fisher-Yates with explicit draws so the order is stable across standard libraries.
    for (std::size_t i = count; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % i);
        std::swap(order[i - 1], order[j]);
    }
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < count; start += batch_size) {
        const auto end = std::min(count, start + batch_size);
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;
}

/// Consecutive index ranges, for evaluation.
inline std::vector<std::vector<std::size_t>> sequential_batches(std::size_t count, std::size_t batch_size) {
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < count; start += batch_size) {
        std::vector<std::size_t> b(std::min(count, start + batch_size) - start);
        std::iota(b.begin(), b.end(), start);
        batches.push_back(std::move(b));
    }
    return batches;
}

template <class T>
std::size_t argmax(const T* values, std::size_t n) {
    return static_cast<std::size_t>(std::max_element(values, values + n) - values);
}

}  // namespace dipt
