#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace dipt {

class MetricError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// R[i][j]: accuracy after training step i (0-based) on domain j. Columns at or
/// past `steps` beyond the training domains are held-out domains.
struct AccuracyMatrix {
    std::size_t steps = 0;
    std::size_t domains = 0;
    std::vector<double> values;

    AccuracyMatrix() = default;
    AccuracyMatrix(std::size_t n, std::size_t d) : steps(n), domains(d), values(n * d, 0.0) {
        if (d < n) throw MetricError("AccuracyMatrix: fewer domains than training steps");
    }

    double& at(std::size_t i, std::size_t j) { return values.at(i * domains + j); }
    double at(std::size_t i, std::size_t j) const { return values.at(i * domains + j); }

    std::size_t heldout() const { return domains - steps; }

    std::vector<std::vector<double>> rows() const {
        std::vector<std::vector<double>> out(steps);
        for (std::size_t i = 0; i < steps; ++i) out[i].assign(values.begin() + i * domains, values.begin() + (i + 1) * domains);
        return out;
    }

    void validate() const {
        if (values.size() != steps * domains) throw MetricError("AccuracyMatrix: size does not match dimensions");
        for (double v : values) {
            if (!(v >= 0.0 && v <= 1.0)) throw MetricError("AccuracyMatrix: entry outside [0, 1]");
        }
    }
};

inline double accuracy(std::span<const int> predictions, std::span<const int> labels) {
    if (predictions.size() != labels.size()) throw MetricError("accuracy: length mismatch");
    if (predictions.empty()) throw MetricError("accuracy: no samples");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hit += predictions[i] == labels[i];
    return static_cast<double>(hit) / static_cast<double>(labels.size());
}

/// Backward transfer: mean change on each past domain after later steps.
inline double bwt(const AccuracyMatrix& R) {
    const std::size_t n = R.steps;
    if (n < 2) throw MetricError("bwt: needs at least two training domains");
    double total = 0.0;
    for (std::size_t i = 1; i < n; ++i)
        for (std::size_t j = 0; j < i; ++j) total += R.at(i, j) - R.at(j, j);
    return 2.0 * total / static_cast<double>(n * (n - 1));
}

/// Incremental-learning average over the lower triangle including the diagonal.
inline double il(const AccuracyMatrix& R) {
    const std::size_t n = R.steps;
    if (n < 1) throw MetricError("il: empty matrix");
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j) total += R.at(i, j);
    return 2.0 * total / static_cast<double>(n * (n + 1));
}

/// Forward transfer over the strict upper triangle of training columns. With
/// `include_heldout`, each row also contributes the mean over held-out columns
/// as one extra term, and the normalizer grows to N(N+1)/2.
inline double ftu(const AccuracyMatrix& R, bool include_heldout = false) {
    const std::size_t n = R.steps;
    if (n < 2) throw MetricError("ftu: needs at least two training domains");
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) total += R.at(i, j);
    if (!include_heldout || R.heldout() == 0) return 2.0 * total / static_cast<double>(n * (n - 1));
    for (std::size_t i = 0; i < n; ++i) {
        double h = 0.0;
        for (std::size_t j = n; j < R.domains; ++j) h += R.at(i, j);
        total += h / static_cast<double>(R.heldout());
    }
    return 2.0 * total / static_cast<double>(n * (n + 1));
}

/// Model-size efficiency: min(1, mean(theta_1 / theta_i)).
inline double ms(std::span<const double> theta) {
    if (theta.empty()) throw MetricError("ms: empty memory log");
    double total = 0.0;
    for (double t : theta) {
        if (!(t > 0.0)) throw MetricError("ms: memory sizes must be positive");
        total += theta.front() / t;
    }
    return std::min(1.0, total / static_cast<double>(theta.size()));
}

/// Average additional memory relative to the first step, in the units of theta.
inline double aams(std::span<const double> theta) {
    if (theta.empty()) throw MetricError("aams: empty memory log");
    double total = 0.0;
    for (double t : theta) total += std::abs(t - theta.front());
    return total / static_cast<double>(theta.size());
}

struct Report {
    std::string method;
    std::uint64_t seed = 0;
    AccuracyMatrix R;
    std::vector<double> theta;
};

namespace detail {
inline nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }
}  // namespace detail

inline nlohmann::json report_json(const Report& r) {
    const auto& R = r.R;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    nlohmann::json j;
    j["method"] = r.method;
    j["seed"] = r.seed;
    j["N"] = R.steps;
    j["R"] = R.rows();
    j["acc_last"] = R.steps > 0 ? R.rows().back() : std::vector<double>{};
    j["bwt"] = detail::finite_or_null(R.steps >= 2 ? bwt(R) : nan);
    j["il"] = detail::finite_or_null(R.steps >= 1 ? il(R) : nan);
    j["ftu"] = detail::finite_or_null(R.steps >= 2 ? ftu(R, false) : nan);
    j["ftu_heldout"] = detail::finite_or_null(R.steps >= 2 ? ftu(R, true) : nan);
    j["theta_bytes"] = r.theta;
    j["ms"] = detail::finite_or_null(r.theta.empty() ? nan : ms(r.theta));
    j["aams_bytes"] = detail::finite_or_null(r.theta.empty() ? nan : aams(r.theta));
    return j;
}

/// Reads the R matrix, N, seed and memory log back from a report document.
inline Report report_from_json(const nlohmann::json& j) {
    Report r;
    r.method = j.value("method", std::string{});
    r.seed = j.at("seed").get<std::uint64_t>();
    const auto rows = j.at("R").get<std::vector<std::vector<double>>>();
    const auto n = j.at("N").get<std::size_t>();
    if (rows.size() != n) throw MetricError("report: R has " + std::to_string(rows.size()) + " rows, N = " + std::to_string(n));
    const std::size_t d = rows.empty() ? n : rows.front().size();
    r.R = AccuracyMatrix(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        if (rows[i].size() != d) throw MetricError("report: ragged R");
        for (std::size_t k = 0; k < d; ++k) r.R.at(i, k) = rows[i][k];
    }
    r.R.validate();
    if (j.contains("theta_bytes")) r.theta = j.at("theta_bytes").get<std::vector<double>>();
    return r;
}

}  // namespace dipt
