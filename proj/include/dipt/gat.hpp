#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <stdexcept>
#include <vector>

#include "dipt/backbone.hpp"
#include "dipt/diffcore/adam.hpp"
#include "dipt/diffcore/ops.hpp"
#include "dipt/fourier.hpp"
#include "dipt/prompts.hpp"
#include "dipt/training.hpp"

// Single-head graph attention over the prompt graph: a star centred on the DIP
// node with one edge per DSP plus a self loop.

namespace dipt {

template <class T = float>
struct GATParams {
    BasicTensor<T> W;  // [L, L]
    BasicTensor<T> a;  // [2L]
    T leaky_slope = T(0.2);

    std::size_t length() const { return W.dim(0); }
};

/// W = I + N(0, 0.01^2), a = 0.
template <class T = float>
GATParams<T> init_gat(std::size_t length, Rng& rng) {
    if (length == 0) throw std::invalid_argument("init_gat: length must be positive");
    std::normal_distribution<double> noise(0.0, 0.01);
    std::vector<T> w(length * length);
    for (auto& v : w) v = static_cast<T>(noise(rng));
    for (std::size_t i = 0; i < length; ++i) w[i * length + i] += T(1);
    return GATParams<T>{BasicTensor<T>({length, length}, std::move(w), true),
                        BasicTensor<T>::zeros({2 * length}, true)};
}

template <class T = float>
struct PromptGraph {
    BasicTensor<T> dip;               // [L]
    std::vector<BasicTensor<T>> dsp;  // t nodes of [L]

    std::size_t size() const { return dsp.size(); }
};

/// Graph over the bank's DSPs with `previous_dip` at the centre; node vectors carry no gradient.
template <class T>
PromptGraph<T> make_graph(const Prompt<T>& previous_dip, const PromptBank<T>& bank) {
    PromptGraph<T> g{flatten(previous_dip).detach(), {}};
    for (const auto& e : bank.entries()) g.dsp.push_back(flatten(e.dsp).detach());
    return g;
}

namespace detail {

template <class T>
void check_graph(const GATParams<T>& params, const PromptGraph<T>& graph) {
    const auto L = params.W.rank() == 2 ? params.W.dim(0) : 0;
    if (params.W.shape() != Shape{L, L} || L == 0) throw ShapeError("gat", "square W", params.W.shape());
    if (params.a.shape() != Shape{2 * L}) throw ShapeError("gat", to_string(Shape{2 * L}) + " attention vector", params.a.shape());
    if (graph.dsp.empty()) throw std::invalid_argument("gat: graph has no DSP nodes");
    if (graph.dip.shape() != Shape{L}) throw ShapeError("gat dip node", to_string(Shape{L}), graph.dip.shape());
    for (const auto& n : graph.dsp) {
        if (n.shape() != Shape{L}) throw ShapeError("gat dsp node", to_string(Shape{L}), n.shape());
    }
}

// Rows [p_I; p_s^1; ...; p_s^t] mapped through W: [t + 1, L].
template <class T>
BasicTensor<T> transformed_nodes(const GATParams<T>& params, const PromptGraph<T>& graph) {
    const auto L = params.length();
    std::vector<BasicTensor<T>> rows{reshape(graph.dip, {1, L})};
    for (const auto& n : graph.dsp) rows.push_back(reshape(n, {1, L}));
    return matmul_nt(concat<T>(rows, 0), params.W);
}

template <class T>
BasicTensor<T> coefficients_from(const GATParams<T>& params, const BasicTensor<T>& wx) {
    const auto L = params.length();
    const auto a_self = reshape(slice(params.a, 0, 0, L), {L, 1});
    const auto a_nbr = reshape(slice(params.a, 0, L, L), {L, 1});
    const auto centre = reshape(matmul(slice(wx, 0, 0, 1), a_self), {1});
    const auto rows = wx.dim(0);
    return reshape(leaky_relu(add(matmul(wx, a_nbr), centre), params.leaky_slope), {rows});
}

}  // namespace detail

/// e[0] = e_II, e[j] = e_IS^j, each leaky_relu(a^T [W p_I || W p]).
template <class T>
BasicTensor<T> coefficients(const GATParams<T>& params, const PromptGraph<T>& graph) {
    detail::check_graph(params, graph);
    return detail::coefficients_from(params, detail::transformed_nodes(params, graph));
}

/// Softmax over the self loop and the t neighbours.
template <class T>
BasicTensor<T> normalize(const BasicTensor<T>& e) {
    if (e.rank() != 1 || e.size() < 2) throw ShapeError("gat normalize", "[t + 1] with t >= 1", e.shape());
    for (T v : e.data()) {
        if (!std::isfinite(v)) throw std::domain_error("gat normalize: non-finite coefficient");
    }
    return softmax(e);
}

/// alpha_II W p_I + sum_j alpha_IS^j W p_s^j, as a length-L vector.
template <class T>
BasicTensor<T> refine(const GATParams<T>& params, const PromptGraph<T>& graph) {
    detail::check_graph(params, graph);
    const auto wx = detail::transformed_nodes(params, graph);
    const auto alpha = normalize(detail::coefficients_from(params, wx));
    const auto n = alpha.size();
    return reshape(matmul(reshape(alpha, {1, n}), wx), {params.length()});
}

template <class T>
Prompt<T> refine_prompt(const GATParams<T>& params, const PromptGraph<T>& graph, const PromptBank<T>& bank) {
    return unflatten(refine(params, graph), PromptKind::dip, bank.dip_layers(), bank.l_half(), bank.width());
}

struct GatTrainOptions {
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    double learning_rate = 1e-4;
};

template <class T = float>
struct GatTrainResult {
    Prompt<T> dip;
    std::vector<double> epoch_loss;
};

/// Per-sample DSP choice by amplitude-key retrieval.
template <class T>
std::vector<std::size_t> retrieve_all(const PromptBank<T>& bank, const Dataset& data) {
    std::vector<std::size_t> out(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out[i] = select_dsp(bank, fft2(data.images[i]).amplitude);
    return out;
}

namespace detail {

template <class T>
BasicTensor<T> gat_batch_loss(const GATParams<T>& params, const PromptGraph<T>& graph, const PromptBank<T>& bank,
                              const VisionTransformer<T>& model, const Dataset& data, std::span<const std::size_t> idx,
                              std::span<const std::size_t> chosen) {
    const auto dip = refine_prompt(params, graph, bank);
    PromptPlan<T> plan{&dip, {}};
    std::vector<const Image*> imgs;
    std::vector<int> labels;
    for (auto i : idx) {
        imgs.push_back(&data.images[i]);
        labels.push_back(data.labels[i]);
        plan.dsp.push_back(&bank.entry(chosen[i]).dsp);
    }
    return cross_entropy(model.forward(model.patchify(imgs), plan), labels);
}

}  // namespace detail

/// Mean cross-entropy of the refined DIP over `data`, with per-sample retrieved DSPs.
template <class T>
double gat_loss(const GATParams<T>& params, const PromptGraph<T>& graph, const PromptBank<T>& bank,
                const VisionTransformer<T>& model, const Dataset& data, std::size_t batch_size = 64) {
    NoGradGuard no_grad;
    const auto chosen = retrieve_all(bank, data);
    double total = 0.0;
    for (const auto& idx : sequential_batches(data.size(), batch_size)) {
        total += detail::gat_batch_loss(params, graph, bank, model, data, idx, chosen).item() *
                 static_cast<double>(idx.size());
    }
    return total / static_cast<double>(data.size());
}

/// Trains W and a so the refined DIP works with every retrieved DSP. `epoch_data(e)`
/// supplies the training set for epoch e. Model and bank stay untouched.
template <class T>
GatTrainResult<T> train_gat(GATParams<T>& params, const PromptGraph<T>& graph, const PromptBank<T>& bank,
                            const VisionTransformer<T>& model, const std::function<Dataset(std::size_t)>& epoch_data,
                            const GatTrainOptions& options, Rng& rng) {
    if (bank.empty()) throw BankError("train_gat: empty bank");
    if (graph.size() != bank.time_step()) throw std::invalid_argument("train_gat: graph does not match the bank");
    std::vector<NamedParam<T>> named{{"gat/W", params.W}, {"gat/a", params.a}};
    Adam<T> adam(named, AdamConfig{options.learning_rate});
    GatTrainResult<T> result;
    for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
        const Dataset data = epoch_data(epoch);
        if (data.empty()) throw std::invalid_argument("train_gat: empty epoch data");
        const auto chosen = retrieve_all(bank, data);
        double total = 0.0;
        for (const auto& idx : shuffled_batches(data.size(), options.batch_size, rng)) {
            BasicTape<T> tape;
            BasicTapeScope<T> scope(tape);
            auto loss = detail::gat_batch_loss(params, graph, bank, model, data, idx, chosen);
            if (!std::isfinite(loss.item())) throw TrainingError("train_gat: non-finite loss", epoch);
            tape.backward(loss);
            adam.step();
            adam.zero_grad();
            total += loss.item() * static_cast<double>(idx.size());
        }
        result.epoch_loss.push_back(total / static_cast<double>(data.size()));
    }
    NoGradGuard no_grad;
    result.dip = copy_prompt(refine_prompt(params, graph, bank));
    return result;
}

}  // namespace dipt
