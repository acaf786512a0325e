#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dipt/backbone.hpp"
#include "dipt/container.hpp"
#include "dipt/diffcore/ops.hpp"
#include "dipt/fourier.hpp"
#include "dipt/prompt.hpp"

namespace dipt {

inline const std::vector<int>& prompt_layers(const BackboneConfig& config, PromptKind kind) {
    return kind == PromptKind::dip ? config.dip_layers : config.dsp_layers;
}

/// Fresh prompt with entries drawn i.i.d. from uniform(-0.05, 0.05).
template <class T = float>
Prompt<T> init_prompt(PromptKind kind, const BackboneConfig& config, std::size_t l_half, Rng& rng) {
    config.validate();
    if (l_half == 0) throw std::invalid_argument("init_prompt: l_half must be positive");
    std::uniform_real_distribution<double> uniform(-0.05, 0.05);
    Prompt<T> p{kind, l_half, config.embed_dim, {}};
    auto draw = [&] {
        std::vector<T> v(l_half * config.embed_dim);
        for (auto& x : v) x = static_cast<T>(uniform(rng));
        return BasicTensor<T>({l_half, config.embed_dim}, std::move(v), true);
    };
    for (int layer : prompt_layers(config, kind)) {
        auto key = draw();
        auto value = draw();
        p.blocks.emplace(layer, PromptBlock<T>{std::move(key), std::move(value)});
    }
    return p;
}

/// Deep copy whose tensors share nothing with `p`.
template <class T>
Prompt<T> copy_prompt(const Prompt<T>& p, bool requires_grad = false) {
    Prompt<T> out{p.kind, p.l_half, p.width, {}};
    for (const auto& [layer, blk] : p.blocks) {
        auto key = blk.key.clone();
        auto value = blk.value.clone();
        key.set_requires_grad(requires_grad);
        value.set_requires_grad(requires_grad);
        out.blocks.emplace(layer, PromptBlock<T>{std::move(key), std::move(value)});
    }
    return out;
}

template <class T>
std::vector<NamedParam<T>> prompt_parameters(Prompt<T>& p, const std::string& prefix) {
    std::vector<NamedParam<T>> out;
    for (auto& [layer, blk] : p.blocks) {
        out.push_back({prefix + "/L" + std::to_string(layer) + "/k", blk.key});
        out.push_back({prefix + "/L" + std::to_string(layer) + "/v", blk.value});
    }
    return out;
}

inline std::size_t flat_length(std::size_t layers, std::size_t l_half, std::size_t width) {
    return layers * 2 * l_half * width;
}

/// Ascending layer, key before value, row-major. Differentiable.
template <class T>
BasicTensor<T> flatten(const Prompt<T>& p) {
    if (p.blocks.empty()) throw std::invalid_argument("flatten: prompt has no blocks");
    const std::size_t n = p.l_half * p.width;
    std::vector<BasicTensor<T>> parts;
    for (const auto& [layer, blk] : p.blocks) {
        parts.push_back(reshape(blk.key, {n}));
        parts.push_back(reshape(blk.value, {n}));
    }
    return concat<T>(parts, 0);
}

/// Inverse of flatten; differentiable with respect to `vec`.
template <class T>
Prompt<T> unflatten(const BasicTensor<T>& vec, PromptKind kind, const std::vector<int>& layers, std::size_t l_half,
                    std::size_t width) {
    const std::size_t n = l_half * width;
    const Shape want{flat_length(layers.size(), l_half, width)};
    if (vec.shape() != want) throw ShapeError("unflatten", to_string(want), vec.shape());
    std::vector<int> sorted(layers);
    std::sort(sorted.begin(), sorted.end());
    Prompt<T> p{kind, l_half, width, {}};
    std::size_t offset = 0;
    for (int layer : sorted) {
        auto key = reshape(slice(vec, 0, offset, n), {l_half, width});
        auto value = reshape(slice(vec, 0, offset + n, n), {l_half, width});
        offset += 2 * n;
        p.blocks.emplace(layer, PromptBlock<T>{std::move(key), std::move(value)});
    }
    return p;
}

template <class T>
std::uint64_t prompt_checksum(const Prompt<T>& p, std::uint64_t seed = 0xcbf29ce484222325ULL) {
    std::uint64_t h = seed;
    for (const auto& [layer, blk] : p.blocks) {
        std::vector<float> k(blk.key.data().begin(), blk.key.data().end());
        std::vector<float> v(blk.value.data().begin(), blk.value.data().end());
        h = checksum(v, checksum(k, h ^ static_cast<std::uint64_t>(layer)));
    }
    return h;
}

template <class T>
struct BankEntry {
    AmplitudeKey key;
    Prompt<T> dsp;
};

class BankError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// The latest DIP plus an append-only list of (amplitude key, DSP) entries.
/// Stored prompts are private deep copies without gradient tracking.
template <class T = float>
class PromptBank {
public:
    PromptBank() = default;
    PromptBank(const BackboneConfig& config, std::size_t l_half)
        : l_half_(l_half), width_(config.embed_dim), dip_layers_(config.dip_layers), dsp_layers_(config.dsp_layers) {}

    std::size_t time_step() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    std::size_t l_half() const { return l_half_; }
    std::size_t width() const { return width_; }
    const std::vector<int>& dip_layers() const { return dip_layers_; }
    const std::vector<int>& dsp_layers() const { return dsp_layers_; }

    const std::optional<Prompt<T>>& dip() const { return dip_; }
    const std::vector<BankEntry<T>>& entries() const { return entries_; }
    const BankEntry<T>& entry(std::size_t j) const { return entries_.at(j); }

    std::vector<AmplitudeKey> keys() const {
        std::vector<AmplitudeKey> out;
        for (const auto& e : entries_) out.push_back(e.key);
        return out;
    }

    void append_entry(const AmplitudeKey& key, const Prompt<T>& dsp) {
        check_prompt(dsp, PromptKind::dsp);
        if (!entries_.empty() && !key.amplitude.same_shape(entries_.front().key.amplitude)) {
            throw BankError("append_entry: key shape differs from earlier keys");
        }
        if (key.amplitude.values.size() != key.amplitude.channels * key.amplitude.height * key.amplitude.width) {
            throw BankError("append_entry: malformed key");
        }
        entries_.push_back(BankEntry<T>{key, copy_prompt(dsp)});
    }

    /// Replaces the DIP; allowed once per time step, after that step's entry was appended.
    void set_dip(const Prompt<T>& dip) {
        check_prompt(dip, PromptKind::dip);
        if (entries_.empty()) throw BankError("set_dip: append the step's entry first");
        if (dip_step_ == time_step()) {
            throw BankError("set_dip: DIP already written at time step " + std::to_string(time_step()));
        }
        dip_ = copy_prompt(dip);
        dip_step_ = time_step();
    }

    std::uint64_t entry_checksum(std::size_t j) const {
        const auto& e = entries_.at(j);
        return prompt_checksum(e.dsp, checksum(e.key.amplitude.values));
    }

    std::vector<NamedArray> to_arrays() const {
        std::vector<NamedArray> out;
        auto put = [&](const std::string& prefix, const Prompt<T>& p) {
            for (const auto& [layer, blk] : p.blocks) {
                out.push_back(to_named_array(prefix + "/L" + std::to_string(layer) + "/k", blk.key));
                out.push_back(to_named_array(prefix + "/L" + std::to_string(layer) + "/v", blk.value));
            }
        };
        if (dip_) put("dip", *dip_);
        for (std::size_t j = 0; j < entries_.size(); ++j) {
            const auto t = std::to_string(j + 1);
            put("dsp" + t, entries_[j].dsp);
            const auto& a = entries_[j].key.amplitude;
            out.push_back(NamedArray{"key" + t, {a.channels, a.height, a.width}, a.values});
        }
        return out;
    }

    nlohmann::json sidecar() const {
        return {{"time_step", time_step()},
                {"l_half", l_half_},
                {"m", width_},
                {"layers", {{"dip", dip_layers_}, {"dsp", dsp_layers_}}}};
    }

    static PromptBank from_arrays(const nlohmann::json& sidecar, std::span<const NamedArray> arrays) {
        PromptBank bank;
        try {
            bank.l_half_ = sidecar.at("l_half").get<std::size_t>();
            bank.width_ = sidecar.at("m").get<std::size_t>();
            bank.dip_layers_ = sidecar.at("layers").at("dip").get<std::vector<int>>();
            bank.dsp_layers_ = sidecar.at("layers").at("dsp").get<std::vector<int>>();
        } catch (const nlohmann::json::exception& e) {
            throw BankError(std::string("bank sidecar: ") + e.what());
        }
        const auto steps = sidecar.at("time_step").get<std::size_t>();
        auto load = [&](const std::string& prefix, PromptKind kind, const std::vector<int>& layers) {
            Prompt<T> p{kind, bank.l_half_, bank.width_, {}};
            for (int layer : layers) {
                const auto base = prefix + "/L" + std::to_string(layer);
                p.blocks.emplace(layer, PromptBlock<T>{to_tensor<T>(find_array(arrays, base + "/k")),
                                                       to_tensor<T>(find_array(arrays, base + "/v"))});
            }
            bank.check_prompt(p, kind);
            return p;
        };
        for (std::size_t j = 0; j < steps; ++j) {
            const auto t = std::to_string(j + 1);
            const auto& k = find_array(arrays, "key" + t);
            if (k.shape.size() != 3) throw BankError("bank: key" + t + " must have rank 3");
            AmplitudeKey key{Amplitude{k.shape[0], k.shape[1], k.shape[2], k.values}, static_cast<int>(j + 1)};
            bank.entries_.push_back(BankEntry<T>{std::move(key), load("dsp" + t, PromptKind::dsp, bank.dsp_layers_)});
        }
        const bool has_dip = std::any_of(arrays.begin(), arrays.end(), [](const NamedArray& a) { return a.name.starts_with("dip/"); });
        if (has_dip) {
            bank.dip_ = load("dip", PromptKind::dip, bank.dip_layers_);
            bank.dip_step_ = steps;
        }
        return bank;
    }

private:
    void check_prompt(const Prompt<T>& p, PromptKind kind) const {
        if (p.kind != kind) throw BankError("bank: expected a " + to_string(kind) + " prompt");
        if (p.l_half != l_half_ || p.width != width_) throw BankError("bank: prompt dimensions differ from the bank's");
        const auto& layers = kind == PromptKind::dip ? dip_layers_ : dsp_layers_;
        if (p.blocks.size() != layers.size()) throw BankError("bank: " + to_string(kind) + " prompt layer count mismatch");
        const Shape want{l_half_, width_};
        for (int layer : layers) {
            auto it = p.blocks.find(layer);
            if (it == p.blocks.end()) throw BankError("bank: " + to_string(kind) + " prompt lacks layer " + std::to_string(layer));
            if (it->second.key.shape() != want) throw ShapeError("bank prompt key", to_string(want), it->second.key.shape());
            if (it->second.value.shape() != want) throw ShapeError("bank prompt value", to_string(want), it->second.value.shape());
        }
    }

    std::size_t l_half_ = 0;
    std::size_t width_ = 0;
    std::vector<int> dip_layers_;
    std::vector<int> dsp_layers_;
    std::optional<Prompt<T>> dip_;
    std::size_t dip_step_ = 0;
    std::vector<BankEntry<T>> entries_;
};

/// Serialized size of the bank in the tensor container format.
template <class T>
std::size_t bank_bytes(const PromptBank<T>& bank) {
    const auto arrays = bank.to_arrays();
    return container_bytes(arrays);
}

/// Index (0-based) of the entry whose key is most cosine-similar to `amplitude`; ties go to the lowest index.
template <class T>
std::size_t select_dsp(const PromptBank<T>& bank, const Amplitude& amplitude) {
    if (bank.empty()) throw BankError("select_dsp: empty bank");
    std::size_t best = 0;
    double best_score = -1.0;
    for (std::size_t j = 0; j < bank.entries().size(); ++j) {
        const double g = amplitude_cosine(amplitude, bank.entries()[j].key.amplitude);
        if (g > best_score) {
            best_score = g;
            best = j;
        }
    }
    return best;
}

template <class T>
void save_bank(const std::filesystem::path& stem, const PromptBank<T>& bank) {
    const auto arrays = bank.to_arrays();
    save_container(std::filesystem::path(stem).replace_extension(".bin"), arrays);
    std::ofstream js(std::filesystem::path(stem).replace_extension(".json"));
    if (!js) throw ContainerError("cannot write bank sidecar next to " + stem.string());
    js << bank.sidecar().dump(2) << '\n';
}

template <class T = float>
PromptBank<T> load_bank(const std::filesystem::path& stem) {
    const auto json_path = std::filesystem::path(stem).replace_extension(".json");
    std::ifstream js(json_path);
    if (!js) throw ContainerError("cannot read " + json_path.string());
    nlohmann::json sidecar;
    try {
        js >> sidecar;
    } catch (const nlohmann::json::exception& e) {
        throw BankError(json_path.string() + ": " + e.what());
    }
    const auto arrays = load_container(std::filesystem::path(stem).replace_extension(".bin"));
    return PromptBank<T>::from_arrays(sidecar, arrays);
}

}  // namespace dipt
