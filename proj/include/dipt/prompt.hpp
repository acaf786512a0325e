#pragma once

#include <cstddef>
#include <map>
#include <string>

#include "dipt/diffcore/tensor.hpp"

namespace dipt {

enum class PromptKind { dip, dsp };

inline std::string to_string(PromptKind kind) { return kind == PromptKind::dip ? "dip" : "dsp"; }

/// Key/value prefix rows injected into one attention layer, each [l_half, m]
/// (or [batch, l_half, m] when prompts differ per sample).
template <class T>
struct PromptBlock {
    BasicTensor<T> key;
    BasicTensor<T> value;
};

/// Per-layer prompt blocks keyed by 1-based attention layer index.
template <class T>
struct Prompt {
    PromptKind kind = PromptKind::dsp;
    std::size_t l_half = 0;
    std::size_t width = 0;
    std::map<int, PromptBlock<T>> blocks;

    std::size_t parameter_count() const { return blocks.size() * 2 * l_half * width; }
};

}  // namespace dipt
