#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <random>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dipt/container.hpp"
#include "dipt/diffcore/adam.hpp"
#include "dipt/diffcore/ops.hpp"
#include "dipt/image.hpp"
#include "dipt/prompt.hpp"
#include "dipt/training.hpp"

// Desk-scale ViT classifier: patch embedding + pre-norm encoder blocks whose
// attention accepts key/value prefixes, followed by a class-token linear head.
// The trunk (everything but the head) is the frozen feature extractor.

namespace dipt {

struct BackboneConfig {
    std::size_t image_size = 32;
    std::size_t patch_size = 4;
    std::size_t channels = 3;
    std::size_t embed_dim = 64;
    std::size_t depth = 6;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 4;
    std::size_t num_classes = 2;
    std::vector<int> dip_layers{1, 2};  // 1-based attention layers
    std::vector<int> dsp_layers{3, 4};

    std::size_t grid() const { return image_size / patch_size; }
    std::size_t num_patches() const { return grid() * grid(); }
    std::size_t tokens() const { return num_patches() + 1; }
    std::size_t patch_dim() const { return patch_size * patch_size * channels; }
    std::size_t head_dim() const { return embed_dim / heads; }

    void validate() const {
        auto fail = [](const std::string& msg) { throw std::invalid_argument("BackboneConfig: " + msg); };
        if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
            fail("image_size must be a positive multiple of patch_size");
        if (heads == 0 || embed_dim == 0 || embed_dim % heads != 0) fail("embed_dim must be divisible by heads");
        if (depth == 0 || channels == 0 || mlp_ratio == 0 || num_classes < 2) fail("degenerate dimensions");
        std::set<int> seen;
        for (const auto* layers : {&dip_layers, &dsp_layers}) {
            for (int l : *layers) {
                if (l < 1 || static_cast<std::size_t>(l) > depth) fail("prompt layer " + std::to_string(l) + " outside [1, depth]");
                if (!seen.insert(l).second) fail("layer " + std::to_string(l) + " listed twice or in both prompt sets");
            }
        }
    }

    bool operator==(const BackboneConfig&) const = default;
};

/// Which prompts feed a forward pass. `dsp` is empty (none), one shared prompt,
/// or one prompt per sample in the batch.
template <class T>
struct PromptPlan {
    const Prompt<T>* dip = nullptr;
    std::vector<const Prompt<T>*> dsp;
};

template <class T>
struct EncoderBlock {
    BasicTensor<T> ln1_gamma, ln1_beta;
    BasicTensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
    BasicTensor<T> ln2_gamma, ln2_beta;
    BasicTensor<T> w1, b1, w2, b2;

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + "ln1/gamma", ln1_gamma);
        f(prefix + "ln1/beta", ln1_beta);
        f(prefix + "attn/wq", wq);
        f(prefix + "attn/bq", bq);
        f(prefix + "attn/wk", wk);
        f(prefix + "attn/bk", bk);
        f(prefix + "attn/wv", wv);
        f(prefix + "attn/bv", bv);
        f(prefix + "attn/wo", wo);
        f(prefix + "attn/bo", bo);
        f(prefix + "ln2/gamma", ln2_gamma);
        f(prefix + "ln2/beta", ln2_beta);
        f(prefix + "mlp/w1", w1);
        f(prefix + "mlp/b1", b1);
        f(prefix + "mlp/w2", w2);
        f(prefix + "mlp/b2", b2);
    }
};

template <class T>
class VisionTransformer {
public:
    VisionTransformer(const BackboneConfig& config, Rng& rng) : config_(config) {
        config_.validate();
        const auto m = config_.embed_dim;
        const auto hidden = m * config_.mlp_ratio;
        std::normal_distribution<double> normal(0.0, 0.02);
        auto randn = [&](Shape s) {
            std::vector<T> v(numel(s));
            for (auto& x : v) x = static_cast<T>(normal(rng));
            return BasicTensor<T>(std::move(s), std::move(v), true);
        };
        auto zeros = [](Shape s) { return BasicTensor<T>::zeros(std::move(s), true); };
        auto ones = [](Shape s) { return BasicTensor<T>::full(std::move(s), T(1), true); };

        patch_w_ = randn({config_.patch_dim(), m});
        patch_b_ = zeros({m});
        cls_ = randn({m});
        pos_ = randn({config_.tokens(), m});
        blocks_.resize(config_.depth);
        for (auto& b : blocks_) {
            b.ln1_gamma = ones({m});
            b.ln1_beta = zeros({m});
            b.wq = randn({m, m});
            b.bq = zeros({m});
            b.wk = randn({m, m});
            b.bk = zeros({m});
            b.wv = randn({m, m});
            b.bv = zeros({m});
            b.wo = randn({m, m});
            b.bo = zeros({m});
            b.ln2_gamma = ones({m});
            b.ln2_beta = zeros({m});
            b.w1 = randn({m, hidden});
            b.b1 = zeros({hidden});
            b.w2 = randn({hidden, m});
            b.b2 = zeros({m});
        }
        norm_gamma_ = ones({m});
        norm_beta_ = zeros({m});
        head_w_ = randn({m, config_.num_classes});
        head_b_ = zeros({config_.num_classes});
    }

    /// Rebuilds a model from checkpoint arrays; shapes must match `config`.
    static VisionTransformer from_arrays(const BackboneConfig& config, std::span<const NamedArray> arrays,
                                         bool trunk_frozen = true, bool head_frozen = false) {
        Rng rng(0);
        VisionTransformer model(config, rng);
        model.visit_all([&](const std::string& name, BasicTensor<T>& t) {
            const auto& a = find_array(arrays, name);
            if (a.shape != t.shape()) throw ShapeError("checkpoint '" + name + "'", to_string(t.shape()), a.shape);
            std::copy(a.values.begin(), a.values.end(), t.mutable_data().begin());
        });
        if (trunk_frozen) model.freeze_trunk();
        if (head_frozen) model.freeze_head();
        return model;
    }

    std::vector<NamedArray> to_arrays() const {
        std::vector<NamedArray> out;
        const_cast<VisionTransformer*>(this)->visit_all(
            [&](const std::string& name, BasicTensor<T>& t) { out.push_back(to_named_array(name, t)); });
        return out;
    }

    const BackboneConfig& config() const { return config_; }

    std::vector<NamedParam<T>> trunk_parameters() {
        std::vector<NamedParam<T>> out;
        visit_trunk([&](const std::string& name, BasicTensor<T>& t) { out.push_back({name, t}); });
        return out;
    }

    std::vector<NamedParam<T>> head_parameters() { return {{"head/w", head_w_}, {"head/b", head_b_}}; }

    void freeze_trunk() {
        visit_trunk([](const std::string&, BasicTensor<T>& t) { t.set_requires_grad(false); });
        trunk_frozen_ = true;
    }
    void freeze_head() {
        head_w_.set_requires_grad(false);
        head_b_.set_requires_grad(false);
        head_frozen_ = true;
    }
    void unfreeze_head() {
        head_w_.set_requires_grad(true);
        head_b_.set_requires_grad(true);
        head_frozen_ = false;
    }
    bool trunk_frozen() const { return trunk_frozen_; }
    bool head_frozen() const { return head_frozen_; }

    std::uint64_t trunk_checksum() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        const_cast<VisionTransformer*>(this)->visit_trunk([&](const std::string&, BasicTensor<T>& t) {
            std::vector<float> v(t.data().begin(), t.data().end());
            h = checksum(v, h);
        });
        return h;
    }

    std::uint64_t head_checksum() const {
        std::vector<float> v(head_w_.data().begin(), head_w_.data().end());
        v.insert(v.end(), head_b_.data().begin(), head_b_.data().end());
        return checksum(v);
    }

    /// Images -> [batch, patches, patch_size^2 * channels]; patches row-major, pixels (dy, dx, c).
    BasicTensor<T> patchify(std::span<const Image* const> images) const {
        const auto p = config_.patch_size, g = config_.grid(), c = config_.channels;
        const auto pd = config_.patch_dim();
        std::vector<T> out(images.size() * config_.num_patches() * pd);
        std::size_t o = 0;
        for (const Image* img : images) {
            if (img->height != config_.image_size || img->width != config_.image_size || img->channels != c) {
                throw ShapeError("patch_embed",
                                 to_string(Shape{config_.image_size, config_.image_size, c}) + " image",
                                 Shape{img->height, img->width, img->channels});
            }
            for (std::size_t py = 0; py < g; ++py)
                for (std::size_t px = 0; px < g; ++px)
                    for (std::size_t dy = 0; dy < p; ++dy)
                        for (std::size_t dx = 0; dx < p; ++dx)
                            for (std::size_t ch = 0; ch < c; ++ch)
                                out[o++] = static_cast<T>(img->at(py * p + dy, px * p + dx, ch));
        }
        return BasicTensor<T>({images.size(), config_.num_patches(), pd}, std::move(out));
    }

    BasicTensor<T> patchify(const Image& image) const {
        const Image* ptr = &image;
        return patchify(std::span<const Image* const>(&ptr, 1));
    }

    /// [batch, patches, patch_dim] -> [batch, patches + 1, m] with class token first and positions added.
    BasicTensor<T> patch_embed(const BasicTensor<T>& patches) const {
        if (patches.rank() != 3 || patches.dim(1) != config_.num_patches() || patches.dim(2) != config_.patch_dim()) {
            throw ShapeError("patch_embed", "[batch, " + std::to_string(config_.num_patches()) + ", " +
                                                std::to_string(config_.patch_dim()) + "]",
                             patches.shape());
        }
        const auto batch = patches.dim(0);
        auto emb = add(matmul(patches, patch_w_), patch_b_);
        auto cls = tile(reshape(cls_, {1, config_.embed_dim}), batch);
        return add(concat<T>({cls, emb}, 1), pos_);
    }

    /// Attention sublayer with its residual: h + MSA(LN(h)) where keys/values are
    /// [prefix; h] and queries come from h only. `prefix` may be null.
    BasicTensor<T> msa_prefix(const BasicTensor<T>& h, const PromptBlock<T>* prefix, int layer) const {
        const auto& b = block(layer);
        const auto m = config_.embed_dim, heads = config_.heads, dh = config_.head_dim();
        if (h.rank() != 3 || h.dim(2) != m) throw ShapeError("msa_prefix", "[batch, tokens, " + std::to_string(m) + "]", h.shape());
        const auto batch = h.dim(0), n = h.dim(1);

        auto split_heads = [&](const BasicTensor<T>& x, std::size_t rows) {
            return permute(reshape(x, {batch, rows, heads, dh}), {0, 2, 1, 3});
        };
        auto x = layer_norm(h, b.ln1_gamma, b.ln1_beta);
        const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(dh));
        auto q = split_heads(scale(add(matmul(x, b.wq), b.bq), inv_sqrt_dh), n);
        auto k = split_heads(add(matmul(x, b.wk), b.bk), n);
        auto v = split_heads(add(matmul(x, b.wv), b.bv), n);

        if (prefix != nullptr && prefix->key.defined()) {
            const auto& pk = prefix->key;
            const auto& pv = prefix->value;
            if (pk.shape() != pv.shape()) throw ShapeError("msa_prefix", "value prefix of shape " + to_string(pk.shape()), pv.shape());
            if (pk.dim(pk.rank() - 1) != m) throw ShapeError("msa_prefix", "prefix width " + std::to_string(m), pk.shape());
            auto batched = [&](const BasicTensor<T>& p) {
                if (p.rank() == 2) return tile(p, batch);
                if (p.rank() == 3 && p.dim(0) == batch) return p;
                throw ShapeError("msa_prefix", "[l, m] or [" + std::to_string(batch) + ", l, m] prefix", p.shape());
            };
            const auto l = pk.dim(pk.rank() - 2);
            if (l > 0) {
                k = concat<T>({split_heads(batched(pk), l), k}, 2);
                v = concat<T>({split_heads(batched(pv), l), v}, 2);
            }
        }
        auto attended = matmul(softmax(matmul_nt(q, k)), v);
        auto merged = reshape(permute(attended, {0, 2, 1, 3}), {batch, n, m});
        return add(h, add(matmul(merged, b.wo), b.bo));
    }

    /// MLP sublayer with its residual.
    BasicTensor<T> mlp(const BasicTensor<T>& h, int layer) const {
        const auto& b = block(layer);
        auto x = layer_norm(h, b.ln2_gamma, b.ln2_beta);
        return add(h, add(matmul(gelu(add(matmul(x, b.w1), b.b1)), b.w2), b.b2));
    }

    /// Final-normalized class token, [batch, m].
    BasicTensor<T> features(const BasicTensor<T>& patches, const PromptPlan<T>& plan = {}) const {
        const auto batch = patches.dim(0);
        check_plan(plan, batch);
        auto h = patch_embed(patches);
        for (std::size_t i = 1; i <= config_.depth; ++i) {
            const int layer = static_cast<int>(i);
            PromptBlock<T> prefix = layer_prefix(plan, layer, batch);
            h = mlp(msa_prefix(h, prefix.key.defined() ? &prefix : nullptr, layer), layer);
        }
        h = layer_norm(h, norm_gamma_, norm_beta_);
        return reshape(slice(h, 1, 0, 1), {batch, config_.embed_dim});
    }

    /// Logits [batch, num_classes].
    BasicTensor<T> forward(const BasicTensor<T>& patches, const PromptPlan<T>& plan = {}) const {
        return classify(features(patches, plan));
    }

    /// Logits [num_classes] for a single image.
    BasicTensor<T> forward(const Image& image, const Prompt<T>* dip = nullptr, const Prompt<T>* dsp = nullptr) const {
        PromptPlan<T> plan{dip, {}};
        if (dsp != nullptr) plan.dsp.push_back(dsp);
        return reshape(forward(patchify(image), plan), {config_.num_classes});
    }

    /// The classification layer f_phi applied to [batch, m] features.
    BasicTensor<T> classify(const BasicTensor<T>& features) const { return add(matmul(features, head_w_), head_b_); }

    const EncoderBlock<T>& block(int layer) const {
        if (layer < 1 || static_cast<std::size_t>(layer) > blocks_.size()) {
            throw std::out_of_range("VisionTransformer: layer " + std::to_string(layer) + " outside [1, depth]");
        }
        return blocks_[static_cast<std::size_t>(layer - 1)];
    }

    /// Raises when a prompt does not target exactly its configured layers.
    void check_plan(const PromptPlan<T>& plan, std::size_t batch) const {
        auto check = [&](const Prompt<T>& p, PromptKind kind, const std::vector<int>& layers) {
            if (p.kind != kind) throw std::invalid_argument("prompt plan: expected a " + to_string(kind) + " prompt");
            std::set<int> want(layers.begin(), layers.end()), got;
            for (const auto& [l, blk] : p.blocks) {
                got.insert(l);
                const Shape expect{p.l_half, config_.embed_dim};
                if (blk.key.shape() != expect) throw ShapeError("prompt plan", to_string(expect), blk.key.shape());
                if (blk.value.shape() != expect) throw ShapeError("prompt plan", to_string(expect), blk.value.shape());
            }
            if (want != got) {
                throw std::invalid_argument("prompt plan: " + to_string(kind) + " prompt layers do not match the configured layer set");
            }
        };
        if (plan.dip != nullptr) check(*plan.dip, PromptKind::dip, config_.dip_layers);
        if (!plan.dsp.empty() && plan.dsp.size() != 1 && plan.dsp.size() != batch) {
            throw std::invalid_argument("prompt plan: " + std::to_string(plan.dsp.size()) + " DSPs for a batch of " +
                                        std::to_string(batch));
        }
        const Prompt<T>* last = nullptr;
        for (const auto* p : plan.dsp) {
            if (p == nullptr) throw std::invalid_argument("prompt plan: null DSP");
            if (p != last) check(*p, PromptKind::dsp, config_.dsp_layers);
            if (last != nullptr && p->l_half != last->l_half) throw std::invalid_argument("prompt plan: DSP lengths differ");
            last = p;
        }
    }

private:
    PromptBlock<T> layer_prefix(const PromptPlan<T>& plan, int layer, std::size_t batch) const {
        if (plan.dip != nullptr) {
            auto it = plan.dip->blocks.find(layer);
            if (it != plan.dip->blocks.end()) return it->second;
        }
        if (plan.dsp.empty()) return {};
        const bool shared = std::all_of(plan.dsp.begin(), plan.dsp.end(), [&](const auto* p) { return p == plan.dsp.front(); });
        auto first = plan.dsp.front()->blocks.find(layer);
        if (first == plan.dsp.front()->blocks.end()) return {};
        if (shared) return first->second;
        std::vector<BasicTensor<T>> keys, values;
        keys.reserve(batch);
        values.reserve(batch);
        const Shape row{1, plan.dsp.front()->l_half, config_.embed_dim};
        for (const auto* p : plan.dsp) {
            const auto& blk = p->blocks.at(layer);
            keys.push_back(reshape(blk.key, row));
            values.push_back(reshape(blk.value, row));
        }
        return {concat<T>(keys, 0), concat<T>(values, 0)};
    }

    template <class F>
    void visit_trunk(F&& f) {
        f("patch/w", patch_w_);
        f("patch/b", patch_b_);
        f("cls", cls_);
        f("pos", pos_);
        for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].visit("block" + std::to_string(i + 1) + "/", f);
        f("norm/gamma", norm_gamma_);
        f("norm/beta", norm_beta_);
    }

    template <class F>
    void visit_all(F&& f) {
        visit_trunk(f);
        f("head/w", head_w_);
        f("head/b", head_b_);
    }

    BackboneConfig config_;
    BasicTensor<T> patch_w_, patch_b_, cls_, pos_;
    std::vector<EncoderBlock<T>> blocks_;
    BasicTensor<T> norm_gamma_, norm_beta_;
    BasicTensor<T> head_w_, head_b_;
    bool trunk_frozen_ = false;
    bool head_frozen_ = false;
};

/// Argmax labels for a dataset with a fixed prompt plan (one shared DSP at most).
template <class T>
std::vector<int> predict(const VisionTransformer<T>& model, const Dataset& data, const PromptPlan<T>& plan = {},
                         std::size_t batch_size = 64) {
    NoGradGuard no_grad;
    std::vector<int> out;
    out.reserve(data.size());
    for (const auto& idx : sequential_batches(data.size(), batch_size)) {
        std::vector<const Image*> imgs;
        for (auto i : idx) imgs.push_back(&data.images[i]);
        auto logits = model.forward(model.patchify(imgs), plan);
        const auto c = model.config().num_classes;
        for (std::size_t r = 0; r < idx.size(); ++r) {
            out.push_back(static_cast<int>(argmax(logits.data().data() + r * c, c)));
        }
    }
    return out;
}

struct PretrainOptions {
    std::size_t epochs = 15;
    std::size_t batch_size = 32;
    double learning_rate = 3e-4;
    double warmup_fraction = 0.1;  // linear warmup, then cosine decay to zero
};

struct PretrainReport {
    double final_loss = 0.0;
    double train_accuracy = 0.0;
};

/// Trains the whole model with cross-entropy, then freezes the trunk. The head stays trainable.
template <class T>
PretrainReport pretrain(VisionTransformer<T>& model, const Dataset& data, const PretrainOptions& options, Rng& rng) {
    if (data.empty()) throw std::invalid_argument("pretrain: empty dataset");
    if (options.batch_size == 0) throw std::invalid_argument("pretrain: batch_size must be positive");
    auto params = model.trunk_parameters();
    for (auto& p : model.head_parameters()) params.push_back(p);
    for (auto& p : params) p.tensor.set_requires_grad(true);
    model.unfreeze_head();
    Adam<T> adam(params, AdamConfig{options.learning_rate});

    const std::size_t per_epoch = (data.size() + options.batch_size - 1) / options.batch_size;
    const double total_steps = static_cast<double>(per_epoch * options.epochs);
    const double warmup = std::max(1.0, std::floor(options.warmup_fraction * total_steps));
    std::size_t step = 0;
    auto schedule = [&] {
        const double s = static_cast<double>(++step);
        if (s <= warmup) return options.learning_rate * s / warmup;
        const double progress = (s - warmup) / std::max(1.0, total_steps - warmup);
        return options.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    };

    PretrainReport report;
    for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
        double total = 0.0;
        std::size_t seen = 0;
        for (const auto& idx : shuffled_batches(data.size(), options.batch_size, rng)) {
            std::vector<const Image*> imgs;
            std::vector<int> labels;
            for (auto i : idx) {
                imgs.push_back(&data.images[i]);
                labels.push_back(data.labels[i]);
            }
            BasicTape<T> tape;
            BasicTapeScope<T> scope(tape);
            auto loss = cross_entropy(model.forward(model.patchify(imgs)), labels);
            if (!std::isfinite(loss.item())) throw TrainingError("pretrain: non-finite loss", epoch);
            tape.backward(loss);
            adam.set_learning_rate(schedule());
            adam.step();
            adam.zero_grad();
            total += loss.item() * static_cast<double>(idx.size());
            seen += idx.size();
        }
        report.final_loss = total / static_cast<double>(seen);
    }
    model.freeze_trunk();
    const auto pred = predict(model, data);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == data.labels[i];
    report.train_accuracy = static_cast<double>(correct) / static_cast<double>(pred.size());
    return report;
}

}  // namespace dipt
