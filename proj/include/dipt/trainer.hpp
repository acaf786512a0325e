#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "dipt/backbone.hpp"
#include "dipt/datagen.hpp"
#include "dipt/diffcore/adam.hpp"
#include "dipt/fourier.hpp"
#include "dipt/gat.hpp"
#include "dipt/metrics.hpp"
#include "dipt/prompts.hpp"
#include "dipt/training.hpp"

namespace dipt {

struct TrainConfig {
    std::size_t epochs_step1 = 20;
    std::size_t epochs_dsp = 20;
    std::size_t epochs_gat = 10;
    std::size_t batch_size = 32;
    double lr_step1 = 7.5e-4;
    double lr_later = 1e-4;  // GAT
    double lr_dsp = 7.5e-4;
    std::size_t l_half = 5;
    std::uint64_t seed = 0;

    void validate() const {
        if (batch_size == 0) throw std::invalid_argument("TrainConfig: batch_size must be positive");
        if (l_half == 0) throw std::invalid_argument("TrainConfig: l_half must be positive");
        if (!(lr_step1 > 0) || !(lr_later > 0) || !(lr_dsp > 0)) throw std::invalid_argument("TrainConfig: learning rates must be positive");
    }
};

/// Runtime knobs that do not change results.
struct RunOptions {
    std::size_t eval_threads = 1;
    std::function<void(const std::string&)> log;
};

/// Failure inside a training step, tagged with the 1-based time step.
class StepError : public std::runtime_error {
public:
    StepError(std::size_t step, const std::string& what)
        : std::runtime_error("time step " + std::to_string(step) + ": " + what), step_(step) {}
    std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_;
};

/// Checksums captured after every time step.
struct RunAudit {
    std::uint64_t trunk_before = 0;
    std::vector<std::uint64_t> trunk;
    std::vector<std::uint64_t> head;
    std::vector<std::vector<std::uint64_t>> entries;  // per step, checksum of each bank entry
    std::size_t isolation_violations = 0;
};

template <class T = float>
struct DilResult {
    PromptBank<T> bank;
    AccuracyMatrix R;
    std::vector<double> theta;
    RunAudit audit;
};

namespace detail {

inline void note(const RunOptions& opt, const std::string& msg) {
    if (opt.log) opt.log(msg);
}

/// Minibatch cross-entropy training of `params` with the prompts in `plan`.
template <class T>
double fit(const VisionTransformer<T>& model, const Dataset& data, const PromptPlan<T>& plan,
           std::vector<NamedParam<T>> params, double lr, std::size_t epochs, std::size_t batch_size, Rng& rng,
           const std::string& what) {
    if (data.empty()) throw std::invalid_argument(what + ": empty training set");
    Adam<T> adam(std::move(params), AdamConfig{lr});
    double last = 0.0;
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        double total = 0.0;
        for (const auto& idx : shuffled_batches(data.size(), batch_size, rng)) {
            std::vector<const Image*> imgs;
            std::vector<int> labels;
            for (auto i : idx) {
                imgs.push_back(&data.images[i]);
                labels.push_back(data.labels[i]);
            }
            BasicTape<T> tape;
            BasicTapeScope<T> scope(tape);
            auto loss = cross_entropy(model.forward(model.patchify(imgs), plan), labels);
            if (!std::isfinite(loss.item())) throw TrainingError(what + ": non-finite loss", epoch);
            tape.backward(loss);
            adam.step();
            adam.zero_grad();
            total += loss.item() * static_cast<double>(idx.size());
        }
        last = total / static_cast<double>(data.size());
    }
    return last;
}

template <class T>
std::size_t checkpoint_bytes(const VisionTransformer<T>& model) {
    const auto arrays = model.to_arrays();
    return container_bytes(arrays);
}

// Runs `work(batch_index)` over fixed batches on up to `threads` workers.
// Batch boundaries never depend on the thread count, so results do not either.
inline void parallel_batches(std::size_t batches, std::size_t threads, const std::function<void(std::size_t)>& work) {
    threads = std::max<std::size_t>(1, std::min(threads, batches));
    if (threads == 1) {
        for (std::size_t b = 0; b < batches; ++b) work(b);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t w = 0; w < threads; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t b = w; b < batches; b += threads) work(b);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

}  // namespace detail

/// Label for one image: retrieve the DSP by amplitude key, pair it with the latest DIP.
template <class T>
int infer(const VisionTransformer<T>& model, const PromptBank<T>& bank, const Image& x) {
    if (bank.empty() || !bank.dip()) throw BankError("infer: bank has no prompts");
    NoGradGuard no_grad;
    const auto j = select_dsp(bank, fft2(x).amplitude);
    const auto logits = model.forward(x, &*bank.dip(), &bank.entry(j).dsp);
    return static_cast<int>(argmax(logits.data().data(), logits.size()));
}

/// Batched equivalent of infer over a dataset.
template <class T>
std::vector<int> infer_all(const VisionTransformer<T>& model, const PromptBank<T>& bank, const Dataset& data,
                           std::size_t threads = 1, std::size_t batch_size = 64) {
    if (bank.empty() || !bank.dip()) throw BankError("infer: bank has no prompts");
    const auto batches = sequential_batches(data.size(), batch_size);
    std::vector<int> out(data.size());
    detail::parallel_batches(batches.size(), threads, [&](std::size_t b) {
        NoGradGuard no_grad;
        const auto& idx = batches[b];
        std::vector<const Image*> imgs;
        PromptPlan<T> plan{&*bank.dip(), {}};
        for (auto i : idx) {
            imgs.push_back(&data.images[i]);
            plan.dsp.push_back(&bank.entry(select_dsp(bank, fft2(data.images[i]).amplitude)).dsp);
        }
        const auto logits = model.forward(model.patchify(imgs), plan);
        const auto c = model.config().num_classes;
        for (std::size_t r = 0; r < idx.size(); ++r) out[idx[r]] = static_cast<int>(argmax(logits.data().data() + r * c, c));
    });
    return out;
}

/// Fixed-plan batched prediction, parallel over batches.
template <class T>
std::vector<int> predict_parallel(const VisionTransformer<T>& model, const Dataset& data, const PromptPlan<T>& plan,
                                  std::size_t threads = 1, std::size_t batch_size = 64) {
    const auto batches = sequential_batches(data.size(), batch_size);
    std::vector<int> out(data.size());
    detail::parallel_batches(batches.size(), threads, [&](std::size_t b) {
        NoGradGuard no_grad;
        const auto& idx = batches[b];
        std::vector<const Image*> imgs;
        for (auto i : idx) imgs.push_back(&data.images[i]);
        const auto logits = model.forward(model.patchify(imgs), plan);
        const auto c = model.config().num_classes;
        for (std::size_t r = 0; r < idx.size(); ++r) out[idx[r]] = static_cast<int>(argmax(logits.data().data() + r * c, c));
    });
    return out;
}

/// Step 1: DIP, DSP and the head trained jointly on D_1; the head is frozen afterwards.
template <class T>
PromptBank<T> train_step_one(VisionTransformer<T>& model, DomainStream& stream, const TrainConfig& config, Rng& rng) {
    config.validate();
    stream.begin_step(0);
    const Dataset& data = stream.train(0);
    PromptBank<T> bank(model.config(), config.l_half);
    auto dip = init_prompt<T>(PromptKind::dip, model.config(), config.l_half, rng);
    auto dsp = init_prompt<T>(PromptKind::dsp, model.config(), config.l_half, rng);
    model.unfreeze_head();
    auto params = prompt_parameters(dip, "dip");
    for (auto& p : prompt_parameters(dsp, "dsp1")) params.push_back(p);
    for (auto& p : model.head_parameters()) params.push_back(p);
    detail::fit(model, data, PromptPlan<T>{&dip, {&dsp}}, params, config.lr_step1, config.epochs_step1, config.batch_size,
                rng, "step 1");
    model.freeze_head();
    bank.append_entry(average_amplitude(data.images, 1), dsp);
    bank.set_dip(dip);
    return bank;
}

/// Fresh DSP trained on `data` with the bank's DIP held fixed.
template <class T>
Prompt<T> train_dsp(const VisionTransformer<T>& model, const PromptBank<T>& bank, const Dataset& data,
                    const TrainConfig& config, Rng& rng) {
    if (!bank.dip()) throw BankError("train_dsp: bank has no DIP");
    auto dsp = init_prompt<T>(PromptKind::dsp, model.config(), config.l_half, rng);
    detail::fit(model, data, PromptPlan<T>{&*bank.dip(), {&dsp}}, prompt_parameters(dsp, "dsp"), config.lr_dsp,
                config.epochs_dsp, config.batch_size, rng, "dsp");
    return dsp;
}

/// D_t plus one style-augmented copy of every image, mixing the given keys with fresh weights.
inline Dataset with_style_augmented(const Dataset& data, std::span<const AmplitudeKey> keys, Rng& rng) {
    Dataset out = data;
    for (std::size_t i = 0; i < data.size(); ++i) out.push_back(style_augment(data.images[i], keys, rng).image, data.labels[i]);
    return out;
}

template <class T = float>
struct RefineReport {
    std::vector<double> epoch_loss;
};

/// Key, bank entry, GAT refinement and DIP overwrite for a step t >= 2.
template <class T>
RefineReport<T> refine_step(const VisionTransformer<T>& model, PromptBank<T>& bank, const Dataset& data,
                            const Prompt<T>& dsp, const TrainConfig& config, Rng& rng) {
    if (bank.empty() || !bank.dip()) throw BankError("refine_step: bank must hold step 1");
    const int t = static_cast<int>(bank.time_step() + 1);
    // The key is the plain average amplitude; augmentation then mixes k_1..k_t.
    auto key = average_amplitude(data.images, t);
    auto keys = bank.keys();
    keys.push_back(key);
    bank.append_entry(key, dsp);

    const Prompt<T> previous = copy_prompt(*bank.dip());
    const auto graph = make_graph(previous, bank);
    auto params = init_gat<T>(graph.dip.size(), rng);
    auto epoch_data = [&](std::size_t) { return with_style_augmented(data, keys, rng); };
    auto trained = train_gat<T>(params, graph, bank, model, epoch_data,
                                GatTrainOptions{config.epochs_gat, config.batch_size, config.lr_later}, rng);
    bank.set_dip(trained.dip);
    return RefineReport<T>{std::move(trained.epoch_loss)};
}

/// Test accuracy on every domain, delivered or not.
inline std::vector<double> evaluate_row(const DomainStream& stream,
                                        const std::function<std::vector<int>(const Dataset&)>& predict_fn) {
    std::vector<double> row;
    for (std::size_t j = 0; j < stream.num_domains(); ++j) {
        const auto& test = stream.test(j);
        row.push_back(accuracy(predict_fn(test), test.labels));
    }
    return row;
}

/// The full domain-incremental loop. Mutates `model`'s head during step 1.
template <class T>
DilResult<T> run_dil(VisionTransformer<T>& model, DomainStream& stream, const TrainConfig& config,
                     const RunOptions& options = {}) {
    config.validate();
    stream.restart();
    const auto n = stream.num_train();
    DilResult<T> out;
    out.R = AccuracyMatrix(n, stream.num_domains());
    out.audit.trunk_before = model.trunk_checksum();
    const auto violations_before = stream.violations();
    const auto ckpt_bytes = detail::checkpoint_bytes(model);

    for (std::size_t t = 0; t < n; ++t) {
        Rng rng(mix_seed(config.seed, 100 + t));
        try {
            if (t == 0) {
                out.bank = train_step_one(model, stream, config, rng);
            } else {
                stream.begin_step(t);
                const Dataset& data = stream.train(t);
                const auto dsp = train_dsp(model, out.bank, data, config, rng);
                refine_step(model, out.bank, data, dsp, config, rng);
            }
            const auto row = evaluate_row(stream, [&](const Dataset& d) {
                return infer_all(model, out.bank, d, options.eval_threads);
            });
            for (std::size_t j = 0; j < row.size(); ++j) out.R.at(t, j) = row[j];
        } catch (const StepError&) {
            throw;
        } catch (const std::exception& e) {
            throw StepError(t + 1, e.what());
        }
        out.theta.push_back(static_cast<double>(bank_bytes(out.bank) + ckpt_bytes));
        out.audit.trunk.push_back(model.trunk_checksum());
        out.audit.head.push_back(model.head_checksum());
        std::vector<std::uint64_t> sums;
        for (std::size_t j = 0; j < out.bank.time_step(); ++j) sums.push_back(out.bank.entry_checksum(j));
        out.audit.entries.push_back(std::move(sums));
        detail::note(options, "step " + std::to_string(t + 1) + "/" + std::to_string(n) + " done");
    }
    out.audit.isolation_violations = stream.violations() - violations_before;
    return out;
}

template <class T = float>
struct BaselineResult {
    AccuracyMatrix R;
    std::vector<double> theta;
};

/// One DIP+DSP pair and the head finetuned on each domain in turn; no bank, GAT or augmentation.
template <class T>
BaselineResult<T> baseline_seq_finetune(VisionTransformer<T>& model, DomainStream& stream, const TrainConfig& config,
                                        const RunOptions& options = {}) {
    config.validate();
    stream.restart();
    const auto n = stream.num_train();
    BaselineResult<T> out{AccuracyMatrix(n, stream.num_domains()), {}};
    Rng init_rng(mix_seed(config.seed, 99));
    auto dip = init_prompt<T>(PromptKind::dip, model.config(), config.l_half, init_rng);
    auto dsp = init_prompt<T>(PromptKind::dsp, model.config(), config.l_half, init_rng);
    model.unfreeze_head();
    const PromptPlan<T> plan{&dip, {&dsp}};
    const auto prompt_bytes = [&] {
        auto arrays = model.to_arrays();
        for (auto* p : {&dip, &dsp}) {
            for (const auto& [layer, blk] : p->blocks) {
                arrays.push_back(to_named_array(to_string(p->kind) + "/L" + std::to_string(layer) + "/k", blk.key));
                arrays.push_back(to_named_array(to_string(p->kind) + "/L" + std::to_string(layer) + "/v", blk.value));
            }
        }
        return container_bytes(arrays);
    }();
    for (std::size_t t = 0; t < n; ++t) {
        Rng rng(mix_seed(config.seed, 100 + t));
        try {
            stream.begin_step(t);
            const Dataset& data = stream.train(t);
            auto params = prompt_parameters(dip, "dip");
            for (auto& p : prompt_parameters(dsp, "dsp")) params.push_back(p);
            for (auto& p : model.head_parameters()) params.push_back(p);
            detail::fit(model, data, plan, params, config.lr_step1, config.epochs_step1, config.batch_size, rng, "seqft");
            const auto row = evaluate_row(stream, [&](const Dataset& d) {
                return predict_parallel(model, d, plan, options.eval_threads);
            });
            for (std::size_t j = 0; j < row.size(); ++j) out.R.at(t, j) = row[j];
        } catch (const std::exception& e) {
            throw StepError(t + 1, e.what());
        }
        out.theta.push_back(static_cast<double>(prompt_bytes));
        detail::note(options, "seqft step " + std::to_string(t + 1) + "/" + std::to_string(n) + " done");
    }
    model.freeze_head();
    return out;
}

}  // namespace dipt
