#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dipt/config.hpp"
#include "dipt/container.hpp"
#include "dipt/datagen.hpp"
#include "dipt/fourier.hpp"
#include "dipt/metrics.hpp"
#include "dipt/png_io.hpp"
#include "dipt/prompts.hpp"
#include "dipt/trainer.hpp"

// Subcommand bodies. Each returns a process exit code:
// 0 ok, 1 internal, 2 config, 3 missing artifact, 4 empty input.

namespace dipt::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kInternal = 1, kConfig = 2, kMissing = 3, kEmpty = 4 };

class CommandError : public std::runtime_error {
public:
    CommandError(int code, const std::string& what) : std::runtime_error(what), code_(code) {}
    int code() const noexcept { return code_; }

private:
    int code_;
};

struct Context {
    std::ostream& out;
    std::ostream& err;
    std::size_t threads = 1;
    bool verbose = true;
};

inline fs::path checkpoint_path(const fs::path& dir) { return dir / "backbone.ckpt"; }
inline fs::path report_path(const fs::path& dir, const std::string& method, std::uint64_t seed) {
    return dir / method / ("report_seed" + std::to_string(seed) + ".json");
}
inline fs::path bank_stem(const fs::path& dir, std::uint64_t seed) { return dir / "ours" / ("bank_seed" + std::to_string(seed)); }

inline void write_json(const fs::path& path, const nlohmann::json& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os) throw CommandError(kInternal, "cannot write " + path.string());
    os << j.dump(2) << '\n';
}

inline nlohmann::json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw CommandError(kMissing, "cannot read " + path.string());
    try {
        nlohmann::json j;
        in >> j;
        return j;
    } catch (const nlohmann::json::exception& e) {
        throw CommandError(kConfig, path.string() + ": " + e.what());
    }
}

inline VisionTransformer<float> load_backbone(const ExperimentConfig& cfg, const fs::path& dir) {
    const auto path = checkpoint_path(dir);
    if (!fs::exists(path)) throw CommandError(kMissing, "missing checkpoint " + path.string() + " (run pretrain first)");
    std::vector<NamedArray> arrays;
    try {
        arrays = load_container(path);
        return VisionTransformer<float>::from_arrays(cfg.backbone, arrays);
    } catch (const ShapeError& e) {
        throw CommandError(kConfig, "checkpoint does not match the backbone config: " + std::string(e.what()));
    } catch (const ContainerError& e) {
        throw CommandError(kMissing, e.what());
    }
}

inline Dataset source_test_set(const ExperimentConfig& cfg) {
    Rng rng(mix_seed(cfg.stream.seed, 0x5e57));
    return gen_domain(source_style(mix_seed(cfg.stream.seed, 0)), cfg.stream.rule, 512, cfg.stream.image_size, rng);
}

inline int cmd_pretrain(const ExperimentConfig& cfg, const fs::path& dir, Context& ctx) {
    const auto source = make_source(cfg.stream);
    Rng rng(mix_seed(cfg.pretrain_seed, 0xb0b));
    VisionTransformer<float> model(cfg.backbone, rng);
    if (ctx.verbose) ctx.err << "pretraining on " << source.size() << " source images, " << cfg.pretrain.epochs << " epochs\n";
    const auto report = pretrain(model, source, cfg.pretrain, rng);
    const auto test = source_test_set(cfg);
    const double acc = accuracy(predict(model, test), test.labels);
    fs::create_directories(dir);
    const auto arrays = model.to_arrays();
    save_container(checkpoint_path(dir), arrays);
    nlohmann::json summary{{"pretrain_acc", acc},
                           {"train_acc", report.train_accuracy},
                           {"final_loss", report.final_loss},
                           {"seed", cfg.pretrain_seed},
                           {"checkpoint", checkpoint_path(dir).filename().string()}};
    write_json(dir / "pretrain.json", summary);
    ctx.out << summary.dump() << '\n';
    return kOk;
}

/// One seed of one method; returns the report document.
inline nlohmann::json run_seed(const ExperimentConfig& cfg, const std::string& method, std::uint64_t seed,
                               const fs::path& dir, Context& ctx) {
    auto model = load_backbone(cfg, dir);
    auto stream = make_stream(stream_for_seed(cfg.stream, seed));
    TrainConfig tc = cfg.train;
    tc.seed = seed;
    RunOptions opt;
    opt.eval_threads = ctx.threads;
    if (ctx.verbose) opt.log = [&](const std::string& s) { ctx.err << "[" << method << " seed " << seed << "] " << s << '\n'; };
    Report r;
    r.method = method;
    r.seed = seed;
    if (method == "ours") {
        auto res = run_dil(model, stream, tc, opt);
        r.R = res.R;
        r.theta = res.theta;
        const auto stem = bank_stem(dir, seed);
        fs::create_directories(stem.parent_path());
        save_bank(stem, res.bank);
    } else if (method == "seqft") {
        auto res = baseline_seq_finetune(model, stream, tc, opt);
        r.R = res.R;
        r.theta = res.theta;
    } else {
        throw CommandError(kConfig, "unknown method '" + method + "' (expected ours or seqft)");
    }
    auto j = report_json(r);
    write_json(report_path(dir, method, seed), j);
    return j;
}

inline int cmd_run(const ExperimentConfig& cfg, const std::string& method, const std::vector<std::uint64_t>& seeds,
                   const fs::path& dir, bool include_heldout_ftu, Context& ctx) {
    if (method != "ours" && method != "seqft") throw CommandError(kConfig, "unknown method '" + method + "'");
    for (auto seed : seeds) {
        const auto j = run_seed(cfg, method, seed, dir, ctx);
        const char* ftu_key = include_heldout_ftu ? "ftu_heldout" : "ftu";
        ctx.out << method << " seed " << seed << ": il=" << j["il"].dump() << " bwt=" << j["bwt"].dump()
                << " ftu=" << j[ftu_key].dump() << " ms=" << j["ms"].dump() << '\n';
    }
    return kOk;
}

inline int cmd_eval(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& dir, Context& ctx) {
    const auto model = load_backbone(cfg, dir);
    const auto stem = bank_stem(dir, seed);
    if (!fs::exists(fs::path(stem).replace_extension(".bin"))) {
        throw CommandError(kMissing, "missing bank " + stem.string() + ".bin (run --method ours first)");
    }
    const auto bank = load_bank<float>(stem);
    const auto stream = make_stream(stream_for_seed(cfg.stream, seed));
    nlohmann::json acc = nlohmann::json::array(), retrieval = nlohmann::json::array();
    for (std::size_t d = 0; d < stream.num_domains(); ++d) {
        const auto& test = stream.test(d);
        acc.push_back(accuracy(infer_all(model, bank, test, ctx.threads), test.labels));
        if (d < bank.time_step()) {
            std::size_t hit = 0;
            for (const auto& img : test.images) hit += select_dsp(bank, fft2(img).amplitude) == d;
            retrieval.push_back(static_cast<double>(hit) / static_cast<double>(test.size()));
        }
    }
    nlohmann::json j{{"seed", seed}, {"accuracy", acc}, {"retrieval", retrieval}, {"time_step", bank.time_step()}};
    write_json(dir / "ours" / ("eval_seed" + std::to_string(seed) + ".json"), j);
    ctx.out << j.dump() << '\n';
    return kOk;
}

namespace detail {

struct MeanStd {
    double mean = 0.0, std = 0.0;
};

inline MeanStd mean_std(const std::vector<double>& v) {
    MeanStd m;
    if (v.empty()) return m;
    for (double x : v) m.mean += x;
    m.mean /= static_cast<double>(v.size());
    if (v.size() > 1) {
        double ss = 0.0;
        for (double x : v) ss += (x - m.mean) * (x - m.mean);
        m.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
    return m;
}

inline std::string cell(const MeanStd& m, double scale) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.2f±%.2f", m.mean * scale, m.std * scale);
    return buf;
}

}  // namespace detail

/// Aggregates every report_seed*.json under `dir` into mean±std per method.
inline int cmd_report(const fs::path& dir, bool include_heldout_ftu, Context& ctx) {
    if (!fs::is_directory(dir)) throw CommandError(kMissing, "no such directory " + dir.string());
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        const auto name = e.path().filename().string();
        if (e.is_regular_file() && name.starts_with("report_seed") && e.path().extension() == ".json") files.push_back(e.path());
    }
    if (files.empty()) throw CommandError(kEmpty, "no report_seed*.json files under " + dir.string());
    std::sort(files.begin(), files.end());

    std::map<std::string, std::vector<Report>> by_method;
    for (const auto& f : files) {
        try {
            auto r = report_from_json(read_json(f));
            if (r.method.empty()) r.method = f.parent_path().filename().string();
            by_method[r.method].push_back(std::move(r));
        } catch (const MetricError& e) {
            throw CommandError(kConfig, f.string() + ": " + e.what());
        } catch (const nlohmann::json::exception& e) {
            throw CommandError(kConfig, f.string() + ": " + e.what());
        }
    }

    nlohmann::json aggregate = nlohmann::json::object();
    std::ostringstream table;
    for (const auto& [method, reports] : by_method) {
        const auto& R0 = reports.front().R;
        std::map<std::string, std::vector<double>> cols;
        std::vector<std::string> order;
        auto put = [&](const std::string& name, double v) {
            if (!cols.count(name)) order.push_back(name);
            cols[name].push_back(v);
        };
        for (const auto& r : reports) {
            if (r.R.steps != R0.steps || r.R.domains != R0.domains) throw CommandError(kConfig, method + ": reports differ in shape");
            const auto n = r.R.steps;
            double avg = 0.0;
            for (std::size_t j = 0; j < r.R.domains; ++j) {
                const auto v = r.R.at(n - 1, j);
                put("D" + std::to_string(j + 1) + (j >= n ? "*" : ""), v);
                if (j < n) avg += v / static_cast<double>(n);
            }
            put("Avg", avg);
            put("IL", il(r.R));
            if (n >= 2) {
                put("BWT", bwt(r.R));
                put("FTU", ftu(r.R, include_heldout_ftu));
            }
            if (!r.theta.empty()) {
                put("MS", ms(r.theta));
                put("AAMS", aams(r.theta));
            }
        }
        nlohmann::json m;
        m["seeds"] = reports.size();
        table << method << " (" << reports.size() << " seed" << (reports.size() == 1 ? "" : "s") << ")\n";
        for (const auto& name : order) {
            const auto s = detail::mean_std(cols[name]);
            m[name] = {{"mean", s.mean}, {"std", s.std}, {"values", cols[name]}};
            const bool bytes = name == "AAMS";
            const bool ratio = name == "MS";
            char line[96];
            std::snprintf(line, sizeof line, "  %-6s %s\n", name.c_str(),
                          detail::cell(s, bytes || ratio ? 1.0 : 100.0).c_str());
            table << line;
        }
        aggregate[method] = m;
    }
    aggregate["ftu_includes_heldout"] = include_heldout_ftu;
    write_json(dir / "aggregate.json", aggregate);
    ctx.out << table.str() << "(accuracy-type rows in %, D*: held-out, AAMS in bytes)\n";
    return kOk;
}

namespace detail {

inline std::vector<fs::path> png_files(const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    return files;
}

// A key from a directory of PNGs (their average amplitude) or every key{t} in a bank container.
inline std::vector<std::pair<std::string, AmplitudeKey>> load_keys(const fs::path& source) {
    std::vector<std::pair<std::string, AmplitudeKey>> out;
    if (fs::is_directory(source)) {
        std::vector<Image> images;
        for (const auto& f : png_files(source)) images.push_back(read_png(f));
        if (images.empty()) throw CommandError(kEmpty, "key directory " + source.string() + " holds no PNG files");
        out.emplace_back(source.filename().string(), average_amplitude(images));
        return out;
    }
    if (!fs::exists(source)) throw CommandError(kMissing, "missing key source " + source.string());
    const auto arrays = load_container(source);
    for (const auto& a : arrays) {
        if (!a.name.starts_with("key") || a.shape.size() != 3) continue;
        out.emplace_back(source.filename().string() + ":" + a.name,
                         AmplitudeKey{Amplitude{a.shape[0], a.shape[1], a.shape[2], a.values}, 0});
    }
    if (out.empty()) throw CommandError(kEmpty, source.string() + " contains no key tensors");
    return out;
}

}  // namespace detail

/// Style-augments every PNG under `input` with amplitude mixtures of the given keys.
inline int cmd_augment(const fs::path& input, const std::vector<fs::path>& key_sources, const fs::path& out_dir,
                       std::uint64_t seed, Context& ctx) {
    if (!fs::is_directory(input)) throw CommandError(kMissing, "input directory " + input.string() + " does not exist");
    if (key_sources.empty()) throw CommandError(kConfig, "at least one key source is required");
    const auto files = detail::png_files(input);
    if (files.empty()) throw CommandError(kEmpty, "no PNG files under " + input.string());
    std::vector<std::string> names;
    std::vector<AmplitudeKey> keys;
    for (const auto& s : key_sources) {
        for (auto& [name, key] : detail::load_keys(s)) {
            names.push_back(name);
            keys.push_back(std::move(key));
        }
    }
    nlohmann::json entries = nlohmann::json::array(), failures = nlohmann::json::array();
    for (std::size_t i = 0; i < files.size(); ++i) {
        const auto rel = fs::relative(files[i], input);
        try {
            const auto img = read_png(files[i]);
            Rng rng(mix_seed(seed, i));
            const auto weights = sample_simplex(keys.size(), rng);
            const auto aug = style_augment_with(img, keys, weights);
            const auto dest = out_dir / rel;
            fs::create_directories(dest.parent_path());
            write_png(dest, aug);
            entries.push_back({{"source", rel.generic_string()}, {"output", rel.generic_string()}, {"lambda", weights}, {"keys", names}});
        } catch (const std::exception& e) {
            failures.push_back({{"source", rel.generic_string()}, {"error", e.what()}});
            ctx.err << rel.generic_string() << ": " << e.what() << '\n';
        }
    }
    write_json(out_dir / "manifest.json", {{"seed", seed}, {"keys", names}, {"entries", entries}, {"failures", failures}});
    ctx.out << entries.size() << " augmented, " << failures.size() << " failed\n";
    return failures.empty() ? kOk : kInternal;
}

/// Shapes, key statistics and checksums of a stored bank.
inline int cmd_inspect_bank(const fs::path& stem, Context& ctx) {
    if (!fs::exists(fs::path(stem).replace_extension(".bin"))) throw CommandError(kMissing, "missing bank " + stem.string() + ".bin");
    const auto bank = load_bank<float>(stem);
    auto shapes = [](const Prompt<float>& p) {
        nlohmann::json j = nlohmann::json::object();
        for (const auto& [layer, blk] : p.blocks) {
            j["L" + std::to_string(layer)] = {{"k", blk.key.shape()}, {"v", blk.value.shape()}};
        }
        return j;
    };
    nlohmann::json j = bank.sidecar();
    j["bytes"] = bank_bytes(bank);
    j["dip"] = bank.dip() ? shapes(*bank.dip()) : nlohmann::json(nullptr);
    nlohmann::json entries = nlohmann::json::array();
    for (std::size_t t = 0; t < bank.time_step(); ++t) {
        const auto& e = bank.entry(t);
        const auto& a = e.key.amplitude;
        std::vector<double> dc;
        for (std::size_t c = 0; c < a.channels; ++c) dc.push_back(a.values[c * a.height * a.width]);
        char sum[20];
        std::snprintf(sum, sizeof sum, "%016llx", static_cast<unsigned long long>(bank.entry_checksum(t)));
        entries.push_back({{"t", t + 1}, {"key_shape", {a.channels, a.height, a.width}}, {"key_dc", dc}, {"dsp", shapes(e.dsp)}, {"checksum", sum}});
    }
    j["entries"] = entries;
    ctx.out << j.dump(2) << '\n';
    return kOk;
}

}  // namespace dipt::cli
