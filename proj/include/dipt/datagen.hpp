#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "dipt/fourier.hpp"
#include "dipt/image.hpp"
#include "dipt/png_io.hpp"

// Synthetic heterogeneous-domain benchmark. Content is a grayscale canvas of
// soft elliptical blobs; class 1 holds a dense cluster of blobs. Each domain
// renders the canvas through its own colour affine, texture spectrum and noise.

namespace dipt {

struct DomainSpec {
    std::string name;
    std::array<std::array<double, 3>, 3> color_affine{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
    std::array<double, 3> bias{0, 0, 0};
    double spectral_tilt = 0.0;  // texture amplitude falls off as |f|^-tilt
    double texture_std = 0.0;
    double noise_std = 0.0;
    std::uint64_t seed = 0;
};

struct ContentRule {
    std::size_t cluster_blobs = 5;
    double cluster_radius = 3.5;
    std::size_t distractors_min = 2;
    std::size_t distractors_max = 4;
    double blob_radius_min = 1.0;
    double blob_radius_max = 2.0;
    double distractor_gap = 8.0;  // minimum centre distance between distractors
    double background = 0.1;
    double blob_intensity = 0.8;
};

struct SplitCounts {
    std::size_t train = 512;
    std::size_t val = 128;
    std::size_t test = 256;
};

struct SyntheticStreamConfig {
    std::size_t num_train_domains = 4;
    std::size_t num_heldout = 1;
    SplitCounts counts;
    std::size_t image_size = 32;
    std::size_t source_samples = 2048;
    ContentRule rule;
    std::uint64_t seed = 7;
};

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline void add_blob(std::vector<double>& canvas, std::size_t size, double cy, double cx, double ry, double rx,
                     double angle, double amp) {
    const double c = std::cos(angle), s = std::sin(angle);
    const double reach = std::max(rx, ry) + 2.0;
    const auto y0 = static_cast<std::ptrdiff_t>(std::floor(cy - reach));
    const auto x0 = static_cast<std::ptrdiff_t>(std::floor(cx - reach));
    const auto n = static_cast<std::ptrdiff_t>(size);
    for (auto y = std::max<std::ptrdiff_t>(0, y0); y <= std::min<std::ptrdiff_t>(n - 1, y0 + static_cast<std::ptrdiff_t>(2 * reach) + 1); ++y) {
        for (auto x = std::max<std::ptrdiff_t>(0, x0); x <= std::min<std::ptrdiff_t>(n - 1, x0 + static_cast<std::ptrdiff_t>(2 * reach) + 1); ++x) {
            const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
            const double u = (c * dx + s * dy) / rx, v = (-s * dx + c * dy) / ry;
            const double d = std::sqrt(u * u + v * v);
            canvas[static_cast<std::size_t>(y * n + x)] += amp / (1.0 + std::exp(6.0 * (d - 1.0)));
        }
    }
}

// Texture plane with amplitude |f|^-tilt and random phase, normalized to unit std.
inline std::vector<double> texture_plane(std::size_t size, double tilt, Rng& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<std::complex<double>> plane(size * size);
    for (auto& v : plane) v = normal(rng);
    fft2d(plane, size, size, false);
    for (std::size_t y = 0; y < size; ++y) {
        for (std::size_t x = 0; x < size; ++x) {
            const double fy = static_cast<double>(std::min(y, size - y));
            const double fx = static_cast<double>(std::min(x, size - x));
            const double f = std::sqrt(fy * fy + fx * fx);
            plane[y * size + x] *= f == 0.0 ? 0.0 : std::pow(f, -tilt);
        }
    }
    fft2d(plane, size, size, true);
    std::vector<double> out(size * size);
    double ss = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = plane[i].real();
        ss += out[i] * out[i];
    }
    const double sd = std::sqrt(ss / static_cast<double>(out.size()));
    if (sd > 0) {
        for (auto& v : out) v /= sd;
    }
    return out;
}

}  // namespace detail

/// Grayscale content canvas in [0, 1]. Label 1 adds a dense blob cluster; distractors are kept sparse.
inline std::vector<double> render_content(const ContentRule& rule, int label, std::size_t size, Rng& rng) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double sz = static_cast<double>(size);
    std::vector<double> canvas(size * size, rule.background);
    auto radius = [&] { return rule.blob_radius_min + (rule.blob_radius_max - rule.blob_radius_min) * unit(rng); };
    auto amp = [&] { return rule.blob_intensity * (0.75 + 0.25 * unit(rng)); };

    std::vector<std::array<double, 2>> centres;
    if (label == 1) {
        const double margin = rule.cluster_radius + 2.0;
        const double cy = margin + (sz - 2 * margin) * unit(rng);
        const double cx = margin + (sz - 2 * margin) * unit(rng);
        for (std::size_t i = 0; i < rule.cluster_blobs; ++i) {
            const double r = rule.cluster_radius * std::sqrt(unit(rng));
            const double a = 2 * std::numbers::pi * unit(rng);
            detail::add_blob(canvas, size, cy + r * std::sin(a), cx + r * std::cos(a), radius(), radius(),
                             std::numbers::pi * unit(rng), amp());
        }
        centres.push_back({cy, cx});
    }
    const auto span = rule.distractors_max - rule.distractors_min + 1;
    const auto count = rule.distractors_min + static_cast<std::size_t>(rng() % span);
    for (std::size_t i = 0, tries = 0; i < count && tries < 200; ++tries) {
        const double y = 2.0 + (sz - 4.0) * unit(rng);
        const double x = 2.0 + (sz - 4.0) * unit(rng);
        const bool clear = std::all_of(centres.begin(), centres.end(), [&](const auto& c) {
            return std::hypot(c[0] - y, c[1] - x) >= rule.distractor_gap;
        });
        if (!clear) continue;
        detail::add_blob(canvas, size, y, x, radius(), radius(), std::numbers::pi * unit(rng), amp());
        centres.push_back({y, x});
        ++i;
    }
    for (auto& v : canvas) v = std::clamp(v, 0.0, 1.0);
    return canvas;
}

/// Renders a content canvas in a domain's style.
inline Image render_styled(const std::vector<double>& canvas, const DomainSpec& spec, std::size_t size, Rng& rng) {
    std::array<std::vector<double>, 3> texture;
    for (auto& t : texture) {
        t = spec.texture_std > 0 ? detail::texture_plane(size, spec.spectral_tilt, rng) : std::vector<double>(size * size, 0.0);
    }
    std::normal_distribution<double> noise(0.0, 1.0);
    Image out(size, size, 3);
    for (std::size_t p = 0; p < size * size; ++p) {
        std::array<double, 3> in;
        for (std::size_t k = 0; k < 3; ++k) in[k] = canvas[p] + spec.texture_std * texture[k][p];
        for (std::size_t c = 0; c < 3; ++c) {
            double v = spec.bias[c];
            for (std::size_t k = 0; k < 3; ++k) v += spec.color_affine[c][k] * in[k];
            if (spec.noise_std > 0) v += spec.noise_std * noise(rng);
            out.pixels[p * 3 + c] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }
    return out;
}

/// `count` labelled images in the style of `spec`. Labels are fair coin flips,
/// redrawn (bounded) until both classes hold 40-60% of the set.
inline Dataset gen_domain(const DomainSpec& spec, const ContentRule& rule, std::size_t count, std::size_t image_size,
                          Rng& rng) {
    if (!detail::is_power_of_two(image_size)) throw DataError("gen_domain: image size must be a power of two");
    if (spec.noise_std < 0 || spec.texture_std < 0) throw DataError("gen_domain: negative noise or texture level");
    std::vector<int> labels(count);
    bool balanced = false;
    for (int attempt = 0; attempt < 16 && !balanced; ++attempt) {
        std::size_t ones = 0;
        for (auto& l : labels) ones += static_cast<std::size_t>(l = static_cast<int>(rng() & 1));
        const double frac = count == 0 ? 0.0 : static_cast<double>(ones) / static_cast<double>(count);
        balanced = frac >= 0.4 && frac <= 0.6;
    }
    if (!balanced) throw DataError("gen_domain: cannot balance labels for " + std::to_string(count) + " samples");
    Dataset out;
    for (std::size_t i = 0; i < count; ++i) {
        Rng sample(mix_seed(rng(), i));
        const auto canvas = render_content(rule, labels[i], image_size, sample);
        out.push_back(render_styled(canvas, spec, image_size, sample), labels[i]);
    }
    return out;
}

namespace detail {

inline std::array<double, 3> hue_rgb(double angle) {
    std::array<double, 3> c;
    for (std::size_t k = 0; k < 3; ++k) {
        c[k] = 0.5 + 0.5 * std::cos(angle - 2.0 * std::numbers::pi * static_cast<double>(k) / 3.0);
    }
    return c;
}

}  // namespace detail

/// Style at position s along the domain path: hue rotates, contrast fades, a tinted
/// offset grows, and the texture gets steeper and stronger. Polarity never flips, so
/// every domain shares the content phase and differs mostly in amplitude.
inline DomainSpec style_at(double s, std::string name, std::uint64_t seed) {
    DomainSpec d;
    d.name = std::move(name);
    d.seed = seed;
    const auto hue = detail::hue_rgb(2.0 * std::numbers::pi * (0.05 + 0.6 * s));
    const double contrast = 0.85 - 0.45 * s;
    for (std::size_t c = 0; c < 3; ++c) {
        const double gain = contrast * (0.45 + 0.55 * hue[c]);
        for (std::size_t k = 0; k < 3; ++k) d.color_affine[c][k] = gain * (c == k ? 0.8 : 0.1);
        d.bias[c] = 0.05 + 0.5 * s * hue[(c + 2) % 3];
    }
    d.spectral_tilt = 0.5 + 2.0 * s;
    d.texture_std = 0.03 + 0.1 * s;
    d.noise_std = 0.02 + 0.03 * s;
    return d;
}

/// Neutral gray style for backbone pretraining.
inline DomainSpec source_style(std::uint64_t seed) {
    DomainSpec d;
    d.name = "source";
    d.seed = seed;
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t k = 0; k < 3; ++k) d.color_affine[c][k] = c == k ? 0.8 : 0.0;
        d.bias[c] = 0.05;
    }
    d.spectral_tilt = 1.0;
    d.texture_std = 0.04;
    d.noise_std = 0.02;
    return d;
}

struct DomainData {
    DomainSpec spec;
    Dataset train, val, test;
    bool heldout = false;
};

class IsolationError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Ordered domains with an access contract: training data of domain d is readable
/// only while step d is active. Test and validation splits are always readable.
class DomainStream {
public:
    struct Access {
        std::size_t step;
        std::size_t domain;
    };

    DomainStream() = default;
    DomainStream(std::vector<DomainData> domains, std::size_t num_train)
        : domains_(std::move(domains)), num_train_(num_train) {
        if (num_train_ == 0 || num_train_ > domains_.size()) throw DataError("DomainStream: bad training domain count");
    }

    std::size_t num_train() const { return num_train_; }
    std::size_t num_domains() const { return domains_.size(); }
    std::size_t num_heldout() const { return domains_.size() - num_train_; }
    /// Active training domain, or -1 before the first step.
    std::ptrdiff_t active() const { return active_; }

    /// Starts a fresh pass over the stream (another method or seed).
    void restart() { active_ = -1; }

    void begin_step(std::size_t d) {
        if (d >= num_train_) throw IsolationError("DomainStream: domain " + std::to_string(d) + " is not a training domain");
        if (static_cast<std::ptrdiff_t>(d) != active_ + 1) {
            throw IsolationError("DomainStream: steps must be visited in order (requested " + std::to_string(d) +
                                 " after " + std::to_string(active_) + ")");
        }
        active_ = static_cast<std::ptrdiff_t>(d);
    }

    const Dataset& train(std::size_t d) const {
        if (static_cast<std::ptrdiff_t>(d) != active_) {
            ++violations_;
            throw IsolationError("DomainStream: training split of domain " + std::to_string(d) +
                                 " read while step " + std::to_string(active_) + " is active");
        }
        reads_.push_back({static_cast<std::size_t>(active_), d});
        return domains_.at(d).train;
    }

    const Dataset& val(std::size_t d) const { return domains_.at(d).val; }
    const Dataset& test(std::size_t d) const { return domains_.at(d).test; }
    const DomainSpec& spec(std::size_t d) const { return domains_.at(d).spec; }
    bool heldout(std::size_t d) const { return domains_.at(d).heldout; }

    const std::vector<Access>& train_reads() const { return reads_; }
    std::size_t violations() const { return violations_; }

private:
    std::vector<DomainData> domains_;
    std::size_t num_train_ = 0;
    std::ptrdiff_t active_ = -1;
    mutable std::vector<Access> reads_;
    mutable std::size_t violations_ = 0;
};

/// Training domains at s = 1/N, ..., 1; held-out domains midway between consecutive training styles.
inline std::vector<DomainSpec> stream_specs(const SyntheticStreamConfig& cfg) {
    std::vector<DomainSpec> specs;
    const double n = static_cast<double>(cfg.num_train_domains);
    for (std::size_t t = 1; t <= cfg.num_train_domains; ++t) {
        specs.push_back(style_at(static_cast<double>(t) / n, "D" + std::to_string(t), mix_seed(cfg.seed, t)));
    }
    for (std::size_t h = 1; h <= cfg.num_heldout; ++h) {
        const double s = (static_cast<double>(h) + 0.5) / n;
        specs.push_back(style_at(s, "D" + std::to_string(cfg.num_train_domains + h) + "-heldout",
                                 mix_seed(cfg.seed, cfg.num_train_domains + h)));
    }
    return specs;
}

inline DomainStream make_stream(const SyntheticStreamConfig& cfg) {
    if (cfg.num_train_domains == 0) throw DataError("make_stream: need at least one training domain");
    std::vector<DomainData> domains;
    const auto specs = stream_specs(cfg);
    for (std::size_t d = 0; d < specs.size(); ++d) {
        DomainData data;
        data.spec = specs[d];
        data.heldout = d >= cfg.num_train_domains;
        // Separate generators per split keep the splits disjoint.
        Rng train_rng(mix_seed(specs[d].seed, 1)), val_rng(mix_seed(specs[d].seed, 2)), test_rng(mix_seed(specs[d].seed, 3));
        if (!data.heldout) data.train = gen_domain(specs[d], cfg.rule, cfg.counts.train, cfg.image_size, train_rng);
        if (!data.heldout) data.val = gen_domain(specs[d], cfg.rule, cfg.counts.val, cfg.image_size, val_rng);
        data.test = gen_domain(specs[d], cfg.rule, cfg.counts.test, cfg.image_size, test_rng);
        domains.push_back(std::move(data));
    }
    return DomainStream(std::move(domains), cfg.num_train_domains);
}

/// Pretraining set in the neutral source style.
inline Dataset make_source(const SyntheticStreamConfig& cfg) {
    Rng rng(mix_seed(cfg.seed, 0));
    return gen_domain(source_style(mix_seed(cfg.seed, 0)), cfg.rule, cfg.source_samples, cfg.image_size, rng);
}

struct FolderDataset {
    Dataset data;
    std::vector<std::string> classes;
};

/// Reads class_name/*.png; labels follow the sorted subdirectory names.
inline FolderDataset ingest_folder(const std::filesystem::path& root, std::size_t image_size) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) throw DataError("ingest_folder: " + root.string() + " is not a directory");
    FolderDataset out;
    std::vector<fs::path> class_dirs;
    for (const auto& e : fs::directory_iterator(root)) {
        if (e.is_directory()) class_dirs.push_back(e.path());
    }
    std::sort(class_dirs.begin(), class_dirs.end());
    for (const auto& dir : class_dirs) {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(dir)) {
            if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
        }
        if (files.empty()) continue;
        std::sort(files.begin(), files.end());
        const int label = static_cast<int>(out.classes.size());
        out.classes.push_back(dir.filename().string());
        for (const auto& f : files) out.data.push_back(resize_crop(read_png(f), image_size), label);
    }
    if (out.classes.empty()) throw DataError("ingest_folder: no class subdirectories with PNG files under " + root.string());
    return out;
}

/// Writes root/<class>/<index>.png.
inline void export_png_tree(const Dataset& data, const std::filesystem::path& root, const std::vector<std::string>& classes = {}) {
    namespace fs = std::filesystem;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto label = static_cast<std::size_t>(data.labels[i]);
        const auto dir = root / (label < classes.size() ? classes[label] : "class" + std::to_string(label));
        fs::create_directories(dir);
        char name[32];
        std::snprintf(name, sizeof name, "%06zu.png", i);
        write_png(dir / name, data.images[i]);
    }
}

}  // namespace dipt
