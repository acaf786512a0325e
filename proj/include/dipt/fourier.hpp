#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dipt/image.hpp"

// Amplitude/phase analysis of images, amplitude keys, and amplitude-mixing
// style augmentation. All spectra use the unshifted DFT layout (DC at [0, 0])
// stored channel-major: index = (c * height + y) * width + x.

namespace dipt {

class FourierError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct Amplitude {
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> values;

    bool same_shape(const Amplitude& o) const {
        return channels == o.channels && height == o.height && width == o.width;
    }
};

struct Spectrum {
    Amplitude amplitude;
    std::vector<float> phase;  // (-pi, pi], same layout as amplitude
};

/// Dataset-average amplitude serving as the retrieval signature of domain `domain_index`.
struct AmplitudeKey {
    Amplitude amplitude;
    int domain_index = 0;
};

namespace detail {

inline bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

// In-place iterative radix-2 transform; inverse is unnormalized.
inline void fft1d(std::span<std::complex<double>> a, bool inverse) {
    const std::size_t n = a.size();
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = 2.0 * std::numbers::pi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
        const std::complex<double> wlen(std::cos(ang), std::sin(ang));
        for (std::size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (std::size_t k = 0; k < len / 2; ++k) {
                const auto u = a[i + k];
                const auto v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
                w *= wlen;
            }
        }
    }
}

inline void fft2d(std::vector<std::complex<double>>& plane, std::size_t h, std::size_t w, bool inverse) {
    for (std::size_t y = 0; y < h; ++y) fft1d(std::span(plane.data() + y * w, w), inverse);
    std::vector<std::complex<double>> col(h);
    for (std::size_t x = 0; x < w; ++x) {
        for (std::size_t y = 0; y < h; ++y) col[y] = plane[y * w + x];
        fft1d(col, inverse);
        for (std::size_t y = 0; y < h; ++y) plane[y * w + x] = col[y];
    }
}

inline void check_transform_dims(std::size_t h, std::size_t w) {
    if (!is_power_of_two(h) || !is_power_of_two(w)) {
        throw FourierError("fft2: image dims must be powers of two, got " + std::to_string(h) + "x" + std::to_string(w));
    }
}

}  // namespace detail

/// Per-channel unnormalized forward DFT split into modulus and argument.
inline Spectrum fft2(const Image& image) {
    detail::check_transform_dims(image.height, image.width);
    const std::size_t h = image.height, w = image.width, c = image.channels;
    Spectrum s;
    s.amplitude = Amplitude{c, h, w, std::vector<float>(c * h * w)};
    s.phase.resize(c * h * w);
    std::vector<std::complex<double>> plane(h * w);
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t i = 0; i < h * w; ++i) {
            const float v = image.pixels[i * c + ch];
            if (!std::isfinite(v)) throw FourierError("fft2: non-finite pixel value");
            plane[i] = {static_cast<double>(v), 0.0};
        }
        detail::fft2d(plane, h, w, false);
        for (std::size_t i = 0; i < h * w; ++i) {
            s.amplitude.values[ch * h * w + i] = static_cast<float>(std::abs(plane[i]));
            s.phase[ch * h * w + i] = static_cast<float>(std::arg(plane[i]));
        }
    }
    return s;
}

/// Inverse of fft2 from amplitude and phase; imaginary residue is dropped.
/// Pixels are clamped to [0, 1] unless `clamp` is false.
inline Image ifft2(const Amplitude& amplitude, std::span<const float> phase, bool clamp = true) {
    if (phase.size() != amplitude.values.size() ||
        amplitude.values.size() != amplitude.channels * amplitude.height * amplitude.width) {
        throw FourierError("ifft2: amplitude has " + std::to_string(amplitude.values.size()) + " entries, phase has " +
                           std::to_string(phase.size()));
    }
    detail::check_transform_dims(amplitude.height, amplitude.width);
    const std::size_t h = amplitude.height, w = amplitude.width, c = amplitude.channels;
    Image out(h, w, c);
    std::vector<std::complex<double>> plane(h * w);
    const double norm = 1.0 / static_cast<double>(h * w);
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t i = 0; i < h * w; ++i) {
            const double a = amplitude.values[ch * h * w + i];
            if (a < 0.0) throw FourierError("ifft2: negative amplitude");
            plane[i] = std::polar(a, static_cast<double>(phase[ch * h * w + i]));
        }
        detail::fft2d(plane, h, w, true);
        for (std::size_t i = 0; i < h * w; ++i) {
            double v = plane[i].real() * norm;
            if (clamp) v = std::clamp(v, 0.0, 1.0);
            out.pixels[i * c + ch] = static_cast<float>(v);
        }
    }
    return out;
}

inline Image ifft2(const Spectrum& s, bool clamp = true) { return ifft2(s.amplitude, s.phase, clamp); }

/// Elementwise mean amplitude over a non-empty set of same-shaped images.
inline AmplitudeKey average_amplitude(std::span<const Image> images, int domain_index = 0) {
    if (images.empty()) throw FourierError("average_amplitude: empty dataset");
    std::vector<double> acc;
    Amplitude shape;
    for (const auto& img : images) {
        if (!img.same_shape(images.front())) throw FourierError("average_amplitude: images differ in shape");
        auto s = fft2(img);
        if (acc.empty()) {
            acc.assign(s.amplitude.values.size(), 0.0);
            shape = s.amplitude;
        }
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += s.amplitude.values[i];
    }
    const double inv = 1.0 / static_cast<double>(images.size());
    for (std::size_t i = 0; i < acc.size(); ++i) shape.values[i] = static_cast<float>(acc[i] * inv);
    return AmplitudeKey{std::move(shape), domain_index};
}

/// Convex combination sum_j weights[j] * keys[j].
inline Amplitude mix_amplitudes(std::span<const AmplitudeKey> keys, std::span<const double> weights) {
    if (keys.empty()) throw FourierError("mix_amplitudes: no keys");
    if (keys.size() != weights.size()) {
        throw FourierError("mix_amplitudes: " + std::to_string(keys.size()) + " keys but " +
                           std::to_string(weights.size()) + " weights");
    }
    double total = 0.0;
    for (double wgt : weights) {
        if (!(wgt >= 0.0)) throw FourierError("mix_amplitudes: negative weight");
        total += wgt;
    }
    if (std::abs(total - 1.0) >= 1e-6) throw FourierError("mix_amplitudes: weights sum to " + std::to_string(total));
    Amplitude out = keys.front().amplitude;
    std::vector<double> acc(out.values.size(), 0.0);
    for (std::size_t j = 0; j < keys.size(); ++j) {
        if (!keys[j].amplitude.same_shape(out)) throw FourierError("mix_amplitudes: key shapes differ");
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += weights[j] * keys[j].amplitude.values[i];
    }
    for (std::size_t i = 0; i < acc.size(); ++i) out.values[i] = static_cast<float>(acc[i]);
    return out;
}

/// Uniform draw from the (count-1)-simplex, i.e. Dirichlet(1, ..., 1).
inline std::vector<double> sample_simplex(std::size_t count, Rng& rng) {
    if (count == 0) throw FourierError("sample_simplex: count must be >= 1");
    if (count == 1) return {1.0};
    std::exponential_distribution<double> expo(1.0);
    std::vector<double> w(count);
    for (auto& v : w) v = expo(rng);
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    for (auto& v : w) v /= total;
    return w;
}

struct StyleAugmented {
    Image image;
    std::vector<double> weights;
};

/// Keeps x's phase, swaps in the given mixture of key amplitudes.
inline Image style_augment_with(const Image& x, std::span<const AmplitudeKey> keys, std::span<const double> weights,
                                bool clamp = true) {
    const Spectrum s = fft2(x);
    const Amplitude mixed = mix_amplitudes(keys, weights);
    if (!mixed.same_shape(s.amplitude)) throw FourierError("style_augment: key shape differs from image spectrum");
    return ifft2(mixed, s.phase, clamp);
}

inline StyleAugmented style_augment(const Image& x, std::span<const AmplitudeKey> keys, Rng& rng) {
    if (keys.empty()) throw FourierError("style_augment: no keys");
    auto weights = sample_simplex(keys.size(), rng);
    auto image = style_augment_with(x, keys, weights);
    return StyleAugmented{std::move(image), std::move(weights)};
}

/// Cosine similarity of flattened amplitudes; in [0, 1] for non-negative inputs.
inline double amplitude_cosine(const Amplitude& a, const Amplitude& k) {
    if (!a.same_shape(k) || a.values.size() != k.values.size()) {
        throw FourierError("amplitude_cosine: shape mismatch");
    }
    double dot = 0.0, na = 0.0, nk = 0.0;
    for (std::size_t i = 0; i < a.values.size(); ++i) {
        dot += static_cast<double>(a.values[i]) * k.values[i];
        na += static_cast<double>(a.values[i]) * a.values[i];
        nk += static_cast<double>(k.values[i]) * k.values[i];
    }
    if (na == 0.0 || nk == 0.0) throw FourierError("amplitude_cosine: zero-norm amplitude");
    return dot / (std::sqrt(na) * std::sqrt(nk));
}

}  // namespace dipt
