// Copyright Contributors to the fgs-slam project
// SPDX-License-Identifier: Apache-2.0

// Fourier-domain segmentation of a color frame into high- and low-frequency
// regions, and the per-region sampling lattices used to seed new gaussians.

#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <mutex>
#include <vector>

#include <fftw3.h>

#include "fgs/core.hpp"

namespace fgs {

using Complex = std::complex<double>;
/// Frequency-domain image indexed (u, v) like an image is indexed (x, y).
using Spectrum = Image<Complex>;

namespace detail {

// FFTW planning is not thread-safe; execution is.
inline std::mutex& fftw_planner_mutex() {
    static std::mutex m;
    return m;
}

inline Spectrum fftw_2d(const Spectrum& in, int sign) {
    const int w = in.width;
    const int h = in.height;
    const auto n = static_cast<std::size_t>(w) * h;
    fftw_complex* buf_in = fftw_alloc_complex(n);
    fftw_complex* buf_out = fftw_alloc_complex(n);
    fftw_plan plan;
    {
        std::lock_guard lock(fftw_planner_mutex());
        plan = fftw_plan_dft_2d(h, w, buf_in, buf_out, sign, FFTW_ESTIMATE);
    }
    for (std::size_t i = 0; i < n; ++i) {
        buf_in[i][0] = in.data[i].real();
        buf_in[i][1] = in.data[i].imag();
    }
    fftw_execute(plan);
    Spectrum out(w, h, 1);
    for (std::size_t i = 0; i < n; ++i) out.data[i] = Complex(buf_out[i][0], buf_out[i][1]);
    {
        std::lock_guard lock(fftw_planner_mutex());
        fftw_destroy_plan(plan);
    }
    fftw_free(buf_in);
    fftw_free(buf_out);
    return out;
}

}  // namespace detail

/// F(u,v) = Σx Σy I(x,y) e^{-j2π(ux/W + vy/H)}.
inline Spectrum dft2(const ImageD& image) {
    if (image.channels != 1 || image.width < 1 || image.height < 1) {
        throw InvalidArgument("dft2: expected a non-empty single-channel image");
    }
    Spectrum in(image.width, image.height, 1);
    for (std::size_t i = 0; i < image.data.size(); ++i) in.data[i] = image.data[i];
    return detail::fftw_2d(in, FFTW_FORWARD);
}

/// Inverse transform including the 1/(HW) normalization; keeps the complex result.
inline Spectrum inverse_dft2(const Spectrum& s) {
    Spectrum out = detail::fftw_2d(s, FFTW_BACKWARD);
    const double norm = 1.0 / static_cast<double>(s.pixel_count());
    for (auto& v : out.data) v *= norm;
    return out;
}

/// Real part of the inverse transform.
inline ImageD idft2(const Spectrum& s) {
    const Spectrum c = inverse_dft2(s);
    ImageD out(s.width, s.height, 1);
    for (std::size_t i = 0; i < c.data.size(); ++i) out.data[i] = c.data[i].real();
    return out;
}

/// Half-period circular shift moving the DC bin to (⌊W/2⌋, ⌊H/2⌋).
inline Spectrum center_spectrum(const Spectrum& s) {
    Spectrum out(s.width, s.height, 1);
    const int sx = s.width / 2;
    const int sy = s.height / 2;
    for (int v = 0; v < s.height; ++v) {
        for (int u = 0; u < s.width; ++u) {
            out((u + sx) % s.width, (v + sy) % s.height) = s(u, v);
        }
    }
    return out;
}

/// Exact inverse of center_spectrum, also for odd sizes.
inline Spectrum uncenter_spectrum(const Spectrum& s) {
    Spectrum out(s.width, s.height, 1);
    const int sx = s.width / 2;
    const int sy = s.height / 2;
    for (int v = 0; v < s.height; ++v) {
        for (int u = 0; u < s.width; ++u) {
            out(u, v) = s((u + sx) % s.width, (v + sy) % s.height);
        }
    }
    return out;
}

inline ImageD magnitude(const Spectrum& s) {
    ImageD out(s.width, s.height, 1);
    for (std::size_t i = 0; i < s.data.size(); ++i) {
        const double re = s.data[i].real();
        const double im = s.data[i].imag();
        out.data[i] = std::sqrt(re * re + im * im);
    }
    return out;
}

/// H = 1 - exp(-D²/(2 D0²)), D measured from the center bin.
inline double highpass_gain(double distance, double cutoff_d0) {
    return 1.0 - std::exp(-(distance * distance) / (2.0 * cutoff_d0 * cutoff_d0));
}

/// Applies the gaussian high-pass transfer function to a centered spectrum.
inline Spectrum gaussian_highpass(const Spectrum& centered, double cutoff_d0) {
    if (!(cutoff_d0 > 0.0)) throw InvalidArgument("gaussian_highpass: cutoff must be positive");
    Spectrum out(centered.width, centered.height, 1);
    const double cu = centered.width / 2;
    const double cv = centered.height / 2;
    for (int v = 0; v < centered.height; ++v) {
        for (int u = 0; u < centered.width; ++u) {
            const double d = std::hypot(u - cu, v - cv);
            out(u, v) = centered(u, v) * highpass_gain(d, cutoff_d0);
        }
    }
    // The gain is already exactly zero at D = 0; keep DC removal explicit.
    out(centered.width / 2, centered.height / 2) = Complex(0.0, 0.0);
    return out;
}

/// Triangle-method cut on a histogram. Counts are normalized to [0,1] so the
/// result depends only on the histogram's shape.
inline int triangle_threshold(std::span<const double> histogram) {
    const int n = static_cast<int>(histogram.size());
    if (n < 2) throw InvalidArgument("triangle_threshold: need at least two bins");
    int first = -1;
    int last = -1;
    int peak = 0;
    for (int i = 0; i < n; ++i) {
        if (histogram[i] < 0.0) throw InvalidArgument("triangle_threshold: negative count");
        if (histogram[i] > 0.0) {
            if (first < 0) first = i;
            last = i;
        }
        if (histogram[i] > histogram[peak]) peak = i;
    }
    if (first < 0) throw EmptyHistogram("triangle_threshold: histogram has no counts");

    const double top = histogram[peak];
    auto height = [&](int i) { return histogram[i] / top; };

    // Baseline runs from the peak to the farther nonzero extremity. A lone
    // nonzero bin gets a unit-length baseline to its neighbour.
    int end;
    if (first == last) {
        end = peak + 1 < n ? peak + 1 : peak - 1;
    } else {
        end = (peak - first) > (last - peak) ? first : last;
    }
    const int step = end > peak ? 1 : -1;
    if (std::abs(end - peak) <= 1) return end;

    const double x0 = peak;
    const double y0 = 1.0;
    const double x1 = end;
    const double y1 = height(end);
    const double len = std::hypot(x1 - x0, y1 - y0);
    int best = peak + step;
    double best_dist = -1.0;
    for (int i = peak + step; i != end; i += step) {
        const double dist = std::abs((y1 - y0) * i - (x1 - x0) * height(i) + x1 * y0 - y1 * x0) / len;
        if (dist > best_dist) {
            best_dist = dist;
            best = i;
        }
    }
    return best;
}

inline int triangle_threshold(const std::vector<double>& histogram) {
    return triangle_threshold(std::span<const double>(histogram));
}

struct FrequencyConfig {
    double cutoff_d0 = 0.0;  // 0 selects min(W,H)/16
    int high_spacing_m = 2;
    int low_spacing_n = 8;
    int histogram_bins = 256;

    [[nodiscard]] double cutoff_for(int width, int height) const {
        return cutoff_d0 > 0.0 ? cutoff_d0 : std::min(width, height) / 16.0;
    }
};

struct FrequencyMasks {
    Mask high;
    Mask low;
    double threshold = 0.0;
    int high_spacing_m = 2;
    int low_spacing_n = 8;
    ImageD response;  // |Ĩ_h|
};

/// High-pass response magnitude |Ĩ_h| of a single-channel image.
inline ImageD highpass_response(const ImageD& gray, double cutoff_d0) {
    const Spectrum filtered = gaussian_highpass(center_spectrum(dft2(gray)), cutoff_d0);
    ImageD out = idft2(uncenter_spectrum(filtered));
    for (double& v : out.data) v = std::abs(v);
    return out;
}

// Responses below this are treated as numerically zero (no structure at all).
inline constexpr double kFlatResponse = 1e-9;

inline FrequencyMasks frequency_masks(const ImageF& color, const FrequencyConfig& cfg) {
    if (cfg.high_spacing_m < 1 || cfg.low_spacing_n < 1 || cfg.high_spacing_m >= cfg.low_spacing_n) {
        throw InvalidArgument("frequency_masks: need 1 <= m < n");
    }
    if (cfg.histogram_bins < 2) throw InvalidArgument("frequency_masks: need at least two bins");
    FrequencyMasks out;
    out.high_spacing_m = cfg.high_spacing_m;
    out.low_spacing_n = cfg.low_spacing_n;
    out.response = highpass_response(luminance(color), cfg.cutoff_for(color.width, color.height));

    const double peak = *std::max_element(out.response.data.begin(), out.response.data.end());
    out.high = Mask(color.width, color.height, 1, 0);
    out.low = Mask(color.width, color.height, 1, 1);
    if (peak <= kFlatResponse) {
        out.threshold = std::numeric_limits<double>::infinity();
        return out;
    }
    const int bins = cfg.histogram_bins;
    std::vector<double> hist(bins, 0.0);
    for (double v : out.response.data) {
        const int b = std::min(bins - 1, static_cast<int>(v / peak * bins));
        hist[b] += 1.0;
    }
    const int cut = triangle_threshold(hist);
    out.threshold = cut * peak / bins;
    for (std::size_t i = 0; i < out.response.data.size(); ++i) {
        const bool hi = out.response.data[i] >= out.threshold;
        out.high.data[i] = hi ? 1 : 0;
        out.low.data[i] = hi ? 0 : 1;
    }
    return out;
}

inline FrequencyMasks frequency_masks(const RgbdFrame& frame, const FrequencyConfig& cfg) {
    return frequency_masks(frame.color, cfg);
}

struct Pixel {
    int x = 0;
    int y = 0;
    friend bool operator==(const Pixel&, const Pixel&) = default;
};

struct SamplePoints {
    std::vector<Pixel> high;
    std::vector<Pixel> low;
};

/// Lattice pixels (anchored at (0,0)) lying inside a mask.
inline std::vector<Pixel> lattice_in_mask(const Mask& mask, int spacing) {
    std::vector<Pixel> out;
    for (int y = 0; y < mask.height; y += spacing) {
        for (int x = 0; x < mask.width; x += spacing) {
            if (mask(x, y)) out.push_back({x, y});
        }
    }
    return out;
}

inline SamplePoints sample_grid(const FrequencyMasks& masks) {
    return {lattice_in_mask(masks.high, masks.high_spacing_m),
            lattice_in_mask(masks.low, masks.low_spacing_n)};
}

}  // namespace fgs
