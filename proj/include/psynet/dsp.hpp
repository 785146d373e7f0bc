#pragma once

// Classical signal processing: FIR band-pass design, radix-2 FFT,
// analytic-signal phase, and the phase locking value.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "psynet/errors.hpp"

namespace psynet::dsp {

using Complex = std::complex<double>;

// ---------------------------------------------------------------------------
// FIR design
// ---------------------------------------------------------------------------

enum class Window { hamming, hann, blackman, rectangular, kaiser };

struct FirDesign {
    Window window = Window::kaiser;
    double kaiser_beta = 2.0;
    // Subtract a scaled copy of the window so the taps sum to zero (H(0) = 0).
    bool dc_null = true;
};

struct FirKernel {
    std::vector<double> taps;
    double center_hz = 0.0;
    double bandwidth_hz = 0.0;
    double fs_hz = 0.0;

    std::size_t length() const noexcept { return taps.size(); }
};

inline std::vector<double> window_coefficients(Window w, std::size_t length, double kaiser_beta = 2.0) {
    std::vector<double> out(length, 1.0);
    if (length == 1) return out;
    const double pi = std::numbers::pi;
    const double m = static_cast<double>(length - 1);
    for (std::size_t i = 0; i < length; ++i) {
        const double n = static_cast<double>(i);
        switch (w) {
            case Window::hamming:
                out[i] = 0.54 - 0.46 * std::cos(2.0 * pi * n / m);
                break;
            case Window::hann:
                // Endpoints kept nonzero so every tap carries weight.
                out[i] = 0.5 - 0.5 * std::cos(2.0 * pi * (n + 1.0) / (m + 2.0));
                break;
            case Window::blackman: {
                const double x = 2.0 * pi * (n + 1.0) / (m + 2.0);
                out[i] = 0.42 - 0.5 * std::cos(x) + 0.08 * std::cos(2.0 * x);
                break;
            }
            case Window::rectangular:
                out[i] = 1.0;
                break;
            case Window::kaiser: {
                const double r = 2.0 * n / m - 1.0;
                out[i] = std::cyl_bessel_i(0.0, kaiser_beta * std::sqrt(std::max(0.0, 1.0 - r * r))) /
                         std::cyl_bessel_i(0.0, kaiser_beta);
                break;
            }
        }
    }
    return out;
}

// |sum_n taps[n] exp(-i 2 pi f n / fs)|
inline double magnitude_at(std::span<const double> taps, double freq_hz, double fs_hz) {
    const double w = 2.0 * std::numbers::pi * freq_hz / fs_hz;
    double re = 0.0, im = 0.0;
    for (std::size_t n = 0; n < taps.size(); ++n) {
        re += taps[n] * std::cos(w * static_cast<double>(n));
        im -= taps[n] * std::sin(w * static_cast<double>(n));
    }
    return std::hypot(re, im);
}

namespace detail {

inline double sinc(double x) {
    if (x == 0.0) return 1.0;
    const double px = std::numbers::pi * x;
    return std::sin(px) / px;
}

// Windowed ideal low-pass with cutoff fc, unit gain at DC before windowing.
inline double ideal_lowpass_tap(double cutoff_hz, double fs_hz, double offset) {
    const double r = 2.0 * cutoff_hz / fs_hz;
    return r * sinc(r * offset);
}

// Frequency of the global magnitude peak on [0, fs/2]: dense grid, then
// golden-section refinement inside the bracketing grid cells.
inline std::pair<double, double> locate_peak(std::span<const double> taps, double fs_hz) {
    const std::size_t grid = std::max<std::size_t>(4096, 32 * taps.size());
    const double nyq = fs_hz / 2.0;
    std::size_t best = 0;
    double best_mag = -1.0;
    for (std::size_t i = 0; i < grid; ++i) {
        const double f = nyq * static_cast<double>(i) / static_cast<double>(grid - 1);
        const double m = magnitude_at(taps, f, fs_hz);
        if (m > best_mag) {
            best_mag = m;
            best = i;
        }
    }
    const double step = nyq / static_cast<double>(grid - 1);
    double lo = std::max(0.0, step * (static_cast<double>(best) - 1.0));
    double hi = std::min(nyq, step * (static_cast<double>(best) + 1.0));
    const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
    double a = hi - phi * (hi - lo), b = lo + phi * (hi - lo);
    double fa = magnitude_at(taps, a, fs_hz), fb = magnitude_at(taps, b, fs_hz);
    for (int it = 0; it < 80; ++it) {
        if (fa < fb) {
            lo = a;
            a = b;
            fa = fb;
            b = lo + phi * (hi - lo);
            fb = magnitude_at(taps, b, fs_hz);
        } else {
            hi = b;
            b = a;
            fb = fa;
            a = hi - phi * (hi - lo);
            fa = magnitude_at(taps, a, fs_hz);
        }
    }
    const double f_ref = 0.5 * (lo + hi);
    const double m_ref = magnitude_at(taps, f_ref, fs_hz);
    if (m_ref >= best_mag) return {f_ref, m_ref};
    return {step * static_cast<double>(best), best_mag};
}

}  // namespace detail

/**
 * Windowed difference-of-sinc band-pass with passband
 * [center - bandwidth/2, center + bandwidth/2], linear phase, odd length,
 * scaled so the peak of |H| over [0, fs/2] is exactly 1.
 */
inline FirKernel design_fir_bandpass(double center_hz, double bandwidth_hz, std::size_t length, double fs_hz,
                                     const FirDesign& design = {}) {
    const double lo = center_hz - bandwidth_hz / 2.0;
    const double hi = center_hz + bandwidth_hz / 2.0;
    if (!(fs_hz > 0.0)) throw ParameterError("design_fir_bandpass: fs must be positive");
    if (!(bandwidth_hz > 0.0)) throw ParameterError("design_fir_bandpass: bandwidth must be positive");
    if (!(lo > 0.0) || !(hi < fs_hz / 2.0)) {
        throw ParameterError("design_fir_bandpass: band edges [" + std::to_string(lo) + ", " + std::to_string(hi) +
                             "] Hz must lie inside (0, " + std::to_string(fs_hz / 2.0) + ") Hz");
    }
    if (length == 0 || length % 2 == 0) {
        throw ParameterError("design_fir_bandpass: length must be odd, got " + std::to_string(length));
    }

    const auto window = window_coefficients(design.window, length, design.kaiser_beta);
    const double centre = static_cast<double>(length - 1) / 2.0;
    FirKernel k{std::vector<double>(length), center_hz, bandwidth_hz, fs_hz};
    for (std::size_t n = 0; n < length; ++n) {
        const double off = static_cast<double>(n) - centre;
        k.taps[n] = window[n] * (detail::ideal_lowpass_tap(hi, fs_hz, off) - detail::ideal_lowpass_tap(lo, fs_hz, off));
    }
    if (design.dc_null) {
        double tap_sum = 0.0, win_sum = 0.0;
        for (std::size_t n = 0; n < length; ++n) {
            tap_sum += k.taps[n];
            win_sum += window[n];
        }
        for (std::size_t n = 0; n < length; ++n) k.taps[n] -= tap_sum * window[n] / win_sum;
    }
    // Exact symmetry regardless of rounding in the construction above.
    for (std::size_t n = 0; n < length / 2; ++n) {
        const double avg = 0.5 * (k.taps[n] + k.taps[length - 1 - n]);
        k.taps[n] = k.taps[length - 1 - n] = avg;
    }
    const auto [peak_hz, peak] = detail::locate_peak(k.taps, fs_hz);
    (void)peak_hz;
    if (!(peak > 0.0)) throw ParameterError("design_fir_bandpass: degenerate design (zero response)");
    for (double& t : k.taps) t /= peak;
    return k;
}

struct FrequencyPoint {
    double freq_hz;
    double magnitude;
};

// |DTFT(taps)| at n_points frequencies spread evenly over [0, fs/2].
inline std::vector<FrequencyPoint> frequency_response(const FirKernel& k, std::size_t n_points) {
    if (n_points < 2) throw ParameterError("frequency_response: n_points must be >= 2");
    std::vector<FrequencyPoint> out(n_points);
    const double nyq = k.fs_hz / 2.0;
    for (std::size_t i = 0; i < n_points; ++i) {
        const double f = nyq * static_cast<double>(i) / static_cast<double>(n_points - 1);
        out[i] = {f, magnitude_at(k.taps, f, k.fs_hz)};
    }
    return out;
}

// Frequency of the largest magnitude, refined between grid points.
inline double peak_frequency(const FirKernel& k) { return detail::locate_peak(k.taps, k.fs_hz).first; }

// ---------------------------------------------------------------------------
// Filtering
// ---------------------------------------------------------------------------

// Centered ("same") FIR filtering with zero extension.
inline std::vector<double> filter_same(std::span<const double> x, std::span<const double> taps) {
    std::vector<double> y(x.size(), 0.0);
    const auto n = static_cast<std::ptrdiff_t>(x.size());
    const auto len = static_cast<std::ptrdiff_t>(taps.size());
    const std::ptrdiff_t offset = (len - 1) / 2;
    for (std::ptrdiff_t t = 0; t < n; ++t) {
        const std::ptrdiff_t k0 = std::max<std::ptrdiff_t>(0, offset - t);
        const std::ptrdiff_t k1 = std::min<std::ptrdiff_t>(len, n - t + offset);
        double acc = 0.0;
        for (std::ptrdiff_t k = k0; k < k1; ++k) acc += taps[static_cast<std::size_t>(k)] * x[static_cast<std::size_t>(t + k - offset)];
        y[static_cast<std::size_t>(t)] = acc;
    }
    return y;
}

/**
 * Zero-phase forward-backward FIR filtering. The input is extended at both
 * ends by odd reflection (2*x[0] - x[k]) to tame edge transients; the
 * extension is removed before returning.
 */
inline std::vector<double> filtfilt(std::span<const double> x, std::span<const double> taps) {
    if (x.empty()) return {};
    const std::size_t pad = std::min(taps.size() > 0 ? taps.size() - 1 : 0, x.size() - 1);
    std::vector<double> ext;
    ext.reserve(x.size() + 2 * pad);
    for (std::size_t k = pad; k >= 1; --k) ext.push_back(2.0 * x.front() - x[k]);
    ext.insert(ext.end(), x.begin(), x.end());
    for (std::size_t k = 1; k <= pad; ++k) ext.push_back(2.0 * x.back() - x[x.size() - 1 - k]);

    auto y = filter_same(ext, taps);
    std::reverse(y.begin(), y.end());
    y = filter_same(y, taps);
    std::reverse(y.begin(), y.end());
    return {y.begin() + static_cast<std::ptrdiff_t>(pad), y.begin() + static_cast<std::ptrdiff_t>(pad + x.size())};
}

// ---------------------------------------------------------------------------
// FFT and analytic signal
// ---------------------------------------------------------------------------

inline bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

inline std::size_t next_power_of_two(std::size_t n) {
    std::size_t p = 1;
    while (p < n) p <<= 1;
    return p;
}

// Iterative radix-2 Cooley-Tukey. The inverse transform is scaled by 1/N.
inline void fft_inplace(std::vector<Complex>& a, bool inverse = false) {
    const std::size_t n = a.size();
    if (!is_power_of_two(n)) throw DimensionError("fft: length " + std::to_string(n) + " is not a power of two");
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    const double sign = inverse ? 1.0 : -1.0;
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = sign * 2.0 * std::numbers::pi / static_cast<double>(len);
        const std::size_t half = len / 2;
        for (std::size_t i = 0; i < n; i += len) {
            for (std::size_t k = 0; k < half; ++k) {
                // Twiddles from direct evaluation; a running product drifts.
                const Complex w(std::cos(ang * static_cast<double>(k)), std::sin(ang * static_cast<double>(k)));
                const Complex u = a[i + k];
                const Complex v = a[i + k + half] * w;
                a[i + k] = u + v;
                a[i + k + half] = u - v;
            }
        }
    }
    if (inverse) {
        const double s = 1.0 / static_cast<double>(n);
        for (auto& v : a) v *= s;
    }
}

inline constexpr std::size_t kMinAnalyticLength = 8;

/**
 * Analytic signal x + i*H{x} via the frequency domain: zero-pad to the next
 * power of two, keep DC and Nyquist, double positive bins, zero negative
 * bins, invert. Only the first x.size() samples are returned; the pad is
 * discarded.
 */
inline std::vector<Complex> analytic_signal(std::span<const double> x) {
    if (x.size() < kMinAnalyticLength) {
        throw DimensionError("analytic_signal: need at least " + std::to_string(kMinAnalyticLength) + " samples");
    }
    if (std::all_of(x.begin(), x.end(), [](double v) { return v == 0.0; })) {
        throw DegenerateSignalError("analytic_signal: all-zero signal has no defined phase");
    }
    const std::size_t n = next_power_of_two(x.size());
    std::vector<Complex> spec(n, Complex(0.0, 0.0));
    for (std::size_t i = 0; i < x.size(); ++i) spec[i] = Complex(x[i], 0.0);
    fft_inplace(spec, false);
    for (std::size_t k = 1; k < n / 2; ++k) spec[k] *= 2.0;
    for (std::size_t k = n / 2 + 1; k < n; ++k) spec[k] = Complex(0.0, 0.0);
    fft_inplace(spec, true);
    spec.resize(x.size());
    return spec;
}

// numpy-style unwrap: jumps larger than pi are folded back by multiples of 2*pi.
inline std::vector<double> unwrap(std::span<const double> wrapped) {
    std::vector<double> out(wrapped.begin(), wrapped.end());
    const double two_pi = 2.0 * std::numbers::pi;
    double correction = 0.0;
    for (std::size_t i = 1; i < out.size(); ++i) {
        const double d = wrapped[i] - wrapped[i - 1];
        double dm = std::fmod(d + std::numbers::pi, two_pi);
        if (dm < 0.0) dm += two_pi;
        dm -= std::numbers::pi;
        if (dm == -std::numbers::pi && d > 0.0) dm = std::numbers::pi;
        if (std::abs(d) >= std::numbers::pi) correction += dm - d;
        out[i] = wrapped[i] + correction;
    }
    return out;
}

struct PhaseSeries {
    std::vector<double> phase;  // radians, unwrapped
    double fs_hz = 0.0;

    std::size_t size() const noexcept { return phase.size(); }
};

inline PhaseSeries analytic_phase(std::span<const double> signal, double fs_hz) {
    const auto z = analytic_signal(signal);
    std::vector<double> wrapped(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) wrapped[i] = std::arg(z[i]);
    return {unwrap(wrapped), fs_hz};
}

// ---------------------------------------------------------------------------
// Phase locking value
// ---------------------------------------------------------------------------

// |mean_n exp(i (a[n] - b[n]))|
inline double plv(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw DimensionError("plv: phase series lengths differ (" + std::to_string(a.size()) + " vs " +
                             std::to_string(b.size()) + ")");
    }
    if (a.empty()) throw DimensionError("plv: empty phase series");
    double re = 0.0, im = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        re += std::cos(d);
        im += std::sin(d);
    }
    const double n = static_cast<double>(a.size());
    // |sin| sums are sign-symmetric, so plv(a, b) == plv(b, a) bit for bit.
    return std::min(1.0, std::hypot(re, std::abs(im)) / n);
}

inline double plv(const PhaseSeries& a, const PhaseSeries& b) { return plv(a.phase, b.phase); }

}  // namespace psynet::dsp
