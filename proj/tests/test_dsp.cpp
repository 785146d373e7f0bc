#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "psynet/dsp.hpp"
#include "psynet/rng.hpp"
#include "support.hpp"

using namespace psynet;
using namespace psynet::dsp;
using testing_support::naive_analytic;
using testing_support::naive_dft;

namespace {

constexpr double kPi = std::numbers::pi;

// |sum_n taps[n] e^{-i 2 pi f n / fs}| evaluated directly.
double dtft_mag(const std::vector<double>& taps, double f, double fs) {
    double re = 0.0, im = 0.0;
    for (std::size_t n = 0; n < taps.size(); ++n) {
        re += taps[n] * std::cos(2 * kPi * f * static_cast<double>(n) / fs);
        im -= taps[n] * std::sin(2 * kPi * f * static_cast<double>(n) / fs);
    }
    return std::hypot(re, im);
}

}  // namespace

TEST(FirDesign, ElevenHertzKernel) {
    const auto k = design_fir_bandpass(11.0, 2.0, 51, 250.0);
    EXPECT_NEAR(dtft_mag(k.taps, 11.0, 250.0), 1.0, 0.01);
    EXPECT_LE(dtft_mag(k.taps, 0.0, 250.0), 0.05);
    EXPECT_LE(dtft_mag(k.taps, 48.0, 250.0), 0.05);
    for (std::size_t i = 0; i < 25; ++i) EXPECT_LE(std::abs(k.taps[i] - k.taps[50 - i]), 1e-12);
}

// Peak located by a coarse DTFT grid, then a fine grid one coarse step either side.
TEST(FirDesign, PeakNormalizedToOne) {
    for (double c : {5.0, 11.0, 23.0, 31.0}) {
        const auto k = design_fir_bandpass(c, 2.0, 51, 250.0);
        const double step = 125.0 / 20000.0;
        double f_best = 0.0, peak = 0.0;
        for (int i = 0; i <= 20000; ++i) {
            const double m = dtft_mag(k.taps, i * step, 250.0);
            if (m > peak) {
                peak = m;
                f_best = i * step;
            }
        }
        for (int i = -5000; i <= 5000; ++i) peak = std::max(peak, dtft_mag(k.taps, f_best + i * step / 5000.0, 250.0));
        EXPECT_NEAR(peak, 1.0, 1e-9) << c;
    }
}

TEST(FirDesign, HammingWindowSelectable) {
    FirDesign d;
    d.window = Window::hamming;
    const auto k = design_fir_bandpass(15.0, 2.0, 51, 250.0, d);
    EXPECT_NEAR(peak_frequency(k), 15.0, 1.0);
    EXPECT_NEAR(dtft_mag(k.taps, 0.0, 250.0), 0.0, 1e-9);
}

TEST(FirDesign, ParameterErrors) {
    EXPECT_THROW(design_fir_bandpass(1.0, 2.0, 51, 250.0), ParameterError);
    EXPECT_THROW(design_fir_bandpass(124.5, 2.0, 51, 250.0), ParameterError);
    EXPECT_THROW(design_fir_bandpass(11.0, 2.0, 50, 250.0), ParameterError);
}

TEST(FrequencyResponse, UnitImpulseIsFlat) {
    FirKernel k{{0.0, 0.0, 1.0, 0.0, 0.0}, 0.0, 0.0, 100.0};
    for (const auto& p : frequency_response(k, 64)) EXPECT_NEAR(p.magnitude, 1.0, 1e-12);
}

TEST(FrequencyResponse, MovingAverageNullAtNyquist) {
    FirKernel k{{0.5, 0.5}, 0.0, 0.0, 100.0};
    const auto r = frequency_response(k, 11);
    EXPECT_DOUBLE_EQ(r.back().freq_hz, 50.0);
    EXPECT_NEAR(r.back().magnitude, 0.0, 1e-12);
    EXPECT_THROW(frequency_response(k, 1), ParameterError);
}

TEST(FrequencyResponse, ElevenHertzArgmax) {
    const auto r = frequency_response(design_fir_bandpass(11.0, 2.0, 51, 250.0), 2501);
    auto best = std::max_element(r.begin(), r.end(), [](auto& a, auto& b) { return a.magnitude < b.magnitude; });
    EXPECT_NEAR(best->freq_hz, 11.0, 1.0);
}

TEST(AnalyticPhase, SineIncrements) {
    std::vector<double> x(1000);
    for (std::size_t n = 0; n < x.size(); ++n) x[n] = std::sin(2 * kPi * 10.0 * static_cast<double>(n) / 250.0);
    const auto ph = analytic_phase(x, 250.0);
    for (std::size_t n = 101; n < 900; ++n)
        EXPECT_NEAR(ph.phase[n] - ph.phase[n - 1], 2 * kPi * 10.0 / 250.0, 1e-3) << n;
}

TEST(AnalyticPhase, QuadraturePair) {
    std::vector<double> c(1000), s(1000);
    for (std::size_t n = 0; n < c.size(); ++n) {
        c[n] = std::cos(2 * kPi * 10.0 * static_cast<double>(n) / 250.0);
        s[n] = std::sin(2 * kPi * 10.0 * static_cast<double>(n) / 250.0);
    }
    const auto pc = analytic_phase(c, 250.0), ps = analytic_phase(s, 250.0);
    for (std::size_t n = 100; n < 900; ++n) {
        const double d = std::remainder(pc.phase[n] - ps.phase[n], 2 * kPi);
        EXPECT_NEAR(d, kPi / 2, 1e-2) << n;
    }
}

TEST(AnalyticPhase, Errors) {
    EXPECT_THROW(analytic_phase(std::vector<double>(64, 0.0), 100.0), DegenerateSignalError);
    EXPECT_THROW(analytic_phase(std::vector<double>(7, 1.0), 100.0), DimensionError);
}

TEST(Fft, MatchesNaiveDft) {
    auto rng = make_rng(5, {1});
    std::vector<Complex> x(64);
    for (auto& v : x) v = Complex(normal(rng), normal(rng));
    auto y = x;
    fft_inplace(y, false);
    const auto want = naive_dft(x, false);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_LE(std::abs(y[i] - want[i]), 1e-9);
    fft_inplace(y, true);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_LE(std::abs(y[i] - x[i]), 1e-12);
}

TEST(AnalyticSignal, MatchesNaiveDftPathLength64) {
    auto rng = make_rng(6, {1});
    std::vector<double> x(64);
    for (auto& v : x) v = normal(rng);
    const auto got = analytic_signal(x);
    const auto want = naive_analytic(x);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_LE(std::abs(got[i] - want[i]), 1e-9);
}

TEST(AnalyticSignal, MatchesNaiveDftPathLengths16To128) {
    auto rng = make_rng(7, {1});
    for (std::size_t n = 16; n <= 128; ++n) {
        std::vector<double> x(n);
        for (auto& v : x) v = normal(rng);
        const auto got = analytic_signal(x);
        const auto want = naive_analytic(x);
        double err = 0.0;
        for (std::size_t i = 0; i < n; ++i) err = std::max(err, std::abs(got[i] - want[i]));
        EXPECT_LE(err, 1e-9) << n;
    }
}

TEST(Plv, ConstantOffsetIsOne) {
    auto rng = make_rng(8, {1});
    std::vector<double> a(500), b(500);
    for (std::size_t i = 0; i < a.size(); ++i) {
        a[i] = uniform(rng, -10.0, 10.0);
        b[i] = a[i] + 0.7;
    }
    EXPECT_NEAR(plv(a, b), 1.0, 1e-9);
}

TEST(Plv, IndependentRandomPhasesNearZero) {
    auto rng = make_rng(9, {1});
    std::vector<double> a(10000), b(10000);
    for (std::size_t i = 0; i < a.size(); ++i) {
        a[i] = uniform(rng, -kPi, kPi);
        b[i] = uniform(rng, -kPi, kPi);
    }
    EXPECT_LE(plv(a, b), 0.05);
}

TEST(Plv, AlternatingCancels) {
    std::vector<double> a(1000), b(1000, 0.3);
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = (i % 2) ? kPi : 0.0;
    EXPECT_NEAR(plv(a, b), 0.0, 1e-9);
}

TEST(Plv, LengthMismatch) {
    EXPECT_THROW(plv(std::vector<double>(4), std::vector<double>(5)), DimensionError);
}

TEST(PlvProperty, SymmetricAndShiftInvariant) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto rng = make_rng(seed, {2});
        const std::size_t n = 16 + seed * 13;
        std::vector<double> a(n), b(n), a2(n), b2(n);
        const double shift = uniform(rng, -20.0, 20.0);
        double drift = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            drift += 0.3 * normal(rng);
            a[i] = uniform(rng, -kPi, kPi);
            b[i] = a[i] + drift;
            a2[i] = a[i] + shift;
            b2[i] = b[i] + shift;
        }
        EXPECT_EQ(plv(a, b), plv(b, a));
        EXPECT_LE(std::abs(plv(a, b) - plv(a2, b2)), 1e-12);
    }
}

// White noise through a kernel: the averaged periodogram peaks inside the
// passband. Sampled over bands the kernel length can resolve (lower edge at
// least 2 fs / L above DC).
TEST(FirProperty, FilteredNoisePeaksInsidePassband) {
    auto rng = make_rng(10, {1});
    for (int trial = 0; trial < 12; ++trial) {
        const double fs = uniform(rng, 128.0, 512.0);
        std::size_t len = 2 * static_cast<std::size_t>(uniform(rng, 20.0, 60.0)) + 1;
        const double bw = 2.0;
        const double lo_min = 2.0 * fs / static_cast<double>(len) + bw / 2;
        const double center = uniform(rng, lo_min, 0.4 * fs);
        const auto k = design_fir_bandpass(center, bw, len, fs);

        const std::size_t seg = 1024, n_seg = 64;
        std::vector<double> power(seg / 2 + 1, 0.0);
        for (std::size_t s = 0; s < n_seg; ++s) {
            std::vector<double> x(seg + len - 1);
            for (auto& v : x) v = normal(rng);
            std::vector<Complex> y(seg);
            for (std::size_t t = 0; t < seg; ++t) {
                double acc = 0.0;
                for (std::size_t j = 0; j < len; ++j) acc += k.taps[j] * x[t + j];
                y[t] = acc;
            }
            fft_inplace(y, false);
            for (std::size_t b = 0; b <= seg / 2; ++b) power[b] += std::norm(y[b]);
        }
        const auto best = static_cast<std::size_t>(std::max_element(power.begin(), power.end()) - power.begin());
        const double f_peak = fs * static_cast<double>(best) / static_cast<double>(seg);
        const double res = fs / static_cast<double>(seg);
        EXPECT_GE(f_peak, center - bw / 2 - res) << "fs " << fs << " L " << len << " centre " << center;
        EXPECT_LE(f_peak, center + bw / 2 + res) << "fs " << fs << " L " << len << " centre " << center;
    }
}

TEST(Filtfilt, ZeroPhaseOnSinusoid) {
    const double fs = 250.0;
    std::vector<double> x(1000);
    for (std::size_t n = 0; n < x.size(); ++n) x[n] = std::sin(2 * kPi * 11.0 * static_cast<double>(n) / fs);
    const auto k = design_fir_bandpass(11.0, 4.0, 101, fs);
    const auto y = filtfilt(x, k.taps);
    double num = 0.0, den = 0.0;
    for (std::size_t n = 200; n < 800; ++n) {
        num += x[n] * y[n];
        den += x[n] * x[n];
    }
    const double gain = num / den;
    double resid = 0.0;
    for (std::size_t n = 200; n < 800; ++n) resid = std::max(resid, std::abs(y[n] - gain * x[n]));
    EXPECT_LE(resid, 1e-3 * gain);
}
