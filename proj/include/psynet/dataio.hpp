#pragma once

// Trial containers, the EEGB1 file format, preprocessing and the synthetic
// phase-locked dataset generator.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "psynet/dsp.hpp"
#include "psynet/errors.hpp"
#include "psynet/rng.hpp"
#include "psynet/tensor.hpp"

namespace psynet::dsp {

NLOHMANN_JSON_SERIALIZE_ENUM(Window, {{Window::hamming, "hamming"},
                                      {Window::hann, "hann"},
                                      {Window::blackman, "blackman"},
                                      {Window::rectangular, "rectangular"},
                                      {Window::kaiser, "kaiser"}})

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(FirDesign, window, kaiser_beta, dc_null)

}  // namespace psynet::dsp

namespace psynet {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// TrialSet
// ---------------------------------------------------------------------------

struct TrialSet {
    Tensor trials;                    // [N x C x T]
    std::vector<std::size_t> labels;  // N entries in [0, K)
    double fs_hz = 0.0;
    std::vector<std::string> class_names;
    json metadata = json::object();   // provenance (preprocessing settings etc.)

    std::size_t n_trials() const { return trials.rank() == 3 ? trials.dim(0) : 0; }
    std::size_t n_channels() const { return trials.rank() == 3 ? trials.dim(1) : 0; }
    std::size_t n_samples() const { return trials.rank() == 3 ? trials.dim(2) : 0; }
    std::size_t n_classes() const { return class_names.size(); }
    double duration_s() const { return static_cast<double>(n_samples()) / fs_hz; }

    // One trial as a [C x T] tensor.
    Tensor trial(std::size_t i) const { return trials.slice(i); }

    TrialSet subset(std::span<const std::size_t> indices) const {
        TrialSet out;
        out.fs_hz = fs_hz;
        out.class_names = class_names;
        out.metadata = metadata;
        out.trials = Tensor({indices.size(), n_channels(), n_samples()});
        const std::size_t block = n_channels() * n_samples();
        for (std::size_t i = 0; i < indices.size(); ++i) {
            auto src = trials.data().subspan(indices[i] * block, block);
            std::copy(src.begin(), src.end(), out.trials.data().begin() + static_cast<std::ptrdiff_t>(i * block));
            out.labels.push_back(labels.at(indices[i]));
        }
        return out;
    }

    void validate() const {
        if (trials.rank() != 3) throw DimensionError("TrialSet: trials must be [N x C x T]");
        if (n_trials() < 1) throw DimensionError("TrialSet: needs at least one trial");
        if (n_channels() < 2) throw DimensionError("TrialSet: needs at least two channels");
        if (n_samples() < 8) throw DimensionError("TrialSet: needs at least 8 samples per trial");
        if (labels.size() != n_trials()) throw DimensionError("TrialSet: one label per trial required");
        if (class_names.empty()) throw ParameterError("TrialSet: class_names must not be empty");
        for (std::size_t l : labels) {
            if (l >= class_names.size()) throw IndexError("TrialSet: label " + std::to_string(l) + " out of range");
        }
        if (!(fs_hz > 0.0)) throw ParameterError("TrialSet: fs_hz must be positive");
        if (!trials.all_finite()) throw DomainError("TrialSet: non-finite sample value");
    }
};

// ---------------------------------------------------------------------------
// EEGB1 container
//
//   0..5     "EEGB1\n"
//   6..9     u32 LE header length H
//   10..10+H UTF-8 JSON header
//   rest     N*C*T f32 LE, trial-major, then channel, then time
// ---------------------------------------------------------------------------

inline constexpr char kEegbMagic[] = "EEGB1\n";
inline constexpr std::size_t kMagicSize = 6;
inline constexpr int kEegbVersion = 1;

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(std::span<const std::uint8_t> b, std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[at + i]) << (8 * i);
    return v;
}

inline std::uint64_t get_u64(std::span<const std::uint8_t> b, std::size_t at) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[at + i]) << (8 * i);
    return v;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string() + " for reading");
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for " + path.string());
}

// Magic + u32 header length + JSON header; returns the parsed header and
// the payload offset.
inline std::pair<json, std::size_t> read_container_header(std::span<const std::uint8_t> bytes, const char* magic) {
    if (bytes.size() < kMagicSize + 4) throw FormatError("truncated container: no room for magic and header length", bytes.size());
    if (std::memcmp(bytes.data(), magic, kMagicSize) != 0) {
        throw FormatError(std::string("bad magic, expected \"") + std::string(magic, kMagicSize - 1) + "\\n\"", 0);
    }
    const std::size_t hlen = get_u32(bytes, kMagicSize);
    const std::size_t hstart = kMagicSize + 4;
    if (hlen > bytes.size() - hstart) {
        throw FormatError("header length " + std::to_string(hlen) + " exceeds file size", kMagicSize);
    }
    json header;
    try {
        header = json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(hstart),
                             bytes.begin() + static_cast<std::ptrdiff_t>(hstart + hlen));
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("invalid JSON header: ") + e.what(), hstart + e.byte);
    }
    if (!header.is_object()) throw FormatError("JSON header is not an object", hstart);
    return {header, hstart + hlen};
}

inline void write_container_header(std::vector<std::uint8_t>& out, const char* magic, const json& header) {
    out.insert(out.end(), magic, magic + kMagicSize);
    const std::string h = header.dump();
    put_u32(out, static_cast<std::uint32_t>(h.size()));
    out.insert(out.end(), h.begin(), h.end());
}

template <typename T>
T header_field(const json& header, const char* key, std::size_t offset) {
    if (!header.contains(key)) throw FormatError(std::string("header missing field \"") + key + "\"", offset);
    try {
        return header.at(key).get<T>();
    } catch (const json::exception&) {
        throw FormatError(std::string("header field \"") + key + "\" has the wrong type", offset);
    }
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_trialset(const TrialSet& ts) {
    ts.validate();
    json header = {
        {"version", kEegbVersion},
        {"n_trials", ts.n_trials()},
        {"n_channels", ts.n_channels()},
        {"n_samples", ts.n_samples()},
        {"fs_hz", ts.fs_hz},
        {"class_names", ts.class_names},
        {"labels", ts.labels},
    };
    if (!ts.metadata.empty()) header["metadata"] = ts.metadata;
    std::vector<std::uint8_t> out;
    detail::write_container_header(out, kEegbMagic, header);
    out.reserve(out.size() + ts.trials.size() * 4);
    for (double v : ts.trials.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    return out;
}

inline TrialSet decode_trialset(std::span<const std::uint8_t> bytes) {
    auto [header, payload] = detail::read_container_header(bytes, kEegbMagic);
    const std::size_t hoff = kMagicSize + 4;
    const auto version = detail::header_field<int>(header, "version", hoff);
    if (version != kEegbVersion) throw FormatError("unsupported EEGB version " + std::to_string(version), hoff);
    const auto n = detail::header_field<std::size_t>(header, "n_trials", hoff);
    const auto c = detail::header_field<std::size_t>(header, "n_channels", hoff);
    const auto t = detail::header_field<std::size_t>(header, "n_samples", hoff);
    if (n == 0 || c == 0 || t == 0) throw FormatError("header declares an empty dimension", hoff);

    TrialSet ts;
    ts.fs_hz = detail::header_field<double>(header, "fs_hz", hoff);
    ts.class_names = detail::header_field<std::vector<std::string>>(header, "class_names", hoff);
    ts.labels = detail::header_field<std::vector<std::size_t>>(header, "labels", hoff);
    if (header.contains("metadata")) ts.metadata = header["metadata"];
    if (ts.labels.size() != n) {
        throw FormatError("header lists " + std::to_string(ts.labels.size()) + " labels for " + std::to_string(n) +
                              " trials",
                          hoff);
    }

    const std::size_t count = n * c * t;
    const std::size_t expected = count * 4;
    const std::size_t actual = bytes.size() - payload;
    if (actual != expected) {
        throw FormatError("payload size mismatch: header declares " + std::to_string(n) + "x" + std::to_string(c) +
                              "x" + std::to_string(t) + " (" + std::to_string(expected) + " bytes), found " +
                              std::to_string(actual) + " bytes",
                          payload);
    }
    std::vector<double> data(count);
    for (std::size_t i = 0; i < count; ++i) {
        const float f = std::bit_cast<float>(detail::get_u32(bytes, payload + 4 * i));
        if (!std::isfinite(f)) throw FormatError("non-finite sample value", payload + 4 * i);
        data[i] = static_cast<double>(f);
    }
    ts.trials = Tensor({n, c, t}, std::move(data));
    try {
        ts.validate();
    } catch (const Error& e) {
        throw FormatError(std::string("invalid trial set: ") + e.what(), hoff);
    }
    return ts;
}

inline void save_trialset(const TrialSet& ts, const std::filesystem::path& path) {
    const auto bytes = encode_trialset(ts);
    detail::write_file(path, bytes);
}

inline TrialSet load_trialset(const std::filesystem::path& path) { return decode_trialset(detail::read_file(path)); }

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

struct CropWindow {
    double start_s = 0.0;
    double end_s = 0.0;
};

struct PreprocessOptions {
    double band_lo_hz = 1.0;
    double band_hi_hz = 48.0;
    double scale = 1e6;
    CropWindow crop{0.5, 1.5};
    bool filter = true;
    // 0 selects an odd length spanning about one second.
    std::size_t filter_length = 0;
    dsp::FirDesign design{};
};

// Samples [round(start*fs), round(start*fs) + round((end-start)*fs)).
inline TrialSet crop(const TrialSet& ts, double start_s, double end_s) {
    const double dur = ts.duration_s();
    if (!(start_s >= 0.0) || !(start_s < end_s) || end_s > dur + 1e-9) {
        throw RangeError("crop window [" + std::to_string(start_s) + ", " + std::to_string(end_s) +
                         "] s outside trial of " + std::to_string(dur) + " s");
    }
    const auto first = static_cast<std::size_t>(std::llround(start_s * ts.fs_hz));
    const auto len = static_cast<std::size_t>(std::llround((end_s - start_s) * ts.fs_hz));
    if (len == 0 || first + len > ts.n_samples()) {
        throw RangeError("crop window maps to samples [" + std::to_string(first) + ", " + std::to_string(first + len) +
                         ") outside [0, " + std::to_string(ts.n_samples()) + ")");
    }
    TrialSet out = ts;
    out.trials = Tensor({ts.n_trials(), ts.n_channels(), len});
    for (std::size_t i = 0; i < ts.n_trials(); ++i)
        for (std::size_t ch = 0; ch < ts.n_channels(); ++ch) {
            auto src = ts.trials.row(i, ch).subspan(first, len);
            std::copy(src.begin(), src.end(), out.trials.row(i, ch).begin());
        }
    return out;
}

inline std::size_t default_filter_length(double fs_hz) {
    return 2 * static_cast<std::size_t>(std::floor(fs_hz / 2.0)) + 1;
}

/**
 * Zero-phase band-pass per channel, then scaling, then cropping. The filter
 * runs on the full trial so crop edges see settled output. Settings are
 * recorded under metadata["preprocessing"].
 */
inline TrialSet preprocess(const TrialSet& ts, const PreprocessOptions& opt) {
    ts.validate();
    const double dur = ts.duration_s();
    if (!(opt.crop.start_s >= 0.0) || !(opt.crop.start_s < opt.crop.end_s) || opt.crop.end_s > dur + 1e-9) {
        throw RangeError("crop window [" + std::to_string(opt.crop.start_s) + ", " + std::to_string(opt.crop.end_s) +
                         "] s outside trial of " + std::to_string(dur) + " s");
    }
    TrialSet out = ts;
    std::size_t flen = 0;
    if (opt.filter) {
        if (!(opt.band_lo_hz > 0.0) || !(opt.band_lo_hz < opt.band_hi_hz) || !(opt.band_hi_hz < ts.fs_hz / 2.0)) {
            throw ParameterError("preprocess: band must satisfy 0 < lo < hi < fs/2");
        }
        flen = opt.filter_length ? opt.filter_length : default_filter_length(ts.fs_hz);
        const auto kernel = dsp::design_fir_bandpass(0.5 * (opt.band_lo_hz + opt.band_hi_hz),
                                                     opt.band_hi_hz - opt.band_lo_hz, flen, ts.fs_hz, opt.design);
        for (std::size_t i = 0; i < ts.n_trials(); ++i)
            for (std::size_t ch = 0; ch < ts.n_channels(); ++ch) {
                const auto y = dsp::filtfilt(ts.trials.row(i, ch), kernel.taps);
                std::copy(y.begin(), y.end(), out.trials.row(i, ch).begin());
            }
    }
    out.trials *= opt.scale;
    out = crop(out, opt.crop.start_s, opt.crop.end_s);
    out.metadata["preprocessing"] = {
        {"order", "filter, scale, crop"},
        {"filter",
         opt.filter ? json{{"family", "windowed-sinc FIR band-pass, forward-backward (zero phase)"},
                           {"band_hz", {opt.band_lo_hz, opt.band_hi_hz}},
                           {"length", flen},
                           {"design", opt.design}}
                    : json(nullptr)},
        {"scale", opt.scale},
        {"crop_s", {opt.crop.start_s, opt.crop.end_s}},
    };
    return out;
}

inline TrialSet preprocess(const TrialSet& ts, double band_lo_hz, double band_hi_hz, double scale, CropWindow window) {
    PreprocessOptions opt;
    opt.band_lo_hz = band_lo_hz;
    opt.band_hi_hz = band_hi_hz;
    opt.scale = scale;
    opt.crop = window;
    return preprocess(ts, opt);
}

// ---------------------------------------------------------------------------
// Synthetic phase-locked data
// ---------------------------------------------------------------------------

struct SynthConfig {
    std::size_t n_trials_per_class = 50;
    std::size_t n_sources = 6;
    std::size_t n_channels = 8;
    double fs_hz = 160.0;
    double duration_s = 1.0;
    // One entry per class.
    std::vector<double> class_center_hz{7.0, 15.0, 23.0, 31.0};
    std::vector<double> class_delta_theta{std::numbers::pi / 4, std::numbers::pi / 2, 3 * std::numbers::pi / 4,
                                          std::numbers::pi / 3};
    // Empty: class c locks sources (2c, 2c+1) mod n_sources.
    std::vector<std::pair<std::size_t, std::size_t>> locked_pairs{};
    double rician_nu = 1.0;
    double rician_sigma = 0.25;
    double background_std = 0.5;
    double jitter_hz = 0.2;       // bound on the instantaneous-frequency random walk
    double jitter_step_hz = 0.02; // per-sample step std of that walk
    double envelope_cutoff_hz = 2.0;
    double snr_db = 20.0;
    std::uint64_t seed = 1;

    std::size_t n_classes() const { return class_center_hz.size(); }
    std::size_t n_samples() const { return static_cast<std::size_t>(std::llround(duration_s * fs_hz)); }

    std::pair<std::size_t, std::size_t> pair_for(std::size_t cls) const {
        if (!locked_pairs.empty()) return locked_pairs.at(cls);
        return {(2 * cls) % n_sources, (2 * cls + 1) % n_sources};
    }

    void validate() const {
        if (class_center_hz.empty()) throw ParameterError("SynthConfig: need at least one class");
        if (class_delta_theta.size() != class_center_hz.size())
            throw ParameterError("SynthConfig: one delta_theta per class required");
        if (!locked_pairs.empty() && locked_pairs.size() != class_center_hz.size())
            throw ParameterError("SynthConfig: one locked pair per class required");
        if (n_sources < 2) throw ParameterError("SynthConfig: need at least two sources");
        if (n_sources > n_channels) throw ParameterError("SynthConfig: n_sources must not exceed n_channels");
        if (n_channels < 2) throw ParameterError("SynthConfig: need at least two channels");
        if (n_trials_per_class < 1) throw ParameterError("SynthConfig: need at least one trial per class");
        if (!(fs_hz > 0.0) || n_samples() < 8) throw ParameterError("SynthConfig: trial must have >= 8 samples");
        for (double f : class_center_hz) {
            if (!(f > 0.0) || !(f + jitter_hz < fs_hz / 2.0)) {
                throw ParameterError("SynthConfig: locked band " + std::to_string(f) + " Hz not below Nyquist " +
                                     std::to_string(fs_hz / 2.0) + " Hz");
            }
        }
        for (std::size_t c = 0; c < n_classes(); ++c) {
            auto [a, b] = pair_for(c);
            if (a >= n_sources || b >= n_sources || a == b) throw ParameterError("SynthConfig: invalid locked pair");
        }
        if (!(rician_sigma >= 0.0) || !(rician_nu >= 0.0)) throw ParameterError("SynthConfig: Rician parameters must be >= 0");
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SynthConfig, n_trials_per_class, n_sources, n_channels, fs_hz, duration_s,
                                                class_center_hz, class_delta_theta, locked_pairs, rician_nu,
                                                rician_sigma, background_std, jitter_hz, jitter_step_hz,
                                                envelope_cutoff_hz, snr_db, seed)

struct SynthGroundTruth {
    Tensor mixing;  // [C x S]
    double mixing_condition = 0.0;
    std::vector<std::pair<std::size_t, std::size_t>> locked_pairs;  // per class
    std::vector<double> delta_theta;                                // per class
    std::vector<double> center_hz;                                  // per class
    Tensor sources;  // [N x S x T] latent sources before mixing and sensor noise
};

inline json to_json(const SynthGroundTruth& gt) {
    json m = json::array();
    for (std::size_t i = 0; i < gt.mixing.dim(0); ++i) {
        auto r = gt.mixing.row(i);
        m.push_back(std::vector<double>(r.begin(), r.end()));
    }
    json classes = json::array();
    for (std::size_t c = 0; c < gt.locked_pairs.size(); ++c) {
        classes.push_back({{"class", c},
                           {"locked_sources", {gt.locked_pairs[c].first, gt.locked_pairs[c].second}},
                           {"delta_theta", gt.delta_theta[c]},
                           {"center_hz", gt.center_hz[c]}});
    }
    return {{"mixing_matrix", m}, {"mixing_condition", gt.mixing_condition}, {"classes", classes}};
}

struct SyntheticData {
    TrialSet data;
    SynthGroundTruth truth;
};

inline double condition_number(const Tensor& m) {
    Eigen::MatrixXd a(m.dim(0), m.dim(1));
    for (std::size_t i = 0; i < m.dim(0); ++i)
        for (std::size_t j = 0; j < m.dim(1); ++j) a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = m(i, j);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(a);
    const auto& s = svd.singularValues();
    if (s(s.size() - 1) <= 0.0) return std::numeric_limits<double>::infinity();
    return s(0) / s(s.size() - 1);
}

// Moore-Penrose pseudo-inverse of the [C x S] mixing matrix, shape [S x C].
inline Tensor unmixing_matrix(const Tensor& mixing) {
    const auto rows = static_cast<Eigen::Index>(mixing.dim(0));
    const auto cols = static_cast<Eigen::Index>(mixing.dim(1));
    Eigen::MatrixXd a(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) a(i, j) = mixing(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
    const Eigen::MatrixXd p = a.completeOrthogonalDecomposition().pseudoInverse();
    Tensor out({mixing.dim(1), mixing.dim(0)});
    for (Eigen::Index i = 0; i < cols; ++i)
        for (Eigen::Index j = 0; j < rows; ++j) out(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = p(i, j);
    return out;
}

namespace detail {

// White noise through `taps` (valid region only), scaled to unit variance.
inline std::vector<double> coloured_noise(Rng& rng, std::size_t n, std::span<const double> taps) {
    std::vector<double> white(n + taps.size() - 1);
    for (double& v : white) v = normal(rng);
    double energy = 0.0;
    for (double t : taps) energy += t * t;
    const double norm = 1.0 / std::sqrt(energy);
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t k = 0; k < taps.size(); ++k) acc += taps[k] * white[i + k];
        out[i] = acc * norm;
    }
    return out;
}

inline std::vector<double> gaussian_kernel(double sigma_samples) {
    const auto half = static_cast<std::size_t>(std::ceil(3.0 * std::max(sigma_samples, 0.5)));
    std::vector<double> k(2 * half + 1);
    for (std::size_t i = 0; i < k.size(); ++i) {
        const double x = static_cast<double>(i) - static_cast<double>(half);
        k[i] = std::exp(-0.5 * x * x / (sigma_samples * sigma_samples));
    }
    return k;
}

}  // namespace detail

/**
 * Each trial of class c carries one narrow-band phase process theta(t)
 * around the class band centre (instantaneous frequency = centre + a
 * bounded random walk). The class's locked sources (a, b) receive
 *   s_a = A_a(t) sin(theta + dtheta_c),  s_b = A_b(t) sin(theta),
 * with independent slowly varying Rician envelopes built as
 * sqrt((nu + sigma g1)^2 + (sigma g2)^2) from smooth unit Gaussian processes.
 * Every source also carries independent band-limited background noise.
 * Channels = mixing * sources + white sensor noise at the configured SNR.
 * Trial i belongs to class i mod K; each trial draws from its own seeded
 * stream, so output is independent of generation order.
 */
inline SyntheticData generate_synthetic(const SynthConfig& cfg) {
    cfg.validate();
    const std::size_t k_classes = cfg.n_classes();
    const std::size_t n = cfg.n_trials_per_class * k_classes;
    const std::size_t s_count = cfg.n_sources;
    const std::size_t c_count = cfg.n_channels;
    const std::size_t t_count = cfg.n_samples();
    const double fs = cfg.fs_hz;

    SyntheticData out;
    auto& gt = out.truth;
    for (std::uint64_t attempt = 0;; ++attempt) {
        Rng rng = make_rng(cfg.seed, {stream::mixing, attempt});
        gt.mixing = Tensor({c_count, s_count});
        for (double& v : gt.mixing.data()) v = normal(rng);
        gt.mixing_condition = condition_number(gt.mixing);
        if (gt.mixing_condition <= 100.0) break;
        if (attempt > 10000) throw ParameterError("generate_synthetic: could not draw a well-conditioned mixing matrix");
    }
    for (std::size_t c = 0; c < k_classes; ++c) gt.locked_pairs.push_back(cfg.pair_for(c));
    gt.delta_theta = cfg.class_delta_theta;
    gt.center_hz = cfg.class_center_hz;
    gt.sources = Tensor({n, s_count, t_count});

    const double bg_hi = std::min(40.0, 0.4 * fs);
    const double bg_lo = 1.0;
    const auto bg_kernel = dsp::design_fir_bandpass(0.5 * (bg_lo + bg_hi), bg_hi - bg_lo,
                                                    default_filter_length(fs), fs);
    const auto env_kernel = detail::gaussian_kernel(fs / (2.0 * std::numbers::pi * cfg.envelope_cutoff_hz));

    TrialSet& ts = out.data;
    ts.fs_hz = fs;
    for (std::size_t c = 0; c < k_classes; ++c) ts.class_names.push_back("class" + std::to_string(c));
    ts.trials = Tensor({n, c_count, t_count});
    ts.labels.resize(n);
    ts.metadata["synthetic"] = cfg;

    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t cls = i % k_classes;
        ts.labels[i] = cls;
        Rng rng = make_rng(cfg.seed, {stream::synth, i});

        for (std::size_t s = 0; s < s_count; ++s) {
            const auto bg = detail::coloured_noise(rng, t_count, bg_kernel.taps);
            auto row = gt.sources.row(i, s);
            for (std::size_t t = 0; t < t_count; ++t) row[t] = cfg.background_std * bg[t];
        }

        // Shared phase process.
        std::vector<double> theta(t_count);
        double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
        double jitter = 0.0;
        for (std::size_t t = 0; t < t_count; ++t) {
            theta[t] = phase;
            jitter = std::clamp(jitter + cfg.jitter_step_hz * normal(rng), -cfg.jitter_hz, cfg.jitter_hz);
            phase += 2.0 * std::numbers::pi * (cfg.class_center_hz[cls] + jitter) / fs;
        }
        auto envelope = [&] {
            const auto g1 = detail::coloured_noise(rng, t_count, env_kernel);
            const auto g2 = detail::coloured_noise(rng, t_count, env_kernel);
            std::vector<double> a(t_count);
            for (std::size_t t = 0; t < t_count; ++t)
                a[t] = std::hypot(cfg.rician_nu + cfg.rician_sigma * g1[t], cfg.rician_sigma * g2[t]);
            return a;
        };
        const auto env_a = envelope();
        const auto env_b = envelope();
        const auto [src_a, src_b] = gt.locked_pairs[cls];
        auto ra = gt.sources.row(i, src_a);
        auto rb = gt.sources.row(i, src_b);
        for (std::size_t t = 0; t < t_count; ++t) {
            ra[t] += env_a[t] * std::sin(theta[t] + cfg.class_delta_theta[cls]);
            rb[t] += env_b[t] * std::sin(theta[t]);
        }

        for (std::size_t ch = 0; ch < c_count; ++ch) {
            auto out_row = ts.trials.row(i, ch);
            double power = 0.0;
            for (std::size_t t = 0; t < t_count; ++t) {
                double v = 0.0;
                for (std::size_t s = 0; s < s_count; ++s) v += gt.mixing(ch, s) * gt.sources(i, s, t);
                out_row[t] = v;
                power += v * v;
            }
            const double noise_std = std::sqrt(power / static_cast<double>(t_count)) * std::pow(10.0, -cfg.snr_db / 20.0);
            for (std::size_t t = 0; t < t_count; ++t) out_row[t] += noise_std * normal(rng);
        }
    }
    ts.validate();
    return out;
}

}  // namespace psynet
