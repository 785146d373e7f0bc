#pragma once

/**
 * Post-training analysis: PSP extraction with learned filters, per-class PLV
 * statistics, the amplitude-ratio error bound of the transcoder, and spatial
 * filter export for external topography plotting.
 */

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "psynet/dataio.hpp"
#include "psynet/dsp.hpp"
#include "psynet/errors.hpp"
#include "psynet/psnet.hpp"
#include "psynet/tensor.hpp"

namespace psynet {

// ---------------------------------------------------------------------------
// PSP extraction
// ---------------------------------------------------------------------------

struct PspSignals {
    Tensor p;  // [N_p x 2 x N_c]
    // Batch norm had no running statistics; per-trial statistics were used.
    bool bn_fallback = false;
};

namespace detail {

// Running statistics replaced by this trial's per-channel mean and variance.
inline void per_trial_bn_stats(PsnetParams& p, const Hyperparams& hp, const Tensor& x) {
    Tensor pre = matmul(p.spatial, x);
    if (hp.bn_placement == BnPlacement::post_fir) pre = fir_forward(shifter_forward(pre, p, hp), p, hp);
    const std::size_t nc = hp.bn_channels();
    const std::size_t len = pre.size() / nc;
    auto d = pre.data();
    for (std::size_t c = 0; c < nc; ++c) {
        double mean = 0.0;
        for (std::size_t t = 0; t < len; ++t) mean += d[c * len + t];
        mean /= static_cast<double>(len);
        double var = 0.0;
        for (std::size_t t = 0; t < len; ++t) var += (d[c * len + t] - mean) * (d[c * len + t] - mean);
        p.bn.running_mean[c] = mean;
        p.bn.running_var[c] = var / static_cast<double>(len);
    }
}

}  // namespace detail

inline PspSignals extract_psp_signals(const PsnetParams& params, const Hyperparams& hp, const Tensor& x) {
    if (params.bn.updates > 0) return {forward(params, hp, x).p, false};
    PsnetParams local = params;
    detail::per_trial_bn_stats(local, hp, x);
    return {forward(local, hp, x).p, true};
}

// ---------------------------------------------------------------------------
// PLV report
// ---------------------------------------------------------------------------

// Linear interpolation between order statistics: position (n - 1) * q.
inline double quantile(std::vector<double> values, double q) {
    if (values.empty()) throw DimensionError("quantile: empty sample");
    if (!(q >= 0.0 && q <= 1.0)) throw RangeError("quantile: q must lie in [0, 1]");
    std::sort(values.begin(), values.end());
    const double h = static_cast<double>(values.size() - 1) * q;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

struct PlvOptions {
    double edge_trim = 0.1;  // fraction of phase samples dropped at each end
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PlvOptions, edge_trim)

struct PlvStats {
    double mean = 0.0;
    double q1 = 0.0;
    double median = 0.0;
    double q3 = 0.0;
    std::size_t n_trials = 0;
    std::size_t n_excluded = 0;
};

inline PlvStats summarize(const std::vector<double>& values, std::size_t excluded = 0) {
    PlvStats s;
    s.n_trials = values.size();
    s.n_excluded = excluded;
    if (values.empty()) return s;
    double total = 0.0;
    for (double v : values) total += v;
    s.mean = total / static_cast<double>(values.size());
    s.q1 = quantile(values, 0.25);
    s.median = quantile(values, 0.5);
    s.q3 = quantile(values, 0.75);
    return s;
}

struct PlvEntry {
    std::size_t psp = 0;
    double band_hz = 0.0;
    std::size_t psc_a = 0;
    std::size_t psc_b = 0;
    std::vector<PlvStats> per_class;
};

struct PlvReport {
    std::vector<PlvEntry> entries;
    std::vector<std::string> class_names;
    PlvOptions options;
    std::size_t n_samples_used = 0;  // phase samples per PLV after trimming
    bool bn_fallback = false;

    // Largest margin by which one class's mean PLV exceeds every other class's.
    double class_gap(std::size_t psp) const {
        const auto& pc = entries.at(psp).per_class;
        std::vector<double> means;
        for (const auto& s : pc)
            if (s.n_trials > 0) means.push_back(s.mean);
        if (means.size() < 2) return 0.0;
        std::sort(means.begin(), means.end(), std::greater<>());
        return means[0] - means[1];
    }

    std::size_t best_psp() const {
        std::size_t best = 0;
        for (std::size_t i = 1; i < entries.size(); ++i)
            if (class_gap(i) > class_gap(best)) best = i;
        return best;
    }
};

// PLV of two equal-length component series after edge trimming.
inline double component_plv(std::span<const double> a, std::span<const double> b, double fs_hz, double edge_trim) {
    const auto pa = dsp::analytic_phase(a, fs_hz);
    const auto pb = dsp::analytic_phase(b, fs_hz);
    const auto trim = static_cast<std::size_t>(std::floor(edge_trim * static_cast<double>(a.size())));
    if (2 * trim >= a.size()) throw RangeError("component_plv: edge trim leaves no samples");
    const std::size_t n = a.size() - 2 * trim;
    return dsp::plv(std::span<const double>(pa.phase).subspan(trim, n), std::span<const double>(pb.phase).subspan(trim, n));
}

// PLV of two latent source rows after zero-phase band-pass around centre_hz.
inline double source_pair_plv(std::span<const double> a, std::span<const double> b, double center_hz, double fs_hz,
                              const PlvOptions& opt = {}) {
    const double bw = std::min(4.0, 2.0 * (center_hz - 0.5));
    std::size_t len = 2 * static_cast<std::size_t>(fs_hz / 4.0) + 1;
    len = std::min(len, 2 * ((a.size() - 1) / 2) - 1);
    const auto k = dsp::design_fir_bandpass(center_hz, bw, len, fs_hz);
    const auto fa = dsp::filtfilt(a, k.taps);
    const auto fb = dsp::filtfilt(b, k.taps);
    return component_plv(fa, fb, fs_hz, opt.edge_trim);
}

// Per-trial PLV of every PSP: [N x N_p]; NaN marks a degenerate component.
inline Tensor psp_plv_matrix(const PsnetParams& params, const Hyperparams& hp, const TrialSet& data,
                             const PlvOptions& opt = {}, bool* bn_fallback = nullptr) {
    Tensor out({data.n_trials(), hp.n_p()});
    for (std::size_t i = 0; i < data.n_trials(); ++i) {
        const auto sig = extract_psp_signals(params, hp, data.trial(i));
        if (bn_fallback && sig.bn_fallback) *bn_fallback = true;
        for (std::size_t p = 0; p < hp.n_p(); ++p) {
            try {
                out(i, p) = component_plv(sig.p.row(p, 0), sig.p.row(p, 1), hp.fs_hz, opt.edge_trim);
            } catch (const DegenerateSignalError&) {
                out(i, p) = std::numeric_limits<double>::quiet_NaN();
            }
        }
    }
    return out;
}

inline PlvReport plv_report(const PsnetParams& params, const Hyperparams& hp, const TrialSet& data,
                            const PlvOptions& opt = {}) {
    data.validate();
    if (data.n_channels() != hp.channels || data.n_samples() != hp.samples)
        throw ContractError("plv_report: data shape does not match the model's hyperparameters");
    PlvReport report;
    report.options = opt;
    report.class_names = data.class_names;
    const auto trim = static_cast<std::size_t>(std::floor(opt.edge_trim * static_cast<double>(hp.n_c())));
    report.n_samples_used = hp.n_c() - 2 * trim;

    const Tensor m = psp_plv_matrix(params, hp, data, opt, &report.bn_fallback);
    const std::size_t k = data.n_classes();
    for (std::size_t p = 0; p < hp.n_p(); ++p) {
        const auto idx = pair_index(hp, p);
        PlvEntry e{p, hp.band_center_hz(idx.band), idx.psc_a, idx.psc_b, {}};
        for (std::size_t c = 0; c < k; ++c) {
            std::vector<double> vals;
            std::size_t excluded = 0;
            for (std::size_t i = 0; i < data.n_trials(); ++i) {
                if (data.labels[i] != c) continue;
                if (std::isnan(m(i, p))) ++excluded;
                else vals.push_back(m(i, p));
            }
            e.per_class.push_back(summarize(vals, excluded));
        }
        report.entries.push_back(std::move(e));
    }
    return report;
}

inline json to_json(const PlvReport& r) {
    json entries = json::array();
    for (const auto& e : r.entries) {
        json pc = json::array();
        for (std::size_t c = 0; c < e.per_class.size(); ++c) {
            const auto& s = e.per_class[c];
            pc.push_back({{"class", c},
                          {"mean", s.mean},
                          {"q1", s.q1},
                          {"median", s.median},
                          {"q3", s.q3},
                          {"n", s.n_trials},
                          {"n_excluded", s.n_excluded}});
        }
        entries.push_back({{"psp", e.psp},
                           {"band_hz", e.band_hz},
                           {"psc_a", e.psc_a},
                           {"psc_b", e.psc_b},
                           {"class_gap", r.class_gap(e.psp)},
                           {"per_class", pc}});
    }
    return {{"class_names", r.class_names},
            {"edge_trim", r.options.edge_trim},
            {"quantile_rule", "linear"},
            {"n_samples_used", r.n_samples_used},
            {"bn_fallback", r.bn_fallback},
            {"best_psp", r.entries.empty() ? 0 : r.best_psp()},
            {"entries", entries}};
}

inline std::string to_csv(const PlvReport& r) {
    std::string out = "psp,band_hz,psc_a,psc_b,class,mean,q1,median,q3,n\n";
    char buf[256];
    for (const auto& e : r.entries) {
        for (std::size_t c = 0; c < e.per_class.size(); ++c) {
            const auto& s = e.per_class[c];
            std::snprintf(buf, sizeof buf, "%zu,%.6g,%zu,%zu,%zu,%.17g,%.17g,%.17g,%.17g,%zu\n", e.psp, e.band_hz,
                          e.psc_a, e.psc_b, c, s.mean, s.q1, s.median, s.q3, s.n_trials);
            out += buf;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Error bound of the transcoder under an amplitude mismatch g = A_y / A_x
// ---------------------------------------------------------------------------

struct BoundSample {
    double g = 1.0;
    double s_x = 0.0;
    double s_y = 0.0;
    double alpha = std::numbers::pi / 4;  // half the phase offset
};

inline double error_bound(const BoundSample& b) {
    if (!(b.alpha > 0.0 && b.alpha < std::numbers::pi / 2))
        throw SingularityError("error_bound: alpha must lie strictly inside (0, pi/2)");
    const double c = std::cos(b.alpha), s = std::sin(b.alpha);
    const double first = std::abs((b.g * b.g - 1.0) * b.s_x * b.s_x / 4.0) * (1.0 / (c * c) + 1.0 / (s * s));
    const double second = std::abs((b.g - 1.0) * b.s_x * b.s_y) * std::abs(1.0 / c - 1.0 / s);
    return first + second;
}

struct BoundSweep {
    std::vector<double> alpha;
    std::vector<double> bound;
    std::size_t argmin = 0;
    double grid_step = 0.0;

    double argmin_alpha() const { return alpha.at(argmin); }
};

inline constexpr double kBoundGridMargin = 0.01;

// Uniform grid of n_grid points on [0.01, pi/2 - 0.01]; argmin ties go to the first point.
inline BoundSweep bound_sweep(double g, double s_x, double s_y, std::size_t n_grid) {
    if (n_grid < 10) throw ParameterError("bound_sweep: n_grid >= 10 required");
    BoundSweep out;
    const double lo = kBoundGridMargin, hi = std::numbers::pi / 2 - kBoundGridMargin;
    out.grid_step = (hi - lo) / static_cast<double>(n_grid - 1);
    for (std::size_t i = 0; i < n_grid; ++i) {
        const double a = lo + out.grid_step * static_cast<double>(i);
        out.alpha.push_back(a);
        out.bound.push_back(error_bound({g, s_x, s_y, a}));
        if (out.bound.back() < out.bound[out.argmin]) out.argmin = i;
    }
    return out;
}

inline std::string to_csv(const BoundSweep& s) {
    std::string out = "alpha,bound,is_argmin\n";
    char buf[96];
    for (std::size_t i = 0; i < s.alpha.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%d\n", s.alpha[i], s.bound[i], i == s.argmin ? 1 : 0);
        out += buf;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Spatial filter export
// ---------------------------------------------------------------------------

struct SpatialFilterRecord {
    std::size_t filter = 0;
    std::vector<std::pair<std::string, double>> weights;
    std::size_t max_channel = 0;  // index of the largest |weight|
};

inline std::vector<SpatialFilterRecord> export_spatial_filters(const PsnetParams& params,
                                                              std::span<const std::string> channel_names) {
    const std::size_t f1 = params.spatial.dim(0), c = params.spatial.dim(1);
    if (channel_names.size() != c) {
        throw DimensionError("export_spatial_filters: " + std::to_string(channel_names.size()) +
                             " channel names for " + std::to_string(c) + " channels");
    }
    std::vector<SpatialFilterRecord> out;
    for (std::size_t f = 0; f < f1; ++f) {
        SpatialFilterRecord r{f, {}, 0};
        for (std::size_t j = 0; j < c; ++j) {
            r.weights.emplace_back(channel_names[j], params.spatial(f, j));
            if (std::abs(params.spatial(f, j)) > std::abs(params.spatial(f, r.max_channel))) r.max_channel = j;
        }
        out.push_back(std::move(r));
    }
    return out;
}

inline std::vector<std::string> default_channel_names(std::size_t c) {
    std::vector<std::string> names;
    for (std::size_t i = 0; i < c; ++i) names.push_back("ch" + std::to_string(i));
    return names;
}

inline json filters_to_json(const std::vector<SpatialFilterRecord>& recs) {
    json out = json::array();
    for (const auto& r : recs) {
        json w = json::array();
        for (const auto& [name, v] : r.weights) w.push_back({{"channel", name}, {"weight", v}});
        out.push_back({{"filter", r.filter},
                       {"weights", w},
                       {"max_channel", r.weights[r.max_channel].first},
                       {"max_channel_index", r.max_channel}});
    }
    return {{"filters", out}};
}

inline std::string filters_to_csv(const std::vector<SpatialFilterRecord>& recs) {
    std::string out = "filter,channel,weight,is_max\n";
    char buf[64];
    for (const auto& r : recs) {
        for (std::size_t j = 0; j < r.weights.size(); ++j) {
            std::snprintf(buf, sizeof buf, ",%.17g,%d\n", r.weights[j].second, j == r.max_channel ? 1 : 0);
            out += std::to_string(r.filter) + "," + r.weights[j].first + buf;
        }
    }
    return out;
}

// Inverse of filters_to_json: the [F1 x C] spatial matrix.
inline Tensor spatial_from_json(const json& j) {
    const auto& filters = j.at("filters");
    if (filters.empty()) throw FormatError("spatial filter export is empty", 0);
    const std::size_t f1 = filters.size(), c = filters[0].at("weights").size();
    Tensor out({f1, c});
    for (std::size_t f = 0; f < f1; ++f) {
        const auto& w = filters[f].at("weights");
        if (w.size() != c) throw FormatError("ragged spatial filter export", 0);
        for (std::size_t k = 0; k < c; ++k) out(f, k) = w[k].at("weight").get<double>();
    }
    return out;
}

}  // namespace psynet
