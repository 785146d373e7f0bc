#pragma once

/**
 * PSNet and phaser-PSNet: parameter blocks, forward pass, loss, hand-derived
 * backward pass and majority-vote prediction.
 *
 * Pipeline for one trial x [C x T]:
 *
 *   S^S = spatial * x                                  [F1 x T]
 *   S^P = S^S, odd-indexed rows convolved (same, zero-pad) with the shifter
 *   S[b, f] = valid-conv(S^P[f], fir[b]), batch-normalized    [F2 x F1 x N_c]
 *   P[p] = (S[b, 2q], S[b, 2q+1]),  p = b * F1/2 + q          [N_p x 2 x N_c]
 *   B[2p+k] = (V[p,k,0] P[p,0] + V[p,k,1] P[p,1])^2          [2N_p x N_c]
 *   A[p] = sqrt(B[2p] + B[2p+1] + eps)                         [N_p x N_c]
 *   Y = W * A                                                   [F3 x N_c]
 *
 * The loss is the mean over the N_c columns of softmax cross-entropy on Y.
 * FIR kernels are fixed and never receive gradient.
 */

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "psynet/dataio.hpp"
#include "psynet/dsp.hpp"
#include "psynet/errors.hpp"
#include "psynet/kernels.hpp"
#include "psynet/rng.hpp"
#include "psynet/tensor.hpp"

namespace psynet {

enum class BnPlacement { post_fir, post_spatial };

NLOHMANN_JSON_SERIALIZE_ENUM(BnPlacement, {{BnPlacement::post_fir, "post_fir"},
                                           {BnPlacement::post_spatial, "post_spatial"}})

struct Hyperparams {
    std::size_t channels = 22;         // C
    std::size_t spatial_filters = 16;  // F1
    std::size_t bands = 15;            // F2
    std::size_t classes = 4;           // F3
    std::size_t fir_length = 51;       // L
    std::size_t shifter_length = 51;   // L_sp
    std::size_t samples = 250;         // T
    double fs_hz = 250.0;
    bool use_phase_shifter = false;
    double sqrt_eps = kDefaultSqrtEps;
    double learning_rate = 1e-3;
    std::size_t epochs = 800;
    std::size_t batch_size = 32;
    BnPlacement bn_placement = BnPlacement::post_fir;
    // FIR bank: centre of band b is first_band_hz + b * band_spacing_hz.
    double first_band_hz = 3.0;
    double band_spacing_hz = 2.0;
    double band_width_hz = 2.0;
    dsp::FirDesign fir_design{};

    std::size_t n_c() const { return samples - fir_length + 1; }
    std::size_t psc_pairs() const { return spatial_filters / 2; }
    std::size_t n_p() const { return psc_pairs() * bands; }
    double band_center_hz(std::size_t b) const { return first_band_hz + band_spacing_hz * static_cast<double>(b); }
    std::size_t bn_channels() const {
        return bn_placement == BnPlacement::post_fir ? bands * spatial_filters : spatial_filters;
    }

    void validate() const {
        if (channels < 1 || spatial_filters < 2 || bands < 1 || classes < 2)
            throw ConfigError("Hyperparams: C >= 1, F1 >= 2, F2 >= 1, F3 >= 2 required");
        if (spatial_filters % 2 != 0) throw ConfigError("Hyperparams: F1 must be even for pairing");
        if (fir_length % 2 == 0) throw ConfigError("Hyperparams: FIR length L must be odd");
        if (use_phase_shifter && shifter_length % 2 == 0)
            throw ConfigError("Hyperparams: shifter length L_sp must be odd");
        if (samples < fir_length) throw ConfigError("Hyperparams: T must be >= L");
        if (!(fs_hz > 0.0)) throw ConfigError("Hyperparams: fs must be positive");
        if (!(sqrt_eps >= 0.0)) throw ConfigError("Hyperparams: sqrt_eps must be >= 0");
        if (batch_size < 2) throw ConfigError("Hyperparams: batch size must be >= 2 for batch normalization");
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(Hyperparams, channels, spatial_filters, bands, classes, fir_length,
                                                shifter_length, samples, fs_hz, use_phase_shifter, sqrt_eps,
                                                learning_rate, epochs, batch_size, bn_placement, first_band_hz,
                                                band_spacing_hz, band_width_hz, fir_design)

// The experimental setting for four-class, 22-channel, 250 Hz recordings.
inline Hyperparams reference_hyperparams() { return Hyperparams{}; }

// ---------------------------------------------------------------------------
// Pairing
// ---------------------------------------------------------------------------

struct PspIndex {
    std::size_t band;   // FIR band b
    std::size_t pair;   // q
    std::size_t psc_a;  // 2q
    std::size_t psc_b;  // 2q + 1

    friend bool operator==(const PspIndex&, const PspIndex&) = default;
};

inline PspIndex pair_index(const Hyperparams& hp, std::size_t p) {
    if (p >= hp.n_p()) throw IndexError("pair_index: PSP " + std::to_string(p) + " out of range [0, " + std::to_string(hp.n_p()) + ")");
    const std::size_t q = p % hp.psc_pairs();
    return {p / hp.psc_pairs(), q, 2 * q, 2 * q + 1};
}

inline std::size_t psp_from_index(const Hyperparams& hp, std::size_t band, std::size_t pair) {
    if (band >= hp.bands || pair >= hp.psc_pairs()) throw IndexError("psp_from_index: out of range");
    return band * hp.psc_pairs() + pair;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct PsnetParams {
    Tensor spatial;     // [F1 x C]
    Tensor fir;         // [F2 x L], fixed
    Tensor shifter;     // [F1/2 x L_sp], empty unless the phase shifter is enabled
    Tensor transcoder;  // [N_p x 2 x 2]; (p, k, m) multiplies component m in quadratic term k
    Tensor classifier;  // [F3 x N_p]
    Tensor bn_gamma;
    Tensor bn_beta;
    BatchNormState bn;
    // Bumped by every optimizer step; forward passes record it.
    std::uint64_t version = 0;
};

struct Gradients {
    Tensor spatial;
    Tensor shifter;
    Tensor transcoder;
    Tensor classifier;
    Tensor bn_gamma;
    Tensor bn_beta;
};

template <typename T>
struct NamedBlock {
    std::string_view name;
    T* value;
};

// Trainable blocks in a fixed order; the FIR bank is deliberately absent.
inline std::vector<NamedBlock<Tensor>> trainable_blocks(PsnetParams& p, const Hyperparams& hp) {
    std::vector<NamedBlock<Tensor>> out{{"spatial", &p.spatial}};
    if (hp.use_phase_shifter) out.push_back({"shifter", &p.shifter});
    out.push_back({"transcoder", &p.transcoder});
    out.push_back({"classifier", &p.classifier});
    out.push_back({"bn_gamma", &p.bn_gamma});
    out.push_back({"bn_beta", &p.bn_beta});
    return out;
}

inline std::vector<NamedBlock<Tensor>> gradient_blocks(Gradients& g, const Hyperparams& hp) {
    std::vector<NamedBlock<Tensor>> out{{"spatial", &g.spatial}};
    if (hp.use_phase_shifter) out.push_back({"shifter", &g.shifter});
    out.push_back({"transcoder", &g.transcoder});
    out.push_back({"classifier", &g.classifier});
    out.push_back({"bn_gamma", &g.bn_gamma});
    out.push_back({"bn_beta", &g.bn_beta});
    return out;
}

inline Gradients zero_gradients(const PsnetParams& p, const Hyperparams& hp) {
    Gradients g;
    g.spatial = Tensor(p.spatial.shape());
    if (hp.use_phase_shifter) g.shifter = Tensor(p.shifter.shape());
    g.transcoder = Tensor(p.transcoder.shape());
    g.classifier = Tensor(p.classifier.shape());
    g.bn_gamma = Tensor(p.bn_gamma.shape());
    g.bn_beta = Tensor(p.bn_beta.shape());
    return g;
}

// Coefficients that recover the common amplitude of two equal-amplitude
// sinusoids with constant phase offset delta_theta:
//   term 0 = (s_x + s_y) / (2 cos(dtheta/2)),  term 1 = (s_x - s_y) / (2 sin(dtheta/2)).
inline std::array<std::array<double, 2>, 2> pat_coefficients(double delta_theta) {
    const double c = 1.0 / (2.0 * std::cos(delta_theta / 2.0));
    const double s = 1.0 / (2.0 * std::sin(delta_theta / 2.0));
    return {{{c, c}, {s, -s}}};
}

inline Tensor build_fir_bank(const Hyperparams& hp) {
    Tensor fir({hp.bands, hp.fir_length});
    for (std::size_t b = 0; b < hp.bands; ++b) {
        const auto k = dsp::design_fir_bandpass(hp.band_center_hz(b), hp.band_width_hz, hp.fir_length, hp.fs_hz,
                                                hp.fir_design);
        std::copy(k.taps.begin(), k.taps.end(), fir.row(b).begin());
    }
    return fir;
}

/**
 * Spatial filters uniform(-a, a), a = sqrt(6 / (C + F1)); FIR bank from the
 * band-pass designer; shifter rows are centred unit impulses; transcoder at
 * the dtheta = pi/2 amplitude-recovery coefficients plus uniform(-0.05, 0.05)
 * jitter; classifier Glorot-uniform. Draws happen in that order from one
 * stream, and the shifter consumes none, so enabling it leaves every other
 * block unchanged for the same seed.
 */
inline PsnetParams init_params(const Hyperparams& hp, std::uint64_t seed) {
    hp.validate();
    Rng rng = make_rng(seed, {stream::init});
    PsnetParams p;

    p.spatial = Tensor({hp.spatial_filters, hp.channels});
    const double a_sp = std::sqrt(6.0 / static_cast<double>(hp.channels + hp.spatial_filters));
    for (double& v : p.spatial.data()) v = uniform(rng, -a_sp, a_sp);

    p.fir = build_fir_bank(hp);

    if (hp.use_phase_shifter) {
        p.shifter = Tensor({hp.psc_pairs(), hp.shifter_length});
        for (std::size_t q = 0; q < hp.psc_pairs(); ++q) p.shifter(q, (hp.shifter_length - 1) / 2) = 1.0;
    }

    const auto ideal = pat_coefficients(std::numbers::pi / 2.0);
    p.transcoder = Tensor({hp.n_p(), 2, 2});
    for (std::size_t i = 0; i < hp.n_p(); ++i)
        for (std::size_t k = 0; k < 2; ++k)
            for (std::size_t m = 0; m < 2; ++m) p.transcoder(i, k, m) = ideal[k][m] + uniform(rng, -0.05, 0.05);

    p.classifier = Tensor({hp.classes, hp.n_p()});
    const double a_cl = std::sqrt(6.0 / static_cast<double>(hp.classes + hp.n_p()));
    for (double& v : p.classifier.data()) v = uniform(rng, -a_cl, a_cl);

    p.bn_gamma = Tensor({hp.bn_channels()}, 1.0);
    p.bn_beta = Tensor({hp.bn_channels()}, 0.0);
    p.bn = BatchNormState(hp.bn_channels());
    return p;
}

inline void check_param_shapes(const PsnetParams& p, const Hyperparams& hp) {
    auto expect = [](const Tensor& t, const Tensor::Shape& s, const char* name) {
        if (t.shape() != s) {
            throw DimensionError(std::string("parameter block ") + name + " has shape " + Tensor::shape_string(t.shape()) +
                                 ", expected " + Tensor::shape_string(s));
        }
    };
    expect(p.spatial, {hp.spatial_filters, hp.channels}, "spatial");
    expect(p.fir, {hp.bands, hp.fir_length}, "fir");
    if (hp.use_phase_shifter) expect(p.shifter, {hp.psc_pairs(), hp.shifter_length}, "shifter");
    expect(p.transcoder, {hp.n_p(), 2, 2}, "transcoder");
    expect(p.classifier, {hp.classes, hp.n_p()}, "classifier");
    expect(p.bn_gamma, {hp.bn_channels()}, "bn_gamma");
    expect(p.bn_beta, {hp.bn_channels()}, "bn_beta");
    if (p.bn.channels() != hp.bn_channels()) throw DimensionError("batch-norm state channel count mismatch");
}

// ---------------------------------------------------------------------------
// Stage functions (also used directly by tests and analysis)
// ---------------------------------------------------------------------------

// S [F2 x F1 x N_c] -> P [N_p x 2 x N_c]
inline Tensor pair_components(const Tensor& s, const Hyperparams& hp) {
    const std::size_t nc = s.dim(2);
    Tensor p({hp.n_p(), 2, nc});
    for (std::size_t i = 0; i < hp.n_p(); ++i) {
        const auto idx = pair_index(hp, i);
        auto a = s.row(idx.band, idx.psc_a);
        auto b = s.row(idx.band, idx.psc_b);
        std::copy(a.begin(), a.end(), p.row(i, 0).begin());
        std::copy(b.begin(), b.end(), p.row(i, 1).begin());
    }
    return p;
}

// Per-PSP 2x2 linear map before squaring: [2N_p x N_c].
inline Tensor transcoder_linear(const Tensor& p, const Tensor& v) {
    if (p.rank() != 3 || p.dim(1) != 2) throw DimensionError("transcoder: P must be [N_p x 2 x N_c]");
    if (v.shape() != Tensor::Shape{p.dim(0), 2, 2}) throw DimensionError("transcoder: weights must be [N_p x 2 x 2]");
    const std::size_t np = p.dim(0), nc = p.dim(2);
    Tensor lin({2 * np, nc});
    for (std::size_t i = 0; i < np; ++i) {
        auto sx = p.row(i, 0);
        auto sy = p.row(i, 1);
        for (std::size_t k = 0; k < 2; ++k) {
            const double wx = v(i, k, 0), wy = v(i, k, 1);
            auto out = lin.row(2 * i + k);
            for (std::size_t t = 0; t < nc; ++t) out[t] = wx * sx[t] + wy * sy[t];
        }
    }
    return lin;
}

// B [2N_p x N_c] -> B_odd + B_even [N_p x N_c]
inline Tensor odd_even_sum(const Tensor& b) {
    const std::size_t np = b.dim(0) / 2, nc = b.dim(1);
    Tensor out({np, nc});
    for (std::size_t i = 0; i < np; ++i) {
        auto o = b.row(2 * i);
        auto e = b.row(2 * i + 1);
        auto r = out.row(i);
        for (std::size_t t = 0; t < nc; ++t) r[t] = o[t] + e[t];
    }
    return out;
}

// Phase-to-amplitude transcoding of P with weights V: returns A.
inline Tensor transcode(const Tensor& p, const Tensor& v, double eps) {
    return sqrt_eps(odd_even_sum(square(transcoder_linear(p, v))), eps);
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

struct ForwardCache {
    Tensor ss;       // S^S [F1 x T]
    Tensor ss_norm;  // batch-normalized S^S (post_spatial placement only)
    Tensor sp;       // S^P [F1 x T]
    Tensor s;        // S [F2 x F1 x N_c]
    Tensor p;        // P [N_p x 2 x N_c]
    Tensor b;        // B [2N_p x N_c]
    Tensor a;        // A [N_p x N_c]
    Tensor y;        // Y [F3 x N_c]
};

struct ForwardPass {
    std::vector<ForwardCache> trials;
    std::vector<Tensor> inputs;
    BatchNormCache bn;
    Mode mode = Mode::infer;
    std::uint64_t version = 0;
};

namespace detail {

inline Tensor shifter_forward(const Tensor& src, const PsnetParams& params, const Hyperparams& hp) {
    if (!hp.use_phase_shifter) return src;
    Tensor sp = src;
    for (std::size_t q = 0; q < hp.psc_pairs(); ++q)
        conv1d_into(src.row(2 * q + 1), params.shifter.row(q), ConvMode::same_zero_pad, sp.row(2 * q + 1));
    return sp;
}

inline Tensor fir_forward(const Tensor& sp, const PsnetParams& params, const Hyperparams& hp) {
    Tensor s({hp.bands, hp.spatial_filters, hp.n_c()});
    for (std::size_t b = 0; b < hp.bands; ++b)
        for (std::size_t f = 0; f < hp.spatial_filters; ++f)
            conv1d_into(sp.row(f), params.fir.row(b), ConvMode::valid, s.row(b, f));
    return s;
}

// Stack per-trial tensors (any rank) as channels of [B x ch x len].
inline Tensor stack_channels(const std::vector<const Tensor*>& items, std::size_t channels, std::size_t len) {
    Tensor out({items.size(), channels, len});
    const std::size_t block = channels * len;
    for (std::size_t i = 0; i < items.size(); ++i)
        std::copy(items[i]->data().begin(), items[i]->data().end(),
                  out.data().begin() + static_cast<std::ptrdiff_t>(i * block));
    return out;
}

inline void unstack_into(const Tensor& stacked, std::size_t i, Tensor& dst) {
    const std::size_t block = dst.size();
    auto src = stacked.data().subspan(i * block, block);
    std::copy(src.begin(), src.end(), dst.data().begin());
}

}  // namespace detail

/**
 * Forward pass over a batch of trials. Train mode normalizes with batch
 * statistics (batch >= 2) and updates the running statistics in `params`;
 * infer mode uses the running statistics.
 */
inline ForwardPass forward(PsnetParams& params, const Hyperparams& hp, std::span<const Tensor> batch, Mode mode) {
    check_param_shapes(params, hp);
    if (batch.empty()) throw DimensionError("forward: empty batch");
    ForwardPass pass;
    pass.mode = mode;
    pass.version = params.version;
    pass.trials.resize(batch.size());
    pass.inputs.assign(batch.begin(), batch.end());

    for (std::size_t i = 0; i < batch.size(); ++i) {
        const Tensor& x = batch[i];
        if (x.shape() != Tensor::Shape{hp.channels, hp.samples}) {
            throw DimensionError("forward: input shape " + Tensor::shape_string(x.shape()) + ", expected [" +
                                 std::to_string(hp.channels) + "x" + std::to_string(hp.samples) + "]");
        }
        pass.trials[i].ss = matmul(params.spatial, x);
    }

    if (hp.bn_placement == BnPlacement::post_spatial) {
        std::vector<const Tensor*> items;
        for (auto& c : pass.trials) items.push_back(&c.ss);
        auto r = batch_norm(detail::stack_channels(items, hp.spatial_filters, hp.samples), params.bn_gamma,
                            params.bn_beta, params.bn, mode);
        pass.bn = std::move(r.cache);
        for (std::size_t i = 0; i < batch.size(); ++i) {
            pass.trials[i].ss_norm = Tensor(pass.trials[i].ss.shape());
            detail::unstack_into(r.y, i, pass.trials[i].ss_norm);
        }
    }

    for (auto& c : pass.trials) {
        c.sp = detail::shifter_forward(hp.bn_placement == BnPlacement::post_spatial ? c.ss_norm : c.ss, params, hp);
        c.s = detail::fir_forward(c.sp, params, hp);
    }

    if (hp.bn_placement == BnPlacement::post_fir) {
        std::vector<const Tensor*> items;
        for (auto& c : pass.trials) items.push_back(&c.s);
        auto r = batch_norm(detail::stack_channels(items, hp.bn_channels(), hp.n_c()), params.bn_gamma,
                            params.bn_beta, params.bn, mode);
        pass.bn = std::move(r.cache);
        for (std::size_t i = 0; i < batch.size(); ++i) detail::unstack_into(r.y, i, pass.trials[i].s);
    }

    for (auto& c : pass.trials) {
        c.p = pair_components(c.s, hp);
        c.b = square(transcoder_linear(c.p, params.transcoder));
        c.a = sqrt_eps(odd_even_sum(c.b), hp.sqrt_eps);
        c.y = matmul(params.classifier, c.a);
    }
    return pass;
}

// Single-trial inference.
inline ForwardCache forward(const PsnetParams& params, const Hyperparams& hp, const Tensor& x) {
    PsnetParams view = params;  // running statistics are read, not written, in infer mode
    auto pass = forward(view, hp, std::span<const Tensor>(&x, 1), Mode::infer);
    return std::move(pass.trials.front());
}

// ---------------------------------------------------------------------------
// Loss and prediction
// ---------------------------------------------------------------------------

// Mean over the N_c columns of softmax cross-entropy against `label`.
inline double loss(const ForwardCache& cache, std::size_t label) {
    const Tensor& y = cache.y;
    const std::size_t k = y.dim(0), nc = y.dim(1);
    if (label >= k) throw IndexError("loss: label " + std::to_string(label) + " out of range for " + std::to_string(k) + " classes");
    std::vector<double> col(k);
    double total = 0.0;
    for (std::size_t j = 0; j < nc; ++j) {
        for (std::size_t c = 0; c < k; ++c) col[c] = y(c, j);
        total += softmax_cross_entropy(col, label).loss;
    }
    return total / static_cast<double>(nc);
}

inline double batch_loss(const ForwardPass& pass, std::span<const std::size_t> labels) {
    if (labels.size() != pass.trials.size()) throw DimensionError("batch_loss: one label per trial required");
    double total = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) total += loss(pass.trials[i], labels[i]);
    return total / static_cast<double>(labels.size());
}

/**
 * Column-wise argmax (ties to the lowest class), then the modal class over
 * columns (ties to the lowest class).
 */
inline std::size_t predict_from_logits(const Tensor& y) {
    const std::size_t k = y.dim(0), nc = y.dim(1);
    std::vector<std::size_t> votes(k, 0);
    for (std::size_t j = 0; j < nc; ++j) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < k; ++c)
            if (y(c, j) > y(best, j)) best = c;
        ++votes[best];
    }
    return static_cast<std::size_t>(std::max_element(votes.begin(), votes.end()) - votes.begin());
}

inline std::size_t predict(const PsnetParams& params, const Hyperparams& hp, const Tensor& x) {
    return predict_from_logits(forward(params, hp, x).y);
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/**
 * Gradients of batch_loss(pass, labels) with respect to every trainable
 * block. `pass` must come from forward() on the same parameter version.
 * Train-mode passes differentiate through the batch statistics; infer-mode
 * passes treat batch norm as a fixed affine map.
 */
inline Gradients backward(const PsnetParams& params, const Hyperparams& hp, const ForwardPass& pass,
                          std::span<const std::size_t> labels) {
    if (pass.version != params.version) {
        throw ContractError("backward: forward cache is stale (parameters version " + std::to_string(params.version) +
                            ", cache version " + std::to_string(pass.version) + ")");
    }
    if (labels.size() != pass.trials.size()) throw DimensionError("backward: one label per trial required");
    check_param_shapes(params, hp);

    const std::size_t nb = pass.trials.size();
    const std::size_t nc = hp.n_c();
    const std::size_t np = hp.n_p();
    const std::size_t k_classes = hp.classes;
    Gradients g = zero_gradients(params, hp);

    // Gradient w.r.t. S (post-BN when post_fir), per trial.
    std::vector<Tensor> ds(nb);
    const double scale = 1.0 / (static_cast<double>(nc) * static_cast<double>(nb));
    std::vector<double> col(k_classes);

    for (std::size_t i = 0; i < nb; ++i) {
        const ForwardCache& c = pass.trials[i];
        const std::size_t label = labels[i];
        if (label >= k_classes) throw IndexError("backward: label out of range");

        Tensor dy({k_classes, nc});
        for (std::size_t j = 0; j < nc; ++j) {
            for (std::size_t k = 0; k < k_classes; ++k) col[k] = c.y(k, j);
            const auto ce = softmax_cross_entropy(col, label);
            for (std::size_t k = 0; k < k_classes; ++k) dy(k, j) = ce.grad[k] * scale;
        }
        auto mm = matmul_backward(params.classifier, c.a, dy);
        g.classifier += mm[0];
        const Tensor& da = mm[1];

        // A = sqrt(B_odd + B_even + eps); B = lin^2.
        const Tensor lin = transcoder_linear(c.p, params.transcoder);
        Tensor dp(c.p.shape());
        for (std::size_t p = 0; p < np; ++p) {
            auto arow = c.a.row(p);
            auto darow = da.row(p);
            auto sx = c.p.row(p, 0);
            auto sy = c.p.row(p, 1);
            auto dsx = dp.row(p, 0);
            auto dsy = dp.row(p, 1);
            for (std::size_t k = 0; k < 2; ++k) {
                auto l = lin.row(2 * p + k);
                const double wx = params.transcoder(p, k, 0), wy = params.transcoder(p, k, 1);
                double gx = 0.0, gy = 0.0;
                for (std::size_t t = 0; t < nc; ++t) {
                    const double dsum = darow[t] / (2.0 * arow[t]);
                    const double dl = dsum * 2.0 * l[t];
                    gx += dl * sx[t];
                    gy += dl * sy[t];
                    dsx[t] += dl * wx;
                    dsy[t] += dl * wy;
                }
                g.transcoder(p, k, 0) += gx;
                g.transcoder(p, k, 1) += gy;
            }
        }

        ds[i] = Tensor({hp.bands, hp.spatial_filters, nc});
        for (std::size_t p = 0; p < np; ++p) {
            const auto idx = pair_index(hp, p);
            auto a = dp.row(p, 0);
            auto b = dp.row(p, 1);
            std::copy(a.begin(), a.end(), ds[i].row(idx.band, idx.psc_a).begin());
            std::copy(b.begin(), b.end(), ds[i].row(idx.band, idx.psc_b).begin());
        }
    }

    if (hp.bn_placement == BnPlacement::post_fir) {
        std::vector<const Tensor*> items;
        for (auto& t : ds) items.push_back(&t);
        auto bg = batch_norm_backward(pass.bn, params.bn_gamma, detail::stack_channels(items, hp.bn_channels(), nc));
        g.bn_gamma += bg[1];
        g.bn_beta += bg[2];
        for (std::size_t i = 0; i < nb; ++i) detail::unstack_into(bg[0], i, ds[i]);
    }

    // Back through FIRConv and the shifter to the shifter's input.
    std::vector<Tensor> dsrc(nb);
    for (std::size_t i = 0; i < nb; ++i) {
        const ForwardCache& c = pass.trials[i];
        Tensor dsp({hp.spatial_filters, hp.samples});
        for (std::size_t b = 0; b < hp.bands; ++b)
            for (std::size_t f = 0; f < hp.spatial_filters; ++f)
                conv1d_backward_signal_into(params.fir.row(b), ds[i].row(b, f), ConvMode::valid, dsp.row(f));

        if (!hp.use_phase_shifter) {
            dsrc[i] = std::move(dsp);
            continue;
        }
        const Tensor& src = hp.bn_placement == BnPlacement::post_spatial ? c.ss_norm : c.ss;
        dsrc[i] = Tensor({hp.spatial_filters, hp.samples});
        for (std::size_t q = 0; q < hp.psc_pairs(); ++q) {
            auto even = dsp.row(2 * q);
            std::copy(even.begin(), even.end(), dsrc[i].row(2 * q).begin());
            conv1d_backward_signal_into(params.shifter.row(q), dsp.row(2 * q + 1), ConvMode::same_zero_pad,
                                        dsrc[i].row(2 * q + 1));
            conv1d_backward_kernel_into(src.row(2 * q + 1), dsp.row(2 * q + 1), ConvMode::same_zero_pad,
                                        g.shifter.row(q));
        }
    }

    if (hp.bn_placement == BnPlacement::post_spatial) {
        std::vector<const Tensor*> items;
        for (auto& t : dsrc) items.push_back(&t);
        auto bg = batch_norm_backward(pass.bn, params.bn_gamma,
                                      detail::stack_channels(items, hp.spatial_filters, hp.samples));
        g.bn_gamma += bg[1];
        g.bn_beta += bg[2];
        for (std::size_t i = 0; i < nb; ++i) detail::unstack_into(bg[0], i, dsrc[i]);
    }

    for (std::size_t i = 0; i < nb; ++i) {
        auto mm = matmul_backward(params.spatial, pass.inputs[i], dsrc[i]);
        g.spatial += mm[0];
    }
    return g;
}

// ---------------------------------------------------------------------------
// Checkpoint (PSNB1): magic, u32 LE header length, JSON header, then the
// blocks as f64 LE in header order.
// ---------------------------------------------------------------------------

inline constexpr char kPsnbMagic[] = "PSNB1\n";
inline constexpr int kPsnbVersion = 1;

struct Checkpoint {
    Hyperparams hp;
    PsnetParams params;
    std::uint64_t seed = 0;
    std::size_t epoch = 0;
    json extra = json::object();
};

namespace detail {

inline std::vector<std::pair<std::string, Tensor*>> checkpoint_blocks(PsnetParams& p, const Hyperparams& hp) {
    std::vector<std::pair<std::string, Tensor*>> out{{"spatial", &p.spatial}, {"fir", &p.fir}};
    if (hp.use_phase_shifter) out.emplace_back("shifter", &p.shifter);
    out.emplace_back("transcoder", &p.transcoder);
    out.emplace_back("classifier", &p.classifier);
    out.emplace_back("bn_gamma", &p.bn_gamma);
    out.emplace_back("bn_beta", &p.bn_beta);
    out.emplace_back("bn_running_mean", &p.bn.running_mean);
    out.emplace_back("bn_running_var", &p.bn.running_var);
    return out;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
    PsnetParams p = ck.params;
    check_param_shapes(p, ck.hp);
    json blocks = json::array();
    auto list = detail::checkpoint_blocks(p, ck.hp);
    for (auto& [name, t] : list) blocks.push_back({{"name", name}, {"shape", t->shape()}});
    json header = {{"version", kPsnbVersion},
                   {"hyperparams", ck.hp},
                   {"seed", ck.seed},
                   {"epoch", ck.epoch},
                   {"bn", {{"momentum", p.bn.momentum}, {"eps", p.bn.eps}, {"updates", p.bn.updates}}},
                   {"param_version", p.version},
                   {"blocks", blocks}};
    if (!ck.extra.empty()) header["extra"] = ck.extra;
    std::vector<std::uint8_t> out;
    detail::write_container_header(out, kPsnbMagic, header);
    for (auto& [name, t] : list)
        for (double v : t->data()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
    return out;
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
    auto [header, payload] = detail::read_container_header(bytes, kPsnbMagic);
    const std::size_t hoff = kMagicSize + 4;
    const auto version = detail::header_field<int>(header, "version", hoff);
    if (version != kPsnbVersion) throw FormatError("unsupported PSNB version " + std::to_string(version), hoff);
    Checkpoint ck;
    try {
        ck.hp = header.at("hyperparams").get<Hyperparams>();
        ck.seed = header.at("seed").get<std::uint64_t>();
        ck.epoch = header.at("epoch").get<std::size_t>();
        if (header.contains("extra")) ck.extra = header["extra"];
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad checkpoint header: ") + e.what(), hoff);
    }
    PsnetParams& p = ck.params;
    p.bn = BatchNormState(ck.hp.bn_channels());
    if (header.contains("bn")) {
        p.bn.momentum = header["bn"].value("momentum", p.bn.momentum);
        p.bn.eps = header["bn"].value("eps", p.bn.eps);
        p.bn.updates = header["bn"].value("updates", std::size_t{0});
    }
    p.version = header.value("param_version", std::uint64_t{0});

    const auto blocks = detail::header_field<json>(header, "blocks", hoff);
    auto list = detail::checkpoint_blocks(p, ck.hp);
    if (blocks.size() != list.size()) throw FormatError("checkpoint block list does not match hyperparameters", hoff);
    std::size_t at = payload;
    for (std::size_t i = 0; i < list.size(); ++i) {
        const auto name = blocks[i].value("name", std::string{});
        if (name != list[i].first) throw FormatError("unexpected block \"" + name + "\", expected \"" + list[i].first + "\"", hoff);
        const auto shape = blocks[i].at("shape").get<Tensor::Shape>();
        const std::size_t count = Tensor::product(shape);
        if (bytes.size() < at + 8 * count) throw FormatError("truncated payload in block \"" + name + "\"", bytes.size());
        std::vector<double> data(count);
        for (std::size_t j = 0; j < count; ++j) data[j] = std::bit_cast<double>(detail::get_u64(bytes, at + 8 * j));
        at += 8 * count;
        *list[i].second = Tensor(shape, std::move(data));
    }
    if (at != bytes.size()) throw FormatError("trailing bytes after last block", at);
    check_param_shapes(p, ck.hp);
    return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
    detail::write_file(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(detail::read_file(path));
}

}  // namespace psynet
