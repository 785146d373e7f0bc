#pragma once

// Forward kernels and their vector-Jacobian products.
//
// Every kernel is a pure function of its inputs except batch_norm, which
// updates the running statistics it is handed in train mode. Backward
// functions take the upstream gradient and return one gradient per
// differentiable input, in input order.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "psynet/errors.hpp"
#include "psynet/tensor.hpp"

namespace psynet {

enum class Mode { train, infer };

struct KernelGrad {
    std::vector<Tensor> inputs;

    const Tensor& operator[](std::size_t i) const { return inputs.at(i); }
};

// ---------------------------------------------------------------------------
// conv1d
//
// Cross-correlation, as in DL frameworks: out[t] = sum_k kernel[k] * x[t + k - offset].
// valid: offset 0, output length T - L + 1.
// same_zero_pad: offset (L - 1) / 2, output length T, signal zero-extended.
// ---------------------------------------------------------------------------

enum class ConvMode { valid, same_zero_pad };

inline std::size_t conv1d_output_length(std::size_t signal_len, std::size_t kernel_len, ConvMode mode) {
    if (kernel_len == 0) throw DimensionError("conv1d: kernel length must be >= 1");
    if (mode == ConvMode::valid) {
        if (signal_len < kernel_len) {
            throw DimensionError("conv1d(valid): signal length " + std::to_string(signal_len) +
                                 " shorter than kernel length " + std::to_string(kernel_len));
        }
        return signal_len - kernel_len + 1;
    }
    return signal_len;
}

namespace detail {

inline std::ptrdiff_t conv_offset(std::size_t kernel_len, ConvMode mode) {
    return mode == ConvMode::valid ? 0 : static_cast<std::ptrdiff_t>((kernel_len - 1) / 2);
}

// Range of kernel taps k for which x[t + k - offset] is inside [0, n).
inline void tap_range(std::ptrdiff_t t, std::ptrdiff_t offset, std::ptrdiff_t n, std::ptrdiff_t len,
                      std::ptrdiff_t& k0, std::ptrdiff_t& k1) {
    k0 = std::max<std::ptrdiff_t>(0, offset - t);
    k1 = std::min<std::ptrdiff_t>(len, n - t + offset);
}

}  // namespace detail

// out = conv(x, kernel); out must already have the output length.
inline void conv1d_into(std::span<const double> x, std::span<const double> kernel, ConvMode mode,
                        std::span<double> out) {
    const auto n = static_cast<std::ptrdiff_t>(x.size());
    const auto len = static_cast<std::ptrdiff_t>(kernel.size());
    const std::ptrdiff_t offset = detail::conv_offset(kernel.size(), mode);
    const auto n_out = static_cast<std::ptrdiff_t>(out.size());
    for (std::ptrdiff_t t = 0; t < n_out; ++t) {
        std::ptrdiff_t k0, k1;
        detail::tap_range(t, offset, n, len, k0, k1);
        double acc = 0.0;
        const double* xs = x.data() + (t - offset);
        for (std::ptrdiff_t k = k0; k < k1; ++k) acc += kernel[static_cast<std::size_t>(k)] * xs[k];
        out[static_cast<std::size_t>(t)] = acc;
    }
}

// dx += d(out)/dx^T * dy
inline void conv1d_backward_signal_into(std::span<const double> kernel, std::span<const double> dy, ConvMode mode,
                                        std::span<double> dx) {
    const auto n = static_cast<std::ptrdiff_t>(dx.size());
    const auto len = static_cast<std::ptrdiff_t>(kernel.size());
    const std::ptrdiff_t offset = detail::conv_offset(kernel.size(), mode);
    const auto n_out = static_cast<std::ptrdiff_t>(dy.size());
    for (std::ptrdiff_t t = 0; t < n_out; ++t) {
        const double g = dy[static_cast<std::size_t>(t)];
        if (g == 0.0) continue;
        std::ptrdiff_t k0, k1;
        detail::tap_range(t, offset, n, len, k0, k1);
        double* xs = dx.data() + (t - offset);
        for (std::ptrdiff_t k = k0; k < k1; ++k) xs[k] += g * kernel[static_cast<std::size_t>(k)];
    }
}

// dk += d(out)/dk^T * dy
inline void conv1d_backward_kernel_into(std::span<const double> x, std::span<const double> dy, ConvMode mode,
                                        std::span<double> dk) {
    const auto n = static_cast<std::ptrdiff_t>(x.size());
    const auto len = static_cast<std::ptrdiff_t>(dk.size());
    const std::ptrdiff_t offset = detail::conv_offset(dk.size(), mode);
    const auto n_out = static_cast<std::ptrdiff_t>(dy.size());
    for (std::ptrdiff_t t = 0; t < n_out; ++t) {
        const double g = dy[static_cast<std::size_t>(t)];
        if (g == 0.0) continue;
        std::ptrdiff_t k0, k1;
        detail::tap_range(t, offset, n, len, k0, k1);
        const double* xs = x.data() + (t - offset);
        for (std::ptrdiff_t k = k0; k < k1; ++k) dk[static_cast<std::size_t>(k)] += g * xs[k];
    }
}

inline Tensor conv1d(const Tensor& signal, const Tensor& kernel, ConvMode mode) {
    if (signal.rank() != 1 || kernel.rank() != 1) throw DimensionError("conv1d: expects rank-1 signal and kernel");
    Tensor out({conv1d_output_length(signal.size(), kernel.size(), mode)});
    conv1d_into(signal.data(), kernel.data(), mode, out.data());
    return out;
}

// Gradients w.r.t. {signal, kernel}.
inline KernelGrad conv1d_backward(const Tensor& signal, const Tensor& kernel, const Tensor& upstream, ConvMode mode) {
    const std::size_t n_out = conv1d_output_length(signal.size(), kernel.size(), mode);
    if (upstream.rank() != 1 || upstream.size() != n_out) throw DimensionError("conv1d_backward: upstream length");
    Tensor dx(signal.shape());
    Tensor dk(kernel.shape());
    conv1d_backward_signal_into(kernel.data(), upstream.data(), mode, dx.data());
    conv1d_backward_kernel_into(signal.data(), upstream.data(), mode, dk.data());
    return {{std::move(dx), std::move(dk)}};
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) throw DimensionError("matmul: expects rank-2 operands");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul: inner dimensions " + Tensor::shape_string(a.shape()) + " x " +
                             Tensor::shape_string(b.shape()));
    }
    Tensor c({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        auto ci = c.row(i);
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a(i, p);
            if (aip == 0.0) continue;
            auto bp = b.row(p);
            for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
    return c;
}

// Gradients w.r.t. {a, b}: da = dy b^T, db = a^T dy.
inline KernelGrad matmul_backward(const Tensor& a, const Tensor& b, const Tensor& upstream) {
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (upstream.shape() != Tensor::Shape{m, n}) throw DimensionError("matmul_backward: upstream shape");
    Tensor da({m, k});
    Tensor db({k, n});
    for (std::size_t i = 0; i < m; ++i) {
        auto gi = upstream.row(i);
        for (std::size_t p = 0; p < k; ++p) {
            auto bp = b.row(p);
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += gi[j] * bp[j];
            da(i, p) = acc;
            const double aip = a(i, p);
            auto dbp = db.row(p);
            for (std::size_t j = 0; j < n; ++j) dbp[j] += aip * gi[j];
        }
    }
    return {{std::move(da), std::move(db)}};
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Tensor square(const Tensor& x) {
    Tensor y = x;
    for (double& v : y.data()) v = v * v;
    return y;
}

inline KernelGrad square_backward(const Tensor& x, const Tensor& upstream) {
    Tensor::require_same_shape(x, upstream, "square_backward");
    Tensor dx = upstream;
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= 2.0 * x[i];
    return {{std::move(dx)}};
}

inline constexpr double kDefaultSqrtEps = 1e-8;

inline Tensor sqrt_eps(const Tensor& x, double eps = kDefaultSqrtEps) {
    Tensor y = x;
    for (double& v : y.data()) {
        if (v < -eps) throw DomainError("sqrt_eps: input " + std::to_string(v) + " below -eps");
        v = std::sqrt(std::max(v + eps, 0.0));
    }
    return y;
}

// d sqrt(x + eps) / dx = 1 / (2 sqrt(x + eps))
inline KernelGrad sqrt_eps_backward(const Tensor& x, const Tensor& upstream, double eps = kDefaultSqrtEps) {
    Tensor::require_same_shape(x, upstream, "sqrt_eps_backward");
    Tensor dx = upstream;
    for (std::size_t i = 0; i < dx.size(); ++i) {
        const double r = std::sqrt(std::max(x[i] + eps, 0.0));
        if (r == 0.0) throw DomainError("sqrt_eps_backward: gradient undefined at x + eps = 0");
        dx[i] /= 2.0 * r;
    }
    return {{std::move(dx)}};
}

// ---------------------------------------------------------------------------
// batch_norm over x[B x C x T]: statistics per channel across batch and time.
// ---------------------------------------------------------------------------

struct BatchNormState {
    Tensor running_mean;
    Tensor running_var;
    double momentum = 0.1;
    double eps = 1e-5;
    std::size_t updates = 0;

    BatchNormState() = default;
    explicit BatchNormState(std::size_t channels)
        : running_mean({channels}, 0.0), running_var({channels}, 1.0) {}

    std::size_t channels() const { return running_mean.size(); }
};

struct BatchNormCache {
    Mode mode = Mode::infer;
    Tensor x_hat;                 // [B x C x T], normalized input before gamma/beta
    std::vector<double> inv_std;  // per channel
};

struct BatchNormResult {
    Tensor y;
    BatchNormCache cache;
};

inline BatchNormResult batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                                  Mode mode) {
    if (x.rank() != 3) throw DimensionError("batch_norm: expects x of shape [B x C x T]");
    const std::size_t nb = x.dim(0), nc = x.dim(1), nt = x.dim(2);
    if (gamma.size() != nc || beta.size() != nc || state.channels() != nc) {
        throw DimensionError("batch_norm: parameter/state channel count does not match input channels " +
                             std::to_string(nc));
    }
    if (mode == Mode::train && nb < 2) {
        throw ConfigError("batch_norm: train mode requires a batch of at least 2 samples");
    }

    BatchNormResult r;
    r.cache.mode = mode;
    r.cache.x_hat = Tensor(x.shape());
    r.cache.inv_std.assign(nc, 0.0);
    r.y = Tensor(x.shape());
    const double count = static_cast<double>(nb * nt);

    for (std::size_t c = 0; c < nc; ++c) {
        double mean = 0.0, var = 0.0;
        if (mode == Mode::train) {
            for (std::size_t b = 0; b < nb; ++b)
                for (double v : x.row(b, c)) mean += v;
            mean /= count;
            for (std::size_t b = 0; b < nb; ++b)
                for (double v : x.row(b, c)) var += (v - mean) * (v - mean);
            var /= count;
            const double unbiased = count > 1.0 ? var * count / (count - 1.0) : var;
            state.running_mean[c] = (1.0 - state.momentum) * state.running_mean[c] + state.momentum * mean;
            state.running_var[c] = (1.0 - state.momentum) * state.running_var[c] + state.momentum * unbiased;
        } else {
            mean = state.running_mean[c];
            var = state.running_var[c];
        }
        const double inv_std = 1.0 / std::sqrt(var + state.eps);
        r.cache.inv_std[c] = inv_std;
        for (std::size_t b = 0; b < nb; ++b) {
            auto xr = x.row(b, c);
            auto hr = r.cache.x_hat.row(b, c);
            auto yr = r.y.row(b, c);
            for (std::size_t t = 0; t < nt; ++t) {
                hr[t] = (xr[t] - mean) * inv_std;
                yr[t] = gamma[c] * hr[t] + beta[c];
            }
        }
    }
    if (mode == Mode::train) ++state.updates;
    return r;
}

// Gradients w.r.t. {x, gamma, beta}. In infer mode the statistics are
// constants, so the map is affine per channel.
inline KernelGrad batch_norm_backward(const BatchNormCache& cache, const Tensor& gamma, const Tensor& upstream) {
    Tensor::require_same_shape(cache.x_hat, upstream, "batch_norm_backward");
    const std::size_t nb = upstream.dim(0), nc = upstream.dim(1), nt = upstream.dim(2);
    Tensor dx(upstream.shape());
    Tensor dgamma({nc});
    Tensor dbeta({nc});
    const double count = static_cast<double>(nb * nt);

    for (std::size_t c = 0; c < nc; ++c) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (std::size_t b = 0; b < nb; ++b) {
            auto g = upstream.row(b, c);
            auto h = cache.x_hat.row(b, c);
            for (std::size_t t = 0; t < nt; ++t) {
                sum_dy += g[t];
                sum_dy_xhat += g[t] * h[t];
            }
        }
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        const double scale = gamma[c] * cache.inv_std[c];
        for (std::size_t b = 0; b < nb; ++b) {
            auto g = upstream.row(b, c);
            auto h = cache.x_hat.row(b, c);
            auto d = dx.row(b, c);
            if (cache.mode == Mode::train) {
                for (std::size_t t = 0; t < nt; ++t)
                    d[t] = scale * (g[t] - sum_dy / count - h[t] * sum_dy_xhat / count);
            } else {
                for (std::size_t t = 0; t < nt; ++t) d[t] = scale * g[t];
            }
        }
    }
    return {{std::move(dx), std::move(dgamma), std::move(dbeta)}};
}

// ---------------------------------------------------------------------------
// softmax + cross-entropy for one logit vector
// ---------------------------------------------------------------------------

struct CrossEntropy {
    double loss = 0.0;
    std::vector<double> grad;  // softmax - one_hot(label)
};

inline CrossEntropy softmax_cross_entropy(std::span<const double> logits, std::size_t label) {
    if (label >= logits.size()) {
        throw IndexError("softmax_cross_entropy: label " + std::to_string(label) + " out of range for " +
                         std::to_string(logits.size()) + " classes");
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    CrossEntropy ce;
    ce.grad.resize(logits.size());
    for (std::size_t k = 0; k < logits.size(); ++k) {
        ce.grad[k] = std::exp(logits[k] - mx);
        z += ce.grad[k];
    }
    ce.loss = std::log(z) - (logits[label] - mx);
    for (std::size_t k = 0; k < logits.size(); ++k) ce.grad[k] /= z;
    ce.grad[label] -= 1.0;
    return ce;
}

inline CrossEntropy softmax_cross_entropy(const Tensor& logits, std::size_t label) {
    if (logits.rank() != 1) throw DimensionError("softmax_cross_entropy: expects rank-1 logits");
    return softmax_cross_entropy(logits.data(), label);
}

}  // namespace psynet
