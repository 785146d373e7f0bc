#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "psynet/rng.hpp"
#include "psynet/tensor.hpp"

namespace testing_support {

using psynet::Tensor;

inline Tensor random_tensor(const Tensor::Shape& shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    auto rng = psynet::make_rng(seed, {99});
    Tensor t(shape);
    for (double& v : t.data()) v = psynet::uniform(rng, lo, hi);
    return t;
}

// Central differences of a scalar function with respect to every entry of x.
inline Tensor numeric_gradient(Tensor& x, const std::function<double()>& f, double h = 1e-5) {
    Tensor g(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + h;
        const double up = f();
        x[i] = orig - h;
        const double down = f();
        x[i] = orig;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

// max |a - n| / max(max |n|, 1e-10)
inline double relative_error(const Tensor& analytic, const Tensor& numeric) {
    return psynet::max_abs_diff(analytic, numeric) / std::max(numeric.max_abs(), 1e-10);
}

// sum(r * y): turns a tensor-valued map into a scalar for gradient checks.
inline double project(const Tensor& y, const Tensor& r) {
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * r[i];
    return s;
}

// O(n^2) DFT, used as an oracle for the FFT path.
inline std::vector<std::complex<double>> naive_dft(const std::vector<std::complex<double>>& x, bool inverse) {
    const std::size_t n = x.size();
    std::vector<std::complex<double>> out(n);
    const double sign = inverse ? 1.0 : -1.0;
    for (std::size_t k = 0; k < n; ++k) {
        std::complex<double> acc(0.0, 0.0);
        for (std::size_t t = 0; t < n; ++t) {
            const double ang = sign * 2.0 * std::numbers::pi * static_cast<double>(k * t % n) / static_cast<double>(n);
            acc += x[t] * std::complex<double>(std::cos(ang), std::sin(ang));
        }
        out[k] = inverse ? acc / static_cast<double>(n) : acc;
    }
    return out;
}

// Analytic signal by the same definition as the library (zero-pad to a power
// of two, one-sided spectrum), computed with the naive DFT.
inline std::vector<std::complex<double>> naive_analytic(const std::vector<double>& x) {
    std::size_t n = 1;
    while (n < x.size()) n <<= 1;
    std::vector<std::complex<double>> z(n, 0.0);
    for (std::size_t i = 0; i < x.size(); ++i) z[i] = x[i];
    auto spec = naive_dft(z, false);
    for (std::size_t k = 0; k < n; ++k) {
        if (k == 0 || k == n / 2) continue;
        spec[k] *= k < n / 2 ? 2.0 : 0.0;
    }
    auto out = naive_dft(spec, true);
    out.resize(x.size());
    return out;
}

/**
 * Checks the subset of JSON Schema used by the files under schemas/:
 * type, required, properties, items, enum, minimum, maximum.
 * Returns an empty string when valid, otherwise the first violation.
 */
inline std::string schema_violation(const nlohmann::json& v, const nlohmann::json& s, const std::string& path = "$") {
    if (s.contains("type")) {
        const auto want = s["type"].get<std::string>();
        bool ok = false;
        if (want == "object") ok = v.is_object();
        else if (want == "array") ok = v.is_array();
        else if (want == "string") ok = v.is_string();
        else if (want == "boolean") ok = v.is_boolean();
        else if (want == "integer") ok = v.is_number_integer();
        else if (want == "number") ok = v.is_number();
        else if (want == "null") ok = v.is_null();
        if (!ok) return path + ": expected " + want;
    }
    if (s.contains("enum")) {
        bool found = false;
        for (const auto& e : s["enum"]) found = found || e == v;
        if (!found) return path + ": value not in enum";
    }
    if (v.is_number()) {
        if (s.contains("minimum") && v.get<double>() < s["minimum"].get<double>()) return path + ": below minimum";
        if (s.contains("maximum") && v.get<double>() > s["maximum"].get<double>()) return path + ": above maximum";
    }
    if (v.is_object()) {
        if (s.contains("required"))
            for (const auto& r : s["required"])
                if (!v.contains(r.get<std::string>())) return path + ": missing " + r.get<std::string>();
        if (s.contains("properties"))
            for (const auto& [k, sub] : s["properties"].items())
                if (v.contains(k))
                    if (auto e = schema_violation(v[k], sub, path + "." + k); !e.empty()) return e;
    }
    if (v.is_array() && s.contains("items")) {
        for (std::size_t i = 0; i < v.size(); ++i)
            if (auto e = schema_violation(v[i], s["items"], path + "[" + std::to_string(i) + "]"); !e.empty()) return e;
    }
    return {};
}

}  // namespace testing_support
