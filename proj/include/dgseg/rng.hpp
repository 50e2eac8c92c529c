#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <random>
#include <string_view>

#include "dgseg/tensor.hpp"

namespace dgseg {

namespace detail {

// SplitMix64 finalizer; used to hash substream keys into engine seeds.
constexpr std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

constexpr std::uint64_t hash_tag(std::string_view tag) {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (char c : tag) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace detail

/// Seeded random stream. The bit generator is std::mt19937_64, whose output
/// sequence is fixed by the standard; all real-valued conversions below are
/// written out here so draws do not depend on the standard library vendor.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(detail::mix64(seed)) {}

    /// Independent stream keyed by (seed, components..., tag). Pure function
    /// of its arguments, so adding a new purpose never shifts another stream.
    static Rng substream(std::uint64_t seed, std::initializer_list<std::uint64_t> keys,
                         std::string_view tag) {
        std::uint64_t h = detail::mix64(seed);
        for (auto k : keys) h = detail::mix64(h ^ detail::mix64(k + 0x632be59bd9b4e019ULL));
        h = detail::mix64(h ^ detail::hash_tag(tag));
        return Rng(h);
    }

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform on (0, 1].
    double uniform_open_low() { return (static_cast<double>(engine_() >> 11) + 1.0) * 0x1.0p-53; }

    /// Uniform integer in [0, n) by rejection (no modulo bias).
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                    std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t v;
        do {
            v = engine_();
        } while (v >= limit);
        return v % n;
    }

    /// Standard normal via Box-Muller (one value per call, no caching).
    double normal() {
        const double u1 = uniform_open_low();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    /// log of a Gamma(shape, 1) draw. Marsaglia-Tsang for shape >= 1, with
    /// the U^(1/shape) boost for shape < 1 kept in log space so that small
    /// shapes (0.1) do not underflow.
    double log_gamma_draw(double shape) {
        if (!(shape > 0.0)) throw std::invalid_argument("log_gamma_draw: shape must be > 0");
        if (shape < 1.0) return log_gamma_draw(shape + 1.0) + std::log(uniform_open_low()) / shape;
        const double d = shape - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        while (true) {
            double x, v;
            do {
                x = normal();
                v = 1.0 + c * x;
            } while (v <= 0.0);
            v = v * v * v;
            const double u = uniform_open_low();
            if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return std::log(d * v);
        }
    }

    /// Beta(a, b) as X / (X + Y) with X ~ Gamma(a), Y ~ Gamma(b).
    double beta(double a, double b) {
        const double lx = log_gamma_draw(a);
        const double ly = log_gamma_draw(b);
        return 1.0 / (1.0 + std::exp(ly - lx));
    }

private:
    std::mt19937_64 engine_;
};

template <typename T>
Tensor<T> sample_uniform(Rng& rng, const Shape& shape) {
    if (shape.empty()) throw ShapeError("sample_uniform: empty shape");
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) {
        x = static_cast<T>(rng.uniform());
        // Rounding to float can land on 1.0.
        if (x >= T(1)) x = std::nextafter(T(1), T(0));
    }
    return Tensor<T>(shape, std::move(v));
}

template <typename T>
Tensor<T> sample_normal(Rng& rng, const Shape& shape, T stddev = T(1)) {
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.normal()) * stddev;
    return Tensor<T>(shape, std::move(v));
}

/// I.i.d. Beta(alpha, alpha), clamped into the open interval (0, 1) at T precision.
template <typename T>
Tensor<T> sample_beta(Rng& rng, double alpha, const Shape& shape) {
    if (!(alpha > 0.0)) throw std::invalid_argument("sample_beta: alpha must be > 0");
    if (shape.empty()) throw ShapeError("sample_beta: empty shape");
    const T lo = std::numeric_limits<T>::min();
    const T hi = std::nextafter(T(1), T(0));
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = std::clamp(static_cast<T>(rng.beta(alpha, alpha)), lo, hi);
    return Tensor<T>(shape, std::move(v));
}

/// Entries are 1 with probability p[i], else 0.
template <typename T>
Tensor<T> sample_bernoulli(Rng& rng, const Tensor<T>& p, const Shape& shape) {
    if (p.shape() != shape) {
        throw ShapeError("sample_bernoulli: probability shape " + shape_str(p.shape()) + " vs " +
                         shape_str(shape));
    }
    std::vector<T> v(p.numel());
    const auto pd = p.data();
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!(pd[i] >= T(0) && pd[i] <= T(1))) {
            throw std::invalid_argument("sample_bernoulli: probability outside [0,1]");
        }
        v[i] = rng.uniform() < static_cast<double>(pd[i]) ? T(1) : T(0);
    }
    return Tensor<T>(shape, std::move(v));
}

}  // namespace dgseg
