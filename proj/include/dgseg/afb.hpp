#pragma once

#include <vector>

#include "dgseg/ops.hpp"
#include "dgseg/rng.hpp"

namespace dgseg {

struct AfbConfig {
    double alpha = 0.1;              // Beta(alpha, alpha) for the per-channel keep probability
    double apply_probability = 0.5;  // chance an insertion point fires on a step
    double sigma_floor = 1e-3;       // lower clamp for sampled std
    std::vector<int> insertion_points{1, 2};  // encoder stages (1-based) followed by AFB

    void validate() const {
        if (!(alpha > 0.0)) throw std::invalid_argument("afb.alpha must be > 0");
        if (!(apply_probability >= 0.0 && apply_probability <= 1.0)) {
            throw std::invalid_argument("afb.apply_probability must be in [0,1]");
        }
        if (!(sigma_floor > 0.0)) throw std::invalid_argument("afb.sigma_floor must be > 0");
    }
};

/// The sampled constants of one AFB application (all B×C, untracked).
template <typename T>
struct AfbDraw {
    Tensor<T> keep;      // lambda in {0,1}: 1 keeps the original statistic
    Tensor<T> mu_aug;    // mu' ~ U(0,1)
    Tensor<T> sigma_aug; // sigma' ~ U(0,1), floored
};

template <typename T>
AfbDraw<T> sample_afb_draw(Rng& rng, std::size_t batch, std::size_t channels, const AfbConfig& cfg) {
    cfg.validate();
    const Shape bc{batch, channels};
    Tensor<T> mu_aug = sample_uniform<T>(rng, bc);
    Tensor<T> sigma_raw = sample_uniform<T>(rng, bc);
    std::vector<T> s(sigma_raw.data().begin(), sigma_raw.data().end());
    for (auto& v : s) v = std::max(v, static_cast<T>(cfg.sigma_floor));
    Tensor<T> b = sample_beta<T>(rng, cfg.alpha, bc);
    Tensor<T> keep = sample_bernoulli<T>(rng, b, bc);
    return {keep, mu_aug, Tensor<T>(bc, std::move(s))};
}

/// beta_mix = lambda*mu + (1-lambda)*mu', gamma_mix = lambda*sigma + (1-lambda)*sigma'.
/// Returned as (mu = beta_mix, sigma = gamma_mix).
template <typename T>
FeatureStats<T> mix_stats(const FeatureStats<T>& orig, const FeatureStats<T>& aug, const Tensor<T>& lambda) {
    const Shape& s = lambda.shape();
    if (lambda.rank() != 2 || orig.mu.shape() != s || orig.sigma.shape() != s || aug.mu.shape() != s ||
        aug.sigma.shape() != s) {
        throw ShapeError("mix_stats: all statistics must share the B×C shape " + shape_str(s));
    }
    const Tensor<T> rest = T(1) - lambda;
    return {lambda * orig.mu + rest * aug.mu, lambda * orig.sigma + rest * aug.sigma};
}

/// Re-styles f: gamma_mix * (f - mu) / sigma + beta_mix, with (mu, sigma) the
/// channel statistics of f and the blend given by `draw`.
template <typename T>
Tensor<T> blend_style(const Tensor<T>& f, const AfbDraw<T>& draw, T eps = T(1e-5)) {
    const FeatureStats<T> st = channel_stats(f, eps);
    const FeatureStats<T> mixed = mix_stats(st, FeatureStats<T>{draw.mu_aug, draw.sigma_aug}, draw.keep);
    const Shape b11{f.dim(0), f.dim(1), 1, 1};
    const Tensor<T> normalized = (f - reshape(st.mu, b11)) / reshape(st.sigma, b11);
    return normalized * reshape(mixed.sigma, b11) + reshape(mixed.mu, b11);
}

/// Training-time AFB. Outside training it is the identity.
template <typename T>
Tensor<T> apply_afb(const Tensor<T>& f, Rng& rng, const AfbConfig& cfg, bool training = true) {
    if (!training) return f;
    if (f.rank() != 4) throw ShapeError("apply_afb: expected B×C×H×W, got " + shape_str(f.shape()));
    return blend_style(f, sample_afb_draw<T>(rng, f.dim(0), f.dim(1), cfg));
}

/// MixStyle-style comparator: per-instance convex weight w ~ Beta(alpha, alpha)
/// between an instance's statistics and those of batch partner perm[b].
template <typename T>
Tensor<T> convex_mixstyle_reference(const Tensor<T>& f, const std::vector<std::size_t>& perm,
                                    const Tensor<T>& weight, T eps = T(1e-5)) {
    if (f.rank() != 4) throw ShapeError("convex_mixstyle_reference: expected B×C×H×W");
    const std::size_t b = f.dim(0), c = f.dim(1);
    if (b < 2) throw std::invalid_argument("convex_mixstyle_reference: batch of at least 2 required");
    if (perm.size() != b || weight.numel() != b) throw ShapeError("convex_mixstyle_reference: size mismatch");
    const FeatureStats<T> st = channel_stats(f, eps);
    std::vector<Tensor<T>> pm, ps;
    std::vector<T> lam(b * c);
    for (std::size_t i = 0; i < b; ++i) {
        if (perm[i] >= b) throw ShapeError("convex_mixstyle_reference: partner out of range");
        pm.push_back(slice(st.mu, 0, perm[i], 1));
        ps.push_back(slice(st.sigma, 0, perm[i], 1));
        std::fill_n(lam.begin() + std::ptrdiff_t(i * c), c, weight.data()[i]);
    }
    const Shape bc{b, c};
    const FeatureStats<T> partner{concat(pm, 0), concat(ps, 0)};
    const FeatureStats<T> mixed = mix_stats(st, partner, Tensor<T>(bc, lam));
    const Shape b11{b, c, 1, 1};
    const Tensor<T> normalized = (f - reshape(st.mu, b11)) / reshape(st.sigma, b11);
    return normalized * reshape(mixed.sigma, b11) + reshape(mixed.mu, b11);
}

template <typename T>
Tensor<T> convex_mixstyle_reference(const Tensor<T>& f, Rng& rng, double alpha = 0.1) {
    if (f.rank() != 4) throw ShapeError("convex_mixstyle_reference: expected B×C×H×W");
    const std::size_t b = f.dim(0);
    if (b < 2) throw std::invalid_argument("convex_mixstyle_reference: batch of at least 2 required");
    std::vector<std::size_t> perm(b);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    for (std::size_t i = b - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
    return convex_mixstyle_reference(f, perm, sample_beta<T>(rng, alpha, Shape{b}));
}

}  // namespace dgseg
