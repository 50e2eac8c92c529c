#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "dgseg/afb.hpp"

using namespace dgseg;

namespace {

/// Plain population mean and std of every (b, c) plane.
struct PlaneStats {
    std::vector<double> mu, sd;
};

PlaneStats plane_stats(const Tensor<double>& f) {
    const std::size_t bc = f.dim(0) * f.dim(1), hw = f.dim(2) * f.dim(3);
    PlaneStats s{std::vector<double>(bc), std::vector<double>(bc)};
    for (std::size_t p = 0; p < bc; ++p) {
        double m = 0, v = 0;
        for (std::size_t i = 0; i < hw; ++i) m += f.data()[p * hw + i];
        m /= double(hw);
        for (std::size_t i = 0; i < hw; ++i) v += std::pow(f.data()[p * hw + i] - m, 2);
        s.mu[p] = m;
        s.sd[p] = std::sqrt(v / double(hw));
    }
    return s;
}

Tensor<double> random_features(Rng& r, Shape s) {
    // Per-plane offset and scale so the input statistics are far from (0, 1).
    Tensor<double> f = sample_normal<double>(r, s);
    auto d = f.mutable_data();
    const std::size_t hw = s[2] * s[3];
    for (std::size_t p = 0; p < s[0] * s[1]; ++p) {
        const double scale = 0.5 + 2.0 * r.uniform(), shift = 4.0 * r.uniform() - 2.0;
        for (std::size_t i = 0; i < hw; ++i) d[p * hw + i] = d[p * hw + i] * scale + shift;
    }
    return f;
}

AfbDraw<double> forced_draw(Rng& r, Shape bc, double keep) {
    AfbDraw<double> d;
    d.keep = Tensor<double>::full(bc, keep);
    d.mu_aug = sample_uniform<double>(r, bc);
    std::vector<double> s(shape_numel(bc));
    for (auto& v : s) v = std::max(r.uniform(), 0.05);
    d.sigma_aug = Tensor<double>(bc, s);
    return d;
}

}  // namespace

TEST(MixStats, EndpointsAndMidpoint) {
    const Shape s{1, 2};
    const FeatureStats<double> o{Tensor<double>(s, {0.2, 1.0}), Tensor<double>(s, {0.3, 0.4})};
    const FeatureStats<double> a{Tensor<double>(s, {0.8, -1.0}), Tensor<double>(s, {0.9, 0.6})};
    const auto one = mix_stats(o, a, Tensor<double>::full(s, 1.0));
    const auto zero = mix_stats(o, a, Tensor<double>::full(s, 0.0));
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_EQ(one.mu.data()[i], o.mu.data()[i]);
        EXPECT_EQ(one.sigma.data()[i], o.sigma.data()[i]);
        EXPECT_EQ(zero.mu.data()[i], a.mu.data()[i]);
        EXPECT_EQ(zero.sigma.data()[i], a.sigma.data()[i]);
    }
    const auto half = mix_stats(o, a, Tensor<double>::full(s, 0.5));
    EXPECT_NEAR(half.mu.data()[0], 0.5, 1e-15);
    EXPECT_THROW(mix_stats(o, a, Tensor<double>::full({2, 1}, 0.5)), ShapeError);
}

TEST(Afb, KeepAllIsIdentity) {
    Rng r(31);
    double worst = 0;
    for (int t = 0; t < 100; ++t) {
        const Shape s{2, 3, 6, 5};
        const auto f = random_features(r, s);
        const auto y = blend_style(f, forced_draw(r, {2, 3}, 1.0));
        for (std::size_t i = 0; i < f.numel(); ++i) worst = std::max(worst, std::abs(y.data()[i] - f.data()[i]));
    }
    EXPECT_LT(worst, 1e-6);
}

TEST(Afb, KeepNoneTransplantsStatistics) {
    Rng r(32);
    double worst = 0;
    for (int t = 0; t < 100; ++t) {
        const Shape s{2, 3, 6, 5};
        const auto f = random_features(r, s);
        const auto draw = forced_draw(r, {2, 3}, 0.0);
        const auto in = plane_stats(f), out = plane_stats(blend_style(f, draw));
        for (std::size_t p = 0; p < 6; ++p) {
            // Normalization by sqrt(var + 1e-5) shrinks the transplanted std slightly.
            const double v = in.sd[p] * in.sd[p];
            worst = std::max(worst, std::abs(out.mu[p] - draw.mu_aug.data()[p]));
            worst = std::max(worst, std::abs(out.sd[p] - draw.sigma_aug.data()[p] * std::sqrt(v / (v + 1e-5))));
        }
    }
    EXPECT_LT(worst, 1e-4);
}

TEST(Afb, HandTransplant) {
    Rng r(33);
    const auto f = random_features(r, {1, 1, 8, 8});
    AfbDraw<double> d{Tensor<double>::full({1, 1}, 0.0), Tensor<double>::full({1, 1}, 0.7),
                      Tensor<double>::full({1, 1}, 0.2)};
    const auto st = plane_stats(blend_style(f, d));
    EXPECT_NEAR(st.mu[0], 0.7, 1e-4);
    EXPECT_NEAR(st.sd[0], 0.2, 1e-4);
}

TEST(Afb, StyleOnlyTransformPreservesPattern) {
    Rng r(34);
    AfbConfig cfg;
    for (int t = 0; t < 20; ++t) {
        const Shape s{3, 4, 5, 5};
        const auto f = random_features(r, s);
        const auto draw = sample_afb_draw<double>(r, 3, 4, cfg);
        const auto y = blend_style(f, draw);
        const auto in = plane_stats(f), out = plane_stats(y);
        const FeatureStats<double> mixed =
            mix_stats(channel_stats(f), FeatureStats<double>{draw.mu_aug, draw.sigma_aug}, draw.keep);
        for (std::size_t p = 0; p < 12; ++p) {
            EXPECT_NEAR(out.mu[p], mixed.mu.data()[p], 1e-4);
            EXPECT_NEAR(out.sd[p], mixed.sigma.data()[p], 1e-4);
            for (std::size_t i = 0; i < 25; ++i) {
                const double a = (f.data()[p * 25 + i] - in.mu[p]) / in.sd[p];
                const double b = (y.data()[p * 25 + i] - out.mu[p]) / out.sd[p];
                EXPECT_NEAR(a, b, 1e-5);
            }
        }
    }
}

TEST(Afb, DrawRespectsConfig) {
    Rng r(35);
    AfbConfig cfg;
    cfg.sigma_floor = 0.25;
    const auto d = sample_afb_draw<double>(r, 64, 16, cfg);
    for (double v : d.sigma_aug.data()) EXPECT_GE(v, 0.25);
    for (double v : d.mu_aug.data()) EXPECT_TRUE(v >= 0.0 && v < 1.0);
    for (double v : d.keep.data()) EXPECT_TRUE(v == 0.0 || v == 1.0);
    EXPECT_FALSE(d.keep.requires_grad());
    cfg.alpha = 0.0;
    EXPECT_THROW(sample_afb_draw<double>(r, 2, 2, cfg), std::invalid_argument);
    cfg = AfbConfig{};
    cfg.apply_probability = 1.5;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Afb, EvalModeIsIdentity) {
    Rng r(36);
    const auto f = random_features(r, {2, 2, 4, 4});
    const auto y = apply_afb(f, r, AfbConfig{}, false);
    EXPECT_TRUE(y.same_storage(f));
    EXPECT_THROW(apply_afb(Tensor<double>::zeros({2, 2}), r, AfbConfig{}), ShapeError);
}

TEST(Afb, ReachesOutsideTheSourceEnvelope) {
    // Source statistics of a batch of features with stats well inside (0, 1);
    // AFB draws in U(0, 1) must land both inside and outside the envelope,
    // while the convex comparator never leaves it.
    Rng r(37);
    const std::size_t b = 8, c = 4;
    Tensor<double> f = sample_normal<double>(r, {b, c, 6, 6});
    {
        auto d = f.mutable_data();
        for (std::size_t p = 0; p < b * c; ++p)
            for (std::size_t i = 0; i < 36; ++i) d[p * 36 + i] = 0.4 + 0.1 * r.uniform() + 0.2 * d[p * 36 + i];
    }
    const auto src = channel_stats(f);
    std::vector<double> lo_mu(c, 1e9), hi_mu(c, -1e9), lo_sd(c, 1e9), hi_sd(c, -1e9);
    for (std::size_t n = 0; n < b; ++n)
        for (std::size_t k = 0; k < c; ++k) {
            lo_mu[k] = std::min(lo_mu[k], src.mu.at({n, k}));
            hi_mu[k] = std::max(hi_mu[k], src.mu.at({n, k}));
            lo_sd[k] = std::min(lo_sd[k], src.sigma.at({n, k}));
            hi_sd[k] = std::max(hi_sd[k], src.sigma.at({n, k}));
        }
    const auto outside = [&](const FeatureStats<double>& m, std::size_t n, std::size_t k) {
        const double mu = m.mu.at({n, k}), sd = m.sigma.at({n, k});
        return mu < lo_mu[k] || mu > hi_mu[k] || sd < lo_sd[k] || sd > hi_sd[k];
    };
    std::size_t afb_out = 0, afb_in = 0, mix_out = 0, total = 0;
    for (int t = 0; t < 200; ++t) {
        const auto draw = sample_afb_draw<double>(r, b, c, AfbConfig{});
        const auto mixed = mix_stats(src, FeatureStats<double>{draw.mu_aug, draw.sigma_aug}, draw.keep);
        // The convex comparator's statistics, recomputed from its output.
        const auto ref = channel_stats(convex_mixstyle_reference(f, r, 0.1));
        for (std::size_t n = 0; n < b; ++n)
            for (std::size_t k = 0; k < c; ++k) {
                ++total;
                outside(mixed, n, k) ? ++afb_out : ++afb_in;
                // Tolerance for the round trip through normalization.
                const double mu = ref.mu.at({n, k}), sd = ref.sigma.at({n, k});
                mix_out += mu < lo_mu[k] - 1e-9 || mu > hi_mu[k] + 1e-9 || sd < lo_sd[k] - 1e-6 ||
                           sd > hi_sd[k] + 1e-6;
            }
    }
    EXPECT_GT(double(afb_out) / double(total), 0.05);
    EXPECT_GT(afb_in, 0u);
    EXPECT_EQ(mix_out, 0u);
}

TEST(MixStyle, SelfPartnerIsIdentity) {
    Rng r(38);
    const auto f = random_features(r, {3, 2, 4, 4});
    const auto y = convex_mixstyle_reference(f, {0, 1, 2}, sample_beta<double>(r, 0.1, {3}));
    for (std::size_t i = 0; i < f.numel(); ++i) EXPECT_NEAR(y.data()[i], f.data()[i], 1e-9);
}

TEST(MixStyle, MixedMeanBetweenTheTwoSources) {
    Rng r(39);
    const auto f = random_features(r, {4, 3, 5, 5});
    const std::vector<std::size_t> perm{2, 3, 0, 1};
    const auto w = sample_beta<double>(r, 0.1, {4});
    const auto st = channel_stats(f);
    const auto out = channel_stats(convex_mixstyle_reference(f, perm, w));
    for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t k = 0; k < 3; ++k) {
            const double a = st.mu.at({n, k}), b = st.mu.at({perm[n], k});
            const double m = out.mu.at({n, k});
            EXPECT_GE(m, std::min(a, b) - 1e-9);
            EXPECT_LE(m, std::max(a, b) + 1e-9);
            EXPECT_NEAR(m, w.data()[n] * a + (1 - w.data()[n]) * b, 1e-9);
        }
}

TEST(MixStyle, RejectsSingletonBatch) {
    Rng r(40);
    EXPECT_THROW(convex_mixstyle_reference(Tensor<double>::full({1, 2, 3, 3}, 1.0), r), std::invalid_argument);
}
