#include <gtest/gtest.h>

#include "dgseg/metrics.hpp"
#include "dgseg/rng.hpp"
#include "oracles.hpp"

using namespace dgseg;

namespace {

std::vector<int> single_pixel(int h, int w, int y, int x) {
    std::vector<int> m(std::size_t(h * w), 0);
    m[std::size_t(y * w + x)] = 1;
    return m;
}

std::vector<bool> to_bool(const std::vector<int>& m) {
    std::vector<bool> b(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) b[i] = m[i] == 1;
    return b;
}

}  // namespace

TEST(Metrics, MatchBruteForceOnRandomMasks) {
    double worst_dice = 0, worst_asd = 0;
    int defined = 0;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        Rng r = Rng::substream(seed, {}, "masks");
        // Blobby masks: random rectangles, plus sparse noise.
        std::vector<int> p(256, 0), g(256, 0);
        for (auto* m : {&p, &g}) {
            for (int k = 0; k < 3; ++k) {
                const int y0 = int(r.below(14)), x0 = int(r.below(14));
                const int hh = 1 + int(r.below(8)), ww = 1 + int(r.below(8));
                for (int y = y0; y < std::min(16, y0 + hh); ++y)
                    for (int x = x0; x < std::min(16, x0 + ww); ++x) (*m)[std::size_t(y * 16 + x)] = 1;
            }
            for (auto& v : *m)
                if (r.uniform() < 0.05) v = 1 - v;
        }
        for (int k = 0; k < 2; ++k)
            worst_dice = std::max(worst_dice, std::abs(dice_coefficient(p, g, k) - oracle::dice(p, g, k)));
        const auto got = average_surface_distance(p, g, 1, 16, 16);
        const auto want = oracle::asd(to_bool(p), to_bool(g), 16, 16);
        ASSERT_EQ(got.has_value(), want.has_value());
        if (got) {
            ++defined;
            worst_asd = std::max(worst_asd, std::abs(*got - *want));
        }
    }
    EXPECT_LT(worst_dice, 1e-9);
    EXPECT_LT(worst_asd, 1e-9);
    EXPECT_GE(defined, 45);
}

TEST(Metrics, BoundaryMatchesOracle) {
    Rng r(71);
    std::vector<bool> m(12 * 10);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = r.uniform() < 0.6;
    const auto b = mask_boundary(m, 12, 10);
    std::vector<bool> want(m.size(), false);
    for (auto [y, x] : oracle::boundary(m, 12, 10)) want[std::size_t(y * 10 + x)] = true;
    EXPECT_EQ(b, want);
}

TEST(Metrics, HandCases) {
    std::vector<int> square(64, 0);
    for (int y = 2; y < 6; ++y)
        for (int x = 2; x < 6; ++x) square[std::size_t(y * 8 + x)] = 1;
    EXPECT_EQ(dice_coefficient(square, square, 1), 1.0);
    EXPECT_EQ(*average_surface_distance(square, square, 1, 8, 8), 0.0);

    const auto a = single_pixel(8, 8, 1, 1), b = single_pixel(8, 8, 6, 6);
    EXPECT_EQ(dice_coefficient(a, b, 1), 0.0);

    // Single pixels three apart along one axis, then along the other.
    EXPECT_EQ(*average_surface_distance(single_pixel(8, 8, 4, 1), single_pixel(8, 8, 4, 4), 1, 8, 8), 3.0);
    EXPECT_EQ(*average_surface_distance(single_pixel(8, 8, 1, 3), single_pixel(8, 8, 4, 3), 1, 8, 8), 3.0);
    // A (3, 4) displacement is 5 pixels away.
    EXPECT_EQ(*average_surface_distance(single_pixel(8, 8, 0, 0), single_pixel(8, 8, 3, 4), 1, 8, 8), 5.0);

    // |P| = |G| = 4 with two shared pixels.
    std::vector<int> p(16, 0), g(16, 0);
    for (int i : {0, 1, 2, 3}) p[std::size_t(i)] = 1;
    for (int i : {2, 3, 4, 5}) g[std::size_t(i)] = 1;
    EXPECT_EQ(dice_coefficient(p, g, 1), 0.5);
}

TEST(Metrics, EmptyMaskConventions) {
    const std::vector<int> empty(16, 0), one = single_pixel(4, 4, 1, 1);
    EXPECT_EQ(dice_coefficient(empty, empty, 1), 1.0);
    EXPECT_EQ(dice_coefficient(empty, one, 1), 0.0);
    EXPECT_FALSE(average_surface_distance(empty, one, 1, 4, 4).has_value());
    EXPECT_FALSE(average_surface_distance(one, empty, 1, 4, 4).has_value());
    EXPECT_FALSE(average_surface_distance(empty, empty, 1, 4, 4).has_value());
    EXPECT_THROW(dice_coefficient(empty, std::vector<int>(15), 1), std::invalid_argument);
}

TEST(Metrics, FullImageMaskHasBorderBoundary) {
    // Out-of-image counts as background, so a full mask has its border as boundary.
    const std::vector<int> full(25, 1);
    std::vector<int> inner(25, 0);
    for (int y = 1; y < 4; ++y)
        for (int x = 1; x < 4; ++x) inner[std::size_t(y * 5 + x)] = 1;
    const auto got = average_surface_distance(full, inner, 1, 5, 5);
    const auto want = oracle::asd(to_bool(full), to_bool(inner), 5, 5);
    ASSERT_TRUE(got && want);
    EXPECT_NEAR(*got, *want, 1e-12);
    EXPECT_GT(*got, 0.0);
}
