#include <gtest/gtest.h>

#include <cmath>

#include "dgseg/losses.hpp"
#include "dgseg/rng.hpp"

using namespace dgseg;

namespace {

/// Reference soft Dice loss and CE computed pixel by pixel.
struct RefLoss {
    double dice, ce;
};

RefLoss reference(const Tensor<double>& logits, const MaskTensor& m, double smooth = 1e-5) {
    const std::size_t b = logits.dim(0), k = logits.dim(1), n = m.plane();
    double dice_sum = 0, ce_sum = 0;
    for (std::size_t i = 0; i < b; ++i) {
        std::vector<double> inter(k), ps(k), gs(k);
        for (std::size_t px = 0; px < n; ++px) {
            double mx = -1e300, z = 0;
            for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, logits.data()[(i * k + c) * n + px]);
            for (std::size_t c = 0; c < k; ++c) z += std::exp(logits.data()[(i * k + c) * n + px] - mx);
            const int label = m.labels[i * n + px];
            for (std::size_t c = 0; c < k; ++c) {
                const double p = std::exp(logits.data()[(i * k + c) * n + px] - mx) / z;
                const double g = int(c) == label ? 1.0 : 0.0;
                inter[c] += p * g;
                ps[c] += p;
                gs[c] += g;
            }
            ce_sum -= logits.data()[(i * k + std::size_t(label)) * n + px] - mx - std::log(z);
        }
        double d = 0;
        for (std::size_t c = 0; c < k; ++c) d += (2 * inter[c] + smooth) / (ps[c] + gs[c] + smooth);
        dice_sum += 1.0 - d / double(k);
    }
    return {dice_sum / double(b), ce_sum / double(b * n)};
}

MaskTensor random_mask(Rng& r, std::size_t b, std::size_t h, std::size_t w, int k) {
    MaskTensor m{b, h, w, std::vector<int>(b * h * w)};
    for (auto& v : m.labels) v = int(r.below(std::uint64_t(k)));
    return m;
}

Tensor<double> saturated(const MaskTensor& m, std::size_t k, double gap) {
    Tensor<double> t = one_hot<double>(m, k) * gap;
    return t;
}

}  // namespace

TEST(DiceLoss, MatchesReference) {
    Rng r(61);
    for (int t = 0; t < 20; ++t) {
        const auto m = random_mask(r, 2, 4, 5, 3);
        const auto logits = sample_normal<double>(r, {2, 3, 4, 5}, 2.0);
        const auto ref = reference(logits, m);
        EXPECT_NEAR(dice_loss(logits, m).item(), ref.dice, 1e-12);
        EXPECT_NEAR(ce_loss(logits, m).item(), ref.ce, 1e-12);
    }
}

TEST(DiceLoss, UniformLogitsOnTwoByTwo) {
    // Labels {0, 0, 0, 1}, p = 0.5 everywhere: class 0 overlap 2*1.5/(2+3),
    // class 1 overlap 2*0.5/(2+1).
    const MaskTensor m{1, 2, 2, {0, 0, 0, 1}};
    const auto loss = dice_loss(Tensor<double>::zeros({1, 2, 2, 2}), m, 0.0).item();
    EXPECT_NEAR(loss, 1.0 - 0.5 * (3.0 / 5.0 + 1.0 / 3.0), 1e-12);
}

TEST(DiceLoss, SaturatedPredictionIsNearZero) {
    Rng r(62);
    const auto m = random_mask(r, 2, 6, 6, 3);
    EXPECT_LT(dice_loss(saturated(m, 3, 30.0), m).item(), 0.01);
    MaskTensor bad = m;
    bad.labels[3] = 3;
    EXPECT_THROW(dice_loss(saturated(m, 3, 1.0), bad), std::invalid_argument);
    EXPECT_THROW(dice_loss(Tensor<double>::zeros({2, 3, 5, 6}), m), ShapeError);
}

TEST(CeLoss, SaturatedAndUniform) {
    Rng r(63);
    const auto m = random_mask(r, 1, 4, 4, 2);
    EXPECT_LT(ce_loss(saturated(m, 2, 20.0), m).item(), 1e-6);
    EXPECT_NEAR(ce_loss(Tensor<double>::zeros({1, 2, 4, 4}), m).item(), std::log(2.0), 1e-14);
}

TEST(ConsistencyLoss, OppositeCertainPredictionsGiveOne) {
    const MaskTensor a{1, 1, 2, {0, 0}}, b{1, 1, 2, {1, 1}};
    const auto la = saturated(a, 2, 60.0), lb = saturated(b, 2, 60.0);
    EXPECT_NEAR(consistency_loss(la, lb).item(), 1.0, 1e-12);
    EXPECT_EQ(consistency_loss(la, la).item(), 0.0);
    Rng r(64);
    const auto x = sample_normal<double>(r, {2, 3, 3, 3}), y = sample_normal<double>(r, {2, 3, 3, 3});
    EXPECT_EQ(consistency_loss(x, y).item(), consistency_loss(y, x).item());
    EXPECT_THROW(consistency_loss(x, sample_normal<double>(r, {2, 3, 3, 2})), ShapeError);
}

TEST(TotalLoss, AveragesOverDomains) {
    const auto s = [](double v) { return Tensor<double>(Shape{}, {v}); };
    EXPECT_EQ(total_loss<double>({{s(0), s(0)}}).item(), 0.0);
    EXPECT_EQ(total_loss<double>({{s(1), s(0)}, {s(0), s(1)}}).item(), 1.0);
    EXPECT_THROW(total_loss<double>({}), std::invalid_argument);
    Rng r(65);
    for (int t = 0; t < 20; ++t) {
        std::vector<DomainLoss<double>> v;
        std::vector<DomainLoss<double>> scaled;
        double hand = 0;
        const std::size_t d = 1 + r.below(4);
        for (std::size_t i = 0; i < d; ++i) {
            const double a = r.uniform(), b = r.uniform();
            v.push_back({s(a), s(b)});
            scaled.push_back({s(3 * a), s(3 * b)});
            hand += a + b;
        }
        EXPECT_NEAR(total_loss(v).item(), hand / double(d), 1e-14);
        EXPECT_NEAR(total_loss(scaled).item(), 3 * total_loss(v).item(), 1e-13);
    }
}

TEST(ComputeLosses, WeightsEachDomainEqually) {
    // Three instances: two from domain 4 and one from domain 9. The lone
    // instance must weigh as much as the pair together.
    Rng r(66);
    const auto m = random_mask(r, 3, 4, 4, 2);
    const auto lo = sample_normal<double>(r, {3, 2, 4, 4}), lg = sample_normal<double>(r, {3, 2, 4, 4});
    const auto br = compute_losses(lo, lg, m, {4, 9, 4});
    const auto seg = [&](const Tensor<double>& l, std::size_t i) {
        const MaskTensor one{1, 4, 4, std::vector<int>(m.image(i).begin(), m.image(i).end())};
        const auto li = slice(l, 0, i, 1);
        return dice_loss(li, one).item() + ce_loss(li, one).item();
    };
    const auto cons = [&](std::size_t i) { return consistency_loss(slice(lo, 0, i, 1), slice(lg, 0, i, 1)).item(); };
    const auto inst = [&](std::size_t i) { return 0.5 * (seg(lo, i) + seg(lg, i)) + cons(i); };
    const double want = 0.5 * (0.5 * (inst(0) + inst(2)) + inst(1));
    EXPECT_NEAR(br.total.item(), want, 1e-12);
    EXPECT_NEAR(br.seg_orig.item(), (seg(lo, 0) + seg(lo, 1) + seg(lo, 2)) / 3, 1e-12);
    EXPECT_NEAR(br.consist.item(), (cons(0) + cons(1) + cons(2)) / 3, 1e-12);
    EXPECT_GE(br.consist.item(), 0.0);
    EXPECT_THROW(compute_losses(lo, lg, m, {0, 1}), ShapeError);
}

TEST(ComputeLosses, SingleBranchHasNoConsistencyTerm) {
    Rng r(67);
    const auto m = random_mask(r, 2, 4, 4, 3);
    const auto lo = sample_normal<double>(r, {2, 3, 4, 4});
    const auto br = compute_losses(lo, lo, m, {0, 0});
    EXPECT_EQ(br.consist.item(), 0.0);
    const auto ref = reference(lo, m);
    EXPECT_NEAR(br.total.item(), ref.dice + ref.ce, 1e-12);
}
