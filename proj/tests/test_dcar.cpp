#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "dgseg/dcar.hpp"
#include "oracles.hpp"

using namespace dgseg;

TEST(ChannelAttention, MatchesScalarOracle) {
    double worst = 0;
    for (std::size_t hw : {1, 2, 4})
        for (std::size_t c : {2, 4})
            for (std::size_t heads : {1, 2})
                for (std::uint64_t seed = 0; seed < 10; ++seed) {
                    Rng r = Rng::substream(seed, {hw, c, heads}, "attn");
                    const auto p = AttentionParams<double>::init(c, heads, r);
                    const auto xq = sample_normal<double>(r, {hw, c});
                    const auto xkv = sample_normal<double>(r, {hw, c});
                    const auto got = channel_attention_detailed(xq, xkv, p);
                    const auto want = oracle::channel_attention(xq, xkv, p);
                    for (std::size_t t = 0; t < hw; ++t)
                        for (std::size_t o = 0; o < c; ++o)
                            worst = std::max(worst, std::abs(got.output.at({t, o}) - want.out[t][o]));
                    ASSERT_EQ(got.attention.size(), heads);
                    for (std::size_t h = 0; h < heads; ++h) {
                        const auto& a = got.attention[h];
                        for (std::size_t i = 0; i < a.dim(0); ++i) {
                            double s = 0;
                            for (std::size_t j = 0; j < a.dim(1); ++j) {
                                s += a.at({i, j});
                                worst = std::max(worst, std::abs(a.at({i, j}) - want.attention[h][i][j]));
                            }
                            EXPECT_NEAR(s, 1.0, 1e-6);
                        }
                    }
                }
    EXPECT_LT(worst, 1e-8);
}

TEST(ChannelAttention, HandValuesSingleToken) {
    // HW = 1, C = 1, one head: S is 2×2 rank one, psi normalizes each row.
    AttentionParams<double> p{Tensor<double>(Shape{1, 2}, {1, 1}), Tensor<double>(Shape{1, 2}, {1, -1}),
                              Tensor<double>(Shape{1, 2}, {2, 3}), Tensor<double>(Shape{2, 1}, {1, 1}), 1};
    const Tensor<double> x(Shape{1, 1}, {0.5});
    const auto got = channel_cross_attention(x, x, p);
    const auto want = oracle::channel_attention(x, x, p);
    EXPECT_NEAR(got.at({0, 0}), want.out[0][0], 1e-10);
}

TEST(ChannelAttention, SpatialPermutationEquivariance) {
    Rng r(51);
    for (int t = 0; t < 10; ++t) {
        const std::size_t hw = 6, c = 4;
        const auto p = AttentionParams<double>::init(c, 2, r);
        const auto xq = sample_normal<double>(r, {hw, c});
        const auto xkv = sample_normal<double>(r, {hw, c});
        std::vector<std::size_t> perm(hw);
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        for (std::size_t i = hw - 1; i > 0; --i) std::swap(perm[i], perm[r.below(i + 1)]);
        const auto permute_rows = [&](const Tensor<double>& x) {
            std::vector<Tensor<double>> rows;
            for (std::size_t i : perm) rows.push_back(slice(x, 0, i, 1));
            return concat(rows, 0);
        };
        const auto base = channel_cross_attention(xq, xkv, p);
        const auto moved = channel_cross_attention(permute_rows(xq), permute_rows(xkv), p);
        for (std::size_t i = 0; i < hw; ++i)
            for (std::size_t o = 0; o < c; ++o) EXPECT_NEAR(moved.at({i, o}), base.at({perm[i], o}), 1e-10);
    }
}

TEST(ChannelAttention, SelfIsCrossWithSameSource) {
    Rng r(52);
    const auto p = AttentionParams<double>::init(4, 4, r);
    const auto x = sample_normal<double>(r, {5, 4});
    const auto a = channel_self_attention(x, p), b = channel_cross_attention(x, x, p);
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a.data()[i], b.data()[i]);
}

TEST(ChannelAttention, ShapeErrors) {
    Rng r(53);
    const auto p = AttentionParams<double>::init(4, 2, r);
    EXPECT_THROW(channel_cross_attention(sample_normal<double>(r, {3, 4}), sample_normal<double>(r, {2, 4}), p),
                 ShapeError);
    EXPECT_THROW(channel_self_attention(sample_normal<double>(r, {3, 3}), p), ShapeError);
    auto bad = p;
    bad.heads = 3;
    EXPECT_THROW(channel_self_attention(sample_normal<double>(r, {3, 4}), bad), ShapeError);
}

TEST(DcarBlock, SymmetricInputsWithSharedWeightsAgree) {
    Rng r(54);
    DcarConfig cfg;
    cfg.share_weights = true;
    const auto p = DcarParams<double>::init(4, cfg, r);
    const auto f = sample_normal<double>(r, {6, 4});
    const auto [o, g] = dcar_block(BottleneckPair<double>{f, f}, p);
    for (std::size_t i = 0; i < o.numel(); ++i) EXPECT_EQ(o.data()[i], g.data()[i]);
    EXPECT_EQ(p.named(cfg).size(), 8u);
}

TEST(DcarBlock, ZeroWeightsGiveZeroOutput) {
    Rng r(55);
    DcarConfig cfg;
    auto p = DcarParams<double>::init(4, cfg, r);
    for (auto* a : {&p.cross_orig, &p.cross_gen, &p.self_orig, &p.self_gen}) a->w_out = Tensor<double>::zeros({8, 4});
    const auto [o, g] = dcar_block(BottleneckPair<double>{sample_normal<double>(r, {3, 4}),
                                                           sample_normal<double>(r, {3, 4})},
                                   p);
    for (double v : o.data()) EXPECT_EQ(v, 0.0);
    for (double v : g.data()) EXPECT_EQ(v, 0.0);
}

TEST(DcarBlock, OriginalBranchDependsOnGeneratedFeatures) {
    Rng r(56);
    const auto p = DcarParams<double>::init(4, DcarConfig{}, r);
    const auto f = sample_normal<double>(r, {4, 4});
    Tensor<double> fa = sample_normal<double>(r, {4, 4});
    fa.set_requires_grad(true);
    Tape<double> tape;
    {
        TapeScope<double> s(tape);
        tape.backward(sum(dcar_block(BottleneckPair<double>{f, fa}, p).first));
    }
    double norm = 0;
    for (double g : fa.grad()) norm += std::abs(g);
    EXPECT_GT(norm, 1e-8);
}

TEST(DcarBlock, SumFusionDefinition) {
    Rng r(57);
    const auto p = DcarParams<double>::init(4, DcarConfig{}, r);
    const auto f = sample_normal<double>(r, {5, 4}), fa = sample_normal<double>(r, {5, 4});
    const auto [o, g] = dcar_block(BottleneckPair<double>{f, fa}, p);
    const auto wo = channel_cross_attention(f, fa, p.cross_orig) + channel_self_attention(f, p.self_orig);
    const auto wg = channel_cross_attention(fa, f, p.cross_gen) + channel_self_attention(fa, p.self_gen);
    for (std::size_t i = 0; i < o.numel(); ++i) {
        EXPECT_NEAR(o.data()[i], wo.data()[i], 1e-14);
        EXPECT_NEAR(g.data()[i], wg.data()[i], 1e-14);
    }
    EXPECT_THROW(dcar_block(BottleneckPair<double>{f, sample_normal<double>(r, {4, 4})}, p), ShapeError);
}

TEST(DcarBlock, ConcatFusionProjects) {
    Rng r(58);
    DcarConfig cfg;
    cfg.fusion = Fusion::concat;
    const auto p = DcarParams<double>::init(4, cfg, r);
    ASSERT_EQ(p.fuse_orig.shape(), (Shape{8, 4}));
    const auto f = sample_normal<double>(r, {5, 4}), fa = sample_normal<double>(r, {5, 4});
    const auto o = dcar_block(BottleneckPair<double>{f, fa}, p, Fusion::concat).first;
    const auto want = matmul(concat(std::vector<Tensor<double>>{channel_cross_attention(f, fa, p.cross_orig),
                                                                channel_self_attention(f, p.self_orig)},
                                    1),
                             p.fuse_orig);
    for (std::size_t i = 0; i < o.numel(); ++i) EXPECT_NEAR(o.data()[i], want.data()[i], 1e-14);
    EXPECT_EQ(p.named(cfg).size(), 18u);
}

TEST(DcarForward, PerInstanceAndSingleBranchForm) {
    Rng r(59);
    const auto p = DcarParams<double>::init(4, DcarConfig{}, r);
    const auto fo = sample_normal<double>(r, {2, 4, 2, 3}), fg = sample_normal<double>(r, {2, 4, 2, 3});
    const auto [o, g] = dcar_forward(fo, fg, p);
    ASSERT_EQ(o.shape(), fo.shape());
    // Instance 1 computed alone must match its slice of the batched result.
    const auto tokens = [](const Tensor<double>& f, std::size_t n) {
        return reshape(permute(slice(f, 0, n, 1), {0, 2, 3, 1}), Shape{6, 4});
    };
    const auto alone = dcar_block(BottleneckPair<double>{tokens(fo, 1), tokens(fg, 1)}, p).first;
    const auto batched = tokens(o, 1);
    for (std::size_t i = 0; i < alone.numel(); ++i) EXPECT_NEAR(batched.data()[i], alone.data()[i], 1e-14);
    // Inference form equals the two-branch original output on identical inputs.
    const auto single = dcar_forward_single(fo, p);
    const auto twin = dcar_forward(fo, fo, p).first;
    for (std::size_t i = 0; i < single.numel(); ++i) EXPECT_NEAR(single.data()[i], twin.data()[i], 1e-14);
}
