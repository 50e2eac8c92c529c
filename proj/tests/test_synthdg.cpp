#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include <unistd.h>

#include "dgseg/synthdg.hpp"

using namespace dgseg;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("dgseg_test_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    return p;
}

}  // namespace

TEST(Synth, DeterministicPerSeed) {
    const auto a = generate_corpus(3, 4, 9, 32), b = generate_corpus(3, 4, 9, 32), c = generate_corpus(3, 4, 10, 32);
    ASSERT_EQ(a.samples.size(), 12u);
    bool differs = false;
    for (std::size_t i = 0; i < a.samples.size(); ++i) {
        EXPECT_EQ(a.samples[i].image, b.samples[i].image);
        EXPECT_EQ(a.samples[i].mask, b.samples[i].mask);
        differs = differs || a.samples[i].image != c.samples[i].image;
    }
    EXPECT_TRUE(differs);
}

TEST(Synth, GeometryIsSharedAcrossDomains) {
    const auto c = generate_corpus(4, 6, 3, 64);
    for (const auto& s : c.samples) {
        const auto& ref = c.samples[std::size_t(s.sample_id)];
        EXPECT_EQ(s.mask, ref.mask) << "domain " << s.domain_id << " sample " << s.sample_id;
    }
}

TEST(Synth, NestedStructuresAndBoundedImages) {
    const auto c = generate_corpus(4, 10, 5, 64);
    const std::size_t n = 64;
    for (const auto& s : c.samples) {
        std::size_t outer = 0, inner = 0;
        for (double v : s.image) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
        // Inner pixels (class 2) must never touch background (class 0).
        for (std::size_t y = 0; y < n; ++y)
            for (std::size_t x = 0; x < n; ++x) {
                const int m = s.mask[y * n + x];
                outer += m >= 1;
                inner += m == 2;
                if (m != 2) continue;
                for (auto [dy, dx] : {std::pair{-1, 0}, {1, 0}, {0, -1}, {0, 1}}) {
                    const long yy = long(y) + dy, xx = long(x) + dx;
                    ASSERT_TRUE(yy >= 0 && xx >= 0 && yy < long(n) && xx < long(n));
                    ASSERT_NE(s.mask[std::size_t(yy) * n + std::size_t(xx)], 0);
                }
            }
        EXPECT_GT(inner, 0u);
        EXPECT_GT(outer, inner);
    }
}

TEST(Synth, DomainStatisticClustersAreSeparated) {
    const auto c = generate_corpus(4, 50, 0, 64);
    const std::size_t nd = c.domains.size();
    std::vector<double> cm(nd, 0), cs(nd, 0), spread(nd, 0);
    std::vector<std::vector<std::pair<double, double>>> pts(nd);
    for (const auto& s : c.samples) {
        double m = 0, v = 0;
        for (double x : s.image) m += x;
        m /= double(s.image.size());
        for (double x : s.image) v += (x - m) * (x - m);
        pts[std::size_t(s.domain_id)].push_back({m, std::sqrt(v / double(s.image.size()))});
    }
    for (std::size_t d = 0; d < nd; ++d) {
        for (auto [m, s] : pts[d]) {
            cm[d] += m;
            cs[d] += s;
        }
        cm[d] /= double(pts[d].size());
        cs[d] /= double(pts[d].size());
        for (auto [m, s] : pts[d]) spread[d] += std::pow(m - cm[d], 2) + std::pow(s - cs[d], 2);
        spread[d] = std::sqrt(spread[d] / double(pts[d].size()));
    }
    for (std::size_t a = 0; a < nd; ++a)
        for (std::size_t b = a + 1; b < nd; ++b) {
            const double dist = std::hypot(cm[a] - cm[b], cs[a] - cs[b]);
            EXPECT_GT(dist, 2.0 * std::max(spread[a], spread[b])) << "domains " << a << " and " << b;
        }
}

TEST(Synth, LeaveOneOutPartitions) {
    const auto c = generate_corpus(4, 50, 1, 32);
    for (int t = 0; t < 4; ++t) {
        const auto s = leave_one_out_split(c, t);
        EXPECT_EQ(s.train.size(), 150u);
        EXPECT_EQ(s.test.size(), 50u);
        std::set<const DomainSample*> all(s.train.begin(), s.train.end());
        for (const auto* p : s.test) {
            EXPECT_EQ(p->domain_id, t);
            EXPECT_TRUE(all.insert(p).second);
        }
        for (const auto* p : s.train) EXPECT_NE(p->domain_id, t);
        EXPECT_EQ(all.size(), c.samples.size());
    }
    EXPECT_THROW(leave_one_out_split(c, 4), std::invalid_argument);
}

TEST(Synth, InvalidArguments) {
    EXPECT_THROW(generate_corpus(1, 5, 0), std::invalid_argument);
    EXPECT_THROW(generate_corpus(2, 0, 0), std::invalid_argument);
    EXPECT_THROW(generate_corpus(2, 2, 0, 4), std::invalid_argument);
    DomainSpec d;
    d.gamma = 0;
    EXPECT_THROW(d.validate(), std::invalid_argument);
}

TEST(Synth, ExtraDomainsAreGenerated) {
    const auto c = generate_corpus(6, 2, 4, 32);
    ASSERT_EQ(c.domains.size(), 6u);
    EXPECT_EQ(c.domains[5].domain_id, 5);
    EXPECT_NO_THROW(c.domains[5].validate());
}

TEST(Synth, DiskRoundTrip) {
    const auto c = generate_corpus(2, 3, 8, 32);
    const auto dir = temp_dir("corpus");
    write_corpus(c, dir);
    EXPECT_TRUE(fs::exists(dir / "manifest.json"));
    EXPECT_TRUE(fs::exists(dir / "images" / "d1_s2.pgm"));
    EXPECT_TRUE(fs::exists(dir / "masks" / "d0_s0.pgm"));
    const auto back = read_corpus(dir);
    EXPECT_EQ(back.image_size, 32u);
    EXPECT_EQ(back.seed, 8u);
    ASSERT_EQ(back.samples.size(), c.samples.size());
    ASSERT_EQ(back.domains.size(), 2u);
    EXPECT_EQ(back.domains[1].gamma, c.domains[1].gamma);
    for (std::size_t i = 0; i < c.samples.size(); ++i) {
        EXPECT_EQ(back.samples[i].mask, c.samples[i].mask);
        EXPECT_EQ(back.samples[i].domain_id, c.samples[i].domain_id);
        // Images are stored on the 16-bit grid they were generated on.
        for (std::size_t k = 0; k < c.samples[i].image.size(); ++k)
            ASSERT_NEAR(back.samples[i].image[k], c.samples[i].image[k], 1e-12);
    }
    fs::remove_all(dir);
    EXPECT_THROW(read_corpus(dir), std::runtime_error);
}

TEST(Synth, BatchesStackSamples) {
    const auto c = generate_corpus(2, 2, 2, 32);
    const std::vector<const DomainSample*> v{&c.samples[0], &c.samples[3]};
    const auto x = images_to_batch<float>(v, 32);
    EXPECT_EQ(x.shape(), (Shape{2, 1, 32, 32}));
    EXPECT_FLOAT_EQ(x.data()[1024 + 5], float(c.samples[3].image[5]));
    const auto m = masks_to_batch(v, 32);
    EXPECT_EQ(m.batch, 2u);
    EXPECT_EQ(m.labels[1024 + 500], c.samples[3].mask[500]);
    EXPECT_THROW(images_to_batch<float>(v, 16), ShapeError);
}
