#include <gtest/gtest.h>

#include <random>

#include "qmri/metrics.hpp"

using namespace qmri;

namespace {

Volume<std::uint8_t> full_mask(Dims3 d) { return Volume<std::uint8_t>(d, 1); }

Volume<double> random_volume(Dims3 d, std::uint64_t seed, double lo, double hi) {
    Volume<double> v(d);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    for (auto& x : v) x = u(rng);
    return v;
}

}  // namespace

TEST(Nrmse, IdenticalIsZero) {
    const Dims3 d{4, 4, 2};
    const auto g = random_volume(d, 1, 100, 2000);
    EXPECT_EQ(nrmse(g, g, std::nullopt, full_mask(d)), 0.0);
}

TEST(Nrmse, TenPercentScaleOfUniformTruth) {
    const Dims3 d{4, 4, 2};
    Volume<double> g(d, 800.0), p(d, 880.0);
    EXPECT_NEAR(nrmse(p, g, std::nullopt, full_mask(d)), 0.1, 1e-12);
}

TEST(Nrmse, ClampRemovesOutOfRangeDifferences) {
    const Dims3 d{2, 2, 1};
    Volume<double> g(d, 1000.0), p(d, 1000.0);
    g[0] = 3800.0;
    p[0] = 4500.0;
    EXPECT_EQ(nrmse(p, g, ClampRange{0.0, 3500.0}, full_mask(d)), 0.0);
    EXPECT_GT(nrmse(p, g, std::nullopt, full_mask(d)), 0.0);
}

TEST(Nrmse, ScaleHomogeneousWithoutClamp) {
    const Dims3 d{5, 4, 3};
    const auto g = random_volume(d, 2, 10, 90), p = random_volume(d, 3, 10, 90);
    const double base = nrmse(p, g, std::nullopt, full_mask(d));
    for (double c : {0.01, 3.0, 1e4}) {
        Volume<double> gc(d), pc(d);
        for (index_t i = 0; i < g.size(); ++i) {
            gc[i] = c * g[i];
            pc[i] = c * p[i];
        }
        EXPECT_NEAR(nrmse(pc, gc, std::nullopt, full_mask(d)), base, 1e-12 * base);
    }
}

TEST(Nrmse, OnlyMaskedVoxelsCount) {
    const Dims3 d{2, 2, 1};
    Volume<double> g(d, 10.0), p(d, 10.0);
    p[3] = 1e6;
    Volume<std::uint8_t> m(d, 1);
    m[3] = 0;
    EXPECT_EQ(nrmse(p, g, std::nullopt, m), 0.0);
}

TEST(Nrmse, RejectsZeroTruthAndShapeMismatch) {
    const Dims3 d{2, 2, 1};
    Volume<double> z(d, 0.0), p(d, 1.0);
    EXPECT_THROW(nrmse(p, z, std::nullopt, full_mask(d)), std::invalid_argument);
    Volume<double> other(Dims3{2, 2, 2}, 1.0);
    EXPECT_THROW(nrmse(other, p, std::nullopt, full_mask(d)), std::invalid_argument);
    EXPECT_THROW(nrmse(p, p, ClampRange{2.0, 1.0}, full_mask(d)), std::invalid_argument);
}

TEST(Nrmse, DefaultClampValues) {
    const auto c = default_clamps();
    EXPECT_EQ(c.at(MapType::T1), ClampRange(0.0, 3500.0));
    EXPECT_EQ(c.at(MapType::T2), ClampRange(0.0, 200.0));
    EXPECT_EQ(c.at(MapType::T2s), ClampRange(0.0, 100.0));
    EXPECT_EQ(c.count(MapType::A), 0u);
}

TEST(CoilNrmse, InvariantToGlobalPhase) {
    const auto gt = make_coil_maps({8, 8, 4}, 3, 1);
    CoilMaps rotated = gt;
    const cplx ph = std::polar(1.0, 1.234);
    for (auto& x : rotated.maps.values()) x *= ph;
    const Volume<std::uint8_t> m({8, 8, 4}, 1);
    EXPECT_NEAR(coil_nrmse(rotated, gt, m), 0.0, 1e-12);
}

TEST(CoilNrmse, PerCoilPhaseIsAnError) {
    const auto gt = make_coil_maps({8, 8, 4}, 2, 1);
    CoilMaps bad = gt;
    for (index_t v = 0; v < gt.dims().voxels(); ++v) bad.maps(1, v) *= -1.0;
    const Volume<std::uint8_t> m({8, 8, 4}, 1);
    EXPECT_GT(coil_nrmse(bad, gt, m), 0.5);
}

TEST(CoilNrmse, RejectsCoilCountMismatch) {
    const auto a = make_coil_maps({8, 8, 4}, 2, 1), b = make_coil_maps({8, 8, 4}, 3, 1);
    const Volume<std::uint8_t> m({8, 8, 4}, 1);
    EXPECT_THROW(coil_nrmse(a, b, m), std::invalid_argument);
}
