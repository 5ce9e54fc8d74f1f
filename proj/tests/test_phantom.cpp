#include <gtest/gtest.h>

#include <cmath>

#include "qmri/phantom.hpp"

using namespace qmri;

TEST(Phantom, ShapeAndMaskAgree) {
    const Dims3 d{32, 32, 8};
    const auto gt = make_phantom(d, 3);
    EXPECT_EQ(gt.dims(), d);
    EXPECT_EQ(gt.brain_mask.dims(), d);
    EXPECT_EQ(gt.region_labels.dims(), d);
    index_t inside = 0;
    for (index_t i = 0; i < d.voxels(); ++i) {
        const bool in = gt.brain_mask[i] != 0;
        inside += in;
        EXPECT_EQ(in, gt.region_labels[i] != 0);
        if (in) {
            EXPECT_GT(gt.maps.t1[i], 0.0);
            EXPECT_GT(gt.maps.t2s[i], 0.0);
            EXPECT_GT(gt.maps.a[i], 0.0);
            EXPECT_LE(gt.maps.b[i], 1.0);
            EXPECT_LE(std::abs(gt.maps.freq[i]), kPhantomMaxFreqHz);
        } else {
            for (auto m : kAllMapTypes) EXPECT_EQ(gt.maps[m][i], 0.0);
        }
    }
    EXPECT_GT(inside, d.voxels() / 4);
    EXPECT_LT(inside, d.voxels());
}

TEST(Phantom, TissueValuesAndOrdering) {
    const auto wm = tissue_values(Tissue::Wm);
    const auto gm = tissue_values(Tissue::Gm);
    const auto csf = tissue_values(Tissue::Csf);
    EXPECT_DOUBLE_EQ(wm.t1, 850.0);
    EXPECT_DOUBLE_EQ(gm.t1, 1300.0);
    EXPECT_DOUBLE_EQ(csf.t1, 3800.0);
    EXPECT_LT(wm.t1, gm.t1);
    EXPECT_LT(gm.t1, csf.t1);
    for (auto t : {Tissue::Csf, Tissue::Gm, Tissue::Wm, Tissue::Lesion}) {
        const auto v = tissue_values(t);
        EXPECT_LE(v.t2s, v.t2);
    }
}

TEST(Phantom, AllTissuesPresentAtDeskScale) {
    const auto gt = make_phantom({64, 64, 8}, 0);
    std::array<int, 5> counts{};
    for (int l : gt.region_labels) counts[static_cast<std::size_t>(l)]++;
    for (int l = 0; l < 5; ++l) EXPECT_GT(counts[l], 0) << "label " << l;
}

TEST(Phantom, DeterministicPerSeed) {
    const auto a = make_phantom({16, 16, 8}, 11);
    const auto b = make_phantom({16, 16, 8}, 11);
    const auto c = make_phantom({16, 16, 8}, 12);
    for (auto m : kAllMapTypes) EXPECT_EQ(a.maps[m], b.maps[m]);
    EXPECT_FALSE(a.maps.phi0 == c.maps.phi0);
}

TEST(Phantom, RejectsSmallShape) {
    try {
        make_phantom({16, 16, 4}, 0);
        FAIL();
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find(">= 8"), std::string::npos);
    }
}

TEST(Phantom, CropSlices) {
    const auto gt = make_phantom({16, 16, 8}, 1);
    const auto c = crop_slices(gt, 2, 4);
    EXPECT_EQ(c.dims(), (Dims3{16, 16, 4}));
    EXPECT_EQ(c.maps.t1(5, 6, 1), gt.maps.t1(5, 6, 3));
    EXPECT_EQ(c.brain_mask(8, 8, 0), gt.brain_mask(8, 8, 2));
    EXPECT_THROW(crop_slices(gt, 6, 4), std::invalid_argument);
}

TEST(CoilMaps, NormalisedRssAndRealCoilSum) {
    const Dims3 d{24, 24, 8};
    const auto coils = make_coil_maps(d, 8, 5);
    EXPECT_EQ(coils.n_coils(), 8);
    for (index_t v = 0; v < d.voxels(); ++v) {
        double rss = 0.0;
        cplx sum{};
        for (index_t c = 0; c < 8; ++c) {
            rss += std::norm(coils.maps(c, v));
            sum += coils.maps(c, v);
        }
        EXPECT_NEAR(rss, 1.0, 1e-12);
        EXPECT_NEAR(sum.imag(), 0.0, 1e-12);
        EXPECT_GT(sum.real(), 0.0);
    }
}

TEST(CoilMaps, SingleCoilIsUnity) {
    const auto coils = make_coil_maps({8, 8, 8}, 1, 0);
    for (const auto& v : coils.maps.values()) {
        EXPECT_NEAR(v.real(), 1.0, 1e-12);
        EXPECT_NEAR(v.imag(), 0.0, 1e-12);
    }
}

TEST(CoilMaps, SmoothAndDistinct) {
    const Dims3 d{32, 32, 8};
    const auto coils = make_coil_maps(d, 4, 2);
    double max_step = 0.0;
    for (index_t c = 0; c < 4; ++c)
        for (index_t x = 0; x + 1 < d.nx; ++x)
            for (index_t y = 0; y < d.ny; ++y)
                max_step = std::max(max_step, std::abs(coils.maps(c, d.offset(x + 1, y, 4)) -
                                                       coils.maps(c, d.offset(x, y, 4))));
    EXPECT_LT(max_step, 0.15);
    double lo = 1.0, hi = 0.0;
    for (index_t x = 0; x < d.nx; ++x)
        for (index_t y = 0; y < d.ny; ++y) {
            const double m = std::abs(coils.maps(0, d.offset(x, y, 4)));
            lo = std::min(lo, m);
            hi = std::max(hi, m);
        }
    EXPECT_GT(hi, 2.0 * lo);
    EXPECT_THROW(make_coil_maps(d, 0, 0), std::invalid_argument);
}
