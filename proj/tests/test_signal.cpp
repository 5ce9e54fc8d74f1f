#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "qmri/phantom.hpp"
#include "qmri/signal.hpp"

using namespace qmri;

namespace {

// Straight transcription of the closed forms, kept separate from the library.
cplx oracle_vfa(double a, double t1, double t2s, double phi0, double freq, double tr, double te, double flip_deg) {
    const double al = flip_deg * std::numbers::pi / 180.0;
    const double e1 = std::exp(-tr / t1);
    const double mag = a * (1.0 - e1) * std::sin(al) / (1.0 - e1 * std::cos(al)) * std::exp(-te / t2s);
    return std::polar(mag, phi0 + 2.0 * std::numbers::pi * freq * te * 1e-3);
}

cplx oracle_t2ir(double a, double b, double t1, double t2, double t2s, double phi0, double freq, double tr, double te,
                 double tau, double flip_deg, int n) {
    const double al = flip_deg * std::numbers::pi / 180.0;
    const double e1 = std::exp(-tr / t1);
    return oracle_vfa(a, t1, t2s, phi0, freq, tr, te, flip_deg) *
           (1.0 + (b * std::exp(-tau / t2) - 1.0) * std::pow(e1 * std::cos(al), n));
}

ParametricMaps single_voxel(const VoxelParams<double>& p) {
    ParametricMaps m({1, 1, 1});
    m.a[0] = p.a;
    m.b[0] = p.b;
    m.t1[0] = p.t1;
    m.t2[0] = p.t2;
    m.t2s[0] = p.t2s;
    m.phi0[0] = p.phi0;
    m.freq[0] = p.freq;
    return m;
}

}  // namespace

TEST(Protocol, FrameCountsAndOrder) {
    const auto p1 = dataset1_protocol();
    EXPECT_EQ(p1.frames(), 60);
    EXPECT_EQ(p1.frame(13).prep, 1);
    EXPECT_EQ(p1.frame(13).echo, 1);
    EXPECT_NEAR(p1.te_ms.back(), 35.70, 1e-12);

    const auto p2 = dataset2_protocol(20);
    EXPECT_EQ(p2.frames(), 4 * 20 * 4);
    const auto f = p2.frame(1 * 80 + 7 * 4 + 2);
    EXPECT_EQ(f.prep, 1);
    EXPECT_EQ(f.segment, 7);
    EXPECT_EQ(f.echo, 2);
    EXPECT_THROW(p2.frame(320), std::out_of_range);
}

TEST(Protocol, ValidationRejectsBadInput) {
    EXPECT_THROW(SequenceProtocol::vfa_megre(0.0, {2.0}, {10.0}), std::invalid_argument);
    EXPECT_THROW(SequenceProtocol::vfa_megre(46.0, {}, {10.0}), std::invalid_argument);
    EXPECT_THROW(SequenceProtocol::vfa_megre(46.0, {2.0}, {95.0}), std::invalid_argument);
    EXPECT_THROW(SequenceProtocol::t2ir_gre(30.0, {4.5}, {-1.0}, 10.0, 4), std::invalid_argument);
}

TEST(Signal, FrozenValues) {
    // Independently computed reference values.
    const auto p1 = dataset1_protocol();
    auto m = single_voxel({0.8, 1.0, 850.0, 70.0, 50.0, 0.3, 5.0});
    auto iw = signal_vfa_megre(m, p1);
    const cplx v = iw.data(2 * 12 + 3, 0);  // flip 20, echo 3
    EXPECT_NEAR(v.real(), 0.08304050179250552, 1e-13);
    EXPECT_NEAR(v.imag(), 0.06378540853422517, 1e-13);

    const auto p2 = SequenceProtocol::t2ir_gre(30.0, {4.5, 11.2}, {25.0, 50.0}, 10.0, 8);
    m = single_voxel({0.9, 0.95, 1300.0, 90.0, 60.0, -0.2, 3.0});
    iw = signal_t2ir_gre(m, p2);
    const cplx w = iw.data(1 * 16 + 7 * 2 + 1, 0);  // tau 50, segment 7, echo 11.2
    EXPECT_NEAR(w.real(), 0.0512334954602389, 1e-13);
    EXPECT_NEAR(w.imag(), 0.0005694851028823486, 1e-13);
}

TEST(Signal, MatchesOracleOnRandomVoxels) {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const auto p1 = dataset1_protocol();
    const auto p2 = dataset2_protocol(6);
    for (int i = 0; i < 200; ++i) {
        const VoxelParams<double> p{0.2 + u(rng), 0.5 + 0.5 * u(rng), 300 + 4000 * u(rng), 20 + 300 * u(rng),
                                    5 + 200 * u(rng), 6 * u(rng) - 3, 60 * u(rng) - 30};
        const auto m = single_voxel(p);
        const auto a = signal_vfa_megre(m, p1);
        for (index_t t = 0; t < p1.frames(); ++t) {
            const auto f = p1.frame(t);
            const cplx ref = oracle_vfa(p.a, p.t1, p.t2s, p.phi0, p.freq, p1.tr_ms, p1.te_ms[f.echo], p1.flip_deg[f.prep]);
            EXPECT_LT(std::abs(a.data(t, 0) - ref), 1e-13);
        }
        const auto b = signal_t2ir_gre(m, p2);
        for (index_t t = 0; t < p2.frames(); ++t) {
            const auto f = p2.frame(t);
            const cplx ref = oracle_t2ir(p.a, p.b, p.t1, p.t2, p.t2s, p.phi0, p.freq, p2.tr_ms, p2.te_ms[f.echo],
                                         p2.tau_ms[f.prep], p2.flip_deg[0], static_cast<int>(f.segment));
            EXPECT_LT(std::abs(b.data(t, 0) - ref), 1e-13);
        }
    }
}

TEST(Signal, T2irReducesToVfaWhenPreparationIsNeutral) {
    // B exp(-tau/T2) = 1 makes the bracket exactly one.
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 1000; ++i) {
        const double t2 = 30 + 200 * u(rng);
        const double tau = 10 + 80 * u(rng);
        VoxelParams<double> p{0.5 + u(rng), std::exp(tau / t2), 400 + 3000 * u(rng), t2, 10 + 100 * u(rng),
                              u(rng), 20 * u(rng) - 10};
        const auto t2ir = SequenceProtocol::t2ir_gre(30.0, {4.5, 11.2}, {tau}, 10.0, 5);
        const auto vfa = SequenceProtocol::vfa_megre(30.0, {4.5, 11.2}, {10.0});
        const FrameTable<double> ta(t2ir), tb(vfa);
        for (index_t t = 0; t < t2ir.frames(); ++t) {
            const cplx s = frame_signal(ta, t, p);
            const cplx r = frame_signal(tb, t2ir.frame(t).echo, p);
            EXPECT_LT(std::abs(s - r), 1e-12);
        }
    }
}

TEST(Signal, RightAngleLongTrClosedForm) {
    // alpha = 90, TR >> T1, TE = T2*: |s| = A e^-1.
    const auto p = SequenceProtocol::vfa_megre(1e6, {40.0}, {90.0});
    const auto m = single_voxel({2.0, 1.0, 800.0, 40.0, 40.0, 0.0, 0.0});
    EXPECT_NEAR(std::abs(signal_vfa_megre(m, p).data(0, 0)), 2.0 * std::exp(-1.0), 1e-6);
}

TEST(Signal, PartialsMatchFiniteDifferences) {
    const auto p2 = dataset2_protocol(4);
    const FrameTable<double> table(p2);
    const VoxelParams<double> p{0.8, 0.9, 1100.0, 80.0, 45.0, 0.4, 6.0};
    auto bump = [](VoxelParams<double> q, MapType m, double h) {
        switch (m) {
            case MapType::A: q.a += h; break;
            case MapType::B: q.b += h; break;
            case MapType::T1: q.t1 += h; break;
            case MapType::T2: q.t2 += h; break;
            case MapType::T2s: q.t2s += h; break;
            case MapType::Phi0: q.phi0 += h; break;
            case MapType::Freq: q.freq += h; break;
        }
        return q;
    };
    for (index_t t : {0L, 9L, 37L, 63L}) {
        SignalPartials<double> d;
        frame_signal(table, t, p, &d);
        for (auto m : kAllMapTypes) {
            const double h = (m == MapType::T1 || m == MapType::T2 || m == MapType::T2s) ? 1e-3 : 1e-6;
            const cplx fd = (frame_signal(table, t, bump(p, m, h)) - frame_signal(table, t, bump(p, m, -h))) / (2 * h);
            EXPECT_LT(std::abs(fd - d[m]), 1e-6 * std::max(1.0, std::abs(fd))) << map_name(m) << " frame " << t;
        }
    }
}

TEST(Signal, ZeroAmplitudeAndRejections) {
    ParametricMaps m({2, 1, 1});
    m.a[1] = 1.0;
    m.t1[1] = 1000.0;
    m.t2s[1] = 40.0;
    const auto iw = signal_vfa_megre(m, dataset1_protocol());
    for (index_t t = 0; t < iw.frames(); ++t) EXPECT_EQ(iw.data(t, 0), cplx{});
    m.t1[1] = -5.0;
    EXPECT_THROW(signal_vfa_megre(m, dataset1_protocol()), std::invalid_argument);
    EXPECT_THROW(signal_t2ir_gre(m, dataset1_protocol()), std::invalid_argument);
}

TEST(Signal, LinearInAmplitude) {
    const auto gt = make_phantom({16, 16, 8}, 2);
    auto scaled = gt.maps;
    for (auto& v : scaled.a) v *= 3.0;
    const auto a = simulate_signal(gt.maps, dataset1_protocol());
    const auto b = simulate_signal(scaled, dataset1_protocol());
    for (index_t i = 0; i < a.data.size(); ++i) EXPECT_LT(std::abs(3.0 * a.data[i] - b.data[i]), 1e-14);
}

TEST(Dictionary, UnitRowsAndErrors) {
    const auto d = build_dictionary(dataset1_protocol(), vfa_default_grid());
    EXPECT_EQ(d.rows(), 285);
    EXPECT_EQ(d.cols(), 60);
    for (index_t i = 0; i < d.rows(); ++i) EXPECT_NEAR(d.row(i).norm(), 1.0, 1e-12);
    EXPECT_EQ(d.imag().cwiseAbs().maxCoeff(), 0.0);
    auto grid = vfa_default_grid();
    grid[4].t1 = -1.0;
    try {
        build_dictionary(dataset1_protocol(), grid);
        FAIL();
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("index 4"), std::string::npos);
    }
    EXPECT_EQ(vfa_offresonance_grid(10.0, 2.5).size(), 285u * 9u);
}
