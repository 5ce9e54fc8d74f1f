#include <gtest/gtest.h>

#include <random>

#include "qmri/baselines.hpp"
#include "qmri/metrics.hpp"

using namespace qmri;

namespace {

struct Setup {
    GroundTruth gt;
    SequenceProtocol protocol = dataset1_protocol();
    WeightedImages iw;
    CoilMaps coils;
    TemporalBasis phi;
};

Setup small_setup(index_t n_coils, Dims3 d = {16, 16, 4}) {
    Setup s;
    s.gt = make_phantom({d.nx, d.ny, std::max<index_t>(d.nz, 8)}, 0);
    if (d.nz < 8) s.gt = crop_slices(s.gt, (8 - d.nz) / 2, d.nz);
    s.iw = simulate_signal(s.gt.maps, s.protocol);
    s.coils = make_coil_maps(d, n_coils, 0);
    s.phi = temporal_basis(build_dictionary(s.protocol, vfa_offresonance_grid(10.0, 2.5)), 15);
    return s;
}

double rel_diff(const Stack<cplx>& a, const Stack<cplx>& b) {
    double num = 0, den = 0;
    for (index_t i = 0; i < a.size(); ++i) {
        num += std::norm(a[i] - b[i]);
        den += std::norm(b[i]);
    }
    return std::sqrt(num / den);
}

SpatialBases random_bases(Dims3 d, index_t k, std::uint64_t seed) {
    SpatialBases u(d, k);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0, 1);
    for (auto& x : u.values()) x = {n(rng), n(rng)};
    return u;
}

}  // namespace

TEST(ZeroFilled, FullMaskSingleCoilEqualsProjection) {
    auto s = small_setup(1);
    const auto mask = make_mask(s.gt.dims(), s.protocol.frames(), MaskPattern::Full, 1.0, {0, 0, 0}, 0);
    const auto ks = forward(s.iw, s.coils, mask);
    const auto zf = recon_zero_filled(ks, s.coils, s.phi);
    const auto expect = compose_weighted(project_to_subspace(s.iw, s.phi), s.phi);
    EXPECT_LT(rel_diff(zf.data, expect), 1e-9);
}

TEST(ZeroFilled, RejectsMismatchedBasis) {
    auto s = small_setup(2);
    const auto mask = make_mask(s.gt.dims(), s.protocol.frames(), MaskPattern::Full, 1.0, {0, 0, 0}, 0);
    const auto ks = forward(s.iw, s.coils, mask);
    const auto other = temporal_basis(build_dictionary(dataset2_protocol(4), t2ir_default_grid()), 3);
    EXPECT_THROW(recon_zero_filled(ks, s.coils, other), std::invalid_argument);
}

TEST(TotalVariation, GradientAdjointPassesDotTest) {
    const Dims3 d{6, 5, 4};
    const auto u = random_bases(d, 3, 1);
    const auto g = detail::gradient3(u);
    std::array<SpatialBases, 3> q{random_bases(d, 3, 2), random_bases(d, 3, 3), random_bases(d, 3, 4)};
    double lhs = 0;
    for (int a = 0; a < 3; ++a) lhs += detail::real_dot(g[a], q[a]);
    const double rhs = detail::real_dot(u, detail::gradient3_adjoint(q));
    EXPECT_NEAR(lhs, rhs, 1e-9 * std::abs(lhs));
}

TEST(TotalVariation, ConstantHasZeroGradient) {
    SpatialBases u(Dims3{4, 4, 4}, 2, cplx(1.5, -0.5));
    for (const auto& g : detail::gradient3(u))
        for (auto x : g.values()) EXPECT_EQ(x, cplx(0));
}

TEST(SubspaceOperator, NormalIsSelfAdjointAndPositive) {
    auto s = small_setup(2, {8, 8, 4});
    const auto mask = make_mask(s.gt.dims(), s.protocol.frames(), MaskPattern::VariableDensity, 4.0, {2, 2, 2}, 5);
    const auto ks = forward(s.iw, s.coils, mask);
    detail::SubspaceOperator a(ks, s.coils, s.phi);
    const auto x = random_bases(s.gt.dims(), s.phi.rank(), 7), y = random_bases(s.gt.dims(), s.phi.rank(), 8);
    const double xy = detail::real_dot(a.normal(x), y), yx = detail::real_dot(x, a.normal(y));
    EXPECT_NEAR(xy, yx, 1e-9 * std::abs(xy));
    EXPECT_GT(detail::real_dot(a.normal(x), x), 0.0);
}

TEST(LrtAdmm, UnregularisedFullMaskEqualsProjection) {
    auto s = small_setup(1);
    const auto mask = make_mask(s.gt.dims(), s.protocol.frames(), MaskPattern::Full, 1.0, {0, 0, 0}, 0);
    const auto ks = forward(s.iw, s.coils, mask);
    AdmmConfig cfg;
    cfg.lambda_tv = 0.0;
    cfg.cg_iters = 50;
    cfg.max_iters = 20;
    cfg.tol = 1e-12;
    const auto u = recon_lrt_admm(ks, s.coils, s.phi, cfg);
    EXPECT_LT(rel_diff(u, project_to_subspace(s.iw, s.phi)), 1e-4);
}

TEST(LrtAdmm, HugeLambdaGivesConstantChannels) {
    auto s = small_setup(1);
    const auto mask = make_mask(s.gt.dims(), s.protocol.frames(), MaskPattern::Full, 1.0, {0, 0, 0}, 0);
    const auto ks = forward(s.iw, s.coils, mask);
    AdmmConfig cfg;
    cfg.lambda_tv = 1e6;
    const auto u = recon_lrt_admm(ks, s.coils, s.phi, cfg);
    const auto& m = s.gt.brain_mask;
    for (index_t k = 0; k < u.count(); ++k) {
        cplx mean{};
        index_t n = 0;
        for (index_t v = 0; v < m.size(); ++v)
            if (m[v]) {
                mean += u(k, v);
                ++n;
            }
        mean /= static_cast<double>(n);
        double dev = 0;
        for (index_t v = 0; v < m.size(); ++v)
            if (m[v]) dev = std::max(dev, std::abs(u(k, v) - mean));
        const double scale = std::max(std::abs(mean), 1e-12 * admm_lambda_scale(ks, s.coils, s.phi));
        EXPECT_LT(dev / scale, 1e-3) << "channel " << k;
    }
}

TEST(LrtAdmm, RegularisationBeatsZeroFilledAtAcceleration) {
    auto s = small_setup(4);
    const auto mask = make_mask(s.gt.dims(), s.protocol.frames(), MaskPattern::VariableDensity, 6.0, {3, 3, 2}, 1);
    const auto clean = forward(s.iw, s.coils, mask);
    const auto ks = add_noise(clean, 0.005 * peak_magnitude(clean), 2);
    const auto truth = project_to_subspace(s.iw, s.phi);
    AdmmConfig cfg;
    cfg.lambda_tv = 1e-3 * admm_lambda_scale(ks, s.coils, s.phi);
    AdmmTrace trace;
    const auto u = recon_lrt_admm(ks, s.coils, s.phi, cfg, &trace);
    const auto zf = project_to_subspace(recon_zero_filled(ks, s.coils, s.phi), s.phi);
    EXPECT_LT(rel_diff(u, truth), rel_diff(zf, truth));
    EXPECT_EQ(static_cast<int>(trace.primal_residual.size()), trace.iterations);
}

TEST(LrtAdmm, RejectsInvalidConfig) {
    AdmmConfig c;
    c.lambda_tv = -1;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = {};
    c.cg_iters = 0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = {};
    c.tol = 0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    EXPECT_DOUBLE_EQ(AdmmConfig{}.effective_rho(), 1e-3);
}

TEST(Nlls, RecoversNoiselessMaps) {
    auto s = small_setup(1);
    const auto fit = fit_maps_nlls(s.iw, s.protocol, std::nullopt, &s.gt.brain_mask);
    const auto c = default_clamps();
    EXPECT_LT(nrmse(fit.maps, s.gt.maps, MapType::T1, c, s.gt.brain_mask), 5e-3);
    EXPECT_LT(nrmse(fit.maps, s.gt.maps, MapType::T2s, c, s.gt.brain_mask), 5e-3);
    EXPECT_LT(nrmse(fit.maps, s.gt.maps, MapType::A, c, s.gt.brain_mask), 5e-3);
    EXPECT_EQ(fit.nonconverged, 0);
}

TEST(Nlls, AmplitudeIsLinear) {
    auto s = small_setup(1, {16, 16, 4});
    auto doubled = s.iw;
    for (auto& x : doubled.data.values()) x *= 2.0;
    const auto f1 = fit_maps_nlls(s.iw, s.protocol, std::nullopt, &s.gt.brain_mask);
    const auto f2 = fit_maps_nlls(doubled, s.protocol, std::nullopt, &s.gt.brain_mask);
    for (index_t v = 0; v < s.gt.brain_mask.size(); ++v) {
        if (!s.gt.brain_mask[v]) continue;
        EXPECT_NEAR(f2.maps.a[v], 2.0 * f1.maps.a[v], 1e-6 * f1.maps.a[v]);
        EXPECT_NEAR(f2.maps.t1[v], f1.maps.t1[v], 1e-6 * f1.maps.t1[v]);
        EXPECT_NEAR(f2.maps.t2s[v], f1.maps.t2s[v], 1e-6 * f1.maps.t2s[v]);
    }
}

TEST(Nlls, ZeroVoxelGivesZeroMaps) {
    const Dims3 d{2, 2, 2};
    const auto p = dataset1_protocol();
    WeightedImages iw{Stack<cplx>(d, p.frames()), p};
    const auto fit = fit_maps_nlls(iw, p);
    for (auto m : p.active_maps())
        for (auto x : fit.maps[m]) EXPECT_EQ(x, 0.0);
    EXPECT_EQ(fit.fitted, 0);
}

TEST(Nlls, RejectsFrameMismatch) {
    const Dims3 d{2, 2, 2};
    const auto p = dataset1_protocol();
    WeightedImages iw{Stack<cplx>(d, p.frames() - 1), p};
    EXPECT_THROW(fit_maps_nlls(iw, p), std::invalid_argument);
}
