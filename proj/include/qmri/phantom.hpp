#ifndef QMRI_PHANTOM_HPP
#define QMRI_PHANTOM_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>
#include <vector>

#include "qmri/array.hpp"
#include "qmri/maps.hpp"

namespace qmri {

enum class Tissue : int { Background = 0, Csf = 1, Gm = 2, Wm = 3, Lesion = 4 };

struct TissueValues {
    double t1, t2, t2s, a;
};

/// Relaxation table used by the digital phantom (3T-plausible values, ms).
inline TissueValues tissue_values(Tissue t) {
    switch (t) {
        case Tissue::Wm: return {850.0, 70.0, 50.0, 0.8};
        case Tissue::Gm: return {1300.0, 90.0, 60.0, 0.9};
        case Tissue::Csf: return {3800.0, 1500.0, 800.0, 1.0};
        case Tissue::Lesion: return {1100.0, 120.0, 35.0, 0.85};
        case Tissue::Background: return {0.0, 0.0, 0.0, 0.0};
    }
    return {0.0, 0.0, 0.0, 0.0};
}

inline constexpr double kPhantomInversionEfficiency = 0.95;
inline constexpr double kPhantomMaxFreqHz = 8.0;

struct GroundTruth {
    ParametricMaps maps;
    Volume<std::uint8_t> brain_mask;
    Volume<int> region_labels;

    const Dims3& dims() const { return maps.dims(); }
};

struct CoilMaps {
    Stack<cplx> maps;  // count = n_coils

    index_t n_coils() const { return maps.count(); }
    const Dims3& dims() const { return maps.dims(); }
};

namespace detail {

struct Ellipsoid {
    std::array<double, 3> center;
    std::array<double, 3> radii;
    Tissue tissue;

    bool contains(double u, double v, double w) const {
        const double du = (u - center[0]) / radii[0];
        const double dv = (v - center[1]) / radii[1];
        const double dw = (w - center[2]) / radii[2];
        return du * du + dv * dv + dw * dw <= 1.0;
    }
};

inline void require_min_shape(const Dims3& shape, index_t min_extent) {
    if (shape.nx < min_extent || shape.ny < min_extent || shape.nz < min_extent)
        throw std::invalid_argument("phantom shape " + to_string(shape) + " too small: every dimension must be >= " +
                                    std::to_string(min_extent));
}

// Voxel centre mapped to [-1, 1] along one axis.
inline double unit_coord(index_t i, index_t n) { return (2.0 * static_cast<double>(i) + 1.0) / static_cast<double>(n) - 1.0; }

// Separable Gaussian smoothing with replicated borders.
inline void gaussian_smooth(std::span<cplx> vol, const Dims3& d, const std::array<double, 3>& sigma) {
    std::vector<cplx> tmp(vol.size());
    const std::array<index_t, 3> ext{d.nx, d.ny, d.nz};
    const std::array<index_t, 3> stride{d.ny * d.nz, d.nz, 1};
    for (int axis = 0; axis < 3; ++axis) {
        if (sigma[axis] <= 0.0) continue;
        const int radius = static_cast<int>(std::ceil(3.0 * sigma[axis]));
        std::vector<double> kernel(2 * radius + 1);
        double ksum = 0.0;
        for (int k = -radius; k <= radius; ++k) {
            kernel[k + radius] = std::exp(-0.5 * k * k / (sigma[axis] * sigma[axis]));
            ksum += kernel[k + radius];
        }
        for (auto& k : kernel) k /= ksum;
        for (index_t x = 0; x < d.nx; ++x)
            for (index_t y = 0; y < d.ny; ++y)
                for (index_t z = 0; z < d.nz; ++z) {
                    const std::array<index_t, 3> p{x, y, z};
                    const index_t base = d.offset(x, y, z) - p[axis] * stride[axis];
                    cplx acc{};
                    for (int k = -radius; k <= radius; ++k) {
                        const index_t q = std::clamp<index_t>(p[axis] + k, 0, ext[axis] - 1);
                        acc += kernel[k + radius] * vol[base + q * stride[axis]];
                    }
                    tmp[d.offset(x, y, z)] = acc;
                }
        std::copy(tmp.begin(), tmp.end(), vol.begin());
    }
}

}  // namespace detail

/// Piecewise-constant ellipsoidal brain phantom. The seed jitters the
/// geometry and draws the smooth phase/frequency fields.
inline GroundTruth make_phantom(Dims3 shape, std::uint64_t seed) {
    detail::require_min_shape(shape, 8);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> jitter(-1.0, 1.0);
    auto jc = [&](std::array<double, 3> c) {
        for (auto& v : c) v += 0.02 * jitter(rng);
        return c;
    };
    auto jr = [&](std::array<double, 3> r) {
        const double s = 1.0 + 0.03 * jitter(rng);
        for (auto& v : r) v *= s;
        return r;
    };

    using detail::Ellipsoid;
    // Later entries override earlier ones.
    const std::vector<Ellipsoid> regions{
        {jc({0.0, 0.0, 0.0}), jr({0.86, 0.74, 1.25}), Tissue::Csf},
        {jc({0.0, 0.0, 0.0}), jr({0.80, 0.68, 1.20}), Tissue::Gm},
        {jc({0.0, 0.0, 0.0}), jr({0.64, 0.52, 1.10}), Tissue::Wm},
        {jc({0.05, 0.30, 0.0}), jr({0.14, 0.08, 0.70}), Tissue::Gm},
        {jc({0.05, -0.30, 0.0}), jr({0.14, 0.08, 0.70}), Tissue::Gm},
        {jc({0.02, 0.14, 0.0}), jr({0.28, 0.07, 0.90}), Tissue::Csf},
        {jc({0.02, -0.14, 0.0}), jr({0.28, 0.07, 0.90}), Tissue::Csf},
        {jc({0.38, 0.22, 0.10}), jr({0.09, 0.09, 0.30}), Tissue::Lesion},
        {jc({-0.35, -0.28, -0.30}), jr({0.11, 0.11, 0.35}), Tissue::Lesion},
    };

    std::array<double, 4> phase_coef{}, freq_coef{};
    phase_coef[0] = 0.5 * jitter(rng);
    for (int i = 1; i < 4; ++i) phase_coef[i] = 0.4 * jitter(rng);
    for (auto& c : freq_coef) c = 0.25 * kPhantomMaxFreqHz * jitter(rng);

    GroundTruth gt{ParametricMaps(shape), Volume<std::uint8_t>(shape, 0), Volume<int>(shape, 0)};
    for (index_t x = 0; x < shape.nx; ++x) {
        const double u = detail::unit_coord(x, shape.nx);
        for (index_t y = 0; y < shape.ny; ++y) {
            const double v = detail::unit_coord(y, shape.ny);
            for (index_t z = 0; z < shape.nz; ++z) {
                const double w = detail::unit_coord(z, shape.nz);
                Tissue tissue = Tissue::Background;
                for (const auto& e : regions)
                    if (e.contains(u, v, w)) tissue = e.tissue;
                const index_t i = shape.offset(x, y, z);
                gt.region_labels[i] = static_cast<int>(tissue);
                if (tissue == Tissue::Background) continue;
                const auto tv = tissue_values(tissue);
                gt.brain_mask[i] = 1;
                gt.maps.a[i] = tv.a;
                gt.maps.b[i] = kPhantomInversionEfficiency;
                gt.maps.t1[i] = tv.t1;
                gt.maps.t2[i] = tv.t2;
                gt.maps.t2s[i] = tv.t2s;
                gt.maps.phi0[i] = phase_coef[0] + phase_coef[1] * u + phase_coef[2] * v + phase_coef[3] * w;
                gt.maps.freq[i] = freq_coef[0] + freq_coef[1] * u + freq_coef[2] * v + freq_coef[3] * u * v;
            }
        }
    }
    return gt;
}

/// Keeps slices [z0, z0 + nz) of every map, the mask and the labels.
inline GroundTruth crop_slices(const GroundTruth& gt, index_t z0, index_t nz) {
    const Dims3 d = gt.dims();
    if (z0 < 0 || nz < 1 || z0 + nz > d.nz)
        throw std::invalid_argument("crop_slices: range [" + std::to_string(z0) + ", " + std::to_string(z0 + nz) +
                                    ") outside D=" + std::to_string(d.nz));
    const Dims3 out{d.nx, d.ny, nz};
    GroundTruth r{ParametricMaps(out), Volume<std::uint8_t>(out, 0), Volume<int>(out, 0)};
    for (index_t x = 0; x < d.nx; ++x)
        for (index_t y = 0; y < d.ny; ++y)
            for (index_t z = 0; z < nz; ++z) {
                const index_t i = d.offset(x, y, z0 + z), j = out.offset(x, y, z);
                for (auto m : kAllMapTypes) r.maps[m][j] = gt.maps[m][i];
                r.brain_mask[j] = gt.brain_mask[i];
                r.region_labels[j] = gt.region_labels[i];
            }
    return r;
}

/// Normalises coil maps voxelwise: root-sum-of-squares 1 and the phase of
/// the coil sum (a virtual body coil) removed.
inline void normalize_coils(Stack<cplx>& maps) {
    const index_t nv = maps.voxels();
    for (index_t v = 0; v < nv; ++v) {
        double rss2 = 0.0;
        cplx sum{};
        for (index_t c = 0; c < maps.count(); ++c) {
            rss2 += std::norm(maps(c, v));
            sum += maps(c, v);
        }
        const double rss = std::sqrt(rss2);
        const double sabs = std::abs(sum);
        if (rss == 0.0 || sabs == 0.0) continue;
        const cplx scale = std::conj(sum) / (sabs * rss);
        for (index_t c = 0; c < maps.count(); ++c) maps(c, v) *= scale;
    }
}

/// Smooth birdcage-like sensitivities: Gaussian bumps on a ring around the
/// volume with slowly varying phase, low-pass filtered and normalised.
inline CoilMaps make_coil_maps(Dims3 shape, index_t n_coils, std::uint64_t seed) {
    if (n_coils < 1) throw std::invalid_argument("make_coil_maps: n_coils must be >= 1");
    if (!shape.valid()) throw std::invalid_argument("make_coil_maps: invalid shape " + to_string(shape));
    std::mt19937_64 rng(seed ^ 0x5eed'c011ULL);
    std::uniform_real_distribution<double> uni(-1.0, 1.0);

    const double half = 0.5 * static_cast<double>(std::max(shape.nx, shape.ny));
    constexpr double kSliceAspect = 2.0;
    constexpr double kRing = 1.4;
    constexpr double kWidth = 0.8;

    CoilMaps coils{Stack<cplx>(shape, n_coils)};
    for (index_t c = 0; c < n_coils; ++c) {
        const double theta = 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(n_coils) + 0.1 * uni(rng);
        const std::array<double, 3> centre{kRing * std::cos(theta), kRing * std::sin(theta), 0.3 * uni(rng)};
        const double base_phase = 0.25 * std::numbers::pi * uni(rng);
        const std::array<double, 3> ramp{0.3 * uni(rng), 0.3 * uni(rng), 0.3 * uni(rng)};
        auto vol = coils.maps.slice(c);
        for (index_t x = 0; x < shape.nx; ++x)
            for (index_t y = 0; y < shape.ny; ++y)
                for (index_t z = 0; z < shape.nz; ++z) {
                    const double px = (static_cast<double>(x) - 0.5 * static_cast<double>(shape.nx - 1)) / half;
                    const double py = (static_cast<double>(y) - 0.5 * static_cast<double>(shape.ny - 1)) / half;
                    const double pz =
                        kSliceAspect * (static_cast<double>(z) - 0.5 * static_cast<double>(shape.nz - 1)) / half;
                    const double d2 = (px - centre[0]) * (px - centre[0]) + (py - centre[1]) * (py - centre[1]) +
                                      (pz - centre[2]) * (pz - centre[2]);
                    const double mag = std::exp(-0.5 * d2 / (kWidth * kWidth));
                    const double ph = base_phase + ramp[0] * px + ramp[1] * py + ramp[2] * pz;
                    vol[shape.offset(x, y, z)] = std::polar(mag, ph);
                }
        detail::gaussian_smooth(vol, shape, {2.0, 2.0, 1.0});
    }
    normalize_coils(coils.maps);
    return coils;
}

}  // namespace qmri

#endif  // QMRI_PHANTOM_HPP
