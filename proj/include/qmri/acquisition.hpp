#ifndef QMRI_ACQUISITION_HPP
#define QMRI_ACQUISITION_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "qmri/array.hpp"
#include "qmri/fft.hpp"
#include "qmri/phantom.hpp"
#include "qmri/signal.hpp"

namespace qmri {

enum class MaskPattern { Full, UniformRandom, VariableDensity, ComplementaryShift };

inline std::string mask_pattern_name(MaskPattern p) {
    switch (p) {
        case MaskPattern::Full: return "FULL";
        case MaskPattern::UniformRandom: return "UNIFORM_RANDOM";
        case MaskPattern::VariableDensity: return "VARIABLE_DENSITY";
        case MaskPattern::ComplementaryShift: return "COMPLEMENTARY_SHIFT";
    }
    return "?";
}

inline MaskPattern mask_pattern_from_name(const std::string& s) {
    for (auto p : {MaskPattern::Full, MaskPattern::UniformRandom, MaskPattern::VariableDensity,
                   MaskPattern::ComplementaryShift})
        if (mask_pattern_name(p) == s) return p;
    throw std::invalid_argument("unknown mask pattern '" + s + "'");
}

/// Binary k-space sampling pattern, one volume per frame. Indices follow the
/// centred k-space layout produced by Fft3 (DC at n/2 along each axis).
struct SamplingMask {
    Dims3 dims;
    index_t frames = 0;
    MaskPattern pattern = MaskPattern::Full;
    std::uint64_t seed = 0;
    std::array<index_t, 3> calib_region{0, 0, 0};
    Stack<std::uint8_t> bits;

    bool operator()(index_t t, index_t v) const { return bits(t, v) != 0; }

    index_t sampled(index_t t) const {
        const auto s = bits.slice(t);
        return std::count(s.begin(), s.end(), std::uint8_t{1});
    }
    index_t sampled_total() const {
        return std::count(bits.values().begin(), bits.values().end(), std::uint8_t{1});
    }
    index_t total() const { return dims.voxels() * frames; }

    /// Sampled voxel indices per frame, in increasing order.
    std::vector<std::vector<index_t>> sampled_indices() const {
        std::vector<std::vector<index_t>> out(static_cast<std::size_t>(frames));
        for (index_t t = 0; t < frames; ++t)
            for (index_t v = 0; v < dims.voxels(); ++v)
                if (bits(t, v)) out[t].push_back(v);
        return out;
    }
};

/// Multi-coil, multi-frame k-space; layout [frame][coil][voxel].
struct KSpaceData {
    Dims3 dims;
    index_t coils = 0;
    index_t frames = 0;
    std::vector<cplx> data;
    SamplingMask mask;
    double noise_sigma = 0.0;

    KSpaceData() = default;
    KSpaceData(Dims3 d, index_t n_coils, index_t n_frames, SamplingMask m)
        : dims(d), coils(n_coils), frames(n_frames),
          data(static_cast<std::size_t>(d.voxels() * n_coils * n_frames)), mask(std::move(m)) {}

    std::span<cplx> at(index_t t, index_t c) {
        return {data.data() + (t * coils + c) * dims.voxels(), static_cast<std::size_t>(dims.voxels())};
    }
    std::span<const cplx> at(index_t t, index_t c) const {
        return {data.data() + (t * coils + c) * dims.voxels(), static_cast<std::size_t>(dims.voxels())};
    }
    double squared_norm() const { return qmri::squared_norm(std::span<const cplx>(data)); }
};

/// R = n_total / n_sampled over all frames.
inline double acceleration_factor(const SamplingMask& mask) {
    const index_t n = mask.sampled_total();
    if (n == 0) throw std::invalid_argument("acceleration_factor: mask samples no points");
    return static_cast<double>(mask.total()) / static_cast<double>(n);
}

struct MaskOptions {
    double vd_sigma = 0.3;   // fraction of the half extent
    bool fully_3d = false;   // false: in-plane (H, W) lines, fully sampled along D
};

/// Generates a sampling mask for `frames` frames at acceleration `target_r`.
inline SamplingMask make_mask(Dims3 dims, index_t frames, MaskPattern pattern, double target_r,
                              std::array<index_t, 3> calib_region, std::uint64_t seed, MaskOptions opts = {}) {
    if (!dims.valid() || frames < 1) throw std::invalid_argument("make_mask: invalid shape");
    if (!(target_r >= 1.0)) throw std::invalid_argument("make_mask: target R must be >= 1");
    SamplingMask m;
    m.dims = dims;
    m.frames = frames;
    m.pattern = pattern;
    m.seed = seed;
    m.calib_region = calib_region;
    m.bits = Stack<std::uint8_t>(dims, frames, 0);
    if (pattern == MaskPattern::Full) {
        std::fill(m.bits.values().begin(), m.bits.values().end(), std::uint8_t{1});
        return m;
    }

    // A "unit" is an in-plane line (x, y) or a single 3D point.
    const index_t nz_unit = opts.fully_3d ? 1 : dims.nz;
    const index_t n_units = dims.voxels() / nz_unit;
    const double wanted = static_cast<double>(n_units) / target_r;
    const auto per_frame = static_cast<index_t>(std::llround(wanted));
    if (per_frame < 1)
        throw std::invalid_argument("make_mask: target R " + std::to_string(target_r) +
                                    " exceeds the per-frame sampling budget of " + std::to_string(n_units) + " points");

    auto unit_coords = [&](index_t u, index_t& x, index_t& y, index_t& z) {
        if (opts.fully_3d) {
            z = u % dims.nz;
            y = (u / dims.nz) % dims.ny;
            x = u / (dims.nz * dims.ny);
        } else {
            z = 0;
            y = u % dims.ny;
            x = u / dims.ny;
        }
    };
    auto set_unit = [&](index_t t, index_t u) {
        index_t x, y, z;
        unit_coords(u, x, y, z);
        if (opts.fully_3d) {
            m.bits(t, dims.offset(x, y, z)) = 1;
        } else {
            for (index_t zz = 0; zz < dims.nz; ++zz) m.bits(t, dims.offset(x, y, zz)) = 1;
        }
    };

    auto in_block = [](index_t i, index_t n, index_t c) {
        const index_t lo = n / 2 - c / 2;
        return c > 0 && i >= lo && i < lo + c;
    };
    std::vector<std::uint8_t> is_calib(static_cast<std::size_t>(n_units), 0);
    index_t n_calib = 0;
    for (index_t u = 0; u < n_units; ++u) {
        index_t x, y, z;
        unit_coords(u, x, y, z);
        const bool inz = !opts.fully_3d || in_block(z, dims.nz, calib_region[2]);
        if (in_block(x, dims.nx, calib_region[0]) && in_block(y, dims.ny, calib_region[1]) && inz) {
            is_calib[u] = 1;
            ++n_calib;
        }
    }
    std::vector<index_t> free_units;
    for (index_t u = 0; u < n_units; ++u)
        if (!is_calib[u]) free_units.push_back(u);
    const index_t extra = std::clamp<index_t>(per_frame - n_calib, 0, static_cast<index_t>(free_units.size()));

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);

    std::vector<double> weight(free_units.size(), 1.0);
    if (pattern == MaskPattern::VariableDensity) {
        for (std::size_t i = 0; i < free_units.size(); ++i) {
            index_t x, y, z;
            unit_coords(free_units[i], x, y, z);
            const double kx = static_cast<double>(x - dims.nx / 2) / (0.5 * static_cast<double>(dims.nx));
            const double ky = static_cast<double>(y - dims.ny / 2) / (0.5 * static_cast<double>(dims.ny));
            double r2 = kx * kx + ky * ky;
            if (opts.fully_3d) {
                const double kz = static_cast<double>(z - dims.nz / 2) / (0.5 * static_cast<double>(dims.nz));
                r2 += kz * kz;
            }
            weight[i] = std::exp(-0.5 * r2 / (opts.vd_sigma * opts.vd_sigma));
        }
    }

    std::vector<index_t> perm(free_units.size());
    std::iota(perm.begin(), perm.end(), 0);
    if (pattern == MaskPattern::ComplementaryShift) std::shuffle(perm.begin(), perm.end(), rng);

    std::vector<std::pair<double, index_t>> keys(free_units.size());
    for (index_t t = 0; t < frames; ++t) {
        for (index_t u = 0; u < n_units; ++u)
            if (is_calib[u]) set_unit(t, u);
        if (extra == 0) continue;
        if (pattern == MaskPattern::ComplementaryShift) {
            // Consecutive frames take consecutive windows of one fixed permutation.
            const auto nf = static_cast<index_t>(free_units.size());
            const index_t start = (t * extra) % nf;
            for (index_t j = 0; j < extra; ++j) set_unit(t, free_units[perm[(start + j) % nf]]);
        } else {
            // Weighted sampling without replacement (exponential-key method).
            for (std::size_t i = 0; i < free_units.size(); ++i) {
                const double u = std::max(uni(rng), 1e-300);
                keys[i] = {weight[i] > 0.0 ? std::log(u) / weight[i] : -1e300, static_cast<index_t>(i)};
            }
            std::nth_element(keys.begin(), keys.begin() + extra, keys.end(),
                             [](const auto& a, const auto& b) { return a.first > b.first; });
            for (index_t j = 0; j < extra; ++j) set_unit(t, free_units[keys[j].second]);
        }
    }
    return m;
}

/// Coil-modulated, masked, centred orthonormal FFT in scalar type S.
/// Shared by the public double-precision operators and the solvers.
template <class S>
class SenseOperator {
public:
    SenseOperator(const CoilMaps& coils, const SamplingMask& mask) : fft_(coils.dims()), mask_(&mask) {
        require_same_dims(coils.dims(), mask.dims, "SenseOperator coils vs mask");
        set_coils(coils.maps);
        sampled_ = mask.sampled_indices();
        tmp_.resize(static_cast<std::size_t>(coils.dims().voxels()));
    }

    index_t coils() const { return n_coils_; }
    index_t frames() const { return mask_->frames; }
    const Dims3& dims() const { return fft_.dims(); }
    index_t voxels() const { return fft_.dims().voxels(); }
    const std::vector<std::vector<index_t>>& sampled() const { return sampled_; }
    const SamplingMask& mask() const { return *mask_; }
    const std::vector<cx<S>>& coil_values() const { return coils_; }
    Fft3<S>& fft() { return fft_; }

    template <class T>
    void set_coils(const Stack<T>& maps) {
        require_same_dims(maps.dims(), fft_.dims(), "SenseOperator coils");
        n_coils_ = maps.count();
        coils_.resize(maps.values().size());
        for (std::size_t i = 0; i < coils_.size(); ++i) coils_[i] = static_cast<cx<S>>(maps.values()[i]);
    }
    void set_coils(std::span<const cx<S>> maps, index_t n_coils) {
        n_coils_ = n_coils;
        coils_.assign(maps.begin(), maps.end());
    }

    std::span<const cx<S>> coil(index_t c) const {
        return {coils_.data() + c * voxels(), static_cast<std::size_t>(voxels())};
    }

    /// out = F(C_c * img), no mask.
    void coil_forward(std::span<const cx<S>> img, index_t c, std::span<cx<S>> out) {
        const auto cc = coil(c);
        for (index_t v = 0; v < voxels(); ++v) tmp_[v] = cc[v] * img[v];
        fft_.forward(tmp_, out);
    }

    /// img_acc += conj(C_c) * F^-1(k). k is overwritten.
    void coil_adjoint_accumulate(std::span<cx<S>> k, index_t c, std::span<cx<S>> img_acc) {
        fft_.inverse(k, k);
        const auto cc = coil(c);
        for (index_t v = 0; v < voxels(); ++v) img_acc[v] += std::conj(cc[v]) * k[v];
    }

    /// Full forward: ks[t][c][v] = M_t F(C_c img_t).
    void forward(const Stack<cx<S>>& images, std::vector<cx<S>>& ks) {
        ks.assign(static_cast<std::size_t>(frames() * n_coils_ * voxels()), cx<S>{});
        std::vector<cx<S>> buf(static_cast<std::size_t>(voxels()));
        for (index_t t = 0; t < frames(); ++t)
            for (index_t c = 0; c < n_coils_; ++c) {
                coil_forward(images.slice(t), c, buf);
                cx<S>* dst = ks.data() + (t * n_coils_ + c) * voxels();
                for (index_t v : sampled_[t]) dst[v] = buf[v];
            }
    }

    /// Exact adjoint of forward.
    void adjoint(const std::vector<cx<S>>& ks, Stack<cx<S>>& images) {
        images = Stack<cx<S>>(dims(), frames());
        std::vector<cx<S>> buf(static_cast<std::size_t>(voxels()));
        for (index_t t = 0; t < frames(); ++t)
            for (index_t c = 0; c < n_coils_; ++c) {
                std::fill(buf.begin(), buf.end(), cx<S>{});
                const cx<S>* src = ks.data() + (t * n_coils_ + c) * voxels();
                for (index_t v : sampled_[t]) buf[v] = src[v];
                coil_adjoint_accumulate(buf, c, images.slice(t));
            }
    }

private:
    Fft3<S> fft_;
    const SamplingMask* mask_;
    index_t n_coils_ = 0;
    std::vector<cx<S>> coils_;
    std::vector<std::vector<index_t>> sampled_;
    std::vector<cx<S>> tmp_;
};

namespace detail {

inline void check_forward_shapes(const Dims3& img, index_t frames, const CoilMaps& coils, const SamplingMask& mask) {
    require_same_dims(img, coils.dims(), "forward: images vs coil maps");
    require_same_dims(img, mask.dims, "forward: images vs mask");
    if (frames != mask.frames)
        throw std::invalid_argument("forward: extent mismatch on axis T (images " + std::to_string(frames) +
                                    ", mask " + std::to_string(mask.frames) + ")");
}

}  // namespace detail

/// S_k = M F C I_w.
inline KSpaceData forward(const WeightedImages& iw, const CoilMaps& coils, const SamplingMask& mask) {
    detail::check_forward_shapes(iw.dims(), iw.frames(), coils, mask);
    SenseOperator<double> op(coils, mask);
    KSpaceData ks(iw.dims(), coils.n_coils(), iw.frames(), mask);
    op.forward(iw.data, ks.data);
    return ks;
}

/// Adjoint of forward: coil-combined with conjugate sensitivities.
inline WeightedImages adjoint(const KSpaceData& ks, const CoilMaps& coils) {
    detail::check_forward_shapes(ks.dims, ks.frames, coils, ks.mask);
    if (ks.coils != coils.n_coils())
        throw std::invalid_argument("adjoint: extent mismatch on axis C (k-space " + std::to_string(ks.coils) +
                                    ", coil maps " + std::to_string(coils.n_coils()) + ")");
    SenseOperator<double> op(coils, ks.mask);
    WeightedImages out;
    op.adjoint(ks.data, out.data);
    return out;
}

/// Adds i.i.d. complex Gaussian noise (std sigma per component) at sampled
/// locations only.
inline KSpaceData add_noise(const KSpaceData& ks, double sigma, std::uint64_t seed) {
    if (sigma < 0.0) throw std::invalid_argument("add_noise: sigma must be >= 0");
    KSpaceData out = ks;
    out.noise_sigma = std::sqrt(ks.noise_sigma * ks.noise_sigma + sigma * sigma);
    if (sigma == 0.0) return out;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, sigma);
    for (index_t t = 0; t < ks.frames; ++t)
        for (index_t c = 0; c < ks.coils; ++c) {
            auto dst = out.at(t, c);
            for (index_t v = 0; v < ks.dims.voxels(); ++v)
                if (ks.mask(t, v)) {
                    const double re = gauss(rng);
                    const double im = gauss(rng);
                    dst[v] += cplx(re, im);
                }
        }
    return out;
}

/// Largest |k-space| sample; used to express noise levels relative to it.
inline double peak_magnitude(const KSpaceData& ks) {
    double peak = 0.0;
    for (const auto& v : ks.data) peak = std::max(peak, std::abs(v));
    return peak;
}

}  // namespace qmri

#endif  // QMRI_ACQUISITION_HPP
