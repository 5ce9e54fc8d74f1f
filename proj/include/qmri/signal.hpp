#ifndef QMRI_SIGNAL_HPP
#define QMRI_SIGNAL_HPP

#include <cmath>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qmri/array.hpp"
#include "qmri/maps.hpp"
#include "qmri/phantom.hpp"

namespace qmri {

enum class SequenceKind { VfaMegre, T2irGre };

/// Which acquisition parameters a frame uses: `prep` indexes the flip angle
/// (VFA_MEGRE) or the preparation time tau (T2IR_GRE).
struct FrameSpec {
    index_t prep = 0;
    index_t echo = 0;
    index_t segment = 0;
};

struct SequenceProtocol {
    SequenceKind kind = SequenceKind::VfaMegre;
    double tr_ms = 0.0;
    std::vector<double> te_ms;
    std::vector<double> flip_deg;  // one readout angle for T2IR_GRE
    std::vector<double> tau_ms;
    index_t n_segments = 1;

    index_t echoes() const { return static_cast<index_t>(te_ms.size()); }

    index_t frames() const {
        if (kind == SequenceKind::VfaMegre) return static_cast<index_t>(flip_deg.size()) * echoes();
        return static_cast<index_t>(tau_ms.size()) * n_segments * echoes();
    }

    /// Frame order: flip-major then echo (VFA_MEGRE); tau-major, then
    /// segment, then echo (T2IR_GRE).
    FrameSpec frame(index_t t) const {
        if (t < 0 || t >= frames()) throw std::out_of_range("frame index " + std::to_string(t) + " out of range");
        FrameSpec f;
        f.echo = t % echoes();
        if (kind == SequenceKind::VfaMegre) {
            f.prep = t / echoes();
        } else {
            const index_t rest = t / echoes();
            f.segment = rest % n_segments;
            f.prep = rest / n_segments;
        }
        return f;
    }

    bool uses(MapType m) const {
        switch (m) {
            case MapType::A:
            case MapType::T1:
            case MapType::T2s:
            case MapType::Phi0:
            case MapType::Freq: return true;
            case MapType::T2:
            case MapType::B: return kind == SequenceKind::T2irGre;
        }
        return false;
    }

    std::vector<MapType> active_maps() const {
        std::vector<MapType> out;
        for (auto m : kAllMapTypes)
            if (uses(m)) out.push_back(m);
        return out;
    }

    void validate() const {
        if (!(tr_ms > 0.0)) throw std::invalid_argument("protocol: TR must be > 0");
        if (te_ms.empty()) throw std::invalid_argument("protocol: at least one echo time required");
        for (double te : te_ms)
            if (!(te > 0.0)) throw std::invalid_argument("protocol: echo times must be > 0");
        if (flip_deg.empty()) throw std::invalid_argument("protocol: at least one flip angle required");
        for (double a : flip_deg)
            if (!(a > 0.0 && a <= 90.0)) throw std::invalid_argument("protocol: flip angles must lie in (0, 90] deg");
        if (kind == SequenceKind::T2irGre) {
            if (flip_deg.size() != 1) throw std::invalid_argument("protocol: T2IR_GRE uses exactly one flip angle");
            if (tau_ms.empty()) throw std::invalid_argument("protocol: T2IR_GRE needs at least one tau");
            for (double tau : tau_ms)
                if (tau < 0.0) throw std::invalid_argument("protocol: tau must be >= 0");
            if (n_segments < 1) throw std::invalid_argument("protocol: n_segments must be >= 1");
        }
    }

    static SequenceProtocol vfa_megre(double tr, std::vector<double> te, std::vector<double> flips) {
        SequenceProtocol p;
        p.kind = SequenceKind::VfaMegre;
        p.tr_ms = tr;
        p.te_ms = std::move(te);
        p.flip_deg = std::move(flips);
        p.validate();
        return p;
    }

    static SequenceProtocol t2ir_gre(double tr, std::vector<double> te, std::vector<double> tau, double flip,
                                     index_t n_segments) {
        SequenceProtocol p;
        p.kind = SequenceKind::T2irGre;
        p.tr_ms = tr;
        p.te_ms = std::move(te);
        p.tau_ms = std::move(tau);
        p.flip_deg = {flip};
        p.n_segments = n_segments;
        p.validate();
        return p;
    }
};

/// Multi-echo VFA protocol: TR 46 ms, 12 echoes 2.15..35.70 ms, 5 flips.
inline SequenceProtocol dataset1_protocol() {
    std::vector<double> te;
    for (int e = 0; e < 12; ++e) te.push_back(2.15 + 3.05 * e);
    return SequenceProtocol::vfa_megre(46.0, te, {5.0, 10.0, 20.0, 30.0, 40.0});
}

/// T2-prepared IR GRE protocol. The acquisition this mirrors used 80
/// segments; the desk default is 20.
inline SequenceProtocol dataset2_protocol(index_t n_segments = 20) {
    return SequenceProtocol::t2ir_gre(30.0, {4.5, 11.2, 17.9, 24.6}, {25.0, 50.0, 70.0, 90.0}, 10.0, n_segments);
}

/// Tissue parameters of one voxel.
template <class S>
struct VoxelParams {
    S a{0}, b{1}, t1{0}, t2{0}, t2s{0}, phi0{0}, freq{0};
};

template <class S>
struct SignalPartials {
    cx<S> a, b, t1, t2, t2s, phi0, freq;

    cx<S> operator[](MapType m) const {
        switch (m) {
            case MapType::A: return a;
            case MapType::B: return b;
            case MapType::T1: return t1;
            case MapType::T2: return t2;
            case MapType::T2s: return t2s;
            case MapType::Phi0: return phi0;
            case MapType::Freq: return freq;
        }
        return {};
    }
};

/// Per-frame constants of a protocol, precomputed in scalar type S.
template <class S>
struct FrameTable {
    SequenceKind kind;
    S tr;
    struct Entry {
        S sin_a, cos_a, te, tau;
        int segment;
    };
    std::vector<Entry> entries;

    explicit FrameTable(const SequenceProtocol& p) : kind(p.kind), tr(static_cast<S>(p.tr_ms)) {
        p.validate();
        entries.reserve(static_cast<std::size_t>(p.frames()));
        for (index_t t = 0; t < p.frames(); ++t) {
            const auto f = p.frame(t);
            const double alpha =
                (p.kind == SequenceKind::VfaMegre ? p.flip_deg[f.prep] : p.flip_deg[0]) * std::numbers::pi / 180.0;
            Entry e;
            e.sin_a = static_cast<S>(std::sin(alpha));
            e.cos_a = static_cast<S>(std::cos(alpha));
            e.te = static_cast<S>(p.te_ms[f.echo]);
            e.tau = p.kind == SequenceKind::T2irGre ? static_cast<S>(p.tau_ms[f.prep]) : S(0);
            e.segment = static_cast<int>(f.segment);
            entries.push_back(e);
        }
    }

    index_t frames() const { return static_cast<index_t>(entries.size()); }
};

/// Evaluates the Bloch signal of one frame. The VFA_MEGRE model is the
/// spoiled-GRE steady state with T2* decay and echo phase; T2IR_GRE
/// multiplies it by the T2-prepared inversion-recovery bracket
/// 1 + (B exp(-tau/T2) - 1) (exp(-TR/T1) cos a)^n. The echo phase is
/// phi0 + 2 pi freq TE. Optional partials are w.r.t. every parameter.
template <class S>
cx<S> frame_signal(const FrameTable<S>& table, index_t t, const VoxelParams<S>& p,
                   SignalPartials<S>* d = nullptr) {
    using std::exp;
    const auto& e = table.entries[static_cast<std::size_t>(t)];
    const S e1 = exp(-table.tr / p.t1);
    const S denom = S(1) - e1 * e.cos_a;
    const S ss = (S(1) - e1) / denom * e.sin_a;
    const S decay = exp(-e.te / p.t2s);
    const S angle = p.phi0 + S(2) * std::numbers::pi_v<S> * p.freq * e.te * S(1e-3);
    const cx<S> phase(std::cos(angle), std::sin(angle));

    S bracket = S(1);
    S dbracket_de1 = S(0), dbracket_db = S(0), dbracket_dt2 = S(0);
    if (table.kind == SequenceKind::T2irGre) {
        const S q = e1 * e.cos_a;
        const S qn = e.segment == 0 ? S(1) : static_cast<S>(std::pow(q, e.segment));
        const S prep = exp(-e.tau / p.t2);
        bracket = S(1) + (p.b * prep - S(1)) * qn;
        if (d) {
            const S dqn_dq = e.segment == 0 ? S(0) : S(e.segment) * static_cast<S>(std::pow(q, e.segment - 1));
            dbracket_de1 = (p.b * prep - S(1)) * dqn_dq * e.cos_a;
            dbracket_db = prep * qn;
            dbracket_dt2 = p.b * prep * e.tau / (p.t2 * p.t2) * qn;
        }
    }

    const cx<S> base = ss * decay * phase;
    const cx<S> s = p.a * base * bracket;
    if (d) {
        const S dss_de1 = (e.cos_a - S(1)) / (denom * denom) * e.sin_a;
        const S de1_dt1 = e1 * table.tr / (p.t1 * p.t1);
        d->a = base * bracket;
        d->t1 = p.a * decay * phase * (dss_de1 * bracket + ss * dbracket_de1) * de1_dt1;
        d->t2s = s * (e.te / (p.t2s * p.t2s));
        d->phi0 = s * cx<S>(0, 1);
        d->freq = s * cx<S>(0, S(2) * std::numbers::pi_v<S> * e.te * S(1e-3));
        d->b = p.a * base * dbracket_db;
        d->t2 = p.a * base * dbracket_dt2;
    }
    return s;
}

struct WeightedImages {
    Stack<cplx> data;  // count = frames
    std::optional<SequenceProtocol> protocol;

    index_t frames() const { return data.count(); }
    const Dims3& dims() const { return data.dims(); }
};

namespace detail {

inline VoxelParams<double> voxel_params(const ParametricMaps& m, index_t i) {
    return {m.a[i], m.b[i], m.t1[i], m.t2[i], m.t2s[i], m.phi0[i], m.freq[i]};
}

inline void check_voxel(const SequenceProtocol& protocol, const VoxelParams<double>& p, index_t i) {
    if (!(p.t1 > 0.0) || !(p.t2s > 0.0) || (protocol.kind == SequenceKind::T2irGre && !(p.t2 > 0.0)))
        throw std::invalid_argument("signal model: non-positive relaxation time at voxel " + std::to_string(i));
}

inline WeightedImages simulate(const ParametricMaps& maps, const SequenceProtocol& protocol) {
    const FrameTable<double> table(protocol);
    const Dims3 dims = maps.dims();
    WeightedImages iw{Stack<cplx>(dims, table.frames()), protocol};
    for (index_t i = 0; i < dims.voxels(); ++i) {
        const auto p = voxel_params(maps, i);
        if (p.a == 0.0) continue;
        check_voxel(protocol, p, i);
        for (index_t t = 0; t < table.frames(); ++t) iw.data(t, i) = frame_signal(table, t, p);
    }
    return iw;
}

}  // namespace detail

inline WeightedImages signal_vfa_megre(const ParametricMaps& maps, const SequenceProtocol& protocol) {
    if (protocol.kind != SequenceKind::VfaMegre)
        throw std::invalid_argument("signal_vfa_megre: protocol kind must be VFA_MEGRE");
    return detail::simulate(maps, protocol);
}

inline WeightedImages signal_t2ir_gre(const ParametricMaps& maps, const SequenceProtocol& protocol) {
    if (protocol.kind != SequenceKind::T2irGre)
        throw std::invalid_argument("signal_t2ir_gre: protocol kind must be T2IR_GRE");
    return detail::simulate(maps, protocol);
}

/// Dispatches on the protocol kind.
inline WeightedImages simulate_signal(const ParametricMaps& maps, const SequenceProtocol& protocol) {
    return detail::simulate(maps, protocol);
}

/// Dictionary of unit-norm signal evolutions (A = 1, phi0 = 0). Entries may
/// carry an off-resonance frequency, which makes rows complex.
inline Eigen::MatrixXcd build_dictionary(const SequenceProtocol& protocol,
                                         const std::vector<VoxelParams<double>>& grid) {
    if (grid.empty()) throw std::invalid_argument("build_dictionary: empty parameter grid");
    const FrameTable<double> table(protocol);
    Eigen::MatrixXcd dict(static_cast<index_t>(grid.size()), table.frames());
    for (std::size_t i = 0; i < grid.size(); ++i) {
        VoxelParams<double> p = grid[i];
        const bool bad = !(p.t1 > 0.0) || !(p.t2s > 0.0) ||
                         (protocol.kind == SequenceKind::T2irGre && (!(p.t2 > 0.0) || p.b < 0.0 || p.b > 1.0));
        if (bad) throw std::invalid_argument("build_dictionary: invalid parameter tuple at index " + std::to_string(i));
        p.a = 1.0;
        p.phi0 = 0.0;
        for (index_t t = 0; t < table.frames(); ++t) dict(static_cast<index_t>(i), t) = frame_signal(table, t, p);
        const double n = dict.row(static_cast<index_t>(i)).norm();
        if (!(n > 0.0)) throw std::invalid_argument("build_dictionary: zero signal at index " + std::to_string(i));
        dict.row(static_cast<index_t>(i)) /= n;
    }
    return dict;
}

/// T1 400..4000 step 200 ms x T2* 10..150 step 10 ms, on resonance.
inline std::vector<VoxelParams<double>> vfa_default_grid() {
    std::vector<VoxelParams<double>> grid;
    for (int t1 = 400; t1 <= 4000; t1 += 200)
        for (int t2s = 10; t2s <= 150; t2s += 10) {
            VoxelParams<double> p;
            p.t1 = t1;
            p.t2s = t2s;
            p.t2 = t2s;
            grid.push_back(p);
        }
    return grid;
}

/// The default grid repeated over an off-resonance axis [-max, max].
inline std::vector<VoxelParams<double>> vfa_offresonance_grid(double freq_max_hz, double freq_step_hz) {
    if (freq_max_hz < 0.0 || (freq_max_hz > 0.0 && !(freq_step_hz > 0.0)))
        throw std::invalid_argument("vfa_offresonance_grid: bad frequency range");
    std::vector<VoxelParams<double>> grid;
    const auto base = vfa_default_grid();
    const int steps = freq_max_hz > 0.0 ? static_cast<int>(std::floor(freq_max_hz / freq_step_hz + 1e-9)) : 0;
    for (const auto& p : base)
        for (int k = -steps; k <= steps; ++k) {
            auto q = p;
            q.freq = k * freq_step_hz;
            grid.push_back(q);
        }
    return grid;
}

/// Coarse T1 x T2 x T2* x B grid for the T2IR_GRE model.
inline std::vector<VoxelParams<double>> t2ir_default_grid(double freq_max_hz = 0.0, double freq_step_hz = 1.0) {
    std::vector<VoxelParams<double>> grid;
    const int steps = freq_max_hz > 0.0 ? static_cast<int>(std::floor(freq_max_hz / freq_step_hz + 1e-9)) : 0;
    for (int t1 = 400; t1 <= 4000; t1 += 400)
        for (double t2 : {30.0, 50.0, 70.0, 90.0, 120.0, 160.0, 250.0, 400.0, 1500.0})
            for (double t2s : {15.0, 25.0, 35.0, 50.0, 70.0, 100.0, 150.0, 800.0})
                for (double b : {0.8, 0.95, 1.0}) {
                    if (t2s > t2) continue;
                    for (int k = -steps; k <= steps; ++k) {
                        VoxelParams<double> p;
                        p.t1 = t1;
                        p.t2 = t2;
                        p.t2s = t2s;
                        p.b = b;
                        p.freq = k * freq_step_hz;
                        grid.push_back(p);
                    }
                }
    return grid;
}

}  // namespace qmri

#endif  // QMRI_SIGNAL_HPP
