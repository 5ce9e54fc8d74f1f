#ifndef QMRI_BASELINES_HPP
#define QMRI_BASELINES_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qmri/acquisition.hpp"
#include "qmri/phantom.hpp"
#include "qmri/signal.hpp"
#include "qmri/subspace.hpp"

namespace qmri {

namespace detail {

inline void check_recon_inputs(const KSpaceData& ks, const CoilMaps& coils, const TemporalBasis& phi,
                               const char* who) {
    require_same_dims(ks.dims, coils.dims(), std::string(who) + ": k-space vs coil maps");
    if (ks.coils != coils.n_coils())
        throw std::invalid_argument(std::string(who) + ": extent mismatch on axis C (k-space " +
                                    std::to_string(ks.coils) + ", coil maps " + std::to_string(coils.n_coils()) + ")");
    if (ks.frames != phi.frames())
        throw std::invalid_argument(std::string(who) + ": extent mismatch on axis T (k-space " +
                                    std::to_string(ks.frames) + ", basis " + std::to_string(phi.frames()) + ")");
}

/// A = M F C Phi acting on spatial bases, with its adjoint and normal map.
class SubspaceOperator {
public:
    SubspaceOperator(const KSpaceData& ks, const CoilMaps& coils, const TemporalBasis& phi)
        : op_(coils, ks.mask), phi_(phi.phi), ks_(&ks), k_(phi.rank()) {}

    index_t rank() const { return k_; }
    const Dims3& dims() const { return op_.dims(); }

    SpatialBases adjoint_data() {
        Stack<cplx> iw;
        op_.adjoint(ks_->data, iw);
        return project_to_subspace(iw, TemporalBasis{phi_, {}});
    }

    /// A^H A u
    SpatialBases normal(const SpatialBases& u) {
        const index_t nv = op_.voxels(), nc = op_.coils(), nt = op_.frames();
        SpatialBases out(dims(), k_);
        std::vector<cplx> x(static_cast<std::size_t>(nv * k_)), y(x.size()), buf(static_cast<std::size_t>(nv));
        for (index_t c = 0; c < nc; ++c) {
            for (index_t k = 0; k < k_; ++k) {
                op_.coil_forward(u.slice(k), c, buf);
                for (index_t v = 0; v < nv; ++v) x[v * k_ + k] = buf[v];
            }
            std::fill(y.begin(), y.end(), cplx{});
            for (index_t t = 0; t < nt; ++t) {
                const auto ph = phi_.col(t);
                for (index_t v : op_.sampled()[t]) {
                    const cplx* xv = x.data() + v * k_;
                    cplx pred{};
                    for (index_t k = 0; k < k_; ++k) pred += ph[k] * xv[k];
                    cplx* yv = y.data() + v * k_;
                    for (index_t k = 0; k < k_; ++k) yv[k] += std::conj(ph[k]) * pred;
                }
            }
            for (index_t k = 0; k < k_; ++k) {
                for (index_t v = 0; v < nv; ++v) buf[v] = y[v * k_ + k];
                op_.coil_adjoint_accumulate(buf, c, out.slice(k));
            }
        }
        return out;
    }

private:
    SenseOperator<double> op_;
    Eigen::MatrixXcd phi_;
    const KSpaceData* ks_;
    index_t k_;
};

// Forward differences with a zero last row along each axis; channel-wise.
inline std::array<SpatialBases, 3> gradient3(const SpatialBases& u) {
    const Dims3 d = u.dims();
    std::array<SpatialBases, 3> g{SpatialBases(d, u.count()), SpatialBases(d, u.count()), SpatialBases(d, u.count())};
    for (index_t k = 0; k < u.count(); ++k)
        for (index_t x = 0; x < d.nx; ++x)
            for (index_t y = 0; y < d.ny; ++y)
                for (index_t z = 0; z < d.nz; ++z) {
                    const index_t o = d.offset(x, y, z);
                    const cplx c = u(k, o);
                    if (x + 1 < d.nx) g[0](k, o) = u(k, d.offset(x + 1, y, z)) - c;
                    if (y + 1 < d.ny) g[1](k, o) = u(k, d.offset(x, y + 1, z)) - c;
                    if (z + 1 < d.nz) g[2](k, o) = u(k, d.offset(x, y, z + 1)) - c;
                }
    return g;
}

// Adjoint of gradient3.
inline SpatialBases gradient3_adjoint(const std::array<SpatialBases, 3>& g) {
    const Dims3 d = g[0].dims();
    SpatialBases out(d, g[0].count());
    for (index_t k = 0; k < out.count(); ++k)
        for (index_t x = 0; x < d.nx; ++x)
            for (index_t y = 0; y < d.ny; ++y)
                for (index_t z = 0; z < d.nz; ++z) {
                    const index_t o = d.offset(x, y, z);
                    cplx acc{};
                    if (x + 1 < d.nx) acc -= g[0](k, o);
                    if (x > 0) acc += g[0](k, d.offset(x - 1, y, z));
                    if (y + 1 < d.ny) acc -= g[1](k, o);
                    if (y > 0) acc += g[1](k, d.offset(x, y - 1, z));
                    if (z + 1 < d.nz) acc -= g[2](k, o);
                    if (z > 0) acc += g[2](k, d.offset(x, y, z - 1));
                    out(k, o) = acc;
                }
    return out;
}

inline double real_dot(const SpatialBases& a, const SpatialBases& b) {
    double acc = 0.0;
    for (index_t i = 0; i < a.size(); ++i) acc += (std::conj(a[i]) * b[i]).real();
    return acc;
}

inline void axpy(cplx alpha, const SpatialBases& x, SpatialBases& y) {
    for (index_t i = 0; i < y.size(); ++i) y[i] += alpha * x[i];
}

}  // namespace detail

/// Zero-filled subspace reconstruction: Phi x project(A^H S).
inline WeightedImages recon_zero_filled(const KSpaceData& ks, const CoilMaps& coils, const TemporalBasis& phi) {
    detail::check_recon_inputs(ks, coils, phi, "recon_zero_filled");
    return {compose_weighted(project_to_subspace(adjoint(ks, coils), phi), phi), std::nullopt};
}

struct AdmmConfig {
    double lambda_tv = 0.0;
    double rho = 0.0;  // 0 selects 10 * lambda_tv, or 1e-3 when lambda_tv is 0
    int max_iters = 40;
    int cg_iters = 10;
    double tol = 1e-4;

    double effective_rho() const { return rho > 0 ? rho : (lambda_tv > 0 ? 10.0 * lambda_tv : 1e-3); }

    void validate() const {
        if (!(lambda_tv >= 0)) throw std::invalid_argument("AdmmConfig: lambda_tv must be >= 0");
        if (rho < 0) throw std::invalid_argument("AdmmConfig: rho must be > 0");
        if (max_iters < 1) throw std::invalid_argument("AdmmConfig: max_iters must be >= 1");
        if (cg_iters < 1) throw std::invalid_argument("AdmmConfig: cg_iters must be >= 1");
        if (!(tol > 0)) throw std::invalid_argument("AdmmConfig: tol must be > 0");
    }
};

struct AdmmTrace {
    std::vector<double> primal_residual;  // ||grad U - Z|| / max(||grad U||, ||Z||)
    int iterations = 0;
};

/// max |A^H S| over bases and voxels; the reference scale for lambda_tv.
inline double admm_lambda_scale(const KSpaceData& ks, const CoilMaps& coils, const TemporalBasis& phi) {
    detail::check_recon_inputs(ks, coils, phi, "admm_lambda_scale");
    detail::SubspaceOperator a(ks, coils, phi);
    const auto b = a.adjoint_data();
    double m = 0.0;
    for (const auto& v : b.values()) m = std::max(m, std::abs(v));
    return m;
}

/// argmin_U 1/2 ||S - M F C Phi U||^2 + lambda TV(U), isotropic TV per basis
/// channel over the complex magnitude of the 3D gradient.
inline SpatialBases recon_lrt_admm(const KSpaceData& ks, const CoilMaps& coils, const TemporalBasis& phi,
                                   const AdmmConfig& cfg, AdmmTrace* trace = nullptr) {
    cfg.validate();
    detail::check_recon_inputs(ks, coils, phi, "recon_lrt_admm");
    detail::SubspaceOperator a(ks, coils, phi);
    const double rho = cfg.effective_rho();
    const SpatialBases b = a.adjoint_data();
    SpatialBases u = b;
    const Dims3 d = u.dims();
    const index_t kk = u.count();
    std::array<SpatialBases, 3> z = detail::gradient3(u);
    std::array<SpatialBases, 3> w{SpatialBases(d, kk), SpatialBases(d, kk), SpatialBases(d, kk)};
    AdmmTrace local;
    AdmmTrace& tr = trace ? *trace : local;
    tr = {};

    auto apply = [&](const SpatialBases& x) {
        SpatialBases y = a.normal(x);
        detail::axpy(rho, detail::gradient3_adjoint(detail::gradient3(x)), y);
        return y;
    };

    int growth = 0;
    for (int it = 0; it < cfg.max_iters; ++it) {
        // U-update by conjugate gradients, warm-started at the current U.
        std::array<SpatialBases, 3> zw{z[0], z[1], z[2]};
        for (int j = 0; j < 3; ++j) detail::axpy(-1.0, w[j], zw[j]);
        SpatialBases rhs = b;
        detail::axpy(rho, detail::gradient3_adjoint(zw), rhs);
        SpatialBases r = rhs;
        detail::axpy(-1.0, apply(u), r);
        SpatialBases p = r;
        double rr = detail::real_dot(r, r);
        const double rr0 = detail::real_dot(rhs, rhs);
        for (int c = 0; c < cfg.cg_iters && rr > 1e-28 * rr0; ++c) {
            const SpatialBases ap = apply(p);
            const double pap = detail::real_dot(p, ap);
            if (!(pap > 0)) break;
            const double alpha = rr / pap;
            detail::axpy(alpha, p, u);
            detail::axpy(-alpha, ap, r);
            const double rr_new = detail::real_dot(r, r);
            const double beta = rr_new / rr;
            for (index_t i = 0; i < p.size(); ++i) p[i] = r[i] + beta * p[i];
            rr = rr_new;
        }

        // Z-update: vector shrinkage over the three complex differences.
        const auto g = detail::gradient3(u);
        const double thr = cfg.lambda_tv / rho;
        double num = 0.0, gn = 0.0, zn = 0.0;
        for (index_t i = 0; i < g[0].size(); ++i) {
            cplx q[3];
            double mag2 = 0.0;
            for (int j = 0; j < 3; ++j) {
                q[j] = g[j][i] + w[j][i];
                mag2 += std::norm(q[j]);
            }
            const double mag = std::sqrt(mag2);
            const double s = mag > thr ? (mag - thr) / mag : 0.0;
            for (int j = 0; j < 3; ++j) {
                z[j][i] = s * q[j];
                const cplx diff = g[j][i] - z[j][i];
                w[j][i] += diff;
                num += std::norm(diff);
                gn += std::norm(g[j][i]);
                zn += std::norm(z[j][i]);
            }
        }
        const double denom = std::max({std::sqrt(gn), std::sqrt(zn), 1e-300});
        const double res = std::sqrt(num) / denom;
        if (!std::isfinite(res)) {
            std::ostringstream os;
            os << "recon_lrt_admm: non-finite residual at iteration " << it;
            throw std::runtime_error(os.str());
        }
        growth = (!tr.primal_residual.empty() && res > tr.primal_residual.back() && res > cfg.tol) ? growth + 1 : 0;
        tr.primal_residual.push_back(res);
        tr.iterations = it + 1;
        if (growth >= 10) {
            std::ostringstream os;
            os << "recon_lrt_admm: primal residual grew for 10 consecutive iterations; trace:";
            for (double v : tr.primal_residual) os << ' ' << v;
            throw std::runtime_error(os.str());
        }
        if (res < cfg.tol) break;
    }
    return u;
}

// ---- Voxelwise nonlinear least squares -------------------------------------

struct NllsOptions {
    std::vector<double> t1_seeds{500.0, 1200.0, 3000.0};
    double t2s_seed = 50.0;
    double t2_seed = 80.0;
    double b_seed = 0.9;
    int max_iters = 200;
    double tol = 1e-12;
};

struct NllsResult {
    ParametricMaps maps;
    index_t fitted = 0;
    index_t nonconverged = 0;
};

namespace detail {

struct VoxelFit {
    VoxelParams<double> p;
    double cost = std::numeric_limits<double>::infinity();
    bool converged = false;
};

// Parameter vector: log A, log T1, log T2*, phi0, freq [, log T2, B].
class VoxelFitter {
public:
    VoxelFitter(const SequenceProtocol& protocol, const NllsOptions& opts)
        : table_(protocol), protocol_(protocol), opts_(opts), t2ir_(protocol.kind == SequenceKind::T2irGre),
          np_(t2ir_ ? 7 : 5), nt_(table_.frames()) {}

    VoxelFit fit(std::span<const cplx> y, const std::optional<VoxelParams<double>>& init) const {
        VoxelFit best;
        if (init) {
            best = run(y, *init);
            return best;
        }
        const auto [phi0, freq] = phase_seed(y);
        for (double t1 : opts_.t1_seeds) {
            VoxelParams<double> s;
            s.t1 = t1;
            s.t2s = opts_.t2s_seed;
            s.t2 = opts_.t2_seed;
            s.b = t2ir_ ? opts_.b_seed : 1.0;
            s.phi0 = phi0;
            s.freq = freq;
            s.a = amplitude_seed(y, s);
            const auto f = run(y, s);
            if (f.cost < best.cost) best = f;
        }
        return best;
    }

    double cost(std::span<const cplx> y, const VoxelParams<double>& p) const {
        double c = 0.0;
        for (index_t t = 0; t < nt_; ++t) c += std::norm(frame_signal(table_, t, p) - y[t]);
        return 0.5 * c;
    }

private:
    // Linear fit of echo phase against TE, pooled over preparation groups.
    std::pair<double, double> phase_seed(std::span<const cplx> y) const {
        cplx acc{};
        double dte = 0.0;
        index_t n = 0;
        for (index_t t = 0; t + 1 < nt_; ++t) {
            const auto f0 = protocol_.frame(t), f1 = protocol_.frame(t + 1);
            if (f1.echo != f0.echo + 1 || f1.prep != f0.prep || f1.segment != f0.segment) continue;
            acc += y[t + 1] * std::conj(y[t]);
            dte += protocol_.te_ms[f1.echo] - protocol_.te_ms[f0.echo];
            ++n;
        }
        double freq = 0.0;
        if (n > 0 && std::abs(acc) > 0) freq = std::arg(acc) / (2.0 * std::numbers::pi * (dte / n) * 1e-3);
        cplx p{};
        for (index_t t = 0; t < nt_; ++t)
            p += y[t] * std::polar(1.0, -2.0 * std::numbers::pi * freq * table_.entries[t].te * 1e-3);
        return {std::abs(p) > 0 ? std::arg(p) : 0.0, freq};
    }

    double amplitude_seed(std::span<const cplx> y, VoxelParams<double> s) const {
        s.a = 1.0;
        double num = 0.0, den = 0.0;
        for (index_t t = 0; t < nt_; ++t) {
            const cplx m = frame_signal(table_, t, s);
            num += (std::conj(m) * y[t]).real();
            den += std::norm(m);
        }
        const double a = den > 0 ? num / den : 0.0;
        if (a > 0) return a;
        double ny = 0.0;
        for (index_t t = 0; t < nt_; ++t) ny += std::abs(y[t]);
        return den > 0 ? std::max(ny / std::sqrt(den * nt_), 1e-12) : 1.0;
    }

    Eigen::VectorXd pack(const VoxelParams<double>& p) const {
        Eigen::VectorXd x(np_);
        x[0] = std::log(p.a);
        x[1] = std::log(p.t1);
        x[2] = std::log(p.t2s);
        x[3] = p.phi0;
        x[4] = p.freq;
        if (t2ir_) {
            x[5] = std::log(p.t2);
            x[6] = p.b;
        }
        return x;
    }

    VoxelParams<double> unpack(const Eigen::VectorXd& x) const {
        VoxelParams<double> p;
        p.a = std::exp(x[0]);
        p.t1 = std::exp(x[1]);
        p.t2s = std::exp(x[2]);
        p.phi0 = x[3];
        p.freq = x[4];
        p.b = 1.0;
        if (t2ir_) {
            p.t2 = std::exp(x[5]);
            p.b = x[6];
        }
        return p;
    }

    void residual(std::span<const cplx> y, const VoxelParams<double>& p, Eigen::VectorXd& r, Eigen::MatrixXd* j) const {
        r.resize(2 * nt_);
        if (j) j->resize(2 * nt_, np_);
        SignalPartials<double> d;
        for (index_t t = 0; t < nt_; ++t) {
            const cplx s = frame_signal(table_, t, p, j ? &d : nullptr);
            r[2 * t] = (s - y[t]).real();
            r[2 * t + 1] = (s - y[t]).imag();
            if (!j) continue;
            const cplx cols[7] = {d.a * p.a, d.t1 * p.t1, d.t2s * p.t2s, d.phi0, d.freq, d.t2 * p.t2, d.b};
            for (index_t q = 0; q < np_; ++q) {
                (*j)(2 * t, q) = cols[q].real();
                (*j)(2 * t + 1, q) = cols[q].imag();
            }
        }
    }

    VoxelFit run(std::span<const cplx> y, const VoxelParams<double>& start) const {
        Eigen::VectorXd x = pack(start), r, r_try;
        Eigen::MatrixXd j;
        VoxelParams<double> p = unpack(x);
        residual(y, p, r, &j);
        double c = 0.5 * r.squaredNorm();
        double y2 = 0.0;
        for (const auto& v : y) y2 += std::norm(v);
        double mu = 1e-3;
        bool converged = false;
        for (int it = 0; it < opts_.max_iters && !converged; ++it) {
            const Eigen::MatrixXd jtj = j.transpose() * j;
            const Eigen::VectorXd g = j.transpose() * r;
            if (g.cwiseAbs().maxCoeff() <= opts_.tol * std::max(y2, 1e-300)) {
                converged = true;
                break;
            }
            bool accepted = false;
            for (int tries = 0; tries < 30 && !accepted; ++tries) {
                Eigen::MatrixXd h = jtj;
                for (index_t q = 0; q < np_; ++q) h(q, q) += mu * std::max(jtj(q, q), 1e-12);
                const Eigen::VectorXd step = h.ldlt().solve(-g);
                Eigen::VectorXd xn = x + step;
                if (t2ir_) xn[6] = std::clamp(xn[6], 1e-6, 1.0);
                const auto pn = unpack(xn);
                residual(y, pn, r_try, nullptr);
                const double cn = 0.5 * r_try.squaredNorm();
                if (std::isfinite(cn) && cn <= c) {
                    const double drop = c - cn;
                    const double rel_step = step.norm() / (x.norm() + 1e-12);
                    x = xn;
                    p = pn;
                    c = cn;
                    residual(y, p, r, &j);
                    mu = std::max(mu / 3.0, 1e-12);
                    accepted = true;
                    if (drop <= opts_.tol * std::max(c, 1e-300) || rel_step < 1e-12 || c <= 1e-30 * y2)
                        converged = true;
                } else {
                    mu *= 4.0;
                }
            }
            if (!accepted) converged = true;  // no descent direction left at this precision
        }
        return {p, c, converged};
    }

    FrameTable<double> table_;
    SequenceProtocol protocol_;
    NllsOptions opts_;
    bool t2ir_;
    index_t np_, nt_;
};

}  // namespace detail

/// Levenberg-Marquardt fit of the active signal model to every masked voxel.
/// Without `init`, each voxel tries every T1 seed and keeps the lowest
/// residual. Inactive maps and skipped voxels are zero.
inline NllsResult fit_maps_nlls(const WeightedImages& iw, const SequenceProtocol& protocol,
                                const std::optional<ParametricMaps>& init = std::nullopt,
                                const Volume<std::uint8_t>* mask = nullptr, const NllsOptions& opts = {}) {
    protocol.validate();
    if (iw.frames() != protocol.frames())
        throw std::invalid_argument("fit_maps_nlls: images have " + std::to_string(iw.frames()) +
                                    " frames, protocol has " + std::to_string(protocol.frames()));
    if (iw.protocol && iw.protocol->kind != protocol.kind)
        throw std::invalid_argument("fit_maps_nlls: images were produced by a different sequence model");
    const Dims3 d = iw.dims();
    if (mask) require_same_dims(mask->dims(), d, "fit_maps_nlls: mask");
    if (init) require_same_dims(init->dims(), d, "fit_maps_nlls: init");
    if (opts.t1_seeds.empty()) throw std::invalid_argument("fit_maps_nlls: no T1 seeds");

    const detail::VoxelFitter fitter(protocol, opts);
    const bool t2ir = protocol.kind == SequenceKind::T2irGre;
    NllsResult out{ParametricMaps(d), 0, 0};
    std::vector<cplx> y(static_cast<std::size_t>(iw.frames()));
    for (index_t v = 0; v < d.voxels(); ++v) {
        if (mask && !(*mask)[v]) continue;
        double e = 0.0;
        for (index_t t = 0; t < iw.frames(); ++t) {
            y[t] = iw.data(t, v);
            e += std::norm(y[t]);
        }
        if (e == 0.0) continue;
        std::optional<VoxelParams<double>> start;
        if (init) {
            auto p = detail::voxel_params(*init, v);
            if (!t2ir) p.b = 1.0;
            if (p.a > 0 && p.t1 > 0 && p.t2s > 0 && (!t2ir || (p.t2 > 0 && p.b > 0))) start = p;
        }
        const auto f = fitter.fit(y, start);
        ++out.fitted;
        if (!f.converged) ++out.nonconverged;
        out.maps.a[v] = f.p.a;
        out.maps.t1[v] = f.p.t1;
        out.maps.t2s[v] = f.p.t2s;
        out.maps.phi0[v] = f.p.phi0;
        out.maps.freq[v] = f.p.freq;
        if (t2ir) {
            out.maps.t2[v] = f.p.t2;
            out.maps.b[v] = f.p.b;
        }
    }
    return out;
}

}  // namespace qmri

#endif  // QMRI_BASELINES_HPP
