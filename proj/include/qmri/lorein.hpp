#ifndef QMRI_LOREIN_HPP
#define QMRI_LOREIN_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "qmri/acquisition.hpp"
#include "qmri/adam.hpp"
#include "qmri/cnn.hpp"
#include "qmri/fft.hpp"
#include "qmri/neural_fields.hpp"
#include "qmri/phantom.hpp"
#include "qmri/signal.hpp"
#include "qmri/subspace.hpp"
#include "qmri/wnnm.hpp"

namespace qmri {

struct LossWeights {
    std::map<MapType, double> lambda_wnnm;
    double prior_weight = 1.0;
    double dc1_weight = 1.0;
    double dc2_weight = 1.0;

    double lambda(MapType m) const {
        const auto it = lambda_wnnm.find(m);
        return it == lambda_wnnm.end() ? 0.0 : it->second;
    }

    void validate() const {
        if (prior_weight < 0 || dc1_weight < 0 || dc2_weight < 0)
            throw std::invalid_argument("LossWeights: weights must be >= 0");
        for (const auto& [m, l] : lambda_wnnm)
            if (l < 0) throw std::invalid_argument("LossWeights: lambda for " + std::string(map_name(m)) + " is negative");
    }

    /// 0.05 for A, 0.2 for T1 and the phase maps, 2 for T2 and T2*; B unregularised.
    static LossWeights defaults() {
        LossWeights w;
        w.lambda_wnnm = {{MapType::A, 0.05},   {MapType::T1, 0.2}, {MapType::Phi0, 0.2}, {MapType::Freq, 0.2},
                         {MapType::T2, 2.0},    {MapType::T2s, 2.0}, {MapType::B, 0.0}};
        return w;
    }
};

struct LossTerms {
    double dc1 = 0.0;
    double dc2 = 0.0;
    double prior = 0.0;
    double wnnm = 0.0;

    double total() const { return dc1 + dc2 + prior + wnnm; }
};

struct LoreinConfig {
    int hidden_layers = 3;
    int hidden_width = 64;
    bool refine = true;
    RefinerConfig refiner{};
    int pretrain_epochs = 20;
    int epochs = 200;
    int decay_every = 80;
    double lr = 1e-3;
    double decay = 0.5;
    index_t batch_size = 4096;
    LossWeights weights = LossWeights::defaults();
    std::uint64_t seed = 0;
    std::function<void(int epoch, const LossTerms&)> on_epoch;
    int checkpoint_every = 0;  // epochs; 0 disables
    std::function<void(int epoch, const ParamList<float>&)> on_checkpoint;

    void validate() const {
        weights.validate();
        if (pretrain_epochs < 0 || epochs < 0 || checkpoint_every < 0 || decay_every < 1 || !(lr > 0) || !(decay > 0) || batch_size < 1)
            throw std::invalid_argument("LoreinConfig: invalid schedule");
    }

    static LoreinConfig dataset1() { return {}; }
    static LoreinConfig dataset2() {
        LoreinConfig c;
        c.epochs = 80;
        c.decay_every = 20;
        return c;
    }
};

/// Spatial-basis field, its CNN refiner and the coil-map field.
template <class S>
struct LrrState {
    Field<S> basis_field;
    Refiner<S> refiner;
    Field<S> coil_field;
    bool refine = true;

    index_t rank() const { return basis_field.out_dim(); }
    index_t coils() const { return coil_field.out_dim(); }

    static LrrState make(Dims3 d, index_t rank, index_t n_coils, const LoreinConfig& cfg) {
        if (rank < 1 || n_coils < 1) throw std::invalid_argument("LrrState: rank and coil count must be >= 1");
        LrrState s;
        FieldConfig fc;
        fc.encoding = HashEncodingConfig::for_volume(d);
        fc.hidden_layers = cfg.hidden_layers;
        fc.hidden_width = cfg.hidden_width;
        fc.head = FieldHead::ComplexTwoHead;
        fc.out_dim = static_cast<int>(rank);
        s.basis_field = Field<S>(fc, cfg.seed * 101 + 1);
        RefinerConfig rc = cfg.refiner;
        rc.rank = static_cast<int>(rank);
        s.refiner = Refiner<S>(rc, cfg.seed * 101 + 2);
        s.refine = cfg.refine;
        fc.encoding = HashEncodingConfig::coil(d);
        fc.out_dim = static_cast<int>(n_coils);
        s.coil_field = Field<S>(fc, cfg.seed * 101 + 3);
        return s;
    }

    void collect(ParamList<S>& out) {
        basis_field.collect(out, "lrr.basis");
        if (refine) refiner.collect(out, "lrr.refiner");
        coil_field.collect(out, "lrr.coil");
    }
};

/// One field per parametric map of the active signal model.
template <class S>
struct PmrState {
    std::map<MapType, Field<S>> fields;

    bool has(MapType m) const { return fields.count(m) != 0; }

    static FieldHead head_for(MapType m) {
        switch (m) {
            case MapType::Phi0:
            case MapType::Freq: return FieldHead::LinearReal;
            case MapType::B: return FieldHead::UnitInterval;
            default: return FieldHead::PositiveExp;
        }
    }

    /// Output biases start the maps at typical brain values.
    static PmrState make(Dims3 d, const SequenceProtocol& protocol, const LoreinConfig& cfg, double amplitude) {
        PmrState s;
        for (auto m : protocol.active_maps()) {
            FieldConfig fc;
            const bool phase = m == MapType::Phi0 || m == MapType::Freq;
            fc.encoding = phase ? HashEncodingConfig::phase(d) : HashEncodingConfig::for_volume(d);
            fc.hidden_layers = cfg.hidden_layers;
            fc.hidden_width = cfg.hidden_width;
            fc.head = head_for(m);
            switch (m) {
                case MapType::A: fc.output_bias = std::log(amplitude); break;
                case MapType::T1: fc.output_bias = std::log(1000.0); break;
                case MapType::T2: fc.output_bias = std::log(80.0); break;
                case MapType::T2s: fc.output_bias = std::log(50.0); break;
                case MapType::B: fc.output_bias = std::log(0.9 / 0.1); break;
                default: fc.output_bias = 0.0; break;
            }
            s.fields.emplace(m, Field<S>(fc, cfg.seed * 101 + 10 + static_cast<std::uint64_t>(m)));
        }
        return s;
    }

    void require(const SequenceProtocol& protocol) const {
        for (auto m : protocol.active_maps())
            if (!has(m)) throw std::invalid_argument("PmrState: missing field for map " + std::string(map_name(m)));
    }

    void collect(ParamList<S>& out) {
        for (auto& [m, f] : fields) f.collect(out, "pmr." + std::string(map_name(m)));
    }
};

struct ReconResult {
    ParametricMaps maps;
    WeightedImages weighted_lrr;
    WeightedImages weighted_pmr;
    CoilMaps coil_maps;
    SpatialBases bases;
    std::vector<LossTerms> loss_trace;
    int epochs_run = 0;
};

namespace detail {

template <class S>
FieldValues<S> eval_field(const Field<S>& f, std::span<const S> coords, index_t batch,
                          std::vector<typename Field<S>::Tape>* tapes) {
    const index_t n = static_cast<index_t>(coords.size() / 3);
    FieldValues<S> out;
    out.re.resize(f.out_dim(), n);
    if (f.is_complex()) out.im.resize(f.out_dim(), n);
    const index_t nb = (n + batch - 1) / batch;
    if (tapes) tapes->assign(static_cast<std::size_t>(nb), {});
    for (index_t b = 0; b < nb; ++b) {
        const index_t lo = b * batch, cnt = std::min(batch, n - lo);
        const auto part = f.forward(coords.subspan(static_cast<std::size_t>(3 * lo), static_cast<std::size_t>(3 * cnt)),
                                    tapes ? &(*tapes)[b] : nullptr);
        out.re.middleCols(lo, cnt) = part.re;
        if (f.is_complex()) out.im.middleCols(lo, cnt) = part.im;
    }
    return out;
}

template <class S>
void backprop_field_batch(Field<S>& f, std::span<const S> coords, index_t batch,
                          const std::vector<typename Field<S>::Tape>& tapes, index_t b, const MatX<S>& d_re,
                          const MatX<S>* d_im) {
    const index_t n = static_cast<index_t>(coords.size() / 3);
    const index_t lo = b * batch, cnt = std::min(batch, n - lo);
    const MatX<S> dr = d_re.middleCols(lo, cnt);
    MatX<S> di;
    if (d_im) di = d_im->middleCols(lo, cnt);
    f.backward(coords.subspan(static_cast<std::size_t>(3 * lo), static_cast<std::size_t>(3 * cnt)), tapes[b], dr,
               d_im ? &di : nullptr);
}

template <class S>
void backprop_field(Field<S>& f, std::span<const S> coords, index_t batch,
                    const std::vector<typename Field<S>::Tape>& tapes, const MatX<S>& d_re, const MatX<S>* d_im) {
    const index_t n = static_cast<index_t>(coords.size() / 3);
    for (index_t b = 0; b * batch < n; ++b) backprop_field_batch(f, coords, batch, tapes, b, d_re, d_im);
}

// Per voxel: C_c = a_c conj(sum a) / (|sum a| rss(a)). Voxels where either
// norm vanishes pass through unchanged.
template <class S>
void normalize_coil_values(std::span<const cx<S>> raw, index_t n_coils, index_t nv, std::span<cx<S>> out) {
    for (index_t v = 0; v < nv; ++v) {
        S rss2 = 0;
        cx<S> sum{};
        for (index_t c = 0; c < n_coils; ++c) {
            rss2 += std::norm(raw[c * nv + v]);
            sum += raw[c * nv + v];
        }
        const S rho = std::sqrt(rss2), sabs = std::abs(sum);
        const cx<S> scale = (rho > 0 && sabs > 0) ? std::conj(sum) / (sabs * rho) : cx<S>(1);
        for (index_t c = 0; c < n_coils; ++c) out[c * nv + v] = raw[c * nv + v] * scale;
    }
}

// Chain rule through normalize_coil_values; g holds dL/dRe + i dL/dIm of
// the normalised maps, the result is the same for the raw maps.
template <class S>
void normalize_coil_backward(std::span<const cx<S>> raw, std::span<const cx<S>> normed, std::span<const cx<S>> g,
                             index_t n_coils, index_t nv, std::span<cx<S>> g_raw) {
    for (index_t v = 0; v < nv; ++v) {
        S rss2 = 0;
        cx<S> sum{};
        for (index_t c = 0; c < n_coils; ++c) {
            rss2 += std::norm(raw[c * nv + v]);
            sum += raw[c * nv + v];
        }
        const S rho = std::sqrt(rss2), sabs = std::abs(sum);
        if (!(rho > 0 && sabs > 0)) {
            for (index_t c = 0; c < n_coils; ++c) g_raw[c * nv + v] = g[c * nv + v];
            continue;
        }
        const cx<S> u = std::conj(sum) / sabs;
        cx<S> q{};
        for (index_t c = 0; c < n_coils; ++c) q += std::conj(g[c * nv + v]) * normed[c * nv + v];
        const cx<S> common = cx<S>(0, q.imag()) / std::conj(sum);
        for (index_t c = 0; c < n_coils; ++c)
            g_raw[c * nv + v] = g[c * nv + v] * std::conj(u) / rho + common - q.real() * raw[c * nv + v] / rss2;
    }
}

}  // namespace detail

/// Gradient-carrying evaluation of the four-term objective, in scalar S.
template <class S>
class LoreinModel {
public:
    enum class Stage { Pretrain, Joint };

    LoreinModel(const KSpaceData& ks, const TemporalBasis& phi, const SequenceProtocol& protocol,
                const LoreinConfig& cfg)
        : cfg_(cfg), protocol_(protocol), dims_(ks.dims), nv_(ks.dims.voxels()), k_(phi.rank()), c_(ks.coils),
          t_(ks.frames), fft_(ks.dims), table_(protocol) {
        cfg.validate();
        protocol.validate();
        if (phi.frames() != ks.frames)
            throw std::invalid_argument("lorein: basis has " + std::to_string(phi.frames()) + " frames, data has " +
                                        std::to_string(ks.frames));
        if (protocol.frames() != ks.frames)
            throw std::invalid_argument("lorein: protocol has " + std::to_string(protocol.frames()) +
                                        " frames, data has " + std::to_string(ks.frames));
        if (cfg.refine && (dims_.nx % 2 || dims_.ny % 2 || dims_.nz % 2))
            throw std::invalid_argument("lorein: the refiner needs even extents, got " + to_string(dims_));
        phi_.resize(k_, t_);
        for (index_t k = 0; k < k_; ++k)
            for (index_t t = 0; t < t_; ++t) phi_(k, t) = static_cast<cx<S>>(phi.phi(k, t));
        data_.resize(ks.data.size());
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] = static_cast<cx<S>>(ks.data[i]);
        sampled_ = ks.mask.sampled_indices();
        order_.resize(static_cast<std::size_t>(nv_));
        for (index_t v = 0; v < nv_; ++v) order_[v] = v;
        grid_ = coordinate_grid<S>(dims_);
        coords_ = grid_;
        lrr_ = LrrState<S>::make(dims_, k_, c_, cfg);
        pmr_ = PmrState<S>::make(dims_, protocol, cfg, estimate_amplitude());
        const std::span<const S> all(grid_);
        lrr_.basis_field.restrict_support(all);
        lrr_.coil_field.restrict_support(all);
        for (auto& [m, f] : pmr_.fields) f.restrict_support(all);
        lrr_.collect(lrr_params_);
        pmr_.collect(pmr_params_);
        wnnm_weights_.clear();
    }

    LrrState<S>& lrr() { return lrr_; }
    PmrState<S>& pmr() { return pmr_; }
    const ParamList<S>& lrr_params() const { return lrr_params_; }
    const ParamList<S>& pmr_params() const { return pmr_params_; }
    LoreinConfig& config() { return cfg_; }
    const Dims3& dims() const { return dims_; }

    /// Holds the WNNM weights fixed at their current values (for gradient checks).
    void freeze_wnnm(bool on) {
        for (auto& [m, w] : wnnm_weights_) w.frozen = on;
    }

    /// Loss terms at the current parameters; with `grads`, accumulates the
    /// gradient of the weighted total into every parameter block.
    LossTerms evaluate(Stage stage, bool grads) {
        const auto out = objective(stage, grads);
        if (grads)
            for (index_t b = 0; b < batches(); ++b) backprop_batch(stage, b);
        return out;
    }

    index_t batches() const { return (nv_ + cfg_.batch_size - 1) / cfg_.batch_size; }

    /// Runs both stages; returns the final state's outputs. Coordinate-based
    /// networks take one step per shuffled coordinate batch, from the residual
    /// at the start of the epoch; the refiner takes one step per epoch.
    ReconResult train() {
        ParamList<S> field_params, refiner_params;
        for (const auto& p : lrr_params_)
            (p.name.starts_with("lrr.refiner") ? refiner_params : field_params).push_back(p);
        Adam<S> lrr_opt(field_params);
        Adam<S> refiner_opt(refiner_params);
        Adam<S> pmr_opt(pmr_params_);
        std::mt19937_64 rng(cfg_.seed * 7919 + 17);
        ReconResult r;
        int epoch = 0;
        auto run_epoch = [&](Stage stage, double lr) {
            const bool joint = stage == Stage::Joint;
            std::shuffle(order_.begin(), order_.end(), rng);
            for (index_t j = 0; j < nv_; ++j)
                for (int a = 0; a < 3; ++a) coords_[3 * j + a] = grid_[3 * order_[j] + a];
            refiner_opt.zero_grad();
            LossTerms l;
            try {
                l = objective(stage, true);
            } catch (const std::invalid_argument& e) {
                throw std::runtime_error("lorein: diverged at epoch " + std::to_string(epoch) + ": " + e.what());
            }
            if (!std::isfinite(l.total()))
                throw std::runtime_error("lorein: non-finite loss at epoch " + std::to_string(epoch));
            r.loss_trace.push_back(l);
            if (cfg_.on_epoch) cfg_.on_epoch(epoch, l);
            if (lrr_.refine) refiner_opt.step(lr);
            for (index_t b = 0; b < batches(); ++b) {
                lrr_opt.zero_grad();
                if (joint) pmr_opt.zero_grad();
                backprop_batch(stage, b);
                lrr_opt.step(lr);
                if (joint) pmr_opt.step(lr);
            }
            ++epoch;
            if constexpr (std::is_same_v<S, float>) {
                if (cfg_.checkpoint_every > 0 && cfg_.on_checkpoint && epoch % cfg_.checkpoint_every == 0) {
                    ParamList<S> all = lrr_params_;
                    all.insert(all.end(), pmr_params_.begin(), pmr_params_.end());
                    cfg_.on_checkpoint(epoch, all);
                }
            }
        };
        for (int e = 0; e < cfg_.pretrain_epochs; ++e) run_epoch(Stage::Pretrain, cfg_.lr);
        for (int e = 0; e < cfg_.epochs; ++e)
            run_epoch(Stage::Joint, cfg_.lr * std::pow(cfg_.decay, e / cfg_.decay_every));
        r.epochs_run = epoch;
        fill_result(r);
        return r;
    }

    /// Current predictions in double precision.
    void fill_result(ReconResult& r) {
        forward_lrr(false);
        forward_pmr(false);
        r.bases = SpatialBases(dims_, k_);
        for (index_t i = 0; i < r.bases.size(); ++i) r.bases[i] = static_cast<cplx>(u_[i]);
        r.coil_maps.maps = Stack<cplx>(dims_, c_);
        for (index_t i = 0; i < r.coil_maps.maps.size(); ++i) r.coil_maps.maps[i] = static_cast<cplx>(coils_[i]);
        r.weighted_lrr = {Stack<cplx>(dims_, t_), protocol_};
        r.weighted_pmr = {Stack<cplx>(dims_, t_), protocol_};
        for (index_t i = 0; i < iw_lrr_.size(); ++i) {
            r.weighted_lrr.data[i] = static_cast<cplx>(iw_lrr_[i]);
            r.weighted_pmr.data[i] = static_cast<cplx>(iw_pmr_[i]);
        }
        r.maps = ParametricMaps(dims_);
        for (index_t v = 0; v < nv_; ++v) r.maps.b[v] = 1.0;
        for (const auto& [m, vals] : maps_)
            for (index_t v = 0; v < nv_; ++v) r.maps[m][v] = static_cast<double>(vals(0, v));
    }

    const Stack<cx<S>>& bases() const { return u_; }
    const std::vector<cx<S>>& coil_values() const { return coils_; }

private:
    // Forward pass and loss; with `grads`, stores the gradient with respect to
    // every network output and backpropagates the refiner.
    LossTerms objective(Stage stage, bool grads) {
        const auto& w = cfg_.weights;
        const bool joint = stage == Stage::Joint;
        LossTerms out;
        forward_lrr(grads);
        if (joint) forward_pmr(grads);

        std::vector<cx<S>> g_u(static_cast<std::size_t>(k_ * nv_), cx<S>{});
        std::vector<cx<S>> g_coil(static_cast<std::size_t>(c_ * nv_), cx<S>{});
        Stack<cx<S>> g_iw_pmr;
        if (joint) g_iw_pmr = Stack<cx<S>>(dims_, t_);

        if (w.dc1_weight > 0) out.dc1 = w.dc1_weight * dc1(grads, g_u, g_coil);
        if (joint && w.dc2_weight > 0) out.dc2 = w.dc2_weight * dc2(grads, g_iw_pmr, g_coil);
        if (joint && w.prior_weight > 0) out.prior = w.prior_weight * prior(grads, g_u, g_iw_pmr);

        std::map<MapType, MatX<S>> g_maps;
        if (joint) {
            for (auto& [m, f] : pmr_.fields) g_maps[m] = MatX<S>::Zero(1, nv_);
            out.wnnm = wnnm(grads, g_maps);
        }
        if (!grads) return out;

        output_grads_lrr(g_u, g_coil);
        if (joint) output_grads_pmr(g_iw_pmr, g_maps);
        return out;
    }

    void backprop_batch(Stage stage, index_t b) {
        const std::span<const S> xs(coords_);
        detail::backprop_field_batch(lrr_.basis_field, xs, cfg_.batch_size, basis_tapes_, b, d_basis_re_, &d_basis_im_);
        detail::backprop_field_batch(lrr_.coil_field, xs, cfg_.batch_size, coil_tapes_, b, d_coil_re_, &d_coil_im_);
        if (stage != Stage::Joint) return;
        for (auto& [m, f] : pmr_.fields)
            detail::backprop_field_batch(f, xs, cfg_.batch_size, pmr_tapes_[m], b, d_maps_[m],
                                         static_cast<const MatX<S>*>(nullptr));
    }

    // Mean least-squares amplitude over voxels with signal, from the
    // coil-combined (root-sum-of-squares) zero-filled images and the model
    // signal at T1 = 1000 ms, T2* = 50 ms.
    double estimate_amplitude() {
        std::vector<S> rss(static_cast<std::size_t>(t_ * nv_), S(0));
        std::vector<cx<S>> buf(static_cast<std::size_t>(nv_));
        for (index_t t = 0; t < t_; ++t)
            for (index_t c = 0; c < c_; ++c) {
                std::fill(buf.begin(), buf.end(), cx<S>{});
                const cx<S>* src = data_.data() + (t * c_ + c) * nv_;
                for (index_t v : sampled_[t]) buf[v] = src[v];
                fft_.inverse(buf, buf);
                for (index_t v = 0; v < nv_; ++v) rss[t * nv_ + v] += std::norm(buf[v]);
            }
        for (auto& x : rss) x = std::sqrt(x);
        VoxelParams<double> ref;
        ref.a = 1.0;
        ref.t1 = 1000.0;
        ref.t2 = 80.0;
        ref.t2s = 50.0;
        ref.b = 0.9;
        const FrameTable<double> table(protocol_);
        std::vector<double> model(static_cast<std::size_t>(t_));
        double mm = 0.0;
        for (index_t t = 0; t < t_; ++t) {
            model[t] = std::abs(frame_signal(table, t, ref));
            mm += model[t] * model[t];
        }
        std::vector<double> energy(static_cast<std::size_t>(nv_), 0.0);
        double peak = 0.0;
        for (index_t v = 0; v < nv_; ++v) {
            for (index_t t = 0; t < t_; ++t) energy[v] += static_cast<double>(rss[t * nv_ + v] * rss[t * nv_ + v]);
            peak = std::max(peak, energy[v]);
        }
        double acc = 0.0;
        index_t n = 0;
        for (index_t v = 0; v < nv_; ++v) {
            if (energy[v] < 0.1 * peak) continue;
            double num = 0.0;
            for (index_t t = 0; t < t_; ++t) num += static_cast<double>(rss[t * nv_ + v]) * model[t];
            acc += num / mm;
            ++n;
        }
        const double a = n > 0 ? acc / static_cast<double>(n) : 1.0;
        return a > 0 ? a : 1.0;
    }

    void forward_lrr(bool tape) {
        const auto raw = detail::eval_field(lrr_.basis_field, std::span<const S>(coords_), cfg_.batch_size,
                                            tape ? &basis_tapes_ : nullptr);
        MatX<S> x(2 * k_, nv_);
        for (index_t j = 0; j < nv_; ++j) {
            x.col(order_[j]).head(k_) = raw.re.col(j);
            x.col(order_[j]).tail(k_) = raw.im.col(j);
        }
        const MatX<S> y = lrr_.refine ? lrr_.refiner.forward(x, dims_, tape ? &refiner_tape_ : nullptr) : x;
        u_ = Stack<cx<S>>(dims_, k_);
        for (index_t k = 0; k < k_; ++k)
            for (index_t v = 0; v < nv_; ++v) u_(k, v) = cx<S>(y(k, v), y(k + k_, v));

        const auto craw = detail::eval_field(lrr_.coil_field, std::span<const S>(coords_), cfg_.batch_size,
                                             tape ? &coil_tapes_ : nullptr);
        raw_coils_.resize(static_cast<std::size_t>(c_ * nv_));
        for (index_t c = 0; c < c_; ++c)
            for (index_t j = 0; j < nv_; ++j) raw_coils_[c * nv_ + order_[j]] = cx<S>(craw.re(c, j), craw.im(c, j));
        coils_.resize(raw_coils_.size());
        detail::normalize_coil_values<S>(raw_coils_, c_, nv_, coils_);

        iw_lrr_ = Stack<cx<S>>(dims_, t_);
        using CMat = Eigen::Matrix<cx<S>, Eigen::Dynamic, Eigen::Dynamic>;
        Eigen::Map<const CMat> um(u_.data(), nv_, k_);
        Eigen::Map<CMat> im(iw_lrr_.data(), nv_, t_);
        im.noalias() = um * phi_;
    }

    void forward_pmr(bool tape) {
        maps_.clear();
        for (auto& [m, f] : pmr_.fields) {
            auto& tapes = pmr_tapes_[m];
            const auto vals = detail::eval_field(f, std::span<const S>(coords_), cfg_.batch_size, tape ? &tapes : nullptr);
            auto& mv = maps_[m];
            mv.resize(1, nv_);
            for (index_t j = 0; j < nv_; ++j) mv(0, order_[j]) = vals.re(0, j);
        }
        iw_pmr_ = Stack<cx<S>>(dims_, t_);
        for (index_t v = 0; v < nv_; ++v) {
            const auto p = voxel(v);
            for (index_t t = 0; t < t_; ++t) iw_pmr_(t, v) = frame_signal(table_, t, p);
        }
    }

    VoxelParams<S> voxel(index_t v) const {
        VoxelParams<S> p;
        auto get = [&](MapType m, S fallback) {
            const auto it = maps_.find(m);
            return it == maps_.end() ? fallback : it->second(0, v);
        };
        p.a = get(MapType::A, S(0));
        p.b = get(MapType::B, S(1));
        p.t1 = get(MapType::T1, S(1));
        p.t2 = get(MapType::T2, S(1));
        p.t2s = get(MapType::T2s, S(1));
        p.phi0 = get(MapType::Phi0, S(0));
        p.freq = get(MapType::Freq, S(0));
        return p;
    }

    // sum_{t,c} || M_t F(C_c sum_k U_k phi_kt) - S_tc ||^2, evaluated through
    // the K*C transforms X_ck = F(C_c U_k).
    double dc1(bool grads, std::vector<cx<S>>& g_u, std::vector<cx<S>>& g_coil) {
        const S wt = static_cast<S>(cfg_.weights.dc1_weight);
        std::vector<cx<S>> x(static_cast<std::size_t>(nv_ * k_)), buf(static_cast<std::size_t>(nv_));
        std::vector<cx<S>> g;
        double loss = 0.0;
        for (index_t c = 0; c < c_; ++c) {
            for (index_t k = 0; k < k_; ++k) {
                for (index_t v = 0; v < nv_; ++v) buf[v] = coils_[c * nv_ + v] * u_(k, v);
                fft_.forward(buf, buf);
                for (index_t v = 0; v < nv_; ++v) x[v * k_ + k] = buf[v];
            }
            if (grads) g.assign(static_cast<std::size_t>(nv_ * k_), cx<S>{});
            for (index_t t = 0; t < t_; ++t) {
                const cx<S>* s = data_.data() + (t * c_ + c) * nv_;
                const cx<S>* ph = phi_.data() + t * k_;
                for (index_t v : sampled_[t]) {
                    const cx<S>* xv = x.data() + v * k_;
                    cx<S> pred{};
                    for (index_t k = 0; k < k_; ++k) pred += ph[k] * xv[k];
                    const cx<S> r = pred - s[v];
                    loss += static_cast<double>(std::norm(r));
                    if (grads) {
                        const cx<S> r2 = S(2) * wt * r;
                        cx<S>* gv = g.data() + v * k_;
                        for (index_t k = 0; k < k_; ++k) gv[k] += std::conj(ph[k]) * r2;
                    }
                }
            }
            if (!grads) continue;
            for (index_t k = 0; k < k_; ++k) {
                for (index_t v = 0; v < nv_; ++v) buf[v] = g[v * k_ + k];
                fft_.inverse(buf, buf);
                for (index_t v = 0; v < nv_; ++v) {
                    g_u[k * nv_ + v] += std::conj(coils_[c * nv_ + v]) * buf[v];
                    g_coil[c * nv_ + v] += std::conj(u_(k, v)) * buf[v];
                }
            }
        }
        return loss;
    }

    double dc2(bool grads, Stack<cx<S>>& g_iw, std::vector<cx<S>>& g_coil) {
        const S wt = static_cast<S>(cfg_.weights.dc2_weight);
        std::vector<cx<S>> buf(static_cast<std::size_t>(nv_));
        double loss = 0.0;
        for (index_t t = 0; t < t_; ++t)
            for (index_t c = 0; c < c_; ++c) {
                for (index_t v = 0; v < nv_; ++v) buf[v] = coils_[c * nv_ + v] * iw_pmr_(t, v);
                fft_.forward(buf, buf);
                const cx<S>* s = data_.data() + (t * c_ + c) * nv_;
                std::vector<std::pair<index_t, cx<S>>> res;
                if (grads) res.reserve(sampled_[t].size());
                for (index_t v : sampled_[t]) {
                    const cx<S> r = buf[v] - s[v];
                    loss += static_cast<double>(std::norm(r));
                    if (grads) res.emplace_back(v, S(2) * wt * r);
                }
                if (!grads) continue;
                std::fill(buf.begin(), buf.end(), cx<S>{});
                for (const auto& [v, r] : res) buf[v] = r;
                fft_.inverse(buf, buf);
                for (index_t v = 0; v < nv_; ++v) {
                    g_iw(t, v) += std::conj(coils_[c * nv_ + v]) * buf[v];
                    g_coil[c * nv_ + v] += std::conj(iw_pmr_(t, v)) * buf[v];
                }
            }
        return loss;
    }

    double prior(bool grads, std::vector<cx<S>>& g_u, Stack<cx<S>>& g_iw_pmr) {
        const S wt = static_cast<S>(cfg_.weights.prior_weight);
        Stack<cx<S>> g_lrr;
        if (grads) g_lrr = Stack<cx<S>>(dims_, t_);
        double loss = 0.0;
        for (index_t i = 0; i < iw_lrr_.size(); ++i) {
            const cx<S> d = iw_lrr_[i] - iw_pmr_[i];
            loss += static_cast<double>(std::norm(d));
            if (grads) {
                g_lrr[i] = S(2) * wt * d;
                g_iw_pmr[i] -= S(2) * wt * d;
            }
        }
        if (grads) {
            using CMat = Eigen::Matrix<cx<S>, Eigen::Dynamic, Eigen::Dynamic>;
            Eigen::Map<const CMat> gm(g_lrr.data(), nv_, t_);
            Eigen::Map<CMat> gu(g_u.data(), nv_, k_);
            gu.noalias() += gm * phi_.adjoint();
        }
        return loss;
    }

    double wnnm(bool grads, std::map<MapType, MatX<S>>& g_maps) {
        double loss = 0.0;
        for (auto& [m, vals] : maps_) {
            const double lambda = cfg_.weights.lambda(m);
            if (lambda <= 0) continue;
            auto& g = g_maps[m];
            loss += wnnm_penalty<S>(std::span<const S>(vals.data(), static_cast<std::size_t>(nv_)), dims_, lambda,
                                    grads ? std::span<S>(g.data(), static_cast<std::size_t>(nv_)) : std::span<S>{},
                                    wnnm_weights_[m]);
        }
        return loss;
    }

    void output_grads_lrr(const std::vector<cx<S>>& g_u, const std::vector<cx<S>>& g_coil) {
        MatX<S> dy(2 * k_, nv_);
        for (index_t k = 0; k < k_; ++k)
            for (index_t v = 0; v < nv_; ++v) {
                dy(k, v) = g_u[k * nv_ + v].real();
                dy(k + k_, v) = g_u[k * nv_ + v].imag();
            }
        const MatX<S> dx = lrr_.refine ? lrr_.refiner.backward(refiner_tape_, dy) : dy;
        d_basis_re_.resize(k_, nv_);
        d_basis_im_.resize(k_, nv_);
        for (index_t j = 0; j < nv_; ++j) {
            d_basis_re_.col(j) = dx.col(order_[j]).head(k_);
            d_basis_im_.col(j) = dx.col(order_[j]).tail(k_);
        }

        std::vector<cx<S>> g_raw(g_coil.size());
        detail::normalize_coil_backward<S>(raw_coils_, coils_, g_coil, c_, nv_, g_raw);
        d_coil_re_.resize(c_, nv_);
        d_coil_im_.resize(c_, nv_);
        for (index_t c = 0; c < c_; ++c)
            for (index_t j = 0; j < nv_; ++j) {
                d_coil_re_(c, j) = g_raw[c * nv_ + order_[j]].real();
                d_coil_im_(c, j) = g_raw[c * nv_ + order_[j]].imag();
            }
    }

    void output_grads_pmr(const Stack<cx<S>>& g_iw, std::map<MapType, MatX<S>>& g_maps) {
        SignalPartials<S> d;
        for (index_t v = 0; v < nv_; ++v) {
            const auto p = voxel(v);
            for (index_t t = 0; t < t_; ++t) {
                const cx<S> g = g_iw(t, v);
                if (g == cx<S>{}) continue;
                frame_signal(table_, t, p, &d);
                for (auto& [m, gm] : g_maps) gm(0, v) += (std::conj(g) * d[m]).real();
            }
        }
        d_maps_.clear();
        for (auto& [m, gm] : g_maps) {
            auto& dm = d_maps_[m];
            dm.resize(1, nv_);
            for (index_t j = 0; j < nv_; ++j) dm(0, j) = gm(0, order_[j]);
        }
    }

    LoreinConfig cfg_;
    SequenceProtocol protocol_;
    Dims3 dims_;
    index_t nv_, k_, c_, t_;
    Fft3<S> fft_;
    FrameTable<S> table_;
    Eigen::Matrix<cx<S>, Eigen::Dynamic, Eigen::Dynamic> phi_;
    std::vector<cx<S>> data_;
    std::vector<std::vector<index_t>> sampled_;
    std::vector<S> grid_, coords_;  // coords_ is grid_ in the order of order_
    std::vector<index_t> order_;

    LrrState<S> lrr_;
    PmrState<S> pmr_;
    ParamList<S> lrr_params_, pmr_params_;

    std::vector<typename Field<S>::Tape> basis_tapes_, coil_tapes_;
    std::map<MapType, std::vector<typename Field<S>::Tape>> pmr_tapes_;
    typename Refiner<S>::Tape refiner_tape_;
    std::map<MapType, WnnmWeights> wnnm_weights_;

    Stack<cx<S>> u_, iw_lrr_, iw_pmr_;
    std::vector<cx<S>> raw_coils_, coils_;
    std::map<MapType, MatX<S>> maps_;
    MatX<S> d_basis_re_, d_basis_im_, d_coil_re_, d_coil_im_;
    std::map<MapType, MatX<S>> d_maps_;
};

// ---- Standalone evaluations in double precision ----------------------------

inline SpatialBases cnn_refine(const SpatialBases& u, const Refiner<double>& refiner) {
    if (u.count() != refiner.rank())
        throw std::invalid_argument("cnn_refine: bases have " + std::to_string(u.count()) + " channels, refiner expects " +
                                    std::to_string(refiner.rank()));
    return merge_channels<double, double>(refiner.forward(split_channels<double>(u), u.dims()), u.dims());
}

template <class S>
std::pair<SpatialBases, CoilMaps> lrr_predict(const LrrState<S>& state, Dims3 d) {
    const auto coords = coordinate_grid<S>(d);
    const index_t nv = d.voxels(), k = state.rank(), nc = state.coils();
    const auto raw = detail::eval_field(state.basis_field, std::span<const S>(coords), 4096, nullptr);
    MatX<S> x(2 * k, nv);
    x.topRows(k) = raw.re;
    x.bottomRows(k) = raw.im;
    const MatX<S> y = state.refine ? state.refiner.forward(x, d) : x;
    SpatialBases u(d, k);
    for (index_t j = 0; j < k; ++j)
        for (index_t v = 0; v < nv; ++v) u(j, v) = cplx(y(j, v), y(j + k, v));
    const auto craw = detail::eval_field(state.coil_field, std::span<const S>(coords), 4096, nullptr);
    std::vector<cx<S>> rc(static_cast<std::size_t>(nc * nv)), nc_vals(rc.size());
    for (index_t c = 0; c < nc; ++c)
        for (index_t v = 0; v < nv; ++v) rc[c * nv + v] = cx<S>(craw.re(c, v), craw.im(c, v));
    detail::normalize_coil_values<S>(rc, nc, nv, nc_vals);
    CoilMaps coils{Stack<cplx>(d, nc)};
    for (index_t i = 0; i < coils.maps.size(); ++i) coils.maps[i] = static_cast<cplx>(nc_vals[i]);
    return {u, coils};
}

template <class S>
std::pair<ParametricMaps, WeightedImages> pmr_predict(const PmrState<S>& state, Dims3 d,
                                                      const SequenceProtocol& protocol) {
    state.require(protocol);
    const auto coords = coordinate_grid<S>(d);
    ParametricMaps maps(d);
    for (auto& v : maps.b) v = 1.0;
    for (const auto& [m, f] : state.fields) {
        const auto vals = detail::eval_field(f, std::span<const S>(coords), 4096, nullptr).re;
        for (index_t v = 0; v < d.voxels(); ++v) maps[m][v] = static_cast<double>(vals(0, v));
    }
    const FrameTable<double> table(protocol);
    WeightedImages iw{Stack<cplx>(d, protocol.frames()), protocol};
    for (index_t v = 0; v < d.voxels(); ++v) {
        const auto p = detail::voxel_params(maps, v);
        for (index_t t = 0; t < table.frames(); ++t) iw.data(t, v) = frame_signal(table, t, p);
    }
    return {maps, iw};
}

/// ||S_k - M F C I_w||^2 over sampled locations.
inline double loss_dc(const WeightedImages& predicted, const CoilMaps& coils, const KSpaceData& ks) {
    if (ks.coils != coils.n_coils()) throw std::invalid_argument("loss_dc: coil count mismatch");
    const auto pred = forward(predicted, coils, ks.mask);
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) acc += std::norm(pred.data[i] - ks.data[i]);
    return acc;
}

/// ||I_lrr - I_pmr||^2 over all voxels and frames.
inline double loss_prior(const WeightedImages& lrr, const WeightedImages& pmr) {
    require_same_dims(lrr.dims(), pmr.dims(), "loss_prior");
    if (lrr.frames() != pmr.frames()) throw std::invalid_argument("loss_prior: extent mismatch on axis T");
    double acc = 0.0;
    for (index_t i = 0; i < lrr.data.size(); ++i) acc += std::norm(lrr.data[i] - pmr.data[i]);
    return acc;
}

/// sum_i lambda_i sum_slices sum_j w_j sigma_j over the maps with lambda_i > 0.
inline double loss_wnnm(const ParametricMaps& maps, const LossWeights& weights) {
    double acc = 0.0;
    for (auto m : kAllMapTypes) {
        const double l = weights.lambda(m);
        if (l <= 0) continue;
        WnnmWeights w;
        acc += wnnm_penalty<double>(std::span<const double>(maps[m].values()), maps.dims(), l, {}, w);
    }
    return acc;
}

/// Full two-stage reconstruction (single precision internally).
inline ReconResult train(const KSpaceData& ks, const TemporalBasis& phi, const SequenceProtocol& protocol,
                         const LoreinConfig& cfg) {
    LoreinModel<float> model(ks, phi, protocol, cfg);
    return model.train();
}

}  // namespace qmri

#endif  // QMRI_LOREIN_HPP
