#ifndef QMRI_NEURAL_FIELDS_HPP
#define QMRI_NEURAL_FIELDS_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qmri/array.hpp"

namespace qmri {

template <class S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <class S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

/// A named, contiguous block of learnable parameters and its gradient.
template <class S>
struct ParamBlock {
    std::string name;
    std::span<S> value;
    std::span<S> grad;
    // When `sparse`, only these entries can ever receive gradient.
    bool sparse = false;
    std::span<const std::uint32_t> support{};
};

template <class S>
using ParamList = std::vector<ParamBlock<S>>;

template <class S>
void zero_grads(const ParamList<S>& params) {
    for (const auto& p : params) {
        if (p.sparse)
            for (auto i : p.support) p.grad[i] = S(0);
        else
            std::fill(p.grad.begin(), p.grad.end(), S(0));
    }
}

template <class S>
std::size_t parameter_count(const ParamList<S>& params) {
    std::size_t n = 0;
    for (const auto& p : params) n += p.value.size();
    return n;
}

/// Normalised voxel coordinates in [0, 1]^3, row-major (z fastest), three
/// values per voxel. Voxel (1,1,1) maps to the origin.
template <class S = double>
std::vector<S> coordinate_grid(Dims3 dims) {
    if (!dims.valid()) throw std::invalid_argument("coordinate_grid: invalid shape " + to_string(dims));
    auto norm = [](index_t i, index_t n) { return n > 1 ? static_cast<S>(i) / static_cast<S>(n - 1) : S(0); };
    std::vector<S> out;
    out.reserve(static_cast<std::size_t>(3 * dims.voxels()));
    for (index_t x = 0; x < dims.nx; ++x)
        for (index_t y = 0; y < dims.ny; ++y)
            for (index_t z = 0; z < dims.nz; ++z) {
                out.push_back(norm(x, dims.nx));
                out.push_back(norm(y, dims.ny));
                out.push_back(norm(z, dims.nz));
            }
    return out;
}

struct HashEncodingConfig {
    int levels = 16;
    int log2_table = 19;
    int features = 2;
    int n_min = 16;
    double growth = 2.0;

    index_t resolution(int level) const {
        return static_cast<index_t>(std::floor(n_min * std::pow(growth, level) + 1e-9));
    }
    int output_dim() const { return levels * features; }

    /// Entries actually stored for a level: dense when the vertex grid fits.
    std::size_t level_size(int level) const {
        const auto n = static_cast<std::size_t>(resolution(level) + 1);
        const std::size_t cap = std::size_t{1} << log2_table;
        const std::size_t dense = n * n * n;
        return std::min(dense, cap);
    }

    void validate() const {
        if (levels < 1 || features < 1 || n_min < 1 || log2_table < 1 || log2_table > 30 || !(growth >= 1.0))
            throw std::invalid_argument("HashEncodingConfig: invalid hyperparameters");
    }

    /// Growth such that the finest level reaches `finest`.
    static double growth_for(int n_min, int levels, double finest) {
        if (levels < 2) return 1.0;
        return std::max(1.0, std::pow(finest / n_min, 1.0 / (levels - 1)));
    }

    /// L=16, log2 T=19, F=2, N_min=16, finest level about twice the largest
    /// volume dimension.
    static HashEncodingConfig for_volume(Dims3 d) {
        HashEncodingConfig c;
        c.growth = growth_for(c.n_min, c.levels, 2.0 * static_cast<double>(std::max({d.nx, d.ny, d.nz})));
        return c;
    }

    /// Phase maps: N_min = 1, log2 T = 12.
    static HashEncodingConfig phase(Dims3 d) {
        HashEncodingConfig c = for_volume(d);
        c.n_min = 1;
        c.log2_table = 12;
        c.growth = growth_for(c.n_min, c.levels, 2.0 * static_cast<double>(std::max({d.nx, d.ny, d.nz})));
        return c;
    }

    /// Coil maps: coarse, small tables.
    static HashEncodingConfig coil(Dims3 d) {
        HashEncodingConfig c;
        c.levels = 8;
        c.n_min = 2;
        c.log2_table = 12;
        c.growth = growth_for(c.n_min, c.levels, std::max(4.0, static_cast<double>(std::max({d.nx, d.ny, d.nz})) / 4.0));
        return c;
    }
};

/// Multiresolution hash encoding: per level, trilinear interpolation of the
/// eight surrounding vertex features. Coarse levels index densely; levels
/// whose vertex grid exceeds the table use the XOR-of-primes spatial hash.
template <class S>
class HashGrid {
public:
    HashGrid() = default;
    HashGrid(const HashEncodingConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg.validate();
        std::size_t total = 0;
        for (int l = 0; l < cfg.levels; ++l) {
            res_.push_back(cfg.resolution(l));
            size_.push_back(cfg.level_size(l));
            const auto nv = static_cast<std::size_t>(res_.back() + 1);
            dense_.push_back(nv * nv * nv <= size_.back());
            offsets_.push_back(total);
            total += cfg.level_size(l) * static_cast<std::size_t>(cfg.features);
        }
        params_.resize(total);
        grads_.assign(total, S(0));
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<double> init(-1e-4, 1e-4);
        for (auto& p : params_) p = static_cast<S>(init(rng));
    }

    const HashEncodingConfig& config() const { return cfg_; }
    int output_dim() const { return cfg_.output_dim(); }
    std::vector<S>& params() { return params_; }
    const std::vector<S>& params() const { return params_; }
    std::vector<S>& grads() { return grads_; }

    void collect(ParamList<S>& out, const std::string& name) {
        out.push_back({name, std::span<S>(params_), std::span<S>(grads_), !support_.empty(), support_});
    }

    /// Declares that encode/backward will only ever see `coords`; optimisers
    /// then skip table entries no coordinate touches. Call before collect().
    void restrict_support(std::span<const S> coords) {
        check_coords(coords);
        std::vector<char> hit(params_.size(), 0);
        visit(coords, [&](index_t, int, std::size_t base, S) {
            for (int f = 0; f < cfg_.features; ++f) hit[base + f] = 1;
        }, [](index_t) {});
        support_.clear();
        for (std::size_t i = 0; i < hit.size(); ++i)
            if (hit[i]) support_.push_back(static_cast<std::uint32_t>(i));
    }

    /// coords: 3 values per point. Returns (L*F) x n.
    MatX<S> encode(std::span<const S> coords) const {
        const auto n = static_cast<index_t>(coords.size() / 3);
        check_coords(coords);
        MatX<S> out(output_dim(), n);
        visit(coords, [&](index_t col, int level, std::size_t base, S w) {
            for (int f = 0; f < cfg_.features; ++f) out(level * cfg_.features + f, col) += w * params_[base + f];
        }, [&](index_t col) { out.col(col).setZero(); });
        return out;
    }

    /// Accumulates d(loss)/d(table) given d(loss)/d(encoding).
    void backward(std::span<const S> coords, const MatX<S>& d_out) {
        visit(coords, [&](index_t col, int level, std::size_t base, S w) {
            for (int f = 0; f < cfg_.features; ++f) grads_[base + f] += w * d_out(level * cfg_.features + f, col);
        }, [](index_t) {});
    }

    /// Cell index per level, used to locate piecewise-trilinear regions.
    std::vector<std::array<index_t, 3>> cells(std::span<const S> point) const {
        std::vector<std::array<index_t, 3>> out;
        for (int l = 0; l < cfg_.levels; ++l) {
            const index_t res = cfg_.resolution(l);
            std::array<index_t, 3> c{};
            for (int a = 0; a < 3; ++a) {
                const S pos = point[a] * static_cast<S>(res);
                c[a] = std::min<index_t>(static_cast<index_t>(std::floor(pos)), res - 1);
            }
            out.push_back(c);
        }
        return out;
    }

private:
    static void check_coords(std::span<const S> coords) {
        if (coords.size() % 3 != 0) throw std::invalid_argument("hash_encode: coordinate list must hold triples");
        for (S c : coords)
            if (!(c >= S(0) && c <= S(1))) throw std::out_of_range("hash_encode: coordinate outside [0, 1]");
    }

    std::size_t index(int level, index_t x, index_t y, index_t z) const {
        const auto n = static_cast<std::uint64_t>(res_[level] + 1);
        const std::size_t size = size_[level];
        if (dense_[level]) return static_cast<std::size_t>(static_cast<std::uint64_t>(x) +
                                                               n * (static_cast<std::uint64_t>(y) +
                                                                    n * static_cast<std::uint64_t>(z)));
        const std::uint32_t h = static_cast<std::uint32_t>(x) ^ (static_cast<std::uint32_t>(y) * 2654435761u) ^
                                (static_cast<std::uint32_t>(z) * 805459861u);
        return static_cast<std::size_t>(h) % size;
    }

    template <class Corner, class Begin>
    void visit(std::span<const S> coords, Corner&& corner, Begin&& begin) const {
        const auto n = static_cast<index_t>(coords.size() / 3);
        for (index_t col = 0; col < n; ++col) {
            begin(col);
            const S* p = coords.data() + 3 * col;
            for (int l = 0; l < cfg_.levels; ++l) {
                const index_t res = res_[l];
                index_t c0[3];
                S fr[3];
                for (int a = 0; a < 3; ++a) {
                    const S pos = p[a] * static_cast<S>(res);
                    c0[a] = std::min<index_t>(static_cast<index_t>(std::floor(pos)), res - 1);
                    fr[a] = pos - static_cast<S>(c0[a]);
                }
                for (int k = 0; k < 8; ++k) {
                    const int bx = k & 1, by = (k >> 1) & 1, bz = (k >> 2) & 1;
                    const S w = (bx ? fr[0] : S(1) - fr[0]) * (by ? fr[1] : S(1) - fr[1]) * (bz ? fr[2] : S(1) - fr[2]);
                    const std::size_t base =
                        offsets_[l] + index(l, c0[0] + bx, c0[1] + by, c0[2] + bz) * static_cast<std::size_t>(cfg_.features);
                    corner(col, l, base, w);
                }
            }
        }
    }

    HashEncodingConfig cfg_{};
    std::vector<index_t> res_;
    std::vector<std::size_t> size_;
    std::vector<bool> dense_;
    std::vector<std::size_t> offsets_;
    std::vector<S> params_;
    std::vector<S> grads_;
    std::vector<std::uint32_t> support_;
};

/// Fully connected network with ReLU hidden activations and a linear output.
template <class S>
class Mlp {
public:
    struct Tape {
        std::vector<MatX<S>> acts;  // acts[0] = input, acts[i] = ReLU output of layer i
    };

    Mlp() = default;
    Mlp(int in, int width, int hidden_layers, int out, std::uint64_t seed) {
        if (in < 1 || width < 1 || hidden_layers < 1 || out < 1) throw std::invalid_argument("Mlp: invalid shape");
        std::vector<int> dims{in};
        for (int i = 0; i < hidden_layers; ++i) dims.push_back(width);
        dims.push_back(out);
        std::mt19937_64 rng(seed);
        for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(dims[i]));
            std::uniform_real_distribution<double> u(-bound, bound);
            MatX<S> w(dims[i + 1], dims[i]);
            VecX<S> b(dims[i + 1]);
            for (index_t k = 0; k < w.size(); ++k) w.data()[k] = static_cast<S>(u(rng));
            for (index_t k = 0; k < b.size(); ++k) b[k] = static_cast<S>(u(rng));
            w_.push_back(w);
            b_.push_back(b);
            gw_.push_back(MatX<S>::Zero(w.rows(), w.cols()));
            gb_.push_back(VecX<S>::Zero(b.size()));
        }
    }

    int layers() const { return static_cast<int>(w_.size()); }
    int input_dim() const { return static_cast<int>(w_.front().cols()); }
    int output_dim() const { return static_cast<int>(w_.back().rows()); }
    MatX<S>& weight(int i) { return w_[i]; }
    VecX<S>& bias(int i) { return b_[i]; }

    MatX<S> forward(const MatX<S>& x, Tape* tape) const {
        if (x.rows() != input_dim()) throw std::invalid_argument("Mlp: input dimension mismatch");
        MatX<S> h = x;
        if (tape) {
            tape->acts.clear();
            tape->acts.push_back(x);
        }
        for (int i = 0; i < layers(); ++i) {
            MatX<S> z = w_[i] * h;
            z.colwise() += b_[i];
            if (i + 1 < layers()) {
                z = z.cwiseMax(S(0));
                if (tape) tape->acts.push_back(z);
            }
            h = std::move(z);
        }
        return h;
    }

    /// Accumulates parameter gradients; returns d(loss)/d(input).
    MatX<S> backward(const Tape& tape, const MatX<S>& dy) {
        MatX<S> g = dy;
        for (int i = layers() - 1; i >= 0; --i) {
            const MatX<S>& in = tape.acts[static_cast<std::size_t>(i)];
            gw_[i].noalias() += g * in.transpose();
            gb_[i] += g.rowwise().sum();
            MatX<S> gin = w_[i].transpose() * g;
            if (i > 0) gin = gin.cwiseProduct((in.array() > S(0)).template cast<S>().matrix());
            g = std::move(gin);
        }
        return g;
    }

    void collect(ParamList<S>& out, const std::string& name) {
        for (int i = 0; i < layers(); ++i) {
            out.push_back({name + ".w" + std::to_string(i), std::span<S>(w_[i].data(), w_[i].size()),
                           std::span<S>(gw_[i].data(), gw_[i].size())});
            out.push_back({name + ".b" + std::to_string(i), std::span<S>(b_[i].data(), b_[i].size()),
                           std::span<S>(gb_[i].data(), gb_[i].size())});
        }
    }

private:
    std::vector<MatX<S>> w_, gw_;
    std::vector<VecX<S>> b_, gb_;
};

enum class FieldHead { PositiveExp, LinearReal, ComplexTwoHead, UnitInterval };

struct FieldConfig {
    HashEncodingConfig encoding;
    int hidden_layers = 3;
    int hidden_width = 64;
    FieldHead head = FieldHead::LinearReal;
    int out_dim = 1;
    double output_bias = 0.0;  // initial bias of the output layer (pre-head)

    void validate() const {
        encoding.validate();
        if (hidden_layers < 1 || hidden_width < 1) throw std::invalid_argument("FieldConfig: hidden layers/width must be >= 1");
        if (out_dim < 1) throw std::invalid_argument("FieldConfig: out_dim must be >= 1");
    }
};

/// Field values for a batch of coordinates: out_dim x n. `im` is empty for
/// real heads.
template <class S>
struct FieldValues {
    MatX<S> re;
    MatX<S> im;
};

/// Coordinate network: hash encoding -> MLP -> head. The complex head runs
/// two independent networks for the real and imaginary parts.
template <class S>
class Field {
public:
    struct Tape {
        std::vector<typename Mlp<S>::Tape> mlp;
        FieldValues<S> values;
    };

    Field() = default;
    Field(const FieldConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg.validate();
        const int nets = cfg.head == FieldHead::ComplexTwoHead ? 2 : 1;
        for (int i = 0; i < nets; ++i) {
            grids_.emplace_back(cfg.encoding, seed * 7919 + 2 * i + 1);
            mlps_.emplace_back(cfg.encoding.output_dim(), cfg.hidden_width, cfg.hidden_layers, cfg.out_dim,
                               seed * 7919 + 2 * i + 2);
            if (i == 0) mlps_.back().bias(mlps_.back().layers() - 1).setConstant(static_cast<S>(cfg.output_bias));
        }
    }

    const FieldConfig& config() const { return cfg_; }
    int out_dim() const { return cfg_.out_dim; }
    bool is_complex() const { return cfg_.head == FieldHead::ComplexTwoHead; }
    int networks() const { return static_cast<int>(mlps_.size()); }
    Mlp<S>& mlp(int i) { return mlps_[i]; }
    HashGrid<S>& grid(int i) { return grids_[i]; }

    /// Zeroes the output layer of one network (weights and bias).
    void zero_output(int net) {
        auto& m = mlps_[net];
        m.weight(m.layers() - 1).setZero();
        m.bias(m.layers() - 1).setZero();
    }

    FieldValues<S> forward(std::span<const S> coords, Tape* tape = nullptr) const {
        FieldValues<S> out;
        if (tape) tape->mlp.assign(mlps_.size(), {});
        for (std::size_t i = 0; i < mlps_.size(); ++i) {
            MatX<S> z = mlps_[i].forward(grids_[i].encode(coords), tape ? &tape->mlp[i] : nullptr);
            switch (cfg_.head) {
                case FieldHead::PositiveExp: z = z.array().exp().matrix(); break;
                case FieldHead::UnitInterval: z = (S(1) / (S(1) + (-z.array()).exp())).matrix(); break;
                default: break;
            }
            (i == 0 ? out.re : out.im) = std::move(z);
        }
        if (tape) tape->values = out;
        return out;
    }

    /// Accumulates parameter gradients from d(loss)/d(values).
    void backward(std::span<const S> coords, const Tape& tape, const MatX<S>& d_re, const MatX<S>* d_im = nullptr) {
        for (std::size_t i = 0; i < mlps_.size(); ++i) {
            const MatX<S>* d = i == 0 ? &d_re : d_im;
            if (!d) continue;
            const MatX<S>& y = i == 0 ? tape.values.re : tape.values.im;
            MatX<S> dz;
            switch (cfg_.head) {
                case FieldHead::PositiveExp: dz = d->cwiseProduct(y); break;
                case FieldHead::UnitInterval: dz = d->array() * y.array() * (S(1) - y.array()); break;
                default: dz = *d; break;
            }
            const MatX<S> d_enc = mlps_[i].backward(tape.mlp[i], dz);
            grids_[i].backward(coords, d_enc);
        }
    }

    void restrict_support(std::span<const S> coords) {
        for (auto& g : grids_) g.restrict_support(coords);
    }

    void collect(ParamList<S>& out, const std::string& name) {
        for (std::size_t i = 0; i < mlps_.size(); ++i) {
            const std::string part = name + (mlps_.size() == 2 ? (i == 0 ? ".re" : ".im") : "");
            grids_[i].collect(out, part + ".table");
            mlps_[i].collect(out, part + ".mlp");
        }
    }

private:
    FieldConfig cfg_{};
    std::vector<HashGrid<S>> grids_;
    std::vector<Mlp<S>> mlps_;
};

}  // namespace qmri

#endif  // QMRI_NEURAL_FIELDS_HPP
