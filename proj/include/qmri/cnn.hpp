#ifndef QMRI_CNN_HPP
#define QMRI_CNN_HPP

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "qmri/array.hpp"
#include "qmri/neural_fields.hpp"

namespace qmri {

// Feature maps are (channels x voxels) matrices, voxels in volume order.

template <class S>
class Conv3d {
public:
    Conv3d() = default;
    Conv3d(int in, int out, int kernel, int stride, int pad, std::uint64_t seed)
        : in_(in), out_(out), k_(kernel), stride_(stride), pad_(pad) {
        const int taps = kernel * kernel * kernel;
        const double bound = 1.0 / std::sqrt(static_cast<double>(in * taps));
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<double> u(-bound, bound);
        w_.resize(static_cast<std::size_t>(taps));
        gw_.resize(static_cast<std::size_t>(taps));
        for (int t = 0; t < taps; ++t) {
            w_[t] = MatX<S>(out, in);
            for (index_t i = 0; i < w_[t].size(); ++i) w_[t].data()[i] = static_cast<S>(u(rng));
            gw_[t] = MatX<S>::Zero(out, in);
        }
        b_ = VecX<S>(out);
        for (index_t i = 0; i < b_.size(); ++i) b_[i] = static_cast<S>(u(rng));
        gb_ = VecX<S>::Zero(out);
    }

    int in_channels() const { return in_; }
    int out_channels() const { return out_; }

    Dims3 out_dims(Dims3 d) const {
        auto o = [&](index_t n) { return (n + 2 * pad_ - k_) / stride_ + 1; };
        return {o(d.nx), o(d.ny), o(d.nz)};
    }

    void zero_init() {
        for (auto& w : w_) w.setZero();
        b_.setZero();
    }

    MatX<S> forward(const MatX<S>& x, Dims3 d) const {
        check(x, d);
        const Dims3 od = out_dims(d);
        MatX<S> y(out_, od.voxels());
        y.colwise() = b_;
        MatX<S> g(in_, od.voxels());
        for (int t = 0; t < static_cast<int>(w_.size()); ++t) {
            gather(x, d, od, t, g);
            y.noalias() += w_[t] * g;
        }
        return y;
    }

    MatX<S> backward(const MatX<S>& x, Dims3 d, const MatX<S>& dy) {
        const Dims3 od = out_dims(d);
        MatX<S> dx = MatX<S>::Zero(in_, d.voxels());
        MatX<S> g(in_, od.voxels());
        gb_ += dy.rowwise().sum();
        for (int t = 0; t < static_cast<int>(w_.size()); ++t) {
            gather(x, d, od, t, g);
            gw_[t].noalias() += dy * g.transpose();
            const MatX<S> dg = w_[t].transpose() * dy;
            const auto src = sources(d, od, t);
            for (index_t o = 0; o < od.voxels(); ++o)
                if (src[o] >= 0) dx.col(src[o]) += dg.col(o);
        }
        return dx;
    }

    void collect(ParamList<S>& out, const std::string& name) {
        for (std::size_t t = 0; t < w_.size(); ++t)
            out.push_back({name + ".w" + std::to_string(t), std::span<S>(w_[t].data(), w_[t].size()),
                           std::span<S>(gw_[t].data(), gw_[t].size())});
        out.push_back({name + ".b", std::span<S>(b_.data(), b_.size()), std::span<S>(gb_.data(), gb_.size())});
    }

private:
    void check(const MatX<S>& x, Dims3 d) const {
        if (x.rows() != in_ || x.cols() != d.voxels())
            throw std::invalid_argument("Conv3d: expected " + std::to_string(in_) + " channels over " +
                                        std::to_string(d.voxels()) + " voxels");
    }

    // Input voxel read by each output voxel for tap t, or -1 in the padding.
    std::vector<index_t> sources(Dims3 d, Dims3 od, int t) const {
        const int dx = t / (k_ * k_), dy = (t / k_) % k_, dz = t % k_;
        std::vector<index_t> src(static_cast<std::size_t>(od.voxels()));
        for (index_t x = 0; x < od.nx; ++x)
            for (index_t y = 0; y < od.ny; ++y)
                for (index_t z = 0; z < od.nz; ++z) {
                    const index_t ix = x * stride_ + dx - pad_;
                    const index_t iy = y * stride_ + dy - pad_;
                    const index_t iz = z * stride_ + dz - pad_;
                    const bool inside = ix >= 0 && iy >= 0 && iz >= 0 && ix < d.nx && iy < d.ny && iz < d.nz;
                    src[od.offset(x, y, z)] = inside ? d.offset(ix, iy, iz) : -1;
                }
        return src;
    }

    void gather(const MatX<S>& x, Dims3 d, Dims3 od, int t, MatX<S>& g) const {
        const auto src = sources(d, od, t);
        for (index_t o = 0; o < od.voxels(); ++o) {
            if (src[o] >= 0)
                g.col(o) = x.col(src[o]);
            else
                g.col(o).setZero();
        }
    }

    int in_ = 0, out_ = 0, k_ = 3, stride_ = 1, pad_ = 1;
    std::vector<MatX<S>> w_, gw_;
    VecX<S> b_, gb_;
};

/// Transposed convolution, kernel 2, stride 2: doubles every extent.
template <class S>
class UpConv3d {
public:
    UpConv3d() = default;
    UpConv3d(int in, int out, std::uint64_t seed) : in_(in), out_(out) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(out * 8));
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<double> u(-bound, bound);
        for (int t = 0; t < 8; ++t) {
            w_[t] = MatX<S>(out, in);
            for (index_t i = 0; i < w_[t].size(); ++i) w_[t].data()[i] = static_cast<S>(u(rng));
            gw_[t] = MatX<S>::Zero(out, in);
        }
        b_ = VecX<S>(out);
        for (index_t i = 0; i < b_.size(); ++i) b_[i] = static_cast<S>(u(rng));
        gb_ = VecX<S>::Zero(out);
    }

    static Dims3 out_dims(Dims3 d) { return {2 * d.nx, 2 * d.ny, 2 * d.nz}; }

    MatX<S> forward(const MatX<S>& x, Dims3 d) const {
        const Dims3 od = out_dims(d);
        MatX<S> y(out_, od.voxels());
        for (int t = 0; t < 8; ++t) {
            const MatX<S> part = w_[t] * x;
            const auto dst = targets(d, t);
            for (index_t i = 0; i < d.voxels(); ++i) y.col(dst[i]) = part.col(i) + b_;
        }
        return y;
    }

    MatX<S> backward(const MatX<S>& x, Dims3 d, const MatX<S>& dy) {
        MatX<S> dx = MatX<S>::Zero(in_, d.voxels());
        MatX<S> dpart(out_, d.voxels());
        gb_ += dy.rowwise().sum();
        for (int t = 0; t < 8; ++t) {
            const auto dst = targets(d, t);
            for (index_t i = 0; i < d.voxels(); ++i) dpart.col(i) = dy.col(dst[i]);
            gw_[t].noalias() += dpart * x.transpose();
            dx.noalias() += w_[t].transpose() * dpart;
        }
        return dx;
    }

    void collect(ParamList<S>& out, const std::string& name) {
        for (int t = 0; t < 8; ++t)
            out.push_back({name + ".w" + std::to_string(t), std::span<S>(w_[t].data(), w_[t].size()),
                           std::span<S>(gw_[t].data(), gw_[t].size())});
        out.push_back({name + ".b", std::span<S>(b_.data(), b_.size()), std::span<S>(gb_.data(), gb_.size())});
    }

private:
    static std::vector<index_t> targets(Dims3 d, int t) {
        const Dims3 od = out_dims(d);
        const int bx = t >> 2, by = (t >> 1) & 1, bz = t & 1;
        std::vector<index_t> dst(static_cast<std::size_t>(d.voxels()));
        for (index_t x = 0; x < d.nx; ++x)
            for (index_t y = 0; y < d.ny; ++y)
                for (index_t z = 0; z < d.nz; ++z) dst[d.offset(x, y, z)] = od.offset(2 * x + bx, 2 * y + by, 2 * z + bz);
        return dst;
    }

    int in_ = 0, out_ = 0;
    MatX<S> w_[8], gw_[8];
    VecX<S> b_, gb_;
};

/// Squeeze-and-excitation style gate: global average pool, two-layer
/// bottleneck, sigmoid, channelwise rescale. The gate is computed once from
/// features that mix every basis and is shared by all of them.
template <class S>
class SharedAttention {
public:
    struct Tape {
        VecX<S> pooled, hidden, gate;
    };

    SharedAttention() = default;
    SharedAttention(int channels, int reduced, std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        auto init = [&](MatX<S>& w, int rows, int cols) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(cols));
            std::uniform_real_distribution<double> u(-bound, bound);
            w = MatX<S>(rows, cols);
            for (index_t i = 0; i < w.size(); ++i) w.data()[i] = static_cast<S>(u(rng));
        };
        init(w1_, reduced, channels);
        init(w2_, channels, reduced);
        b1_ = VecX<S>::Zero(reduced);
        b2_ = VecX<S>::Zero(channels);
        gw1_ = MatX<S>::Zero(reduced, channels);
        gw2_ = MatX<S>::Zero(channels, reduced);
        gb1_ = VecX<S>::Zero(reduced);
        gb2_ = VecX<S>::Zero(channels);
    }

    MatX<S> forward(const MatX<S>& x, Tape& tape) const {
        tape.pooled = x.rowwise().mean();
        tape.hidden = (w1_ * tape.pooled + b1_).cwiseMax(S(0));
        const VecX<S> z = w2_ * tape.hidden + b2_;
        tape.gate = (S(1) / (S(1) + (-z.array()).exp())).matrix();
        return tape.gate.asDiagonal() * x;
    }

    MatX<S> backward(const MatX<S>& x, const Tape& tape, const MatX<S>& dy) {
        MatX<S> dx = tape.gate.asDiagonal() * dy;
        const VecX<S> dgate = dy.cwiseProduct(x).rowwise().sum();
        const VecX<S> dz = dgate.array() * tape.gate.array() * (S(1) - tape.gate.array());
        gw2_.noalias() += dz * tape.hidden.transpose();
        gb2_ += dz;
        VecX<S> dh = w2_.transpose() * dz;
        dh = dh.cwiseProduct((tape.hidden.array() > S(0)).template cast<S>().matrix());
        gw1_.noalias() += dh * tape.pooled.transpose();
        gb1_ += dh;
        const VecX<S> dpool = w1_.transpose() * dh / static_cast<S>(x.cols());
        dx.colwise() += dpool;
        return dx;
    }

    void collect(ParamList<S>& out, const std::string& name) {
        out.push_back({name + ".w1", {w1_.data(), std::size_t(w1_.size())}, {gw1_.data(), std::size_t(gw1_.size())}});
        out.push_back({name + ".b1", {b1_.data(), std::size_t(b1_.size())}, {gb1_.data(), std::size_t(gb1_.size())}});
        out.push_back({name + ".w2", {w2_.data(), std::size_t(w2_.size())}, {gw2_.data(), std::size_t(gw2_.size())}});
        out.push_back({name + ".b2", {b2_.data(), std::size_t(b2_.size())}, {gb2_.data(), std::size_t(gb2_.size())}});
    }

private:
    MatX<S> w1_, w2_, gw1_, gw2_;
    VecX<S> b1_, b2_, gb1_, gb2_;
};

struct RefinerConfig {
    int rank = 15;
    int width = 32;
    int bottleneck = 64;
    int attention_hidden = 16;
};

/// Residual CNN over the 2K real channels of the spatial bases:
/// conv(2K->32) -> stride-2 conv(32->64) -> shared attention ->
/// transposed conv(64->32) -> conv(32->2K), added to the input. The last
/// layer starts at zero, so a fresh refiner is the identity.
template <class S>
class Refiner {
public:
    struct Tape {
        Dims3 dims, half;
        MatX<S> x, a1, a2, att, up;
        typename SharedAttention<S>::Tape att_tape;
    };

    Refiner() = default;
    Refiner(const RefinerConfig& cfg, std::uint64_t seed)
        : cfg_(cfg),
          c1_(2 * cfg.rank, cfg.width, 3, 1, 1, seed + 1),
          c2_(cfg.width, cfg.bottleneck, 3, 2, 1, seed + 2),
          att_(cfg.bottleneck, cfg.attention_hidden, seed + 3),
          up_(cfg.bottleneck, cfg.width, seed + 4),
          c3_(cfg.width, 2 * cfg.rank, 3, 1, 1, seed + 5) {
        if (cfg.rank < 1) throw std::invalid_argument("Refiner: rank must be >= 1");
        c3_.zero_init();
    }

    int rank() const { return cfg_.rank; }
    Conv3d<S>& final_layer() { return c3_; }

    /// x: 2K x V (real parts of the K bases, then imaginary parts).
    MatX<S> forward(const MatX<S>& x, Dims3 d, Tape* tape = nullptr) const {
        if (x.rows() != 2 * cfg_.rank)
            throw std::invalid_argument("cnn_refine: expected " + std::to_string(2 * cfg_.rank) + " channels, got " +
                                        std::to_string(x.rows()));
        if (d.nx % 2 || d.ny % 2 || d.nz % 2)
            throw std::invalid_argument("cnn_refine: every extent must be even, got " + to_string(d));
        Tape local;
        Tape& t = tape ? *tape : local;
        t.dims = d;
        t.half = c2_.out_dims(d);
        t.x = x;
        t.a1 = c1_.forward(x, d).cwiseMax(S(0));
        t.a2 = c2_.forward(t.a1, d).cwiseMax(S(0));
        t.att = att_.forward(t.a2, t.att_tape);
        t.up = up_.forward(t.att, t.half).cwiseMax(S(0));
        return x + c3_.forward(t.up, d);
    }

    /// Accumulates gradients; returns d(loss)/d(x).
    MatX<S> backward(const Tape& t, const MatX<S>& dy) {
        MatX<S> dx = dy;
        MatX<S> g = c3_.backward(t.up, t.dims, dy);
        g = g.cwiseProduct((t.up.array() > S(0)).template cast<S>().matrix());
        g = up_.backward(t.att, t.half, g);
        g = att_.backward(t.a2, t.att_tape, g);
        g = g.cwiseProduct((t.a2.array() > S(0)).template cast<S>().matrix());
        g = c2_.backward(t.a1, t.dims, g);
        g = g.cwiseProduct((t.a1.array() > S(0)).template cast<S>().matrix());
        dx += c1_.backward(t.x, t.dims, g);
        return dx;
    }

    void collect(ParamList<S>& out, const std::string& name) {
        c1_.collect(out, name + ".conv1");
        c2_.collect(out, name + ".down");
        att_.collect(out, name + ".attention");
        up_.collect(out, name + ".up");
        c3_.collect(out, name + ".out");
    }

private:
    RefinerConfig cfg_{};
    Conv3d<S> c1_, c2_;
    SharedAttention<S> att_;
    UpConv3d<S> up_;
    Conv3d<S> c3_;
};

/// Complex bases (K volumes) -> 2K x V real channel matrix and back.
template <class S, class T>
MatX<S> split_channels(const Stack<cx<T>>& u) {
    MatX<S> out(2 * u.count(), u.voxels());
    for (index_t k = 0; k < u.count(); ++k)
        for (index_t v = 0; v < u.voxels(); ++v) {
            out(k, v) = static_cast<S>(u(k, v).real());
            out(k + u.count(), v) = static_cast<S>(u(k, v).imag());
        }
    return out;
}

template <class T, class S>
Stack<cx<T>> merge_channels(const MatX<S>& x, Dims3 d) {
    const index_t k = x.rows() / 2;
    Stack<cx<T>> out(d, k);
    for (index_t j = 0; j < k; ++j)
        for (index_t v = 0; v < d.voxels(); ++v)
            out(j, v) = cx<T>(static_cast<T>(x(j, v)), static_cast<T>(x(j + k, v)));
    return out;
}

}  // namespace qmri

#endif  // QMRI_CNN_HPP
