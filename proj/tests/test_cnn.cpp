#include <gtest/gtest.h>

#include <random>

#include "fd_check.hpp"
#include "qmri/cnn.hpp"

using namespace qmri;

namespace {

MatX<double> random_matrix(index_t r, index_t c, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    MatX<double> m(r, c);
    for (index_t i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
    return m;
}

// Direct triple-loop convolution used as the reference.
MatX<double> naive_conv(const MatX<double>& x, Dims3 d, const std::vector<MatX<double>>& w, const VecX<double>& b,
                        int k, int stride, int pad) {
    auto o = [&](index_t n) { return (n + 2 * pad - k) / stride + 1; };
    const Dims3 od{o(d.nx), o(d.ny), o(d.nz)};
    MatX<double> y(b.size(), od.voxels());
    for (index_t x0 = 0; x0 < od.nx; ++x0)
        for (index_t y0 = 0; y0 < od.ny; ++y0)
            for (index_t z0 = 0; z0 < od.nz; ++z0) {
                VecX<double> acc = b;
                for (int i = 0; i < k; ++i)
                    for (int j = 0; j < k; ++j)
                        for (int l = 0; l < k; ++l) {
                            const index_t xi = x0 * stride + i - pad, yi = y0 * stride + j - pad, zi = z0 * stride + l - pad;
                            if (xi < 0 || yi < 0 || zi < 0 || xi >= d.nx || yi >= d.ny || zi >= d.nz) continue;
                            acc += w[(i * k + j) * k + l] * x.col(d.offset(xi, yi, zi));
                        }
                y.col(od.offset(x0, y0, z0)) = acc;
            }
    return y;
}

}  // namespace

TEST(Conv3d, MatchesDirectConvolution) {
    const Dims3 d{6, 4, 4};
    for (int stride : {1, 2}) {
        Conv3d<double> conv(3, 5, 3, stride, 1, 7);
        ParamList<double> params;
        conv.collect(params, "c");
        std::vector<MatX<double>> w;
        for (int t = 0; t < 27; ++t) w.push_back(Eigen::Map<MatX<double>>(params[t].value.data(), 5, 3));
        const VecX<double> b = Eigen::Map<VecX<double>>(params[27].value.data(), 5);
        const auto x = random_matrix(3, d.voxels(), 1);
        const auto y = conv.forward(x, d);
        EXPECT_LT((y - naive_conv(x, d, w, b, 3, stride, 1)).cwiseAbs().maxCoeff(), 1e-12);
        EXPECT_EQ(conv.out_dims(d), (stride == 1 ? d : Dims3{3, 2, 2}));
    }
}

TEST(Refiner, IdentityAtInitialisation) {
    RefinerConfig cfg;
    cfg.rank = 3;
    Refiner<double> r(cfg, 1);
    const Dims3 d{8, 6, 4};
    const auto x = random_matrix(6, d.voxels(), 2);
    EXPECT_EQ(r.forward(x, d), x);
}

TEST(Refiner, ShapeAndErrors) {
    RefinerConfig cfg;
    cfg.rank = 2;
    Refiner<double> r(cfg, 1);
    const Dims3 d{4, 4, 2};
    EXPECT_EQ(r.forward(random_matrix(4, d.voxels(), 0), d).rows(), 4);
    EXPECT_THROW(r.forward(random_matrix(6, d.voxels(), 0), d), std::invalid_argument);
    EXPECT_THROW(r.forward(random_matrix(4, 3 * 4 * 2, 0), {3, 4, 2}), std::invalid_argument);
}

TEST(Refiner, ComplexChannelRoundTrip) {
    Stack<cplx> u({2, 2, 2}, 3);
    for (index_t i = 0; i < u.size(); ++i) u[i] = cplx(i, -0.5 * i);
    const auto m = split_channels<double>(u);
    EXPECT_EQ(m.rows(), 6);
    EXPECT_EQ(m(4, 1), u(1, 1).imag());
    EXPECT_EQ((merge_channels<double, double>(m, {2, 2, 2})), u);
}

TEST(Refiner, GradientMatchesFiniteDifferences) {
    RefinerConfig cfg;
    cfg.rank = 2;
    cfg.width = 4;
    cfg.bottleneck = 6;
    cfg.attention_hidden = 3;
    Refiner<double> r(cfg, 3);
    // A non-zero last layer so every block is exercised.
    ParamList<double> params;
    r.collect(params, "cnn");
    std::mt19937_64 rng(5);
    std::normal_distribution<double> g(0.0, 0.2);
    for (auto& p : params)
        if (p.name.rfind("cnn.out", 0) == 0)
            for (auto& v : p.value) v = g(rng);
    const Dims3 d{4, 4, 2};
    const auto x = random_matrix(4, d.voxels(), 6);
    const auto w = random_matrix(4, d.voxels(), 7);
    zero_grads(params);
    Refiner<double>::Tape tape;
    const auto y = r.forward(x, d, &tape);
    const MatX<double> dx = r.backward(tape, w);
    auto loss = [&] { return r.forward(x, d).cwiseProduct(w).sum(); };
    EXPECT_NEAR(loss(), y.cwiseProduct(w).sum(), 1e-12);
    const auto probes = fdcheck::probe(params, loss, 2, 17);
    ASSERT_GT(probes.size(), 20u);
    for (const auto& p : probes) EXPECT_LT(p.rel_error(), 1e-4) << p.block << "[" << p.index << "]";
    // input gradient
    MatX<double> xp = x;
    for (index_t i : {0L, 5L, 17L, 30L}) {
        const double h = 1e-6;
        xp.data()[i] += h;
        const double lp = r.forward(xp, d).cwiseProduct(w).sum();
        xp.data()[i] -= 2 * h;
        const double lm = r.forward(xp, d).cwiseProduct(w).sum();
        xp.data()[i] += h;
        const double fd = (lp - lm) / (2 * h);
        EXPECT_LT(std::abs(fd - dx.data()[i]) / std::max(1e-8, std::abs(fd)), 1e-4);
    }
}
