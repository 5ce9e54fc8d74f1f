#ifndef QMRI_WNNM_HPP
#define QMRI_WNNM_HPP

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "qmri/array.hpp"

namespace qmri {

/// w_j = c / (sigma_j + eps) for singular values sorted descending.
inline std::vector<double> wnnm_weight_schedule(std::span<const double> sigma, double c, double eps) {
    if (eps < 0.0 || !std::isfinite(eps)) throw std::invalid_argument("wnnm_weight_schedule: eps must be >= 0");
    std::vector<double> w;
    w.reserve(sigma.size());
    for (std::size_t j = 0; j < sigma.size(); ++j) {
        if (sigma[j] < 0.0) throw std::invalid_argument("wnnm_weight_schedule: singular values must be >= 0");
        if (j > 0 && sigma[j] > sigma[j - 1])
            throw std::invalid_argument("wnnm_weight_schedule: singular values must be sorted descending");
        if (sigma[j] + eps == 0.0)
            throw std::invalid_argument("wnnm_weight_schedule: eps = 0 with a zero singular value at index " +
                                        std::to_string(j));
        w.push_back(c / (sigma[j] + eps));
    }
    return w;
}

/// Weights are recomputed from the current singular values on every call
/// unless frozen; the gradient always treats them as constants.
struct WnnmWeights {
    static constexpr double kRelativeEps = 1e-4;
    static constexpr double kClusterTol = 1e-6;

    std::vector<std::vector<double>> per_slice;
    bool frozen = false;
};

/// Sum over axial slices (fixed z, an H x W matrix) of sum_j w_j sigma_j.
/// With `grad` non-empty, adds scale * U diag(w) V^T per slice; singular
/// values closer than kClusterTol * sigma_1 share their mean weight.
template <class S>
double wnnm_penalty(std::span<const S> vol, Dims3 d, double scale, std::span<S> grad, WnnmWeights& weights) {
    if (static_cast<index_t>(vol.size()) != d.voxels()) throw std::invalid_argument("wnnm: volume size mismatch");
    for (S v : vol)
        if (!std::isfinite(static_cast<double>(v))) throw std::invalid_argument("wnnm: non-finite map value");
    if (!weights.frozen) weights.per_slice.assign(static_cast<std::size_t>(d.nz), {});
    if (static_cast<index_t>(weights.per_slice.size()) != d.nz)
        throw std::invalid_argument("wnnm: frozen weights do not match the slice count");
    double total = 0.0;
    Eigen::MatrixXd x(d.nx, d.ny);
    for (index_t z = 0; z < d.nz; ++z) {
        for (index_t i = 0; i < d.nx; ++i)
            for (index_t j = 0; j < d.ny; ++j) x(i, j) = static_cast<double>(vol[d.offset(i, j, z)]);
        Eigen::BDCSVD<Eigen::MatrixXd> svd(x, grad.empty() ? 0 : (Eigen::ComputeThinU | Eigen::ComputeThinV));
        const Eigen::VectorXd s = svd.singularValues();
        auto& w = weights.per_slice[static_cast<std::size_t>(z)];
        if (!weights.frozen) {
            if (s.size() == 0 || s[0] == 0.0) {
                w.assign(static_cast<std::size_t>(s.size()), 0.0);
            } else {
                w = wnnm_weight_schedule(std::span<const double>(s.data(), static_cast<std::size_t>(s.size())), 1.0,
                                         WnnmWeights::kRelativeEps * s[0]);
                const double tol = WnnmWeights::kClusterTol * s[0];
                for (index_t a = 0; a < s.size();) {
                    index_t b = a + 1;
                    while (b < s.size() && s[b - 1] - s[b] < tol) ++b;
                    if (b - a > 1) {
                        double mean = 0.0;
                        for (index_t j = a; j < b; ++j) mean += w[j];
                        mean /= static_cast<double>(b - a);
                        for (index_t j = a; j < b; ++j) w[j] = mean;
                    }
                    a = b;
                }
            }
        }
        if (static_cast<index_t>(w.size()) != s.size()) throw std::invalid_argument("wnnm: frozen weight size mismatch");
        const Eigen::Map<const Eigen::VectorXd> wv(w.data(), s.size());
        total += wv.dot(s);
        if (!grad.empty()) {
            const Eigen::MatrixXd g = scale * svd.matrixU() * wv.asDiagonal() * svd.matrixV().transpose();
            for (index_t i = 0; i < d.nx; ++i)
                for (index_t j = 0; j < d.ny; ++j) grad[d.offset(i, j, z)] += static_cast<S>(g(i, j));
        }
    }
    return scale * total;
}

}  // namespace qmri

#endif  // QMRI_WNNM_HPP
