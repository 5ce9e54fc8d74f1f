#ifndef QMRI_SUBSPACE_HPP
#define QMRI_SUBSPACE_HPP

#include <cmath>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "qmri/array.hpp"
#include "qmri/signal.hpp"

namespace qmri {

/// Temporal basis Phi (K x T) with orthonormal rows, plus the full singular
/// spectrum of the dictionary it came from.
struct TemporalBasis {
    Eigen::MatrixXcd phi;
    Eigen::VectorXd singular_values;

    index_t rank() const { return phi.rows(); }
    index_t frames() const { return phi.cols(); }

    /// sum_{i<k} s_i^2 / sum_i s_i^2
    double captured_energy(index_t k) const {
        const double total = singular_values.squaredNorm();
        if (total <= 0.0) return 0.0;
        return singular_values.head(std::min<index_t>(k, singular_values.size())).squaredNorm() / total;
    }
};

using SpatialBases = Stack<cplx>;  // count = K

/// Top-K right singular vectors of the dictionary (rows = signal evolutions).
/// Real dictionaries yield a real basis; each row is phase-normalised so its
/// largest-magnitude entry is real and positive.
inline TemporalBasis temporal_basis(const Eigen::MatrixXcd& dictionary, index_t k) {
    const index_t max_rank = std::min(dictionary.rows(), dictionary.cols());
    if (k < 1 || k > max_rank)
        throw std::invalid_argument("temporal_basis: K=" + std::to_string(k) + " out of range [1, " +
                                    std::to_string(max_rank) + "]");
    TemporalBasis out;
    const bool is_real = dictionary.imag().cwiseAbs().maxCoeff() == 0.0;
    Eigen::MatrixXcd v;
    if (is_real) {
        Eigen::BDCSVD<Eigen::MatrixXd> svd(dictionary.real(), Eigen::ComputeThinV);
        out.singular_values = svd.singularValues();
        v = svd.matrixV().cast<cplx>();
    } else {
        Eigen::BDCSVD<Eigen::MatrixXcd> svd(dictionary, Eigen::ComputeThinV);
        out.singular_values = svd.singularValues();
        v = svd.matrixV();
    }
    out.phi = v.leftCols(k).adjoint();
    for (index_t r = 0; r < k; ++r) {
        index_t j;
        out.phi.row(r).cwiseAbs().maxCoeff(&j);
        const cplx p = out.phi(r, j);
        out.phi.row(r) *= std::conj(p) / std::abs(p);
        if (is_real) out.phi.row(r) = out.phi.row(r).real().cast<cplx>();
    }
    return out;
}

/// I_w(v, t) = sum_k U(v, k) Phi(k, t).
inline Stack<cplx> compose_weighted(const SpatialBases& u, const TemporalBasis& phi) {
    if (u.count() != phi.rank())
        throw std::invalid_argument("compose_weighted: rank mismatch (bases " + std::to_string(u.count()) +
                                    ", basis " + std::to_string(phi.rank()) + ")");
    Stack<cplx> out(u.dims(), phi.frames());
    Eigen::Map<const Eigen::MatrixXcd> um(u.data(), u.voxels(), u.count());
    Eigen::Map<Eigen::MatrixXcd> om(out.data(), out.voxels(), out.count());
    om.noalias() = um * phi.phi;
    return out;
}

inline WeightedImages compose_weighted(const SpatialBases& u, const TemporalBasis& phi,
                                       const SequenceProtocol& protocol) {
    return {compose_weighted(u, phi), protocol};
}

/// U = I_w Phi^H (least-squares coefficients for orthonormal rows).
inline SpatialBases project_to_subspace(const Stack<cplx>& iw, const TemporalBasis& phi) {
    if (iw.count() != phi.frames())
        throw std::invalid_argument("project_to_subspace: frame count mismatch (images " +
                                    std::to_string(iw.count()) + ", basis " + std::to_string(phi.frames()) + ")");
    SpatialBases out(iw.dims(), phi.rank());
    Eigen::Map<const Eigen::MatrixXcd> im(iw.data(), iw.voxels(), iw.count());
    Eigen::Map<Eigen::MatrixXcd> om(out.data(), out.voxels(), out.count());
    om.noalias() = im * phi.phi.adjoint();
    return out;
}

inline SpatialBases project_to_subspace(const WeightedImages& iw, const TemporalBasis& phi) {
    return project_to_subspace(iw.data, phi);
}

}  // namespace qmri

#endif  // QMRI_SUBSPACE_HPP
