#ifndef QMRI_METRICS_HPP
#define QMRI_METRICS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>

#include "qmri/array.hpp"
#include "qmri/maps.hpp"
#include "qmri/phantom.hpp"

namespace qmri {

using ClampRange = std::pair<double, double>;
using ClampTable = std::map<MapType, ClampRange>;

/// T1 to 3500 ms, T2 to 200 ms, T2* to 100 ms.
inline ClampTable default_clamps() {
    return {{MapType::T1, {0.0, 3500.0}}, {MapType::T2, {0.0, 200.0}}, {MapType::T2s, {0.0, 100.0}}};
}

/// ||clamp(pred) - clamp(gt)|| / ||clamp(gt)|| over masked voxels.
inline double nrmse(const Volume<double>& pred, const Volume<double>& gt, const std::optional<ClampRange>& clamp,
                    const Volume<std::uint8_t>& mask) {
    require_same_dims(pred.dims(), gt.dims(), "nrmse: prediction vs ground truth");
    require_same_dims(mask.dims(), gt.dims(), "nrmse: mask vs ground truth");
    if (clamp && !(clamp->first <= clamp->second)) throw std::invalid_argument("nrmse: clamp range is empty");
    double num = 0.0, den = 0.0;
    for (index_t v = 0; v < gt.size(); ++v) {
        if (!mask[v]) continue;
        double p = pred[v], g = gt[v];
        if (clamp) {
            p = std::clamp(p, clamp->first, clamp->second);
            g = std::clamp(g, clamp->first, clamp->second);
        }
        num += (p - g) * (p - g);
        den += g * g;
    }
    if (den == 0.0) throw std::invalid_argument("nrmse: ground truth is zero on the mask");
    return std::sqrt(num / den);
}

inline double nrmse(const ParametricMaps& pred, const ParametricMaps& gt, MapType m, const ClampTable& clamps,
                    const Volume<std::uint8_t>& mask) {
    const auto it = clamps.find(m);
    return nrmse(pred[m], gt[m], it == clamps.end() ? std::nullopt : std::optional<ClampRange>(it->second), mask);
}

/// Masked NRMSE over all coils after the single global phase that best
/// aligns the prediction with the ground truth.
inline double coil_nrmse(const CoilMaps& pred, const CoilMaps& gt, const Volume<std::uint8_t>& mask) {
    require_same_dims(pred.dims(), gt.dims(), "coil_nrmse");
    require_same_dims(mask.dims(), gt.dims(), "coil_nrmse: mask");
    if (pred.n_coils() != gt.n_coils())
        throw std::invalid_argument("coil_nrmse: extent mismatch on axis C (" + std::to_string(pred.n_coils()) +
                                    " vs " + std::to_string(gt.n_coils()) + ")");
    const index_t nv = gt.dims().voxels();
    cplx cross{};
    double den = 0.0;
    for (index_t c = 0; c < gt.n_coils(); ++c)
        for (index_t v = 0; v < nv; ++v)
            if (mask[v]) {
                cross += std::conj(pred.maps(c, v)) * gt.maps(c, v);
                den += std::norm(gt.maps(c, v));
            }
    if (den == 0.0) throw std::invalid_argument("coil_nrmse: ground truth is zero on the mask");
    const cplx rot = std::abs(cross) > 0 ? cross / std::abs(cross) : cplx(1);
    double num = 0.0;
    for (index_t c = 0; c < gt.n_coils(); ++c)
        for (index_t v = 0; v < nv; ++v)
            if (mask[v]) num += std::norm(rot * pred.maps(c, v) - gt.maps(c, v));
    return std::sqrt(num / den);
}

}  // namespace qmri

#endif  // QMRI_METRICS_HPP
