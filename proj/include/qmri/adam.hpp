#ifndef QMRI_ADAM_HPP
#define QMRI_ADAM_HPP

#include <cmath>
#include <vector>

#include "qmri/neural_fields.hpp"

namespace qmri {

struct AdamOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adaptive-moment optimiser over a set of parameter blocks. Moments are
/// stored in the parameter type; the update is computed in double.
template <class S>
class Adam {
public:
    Adam() = default;
    explicit Adam(ParamList<S> params, AdamOptions opts = {}) : params_(std::move(params)), opts_(opts) {
        for (const auto& p : params_) {
            m_.emplace_back(p.value.size(), S(0));
            v_.emplace_back(p.value.size(), S(0));
        }
    }

    const ParamList<S>& params() const { return params_; }
    long steps() const { return t_; }

    void zero_grad() { zero_grads(params_); }

    void step(double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
        const double step_size = lr / bc1;
        const double inv_sqrt_bc2 = 1.0 / std::sqrt(bc2);
        for (std::size_t b = 0; b < params_.size(); ++b) {
            auto& p = params_[b];
            auto& m = m_[b];
            auto& v = v_[b];
            auto update = [&](std::size_t i) {
                const double g = static_cast<double>(p.grad[i]);
                if (g == 0.0 && m[i] == S(0)) return;  // untouched table entry
                const double mi = opts_.beta1 * static_cast<double>(m[i]) + (1.0 - opts_.beta1) * g;
                const double vi = opts_.beta2 * static_cast<double>(v[i]) + (1.0 - opts_.beta2) * g * g;
                m[i] = static_cast<S>(mi);
                v[i] = static_cast<S>(vi);
                const double denom = std::sqrt(vi) * inv_sqrt_bc2 + opts_.eps;
                p.value[i] = static_cast<S>(static_cast<double>(p.value[i]) - step_size * mi / denom);
            };
            if (p.sparse)
                for (auto i : p.support) update(i);
            else
                for (std::size_t i = 0; i < p.value.size(); ++i) update(i);
        }
    }

private:
    ParamList<S> params_;
    AdamOptions opts_{};
    std::vector<std::vector<S>> m_, v_;
    long t_ = 0;
};

}  // namespace qmri

#endif  // QMRI_ADAM_HPP
