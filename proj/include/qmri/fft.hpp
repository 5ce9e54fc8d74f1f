#ifndef QMRI_FFT_HPP
#define QMRI_FFT_HPP

#include <cmath>
#include <complex>
#include <memory>
#include <span>
#include <stdexcept>
#include <type_traits>
#include <vector>

#include <fftw3.h>

#include "qmri/array.hpp"

namespace qmri {

namespace detail {

template <class S>
struct FftwTraits;

template <>
struct FftwTraits<double> {
    using complex_type = fftw_complex;
    using plan_type = fftw_plan;
    static plan_type plan(int n0, int n1, int n2, complex_type* in, complex_type* out, int sign) {
        return fftw_plan_dft_3d(n0, n1, n2, in, out, sign, FFTW_ESTIMATE);
    }
    static void execute(plan_type p) { fftw_execute(p); }
    static void destroy(plan_type p) { fftw_destroy_plan(p); }
    static void* malloc(std::size_t n) { return fftw_malloc(n); }
    static void free(void* p) { fftw_free(p); }
};

template <>
struct FftwTraits<float> {
    using complex_type = fftwf_complex;
    using plan_type = fftwf_plan;
    static plan_type plan(int n0, int n1, int n2, complex_type* in, complex_type* out, int sign) {
        return fftwf_plan_dft_3d(n0, n1, n2, in, out, sign, FFTW_ESTIMATE);
    }
    static void execute(plan_type p) { fftwf_execute(p); }
    static void destroy(plan_type p) { fftwf_destroy_plan(p); }
    static void* malloc(std::size_t n) { return fftwf_malloc(n); }
    static void free(void* p) { fftwf_free(p); }
};

}  // namespace detail

/// Centred, orthonormal 3D DFT over one volume extent:
/// forward = fftshift(fft(ifftshift(x))) / sqrt(N); inverse is its adjoint.
/// Plans use FFTW_ESTIMATE so results are reproducible run to run.
template <class S>
class Fft3 {
    using Traits = detail::FftwTraits<S>;

public:
    explicit Fft3(Dims3 dims) : dims_(dims) {
        if (!dims.valid()) throw std::invalid_argument("Fft3: invalid extent " + to_string(dims));
        const auto n = static_cast<std::size_t>(dims.voxels());
        buf_ = static_cast<cx<S>*>(Traits::malloc(sizeof(cx<S>) * n));
        if (!buf_) throw std::bad_alloc();
        auto* raw = reinterpret_cast<typename Traits::complex_type*>(buf_);
        fwd_ = Traits::plan(int(dims.nx), int(dims.ny), int(dims.nz), raw, raw, FFTW_FORWARD);
        inv_ = Traits::plan(int(dims.nx), int(dims.ny), int(dims.nz), raw, raw, FFTW_BACKWARD);
        scale_ = S(1) / std::sqrt(static_cast<S>(n));
        build_shift(dims.nx, sx_fwd_, sx_inv_);
        build_shift(dims.ny, sy_fwd_, sy_inv_);
        build_shift(dims.nz, sz_fwd_, sz_inv_);
    }
    Fft3(const Fft3&) = delete;
    Fft3& operator=(const Fft3&) = delete;
    ~Fft3() {
        Traits::destroy(fwd_);
        Traits::destroy(inv_);
        Traits::free(buf_);
    }

    const Dims3& dims() const { return dims_; }

    /// out may alias in.
    void forward(std::span<const cx<S>> in, std::span<cx<S>> out) { run(in, out, true); }
    void inverse(std::span<const cx<S>> in, std::span<cx<S>> out) { run(in, out, false); }

private:
    // Gather tables: ifftshift on the way in, fftshift on the way out.
    static void build_shift(index_t n, std::vector<index_t>& fwd, std::vector<index_t>& inv) {
        fwd.resize(static_cast<std::size_t>(n));
        inv.resize(static_cast<std::size_t>(n));
        for (index_t i = 0; i < n; ++i) {
            fwd[i] = (i + n / 2) % n;        // source of ifftshift output i
            inv[i] = (i + (n + 1) / 2) % n;  // source of fftshift output i
        }
    }

    void run(std::span<const cx<S>> in, std::span<cx<S>> out, bool forward) {
        const auto n = static_cast<std::size_t>(dims_.voxels());
        if (in.size() != n || out.size() != n) throw std::invalid_argument("Fft3: buffer size mismatch");
        for (index_t x = 0; x < dims_.nx; ++x)
            for (index_t y = 0; y < dims_.ny; ++y) {
                const index_t src_row = dims_.offset(sx_fwd_[x], sy_fwd_[y], 0);
                const index_t dst_row = dims_.offset(x, y, 0);
                for (index_t z = 0; z < dims_.nz; ++z) buf_[dst_row + z] = in[src_row + sz_fwd_[z]];
            }
        Traits::execute(forward ? fwd_ : inv_);
        for (index_t x = 0; x < dims_.nx; ++x)
            for (index_t y = 0; y < dims_.ny; ++y) {
                const index_t src_row = dims_.offset(sx_inv_[x], sy_inv_[y], 0);
                const index_t dst_row = dims_.offset(x, y, 0);
                for (index_t z = 0; z < dims_.nz; ++z) out[dst_row + z] = buf_[src_row + sz_inv_[z]] * scale_;
            }
    }

    Dims3 dims_;
    cx<S>* buf_ = nullptr;
    typename Traits::plan_type fwd_{};
    typename Traits::plan_type inv_{};
    S scale_;
    std::vector<index_t> sx_fwd_, sx_inv_, sy_fwd_, sy_inv_, sz_fwd_, sz_inv_;
};

}  // namespace qmri

#endif  // QMRI_FFT_HPP
