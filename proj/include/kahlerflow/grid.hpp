#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "kahlerflow/detail/fft.hpp"
#include "kahlerflow/detail/hermitian.hpp"
#include "kahlerflow/detail/sum.hpp"

namespace kahlerflow {

using cd = std::complex<double>;

// ---------------------------------------------------------------------------
// errors
// ---------------------------------------------------------------------------

struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct PositivityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NonFiniteError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NonconvergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NormalizationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// TorusChart
// ---------------------------------------------------------------------------
//
// A product of d flat complex tori. Factor j carries the complex coordinate
// z_j = x_j + tau_j * y_j with (x_j, y_j) sampled on an N_j x N_j grid over
// the unit square. Field storage is row-major over the axis order
// [x_1, y_1, x_2, y_2, ...], last axis fastest. The flat reference volume of
// one grid cell is prod_j Im(tau_j) / N_j^2.

class TorusChart {
public:
    static std::shared_ptr<const TorusChart> create(std::vector<cd> moduli,
                                                    std::vector<int> resolutions) {
        if (moduli.empty() || moduli.size() != resolutions.size())
            throw ContractError("TorusChart: need one modulus and one resolution per factor");
        for (std::size_t j = 0; j < moduli.size(); ++j) {
            if (!(moduli[j].imag() > 0.0))
                throw ContractError("TorusChart: Im(tau) must be positive");
            if (resolutions[j] < 4 || resolutions[j] % 2 != 0)
                throw ContractError("TorusChart: resolutions must be even and >= 4");
        }
        return std::shared_ptr<const TorusChart>(
            new TorusChart(std::move(moduli), std::move(resolutions)));
    }

    int complex_dim() const { return static_cast<int>(tau_.size()); }
    const std::vector<cd>& moduli() const { return tau_; }
    cd tau(int j) const { return tau_[static_cast<std::size_t>(j)]; }
    const std::vector<int>& resolutions() const { return res_; }
    int resolution(int j) const { return res_[static_cast<std::size_t>(j)]; }

    std::size_t points() const { return npts_; }
    double cell_volume() const { return cell_; }
    double total_volume() const { return cell_ * static_cast<double>(npts_); }

    // axis lengths [N_1, N_1, N_2, N_2, ...] for rank-2d transforms
    const std::vector<int>& axis_dims() const { return dims_; }

    // coordinate of grid index along a factor axis
    double coord(int axis_index, int i) const {
        return static_cast<double>(i) / static_cast<double>(dims_[static_cast<std::size_t>(axis_index)]);
    }

    // decompose flat index into per-axis indices
    void unravel(std::size_t flat, std::vector<int>& idx) const {
        idx.resize(dims_.size());
        for (std::size_t a = dims_.size(); a-- > 0;) {
            idx[a] = static_cast<int>(flat % static_cast<std::size_t>(dims_[a]));
            flat /= static_cast<std::size_t>(dims_[a]);
        }
    }

    bool same_geometry(const TorusChart& other) const {
        return tau_ == other.tau_ && res_ == other.res_;
    }

private:
    TorusChart(std::vector<cd> moduli, std::vector<int> resolutions)
        : tau_(std::move(moduli)), res_(std::move(resolutions)) {
        npts_ = 1;
        cell_ = 1.0;
        for (std::size_t j = 0; j < tau_.size(); ++j) {
            const auto n = static_cast<std::size_t>(res_[j]);
            npts_ *= n * n;
            cell_ *= tau_[j].imag() / static_cast<double>(n * n);
            dims_.push_back(res_[j]);
            dims_.push_back(res_[j]);
        }
    }

    std::vector<cd> tau_;
    std::vector<int> res_;
    std::vector<int> dims_;
    std::size_t npts_ = 0;
    double cell_ = 0.0;
};

using ChartPtr = std::shared_ptr<const TorusChart>;

// ---------------------------------------------------------------------------
// fields
// ---------------------------------------------------------------------------

struct ScalarField {
    ChartPtr chart;
    std::vector<double> v;

    ScalarField() = default;
    explicit ScalarField(ChartPtr c, double fill = 0.0)
        : chart(std::move(c)), v(chart->points(), fill) {}
    ScalarField(ChartPtr c, std::vector<double> values) : chart(std::move(c)), v(std::move(values)) {
        if (v.size() != chart->points()) throw ContractError("ScalarField: value count mismatch");
    }
};

// nonnegative density measured against the flat reference volume
struct VolumeDensity {
    ChartPtr chart;
    std::vector<double> v;
    bool positive_everywhere = true; // metadata, set by producers
    double min_value = 0.0;

    VolumeDensity() = default;
    explicit VolumeDensity(ChartPtr c, double fill = 0.0)
        : chart(std::move(c)), v(chart->points(), fill), min_value(fill) {}
    VolumeDensity(ChartPtr c, std::vector<double> values)
        : chart(std::move(c)), v(std::move(values)) {
        if (v.size() != chart->points()) throw ContractError("VolumeDensity: value count mismatch");
        refresh_metadata();
    }

    void refresh_metadata() {
        min_value = v.empty() ? 0.0 : *std::min_element(v.begin(), v.end());
        positive_everywhere = min_value > 0.0;
    }
};

// coefficients a_{i jbar} of a (1,1)-form in the frame dz_i dzbar_j,
// stored row-major d x d per grid point
struct HermitianFormField {
    ChartPtr chart;
    int d = 0;
    std::vector<cd> m;

    HermitianFormField() = default;
    explicit HermitianFormField(ChartPtr c)
        : chart(std::move(c)), d(chart->complex_dim()),
          m(chart->points() * static_cast<std::size_t>(d) * static_cast<std::size_t>(d)) {}

    cd& at(std::size_t p, int i, int j) {
        return m[(p * static_cast<std::size_t>(d) + static_cast<std::size_t>(i)) *
                     static_cast<std::size_t>(d) +
                 static_cast<std::size_t>(j)];
    }
    const cd& at(std::size_t p, int i, int j) const {
        return m[(p * static_cast<std::size_t>(d) + static_cast<std::size_t>(i)) *
                     static_cast<std::size_t>(d) +
                 static_cast<std::size_t>(j)];
    }
    const cd* block(std::size_t p) const {
        return m.data() + p * static_cast<std::size_t>(d) * static_cast<std::size_t>(d);
    }
    cd* block(std::size_t p) {
        return m.data() + p * static_cast<std::size_t>(d) * static_cast<std::size_t>(d);
    }
};

// ---------------------------------------------------------------------------
// small field algebra
// ---------------------------------------------------------------------------

inline void check_finite(const std::vector<double>& v, const char* what) {
    for (double x : v)
        if (!std::isfinite(x)) throw NonFiniteError(std::string(what) + ": non-finite value");
}

inline ScalarField operator+(const ScalarField& a, const ScalarField& b) {
    ScalarField out = a;
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += b.v[i];
    return out;
}
inline ScalarField operator-(const ScalarField& a, const ScalarField& b) {
    ScalarField out = a;
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] -= b.v[i];
    return out;
}
inline ScalarField operator*(double c, const ScalarField& a) {
    ScalarField out = a;
    for (auto& x : out.v) x *= c;
    return out;
}
inline ScalarField& operator+=(ScalarField& a, const ScalarField& b) {
    for (std::size_t i = 0; i < a.v.size(); ++i) a.v[i] += b.v[i];
    return a;
}

inline HermitianFormField operator+(const HermitianFormField& a, const HermitianFormField& b) {
    HermitianFormField out = a;
    for (std::size_t i = 0; i < out.m.size(); ++i) out.m[i] += b.m[i];
    return out;
}
inline HermitianFormField operator-(const HermitianFormField& a, const HermitianFormField& b) {
    HermitianFormField out = a;
    for (std::size_t i = 0; i < out.m.size(); ++i) out.m[i] -= b.m[i];
    return out;
}
inline HermitianFormField operator*(double c, const HermitianFormField& a) {
    HermitianFormField out = a;
    for (auto& x : out.m) x *= c;
    return out;
}

// constant-coefficient form from a d x d Hermitian block
inline HermitianFormField constant_form(const ChartPtr& chart, const std::vector<cd>& block) {
    HermitianFormField out(chart);
    const int d = out.d;
    if (block.size() != static_cast<std::size_t>(d * d))
        throw ContractError("constant_form: block size mismatch");
    for (std::size_t p = 0; p < chart->points(); ++p)
        for (int i = 0; i < d * d; ++i) out.block(p)[i] = block[static_cast<std::size_t>(i)];
    return out;
}

inline HermitianFormField scaled_flat_form(const ChartPtr& chart, double scale) {
    HermitianFormField out(chart);
    const int d = out.d;
    for (std::size_t p = 0; p < chart->points(); ++p)
        for (int i = 0; i < d; ++i) out.at(p, i, i) = scale;
    return out;
}

// ---------------------------------------------------------------------------
// integration and means
// ---------------------------------------------------------------------------

// Trapezoidal quadrature on the periodic grid (exact for band-limited data),
// scaled by the flat cell volume. Deterministic pairwise reduction.
inline double integrate(const VolumeDensity& v) {
    check_finite(v.v, "integrate");
    return detail::pairwise_sum(v.v) * v.chart->cell_volume();
}

inline double integrate(const ScalarField& f) {
    check_finite(f.v, "integrate");
    return detail::pairwise_sum(f.v) * f.chart->cell_volume();
}

inline double grid_mean(const ScalarField& f) {
    return detail::pairwise_sum(f.v) / static_cast<double>(f.v.size());
}

inline double sup_norm(const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

inline double field_max(const std::vector<double>& v) {
    return *std::max_element(v.begin(), v.end());
}
inline double field_min(const std::vector<double>& v) {
    return *std::min_element(v.begin(), v.end());
}

// ---------------------------------------------------------------------------
// spectral machinery
// ---------------------------------------------------------------------------

namespace detail {

// dz_j symbol on mode (k, l) of factor j: zeta = (pi / Im tau)(l - conj(tau) k).
// The dzbar_j symbol is -conj(zeta). First-derivative Nyquist modes are
// zeroed, which keeps the symbol odd under (k,l) -> (-k,-l); oddness is what
// makes ddbar output exactly Hermitian for real input.
inline std::vector<cd> factor_symbol(int n, cd tau) {
    std::vector<cd> z(static_cast<std::size_t>(n) * static_cast<std::size_t>(n));
    const double b = tau.imag();
    for (int kx = 0; kx < n; ++kx) {
        const int k = kx <= n / 2 ? kx : kx - n;
        for (int ly = 0; ly < n; ++ly) {
            const int l = ly <= n / 2 ? ly : ly - n;
            cd val = (M_PI / b) * (static_cast<double>(l) - std::conj(tau) * static_cast<double>(k));
            if (std::abs(k) == n / 2 || std::abs(l) == n / 2) val = 0.0;
            z[static_cast<std::size_t>(kx) * static_cast<std::size_t>(n) +
              static_cast<std::size_t>(ly)] = val;
        }
    }
    return z;
}

// per-point symbol value of factor j, given the flat spectral index
class SymbolTable {
public:
    explicit SymbolTable(const TorusChart& chart) {
        const int d = chart.complex_dim();
        factors_.reserve(static_cast<std::size_t>(d));
        strides_.resize(static_cast<std::size_t>(d));
        std::size_t stride = 1;
        for (int j = d - 1; j >= 0; --j) {
            const auto n = static_cast<std::size_t>(chart.resolution(j));
            strides_[static_cast<std::size_t>(j)] = {stride, n};
            stride *= n * n;
        }
        for (int j = 0; j < d; ++j)
            factors_.push_back(factor_symbol(chart.resolution(j), chart.tau(j)));
    }

    // zeta_j at the flat spectral index p
    cd zeta(int j, std::size_t p) const {
        const auto [stride, n] = strides_[static_cast<std::size_t>(j)];
        const std::size_t pair = (p / stride) % (n * n);
        return factors_[static_cast<std::size_t>(j)][pair];
    }

private:
    std::vector<std::vector<cd>> factors_;
    std::vector<std::pair<std::size_t, std::size_t>> strides_; // (stride of y-axis block, N)
};

inline std::vector<cd> to_spectrum(const ScalarField& f) {
    std::vector<cd> buf(f.v.begin(), f.v.end());
    FftEngine::instance().forward(buf, f.chart->axis_dims());
    return buf;
}

inline std::vector<double> from_spectrum_real(std::vector<cd> spec, const TorusChart& chart) {
    FftEngine::instance().inverse(spec, chart.axis_dims());
    std::vector<double> out(spec.size());
    for (std::size_t i = 0; i < spec.size(); ++i) out[i] = spec[i].real();
    return out;
}

// Project a field onto the subspace resolved by the first-derivative symbols
// (Nyquist planes removed; optionally the zero mode too). Pointwise products
// alias energy into the masked modes, which the differential operators cannot
// see; Krylov iterations must stay inside this subspace.
inline void project_resolved_modes(std::vector<double>& v, const TorusChart& chart,
                                   bool remove_mean) {
    const int d = chart.complex_dim();
    std::vector<cd> buf(v.begin(), v.end());
    FftEngine::instance().forward(buf, chart.axis_dims());
    const SymbolTable symbols(chart);
    const std::size_t n = v.size();
    for (std::size_t p = 0; p < n; ++p) {
        if (p == 0) {
            if (remove_mean) buf[p] = 0.0;
            continue;
        }
        // kernel modes of every trace-of-ddbar operator: all symbols vanish
        bool kernel = true;
        for (int j = 0; j < d && kernel; ++j)
            if (symbols.zeta(j, p) != cd(0.0, 0.0)) kernel = false;
        if (kernel) buf[p] = 0.0;
    }
    FftEngine::instance().inverse(buf, chart.axis_dims());
    for (std::size_t p = 0; p < n; ++p) v[p] = buf[p].real();
}

} // namespace detail

// ---------------------------------------------------------------------------
// ddbar
// ---------------------------------------------------------------------------

// coefficient field of sqrt(-1) ddbar(phi): (ddbar phi)_{i jbar} = d_{z_i} d_{zbar_j} phi,
// by spectral differentiation. Output is Hermitian pointwise by construction.
inline HermitianFormField ddbar(const ScalarField& phi) {
    check_finite(phi.v, "ddbar");
    const TorusChart& chart = *phi.chart;
    const int d = chart.complex_dim();
    for (int j = 0; j < d; ++j)
        if (chart.resolution(j) < 4) throw ContractError("ddbar: resolution must be >= 4");

    const detail::SymbolTable symbols(chart);
    auto spectrum = detail::to_spectrum(phi);
    const std::size_t npts = chart.points();

    HermitianFormField out(phi.chart);
    std::vector<cd> work(npts);
    for (int i = 0; i < d; ++i) {
        for (int j = i; j < d; ++j) {
            for (std::size_t p = 0; p < npts; ++p)
                work[p] = spectrum[p] * symbols.zeta(i, p) * (-std::conj(symbols.zeta(j, p)));
            detail::FftEngine::instance().inverse(work, chart.axis_dims());
            if (i == j) {
                for (std::size_t p = 0; p < npts; ++p) out.at(p, i, i) = work[p].real();
            } else {
                for (std::size_t p = 0; p < npts; ++p) {
                    out.at(p, i, j) = work[p];
                    out.at(p, j, i) = std::conj(work[p]);
                }
            }
        }
    }
    return out;
}

// first derivatives d_{z_j} phi for all j (complex fields)
inline std::vector<std::vector<cd>> holomorphic_gradient(const ScalarField& phi) {
    const TorusChart& chart = *phi.chart;
    const int d = chart.complex_dim();
    const detail::SymbolTable symbols(chart);
    auto spectrum = detail::to_spectrum(phi);
    const std::size_t npts = chart.points();
    std::vector<std::vector<cd>> out(static_cast<std::size_t>(d));
    for (int j = 0; j < d; ++j) {
        std::vector<cd> work(npts);
        for (std::size_t p = 0; p < npts; ++p) work[p] = spectrum[p] * symbols.zeta(j, p);
        detail::FftEngine::instance().inverse(work, chart.axis_dims());
        out[static_cast<std::size_t>(j)] = std::move(work);
    }
    return out;
}

// ---------------------------------------------------------------------------
// pointwise matrix helpers on form fields
// ---------------------------------------------------------------------------

inline double min_eigenvalue(const HermitianFormField& a) {
    double m = std::numeric_limits<double>::infinity();
    for (std::size_t p = 0; p < a.chart->points(); ++p)
        m = std::min(m, detail::herm_min_eig(a.block(p), a.d));
    return m;
}

inline bool is_positive(const HermitianFormField& a, double floor = 0.0) {
    for (std::size_t p = 0; p < a.chart->points(); ++p)
        if (detail::herm_min_eig(a.block(p), a.d) <= floor) return false;
    return true;
}

// trace of ddbar(phi) against the inverse of omega: sum_ij g^{i jbar} phi_{i jbar}
inline ScalarField trace_ddbar(const HermitianFormField& omega, const ScalarField& phi) {
    const int d = omega.d;
    HermitianFormField hess = ddbar(phi);
    ScalarField out(phi.chart);
    std::vector<cd> inv(static_cast<std::size_t>(d) * static_cast<std::size_t>(d));
    for (std::size_t p = 0; p < phi.chart->points(); ++p) {
        const double det = detail::herm_det(omega.block(p), d);
        if (det <= 0.0) throw PositivityError("trace_ddbar: reference form not positive");
        detail::herm_inverse(omega.block(p), d, det, inv.data());
        cd acc = 0.0;
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j) acc += inv[static_cast<std::size_t>(d * i + j)] *
                                               hess.at(p, j, i);
        out.v[p] = acc.real();
    }
    return out;
}

// ---------------------------------------------------------------------------
// poisson_solve
// ---------------------------------------------------------------------------

namespace detail {

inline bool has_constant_coefficients(const HermitianFormField& a, double tol = 1e-14) {
    const int dd = a.d * a.d;
    for (std::size_t p = 1; p < a.chart->points(); ++p)
        for (int i = 0; i < dd; ++i)
            if (std::abs(a.block(p)[i] - a.block(0)[i]) > tol) return false;
    return true;
}

// mean coefficient block of a form field
inline std::vector<cd> mean_block(const HermitianFormField& a) {
    const int dd = a.d * a.d;
    std::vector<cd> out(static_cast<std::size_t>(dd), 0.0);
    const std::size_t n = a.chart->points();
    for (int i = 0; i < dd; ++i) {
        double re = pairwise_sum_indexed(0, n, [&](std::size_t p) { return a.block(p)[i].real(); });
        double im = pairwise_sum_indexed(0, n, [&](std::size_t p) { return a.block(p)[i].imag(); });
        out[static_cast<std::size_t>(i)] = cd(re, im) / static_cast<double>(n);
    }
    return out;
}

// spectral application of (sum_ij g^{i jbar} d_{z_i} d_{zbar_j})^{-1} for a
// CONSTANT inverse-metric block; the zero mode maps to zero (mean removed).
// A positive `shift` solves (op - shift)^{-1} instead.
inline std::vector<double> constant_trace_ddbar_inverse(const std::vector<double>& rhs,
                                                        const TorusChart& chart,
                                                        const std::vector<cd>& inv_metric,
                                                        double shift) {
    const int d = chart.complex_dim();
    const SymbolTable symbols(chart);
    std::vector<cd> buf(rhs.begin(), rhs.end());
    FftEngine::instance().forward(buf, chart.axis_dims());
    const std::size_t npts = chart.points();
    for (std::size_t p = 0; p < npts; ++p) {
        cd sym = 0.0;
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j)
                sym += inv_metric[static_cast<std::size_t>(d * i + j)] * symbols.zeta(j, p) *
                       (-std::conj(symbols.zeta(i, p)));
        const double s = sym.real() - shift;
        if (p == 0 && shift == 0.0) {
            buf[p] = 0.0;
        } else if (std::abs(s) < 1e-300) {
            buf[p] = 0.0; // inert modes (Nyquist-masked)
        } else {
            buf[p] /= s;
        }
    }
    FftEngine::instance().inverse(buf, chart.axis_dims());
    std::vector<double> out(npts);
    for (std::size_t p = 0; p < npts; ++p) out[p] = buf[p].real();
    return out;
}

} // namespace detail

struct PoissonOptions {
    double tol = 1e-11;
    int max_iter = 600;
};

// Solve tr_{omega_ref}(ddbar phi) = rho - mean(rho), mean(phi) = 0.
// The mean of rho is taken with respect to omega_ref^d. Constant-coefficient
// references are inverted spectrally; variable coefficients fall back to
// CG preconditioned by the mean-coefficient spectral inverse.
inline ScalarField poisson_solve(const ScalarField& rho, const HermitianFormField& omega_ref,
                                 const PoissonOptions& opts = {}) {
    check_finite(rho.v, "poisson_solve");
    const TorusChart& chart = *rho.chart;
    const int d = omega_ref.d;
    const std::size_t npts = chart.points();

    // inverse metric pointwise and the omega^d-weighted mean of rho
    std::vector<double> dets(npts);
    for (std::size_t p = 0; p < npts; ++p) {
        dets[p] = detail::herm_det(omega_ref.block(p), d);
        if (dets[p] <= 0.0) throw PositivityError("poisson_solve: reference form not positive");
    }
    const double mass = detail::pairwise_sum(dets);
    const double weighted_mean =
        detail::pairwise_sum_indexed(0, npts, [&](std::size_t p) { return rho.v[p] * dets[p]; }) /
        mass;

    std::vector<double> rhs(npts);
    for (std::size_t p = 0; p < npts; ++p) rhs[p] = rho.v[p] - weighted_mean;

    if (detail::has_constant_coefficients(omega_ref)) {
        std::vector<cd> inv(static_cast<std::size_t>(d) * static_cast<std::size_t>(d));
        detail::herm_inverse(omega_ref.block(0), d, dets[0], inv.data());
        auto sol = detail::constant_trace_ddbar_inverse(rhs, chart, inv, 0.0);
        ScalarField out(rho.chart, std::move(sol));
        const double mean = grid_mean(out);
        for (auto& x : out.v) x -= mean;
        return out;
    }

    // Variable coefficients: multiply the equation through by the volume
    // density and run PCG on  P phi = b  with
    //     P := -det(omega_ref) tr_{omega_ref}(ddbar .),   b := -det * rhs.
    // For closed omega_ref, P is symmetric positive semidefinite in the plain
    // pairing with kernel = constants, and b is orthogonal to the kernel by
    // the weighted-mean removal above. Preconditioner: mean-coefficient
    // spectral inverse.
    auto dot = [&](const std::vector<double>& a, const std::vector<double>& b2) {
        return detail::pairwise_sum_indexed(0, npts,
                                            [&](std::size_t i) { return a[i] * b2[i]; });
    };
    auto apply = [&](const std::vector<double>& xv) {
        ScalarField ax = trace_ddbar(omega_ref, ScalarField(rho.chart, xv));
        for (std::size_t p = 0; p < npts; ++p) ax.v[p] *= -dets[p];
        // pointwise products alias into the operator's kernel modes; stay in
        // the resolved subspace (also removes the analytically-zero mean)
        detail::project_resolved_modes(ax.v, chart, /*remove_mean=*/true);
        return ax.v;
    };
    const auto inv_mean_block = [&] {
        auto mb = detail::mean_block(omega_ref);
        const double det = detail::herm_det(mb.data(), d);
        std::vector<cd> inv(static_cast<std::size_t>(d) * static_cast<std::size_t>(d));
        detail::herm_inverse(mb.data(), d, det, inv.data());
        return inv;
    }();
    const double mean_det = mass / static_cast<double>(npts);
    auto precond = [&](const std::vector<double>& r) {
        auto z = detail::constant_trace_ddbar_inverse(r, chart, inv_mean_block, 0.0);
        for (auto& v : z) v *= -1.0 / mean_det;
        return z;
    };

    std::vector<double> b(npts);
    for (std::size_t p = 0; p < npts; ++p) b[p] = -dets[p] * rhs[p];
    detail::project_resolved_modes(b, chart, /*remove_mean=*/true);
    const double b_norm = std::max(sup_norm(b), 1e-300);

    std::vector<double> xv(npts, 0.0);
    std::vector<double> r = b;
    std::vector<double> z = precond(r);
    std::vector<double> pvec = z;
    double rz = dot(r, z);

    for (int it = 0; it < opts.max_iter; ++it) {
        auto ap = apply(pvec);
        const double p_ap = dot(pvec, ap);
        if (p_ap <= 0.0) break;
        const double alpha = rz / p_ap;
        for (std::size_t i = 0; i < npts; ++i) {
            xv[i] += alpha * pvec[i];
            r[i] -= alpha * ap[i];
        }
        if (sup_norm(r) <= opts.tol * b_norm) {
            ScalarField out(rho.chart, std::move(xv));
            const double mean = grid_mean(out);
            for (auto& vv : out.v) vv -= mean;
            return out;
        }
        z = precond(r);
        const double rz_new = dot(r, z);
        const double beta = rz_new / rz;
        rz = rz_new;
        for (std::size_t i = 0; i < npts; ++i) pvec[i] = z[i] + beta * pvec[i];
    }
    // the recurrence residual drifts from the true one near roundoff; recheck
    auto ax = apply(xv);
    double true_res = 0.0;
    for (std::size_t i = 0; i < npts; ++i) true_res = std::max(true_res, std::abs(b[i] - ax[i]));
    if (true_res <= 10.0 * opts.tol * b_norm) {
        ScalarField out(rho.chart, std::move(xv));
        const double mean = grid_mean(out);
        for (auto& vv : out.v) vv -= mean;
        return out;
    }
    throw NonconvergenceError("poisson_solve: CG stalled, residual " + std::to_string(true_res));
}

} // namespace kahlerflow
