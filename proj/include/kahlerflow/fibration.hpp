#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "kahlerflow/forms.hpp"
#include "kahlerflow/grid.hpp"
#include "kahlerflow/ma.hpp"

namespace kahlerflow {

// =============================================================================
// Desk-scale models of a torus fibration f: X -> B with elliptic fibers.
//
// The product chart stacks base factors first, then fiber factors, so fiber
// slices are contiguous. The fiber over y is the torus of modulus tau_f(y):
// the shared unit-square grid carries the y-dependent fiber cell weight
// Im(tau_f(y)) / Im(tau_chart), which enters every fiber integration
// (pushforward, fiber masses, fiber means). The grid's complex structure
// stays that of the fixed chart; tau_f is moduli data, feeding the
// Weil-Petersson form and the fiber quadrature.
// =============================================================================

struct FibrationModel {
    ChartPtr base;
    ChartPtr fiber;
    ChartPtr product; // base factors then fiber factors

    // fiber modulus map on the base (constant or varying), Im > 0
    ScalarField tau_re;
    ScalarField tau_im;

    HermitianFormField chi;    // semi-positive and big, on the base
    HermitianFormField omega0; // positive, on the product
    VolumeDensity Omega;       // strictly positive, on the product

    std::size_t fiber_points() const { return fiber->points(); }
    std::size_t base_points() const { return base->points(); }

    // relative moduli weight of the fiber over base index b
    double fiber_weight(std::size_t b) const { return tau_im.v[b] / fiber->tau(0).imag(); }

    // fiber cell volume over base index b (the chart cell volume times weight)
    double fiber_cell(std::size_t b) const {
        return fiber->cell_volume() * fiber_weight(b);
    }
};

namespace detail {

inline ChartPtr make_product_chart(const ChartPtr& base, const ChartPtr& fiber) {
    std::vector<cd> tau = base->moduli();
    std::vector<int> res = base->resolutions();
    for (int j = 0; j < fiber->complex_dim(); ++j) {
        tau.push_back(fiber->tau(j));
        res.push_back(fiber->resolution(j));
    }
    return TorusChart::create(std::move(tau), std::move(res));
}

} // namespace detail

// validate invariants and assemble the product chart
inline FibrationModel make_fibration_model(ChartPtr base, ChartPtr fiber, ScalarField tau_re,
                                           ScalarField tau_im, HermitianFormField chi,
                                           HermitianFormField omega0, VolumeDensity Omega) {
    if (fiber->complex_dim() != 1)
        throw ContractError("FibrationModel: only one-dimensional fibers are supported");
    FibrationModel m;
    m.base = base;
    m.fiber = fiber;
    m.product = detail::make_product_chart(base, fiber);
    m.tau_re = std::move(tau_re);
    m.tau_im = std::move(tau_im);
    m.chi = std::move(chi);
    m.omega0 = std::move(omega0);
    m.Omega = std::move(Omega);

    for (double x : m.tau_im.v)
        if (!(x > 0.0)) throw ContractError("FibrationModel: Im(tau_f) must be positive");
    if (!m.Omega.positive_everywhere)
        throw ContractError("FibrationModel: Omega must be strictly positive");
    if (!is_positive(m.omega0)) throw ContractError("FibrationModel: omega0 must be positive");

    VolumeDensity chi_top = ma_top(m.chi);
    if (chi_top.min_value < -1e-12)
        throw ContractError("FibrationModel: chi must be semi-positive");
    if (integrate(VolumeDensity(m.base, chi_top.v)) <= 0.0)
        throw ContractError("FibrationModel: chi must be big (positive total mass)");

    // fiber normalization: the omega0 fiber mass is 1 over every base point
    const int d = m.product->complex_dim();
    const std::size_t nf = m.fiber_points();
    for (std::size_t b = 0; b < m.base_points(); ++b) {
        double mass = 0.0;
        for (std::size_t f = 0; f < nf; ++f)
            mass += m.omega0.at(b * nf + f, d - 1, d - 1).real();
        mass *= m.fiber_cell(b);
        if (std::abs(mass - 1.0) > 1e-8)
            throw ContractError("FibrationModel: fiber omega0-mass must be 1, got " +
                                std::to_string(mass));
    }
    return m;
}

// -----------------------------------------------------------------------------
// fiber slicing helpers
// -----------------------------------------------------------------------------

// integral over the fiber above base index b, with moduli weights
inline double fiber_integral(const FibrationModel& m, const std::vector<double>& product_field,
                             std::size_t b) {
    const std::size_t nf = m.fiber_points();
    const double s = detail::pairwise_sum(
        std::span<const double>(product_field.data() + b * nf, nf));
    return s * m.fiber_cell(b);
}

// model-level integral over the product (weighted fiber quadrature)
inline double integrate_product(const FibrationModel& m, const std::vector<double>& field) {
    const std::size_t nb = m.base_points();
    return detail::pairwise_sum_indexed(0, nb, [&](std::size_t b) {
               return fiber_integral(m, field, b);
           }) *
           m.base->cell_volume() / 1.0;
}

// broadcast a base field to the product by constant extension along fibers
inline ScalarField broadcast_to_product(const FibrationModel& m, const ScalarField& base_field) {
    ScalarField out(m.product);
    const std::size_t nf = m.fiber_points();
    for (std::size_t b = 0; b < m.base_points(); ++b)
        for (std::size_t f = 0; f < nf; ++f) out.v[b * nf + f] = base_field.v[b];
    return out;
}

// fiber average of a product field against the weighted flat fiber measure
inline ScalarField fiber_average(const FibrationModel& m, const ScalarField& product_field) {
    ScalarField out(m.base);
    for (std::size_t b = 0; b < m.base_points(); ++b)
        out.v[b] = fiber_integral(m, product_field.v, b);
    return out;
}

// embed a base (1,1)-form into the product (zero fiber components)
inline HermitianFormField embed_base_form(const FibrationModel& m,
                                          const HermitianFormField& base_form) {
    HermitianFormField out(m.product);
    const int db = m.base->complex_dim();
    const std::size_t nf = m.fiber_points();
    for (std::size_t b = 0; b < m.base_points(); ++b)
        for (std::size_t f = 0; f < nf; ++f)
            for (int i = 0; i < db; ++i)
                for (int j = 0; j < db; ++j) out.at(b * nf + f, i, j) = base_form.at(b, i, j);
    return out;
}

// -----------------------------------------------------------------------------
// pushforward: fiber integration of a volume density
// -----------------------------------------------------------------------------
inline VolumeDensity pushforward(const VolumeDensity& v, const FibrationModel& m) {
    check_finite(v.v, "pushforward");
    VolumeDensity out(m.base);
    for (std::size_t b = 0; b < m.base_points(); ++b) out.v[b] = fiber_integral(m, v.v, b);
    out.refresh_metadata();
    return out;
}

// -----------------------------------------------------------------------------
// semi_flat: fiberwise Ricci-flat representative of [omega0]
//
// For elliptic fibers the two-step fiberwise construction collapses to a
// linear problem per base point: h = -log g + c with the mass normalization
// int e^h g = int g, then ddbar_f psi = (e^h - 1) g, psi with zero
// omega0-fiber mean. The fiberwise metric g e^h is constant on each fiber.
// -----------------------------------------------------------------------------

struct SemiFlatData {
    ScalarField psi_sf;          // on the product
    HermitianFormField omega_sf; // omega0 + ddbar(psi_sf)
    VolumeDensity theta;         // fiber-direction top power of omega_sf
    double max_fiber_ricci = 0.0;
};

inline SemiFlatData semi_flat(const FibrationModel& m) {
    const ChartPtr fiber = m.fiber;
    const int d = m.product->complex_dim();
    const std::size_t nf = m.fiber_points();
    const std::size_t nb = m.base_points();
    const cd tau_f = fiber->tau(0);
    const int n_res = fiber->resolution(0);

    // fiberwise spectral inversion of d_z d_zbar on the fiber chart
    const auto symbol = detail::factor_symbol(n_res, tau_f);

    ScalarField psi(m.product);
    std::vector<cd> buf(nf);
    std::vector<double> g(nf), h(nf);
    const std::vector<int> fdims = {n_res, n_res};
    for (std::size_t b = 0; b < nb; ++b) {
        for (std::size_t f = 0; f < nf; ++f) {
            g[f] = m.omega0.at(b * nf + f, d - 1, d - 1).real();
            if (g[f] <= 0.0)
                throw PositivityError("semi_flat: fiber block of omega0 not positive at base " +
                                      std::to_string(b));
        }
        // h = -log g + c,  c from the mass normalization int e^h g = int g
        double mass = 0.0;
        for (std::size_t f = 0; f < nf; ++f) mass += g[f];
        const double c = std::log(mass / static_cast<double>(nf));
        for (std::size_t f = 0; f < nf; ++f) h[f] = -std::log(g[f]) + c;

        // rhs (e^h - 1) g has exact zero mean by the normalization
        for (std::size_t f = 0; f < nf; ++f) buf[f] = (std::exp(h[f]) - 1.0) * g[f];
        detail::FftEngine::instance().forward(buf, fdims);
        for (std::size_t f = 0; f < nf; ++f) {
            const cd z = symbol[f];
            const double s = -std::norm(z);
            buf[f] = (f == 0 || s == 0.0) ? cd(0.0) : buf[f] / s;
        }
        detail::FftEngine::instance().inverse(buf, fdims);
        // fiberwise omega0-mean zero
        double wmean = 0.0;
        for (std::size_t f = 0; f < nf; ++f) wmean += buf[f].real() * g[f];
        wmean /= mass;
        for (std::size_t f = 0; f < nf; ++f) psi.v[b * nf + f] = buf[f].real() - wmean;
    }

    SemiFlatData out;
    out.omega_sf = m.omega0 + ddbar(psi);
    out.psi_sf = std::move(psi);

    // theta: fiber-direction top power (d=1 fiber: the ff coefficient)
    VolumeDensity theta(m.product);
    for (std::size_t p = 0; p < m.product->points(); ++p)
        theta.v[p] = out.omega_sf.at(p, d - 1, d - 1).real();
    theta.refresh_metadata();
    out.theta = std::move(theta);

    // fiberwise Ricci residual: -d_f dbar_f log(theta) should vanish
    double worst = 0.0;
    std::vector<cd> lg(nf);
    for (std::size_t b = 0; b < nb; ++b) {
        for (std::size_t f = 0; f < nf; ++f) {
            const double t = out.theta.v[b * nf + f];
            if (t <= 0.0)
                throw PositivityError("semi_flat: theta not positive at base " + std::to_string(b));
            lg[f] = std::log(t);
        }
        detail::FftEngine::instance().forward(lg, fdims);
        for (std::size_t f = 0; f < nf; ++f) {
            const cd z = symbol[f];
            lg[f] *= -(-std::norm(z)); // -(d dbar) log theta, fiber direction
        }
        detail::FftEngine::instance().inverse(lg, fdims);
        for (std::size_t f = 0; f < nf; ++f) worst = std::max(worst, std::abs(lg[f].real()));
    }
    out.max_fiber_ricci = worst;
    return out;
}

// -----------------------------------------------------------------------------
// density_F: F = pushforward(Omega) / ma_top(chi) on the base, plus the
// consistency metric comparing with Omega / (theta ^ chi^k) on the product
// -----------------------------------------------------------------------------

struct DensityFResult {
    ScalarField F; // on the base
    double consistency = 0.0; // max fiberwise deviation of Omega/(theta chi^k) from F
};

inline DensityFResult density_F(const FibrationModel& m, const SemiFlatData& sf) {
    VolumeDensity chi_top = ma_top(m.chi);
    if (chi_top.min_value <= 0.0)
        throw PositivityError("density_F: chi degenerate");

    VolumeDensity push = pushforward(m.Omega, m);
    DensityFResult out{ScalarField(m.base), 0.0};
    for (std::size_t b = 0; b < m.base_points(); ++b) out.F.v[b] = push.v[b] / chi_top.v[b];

    // product-side evaluation: q = Omega / (theta * chi^k * kappa!)
    // (theta ^ chi^k has density kappa! det(chi) * theta in these units)
    const std::size_t nf = m.fiber_points();
    for (std::size_t b = 0; b < m.base_points(); ++b) {
        for (std::size_t f = 0; f < nf; ++f) {
            const std::size_t p = b * nf + f;
            const double q = m.Omega.v[p] / (chi_top.v[b] * sf.theta.v[p]);
            out.consistency = std::max(out.consistency, std::abs(q - out.F.v[b]));
        }
    }
    return out;
}

// -----------------------------------------------------------------------------
// weil_petersson: -ddbar log Im(tau_f) on the base. The hermitian metric on
// the fiberwise holomorphic forms dz_f has |dz_f|^2(y) proportional to
// Im tau_f(y) (the fiber area), so this is the curvature of that metric.
// -----------------------------------------------------------------------------
inline HermitianFormField weil_petersson(const FibrationModel& m) {
    ScalarField lg(m.base);
    for (std::size_t b = 0; b < m.base_points(); ++b) {
        if (!(m.tau_im.v[b] > 0.0))
            throw ContractError("weil_petersson: Im(tau_f) must be positive");
        lg.v[b] = std::log(m.tau_im.v[b]);
    }
    HermitianFormField out = ddbar(lg);
    for (auto& z : out.m) z = -z;
    return out;
}

} // namespace kahlerflow
