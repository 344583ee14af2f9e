#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "kahlerflow/grid.hpp"

namespace kahlerflow {

// =============================================================================
// Pointwise multilinear algebra of (1,1)-forms.
//
// Density convention: a wedge of d coefficient matrices A^1 .. A^d is stored
// as the mixed-discriminant density
//     D(A^1..A^d) = sum_{s,r in S_d} sgn(s) sgn(r) prod_k A^k_{s(k) r(k)},
// taken over the factor SEQUENCE (repeated factors included once per power).
// It specializes to D(A..A) = d! det(A), which is ma_top. All volume
// densities in this library are measured in these units against the flat
// reference, so equations relate like to like.
// =============================================================================

namespace detail {

inline constexpr std::array<std::array<int, 3>, 6> kPerm3 = {{
    {0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0},
}};
inline constexpr std::array<int, 6> kSign3 = {1, -1, -1, 1, 1, -1};

// mixed discriminant of d blocks (each row-major d x d) at one point
inline double mixed_discriminant(const cd* const* blocks, int d) {
    switch (d) {
        case 1:
            return blocks[0][0].real();
        case 2: {
            const cd* a = blocks[0];
            const cd* b = blocks[1];
            return (a[0] * b[3] + a[3] * b[0] - a[1] * b[2] - a[2] * b[1]).real();
        }
        case 3: {
            cd acc = 0.0;
            for (std::size_t s = 0; s < 6; ++s)
                for (std::size_t r = 0; r < 6; ++r) {
                    const double sign = kSign3[s] * kSign3[r];
                    cd term = 1.0;
                    for (int k = 0; k < 3; ++k)
                        term *= blocks[k][3 * kPerm3[s][static_cast<std::size_t>(k)] +
                                          kPerm3[r][static_cast<std::size_t>(k)]];
                    acc += sign * term;
                }
            return acc.real();
        }
        default:
            throw ContractError("mixed_discriminant: d must be 1, 2 or 3");
    }
}

} // namespace detail

// -----------------------------------------------------------------------------
// ma_top: density of omega^d relative to the flat reference, = d! det(coef).
// Negative or zero determinants are flagged in the metadata, not clamped.
// -----------------------------------------------------------------------------
inline VolumeDensity ma_top(const HermitianFormField& omega) {
    const int d = omega.d;
    double fact = 1.0;
    for (int k = 2; k <= d; ++k) fact *= k;
    VolumeDensity out(omega.chart);
    const std::size_t n = omega.chart->points();
    double mn = std::numeric_limits<double>::infinity();
    for (std::size_t p = 0; p < n; ++p) {
        const double v = fact * detail::herm_det(omega.block(p), d);
        out.v[p] = v;
        mn = std::min(mn, v);
    }
    out.min_value = mn;
    out.positive_everywhere = mn > 0.0;
    return out;
}

// -----------------------------------------------------------------------------
// WedgeWord: an ordered list of form references with multiplicities summing
// to the chart dimension.
// -----------------------------------------------------------------------------
struct WedgeWord {
    std::vector<const HermitianFormField*> factors; // repeated per power

    static WedgeWord of(std::initializer_list<const HermitianFormField*> fs) {
        WedgeWord w;
        w.factors.assign(fs.begin(), fs.end());
        return w;
    }
};

inline VolumeDensity wedge_density(const WedgeWord& w) {
    if (w.factors.empty()) throw ContractError("wedge_density: empty word");
    const HermitianFormField& first = *w.factors.front();
    const int d = first.d;
    if (static_cast<int>(w.factors.size()) != d)
        throw ContractError("wedge_density: total degree must equal chart dimension");
    for (const auto* f : w.factors)
        if (!f->chart->same_geometry(*first.chart))
            throw ContractError("wedge_density: factors live on different charts");

    VolumeDensity out(first.chart);
    const std::size_t n = first.chart->points();
    std::array<const cd*, 3> blocks{};
    for (std::size_t p = 0; p < n; ++p) {
        for (int k = 0; k < d; ++k) blocks[static_cast<std::size_t>(k)] = w.factors[static_cast<std::size_t>(k)]->block(p);
        out.v[p] = detail::mixed_discriminant(blocks.data(), d);
    }
    out.refresh_metadata();
    return out;
}

// wedge density of alpha ^ omega^(d-1) without building a WedgeWord
inline VolumeDensity wedge_against_power(const HermitianFormField& alpha,
                                         const HermitianFormField& omega) {
    const int d = alpha.d;
    WedgeWord w;
    w.factors.push_back(&alpha);
    for (int k = 1; k < d; ++k) w.factors.push_back(&omega);
    return wedge_density(w);
}

// -----------------------------------------------------------------------------
// ricci: -ddbar log det(omega), computed spectrally from the log-determinant
// -----------------------------------------------------------------------------
inline HermitianFormField ricci(const HermitianFormField& omega) {
    const int d = omega.d;
    ScalarField logdet(omega.chart);
    for (std::size_t p = 0; p < omega.chart->points(); ++p) {
        const double det = detail::herm_det(omega.block(p), d);
        if (det <= 0.0) throw PositivityError("ricci: determinant not positive");
        logdet.v[p] = std::log(det);
    }
    HermitianFormField out = ddbar(logdet);
    for (auto& z : out.m) z = -z;
    return out;
}

// -----------------------------------------------------------------------------
// traces and curvature
// -----------------------------------------------------------------------------

// tr_omega(theta) = sum g^{i jbar} theta_{i jbar}
inline ScalarField trace(const HermitianFormField& omega, const HermitianFormField& theta) {
    const int d = omega.d;
    ScalarField out(omega.chart);
    std::vector<cd> inv(static_cast<std::size_t>(d) * static_cast<std::size_t>(d));
    for (std::size_t p = 0; p < omega.chart->points(); ++p) {
        const double det = detail::herm_det(omega.block(p), d);
        if (det <= 0.0) throw PositivityError("trace: reference form not positive");
        detail::herm_inverse(omega.block(p), d, det, inv.data());
        cd acc = 0.0;
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j)
                acc += inv[static_cast<std::size_t>(d * i + j)] * theta.at(p, j, i);
        out.v[p] = acc.real();
    }
    return out;
}

inline ScalarField scalar_curvature(const HermitianFormField& omega) {
    return trace(omega, ricci(omega));
}

// metric Laplacian of a scalar: tr_omega(ddbar f)
inline ScalarField laplacian(const HermitianFormField& omega, const ScalarField& f) {
    return trace_ddbar(omega, f);
}

// |grad f|^2_omega = g^{i jbar} (d_{z_i} f)(d_{zbar_j} f) = g^{i jbar} f_i conj(f_j)
inline ScalarField gradient_norm_sq(const HermitianFormField& omega, const ScalarField& f) {
    const int d = omega.d;
    auto grad = holomorphic_gradient(f);
    ScalarField out(f.chart);
    std::vector<cd> inv(static_cast<std::size_t>(d) * static_cast<std::size_t>(d));
    for (std::size_t p = 0; p < f.chart->points(); ++p) {
        const double det = detail::herm_det(omega.block(p), d);
        if (det <= 0.0) throw PositivityError("gradient_norm_sq: form not positive");
        detail::herm_inverse(omega.block(p), d, det, inv.data());
        cd acc = 0.0;
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j)
                acc += inv[static_cast<std::size_t>(d * i + j)] * grad[static_cast<std::size_t>(i)][p] *
                       std::conj(grad[static_cast<std::size_t>(j)][p]);
        out.v[p] = acc.real();
    }
    return out;
}

// sup-norm of a form field: max over points of the max absolute entry
inline double sup_entry_norm(const HermitianFormField& a) {
    double m = 0.0;
    for (const auto& z : a.m) m = std::max(m, std::abs(z));
    return m;
}

} // namespace kahlerflow
