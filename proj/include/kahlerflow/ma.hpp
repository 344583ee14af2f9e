#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "kahlerflow/forms.hpp"
#include "kahlerflow/grid.hpp"

namespace kahlerflow {

// =============================================================================
// Elliptic Monge-Ampere solvers: damped Newton in log form, with the
// linearized steps done matrix-free by Krylov iteration preconditioned by the
// constant-coefficient spectral inverse.
// =============================================================================

struct SolveReport {
    int iterations = 0;
    std::vector<double> residual_history; // sup-norm of the equation residual, normalized
    std::vector<double> damping_history;
    double oscillation = 0.0; // sup phi - inf phi
    bool converged = false;
    double tolerance = 0.0;
};

struct SolveFailure : NonconvergenceError {
    SolveFailure(const std::string& what, SolveReport rep)
        : NonconvergenceError(what), report(std::move(rep)) {}
    SolveReport report;
};

struct ConeExitError : PositivityError {
    using PositivityError::PositivityError;
};

// -----------------------------------------------------------------------------
// linear kernel: solve (-tr_omega(ddbar .) + c(x)) u = f
//
// After multiplying through by det(omega) the operator is symmetric positive
// definite whenever omega is closed (it always is inside the Newton solvers,
// where omega = const + ddbar phi). The flow's semi-implicit step can hand in
// a slightly non-closed omega, so a BiCGStab path is provided as well.
// -----------------------------------------------------------------------------

enum class KrylovMethod { PCG, BiCGStab };

struct HelmholtzOptions {
    double tol = 1e-11;
    int max_iter = 600;
    KrylovMethod method = KrylovMethod::PCG;
};

inline ScalarField solve_helmholtz(const HermitianFormField& omega, const ScalarField& c,
                                   const ScalarField& f, const HelmholtzOptions& opts = {}) {
    const TorusChart& chart = *f.chart;
    const int d = omega.d;
    const std::size_t npts = chart.points();

    std::vector<double> dets(npts);
    for (std::size_t p = 0; p < npts; ++p) {
        dets[p] = detail::herm_det(omega.block(p), d);
        if (dets[p] <= 0.0) throw PositivityError("solve_helmholtz: omega not positive");
    }

    // P u := det * (-tr_omega(ddbar u) + c u); with c > 0 the derivative-kernel
    // modes are carried by the zeroth-order term, so no projection is needed
    auto apply = [&](const std::vector<double>& xv) {
        ScalarField ax = trace_ddbar(omega, ScalarField(f.chart, xv));
        std::vector<double> out(npts);
        for (std::size_t p = 0; p < npts; ++p) out[p] = dets[p] * (-ax.v[p] + c.v[p] * xv[p]);
        return out;
    };

    // preconditioner: (-tr_mean(ddbar .) + mean(c))^{-1} / mean(det)
    const auto inv_mean_block = [&] {
        auto mb = detail::mean_block(omega);
        const double det = detail::herm_det(mb.data(), d);
        std::vector<cd> inv(static_cast<std::size_t>(d) * static_cast<std::size_t>(d));
        detail::herm_inverse(mb.data(), d, det, inv.data());
        return inv;
    }();
    const double mean_det = detail::pairwise_sum(dets) / static_cast<double>(npts);
    const double mean_c = detail::pairwise_sum(c.v) / static_cast<double>(npts);
    auto precond = [&](const std::vector<double>& r) {
        // symbol of tr(ddbar) is negative; shift by mean_c and invert, then
        // flip sign to approximate (-tr + c)^{-1}
        auto z = detail::constant_trace_ddbar_inverse(r, chart, inv_mean_block, mean_c);
        for (auto& v : z) v *= -1.0 / mean_det;
        return z;
    };

    std::vector<double> b(npts);
    for (std::size_t p = 0; p < npts; ++p) b[p] = dets[p] * f.v[p];
    const double b_norm = std::max(sup_norm(b), 1e-300);

    auto dot = [&](const std::vector<double>& a, const std::vector<double>& bb) {
        return detail::pairwise_sum_indexed(0, npts, [&](std::size_t i) { return a[i] * bb[i]; });
    };

    std::vector<double> x(npts, 0.0);

    if (opts.method == KrylovMethod::PCG) {
        std::vector<double> r = b;
        std::vector<double> z = precond(r);
        std::vector<double> p = z;
        double rz = dot(r, z);
        for (int it = 0; it < opts.max_iter; ++it) {
            auto ap = apply(p);
            const double pap = dot(p, ap);
            if (pap <= 0.0) break;
            const double alpha = rz / pap;
            for (std::size_t i = 0; i < npts; ++i) {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            if (sup_norm(r) <= opts.tol * b_norm) return ScalarField(f.chart, std::move(x));
            z = precond(r);
            const double rz_new = dot(r, z);
            const double beta = rz_new / rz;
            rz = rz_new;
            for (std::size_t i = 0; i < npts; ++i) p[i] = z[i] + beta * p[i];
        }
        auto ax = apply(x);
        double true_res = 0.0;
        for (std::size_t i = 0; i < npts; ++i) true_res = std::max(true_res, std::abs(b[i] - ax[i]));
        if (true_res <= 10.0 * opts.tol * b_norm) return ScalarField(f.chart, std::move(x));
        throw NonconvergenceError("solve_helmholtz: PCG stalled, residual " +
                                  std::to_string(true_res));
    }

    // BiCGStab with right preconditioning
    std::vector<double> r = b;
    std::vector<double> rhat = r;
    double rho = 1.0, alpha = 1.0, w = 1.0;
    std::vector<double> v(npts, 0.0), p(npts, 0.0);
    for (int it = 0; it < opts.max_iter; ++it) {
        const double rho_new = dot(rhat, r);
        if (std::abs(rho_new) < 1e-300) break;
        const double beta = (rho_new / rho) * (alpha / w);
        rho = rho_new;
        for (std::size_t i = 0; i < npts; ++i) p[i] = r[i] + beta * (p[i] - w * v[i]);
        auto y = precond(p);
        v = apply(y);
        alpha = rho / dot(rhat, v);
        std::vector<double> s(npts);
        for (std::size_t i = 0; i < npts; ++i) s[i] = r[i] - alpha * v[i];
        auto z = precond(s);
        auto t = apply(z);
        const double tt = dot(t, t);
        w = tt > 0.0 ? dot(t, s) / tt : 0.0;
        for (std::size_t i = 0; i < npts; ++i) {
            x[i] += alpha * y[i] + w * z[i];
            r[i] = s[i] - w * t[i];
        }
        if (sup_norm(r) <= opts.tol * b_norm) return ScalarField(f.chart, std::move(x));
        if (w == 0.0) break;
    }
    throw NonconvergenceError("solve_helmholtz: BiCGStab stalled");
}

// -----------------------------------------------------------------------------
// solve_twisted_ma: (chi + ddbar phi)^k = F e^phi chi^k
//
// Newton in log form: the linearization at phi is tr_{omega_phi}(ddbar d) - d,
// an invertible operator; damping maintains positivity of chi + ddbar phi
// (eigenvalue floor) and decrease of the sup-norm equation residual.
// -----------------------------------------------------------------------------

struct MaOptions {
    int max_newton = 60;
    double eig_floor = 1e-8;
    double min_step = 1.0 / (1 << 24);
    std::optional<ScalarField> initial_guess;
    KrylovMethod method = KrylovMethod::PCG;
};

struct TwistedMaResult {
    ScalarField phi;
    SolveReport report;
};

inline TwistedMaResult solve_twisted_ma(const HermitianFormField& chi, const ScalarField& F,
                                        double tol, const MaOptions& opts = {}) {
    const ChartPtr chart = F.chart;
    const std::size_t npts = chart->points();
    check_finite(F.v, "solve_twisted_ma F");
    for (double x : F.v)
        if (x <= 0.0) throw ContractError("solve_twisted_ma: F must be positive");

    VolumeDensity chi_top = ma_top(chi);
    if (!chi_top.positive_everywhere)
        throw PositivityError("solve_twisted_ma: chi not positive (use continuity_path)");

    // right-hand scale for the normalized residual
    double rhs_scale = 0.0;
    for (std::size_t p = 0; p < npts; ++p) rhs_scale = std::max(rhs_scale, F.v[p] * chi_top.v[p]);

    ScalarField phi = opts.initial_guess ? *opts.initial_guess : ScalarField(chart);
    SolveReport rep;
    rep.tolerance = tol;

    auto residual_sup = [&](const VolumeDensity& top, const ScalarField& ph) {
        double m = 0.0;
        for (std::size_t p = 0; p < npts; ++p)
            m = std::max(m, std::abs(top.v[p] - F.v[p] * std::exp(ph.v[p]) * chi_top.v[p]));
        return m / rhs_scale;
    };

    HermitianFormField omega = chi + ddbar(phi);
    if (!is_positive(omega, opts.eig_floor))
        throw ConeExitError("solve_twisted_ma: initial guess leaves the positive cone");
    VolumeDensity top = ma_top(omega);
    double res = residual_sup(top, phi);
    rep.residual_history.push_back(res);

    auto log_residual = [&](const VolumeDensity& t, const ScalarField& ph) {
        ScalarField r(chart);
        for (std::size_t p = 0; p < npts; ++p)
            r.v[p] = std::log(t.v[p] / (F.v[p] * chi_top.v[p])) - ph.v[p];
        return r;
    };

    ScalarField ones(chart, 1.0);
    for (int it = 0; it < opts.max_newton; ++it) {
        if (res <= tol) {
            rep.converged = true;
            break;
        }
        // Newton step for the log form: tr_omega(ddbar d) - d = -rlog
        ScalarField rlog = log_residual(top, phi);
        const double rlog_sup = sup_norm(rlog.v);
        ScalarField delta =
            solve_helmholtz(omega, ones, rlog, {.tol = 1e-11, .max_iter = 600, .method = opts.method});

        // line search: positivity floor plus sufficient decrease of the
        // log-form residual (whose directional slope at the Newton direction
        // is exactly -1 per unit step)
        double step = 1.0;
        bool accepted = false;
        while (step >= opts.min_step) {
            ScalarField cand = phi;
            for (std::size_t p = 0; p < npts; ++p) cand.v[p] += step * delta.v[p];
            HermitianFormField omega_c = chi + ddbar(cand);
            if (is_positive(omega_c, opts.eig_floor)) {
                VolumeDensity top_c = ma_top(omega_c);
                const double res_c = residual_sup(top_c, cand);
                const double rlog_c = sup_norm(log_residual(top_c, cand).v);
                if (rlog_c < rlog_sup * (1.0 - 0.25 * step) || res_c < tol) {
                    phi = std::move(cand);
                    omega = std::move(omega_c);
                    top = std::move(top_c);
                    res = res_c;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        rep.iterations = it + 1;
        rep.damping_history.push_back(accepted ? step : 0.0);
        rep.residual_history.push_back(res);
        if (!accepted) {
            rep.oscillation = field_max(phi.v) - field_min(phi.v);
            throw SolveFailure("solve_twisted_ma: damping floor reached at residual " +
                                   std::to_string(res),
                               rep);
        }
    }
    if (!rep.converged && res <= tol) rep.converged = true;
    rep.oscillation = field_max(phi.v) - field_min(phi.v);
    if (!rep.converged)
        throw SolveFailure("solve_twisted_ma: no convergence after max iterations", rep);
    return {std::move(phi), std::move(rep)};
}

// -----------------------------------------------------------------------------
// solve_calabi: (omega + ddbar phi)^n = Omega with mean-zero phi
// -----------------------------------------------------------------------------

inline TwistedMaResult solve_calabi(const HermitianFormField& omega_ref, const VolumeDensity& Omega,
                                    double tol, const MaOptions& opts = {}) {
    const ChartPtr chart = Omega.chart;
    const std::size_t npts = chart->points();
    check_finite(Omega.v, "solve_calabi Omega");
    for (double x : Omega.v)
        if (x <= 0.0)
            throw ContractError("solve_calabi: degenerate Omega not supported, need Omega > 0");

    VolumeDensity ref_top = ma_top(omega_ref);
    if (!ref_top.positive_everywhere) throw PositivityError("solve_calabi: omega not positive");

    const double mass_omega = integrate(VolumeDensity(chart, ref_top.v));
    const double mass_Omega = integrate(Omega);
    if (std::abs(mass_omega - mass_Omega) > 1e-10 * std::abs(mass_omega))
        throw NormalizationError("solve_calabi: int Omega must equal int omega^n (got " +
                                 std::to_string(mass_Omega) + " vs " + std::to_string(mass_omega) +
                                 ")");

    double rhs_scale = 0.0;
    for (double x : Omega.v) rhs_scale = std::max(rhs_scale, x);

    ScalarField phi = opts.initial_guess ? *opts.initial_guess : ScalarField(chart);
    {
        const double m = grid_mean(phi);
        for (auto& x : phi.v) x -= m;
    }
    SolveReport rep;
    rep.tolerance = tol;

    auto residual_sup = [&](const VolumeDensity& top) {
        double m = 0.0;
        for (std::size_t p = 0; p < npts; ++p) m = std::max(m, std::abs(top.v[p] - Omega.v[p]));
        return m / rhs_scale;
    };

    HermitianFormField omega = omega_ref + ddbar(phi);
    if (!is_positive(omega, opts.eig_floor))
        throw ConeExitError("solve_calabi: initial guess leaves the positive cone");
    VolumeDensity top = ma_top(omega);
    double res = residual_sup(top);
    rep.residual_history.push_back(res);

    for (int it = 0; it < opts.max_newton; ++it) {
        if (res <= tol) {
            rep.converged = true;
            break;
        }
        ScalarField rlog(chart);
        for (std::size_t p = 0; p < npts; ++p) rlog.v[p] = std::log(top.v[p] / Omega.v[p]);
        const double rlog_sup = sup_norm(rlog.v);
        // projected Newton step: tr_omega(ddbar delta) = -(rlog - weighted mean)
        ScalarField neg(chart);
        for (std::size_t p = 0; p < npts; ++p) neg.v[p] = -rlog.v[p];
        ScalarField delta = poisson_solve(neg, omega, {.tol = 1e-11, .max_iter = 600});

        double step = 1.0;
        bool accepted = false;
        while (step >= opts.min_step) {
            ScalarField cand = phi;
            for (std::size_t p = 0; p < npts; ++p) cand.v[p] += step * delta.v[p];
            HermitianFormField omega_c = omega_ref + ddbar(cand);
            if (is_positive(omega_c, opts.eig_floor)) {
                VolumeDensity top_c = ma_top(omega_c);
                const double res_c = residual_sup(top_c);
                double rlog_c = 0.0;
                for (std::size_t p = 0; p < npts; ++p)
                    rlog_c = std::max(rlog_c, std::abs(std::log(top_c.v[p] / Omega.v[p])));
                // the projected step drives the log residual towards a constant,
                // so measure decrease of its oscillation
                double lo = std::numeric_limits<double>::infinity(), hi = -lo;
                for (std::size_t p = 0; p < npts; ++p) {
                    const double v = std::log(top_c.v[p] / Omega.v[p]);
                    lo = std::min(lo, v);
                    hi = std::max(hi, v);
                }
                const double osc_c = hi - lo;
                double lo0 = std::numeric_limits<double>::infinity(), hi0 = -lo0;
                for (std::size_t p = 0; p < npts; ++p) {
                    lo0 = std::min(lo0, rlog.v[p]);
                    hi0 = std::max(hi0, rlog.v[p]);
                }
                const double osc0 = hi0 - lo0;
                if (osc_c < osc0 * (1.0 - 0.25 * step) || rlog_c < rlog_sup * (1.0 - 0.25 * step) ||
                    res_c < tol) {
                    phi = std::move(cand);
                    omega = std::move(omega_c);
                    top = std::move(top_c);
                    res = res_c;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        rep.iterations = it + 1;
        rep.damping_history.push_back(accepted ? step : 0.0);
        rep.residual_history.push_back(res);
        if (!accepted) {
            rep.oscillation = field_max(phi.v) - field_min(phi.v);
            throw SolveFailure("solve_calabi: damping floor reached", rep);
        }
    }
    if (!rep.converged)
        throw SolveFailure("solve_calabi: no convergence after max iterations", rep);
    const double m = grid_mean(phi);
    for (auto& x : phi.v) x -= m;
    rep.oscillation = field_max(phi.v) - field_min(phi.v);
    return {std::move(phi), std::move(rep)};
}

// -----------------------------------------------------------------------------
// continuity_path: regularize a semi-positive big chi by chi_j = chi + (1/j) aux
// with geometric schedule j = 1, 2, 4, ..., warm-starting each solve. F stays
// fixed through the family; the chi_j^k factor carries the degeneration, so
// the steps approach (chi + ddbar phi)^k = F e^phi chi^k.
// -----------------------------------------------------------------------------

struct ContinuityResult {
    ScalarField phi;
    std::vector<double> oscillations; // one per step
    std::vector<SolveReport> reports;
};

inline ContinuityResult continuity_path(const HermitianFormField& chi_degenerate,
                                        const ScalarField& F, const HermitianFormField& omega_aux,
                                        int steps, double tol, const MaOptions& base_opts = {}) {
    if (steps < 1) throw ContractError("continuity_path: need at least one step");
    const ChartPtr chart = F.chart;

    // bigness: positive total chi-mass
    VolumeDensity chi_top = ma_top(chi_degenerate);
    if (integrate(VolumeDensity(chart, chi_top.v)) <= 0.0)
        throw ContractError("continuity_path: chi has non-positive total mass");
    if (chi_top.min_value < -1e-12)
        throw ContractError("continuity_path: chi must be semi-positive");

    // already positive: single solve
    if (min_eigenvalue(chi_degenerate) > base_opts.eig_floor) {
        auto res = solve_twisted_ma(chi_degenerate, F, tol, base_opts);
        return {std::move(res.phi), {res.report.oscillation}, {std::move(res.report)}};
    }

    ContinuityResult out;
    MaOptions opts = base_opts;
    for (int s = 0; s < steps; ++s) {
        const double j = static_cast<double>(1 << s);
        HermitianFormField chi_j = chi_degenerate + (1.0 / j) * omega_aux;
        try {
            auto res = solve_twisted_ma(chi_j, F, tol, opts);
            out.oscillations.push_back(res.report.oscillation);
            out.reports.push_back(std::move(res.report));
            opts.initial_guess = res.phi; // warm start
            out.phi = std::move(res.phi);
        } catch (const SolveFailure& e) {
            throw NonconvergenceError("continuity_path: step " + std::to_string(s) +
                                      " (j=" + std::to_string(static_cast<int>(j)) +
                                      ") failed: " + e.what());
        }
    }
    return out;
}

// -----------------------------------------------------------------------------
// comparison_check: Monge-Ampere masses over the sublevel set {phi < psi}
// -----------------------------------------------------------------------------

struct ComparisonReport {
    double gap = 0.0;       // int_S ma(omega_phi) - int_S ma(omega_psi), S = {phi < psi}
    double mass_phi = 0.0;
    double mass_psi = 0.0;
    std::size_t set_points = 0;
    double eps_disc = 0.0; // declared discretization allowance C h^2
    bool pass = false;
};

inline ComparisonReport comparison_check(const ScalarField& phi, const ScalarField& psi,
                                         const HermitianFormField& omega,
                                         double disc_constant = 1.0) {
    const ChartPtr chart = phi.chart;
    HermitianFormField om_phi = omega + ddbar(phi);
    HermitianFormField om_psi = omega + ddbar(psi);
    if (!is_positive(om_phi) || !is_positive(om_psi))
        throw PositivityError("comparison_check: potentials leave the positive cone");
    VolumeDensity m_phi = ma_top(om_phi);
    VolumeDensity m_psi = ma_top(om_psi);

    ComparisonReport rep;
    const std::size_t npts = chart->points();
    const double cell = chart->cell_volume();
    double a = 0.0, b = 0.0;
    for (std::size_t p = 0; p < npts; ++p) {
        if (phi.v[p] < psi.v[p]) {
            a += m_phi.v[p];
            b += m_psi.v[p];
            ++rep.set_points;
        }
    }
    rep.mass_phi = a * cell;
    rep.mass_psi = b * cell;
    rep.gap = rep.mass_phi - rep.mass_psi;
    double hmax = 0.0;
    for (int j = 0; j < chart->complex_dim(); ++j)
        hmax = std::max(hmax, 1.0 / chart->resolution(j));
    rep.eps_disc = disc_constant * hmax * hmax;
    rep.pass = rep.gap >= -rep.eps_disc;
    return rep;
}

// -----------------------------------------------------------------------------
// monotonicity_check: solutions of (chi + ddbar phi)^k = e^phi Omega for
// nested measures Omega_a <= Omega_b satisfy e^{phi_a} Omega_a <= e^{phi_b} Omega_b
// -----------------------------------------------------------------------------

struct MonotonicityReport {
    double worst_violation = 0.0; // max over grid of e^{phi_a} Oa - e^{phi_b} Ob
    bool pass = false;
    SolveReport report_a, report_b;
};

inline MonotonicityReport monotonicity_check(const VolumeDensity& Omega_a,
                                             const VolumeDensity& Omega_b,
                                             const HermitianFormField& chi, double tol,
                                             double allowance = 1e-7) {
    const ChartPtr chart = Omega_a.chart;
    const std::size_t npts = chart->points();
    for (std::size_t p = 0; p < npts; ++p) {
        if (Omega_a.v[p] <= 0.0 || Omega_b.v[p] <= 0.0)
            throw ContractError("monotonicity_check: measures must be positive");
        if (Omega_a.v[p] > Omega_b.v[p])
            throw ContractError("monotonicity_check: Omega_a <= Omega_b violated");
    }
    VolumeDensity chi_top = ma_top(chi);
    ScalarField Fa(chart), Fb(chart);
    for (std::size_t p = 0; p < npts; ++p) {
        Fa.v[p] = Omega_a.v[p] / chi_top.v[p];
        Fb.v[p] = Omega_b.v[p] / chi_top.v[p];
    }
    auto ra = solve_twisted_ma(chi, Fa, tol);
    auto rb = solve_twisted_ma(chi, Fb, tol);

    MonotonicityReport rep;
    rep.report_a = std::move(ra.report);
    rep.report_b = std::move(rb.report);
    for (std::size_t p = 0; p < npts; ++p) {
        const double v = std::exp(ra.phi.v[p]) * Omega_a.v[p] -
                         std::exp(rb.phi.v[p]) * Omega_b.v[p];
        rep.worst_violation = std::max(rep.worst_violation, v);
    }
    rep.pass = rep.worst_violation <= allowance;
    return rep;
}

} // namespace kahlerflow
