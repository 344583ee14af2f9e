#pragma once

// Test-only oracles, independent of the library's spectral path:
//  - slow O(N^2) DFT differentiation on a line
//  - second-order central finite differences on a periodic line
//  - composite trapezoid quadrature on dense 1D/2D grids
//  - a damped Newton solver for the 1D semilinear comparison problems,
//    discretized with finite differences and solved with a cyclic
//    tridiagonal elimination

#include <cmath>
#include <complex>
#include <functional>
#include <stdexcept>
#include <vector>

namespace oracle {

inline constexpr double kPi = 3.14159265358979323846;

// second spectral derivative d^2/dx^2 on a periodic [0,1) line via direct DFT
inline std::vector<double> dft_second_derivative(const std::vector<double>& f) {
    const int n = static_cast<int>(f.size());
    std::vector<std::complex<double>> spec(static_cast<std::size_t>(n), 0.0);
    for (int k = 0; k < n; ++k) {
        std::complex<double> acc = 0.0;
        for (int i = 0; i < n; ++i)
            acc += f[static_cast<std::size_t>(i)] *
                   std::exp(std::complex<double>(0.0, -2.0 * kPi * k * i / n));
        spec[static_cast<std::size_t>(k)] = acc / static_cast<double>(n);
    }
    std::vector<double> out(static_cast<std::size_t>(n), 0.0);
    for (int i = 0; i < n; ++i) {
        std::complex<double> acc = 0.0;
        for (int k = 0; k < n; ++k) {
            const int m = k <= n / 2 ? k : k - n;
            if (std::abs(m) == n / 2) continue;
            const double w = -4.0 * kPi * kPi * m * m;
            acc += w * spec[static_cast<std::size_t>(k)] *
                   std::exp(std::complex<double>(0.0, 2.0 * kPi * k * i / n));
        }
        out[static_cast<std::size_t>(i)] = acc.real();
    }
    return out;
}

// central second difference on a periodic line
inline std::vector<double> fd_second_derivative(const std::vector<double>& f) {
    const std::size_t n = f.size();
    const double h = 1.0 / static_cast<double>(n);
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double fp = f[(i + 1) % n];
        const double fm = f[(i + n - 1) % n];
        out[i] = (fp - 2.0 * f[i] + fm) / (h * h);
    }
    return out;
}

// trapezoid (= rectangle) rule on the periodic unit interval
inline double quad_periodic(const std::function<double(double)>& f, int n) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += f(static_cast<double>(i) / n);
    return s / n;
}

inline double quad_periodic_2d(const std::function<double(double, double)>& f, int n) {
    double s = 0.0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            s += f(static_cast<double>(i) / n, static_cast<double>(j) / n);
    return s / (static_cast<double>(n) * n);
}

// cyclic tridiagonal solve (Thomas + Sherman-Morrison); a,b,c are the sub-,
// main- and super-diagonals of the periodic system
inline std::vector<double> solve_cyclic_tridiag(std::vector<double> a, std::vector<double> b,
                                                std::vector<double> c, std::vector<double> r) {
    const std::size_t n = b.size();
    auto solve_plain = [](std::vector<double> aa, std::vector<double> bb, std::vector<double> cc,
                          std::vector<double> rr) {
        const std::size_t m = bb.size();
        for (std::size_t i = 1; i < m; ++i) {
            const double w = aa[i] / bb[i - 1];
            bb[i] -= w * cc[i - 1];
            rr[i] -= w * rr[i - 1];
        }
        std::vector<double> x(m);
        x[m - 1] = rr[m - 1] / bb[m - 1];
        for (std::size_t i = m - 1; i-- > 0;) x[i] = (rr[i] - cc[i] * x[i + 1]) / bb[i];
        return x;
    };
    const double alpha = a[0];
    const double beta = c[n - 1];
    const double gamma = -b[0];
    std::vector<double> bmod = b;
    bmod[0] -= gamma;
    bmod[n - 1] -= alpha * beta / gamma;
    std::vector<double> u(n, 0.0);
    u[0] = gamma;
    u[n - 1] = beta;
    auto x = solve_plain(a, bmod, c, r);
    auto z = solve_plain(a, bmod, c, u);
    const double vx = x[0] + alpha / gamma * x[n - 1];
    const double vz = 1.0 + z[0] + alpha / gamma * z[n - 1];
    for (std::size_t i = 0; i < n; ++i) x[i] -= z[i] * vx / vz;
    return x;
}

// Damped Newton for the 1D problem  q * u'' + s(x, u) = 0  on the periodic
// line, with s supplied along with ds/du. Finite differences, dense line.
inline std::vector<double> newton_semilinear_line(
    int n, double q, const std::function<double(double, double)>& s,
    const std::function<double(double, double)>& ds_du, double tol = 1e-12, int max_iter = 60) {
    const double h = 1.0 / n;
    std::vector<double> u(static_cast<std::size_t>(n), 0.0);
    for (int it = 0; it < max_iter; ++it) {
        std::vector<double> res(static_cast<std::size_t>(n));
        double rmax = 0.0;
        for (int i = 0; i < n; ++i) {
            const double x = static_cast<double>(i) / n;
            const double upp = (u[static_cast<std::size_t>((i + 1) % n)] - 2.0 * u[static_cast<std::size_t>(i)] +
                                u[static_cast<std::size_t>((i + n - 1) % n)]) /
                               (h * h);
            res[static_cast<std::size_t>(i)] = q * upp + s(x, u[static_cast<std::size_t>(i)]);
            rmax = std::max(rmax, std::abs(res[static_cast<std::size_t>(i)]));
        }
        if (rmax < tol) return u;
        std::vector<double> sub(static_cast<std::size_t>(n), q / (h * h));
        std::vector<double> sup(static_cast<std::size_t>(n), q / (h * h));
        std::vector<double> dia(static_cast<std::size_t>(n));
        std::vector<double> rhs(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            const double x = static_cast<double>(i) / n;
            dia[static_cast<std::size_t>(i)] = -2.0 * q / (h * h) + ds_du(x, u[static_cast<std::size_t>(i)]);
            rhs[static_cast<std::size_t>(i)] = -res[static_cast<std::size_t>(i)];
        }
        auto delta = solve_cyclic_tridiag(sub, dia, sup, rhs);
        double step = 1.0;
        for (int ls = 0; ls < 40; ++ls) {
            double rnew = 0.0;
            for (int i = 0; i < n; ++i) {
                const double x = static_cast<double>(i) / n;
                const double ui = u[static_cast<std::size_t>(i)] + step * delta[static_cast<std::size_t>(i)];
                const double upp =
                    (u[static_cast<std::size_t>((i + 1) % n)] + step * delta[static_cast<std::size_t>((i + 1) % n)] -
                     2.0 * ui + u[static_cast<std::size_t>((i + n - 1) % n)] +
                     step * delta[static_cast<std::size_t>((i + n - 1) % n)]) /
                    (h * h);
                rnew = std::max(rnew, std::abs(q * upp + s(x, ui)));
            }
            if (rnew < rmax) break;
            step *= 0.5;
        }
        for (int i = 0; i < n; ++i) u[static_cast<std::size_t>(i)] += step * delta[static_cast<std::size_t>(i)];
    }
    throw std::runtime_error("oracle newton_semilinear_line: no convergence");
}

} // namespace oracle
