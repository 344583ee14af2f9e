#pragma once

#include <array>
#include <cmath>
#include <complex>
#include <stdexcept>

namespace kahlerflow::detail {

using cd = std::complex<double>;

// Dense Hermitian d x d kernels for d <= 3, operating on row-major blocks.
// These run per grid point inside solvers, so they are branch-light and
// allocation-free.

inline double herm_det(const cd* m, int d) {
    switch (d) {
        case 1:
            return m[0].real();
        case 2:
            return m[0].real() * m[3].real() - std::norm(m[1]);
        case 3: {
            const double a = m[0].real(), b = m[4].real(), c = m[8].real();
            const cd p = m[1], q = m[2], r = m[5]; // (0,1), (0,2), (1,2)
            return a * b * c + 2.0 * std::real(p * r * std::conj(q)) - a * std::norm(r) -
                   b * std::norm(q) - c * std::norm(p);
        }
        default:
            throw std::invalid_argument("herm_det: d must be 1, 2 or 3");
    }
}

// inverse of a Hermitian matrix via adjugate; caller guarantees det != 0
inline void herm_inverse(const cd* m, int d, double det, cd* out) {
    switch (d) {
        case 1:
            out[0] = 1.0 / det;
            return;
        case 2:
            out[0] = m[3] / det;
            out[3] = m[0] / det;
            out[1] = -m[1] / det;
            out[2] = -m[2] / det;
            return;
        case 3: {
            // adj(M)^H rows from cofactors; M Hermitian so adj is Hermitian too
            const cd a = m[0], b = m[1], c = m[2];
            const cd e = m[4], f = m[5];
            const cd i = m[8];
            const cd d2 = m[3], g = m[6], h = m[7];
            out[0] = (e * i - f * h) / det;
            out[1] = (c * h - b * i) / det;
            out[2] = (b * f - c * e) / det;
            out[3] = (f * g - d2 * i) / det;
            out[4] = (a * i - c * g) / det;
            out[5] = (c * d2 - a * f) / det;
            out[6] = (d2 * h - e * g) / det;
            out[7] = (b * g - a * h) / det;
            out[8] = (a * e - b * d2) / det;
            return;
        }
        default:
            throw std::invalid_argument("herm_inverse: d must be 1, 2 or 3");
    }
}

// smallest eigenvalue of a Hermitian d x d matrix, closed forms
inline double herm_min_eig(const cd* m, int d) {
    switch (d) {
        case 1:
            return m[0].real();
        case 2: {
            const double tr = m[0].real() + m[3].real();
            const double det = herm_det(m, 2);
            const double disc = std::sqrt(std::max(0.0, tr * tr - 4.0 * det));
            return 0.5 * (tr - disc);
        }
        case 3: {
            // Trigonometric solution of the characteristic cubic for the
            // shifted matrix B = (M - q I)/p; eigenvalues q + 2 p cos(...).
            const double q = (m[0].real() + m[4].real() + m[8].real()) / 3.0;
            double p2 = 0.0;
            for (int r = 0; r < 3; ++r)
                for (int c = 0; c < 3; ++c) {
                    cd v = m[3 * r + c];
                    if (r == c) v -= q;
                    p2 += std::norm(v);
                }
            const double p = std::sqrt(p2 / 6.0);
            if (p < 1e-300) return q;
            std::array<cd, 9> b;
            for (int r = 0; r < 3; ++r)
                for (int c = 0; c < 3; ++c) {
                    b[3 * r + c] = m[3 * r + c] / p;
                    if (r == c) b[3 * r + c] -= q / p;
                }
            double detb = herm_det(b.data(), 3);
            double arg = detb / 2.0;
            arg = std::min(1.0, std::max(-1.0, arg));
            const double phi = std::acos(arg) / 3.0;
            // smallest root is at phi + 2*pi/3
            return q + 2.0 * p * std::cos(phi + 2.0 * M_PI / 3.0);
        }
        default:
            throw std::invalid_argument("herm_min_eig: d must be 1, 2 or 3");
    }
}

} // namespace kahlerflow::detail
