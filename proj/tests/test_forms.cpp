#include <catch2/catch_amalgamated.hpp>
#include "kahlerflow/detail/rng.hpp"

#include <cmath>

#include "kahlerflow/forms.hpp"
#include "kahlerflow/grid.hpp"
#include "support/oracles.hpp"

using namespace kahlerflow;

namespace {
constexpr double kPi = oracle::kPi;

// random Hermitian positive block R R^H + eps I broadcast as a form field,
// modulated by band-limited profiles so coefficients vary smoothly
HermitianFormField random_positive_form(const ChartPtr& chart, std::uint64_t seed,
                                        double eps = 0.3) {
    detail::SplitMix64 rng(seed);
    const int d = chart->complex_dim();
    HermitianFormField out(chart);
    std::vector<cd> r(static_cast<std::size_t>(d * d));
    for (auto& z : r) z = cd(rng.uniform(-1, 1), rng.uniform(-1, 1));
    std::vector<double> amp(static_cast<std::size_t>(d * d));
    std::vector<double> phase(static_cast<std::size_t>(d * d));
    for (auto& a : amp) a = rng.uniform(0.05, 0.25);
    for (auto& p : phase) p = rng.uniform(0, 2 * kPi);

    std::vector<int> idx;
    for (std::size_t p = 0; p < chart->points(); ++p) {
        chart->unravel(p, idx);
        const double x = chart->coord(0, idx[0]);
        // base block R R^H + eps I
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j) {
                cd acc = 0.0;
                for (int k = 0; k < d; ++k)
                    acc += r[static_cast<std::size_t>(d * i + k)] *
                           std::conj(r[static_cast<std::size_t>(d * j + k)]);
                if (i == j) acc += eps + amp[static_cast<std::size_t>(d * i + j)] *
                                             std::cos(2 * kPi * x + phase[static_cast<std::size_t>(d * i + j)]);
                out.at(p, i, j) = acc;
            }
        // re-symmetrize the diagonal modulation
        for (int i = 0; i < d; ++i)
            for (int j = i + 1; j < d; ++j) {
                const cd v = 0.5 * (out.at(p, i, j) + std::conj(out.at(p, j, i)));
                out.at(p, i, j) = v;
                out.at(p, j, i) = std::conj(v);
            }
    }
    return out;
}
} // namespace

TEST_CASE("ma_top: identity coefficients in d=2 give density 2") {
    auto chart = TorusChart::create({{0.0, 1.0}, {0.0, 1.0}}, {6, 6});
    VolumeDensity v = ma_top(scaled_flat_form(chart, 1.0));
    for (double x : v.v) CHECK(x == Catch::Approx(2.0).epsilon(1e-15));
}

TEST_CASE("ma_top: diagonal determinant") {
    auto chart = TorusChart::create({{0.0, 1.0}, {0.0, 1.0}}, {8, 8});
    HermitianFormField omega(chart);
    std::vector<int> idx;
    for (std::size_t p = 0; p < chart->points(); ++p) {
        chart->unravel(p, idx);
        const double a = 1.0 + 0.5 * std::cos(2 * kPi * chart->coord(0, idx[0]));
        const double b = 2.0 + std::sin(2 * kPi * chart->coord(2, idx[2]));
        omega.at(p, 0, 0) = a;
        omega.at(p, 1, 1) = b;
    }
    VolumeDensity v = ma_top(omega);
    for (std::size_t p = 0; p < chart->points(); ++p) {
        chart->unravel(p, idx);
        const double a = 1.0 + 0.5 * std::cos(2 * kPi * chart->coord(0, idx[0]));
        const double b = 2.0 + std::sin(2 * kPi * chart->coord(2, idx[2]));
        CHECK(v.v[p] == Catch::Approx(2.0 * a * b).epsilon(1e-14));
    }
}

TEST_CASE("ma_top matches cofactor expansion on random positive 2x2 fields") {
    auto chart = TorusChart::create({{0.0, 1.0}, {0.1, 1.1}}, {8, 8});
    HermitianFormField omega = random_positive_form(chart, 42);
    VolumeDensity v = ma_top(omega);
    for (std::size_t p = 0; p < chart->points(); ++p) {
        const cd a = omega.at(p, 0, 0), b = omega.at(p, 0, 1);
        const cd c = omega.at(p, 1, 0), d = omega.at(p, 1, 1);
        const double det = (a * d - b * c).real();
        CHECK(v.v[p] == Catch::Approx(2.0 * det).margin(1e-14));
    }
}

TEST_CASE("ma_top flags non-positive determinants without clamping") {
    auto chart = TorusChart::create({{0.0, 1.0}}, {8});
    HermitianFormField omega = scaled_flat_form(chart, 1.0);
    omega.at(3, 0, 0) = -0.5;
    VolumeDensity v = ma_top(omega);
    CHECK_FALSE(v.positive_everywhere);
    CHECK(v.min_value == Catch::Approx(-0.5));
    CHECK(v.v[3] == Catch::Approx(-0.5));
}

TEST_CASE("ma_top homogeneity: ma_top(c w) = c^d ma_top(w) exactly") {
    auto chart = TorusChart::create({{0.0, 1.0}, {0.0, 1.0}}, {6, 6});
    HermitianFormField omega = random_positive_form(chart, 5);
    VolumeDensity v1 = ma_top(omega);
    VolumeDensity v2 = ma_top(1.7 * omega);
    for (std::size_t p = 0; p < chart->points(); ++p)
        CHECK(v2.v[p] == Catch::Approx(1.7 * 1.7 * v1.v[p]).epsilon(1e-14));
}

TEST_CASE("wedge_density specializes to ma_top") {
    auto chart = TorusChart::create({{0.0, 1.0}, {0.0, 1.0}}, {6, 6});
    HermitianFormField a = random_positive_form(chart, 9);
    VolumeDensity w = wedge_density(WedgeWord::of({&a, &a}));
    VolumeDensity m = ma_top(a);
    for (std::size_t p = 0; p < chart->points(); ++p)
        CHECK(w.v[p] == Catch::Approx(m.v[p]).margin(1e-13));
}

TEST_CASE("wedge_density: complementary diagonal blocks give density 1") {
    auto chart = TorusChart::create({{0.0, 1.0}, {0.0, 1.0}}, {6, 6});
    HermitianFormField a(chart), b(chart);
    for (std::size_t p = 0; p < chart->points(); ++p) {
        a.at(p, 0, 0) = 1.0;
        b.at(p, 1, 1) = 1.0;
    }
    VolumeDensity w = wedge_density(WedgeWord::of({&a, &b}));
    for (double x : w.v) CHECK(x == Catch::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("wedge_density is symmetric and multilinear") {
    auto chart = TorusChart::create({{0.0, 1.0}, {0.0, 1.0}}, {6, 6});
    HermitianFormField a = random_positive_form(chart, 1);
    HermitianFormField b = random_positive_form(chart, 2);
    HermitianFormField c = random_positive_form(chart, 3);

    VolumeDensity ab = wedge_density(WedgeWord::of({&a, &b}));
    VolumeDensity ba = wedge_density(WedgeWord::of({&b, &a}));
    for (std::size_t p = 0; p < chart->points(); ++p)
        CHECK(ab.v[p] == Catch::Approx(ba.v[p]).margin(1e-14));

    HermitianFormField apc = a + c;
    VolumeDensity lhs = wedge_density(WedgeWord::of({&apc, &b}));
    VolumeDensity cb = wedge_density(WedgeWord::of({&c, &b}));
    for (std::size_t p = 0; p < chart->points(); ++p)
        CHECK(lhs.v[p] == Catch::Approx(ab.v[p] + cb.v[p]).margin(1e-13));
}

TEST_CASE("wedge_density rejects degree mismatch") {
    auto chart = TorusChart::create({{0.0, 1.0}, {0.0, 1.0}}, {6, 6});
    HermitianFormField a = scaled_flat_form(chart, 1.0);
    CHECK_THROWS_AS(wedge_density(WedgeWord::of({&a})), ContractError);
}

TEST_CASE("ricci of a flat metric vanishes") {
    auto chart = TorusChart::create({{0.0, 1.0}, {0.2, 0.9}}, {8, 8});
    HermitianFormField flat = scaled_flat_form(chart, 1.4);
    HermitianFormField r = ricci(flat);
    CHECK(sup_entry_norm(r) < 1e-13);
}

TEST_CASE("ricci of a conformally flat line metric: Ric = ddbar G") {
    auto chart = TorusChart::create({{0.0, 1.0}}, {32});
    ScalarField g(chart);
    std::vector<int> idx;
    for (std::size_t p = 0; p < chart->points(); ++p) {
        chart->unravel(p, idx);
        g.v[p] = 0.15 * std::cos(2 * kPi * chart->coord(0, idx[0]));
    }
    HermitianFormField omega(chart);
    for (std::size_t p = 0; p < chart->points(); ++p) omega.at(p, 0, 0) = std::exp(-g.v[p]);
    HermitianFormField r = ricci(omega);
    HermitianFormField want = ddbar(g);
    for (std::size_t p = 0; p < chart->points(); ++p)
        CHECK(std::abs(r.at(p, 0, 0) - want.at(p, 0, 0)) < 1e-12);
}

TEST_CASE("ricci agrees with ddbar(-log ma_top) composition") {
    auto chart = TorusChart::create({{0.0, 1.0}, {0.0, 1.0}}, {12, 12});
    HermitianFormField omega = random_positive_form(chart, 77);
    REQUIRE(is_positive(omega));
    HermitianFormField r = ricci(omega);

    VolumeDensity m = ma_top(omega);
    ScalarField neg_log(omega.chart);
    for (std::size_t p = 0; p < chart->points(); ++p) neg_log.v[p] = -std::log(m.v[p]);
    HermitianFormField r2 = ddbar(neg_log);
    for (std::size_t p = 0; p < chart->points(); ++p)
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 2; ++j)
                CHECK(std::abs(r.at(p, i, j) - r2.at(p, i, j)) < 1e-11);
}

TEST_CASE("ricci rejects non-positive determinant") {
    auto chart = TorusChart::create({{0.0, 1.0}}, {8});
    HermitianFormField bad = scaled_flat_form(chart, 1.0);
    bad.at(2, 0, 0) = -1.0;
    CHECK_THROWS_AS(ricci(bad), PositivityError);
}

TEST_CASE("trace of omega against itself equals the dimension") {
    auto chart = TorusChart::create({{0.0, 1.0}, {0.3, 1.2}}, {8, 8});
    HermitianFormField omega = random_positive_form(chart, 13);
    ScalarField t = trace(omega, omega);
    for (double x : t.v) CHECK(x == Catch::Approx(2.0).margin(1e-13));
}

TEST_CASE("scalar curvature of a flat metric vanishes") {
    auto chart = TorusChart::create({{0.0, 1.0}, {0.0, 1.0}}, {8, 8});
    ScalarField s = scalar_curvature(scaled_flat_form(chart, 0.7));
    CHECK(sup_norm(s.v) < 1e-12);
}

TEST_CASE("scalar curvature of e^u flat on a line matches the 1D spectral oracle") {
    auto chart = TorusChart::create({{0.0, 1.0}}, {64});
    const int n = 64;
    std::vector<double> u_line(n);
    for (int i = 0; i < n; ++i) u_line[static_cast<std::size_t>(i)] = 0.3 * std::cos(2 * kPi * i / n);

    HermitianFormField omega(chart);
    std::vector<int> idx;
    for (std::size_t p = 0; p < chart->points(); ++p) {
        chart->unravel(p, idx);
        omega.at(p, 0, 0) = std::exp(u_line[static_cast<std::size_t>(idx[0])]);
    }
    ScalarField s = scalar_curvature(omega);

    // oracle: S = -e^{-u} (d_z d_zbar u) = -e^{-u} u_xx / 4 via direct DFT
    auto uxx = oracle::dft_second_derivative(u_line);
    for (std::size_t p = 0; p < chart->points(); ++p) {
        chart->unravel(p, idx);
        const double want = -std::exp(-u_line[static_cast<std::size_t>(idx[0])]) *
                            0.25 * uxx[static_cast<std::size_t>(idx[0])];
        CHECK(s.v[p] == Catch::Approx(want).margin(1e-9));
    }
}

TEST_CASE("total scalar curvature is invariant under potential deformation") {
    // amplitudes kept small so the log-det spectral tail is resolved at N=24
    auto chart = TorusChart::create({{0.0, 1.0}, {0.0, 1.0}}, {24, 24});
    HermitianFormField omega = scaled_flat_form(chart, 1.0);
    std::vector<int> idx;
    ScalarField psi(chart), phi(chart);
    for (std::size_t p = 0; p < chart->points(); ++p) {
        chart->unravel(p, idx);
        psi.v[p] = 0.010 * std::cos(2 * kPi * chart->coord(0, idx[0])) +
                   0.008 * std::sin(2 * kPi * chart->coord(2, idx[2]));
        phi.v[p] = 0.012 * std::cos(2 * kPi * (chart->coord(0, idx[0]) + chart->coord(3, idx[3])));
    }
    omega = omega + ddbar(psi);
    REQUIRE(is_positive(omega));
    HermitianFormField omega2 = omega + ddbar(phi);
    REQUIRE(is_positive(omega2));

    auto total = [](const HermitianFormField& w) {
        ScalarField s = scalar_curvature(w);
        VolumeDensity m = ma_top(w);
        VolumeDensity prod(w.chart);
        for (std::size_t p = 0; p < w.chart->points(); ++p) prod.v[p] = s.v[p] * m.v[p];
        return integrate(prod);
    };
    const double t1 = total(omega);
    const double t2 = total(omega2);
    // on a torus both equal zero; the invariance is checked as equality
    CHECK(std::abs(t1 - t2) < 1e-10);
    CHECK(std::abs(t1) < 1e-10);
}

TEST_CASE("hermitian kernels: min eigenvalue and inverse, d = 3") {
    detail::SplitMix64 rng(123);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<cd> r(9), m(9, 0.0);
        for (auto& z : r) z = cd(rng.uniform(-1, 1), rng.uniform(-1, 1));
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                cd acc = i == j ? cd(0.4, 0.0) : cd(0.0, 0.0);
                for (int k = 0; k < 3; ++k)
                    acc += r[static_cast<std::size_t>(3 * i + k)] * std::conj(r[static_cast<std::size_t>(3 * j + k)]);
                m[static_cast<std::size_t>(3 * i + j)] = acc;
            }
        const double det = detail::herm_det(m.data(), 3);
        REQUIRE(det > 0.0);
        std::vector<cd> inv(9);
        detail::herm_inverse(m.data(), 3, det, inv.data());
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                cd acc = 0.0;
                for (int k = 0; k < 3; ++k)
                    acc += m[static_cast<std::size_t>(3 * i + k)] * inv[static_cast<std::size_t>(3 * k + j)];
                CHECK(std::abs(acc - (i == j ? 1.0 : 0.0)) < 1e-12);
            }
        // min eigenvalue: power-iteration oracle on (cI - M)
        const double lmin = detail::herm_min_eig(m.data(), 3);
        const double c = 20.0;
        std::vector<cd> v{cd(1, 0.3), cd(-0.2, 0.7), cd(0.5, -0.1)};
        double lam = 0.0;
        for (int it = 0; it < 3000; ++it) {
            std::vector<cd> w(3, 0.0);
            for (int i = 0; i < 3; ++i) {
                w[static_cast<std::size_t>(i)] = c * v[static_cast<std::size_t>(i)];
                for (int j = 0; j < 3; ++j)
                    w[static_cast<std::size_t>(i)] -= m[static_cast<std::size_t>(3 * i + j)] * v[static_cast<std::size_t>(j)];
            }
            double nrm = 0.0;
            for (auto& z : w) nrm += std::norm(z);
            nrm = std::sqrt(nrm);
            for (int i = 0; i < 3; ++i) v[static_cast<std::size_t>(i)] = w[static_cast<std::size_t>(i)] / nrm;
            lam = nrm;
        }
        CHECK(lmin == Catch::Approx(c - lam).margin(1e-7));
    }
}
