#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <complex>
#include <vector>

#include "test_support.hpp"
#include "tscale/control.hpp"

using namespace tscale;

namespace {

std::vector<std::complex<double>> sorted(const Eigen::VectorXcd& v) {
    std::vector<std::complex<double>> out(v.data(), v.data() + v.size());
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
        if (a.real() != b.real()) return a.real() < b.real();
        return a.imag() < b.imag();
    });
    return out;
}

// Roots of z^2 - (2 - mu*gamma*(1+alpha)) z + (1 - mu*gamma) for every
// eigenvalue mu of D L, the scalar closed-loop characteristic polynomial of
// one decoupled mode when the control period equals the step.
std::vector<std::complex<double>> mode_oracle(const Topology& t, const Vec& d,
                                              double gamma, double alpha) {
    const Mat dl = d.asDiagonal() * laplacian(t);
    const Eigen::VectorXcd mu = Eigen::EigenSolver<Mat>(dl, false).eigenvalues();
    std::vector<std::complex<double>> out;
    for (Eigen::Index i = 0; i < mu.size(); ++i) {
        const double m = mu(i).real();  // D L has a real spectrum
        const std::complex<double> tr(2.0 - m * gamma * (1.0 + alpha), 0.0);
        const std::complex<double> det(1.0 - m * gamma, 0.0);
        const std::complex<double> sq = std::sqrt(tr * tr - 4.0 * det);
        out.push_back((tr + sq) / 2.0);
        out.push_back((tr - sq) / 2.0);
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
        if (a.real() != b.real()) return a.real() < b.real();
        return a.imag() < b.imag();
    });
    return out;
}

}  // namespace

TEST_CASE("gain vector scales the phase channel by alpha over period",
          "[control]") {
    const GainSpec g{0.5, 2.0, 4.0, GainKind::sync};
    const RowVec2 f = g.F();
    CHECK(f(0) == 0.25);
    CHECK(f(1) == 0.5);
}

TEST_CASE("synchronization certificate reproduces the two-node bound",
          "[control]") {
    const Topology t(2, {{0, 1}});
    const Vec d = Vec::Ones(2);
    // lambda_max of the path Laplacian is 2, so the bound is 4/((2+1)*2).
    GainSpec g{0.9 * (2.0 / 3.0), 1.0, 1.0, GainKind::sync};
    SyncCertificate cert = sync_gain_check(g, t, d);
    CHECK(cert.lambda_max == Catch::Approx(2.0).epsilon(1e-12));
    CHECK(cert.bound == Catch::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(cert.valid);

    g.gamma = 1.1 * (2.0 / 3.0);
    CHECK_FALSE(sync_gain_check(g, t, d).valid);
    g.gamma = 0.5;
    g.alpha = 0.0;
    CHECK_FALSE(sync_gain_check(g, t, d).valid);
    g.alpha = 1.0;
    g.gamma = 0.0;
    CHECK_FALSE(sync_gain_check(g, t, d).valid);

    GainSpec wrong = g;
    wrong.kind = GainKind::anchor;
    CHECK_THROWS(sync_gain_check(wrong, t, d));
    CHECK_THROWS(sync_gain_check(g, t, Vec::Ones(3)));
    CHECK_THROWS(sync_gain_check(g, t, Vec::Zero(2)));
    CHECK_THROWS(sync_gain_check(g, Topology(3, {{0, 1}}), Vec::Ones(3)));
}

TEST_CASE("broadcast certificate bound is 4 over 2 plus alpha", "[control]") {
    GainSpec g{0.5, 1.0, 2000.0, GainKind::anchor};
    SupervisoryCertificate cert = supervisory_gain_check(g);
    CHECK(cert.bound == Catch::Approx(4.0 / 3.0).epsilon(1e-15));
    CHECK(cert.valid);
    g.gamma = 1.4;
    CHECK_FALSE(supervisory_gain_check(g).valid);
    g.gamma = 0.5;
    g.kind = GainKind::floating;
    CHECK(supervisory_gain_check(g).valid);
    g.kind = GainKind::sync;
    CHECK_THROWS(supervisory_gain_check(g));
}

TEST_CASE("control laws match hand-evaluated cases", "[control]") {
    const RowVec2 f_sync{0.5, 0.25};
    const std::vector<Vec2> fused{Vec2{1.0, 2.0}, Vec2{3.0, 4.0}};
    CHECK(sync_control(fused, f_sync, 2.0) == Catch::Approx(7.0).epsilon(1e-15));
    CHECK(sync_control(std::span<const Vec2>{}, f_sync, 2.0) == 0.0);

    const RowVec2 f_anchor{0.1, 1.0};
    const std::vector<Vec2> offsets{Vec2{2.0, 0.0}, Vec2{4.0, 2.0}};
    CHECK(anchoring_control(offsets, f_anchor) ==
          Catch::Approx(-1.3).epsilon(1e-15));
    CHECK_THROWS(anchoring_control(std::span<const Vec2>{}, f_anchor));

    CHECK(floating_control(Vec2{2.0, 4.0}, RowVec2{0.5, 0.25}) ==
          Catch::Approx(-2.0).epsilon(1e-15));
}

TEST_CASE("assembled and per-mode spectra agree with the scalar roots",
          "[control]") {
    RandomStream rng(41, "spectrum");
    for (int trial = 0; trial < 4; ++trial) {
        const int n = 4 + static_cast<int>(rng.uniform() * 6);
        const Topology t = tsupport::random_connected(n, 0.4, rng);
        const Vec d = tsupport::random_positive(n, rng);
        const double tau = 0.7;
        const SystemMatrices m = system_matrices(tau);

        GainSpec g{0.0, 1.5, tau, GainKind::sync};
        const SyncCertificate cert = sync_gain_check(g, t, d);
        g.gamma = 0.9 * cert.bound;

        const auto assembled = sorted(closed_loop_spectrum(g.F(), t, d, m));
        const auto modal = sorted(sync_mode_spectrum(g.F(), t, d, m));
        const auto oracle = mode_oracle(t, d, g.gamma, g.alpha);
        REQUIRE(assembled.size() == oracle.size());
        for (std::size_t i = 0; i < oracle.size(); ++i) {
            // The assembled matrix has a defective eigenvalue at 1, which a
            // general solver only resolves to about sqrt(machine epsilon).
            CHECK(std::abs(assembled[i] - oracle[i]) < 1e-6);
            CHECK(std::abs(modal[i] - oracle[i]) < 1e-6);
        }
    }
}

TEST_CASE("per-mode spectrum pins the consensus pair at exactly one",
          "[control]") {
    RandomStream rng(42, "boundary");
    const Topology t = tsupport::random_connected(7, 0.3, rng);
    const Vec d = tsupport::random_positive(7, rng);
    const double tau = 1.0;
    const SystemMatrices m = system_matrices(tau);
    GainSpec g{0.0, 1.0, tau, GainKind::sync};
    const SyncCertificate cert = sync_gain_check(g, t, d);

    g.gamma = 0.9 * cert.bound;
    const Eigen::VectorXcd inside = sync_mode_spectrum(g.F(), t, d, m);
    int at_one = 0, strictly_inside = 0;
    for (Eigen::Index i = 0; i < inside.size(); ++i) {
        if (inside(i) == std::complex<double>(1.0, 0.0))
            ++at_one;
        else if (std::abs(inside(i)) < 1.0 - 1e-9)
            ++strictly_inside;
    }
    CHECK(at_one == 2);
    CHECK(strictly_inside == 2 * t.n() - 2);

    g.gamma = 1.1 * cert.bound;
    const Eigen::VectorXcd outside = sync_mode_spectrum(g.F(), t, d, m);
    double rho = 0.0;
    for (Eigen::Index i = 0; i < outside.size(); ++i)
        rho = std::max(rho, std::abs(outside(i)));
    CHECK(rho > 1.0 + 1e-9);

    CHECK_THROWS(sync_mode_spectrum(g.F(), Topology(3, {{0, 1}}), Vec::Ones(3), m));
    CHECK_THROWS(sync_mode_spectrum(g.F(), t, Vec::Ones(3), m));
}
