#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "test_support.hpp"
#include "tscale/estimation.hpp"

using namespace tscale;

namespace {

// Independent assembly of the stacked edge system for one node: state is
// [phase diffs; freq diffs] over J neighbors.
struct StackedSystem {
    Mat a, c, q, r;
};

StackedSystem assemble_edge_system(const Topology& t, int owner,
                                   const std::vector<ClockNoiseParams>& clocks,
                                   double tau, double r_meas) {
    const Mat v = node_incidence(t, owner);
    const Eigen::Index j = v.rows();
    const Eigen::Index n = v.cols();

    StackedSystem s;
    s.a = Mat::Identity(2 * j, 2 * j);
    for (Eigen::Index r = 0; r < j; ++r) s.a(r, j + r) = tau;
    s.c = Mat::Zero(j, 2 * j);
    s.c.leftCols(j) = Mat::Identity(j, j);

    Mat q_full = Mat::Zero(2 * n, 2 * n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const Mat2 qi = process_noise_cov(clocks[static_cast<std::size_t>(i)], tau);
        q_full(i, i) = qi(0, 0);
        q_full(i, n + i) = qi(0, 1);
        q_full(n + i, i) = qi(1, 0);
        q_full(n + i, n + i) = qi(1, 1);
    }
    Mat v2 = Mat::Zero(2 * j, 2 * n);
    v2.topLeftCorner(j, n) = v;
    v2.bottomRightCorner(j, n) = v;
    s.q = v2 * q_full * v2.transpose();
    s.r = r_meas * Mat::Identity(j, j);
    return s;
}

double riccati_residual(const Mat& a, const Mat& c, const Mat& q, const Mat& r,
                        const Mat& p) {
    const Mat s = c * p * c.transpose() + r;
    const Mat next =
        a * p * a.transpose() + q -
        a * p * c.transpose() * s.inverse() * c * p * a.transpose();
    return (next - p).norm() / p.norm();
}

std::vector<ClockNoiseParams> random_clocks(int n, RandomStream& rng) {
    std::vector<ClockNoiseParams> clocks;
    for (int i = 0; i < n; ++i)
        clocks.push_back({rng.uniform(0.5, 4.0), rng.uniform(0.1, 2.0)});
    return clocks;
}

}  // namespace

TEST_CASE("scalar steady-state gain matches the closed form", "[estimation]") {
    Mat one = Mat::Identity(1, 1);
    const SteadyStateGain g = solve_dare(one, one, one, one);
    const double golden = (1.0 + std::sqrt(5.0)) / 2.0;
    CHECK(std::abs(g.P(0, 0) - golden) < 1e-12);
    CHECK(std::abs(g.H(0, 0) - golden / (golden + 1.0)) < 1e-12);
    CHECK(g.residual < 1e-12);
}

TEST_CASE("steady-state gains satisfy the fixed point equation", "[estimation]") {
    RandomStream rng(31, "dare");
    for (int trial = 0; trial < 5; ++trial) {
        const int n = 4 + static_cast<int>(rng.uniform() * 7);
        const Topology t = tsupport::random_connected(n, 0.3, rng);
        const auto clocks = random_clocks(n, rng);
        const double tau = rng.uniform(0.5, 2.0);
        const double r_meas = rng.uniform(0.01, 0.2);
        const int owner = static_cast<int>(rng.uniform() * n);

        const StackedSystem s = assemble_edge_system(t, owner, clocks, tau, r_meas);
        const SteadyStateGain g = solve_dare(s.a, s.c, s.q, s.r);
        CHECK(riccati_residual(s.a, s.c, s.q, s.r, g.P) < 1e-12);
        CHECK(spectral_radius(s.a - g.H * s.c) < 1.0);
    }
}

TEST_CASE("divergent filtering problems are rejected", "[estimation]") {
    Mat a(1, 1), c(1, 1), q(1, 1), r(1, 1);
    a << 2.0;
    c << 0.0;
    q << 1.0;
    r << 1.0;
    DareOptions opt;
    opt.max_iterations = 2000;
    CHECK_THROWS(solve_dare(a, c, q, r, opt));
    CHECK_THROWS(solve_dare(Mat::Identity(2, 2), Mat::Identity(1, 1),
                            Mat::Identity(2, 2), Mat::Identity(1, 1)));
}

TEST_CASE("stacked edge noise equals the incidence-congruent covariance",
          "[estimation]") {
    RandomStream rng(32, "edgeq");
    const Topology t = tsupport::random_connected(7, 0.4, rng);
    const auto clocks = random_clocks(7, rng);
    const Mat v = node_incidence(t, 2);
    const StackedSystem s = assemble_edge_system(t, 2, clocks, 0.7, 0.1);
    const Mat q = edge_process_noise(v, clocks, 0.7);
    CHECK((q - s.q).cwiseAbs().maxCoeff() <= 1e-14 * s.q.cwiseAbs().maxCoeff());
}

TEST_CASE("edge estimator factory solves the node's stacked system",
          "[estimation]") {
    RandomStream rng(33, "edgegain");
    const Topology t = tsupport::random_connected(6, 0.4, rng);
    const auto clocks = random_clocks(6, rng);
    const double tau = 1.3, r_meas = 0.05;
    SteadyStateGain g;
    const EdgeEstimator est = make_edge_estimator(t, 3, clocks, tau, r_meas, &g);
    CHECK(est.owner() == 3);
    CHECK(est.degree() == t.degree(3));

    const StackedSystem s = assemble_edge_system(t, 3, clocks, tau, r_meas);
    const SteadyStateGain ref = solve_dare(s.a, s.c, s.q, s.r);
    CHECK((g.H - ref.H).cwiseAbs().maxCoeff() <= 1e-12 * ref.H.cwiseAbs().maxCoeff());
    CHECK((est.gain() - ref.H).cwiseAbs().maxCoeff() <=
          1e-12 * ref.H.cwiseAbs().maxCoeff());
}

TEST_CASE("edge estimator step is the stationary one-step predictor",
          "[estimation]") {
    Mat gain(2, 1);
    gain << 0.3, 0.1;
    EdgeEstimator est(0, 1, 1.0, gain);
    Vec y(1), eta(1);
    y << 2.0;
    eta << 0.5;
    est.step(y, eta);
    CHECK(est.zeta_hat()(0) == Catch::Approx(1.1).epsilon(1e-15));
    CHECK(est.zeta_hat()(1) == Catch::Approx(0.7).epsilon(1e-15));
    const Vec2 e = est.edge_estimate(0);
    CHECK(e(0) == est.zeta_hat()(0));
    CHECK(e(1) == est.zeta_hat()(1));
    est.reset();
    CHECK(est.zeta_hat().cwiseAbs().maxCoeff() == 0.0);
    CHECK_THROWS(est.step(Vec::Zero(2), Vec::Zero(2)));
}

TEST_CASE("edge estimator tracks a simulated neighbor difference",
          "[estimation]") {
    const Topology t(2, {{0, 1}});
    const std::vector<ClockNoiseParams> clocks{{0.04, 0.01}, {0.02, 0.03}};
    const double tau = 1.0, r_meas = 0.0025;
    SteadyStateGain g;
    EdgeEstimator est = make_edge_estimator(t, 0, clocks, tau, r_meas, &g);

    const SystemMatrices m = system_matrices(tau);
    RandomStream n0(34, "sim/clock/1"), n1(34, "sim/clock/2"), nm(34, "sim/meas");
    NoiseSampler s0(process_noise_cov(clocks[0], tau));
    NoiseSampler s1(process_noise_cov(clocks[1], tau));
    ClockState x0{0.3, -0.05}, x1{-0.2, 0.1};

    double err_ph = 0.0, err_fr = 0.0;
    const int horizon = 3000, tail = 1000;
    for (int k = 0; k < horizon; ++k) {
        const double u0 = 0.05 * ((k % 7) - 3.0);
        const double u1 = -0.03 * ((k % 5) - 2.0);
        Vec y(1), eta(1);
        y << (x1.phase - x0.phase) + std::sqrt(r_meas) * nm.gaussian();
        eta << u1 - u0;
        est.step(y, eta);
        x0 = step_clock(x0, u0, s0.sample(n0), m);
        x1 = step_clock(x1, u1, s1.sample(n1), m);
        if (k >= horizon - tail) {
            const Vec2 e = est.edge_estimate(0);
            err_ph += std::pow(e(0) - (x1.phase - x0.phase), 2);
            err_fr += std::pow(e(1) - (x1.freq - x0.freq), 2);
        }
    }
    // One-step prediction error variance is the stationary P diagonal.
    CHECK(err_ph / tail <= 10.0 * g.P(0, 0));
    CHECK(err_fr / tail <= 10.0 * g.P(1, 1));
    CHECK(err_ph / tail >= 0.1 * g.P(0, 0));
}

TEST_CASE("fused exchange is antisymmetric bit for bit", "[estimation]") {
    RandomStream rng(35, "fuse");
    for (int i = 0; i < 1000; ++i) {
        const Vec2 a{rng.uniform(-1, 1), rng.uniform(-1, 1)};
        const Vec2 b{rng.uniform(-1, 1), rng.uniform(-1, 1)};
        const auto [fab, fba] = fuse_edge_estimates(a, b);
        CHECK(fba(0) == -fab(0));
        CHECK(fba(1) == -fab(1));
        const auto [gba, gab] = fuse_edge_estimates(b, a);
        CHECK(gba(0) == -fab(0));
        CHECK(gba(1) == -fab(1));
        CHECK(gab(0) == fab(0));
    }
}

TEST_CASE("anchor estimator enforces the supervisory cadence", "[estimation]") {
    AnchorEdgeEstimator est(0, 4, 3, 0.5, Vec2{0.4, 0.2});
    CHECK(est.anchor() == 0);
    CHECK(est.mac() == 4);
    est.initialize(1.5);
    CHECK(est.z_hat()(0) == 1.5);
    CHECK(est.z_hat()(1) == 0.0);

    CHECK_THROWS_AS(est.step(1.0), std::logic_error);  // no inputs folded yet
    est.accumulate(0.1);
    est.accumulate(-0.2);
    CHECK_THROWS_AS(est.step(1.0), std::logic_error);  // one step short
    est.accumulate(0.3);
    CHECK_THROWS_AS(est.accumulate(0.0), std::logic_error);  // period complete
    est.step(1.0);
    CHECK(est.pending_steps() == 0);
}

TEST_CASE("anchor estimator folds inputs through the fast dynamics",
          "[estimation]") {
    const long ell = 3;
    const double tau = 0.5;
    const Vec2 gain{0.4, 0.2};
    AnchorEdgeEstimator est(0, 1, ell, tau, gain);
    est.initialize(2.0);

    const double u[] = {0.1, -0.2, 0.3};
    for (double ui : u) est.accumulate(ui);

    // U = sum_k A^(ell-1-k) B u_k at the fast rate.
    const SystemMatrices m = system_matrices(tau);
    Vec2 expected_u = Vec2::Zero();
    for (int k = 0; k < ell; ++k) {
        Mat2 a_pow = Mat2::Identity();
        for (int p = 0; p < ell - 1 - k; ++p) a_pow = a_pow * m.A;
        expected_u += a_pow * m.B * u[k];
    }
    CHECK((est.accumulated_input() - expected_u).cwiseAbs().maxCoeff() <= 1e-15);

    const Vec2 before = est.z_hat();
    const double y = 2.7;
    est.step(y);
    const SystemMatrices slow = system_matrices(tau * ell);
    const Vec2 expected =
        slow.A * before + expected_u + gain * (y - before(0));
    CHECK((est.z_hat() - expected).cwiseAbs().maxCoeff() <= 1e-14);
}

TEST_CASE("anchor gain solves the slow-rate offset problem", "[estimation]") {
    const ClockNoiseParams anchor_noise{1e-2, 1e-4};
    const ClockNoiseParams mac_noise{4e-2, 2e-4};
    const double period = 8.0, r_meas = 1e-3;
    const SteadyStateGain g =
        anchor_estimator_gain(anchor_noise, mac_noise, period, r_meas);

    const SystemMatrices m = system_matrices(period);
    const Mat q = process_noise_cov(anchor_noise, period) +
                  process_noise_cov(mac_noise, period);
    Mat r(1, 1);
    r << r_meas;
    const Mat c = m.C;
    CHECK(riccati_residual(m.A, c, q, r, g.P) < 1e-12);
    CHECK(spectral_radius(m.A - g.H * c) < 1.0);

    AnchorEdgeEstimator est = make_anchor_estimator(0, 1, 4, 2.0, anchor_noise,
                                                    mac_noise, r_meas);
    CHECK((est.gain() - Vec2(g.H)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("tree estimator follows the block predictor recursion", "[estimation]") {
    RandomStream rng(36, "tree");
    const Topology t = tsupport::random_connected(6, 0.4, rng);
    const SpanningTree st = spanning_tree(t, 0);
    const auto clocks = random_clocks(6, rng);
    const WeightingVector q_fast = weighting_from_D(tsupport::random_positive(6, rng));
    const WeightingVector q_slow = weighting_from_D(tsupport::random_positive(6, rng));
    const double tau = 0.8, r_meas = 0.02;

    SteadyStateGain g;
    TreeEstimator est =
        make_tree_estimator(st, clocks, tau, r_meas, q_fast, q_slow, &g);

    const Eigen::Index m = 5;
    // Independent oracle: explicit block matrices.
    Mat a = Mat::Identity(2 * m, 2 * m);
    for (Eigen::Index i = 0; i < m; ++i) a(i, m + i) = tau;
    Mat b = Mat::Zero(2 * m, m);
    b.topLeftCorner(m, m) = tau * Mat::Identity(m, m);
    b.bottomLeftCorner(m, m) = Mat::Identity(m, m);
    Mat c = Mat::Zero(m, 2 * m);
    c.leftCols(m) = Mat::Identity(m, m);

    const Eigen::RowVectorXd w =
        q_fast.q.transpose() * generalized_inverse(st, q_slow);
    Mat gap(2, m);
    gap.row(0) = w * g.H.topRows(m);
    gap.row(1) = w * g.H.bottomRows(m);
    CHECK((est.gap_gain() - gap).cwiseAbs().maxCoeff() <=
          1e-13 * gap.cwiseAbs().maxCoeff());

    Vec zeta = Vec::Zero(2 * m);
    Vec2 zbar = Vec2::Zero();
    const Mat2 a2 = system_matrices(tau).A;
    const Vec2 b2 = system_matrices(tau).B;
    for (int k = 0; k < 20; ++k) {
        Vec y(m), eta(m);
        for (Eigen::Index i = 0; i < m; ++i) {
            y(i) = rng.uniform(-1, 1);
            eta(i) = rng.uniform(-1, 1);
        }
        const double eta_bar = rng.uniform(-1, 1);
        est.step(y, eta, eta_bar);
        const Vec innov = y - c * zeta;
        zeta = a * zeta + b * eta + g.H * innov;
        zbar = a2 * zbar + b2 * eta_bar + gap * innov;
    }
    CHECK((est.zeta_beta_hat() - zeta).cwiseAbs().maxCoeff() <=
          1e-12 * std::max(1.0, zeta.cwiseAbs().maxCoeff()));
    CHECK((est.zbar_minus_hat() - zbar).cwiseAbs().maxCoeff() <=
          1e-12 * std::max(1.0, zbar.cwiseAbs().maxCoeff()));

    est.reset();
    CHECK(est.zeta_beta_hat().cwiseAbs().maxCoeff() == 0.0);
    CHECK(est.zbar_minus_hat().cwiseAbs().maxCoeff() == 0.0);
}
