#pragma once

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <cmath>
#include <complex>
#include <limits>
#include <span>
#include <stdexcept>

#include "tscale/clock.hpp"
#include "tscale/estimation.hpp"
#include "tscale/topology.hpp"

namespace tscale {

// ============================================================================
// Gain structure
//
// All three control laws share the proportional-integral shape
//     F = gamma * [alpha / period, 1]
// acting on a [phase, frequency] pair. `period` is the fast step for the
// synchronization law and the supervisory period for the broadcast laws.
// ============================================================================

enum class GainKind { sync, anchor, floating };

struct GainSpec {
    double gamma = 0.0;
    double alpha = 1.0;
    double period = 1.0;
    GainKind kind = GainKind::sync;

    RowVec2 F() const { return RowVec2{gamma * alpha / period, gamma}; }
};

// ----------------------------------------------------------------------------
// Certificates
// ----------------------------------------------------------------------------

// Validity condition for the synchronization gain: with coupling weights D
// on a connected graph with Laplacian L, the closed loop is stable iff
//     alpha > 0   and   0 < gamma < 4 / ((2 + alpha) * lambda_max)
// where lambda_max is the largest eigenvalue of D^{1/2} L D^{1/2}.
struct SyncCertificate {
    double lambda_max = 0.0;
    double bound = 0.0;
    double gamma = 0.0;
    double alpha = 0.0;
    bool valid = false;
};

inline SyncCertificate sync_gain_check(const GainSpec& g, const Topology& t,
                                       const Vec& d_diag) {
    if (g.kind != GainKind::sync)
        throw std::invalid_argument("certificate requires a synchronization gain");
    if (d_diag.size() != t.n())
        throw std::invalid_argument("coupling diagonal does not match graph");
    for (Eigen::Index i = 0; i < d_diag.size(); ++i)
        if (!(d_diag(i) > 0.0))
            throw std::invalid_argument("coupling weights must be positive");
    if (!t.connected())
        throw std::invalid_argument("synchronization needs a connected graph");

    const Vec dh = d_diag.cwiseSqrt();
    const Mat scaled = dh.asDiagonal() * laplacian(t) * dh.asDiagonal();
    Eigen::SelfAdjointEigenSolver<Mat> es(scaled, Eigen::EigenvaluesOnly);

    SyncCertificate cert;
    cert.lambda_max = es.eigenvalues().maxCoeff();
    cert.gamma = g.gamma;
    cert.alpha = g.alpha;
    cert.bound = cert.lambda_max > 0.0
                     ? 4.0 / ((2.0 + g.alpha) * cert.lambda_max)
                     : std::numeric_limits<double>::infinity();
    cert.valid = g.alpha > 0.0 && g.gamma > 0.0 && g.gamma < cert.bound;
    return cert;
}

// Both broadcast laws are stable iff alpha > 0 and 0 < gamma < 4/(2+alpha).
struct SupervisoryCertificate {
    double bound = 0.0;
    double gamma = 0.0;
    double alpha = 0.0;
    bool valid = false;
};

inline SupervisoryCertificate supervisory_gain_check(const GainSpec& g) {
    if (g.kind == GainKind::sync)
        throw std::invalid_argument("certificate requires a broadcast gain");
    SupervisoryCertificate cert;
    cert.gamma = g.gamma;
    cert.alpha = g.alpha;
    cert.bound = 4.0 / (2.0 + g.alpha);
    cert.valid = g.alpha > 0.0 && g.gamma > 0.0 && g.gamma < cert.bound;
    return cert;
}

// ----------------------------------------------------------------------------
// Control laws
// ----------------------------------------------------------------------------

// Frequency-rate input of one node: coupling weight times F applied to the
// sum of its fused neighbor estimates.
inline double sync_control(std::span<const Vec2> fused, const RowVec2& f,
                           double d_i) {
    Vec2 sum = Vec2::Zero();
    for (const Vec2& z : fused) sum += z;
    return d_i * (f * sum)(0);
}

// Supervisory broadcast in anchored operation: minus F applied to the mean
// of all live anchor-edge estimates. The estimates are oriented clock minus
// anchor, so the broadcast steers the ensemble mean toward the anchors'
// average phase offset.
inline double anchoring_control(std::span<const Vec2> anchor_estimates,
                                const RowVec2& f) {
    if (anchor_estimates.empty())
        throw std::runtime_error("anchoring with no live anchors");
    Vec2 mean = Vec2::Zero();
    for (const Vec2& z : anchor_estimates) mean += z;
    mean /= static_cast<double>(anchor_estimates.size());
    return -(f * mean)(0);
}

// Supervisory broadcast in floating operation: regulates the estimated gap
// between the running ensemble mean and the slow-weighted free-running mean.
inline double floating_control(const Vec2& zbar_minus_hat, const RowVec2& f) {
    return -(f * zbar_minus_hat)(0);
}

// ----------------------------------------------------------------------------
// Closed-loop spectrum of the synchronized ensemble
// ----------------------------------------------------------------------------

// Eigenvalues of A (x) I_N - (B F) (x) (D L). The consensus pair sits at 1;
// every other eigenvalue lies strictly inside the unit circle exactly when
// the certificate above passes.
inline Eigen::VectorXcd closed_loop_spectrum(const RowVec2& f, const Topology& t,
                                             const Vec& d_diag,
                                             const SystemMatrices& m) {
    if (d_diag.size() != t.n())
        throw std::invalid_argument("coupling diagonal does not match graph");
    const Eigen::Index n = t.n();
    const Mat dl = d_diag.asDiagonal() * laplacian(t);
    const Mat2 bf = m.B * f;
    Mat closed(2 * n, 2 * n);
    closed.topLeftCorner(n, n) = m.A(0, 0) * Mat::Identity(n, n) - bf(0, 0) * dl;
    closed.topRightCorner(n, n) = m.A(0, 1) * Mat::Identity(n, n) - bf(0, 1) * dl;
    closed.bottomLeftCorner(n, n) = m.A(1, 0) * Mat::Identity(n, n) - bf(1, 0) * dl;
    closed.bottomRightCorner(n, n) = m.A(1, 1) * Mat::Identity(n, n) - bf(1, 1) * dl;
    return Eigen::EigenSolver<Mat>(closed, false).eigenvalues();
}

// Same spectrum, computed mode by mode. D L is similar to the symmetric
// D^{1/2} L D^{1/2}, so the closed loop decouples into one 2x2 block
// A - mu * B F per eigenvalue mu of the scaled Laplacian, and each block's
// eigenvalues follow from its trace and determinant. A connected graph has a
// one-dimensional Laplacian kernel; that mu is pinned to exactly zero, which
// keeps the consensus pair at exactly 1 instead of smearing the defective
// eigenvalue by the square root of machine precision like a general
// nonsymmetric solve on the assembled matrix does.
inline Eigen::VectorXcd sync_mode_spectrum(const RowVec2& f, const Topology& t,
                                           const Vec& d_diag,
                                           const SystemMatrices& m) {
    if (d_diag.size() != t.n())
        throw std::invalid_argument("coupling diagonal does not match graph");
    for (Eigen::Index i = 0; i < d_diag.size(); ++i)
        if (!(d_diag(i) > 0.0))
            throw std::invalid_argument("coupling weights must be positive");
    if (!t.connected())
        throw std::invalid_argument("mode decomposition needs a connected graph");

    const Vec dh = d_diag.cwiseSqrt();
    const Mat scaled = dh.asDiagonal() * laplacian(t) * dh.asDiagonal();
    Eigen::SelfAdjointEigenSolver<Mat> es(scaled, Eigen::EigenvaluesOnly);
    Vec mu = es.eigenvalues();  // ascending
    const double lam_max = mu.maxCoeff();
    if (lam_max > 0.0 && std::abs(mu(0)) > 1e-12 * lam_max)
        throw std::runtime_error("scaled Laplacian kernel not resolved");
    mu(0) = 0.0;

    Eigen::VectorXcd lambda(2 * t.n());
    for (Eigen::Index i = 0; i < mu.size(); ++i) {
        const Mat2 block = m.A - mu(i) * (m.B * f);
        const double tr = block.trace();
        const double det = block.determinant();
        const double disc = tr * tr - 4.0 * det;
        if (disc >= 0.0) {
            const double sq = std::sqrt(disc);
            lambda(2 * i) = std::complex<double>((tr + sq) / 2.0, 0.0);
            lambda(2 * i + 1) = std::complex<double>((tr - sq) / 2.0, 0.0);
        } else {
            const double im = std::sqrt(-disc) / 2.0;
            lambda(2 * i) = std::complex<double>(tr / 2.0, im);
            lambda(2 * i + 1) = std::complex<double>(tr / 2.0, -im);
        }
    }
    return lambda;
}

// ----------------------------------------------------------------------------
// Supervisor
// ----------------------------------------------------------------------------

enum class OperatingMode { normal, emergency };

}  // namespace tscale
