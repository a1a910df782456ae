#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <vector>

#include "tscale/rng.hpp"

namespace tscale {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using Mat2 = Eigen::Matrix2d;
using Vec2 = Eigen::Vector2d;
using RowVec2 = Eigen::RowVector2d;

// ============================================================================
// Two-state clock model
//
// Each clock carries a phase deviation x1 (seconds) and a fractional
// frequency deviation x2. Over a step of length tau:
//
//     x[k+1] = A x[k] + B u[k] + v[k],     h[k] = C x[k],
//
// with A = [[1, tau], [0, 1]], B = [tau, 1]^T, C = [1, 0]. The process noise
// v has covariance Q(tau) below; sigma1_sq drives white frequency noise and
// sigma2_sq random-walk frequency noise.
// ============================================================================

struct ClockNoiseParams {
    double sigma1_sq = 0.0;  // white FM intensity (s^2/s)
    double sigma2_sq = 0.0;  // random-walk FM intensity (1/s)
};

inline void validate(const ClockNoiseParams& p) {
    if (!(p.sigma1_sq >= 0.0) || !(p.sigma2_sq >= 0.0))
        throw std::invalid_argument("clock noise intensities must be nonnegative");
}

struct ClockState {
    double phase = 0.0;  // seconds
    double freq = 0.0;   // dimensionless fractional frequency
};

struct SystemMatrices {
    Mat2 A;
    Vec2 B;
    RowVec2 C;
    double tau = 0.0;
};

inline SystemMatrices system_matrices(double tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("step length must be positive");
    SystemMatrices m;
    m.A << 1.0, tau, 0.0, 1.0;
    m.B << tau, 1.0;
    m.C << 1.0, 0.0;
    m.tau = tau;
    return m;
}

using NoiseCovariance = Mat2;

// Q(s) = [[s*s1 + s^3*s2/3, s^2*s2/2], [s^2*s2/2, s*s2]]. This is the exact
// covariance of the accumulated noise over a span s, so Q(l*tau) equals the
// propagated sum of l per-step covariances Q(tau).
inline NoiseCovariance process_noise_cov(const ClockNoiseParams& p, double s) {
    validate(p);
    if (!(s > 0.0)) throw std::invalid_argument("noise span must be positive");
    NoiseCovariance q;
    const double s1 = p.sigma1_sq;
    const double s2 = p.sigma2_sq;
    q(0, 0) = s * s1 + s * s * s * s2 / 3.0;
    q(0, 1) = s * s * s2 / 2.0;
    q(1, 0) = q(0, 1);
    q(1, 1) = s * s2;
    return q;
}

// Gamma(s) = s*Sigma1 + (s^3/3)*Sigma2 as a diagonal matrix over the
// ensemble. Equals the per-clock Q(s) phase entry on the diagonal.
inline Mat gamma_matrix(const std::vector<double>& sigma1_sq,
                        const std::vector<double>& sigma2_sq, double s) {
    if (sigma1_sq.size() != sigma2_sq.size())
        throw std::invalid_argument("intensity lists must have equal length");
    if (sigma1_sq.empty()) throw std::invalid_argument("empty ensemble");
    if (!(s > 0.0)) throw std::invalid_argument("averaging span must be positive");
    const auto n = static_cast<Eigen::Index>(sigma1_sq.size());
    Mat g = Mat::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        validate(ClockNoiseParams{sigma1_sq[i], sigma2_sq[i]});
        g(i, i) = s * sigma1_sq[i] + s * s * s * sigma2_sq[i] / 3.0;
    }
    return g;
}

inline std::vector<double> gamma_diagonal(const std::vector<double>& sigma1_sq,
                                          const std::vector<double>& sigma2_sq,
                                          double s) {
    const Mat g = gamma_matrix(sigma1_sq, sigma2_sq, s);
    std::vector<double> d(static_cast<std::size_t>(g.rows()));
    for (Eigen::Index i = 0; i < g.rows(); ++i) d[static_cast<std::size_t>(i)] = g(i, i);
    return d;
}

inline ClockState step_clock(const ClockState& x, double u, const Vec2& noise,
                             const SystemMatrices& m) {
    ClockState next;
    next.phase = x.phase + m.tau * x.freq + m.B(0) * u + noise(0);
    next.freq = x.freq + m.B(1) * u + noise(1);
    return next;
}

// ============================================================================
// Gaussian sampling
// ============================================================================

// Symmetric PSD square root with eigenvalue clamping: eigenvalues in
// [-1e-18, 0) are treated as rounding debris and clamped to zero; anything
// below that is rejected.
inline Mat2 psd_factor(const Mat2& q) {
    if (std::abs(q(0, 1) - q(1, 0)) >
        1e-12 * std::max(1.0, q.cwiseAbs().maxCoeff()))
        throw std::invalid_argument("covariance must be symmetric");
    Eigen::SelfAdjointEigenSolver<Mat2> es(q);
    Vec2 ev = es.eigenvalues();
    for (int i = 0; i < 2; ++i) {
        if (ev(i) < -1e-18) throw std::invalid_argument("covariance is not PSD");
        if (ev(i) < 0.0) ev(i) = 0.0;
    }
    return es.eigenvectors() * ev.cwiseSqrt().asDiagonal() *
           es.eigenvectors().transpose();
}

inline Vec2 sample_process_noise(const NoiseCovariance& q, RandomStream& rng) {
    const Mat2 l = psd_factor(q);
    const Vec2 z{rng.gaussian(), rng.gaussian()};
    return l * z;
}

// Precomputed factor for hot loops.
class NoiseSampler {
public:
    NoiseSampler() : l_(Mat2::Zero()) {}
    explicit NoiseSampler(const NoiseCovariance& q) : l_(psd_factor(q)) {}

    Vec2 sample(RandomStream& rng) const {
        const Vec2 z{rng.gaussian(), rng.gaussian()};
        return l_ * z;
    }

private:
    Mat2 l_;
};

// ============================================================================
// Anchors
// ============================================================================

// A reference node disciplined to standard time: mean state [theta_star, 0],
// fluctuation over a supervisory period T distributed as N(0, Qa(T)) and
// modeled as independent across periods.
struct AnchorParams {
    double theta_star = 0.0;      // phase offset from standard time (s)
    ClockNoiseParams noise;       // fluctuation intensities around the mean
    std::vector<int> attached;    // 0-based indices of clocks that can see it
};

inline ClockState sample_anchor_state(const AnchorParams& a, double T,
                                      RandomStream& rng) {
    const Vec2 d = sample_process_noise(process_noise_cov(a.noise, T), rng);
    return ClockState{a.theta_star + d(0), d(1)};
}

}  // namespace tscale
