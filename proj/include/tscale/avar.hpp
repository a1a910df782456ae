#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "tscale/clock.hpp"
#include "tscale/topology.hpp"

namespace tscale {

// Overlapping Allan variance of a phase series h[0..M] at averaging time
// m*tau:
//   (1 / (M - 2m)) * sum_{k=0}^{M-2m-1} (h[k+2m] - 2 h[k+m] + h[k])^2 / (2 (m tau)^2)
inline double avar_estimate(std::span<const double> h, double tau, long m) {
    if (!(tau > 0.0)) throw std::invalid_argument("avar: tau must be positive");
    if (m <= 0) throw std::invalid_argument("avar: averaging factor must be positive");
    const long big_m = static_cast<long>(h.size()) - 1;
    const long terms = big_m - 2 * m;
    if (terms < 1)
        throw std::invalid_argument("avar: series too short for this averaging factor");
    const double s = static_cast<double>(m) * tau;
    double acc = 0.0;
    for (long k = 0; k < terms; ++k) {
        const double d = h[static_cast<std::size_t>(k + 2 * m)] -
                         2.0 * h[static_cast<std::size_t>(k + m)] +
                         h[static_cast<std::size_t>(k)];
        acc += d * d;
    }
    return acc / (static_cast<double>(terms) * 2.0 * s * s);
}

// Log-spaced averaging factors {1,2,5}x10^j, kept while at least
// `min_terms` second differences remain.
inline std::vector<long> avar_grid(std::size_t series_len, long min_terms = 100) {
    const long big_m = static_cast<long>(series_len) - 1;
    std::vector<long> grid;
    const long mantissas[] = {1, 2, 5};
    for (long decade = 1;; decade *= 10) {
        bool any = false;
        for (long b : mantissas) {
            const long m = b * decade;
            if (big_m - 2 * m >= min_terms) {
                grid.push_back(m);
                any = true;
            }
        }
        if (!any) break;
        if (decade > big_m) break;
    }
    return grid;
}

struct AvarPoint {
    long m = 0;
    double avg_time = 0.0;
    double avar = 0.0;
};

inline std::vector<AvarPoint> avar_curve(std::span<const double> h, double tau,
                                         long min_terms = 100) {
    std::vector<AvarPoint> curve;
    for (long m : avar_grid(h.size(), min_terms))
        curve.push_back({m, static_cast<double>(m) * tau, avar_estimate(h, tau, m)});
    return curve;
}

// ============================================================================
// Weighted free-running ensemble means
//
// For weights q summing to one, the free-running mean with those weights has
// Allan variance
//     sigma^2(s) = q^T Gamma(s) q / s^2
//                = q^T Sigma1 q / s + s * q^T Sigma2 q / 3,
// exact for this clock model at every averaging time s.
// ============================================================================

inline double avar_analytic(const WeightingVector& w,
                            const std::vector<double>& sigma1_sq,
                            const std::vector<double>& sigma2_sq, double s) {
    validate(w);
    if (static_cast<std::size_t>(w.q.size()) != sigma1_sq.size() ||
        sigma1_sq.size() != sigma2_sq.size())
        throw std::invalid_argument("weights and intensity lists must match");
    const Mat g = gamma_matrix(sigma1_sq, sigma2_sq, s);
    return (w.q.transpose() * g * w.q)(0) / (s * s);
}

// Minimizer of the analytic Allan variance at averaging time s over the
// simplex: q(s) = Gamma(s)^{-1} 1 / (1^T Gamma(s)^{-1} 1).
inline WeightingVector optimal_weight(const std::vector<double>& sigma1_sq,
                                      const std::vector<double>& sigma2_sq,
                                      double s) {
    const Mat g = gamma_matrix(sigma1_sq, sigma2_sq, s);
    Vec d(g.rows());
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
        if (!(g(i, i) > 0.0))
            throw std::invalid_argument("optimal weighting undefined for a noiseless clock");
        d(i) = g(i, i);
    }
    return weighting_from_D(d);
}

// Short- and long-horizon limits of the optimal weighting: inverse white-FM
// intensities and inverse random-walk intensities respectively.
inline std::pair<WeightingVector, WeightingVector> weight_limits(
    const std::vector<double>& sigma1_sq, const std::vector<double>& sigma2_sq) {
    if (sigma1_sq.size() != sigma2_sq.size() || sigma1_sq.empty())
        throw std::invalid_argument("intensity lists must match and be nonempty");
    const auto n = static_cast<Eigen::Index>(sigma1_sq.size());
    Vec d0(n), dinf(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto k = static_cast<std::size_t>(i);
        if (!(sigma1_sq[k] > 0.0) || !(sigma2_sq[k] > 0.0))
            throw std::invalid_argument("weight limits need strictly positive intensities");
        d0(i) = sigma1_sq[k];
        dinf(i) = sigma2_sq[k];
    }
    return {weighting_from_D(d0), weighting_from_D(dinf)};
}

}  // namespace tscale
