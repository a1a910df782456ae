#pragma once

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <limits>
#include <stdexcept>
#include <utility>
#include <vector>

#include "tscale/clock.hpp"
#include "tscale/topology.hpp"

namespace tscale {

// ============================================================================
// Steady-state Kalman gains
// ============================================================================

struct SteadyStateGain {
    Mat P;           // stationary prediction error covariance
    Mat H;           // predictor gain A P C^T (C P C^T + R)^{-1}
    double residual; // relative fixed-point residual of P
};

struct DareOptions {
    double tol = 1e-14;       // stop once the relative update falls below this
    double accept = 1e-12;    // reject the result above this residual
    long max_iterations = 1000000;
};

inline double spectral_radius(const Mat& m) {
    return Eigen::EigenSolver<Mat>(m, false).eigenvalues().cwiseAbs().maxCoeff();
}

// Fixed-point iteration for
//   P = A P A^T - A P C^T (C P C^T + R)^{-1} C P A^T + Q
// started from P0 = Q. Suited to the small, well-conditioned systems built
// here; convergence is geometric at the squared closed-loop spectral radius.
inline SteadyStateGain solve_dare(const Mat& a, const Mat& c, const Mat& q,
                                  const Mat& r, const DareOptions& opt = {}) {
    const Eigen::Index n = a.rows();
    const Eigen::Index m = c.rows();
    if (a.cols() != n || c.cols() != n || q.rows() != n || q.cols() != n ||
        r.rows() != m || r.cols() != m)
        throw std::invalid_argument("dare: inconsistent dimensions");

    const auto iterate = [&](const Mat& p) -> Mat {
        const Mat s = c * p * c.transpose() + r;
        Eigen::LLT<Mat> llt(s);
        if (llt.info() != Eigen::Success)
            throw std::runtime_error("dare: innovation covariance not positive definite");
        const Mat apct = a * p * c.transpose();
        Mat next = a * p * a.transpose() + q -
                   apct * llt.solve(apct.transpose());
        next = ((next + next.transpose()) * 0.5).eval();
        return next;
    };

    Mat p = q;
    double residual = std::numeric_limits<double>::infinity();
    for (long it = 0; it < opt.max_iterations; ++it) {
        const Mat next = iterate(p);
        const double scale = std::max(p.norm(), 1e-300);
        residual = (next - p).norm() / scale;
        p = next;
        if (residual < opt.tol) break;
    }
    {
        const Mat check = iterate(p);
        residual = (check - p).norm() / std::max(p.norm(), 1e-300);
    }
    if (!(residual < opt.accept))
        throw std::runtime_error("dare: fixed-point iteration did not converge");

    const Mat s = c * p * c.transpose() + r;
    SteadyStateGain g;
    g.P = p;
    g.H = a * p * c.transpose() * s.inverse();
    g.residual = residual;

    if (!(spectral_radius(a - g.H * c) < 1.0))
        throw std::runtime_error("dare: closed loop is not a strict contraction");
    return g;
}

// ============================================================================
// Per-node edge-state estimator
//
// Node i tracks the stacked differences to its neighbors,
// zeta_i = [phase diffs; freq diffs] with one entry per neighbor in
// ascending order. The update is the stationary one-step predictor
//   zeta+ = A_blk zeta + B_blk eta + H (y - C_blk zeta)
// where eta holds the input differences u_j - u_i and y the measured phase
// differences.
// ============================================================================

// (I2 (x) V) Q(tau) (I2 (x) V)^T for a row block V of edge rows.
inline Mat edge_process_noise(const Mat& v,
                              const std::vector<ClockNoiseParams>& clocks,
                              double tau) {
    const Eigen::Index n = v.cols();
    if (static_cast<Eigen::Index>(clocks.size()) != n)
        throw std::invalid_argument("clock list does not match incidence width");
    Vec q11(n), q12(n), q22(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const Mat2 q = process_noise_cov(clocks[static_cast<std::size_t>(i)], tau);
        q11(i) = q(0, 0);
        q12(i) = q(0, 1);
        q22(i) = q(1, 1);
    }
    const Eigen::Index j = v.rows();
    Mat out(2 * j, 2 * j);
    out.topLeftCorner(j, j) = v * q11.asDiagonal() * v.transpose();
    out.topRightCorner(j, j) = v * q12.asDiagonal() * v.transpose();
    out.bottomLeftCorner(j, j) = out.topRightCorner(j, j).transpose();
    out.bottomRightCorner(j, j) = v * q22.asDiagonal() * v.transpose();
    return out;
}

namespace detail {

// A (x) I_J, C (x) I_J and R I_J for the double-integrator blocks.
inline Mat block_a(Eigen::Index j, double tau) {
    Mat a = Mat::Identity(2 * j, 2 * j);
    a.topRightCorner(j, j) = tau * Mat::Identity(j, j);
    return a;
}

inline Mat block_c(Eigen::Index j) {
    Mat c = Mat::Zero(j, 2 * j);
    c.leftCols(j) = Mat::Identity(j, j);
    return c;
}

}  // namespace detail

class EdgeEstimator {
public:
    EdgeEstimator(int owner, Eigen::Index degree, double tau, Mat gain)
        : owner_(owner),
          j_(degree),
          tau_(tau),
          h_(std::move(gain)),
          zeta_hat_(Vec::Zero(2 * degree)),
          innov_(degree),
          corr_(2 * degree) {
        if (h_.rows() != 2 * j_ || h_.cols() != j_)
            throw std::invalid_argument("edge estimator gain has wrong shape");
    }

    int owner() const { return owner_; }
    Eigen::Index degree() const { return j_; }
    const Vec& zeta_hat() const { return zeta_hat_; }
    const Mat& gain() const { return h_; }

    // Current estimate for the r-th neighbor as [phase diff, freq diff].
    Vec2 edge_estimate(Eigen::Index r) const {
        return Vec2{zeta_hat_(r), zeta_hat_(j_ + r)};
    }

    void step(const Eigen::Ref<const Vec>& y,
              const Eigen::Ref<const Vec>& eta_breve) {
        if (y.size() != j_ || eta_breve.size() != j_)
            throw std::invalid_argument("edge estimator input has wrong length");
        innov_ = y - zeta_hat_.head(j_);
        zeta_hat_.head(j_) += tau_ * zeta_hat_.tail(j_) + tau_ * eta_breve;
        zeta_hat_.tail(j_) += eta_breve;
        corr_.noalias() = h_ * innov_;
        zeta_hat_ += corr_;
    }

    void reset() { zeta_hat_.setZero(); }

private:
    int owner_;
    Eigen::Index j_;
    double tau_;
    Mat h_;
    Vec zeta_hat_;
    Vec innov_, corr_;
};

inline EdgeEstimator make_edge_estimator(const Topology& t, int owner,
                                         const std::vector<ClockNoiseParams>& clocks,
                                         double tau, double r_meas,
                                         SteadyStateGain* gain_out = nullptr) {
    if (!(r_meas > 0.0))
        throw std::invalid_argument("measurement noise variance must be positive");
    const Mat v = node_incidence(t, owner);
    const Eigen::Index j = v.rows();
    const Mat q = edge_process_noise(v, clocks, tau);
    const SteadyStateGain g =
        solve_dare(detail::block_a(j, tau), detail::block_c(j), q,
                   r_meas * Mat::Identity(j, j));
    if (gain_out) *gain_out = g;
    return EdgeEstimator(owner, j, tau, g.H);
}

// Symmetrized exchange: both directions of an undirected edge agree on
// opposite estimates afterwards. Computed as a half difference so the two
// outputs are exact negations in floating point.
inline std::pair<Vec2, Vec2> fuse_edge_estimates(const Vec2& zeta_ij,
                                                 const Vec2& zeta_ji) {
    const Vec2 fused = 0.5 * (zeta_ij - zeta_ji);
    return {fused, -fused};
}

// ============================================================================
// Anchor edge estimator
//
// Runs on the supervisory period T = ell * tau and tracks the offset between
// one clock and one anchor. Inputs applied to the clock during the period are
// folded in through a propagated accumulator; the measurement is the phase
// offset observed at the period boundary.
// ============================================================================

class AnchorEdgeEstimator {
public:
    AnchorEdgeEstimator(int anchor, int mac, long ell, double tau, Vec2 gain)
        : anchor_(anchor), mac_(mac), ell_(ell), tau_(tau), h_(gain) {
        if (ell <= 0) throw std::invalid_argument("supervisory period must be positive");
    }

    int anchor() const { return anchor_; }
    int mac() const { return mac_; }
    const Vec2& z_hat() const { return z_hat_; }
    const Vec2& accumulated_input() const { return accumulated_; }
    const Vec2& gain() const { return h_; }
    long pending_steps() const { return count_; }

    void initialize(double measured_offset) {
        z_hat_ = Vec2{measured_offset, 0.0};
        accumulated_.setZero();
        count_ = 0;
    }

    // Fold in the input applied to the clock at one fast step:
    // U <- A U + B u at the fast rate.
    void accumulate(double u) {
        if (count_ >= ell_)
            throw std::logic_error("anchor estimator missed a supervisory tick");
        accumulated_(0) += tau_ * accumulated_(1) + tau_ * u;
        accumulated_(1) += u;
        ++count_;
    }

    // Supervisory update with the measurement taken at the start of the just
    // completed period. Requires exactly one accumulated input per fast step.
    void step(double y) {
        if (count_ != ell_)
            throw std::logic_error("anchor estimator stepped off the supervisory tick");
        const double innovation = y - z_hat_(0);
        const double period = tau_ * static_cast<double>(ell_);
        z_hat_(0) += period * z_hat_(1) + accumulated_(0) + h_(0) * innovation;
        z_hat_(1) += accumulated_(1) + h_(1) * innovation;
        accumulated_.setZero();
        count_ = 0;
    }

private:
    int anchor_;
    int mac_;
    long ell_;
    double tau_;
    Vec2 h_;
    Vec2 z_hat_ = Vec2::Zero();
    Vec2 accumulated_ = Vec2::Zero();
    long count_ = 0;
};

inline SteadyStateGain anchor_estimator_gain(const ClockNoiseParams& anchor_noise,
                                             const ClockNoiseParams& mac_noise,
                                             double period, double r_meas) {
    const SystemMatrices m = system_matrices(period);
    const Mat q = process_noise_cov(anchor_noise, period) +
                  process_noise_cov(mac_noise, period);
    Mat r(1, 1);
    r(0, 0) = r_meas;
    return solve_dare(m.A, m.C, q, r);
}

inline AnchorEdgeEstimator make_anchor_estimator(int anchor, int mac, long ell,
                                                 double tau,
                                                 const ClockNoiseParams& anchor_noise,
                                                 const ClockNoiseParams& mac_noise,
                                                 double r_meas) {
    const SteadyStateGain g =
        anchor_estimator_gain(anchor_noise, mac_noise, tau * static_cast<double>(ell), r_meas);
    return AnchorEdgeEstimator(anchor, mac, ell, tau, Vec2(g.H));
}

// ============================================================================
// Tree estimator
//
// Supervisory estimator over one spanning tree. It tracks the stacked tree
// edge states and, alongside them, the drift of the fast-weighted ensemble
// mean relative to a slow-weighted free-running mean driven by the same
// noise. The second state is what the floating broadcast regulates.
// ============================================================================

class TreeEstimator {
public:
    TreeEstimator(Eigen::Index n, double tau, Mat gain, Mat gap_gain)
        : n_(n),
          tau_(tau),
          hf_(std::move(gain)),
          hfbar_(std::move(gap_gain)),
          zeta_hat_(Vec::Zero(2 * (n - 1))),
          innov_(n - 1),
          corr_(2 * (n - 1)) {
        if (hf_.rows() != 2 * (n_ - 1) || hf_.cols() != n_ - 1)
            throw std::invalid_argument("tree estimator gain has wrong shape");
        if (hfbar_.rows() != 2 || hfbar_.cols() != n_ - 1)
            throw std::invalid_argument("tree estimator gap gain has wrong shape");
    }

    const Vec& zeta_beta_hat() const { return zeta_hat_; }
    const Vec2& zbar_minus_hat() const { return zbar_minus_; }
    const Mat& gain() const { return hf_; }
    const Mat& gap_gain() const { return hfbar_; }

    void step(const Eigen::Ref<const Vec>& y_beta,
              const Eigen::Ref<const Vec>& eta_breve_beta, double eta_bar) {
        const Eigen::Index m = n_ - 1;
        if (y_beta.size() != m || eta_breve_beta.size() != m)
            throw std::invalid_argument("tree estimator input has wrong length");
        innov_ = y_beta - zeta_hat_.head(m);
        zeta_hat_.head(m) += tau_ * zeta_hat_.tail(m) + tau_ * eta_breve_beta;
        zeta_hat_.tail(m) += eta_breve_beta;
        zbar_minus_(0) += tau_ * zbar_minus_(1) + tau_ * eta_bar;
        zbar_minus_(1) += eta_bar;
        corr_.noalias() = hf_ * innov_;
        zeta_hat_ += corr_;
        zbar_minus_ += hfbar_ * innov_;
    }

    void reset() {
        zeta_hat_.setZero();
        zbar_minus_.setZero();
    }

private:
    Eigen::Index n_;
    double tau_;
    Mat hf_;
    Mat hfbar_;
    Vec zeta_hat_;
    Vec2 zbar_minus_ = Vec2::Zero();
    Vec innov_, corr_;
};

// q_fast is the weighting of the running synchronization layer, q_slow the
// long-horizon weighting whose free-running mean the floating mode follows.
inline TreeEstimator make_tree_estimator(const SpanningTree& st,
                                         const std::vector<ClockNoiseParams>& clocks,
                                         double tau, double r_meas,
                                         const WeightingVector& q_fast,
                                         const WeightingVector& q_slow,
                                         SteadyStateGain* gain_out = nullptr) {
    if (!(r_meas > 0.0))
        throw std::invalid_argument("measurement noise variance must be positive");
    const Eigen::Index n = st.v_beta.cols();
    const Eigen::Index m = n - 1;
    const Mat q = edge_process_noise(st.v_beta, clocks, tau);
    const SteadyStateGain g =
        solve_dare(detail::block_a(m, tau), detail::block_c(m), q,
                   r_meas * Mat::Identity(m, m));
    if (gain_out) *gain_out = g;

    const Mat inv_slow = generalized_inverse(st, q_slow);
    const Eigen::RowVectorXd gap_row = q_fast.q.transpose() * inv_slow;
    Mat gap_gain(2, m);
    gap_gain.row(0) = gap_row * g.H.topRows(m);
    gap_gain.row(1) = gap_row * g.H.bottomRows(m);
    return TreeEstimator(n, tau, g.H, gap_gain);
}

}  // namespace tscale
