#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <algorithm>
#include <limits>
#include <queue>
#include <set>
#include <stdexcept>
#include <utility>
#include <vector>

#include "tscale/clock.hpp"

namespace tscale {

// ============================================================================
// Undirected measurement graph
//
// Nodes are clocks (0-based). An undirected edge {i, j} means i and j can
// measure their mutual phase difference, once in each direction. Directed
// edges are enumerated canonically: for i ascending, each neighbor j of i in
// ascending order contributes the directed edge (i -> j), whose edge state is
// x_j - x_i.
// ============================================================================

class Topology {
public:
    Topology(int n, std::vector<std::pair<int, int>> edges) : n_(n) {
        if (n <= 0) throw std::invalid_argument("graph needs at least one node");
        std::set<std::pair<int, int>> seen;
        for (auto [a, b] : edges) {
            if (a < 0 || a >= n || b < 0 || b >= n)
                throw std::invalid_argument("edge endpoint out of range");
            if (a == b) throw std::invalid_argument("self loops are not allowed");
            auto e = std::minmax(a, b);
            if (!seen.insert({e.first, e.second}).second)
                throw std::invalid_argument("duplicate edge");
        }
        edges_.assign(seen.begin(), seen.end());
        adjacency_.assign(static_cast<std::size_t>(n), {});
        for (auto [a, b] : edges_) {
            adjacency_[static_cast<std::size_t>(a)].push_back(b);
            adjacency_[static_cast<std::size_t>(b)].push_back(a);
        }
        for (auto& nb : adjacency_) std::sort(nb.begin(), nb.end());
        for (int i = 0; i < n_; ++i)
            for (int j : adjacency_[static_cast<std::size_t>(i)])
                directed_.emplace_back(i, j);
    }

    int n() const { return n_; }
    const std::vector<std::pair<int, int>>& edges() const { return edges_; }
    const std::vector<int>& neighbors(int i) const {
        return adjacency_.at(static_cast<std::size_t>(i));
    }
    int degree(int i) const { return static_cast<int>(neighbors(i).size()); }

    // Canonical directed edge list; its length is 2|E|.
    const std::vector<std::pair<int, int>>& directed_edges() const { return directed_; }

    int directed_index(int i, int j) const {
        int base = 0;
        for (int a = 0; a < i; ++a) base += degree(a);
        const auto& nb = neighbors(i);
        const auto it = std::lower_bound(nb.begin(), nb.end(), j);
        if (it == nb.end() || *it != j)
            throw std::invalid_argument("no such directed edge");
        return base + static_cast<int>(it - nb.begin());
    }

    bool connected() const {
        std::vector<char> vis(static_cast<std::size_t>(n_), 0);
        std::queue<int> q;
        q.push(0);
        vis[0] = 1;
        int count = 1;
        while (!q.empty()) {
            const int a = q.front();
            q.pop();
            for (int b : neighbors(a)) {
                if (!vis[static_cast<std::size_t>(b)]) {
                    vis[static_cast<std::size_t>(b)] = 1;
                    ++count;
                    q.push(b);
                }
            }
        }
        return count == n_;
    }

private:
    int n_;
    std::vector<std::pair<int, int>> edges_;
    std::vector<std::vector<int>> adjacency_;
    std::vector<std::pair<int, int>> directed_;
};

inline Mat laplacian(const Topology& t) {
    Mat l = Mat::Zero(t.n(), t.n());
    for (auto [a, b] : t.edges()) {
        l(a, a) += 1.0;
        l(b, b) += 1.0;
        l(a, b) -= 1.0;
        l(b, a) -= 1.0;
    }
    return l;
}

// Rows of the per-node incidence block: one row e_j^T - e_i^T per neighbor j
// of i, neighbors ascending. Applied to stacked phases it yields the phase
// differences node i measures.
inline Mat node_incidence(const Topology& t, int i) {
    if (i < 0 || i >= t.n()) throw std::invalid_argument("node out of range");
    const auto& nb = t.neighbors(i);
    if (nb.empty()) throw std::invalid_argument("node has no neighbors");
    Mat v = Mat::Zero(static_cast<Eigen::Index>(nb.size()), t.n());
    for (std::size_t r = 0; r < nb.size(); ++r) {
        v(static_cast<Eigen::Index>(r), nb[r]) = 1.0;
        v(static_cast<Eigen::Index>(r), i) = -1.0;
    }
    return v;
}

// All node blocks stacked in canonical directed-edge order (2|E| rows).
inline Mat stacked_incidence(const Topology& t) {
    Mat v = Mat::Zero(static_cast<Eigen::Index>(t.directed_edges().size()), t.n());
    Eigen::Index r = 0;
    for (auto [i, j] : t.directed_edges()) {
        v(r, j) = 1.0;
        v(r, i) = -1.0;
        ++r;
    }
    return v;
}

// Row-block selector S with S * stacked_incidence == -laplacian: row i sums
// the directed edges owned by node i.
inline Mat degree_selector(const Topology& t) {
    Mat s = Mat::Zero(t.n(), static_cast<Eigen::Index>(t.directed_edges().size()));
    Eigen::Index c = 0;
    for (auto [i, j] : t.directed_edges()) {
        (void)j;
        s(i, c) = 1.0;
        ++c;
    }
    return s;
}

// ============================================================================
// Ensemble weighting and skew projection
// ============================================================================

struct WeightingVector {
    Vec q;
};

// q = D^{-1} 1 / (1^T D^{-1} 1) for a positive diagonal D. Inverse-variance
// weighting: small-variance clocks get large weights.
inline WeightingVector weighting_from_D(const Vec& d_diag) {
    if (d_diag.size() == 0) throw std::invalid_argument("empty weighting input");
    Vec q(d_diag.size());
    double total = 0.0;
    for (Eigen::Index i = 0; i < d_diag.size(); ++i) {
        if (!(d_diag(i) > 0.0))
            throw std::invalid_argument("weighting needs positive diagonal entries");
        q(i) = 1.0 / d_diag(i);
        total += q(i);
    }
    q /= total;
    return WeightingVector{q};
}

inline void validate(const WeightingVector& w) {
    if (w.q.size() == 0) throw std::invalid_argument("empty weighting vector");
    for (Eigen::Index i = 0; i < w.q.size(); ++i)
        if (!(w.q(i) >= 0.0) || !std::isfinite(w.q(i)))
            throw std::invalid_argument("weights must be finite and nonnegative");
    if (std::abs(w.q.sum() - 1.0) > 1e-14)
        throw std::invalid_argument("weights must sum to one");
}

// Pi = I - 1 q^T. Idempotent; annihilates the common mode and q itself on
// the left.
inline Mat projection(const WeightingVector& w) {
    validate(w);
    const Eigen::Index n = w.q.size();
    return Mat::Identity(n, n) - Vec::Ones(n) * w.q.transpose();
}

// ============================================================================
// Spanning tree and reduced edge coordinates
// ============================================================================

// BFS tree rooted at `root`, children visited in ascending order so the
// result is deterministic for a given graph. Tree edges are directed parent
// to child in discovery order; the edge state of (i -> j) is x_j - x_i.
// t_barbeta expresses each non-tree edge state as a signed sum of tree edge
// states along the tree path, so its entries are -1, 0 or +1.
struct SpanningTree {
    int root = 0;
    std::vector<std::pair<int, int>> directed_edges;  // parent -> child
    std::vector<std::pair<int, int>> non_tree_edges;  // canonical (i < j)
    Mat v_beta;     // (N-1) x N incidence of the tree edges
    Mat t_barbeta;  // (|E|-N+1) x (N-1) path composition
};

inline SpanningTree spanning_tree(const Topology& t, int root = 0) {
    if (root < 0 || root >= t.n()) throw std::invalid_argument("root out of range");
    if (!t.connected()) throw std::invalid_argument("graph is not connected");

    SpanningTree st;
    st.root = root;
    const int n = t.n();
    std::vector<int> parent(static_cast<std::size_t>(n), -1);
    std::vector<int> depth(static_cast<std::size_t>(n), 0);
    std::vector<char> vis(static_cast<std::size_t>(n), 0);
    std::queue<int> q;
    q.push(root);
    vis[static_cast<std::size_t>(root)] = 1;
    while (!q.empty()) {
        const int a = q.front();
        q.pop();
        for (int b : t.neighbors(a)) {
            if (vis[static_cast<std::size_t>(b)]) continue;
            vis[static_cast<std::size_t>(b)] = 1;
            parent[static_cast<std::size_t>(b)] = a;
            depth[static_cast<std::size_t>(b)] = depth[static_cast<std::size_t>(a)] + 1;
            st.directed_edges.emplace_back(a, b);
            q.push(b);
        }
    }

    st.v_beta = Mat::Zero(n - 1, n);
    std::vector<int> row_of_child(static_cast<std::size_t>(n), -1);
    for (std::size_t r = 0; r < st.directed_edges.size(); ++r) {
        auto [p, c] = st.directed_edges[r];
        st.v_beta(static_cast<Eigen::Index>(r), c) = 1.0;
        st.v_beta(static_cast<Eigen::Index>(r), p) = -1.0;
        row_of_child[static_cast<std::size_t>(c)] = static_cast<int>(r);
    }

    for (auto [a, b] : t.edges()) {
        const bool tree = (parent[static_cast<std::size_t>(b)] == a) ||
                          (parent[static_cast<std::size_t>(a)] == b);
        if (!tree) st.non_tree_edges.emplace_back(a, b);
    }

    st.t_barbeta =
        Mat::Zero(static_cast<Eigen::Index>(st.non_tree_edges.size()), n - 1);
    for (std::size_t r = 0; r < st.non_tree_edges.size(); ++r) {
        // x_j - x_i along the tree path from i up to the common ancestor and
        // down to j. Climbing from j adds tree edge states, climbing from i
        // subtracts them.
        auto [i, j] = st.non_tree_edges[r];
        int a = i;
        int b = j;
        while (a != b) {
            if (depth[static_cast<std::size_t>(b)] >= depth[static_cast<std::size_t>(a)]) {
                st.t_barbeta(static_cast<Eigen::Index>(r),
                             row_of_child[static_cast<std::size_t>(b)]) += 1.0;
                b = parent[static_cast<std::size_t>(b)];
            } else {
                st.t_barbeta(static_cast<Eigen::Index>(r),
                             row_of_child[static_cast<std::size_t>(a)]) -= 1.0;
                a = parent[static_cast<std::size_t>(a)];
            }
        }
    }
    return st;
}

// Right inverse of v_beta associated with a weighting q: columns span the
// kernel of q^T, v_beta * inverse = I. Satisfies
// 1 q^T + inverse * v_beta = I, which makes it the unique map recovering the
// q-projected ensemble state from tree edge states.
inline Mat generalized_inverse(const SpanningTree& st, const WeightingVector& w) {
    validate(w);
    const Eigen::Index n = st.v_beta.cols();
    if (w.q.size() != n)
        throw std::invalid_argument("weighting length does not match tree");

    const auto build = [&](const Mat& kernel_basis) -> std::pair<Mat, double> {
        const Mat m = st.v_beta * kernel_basis;
        Eigen::JacobiSVD<Mat> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
        const double smin = svd.singularValues().minCoeff();
        const double smax = svd.singularValues().maxCoeff();
        const double cond = (smin > 0.0) ? smax / smin
                                         : std::numeric_limits<double>::infinity();
        if (!std::isfinite(cond)) return {Mat(), cond};
        return {kernel_basis * m.partialPivLu().solve(Mat::Identity(n - 1, n - 1)),
                cond};
    };

    // Default basis of ker q^T: the first N-1 columns of I - 1 q^T.
    const Mat pi = projection(w);
    auto [inv, cond] = build(pi.leftCols(n - 1));
    if (cond <= 1e12) return inv;

    // Orthonormal fallback for badly scaled weightings.
    Eigen::HouseholderQR<Mat> qr(w.q);
    const Mat full = qr.householderQ();
    auto [inv2, cond2] = build(full.rightCols(n - 1));
    if (cond2 <= 1e12) return inv2;
    throw std::runtime_error("generalized inverse is numerically singular");
}

}  // namespace tscale
