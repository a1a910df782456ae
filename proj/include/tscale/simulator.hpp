#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tscale/avar.hpp"
#include "tscale/clock.hpp"
#include "tscale/control.hpp"
#include "tscale/estimation.hpp"
#include "tscale/rng.hpp"
#include "tscale/topology.hpp"

namespace tscale {

// ============================================================================
// Scenario configuration
// ============================================================================

enum class RunMode { free_run, sync_only, normal, emergency };
enum class EventKind { gnss_fail, gnss_recover };

struct ScheduledEvent {
    long step = 0;
    EventKind kind = EventKind::gnss_fail;
};

struct GainSetting {
    std::optional<double> gamma;  // empty selects the scenario default
    double alpha = 1.0;
};

struct ScenarioConfig {
    std::vector<ClockNoiseParams> clocks;
    std::vector<std::pair<int, int>> edges;  // 0-based node pairs
    std::vector<AnchorParams> anchors;
    double tau = 1.0;     // fast step (s)
    double T = 2000.0;    // supervisory period (s), integer multiple of tau
    double R = 1e-24;     // phase measurement noise variance (s^2)
    GainSetting sync_gain;              // default gamma: 0.1x certified bound
    GainSetting anchor_gain{0.5, 1.0};
    GainSetting float_gain{0.5, 1.0};
    int tree_root = 0;
    std::vector<ScheduledEvent> events;  // applied at the next supervisory tick
    long horizon = 100000;
    std::uint64_t seed = 0;
    RunMode mode = RunMode::normal;
    std::vector<ClockState> initial_states;  // empty: small random defaults
    double common_input = 0.0;               // added to every node input
    bool record_inputs = true;
    bool record_noise = true;
    bool record_measurements = false;
    // Named weighting vectors whose free-running means are co-simulated with
    // the run's own noise draws.
    std::vector<std::pair<std::string, Vec>> reference_weights;
};

struct ScenarioError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ============================================================================
// Gain resolution and certificates
// ============================================================================

struct GainReport {
    SyncCertificate sync;
    SupervisoryCertificate anchor;
    SupervisoryCertificate floating;
    bool sync_checked = false;
    bool anchor_checked = false;
    bool floating_checked = false;
};

struct CertificateError : ScenarioError {
    CertificateError(const std::string& what, GainReport r)
        : ScenarioError(what), report(std::move(r)) {}
    GainReport report;
};

struct ResolvedScenario {
    int n = 0;
    long ell = 1;
    SystemMatrices fast;
    Vec d_diag;          // coupling weights, Gamma(tau) diagonal
    Vec q_fast;          // weighting of the synchronization layer
    Vec q_slow;          // long-horizon weighting (empty if not derivable)
    Vec q_metric;        // weighting used for the recorded ensemble mean
    GainSpec sync;
    GainSpec anchor;
    GainSpec floating;
    GainReport certificates;
    double theta_star = 0.0;
    bool sync_active = false;
    bool supervised = false;
    bool emergency_reachable = false;
};

namespace detail {

inline long resolve_period(double tau, double T) {
    if (!(tau > 0.0)) throw ScenarioError("config: tau must be positive");
    if (!(T > 0.0)) throw ScenarioError("config: supervisory period must be positive");
    const double ratio = T / tau;
    const long ell = std::llround(ratio);
    if (ell < 1 || std::abs(ratio - static_cast<double>(ell)) > 1e-9)
        throw ScenarioError("config: supervisory period must be an integer multiple of tau");
    return ell;
}

inline void validate_basics(const ScenarioConfig& cfg) {
    if (cfg.clocks.empty()) throw ScenarioError("config: no clocks");
    for (const auto& c : cfg.clocks) {
        try {
            validate(c);
        } catch (const std::exception& e) {
            throw ScenarioError(std::string("config: ") + e.what());
        }
    }
    if (!(cfg.R > 0.0)) throw ScenarioError("config: measurement noise variance must be positive");
    if (cfg.horizon < 1) throw ScenarioError("config: horizon must be at least one step");
    const int n = static_cast<int>(cfg.clocks.size());
    if (cfg.tree_root < 0 || cfg.tree_root >= n)
        throw ScenarioError("config: tree root out of range");
    for (const auto& a : cfg.anchors) {
        if (a.attached.empty())
            throw ScenarioError("config: anchor with no attached clocks");
        for (int i : a.attached)
            if (i < 0 || i >= n) throw ScenarioError("config: anchor attachment out of range");
        try {
            validate(a.noise);
        } catch (const std::exception& e) {
            throw ScenarioError(std::string("config: ") + e.what());
        }
    }
    if (!cfg.initial_states.empty() &&
        cfg.initial_states.size() != cfg.clocks.size())
        throw ScenarioError("config: initial state list does not match clock count");
    for (const auto& ev : cfg.events)
        if (ev.step < 0) throw ScenarioError("config: event before step zero");
    for (const auto& [name, q] : cfg.reference_weights)
        if (q.size() != n) throw ScenarioError("config: reference weighting has wrong length");
}

}  // namespace detail

inline ResolvedScenario resolve_scenario(const ScenarioConfig& cfg) {
    detail::validate_basics(cfg);

    ResolvedScenario rs;
    rs.n = static_cast<int>(cfg.clocks.size());
    rs.ell = detail::resolve_period(cfg.tau, cfg.T);
    rs.fast = system_matrices(cfg.tau);
    rs.sync_active = cfg.mode != RunMode::free_run;
    rs.supervised = cfg.mode == RunMode::normal || cfg.mode == RunMode::emergency;
    const bool has_fail_event =
        std::any_of(cfg.events.begin(), cfg.events.end(),
                    [](const ScheduledEvent& e) { return e.kind == EventKind::gnss_fail; });
    rs.emergency_reachable =
        cfg.mode == RunMode::emergency ||
        (cfg.mode == RunMode::normal && (cfg.anchors.empty() || has_fail_event));

    std::vector<double> s1(cfg.clocks.size()), s2(cfg.clocks.size());
    for (std::size_t i = 0; i < cfg.clocks.size(); ++i) {
        s1[i] = cfg.clocks[i].sigma1_sq;
        s2[i] = cfg.clocks[i].sigma2_sq;
    }

    rs.d_diag = Vec::Zero(rs.n);
    for (int i = 0; i < rs.n; ++i)
        rs.d_diag(i) = cfg.tau * s1[static_cast<std::size_t>(i)] +
                       cfg.tau * cfg.tau * cfg.tau * s2[static_cast<std::size_t>(i)] / 3.0;

    const bool d_positive = rs.d_diag.minCoeff() > 0.0;
    if (rs.sync_active && !d_positive)
        throw ScenarioError("config: controlled operation needs every clock to carry noise");
    if (d_positive) {
        rs.q_fast = weighting_from_D(rs.d_diag).q;
        rs.q_metric = rs.q_fast;
    } else {
        rs.q_metric = Vec::Constant(rs.n, 1.0 / rs.n);
    }

    bool slow_ok = true;
    for (std::size_t i = 0; i < cfg.clocks.size(); ++i)
        if (!(cfg.T * s1[i] + cfg.T * cfg.T * cfg.T * s2[i] / 3.0 > 0.0)) slow_ok = false;
    if (slow_ok) rs.q_slow = optimal_weight(s1, s2, cfg.T).q;
    if (rs.emergency_reachable && !slow_ok)
        throw ScenarioError("config: floating operation needs every clock to carry noise");

    double attached_total = 0.0;
    for (const auto& a : cfg.anchors) {
        rs.theta_star += static_cast<double>(a.attached.size()) * a.theta_star;
        attached_total += static_cast<double>(a.attached.size());
    }
    if (attached_total > 0.0) rs.theta_star /= attached_total;

    // Gains. The synchronization default is a tenth of the certified bound,
    // which needs the topology spectrum first.
    rs.anchor = GainSpec{cfg.anchor_gain.gamma.value_or(0.5), cfg.anchor_gain.alpha,
                         cfg.T, GainKind::anchor};
    rs.floating = GainSpec{cfg.float_gain.gamma.value_or(0.5), cfg.float_gain.alpha,
                           cfg.T, GainKind::floating};
    rs.certificates.anchor = supervisory_gain_check(rs.anchor);
    rs.certificates.floating = supervisory_gain_check(rs.floating);

    if (rs.sync_active) {
        Topology topo(rs.n, cfg.edges);
        if (!topo.connected())
            throw ScenarioError("config: controlled operation needs a connected graph");
        GainSpec probe{1.0, cfg.sync_gain.alpha, cfg.tau, GainKind::sync};
        const SyncCertificate bounds = sync_gain_check(probe, topo, rs.d_diag);
        const double gamma = cfg.sync_gain.gamma.value_or(0.1 * bounds.bound);
        rs.sync = GainSpec{gamma, cfg.sync_gain.alpha, cfg.tau, GainKind::sync};
        rs.certificates.sync = sync_gain_check(rs.sync, topo, rs.d_diag);
        rs.certificates.sync_checked = true;
    } else {
        rs.sync = GainSpec{0.0, cfg.sync_gain.alpha, cfg.tau, GainKind::sync};
    }
    rs.certificates.anchor_checked = rs.supervised && !cfg.anchors.empty();
    rs.certificates.floating_checked = rs.emergency_reachable;

    std::string failure;
    if (rs.certificates.sync_checked && !rs.certificates.sync.valid)
        failure = "synchronization gain outside the certified range";
    else if (rs.certificates.anchor_checked && !rs.certificates.anchor.valid)
        failure = "anchoring gain outside the certified range";
    else if (rs.certificates.floating_checked && !rs.certificates.floating.valid)
        failure = "floating gain outside the certified range";
    if (!failure.empty()) throw CertificateError("config: " + failure, rs.certificates);
    return rs;
}

// ============================================================================
// Run record
// ============================================================================

struct AnchorSample {
    long step = 0;
    int anchor = 0;
    ClockState state;
};

struct RunRecord {
    int n = 0;
    long horizon = 0;
    double tau = 1.0;
    long ell = 1;
    std::uint64_t seed = 0;

    std::vector<double> h;        // horizon x n phase deviations
    std::vector<double> u;        // horizon x n applied inputs (optional)
    std::vector<double> gts_phase;  // weighted ensemble mean phase
    std::vector<double> spread;     // max pairwise phase difference
    std::vector<double> noise;    // horizon x 2n process noise draws (optional)
    std::vector<double> y;        // horizon x 2|E| measurements (optional)
    std::vector<std::pair<long, double>> broadcasts;
    std::vector<AnchorSample> anchor_samples;
    std::vector<std::pair<long, OperatingMode>> mode_history;
    Vec x0;  // initial phases then frequencies
    std::map<std::string, std::vector<double>> references;

    Vec q_fast, q_slow;
    GainSpec sync_gain, anchor_gain, float_gain;
    GainReport certificates;
    double theta_star = 0.0;

    double h_at(long k, int i) const {
        return h[static_cast<std::size_t>(k) * static_cast<std::size_t>(n) +
                 static_cast<std::size_t>(i)];
    }
};

inline double spread_metric(const RunRecord& rec, long k) {
    if (k < 0 || k >= rec.horizon) throw std::out_of_range("spread: step out of range");
    double lo = rec.h_at(k, 0);
    double hi = lo;
    for (int i = 1; i < rec.n; ++i) {
        lo = std::min(lo, rec.h_at(k, i));
        hi = std::max(hi, rec.h_at(k, i));
    }
    return hi - lo;
}

// Free-running mean with weights q replayed against the run's recorded noise:
//   r[k+1] = A r[k] + [q . v_phase[k], q . v_freq[k]].
inline std::vector<double> reference_ensemble_mean(const RunRecord& rec, const Vec& q) {
    if (q.size() != rec.n) throw std::invalid_argument("reference weighting has wrong length");
    if (rec.noise.empty() || rec.x0.size() != 2 * rec.n)
        throw std::invalid_argument("run record carries no noise draws");
    std::vector<double> out(static_cast<std::size_t>(rec.horizon));
    double ph = 0.0;
    double fr = 0.0;
    for (int i = 0; i < rec.n; ++i) {
        ph += q(i) * rec.x0(i);
        fr += q(i) * rec.x0(rec.n + i);
    }
    const std::size_t width = 2 * static_cast<std::size_t>(rec.n);
    for (long k = 0; k < rec.horizon; ++k) {
        out[static_cast<std::size_t>(k)] = ph;
        const double* v = rec.noise.data() + static_cast<std::size_t>(k) * width;
        double vph = 0.0;
        double vfr = 0.0;
        for (int i = 0; i < rec.n; ++i) {
            vph += q(i) * v[i];
            vfr += q(i) * v[rec.n + i];
        }
        ph += rec.tau * fr + vph;
        fr += vfr;
    }
    return out;
}

// ============================================================================
// Scenario runner
// ============================================================================

inline RunRecord run_scenario(const ScenarioConfig& cfg) {
    const ResolvedScenario rs = resolve_scenario(cfg);
    const int n = rs.n;
    const long horizon = cfg.horizon;
    const SystemMatrices& fast = rs.fast;

    Topology topo(n, cfg.edges);
    const auto& channels = topo.directed_edges();
    const int n_channels = static_cast<int>(channels.size());

    RunRecord rec;
    rec.n = n;
    rec.horizon = horizon;
    rec.tau = cfg.tau;
    rec.ell = rs.ell;
    rec.seed = cfg.seed;
    rec.q_fast = rs.q_fast;
    rec.q_slow = rs.q_slow;
    rec.sync_gain = rs.sync;
    rec.anchor_gain = rs.anchor;
    rec.float_gain = rs.floating;
    rec.certificates = rs.certificates;
    rec.theta_star = rs.theta_star;

    rec.h.resize(static_cast<std::size_t>(horizon) * static_cast<std::size_t>(n));
    rec.gts_phase.resize(static_cast<std::size_t>(horizon));
    rec.spread.resize(static_cast<std::size_t>(horizon));
    if (cfg.record_inputs)
        rec.u.resize(static_cast<std::size_t>(horizon) * static_cast<std::size_t>(n));
    if (cfg.record_noise)
        rec.noise.resize(static_cast<std::size_t>(horizon) * 2 * static_cast<std::size_t>(n));
    if (cfg.record_measurements && rs.sync_active)
        rec.y.resize(static_cast<std::size_t>(horizon) *
                     static_cast<std::size_t>(n_channels));

    // --- initial states -----------------------------------------------------
    std::vector<double> ph(static_cast<std::size_t>(n), 0.0);
    std::vector<double> fr(static_cast<std::size_t>(n), 0.0);
    if (!cfg.initial_states.empty()) {
        for (int i = 0; i < n; ++i) {
            ph[static_cast<std::size_t>(i)] = cfg.initial_states[static_cast<std::size_t>(i)].phase;
            fr[static_cast<std::size_t>(i)] = cfg.initial_states[static_cast<std::size_t>(i)].freq;
        }
    } else {
        for (int i = 0; i < n; ++i) {
            RandomStream init(cfg.seed, "init/clock/" + std::to_string(i + 1));
            ph[static_cast<std::size_t>(i)] = init.uniform(-1e-8, 1e-8);
            fr[static_cast<std::size_t>(i)] = init.uniform(-1e-11, 1e-11);
        }
    }
    rec.x0 = Vec::Zero(2 * n);
    for (int i = 0; i < n; ++i) {
        rec.x0(i) = ph[static_cast<std::size_t>(i)];
        rec.x0(n + i) = fr[static_cast<std::size_t>(i)];
    }

    // --- noise streams -------------------------------------------------------
    std::vector<RandomStream> process_streams;
    std::vector<NoiseSampler> process_samplers;
    for (int i = 0; i < n; ++i) {
        process_streams.emplace_back(cfg.seed, "process/clock/" + std::to_string(i + 1));
        process_samplers.emplace_back(
            process_noise_cov(cfg.clocks[static_cast<std::size_t>(i)], cfg.tau));
    }
    std::vector<RandomStream> channel_streams;
    for (auto [i, j] : channels)
        channel_streams.emplace_back(cfg.seed, "meas/" + std::to_string(i + 1) + "->" +
                                                   std::to_string(j + 1));
    std::vector<RandomStream> anchor_state_streams;
    std::vector<std::vector<RandomStream>> anchor_meas_streams;
    for (std::size_t l = 0; l < cfg.anchors.size(); ++l) {
        anchor_state_streams.emplace_back(cfg.seed,
                                          "anchor/state/" + std::to_string(l + 1));
        anchor_meas_streams.emplace_back();
        for (int i : cfg.anchors[l].attached)
            anchor_meas_streams.back().emplace_back(
                cfg.seed,
                "meas/anchor/" + std::to_string(l + 1) + "/" + std::to_string(i + 1));
    }
    const double meas_sigma = std::sqrt(cfg.R);

    // --- estimators and controllers ------------------------------------------
    std::vector<EdgeEstimator> edge_estimators;
    std::vector<int> channel_offset(static_cast<std::size_t>(n), 0);
    std::vector<int> reverse_slot;  // per channel: index of (j -> i) within j's block
    if (rs.sync_active) {
        for (int i = 0; i < n; ++i)
            edge_estimators.push_back(
                make_edge_estimator(topo, i, cfg.clocks, cfg.tau, cfg.R));
        int acc = 0;
        for (int i = 0; i < n; ++i) {
            channel_offset[static_cast<std::size_t>(i)] = acc;
            acc += topo.degree(i);
        }
        for (auto [i, j] : channels) {
            const auto& nb = topo.neighbors(j);
            const int slot = static_cast<int>(
                std::lower_bound(nb.begin(), nb.end(), i) - nb.begin());
            reverse_slot.push_back(slot);
        }
    }

    std::vector<AnchorEdgeEstimator> anchor_estimators;
    std::vector<double> pending_anchor_y;
    if (rs.supervised && !cfg.anchors.empty()) {
        for (std::size_t l = 0; l < cfg.anchors.size(); ++l)
            for (int i : cfg.anchors[l].attached)
                anchor_estimators.push_back(make_anchor_estimator(
                    static_cast<int>(l), i, rs.ell, cfg.tau,
                    cfg.anchors[l].noise, cfg.clocks[static_cast<std::size_t>(i)],
                    cfg.R));
        pending_anchor_y.assign(anchor_estimators.size(), 0.0);
    }

    std::optional<TreeEstimator> tree_estimator;
    std::optional<SpanningTree> tree;
    std::vector<int> tree_channel;  // tree edge row -> measurement channel
    if (rs.emergency_reachable) {
        tree = spanning_tree(topo, cfg.tree_root);
        tree_estimator = make_tree_estimator(*tree, cfg.clocks, cfg.tau, cfg.R,
                                             WeightingVector{rs.q_fast},
                                             WeightingVector{rs.q_slow});
        for (auto [p, c] : tree->directed_edges)
            tree_channel.push_back(topo.directed_index(p, c));
    }

    OperatingMode op_mode =
        (cfg.mode == RunMode::emergency || anchor_estimators.empty())
            ? OperatingMode::emergency
            : OperatingMode::normal;
    bool anchors_need_init = true;
    if (rs.supervised) rec.mode_history.emplace_back(0, op_mode);

    auto events = cfg.events;
    std::stable_sort(events.begin(), events.end(),
                     [](const ScheduledEvent& a, const ScheduledEvent& b) {
                         return a.step < b.step;
                     });
    std::size_t next_event = 0;

    // --- reference co-simulations ---------------------------------------------
    struct Reference {
        std::string name;
        Vec q;
        double ph;
        double fr;
        std::vector<double>* out;
    };
    std::vector<Reference> refs;
    for (const auto& [name, q] : cfg.reference_weights) {
        auto& series = rec.references[name];
        series.resize(static_cast<std::size_t>(horizon));
        double rph = 0.0;
        double rfr = 0.0;
        for (int i = 0; i < n; ++i) {
            rph += q(i) * ph[static_cast<std::size_t>(i)];
            rfr += q(i) * fr[static_cast<std::size_t>(i)];
        }
        refs.push_back({name, q, rph, rfr, &series});
    }

    // --- main loop -------------------------------------------------------------
    const RowVec2 f_sync = rs.sync.F();
    const RowVec2 f_anchor = rs.anchor.F();
    const RowVec2 f_float = rs.floating.F();

    std::vector<double> y_now(static_cast<std::size_t>(n_channels), 0.0);
    std::vector<double> u_now(static_cast<std::size_t>(n), 0.0);
    Vec v_buf = Vec::Zero(2 * n);
    Vec y_block, eta_block;
    Vec y_tree, eta_tree;
    if (tree_estimator) {
        y_tree.resize(n - 1);
        eta_tree.resize(n - 1);
    }
    std::vector<Vec2> anchor_zhats;

    for (long k = 0; k < horizon; ++k) {
        // 1. Measurements across all directed channels.
        if (rs.sync_active) {
            for (int c = 0; c < n_channels; ++c) {
                const auto [i, j] = channels[static_cast<std::size_t>(c)];
                y_now[static_cast<std::size_t>(c)] =
                    ph[static_cast<std::size_t>(j)] - ph[static_cast<std::size_t>(i)] +
                    meas_sigma * channel_streams[static_cast<std::size_t>(c)].gaussian();
            }
            if (!rec.y.empty())
                std::copy(y_now.begin(), y_now.end(),
                          rec.y.begin() + static_cast<std::size_t>(k) *
                                              static_cast<std::size_t>(n_channels));
        }

        // 2. Record the readings at this step.
        {
            double lo = ph[0];
            double hi = ph[0];
            double mean = 0.0;
            for (int i = 0; i < n; ++i) {
                const double p = ph[static_cast<std::size_t>(i)];
                rec.h[static_cast<std::size_t>(k) * static_cast<std::size_t>(n) +
                      static_cast<std::size_t>(i)] = p;
                lo = std::min(lo, p);
                hi = std::max(hi, p);
                mean += rs.q_metric(i) * p;
            }
            rec.gts_phase[static_cast<std::size_t>(k)] = mean;
            rec.spread[static_cast<std::size_t>(k)] = hi - lo;
        }
        for (auto& ref : refs) (*ref.out)[static_cast<std::size_t>(k)] = ref.ph;

        // 3. Supervisory tick: mode events, anchor handling, broadcast.
        double eta_bar = 0.0;
        if (rs.supervised && k % rs.ell == 0) {
            while (next_event < events.size() && events[next_event].step <= k) {
                const EventKind kind = events[next_event].kind;
                ++next_event;
                if (kind == EventKind::gnss_fail && op_mode == OperatingMode::normal) {
                    op_mode = OperatingMode::emergency;
                    if (tree_estimator) tree_estimator->reset();
                    rec.mode_history.emplace_back(k, op_mode);
                } else if (kind == EventKind::gnss_recover &&
                           op_mode == OperatingMode::emergency &&
                           !anchor_estimators.empty()) {
                    op_mode = OperatingMode::normal;
                    anchors_need_init = true;
                    rec.mode_history.emplace_back(k, op_mode);
                }
            }

            if (op_mode == OperatingMode::normal) {
                if (!anchors_need_init)
                    for (std::size_t e = 0; e < anchor_estimators.size(); ++e)
                        anchor_estimators[e].step(pending_anchor_y[e]);

                std::size_t e = 0;
                for (std::size_t l = 0; l < cfg.anchors.size(); ++l) {
                    const ClockState anchor_state = sample_anchor_state(
                        cfg.anchors[l], cfg.T, anchor_state_streams[l]);
                    rec.anchor_samples.push_back(
                        {k, static_cast<int>(l), anchor_state});
                    for (std::size_t a = 0; a < cfg.anchors[l].attached.size();
                         ++a, ++e) {
                        const int i = cfg.anchors[l].attached[a];
                        const double offset =
                            ph[static_cast<std::size_t>(i)] - anchor_state.phase +
                            meas_sigma * anchor_meas_streams[l][a].gaussian();
                        if (anchors_need_init)
                            anchor_estimators[e].initialize(offset);
                        pending_anchor_y[e] = offset;
                    }
                }
                anchors_need_init = false;

                anchor_zhats.clear();
                for (const auto& est : anchor_estimators)
                    anchor_zhats.push_back(est.z_hat());
                eta_bar = anchoring_control(anchor_zhats, f_anchor);
            } else {
                eta_bar = floating_control(tree_estimator->zbar_minus_hat(), f_float);
            }
            rec.broadcasts.emplace_back(k, eta_bar);
        }

        // 4. Node inputs for this step, from current estimates.
        if (rs.sync_active) {
            for (int i = 0; i < n; ++i) {
                const auto& nb = topo.neighbors(i);
                Vec2 sum = Vec2::Zero();
                for (std::size_t r = 0; r < nb.size(); ++r) {
                    const int c = channel_offset[static_cast<std::size_t>(i)] +
                                  static_cast<int>(r);
                    const Vec2 own = edge_estimators[static_cast<std::size_t>(i)]
                                         .edge_estimate(static_cast<Eigen::Index>(r));
                    const Vec2 other =
                        edge_estimators[static_cast<std::size_t>(nb[r])].edge_estimate(
                            reverse_slot[static_cast<std::size_t>(c)]);
                    sum += 0.5 * (own - other);
                }
                u_now[static_cast<std::size_t>(i)] =
                    rs.d_diag(i) * (f_sync * sum)(0) + eta_bar + cfg.common_input;
            }
        } else {
            std::fill(u_now.begin(), u_now.end(), eta_bar + cfg.common_input);
        }
        if (!rec.u.empty())
            std::copy(u_now.begin(), u_now.end(),
                      rec.u.begin() + static_cast<std::size_t>(k) *
                                          static_cast<std::size_t>(n));

        // 5. Estimator updates with this step's measurements and inputs.
        if (rs.sync_active) {
            for (int i = 0; i < n; ++i) {
                const auto& nb = topo.neighbors(i);
                const int j_deg = static_cast<int>(nb.size());
                y_block = Eigen::Map<const Vec>(
                    y_now.data() + channel_offset[static_cast<std::size_t>(i)], j_deg);
                eta_block.resize(j_deg);
                for (int r = 0; r < j_deg; ++r)
                    eta_block(r) = u_now[static_cast<std::size_t>(nb[static_cast<std::size_t>(r)])] -
                                   u_now[static_cast<std::size_t>(i)];
                edge_estimators[static_cast<std::size_t>(i)].step(y_block, eta_block);
            }
        }
        if (rs.supervised && op_mode == OperatingMode::emergency && tree_estimator) {
            for (std::size_t r = 0; r < tree_channel.size(); ++r) {
                const auto [p, c] = tree->directed_edges[r];
                y_tree(static_cast<Eigen::Index>(r)) =
                    y_now[static_cast<std::size_t>(tree_channel[r])];
                eta_tree(static_cast<Eigen::Index>(r)) =
                    u_now[static_cast<std::size_t>(c)] - u_now[static_cast<std::size_t>(p)];
            }
            tree_estimator->step(y_tree, eta_tree, eta_bar);
        }
        if (rs.supervised && op_mode == OperatingMode::normal)
            for (auto& est : anchor_estimators)
                est.accumulate(u_now[static_cast<std::size_t>(est.mac())]);

        // 6. Advance the physical clocks.
        for (int i = 0; i < n; ++i) {
            const Vec2 v = process_samplers[static_cast<std::size_t>(i)].sample(
                process_streams[static_cast<std::size_t>(i)]);
            v_buf(i) = v(0);
            v_buf(n + i) = v(1);
            ph[static_cast<std::size_t>(i)] += cfg.tau * fr[static_cast<std::size_t>(i)] +
                                               cfg.tau * u_now[static_cast<std::size_t>(i)] +
                                               v(0);
            fr[static_cast<std::size_t>(i)] += u_now[static_cast<std::size_t>(i)] + v(1);
        }
        if (!rec.noise.empty())
            Eigen::Map<Vec>(rec.noise.data() +
                                static_cast<std::size_t>(k) * 2 *
                                    static_cast<std::size_t>(n),
                            2 * n) = v_buf;
        for (auto& ref : refs) {
            double vph = 0.0;
            double vfr = 0.0;
            for (int i = 0; i < n; ++i) {
                vph += ref.q(i) * v_buf(i);
                vfr += ref.q(i) * v_buf(n + i);
            }
            ref.ph += cfg.tau * ref.fr + vph;
            ref.fr += vfr;
        }
    }

    return rec;
}

}  // namespace tscale
