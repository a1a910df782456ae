#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tscale/rng.hpp"
#include "tscale/simulator.hpp"

namespace tscale {

using nlohmann::json;

// ============================================================================
// Enum names
// ============================================================================

inline std::string to_string(RunMode m) {
    switch (m) {
        case RunMode::free_run: return "free_run";
        case RunMode::sync_only: return "sync_only";
        case RunMode::normal: return "normal";
        case RunMode::emergency: return "emergency";
    }
    throw std::logic_error("unknown run mode");
}

inline RunMode run_mode_from(const std::string& s) {
    if (s == "free_run") return RunMode::free_run;
    if (s == "sync_only") return RunMode::sync_only;
    if (s == "normal") return RunMode::normal;
    if (s == "emergency") return RunMode::emergency;
    throw ScenarioError("config: unknown mode '" + s + "'");
}

inline std::string to_string(EventKind k) {
    switch (k) {
        case EventKind::gnss_fail: return "gnss_fail";
        case EventKind::gnss_recover: return "gnss_recover";
    }
    throw std::logic_error("unknown event kind");
}

inline EventKind event_kind_from(const std::string& s) {
    if (s == "gnss_fail") return EventKind::gnss_fail;
    if (s == "gnss_recover") return EventKind::gnss_recover;
    throw ScenarioError("config: unknown event kind '" + s + "'");
}

inline std::string to_string(OperatingMode m) {
    return m == OperatingMode::normal ? "normal" : "emergency";
}

// ============================================================================
// Scenario JSON (node indices are 1-based in files)
// ============================================================================

inline json scenario_to_json(const ScenarioConfig& cfg) {
    json j;
    j["clocks"] = json::array();
    for (const auto& c : cfg.clocks)
        j["clocks"].push_back({{"sigma1_sq", c.sigma1_sq}, {"sigma2_sq", c.sigma2_sq}});
    j["edges"] = json::array();
    for (auto [a, b] : cfg.edges) j["edges"].push_back({a + 1, b + 1});
    j["anchors"] = json::array();
    for (const auto& a : cfg.anchors) {
        json attached = json::array();
        for (int i : a.attached) attached.push_back(i + 1);
        j["anchors"].push_back({{"theta_star", a.theta_star},
                                {"sigma1_sq", a.noise.sigma1_sq},
                                {"sigma2_sq", a.noise.sigma2_sq},
                                {"attached", attached}});
    }
    j["tau"] = cfg.tau;
    j["T"] = cfg.T;
    j["R"] = cfg.R;
    const auto gain_json = [](const GainSetting& g) {
        json out;
        out["gamma"] = g.gamma ? json(*g.gamma) : json(nullptr);
        out["alpha"] = g.alpha;
        return out;
    };
    j["gains"] = {{"sync", gain_json(cfg.sync_gain)},
                  {"anchor", gain_json(cfg.anchor_gain)},
                  {"float", gain_json(cfg.float_gain)}};
    j["tree_root"] = cfg.tree_root + 1;
    j["events"] = json::array();
    for (const auto& e : cfg.events)
        j["events"].push_back({{"step", e.step}, {"kind", to_string(e.kind)}});
    j["horizon"] = cfg.horizon;
    j["seed"] = cfg.seed;
    j["mode"] = to_string(cfg.mode);
    if (!cfg.initial_states.empty()) {
        j["initial_states"] = json::array();
        for (const auto& s : cfg.initial_states)
            j["initial_states"].push_back({s.phase, s.freq});
    }
    if (cfg.common_input != 0.0) j["common_input"] = cfg.common_input;
    j["record"] = {{"inputs", cfg.record_inputs},
                   {"noise", cfg.record_noise},
                   {"measurements", cfg.record_measurements}};
    if (!cfg.reference_weights.empty()) {
        json refs = json::object();
        for (const auto& [name, q] : cfg.reference_weights) {
            json w = json::array();
            for (Eigen::Index i = 0; i < q.size(); ++i) w.push_back(q(i));
            refs[name] = w;
        }
        j["references"] = refs;
    }
    return j;
}

inline ScenarioConfig scenario_from_json(const json& j) {
    ScenarioConfig cfg;
    try {
        for (const auto& c : j.at("clocks"))
            cfg.clocks.push_back(
                {c.at("sigma1_sq").get<double>(), c.at("sigma2_sq").get<double>()});
        for (const auto& e : j.at("edges")) {
            if (!e.is_array() || e.size() != 2)
                throw ScenarioError("config: each edge must be a pair of node indices");
            cfg.edges.emplace_back(e.at(0).get<int>() - 1, e.at(1).get<int>() - 1);
        }
        if (j.contains("anchors"))
            for (const auto& a : j.at("anchors")) {
                AnchorParams ap;
                ap.theta_star = a.value("theta_star", 0.0);
                ap.noise.sigma1_sq = a.at("sigma1_sq").get<double>();
                ap.noise.sigma2_sq = a.at("sigma2_sq").get<double>();
                for (const auto& i : a.at("attached"))
                    ap.attached.push_back(i.get<int>() - 1);
                cfg.anchors.push_back(std::move(ap));
            }
        cfg.tau = j.value("tau", 1.0);
        cfg.T = j.value("T", 2000.0);
        cfg.R = j.value("R", 1e-24);
        if (j.contains("gains")) {
            const auto read_gain = [&](const char* key, GainSetting base) {
                if (!j.at("gains").contains(key)) return base;
                const auto& g = j.at("gains").at(key);
                GainSetting out = base;
                if (g.contains("gamma") && !g.at("gamma").is_null())
                    out.gamma = g.at("gamma").get<double>();
                out.alpha = g.value("alpha", base.alpha);
                return out;
            };
            cfg.sync_gain = read_gain("sync", GainSetting{});
            cfg.anchor_gain = read_gain("anchor", GainSetting{0.5, 1.0});
            cfg.float_gain = read_gain("float", GainSetting{0.5, 1.0});
        }
        cfg.tree_root = j.value("tree_root", 1) - 1;
        if (j.contains("events"))
            for (const auto& e : j.at("events"))
                cfg.events.push_back({e.at("step").get<long>(),
                                      event_kind_from(e.at("kind").get<std::string>())});
        cfg.horizon = j.value("horizon", 100000L);
        cfg.seed = j.value("seed", std::uint64_t{0});
        cfg.mode = run_mode_from(j.value("mode", std::string("normal")));
        if (j.contains("initial_states"))
            for (const auto& s : j.at("initial_states")) {
                if (!s.is_array() || s.size() != 2)
                    throw ScenarioError("config: each initial state must be [phase, freq]");
                cfg.initial_states.push_back(
                    {s.at(0).get<double>(), s.at(1).get<double>()});
            }
        cfg.common_input = j.value("common_input", 0.0);
        if (j.contains("record")) {
            const auto& r = j.at("record");
            cfg.record_inputs = r.value("inputs", true);
            cfg.record_noise = r.value("noise", true);
            cfg.record_measurements = r.value("measurements", false);
        }
        if (j.contains("references"))
            for (const auto& [name, w] : j.at("references").items()) {
                Vec q(static_cast<Eigen::Index>(w.size()));
                for (Eigen::Index i = 0; i < q.size(); ++i)
                    q(i) = w.at(static_cast<std::size_t>(i)).get<double>();
                cfg.reference_weights.emplace_back(name, std::move(q));
            }
    } catch (const json::exception& e) {
        throw ScenarioError(std::string("config: ") + e.what());
    }
    return cfg;
}

struct FileError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline ScenarioConfig load_scenario_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FileError("cannot open config file: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ScenarioError(std::string("config: ") + e.what());
    }
    return scenario_from_json(j);
}

// Stable digest of the scenario semantics. The seed is excluded so one
// configuration swept over seeds shares a hash.
inline std::uint64_t config_hash(const ScenarioConfig& cfg) {
    json j = scenario_to_json(cfg);
    j.erase("seed");
    return fnv1a64(j.dump());
}

inline std::string hash_string(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

// ============================================================================
// Run record CSV
//
// Layout: a comment line carrying the config hash and seed, a header, then
// one row per recorded step. Values use 17 significant digits so downstream
// stability analysis is not quantization-limited.
// ============================================================================

inline void write_run_csv(std::ostream& out, const RunRecord& rec,
                          std::uint64_t hash, long stride = 1) {
    if (stride < 1) throw std::invalid_argument("csv stride must be positive");
    out << "# config_hash=" << hash_string(hash) << ", seed=" << rec.seed << "\n";
    out << "step";
    for (int i = 0; i < rec.n; ++i) out << ",h_" << (i + 1);
    out << ",gts_phase,spread";
    std::vector<const std::vector<double>*> ref_cols;
    for (const auto& [name, series] : rec.references) {
        out << ",ref_" << name;
        ref_cols.push_back(&series);
    }
    out << "\n";

    char buf[32];
    std::string line;
    for (long k = 0; k < rec.horizon; k += stride) {
        line.clear();
        line += std::to_string(k);
        for (int i = 0; i < rec.n; ++i) {
            std::snprintf(buf, sizeof buf, ",%.16e", rec.h_at(k, i));
            line += buf;
        }
        std::snprintf(buf, sizeof buf, ",%.16e",
                      rec.gts_phase[static_cast<std::size_t>(k)]);
        line += buf;
        std::snprintf(buf, sizeof buf, ",%.16e",
                      rec.spread[static_cast<std::size_t>(k)]);
        line += buf;
        for (const auto* col : ref_cols) {
            std::snprintf(buf, sizeof buf, ",%.16e", (*col)[static_cast<std::size_t>(k)]);
            line += buf;
        }
        line += '\n';
        out << line;
    }
}

inline json gain_spec_json(const GainSpec& g) {
    return {{"gamma", g.gamma}, {"alpha", g.alpha}, {"period", g.period}};
}

inline json certificates_json(const GainReport& r) {
    json j;
    j["sync"] = {{"lambda_max", r.sync.lambda_max}, {"bound", r.sync.bound},
                 {"gamma", r.sync.gamma},           {"alpha", r.sync.alpha},
                 {"valid", r.sync.valid},           {"checked", r.sync_checked}};
    j["anchor"] = {{"bound", r.anchor.bound}, {"gamma", r.anchor.gamma},
                   {"alpha", r.anchor.alpha}, {"valid", r.anchor.valid},
                   {"checked", r.anchor_checked}};
    j["floating"] = {{"bound", r.floating.bound}, {"gamma", r.floating.gamma},
                     {"alpha", r.floating.alpha}, {"valid", r.floating.valid},
                     {"checked", r.floating_checked}};
    return j;
}

inline void write_meta_json(std::ostream& out, const ScenarioConfig& cfg,
                            const RunRecord& rec, std::uint64_t hash) {
    json j;
    j["config"] = scenario_to_json(cfg);
    j["config_hash"] = hash_string(hash);
    j["seed"] = rec.seed;
    j["n"] = rec.n;
    j["steps_per_period"] = rec.ell;
    j["horizon"] = rec.horizon;
    j["theta_star"] = rec.theta_star;
    j["gains"] = {{"sync", gain_spec_json(rec.sync_gain)},
                  {"anchor", gain_spec_json(rec.anchor_gain)},
                  {"float", gain_spec_json(rec.float_gain)}};
    j["certificates"] = certificates_json(rec.certificates);
    const auto vec_json = [](const Vec& v) {
        json a = json::array();
        for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
        return a;
    };
    if (rec.q_fast.size() > 0) j["q_fast"] = vec_json(rec.q_fast);
    if (rec.q_slow.size() > 0) j["q_slow"] = vec_json(rec.q_slow);
    j["mode_history"] = json::array();
    for (const auto& [step, mode] : rec.mode_history)
        j["mode_history"].push_back({{"step", step}, {"mode", to_string(mode)}});
    out << j.dump(2) << "\n";
}

// ============================================================================
// CSV reading (for the stability-analysis command)
// ============================================================================

struct CsvColumn {
    std::vector<double> values;
    std::string comment;  // first '#' line of the file, if any
};

inline CsvColumn read_csv_column(std::istream& in, const std::string& name) {
    CsvColumn col;
    std::string line;
    // Skip comments, keep the first one.
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            if (col.comment.empty()) col.comment = line;
            continue;
        }
        break;
    }
    if (line.empty() || line[0] == '#')
        throw FileError("csv: missing header line");
    std::vector<std::string> header;
    {
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, ',')) header.push_back(field);
    }
    std::ptrdiff_t target = -1;
    for (std::size_t i = 0; i < header.size(); ++i)
        if (header[i] == name) target = static_cast<std::ptrdiff_t>(i);
    if (target < 0) throw FileError("csv: column '" + name + "' not found");

    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        const char* p = line.c_str();
        const char* end = p + line.size();
        std::ptrdiff_t idx = 0;
        const char* field_start = p;
        double value = 0.0;
        bool found = false;
        while (true) {
            const char* comma = field_start;
            while (comma < end && *comma != ',') ++comma;
            if (idx == target) {
                value = std::strtod(field_start, nullptr);
                found = true;
                break;
            }
            if (comma == end) break;
            field_start = comma + 1;
            ++idx;
        }
        if (!found) throw FileError("csv: short row while reading '" + name + "'");
        col.values.push_back(value);
    }
    return col;
}

inline void write_avar_csv(std::ostream& out,
                           const std::vector<std::string>& labels,
                           const std::vector<std::vector<AvarPoint>>& curves,
                           const std::string& comment) {
    if (labels.size() != curves.size())
        throw std::invalid_argument("avar csv: label/curve mismatch");
    if (!comment.empty()) out << comment << "\n";
    out << "avg_time_s";
    for (const auto& l : labels) out << "," << l;
    out << "\n";
    const std::size_t rows = curves.empty() ? 0 : curves.front().size();
    for (const auto& c : curves)
        if (c.size() != rows)
            throw std::invalid_argument("avar csv: curves have different grids");
    char buf[32];
    for (std::size_t r = 0; r < rows; ++r) {
        std::snprintf(buf, sizeof buf, "%.16e", curves.front()[r].avg_time);
        out << buf;
        for (const auto& c : curves) {
            std::snprintf(buf, sizeof buf, ",%.16e", c[r].avar);
            out << buf;
        }
        out << "\n";
    }
}

// ============================================================================
// Bundled ensemble (Table I of the reference setup)
// ============================================================================

// Ten-clock ensemble with ring-plus-chord optical links, two GNSS anchor
// groups, one-second links and a 2000 s supervisory period.
inline ScenarioConfig table1_scenario() {
    ScenarioConfig cfg;
    const double s1[] = {3.31e-20, 0.887e-20, 1.51e-20, 1.93e-20, 9.33e-20,
                         1.31e-20, 3.87e-20, 5.26e-20, 0.981e-20, 3.39e-20};
    const double s2[] = {3.12e-26, 0.295e-26, 1.52e-26, 6.97e-26, 7.74e-26,
                         0.251e-26, 0.106e-26, 0.765e-26, 0.207e-26, 0.38e-26};
    for (int i = 0; i < 10; ++i) cfg.clocks.push_back({s1[i], s2[i]});
    cfg.edges = {{0, 1}, {1, 2}, {2, 3}, {3, 4}, {4, 5}, {5, 6}, {6, 7},
                 {7, 8}, {8, 9}, {0, 9}, {0, 4}, {1, 6}, {3, 8}};
    AnchorParams g1;
    g1.theta_star = 0.0;
    g1.noise = {1e-20, 1e-28};
    g1.attached = {0, 1};
    AnchorParams g2 = g1;
    g2.attached = {5, 6};
    cfg.anchors = {g1, g2};
    cfg.tau = 1.0;
    cfg.T = 2000.0;
    cfg.R = 1e-24;
    cfg.tree_root = 0;
    cfg.horizon = 100000;
    cfg.mode = RunMode::normal;
    return cfg;
}

}  // namespace tscale
