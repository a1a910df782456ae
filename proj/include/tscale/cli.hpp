#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <future>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "tscale/scenario_io.hpp"

namespace tscale {

namespace cli_detail {

namespace fs = std::filesystem;

inline std::vector<double> clock_column(const RunRecord& rec, int i) {
    std::vector<double> out(static_cast<std::size_t>(rec.horizon));
    for (long k = 0; k < rec.horizon; ++k)
        out[static_cast<std::size_t>(k)] = rec.h_at(k, i);
    return out;
}

inline std::string hash_comment(std::uint64_t hash, std::uint64_t seed) {
    std::ostringstream ss;
    ss << "# config_hash=" << hash_string(hash) << ", seed=" << seed;
    return ss.str();
}

inline void intensities(const ScenarioConfig& cfg, std::vector<double>& s1,
                        std::vector<double>& s2) {
    s1.clear();
    s2.clear();
    for (const auto& c : cfg.clocks) {
        s1.push_back(c.sigma1_sq);
        s2.push_back(c.sigma2_sq);
    }
}

inline std::vector<std::uint64_t> parse_seed_range(const std::string& s) {
    try {
        const auto pos = s.find("..");
        if (pos == std::string::npos) return {std::stoull(s)};
        const std::uint64_t a = std::stoull(s.substr(0, pos));
        const std::uint64_t b = std::stoull(s.substr(pos + 2));
        if (b < a) throw ScenarioError("seed range end precedes start: " + s);
        if (b - a >= 100000) throw ScenarioError("seed range too large: " + s);
        std::vector<std::uint64_t> seeds;
        for (std::uint64_t v = a; v <= b; ++v) seeds.push_back(v);
        return seeds;
    } catch (const std::invalid_argument&) {
        throw ScenarioError("invalid seed range '" + s + "', expected a..b");
    } catch (const std::out_of_range&) {
        throw ScenarioError("invalid seed range '" + s + "', expected a..b");
    }
}

inline json weighting_json(const Vec& q) {
    json a = json::array();
    for (Eigen::Index i = 0; i < q.size(); ++i) a.push_back(q(i));
    return a;
}

inline int cmd_simulate(const std::string& config_path, std::uint64_t seed,
                        const std::string& seeds_range, const std::string& out_dir,
                        std::ostream& out) {
    if (!fs::exists(config_path))
        throw FileError("config file not found: " + config_path);
    const ScenarioConfig cfg = load_scenario_file(config_path);
    const std::uint64_t hash = config_hash(cfg);
    std::vector<std::uint64_t> seeds =
        seeds_range.empty() ? std::vector<std::uint64_t>{seed}
                            : parse_seed_range(seeds_range);
    const bool multi = seeds.size() > 1;
    fs::create_directories(out_dir);

    const auto run_one = [&](std::uint64_t s) -> fs::path {
        ScenarioConfig c = cfg;
        c.seed = s;
        const RunRecord rec = run_scenario(c);
        fs::path dir = out_dir;
        if (multi) {
            dir /= "seed_" + std::to_string(s);
            fs::create_directories(dir);
        }
        std::ofstream csv(dir / "run.csv");
        if (!csv) throw FileError("cannot write " + (dir / "run.csv").string());
        write_run_csv(csv, rec, hash);
        std::ofstream meta(dir / "meta.json");
        if (!meta) throw FileError("cannot write " + (dir / "meta.json").string());
        write_meta_json(meta, c, rec, hash);
        return dir;
    };

    if (!multi) {
        const fs::path dir = run_one(seeds.front());
        out << "wrote " << (dir / "run.csv").string() << " and "
            << (dir / "meta.json").string() << "\n";
        return 0;
    }
    const std::size_t workers =
        std::max<std::size_t>(1, std::thread::hardware_concurrency());
    for (std::size_t start = 0; start < seeds.size(); start += workers) {
        std::vector<std::future<fs::path>> batch;
        const std::size_t stop = std::min(start + workers, seeds.size());
        for (std::size_t i = start; i < stop; ++i)
            batch.push_back(std::async(std::launch::async, run_one, seeds[i]));
        for (auto& f : batch) f.get();
    }
    out << "wrote " << seeds.size() << " runs under " << out_dir << "\n";
    return 0;
}

inline int cmd_avar(const std::string& input, const std::string& column,
                    double tau, std::ostream& out) {
    if (!(tau > 0.0)) throw ScenarioError("tau must be positive");
    if (!fs::exists(input)) throw FileError("input file not found: " + input);
    std::ifstream in(input);
    if (!in) throw FileError("cannot open " + input);
    const CsvColumn col = read_csv_column(in, column);
    if (col.values.size() < 203)
        throw FileError("short series: need at least 203 samples, got " +
                        std::to_string(col.values.size()));
    const auto curve = avar_curve(col.values, tau, 200);
    write_avar_csv(out, {"avar"}, {curve}, col.comment);
    return 0;
}

inline int cmd_weights(const std::string& config_path, double avg_time,
                       std::ostream& out) {
    if (!fs::exists(config_path))
        throw FileError("config file not found: " + config_path);
    if (!(avg_time > 0.0) || !std::isfinite(avg_time))
        throw ScenarioError("averaging time must be positive and finite");
    const ScenarioConfig cfg = load_scenario_file(config_path);
    std::vector<double> s1, s2;
    intensities(cfg, s1, s2);
    const WeightingVector q = optimal_weight(s1, s2, avg_time);
    const auto [q0, qinf] = weight_limits(s1, s2);
    json j;
    j["avg_time_s"] = avg_time;
    j["q"] = weighting_json(q.q);
    j["q0"] = weighting_json(q0.q);
    j["qinf"] = weighting_json(qinf.q);
    out << j.dump(2) << "\n";
    return 0;
}

inline int cmd_validate(const std::string& config_path, std::ostream& out) {
    if (!fs::exists(config_path))
        throw FileError("config file not found: " + config_path);
    ScenarioConfig cfg = load_scenario_file(config_path);
    // Force the synchronization certificate to be evaluated even for a
    // free-running configuration; the two broadcast certificates are always
    // computed during resolution.
    if (cfg.mode == RunMode::free_run) cfg.mode = RunMode::sync_only;
    GainReport report;
    try {
        report = resolve_scenario(cfg).certificates;
    } catch (const CertificateError& e) {
        report = e.report;
    }
    out << certificates_json(report).dump(2) << "\n";
    const bool ok =
        report.sync.valid && report.anchor.valid && report.floating.valid;
    return ok ? 0 : 2;
}

inline void write_record_file(const fs::path& path, const RunRecord& rec,
                              std::uint64_t hash, long stride, std::ostream& out) {
    std::ofstream f(path);
    if (!f) throw FileError("cannot write " + path.string());
    write_run_csv(f, rec, hash, stride);
    out << "wrote " << path.string() << "\n";
}

inline int cmd_reproduce(const std::string& figure, const std::string& scale,
                         const std::string& out_dir, std::ostream& out) {
    if (scale != "desk" && scale != "full")
        throw ScenarioError("unknown scale '" + scale + "', expected desk or full");
    const long h_long = scale == "full" ? 10000000L : 1000000L;
    fs::create_directories(out_dir);
    const fs::path dir = out_dir;

    ScenarioConfig base = table1_scenario();
    base.record_inputs = false;
    base.record_noise = false;
    const long tick = std::llround(base.T / base.tau);
    std::vector<double> s1, s2;
    intensities(base, s1, s2);

    if (figure == "fig3") {
        ScenarioConfig c = base;
        c.seed = 301;
        c.horizon = 100000;
        c.mode = RunMode::sync_only;
        write_record_file(dir / "fig3_sync.csv", run_scenario(c), config_hash(c), 1, out);
        c.mode = RunMode::free_run;
        write_record_file(dir / "fig3_free.csv", run_scenario(c), config_hash(c), 1, out);
    } else if (figure == "fig4") {
        ScenarioConfig c = base;
        c.seed = 304;
        c.horizon = h_long;
        c.mode = RunMode::normal;
        write_record_file(dir / "fig4_anchored.csv", run_scenario(c), config_hash(c),
                          tick, out);
        c.mode = RunMode::free_run;
        write_record_file(dir / "fig4_free.csv", run_scenario(c), config_hash(c),
                          tick, out);
    } else if (figure == "fig6") {
        const auto [q0, qinf] = weight_limits(s1, s2);
        ScenarioConfig cf = base;
        cf.seed = 306;
        cf.horizon = h_long;
        cf.mode = RunMode::free_run;
        cf.reference_weights = {{"phi_q0", q0.q}, {"phi_qinf", qinf.q}};
        std::vector<AvarPoint> fr, p0, pinf;
        {
            const RunRecord rec = run_scenario(cf);
            fr = avar_curve(clock_column(rec, 0), cf.tau, 200);
            p0 = avar_curve(rec.references.at("phi_q0"), cf.tau, 200);
            pinf = avar_curve(rec.references.at("phi_qinf"), cf.tau, 200);
        }
        ScenarioConfig cs = base;
        cs.seed = 306;
        cs.horizon = h_long;
        cs.mode = RunMode::sync_only;
        std::vector<AvarPoint> ds;
        {
            const RunRecord rec = run_scenario(cs);
            ds = avar_curve(clock_column(rec, 0), cs.tau, 200);
        }
        std::ofstream f(dir / "fig6_avar.csv");
        if (!f) throw FileError("cannot write fig6_avar.csv");
        write_avar_csv(f, {"fr", "ds", "phi_q0", "phi_qinf"}, {fr, ds, p0, pinf},
                       hash_comment(config_hash(cf), 306));
        out << "wrote " << (dir / "fig6_avar.csv").string() << "\n";
    } else if (figure == "fig7") {
        ScenarioConfig c = base;
        c.seed = 307;
        c.mode = RunMode::emergency;
        c.horizon = 100000;
        write_record_file(dir / "fig7_short.csv", run_scenario(c), config_hash(c), 1,
                          out);
        c.horizon = h_long;
        write_record_file(dir / "fig7_long.csv", run_scenario(c), config_hash(c),
                          tick, out);
    } else if (figure == "fig8") {
        const WeightingVector q_slow = optimal_weight(s1, s2, base.T);
        ScenarioConfig ce = base;
        ce.seed = 308;
        ce.horizon = h_long;
        ce.mode = RunMode::emergency;
        ce.reference_weights = {{"phi_qT", q_slow.q}};
        std::vector<AvarPoint> ds_of, phi_qt;
        {
            const RunRecord rec = run_scenario(ce);
            ds_of = avar_curve(clock_column(rec, 0), ce.tau, 200);
            phi_qt = avar_curve(rec.references.at("phi_qT"), ce.tau, 200);
        }
        ScenarioConfig cs = base;
        cs.seed = 308;
        cs.horizon = h_long;
        cs.mode = RunMode::sync_only;
        std::vector<AvarPoint> ds;
        {
            const RunRecord rec = run_scenario(cs);
            ds = avar_curve(clock_column(rec, 0), cs.tau, 200);
        }
        std::vector<AvarPoint> analytic;
        for (const auto& p : ds_of)
            analytic.push_back(
                {p.m, p.avg_time, avar_analytic(q_slow, s1, s2, p.avg_time)});
        std::ofstream f(dir / "fig8_avar.csv");
        if (!f) throw FileError("cannot write fig8_avar.csv");
        write_avar_csv(f, {"ds_of", "ds", "phi_qT", "phi_qT_analytic"},
                       {ds_of, ds, phi_qt, analytic},
                       hash_comment(config_hash(ce), 308));
        out << "wrote " << (dir / "fig8_avar.csv").string() << "\n";
    } else {
        throw ScenarioError("unknown figure '" + figure +
                            "', expected fig3|fig4|fig6|fig7|fig8");
    }
    return 0;
}

}  // namespace cli_detail

inline int run_cli(const std::vector<std::string>& args, std::ostream& out,
                   std::ostream& err) {
    CLI::App app{"Distributed time-scale ensemble simulator", "tscale"};
    app.require_subcommand(1);

    std::string config_path, out_dir, seeds_range, input_path, column;
    std::string figure, scale = "desk";
    std::uint64_t seed = 0;
    double tau = 1.0, avg_time = 0.0;

    auto* sim = app.add_subcommand("simulate", "Run a scenario and write CSV + metadata");
    sim->add_option("--config", config_path, "Scenario JSON file")->required();
    sim->add_option("--seed", seed, "Master seed (default 0)");
    sim->add_option("--seeds", seeds_range, "Seed sweep a..b, runs in parallel");
    sim->add_option("--out", out_dir, "Output directory")->required();

    auto* av = app.add_subcommand("avar", "Stability curve of one CSV column");
    av->add_option("--input", input_path, "Run CSV file")->required();
    av->add_option("--column", column, "Column name, e.g. h_1 or gts_phase")->required();
    av->add_option("--tau", tau, "Sample spacing in seconds (default 1)");

    auto* wt = app.add_subcommand("weights", "Optimal ensemble weights for an averaging time");
    wt->add_option("--config", config_path, "Scenario JSON file")->required();
    wt->add_option("--avg-time", avg_time, "Averaging time in seconds")->required();

    auto* va = app.add_subcommand("validate", "Evaluate all gain certificates");
    va->add_option("--config", config_path, "Scenario JSON file")->required();

    auto* rp = app.add_subcommand("reproduce", "Regenerate bundled study data sets");
    rp->add_option("--figure", figure, "One of fig3|fig4|fig6|fig7|fig8")->required();
    rp->add_option("--scale", scale, "desk (default) or full");
    rp->add_option("--out", out_dir, "Output directory")->required();

    try {
        std::vector<std::string> rev(args.rbegin(), args.rend());
        app.parse(rev);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 2;
    }

    try {
        if (sim->parsed())
            return cli_detail::cmd_simulate(config_path, seed, seeds_range, out_dir, out);
        if (av->parsed()) return cli_detail::cmd_avar(input_path, column, tau, out);
        if (wt->parsed()) return cli_detail::cmd_weights(config_path, avg_time, out);
        if (va->parsed()) return cli_detail::cmd_validate(config_path, out);
        if (rp->parsed()) return cli_detail::cmd_reproduce(figure, scale, out_dir, out);
    } catch (const CertificateError& e) {
        err << "error: " << e.what() << "\n"
            << certificates_json(e.report).dump(2) << "\n";
        return 2;
    } catch (const FileError& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const ScenarioError& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
    err << "error: no subcommand given\n";
    return 2;
}

}  // namespace tscale
