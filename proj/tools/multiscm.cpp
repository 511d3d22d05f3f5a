#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "multiscm/conformal.hpp"
#include "multiscm/diagnostics.hpp"
#include "multiscm/panel.hpp"
#include "multiscm/simlab.hpp"
#include "multiscm/weights.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mscm;

namespace {

std::string fmt(double v) {
    if (std::isnan(v)) return "";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write " + path.string());
    out << content;
}

struct CommonArgs {
    std::string input, config, out_dir = ".";
    std::uint64_t seed = 0;
    int jobs = 1;
};

void add_common(CLI::App* cmd, CommonArgs& a, bool need_input) {
    auto* in = cmd->add_option("--input", a.input, "panel CSV (unit,period,outcome,value)");
    auto* cf = cmd->add_option("--config", a.config, "JSON treatment config");
    if (need_input) { in->required(); cf->required(); }
    cmd->add_option("--out", a.out_dir, "output directory");
    cmd->add_option("--seed", a.seed, "RNG seed");
    cmd->add_option("--jobs", a.jobs, "parallel workers")->check(CLI::PositiveNumber);
}

PanelData load_input(const CommonArgs& a) {
    std::ifstream cf(a.config);
    if (!cf) throw ValidationError("cannot open config " + a.config);
    json j;
    try {
        j = json::parse(cf);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("bad config JSON: ") + e.what());
    }
    TreatmentConfig tc;
    if (!j.contains("treated_unit") || !j.contains("t0"))
        throw ValidationError("config needs keys treated_unit and t0");
    tc.treated_unit = j["treated_unit"].get<std::string>();
    tc.last_pre_period = j["t0"].is_string() ? j["t0"].get<std::string>()
                                             : std::to_string(j["t0"].get<long long>());
    if (j.contains("signs"))
        for (auto& [k, v] : j["signs"].items()) tc.signs[k] = v.get<double>();
    std::ifstream in(a.input);
    if (!in) throw ValidationError("cannot open panel " + a.input);
    return load_panel(in, tc);
}

ObjectiveSpec parse_objective(const PanelData& panel, const std::string& objective,
                              const std::string& nu_arg, int outcome_ix,
                              const SolverSettings& settings,
                              double* nu_used, bool* nu_degenerate) {
    ObjectiveSpec spec;
    if (objective == "separate") {
        spec = ObjectiveSpec::separate_k(outcome_ix);
    } else if (objective == "concatenated" || objective == "cat") {
        spec = ObjectiveSpec::concatenated();
    } else if (objective == "averaged" || objective == "avg") {
        spec = ObjectiveSpec::averaged();
    } else if (objective == "combined") {
        double nu;
        if (nu_arg == "heuristic") {
            const HeuristicNu h = heuristic_nu(panel, settings);
            nu = h.nu;
            if (nu_degenerate) *nu_degenerate = h.degenerate;
        } else {
            try {
                nu = std::stod(nu_arg);
            } catch (...) {
                throw ValidationError("--nu must be a number in [0,1] or 'heuristic'");
            }
        }
        if (nu < 0 || nu > 1) throw ValidationError("--nu must lie in [0,1]");
        spec = ObjectiveSpec::combined(nu);
        if (nu_used) *nu_used = nu;
    } else {
        throw ValidationError("unknown objective '" + objective + "'");
    }
    return spec;
}

std::string weights_csv(const PanelData& panel, const Eigen::VectorXd& gamma) {
    const auto donors = panel.donors();
    std::vector<std::pair<double, int>> rows;
    for (std::size_t d = 0; d < donors.size(); ++d)
        rows.push_back({gamma(static_cast<int>(d)), donors[d]});
    std::stable_sort(rows.begin(), rows.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    std::ostringstream os;
    os << "donor,weight\n";
    for (const auto& [w, i] : rows)
        os << panel.units()[i] << ',' << fmt(w) << '\n';
    return os.str();
}

std::string gaps_csv(const PanelData& panel, const GapSeries& series) {
    std::ostringstream os;
    os << "outcome,period,observed,counterfactual,gap,is_post\n";
    for (const auto& g : series)
        os << panel.outcomes()[g.outcome] << ',' << panel.periods()[g.period] << ','
           << fmt(g.observed) << ',' << fmt(g.counterfactual) << ',' << fmt(g.gap)
           << ',' << (g.is_post ? 1 : 0) << '\n';
    return os.str();
}

std::string imbalance_csv(const PanelData& panel, const FitResult& f,
                          double nu_used, bool have_nu) {
    std::ostringstream os;
    os << "measure,outcome,value\n";
    for (int k = 0; k < panel.n_outcomes(); ++k)
        os << "q_sep," << panel.outcomes()[k] << ',' << fmt(f.q_sep(k)) << '\n';
    os << "q_cat,," << fmt(f.q_cat) << '\n';
    os << "q_avg,," << fmt(f.q_avg) << '\n';
    if (have_nu) os << "nu,," << fmt(nu_used) << '\n';
    return os.str();
}

int cmd_fit(const CommonArgs& a, const std::string& objective, const std::string& nu_arg,
            const std::string& outcome, double tol, long max_iter,
            bool allow_nonconverged) {
    const PanelData panel = load_input(a);
    SolverSettings settings;
    settings.tol = tol;
    settings.max_iter = max_iter;

    int outcome_ix = 0;
    if (!outcome.empty()) {
        const auto& names = panel.outcomes();
        const auto it = std::find(names.begin(), names.end(), outcome);
        if (it == names.end()) throw ValidationError("unknown outcome '" + outcome + "'");
        outcome_ix = static_cast<int>(it - names.begin());
    }
    double nu_used = 0;
    bool nu_degenerate = false;
    const ObjectiveSpec spec = parse_objective(panel, objective, nu_arg, outcome_ix,
                                               settings, &nu_used, &nu_degenerate);
    const FitResult f = fit(panel, spec, settings);
    if (!f.solution.converged && !allow_nonconverged)
        throw NumericalError("solver did not converge (gap " +
                             std::to_string(f.solution.gap) + "); pass --allow-nonconverged to keep");

    fs::create_directories(a.out_dir);
    const fs::path out(a.out_dir);
    write_file(out / "weights.csv", weights_csv(panel, f.solution.gamma));
    write_file(out / "imbalance.csv",
               imbalance_csv(panel, f, nu_used, spec.kind == ObjectiveKind::combined));
    write_file(out / "gaps.csv", gaps_csv(panel, gaps(panel, f.solution.gamma, f.state)));

    json s;
    s["objective"] = objective_name(spec.kind);
    if (spec.kind == ObjectiveKind::combined) {
        s["nu"] = nu_used;
        s["nu_source"] = nu_arg == "heuristic" ? "heuristic" : "given";
        if (nu_degenerate) s["nu_warning"] = "perfect concatenated fit; nu forced to 1";
    }
    if (spec.kind == ObjectiveKind::separate) s["outcome"] = panel.outcomes()[outcome_ix];
    s["q_cat"] = f.q_cat;
    s["q_avg"] = f.q_avg;
    s["converged"] = f.solution.converged;
    s["gap"] = f.solution.gap;
    s["iterations"] = f.solution.iterations;
    write_file(out / "summary.json", s.dump(2) + "\n");
    std::cout << "fit: " << objective_name(spec.kind)
              << " q_cat=" << fmt(f.q_cat) << " q_avg=" << fmt(f.q_avg);
    if (spec.kind == ObjectiveKind::combined) std::cout << " nu=" << fmt(nu_used);
    std::cout << "\n";
    return 0;
}

int cmd_diagnose(const CommonArgs& a, double nu, bool raw_spectrum) {
    const PanelData panel = load_input(a);
    fs::create_directories(a.out_dir);
    const fs::path out(a.out_dir);

    const SpectrumReport sp = spectrum(panel, raw_spectrum, MatrixKind::concatenated);
    {
        std::ostringstream os;
        os << "index,singular_value,cumulative_share\n";
        for (int i = 0; i < sp.singular_values.size(); ++i)
            os << (i + 1) << ',' << fmt(sp.singular_values(i)) << ','
               << fmt(sp.cumulative_shares(i)) << '\n';
        write_file(out / "spectrum.csv", os.str());
    }
    if (panel.n_outcomes() < 2)
        throw ValidationError("diagnose requires K >= 2 outcomes for the hold-out check");
    const HoldoutReport ho = holdout_fit(panel, nu);
    {
        std::ostringstream os;
        os << "outcome,mspe,uniform_mspe,ratio\n";
        for (const auto& e : ho)
            os << panel.outcomes()[e.focal_outcome] << ',' << fmt(e.mspe) << ','
               << fmt(e.uniform_mspe) << ',' << fmt(e.ratio) << '\n';
        write_file(out / "holdout.csv", os.str());
    }
    const auto front = frontier(panel, default_nu_grid());
    {
        std::ostringstream os;
        os << "nu,q_avg,q_cat\n";
        for (const auto& p : front)
            os << fmt(p.nu) << ',' << fmt(p.q_avg) << ',' << fmt(p.q_cat) << '\n';
        write_file(out / "frontier.csv", os.str());
    }
    const ConditionRatio cr = condition_ratio(panel);
    {
        std::ostringstream os;
        os << "percent_increase,infinite\n"
           << (cr.infinite ? "" : fmt(cr.percent_increase)) << ','
           << (cr.infinite ? 1 : 0) << '\n';
        write_file(out / "condition.csv", os.str());
    }
    json s;
    s["top_singular_share"] = sp.cumulative_shares(0);
    s["holdout_nu"] = nu;
    s["condition_percent_increase"] =
        cr.infinite ? json() : json(cr.percent_increase);
    write_file(out / "summary.json", s.dump(2) + "\n");
    std::cout << "diagnose: top share " << fmt(sp.cumulative_shares(0)) << "\n";
    return 0;
}

int cmd_infer(const CommonArgs& a, const std::string& objective, const std::string& nu_arg,
              const std::string& q_arg, const std::string& scheme_arg, double alpha,
              const std::string& period, bool joint, const std::string& tau0_arg,
              const std::string& avg_grid) {
    const PanelData panel = load_input(a);
    SolverSettings settings;
    const double q_order = (q_arg == "inf" || q_arg == "Inf")
        ? std::numeric_limits<double>::infinity() : std::stod(q_arg);
    const PermScheme scheme = scheme_arg == "iid" ? PermScheme::iid
        : scheme_arg == "moving-block" ? PermScheme::moving_block
        : throw ValidationError("--scheme must be iid or moving-block");

    NullSpec null;
    null.tau0 = Eigen::VectorXd::Zero(panel.n_outcomes());
    if (!tau0_arg.empty() && tau0_arg != "zero") {
        std::istringstream ss(tau0_arg);
        std::string tok;
        int k = 0;
        while (std::getline(ss, tok, ',')) {
            if (k >= panel.n_outcomes()) throw ValidationError("too many --tau0 values");
            null.tau0(k++) = std::stod(tok);
        }
        if (k != panel.n_outcomes())
            throw ValidationError("--tau0 needs one value per outcome");
    }

    double nu_used = 0;
    const ObjectiveSpec spec = parse_objective(panel, objective, nu_arg, 0,
                                               settings, &nu_used, nullptr);
    fs::create_directories(a.out_dir);
    const fs::path out(a.out_dir);
    std::ostringstream os;
    os << "null,period_set,q,scheme,statistic,p\n";
    json s;

    if (!avg_grid.empty()) {
        double lo, hi, step;
        if (std::sscanf(avg_grid.c_str(), "%lf:%lf:%lf", &lo, &hi, &step) != 3 || step <= 0)
            throw ValidationError("--avg-grid expects lo:hi:step");
        std::vector<double> grid;
        for (double v = lo; v <= hi + 1e-12; v += step) grid.push_back(v);
        const AvgEffectInterval iv = avg_effect_interval(panel, grid, alpha, q_order);
        std::ostringstream gs;
        gs << "tau0,p\n";
        for (std::size_t i = 0; i < iv.grid.size(); ++i)
            gs << fmt(iv.grid[i]) << ',' << fmt(iv.p_values[i]) << '\n';
        write_file(out / "avg_effect_grid.csv", gs.str());
        s["avg_effect_interval"] = iv.empty
            ? json({{"empty", true}})
            : json({{"empty", false}, {"lo", iv.lo}, {"hi", iv.hi}});
    } else if (joint) {
        const TestResult r = test_null_joint(panel, spec, null, q_order, scheme, a.seed);
        os << "tau0=" << (tau0_arg.empty() ? "zero" : tau0_arg) << ",post-block,"
           << q_arg << ',' << scheme_arg << ',' << fmt(r.post_stat) << ','
           << fmt(r.p_value) << '\n';
        s["joint_p"] = r.p_value;
        if (r.coarse_blocks) s["warning"] = "post block longer than half the sample";
        std::cout << "infer: joint p=" << fmt(r.p_value) << "\n";
    } else {
        std::vector<int> targets;
        if (period == "all") {
            for (int t = panel.t0(); t < panel.n_periods(); ++t) targets.push_back(t);
        } else if (period == "last" || period.empty()) {
            targets.push_back(panel.n_periods() - 1);
        } else {
            const auto& ps = panel.periods();
            const auto it = std::find(ps.begin(), ps.end(), period);
            if (it == ps.end()) throw ValidationError("unknown period '" + period + "'");
            targets.push_back(static_cast<int>(it - ps.begin()));
        }
        json per = json::array();
        for (int t : targets) {
            NullSpec n1 = null;
            n1.target_period = t;
            const TestResult r = test_null(panel, spec, n1, q_order, settings);
            os << "tau0=" << (tau0_arg.empty() ? "zero" : tau0_arg) << ','
               << panel.periods()[t] << ',' << q_arg << ",iid,"
               << fmt(r.post_stat) << ',' << fmt(r.p_value) << '\n';
            per.push_back({{"period", panel.periods()[t]}, {"p", r.p_value}});
            std::cout << "infer: period " << panel.periods()[t]
                      << " p=" << fmt(r.p_value) << "\n";
        }
        s["per_period"] = per;
    }
    s["q"] = q_arg;
    s["alpha"] = alpha;
    if (spec.kind == ObjectiveKind::combined) s["nu"] = nu_used;
    write_file(out / "tests.csv", os.str());
    write_file(out / "summary.json", s.dump(2) + "\n");
    return 0;
}

DgpConfig preset_config(const std::string& preset) {
    DgpConfig c;
    if (preset.empty()) return c;
    static const std::map<std::string, std::tuple<double, int, int>> presets = [] {
        std::map<std::string, std::tuple<double, int, int>> m;
        for (int rho = 0; rho <= 1; ++rho)
            for (int t0 : {10, 40})
                for (int k : {4, 10}) {
                    std::string name = "appendix-c-rho" + std::to_string(rho) +
                        "-t" + std::to_string(t0) + "-k" + std::to_string(k);
                    m[name] = {static_cast<double>(rho), t0, k};
                }
        m["appendix-c-rho1"] = {1.0, 10, 10};
        m["appendix-c-rho0"] = {0.0, 10, 10};
        return m;
    }();
    const auto it = presets.find(preset);
    if (it == presets.end()) {
        std::string known;
        for (const auto& [k, v] : presets) known += " " + k;
        throw ValidationError("unknown preset '" + preset + "'; known:" + known);
    }
    c.rho = std::get<0>(it->second);
    c.t0 = std::get<1>(it->second);
    c.k = std::get<2>(it->second);
    return c;
}

int cmd_simulate(const CommonArgs& a, const std::string& preset, long reps,
                 double rho, int t0, int k, double sigma, bool write_panel) {
    DgpConfig c = preset_config(preset);
    if (rho >= 0) c.rho = rho;
    if (t0 > 0) c.t0 = t0;
    if (k > 0) c.k = k;
    if (sigma >= 0) c.noise_sigma = sigma;
    c.seed = a.seed;
    c.validate();

    const StudyResult res = run_study(c, reps, a.jobs);
    fs::create_directories(a.out_dir);
    const fs::path out(a.out_dir);
    static const char* est[3] = {"separate", "concatenated", "averaged"};
    {
        std::ostringstream os;
        os << "rep,estimator,bias,imbalance\n";
        for (std::size_t r = 0; r < res.reps.size(); ++r) {
            if (!res.reps[r].ok) continue;
            for (int e = 0; e < 3; ++e)
                os << r << ',' << est[e] << ',' << fmt(res.reps[r].bias[e]) << ','
                   << fmt(res.reps[r].imbalance[e]) << '\n';
        }
        write_file(out / "replications.csv", os.str());
    }
    {
        std::ostringstream os;
        os << "estimator,metric,mean,mean_abs,min,q25,median,q75,max\n";
        for (int e = 0; e < 3; ++e) {
            const Summary* ss[2] = {&res.bias_summary[e], &res.imbalance_summary[e]};
            const char* metric[2] = {"bias", "imbalance"};
            for (int m = 0; m < 2; ++m)
                os << est[e] << ',' << metric[m] << ',' << fmt(ss[m]->mean) << ','
                   << fmt(ss[m]->mean_abs) << ',' << fmt(ss[m]->min) << ','
                   << fmt(ss[m]->q25) << ',' << fmt(ss[m]->median) << ','
                   << fmt(ss[m]->q75) << ',' << fmt(ss[m]->max) << '\n';
        }
        write_file(out / "summary.csv", os.str());
    }
    if (write_panel) {
        const Generated g = generate(c, 0);
        std::ostringstream os;
        emit_panel(os, g.panel);
        write_file(out / "panel_rep0.csv", os.str());
        json pc;
        pc["treated_unit"] = g.panel.units()[g.panel.treated()];
        pc["t0"] = g.panel.periods()[g.panel.t0() - 1];
        write_file(out / "config_rep0.json", pc.dump(2) + "\n");
    }
    json s;
    s["preset"] = preset.empty() ? json() : json(preset);
    s["rho"] = c.rho;
    s["t0"] = c.t0;
    s["k"] = c.k;
    s["sigma"] = c.noise_sigma;
    s["reps"] = reps;
    s["failed"] = res.failed;
    for (int e = 0; e < 3; ++e)
        s["mean_abs_bias"][est[e]] = res.bias_summary[e].mean_abs;
    write_file(out / "summary.json", s.dump(2) + "\n");
    std::cout << "simulate: mean|bias| sep=" << fmt(res.bias_summary[0].mean_abs)
              << " cat=" << fmt(res.bias_summary[1].mean_abs)
              << " avg=" << fmt(res.bias_summary[2].mean_abs) << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Synthetic control with multiple outcomes"};
    app.require_subcommand(1);

    CommonArgs fit_args, diag_args, infer_args, sim_args;
    std::string objective = "combined", nu_arg = "heuristic", outcome;
    double tol = 1e-10;
    long max_iter = 100000;
    bool allow_nonconverged = false;

    auto* fit_cmd = app.add_subcommand("fit", "estimate donor weights and gaps");
    add_common(fit_cmd, fit_args, true);
    fit_cmd->add_option("--objective", objective, "separate|concatenated|averaged|combined");
    fit_cmd->add_option("--nu", nu_arg, "combined weight in [0,1], or 'heuristic'");
    fit_cmd->add_option("--outcome", outcome, "outcome label for --objective separate");
    fit_cmd->add_option("--tol", tol, "solver gap tolerance");
    fit_cmd->add_option("--max-iter", max_iter, "solver iteration cap");
    fit_cmd->add_flag("--allow-nonconverged", allow_nonconverged);

    double diag_nu = 0.5;
    bool raw_spectrum = false;
    auto* diag_cmd = app.add_subcommand("diagnose", "low-rank and sensitivity diagnostics");
    add_common(diag_cmd, diag_args, true);
    diag_cmd->add_option("--nu", diag_nu, "combined weight for hold-out fits");
    diag_cmd->add_flag("--raw-spectrum", raw_spectrum, "spectrum of the raw matrix");

    std::string infer_objective = "combined", infer_nu = "heuristic";
    std::string q_arg = "1", scheme_arg = "moving-block", period, tau0_arg, avg_grid;
    double alpha = 0.1;
    bool joint = false;
    auto* infer_cmd = app.add_subcommand("infer", "conformal tests");
    add_common(infer_cmd, infer_args, true);
    infer_cmd->add_option("--objective", infer_objective);
    infer_cmd->add_option("--nu", infer_nu);
    infer_cmd->add_option("--q", q_arg, "norm order (>=1 or inf)");
    infer_cmd->add_option("--scheme", scheme_arg, "iid|moving-block (joint test)");
    infer_cmd->add_option("--alpha", alpha, "test level");
    infer_cmd->add_option("--period", period, "post period label, 'last', or 'all'");
    infer_cmd->add_option("--null", tau0_arg, "'zero' or comma-separated tau0 per outcome");
    infer_cmd->add_option("--tau0", tau0_arg, "alias of --null");
    infer_cmd->add_flag("--joint", joint, "joint test over all post periods");
    infer_cmd->add_option("--avg-grid", avg_grid, "lo:hi:step grid for the average-effect interval");

    std::string preset;
    long reps = 1000;
    double sim_rho = -1, sim_sigma = -1;
    int sim_t0 = 0, sim_k = 0;
    bool write_panel = false;
    auto* sim_cmd = app.add_subcommand("simulate", "Monte Carlo bias studies");
    add_common(sim_cmd, sim_args, false);
    sim_cmd->add_option("--preset", preset, "e.g. appendix-c-rho1, appendix-c-rho0-t40-k4");
    sim_cmd->add_option("--reps", reps)->check(CLI::PositiveNumber);
    sim_cmd->add_option("--rho", sim_rho);
    sim_cmd->add_option("--t0", sim_t0);
    sim_cmd->add_option("--k", sim_k);
    sim_cmd->add_option("--sigma", sim_sigma);
    sim_cmd->add_flag("--write-panel", write_panel, "emit rep-0 panel and config");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (fit_cmd->parsed())
            return cmd_fit(fit_args, objective, nu_arg, outcome, tol, max_iter,
                           allow_nonconverged);
        if (diag_cmd->parsed()) return cmd_diagnose(diag_args, diag_nu, raw_spectrum);
        if (infer_cmd->parsed())
            return cmd_infer(infer_args, infer_objective, infer_nu, q_arg, scheme_arg,
                             alpha, period, joint, tau0_arg, avg_grid);
        if (sim_cmd->parsed())
            return cmd_simulate(sim_args, preset, reps, sim_rho, sim_t0, sim_k,
                                sim_sigma, write_panel);
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 2;
}
