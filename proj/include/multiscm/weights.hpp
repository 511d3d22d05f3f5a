#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "multiscm/panel.hpp"
#include "multiscm/simplex_qp.hpp"

namespace mscm {

enum class ObjectiveKind { separate, concatenated, averaged, combined };

struct ObjectiveSpec {
    ObjectiveKind kind = ObjectiveKind::concatenated;
    int outcome = 0;                 // separate only
    double nu = 0.5;                 // combined only
    std::vector<int> extra_periods;  // post periods folded into the fit (conformal refits)

    static ObjectiveSpec separate_k(int k) { return {ObjectiveKind::separate, k, 0.5, {}}; }
    static ObjectiveSpec concatenated() { return {ObjectiveKind::concatenated, 0, 0.5, {}}; }
    static ObjectiveSpec averaged() { return {ObjectiveKind::averaged, 0, 0.5, {}}; }
    static ObjectiveSpec combined(double nu) { return {ObjectiveKind::combined, 0, nu, {}}; }
};

inline const char* objective_name(ObjectiveKind k) {
    switch (k) {
        case ObjectiveKind::separate: return "separate";
        case ObjectiveKind::concatenated: return "concatenated";
        case ObjectiveKind::averaged: return "averaged";
        case ObjectiveKind::combined: return "combined";
    }
    return "?";
}

namespace detail {

/// Periods entering the fit: all pre periods plus any requested post periods.
inline std::vector<int> fit_periods(const PanelData& p, const ObjectiveSpec& spec) {
    std::vector<int> ts;
    ts.reserve(p.t0() + spec.extra_periods.size());
    for (int t = 0; t < p.t0(); ++t) ts.push_back(t);
    for (int t : spec.extra_periods) {
        if (t < p.t0() || t >= p.n_periods())
            throw ValidationError("extra fit period index out of post-treatment range");
        ts.push_back(t);
    }
    return ts;
}

/// Across-outcome mean at (i, t) over non-missing outcomes; NaN if none.
inline double outcome_average(const PanelData& p, int i, int t) {
    double s = 0;
    int n = 0;
    for (int k = 0; k < p.n_outcomes(); ++k) {
        const double v = p.value(i, t, k);
        if (!is_missing(v)) { s += v; ++n; }
    }
    return n ? s / n : kMissing;
}

struct RowSet {
    std::vector<Eigen::VectorXd> donor_rows; // each length N0
    std::vector<double> targets;
};

/// One balance row per kept (t[,k]) term; rows with a missing treated or
/// donor value are dropped (normalizing count shrinks with them).
inline RowSet collect_rows(const PanelData& p, const ObjectiveSpec& spec, bool averaged_rows) {
    const auto donors = p.donors();
    RowSet rs;
    for (int t : fit_periods(p, spec)) {
        const int kmax = averaged_rows ? 1
                         : (spec.kind == ObjectiveKind::separate ? 1 : p.n_outcomes());
        for (int kk = 0; kk < kmax; ++kk) {
            const int k = (spec.kind == ObjectiveKind::separate) ? spec.outcome : kk;
            double y1 = averaged_rows ? outcome_average(p, p.treated(), t)
                                      : p.value(p.treated(), t, k);
            if (is_missing(y1)) continue;
            Eigen::VectorXd row(static_cast<int>(donors.size()));
            bool ok = true;
            for (std::size_t d = 0; d < donors.size(); ++d) {
                const double v = averaged_rows ? outcome_average(p, donors[d], t)
                                               : p.value(donors[d], t, k);
                if (is_missing(v)) { ok = false; break; }
                row(static_cast<int>(d)) = v;
            }
            if (!ok) continue;
            rs.donor_rows.push_back(std::move(row));
            rs.targets.push_back(y1);
        }
    }
    return rs;
}

} // namespace detail

/// Assemble the least-squares problem for one objective from a transformed
/// panel. Row weights carry the objective's normalization, so the solver's
/// squared objective equals the corresponding squared q.
inline QpProblem build_objective(const PanelData& panel, const ObjectiveSpec& spec) {
    if (spec.kind == ObjectiveKind::separate &&
        (spec.outcome < 0 || spec.outcome >= panel.n_outcomes()))
        throw ValidationError("separate objective outcome index out of range");
    if (spec.kind == ObjectiveKind::combined && (spec.nu < 0 || spec.nu > 1))
        throw ValidationError("nu must lie in [0,1]");

    auto pack = [&](const detail::RowSet& rs, double weight_each,
                    QpProblem& qp, int offset) {
        for (std::size_t r = 0; r < rs.targets.size(); ++r) {
            qp.design.row(offset + static_cast<int>(r)) = rs.donor_rows[r].transpose();
            qp.target(offset + static_cast<int>(r)) = rs.targets[r];
            qp.row_weights(offset + static_cast<int>(r)) = weight_each;
        }
    };

    QpProblem qp;
    const int n0 = panel.n_donors();
    if (spec.kind == ObjectiveKind::combined) {
        const auto avg = detail::collect_rows(panel, spec, true);
        const auto cat = detail::collect_rows(panel, spec, false);
        if (avg.targets.empty() || cat.targets.empty())
            throw ValidationError("missing-cell policy removed every balance row");
        const int rows = static_cast<int>(avg.targets.size() + cat.targets.size());
        qp.design.resize(rows, n0);
        qp.target.resize(rows);
        qp.row_weights.resize(rows);
        pack(avg, spec.nu / avg.targets.size(), qp, 0);
        pack(cat, (1.0 - spec.nu) / cat.targets.size(), qp,
             static_cast<int>(avg.targets.size()));
    } else {
        const bool averaged = spec.kind == ObjectiveKind::averaged;
        const auto rs = detail::collect_rows(panel, spec, averaged);
        if (rs.targets.empty())
            throw ValidationError("missing-cell policy removed every balance row");
        const int rows = static_cast<int>(rs.targets.size());
        qp.design.resize(rows, n0);
        qp.target.resize(rows);
        qp.row_weights.resize(rows);
        pack(rs, 1.0 / rows, qp, 0);
    }
    return qp;
}

inline double eval_q_combined(const PanelData& panel, double nu,
                              const Eigen::VectorXd& gamma);

/// Direct-summation q values at a given gamma on a transformed panel.
/// Terms with a missing treated value or a missing donor carrying weight
/// above 1e-12 are dropped and the count adjusted.
inline double eval_q(const PanelData& panel, const ObjectiveSpec& spec,
                     const Eigen::VectorXd& gamma) {
    if (spec.kind == ObjectiveKind::combined)
        return eval_q_combined(panel, spec.nu, gamma);
    const auto donors = panel.donors();
    if (gamma.size() != static_cast<int>(donors.size()))
        throw ValidationError("gamma length does not match donor count");
    const bool averaged = spec.kind == ObjectiveKind::averaged;

    double ss = 0;
    long n = 0;
    for (int t : detail::fit_periods(panel, spec)) {
        const int kmax = averaged ? 1
                         : (spec.kind == ObjectiveKind::separate ? 1 : panel.n_outcomes());
        for (int kk = 0; kk < kmax; ++kk) {
            const int k = (spec.kind == ObjectiveKind::separate) ? spec.outcome : kk;
            double y1 = averaged ? detail::outcome_average(panel, panel.treated(), t)
                                 : panel.value(panel.treated(), t, k);
            if (is_missing(y1)) continue;
            double synth = 0;
            bool ok = true;
            for (std::size_t d = 0; d < donors.size(); ++d) {
                if (gamma(static_cast<int>(d)) <= 1e-12) continue;
                const double v = averaged ? detail::outcome_average(panel, donors[d], t)
                                          : panel.value(donors[d], t, k);
                if (is_missing(v)) { ok = false; break; }
                synth += gamma(static_cast<int>(d)) * v;
            }
            if (!ok) continue;
            const double e = y1 - synth;
            ss += e * e;
            ++n;
        }
    }
    if (n == 0) throw ValidationError("missing-cell policy removed every q term");
    return std::sqrt(ss / n);
}

inline double eval_q_combined(const PanelData& panel, double nu,
                              const Eigen::VectorXd& gamma) {
    const double qa = eval_q(panel, ObjectiveSpec::averaged(), gamma);
    const double qc = eval_q(panel, ObjectiveSpec::concatenated(), gamma);
    return std::sqrt(nu * qa * qa + (1.0 - nu) * qc * qc);
}

struct FitResult {
    WeightSolution solution;
    TransformState state;
    ObjectiveSpec spec;
    Eigen::VectorXd q_sep; // per outcome, at the fitted gamma
    double q_cat = 0;
    double q_avg = 0;
};

/// Fit weights on a raw panel: de-mean always, standardize for the
/// multi-outcome objectives, then solve. Reported q values are the
/// direct-summation formulas on the de-meaned standardized panel.
inline FitResult fit(const PanelData& raw_panel, const ObjectiveSpec& spec,
                     const SolverSettings& settings = {}) {
    FitResult out;
    out.spec = spec;
    auto [tp, state] = transform(raw_panel);
    out.state = std::move(state);

    if (spec.kind == ObjectiveKind::separate) {
        auto [dm, dm_state] = demean(raw_panel);
        out.solution = solve(build_objective(dm, spec), settings);
    } else {
        out.solution = solve(build_objective(tp, spec), settings);
    }

    out.q_sep.resize(raw_panel.n_outcomes());
    for (int k = 0; k < raw_panel.n_outcomes(); ++k)
        out.q_sep(k) = eval_q(tp, ObjectiveSpec::separate_k(k), out.solution.gamma);
    ObjectiveSpec report = spec; // carry any extra periods into reporting
    report.kind = ObjectiveKind::concatenated;
    out.q_cat = eval_q(tp, report, out.solution.gamma);
    report.kind = ObjectiveKind::averaged;
    out.q_avg = eval_q(tp, report, out.solution.gamma);
    return out;
}

struct HeuristicNu {
    double nu = 1.0;
    bool degenerate = false; // perfect concatenated fit; nu forced to 1
    FitResult cat_fit;
};

/// nu = sqrt(q_avg(cat weights)) / sqrt(q_cat(cat weights)), clamped to [0,1].
inline HeuristicNu heuristic_nu(const PanelData& raw_panel,
                                const SolverSettings& settings = {}) {
    HeuristicNu h;
    h.cat_fit = fit(raw_panel, ObjectiveSpec::concatenated(), settings);
    if (h.cat_fit.q_cat <= 0) {
        h.nu = 1.0;
        h.degenerate = true;
        return h;
    }
    h.nu = std::clamp(std::sqrt(h.cat_fit.q_avg) / std::sqrt(h.cat_fit.q_cat), 0.0, 1.0);
    return h;
}

struct GapPoint {
    int outcome = 0;
    int period = 0;
    double observed = kMissing;
    double counterfactual = kMissing;
    double gap = kMissing;
    bool is_post = false;
};

using GapSeries = std::vector<GapPoint>;

/// Eq.-style imputation in original units: counterfactual is the treated
/// pre-mean plus the weighted de-meaned donors. A point with a missing
/// treated value, or a missing value on a donor carrying weight, stays
/// missing.
inline GapSeries gaps(const PanelData& raw_panel, const Eigen::VectorXd& gamma,
                      const TransformState& state) {
    const auto donors = raw_panel.donors();
    if (gamma.size() != static_cast<int>(donors.size()))
        throw ValidationError("gamma length does not match donor count");
    GapSeries out;
    out.reserve(static_cast<std::size_t>(raw_panel.n_periods()) * raw_panel.n_outcomes());
    for (int k = 0; k < raw_panel.n_outcomes(); ++k)
        for (int t = 0; t < raw_panel.n_periods(); ++t) {
            GapPoint g;
            g.outcome = k;
            g.period = t;
            g.is_post = t >= raw_panel.t0();
            g.observed = raw_panel.value(raw_panel.treated(), t, k);
            double synth = state.pre_means(raw_panel.treated(), k);
            bool ok = true;
            for (std::size_t d = 0; d < donors.size(); ++d) {
                if (gamma(static_cast<int>(d)) <= 1e-12) continue;
                const double v = raw_panel.value(donors[d], t, k);
                if (is_missing(v)) { ok = false; break; }
                synth += gamma(static_cast<int>(d)) * (v - state.pre_means(donors[d], k));
            }
            if (ok) {
                g.counterfactual = synth;
                if (!is_missing(g.observed)) g.gap = g.observed - synth;
            }
            out.push_back(g);
        }
    return out;
}

} // namespace mscm
