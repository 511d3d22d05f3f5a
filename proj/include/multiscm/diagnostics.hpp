#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "multiscm/panel.hpp"
#include "multiscm/weights.hpp"

namespace mscm {

enum class MatrixKind { separate, concatenated, averaged };

/// Pre-treatment balance matrix (units x columns) for one matrix kind.
/// Transformed = de-meaned + standardized values; raw = values as loaded.
/// Missing cells become 0 after transform (the unit's pre-mean) and are
/// rejected raw.
inline Eigen::MatrixXd pre_matrix(const PanelData& panel, MatrixKind kind,
                                  bool raw = false, int outcome = 0) {
    const PanelData* src = &panel;
    PanelData tp_storage;
    if (!raw) {
        auto [tp, st] = transform(panel);
        tp_storage = std::move(tp);
        src = &tp_storage;
    }
    const PanelData& p = *src;
    const int n = p.n_units(), t0 = p.t0(), kk = p.n_outcomes();
    Eigen::MatrixXd m;
    auto cell = [&](int i, int t, int k) {
        const double v = p.value(i, t, k);
        if (is_missing(v)) {
            if (raw) throw ValidationError("raw pre-treatment matrix has missing cells");
            return 0.0;
        }
        return v;
    };
    switch (kind) {
        case MatrixKind::separate:
            if (outcome < 0 || outcome >= kk)
                throw ValidationError("outcome index out of range");
            m.resize(n, t0);
            for (int i = 0; i < n; ++i)
                for (int t = 0; t < t0; ++t) m(i, t) = cell(i, t, outcome);
            break;
        case MatrixKind::concatenated:
            m.resize(n, t0 * kk);
            for (int i = 0; i < n; ++i)
                for (int k = 0; k < kk; ++k)
                    for (int t = 0; t < t0; ++t) m(i, k * t0 + t) = cell(i, t, k);
            break;
        case MatrixKind::averaged:
            m.resize(n, t0);
            for (int i = 0; i < n; ++i)
                for (int t = 0; t < t0; ++t) {
                    double s = 0;
                    for (int k = 0; k < kk; ++k) s += cell(i, t, k);
                    m(i, t) = s / kk;
                }
            break;
    }
    return m;
}

struct SpectrumReport {
    Eigen::VectorXd singular_values;   // descending
    Eigen::VectorXd cumulative_shares; // of sum of squared singular values
    int rows = 0;
    int cols = 0;
};

inline SpectrumReport spectrum_of(const Eigen::MatrixXd& m) {
    if (m.size() == 0 || m.cwiseAbs().maxCoeff() == 0.0)
        throw NumericalError("degenerate (all-zero) matrix has no spectrum");
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
    SpectrumReport r;
    r.singular_values = svd.singularValues();
    r.rows = static_cast<int>(m.rows());
    r.cols = static_cast<int>(m.cols());
    const double total = r.singular_values.squaredNorm();
    r.cumulative_shares.resize(r.singular_values.size());
    double acc = 0;
    for (int i = 0; i < r.singular_values.size(); ++i) {
        acc += r.singular_values(i) * r.singular_values(i);
        r.cumulative_shares(i) = acc / total;
    }
    return r;
}

inline SpectrumReport spectrum(const PanelData& panel, bool raw = false,
                               MatrixKind kind = MatrixKind::concatenated,
                               int outcome = 0) {
    return spectrum_of(pre_matrix(panel, kind, raw, outcome));
}

struct ConditionRatio {
    double percent_increase = 0; // cond(averaged)/cond(outcome 1) - 1, in percent
    bool infinite = false;       // some smallest singular value was 0
};

inline double condition_number(const Eigen::MatrixXd& m, bool* infinite) {
    const Eigen::VectorXd sv = spectrum_of(m).singular_values;
    const double smin = sv(sv.size() - 1);
    if (smin <= 0) {
        *infinite = true;
        return std::numeric_limits<double>::infinity();
    }
    return sv(0) / smin;
}

/// Percent increase of the averaged matrix's condition number over the
/// first outcome's. Raw matrices by default, matching the simulation
/// probes; transformed available via flag.
inline ConditionRatio condition_ratio(const PanelData& panel, bool raw = true) {
    ConditionRatio r;
    const double ca = condition_number(pre_matrix(panel, MatrixKind::averaged, raw), &r.infinite);
    const double c1 = condition_number(pre_matrix(panel, MatrixKind::separate, raw, 0), &r.infinite);
    if (r.infinite || !std::isfinite(ca / c1)) {
        r.infinite = true;
        r.percent_increase = std::numeric_limits<double>::infinity();
        return r;
    }
    r.percent_increase = (ca / c1 - 1.0) * 100.0;
    return r;
}

/// Copy of the panel keeping only the listed outcomes (order preserved).
inline PanelData select_outcomes(const PanelData& panel, const std::vector<int>& keep) {
    if (keep.empty()) throw ValidationError("select_outcomes: empty outcome list");
    std::vector<std::string> names;
    for (int k : keep) {
        if (k < 0 || k >= panel.n_outcomes())
            throw ValidationError("select_outcomes: index out of range");
        names.push_back(panel.outcomes()[k]);
    }
    PanelData out(panel.units(), panel.periods(), names, panel.treated(), panel.t0());
    for (int i = 0; i < panel.n_units(); ++i)
        for (int t = 0; t < panel.n_periods(); ++t)
            for (std::size_t j = 0; j < keep.size(); ++j)
                out.set_value(i, t, static_cast<int>(j), panel.value(i, t, keep[j]));
    return out;
}

struct HoldoutEntry {
    int focal_outcome = 0;
    double mspe = 0;          // pre-treatment MSPE of held-out combined fit
    double uniform_mspe = 0;  // same under uniform donor weights
    double ratio = 0;
};

using HoldoutReport = std::vector<HoldoutEntry>;

/// For each focal outcome: fit combined weights on the other outcomes,
/// score pre-treatment MSPE on the focal outcome (standardized units),
/// relative to uniform donor weights.
inline HoldoutReport holdout_fit(const PanelData& panel, double nu = 0.5,
                                 const SolverSettings& settings = {}) {
    const int kk = panel.n_outcomes();
    if (kk < 2) throw ValidationError("holdout_fit requires K >= 2 outcomes");
    auto [tp, st] = transform(panel);
    const Eigen::VectorXd uniform =
        Eigen::VectorXd::Constant(panel.n_donors(), 1.0 / panel.n_donors());

    HoldoutReport report;
    for (int focal = 0; focal < kk; ++focal) {
        std::vector<int> keep;
        for (int k = 0; k < kk; ++k)
            if (k != focal) keep.push_back(k);
        const PanelData sub = select_outcomes(panel, keep);
        const FitResult f = fit(sub, ObjectiveSpec::combined(nu), settings);

        HoldoutEntry e;
        e.focal_outcome = focal;
        const double q_fit = eval_q(tp, ObjectiveSpec::separate_k(focal), f.solution.gamma);
        const double q_uni = eval_q(tp, ObjectiveSpec::separate_k(focal), uniform);
        e.mspe = q_fit * q_fit;
        e.uniform_mspe = q_uni * q_uni;
        e.ratio = e.uniform_mspe > 0 ? e.mspe / e.uniform_mspe
                                     : std::numeric_limits<double>::infinity();
        report.push_back(e);
    }
    return report;
}

struct FrontierPoint {
    double nu = 0;
    double q_avg = 0;
    double q_cat = 0;
    Eigen::VectorXd gamma;
};

inline std::vector<FrontierPoint> frontier(const PanelData& panel,
                                           const std::vector<double>& nu_grid,
                                           const SolverSettings& settings = {}) {
    std::vector<FrontierPoint> pts;
    for (double nu : nu_grid) {
        if (nu < 0 || nu > 1) throw ValidationError("frontier nu grid must lie in [0,1]");
        const FitResult f = fit(panel, ObjectiveSpec::combined(nu), settings);
        pts.push_back({nu, f.q_avg, f.q_cat, f.solution.gamma});
    }
    return pts;
}

inline std::vector<double> default_nu_grid() {
    std::vector<double> g;
    for (int i = 0; i <= 20; ++i) g.push_back(i * 0.05);
    return g;
}

} // namespace mscm
