#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "multiscm/panel.hpp"
#include "multiscm/rng.hpp"
#include "multiscm/weights.hpp"

namespace mscm {

struct NullSpec {
    Eigen::VectorXd tau0;       // per outcome, standardized units
    int target_period = -1;     // -1 = last period (single-period test)
};

enum class PermScheme { iid, moving_block };

struct TestResult {
    double p_value = 1.0;
    std::vector<double> period_stats; // S_q per period entering the test
    std::vector<int> period_index;    // panel period index per statistic
    double post_stat = 0;             // statistic of the tested period/block
    double q_order = 1.0;
    PermScheme scheme = PermScheme::iid;
    WeightSolution refit;
    bool coarse_blocks = false; // post block longer than half the sample
};

/// S_q(u) = ((1/sqrt(K)) sum |u_k|^q)^(1/q); q = inf gives max |u_k|.
/// The 1/sqrt(K) sits inside the outer power.
inline double test_stat(const Eigen::VectorXd& u, double q_order) {
    if (q_order < 1.0) throw ValidationError("q order must be >= 1");
    if (!u.allFinite()) throw ValidationError("non-finite residuals");
    if (u.size() == 0) throw ValidationError("empty residual vector");
    if (std::isinf(q_order)) return u.cwiseAbs().maxCoeff();
    const double k = static_cast<double>(u.size());
    double s = 0;
    for (int i = 0; i < u.size(); ++i) s += std::pow(std::abs(u(i)), q_order);
    return std::pow(s / std::sqrt(k), 1.0 / q_order);
}

namespace detail {

/// Per-period S_q of treated-minus-synthetic residuals on a transformed
/// panel, for the listed periods. Outcomes with a missing treated value
/// or a missing weighted donor drop out of that period's statistic.
inline std::vector<double> period_statistics(const PanelData& tp,
                                             const Eigen::VectorXd& gamma,
                                             const std::vector<int>& periods,
                                             double q_order) {
    const auto donors = tp.donors();
    std::vector<double> stats;
    stats.reserve(periods.size());
    for (int t : periods) {
        std::vector<double> comps;
        for (int k = 0; k < tp.n_outcomes(); ++k) {
            const double y1 = tp.value(tp.treated(), t, k);
            if (is_missing(y1)) continue;
            double synth = 0;
            bool ok = true;
            for (std::size_t d = 0; d < donors.size(); ++d) {
                if (gamma(static_cast<int>(d)) <= 1e-12) continue;
                const double v = tp.value(donors[d], t, k);
                if (is_missing(v)) { ok = false; break; }
                synth += gamma(static_cast<int>(d)) * v;
            }
            if (ok) comps.push_back(y1 - synth);
        }
        if (comps.empty()) {
            stats.push_back(std::numeric_limits<double>::quiet_NaN());
            continue;
        }
        Eigen::VectorXd u = Eigen::Map<Eigen::VectorXd>(comps.data(),
                                                        static_cast<int>(comps.size()));
        stats.push_back(test_stat(u, q_order));
    }
    return stats;
}

/// Transform the panel, then enforce the null on the treated unit's listed
/// post periods (tau0 in standardized units).
inline PanelData adjusted_transformed(const PanelData& raw_panel, const NullSpec& null,
                                      const std::vector<int>& null_periods) {
    if (null.tau0.size() != raw_panel.n_outcomes())
        throw ValidationError("tau0 length must equal the outcome count");
    if (!null.tau0.allFinite()) throw ValidationError("tau0 must be finite");
    auto [tp, st] = transform(raw_panel);
    for (int t : null_periods) {
        if (t < raw_panel.t0() || t >= raw_panel.n_periods())
            throw ValidationError("null target period must be post-treatment");
        for (int k = 0; k < tp.n_outcomes(); ++k) {
            const double v = tp.value(tp.treated(), t, k);
            if (!is_missing(v)) tp.set_value(tp.treated(), t, k, v - null.tau0(k));
        }
    }
    return tp;
}

} // namespace detail

/// Single-post-period conformal test: enforce the null, refit once on the
/// pre periods plus the target period, compare the target's statistic to
/// the pre-period statistics. p sits on the lattice {1/n, ..., 1} with
/// n = T0 + 1.
inline TestResult test_null(const PanelData& raw_panel, ObjectiveSpec spec,
                            const NullSpec& null, double q_order = 1.0,
                            const SolverSettings& settings = {}) {
    const int target = null.target_period < 0 ? raw_panel.n_periods() - 1
                                              : null.target_period;
    const PanelData tp = detail::adjusted_transformed(raw_panel, null, {target});

    spec.extra_periods = {target};
    TestResult res;
    res.q_order = q_order;
    res.refit = solve(build_objective(tp, spec), settings);

    std::vector<int> periods;
    for (int t = 0; t < tp.t0(); ++t) periods.push_back(t);
    periods.push_back(target);
    const auto stats = detail::period_statistics(tp, res.refit.gamma, periods, q_order);

    const double s_post = stats.back();
    if (std::isnan(s_post)) throw ValidationError("target period entirely missing");
    long n = 1, le = 1; // the target period compares against itself
    for (std::size_t i = 0; i + 1 < stats.size(); ++i) {
        if (std::isnan(stats[i])) continue; // all-missing pre period drops out
        ++n;
        // slack keeps exact ties (noiseless instances) counted despite rounding
        if (s_post <= stats[i] + 1e-12 + 1e-9 * stats[i]) ++le;
    }
    res.p_value = static_cast<double>(le) / static_cast<double>(n);
    res.period_stats = stats;
    res.period_index = periods;
    res.post_stat = s_post;
    return res;
}

/// Joint test over all post periods: one augmented refit, per-period S_q,
/// block statistic = mean S_q over the post block. moving_block compares
/// against all T cyclic placements of the block; iid against seeded random
/// subsets of the same length.
inline TestResult test_null_joint(const PanelData& raw_panel, ObjectiveSpec spec,
                                  const NullSpec& null, double q_order = 1.0,
                                  PermScheme scheme = PermScheme::moving_block,
                                  std::uint64_t seed = 0, long n_perms = 1000,
                                  const SolverSettings& settings = {}) {
    const int t_total = raw_panel.n_periods();
    const int t0 = raw_panel.t0();
    const int block = t_total - t0;
    std::vector<int> post;
    for (int t = t0; t < t_total; ++t) post.push_back(t);
    const PanelData tp = detail::adjusted_transformed(raw_panel, null, post);

    spec.extra_periods = post;
    TestResult res;
    res.q_order = q_order;
    res.scheme = scheme;
    res.coarse_blocks = block > t_total / 2;
    res.refit = solve(build_objective(tp, spec), settings);

    std::vector<int> periods(t_total);
    std::iota(periods.begin(), periods.end(), 0);
    const auto stats = detail::period_statistics(tp, res.refit.gamma, periods, q_order);
    for (double s : stats)
        if (std::isnan(s))
            throw ValidationError("joint test requires a statistic for every period");

    auto block_mean = [&](const std::vector<int>& idx) {
        double s = 0;
        for (int t : idx) s += stats[t];
        return s / idx.size();
    };
    const double actual = block_mean(post);

    long n = 0, le = 0;
    if (scheme == PermScheme::moving_block) {
        for (int shift = 0; shift < t_total; ++shift) {
            std::vector<int> idx(block);
            for (int j = 0; j < block; ++j) idx[j] = (shift + j) % t_total;
            ++n;
            if (actual <= block_mean(idx) + 1e-12 + 1e-9 * std::abs(actual)) ++le;
        }
    } else {
        Rng rng = Rng::substream(seed, 0x1d1d);
        std::vector<int> pool(t_total);
        ++n; ++le; // identity draw
        for (long p = 0; p < n_perms; ++p) {
            std::iota(pool.begin(), pool.end(), 0);
            // partial Fisher-Yates: first `block` entries are the draw
            for (int j = 0; j < block; ++j) {
                const int r = j + static_cast<int>(rng.below(t_total - j));
                std::swap(pool[j], pool[r]);
            }
            std::vector<int> idx(pool.begin(), pool.begin() + block);
            ++n;
            if (actual <= block_mean(idx) + 1e-12 + 1e-9 * std::abs(actual)) ++le;
        }
    }
    res.p_value = static_cast<double>(le) / static_cast<double>(n);
    res.period_stats = stats;
    res.period_index = periods;
    res.post_stat = actual;
    return res;
}

struct AvgEffectInterval {
    double lo = 0;
    double hi = 0;
    bool empty = true;
    std::vector<double> grid;
    std::vector<double> p_values;
};

/// Averaged outcome series as a single-outcome panel in standardized units.
inline PanelData averaged_panel(const PanelData& raw_panel) {
    auto [tp, st] = transform(raw_panel);
    PanelData avg(tp.units(), tp.periods(), {"avg"}, tp.treated(), tp.t0());
    for (int i = 0; i < tp.n_units(); ++i)
        for (int t = 0; t < tp.n_periods(); ++t)
            avg.set_value(i, t, 0, detail::outcome_average(tp, i, t));
    return avg;
}

/// Test inversion for the scalar average effect (standardized units) at the
/// target post period: the accepted region is every grid value whose test
/// keeps p > alpha.
inline AvgEffectInterval avg_effect_interval(const PanelData& raw_panel,
                                             const std::vector<double>& tau_grid,
                                             double alpha, double q_order = 1.0,
                                             int target_period = -1,
                                             const SolverSettings& settings = {}) {
    if (tau_grid.empty()) throw ValidationError("empty tau grid");
    if (alpha <= 0 || alpha >= 1) throw ValidationError("alpha must lie in (0,1)");
    const PanelData avg = averaged_panel(raw_panel);
    // the averaged panel re-standardizes internally; rescale the grid so the
    // enforced null matches the requested standardized-average units
    const double s_avg = pooled_pre_scales(avg)(0);

    AvgEffectInterval out;
    out.grid = tau_grid;
    for (double tau : tau_grid) {
        NullSpec null;
        null.tau0 = Eigen::VectorXd::Constant(1, tau / s_avg);
        null.target_period = target_period;
        const TestResult r = test_null(avg, ObjectiveSpec::averaged(), null,
                                       q_order, settings);
        out.p_values.push_back(r.p_value);
        if (r.p_value > alpha) {
            if (out.empty) { out.lo = tau; out.hi = tau; out.empty = false; }
            out.lo = std::min(out.lo, tau);
            out.hi = std::max(out.hi, tau);
        }
    }
    return out;
}

} // namespace mscm
