#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "multiscm/panel.hpp"
#include "multiscm/rng.hpp"
#include "multiscm/weights.hpp"

namespace mscm {

struct DgpConfig {
    int n_units = 50;
    int t0 = 10;
    int k = 10;
    double rho = 1.0;
    double noise_sigma = 1.0;
    double load_lo = 1.0, load_hi = 5.0;     // common loading grid
    double factor_lo = 0.5, factor_hi = 1.0; // common factor grid
    std::uint64_t seed = 0;
    Eigen::VectorXd tau; // implanted post-period effect per outcome; empty = 0

    void validate() const {
        if (n_units < 3) throw ValidationError("DGP needs at least 3 units");
        if (t0 < 2) throw ValidationError("DGP needs t0 >= 2");
        if (k < 1) throw ValidationError("DGP needs at least 1 outcome");
        if (rho < 0 || rho > 1) throw ValidationError("rho must lie in [0,1]");
        if (noise_sigma < 0) throw ValidationError("noise sigma must be >= 0");
        if (load_lo >= load_hi || factor_lo >= factor_hi)
            throw ValidationError("DGP ranges must be ordered");
        if (tau.size() != 0 && tau.size() != k)
            throw ValidationError("tau length must equal the outcome count");
    }
};

/// Simplex-feasible gamma* with loadings' gamma-combination equal to the
/// treated loading (columns of `donor_loadings` are donors).
inline Eigen::VectorXd oracle_weights(const Eigen::MatrixXd& donor_loadings,
                                      const Eigen::VectorXd& treated_loading) {
    QpProblem qp;
    qp.design = donor_loadings;
    qp.target = treated_loading;
    SolverSettings s;
    s.tol = 1e-16;
    const WeightSolution sol = solve(qp, s);
    if (sol.objective > 1e-10)
        throw NumericalError("treated loading outside the donor convex hull "
                             "(distance " + std::to_string(sol.objective) + ")");
    return sol.gamma;
}

struct Generated {
    PanelData panel;     // observed outcomes (noise + implanted effect)
    PanelData noiseless; // the latent component L_itk, effect not implanted
    Eigen::MatrixXd loadings; // n_units x k
    Eigen::MatrixXd factors;  // (t0+1) x k
    Eigen::VectorXd oracle_gamma;
    int treated = 0;
};

/// Mixture factor-model panel: T = t0 + 1 periods, outcome 1 driven by the
/// common factor alone, outcomes 2..K by idiosyncratic loadings/factors.
/// Treated unit = second-largest common loading; its idiosyncratic loadings
/// are the oracle-weight combination of the donors', so oracle weights
/// balance every outcome exactly.
inline Generated generate(const DgpConfig& config, std::uint64_t replication = 0) {
    config.validate();
    const int n = config.n_units, t0 = config.t0, kk = config.k, t_total = t0 + 1;
    const int treated = n - 2; // loadings ascend, so index n-2 is second largest
    Rng rng = Rng::substream(config.seed, replication);

    Eigen::VectorXd phi(n), mu(t_total);
    for (int i = 0; i < n; ++i)
        phi(i) = config.load_lo + (config.load_hi - config.load_lo) * i / (n - 1);
    for (int t = 0; t < t_total; ++t)
        mu(t) = config.factor_lo + (config.factor_hi - config.factor_lo) * t / (t_total - 1);

    Eigen::MatrixXd donor_phi(1, n - 1);
    for (int i = 0, d = 0; i < n; ++i)
        if (i != treated) donor_phi(0, d++) = phi(i);
    const Eigen::VectorXd gamma_star =
        oracle_weights(donor_phi, Eigen::VectorXd::Constant(1, phi(treated)));

    Eigen::MatrixXd loadings(n, kk), factors(t_total, kk);
    loadings.col(0) = phi;
    factors.col(0) = mu;
    for (int k = 1; k < kk; ++k) {
        // idiosyncratic loadings: normals mapped min-max onto the phi grid
        Eigen::VectorXd raw(n);
        for (int i = 0; i < n; ++i) raw(i) = rng.normal();
        const double lo = raw.minCoeff(), hi = raw.maxCoeff();
        for (int i = 0; i < n; ++i)
            loadings(i, k) = config.load_lo +
                (config.load_hi - config.load_lo) * (raw(i) - lo) / (hi - lo);
        // treated loading pinned to the oracle combination of the donors'
        double mix = 0;
        for (int i = 0, d = 0; i < n; ++i)
            if (i != treated) mix += gamma_star(d++) * loadings(i, k);
        loadings(treated, k) = mix;

        // idiosyncratic factors: AR(1) with coefficient 0.5, stationary
        // start, rescaled to the common factor grid's spread (scale only,
        // keeping the series' near-zero mean)
        Eigen::VectorXd ar(t_total);
        ar(0) = rng.normal() * std::sqrt(1.0 / 0.75);
        for (int t = 1; t < t_total; ++t) ar(t) = 0.5 * ar(t - 1) + rng.normal();
        const double spread = ar.maxCoeff() - ar.minCoeff();
        const double target_spread = config.factor_hi - config.factor_lo;
        factors.col(k) = ar * (spread > 0 ? target_spread / spread : 0.0);
    }

    Generated g;
    g.loadings = loadings;
    g.factors = factors;
    g.oracle_gamma = gamma_star;
    g.treated = treated;
    std::vector<std::string> units, periods, outcomes;
    for (int i = 0; i < n; ++i) units.push_back("u" + std::to_string(i + 1));
    for (int t = 0; t < t_total; ++t) periods.push_back(std::to_string(t + 1));
    for (int k = 0; k < kk; ++k) outcomes.push_back("y" + std::to_string(k + 1));
    g.panel = PanelData(units, periods, outcomes, treated, t0);
    g.noiseless = PanelData(units, periods, outcomes, treated, t0);

    for (int i = 0; i < n; ++i)
        for (int t = 0; t < t_total; ++t)
            for (int k = 0; k < kk; ++k) {
                const double l = config.rho * phi(i) * mu(t) +
                    (1.0 - config.rho) * loadings(i, k) * factors(t, k);
                double y = l + config.noise_sigma * rng.normal();
                if (i == treated && t >= t0 && config.tau.size() > 0) y += config.tau(k);
                g.noiseless.set_value(i, t, k, l);
                g.panel.set_value(i, t, k, y);
            }
    return g;
}

struct Replication {
    // estimator order: separate (outcome 1), concatenated, averaged
    double bias[3] = {0, 0, 0};
    double imbalance[3] = {0, 0, 0};
    bool ok = false;
};

struct Summary {
    double mean = 0, mean_abs = 0;
    double min = 0, q25 = 0, median = 0, q75 = 0, max = 0;
};

struct StudyResult {
    std::vector<Replication> reps;
    long failed = 0;
    Summary bias_summary[3];
    Summary imbalance_summary[3];
};

inline Summary summarize(std::vector<double> v) {
    Summary s;
    if (v.empty()) return s;
    std::sort(v.begin(), v.end());
    auto quantile = [&](double p) {
        const double x = p * (v.size() - 1);
        const std::size_t lo = static_cast<std::size_t>(x);
        const std::size_t hi = std::min(lo + 1, v.size() - 1);
        return v[lo] + (x - lo) * (v[hi] - v[lo]);
    };
    for (double x : v) { s.mean += x; s.mean_abs += std::abs(x); }
    s.mean /= v.size();
    s.mean_abs /= v.size();
    s.min = v.front();
    s.max = v.back();
    s.q25 = quantile(0.25);
    s.median = quantile(0.5);
    s.q75 = quantile(0.75);
    return s;
}

/// Bias of one fitted gamma on the latent component: imputed minus true
/// latent outcome-1 value at the post period, both de-meaned with latent
/// pre-period means. Noise terms drop out, isolating the weighting error.
inline double latent_bias(const Generated& g, const Eigen::VectorXd& gamma) {
    const PanelData& l = g.noiseless;
    const int t_post = l.n_periods() - 1;
    auto demeaned_at = [&](int i) {
        double m = 0;
        for (int t = 0; t < l.t0(); ++t) m += l.value(i, t, 0);
        m /= l.t0();
        return l.value(i, t_post, 0) - m;
    };
    double synth = 0;
    const auto donors = l.donors();
    for (std::size_t d = 0; d < donors.size(); ++d)
        synth += gamma(static_cast<int>(d)) * demeaned_at(donors[d]);
    return synth - demeaned_at(l.treated());
}

inline Replication run_replication(const DgpConfig& config, std::uint64_t rep,
                                   const SolverSettings& settings = {}) {
    Replication r;
    const Generated g = generate(config, rep);
    const ObjectiveSpec specs[3] = {ObjectiveSpec::separate_k(0),
                                    ObjectiveSpec::concatenated(),
                                    ObjectiveSpec::averaged()};
    for (int e = 0; e < 3; ++e) {
        const FitResult f = fit(g.panel, specs[e], settings);
        r.bias[e] = latent_bias(g, f.solution.gamma);
        r.imbalance[e] = e == 0 ? f.q_sep(0) : (e == 1 ? f.q_cat : f.q_avg);
    }
    r.ok = true;
    return r;
}

/// Replications use independent substreams keyed by replication index, so
/// results are identical for any job count.
inline StudyResult run_study(const DgpConfig& config, long reps, int jobs = 1,
                             const SolverSettings& settings = {}) {
    if (reps < 1) throw ValidationError("reps must be >= 1");
    if (jobs < 1) throw ValidationError("jobs must be >= 1");
    StudyResult out;
    out.reps.resize(reps);

    auto worker = [&](int w) {
        for (long r = w; r < reps; r += jobs) {
            try {
                out.reps[r] = run_replication(config, static_cast<std::uint64_t>(r), settings);
            } catch (const std::exception&) {
                out.reps[r].ok = false;
            }
        }
    };
    if (jobs == 1) {
        worker(0);
    } else {
        std::vector<std::thread> threads;
        for (int w = 0; w < jobs; ++w) threads.emplace_back(worker, w);
        for (auto& t : threads) t.join();
    }

    for (int e = 0; e < 3; ++e) {
        std::vector<double> bias, imb;
        for (const auto& r : out.reps) {
            if (!r.ok) continue;
            bias.push_back(r.bias[e]);
            imb.push_back(r.imbalance[e]);
        }
        out.bias_summary[e] = summarize(bias);
        out.imbalance_summary[e] = summarize(imb);
    }
    out.failed = static_cast<long>(
        std::count_if(out.reps.begin(), out.reps.end(),
                      [](const Replication& r) { return !r.ok; }));
    return out;
}

} // namespace mscm
