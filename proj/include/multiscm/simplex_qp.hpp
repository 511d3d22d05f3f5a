#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "multiscm/errors.hpp"

namespace mscm {

/// min over the simplex of the row-weighted squared residual
/// sum_r w_r (b_r - (A gamma)_r)^2.
struct QpProblem {
    Eigen::MatrixXd design;      // rows = balance targets, cols = donors
    Eigen::VectorXd target;
    Eigen::VectorXd row_weights; // empty = all ones
};

struct WeightSolution {
    Eigen::VectorXd gamma;
    double objective = 0;  // root of the weighted squared imbalance
    double gap = 0;        // Frank-Wolfe duality gap on the squared objective
    long iterations = 0;
    bool converged = false;
};

struct SolverSettings {
    double tol = 1e-10;
    long max_iter = 100000;
    // observes each iterate; used by tests to assert monotone descent
    std::function<void(const Eigen::VectorXd&, double)> on_iterate;
};

/// Euclidean projection onto the probability simplex (sort-based).
inline Eigen::VectorXd project_simplex(const Eigen::VectorXd& v) {
    const int n = static_cast<int>(v.size());
    if (n == 0) throw ValidationError("project_simplex: empty vector");
    if (!v.allFinite()) throw ValidationError("project_simplex: non-finite input");
    std::vector<double> u(v.data(), v.data() + n);
    std::sort(u.begin(), u.end(), std::greater<double>());
    double cssv = 0, theta = 0;
    int rho = 0;
    for (int j = 0; j < n; ++j) {
        cssv += u[j];
        const double t = (cssv - 1.0) / (j + 1);
        if (u[j] - t > 0) { rho = j + 1; theta = t; }
    }
    Eigen::VectorXd out(n);
    for (int i = 0; i < n; ++i) out(i) = std::max(0.0, v(i) - theta);
    (void)rho;
    return out;
}

/// Frank-Wolfe with away steps over simplex vertices. O(N0) per iteration
/// via cached H*gamma; ties in the linear-minimization oracle break toward
/// the lowest donor index.
inline WeightSolution solve(const QpProblem& problem, const SolverSettings& settings = {}) {
    const Eigen::MatrixXd& A0 = problem.design;
    const Eigen::VectorXd& b0 = problem.target;
    const int n = static_cast<int>(A0.cols());
    if (n < 2) throw ValidationError("solver needs at least 2 donors");
    if (A0.rows() != b0.size()) throw ValidationError("design/target row counts differ");
    if (!A0.allFinite() || !b0.allFinite()) throw ValidationError("non-finite solver input");
    if (settings.tol <= 0) throw ValidationError("tolerance must be positive");

    Eigen::MatrixXd A = A0;
    Eigen::VectorXd b = b0;
    if (problem.row_weights.size() > 0) {
        if (problem.row_weights.size() != A.rows())
            throw ValidationError("row_weights length mismatch");
        if (!problem.row_weights.allFinite() || (problem.row_weights.array() < 0).any())
            throw ValidationError("row_weights must be finite and non-negative");
        const Eigen::ArrayXd s = problem.row_weights.array().sqrt();
        A.array().colwise() *= s;
        b.array() *= s;
    }

    WeightSolution sol;
    const double btb = b.squaredNorm();

    if (A.cwiseAbs().maxCoeff() == 0.0) {
        sol.gamma = Eigen::VectorXd::Constant(n, 1.0 / n);
        sol.objective = std::sqrt(btb);
        sol.converged = true;
        return sol;
    }

    const Eigen::MatrixXd H = A.transpose() * A;
    const Eigen::VectorXd c = A.transpose() * b;

    Eigen::VectorXd gamma = Eigen::VectorXd::Zero(n);
    gamma(0) = 1.0;
    Eigen::VectorXd Hg = H.col(0);
    double qf = H(0, 0); // gamma' H gamma

    auto objective_sq = [&](double quad, double lin) {
        return std::max(0.0, quad - 2.0 * lin + btb);
    };

    long it = 0;
    double gap = std::numeric_limits<double>::infinity();
    for (; it < settings.max_iter; ++it) {
        if ((it & 255) == 255) { // refresh caches against drift
            Hg = H * gamma;
            qf = gamma.dot(Hg);
        }
        if (settings.on_iterate)
            settings.on_iterate(gamma, objective_sq(qf, c.dot(gamma)));

        // gradient of the squared objective: 2(H gamma - c)
        int j = 0, a = -1;
        double gmin = std::numeric_limits<double>::infinity();
        double gmax = -std::numeric_limits<double>::infinity();
        double gdotgamma = 0;
        for (int i = 0; i < n; ++i) {
            const double gi = 2.0 * (Hg(i) - c(i));
            gdotgamma += gi * gamma(i);
            if (gi < gmin) { gmin = gi; j = i; }
            if (gamma(i) > 0 && gi > gmax) { gmax = gi; a = i; }
        }

        gap = gdotgamma - gmin;
        if (gap <= settings.tol) { sol.converged = true; break; }

        const double fw_slope = gmin - gdotgamma;   // grad . (e_j - gamma)
        const double away_slope = gdotgamma - gmax; // grad . (gamma - e_a)

        if (a < 0 || fw_slope <= away_slope) {
            // Frank-Wolfe step toward vertex j
            const double dHd = H(j, j) - 2.0 * Hg(j) + qf;
            double eta = 1.0;
            if (dHd > 0) eta = std::clamp(-fw_slope / (2.0 * dHd), 0.0, 1.0);
            if (eta <= 0) { sol.converged = true; break; }
            qf = (1 - eta) * (1 - eta) * qf + 2 * eta * (1 - eta) * Hg(j) + eta * eta * H(j, j);
            Hg = (1 - eta) * Hg + eta * H.col(j);
            gamma *= (1 - eta);
            gamma(j) += eta;
        } else {
            // away step from vertex a
            const double ga = gamma(a);
            if (ga >= 1.0) { sol.converged = true; break; } // gamma is vertex a itself
            const double eta_max = ga / (1.0 - ga);
            const double dHd = qf - 2.0 * Hg(a) + H(a, a);
            double eta = eta_max;
            if (dHd > 0) eta = std::clamp(-away_slope / (2.0 * dHd), 0.0, eta_max);
            if (eta <= 0) { sol.converged = true; break; }
            qf = (1 + eta) * (1 + eta) * qf - 2 * eta * (1 + eta) * Hg(a) + eta * eta * H(a, a);
            Hg = (1 + eta) * Hg - eta * H.col(a);
            gamma *= (1 + eta);
            gamma(a) -= eta;
            if (eta == eta_max) gamma(a) = 0.0; // drop the vertex exactly
        }
    }

    // exact renormalization absorbs accumulated rounding in the sum
    gamma = gamma.cwiseMax(0.0);
    gamma /= gamma.sum();
    sol.gamma = gamma;
    sol.iterations = it;
    sol.gap = std::max(0.0, gap);
    const Eigen::VectorXd r = b - A * gamma;
    sol.objective = std::sqrt(std::max(0.0, r.squaredNorm()));
    if (!std::isfinite(sol.gap)) {
        const Eigen::VectorXd grad = 2.0 * (H * gamma - c);
        sol.gap = std::max(0.0, grad.dot(gamma) - grad.minCoeff());
    }
    return sol;
}

} // namespace mscm
