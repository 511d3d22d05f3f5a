#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include <Eigen/SVD>

#include "multiscm/diagnostics.hpp"
#include "multiscm/simlab.hpp"

using namespace mscm;

TEST_CASE("oracle_weights") {
    SECTION("exact donor match admits a vertex solution") {
        Eigen::MatrixXd donors(1, 4);
        donors << 1.0, 2.0, 3.0, 4.0;
        const Eigen::VectorXd g =
            oracle_weights(donors, Eigen::VectorXd::Constant(1, 3.0));
        REQUIRE(std::abs((donors * g)(0) - 3.0) <= 1e-10);
    }
    SECTION("evenly spaced grid, treated = second largest") {
        const int n = 50;
        Eigen::VectorXd phi(n);
        for (int i = 0; i < n; ++i) phi(i) = 1.0 + 4.0 * i / (n - 1);
        Eigen::MatrixXd donors(1, n - 1);
        for (int i = 0, d = 0; i < n; ++i)
            if (i != n - 2) donors(0, d++) = phi(i);
        const Eigen::VectorXd g =
            oracle_weights(donors, Eigen::VectorXd::Constant(1, phi(n - 2)));
        REQUIRE(std::abs((donors * g)(0) - phi(n - 2)) <= 1e-10);
        // hand rule: the two grid neighbours phi(n-3), phi(n-1) bracket the
        // target at equal distance, so a 0.5/0.5 mix certifies feasibility
        REQUIRE(std::abs(0.5 * phi(n - 3) + 0.5 * phi(n - 1) - phi(n - 2)) < 1e-12);
    }
    SECTION("target outside the donor hull is an error") {
        Eigen::MatrixXd donors(1, 3);
        donors << 1.0, 3.0, 5.0;
        REQUIRE_THROWS_AS(oracle_weights(donors, Eigen::VectorXd::Constant(1, 10.0)),
                          NumericalError);
    }
}

TEST_CASE("generate: structure of the noiseless rho=1 panel") {
    DgpConfig c;
    c.t0 = 10;
    c.k = 4;
    c.rho = 1.0;
    c.noise_sigma = 0.0;
    c.seed = 3;
    const Generated g = generate(c, 0);
    SECTION("treated unit has the second-largest common loading") {
        REQUIRE(g.treated == c.n_units - 2);
        REQUIRE(g.panel.treated() == c.n_units - 2);
    }
    SECTION("each outcome's raw pre matrix is rank 1") {
        for (int k = 0; k < c.k; ++k) {
            const Eigen::MatrixXd m = pre_matrix(g.panel, MatrixKind::separate, true, k);
            Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
            REQUIRE(svd.singularValues()(1) / svd.singularValues()(0) < 1e-12);
        }
    }
    SECTION("treated pre-series lies in the donor convex hull") {
        const FitResult f = fit(g.panel, ObjectiveSpec::concatenated());
        REQUIRE(f.q_cat <= 1e-8);
    }
    SECTION("oracle weights balance every outcome exactly") {
        auto [tp, st] = transform(g.panel);
        REQUIRE(eval_q(tp, ObjectiveSpec::concatenated(), g.oracle_gamma) <= 1e-10);
    }
}

TEST_CASE("generate: mixture structure at rho<1") {
    DgpConfig c;
    c.t0 = 10;
    c.k = 4;
    c.rho = 0.0;
    c.noise_sigma = 0.0;
    c.seed = 4;
    const Generated g = generate(c, 0);
    SECTION("outcome 1 still follows the common factor") {
        for (int t = 0; t <= c.t0; ++t)
            REQUIRE(g.noiseless.value(2, t, 0) ==
                    Catch::Approx(g.loadings(2, 0) * g.factors(t, 0)).margin(1e-12));
    }
    SECTION("idiosyncratic loadings span the common grid") {
        for (int k = 1; k < c.k; ++k) {
            Eigen::VectorXd col = g.loadings.col(k);
            // treated loading is pinned, so check min/max over the others
            double lo = 1e300, hi = -1e300;
            for (int i = 0; i < c.n_units; ++i) {
                if (i == g.treated) continue;
                lo = std::min(lo, col(i));
                hi = std::max(hi, col(i));
            }
            REQUIRE(lo == Catch::Approx(1.0).margin(1e-12));
            REQUIRE(hi == Catch::Approx(5.0).margin(1e-12));
        }
    }
    SECTION("idiosyncratic factors match the common spread") {
        for (int k = 1; k < c.k; ++k) {
            const double spread =
                g.factors.col(k).maxCoeff() - g.factors.col(k).minCoeff();
            REQUIRE(spread == Catch::Approx(0.5).margin(1e-12));
        }
    }
    SECTION("oracle weights still balance every outcome exactly") {
        auto [tp, st] = transform(g.panel);
        REQUIRE(eval_q(tp, ObjectiveSpec::concatenated(), g.oracle_gamma) <= 1e-10);
    }
}

TEST_CASE("generate is deterministic per (seed, replication)") {
    DgpConfig c;
    c.t0 = 8;
    c.k = 3;
    c.seed = 12;
    const Generated a = generate(c, 5);
    const Generated b = generate(c, 5);
    REQUIRE(a.panel == b.panel);
    const Generated other = generate(c, 6);
    REQUIRE_FALSE(a.panel == other.panel);
}

TEST_CASE("implanted effect shows up in post-period gaps") {
    DgpConfig c;
    c.t0 = 10;
    c.k = 3;
    c.noise_sigma = 0.0;
    c.seed = 13;
    c.tau = Eigen::VectorXd::Zero(3);
    c.tau << 1.5, -2.0, 0.25;
    const Generated g = generate(c, 0);
    const FitResult f = fit(g.panel, ObjectiveSpec::averaged());
    const GapSeries gs = gaps(g.panel, f.solution.gamma, f.state);
    for (const auto& pt : gs) {
        if (pt.is_post)
            REQUIRE(pt.gap == Catch::Approx(c.tau(pt.outcome)).margin(1e-8));
        else
            REQUIRE(std::abs(pt.gap) < 1e-8);
    }
}

TEST_CASE("run_study: noiseless recovery") {
    DgpConfig c;
    c.t0 = 10;
    c.k = 4;
    c.rho = 1.0;
    c.noise_sigma = 0.0;
    for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
        c.seed = seed;
        const Replication r = run_replication(c, 0);
        REQUIRE(r.ok);
        for (int e = 0; e < 3; ++e) REQUIRE(std::abs(r.bias[e]) <= 1e-6);
        REQUIRE(r.imbalance[2] <= 1e-8); // q_avg at averaged weights
    }
}

TEST_CASE("run_study: per-replication imbalance ordering (Jensen + optimality)") {
    DgpConfig c;
    c.t0 = 10;
    c.k = 4;
    c.rho = 0.7;
    c.seed = 14;
    const StudyResult s = run_study(c, 25);
    for (const auto& r : s.reps) {
        REQUIRE(r.ok);
        REQUIRE(r.imbalance[2] <= r.imbalance[1] + 1e-10);
    }
}

TEST_CASE("run_study: serial equals parallel bitwise") {
    DgpConfig c;
    c.t0 = 10;
    c.k = 4;
    c.seed = 15;
    const StudyResult a = run_study(c, 40, 1);
    const StudyResult b = run_study(c, 40, 4);
    REQUIRE(a.reps.size() == b.reps.size());
    for (std::size_t r = 0; r < a.reps.size(); ++r)
        for (int e = 0; e < 3; ++e) {
            REQUIRE(a.reps[r].bias[e] == b.reps[r].bias[e]);
            REQUIRE(a.reps[r].imbalance[e] == b.reps[r].imbalance[e]);
        }
}

TEST_CASE("run_study: more outcomes weakly help avg and cat at rho=1") {
    DgpConfig c;
    c.t0 = 10;
    c.rho = 1.0;
    const int reps = 200;
    c.k = 4;
    c.seed = 16;
    const StudyResult k4 = run_study(c, reps, 4);
    c.k = 10;
    c.seed = 17; // independent seeds; only the avg/cat direction is asserted
    const StudyResult k10 = run_study(c, reps, 4);
    REQUIRE(k10.bias_summary[1].mean_abs <= k4.bias_summary[1].mean_abs);
    REQUIRE(k10.bias_summary[2].mean_abs <= k4.bias_summary[2].mean_abs);
}

TEST_CASE("config validation") {
    DgpConfig c;
    c.rho = 1.5;
    REQUIRE_THROWS_AS(c.validate(), ValidationError);
    c.rho = 0.5;
    c.n_units = 2;
    REQUIRE_THROWS_AS(c.validate(), ValidationError);
    c.n_units = 10;
    c.tau = Eigen::VectorXd::Zero(3); // k defaults to 10
    REQUIRE_THROWS_AS(c.validate(), ValidationError);
}
