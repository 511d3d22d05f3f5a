#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "multiscm/conformal.hpp"
#include "multiscm/simlab.hpp"
#include "helpers.hpp"

using namespace mscm;
using testutil::random_panel;

namespace {

NullSpec zero_null(const PanelData& p, int target = -1) {
    NullSpec n;
    n.tau0 = Eigen::VectorXd::Zero(p.n_outcomes());
    n.target_period = target;
    return n;
}

bool on_lattice(double p, int n) {
    const double scaled = p * n;
    return std::abs(scaled - std::round(scaled)) < 1e-9;
}

} // namespace

TEST_CASE("test_stat formula") {
    SECTION("zero residuals give 0") {
        REQUIRE(test_stat(Eigen::VectorXd::Zero(3), 1.0) == 0.0);
    }
    SECTION("K=1, q=1 reduces to |u|") {
        Eigen::VectorXd u(1);
        u << -2.5;
        REQUIRE(test_stat(u, 1.0) == Catch::Approx(2.5).margin(1e-12));
    }
    SECTION("u=(3,4), q=2: the 1/sqrt(K) sits inside the power") {
        Eigen::VectorXd u(2);
        u << 3, 4;
        REQUIRE(test_stat(u, 2.0) ==
                Catch::Approx(std::sqrt(25.0 / std::sqrt(2.0))).margin(1e-12));
    }
    SECTION("q=inf is the max norm") {
        Eigen::VectorXd u(3);
        u << -5, 2, 4;
        REQUIRE(test_stat(u, std::numeric_limits<double>::infinity()) == 5.0);
    }
    SECTION("positively homogeneous of degree 1") {
        Rng rng(91);
        Eigen::VectorXd u(4);
        for (int i = 0; i < 4; ++i) u(i) = rng.normal();
        for (double q : {1.0, 2.0, 3.5, std::numeric_limits<double>::infinity()})
            REQUIRE(test_stat(3.0 * u, q) == Catch::Approx(3.0 * test_stat(u, q)).margin(1e-12));
    }
    SECTION("q < 1 rejected") {
        REQUIRE_THROWS_AS(test_stat(Eigen::VectorXd::Ones(2), 0.5), ValidationError);
    }
}

TEST_CASE("test_null p-values live on the lattice {1/n,...,1}") {
    Rng rng(92);
    for (int rep = 0; rep < 10; ++rep) {
        const PanelData p = random_panel(rng, 6, 9, 2, 7);
        const TestResult r = test_null(p, ObjectiveSpec::concatenated(), zero_null(p));
        REQUIRE(on_lattice(r.p_value, 8)); // n = t0 + 1
        REQUIRE(r.p_value >= 1.0 / 8 - 1e-12);
        REQUIRE(r.p_value <= 1.0 + 1e-12);
    }
}

TEST_CASE("noiseless true null gives p = 1") {
    DgpConfig c;
    c.t0 = 10;
    c.k = 4;
    c.noise_sigma = 0.0;
    c.seed = 5;
    const Generated g = generate(c, 0);
    const TestResult r = test_null(g.panel, ObjectiveSpec::concatenated(), zero_null(g.panel));
    REQUIRE(r.p_value == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("dominant post statistic gives p = 1/n") {
    DgpConfig c;
    c.t0 = 10;
    c.k = 4;
    c.noise_sigma = 0.0;
    c.seed = 5;
    c.tau = Eigen::VectorXd::Constant(4, 50.0); // huge implanted effect
    const Generated g = generate(c, 0);
    const TestResult r = test_null(g.panel, ObjectiveSpec::concatenated(), zero_null(g.panel));
    REQUIRE(r.p_value == Catch::Approx(1.0 / 11).margin(1e-12));
}

TEST_CASE("p weakly decreases as tau0 moves away from the truth (noiseless)") {
    DgpConfig c;
    c.t0 = 10;
    c.k = 3;
    c.noise_sigma = 0.0;
    c.seed = 6;
    const Generated g = generate(c, 0);
    double prev = 2.0;
    std::vector<double> ps;
    for (double shift : {0.0, 0.5, 1.0, 2.0, 5.0}) {
        NullSpec n = zero_null(g.panel);
        n.tau0.array() = shift;
        const TestResult r = test_null(g.panel, ObjectiveSpec::concatenated(), n);
        REQUIRE(r.p_value <= prev + 1e-12);
        prev = r.p_value;
        ps.push_back(r.p_value);
    }
    REQUIRE(ps.front() == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(ps.back() == Catch::Approx(1.0 / 11).margin(1e-12));
}

TEST_CASE("joint test with one post period reduces to the per-period test") {
    Rng rng(93);
    for (int rep = 0; rep < 5; ++rep) {
        const PanelData p = random_panel(rng, 6, 9, 2, 8); // exactly 1 post period
        const TestResult single =
            test_null(p, ObjectiveSpec::concatenated(), zero_null(p));
        const TestResult joint = test_null_joint(p, ObjectiveSpec::concatenated(),
                                                 zero_null(p), 1.0,
                                                 PermScheme::moving_block);
        REQUIRE(joint.p_value == Catch::Approx(single.p_value).margin(1e-12));
    }
}

TEST_CASE("joint test under a noiseless true null gives p = 1") {
    DgpConfig c;
    c.t0 = 8;
    c.k = 3;
    c.noise_sigma = 0.0;
    c.seed = 7;
    const Generated g = generate(c, 0);
    const TestResult r = test_null_joint(g.panel, ObjectiveSpec::concatenated(),
                                         zero_null(g.panel));
    REQUIRE(r.p_value == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("joint iid scheme is deterministic in the seed") {
    Rng rng(94);
    const PanelData p = random_panel(rng, 6, 12, 2, 9);
    const TestResult a = test_null_joint(p, ObjectiveSpec::concatenated(), zero_null(p),
                                         1.0, PermScheme::iid, 42, 500);
    const TestResult b = test_null_joint(p, ObjectiveSpec::concatenated(), zero_null(p),
                                         1.0, PermScheme::iid, 42, 500);
    REQUIRE(a.p_value == b.p_value);
}

TEST_CASE("joint test flags coarse blocks") {
    Rng rng(95);
    const PanelData p = random_panel(rng, 5, 10, 2, 4); // 6 post > 10/2
    const TestResult r = test_null_joint(p, ObjectiveSpec::concatenated(), zero_null(p));
    REQUIRE(r.coarse_blocks);
}

TEST_CASE("avg_effect_interval") {
    SECTION("noiseless implanted average effect is accepted") {
        DgpConfig c;
        c.t0 = 10;
        c.k = 3;
        c.noise_sigma = 0.0;
        c.seed = 8;
        const Generated g = generate(c, 0);
        // the interval works in standardized-average units; zero effect was
        // implanted, so 0 must be accepted
        const AvgEffectInterval iv =
            avg_effect_interval(g.panel, {-1.0, -0.5, 0.0, 0.5, 1.0}, 0.1);
        REQUIRE_FALSE(iv.empty);
        REQUIRE(iv.lo <= 0.0);
        REQUIRE(iv.hi >= 0.0);
    }
    SECTION("grid excluding the truth under strong signal comes back empty") {
        DgpConfig c;
        c.t0 = 10;
        c.k = 3;
        c.noise_sigma = 0.0;
        c.seed = 9;
        const Generated g = generate(c, 0);
        const AvgEffectInterval iv =
            avg_effect_interval(g.panel, {25.0, 50.0, 100.0}, 0.1);
        REQUIRE(iv.empty);
    }
    SECTION("Monte Carlo coverage of 90% intervals") {
        DgpConfig c;
        c.n_units = 20;
        c.t0 = 12;
        c.k = 3;
        c.noise_sigma = 1.0;
        c.seed = 10;
        int covered = 0;
        const int sims = 300;
        for (int s = 0; s < sims; ++s) {
            const Generated g = generate(c, s);
            const AvgEffectInterval iv =
                avg_effect_interval(g.panel, {-2.0, -1.0, 0.0, 1.0, 2.0}, 0.1);
            if (!iv.empty && iv.lo <= 0.0 && iv.hi >= 0.0) ++covered;
        }
        REQUIRE(covered >= static_cast<int>(0.85 * sims));
    }
}

TEST_CASE("input validation") {
    Rng rng(96);
    const PanelData p = random_panel(rng, 5, 8, 2, 6);
    NullSpec bad;
    bad.tau0 = Eigen::VectorXd::Zero(1); // wrong length
    REQUIRE_THROWS_AS(test_null(p, ObjectiveSpec::concatenated(), bad), ValidationError);
    NullSpec pre = zero_null(p, 2); // pre period is not a valid target
    REQUIRE_THROWS_AS(test_null(p, ObjectiveSpec::concatenated(), pre), ValidationError);
}
