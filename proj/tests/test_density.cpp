#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>

#include "oracles.hpp"
#include "scorelab/density.hpp"

using namespace scorelab;
using density::DiffusedDensity;
using density::GaussianDensity;
using density::MixtureDensity;
using density::NoiseSchedule;

namespace {

// Schedule whose first step leaves the base density essentially untouched,
// so closed-form checks against the undiffused density hold to ~1e-12.
NoiseSchedule near_identity_schedule() { return NoiseSchedule::linear(50, 1e-14, 1e-13); }

DiffusedDensity unit_gaussian_2d() {
    GaussianDensity g(Eigen::Vector2d::Zero(), Eigen::Matrix2d::Identity());
    return DiffusedDensity(MixtureDensity::single(std::move(g)), near_identity_schedule());
}

DiffusedDensity diag14_gaussian() {
    GaussianDensity g(Eigen::Vector2d::Zero(), Eigen::Vector2d(1.0, 4.0).asDiagonal());
    return DiffusedDensity(MixtureDensity::single(std::move(g)), near_identity_schedule());
}

DiffusedDensity random_mixture(Rng& rng, int dim, int n_comps, NoiseSchedule sched) {
    std::vector<GaussianDensity> comps;
    Eigen::VectorXd w(n_comps);
    for (int i = 0; i < n_comps; ++i) {
        Eigen::VectorXd mu(dim);
        for (int k = 0; k < dim; ++k) mu[k] = rng.uniform(-2.0, 2.0);
        comps.emplace_back(mu, oracle::random_spd(dim, rng));
        w[i] = rng.uniform(0.2, 1.0);
    }
    w /= w.sum();
    return DiffusedDensity(MixtureDensity(std::move(comps), std::move(w)), std::move(sched));
}

std::vector<oracle::WeightedGaussian> marginal_oracle_components(const DiffusedDensity& d, int t) {
    std::vector<oracle::WeightedGaussian> out;
    for (std::size_t i = 0; i < d.base.components.size(); ++i) {
        const auto g = d.marginal_component(i, t);
        out.push_back({g.mean, g.covariance, d.base.weights[static_cast<Eigen::Index>(i)]});
    }
    return out;
}

}  // namespace

TEST_CASE("noise schedule invariants") {
    const auto s = NoiseSchedule::linear(50);
    REQUIRE(s.T == 50);
    double prod = 1.0;
    double prev_ab = 2.0;
    double prev_sigma = -1.0;
    for (int t = 1; t <= s.T; ++t) {
        prod *= 1.0 - s.beta(t);
        REQUIRE(s.alpha_bar(t) == Catch::Approx(prod).epsilon(0).margin(1e-15));
        REQUIRE(s.alpha_bar(t) < prev_ab);
        REQUIRE(s.sigma(t) > prev_sigma);
        prev_ab = s.alpha_bar(t);
        prev_sigma = s.sigma(t);
    }
    // a lab-scale schedule reaches the pure-noise regime
    const auto lab = NoiseSchedule::linear(50, 0.01, 0.10);
    REQUIRE(lab.sigma(lab.T) > 0.95);
    REQUIRE_THROWS_AS(s.check_step(0), std::out_of_range);
    REQUIRE_THROWS_AS(s.check_step(51), std::out_of_range);
    REQUIRE_THROWS_AS(NoiseSchedule::linear(0), std::invalid_argument);
    REQUIRE_THROWS_AS(NoiseSchedule::linear(10, 0.5, 0.1), std::invalid_argument);
}

TEST_CASE("log_prob closed forms on the unit Gaussian") {
    const auto d = unit_gaussian_2d();
    const double log2pi = std::log(2.0 * std::numbers::pi);
    REQUIRE(density::log_prob(d, Eigen::Vector2d(0, 0), 1) == Catch::Approx(-log2pi).margin(1e-9));
    REQUIRE(density::log_prob(d, Eigen::Vector2d(1, 0), 1) == Catch::Approx(-log2pi - 0.5).margin(1e-9));
}

TEST_CASE("log_prob matches the direct-formula oracle on mixtures") {
    Rng rng(11);
    for (int rep = 0; rep < 20; ++rep) {
        const auto d = random_mixture(rng, 2, 2, NoiseSchedule::linear(50));
        const int t = rng.uniform_int(1, 50);
        const Eigen::Vector2d x(rng.uniform(-3, 3), rng.uniform(-3, 3));
        const double want = oracle::direct_mixture_log_prob(marginal_oracle_components(d, t), x);
        REQUIRE(density::log_prob(d, x, t) == Catch::Approx(want).margin(1e-10));
    }
}

TEST_CASE("log_prob validates inputs") {
    const auto d = unit_gaussian_2d();
    REQUIRE_THROWS_AS(density::log_prob(d, Eigen::Vector3d::Zero(), 1), std::invalid_argument);
    REQUIRE_THROWS_AS(density::log_prob(d, Eigen::Vector2d::Zero(), 0), std::out_of_range);
    REQUIRE_THROWS_AS(density::log_prob(d, Eigen::Vector2d::Zero(), 51), std::out_of_range);
}

TEST_CASE("score closed forms") {
    const auto unit = unit_gaussian_2d();
    const Eigen::VectorXd s1 = density::score(unit, Eigen::Vector2d(1, 0), 1);
    REQUIRE(s1[0] == Catch::Approx(-1.0).margin(1e-9));
    REQUIRE(s1[1] == Catch::Approx(0.0).margin(1e-12));

    const auto aniso = diag14_gaussian();
    const Eigen::VectorXd s2 = density::score(aniso, Eigen::Vector2d(1, 1), 1);
    REQUIRE(s2[0] == Catch::Approx(-1.0).margin(1e-9));
    REQUIRE(s2[1] == Catch::Approx(-0.25).margin(1e-9));
}

TEST_CASE("score matches finite differences of log_prob") {
    Rng rng(12);
    const auto d = random_mixture(rng, 2, 3, NoiseSchedule::linear(50));
    for (int rep = 0; rep < 20; ++rep) {
        const int t = rng.uniform_int(1, 50);
        const Eigen::Vector2d x(rng.uniform(-3, 3), rng.uniform(-3, 3));
        const Eigen::VectorXd got = density::score(d, x, t);
        const Eigen::VectorXd want = oracle::fd_gradient(
            [&](const Eigen::VectorXd& p) { return density::log_prob(d, p, t); }, x, 1e-5);
        REQUIRE(oracle::rel_error(got, want) < 1e-5);
    }
}

TEST_CASE("score_norm closed forms") {
    const auto unit = unit_gaussian_2d();
    REQUIRE(density::score_norm(unit, Eigen::Vector2d(1, 0), 1) == Catch::Approx(1.0).margin(1e-9));
    REQUIRE(density::score_norm(unit, Eigen::Vector2d(0, 0), 1) == Catch::Approx(0.0).margin(1e-12));

    // sqrt((x-mu)^T Sigma^-2 (x-mu)) for Sigma = diag(1,4) at (1,1)
    const auto aniso = diag14_gaussian();
    REQUIRE(density::score_norm(aniso, Eigen::Vector2d(1, 1), 1) ==
            Catch::Approx(std::sqrt(17.0) / 4.0).margin(1e-9));
}

TEST_CASE("score_norm agrees with the quadratic closed form for single Gaussians") {
    Rng rng(13);
    for (int rep = 0; rep < 50; ++rep) {
        const auto d = random_mixture(rng, 2, 1, NoiseSchedule::linear(50));
        const int t = rng.uniform_int(1, 50);
        const Eigen::Vector2d x(rng.uniform(-3, 3), rng.uniform(-3, 3));
        const auto g = d.marginal_component(0, t);
        const Eigen::MatrixXd inv = g.covariance.inverse();
        const Eigen::VectorXd diff = x - g.mean;
        const double closed = std::sqrt(diff.dot(inv * inv * diff));
        REQUIRE(density::score_norm(d, x, t) == Catch::Approx(closed).margin(1e-10));
    }
}

TEST_CASE("hessian closed forms and symmetry") {
    const auto unit = unit_gaussian_2d();
    const Eigen::MatrixXd h1 = density::hessian(unit, Eigen::Vector2d(0.3, -0.7), 1);
    REQUIRE((h1 + Eigen::Matrix2d::Identity()).cwiseAbs().maxCoeff() < 1e-9);

    const auto aniso = diag14_gaussian();
    const Eigen::MatrixXd h2 = density::hessian(aniso, Eigen::Vector2d(1, 1), 1);
    REQUIRE(h2(0, 0) == Catch::Approx(-1.0).margin(1e-9));
    REQUIRE(h2(1, 1) == Catch::Approx(-0.25).margin(1e-9));
    REQUIRE(std::abs(h2(0, 1)) < 1e-10);
    REQUIRE((h2 - h2.transpose()).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("hessian matches finite differences of score") {
    Rng rng(14);
    const auto d = random_mixture(rng, 2, 3, NoiseSchedule::linear(50));
    for (int rep = 0; rep < 10; ++rep) {
        const int t = rng.uniform_int(1, 50);
        const Eigen::Vector2d x(rng.uniform(-2, 2), rng.uniform(-2, 2));
        const Eigen::MatrixXd got = density::hessian(d, x, t);
        const Eigen::MatrixXd want = oracle::fd_jacobian(
            [&](const Eigen::VectorXd& p) { return density::score(d, p, t); }, x, 1e-4);
        REQUIRE((got - want).cwiseAbs().maxCoeff() < 1e-4);
    }
}

TEST_CASE("eigenvalue variance closed forms") {
    const auto unit = unit_gaussian_2d();
    REQUIRE(density::eigenvalue_variance(unit, Eigen::Vector2d(0.5, 0.5), 1) < 1e-12);

    // Hessian diag(-1, -0.25): population variance of {-1, -0.25} = 0.140625
    const auto aniso = diag14_gaussian();
    REQUIRE(density::eigenvalue_variance(aniso, Eigen::Vector2d(1, 1), 1) ==
            Catch::Approx(0.140625).margin(1e-9));
}

TEST_CASE("eigenvalue variance is zero for isotropic marginals at every step") {
    Rng rng(15);
    const auto sched = NoiseSchedule::linear(50);
    for (int rep = 0; rep < 10; ++rep) {
        const double s2 = rng.uniform(0.2, 3.0);
        Eigen::VectorXd mu(2);
        mu << rng.uniform(-2, 2), rng.uniform(-2, 2);
        // several coincident isotropic components: the marginal stays isotropic
        std::vector<GaussianDensity> comps;
        const int k = rng.uniform_int(1, 3);
        for (int i = 0; i < k; ++i)
            comps.emplace_back(mu, s2 * Eigen::Matrix2d::Identity());
        const DiffusedDensity d(MixtureDensity(std::move(comps), Eigen::VectorXd::Constant(k, 1.0 / k)),
                                sched);
        const Eigen::Vector2d x(rng.uniform(-3, 3), rng.uniform(-3, 3));
        for (const int t : {1, 10, 25, 50})
            REQUIRE(density::eigenvalue_variance(d, x, t) < 1e-12);
    }
}

TEST_CASE("diffusion flattens anisotropy at a fixed probe") {
    GaussianDensity g(Eigen::Vector2d::Zero(), Eigen::Vector2d(4.0, 0.25).asDiagonal());
    const DiffusedDensity d(MixtureDensity::single(std::move(g)), NoiseSchedule::linear(50));
    const Eigen::Vector2d probe(0.7, -0.4);
    const double early = density::eigenvalue_variance(d, probe, 1);
    const double late = density::eigenvalue_variance(d, probe, 50);
    REQUIRE(late < early);

    // anisotropic two-mode mixture shows the same trend
    Rng rng(16);
    std::vector<GaussianDensity> comps;
    comps.emplace_back(Eigen::Vector2d(-1.0, 0.0), Eigen::Vector2d(0.5, 0.05).asDiagonal());
    comps.emplace_back(Eigen::Vector2d(1.0, 0.5), Eigen::Vector2d(0.05, 0.4).asDiagonal());
    const DiffusedDensity mix(MixtureDensity(std::move(comps), Eigen::Vector2d(0.5, 0.5)),
                              NoiseSchedule::linear(50));
    REQUIRE(density::eigenvalue_variance(mix, probe, 50) < density::eigenvalue_variance(mix, probe, 1));
}

TEST_CASE("density type validation") {
    REQUIRE_THROWS_AS(GaussianDensity(Eigen::Vector2d::Zero(), Eigen::MatrixXd::Zero(3, 3)),
                      std::invalid_argument);
    Eigen::Matrix2d asym;
    asym << 1.0, 0.5, 0.2, 1.0;
    REQUIRE_THROWS_AS(GaussianDensity(Eigen::Vector2d::Zero(), asym), std::invalid_argument);
    REQUIRE_THROWS_AS(GaussianDensity(Eigen::Vector2d::Zero(), -Eigen::Matrix2d::Identity()),
                      std::invalid_argument);

    GaussianDensity ok(Eigen::Vector2d::Zero(), Eigen::Matrix2d::Identity());
    REQUIRE_THROWS_AS(MixtureDensity({}, Eigen::VectorXd()), std::invalid_argument);
    REQUIRE_THROWS_AS(MixtureDensity({ok}, Eigen::VectorXd::Constant(1, 0.5)), std::invalid_argument);
}

TEST_CASE("density json round trip") {
    Rng rng(17);
    const auto d = random_mixture(rng, 2, 2, NoiseSchedule::linear(25, 1e-4, 0.1));
    const auto j = density::to_json(d);
    const auto back = density::from_json(j);
    REQUIRE(back.schedule.T == 25);
    REQUIRE(back.base.components.size() == 2);
    const Eigen::Vector2d x(0.3, -0.8);
    REQUIRE(density::log_prob(back, x, 7) == Catch::Approx(density::log_prob(d, x, 7)).epsilon(0).margin(0));
}
