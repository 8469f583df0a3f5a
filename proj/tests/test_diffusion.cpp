#include "doctest.h"

#include <cmath>

#include "hadmst/diffusion.hpp"
#include "hadmst/model.hpp"

using namespace hadmst;

TEST_CASE("linear schedule values and validation") {
    auto s = diff::build_linear_schedule(10, 1e-4, 0.02);
    REQUIRE(s.T == 10);
    CHECK(s.beta_at(1) == doctest::Approx(1e-4));
    CHECK(s.beta_at(10) == doctest::Approx(0.02));
    // scalar-loop oracle: interpolation, alpha, cumulative product
    double abar = 1.0;
    for (int t = 1; t <= 10; ++t) {
        double expected_beta = 1e-4 + (0.02 - 1e-4) * (t - 1) / 9.0;
        CHECK(s.beta_at(t) == doctest::Approx(expected_beta).epsilon(1e-12));
        CHECK(s.alpha_at(t) == doctest::Approx(1.0 - expected_beta).epsilon(1e-12));
        abar *= 1.0 - expected_beta;
        CHECK(s.alpha_bar_at(t) == doctest::Approx(abar).epsilon(1e-12));
        CHECK(s.sigma2_at(t) == doctest::Approx(expected_beta).epsilon(1e-12));
    }
    CHECK_THROWS_AS(s.beta_at(0), std::out_of_range);
    CHECK_THROWS_AS(s.beta_at(11), std::out_of_range);
    CHECK_THROWS(diff::build_linear_schedule(0, 1e-4, 0.02));
    CHECK_THROWS(diff::build_linear_schedule(10, 0.0, 0.02));
    CHECK_THROWS(diff::build_linear_schedule(10, 0.02, 1e-4));
    CHECK_THROWS(diff::build_linear_schedule(10, 1e-4, 1.0));

    // T = 1 edge case: single step
    auto s1 = diff::build_linear_schedule(1, 0.01, 0.01);
    CHECK(s1.beta_at(1) == doctest::Approx(0.01));
    CHECK(s1.alpha_bar_at(1) == doctest::Approx(0.99));
}

TEST_CASE("iterated single steps match the closed-form marginal in distribution") {
    auto s = diff::build_linear_schedule(8, 0.05, 0.3);
    Array x0({2, 2}, std::vector<double>{0.8, -0.5, 0.1, 1.0});
    const int trials = 20000;
    const int t = 8;
    // Monte-Carlo moments of the iterated chain
    Array mean_it({2, 2}), var_it({2, 2});
    Rng rng(123);
    for (int k = 0; k < trials; ++k) {
        Array x = x0;
        for (int step = 1; step <= t; ++step) x = diff::q_step(x, step, s, rng);
        for (int i = 0; i < 4; ++i) {
            mean_it[i] += x[i];
            var_it[i] += x[i] * x[i];
        }
    }
    double abar = s.alpha_bar_at(t);
    for (int i = 0; i < 4; ++i) {
        mean_it[i] /= trials;
        var_it[i] = var_it[i] / trials - mean_it[i] * mean_it[i];
        // analytic marginal: N(sqrt(abar) x0, 1 - abar)
        CHECK(mean_it[i] == doctest::Approx(std::sqrt(abar) * x0[i]).epsilon(0.08));
        CHECK(var_it[i] == doctest::Approx(1.0 - abar).epsilon(0.08));
    }

    // and the closed form agrees exactly with its definition
    Array eps({2, 2}, std::vector<double>{1.0, -1.0, 0.5, 0.0});
    Array xt = diff::q_sample(x0, t, eps, s);
    for (int i = 0; i < 4; ++i)
        CHECK(xt[i] ==
              doctest::Approx(std::sqrt(abar) * x0[i] + std::sqrt(1 - abar) * eps[i]));
}

TEST_CASE("terminal marginal is nearly pure noise for a long schedule") {
    auto s = diff::build_linear_schedule(60, 1e-4, 0.35);
    CHECK(s.alpha_bar_at(60) < 1e-4);
    Array x0({4}, std::vector<double>{1, -1, 1, -1});
    Array eps({4}, std::vector<double>{0.3, 0.7, -0.2, 0.1});
    Array xt = diff::q_sample(x0, 60, eps, s);
    for (int i = 0; i < 4; ++i) CHECK(std::fabs(xt[i] - eps[i]) < 0.02);
}

TEST_CASE("reverse posterior mean: scalar oracle and exact recovery at t=1") {
    auto s = diff::build_linear_schedule(5, 0.02, 0.2);
    Array x0({3}, std::vector<double>{0.4, -0.9, 0.0});
    Array eps({3}, std::vector<double>{-1.2, 0.3, 0.9});
    for (int t = 1; t <= 5; ++t) {
        Array xt = diff::q_sample(x0, t, eps, s);
        Array mu = diff::compute_mu(xt, eps, t, s);
        for (int i = 0; i < 3; ++i) {
            double expect = (xt[i] - s.beta_at(t) / std::sqrt(1 - s.alpha_bar_at(t)) * eps[i]) /
                            std::sqrt(s.alpha_at(t));
            CHECK(mu[i] == doctest::Approx(expect).epsilon(1e-12));
        }
    }
    // with the true noise, the t=1 step returns x0 exactly (no noise added)
    Rng rng(9);
    Array x1 = diff::q_sample(x0, 1, eps, s);
    Array rec = diff::p_sample_step_from_eps(x1, eps, 1, s, rng);
    for (int i = 0; i < 3; ++i) CHECK(rec[i] == doctest::Approx(x0[i]).epsilon(1e-10));
}

TEST_CASE("reverse step adds sigma noise for t > 1 and is deterministic per seed") {
    auto s = diff::build_linear_schedule(5, 0.02, 0.2);
    Array xt({2}, std::vector<double>{0.5, -0.5});
    Array eps({2}, std::vector<double>{0.1, 0.2});
    Rng a(42), b(42), c(43);
    Array ra = diff::p_sample_step_from_eps(xt, eps, 3, s, a);
    Array rb = diff::p_sample_step_from_eps(xt, eps, 3, s, b);
    Array rc = diff::p_sample_step_from_eps(xt, eps, 3, s, c);
    CHECK(ra.v == rb.v);
    CHECK(ra.v != rc.v);
    // variance matches sigma^2 = beta_t over many draws
    const int trials = 20000;
    Rng rng(7);
    double m = 0, m2 = 0;
    for (int k = 0; k < trials; ++k) {
        double v = diff::p_sample_step_from_eps(xt, eps, 3, s, rng)[0];
        m += v;
        m2 += v * v;
    }
    m /= trials;
    double var = m2 / trials - m * m;
    CHECK(var == doctest::Approx(s.sigma2_at(3)).epsilon(0.06));
    CHECK(m == doctest::Approx(diff::compute_mu(xt, eps, 3, s)[0]).epsilon(0.05));
}

TEST_CASE("sample loop: shape, clamping, determinism and divergence reporting") {
    auto s = diff::build_linear_schedule(12, 0.05, 0.3);
    // zero predictor: pure schedule dynamics, values stay finite and clamped
    auto zero = [](const Array& x, int) { return Array(x.shape); };
    Rng a(11), b(11);
    Array ra = diff::sample_loop({1, 2, 4, 4}, s, zero, a);
    Array rb = diff::sample_loop({1, 2, 4, 4}, s, zero, b);
    REQUIRE(ra.shape == std::vector<int>{1, 2, 4, 4});
    CHECK(ra.v == rb.v);
    for (double v : ra.v) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
    }
    // exploding predictor is reported with the timestep
    auto blowup = [](const Array& x, int t) {
        Array e(x.shape);
        if (t == 7) e[0] = std::numeric_limits<double>::quiet_NaN();
        return e;
    };
    Rng c(3);
    try {
        diff::sample_loop({1, 1, 2, 2}, s, blowup, c);
        FAIL("expected divergence error");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("timestep 7") != std::string::npos);
    }
}

TEST_CASE("timestep embedding is deterministic, bounded and t-discriminative") {
    Array a = model::timestep_embedding(5, 32);
    Array b = model::timestep_embedding(5, 32);
    Array c = model::timestep_embedding(6, 32);
    CHECK(a.v == b.v);
    CHECK(a.v != c.v);
    for (double v : a.v) CHECK(std::fabs(v) <= 1.0);
    CHECK_THROWS(model::timestep_embedding(3, 7));  // odd width rejected
}
