#include <catch2/catch_amalgamated.hpp>

#include "mfslq/simulate.hpp"
#include "test_problems.hpp"

#include <cstdlib>

using namespace mfslq;
using mfslq::testing::scalar;
using Catch::Approx;

namespace {

FeedbackLaw law_from(const MfslqSolution& sol) { return sol.law; }

MeanClosure frozen_zero(const ValidatedProblem& prob) {
    return MeanClosure::frozen(GridFunction::zero(prob.grid(), prob.state_dim()),
                               GridFunction::zero(prob.grid(), prob.control_dim()));
}

}  // namespace

TEST_CASE("zero dynamics keep the state at x0") {
    auto spec = testing::cp_lq1(32);
    spec.coeffs.B = TimeVaryingMatrix::constant(scalar(0.0));
    spec.x0 = Vector::Constant(1, 0.7);
    auto prob = validate_problem(spec);
    NoiseBundle noise(prob.grid(), prob.jumps(), 8, 5);
    auto paths = simulate_state(prob, ControlPath::open(GridFunction::zero(prob.grid(), 1)), noise,
                                frozen_zero(prob));
    for (long p = 0; p < 8; ++p)
        for (int k = 0; k <= 32; ++k) CHECK(paths.state(p, k)(0) == 0.7);
}

TEST_CASE("pure drift A = 1 integrates to e within O(dt)") {
    auto spec = testing::cp_lq1(1000);
    spec.coeffs.A = TimeVaryingMatrix::constant(scalar(1.0));
    auto prob = validate_problem(spec);
    NoiseBundle noise(prob.grid(), prob.jumps(), 1, 1);
    auto paths = simulate_state(prob, ControlPath::open(GridFunction::zero(prob.grid(), 1)), noise,
                                frozen_zero(prob));
    CHECK(std::abs(paths.state(0, 1000)(0) - std::exp(1.0)) < 3e-3);
}

TEST_CASE("compensated multiplicative jumps are mean preserving") {
    // alpha(z1) = 1, all other noise channels off: E[X(T)] = x0.
    ProblemSpec spec;
    spec.state_dim = 1;
    spec.control_dim = 1;
    spec.x0 = Vector::Constant(1, 1.0);
    spec.grid = TimeGrid(1.0, 100);
    spec.jumps = JumpModel({"z1"}, {2.0});
    spec.coeffs.B = TimeVaryingMatrix::constant(scalar(1.0));
    spec.coeffs.R = TimeVaryingMatrix::constant(scalar(1.0));
    spec.coeffs.G = scalar(0.0);
    spec.coeffs.alpha = {TimeVaryingMatrix::constant(scalar(1.0))};
    spec.coeffs.delta = 0.5;
    auto prob = validate_problem(spec);
    const long P = 40000;
    NoiseBundle noise(prob.grid(), prob.jumps(), P, 99);
    auto paths = simulate_state(prob, ControlPath::open(GridFunction::zero(prob.grid(), 1)), noise,
                                frozen_zero(prob));
    auto mt = estimate_mean_trajectory(paths);
    const double se = mt.std_error.values(0, 100);
    CHECK(std::abs(mt.mean.values(0, 100) - 1.0) <= 5.0 * std::max(se, 1e-12));
}

TEST_CASE("martingale property with diffusion and zero drift") {
    ProblemSpec spec;
    spec.state_dim = 1;
    spec.control_dim = 1;
    spec.x0 = Vector::Constant(1, 2.0);
    spec.grid = TimeGrid(1.0, 50);
    spec.coeffs.C = TimeVaryingMatrix::constant(scalar(0.8));
    spec.coeffs.B = TimeVaryingMatrix::constant(scalar(1.0));
    spec.coeffs.R = TimeVaryingMatrix::constant(scalar(1.0));
    spec.coeffs.G = scalar(0.0);
    spec.coeffs.delta = 0.5;
    auto prob = validate_problem(spec);
    const long P = 40000;
    NoiseBundle noise(prob.grid(), prob.jumps(), P, 321);
    auto paths = simulate_state(prob, ControlPath::open(GridFunction::zero(prob.grid(), 1)), noise,
                                frozen_zero(prob));
    auto mt = estimate_mean_trajectory(paths);
    for (int k = 10; k <= 50; k += 10) {
        const double se = mt.std_error.values(0, k);
        CHECK(std::abs(mt.mean.values(0, k) - 2.0) <= 5.0 * se);
    }
}

TEST_CASE("identical seeds give bitwise-identical bundles under any worker count") {
    auto prob = validate_problem(testing::cp_j1(64));
    NoiseBundle noise(prob.grid(), prob.jumps(), 2048, 424242);
    GridFunction u = GridFunction::constant(prob.grid(), Vector::Constant(1, -0.3));

    setenv("MFSLQ_THREADS", "1", 1);
    auto paths1 = simulate_state(prob, ControlPath::open(u), noise, frozen_zero(prob));
    setenv("MFSLQ_THREADS", "4", 1);
    auto paths4 = simulate_state(prob, ControlPath::open(u), noise, frozen_zero(prob));
    setenv("MFSLQ_THREADS", "8", 1);
    auto paths8 = simulate_state(prob, ControlPath::open(u), noise, frozen_zero(prob));
    unsetenv("MFSLQ_THREADS");

    REQUIRE(paths1.states.size() == paths4.states.size());
    CHECK(std::memcmp(paths1.states.data(), paths4.states.data(), paths1.states.size() * sizeof(double)) == 0);
    CHECK(std::memcmp(paths1.states.data(), paths8.states.data(), paths1.states.size() * sizeof(double)) == 0);

    // streaming cost estimate is identical too
    setenv("MFSLQ_THREADS", "1", 1);
    auto c1 = estimate_cost_mc(prob, ControlPath::open(u), noise, frozen_zero(prob));
    setenv("MFSLQ_THREADS", "8", 1);
    auto c8 = estimate_cost_mc(prob, ControlPath::open(u), noise, frozen_zero(prob));
    unsetenv("MFSLQ_THREADS");
    CHECK(c1.value == c8.value);
    CHECK(c1.std_error == c8.std_error);
}

TEST_CASE("the scheme is affine in (state, control) for fixed noise") {
    auto spec = testing::cp_j1(32);
    spec.coeffs.A = TimeVaryingMatrix::constant(scalar(0.4));
    spec.coeffs.C = TimeVaryingMatrix::constant(scalar(0.5));
    spec.coeffs.D = TimeVaryingMatrix::constant(scalar(0.2));
    auto prob = validate_problem(spec);
    NoiseBundle noise(prob.grid(), prob.jumps(), 32, 7);

    GridFunction u1 = GridFunction::constant(prob.grid(), Vector::Constant(1, 0.5));
    GridFunction u2(prob.grid(), 1);
    for (int k = 0; k <= 32; ++k) u2.values(0, k) = std::sin(0.3 * k);
    GridFunction usum = u1;
    usum.values += u2.values;

    auto with_x0 = [&](const GridFunction& u, double x0) {
        auto s = spec;
        s.x0 = Vector::Constant(1, x0);
        auto p = validate_problem(s);
        return simulate_state(p, ControlPath::open(u), noise, frozen_zero(p));
    };
    auto a = with_x0(u1, 1.0);
    auto b = with_x0(u2, 0.0);
    auto c = with_x0(usum, 1.0);
    for (long p = 0; p < 32; ++p)
        for (int k = 0; k <= 32; ++k)
            CHECK(c.state(p, k)(0) == Approx(a.state(p, k)(0) + b.state(p, k)(0)).margin(1e-12));
}

TEST_CASE("cost of the zero state and control is zero") {
    auto spec = testing::cp_lq1(16);
    spec.x0 = Vector::Zero(1);
    auto prob = validate_problem(spec);
    NoiseBundle noise(prob.grid(), prob.jumps(), 4, 2);
    auto paths = simulate_state(prob, ControlPath::open(GridFunction::zero(prob.grid(), 1)), noise,
                                frozen_zero(prob));
    auto est = evaluate_cost(prob, paths);
    CHECK(est.value == 0.0);
    CHECK(est.std_error == 0.0);
}

TEST_CASE("terminal-only cost of a deterministic endpoint") {
    auto spec = testing::cp_lq1(16);
    spec.coeffs.B = TimeVaryingMatrix::constant(scalar(0.0));
    spec.x0 = Vector::Constant(1, 3.0);
    spec.coeffs.R = TimeVaryingMatrix::constant(scalar(1.0));
    auto prob = validate_problem(spec);
    NoiseBundle noise(prob.grid(), prob.jumps(), 8, 12);
    auto paths = simulate_state(prob, ControlPath::open(GridFunction::zero(prob.grid(), 1)), noise,
                                frozen_zero(prob));
    auto est = evaluate_cost(prob, paths);
    CHECK(est.value == Approx(9.0));
    CHECK(est.std_error == 0.0);
}

TEST_CASE("CP-LQ1 under its optimal feedback costs 0.5") {
    auto prob = validate_problem(testing::cp_lq1(1000));
    auto sol = solve_mfslq(prob);
    NoiseBundle noise(prob.grid(), prob.jumps(), 2000, 31415);
    auto closure = MeanClosure::frozen(sol.pair.a, sol.pair.b);
    auto est = estimate_cost_mc(prob, ControlPath::feedback(law_from(sol)), noise, closure);
    const double tol = std::max(3.0 * est.std_error, 5.0 * prob.grid().dt());
    CHECK(std::abs(est.value - 0.5) <= tol);
}

TEST_CASE("bundle-based and streaming costs agree exactly") {
    auto prob = validate_problem(testing::cp_j1(64));
    NoiseBundle noise(prob.grid(), prob.jumps(), 512, 8);
    GridFunction u = GridFunction::constant(prob.grid(), Vector::Constant(1, -0.2));
    auto paths = simulate_state(prob, ControlPath::open(u), noise, frozen_zero(prob));
    auto from_bundle = evaluate_cost(prob, paths);
    auto streaming = estimate_cost_mc(prob, ControlPath::open(u), noise, frozen_zero(prob));
    CHECK(from_bundle.value == streaming.value);
    CHECK(from_bundle.std_error == streaming.std_error);
}

TEST_CASE("single-path mean trajectory is the path itself") {
    auto prob = validate_problem(testing::cp_lq1(32));
    NoiseBundle noise(prob.grid(), prob.jumps(), 1, 5);
    GridFunction u = GridFunction::constant(prob.grid(), Vector::Constant(1, 0.1));
    auto paths = simulate_state(prob, ControlPath::open(u), noise, frozen_zero(prob));
    auto mt = estimate_mean_trajectory(paths);
    for (int k = 0; k <= 32; ++k) {
        CHECK(mt.mean.values(0, k) == paths.state(0, k)(0));
        CHECK(mt.std_error.values(0, k) == 0.0);
    }
}

TEST_CASE("closed-loop sample mean matches the mean ODE") {
    auto prob = validate_problem(testing::cp_lq1(200));
    auto sol = solve_mfslq(prob);
    NoiseBundle noise(prob.grid(), prob.jumps(), 1000, 17);
    auto closure = MeanClosure::frozen(sol.pair.a, sol.pair.b);
    auto paths = simulate_state(prob, ControlPath::feedback(law_from(sol)), noise, closure);
    auto mt = estimate_mean_trajectory(paths);
    for (int k = 0; k <= 200; k += 40) {
        const double se = mt.std_error.values(0, k);
        const double dt = prob.grid().dt();
        CHECK(std::abs(mt.mean.values(0, k) - sol.pair.a.values(0, k)) <= 3.0 * se + 10.0 * dt * dt);
    }
}

TEST_CASE("per-fixed-noise cost is convex in the control with vertex near zero") {
    auto prob = validate_problem(testing::cp_j1(100));
    auto sol = solve_mfslq(prob);
    NoiseBundle noise(prob.grid(), prob.jumps(), 4000, 7777);
    auto closure = MeanClosure::frozen(sol.pair.a, sol.pair.b);

    const double J0 = estimate_cost_mc(prob, ControlPath::feedback(sol.law), noise, closure).value;
    std::vector<double> eps = {-0.1, -0.01, 0.01, 0.1};
    std::vector<double> dj;
    std::vector<double> se;
    for (double e : eps) {
        auto est = estimate_cost_mc(prob, ControlPath::perturbed(sol.law, e, 99), noise, closure);
        dj.push_back(est.value - J0);
        se.push_back(est.std_error);
    }
    // fit dj = a e^2 + c e
    Matrix X(4, 2);
    Vector y(4);
    for (int i = 0; i < 4; ++i) {
        X(i, 0) = eps[static_cast<std::size_t>(i)] * eps[static_cast<std::size_t>(i)];
        X(i, 1) = eps[static_cast<std::size_t>(i)];
        y(i) = dj[static_cast<std::size_t>(i)];
    }
    Vector fit = (X.transpose() * X).ldlt().solve(X.transpose() * y);
    const double curvature = fit(0);
    const double slope = fit(1);
    CHECK(curvature >= 0.0);
    // vertex -c/(2a) within MC error of 0
    const double vertex = std::abs(slope) < 1e-300 ? 0.0 : -slope / (2.0 * curvature);
    CHECK(std::abs(vertex) < 0.02);
}

TEST_CASE("missing mean closure is reported for a single interacting path") {
    auto prob = validate_problem(testing::mf1(16));
    NoiseBundle noise(prob.grid(), prob.jumps(), 1, 4);
    GridFunction u = GridFunction::zero(prob.grid(), 1);
    CHECK_THROWS_AS(simulate_state(prob, ControlPath::open(u), noise, MeanClosure::sample()), Error);
}

TEST_CASE("ControlPath direction draws are bounded and reproducible") {
    ControlPath c = ControlPath::perturbed(FeedbackLaw{}, 0.1, 555);
    for (long p = 0; p < 16; ++p)
        for (int k = 0; k < 16; ++k) {
            Vector v1 = c.direction(p, k, 3);
            Vector v2 = c.direction(p, k, 3);
            CHECK(v1 == v2);
            CHECK(v1.cwiseAbs().maxCoeff() <= 1.0);
        }
}
