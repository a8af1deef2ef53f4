#include <catch2/catch_amalgamated.hpp>

#include "mfslq/meanfield.hpp"
#include "test_problems.hpp"

#include <random>

using namespace mfslq;
using mfslq::testing::scalar;
using Catch::Approx;

namespace {

struct Built {
    ValidatedProblem prob;
    RiccatiSolution ric;
    GainAssembly gains;
    OperatorMatrices ops;
};

Built build(const ProblemSpec& spec) {
    auto prob = validate_problem(spec);
    auto ric = solve_riccati_deterministic(prob);
    auto gains = assemble_gains(prob, ric);
    auto ops = build_operator_matrices(prob, gains, ric);
    return {std::move(prob), std::move(ric), std::move(gains), std::move(ops)};
}

// Outer cost evaluated the long way: flow a from b, chase the targets
// with multipliers, realize the means, quadrature the cost.
double direct_outer_cost(const Built& bl, const GridFunction& b) {
    const auto& prob = bl.prob;
    const auto& grid = prob.grid();
    Matrix flow_b, flow_x;
    detail::build_mean_flow(prob, flow_b, flow_x);
    GridFunction a = GridFunction::from_stacked(grid, prob.state_dim(),
                                                flow_b * b.stacked() + flow_x * prob.x0());
    auto mult = solve_multipliers(prob, bl.gains, bl.ric, bl.ops, prob.x0(), a, b);
    auto phi = solve_phi_deterministic(prob, bl.gains, a, b, mult.lambda, mult.gamma);
    auto means = closed_loop_mean(prob, bl.gains, bl.ric, phi, a, b, mult.lambda, mult.gamma);
    const auto& cf = prob.coeffs();
    Vector w = detail::trapezoid_weights(grid);
    double J = 0.0;
    for (int k = 0; k <= grid.n_steps; ++k) {
        const double t = grid.node(k);
        const Vector x = means.first.node(k);
        const Vector u = means.second.node(k);
        J += w(k) * (x.dot(cf.Q.at(t) * x) + a.node(k).dot(cf.Q1.at(t) * a.node(k)) + u.dot(cf.R.at(t) * u) +
                     b.node(k).dot(cf.R1.at(t) * b.node(k)));
    }
    const Vector xT = means.first.node(grid.n_steps);
    J += xT.dot(cf.G * xT);
    return J;
}

}  // namespace

TEST_CASE("closed-loop mean on CP-LQ1 solves x' = -P x") {
    auto bl = build(testing::cp_lq1(1000));
    const auto& grid = bl.prob.grid();
    GridFunction z = GridFunction::zero(grid, 1);
    auto phi = solve_phi_deterministic(bl.prob, bl.gains, z, z, z, z);
    auto means = closed_loop_mean(bl.prob, bl.gains, bl.ric, phi, z, z, z, z);
    // E[X](t) = (2 - t)/2, E[X](1) = 0.5; E[u] = -P E[X] = -1/2
    CHECK(means.first.node(grid.n_steps)(0) == Approx(0.5).margin(2e-7));
    for (int k = 0; k <= 1000; k += 200) {
        const double t = grid.node(k);
        CHECK(means.first.node(k)(0) == Approx((2.0 - t) / 2.0).margin(2e-7));
        CHECK(means.second.node(k)(0) == Approx(-0.5).margin(2e-7));
    }
}

TEST_CASE("homogeneous zero start has zero means") {
    auto spec = testing::mf1(64);
    spec.x0 = Vector::Zero(1);
    auto bl = build(spec);
    GridFunction z = GridFunction::zero(bl.prob.grid(), 1);
    auto phi = solve_phi_deterministic(bl.prob, bl.gains, z, z, z, z);
    auto means = closed_loop_mean(bl.prob, bl.gains, bl.ric, phi, z, z, z, z);
    CHECK(means.first.max_norm() == 0.0);
    CHECK(means.second.max_norm() == 0.0);
}

TEST_CASE("operator impulse columns reproduce direct runs") {
    auto bl = build(testing::mf1(40));
    const auto& grid = bl.prob.grid();
    GridFunction z = GridFunction::zero(grid, 1);

    // L0 action on x0 is the plain closed-loop mean
    auto phi0 = solve_phi_deterministic(bl.prob, bl.gains, z, z, z, z);
    auto means0 = closed_loop_mean(bl.prob, bl.gains, bl.ric, phi0, z, z, z, z);
    Vector via_ops = bl.ops.L0 * bl.prob.x0();
    CHECK((via_ops - means0.first.stacked()).cwiseAbs().maxCoeff() < 1e-12);

    // random a and gamma inputs against direct propagation
    std::mt19937 gen(7);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    GridFunction a(grid, 1), gamma(grid, 1);
    for (int k = 0; k <= grid.n_steps; ++k) {
        a.values(0, k) = u(gen);
        gamma.values(0, k) = u(gen);
    }
    auto phi = solve_phi_deterministic(bl.prob, bl.gains, a, z, z, gamma);
    auto means = closed_loop_mean(bl.prob, bl.gains, bl.ric, phi, a, z, z, gamma);
    Vector x_pred = bl.ops.L0 * bl.prob.x0() + bl.ops.L1 * a.stacked() + bl.ops.L4 * gamma.stacked();
    Vector u_pred = bl.ops.Lt0 * bl.prob.x0() + bl.ops.Lt1 * a.stacked() + bl.ops.Lt4 * gamma.stacked();
    CHECK((x_pred - means.first.stacked()).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((u_pred - means.second.stacked()).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("operator linearity") {
    auto bl = build(testing::mf1(32));
    const auto& grid = bl.prob.grid();
    std::mt19937 gen(11);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Vector a1(grid.n_nodes()), a2(grid.n_nodes());
    for (int k = 0; k < grid.n_nodes(); ++k) {
        a1(k) = u(gen);
        a2(k) = u(gen);
    }
    Vector lhs = bl.ops.L1 * (a1 + a2);
    Vector rhs = bl.ops.L1 * a1 + bl.ops.L1 * a2;
    CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("multipliers vanish when the target is the plain closed loop") {
    auto spec = testing::cp_lq1(32);  // mean-field couplings and weights all zero
    auto bl = build(spec);
    const auto& grid = bl.prob.grid();
    GridFunction z = GridFunction::zero(grid, 1);
    auto phi0 = solve_phi_deterministic(bl.prob, bl.gains, z, z, z, z);
    auto means0 = closed_loop_mean(bl.prob, bl.gains, bl.ric, phi0, z, z, z, z);
    auto mult = solve_multipliers(bl.prob, bl.gains, bl.ric, bl.ops, bl.prob.x0(), means0.first, means0.second);
    CHECK(mult.lambda.max_norm() < 1e-9);
    CHECK(mult.gamma.max_norm() < 1e-9);
    CHECK(mult.residual_max < 1e-10);
}

TEST_CASE("unattainable target at t = 0 reports a residual") {
    auto bl = build(testing::mf1(24));
    const auto& grid = bl.prob.grid();
    GridFunction z = GridFunction::zero(grid, 1);
    auto phi0 = solve_phi_deterministic(bl.prob, bl.gains, z, z, z, z);
    auto means0 = closed_loop_mean(bl.prob, bl.gains, bl.ric, phi0, z, z, z, z);
    GridFunction a = means0.first;
    a.values(0, 0) += 1.0;  // no multiplier moves E[X](0)
    auto mult = solve_multipliers(bl.prob, bl.gains, bl.ric, bl.ops, bl.prob.x0(), a, means0.second);
    CHECK(mult.residual_max > 0.5);
}

TEST_CASE("multiplier solve matches a dense min-norm least squares oracle") {
    auto bl = build(testing::mf1(2));  // 3 nodes
    const auto& grid = bl.prob.grid();
    const Eigen::Index xr = bl.ops.x_rows(), ur = bl.ops.u_rows();
    Matrix S(xr + ur, xr + ur);
    S.topLeftCorner(xr, xr) = bl.ops.L3;
    S.topRightCorner(xr, ur) = bl.ops.L4;
    S.bottomLeftCorner(ur, xr) = bl.ops.Lt3;
    S.bottomRightCorner(ur, ur) = bl.ops.Lt4;

    GridFunction a(grid, 1), b(grid, 1);
    a.values << 1.0, 0.9, 0.7;
    b.values << -0.4, -0.3, -0.2;
    auto mult = solve_multipliers(bl.prob, bl.gains, bl.ric, bl.ops, bl.prob.x0(), a, b);

    GridFunction z = GridFunction::zero(grid, 1);
    auto base = detail::propagate_mean(bl.prob, bl.gains, bl.ric, bl.prob.x0(), a, b, z, z);
    Vector t(xr + ur);
    t.head(xr) = a.stacked() - base.x_stack;
    t.tail(ur) = b.stacked() - base.u_stack;
    Eigen::CompleteOrthogonalDecomposition<Matrix> cod(S);
    cod.setThreshold(1e-10);
    Vector oracle = cod.solve(t);
    Vector got(xr + ur);
    got.head(xr) = mult.lambda.stacked();
    got.tail(ur) = mult.gamma.stacked();
    CHECK((got - oracle).cwiseAbs().maxCoeff() < 1e-8 * std::max(1.0, oracle.cwiseAbs().maxCoeff()));
}

TEST_CASE("outer quadratic form agrees with direct trajectory costs") {
    auto bl = build(testing::mf1(24));
    const auto& grid = bl.prob.grid();
    auto q = build_outer_quadratic(bl.prob, bl.ops);
    std::mt19937 gen(3);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int probe = 0; probe < 3; ++probe) {
        GridFunction b(grid, 1);
        for (int k = 0; k < grid.n_nodes(); ++k) b.values(0, k) = u(gen);
        const double via_form = q.evaluate(b.stacked());
        const double direct = direct_outer_cost(bl, b);
        CHECK(via_form == Approx(direct).epsilon(1e-6));
    }
}

TEST_CASE("outer system matrix is PSD under random probes") {
    auto bl = build(testing::mf1(20));
    auto q = build_outer_quadratic(bl.prob, bl.ops);
    std::mt19937 gen(5);
    std::normal_distribution<double> g(0.0, 1.0);
    for (int probe = 0; probe < 20; ++probe) {
        Vector v(q.hessian.rows());
        for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = g(gen);
        CHECK(v.dot(q.hessian * v) >= -1e-10 * v.squaredNorm());
    }
}

TEST_CASE("quadrature-weighted adjoint identity for the mean maps") {
    auto bl = build(testing::mf1(16));
    const Vector& w = bl.ops.weights;
    const Eigen::Index xr = bl.ops.x_rows();
    Matrix Wx = Matrix::Zero(xr, xr);
    for (Eigen::Index k = 0; k < xr; ++k) Wx(k, k) = w(k);  // n = 1
    // adjoint of L1 with respect to <.,.>_W on both sides
    Matrix L1_adj = Wx.inverse() * bl.ops.L1.transpose() * Wx;
    std::mt19937 gen(9);
    std::normal_distribution<double> g(0.0, 1.0);
    for (int probe = 0; probe < 10; ++probe) {
        Vector v(xr), z(xr);
        for (Eigen::Index i = 0; i < xr; ++i) {
            v(i) = g(gen);
            z(i) = g(gen);
        }
        const double lhs = (bl.ops.L1 * v).dot(Wx * z);
        const double rhs = v.dot(Wx * (L1_adj * z));
        CHECK(lhs == Approx(rhs).margin(1e-10 * std::max(1.0, std::abs(lhs))));
    }
}

TEST_CASE("mean-field-off pipeline reduces to the plain Riccati law") {
    auto sol = solve_mfslq(validate_problem(testing::cp_lq1(500)));
    auto prob = validate_problem(testing::cp_lq1(500));
    auto ric = solve_riccati_deterministic(prob);
    auto gains = assemble_gains(prob, ric);
    double gain_diff = 0.0, offset_norm = 0.0;
    for (int k = 0; k <= 500; ++k) {
        gain_diff = std::max(gain_diff, (sol.law.gain[static_cast<std::size_t>(k)] - gains.at(k).gain)
                                            .cwiseAbs()
                                            .maxCoeff());
        offset_norm = std::max(offset_norm, sol.law.offset[static_cast<std::size_t>(k)].cwiseAbs().maxCoeff());
    }
    CHECK(gain_diff <= 1e-10);
    CHECK(offset_norm <= 1e-10);
    CHECK(sol.multipliers.lambda.max_norm() == 0.0);
    CHECK(sol.multipliers.gamma.max_norm() == 0.0);
    CHECK(sol.diagnostics.outer.degenerate_fast_path);
}

TEST_CASE("homogeneous zero start solves to the zero pair") {
    auto spec = testing::mf1(32);
    spec.x0 = Vector::Zero(1);
    auto sol = solve_mfslq(validate_problem(spec));
    CHECK(sol.pair.a.max_norm() < 1e-12);
    CHECK(sol.pair.b.max_norm() < 1e-12);
}

TEST_CASE("MF-1 solution passes the consistency battery") {
    auto sol = solve_mfslq(validate_problem(testing::mf1(200)));
    CHECK(sol.diagnostics.mean_state_residual <= 1e-6);
    CHECK(sol.diagnostics.mean_control_residual <= 1e-6);
    CHECK(sol.multipliers.residual_max < 1e-6);
}

TEST_CASE("outer optimum is a minimum along feasible directions") {
    auto bl = build(testing::mf1(48));
    auto q = build_outer_quadratic(bl.prob, bl.ops);
    OuterSolveDiagnostics diag;
    auto pair = solve_mean_field(bl.prob, bl.gains, bl.ric, bl.ops, &diag);
    const Vector b_star = pair.b.stacked();
    const double J_star = q.evaluate(b_star);
    std::mt19937 gen(17);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int dir = 0; dir < 10; ++dir) {
        Vector w(b_star.size());
        for (Eigen::Index i = 0; i < w.size(); ++i) w(i) = u(gen);
        for (double eps : {1e-2, -1e-2, 1e-3, -1e-3}) {
            CHECK(q.evaluate(b_star + eps * w) - J_star >= -1e-10);
        }
    }
}

TEST_CASE("pipeline is deterministic") {
    auto s1 = solve_mfslq(validate_problem(testing::mf1(64)));
    auto s2 = solve_mfslq(validate_problem(testing::mf1(64)));
    CHECK((s1.pair.a.values - s2.pair.a.values).cwiseAbs().maxCoeff() == 0.0);
    CHECK((s1.pair.b.values - s2.pair.b.values).cwiseAbs().maxCoeff() == 0.0);
    CHECK((s1.multipliers.lambda.values - s2.multipliers.lambda.values).cwiseAbs().maxCoeff() == 0.0);
    for (int k = 0; k <= 64; ++k)
        CHECK((s1.law.offset[static_cast<std::size_t>(k)] - s2.law.offset[static_cast<std::size_t>(k)])
                  .cwiseAbs()
                  .maxCoeff() == 0.0);
}
