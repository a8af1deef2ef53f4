#include <catch2/catch_amalgamated.hpp>

#include "mfslq/problem.hpp"
#include "test_problems.hpp"

using namespace mfslq;
using mfslq::testing::scalar;
using Catch::Approx;

TEST_CASE("scalar spec with R=1, delta=0.5 validates") {
    auto prob = validate_problem(testing::cp_lq1(10));
    CHECK(prob.state_dim() == 1);
    CHECK(prob.symmetrization_applied() == 0.0);
}

TEST_CASE("negative Q is rejected as not PSD") {
    auto spec = testing::cp_lq1(10);
    spec.coeffs.Q = TimeVaryingMatrix::constant(scalar(-1.0));
    try {
        validate_problem(spec);
        FAIL("expected NotPSD");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::NotPSD);
        CHECK(std::string(e.what()).find("Q") != std::string::npos);
    }
}

TEST_CASE("wrong B shape is a dimension mismatch naming B") {
    auto spec = testing::cp_lq1(10);
    spec.coeffs.B = TimeVaryingMatrix::constant(Matrix::Ones(1, 2));
    try {
        validate_problem(spec);
        FAIL("expected DimensionMismatch");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::DimensionMismatch);
        CHECK(std::string(e.what()).find("B") != std::string::npos);
    }
}

TEST_CASE("R below delta is rejected with the margin") {
    auto spec = testing::cp_lq1(10);
    spec.coeffs.R = TimeVaryingMatrix::constant(scalar(0.25));
    try {
        validate_problem(spec);
        FAIL("expected RBelowDelta");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::RBelowDelta);
    }
}

TEST_CASE("validation is idempotent") {
    auto prob = validate_problem(testing::cp_lq1(10));
    auto again = validate_problem(prob.spec());
    CHECK(again.symmetrization_applied() == 0.0);
    for (int k = 0; k <= 10; ++k) {
        auto s1 = eval_coefficients(prob, k);
        auto s2 = eval_coefficients(again, k);
        CHECK(s1.Q == s2.Q);
        CHECK(s1.R == s2.R);
    }
}

TEST_CASE("weight symmetrization is applied and recorded") {
    auto spec = testing::cp_lq1(4);
    spec.state_dim = 2;
    spec.x0 = Vector::Zero(2);
    Matrix q(2, 2);
    q << 1.0, 0.2, 0.0, 1.0;  // slightly asymmetric
    spec.coeffs.Q = TimeVaryingMatrix::constant(q);
    spec.coeffs.A = TimeVaryingMatrix::constant(Matrix::Zero(2, 2));
    spec.coeffs.B = TimeVaryingMatrix::constant(Matrix::Ones(2, 1));
    spec.coeffs.G = Matrix::Identity(2, 2);
    auto prob = validate_problem(spec);
    CHECK(prob.symmetrization_applied() == Approx(0.1));
    auto s = eval_coefficients(prob, 0);
    CHECK(s.Q(0, 1) == Approx(0.1));
    CHECK(s.Q(1, 0) == Approx(0.1));
}

TEST_CASE("time tables apply from their stamp onward") {
    auto spec = testing::cp_lq1(10);
    spec.coeffs.A = TimeVaryingMatrix::table({0.0, 0.5}, {scalar(1.0), scalar(2.0)});
    auto prob = validate_problem(spec);
    // t = 0.5 is node 5 on a 10-step unit grid
    CHECK(eval_coefficients(prob, 5).A(0, 0) == 2.0);
    CHECK(eval_coefficients(prob, 2).A(0, 0) == 1.0);  // t = 0.2
    CHECK(eval_coefficients(prob, 10).A(0, 0) == 2.0);
}

TEST_CASE("eval_coefficients rejects out-of-range nodes") {
    auto prob = validate_problem(testing::cp_lq1(10));
    CHECK_THROWS_AS(eval_coefficients(prob, 11), Error);
    CHECK_THROWS_AS(eval_coefficients(prob, -1), Error);
}

TEST_CASE("jump_integral: single mark") {
    JumpModel jumps({"z1"}, {2.0});
    Matrix r = jump_integral([&](int) { return scalar(0.25); }, jumps, 1, 1);
    CHECK(r(0, 0) == Approx(0.5));
}

TEST_CASE("jump_integral: empty mark list gives the zero matrix") {
    JumpModel none;
    Matrix r = jump_integral([&](int) { return scalar(1.0); }, none, 2, 2);
    CHECK(r.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("jump_integral: two marks") {
    JumpModel jumps({"a", "b"}, {1.0, 3.0});
    Matrix r = jump_integral([&](int j) { return j == 0 ? Matrix::Identity(2, 2) : Matrix(2.0 * Matrix::Identity(2, 2)); },
                             jumps, 2, 2);
    CHECK((r - 7.0 * Matrix::Identity(2, 2)).cwiseAbs().maxCoeff() == Approx(0.0).margin(1e-15));
}

TEST_CASE("jump_integral is linear in the integrand") {
    JumpModel jumps({"a", "b", "c"}, {0.7, 1.3, 0.1});
    auto f = [](int j) { return scalar(1.0 + j); };
    auto g = [](int j) { return scalar(std::sin(1.0 + j)); };
    const double ca = 0.31, cb = -1.7;
    Matrix lhs = jump_integral([&](int j) { return Matrix(ca * f(j) + cb * g(j)); }, jumps, 1, 1);
    Matrix rhs = ca * jump_integral(f, jumps, 1, 1) + cb * jump_integral(g, jumps, 1, 1);
    CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("jump_integral rejects mismatched shapes across marks") {
    JumpModel jumps({"a", "b"}, {1.0, 1.0});
    CHECK_THROWS_AS(jump_integral([&](int j) { return Matrix::Ones(1, 1 + j); }, jumps, 1, 1), Error);
}

TEST_CASE("eval_coefficients returns symmetric weights post-symmetrization") {
    auto spec = testing::mf1(8);
    spec.state_dim = 2;
    spec.control_dim = 2;
    spec.x0 = Vector::Ones(2);
    Matrix q(2, 2);
    q << 2.0, 0.3, 0.1, 2.0;
    spec.coeffs = CoefficientSet{};
    spec.coeffs.Q = TimeVaryingMatrix::constant(q);
    spec.coeffs.R = TimeVaryingMatrix::constant(Matrix::Identity(2, 2));
    spec.coeffs.G = Matrix::Identity(2, 2);
    spec.coeffs.delta = 0.5;
    spec.jumps = JumpModel{};
    auto prob = validate_problem(spec);
    for (int k = 0; k <= 8; ++k) {
        auto s = eval_coefficients(prob, k);
        CHECK((s.Q - s.Q.transpose()).cwiseAbs().maxCoeff() == 0.0);
        CHECK((s.R - s.R.transpose()).cwiseAbs().maxCoeff() == 0.0);
    }
}
