#pragma once

// Canonical instances shared across the test suites.

#include "mfslq/problem.hpp"

namespace mfslq::testing {

inline Matrix scalar(double v) { return Matrix::Constant(1, 1, v); }

// Scalar regulator with closed-form Riccati solution P(t) = 1/(2-t).
inline ProblemSpec cp_lq1(int n_steps = 1000) {
    ProblemSpec s;
    s.name = "CP-LQ1";
    s.state_dim = 1;
    s.control_dim = 1;
    s.x0 = Vector::Constant(1, 1.0);
    s.grid = TimeGrid(1.0, n_steps);
    s.coeffs.B = TimeVaryingMatrix::constant(scalar(1.0));
    s.coeffs.R = TimeVaryingMatrix::constant(scalar(1.0));
    s.coeffs.G = scalar(1.0);
    s.coeffs.delta = 0.5;
    return s;
}

// Scalar instance with one jump mark entering through the control.
inline ProblemSpec cp_j1(int n_steps = 1000) {
    ProblemSpec s;
    s.name = "CP-J1";
    s.state_dim = 1;
    s.control_dim = 1;
    s.x0 = Vector::Constant(1, 1.0);
    s.grid = TimeGrid(1.0, n_steps);
    s.jumps = JumpModel({"z1"}, {2.0});
    s.coeffs.B = TimeVaryingMatrix::constant(scalar(1.0));
    s.coeffs.Q = TimeVaryingMatrix::constant(scalar(1.0));
    s.coeffs.R = TimeVaryingMatrix::constant(scalar(1.0));
    s.coeffs.G = scalar(0.0);
    s.coeffs.beta = {TimeVaryingMatrix::constant(scalar(0.5))};
    s.coeffs.delta = 0.5;
    return s;
}

// Scalar mean-field instance: couplings in drift and cost, multiplicative
// state noise.
inline ProblemSpec mf1(int n_steps = 1000) {
    ProblemSpec s;
    s.name = "MF-1";
    s.state_dim = 1;
    s.control_dim = 1;
    s.x0 = Vector::Constant(1, 1.0);
    s.grid = TimeGrid(1.0, n_steps);
    s.coeffs.B = TimeVaryingMatrix::constant(scalar(1.0));
    s.coeffs.C = TimeVaryingMatrix::constant(scalar(0.2));
    s.coeffs.A1 = TimeVaryingMatrix::constant(scalar(0.5));
    s.coeffs.B1 = TimeVaryingMatrix::constant(scalar(0.5));
    s.coeffs.Q = TimeVaryingMatrix::constant(scalar(1.0));
    s.coeffs.Q1 = TimeVaryingMatrix::constant(scalar(1.0));
    s.coeffs.R = TimeVaryingMatrix::constant(scalar(1.0));
    s.coeffs.R1 = TimeVaryingMatrix::constant(scalar(1.0));
    s.coeffs.G = scalar(1.0);
    s.coeffs.delta = 0.5;
    return s;
}

}  // namespace mfslq::testing
