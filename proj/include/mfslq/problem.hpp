#pragma once

#include "mfslq/coefficients.hpp"
#include "mfslq/common.hpp"
#include "mfslq/jump_model.hpp"
#include "mfslq/time_grid.hpp"

#include <optional>

namespace mfslq {

enum class CoefficientMode { Deterministic, PathDependent };

struct ProblemSpec {
    int state_dim = 0;    // n
    int control_dim = 0;  // m
    Vector x0;
    TimeGrid grid;
    JumpModel jumps;
    CoefficientSet coeffs;
    CoefficientMode mode = CoefficientMode::Deterministic;
    std::string name;  // optional label carried into reports
};

namespace detail {

inline void check_shape(const TimeVaryingMatrix& c, int rows, int cols, const std::string& label) {
    if (c.empty())
        throw Error(ErrorKind::DimensionMismatch, "coefficient " + label + " is missing");
    if (c.rows() != rows || c.cols() != cols)
        throw Error(ErrorKind::DimensionMismatch,
                    "coefficient " + label + " has shape " + std::to_string(c.rows()) + "x" +
                        std::to_string(c.cols()) + ", expected " + std::to_string(rows) + "x" +
                        std::to_string(cols));
}

inline double min_eigenvalue_sym(const Matrix& m) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(m, Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff();
}

}  // namespace detail

// Validation handle. Immutable once constructed; weighting matrices are
// stored symmetrized and the applied symmetrization magnitude is recorded.
class ValidatedProblem {
  public:
    // Use validate_problem().
    ValidatedProblem(ProblemSpec spec, double symmetrization) : spec_(std::move(spec)), symmetrization_(symmetrization) {}

    const ProblemSpec& spec() const { return spec_; }
    int state_dim() const { return spec_.state_dim; }
    int control_dim() const { return spec_.control_dim; }
    const Vector& x0() const { return spec_.x0; }
    const TimeGrid& grid() const { return spec_.grid; }
    const JumpModel& jumps() const { return spec_.jumps; }
    const CoefficientSet& coeffs() const { return spec_.coeffs; }
    CoefficientMode mode() const { return spec_.mode; }
    bool path_dependent() const { return spec_.mode == CoefficientMode::PathDependent; }
    double symmetrization_applied() const { return symmetrization_; }

    bool has_mean_field_dynamics() const {
        const auto& cf = spec_.coeffs;
        if (!cf.A1.is_zero() || !cf.B1.is_zero() || !cf.C1.is_zero() || !cf.D1.is_zero()) return true;
        for (const auto& a : cf.alpha1)
            if (!a.is_zero()) return true;
        for (const auto& b : cf.beta1)
            if (!b.is_zero()) return true;
        return false;
    }

    bool has_mean_field_cost() const { return !spec_.coeffs.Q1.is_zero() || !spec_.coeffs.R1.is_zero(); }

    bool mean_field_off() const { return !has_mean_field_dynamics() && !has_mean_field_cost(); }

  private:
    ProblemSpec spec_;
    double symmetrization_;
};

// Checks dimensions, finiteness, PSD of Q/Q1/G, R >= delta I and
// R1 symmetric at every grid node. Weighting matrices are symmetrized by
// (M + M^T)/2 before the checks; the largest applied correction is
// recorded on the returned handle.
inline ValidatedProblem validate_problem(ProblemSpec spec) {
    const int n = spec.state_dim;
    const int m = spec.control_dim;
    if (n < 1 || m < 1)
        throw Error(ErrorKind::DimensionMismatch,
                    "dimensions must be positive, got n=" + std::to_string(n) + " m=" + std::to_string(m));
    if (spec.x0.size() != n)
        throw Error(ErrorKind::DimensionMismatch, "x0 has length " + std::to_string(spec.x0.size()) +
                                                      ", expected " + std::to_string(n));

    using detail::check_shape;
    auto& cf = spec.coeffs;
    // Missing optional coefficients default to zero.
    auto default_zero = [](TimeVaryingMatrix& c, int rows, int cols) {
        if (c.empty()) c = TimeVaryingMatrix::constant(Matrix::Zero(rows, cols));
    };
    default_zero(cf.A, n, n);
    default_zero(cf.A1, n, n);
    default_zero(cf.C, n, n);
    default_zero(cf.C1, n, n);
    default_zero(cf.B, n, m);
    default_zero(cf.B1, n, m);
    default_zero(cf.D, n, m);
    default_zero(cf.D1, n, m);
    default_zero(cf.Q, n, n);
    default_zero(cf.Q1, n, n);
    default_zero(cf.R1, m, m);
    const int K = spec.jumps.n_marks();
    auto fill_marks = [&](std::vector<TimeVaryingMatrix>& v, int rows, int cols) {
        if (v.empty()) v.resize(K);
        if (static_cast<int>(v.size()) != K)
            throw Error(ErrorKind::DimensionMismatch, "per-mark coefficient count differs from mark count");
        for (auto& c : v)
            if (c.empty()) c = TimeVaryingMatrix::constant(Matrix::Zero(rows, cols));
    };
    fill_marks(cf.alpha, n, n);
    fill_marks(cf.alpha1, n, n);
    fill_marks(cf.beta, n, m);
    fill_marks(cf.beta1, n, m);

    check_shape(cf.A, n, n, "A");
    check_shape(cf.A1, n, n, "A1");
    check_shape(cf.C, n, n, "C");
    check_shape(cf.C1, n, n, "C1");
    check_shape(cf.B, n, m, "B");
    check_shape(cf.B1, n, m, "B1");
    check_shape(cf.D, n, m, "D");
    check_shape(cf.D1, n, m, "D1");
    check_shape(cf.Q, n, n, "Q");
    check_shape(cf.Q1, n, n, "Q1");
    check_shape(cf.R, m, m, "R");
    check_shape(cf.R1, m, m, "R1");
    for (int j = 0; j < K; ++j) {
        const std::string zj = "(" + spec.jumps.marks[j] + ")";
        check_shape(cf.alpha[j], n, n, "alpha" + zj);
        check_shape(cf.alpha1[j], n, n, "alpha1" + zj);
        check_shape(cf.beta[j], n, m, "beta" + zj);
        check_shape(cf.beta1[j], n, m, "beta1" + zj);
    }
    if (cf.G.rows() != n || cf.G.cols() != n)
        throw Error(ErrorKind::DimensionMismatch, "coefficient G has shape " + std::to_string(cf.G.rows()) + "x" +
                                                      std::to_string(cf.G.cols()) + ", expected " +
                                                      std::to_string(n) + "x" + std::to_string(n));
    if (!(cf.delta > 0.0))
        throw Error(ErrorKind::RBelowDelta, "positivity margin delta must be > 0, got " + std::to_string(cf.delta));

    // Symmetrize weights, tracking the correction size.
    double sym_applied = 0.0;
    auto symmetrize_tracked = [&](TimeVaryingMatrix& c) {
        c.apply([&](Matrix& mref) {
            sym_applied = std::max(sym_applied, 0.5 * (mref - mref.transpose()).cwiseAbs().maxCoeff());
            mref = symmetrize(mref);
        });
    };
    symmetrize_tracked(cf.Q);
    symmetrize_tracked(cf.Q1);
    symmetrize_tracked(cf.R);
    symmetrize_tracked(cf.R1);
    sym_applied = std::max(sym_applied, 0.5 * (cf.G - cf.G.transpose()).cwiseAbs().maxCoeff());
    cf.G = symmetrize(cf.G);

    // Node-wise finiteness and positivity.
    const double psd_tol = 1e-12;
    auto check_finite = [&](const TimeVaryingMatrix& c, const std::string& label) {
        c.visit([&](const Matrix& mref) {
            if (!all_finite(mref)) throw Error(ErrorKind::NonFinite, "coefficient " + label + " has non-finite entries");
        });
    };
    check_finite(cf.A, "A");
    check_finite(cf.A1, "A1");
    check_finite(cf.B, "B");
    check_finite(cf.B1, "B1");
    check_finite(cf.C, "C");
    check_finite(cf.C1, "C1");
    check_finite(cf.D, "D");
    check_finite(cf.D1, "D1");
    check_finite(cf.Q, "Q");
    check_finite(cf.Q1, "Q1");
    check_finite(cf.R, "R");
    check_finite(cf.R1, "R1");
    for (int j = 0; j < K; ++j) {
        check_finite(cf.alpha[j], "alpha");
        check_finite(cf.alpha1[j], "alpha1");
        check_finite(cf.beta[j], "beta");
        check_finite(cf.beta1[j], "beta1");
    }
    if (!all_finite(cf.G)) throw Error(ErrorKind::NonFinite, "coefficient G has non-finite entries");

    for (int k = 0; k <= spec.grid.n_steps; ++k) {
        const double t = spec.grid.node(k);
        {
            double lam = detail::min_eigenvalue_sym(cf.Q.at(t));
            if (lam < -psd_tol)
                throw Error(ErrorKind::NotPSD, "Q not PSD at node " + std::to_string(k) +
                                                   " (min eigenvalue " + std::to_string(lam) + ")");
        }
        {
            double lam = detail::min_eigenvalue_sym(cf.Q1.at(t));
            if (lam < -psd_tol)
                throw Error(ErrorKind::NotPSD, "Q1 not PSD at node " + std::to_string(k) +
                                                   " (min eigenvalue " + std::to_string(lam) + ")");
        }
        {
            double lam = detail::min_eigenvalue_sym(cf.R1.at(t));
            if (lam < -psd_tol)
                throw Error(ErrorKind::NotPSD, "R1 not PSD at node " + std::to_string(k) +
                                                   " (min eigenvalue " + std::to_string(lam) + ")");
        }
        {
            double lam = detail::min_eigenvalue_sym(cf.R.at(t));
            if (lam - cf.delta < -psd_tol)
                throw Error(ErrorKind::RBelowDelta, "R - delta*I not PSD at node " + std::to_string(k) +
                                                        " (min eigenvalue of R minus delta = " +
                                                        std::to_string(lam - cf.delta) + ")");
        }
    }
    {
        double lam = detail::min_eigenvalue_sym(cf.G);
        if (lam < -psd_tol)
            throw Error(ErrorKind::NotPSD, "G not PSD (min eigenvalue " + std::to_string(lam) + ")");
    }

    return ValidatedProblem(std::move(spec), sym_applied);
}

// Coefficient matrices at grid node k. Deterministic mode ignores w.
inline CoefficientSnapshot eval_coefficients(const ValidatedProblem& prob, int k, double w = 0.0) {
    const auto& g = prob.grid();
    if (k < 0 || k > g.n_steps)
        throw Error(ErrorKind::IndexOutOfRange,
                    "node index " + std::to_string(k) + " outside [0," + std::to_string(g.n_steps) + "]");
    const double t = g.node(k);
    const double wv = prob.path_dependent() ? w : 0.0;
    const auto& cf = prob.coeffs();
    CoefficientSnapshot s;
    s.A = cf.A.value(t, wv);
    s.A1 = cf.A1.value(t, wv);
    s.B = cf.B.value(t, wv);
    s.B1 = cf.B1.value(t, wv);
    s.C = cf.C.value(t, wv);
    s.C1 = cf.C1.value(t, wv);
    s.D = cf.D.value(t, wv);
    s.D1 = cf.D1.value(t, wv);
    const int K = prob.jumps().n_marks();
    s.alpha.resize(K);
    s.alpha1.resize(K);
    s.beta.resize(K);
    s.beta1.resize(K);
    for (int j = 0; j < K; ++j) {
        s.alpha[j] = cf.alpha[j].value(t, wv);
        s.alpha1[j] = cf.alpha1[j].value(t, wv);
        s.beta[j] = cf.beta[j].value(t, wv);
        s.beta1[j] = cf.beta1[j].value(t, wv);
    }
    s.Q = cf.Q.value(t, wv);
    s.Q1 = cf.Q1.value(t, wv);
    s.R = cf.R.value(t, wv);
    s.R1 = cf.R1.value(t, wv);
    return s;
}

}  // namespace mfslq
