#pragma once

#include "mfslq/problem.hpp"

#include <limits>

namespace mfslq {

enum class RiccatiTier { Deterministic, Regressed };

// Backward solution of the Riccati equation with jumps on the grid.
// Lambda and Gamma are identically zero in the deterministic tier and
// kept so the regressed tier can share the type.
struct RiccatiSolution {
    TimeGrid grid;
    std::vector<Matrix> P;                   // n x n, symmetric PSD, P.back() == G
    std::vector<Matrix> Lambda;              // n x n
    std::vector<std::vector<Matrix>> Gamma;  // per node, per mark, n x n
    RiccatiTier tier = RiccatiTier::Deterministic;
    // smallest eigenvalue of D'PD + sum_j beta'(P+Gamma)beta nu_j + R over nodes
    double uniform_positivity = 0.0;

    const Matrix& P_at(int k) const { return P[static_cast<std::size_t>(k)]; }
};

namespace detail {

// Right-hand side F of -dP/dt = F(t, P) in the deterministic tier:
//   F = A'P + PA + C'PC + Q + sum_j alpha' P alpha nu_j - N' (D'PD + sum beta'P beta nu + R)^{-1} N
// with N = B'P + D'PC + sum_j beta' P alpha nu_j.
inline Matrix riccati_rhs(const ValidatedProblem& prob, double t, const Matrix& P) {
    const auto& cf = prob.coeffs();
    const auto& jumps = prob.jumps();
    const int n = prob.state_dim();
    const int m = prob.control_dim();
    const Matrix A = cf.A.at(t);
    const Matrix B = cf.B.at(t);
    const Matrix C = cf.C.at(t);
    const Matrix D = cf.D.at(t);
    const Matrix Q = cf.Q.at(t);
    const Matrix R = cf.R.at(t);

    Matrix theta_neg = D.transpose() * P * D + R;
    Matrix N = B.transpose() * P + D.transpose() * P * C;
    Matrix F = A.transpose() * P + P * A + C.transpose() * P * C + Q;
    for (int j = 0; j < jumps.n_marks(); ++j) {
        const double nu = jumps.intensities[static_cast<std::size_t>(j)];
        if (nu == 0.0) continue;
        const Matrix alpha = cf.alpha[static_cast<std::size_t>(j)].at(t);
        const Matrix beta = cf.beta[static_cast<std::size_t>(j)].at(t);
        theta_neg += nu * beta.transpose() * P * beta;
        N += nu * beta.transpose() * P * alpha;
        F += nu * alpha.transpose() * P * alpha;
    }
    Eigen::LLT<Matrix> llt(symmetrize(theta_neg));
    if (llt.info() != Eigen::Success)
        throw Error(ErrorKind::PositivityLost,
                    "control-curvature block lost positivity at t=" + std::to_string(t));
    F -= N.transpose() * llt.solve(N);
    (void)n;
    (void)m;
    return symmetrize(F);
}

}  // namespace detail

// Classical RK4 backward in time from P(T) = G, symmetrizing after each
// step. PSD and uniform positivity are checked at every node and failures
// surface as errors rather than being projected away.
inline RiccatiSolution solve_riccati_deterministic(const ValidatedProblem& prob) {
    if (prob.path_dependent())
        throw Error(ErrorKind::ModeUnsupported,
                    "solve_riccati_deterministic requires deterministic coefficient mode");
    const auto& grid = prob.grid();
    const int n = prob.state_dim();
    const int N_steps = grid.n_steps;
    const double dt = grid.dt();
    const int K = prob.jumps().n_marks();

    RiccatiSolution sol;
    sol.grid = grid;
    sol.tier = RiccatiTier::Deterministic;
    sol.P.assign(static_cast<std::size_t>(N_steps + 1), Matrix());
    sol.Lambda.assign(static_cast<std::size_t>(N_steps + 1), Matrix::Zero(n, n));
    sol.Gamma.assign(static_cast<std::size_t>(N_steps + 1),
                     std::vector<Matrix>(static_cast<std::size_t>(K), Matrix::Zero(n, n)));

    sol.P[static_cast<std::size_t>(N_steps)] = prob.coeffs().G;

    for (int k = N_steps; k > 0; --k) {
        const double t1 = grid.node(k);
        const double t0 = grid.node(k - 1);
        const double tm = 0.5 * (t0 + t1);
        const Matrix& P1 = sol.P[static_cast<std::size_t>(k)];
        // dP/dt = -F; stepping with h = -dt
        Matrix k1 = detail::riccati_rhs(prob, t1, P1);
        Matrix k2 = detail::riccati_rhs(prob, tm, symmetrize(P1 + 0.5 * dt * k1));
        Matrix k3 = detail::riccati_rhs(prob, tm, symmetrize(P1 + 0.5 * dt * k2));
        Matrix k4 = detail::riccati_rhs(prob, t0, symmetrize(P1 + dt * k3));
        Matrix P0 = symmetrize(P1 + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4));
        if (!all_finite(P0))
            throw Error(ErrorKind::NonFinite, "Riccati solution blew up stepping to node " + std::to_string(k - 1));
        sol.P[static_cast<std::size_t>(k - 1)] = P0;
    }

    // Node-wise invariants: P PSD, control-curvature block uniformly positive.
    double min_c = std::numeric_limits<double>::infinity();
    for (int k = 0; k <= N_steps; ++k) {
        const double t = grid.node(k);
        const Matrix& P = sol.P[static_cast<std::size_t>(k)];
        const double scale = std::max(1.0, P.cwiseAbs().maxCoeff());
        Eigen::SelfAdjointEigenSolver<Matrix> es(P, Eigen::EigenvaluesOnly);
        if (es.eigenvalues().minCoeff() < -1e-10 * scale)
            throw Error(ErrorKind::PositivityLost,
                        "P not PSD at node " + std::to_string(k) + " (min eigenvalue " +
                            std::to_string(es.eigenvalues().minCoeff()) + ")");
        const auto& cf = prob.coeffs();
        Matrix theta_neg = cf.D.at(t).transpose() * P * cf.D.at(t) + cf.R.at(t);
        for (int j = 0; j < K; ++j) {
            const double nu = prob.jumps().intensities[static_cast<std::size_t>(j)];
            const Matrix beta = cf.beta[static_cast<std::size_t>(j)].at(t);
            theta_neg += nu * beta.transpose() * P * beta;
        }
        Eigen::SelfAdjointEigenSolver<Matrix> est(symmetrize(theta_neg), Eigen::EigenvaluesOnly);
        const double c = est.eigenvalues().minCoeff();
        if (!(c > 0.0))
            throw Error(ErrorKind::PositivityLost,
                        "uniform positivity failed at node " + std::to_string(k) + " (min eigenvalue " +
                            std::to_string(c) + ")");
        min_c = std::min(min_c, c);
    }
    sol.uniform_positivity = min_c;
    return sol;
}

// Gain quantities and closed-loop coefficients at one grid node.
struct GainNode {
    Matrix theta_neg;  // -Theta = D'PD + sum beta'(P+Gamma)beta nu + R, SPD
    Matrix theta_inv;  // Theta^{-1} (negative definite)
    Matrix N;          // m x n stationarity coupling
    Matrix H;          // n x m
    Matrix gain;       // Theta^{-1} N, the state-feedback gain
    Matrix A_hat, C_hat;              // n x n closed-loop drift/diffusion on X
    Matrix A1_hat, C1_hat;            // n x n closed-loop coupling to a
    Matrix B1_hat, D1_hat;            // n x m closed-loop coupling to b
    std::vector<Matrix> alpha_hat;    // n x n per mark
    std::vector<Matrix> alpha1_hat;   // n x n per mark
    std::vector<Matrix> beta1_hat;    // n x m per mark
    Matrix M_hat, N_hat;              // n x n drivers of the offset equation
    std::vector<Matrix> K_hat;        // n x n per mark
    Matrix L_hat;                     // n x n source coefficient on a
    Matrix Q_hat;                     // n x m source coefficient on b
    Matrix mix_a;                     // m x n: D'PC1 + sum beta'(P+Gamma)alpha1 nu
    Matrix mix_b;                     // m x m: D'PD1 + sum beta'(P+Gamma)beta1 nu
};

struct GainAssembly {
    TimeGrid grid;
    std::vector<GainNode> nodes;
    double max_theta_condition = 0.0;

    const GainNode& at(int k) const { return nodes[static_cast<std::size_t>(k)]; }
};

// Node-wise literal evaluation of the gain quantities from (P, Lambda,
// Gamma) and the raw coefficients. Theta is inverted through an SPD
// factorization of -Theta.
inline GainAssembly assemble_gains(const ValidatedProblem& prob, const RiccatiSolution& ric) {
    require_same_grid(prob.grid(), ric.grid, "assemble_gains");
    const auto& grid = prob.grid();
    const auto& cf = prob.coeffs();
    const auto& jumps = prob.jumps();
    const int n = prob.state_dim();
    const int m = prob.control_dim();
    const int K = jumps.n_marks();

    GainAssembly ga;
    ga.grid = grid;
    ga.nodes.resize(static_cast<std::size_t>(grid.n_steps + 1));

    for (int k = 0; k <= grid.n_steps; ++k) {
        const double t = grid.node(k);
        GainNode& g = ga.nodes[static_cast<std::size_t>(k)];
        const Matrix& P = ric.P[static_cast<std::size_t>(k)];
        const Matrix& Lam = ric.Lambda[static_cast<std::size_t>(k)];
        const auto& Gam = ric.Gamma[static_cast<std::size_t>(k)];

        const Matrix A = cf.A.at(t), A1 = cf.A1.at(t), C = cf.C.at(t), C1 = cf.C1.at(t);
        const Matrix B = cf.B.at(t), B1 = cf.B1.at(t), D = cf.D.at(t), D1 = cf.D1.at(t);
        const Matrix R = cf.R.at(t);

        g.theta_neg = D.transpose() * P * D + R;
        g.N = B.transpose() * P + D.transpose() * Lam + D.transpose() * P * C;
        g.H = C.transpose() * P * D + P * B + Lam * D;
        g.mix_a = D.transpose() * P * C1;
        g.mix_b = D.transpose() * P * D1;
        Matrix L_hat = C.transpose() * P * C1 + P * A1 + Lam * C1;
        Matrix Q_hat = C.transpose() * P * D1 + P * B1 + Lam * D1;
        for (int j = 0; j < K; ++j) {
            const double nu = jumps.intensities[static_cast<std::size_t>(j)];
            if (nu == 0.0) continue;
            const std::size_t js = static_cast<std::size_t>(j);
            const Matrix alpha = cf.alpha[js].at(t), alpha1 = cf.alpha1[js].at(t);
            const Matrix beta = cf.beta[js].at(t), beta1 = cf.beta1[js].at(t);
            const Matrix PG = P + Gam[js];
            g.theta_neg += nu * beta.transpose() * PG * beta;
            g.N += nu * (beta.transpose() * Gam[js] + beta.transpose() * PG * alpha);
            g.H += nu * (alpha.transpose() * PG * beta + Gam[js] * beta);
            g.mix_a += nu * beta.transpose() * PG * alpha1;
            g.mix_b += nu * beta.transpose() * PG * beta1;
            L_hat += nu * (alpha.transpose() * PG * alpha1 + Gam[js] * alpha1);
            Q_hat += nu * (alpha.transpose() * PG * beta1 + Gam[js] * beta1);
        }
        g.theta_neg = symmetrize(g.theta_neg);

        Eigen::SelfAdjointEigenSolver<Matrix> es(g.theta_neg, Eigen::EigenvaluesOnly);
        const double lam_min = es.eigenvalues().minCoeff();
        const double lam_max = es.eigenvalues().maxCoeff();
        if (!(lam_min > 0.0) || lam_max / lam_min > 1e12)
            throw Error(ErrorKind::ThetaSingular, "control-curvature block at node " + std::to_string(k) +
                                                      " is singular or ill-conditioned (cond ~ " +
                                                      std::to_string(lam_max / std::max(lam_min, 1e-300)) + ")");
        ga.max_theta_condition = std::max(ga.max_theta_condition, lam_max / lam_min);

        Eigen::LLT<Matrix> llt(g.theta_neg);
        g.theta_inv = -llt.solve(Matrix::Identity(m, m));
        g.gain = g.theta_inv * g.N;

        g.A_hat = A + B * g.gain;
        g.C_hat = C + D * g.gain;
        g.A1_hat = A1 + B * g.theta_inv * g.mix_a;
        g.C1_hat = C1 + D * g.theta_inv * g.mix_a;
        g.B1_hat = B1 + B * g.theta_inv * g.mix_b;
        g.D1_hat = D1 + D * g.theta_inv * g.mix_b;
        g.M_hat = A.transpose() + g.H * g.theta_inv * B.transpose();
        g.N_hat = C.transpose() + g.H * g.theta_inv * D.transpose();
        g.L_hat = L_hat + g.H * g.theta_inv * g.mix_a;
        g.Q_hat = Q_hat + g.H * g.theta_inv * g.mix_b;
        g.alpha_hat.resize(static_cast<std::size_t>(K));
        g.alpha1_hat.resize(static_cast<std::size_t>(K));
        g.beta1_hat.resize(static_cast<std::size_t>(K));
        g.K_hat.resize(static_cast<std::size_t>(K));
        for (int j = 0; j < K; ++j) {
            const std::size_t js = static_cast<std::size_t>(j);
            const Matrix alpha = cf.alpha[js].at(t), alpha1 = cf.alpha1[js].at(t);
            const Matrix beta = cf.beta[js].at(t), beta1 = cf.beta1[js].at(t);
            g.alpha_hat[js] = alpha + beta * g.gain;
            g.alpha1_hat[js] = alpha1 + beta * g.theta_inv * g.mix_a;
            g.beta1_hat[js] = beta1 + beta * g.theta_inv * g.mix_b;
            g.K_hat[js] = alpha.transpose() + g.H * g.theta_inv * beta.transpose();
        }
        (void)n;
    }
    return ga;
}

// Max-norm defect of the Riccati drift identity over interior nodes,
// with dP/dt approximated by the order-2 central difference. Used as a
// solver self-check and a convergence probe.
inline double riccati_residual(const ValidatedProblem& prob, const RiccatiSolution& ric) {
    require_same_grid(prob.grid(), ric.grid, "riccati_residual");
    const auto& grid = prob.grid();
    const double dt = grid.dt();
    double worst = 0.0;
    for (int k = 1; k < grid.n_steps; ++k) {
        const Matrix pdot =
            (ric.P[static_cast<std::size_t>(k + 1)] - ric.P[static_cast<std::size_t>(k - 1)]) / (2.0 * dt);
        const Matrix rhs = detail::riccati_rhs(prob, grid.node(k), ric.P[static_cast<std::size_t>(k)]);
        worst = std::max(worst, (pdot + rhs).cwiseAbs().maxCoeff());
    }
    return worst;
}

}  // namespace mfslq
