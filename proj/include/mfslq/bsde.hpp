#pragma once

#include "mfslq/control.hpp"
#include "mfslq/riccati.hpp"

namespace mfslq {

// Offset equation solution. psi and theta vanish in the deterministic
// tier; the inputs it was solved for are kept for bookkeeping.
struct PhiSolution {
    TimeGrid grid;
    GridFunction phi;                      // n per node, phi(T) = 0
    GridFunction psi;                      // n per node
    std::vector<GridFunction> theta;       // per mark, n per node
    GridFunction input_a, input_b, input_lambda, input_gamma;
};

namespace detail {

// Per-node matrices of the backward offset ODE
//   -phi' = M_hat phi + L_hat a + Q_hat b + lambda + H Theta^{-1} gamma,
// gathered once so RK4 can interpolate them at half steps.
struct OffsetOdeTables {
    std::vector<Matrix> M_hat;      // n x n
    std::vector<Matrix> L_hat;      // n x n
    std::vector<Matrix> Q_hat;      // n x m
    std::vector<Matrix> H_theta_inv;  // n x m

    static OffsetOdeTables build(const GainAssembly& gains) {
        OffsetOdeTables t;
        const std::size_t nodes = gains.nodes.size();
        t.M_hat.resize(nodes);
        t.L_hat.resize(nodes);
        t.Q_hat.resize(nodes);
        t.H_theta_inv.resize(nodes);
        for (std::size_t k = 0; k < nodes; ++k) {
            const GainNode& g = gains.nodes[k];
            t.M_hat[k] = g.M_hat;
            t.L_hat[k] = g.L_hat;
            t.Q_hat[k] = g.Q_hat;
            t.H_theta_inv[k] = g.H * g.theta_inv;
        }
        return t;
    }
};

inline Matrix interp_nodes(const std::vector<Matrix>& table, const TimeGrid& grid, double t) {
    const double dt = grid.dt();
    if (t <= 0.0) return table.front();
    if (t >= grid.horizon) return table.back();
    const double s = t / dt;
    const int k = std::min(static_cast<int>(s), grid.n_steps - 1);
    const double w = s - k;
    return (1.0 - w) * table[static_cast<std::size_t>(k)] + w * table[static_cast<std::size_t>(k + 1)];
}

}  // namespace detail

// Backward RK4 for the offset equation from phi(T) = 0, deterministic
// tier (psi = theta = 0). Grid-sampled inputs and the gain tables are
// interpolated linearly at half steps.
inline PhiSolution solve_phi_deterministic(const ValidatedProblem& prob, const GainAssembly& gains,
                                           const GridFunction& a, const GridFunction& b,
                                           const GridFunction& lambda, const GridFunction& gamma) {
    require_same_grid(prob.grid(), gains.grid, "solve_phi_deterministic");
    require_same_grid(prob.grid(), a.grid, "solve_phi_deterministic(a)");
    require_same_grid(prob.grid(), b.grid, "solve_phi_deterministic(b)");
    require_same_grid(prob.grid(), lambda.grid, "solve_phi_deterministic(lambda)");
    require_same_grid(prob.grid(), gamma.grid, "solve_phi_deterministic(gamma)");
    if (prob.path_dependent())
        throw Error(ErrorKind::ModeUnsupported, "solve_phi_deterministic requires deterministic coefficient mode");

    const auto& grid = prob.grid();
    const int n = prob.state_dim();
    const int K = prob.jumps().n_marks();
    const double dt = grid.dt();

    const auto tables = detail::OffsetOdeTables::build(gains);
    auto rhs = [&](double t, const Vector& phi) -> Vector {
        const Matrix M = detail::interp_nodes(tables.M_hat, grid, t);
        const Matrix L = detail::interp_nodes(tables.L_hat, grid, t);
        const Matrix Q = detail::interp_nodes(tables.Q_hat, grid, t);
        const Matrix Hq = detail::interp_nodes(tables.H_theta_inv, grid, t);
        return M * phi + L * a.at_time(t) + Q * b.at_time(t) + lambda.at_time(t) + Hq * gamma.at_time(t);
    };

    PhiSolution sol;
    sol.grid = grid;
    sol.phi = GridFunction::zero(grid, n);
    sol.psi = GridFunction::zero(grid, n);
    sol.theta.assign(static_cast<std::size_t>(K), GridFunction::zero(grid, n));
    sol.input_a = a;
    sol.input_b = b;
    sol.input_lambda = lambda;
    sol.input_gamma = gamma;

    Vector phi = Vector::Zero(n);
    sol.phi.set_node(grid.n_steps, phi);
    for (int k = grid.n_steps; k > 0; --k) {
        const double t1 = grid.node(k);
        const double t0 = grid.node(k - 1);
        const double tm = 0.5 * (t0 + t1);
        // phi' = -rhs; step h = -dt
        Vector k1 = rhs(t1, phi);
        Vector k2 = rhs(tm, phi + 0.5 * dt * k1);
        Vector k3 = rhs(tm, phi + 0.5 * dt * k2);
        Vector k4 = rhs(t0, phi + dt * k3);
        phi = phi + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if (!phi.allFinite())
            throw Error(ErrorKind::NonFinite, "offset equation blew up stepping to node " + std::to_string(k - 1));
        sol.phi.set_node(k - 1, phi);
    }
    return sol;
}

// Node-wise affine offset of the feedback law,
//   M = B'phi + D'psi + (D'PC1 + sum beta'(P+Gamma)alpha1 nu) a
//     + (D'PD1 + sum beta'(P+Gamma)beta1 nu) b + gamma + sum beta'theta nu.
// With the other inputs zeroed this yields the per-channel offsets by
// superposition; there is no separate code path per channel.
inline GridFunction assemble_offset(const ValidatedProblem& prob, const GainAssembly& gains,
                                    const RiccatiSolution& ric, const PhiSolution& phi, const GridFunction& a,
                                    const GridFunction& b, const GridFunction& gamma) {
    require_same_grid(prob.grid(), gains.grid, "assemble_offset");
    require_same_grid(prob.grid(), phi.grid, "assemble_offset(phi)");
    require_same_grid(prob.grid(), a.grid, "assemble_offset(a)");
    require_same_grid(prob.grid(), b.grid, "assemble_offset(b)");
    require_same_grid(prob.grid(), gamma.grid, "assemble_offset(gamma)");
    (void)ric;

    const auto& grid = prob.grid();
    const auto& cf = prob.coeffs();
    const auto& jumps = prob.jumps();
    const int m = prob.control_dim();
    GridFunction M(grid, m);
    for (int k = 0; k <= grid.n_steps; ++k) {
        const double t = grid.node(k);
        const GainNode& g = gains.at(k);
        Vector mk = cf.B.at(t).transpose() * phi.phi.node(k) + cf.D.at(t).transpose() * phi.psi.node(k) +
                    g.mix_a * a.node(k) + g.mix_b * b.node(k) + gamma.node(k);
        for (int j = 0; j < jumps.n_marks(); ++j) {
            const double nu = jumps.intensities[static_cast<std::size_t>(j)];
            if (nu == 0.0) continue;
            mk += nu * cf.beta[static_cast<std::size_t>(j)].at(t).transpose() *
                  phi.theta[static_cast<std::size_t>(j)].node(k);
        }
        M.set_node(k, mk);
    }
    return M;
}

// Adjoint triple along simulated paths.
struct AdjointPath {
    TimeGrid grid;
    long n_paths = 0;
    int state_dim = 0;
    std::vector<double> Y;               // n_paths * n_nodes * n
    std::vector<double> Z;               // n_paths * n_nodes * n
    std::vector<std::vector<double>> K;  // per mark, n_paths * n_nodes * n

    Eigen::Map<const Vector> y(long path, int k) const {
        const std::size_t off =
            (static_cast<std::size_t>(path) * static_cast<std::size_t>(grid.n_nodes()) + static_cast<std::size_t>(k)) *
            static_cast<std::size_t>(state_dim);
        return Eigen::Map<const Vector>(Y.data() + off, state_dim);
    }
    Eigen::Map<const Vector> z(long path, int k) const {
        const std::size_t off =
            (static_cast<std::size_t>(path) * static_cast<std::size_t>(grid.n_nodes()) + static_cast<std::size_t>(k)) *
            static_cast<std::size_t>(state_dim);
        return Eigen::Map<const Vector>(Z.data() + off, state_dim);
    }
    Eigen::Map<const Vector> kval(int mark, long path, int k) const {
        const std::size_t off =
            (static_cast<std::size_t>(path) * static_cast<std::size_t>(grid.n_nodes()) + static_cast<std::size_t>(k)) *
            static_cast<std::size_t>(state_dim);
        return Eigen::Map<const Vector>(K[static_cast<std::size_t>(mark)].data() + off, state_dim);
    }
};

// Path-wise adjoint reconstruction through the decoupling identities:
//   Y      = P X + phi
//   Z      = P (C X + C1 a + D u + D1 b) + psi + Lambda X
//   K(z_j) = (P + Gamma_j)(alpha_j X + alpha1_j a + beta_j u + beta1_j b)
//            + theta_j + Gamma_j X
// with u the realized control stored in the bundle. Exact given (P, phi);
// no backward stochastic integration happens here.
inline AdjointPath reconstruct_adjoint(const ValidatedProblem& prob, const RiccatiSolution& ric,
                                       const GainAssembly& gains, const PhiSolution& phi, const PathBundle& paths,
                                       const GridFunction& a, const GridFunction& b) {
    require_same_grid(prob.grid(), paths.grid, "reconstruct_adjoint");
    require_same_grid(prob.grid(), ric.grid, "reconstruct_adjoint(ric)");
    (void)gains;

    const auto& grid = prob.grid();
    const auto& cf = prob.coeffs();
    const int n = prob.state_dim();
    const int K = prob.jumps().n_marks();
    const int nodes = grid.n_nodes();

    AdjointPath adj;
    adj.grid = grid;
    adj.n_paths = paths.n_paths;
    adj.state_dim = n;
    const std::size_t total = static_cast<std::size_t>(paths.n_paths) * static_cast<std::size_t>(nodes) *
                              static_cast<std::size_t>(n);
    adj.Y.resize(total);
    adj.Z.resize(total);
    adj.K.assign(static_cast<std::size_t>(K), std::vector<double>(total));

    for (long p = 0; p < paths.n_paths; ++p) {
        for (int k = 0; k < nodes; ++k) {
            const double t = grid.node(k);
            const Matrix& P = ric.P[static_cast<std::size_t>(k)];
            const Matrix& Lam = ric.Lambda[static_cast<std::size_t>(k)];
            const Vector x = paths.state(p, k);
            const Vector u = paths.control(p, k);
            const Vector ak = a.node(k);
            const Vector bk = b.node(k);

            const Vector y = P * x + phi.phi.node(k);
            const Vector z = P * (cf.C.at(t) * x + cf.C1.at(t) * ak + cf.D.at(t) * u + cf.D1.at(t) * bk) +
                             phi.psi.node(k) + Lam * x;
            const std::size_t off = (static_cast<std::size_t>(p) * static_cast<std::size_t>(nodes) +
                                     static_cast<std::size_t>(k)) *
                                    static_cast<std::size_t>(n);
            for (int i = 0; i < n; ++i) {
                adj.Y[off + static_cast<std::size_t>(i)] = y(i);
                adj.Z[off + static_cast<std::size_t>(i)] = z(i);
            }
            for (int j = 0; j < K; ++j) {
                const std::size_t js = static_cast<std::size_t>(j);
                const Matrix& Gam = ric.Gamma[static_cast<std::size_t>(k)][js];
                const Vector kj = (P + Gam) * (cf.alpha[js].at(t) * x + cf.alpha1[js].at(t) * ak +
                                               cf.beta[js].at(t) * u + cf.beta1[js].at(t) * bk) +
                                  phi.theta[js].node(k) + Gam * x;
                for (int i = 0; i < n; ++i) adj.K[js][off + static_cast<std::size_t>(i)] = kj(i);
            }
        }
    }
    return adj;
}

}  // namespace mfslq
