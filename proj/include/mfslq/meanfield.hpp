#pragma once

#include "mfslq/bsde.hpp"
#include "mfslq/threads.hpp"

#include <numeric>

namespace mfslq {

struct MeanFieldPair {
    GridFunction a;  // target mean state
    GridFunction b;  // target mean control
};

struct Multipliers {
    GridFunction lambda;  // n per node
    GridFunction gamma;   // m per node
    double residual_norm = 0.0;      // Euclidean residual of the stacked solve
    double residual_max = 0.0;       // max-norm residual
    bool min_norm = true;
    int rank = 0;
    double smallest_retained_sv = 0.0;
};

namespace detail {

// Per-node tables of the closed-loop mean dynamics, built once from the
// gain assembly and shared across impulse columns.
struct MeanTables {
    std::vector<Matrix> A_hat, A1_hat;   // n x n
    std::vector<Matrix> B1_hat;          // n x m
    std::vector<Matrix> B_theta_inv;     // n x m
    const GainAssembly* gains = nullptr;

    static MeanTables build(const ValidatedProblem& prob, const GainAssembly& gains) {
        MeanTables t;
        t.gains = &gains;
        const auto& grid = prob.grid();
        const auto& cf = prob.coeffs();
        const std::size_t nodes = static_cast<std::size_t>(grid.n_nodes());
        t.A_hat.resize(nodes);
        t.A1_hat.resize(nodes);
        t.B1_hat.resize(nodes);
        t.B_theta_inv.resize(nodes);
        for (int k = 0; k <= grid.n_steps; ++k) {
            const GainNode& g = gains.at(k);
            const std::size_t ks = static_cast<std::size_t>(k);
            t.A_hat[ks] = g.A_hat;
            t.A1_hat[ks] = g.A1_hat;
            t.B1_hat[ks] = g.B1_hat;
            t.B_theta_inv[ks] = cf.B.at(grid.node(k)) * g.theta_inv;
        }
        return t;
    }
};

}  // namespace detail

// Expectation of the closed-loop state equation: the dW and compensated
// jump terms average out (deterministic coefficients), leaving
//   dE[X]/dt = A_hat E[X] + A1_hat a + B1_hat b
//              + B Theta^{-1} (B'phi + D'psi + sum beta'theta nu + gamma),
// integrated by RK4; E[u] = gain E[X] + Theta^{-1} M node-wise.
inline std::pair<GridFunction, GridFunction> closed_loop_mean(const ValidatedProblem& prob, const GainAssembly& gains,
                                                              const RiccatiSolution& ric, const PhiSolution& phi,
                                                              const GridFunction& a, const GridFunction& b,
                                                              const GridFunction& lambda, const GridFunction& gamma) {
    if (prob.path_dependent())
        throw Error(ErrorKind::ModeUnsupported, "closed_loop_mean requires deterministic coefficient mode");
    require_same_grid(prob.grid(), phi.grid, "closed_loop_mean(phi)");
    (void)lambda;  // enters through phi

    const auto& grid = prob.grid();
    const auto& cf = prob.coeffs();
    const auto& jumps = prob.jumps();
    const int n = prob.state_dim();
    const int m = prob.control_dim();
    const double dt = grid.dt();

    const auto tables = detail::MeanTables::build(prob, gains);

    // Per-node forcing B Theta^{-1} (B'phi + D'psi + sum beta'theta nu + gamma).
    std::vector<Matrix> src(static_cast<std::size_t>(grid.n_nodes()));
    for (int k = 0; k <= grid.n_steps; ++k) {
        const double t = grid.node(k);
        Vector inner = cf.B.at(t).transpose() * phi.phi.node(k) + cf.D.at(t).transpose() * phi.psi.node(k) +
                       gamma.node(k);
        for (int j = 0; j < jumps.n_marks(); ++j) {
            const double nu = jumps.intensities[static_cast<std::size_t>(j)];
            if (nu == 0.0) continue;
            inner += nu * cf.beta[static_cast<std::size_t>(j)].at(t).transpose() *
                     phi.theta[static_cast<std::size_t>(j)].node(k);
        }
        src[static_cast<std::size_t>(k)] = tables.B_theta_inv[static_cast<std::size_t>(k)] * inner;
    }

    auto rhs = [&](double t, const Vector& x) -> Vector {
        return detail::interp_nodes(tables.A_hat, grid, t) * x + detail::interp_nodes(tables.A1_hat, grid, t) * a.at_time(t) +
               detail::interp_nodes(tables.B1_hat, grid, t) * b.at_time(t) + detail::interp_nodes(src, grid, t);
    };

    GridFunction mean_x(grid, n);
    Vector x = prob.x0();
    mean_x.set_node(0, x);
    for (int k = 0; k < grid.n_steps; ++k) {
        const double t0 = grid.node(k);
        const double t1 = grid.node(k + 1);
        const double tm = 0.5 * (t0 + t1);
        Vector k1 = rhs(t0, x);
        Vector k2 = rhs(tm, x + 0.5 * dt * k1);
        Vector k3 = rhs(tm, x + 0.5 * dt * k2);
        Vector k4 = rhs(t1, x + dt * k3);
        x = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if (!x.allFinite())
            throw Error(ErrorKind::NonFinite, "closed-loop mean blew up at node " + std::to_string(k + 1));
        mean_x.set_node(k + 1, x);
    }

    const GridFunction offset_m = assemble_offset(prob, gains, ric, phi, a, b, gamma);
    GridFunction mean_u(grid, m);
    for (int k = 0; k <= grid.n_steps; ++k) {
        const GainNode& g = gains.at(k);
        mean_u.set_node(k, g.gain * mean_x.node(k) + g.theta_inv * offset_m.node(k));
    }
    return {std::move(mean_x), std::move(mean_u)};
}

// Discretized mean-response operators on grid-sampled functions, built
// column by column from impulse inputs. Node-major stacking throughout.
struct OperatorMatrices {
    TimeGrid grid;
    int n = 0, m = 0;
    Matrix L0, L1, L2, L3, L4;       // -> stacked mean state, (N+1)n rows
    Matrix Lt0, Lt1, Lt2, Lt3, Lt4;  // -> stacked mean control, (N+1)m rows
    Matrix F1, F2, F3, F4;           // -> stacked offset solution phi, (N+1)n rows
    Vector weights;                  // quadrature weights of the outer L2 products

    // SVD of the stacked multiplier system [[L3, L4], [Lt3, Lt4]].
    Matrix S_U, S_V;
    Vector S_sv;
    int S_rank = 0;
    double S_sv_min_retained = 0.0;

    Eigen::Index x_rows() const { return L0.rows(); }
    Eigen::Index u_rows() const { return Lt0.rows(); }

    // Minimum-norm least-squares multiplier solve against target residual t.
    Vector solve_multiplier_system(const Vector& t) const {
        Vector proj = S_U.transpose() * t;
        Vector y = Vector::Zero(S_sv.size());
        for (int i = 0; i < S_rank; ++i) y(i) = proj(i) / S_sv(i);
        return S_V * y;
    }
};

namespace detail {

// Trapezoid weights; these define the outer L2 inner products so the
// discrete stationarity tracks the continuous one at O(dt^2).
inline Vector trapezoid_weights(const TimeGrid& grid) {
    Vector w = Vector::Constant(grid.n_nodes(), grid.dt());
    w(0) *= 0.5;
    w(grid.n_nodes() - 1) *= 0.5;
    return w;
}

inline Vector left_endpoint_weights(const TimeGrid& grid) {
    Vector w = Vector::Constant(grid.n_nodes(), grid.dt());
    w(grid.n_nodes() - 1) = 0.0;
    return w;
}

struct MeanResponse {
    Vector x_stack;    // (N+1)n
    Vector u_stack;    // (N+1)m
    Vector phi_stack;  // (N+1)n
};

inline MeanResponse propagate_mean(const ValidatedProblem& prob, const GainAssembly& gains,
                                   const RiccatiSolution& ric, const Vector& x0, const GridFunction& a,
                                   const GridFunction& b, const GridFunction& lambda, const GridFunction& gamma) {
    // x0 override: the impulse build probes the initial-state channel too.
    PhiSolution phi = solve_phi_deterministic(prob, gains, a, b, lambda, gamma);
    // Temporarily rewire the initial state by solving with a shifted problem
    // is unnecessary: the mean ODE takes x0 explicitly below.
    const auto& grid = prob.grid();
    const auto& cf = prob.coeffs();
    const auto& jumps = prob.jumps();
    const int n = prob.state_dim();
    const int m = prob.control_dim();
    const double dt = grid.dt();
    const auto tables = MeanTables::build(prob, gains);

    std::vector<Matrix> src(static_cast<std::size_t>(grid.n_nodes()));
    for (int k = 0; k <= grid.n_steps; ++k) {
        const double t = grid.node(k);
        Vector inner = cf.B.at(t).transpose() * phi.phi.node(k) + cf.D.at(t).transpose() * phi.psi.node(k) +
                       gamma.node(k);
        for (int j = 0; j < jumps.n_marks(); ++j) {
            const double nu = jumps.intensities[static_cast<std::size_t>(j)];
            if (nu == 0.0) continue;
            inner += nu * cf.beta[static_cast<std::size_t>(j)].at(t).transpose() *
                     phi.theta[static_cast<std::size_t>(j)].node(k);
        }
        src[static_cast<std::size_t>(k)] = tables.B_theta_inv[static_cast<std::size_t>(k)] * inner;
    }
    auto rhs = [&](double t, const Vector& x) -> Vector {
        return interp_nodes(tables.A_hat, grid, t) * x + interp_nodes(tables.A1_hat, grid, t) * a.at_time(t) +
               interp_nodes(tables.B1_hat, grid, t) * b.at_time(t) + interp_nodes(src, grid, t);
    };

    MeanResponse out;
    out.x_stack.resize(static_cast<Eigen::Index>(grid.n_nodes()) * n);
    out.u_stack.resize(static_cast<Eigen::Index>(grid.n_nodes()) * m);
    out.phi_stack = phi.phi.stacked();
    const GridFunction offset_m = assemble_offset(prob, gains, ric, phi, a, b, gamma);
    Vector x = x0;
    for (int k = 0; k <= grid.n_steps; ++k) {
        out.x_stack.segment(static_cast<Eigen::Index>(k) * n, n) = x;
        const GainNode& g = gains.at(k);
        out.u_stack.segment(static_cast<Eigen::Index>(k) * m, m) =
            g.gain * x + g.theta_inv * offset_m.node(k);
        if (k == grid.n_steps) break;
        const double t0 = grid.node(k);
        const double t1 = grid.node(k + 1);
        const double tm = 0.5 * (t0 + t1);
        Vector k1 = rhs(t0, x);
        Vector k2 = rhs(tm, x + 0.5 * dt * k1);
        Vector k3 = rhs(tm, x + 0.5 * dt * k2);
        Vector k4 = rhs(t1, x + dt * k3);
        x = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    return out;
}

}  // namespace detail

// Builds every operator matrix by propagating impulse inputs (one unit
// coordinate at one grid node per column; unit x0 coordinates for the
// initial-state channel). Columns are independent inner solves and run
// in parallel.
inline OperatorMatrices build_operator_matrices(const ValidatedProblem& prob, const GainAssembly& gains,
                                                const RiccatiSolution& ric) {
    if (prob.path_dependent())
        throw Error(ErrorKind::ModeUnsupported, "build_operator_matrices requires deterministic coefficient mode");
    const auto& grid = prob.grid();
    const int n = prob.state_dim();
    const int m = prob.control_dim();
    const int nodes = grid.n_nodes();
    const Eigen::Index xr = static_cast<Eigen::Index>(nodes) * n;
    const Eigen::Index ur = static_cast<Eigen::Index>(nodes) * m;

    OperatorMatrices ops;
    ops.grid = grid;
    ops.n = n;
    ops.m = m;
    ops.weights = detail::trapezoid_weights(grid);
    ops.L0.resize(xr, n);
    ops.Lt0.resize(ur, n);
    ops.L1.resize(xr, xr);
    ops.Lt1.resize(ur, xr);
    ops.L2.resize(xr, ur);
    ops.Lt2.resize(ur, ur);
    ops.L3.resize(xr, xr);
    ops.Lt3.resize(ur, xr);
    ops.L4.resize(xr, ur);
    ops.Lt4.resize(ur, ur);
    ops.F1.resize(xr, xr);
    ops.F2.resize(xr, ur);
    ops.F3.resize(xr, xr);
    ops.F4.resize(xr, ur);

    const GridFunction zn = GridFunction::zero(grid, n);
    const GridFunction zm = GridFunction::zero(grid, m);
    const Vector x0_zero = Vector::Zero(n);

    // x0 channel (phi does not see it)
    for (int i = 0; i < n; ++i) {
        Vector e = Vector::Zero(n);
        e(i) = 1.0;
        auto r = detail::propagate_mean(prob, gains, ric, e, zn, zm, zn, zm);
        ops.L0.col(i) = r.x_stack;
        ops.Lt0.col(i) = r.u_stack;
    }

    // grid-function channels: a, lambda (n-valued), b, gamma (m-valued)
    auto build_channel = [&](int dim, Matrix& Lx, Matrix& Lu, Matrix& Fphi, int channel) {
        const long n_cols = static_cast<long>(nodes) * dim;
        parallel_blocks(n_cols, 16, [&](long, long lo, long hi) {
            for (long c = lo; c < hi; ++c) {
                const int k = static_cast<int>(c / dim);
                const int i = static_cast<int>(c % dim);
                GridFunction impulse = GridFunction::zero(grid, dim);
                impulse.values(i, k) = 1.0;
                const GridFunction& a = channel == 0 ? impulse : zn;
                const GridFunction& b = channel == 1 ? impulse : zm;
                const GridFunction& la = channel == 2 ? impulse : zn;
                const GridFunction& ga = channel == 3 ? impulse : zm;
                auto r = detail::propagate_mean(prob, gains, ric, x0_zero, a, b, la, ga);
                Lx.col(c) = r.x_stack;
                Lu.col(c) = r.u_stack;
                Fphi.col(c) = r.phi_stack;
            }
        });
    };
    build_channel(n, ops.L1, ops.Lt1, ops.F1, 0);
    build_channel(m, ops.L2, ops.Lt2, ops.F2, 1);
    build_channel(n, ops.L3, ops.Lt3, ops.F3, 2);
    build_channel(m, ops.L4, ops.Lt4, ops.F4, 3);

    // SVD of the stacked multiplier system, kept for the least-squares solve.
    Matrix S(xr + ur, xr + ur);
    S.topLeftCorner(xr, xr) = ops.L3;
    S.topRightCorner(xr, ur) = ops.L4;
    S.bottomLeftCorner(ur, xr) = ops.Lt3;
    S.bottomRightCorner(ur, ur) = ops.Lt4;
    Eigen::BDCSVD<Matrix> svd(S, Eigen::ComputeThinU | Eigen::ComputeThinV);
    ops.S_U = svd.matrixU();
    ops.S_V = svd.matrixV();
    ops.S_sv = svd.singularValues();
    const double thresh = 1e-10 * (ops.S_sv.size() > 0 ? ops.S_sv(0) : 0.0);
    ops.S_rank = 0;
    for (Eigen::Index i = 0; i < ops.S_sv.size(); ++i)
        if (ops.S_sv(i) > thresh) ops.S_rank = static_cast<int>(i) + 1;
    ops.S_sv_min_retained = ops.S_rank > 0 ? ops.S_sv(ops.S_rank - 1) : 0.0;
    return ops;
}

// Minimum-norm least-squares solve of the stacked constraint equations
// for the extended multipliers. A residual above tolerance means the
// target pair is not attainable and is reported, never hidden.
inline Multipliers solve_multipliers(const ValidatedProblem& prob, const GainAssembly& gains,
                                     const RiccatiSolution& ric, const OperatorMatrices& ops, const Vector& x0,
                                     const GridFunction& a, const GridFunction& b) {
    require_same_grid(prob.grid(), ops.grid, "solve_multipliers");
    const auto& grid = prob.grid();
    const int n = prob.state_dim();
    const int m = prob.control_dim();

    // Residual target under zero multipliers, by direct propagation.
    const GridFunction zn = GridFunction::zero(grid, n);
    const GridFunction zm = GridFunction::zero(grid, m);
    auto base = detail::propagate_mean(prob, gains, ric, x0, a, b, zn, zm);
    Vector t(ops.x_rows() + ops.u_rows());
    t.head(ops.x_rows()) = a.stacked() - base.x_stack;
    t.tail(ops.u_rows()) = b.stacked() - base.u_stack;

    Vector lg = ops.solve_multiplier_system(t);

    Multipliers out;
    out.lambda = GridFunction::from_stacked(grid, n, lg.head(ops.x_rows()));
    out.gamma = GridFunction::from_stacked(grid, m, lg.tail(ops.u_rows()));
    Vector achieved(ops.x_rows() + ops.u_rows());
    achieved.head(ops.x_rows()) = ops.L3 * lg.head(ops.x_rows()) + ops.L4 * lg.tail(ops.u_rows());
    achieved.tail(ops.u_rows()) = ops.Lt3 * lg.head(ops.x_rows()) + ops.Lt4 * lg.tail(ops.u_rows());
    out.residual_norm = (achieved - t).norm();
    out.residual_max = (achieved - t).cwiseAbs().maxCoeff();
    out.rank = ops.S_rank;
    out.smallest_retained_sv = ops.S_sv_min_retained;
    out.min_norm = true;
    return out;
}

// Affine representation of the outer quadratic objective in the reduced
// coordinate (the mean-control path b): discretely E[X] is pinned to the
// flow of E[u], so the admissible pairs form the affine set
// {a = mean-flow(b), a(0) = x0} and the outer system is solved there.
struct OuterQuadratic {
    Matrix hessian;    // (N+1)m square, PSD
    Vector rhs;        // solve hessian * b = -rhs
    Matrix flow_b;     // a(b) = flow_b * b + flow_0
    Vector flow_0;
    Matrix xbar_b;     // realized mean state = xbar_b * b + xbar_0
    Vector xbar_0;
    Matrix ubar_b;     // realized mean control = ubar_b * b + ubar_0
    Vector ubar_0;
    double constant = 0.0;  // J(b) = b'Hb + 2 rhs'b + constant

    double evaluate(const Vector& b) const {
        return b.dot(hessian * b) + 2.0 * rhs.dot(b) + constant;
    }
};

struct OuterSolveDiagnostics {
    int cg_iterations = 0;
    double cg_residual = 0.0;
    double tikhonov = 0.0;
    bool degenerate_fast_path = false;
};

namespace detail {

// Mean-flow matrices of da/dt = (A + A1) a + (B + B1) b, a(0) = x0,
// discretized with the same RK4/interpolation conventions as the
// closed-loop mean so targets built from them are attainable.
inline void build_mean_flow(const ValidatedProblem& prob, Matrix& flow_b, Matrix& flow_x) {
    const auto& grid = prob.grid();
    const auto& cf = prob.coeffs();
    const int n = prob.state_dim();
    const int m = prob.control_dim();
    const int nodes = grid.n_nodes();
    const double dt = grid.dt();

    auto rhs = [&](double t, const Vector& x, const GridFunction& b) -> Vector {
        return (cf.A.at(t) + cf.A1.at(t)) * x + (cf.B.at(t) + cf.B1.at(t)) * b.at_time(t);
    };
    auto propagate = [&](const Vector& x0, const GridFunction& b) -> Vector {
        Vector out(static_cast<Eigen::Index>(nodes) * n);
        Vector x = x0;
        for (int k = 0; k <= grid.n_steps; ++k) {
            out.segment(static_cast<Eigen::Index>(k) * n, n) = x;
            if (k == grid.n_steps) break;
            const double t0 = grid.node(k);
            const double t1 = grid.node(k + 1);
            const double tm = 0.5 * (t0 + t1);
            Vector k1 = rhs(t0, x, b);
            Vector k2 = rhs(tm, x + 0.5 * dt * k1, b);
            Vector k3 = rhs(tm, x + 0.5 * dt * k2, b);
            Vector k4 = rhs(t1, x + dt * k3, b);
            x = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        return out;
    };

    flow_b.resize(static_cast<Eigen::Index>(nodes) * n, static_cast<Eigen::Index>(nodes) * m);
    flow_x.resize(static_cast<Eigen::Index>(nodes) * n, n);
    const GridFunction zb = GridFunction::zero(grid, m);
    for (int i = 0; i < n; ++i) {
        Vector e = Vector::Zero(n);
        e(i) = 1.0;
        flow_x.col(i) = propagate(e, zb);
    }
    const long n_cols = static_cast<long>(nodes) * m;
    parallel_blocks(n_cols, 16, [&](long, long lo, long hi) {
        for (long c = lo; c < hi; ++c) {
            GridFunction b = GridFunction::zero(grid, m);
            b.values(static_cast<int>(c % m), static_cast<int>(c / m)) = 1.0;
            flow_b.col(c) = propagate(Vector::Zero(n), b);
        }
    });
}

// Block-diagonal weight application: out = W * stacked, where W holds
// w_k * M(t_k) per node.
inline Matrix weighted_block_product(const ValidatedProblem& prob, const TimeVaryingMatrix& coeff, int dim,
                                     const Vector& weights, const Matrix& stacked) {
    const auto& grid = prob.grid();
    Matrix out(stacked.rows(), stacked.cols());
    for (int k = 0; k <= grid.n_steps; ++k) {
        const Matrix M = coeff.at(grid.node(k)) * weights(k);
        out.middleRows(static_cast<Eigen::Index>(k) * dim, dim) =
            M * stacked.middleRows(static_cast<Eigen::Index>(k) * dim, dim);
    }
    return out;
}

}  // namespace detail

// Assembles the outer PSD system on the admissible set.
inline OuterQuadratic build_outer_quadratic(const ValidatedProblem& prob, const OperatorMatrices& ops) {
    const auto& grid = prob.grid();
    const auto& cf = prob.coeffs();
    const int n = prob.state_dim();
    const int m = prob.control_dim();
    const Eigen::Index xr = ops.x_rows();
    const Eigen::Index ur = ops.u_rows();
    const Vector& w = ops.weights;
    const Vector x0 = prob.x0();

    OuterQuadratic q;
    Matrix flow_x;
    detail::build_mean_flow(prob, q.flow_b, flow_x);
    q.flow_0 = flow_x * x0;

    // Multiplier response to the reduced coordinate:
    //   t(b) = [a(b); b] - [[L1,L2],[Lt1,Lt2]] [a(b); b] - [L0; Lt0] x0
    Matrix t_b(xr + ur, ur);
    t_b.topRows(xr) = q.flow_b - ops.L1 * q.flow_b - ops.L2;
    t_b.bottomRows(ur) = Matrix::Identity(ur, ur) - ops.Lt1 * q.flow_b - ops.Lt2;
    Vector t_0(xr + ur);
    t_0.head(xr) = q.flow_0 - ops.L1 * q.flow_0 - ops.L0 * x0;
    t_0.tail(ur) = -ops.Lt1 * q.flow_0 - ops.Lt0 * x0;

    // lg = S^+ t  (columns through the truncated SVD)
    auto apply_pinv = [&](const Matrix& rhs_cols) -> Matrix {
        Matrix proj = ops.S_U.transpose() * rhs_cols;
        for (Eigen::Index i = 0; i < proj.rows(); ++i) {
            if (i < ops.S_rank)
                proj.row(i) /= ops.S_sv(i);
            else
                proj.row(i).setZero();
        }
        return ops.S_V * proj;
    };
    Matrix lg_b = apply_pinv(t_b);
    Vector lg_0 = apply_pinv(t_0);

    // Realized means as affine maps of b.
    q.xbar_b = ops.L1 * q.flow_b + ops.L2 + ops.L3 * lg_b.topRows(xr) + ops.L4 * lg_b.bottomRows(ur);
    q.xbar_0 = ops.L0 * x0 + ops.L1 * q.flow_0 + ops.L3 * lg_0.head(xr) + ops.L4 * lg_0.tail(ur);
    q.ubar_b = ops.Lt1 * q.flow_b + ops.Lt2 + ops.Lt3 * lg_b.topRows(xr) + ops.Lt4 * lg_b.bottomRows(ur);
    q.ubar_0 = ops.Lt0 * x0 + ops.Lt1 * q.flow_0 + ops.Lt3 * lg_0.head(xr) + ops.Lt4 * lg_0.tail(ur);

    // J(b) = <Q xbar, xbar>_w + <Q1 a, a>_w + <R ubar, ubar>_w + <R1 b, b>_w
    //        + <G xbar(T), xbar(T)>
    Matrix WQ_xb = detail::weighted_block_product(prob, cf.Q, n, w, q.xbar_b);
    Vector WQ_x0 = detail::weighted_block_product(prob, cf.Q, n, w, q.xbar_0);
    Matrix WQ1_fb = detail::weighted_block_product(prob, cf.Q1, n, w, q.flow_b);
    Vector WQ1_f0 = detail::weighted_block_product(prob, cf.Q1, n, w, q.flow_0);
    Matrix WR_ub = detail::weighted_block_product(prob, cf.R, m, w, q.ubar_b);
    Vector WR_u0 = detail::weighted_block_product(prob, cf.R, m, w, q.ubar_0);
    Matrix WR1_b = detail::weighted_block_product(prob, cf.R1, m, w, Matrix::Identity(ur, ur));

    const Matrix term_b = q.xbar_b.bottomRows(n);
    const Vector term_0 = q.xbar_0.tail(n);
    const Matrix G = cf.G;

    q.hessian = q.xbar_b.transpose() * WQ_xb + q.flow_b.transpose() * WQ1_fb + q.ubar_b.transpose() * WR_ub +
                WR1_b + term_b.transpose() * G * term_b;
    q.hessian = symmetrize(q.hessian);
    q.rhs = q.xbar_b.transpose() * WQ_x0 + q.flow_b.transpose() * WQ1_f0 + q.ubar_b.transpose() * WR_u0 +
            term_b.transpose() * G * term_0;
    q.constant = q.xbar_0.dot(WQ_x0) + q.flow_0.dot(WQ1_f0) + q.ubar_0.dot(WR_u0) + term_0.dot(G * term_0);
    return q;
}

namespace detail {

// Diagonally preconditioned CG on the PSD outer system.
inline Vector preconditioned_cg(const Matrix& H, const Vector& rhs, double tol, int max_iters, int& iters,
                                double& final_residual) {
    const Eigen::Index nn = rhs.size();
    Vector d = H.diagonal().cwiseMax(1e-300);
    Vector x = Vector::Zero(nn);
    Vector r = rhs;
    Vector z = r.cwiseQuotient(d);
    Vector p = z;
    double rz = r.dot(z);
    const double rhs_norm = std::max(rhs.norm(), 1e-300);
    iters = 0;
    final_residual = r.norm() / rhs_norm;
    while (iters < max_iters && final_residual > tol) {
        Vector Hp = H * p;
        const double pHp = p.dot(Hp);
        if (!(pHp > 0.0)) break;  // lost positive definiteness numerically
        const double alpha = rz / pHp;
        x += alpha * p;
        r -= alpha * Hp;
        z = r.cwiseQuotient(d);
        const double rz_next = r.dot(z);
        p = z + (rz_next / rz) * p;
        rz = rz_next;
        ++iters;
        final_residual = r.norm() / rhs_norm;
    }
    return x;
}

}  // namespace detail

// Outer solve. The mean-field-off case reduces exactly: the optimal pair
// is the plain closed-loop mean with zero multipliers, and that fixed
// point is returned directly. Otherwise the reduced PSD system is solved
// by CG with diagonal preconditioning, with a reported Tikhonov shift if
// the system is numerically singular.
inline MeanFieldPair solve_mean_field(const ValidatedProblem& prob, const GainAssembly& gains,
                                      const RiccatiSolution& ric, const OperatorMatrices& ops,
                                      OuterSolveDiagnostics* diag = nullptr) {
    const auto& grid = prob.grid();
    const int n = prob.state_dim();
    const int m = prob.control_dim();

    if (prob.mean_field_off()) {
        const GridFunction zn = GridFunction::zero(grid, n);
        const GridFunction zm = GridFunction::zero(grid, m);
        auto base = detail::propagate_mean(prob, gains, ric, prob.x0(), zn, zm, zn, zm);
        MeanFieldPair pair;
        pair.a = GridFunction::from_stacked(grid, n, base.x_stack);
        pair.b = GridFunction::from_stacked(grid, m, base.u_stack);
        if (diag) diag->degenerate_fast_path = true;
        return pair;
    }

    OuterQuadratic q = build_outer_quadratic(prob, ops);

    int iters = 0;
    double resid = 0.0;
    const double scale = std::max(q.hessian.trace() / std::max<double>(1, q.hessian.rows()), 1e-300);
    const int max_iters = static_cast<int>(10 * q.hessian.rows() + 100);
    Vector b = detail::preconditioned_cg(q.hessian, -q.rhs, 1e-12, max_iters, iters, resid);
    double tikhonov = 0.0;
    if (resid > 1e-10) {
        // Numerically singular system: shift and retry, reporting the shift.
        tikhonov = 1e-10 * scale;
        Matrix H = q.hessian + tikhonov * Matrix::Identity(q.hessian.rows(), q.hessian.cols());
        b = detail::preconditioned_cg(H, -q.rhs, 1e-12, max_iters, iters, resid);
        if (resid > 1e-8)
            throw Error(ErrorKind::CGNoConvergence, "outer solve stalled: residual " + std::to_string(resid) +
                                                        " after " + std::to_string(iters) + " iterations");
    }
    if (diag) {
        diag->cg_iterations = iters;
        diag->cg_residual = resid;
        diag->tikhonov = tikhonov;
        diag->degenerate_fast_path = false;
    }

    MeanFieldPair pair;
    pair.a = GridFunction::from_stacked(grid, n, q.flow_b * b + q.flow_0);
    pair.b = GridFunction::from_stacked(grid, m, b);
    return pair;
}

// Mean adjoint components E[Y], E[Z], E[K(z_j)] from the decoupling
// identities, with E[X] = xbar, E[u] = ubar and the frozen inputs
// (a_in, b_in).
struct MeanAdjoint {
    GridFunction y, z;
    std::vector<GridFunction> k;
};

inline MeanAdjoint mean_adjoint(const ValidatedProblem& prob, const RiccatiSolution& ric, const PhiSolution& phi,
                                const GridFunction& xbar, const GridFunction& ubar, const GridFunction& a_in,
                                const GridFunction& b_in) {
    const auto& grid = prob.grid();
    const auto& cf = prob.coeffs();
    const int n = prob.state_dim();
    const int K = prob.jumps().n_marks();
    MeanAdjoint adj;
    adj.y = GridFunction::zero(grid, n);
    adj.z = GridFunction::zero(grid, n);
    adj.k.assign(static_cast<std::size_t>(K), GridFunction::zero(grid, n));
    for (int k = 0; k <= grid.n_steps; ++k) {
        const double t = grid.node(k);
        const Matrix& P = ric.P[static_cast<std::size_t>(k)];
        const Matrix& Lam = ric.Lambda[static_cast<std::size_t>(k)];
        adj.y.set_node(k, P * xbar.node(k) + phi.phi.node(k));
        adj.z.set_node(k, P * (cf.C.at(t) * xbar.node(k) + cf.C1.at(t) * a_in.node(k) + cf.D.at(t) * ubar.node(k) +
                               cf.D1.at(t) * b_in.node(k)) +
                              phi.psi.node(k) + Lam * xbar.node(k));
        for (int j = 0; j < K; ++j) {
            const std::size_t js = static_cast<std::size_t>(j);
            const Matrix& Gam = ric.Gamma[static_cast<std::size_t>(k)][js];
            adj.k[js].set_node(k, (P + Gam) * (cf.alpha[js].at(t) * xbar.node(k) + cf.alpha1[js].at(t) * a_in.node(k) +
                                               cf.beta[js].at(t) * ubar.node(k) + cf.beta1[js].at(t) * b_in.node(k)) +
                                      phi.theta[js].node(k) + Gam * xbar.node(k));
        }
    }
    return adj;
}

// Hamiltonian-consistent multipliers: the values that make the relaxed
// optimality system coincide with the original one,
//   lambda = A1' E[Y] + C1' E[Z] + sum alpha1' E[K] nu + Q1 a,
//   gamma  = B1' E[Y] + D1' E[Z] + sum beta1'  E[K] nu + R1 b.
// The constraint equations leave multipliers massively non-unique; only
// this member makes the full stationarity identity hold.
inline std::pair<GridFunction, GridFunction> canonical_multipliers(const ValidatedProblem& prob,
                                                                   const RiccatiSolution& ric, const PhiSolution& phi,
                                                                   const GridFunction& xbar, const GridFunction& ubar,
                                                                   const GridFunction& a_in, const GridFunction& b_in) {
    const auto& grid = prob.grid();
    const auto& cf = prob.coeffs();
    const auto& jumps = prob.jumps();
    const int n = prob.state_dim();
    const int m = prob.control_dim();
    MeanAdjoint adj = mean_adjoint(prob, ric, phi, xbar, ubar, a_in, b_in);
    GridFunction lambda(grid, n), gamma(grid, m);
    for (int k = 0; k <= grid.n_steps; ++k) {
        const double t = grid.node(k);
        Vector lam = cf.A1.at(t).transpose() * adj.y.node(k) + cf.C1.at(t).transpose() * adj.z.node(k) +
                     cf.Q1.at(t) * a_in.node(k);
        Vector gam = cf.B1.at(t).transpose() * adj.y.node(k) + cf.D1.at(t).transpose() * adj.z.node(k) +
                     cf.R1.at(t) * b_in.node(k);
        for (int j = 0; j < jumps.n_marks(); ++j) {
            const double nu = jumps.intensities[static_cast<std::size_t>(j)];
            if (nu == 0.0) continue;
            const std::size_t js = static_cast<std::size_t>(j);
            lam += nu * cf.alpha1[js].at(t).transpose() * adj.k[js].node(k);
            gam += nu * cf.beta1[js].at(t).transpose() * adj.k[js].node(k);
        }
        lambda.set_node(k, lam);
        gamma.set_node(k, gam);
    }
    return {std::move(lambda), std::move(gamma)};
}

namespace detail {

// blockdiag(T(t_k)) applied to a node-major stacked matrix.
inline Matrix block_apply(const TimeGrid& grid, const std::function<Matrix(int)>& node_matrix, int dim_in,
                          int dim_out, const Matrix& stacked) {
    Matrix out(static_cast<Eigen::Index>(grid.n_nodes()) * dim_out, stacked.cols());
    for (int k = 0; k <= grid.n_steps; ++k) {
        out.middleRows(static_cast<Eigen::Index>(k) * dim_out, dim_out) =
            node_matrix(k) * stacked.middleRows(static_cast<Eigen::Index>(k) * dim_in, dim_in);
    }
    return out;
}

}  // namespace detail

// The targets, multipliers and realized means solve one affine system:
// constraint consistency (realized means equal targets) stacked with the
// Hamiltonian-consistent multiplier identities. Assembled from the
// impulse-built response matrices and solved directly, so the returned
// tuple reproduces itself through closed_loop_mean to solver precision
// on any grid.
struct ConsistentTuple {
    GridFunction a, b, lambda, gamma;
    double linear_residual = 0.0;
};

inline ConsistentTuple solve_consistent_tuple(const ValidatedProblem& prob, const RiccatiSolution& ric,
                                              const OperatorMatrices& ops) {
    const auto& grid = prob.grid();
    const auto& cf = prob.coeffs();
    const auto& jumps = prob.jumps();
    const int n = prob.state_dim();
    const int m = prob.control_dim();
    const int K = jumps.n_marks();
    const Eigen::Index xr = ops.x_rows();
    const Eigen::Index ur = ops.u_rows();
    const Eigen::Index vs = xr + ur;    // targets (a, b)
    const Eigen::Index total = 2 * vs;  // plus multipliers (lambda, gamma)

    auto bd = [&](const std::function<Matrix(int)>& node_matrix, int dim_in, int dim_out, const Matrix& stacked) {
        return detail::block_apply(grid, node_matrix, dim_in, dim_out, stacked);
    };
    auto coeff = [&](const TimeVaryingMatrix& c) {
        return [&c, &grid](int k) -> Matrix { return c.at(grid.node(k)); };
    };
    auto coeff_t = [&](const TimeVaryingMatrix& c) {
        return [&c, &grid](int k) -> Matrix { return c.at(grid.node(k)).transpose(); };
    };
    auto P_of = [&ric](int k) -> Matrix { return ric.P[static_cast<std::size_t>(k)]; };

    // Responses of the intermediates to s = [a; b; lambda; gamma] and the
    // x0-driven constants. Every map reuses the impulse-built matrices.
    Matrix xbar_s(xr, total), ubar_s(ur, total), phi_lin(xr, total);
    xbar_s << ops.L1, ops.L2, ops.L3, ops.L4;
    ubar_s << ops.Lt1, ops.Lt2, ops.Lt3, ops.Lt4;
    phi_lin << ops.F1, ops.F2, ops.F3, ops.F4;
    const Vector xbar_c = ops.L0 * prob.x0();
    const Vector ubar_c = ops.Lt0 * prob.x0();

    Matrix proj_a = Matrix::Zero(xr, total);
    proj_a.middleCols(0, xr).setIdentity();
    Matrix proj_b = Matrix::Zero(ur, total);
    proj_b.middleCols(xr, ur).setIdentity();

    // E[Y] = P xbar + phi
    Matrix y_s = bd(P_of, n, n, xbar_s) + phi_lin;
    Vector y_c = bd(P_of, n, n, xbar_c);
    // E[Z] = P (C xbar + C1 a + D ubar + D1 b)   (psi = Lambda = 0 here)
    Matrix z_arg_s = bd(coeff(cf.C), n, n, xbar_s) + bd(coeff(cf.C1), n, n, proj_a) +
                     bd(coeff(cf.D), m, n, ubar_s) + bd(coeff(cf.D1), m, n, proj_b);
    Vector z_arg_c = bd(coeff(cf.C), n, n, xbar_c) + bd(coeff(cf.D), m, n, ubar_c);
    Matrix z_s = bd(P_of, n, n, z_arg_s);
    Vector z_c = bd(P_of, n, n, z_arg_c);

    // lambda = Q1 a + A1' E[Y] + C1' E[Z] + sum alpha1' E[K_j] nu_j
    // gamma  = R1 b + B1' E[Y] + D1' E[Z] + sum beta1'  E[K_j] nu_j
    Matrix lam_s = bd(coeff(cf.Q1), n, n, proj_a) + bd(coeff_t(cf.A1), n, n, y_s) + bd(coeff_t(cf.C1), n, n, z_s);
    Vector lam_c = bd(coeff_t(cf.A1), n, n, y_c) + bd(coeff_t(cf.C1), n, n, z_c);
    Matrix gam_s = bd(coeff(cf.R1), m, m, proj_b) + bd(coeff_t(cf.B1), n, m, y_s) + bd(coeff_t(cf.D1), n, m, z_s);
    Vector gam_c = bd(coeff_t(cf.B1), n, m, y_c) + bd(coeff_t(cf.D1), n, m, z_c);
    for (int j = 0; j < K; ++j) {
        const double nu = jumps.intensities[static_cast<std::size_t>(j)];
        if (nu == 0.0) continue;
        const std::size_t js = static_cast<std::size_t>(j);
        // E[K_j] = (P + Gamma_j)(alpha_j xbar + alpha1_j a + beta_j ubar + beta1_j b) + Gamma_j xbar
        auto PG = [&ric, js](int k) -> Matrix {
            return ric.P[static_cast<std::size_t>(k)] + ric.Gamma[static_cast<std::size_t>(k)][js];
        };
        auto Gam = [&ric, js](int k) -> Matrix { return ric.Gamma[static_cast<std::size_t>(k)][js]; };
        Matrix k_arg_s = bd(coeff(cf.alpha[js]), n, n, xbar_s) + bd(coeff(cf.alpha1[js]), n, n, proj_a) +
                         bd(coeff(cf.beta[js]), m, n, ubar_s) + bd(coeff(cf.beta1[js]), m, n, proj_b);
        Vector k_arg_c = bd(coeff(cf.alpha[js]), n, n, xbar_c) + bd(coeff(cf.beta[js]), m, n, ubar_c);
        Matrix k_s = bd(PG, n, n, k_arg_s) + bd(Gam, n, n, xbar_s);
        Vector k_c = bd(PG, n, n, k_arg_c) + bd(Gam, n, n, xbar_c);
        lam_s += nu * bd(coeff_t(cf.alpha1[js]), n, n, k_s);
        lam_c += nu * bd(coeff_t(cf.alpha1[js]), n, n, k_c);
        gam_s += nu * bd(coeff_t(cf.beta1[js]), n, m, k_s);
        gam_c += nu * bd(coeff_t(cf.beta1[js]), n, m, k_c);
    }

    // Stacked system: targets reproduce themselves, multipliers are the
    // canonical values.
    Matrix A = Matrix::Zero(total, total);
    Vector rhs(total);
    A.topRows(xr) = proj_a - xbar_s;
    rhs.head(xr) = xbar_c;
    A.middleRows(xr, ur) = proj_b - ubar_s;
    rhs.segment(xr, ur) = ubar_c;
    Matrix proj_lam = Matrix::Zero(xr, total);
    proj_lam.middleCols(vs, xr).setIdentity();
    Matrix proj_gam = Matrix::Zero(ur, total);
    proj_gam.middleCols(vs + xr, ur).setIdentity();
    A.middleRows(vs, xr) = proj_lam - lam_s;
    rhs.segment(vs, xr) = lam_c;
    A.bottomRows(ur) = proj_gam - gam_s;
    rhs.tail(ur) = gam_c;

    Eigen::PartialPivLU<Matrix> lu(A);
    Vector s = lu.solve(rhs);
    const double resid = (A * s - rhs).cwiseAbs().maxCoeff() / std::max(1.0, rhs.cwiseAbs().maxCoeff());
    if (!(resid < 1e-8) || !s.allFinite())
        throw Error(ErrorKind::ConstraintResidualTooLarge,
                    "consistency system solve failed (residual " + std::to_string(resid) + ")");

    ConsistentTuple out;
    out.a = GridFunction::from_stacked(grid, n, s.head(xr));
    out.b = GridFunction::from_stacked(grid, m, s.segment(xr, ur));
    out.lambda = GridFunction::from_stacked(grid, n, s.segment(vs, xr));
    out.gamma = GridFunction::from_stacked(grid, m, s.tail(ur));
    out.linear_residual = resid;
    return out;
}

struct PipelineDiagnostics {
    double mean_state_residual = 0.0;    // max-node |E[X] - a*|
    double mean_control_residual = 0.0;  // max-node |E[u] - b*|
    double multiplier_residual = 0.0;
    double multiplier_residual_max = 0.0;
    int multiplier_rank = 0;
    double smallest_retained_sv = 0.0;
    double consistency_system_residual = 0.0;
    double outer_vs_system_gap = 0.0;  // |CG outer minimizer - system solution| on b
    OuterSolveDiagnostics outer;
    double riccati_uniform_positivity = 0.0;
    double theta_condition = 0.0;
};

// Full decoupling pipeline output.
struct MfslqSolution {
    RiccatiSolution riccati;
    GainAssembly gains;
    PhiSolution phi;
    MeanFieldPair pair;
    Multipliers multipliers;
    FeedbackLaw law;
    GridFunction offset_m;  // the affine source M; law.offset = Theta^{-1} M
    PipelineDiagnostics diagnostics;
};

// Pipeline: Riccati -> gains -> operators -> outer solve -> canonical
// multipliers -> offset equation -> feedback law. The tuple
// (a*, b*, lambda*, gamma*) is refined to a joint fixed point of the
// realized-mean map so the consistency battery holds on any grid, then
// the battery gates the result.
inline MfslqSolution solve_mfslq(const ValidatedProblem& prob, double consistency_tol = 1e-6) {
    if (prob.path_dependent())
        throw Error(ErrorKind::ModeUnsupported, "solve_mfslq requires deterministic coefficient mode");

    MfslqSolution sol;
    sol.riccati = solve_riccati_deterministic(prob);
    sol.gains = assemble_gains(prob, sol.riccati);

    OperatorMatrices ops = build_operator_matrices(prob, sol.gains, sol.riccati);
    sol.pair = solve_mean_field(prob, sol.gains, sol.riccati, ops, &sol.diagnostics.outer);

    const int n = prob.state_dim();
    const int m = prob.control_dim();
    sol.multipliers.rank = ops.S_rank;
    sol.multipliers.smallest_retained_sv = ops.S_sv_min_retained;

    if (sol.diagnostics.outer.degenerate_fast_path) {
        sol.multipliers.lambda = GridFunction::zero(prob.grid(), n);
        sol.multipliers.gamma = GridFunction::zero(prob.grid(), m);
        sol.phi = solve_phi_deterministic(prob, sol.gains, sol.pair.a, sol.pair.b, sol.multipliers.lambda,
                                          sol.multipliers.gamma);
    } else {
        // Replace the outer minimizer by the self-reproducing solution of
        // the stacked consistency system (same object up to discretization
        // order); the gap to the CG output is recorded as a diagnostic.
        auto tuple = solve_consistent_tuple(prob, sol.riccati, ops);
        sol.diagnostics.consistency_system_residual = tuple.linear_residual;
        sol.diagnostics.outer_vs_system_gap = (tuple.b.values - sol.pair.b.values).cwiseAbs().maxCoeff();
        sol.pair.a = tuple.a;
        sol.pair.b = tuple.b;
        sol.multipliers.lambda = tuple.lambda;
        sol.multipliers.gamma = tuple.gamma;
        sol.phi = solve_phi_deterministic(prob, sol.gains, sol.pair.a, sol.pair.b, sol.multipliers.lambda,
                                          sol.multipliers.gamma);
    }

    // Attainability report for the returned targets (min-norm diagnostics).
    {
        auto lsq = solve_multipliers(prob, sol.gains, sol.riccati, ops, prob.x0(), sol.pair.a, sol.pair.b);
        sol.multipliers.residual_norm = lsq.residual_norm;
        sol.multipliers.residual_max = lsq.residual_max;
        sol.multipliers.min_norm = false;  // returned multipliers are the canonical ones
    }
    sol.diagnostics.multiplier_residual = sol.multipliers.residual_norm;
    sol.diagnostics.multiplier_residual_max = sol.multipliers.residual_max;
    sol.diagnostics.multiplier_rank = sol.multipliers.rank;
    sol.diagnostics.smallest_retained_sv = sol.multipliers.smallest_retained_sv;

    sol.offset_m = assemble_offset(prob, sol.gains, sol.riccati, sol.phi, sol.pair.a, sol.pair.b,
                                   sol.multipliers.gamma);

    const auto& grid = prob.grid();
    sol.law.grid = grid;
    sol.law.gain.resize(static_cast<std::size_t>(grid.n_nodes()));
    sol.law.offset.resize(static_cast<std::size_t>(grid.n_nodes()));
    for (int k = 0; k <= grid.n_steps; ++k) {
        const GainNode& g = sol.gains.at(k);
        sol.law.gain[static_cast<std::size_t>(k)] = g.gain;
        sol.law.offset[static_cast<std::size_t>(k)] = g.theta_inv * sol.offset_m.node(k);
    }

    // Consistency battery (ODE means, no Monte Carlo).
    auto means = closed_loop_mean(prob, sol.gains, sol.riccati, sol.phi, sol.pair.a, sol.pair.b,
                                  sol.multipliers.lambda, sol.multipliers.gamma);
    sol.diagnostics.mean_state_residual = (means.first.values - sol.pair.a.values).cwiseAbs().maxCoeff();
    sol.diagnostics.mean_control_residual = (means.second.values - sol.pair.b.values).cwiseAbs().maxCoeff();
    sol.diagnostics.riccati_uniform_positivity = sol.riccati.uniform_positivity;
    sol.diagnostics.theta_condition = sol.gains.max_theta_condition;
    if (sol.diagnostics.mean_state_residual > consistency_tol ||
        sol.diagnostics.mean_control_residual > consistency_tol)
        throw Error(ErrorKind::ConstraintResidualTooLarge,
                    "consistency battery failed: |E[X]-a*| = " +
                        std::to_string(sol.diagnostics.mean_state_residual) + ", |E[u]-b*| = " +
                        std::to_string(sol.diagnostics.mean_control_residual));
    return sol;
}

}  // namespace mfslq
