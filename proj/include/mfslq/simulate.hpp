#pragma once

#include "mfslq/meanfield.hpp"
#include "mfslq/noise.hpp"
#include "mfslq/threads.hpp"

#include <optional>

namespace mfslq {

// Mean-field closure for Monte Carlo runs: frozen deterministic inputs
// (the constrained dynamics), or the interacting-particle closure with
// cross-path sample means substituted at every step.
struct MeanClosure {
    enum class Kind { Frozen, SampleInteracting };
    Kind kind = Kind::Frozen;
    GridFunction a, b;

    static MeanClosure frozen(GridFunction a, GridFunction b) {
        MeanClosure c;
        c.kind = Kind::Frozen;
        c.a = std::move(a);
        c.b = std::move(b);
        return c;
    }
    static MeanClosure sample() {
        MeanClosure c;
        c.kind = Kind::SampleInteracting;
        return c;
    }
};

namespace detail {

struct NodeCoefficients {
    std::vector<CoefficientSnapshot> snaps;

    static NodeCoefficients prefetch(const ValidatedProblem& prob) {
        NodeCoefficients nc;
        const int nodes = prob.grid().n_nodes();
        nc.snaps.reserve(static_cast<std::size_t>(nodes));
        for (int k = 0; k < nodes; ++k) nc.snaps.push_back(eval_coefficients(prob, k));
        return nc;
    }
};

// One Euler step with compensated jump increments; jump coefficients act
// on the pre-jump state.
inline Vector euler_step(const CoefficientSnapshot& s, const JumpModel& jumps, const Vector& x, const Vector& u,
                         const Vector& abar, const Vector& bbar, double dW, const long* jump_counts, double dt) {
    Vector next = x + (s.A * x + s.A1 * abar + s.B * u + s.B1 * bbar) * dt +
                  (s.C * x + s.C1 * abar + s.D * u + s.D1 * bbar) * dW;
    for (int j = 0; j < jumps.n_marks(); ++j) {
        const double comp = static_cast<double>(jump_counts[j]) - jumps.intensities[static_cast<std::size_t>(j)] * dt;
        if (comp == 0.0) continue;
        const std::size_t js = static_cast<std::size_t>(j);
        next += (s.alpha[js] * x + s.alpha1[js] * abar + s.beta[js] * u + s.beta1[js] * bbar) * comp;
    }
    return next;
}

// Deterministic per-node mean accumulator: block partial sums combined
// pairwise in block order.
class BlockMeanAccumulator {
  public:
    BlockMeanAccumulator(int dim, int nodes, long n_paths)
        : dim_(dim), nodes_(nodes), n_paths_(n_paths),
          n_blocks_((n_paths + kPathBlock - 1) / kPathBlock),
          sums_(Matrix::Zero(static_cast<Eigen::Index>(dim) * nodes, n_blocks_)),
          sq_sums_(Matrix::Zero(static_cast<Eigen::Index>(dim) * nodes, n_blocks_)) {}

    void add(long block, int k, const Vector& v) {
        sums_.block(static_cast<Eigen::Index>(k) * dim_, block, dim_, 1) += v;
        sq_sums_.block(static_cast<Eigen::Index>(k) * dim_, block, dim_, 1) += v.cwiseProduct(v);
    }

    GridFunction mean(const TimeGrid& grid) const {
        GridFunction out(grid, dim_);
        for (int k = 0; k < nodes_; ++k)
            for (int i = 0; i < dim_; ++i) out.values(i, k) = row_sum(sums_, k, i) / static_cast<double>(n_paths_);
        return out;
    }

    GridFunction std_error(const TimeGrid& grid) const {
        GridFunction out(grid, dim_);
        if (n_paths_ < 2) return out;
        for (int k = 0; k < nodes_; ++k)
            for (int i = 0; i < dim_; ++i) {
                const double s = row_sum(sums_, k, i);
                const double sq = row_sum(sq_sums_, k, i);
                const double mean = s / static_cast<double>(n_paths_);
                const double var =
                    std::max(0.0, (sq - static_cast<double>(n_paths_) * mean * mean) / static_cast<double>(n_paths_ - 1));
                out.values(i, k) = std::sqrt(var / static_cast<double>(n_paths_));
            }
        return out;
    }

  private:
    double row_sum(const Matrix& m, int k, int i) const {
        std::vector<double> row(static_cast<std::size_t>(n_blocks_));
        for (long b = 0; b < n_blocks_; ++b) row[static_cast<std::size_t>(b)] = m(static_cast<Eigen::Index>(k) * dim_ + i, b);
        return pairwise_sum(row);
    }

    int dim_;
    int nodes_;
    long n_paths_;
    long n_blocks_;
    Matrix sums_;
    Matrix sq_sums_;
};

// What a simulation run should produce. Trajectory storage is optional so
// the big Monte Carlo estimators can stream.
struct SimRequest {
    bool store_paths = false;
    bool accumulate_cost = false;
    bool accumulate_means = false;
};

struct SimResult {
    PathBundle bundle;                 // filled when store_paths
    std::vector<double> per_path_cost; // Q/R running cost + terminal term, when accumulate_cost
    GridFunction mean_x, mean_u;       // closure means actually used in the dynamics
    GridFunction sample_mean_x, sample_mean_u, sample_se_x;  // when accumulate_means
};

inline SimResult run_simulation(const ValidatedProblem& prob, const ControlPath& control, const NoiseBundle& noise,
                                const MeanClosure& closure, const SimRequest& req) {
    require_same_grid(prob.grid(), noise.grid(), "simulate");
    const auto& grid = prob.grid();
    const auto& jumps = prob.jumps();
    const int n = prob.state_dim();
    const int m = prob.control_dim();
    const int nodes = grid.n_nodes();
    const long P = noise.n_paths();
    const double dt = grid.dt();
    const int K = jumps.n_marks();

    const bool interacting = closure.kind == MeanClosure::Kind::SampleInteracting;
    if (interacting && P == 1 && (prob.has_mean_field_dynamics() || prob.has_mean_field_cost()))
        throw Error(ErrorKind::MissingMeanClosure,
                    "cannot form a sample mean-field closure from a single path; pass mean inputs");
    if (!interacting) {
        require_same_grid(grid, closure.a.grid, "simulate(closure.a)");
        require_same_grid(grid, closure.b.grid, "simulate(closure.b)");
    }

    const auto nc = prob.path_dependent() ? NodeCoefficients{} : NodeCoefficients::prefetch(prob);
    auto snapshot_for = [&](int k, double w_level) -> const CoefficientSnapshot& {
        static thread_local CoefficientSnapshot scratch;
        if (prob.path_dependent()) {
            scratch = eval_coefficients(prob, k, w_level);
            return scratch;
        }
        return nc.snaps[static_cast<std::size_t>(k)];
    };

    SimResult res;
    if (req.store_paths) {
        res.bundle.grid = grid;
        res.bundle.n_paths = P;
        res.bundle.state_dim = n;
        res.bundle.control_dim = m;
        res.bundle.seed = noise.seed();
        res.bundle.states.resize(static_cast<std::size_t>(P) * static_cast<std::size_t>(nodes) *
                                 static_cast<std::size_t>(n));
        res.bundle.controls.resize(static_cast<std::size_t>(P) * static_cast<std::size_t>(nodes) *
                                   static_cast<std::size_t>(m));
    }
    if (req.accumulate_cost) res.per_path_cost.assign(static_cast<std::size_t>(P), 0.0);

    auto store = [&](long p, int k, const Vector& x, const Vector& u) {
        if (!req.store_paths) return;
        const std::size_t off = (static_cast<std::size_t>(p) * static_cast<std::size_t>(nodes) +
                                 static_cast<std::size_t>(k));
        Eigen::Map<Vector>(res.bundle.states.data() + off * static_cast<std::size_t>(n), n) = x;
        Eigen::Map<Vector>(res.bundle.controls.data() + off * static_cast<std::size_t>(m), m) = u;
    };
    auto cost_term = [&](long p, int k, const Vector& x, const Vector& u) {
        if (!req.accumulate_cost) return;
        const auto& s = nc.snaps[static_cast<std::size_t>(k)];
        double& c = res.per_path_cost[static_cast<std::size_t>(p)];
        if (k < grid.n_steps) c += dt * (x.dot(s.Q * x) + u.dot(s.R * u));
        if (k == grid.n_steps) c += x.dot(prob.coeffs().G * x);
    };

    BlockMeanAccumulator mean_acc(n, nodes, P);
    BlockMeanAccumulator mean_u_acc(m, nodes, P);

    if (!interacting) {
        parallel_blocks(P, kPathBlock, [&](long blk, long lo, long hi) {
            std::vector<long> counts(static_cast<std::size_t>(std::max(K, 1)));
            for (long p = lo; p < hi; ++p) {
                Vector x = prob.x0();
                double w_level = 0.0;
                for (int k = 0; k < nodes; ++k) {
                    const Vector u = control.evaluate(p, k, x);
                    store(p, k, x, u);
                    cost_term(p, k, x, u);
                    if (req.accumulate_means) {
                        mean_acc.add(blk, k, x);
                        mean_u_acc.add(blk, k, u);
                    }
                    if (k == grid.n_steps) break;
                    const double dW = noise.brownian_increment(p, k);
                    for (int j = 0; j < K; ++j) counts[static_cast<std::size_t>(j)] = noise.jump_count(p, k, j);
                    x = euler_step(snapshot_for(k, w_level), jumps, x, u, closure.a.node(k), closure.b.node(k), dW,
                                   counts.data(), dt);
                    if (!x.allFinite())
                        throw Error(ErrorKind::NonFiniteState, "state diverged on path " + std::to_string(p) +
                                                                   " at step " + std::to_string(k));
                    w_level += dW;
                }
            }
        });
        res.mean_x = closure.a;
        res.mean_u = closure.b;
    } else {
        Matrix X(n, P);
        X.colwise() = prob.x0();
        Matrix U(m, P);
        Vector w_levels = Vector::Zero(P);
        res.mean_x = GridFunction::zero(grid, n);
        res.mean_u = GridFunction::zero(grid, m);
        const long n_blocks = (P + kPathBlock - 1) / kPathBlock;
        Matrix partials(static_cast<Eigen::Index>(n + m), n_blocks);
        for (int k = 0; k < nodes; ++k) {
            parallel_blocks(P, kPathBlock, [&](long blk, long lo, long hi) {
                Vector acc = Vector::Zero(n + m);
                for (long p = lo; p < hi; ++p) {
                    U.col(p) = control.evaluate(p, k, X.col(p));
                    acc.head(n) += X.col(p);
                    acc.tail(m) += U.col(p);
                }
                partials.col(blk) = acc;
            });
            Vector total(n + m);
            for (int i = 0; i < n + m; ++i) {
                std::vector<double> row(static_cast<std::size_t>(n_blocks));
                for (long b = 0; b < n_blocks; ++b) row[static_cast<std::size_t>(b)] = partials(i, b);
                total(i) = pairwise_sum(row);
            }
            const Vector abar = total.head(n) / static_cast<double>(P);
            const Vector bbar = total.tail(m) / static_cast<double>(P);
            res.mean_x.set_node(k, abar);
            res.mean_u.set_node(k, bbar);
            parallel_blocks(P, kPathBlock, [&](long blk, long lo, long hi) {
                std::vector<long> counts(static_cast<std::size_t>(std::max(K, 1)));
                for (long p = lo; p < hi; ++p) {
                    store(p, k, X.col(p), U.col(p));
                    cost_term(p, k, X.col(p), U.col(p));
                    if (req.accumulate_means) {
                        mean_acc.add(blk, k, X.col(p));
                        mean_u_acc.add(blk, k, U.col(p));
                    }
                    if (k == grid.n_steps) continue;
                    const double dW = noise.brownian_increment(p, k);
                    for (int j = 0; j < K; ++j) counts[static_cast<std::size_t>(j)] = noise.jump_count(p, k, j);
                    Vector x = euler_step(snapshot_for(k, w_levels(p)), jumps, X.col(p), U.col(p), abar, bbar, dW,
                                          counts.data(), dt);
                    if (!x.allFinite())
                        throw Error(ErrorKind::NonFiniteState,
                                    "state diverged on path " + std::to_string(p) + " at step " + std::to_string(k));
                    X.col(p) = x;
                    w_levels(p) += dW;
                }
            });
        }
    }

    if (req.accumulate_means) {
        res.sample_mean_x = mean_acc.mean(grid);
        res.sample_mean_u = mean_u_acc.mean(grid);
        res.sample_se_x = mean_acc.std_error(grid);
    }
    if (req.store_paths) {
        res.bundle.mean_x = res.mean_x;
        res.bundle.mean_u = res.mean_u;
    }
    return res;
}

}  // namespace detail

// Monte Carlo ensemble with stored trajectories.
inline PathBundle simulate_state(const ValidatedProblem& prob, const ControlPath& control, const NoiseBundle& noise,
                                 const MeanClosure& closure) {
    detail::SimRequest req;
    req.store_paths = true;
    return detail::run_simulation(prob, control, noise, closure, req).bundle;
}

struct CostInputs {
    // frozen (a, b) of the constrained cost; when absent the closure means
    // stand in
    const GridFunction* mean_a = nullptr;
    const GridFunction* mean_b = nullptr;
    // extended-multiplier penalty
    const GridFunction* lambda = nullptr;
    const GridFunction* gamma = nullptr;
    // deterministic E[X], E[u] for the penalty terms
    const GridFunction* det_mean_x = nullptr;
    const GridFunction* det_mean_u = nullptr;
};

namespace detail {

inline CostEstimate finalize_cost(const ValidatedProblem& prob, const std::vector<double>& per_path,
                                  const GridFunction& closure_a, const GridFunction& closure_b,
                                  const CostInputs& inputs) {
    const auto& grid = prob.grid();
    const double dt = grid.dt();
    const long P = static_cast<long>(per_path.size());
    const auto nc = NodeCoefficients::prefetch(prob);

    CostEstimate est;
    est.n_paths = P;
    const double mean_cost = pairwise_sum(per_path) / static_cast<double>(P);
    if (P > 1) {
        std::vector<double> sq(per_path.size());
        for (std::size_t i = 0; i < per_path.size(); ++i)
            sq[i] = (per_path[i] - mean_cost) * (per_path[i] - mean_cost);
        est.std_error = std::sqrt(pairwise_sum(sq) / static_cast<double>(P - 1) / static_cast<double>(P));
    }

    const GridFunction& abar = inputs.mean_a ? *inputs.mean_a : closure_a;
    const GridFunction& bbar = inputs.mean_b ? *inputs.mean_b : closure_b;
    double mean_terms = 0.0;
    for (int k = 0; k < grid.n_steps; ++k) {
        const auto& s = nc.snaps[static_cast<std::size_t>(k)];
        mean_terms += dt * (abar.node(k).dot(s.Q1 * abar.node(k)) + bbar.node(k).dot(s.R1 * bbar.node(k)));
    }

    double penalty = 0.0;
    if (inputs.lambda || inputs.gamma) {
        const GridFunction& ex = inputs.det_mean_x ? *inputs.det_mean_x : closure_a;
        const GridFunction& eu = inputs.det_mean_u ? *inputs.det_mean_u : closure_b;
        for (int k = 0; k < grid.n_steps; ++k) {
            if (inputs.lambda) penalty += 2.0 * dt * inputs.lambda->node(k).dot(ex.node(k) - abar.node(k));
            if (inputs.gamma) penalty += 2.0 * dt * inputs.gamma->node(k).dot(eu.node(k) - bbar.node(k));
        }
    }

    est.value = mean_cost + mean_terms + penalty;
    if (!std::isfinite(est.value)) throw Error(ErrorKind::NonFinite, "cost estimate is not finite");
    return est;
}

}  // namespace detail

// Left-endpoint quadrature of the running cost plus the terminal term,
// averaged over stored paths. Mean-field and multiplier terms are
// deterministic and do not contribute Monte Carlo variance.
inline CostEstimate evaluate_cost(const ValidatedProblem& prob, const PathBundle& paths,
                                  const CostInputs& inputs = {}) {
    require_same_grid(prob.grid(), paths.grid, "evaluate_cost");
    if (prob.path_dependent())
        throw Error(ErrorKind::ModeUnsupported, "evaluate_cost requires deterministic coefficient mode");
    const auto& grid = prob.grid();
    const double dt = grid.dt();
    const long P = paths.n_paths;
    const auto nc = detail::NodeCoefficients::prefetch(prob);

    std::vector<double> per_path(static_cast<std::size_t>(P));
    parallel_blocks(P, kPathBlock, [&](long, long lo, long hi) {
        for (long p = lo; p < hi; ++p) {
            double c = 0.0;
            for (int k = 0; k < grid.n_steps; ++k) {
                const auto& s = nc.snaps[static_cast<std::size_t>(k)];
                const Vector x = paths.state(p, k);
                const Vector u = paths.control(p, k);
                c += dt * (x.dot(s.Q * x) + u.dot(s.R * u));
            }
            const Vector xT = paths.state(p, grid.n_steps);
            c += xT.dot(prob.coeffs().G * xT);
            per_path[static_cast<std::size_t>(p)] = c;
        }
    });
    return detail::finalize_cost(prob, per_path, paths.mean_x, paths.mean_u, inputs);
}

// Streaming cost estimator (no trajectory storage); same per-path math
// as evaluate_cost.
inline CostEstimate estimate_cost_mc(const ValidatedProblem& prob, const ControlPath& control,
                                     const NoiseBundle& noise, const MeanClosure& closure,
                                     const CostInputs& inputs = {}) {
    if (prob.path_dependent())
        throw Error(ErrorKind::ModeUnsupported, "estimate_cost_mc requires deterministic coefficient mode");
    detail::SimRequest req;
    req.accumulate_cost = true;
    auto res = detail::run_simulation(prob, control, noise, closure, req);
    return detail::finalize_cost(prob, res.per_path_cost, res.mean_x, res.mean_u, inputs);
}

// Cross-path sample mean per node with standard errors.
struct MeanTrajectory {
    GridFunction mean;
    GridFunction std_error;
};

inline MeanTrajectory estimate_mean_trajectory(const PathBundle& paths) {
    const auto& grid = paths.grid;
    const int n = paths.state_dim;
    const long P = paths.n_paths;
    detail::BlockMeanAccumulator acc(n, grid.n_nodes(), P);
    parallel_blocks(P, kPathBlock, [&](long blk, long lo, long hi) {
        for (long p = lo; p < hi; ++p)
            for (int k = 0; k < grid.n_nodes(); ++k) acc.add(blk, k, paths.state(p, k));
    });
    MeanTrajectory out;
    out.mean = acc.mean(grid);
    out.std_error = acc.std_error(grid);
    return out;
}

// Streaming sample means of state and control under a control law.
inline std::pair<MeanTrajectory, GridFunction> estimate_means_mc(const ValidatedProblem& prob,
                                                                 const ControlPath& control, const NoiseBundle& noise,
                                                                 const MeanClosure& closure) {
    detail::SimRequest req;
    req.accumulate_means = true;
    auto res = detail::run_simulation(prob, control, noise, closure, req);
    MeanTrajectory t;
    t.mean = res.sample_mean_x;
    t.std_error = res.sample_se_x;
    return {std::move(t), std::move(res.sample_mean_u)};
}

}  // namespace mfslq
