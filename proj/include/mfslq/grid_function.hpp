#pragma once

#include "mfslq/common.hpp"
#include "mfslq/time_grid.hpp"

namespace mfslq {

// Vector-valued function sampled on the grid nodes, stored column-wise
// (dim x n_nodes). Linear interpolation serves the RK4 half-steps.
struct GridFunction {
    TimeGrid grid;
    Matrix values;  // dim x (n_steps + 1)

    GridFunction() = default;
    GridFunction(const TimeGrid& g, int dim) : grid(g), values(Matrix::Zero(dim, g.n_nodes())) {}
    GridFunction(const TimeGrid& g, Matrix v) : grid(g), values(std::move(v)) {
        if (values.cols() != g.n_nodes())
            throw Error(ErrorKind::GridMismatch, "GridFunction: " + std::to_string(values.cols()) +
                                                     " columns for " + std::to_string(g.n_nodes()) + " nodes");
    }

    static GridFunction zero(const TimeGrid& g, int dim) { return GridFunction(g, dim); }
    static GridFunction constant(const TimeGrid& g, const Vector& v) {
        GridFunction f(g, static_cast<int>(v.size()));
        f.values.colwise() = v;
        return f;
    }

    int dim() const { return static_cast<int>(values.rows()); }
    Vector node(int k) const { return values.col(k); }
    void set_node(int k, const Vector& v) { values.col(k) = v; }

    Vector at_time(double t) const {
        const double dt = grid.dt();
        if (t <= 0.0) return values.col(0);
        if (t >= grid.horizon) return values.col(values.cols() - 1);
        const double s = t / dt;
        const int k = std::min(static_cast<int>(s), grid.n_steps - 1);
        const double w = s - k;
        return (1.0 - w) * values.col(k) + w * values.col(k + 1);
    }

    double max_norm() const { return values.size() == 0 ? 0.0 : values.cwiseAbs().maxCoeff(); }

    // Stacked vector (node-major: all coordinates of node 0, then node 1, ...)
    Vector stacked() const {
        Vector out(values.size());
        for (int k = 0; k < values.cols(); ++k) out.segment(k * dim(), dim()) = values.col(k);
        return out;
    }

    static GridFunction from_stacked(const TimeGrid& g, int dim, const Vector& stacked) {
        if (stacked.size() != static_cast<Eigen::Index>(dim) * g.n_nodes())
            throw Error(ErrorKind::GridMismatch, "GridFunction::from_stacked: size mismatch");
        GridFunction f(g, dim);
        for (int k = 0; k < g.n_nodes(); ++k) f.values.col(k) = stacked.segment(k * dim, dim);
        return f;
    }
};

}  // namespace mfslq
