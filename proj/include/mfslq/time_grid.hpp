#pragma once

#include "mfslq/common.hpp"

namespace mfslq {

// Uniform grid t_k = k*dt on [0, T]. Node count is n_steps + 1.
struct TimeGrid {
    double horizon = 1.0;
    int n_steps = 1;

    TimeGrid() = default;
    TimeGrid(double T, int steps) : horizon(T), n_steps(steps) {
        if (!(T > 0.0))
            throw Error(ErrorKind::DimensionMismatch, "TimeGrid: horizon must be positive, got " + std::to_string(T));
        if (steps < 1)
            throw Error(ErrorKind::DimensionMismatch, "TimeGrid: n_steps must be >= 1, got " + std::to_string(steps));
    }

    double dt() const { return horizon / n_steps; }
    int n_nodes() const { return n_steps + 1; }
    double node(int k) const { return k == n_steps ? horizon : k * dt(); }

    bool operator==(const TimeGrid& o) const { return horizon == o.horizon && n_steps == o.n_steps; }
    bool operator!=(const TimeGrid& o) const { return !(*this == o); }
};

inline void require_same_grid(const TimeGrid& a, const TimeGrid& b, const char* where) {
    if (a != b)
        throw Error(ErrorKind::GridMismatch, std::string(where) + ": time grids differ (" +
                                                 std::to_string(a.n_steps) + " steps vs " +
                                                 std::to_string(b.n_steps) + ")");
}

}  // namespace mfslq
