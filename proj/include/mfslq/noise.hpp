#pragma once

#include "mfslq/jump_model.hpp"
#include "mfslq/rng.hpp"
#include "mfslq/time_grid.hpp"

namespace mfslq {

// Driving noise for a Monte Carlo ensemble. Draws are not materialized:
// each (path, step, mark) increment is recomputed from its counter-based
// substream, so identical inputs give identical draws under any worker
// count or evaluation order.
class NoiseBundle {
  public:
    NoiseBundle(TimeGrid grid, JumpModel jumps, long n_paths, std::uint64_t seed)
        : grid_(std::move(grid)), jumps_(std::move(jumps)), n_paths_(n_paths), seed_(seed) {
        if (n_paths < 1)
            throw Error(ErrorKind::DimensionMismatch, "NoiseBundle: n_paths must be >= 1");
    }

    const TimeGrid& grid() const { return grid_; }
    const JumpModel& jumps() const { return jumps_; }
    long n_paths() const { return n_paths_; }
    std::uint64_t seed() const { return seed_; }

    // Brownian increment over [t_k, t_{k+1}), variance dt.
    double brownian_increment(long path, int step) const {
        SubStream s(seed_, static_cast<std::uint64_t>(path), static_cast<std::uint64_t>(step), rng::kBrownian);
        return std::sqrt(grid_.dt()) * s.next_normal();
    }

    // Poisson count of mark j over [t_k, t_{k+1}), mean nu_j * dt.
    long jump_count(long path, int step, int mark) const {
        SubStream s(seed_, static_cast<std::uint64_t>(path), static_cast<std::uint64_t>(step),
                    rng::kJumpBase + static_cast<std::uint64_t>(mark));
        return s.next_poisson(jumps_.intensities[static_cast<std::size_t>(mark)] * grid_.dt());
    }

    // W(t_k) reconstructed as the prefix sum of increments (used by the
    // path-dependent coefficient mode and the regression tier).
    double brownian_level(long path, int upto_step) const {
        double w = 0.0;
        for (int k = 0; k < upto_step; ++k) w += brownian_increment(path, k);
        return w;
    }

    // Sample-statistics self test: mean(dW) near 0 and var(dW) near dt
    // within `se_multiples` standard errors, over all paths and steps.
    bool self_check(double se_multiples = 5.0) const {
        const long total = n_paths_ * grid_.n_steps;
        std::vector<double> vals;
        vals.reserve(static_cast<std::size_t>(total));
        for (long p = 0; p < n_paths_; ++p)
            for (int k = 0; k < grid_.n_steps; ++k) vals.push_back(brownian_increment(p, k));
        const double mean = pairwise_sum(vals) / static_cast<double>(total);
        std::vector<double> sq(vals.size());
        for (std::size_t i = 0; i < vals.size(); ++i) sq[i] = (vals[i] - mean) * (vals[i] - mean);
        const double var = pairwise_sum(sq) / static_cast<double>(total - 1);
        const double dt = grid_.dt();
        const double se_mean = std::sqrt(dt / static_cast<double>(total));
        const double se_var = dt * std::sqrt(2.0 / static_cast<double>(total - 1));
        return std::abs(mean) <= se_multiples * se_mean && std::abs(var - dt) <= se_multiples * se_var;
    }

  private:
    TimeGrid grid_;
    JumpModel jumps_;
    long n_paths_;
    std::uint64_t seed_;
};

inline NoiseBundle sample_noise(const TimeGrid& grid, const JumpModel& jumps, long n_paths, std::uint64_t seed) {
    return NoiseBundle(grid, jumps, n_paths, seed);
}

}  // namespace mfslq
