#pragma once

#include "mfslq/grid_function.hpp"
#include "mfslq/rng.hpp"

namespace mfslq {

// u(t_k, X) = gain_k * X + offset_k.
struct FeedbackLaw {
    TimeGrid grid;
    std::vector<Matrix> gain;    // m x n per node
    std::vector<Vector> offset;  // m per node

    int control_dim() const { return gain.empty() ? 0 : static_cast<int>(gain[0].rows()); }

    Vector evaluate(int k, const Vector& x) const {
        return gain[static_cast<std::size_t>(k)] * x + offset[static_cast<std::size_t>(k)];
    }
};

// Open-loop table, pure feedback, or feedback plus a bounded random
// open-loop direction (per path and step, drawn from direction_seed):
// u = law(X) + eps * v_{p,k}. The last form is what the perturbation
// checks simulate.
struct ControlPath {
    enum class Kind { OpenLoop, Feedback, FeedbackPerturbed };

    Kind kind = Kind::Feedback;
    GridFunction open_loop;  // m x nodes, OpenLoop only
    FeedbackLaw law;         // Feedback / FeedbackPerturbed
    double eps = 0.0;
    std::uint64_t direction_seed = 0;

    static ControlPath open(GridFunction u) {
        ControlPath c;
        c.kind = Kind::OpenLoop;
        c.open_loop = std::move(u);
        return c;
    }
    static ControlPath feedback(FeedbackLaw l) {
        ControlPath c;
        c.kind = Kind::Feedback;
        c.law = std::move(l);
        return c;
    }
    static ControlPath perturbed(FeedbackLaw l, double eps, std::uint64_t dir_seed) {
        ControlPath c;
        c.kind = Kind::FeedbackPerturbed;
        c.law = std::move(l);
        c.eps = eps;
        c.direction_seed = dir_seed;
        return c;
    }

    bool is_open_loop() const { return kind == Kind::OpenLoop; }

    // Bounded direction component, uniform in [-1,1]^m.
    Vector direction(long path, int step, int m) const {
        SubStream s(direction_seed, static_cast<std::uint64_t>(path), static_cast<std::uint64_t>(step),
                    rng::kDirection);
        Vector v(m);
        for (int i = 0; i < m; ++i) v(i) = s.next_symmetric();
        return v;
    }

    Vector evaluate(long path, int k, const Vector& x) const {
        switch (kind) {
            case Kind::OpenLoop: return open_loop.node(k);
            case Kind::Feedback: return law.evaluate(k, x);
            case Kind::FeedbackPerturbed:
                return law.evaluate(k, x) + eps * direction(path, k, law.control_dim());
        }
        return Vector();
    }
};

// Monte Carlo ensemble of state/control trajectories, stored path-major.
// Only produced when trajectories are actually needed (exports, adjoint
// reconstruction); the large MC estimators stream instead.
struct PathBundle {
    TimeGrid grid;
    long n_paths = 0;
    int state_dim = 0;
    int control_dim = 0;
    std::uint64_t seed = 0;
    std::vector<double> states;    // n_paths * n_nodes * n
    std::vector<double> controls;  // n_paths * n_nodes * m
    GridFunction mean_x;           // mean-field closure actually used
    GridFunction mean_u;

    Eigen::Map<const Vector> state(long path, int k) const {
        const std::size_t off =
            (static_cast<std::size_t>(path) * static_cast<std::size_t>(grid.n_nodes()) + static_cast<std::size_t>(k)) *
            static_cast<std::size_t>(state_dim);
        return Eigen::Map<const Vector>(states.data() + off, state_dim);
    }
    Eigen::Map<const Vector> control(long path, int k) const {
        const std::size_t off =
            (static_cast<std::size_t>(path) * static_cast<std::size_t>(grid.n_nodes()) + static_cast<std::size_t>(k)) *
            static_cast<std::size_t>(control_dim);
        return Eigen::Map<const Vector>(controls.data() + off, control_dim);
    }
};

struct CostEstimate {
    double value = 0.0;
    double std_error = 0.0;
    long n_paths = 0;
};

}  // namespace mfslq
