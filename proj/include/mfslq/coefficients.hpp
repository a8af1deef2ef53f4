#pragma once

#include "mfslq/common.hpp"
#include "mfslq/jump_model.hpp"
#include "mfslq/time_grid.hpp"

#include <algorithm>
#include <functional>
#include <memory>

namespace mfslq {

// A matrix-valued function of time: either one constant matrix or a table
// of (t, matrix) entries, each applying from its time stamp onward
// (cadlag; the entry at t=0.5 is the value AT 0.5).
//
// The experimental path-dependent mode adds a W-linear slope:
//   value(t, w) = base(t) + slope(t) * w
// with slope given in the same constant/table form (zero when absent).
class TimeVaryingMatrix {
  public:
    TimeVaryingMatrix() = default;

    static TimeVaryingMatrix constant(Matrix m) {
        TimeVaryingMatrix c;
        c.times_ = {0.0};
        c.values_ = {std::move(m)};
        return c;
    }

    static TimeVaryingMatrix table(std::vector<double> times, std::vector<Matrix> values) {
        if (times.empty() || times.size() != values.size())
            throw Error(ErrorKind::DimensionMismatch, "coefficient table: need matching non-empty times/values");
        for (std::size_t i = 1; i < times.size(); ++i)
            if (!(times[i] > times[i - 1]))
                throw Error(ErrorKind::DimensionMismatch, "coefficient table: times must be strictly increasing");
        for (std::size_t i = 1; i < values.size(); ++i)
            if (values[i].rows() != values[0].rows() || values[i].cols() != values[0].cols())
                throw Error(ErrorKind::ShapeMismatch, "coefficient table: entries have inconsistent shapes");
        TimeVaryingMatrix c;
        c.times_ = std::move(times);
        c.values_ = std::move(values);
        return c;
    }

    bool empty() const { return values_.empty(); }
    Eigen::Index rows() const { return values_.empty() ? 0 : values_[0].rows(); }
    Eigen::Index cols() const { return values_.empty() ? 0 : values_[0].cols(); }
    bool is_constant() const { return values_.size() == 1 && !has_w_slope(); }

    // Segment lookup: last entry with time <= t (first entry for t before it).
    const Matrix& at(double t) const {
        if (values_.empty()) throw Error(ErrorKind::IndexOutOfRange, "coefficient: empty table");
        auto it = std::upper_bound(times_.begin(), times_.end(), t);
        std::size_t idx = (it == times_.begin()) ? 0 : static_cast<std::size_t>(it - times_.begin() - 1);
        return values_[idx];
    }

    Matrix value(double t, double w = 0.0) const {
        if (!has_w_slope() || w == 0.0) return at(t);
        return at(t) + w_slope_->at(t) * w;
    }

    bool has_w_slope() const { return w_slope_ != nullptr && !w_slope_->empty(); }
    void set_w_slope(TimeVaryingMatrix slope) {
        if (!empty() && !slope.empty() && (slope.rows() != rows() || slope.cols() != cols()))
            throw Error(ErrorKind::ShapeMismatch, "coefficient W-slope shape differs from base");
        w_slope_ = std::make_shared<TimeVaryingMatrix>(std::move(slope));
    }
    const TimeVaryingMatrix* w_slope() const { return w_slope_.get(); }

    void apply(const std::function<void(Matrix&)>& fn) {
        for (auto& v : values_) fn(v);
    }

    void visit(const std::function<void(const Matrix&)>& fn) const {
        for (const auto& v : values_) fn(v);
    }

    bool is_zero() const {
        bool zero = true;
        for (const auto& v : values_) zero = zero && (v.size() == 0 || v.cwiseAbs().maxCoeff() == 0.0);
        if (has_w_slope()) zero = zero && w_slope_->is_zero();
        return zero;
    }

  private:
    std::vector<double> times_;
    std::vector<Matrix> values_;
    std::shared_ptr<TimeVaryingMatrix> w_slope_;
};

// All coefficient processes of the state equation and cost functional.
// Per-mark entries (alpha, alpha1, beta, beta1) are indexed like the
// JumpModel's marks.
struct CoefficientSet {
    // state drift
    TimeVaryingMatrix A, A1;  // n x n
    TimeVaryingMatrix B, B1;  // n x m
    // diffusion
    TimeVaryingMatrix C, C1;  // n x n
    TimeVaryingMatrix D, D1;  // n x m
    // jump coefficients, one entry per mark
    std::vector<TimeVaryingMatrix> alpha, alpha1;  // n x n
    std::vector<TimeVaryingMatrix> beta, beta1;    // n x m
    // weights
    TimeVaryingMatrix Q, Q1;  // n x n, symmetric PSD
    TimeVaryingMatrix R, R1;  // m x m, symmetric; R >= delta I
    Matrix G;                 // n x n, symmetric PSD
    double delta = 0.0;       // uniform positivity margin of R
};

// All coefficients evaluated at one grid node (and, in path-dependent
// mode, one W value).
struct CoefficientSnapshot {
    Matrix A, A1, B, B1, C, C1, D, D1;
    std::vector<Matrix> alpha, alpha1, beta, beta1;
    Matrix Q, Q1, R, R1;
};

}  // namespace mfslq
