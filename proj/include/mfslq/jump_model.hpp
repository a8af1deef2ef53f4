#pragma once

#include "mfslq/common.hpp"

#include <functional>

namespace mfslq {

// Finite-mark jump measure: marks z_1..z_K with intensities nu_k >= 0.
// Every integral against nu(dz) in the solver is the exact finite sum
// over marks.
struct JumpModel {
    std::vector<std::string> marks;
    std::vector<double> intensities;

    JumpModel() = default;
    JumpModel(std::vector<std::string> mark_labels, std::vector<double> nus)
        : marks(std::move(mark_labels)), intensities(std::move(nus)) {
        if (marks.size() != intensities.size())
            throw Error(ErrorKind::DimensionMismatch, "JumpModel: " + std::to_string(marks.size()) +
                                                          " marks but " + std::to_string(intensities.size()) +
                                                          " intensities");
        for (std::size_t j = 0; j < intensities.size(); ++j) {
            if (!(intensities[j] >= 0.0) || !std::isfinite(intensities[j]))
                throw Error(ErrorKind::DimensionMismatch,
                            "JumpModel: intensity of mark '" + marks[j] + "' must be finite and >= 0");
        }
    }

    int n_marks() const { return static_cast<int>(marks.size()); }
    double total_intensity() const {
        double s = 0.0;
        for (double nu : intensities) s += nu;
        return s;
    }

    int mark_index(const std::string& label) const {
        for (std::size_t j = 0; j < marks.size(); ++j)
            if (marks[j] == label) return static_cast<int>(j);
        throw Error(ErrorKind::IndexOutOfRange, "JumpModel: unknown mark '" + label + "'");
    }
};

// sum_j f(z_j) * nu_j for a per-mark matrix-valued map. The zero-mark sum
// needs an explicit shape, so callers pass rows/cols.
inline Matrix jump_integral(const std::function<Matrix(int)>& f, const JumpModel& jumps, int rows, int cols) {
    Matrix acc = Matrix::Zero(rows, cols);
    for (int j = 0; j < jumps.n_marks(); ++j) {
        Matrix fj = f(j);
        if (fj.rows() != rows || fj.cols() != cols)
            throw Error(ErrorKind::ShapeMismatch,
                        "jump_integral: f(z_" + std::to_string(j + 1) + ") has shape " + std::to_string(fj.rows()) +
                            "x" + std::to_string(fj.cols()) + ", expected " + std::to_string(rows) + "x" +
                            std::to_string(cols));
        acc += fj * jumps.intensities[j];
    }
    return acc;
}

}  // namespace mfslq
