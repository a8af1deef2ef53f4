#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mfslq {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Library-wide error taxonomy. The CLI maps kinds to exit codes
// (input/validation -> 2, solver -> 3); verification failures are
// reported through VerificationReport, not exceptions.
enum class ErrorKind {
    DimensionMismatch,
    NotPSD,
    RBelowDelta,
    IndexOutOfRange,
    ShapeMismatch,
    NonFiniteState,
    MissingMeanClosure,
    GridMismatch,
    PositivityLost,
    NonFinite,
    ThetaSingular,
    RegressionIllConditioned,
    CGNoConvergence,
    ConstraintResidualTooLarge,
    TreeTooLarge,
    DiscretizationMismatch,
    ModeUnsupported,
    ParseError,
    IoError,
};

class Error : public std::runtime_error {
  public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

  private:
    ErrorKind kind_;
};

inline const char* error_kind_name(ErrorKind k) {
    switch (k) {
        case ErrorKind::DimensionMismatch: return "DimensionMismatch";
        case ErrorKind::NotPSD: return "NotPSD";
        case ErrorKind::RBelowDelta: return "RBelowDelta";
        case ErrorKind::IndexOutOfRange: return "IndexOutOfRange";
        case ErrorKind::ShapeMismatch: return "ShapeMismatch";
        case ErrorKind::NonFiniteState: return "NonFiniteState";
        case ErrorKind::MissingMeanClosure: return "MissingMeanClosure";
        case ErrorKind::GridMismatch: return "GridMismatch";
        case ErrorKind::PositivityLost: return "PositivityLost";
        case ErrorKind::NonFinite: return "NonFinite";
        case ErrorKind::ThetaSingular: return "ThetaSingular";
        case ErrorKind::RegressionIllConditioned: return "RegressionIllConditioned";
        case ErrorKind::CGNoConvergence: return "CGNoConvergence";
        case ErrorKind::ConstraintResidualTooLarge: return "ConstraintResidualTooLarge";
        case ErrorKind::TreeTooLarge: return "TreeTooLarge";
        case ErrorKind::DiscretizationMismatch: return "DiscretizationMismatch";
        case ErrorKind::ModeUnsupported: return "ModeUnsupported";
        case ErrorKind::ParseError: return "ParseError";
        case ErrorKind::IoError: return "IoError";
    }
    return "Unknown";
}

// Pairwise (cascade) summation over a contiguous range. Used for all
// cross-path reductions so results do not depend on worker count.
inline double pairwise_sum(const double* data, std::size_t count) {
    if (count <= 8) {
        double s = 0.0;
        for (std::size_t i = 0; i < count; ++i) s += data[i];
        return s;
    }
    std::size_t half = count / 2;
    return pairwise_sum(data, half) + pairwise_sum(data + half, count - half);
}

inline double pairwise_sum(const std::vector<double>& v) { return pairwise_sum(v.data(), v.size()); }

// FNV-1a, used for manifest content hashes (reproducibility bookkeeping,
// not security).
inline std::uint64_t fnv1a64(const void* data, std::size_t size) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

inline Matrix symmetrize(const Matrix& m) { return 0.5 * (m + m.transpose()); }

}  // namespace mfslq
