#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace tocnmpc {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// State and control vectors are plain Eigen vectors; dimension contracts
/// are checked against the owning model at operation boundaries.
using StateVector = Eigen::VectorXd;
using ControlVector = Eigen::VectorXd;

/// Parametric variation point: lift mass [kg] and lift position [m].
struct ParamPoint {
    double m_l = 0.0;
    double y_l = 0.0;
};

/// Sampled state/input history. Inputs are piecewise constant per interval,
/// so with K+1 time stamps there are K input columns.
struct Trajectory {
    Vec times;   ///< K+1 stamps [s], strictly increasing
    Mat states;  ///< n x (K+1)
    Mat inputs;  ///< m x K

    [[nodiscard]] int samples() const { return static_cast<int>(times.size()); }

    void check_consistent() const {
        const auto K1 = times.size();
        if (states.cols() != K1)
            throw std::invalid_argument("Trajectory: states/times length mismatch");
        if (inputs.cols() != 0 && inputs.cols() != K1 - 1)
            throw std::invalid_argument("Trajectory: inputs must have one column per interval");
        for (Eigen::Index k = 0; k + 1 < K1; ++k)
            if (!(times[k + 1] > times[k]))
                throw std::invalid_argument("Trajectory: times must be strictly increasing");
    }
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw std::invalid_argument(what);
}

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& x) {
    return x.allFinite();
}

}  // namespace tocnmpc
