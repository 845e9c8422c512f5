#pragma once

#include <tocnmpc/model.hpp>
#include <tocnmpc/ocp.hpp>

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace tocnmpc {

/// Solution of the discrete algebraic Riccati equation plus the LQR gain
/// K (regulator convention u = -K x) and the closed-loop spectral radius.
struct RiccatiResult {
    Mat P_ric;
    Mat K;
    double closed_loop_spectral_radius = 0.0;
};

/// Fixed-point DARE iteration P <- A'PA - A'PB (R + B'PB)^-1 B'PA + Q
/// starting from P = Q. Throws on divergence or non-convergence (message
/// carries the last residual) and when the closed loop is not stable.
inline RiccatiResult solve_dare(const Mat& A, const Mat& B, const Mat& Q, const Mat& R,
                                double tol = 1e-12) {
    const int n = static_cast<int>(A.rows());
    const int m = static_cast<int>(B.cols());
    require(A.cols() == n && B.rows() == n, "solve_dare: system dimension mismatch");
    require(Q.rows() == n && Q.cols() == n, "solve_dare: Q dimension mismatch");
    require(R.rows() == m && R.cols() == m, "solve_dare: R dimension mismatch");
    require(tol > 0.0, "solve_dare: tolerance must be positive");
    detail::require_psd(Q, 0.0, "solve_dare: Q");
    detail::require_psd(R, 1e-14, "solve_dare: R");

    Mat P = Q;
    double resid = std::numeric_limits<double>::infinity();
    constexpr int kMaxIters = 100000;
    for (int it = 0; it < kMaxIters; ++it) {
        const Mat BtPB = R + B.transpose() * P * B;
        const Mat gain = BtPB.ldlt().solve(B.transpose() * P * A);
        Mat P_next = A.transpose() * P * A - A.transpose() * P * B * gain + Q;
        P_next = 0.5 * (P_next + P_next.transpose()).eval();
        if (!all_finite(P_next))
            throw std::runtime_error("solve_dare: iteration diverged, (A,B) likely not stabilizable");
        resid = (P_next - P).cwiseAbs().maxCoeff();
        P = P_next;
        if (resid < tol) break;
    }
    if (resid >= tol)
        throw std::runtime_error("solve_dare: no convergence in 100000 iterations, residual " +
                                 std::to_string(resid));

    RiccatiResult res;
    res.P_ric = P;
    res.K = (R + B.transpose() * P * B).ldlt().solve(B.transpose() * P * A);
    Eigen::EigenSolver<Mat> eig(A - B * res.K);
    res.closed_loop_spectral_radius = eig.eigenvalues().cwiseAbs().maxCoeff();
    if (res.closed_loop_spectral_radius >= 1.0)
        throw std::runtime_error("solve_dare: closed loop not stable, spectral radius " +
                                 std::to_string(res.closed_loop_spectral_radius));
    return res;
}

namespace detail {

/// Acklam's rational approximation of the standard normal quantile.
inline double norm_quantile(double p) {
    static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                   -2.759285104469687e+02, 1.383577518672690e+02,
                                   -3.066479806614716e+01, 2.506628277459239e+00};
    static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                   -1.556989798598866e+02, 6.680131188771972e+01,
                                   -1.328068155288572e+01};
    static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                   -2.400758277161838e+00, -2.549732539343734e+00,
                                   4.374664141464968e+00,  2.938163982698783e+00};
    static constexpr double dd[] = {7.784695709041462e-03, 3.224671290700398e-01,
                                    2.445134137142996e+00, 3.754408661907416e+00};
    p = std::clamp(p, 1e-12, 1.0 - 1e-12);
    if (p < 0.02425) {
        const double q = std::sqrt(-2.0 * std::log(p));
        return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
               ((((dd[0] * q + dd[1]) * q + dd[2]) * q + dd[3]) * q + 1.0);
    }
    if (p > 1.0 - 0.02425) {
        const double q = std::sqrt(-2.0 * std::log(1.0 - p));
        return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
               ((((dd[0] * q + dd[1]) * q + dd[2]) * q + dd[3]) * q + 1.0);
    }
    const double q = p - 0.5;
    const double r = q * q;
    return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
           (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
}

/// Deterministic low-discrepancy unit directions: Kronecker sequence with the
/// generalized golden-ratio increments, mapped through the normal quantile
/// and normalized (columns of the result).
inline Mat sphere_directions(int n_dim, int count) {
    double phi = 1.5;  // root of x^(d+1) = x + 1
    for (int it = 0; it < 64; ++it)
        phi = std::pow(1.0 + phi, 1.0 / (n_dim + 1));
    Vec alpha(n_dim);
    double a = 1.0;
    for (int j = 0; j < n_dim; ++j) {
        a /= phi;
        alpha[j] = a;
    }
    Mat dirs(n_dim, count);
    for (int i = 0; i < count; ++i) {
        Vec v(n_dim);
        for (int j = 0; j < n_dim; ++j) {
            const double u = std::fmod(0.5 + (i + 1.0) * alpha[j], 1.0);
            v[j] = norm_quantile(u);
        }
        const double nrm = v.norm();
        dirs.col(i) = nrm > 1e-12 ? Vec(v / nrm) : Vec(Vec::Unit(n_dim, 0));
    }
    return dirs;
}

}  // namespace detail

/// Largest alpha in (0, alpha_hi] such that every sampled boundary point of
/// the ellipsoid {x : (x - x_f)' P_ric (x - x_f) <= alpha} satisfies Z under
/// the LQR law u = u_f - K (x - x_f) and maps back into the set under one
/// nonlinear closed-loop step of length dt. Bisection over alpha with
/// deterministic boundary samples; throws when no positive alpha certifies.
inline TerminalSet ellipsoid_terminal_set(const RiccatiResult& ric, const PlantModel& model,
                                          const Vec& x_f, const Vec& u_f, const ParamPoint& rho,
                                          const PolytopicConstraint& Z, double dt,
                                          double alpha_hi, int n_samples = 256,
                                          int substeps = 4) {
    require(x_f.size() == model.n && u_f.size() == model.m,
            "ellipsoid_terminal_set: reference dimension mismatch");
    require(alpha_hi > 0.0, "ellipsoid_terminal_set: alpha search interval empty");
    require(dt > 0.0, "ellipsoid_terminal_set: dt must be positive");
    Z.check_consistent(model.n, model.m);

    const Mat& P = ric.P_ric;
    Eigen::SelfAdjointEigenSolver<Mat> eig(P);
    require(eig.eigenvalues().minCoeff() > 0.0, "ellipsoid_terminal_set: P_ric not PD");
    const Mat P_inv_sqrt = eig.eigenvectors() *
                           eig.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal() *
                           eig.eigenvectors().transpose();
    const Mat dirs = detail::sphere_directions(model.n, n_samples);

    auto certify = [&](double alpha) {
        const double radius = std::sqrt(alpha);
        for (int i = 0; i < n_samples; ++i) {
            const Vec x = x_f + radius * (P_inv_sqrt * dirs.col(i));
            const Vec u = u_f - ric.K * (x - x_f);
            const Vec viol = Z.residual(x, u);
            if (viol.size() > 0 && viol.maxCoeff() > 0.0) return false;
            const Vec x_next = rk4_step(model, x, u, rho, dt, substeps);
            if (!all_finite(x_next)) return false;
            if ((x_next - x_f).dot(P * (x_next - x_f)) > alpha * (1.0 + 1e-10)) return false;
        }
        return true;
    };

    if (certify(alpha_hi)) return make_ellipsoid_terminal(P, alpha_hi, x_f);
    double lo = 0.0, hi = alpha_hi;
    for (int it = 0; it < 60 && (hi - lo) > 1e-8 * alpha_hi; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (certify(mid))
            lo = mid;
        else
            hi = mid;
    }
    if (lo <= 0.0)
        throw std::runtime_error(
            "ellipsoid_terminal_set: no positive alpha certifiable, fall back to the "
            "terminal equality {x_f}");
    return make_ellipsoid_terminal(P, lo, x_f);
}

/// Terminal set with the single-point fallback applied on certification
/// failure.
inline TerminalSet terminal_set_or_point(const RiccatiResult& ric, const PlantModel& model,
                                         const Vec& x_f, const Vec& u_f, const ParamPoint& rho,
                                         const PolytopicConstraint& Z, double dt,
                                         double alpha_hi, int n_samples = 256) {
    try {
        return ellipsoid_terminal_set(ric, model, x_f, u_f, rho, Z, dt, alpha_hi, n_samples);
    } catch (const std::runtime_error&) {
        return make_point_terminal(x_f);
    }
}

/// Tracking law u = gain (x - x*) + u*. During the planned horizon the
/// references follow the stored open-loop trajectory; past it they collapse
/// to the terminal pair (x_f, u_f).
struct DualModeController {
    Mat gain;  ///< feedback in the tracking convention (stabilizing as-is)
    Vec x_f;
    Vec u_f;
    Mat x_refs;  ///< n x N_ref open-loop states, may be empty
    Mat u_refs;  ///< m x N_ref open-loop inputs
};

inline DualModeController make_dual_mode_controller(const RiccatiResult& ric, const Vec& x_f,
                                                    const Vec& u_f) {
    DualModeController ctl;
    ctl.gain = -ric.K;  // u = -K (x - x_f) + u_f stabilizes the linearization
    ctl.x_f = x_f;
    ctl.u_f = u_f;
    return ctl;
}

inline Vec dual_mode_control(const DualModeController& ctl, const Vec& x, int k) {
    require(k >= 0, "dual_mode_control: negative stage index");
    require(x.size() == ctl.x_f.size(), "dual_mode_control: state dimension mismatch");
    const bool in_horizon = k < ctl.u_refs.cols() && k < ctl.x_refs.cols();
    const Vec& x_ref = in_horizon ? ctl.x_refs.col(k) : ctl.x_f;
    const Vec& u_ref = in_horizon ? ctl.u_refs.col(k) : ctl.u_f;
    return ctl.gain * (x - x_ref) + u_ref;
}

/// Static equilibrium input: damped Gauss-Newton on f(x_f, u, rho) = 0.
inline Vec equilibrium_input(const PlantModel& model, const Vec& x_f, const ParamPoint& rho,
                             Vec u_init = Vec()) {
    if (u_init.size() == 0) u_init = Vec::Zero(model.m);
    require(u_init.size() == model.m, "equilibrium_input: input dimension mismatch");
    Vec u = u_init;
    Vec r = eval_dynamics(model, x_f, u, rho);
    for (int it = 0; it < 100; ++it) {
        if (r.cwiseAbs().maxCoeff() < 1e-11) return u;
        Mat J(model.n, model.m);
        for (int j = 0; j < model.m; ++j) {
            const double h = 1e-7 * (1.0 + std::abs(u[j]));
            Vec up = u, um = u;
            up[j] += h;
            um[j] -= h;
            J.col(j) = (eval_dynamics(model, x_f, up, rho) -
                        eval_dynamics(model, x_f, um, rho)) /
                       (2.0 * h);
        }
        const Vec du = (J.transpose() * J + 1e-12 * Mat::Identity(model.m, model.m))
                           .ldlt()
                           .solve(-J.transpose() * r);
        double step = 1.0;
        const double r0 = r.squaredNorm();
        while (step > 1e-12) {
            const Vec u_try = u + step * du;
            const Vec r_try = eval_dynamics(model, x_f, u_try, rho);
            if (r_try.squaredNorm() < r0) {
                u = u_try;
                r = r_try;
                break;
            }
            step *= 0.5;
        }
        if (step <= 1e-12) break;  // no descent: accept best found below
    }
    if (r.cwiseAbs().maxCoeff() >= 1e-8)
        throw std::runtime_error("equilibrium_input: no static equilibrium at x_f, residual " +
                                 std::to_string(r.cwiseAbs().maxCoeff()));
    return u;
}

}  // namespace tocnmpc
