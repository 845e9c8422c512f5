#pragma once

#include <tocnmpc/types.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace tocnmpc {

/// Continuous-time plant x' = f(x, u, rho). Immutable after construction;
/// all operations on it are pure functions.
struct PlantModel {
    std::string name;
    int n = 0;  ///< state dimension
    int m = 0;  ///< input dimension
    std::map<std::string, double> params;
    std::function<Vec(const Vec&, const Vec&, const ParamPoint&)> dynamics;
    std::vector<int> modal_indices;  ///< states carrying the vibration signal
    bool origin_equilibrium = false; ///< f(0,0,.) = 0 declared
    ParamPoint rho_lo{};             ///< parameter domain box
    ParamPoint rho_hi{};
};

/// f(x, u, rho) with dimension and finiteness checks.
inline Vec eval_dynamics(const PlantModel& model, const Vec& x, const Vec& u,
                         const ParamPoint& rho) {
    require(x.size() == model.n, "eval_dynamics: state dimension mismatch");
    require(u.size() == model.m, "eval_dynamics: input dimension mismatch");
    require(all_finite(x) && all_finite(u), "eval_dynamics: non-finite input");
    Vec dx = model.dynamics(x, u, rho);
    require(dx.size() == model.n, "eval_dynamics: model returned wrong dimension");
    return dx;
}

/// Pseudo-time derivative dx/dtau = f(x, u, rho) * T of the time-scaled system.
inline Vec eval_scaled_dynamics(const PlantModel& model, const Vec& x, const Vec& u,
                                const ParamPoint& rho, double T) {
    require(T >= 0.0, "eval_scaled_dynamics: negative time scale");
    if (T == 0.0) return Vec::Zero(model.n);
    return eval_dynamics(model, x, u, rho) * T;
}

/// One classical RK4 step of length dt, split into `substeps` sub-intervals.
/// Input held constant over the step.
inline Vec rk4_step(const PlantModel& model, Vec x, const Vec& u, const ParamPoint& rho,
                    double dt, int substeps = 1) {
    require(substeps >= 1, "rk4_step: substeps must be positive");
    const double h = dt / substeps;
    for (int s = 0; s < substeps; ++s) {
        const Vec k1 = model.dynamics(x, u, rho);
        const Vec k2 = model.dynamics(x + 0.5 * h * k1, u, rho);
        const Vec k3 = model.dynamics(x + 0.5 * h * k2, u, rho);
        const Vec k4 = model.dynamics(x + h * k3, u, rho);
        x += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    return x;
}

/// Fixed-step RK4 integration over K shooting intervals with piecewise
/// constant inputs. rho_seq has one entry per interval (or a single entry
/// broadcast to all). Throws on divergence, naming the failing step.
inline Trajectory integrate_rk4(const PlantModel& model, const Vec& x0, const Mat& u_seq,
                                const std::vector<ParamPoint>& rho_seq, double dt,
                                int substeps = 1) {
    require(dt > 0.0, "integrate_rk4: dt must be positive");
    const int K = static_cast<int>(u_seq.cols());
    require(K >= 1, "integrate_rk4: need at least one interval");
    require(u_seq.rows() == model.m, "integrate_rk4: input dimension mismatch");
    require(x0.size() == model.n, "integrate_rk4: state dimension mismatch");
    require(rho_seq.size() == static_cast<size_t>(K) || rho_seq.size() == 1,
            "integrate_rk4: rho_seq must have K entries or a single broadcast entry");

    Trajectory traj;
    traj.times = Vec::LinSpaced(K + 1, 0.0, K * dt);
    traj.states.resize(model.n, K + 1);
    traj.inputs = u_seq;
    traj.states.col(0) = x0;
    Vec x = x0;
    for (int k = 0; k < K; ++k) {
        const ParamPoint& rho = rho_seq.size() == 1 ? rho_seq[0] : rho_seq[k];
        x = rk4_step(model, x, u_seq.col(k), rho, dt, substeps);
        if (!all_finite(x))
            throw std::runtime_error("integrate_rk4: non-finite state at step " +
                                     std::to_string(k));
        traj.states.col(k + 1) = x;
    }
    return traj;
}

/// Central finite-difference Jacobians (A, B) of the one-step RK4 map at
/// (x_ref, u_ref). Step per coordinate: 1e-6 * (1 + |value|).
inline std::pair<Mat, Mat> linearize_discrete(const PlantModel& model, const Vec& x_ref,
                                              const Vec& u_ref, const ParamPoint& rho,
                                              double dt, int substeps = 4) {
    require(dt > 0.0, "linearize_discrete: dt must be positive");
    Mat A(model.n, model.n), B(model.n, model.m);
    for (int i = 0; i < model.n; ++i) {
        const double eps = 1e-6 * (1.0 + std::abs(x_ref[i]));
        Vec xp = x_ref, xm = x_ref;
        xp[i] += eps;
        xm[i] -= eps;
        A.col(i) = (rk4_step(model, xp, u_ref, rho, dt, substeps) -
                    rk4_step(model, xm, u_ref, rho, dt, substeps)) /
                   (2.0 * eps);
    }
    for (int j = 0; j < model.m; ++j) {
        const double eps = 1e-6 * (1.0 + std::abs(u_ref[j]));
        Vec up = u_ref, um = u_ref;
        up[j] += eps;
        um[j] -= eps;
        B.col(j) = (rk4_step(model, x_ref, up, rho, dt, substeps) -
                    rk4_step(model, x_ref, um, rho, dt, substeps)) /
                   (2.0 * eps);
    }
    if (!all_finite(A) || !all_finite(B))
        throw std::runtime_error("linearize_discrete: non-finite Jacobian entries");
    return {A, B};
}

// ---------------------------------------------------------------------------
// Built-in models
// ---------------------------------------------------------------------------

/// Two-mass spring chain: M qdd + K q = F with M = diag(m1, m2),
/// K = [[k1+k2, -k2], [-k2, k2+k3]]. State (x1, x2, v1, v2), inputs (F1, F2).
inline PlantModel make_two_dof(double k1 = 1000.0, double k2 = 1000.0, double k3 = 1000.0,
                               double m1 = 1.0, double m2 = 1.0) {
    PlantModel model;
    model.name = "two_dof";
    model.n = 4;
    model.m = 2;
    model.params = {{"k1", k1}, {"k2", k2}, {"k3", k3}, {"m1", m1}, {"m2", m2}};
    model.modal_indices = {0, 1};
    model.origin_equilibrium = true;
    model.rho_lo = {0.0, 0.0};
    model.rho_hi = {10.0, 10.0};
    Eigen::Matrix2d K;
    K << k1 + k2, -k2, -k2, k2 + k3;
    const Eigen::Vector2d minv(1.0 / m1, 1.0 / m2);
    model.dynamics = [K, minv](const Vec& x, const Vec& u, const ParamPoint&) -> Vec {
        Vec dx(4);
        dx[0] = x[2];
        dx[1] = x[3];
        const Eigen::Vector2d acc = minv.cwiseProduct(u.head<2>() - K * x.head<2>());
        dx[2] = acc[0];
        dx[3] = acc[1];
        return dx;
    };
    return model;
}

/// xdd = u; the analytic time-optimal benchmark.
inline PlantModel make_double_integrator() {
    PlantModel model;
    model.name = "double_integrator";
    model.n = 2;
    model.m = 1;
    model.modal_indices = {0};
    model.origin_equilibrium = true;
    model.rho_lo = {0.0, 0.0};
    model.rho_hi = {1.0, 1.0};
    model.dynamics = [](const Vec& x, const Vec& u, const ParamPoint&) -> Vec {
        Vec dx(2);
        dx[0] = x[1];
        dx[1] = u[0];
        return dx;
    };
    return model;
}

namespace detail {

/// Clamped-free Euler-Bernoulli mode shape constants for one assumed mode.
struct BeamMode {
    double beta_l;    ///< root of 1 + cos(bL) cosh(bL) = 0
    double sigma;     ///< shape blend coefficient
    double psi_tip;   ///< psi(L)
    double int_psi;   ///< integral of psi over [0, L]
    double stiffness; ///< EI * beta^4 * L
};

inline double beam_psi(double beta, double sigma, double y) {
    return std::cosh(beta * y) - std::cos(beta * y) -
           sigma * (std::sinh(beta * y) - std::sin(beta * y));
}

inline BeamMode make_beam_mode(double beta_l, double L, double EI) {
    BeamMode md;
    md.beta_l = beta_l;
    md.sigma = (std::cosh(beta_l) + std::cos(beta_l)) /
               (std::sinh(beta_l) + std::sin(beta_l));
    const double beta = beta_l / L;
    md.psi_tip = beam_psi(beta, md.sigma, L);
    // closed-form integral of the shape over the span
    md.int_psi = (L / beta_l) *
                 (std::sinh(beta_l) - std::sin(beta_l) -
                  md.sigma * (std::cosh(beta_l) + std::cos(beta_l) - 2.0));
    md.stiffness = EI * std::pow(beta, 4) * L;
    return md;
}

}  // namespace detail

/// Flexible stacker-crane surrogate with q = (x_c, y_l, a_1, a_2): rigid
/// carriage and lift plus two assumed clamped-free beam modes. The lift mass
/// (taken from rho) loads the modal inertia through psi_i(y_l), so natural
/// frequencies vary smoothly with both lift mass and position. Gravity acts
/// on the lift. State is (q, qdot), inputs are the carriage and lift forces.
inline PlantModel make_crane_modal(double m_c = 2.888, double m_t = 0.5, double m_l = 1.0,
                                   double L = 2.0, double A = 3.2e-4, double rho = 2700.0,
                                   double EI = 119.4, double g = 9.81) {
    PlantModel model;
    model.name = "crane_modal";
    model.n = 8;
    model.m = 2;
    model.params = {{"m_c", m_c}, {"m_t", m_t}, {"m_l", m_l}, {"L", L},
                    {"A", A},     {"rho", rho}, {"EI", EI},   {"g", g}};
    model.modal_indices = {2, 3};
    model.origin_equilibrium = false;  // gravity on the lift
    // Box keeps the lumped mass matrix positive definite (diagonal modal
    // inertia drops the psi_i psi_j cross terms, which dominate for large m_l).
    model.rho_lo = {0.1, 0.0};
    model.rho_hi = {3.0, L};

    const double rhoA = rho * A;
    const double m_beam = rhoA * L;
    const std::array<detail::BeamMode, 2> modes = {
        detail::make_beam_mode(1.8751040687119611, L, EI),
        detail::make_beam_mode(4.6940911329741746, L, EI)};

    model.dynamics = [=](const Vec& x, const Vec& u, const ParamPoint& rho_pt) -> Vec {
        const double ml = std::clamp(rho_pt.m_l, model.rho_lo.m_l, model.rho_hi.m_l);
        const double yl = std::clamp(x[1], 0.0, L);  // shape weighting saturates at ends

        Eigen::Vector2d psi, gamma, m_modal, k_modal;
        for (int i = 0; i < 2; ++i) {
            const auto& md = modes[i];
            psi[i] = detail::beam_psi(md.beta_l / L, md.sigma, yl);
            m_modal[i] = m_beam + ml * psi[i] * psi[i] + m_t * md.psi_tip * md.psi_tip;
            gamma[i] = rhoA * md.int_psi + ml * psi[i] + m_t * md.psi_tip;
            k_modal[i] = md.stiffness;
        }
        const double m_tot = m_c + m_beam + ml + m_t;

        Eigen::Matrix4d M = Eigen::Matrix4d::Zero();
        M(0, 0) = m_tot;
        M(1, 1) = ml;
        M(0, 2) = M(2, 0) = gamma[0];
        M(0, 3) = M(3, 0) = gamma[1];
        M(2, 2) = m_modal[0];
        M(3, 3) = m_modal[1];

        Eigen::Vector4d rhs;
        rhs << u[0], u[1] - ml * g, -k_modal[0] * x[2], -k_modal[1] * x[3];

        const Eigen::Vector4d qdd = M.ldlt().solve(rhs);
        Vec dx(8);
        dx.head<4>() = x.tail<4>();
        dx.tail<4>() = qdd;
        return dx;
    };
    return model;
}

/// Build a named model with overridable parameters (CLI entry point).
inline PlantModel make_model(const std::string& name,
                             const std::map<std::string, double>& overrides = {}) {
    auto get = [&overrides](const std::string& key, double fallback) {
        auto it = overrides.find(key);
        return it == overrides.end() ? fallback : it->second;
    };
    if (name == "two_dof")
        return make_two_dof(get("k1", 1000.0), get("k2", 1000.0), get("k3", 1000.0),
                            get("m1", 1.0), get("m2", 1.0));
    if (name == "double_integrator") return make_double_integrator();
    if (name == "crane_modal")
        return make_crane_modal(get("m_c", 2.888), get("m_t", 0.5), get("m_l", 1.0),
                                get("L", 2.0), get("A", 3.2e-4), get("rho", 2700.0),
                                get("EI", 119.4), get("g", 9.81));
    throw std::invalid_argument("make_model: unknown model '" + name + "'");
}

}  // namespace tocnmpc
