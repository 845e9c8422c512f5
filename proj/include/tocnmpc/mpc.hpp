#pragma once

#include <tocnmpc/model.hpp>
#include <tocnmpc/nlp.hpp>
#include <tocnmpc/ocp.hpp>
#include <tocnmpc/spectral.hpp>
#include <tocnmpc/terminal.hpp>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tocnmpc {

enum class ProblemClass { hard, soft, quasi };

enum class WarmStartPolicy { shift, cold };

/// How a closed-loop row was produced: a fresh NLP solve, the terminal
/// controller inside X_f, or the tail of the last successful plan after a
/// failed solve.
enum class StepMode { mpc, terminal, degraded };

inline const char* step_mode_name(StepMode mode) {
    switch (mode) {
        case StepMode::mpc: return "mpc";
        case StepMode::terminal: return "terminal";
        case StepMode::degraded: return "degraded";
    }
    return "?";
}

inline const char* sqp_status_name(SqpStatus status) {
    switch (status) {
        case SqpStatus::converged: return "converged";
        case SqpStatus::max_iters: return "max_iters";
        case SqpStatus::qp_failure: return "qp_failure";
        case SqpStatus::diverged: return "diverged";
    }
    return "?";
}

/// Receding-horizon controller configuration. `model` is the controller's
/// internal prediction model; the simulated plant handed to run_closed_loop
/// may differ for mismatch studies.
struct MpcConfig {
    PlantModel model;
    ProblemClass problem_class = ProblemClass::soft;
    int N = 17;
    double T_s = 0.02;
    OcpWeights weights;
    std::vector<FrequencyBand> bands;
    PolytopicConstraint Z;
    WarmStartPolicy warm_start = WarmStartPolicy::shift;
    TerminalSet terminal_set;
    DualModeController terminal_controller;
    int max_steps = 2000;
    SqpOptions sqp;
    ParamPoint rho{};               ///< base parameter point (lift mass etc.)
    bool rho_tracks_state = false;  ///< refresh rho.y_l from the lift state
    int lift_state_index = 1;       ///< state coordinate feeding rho.y_l
    int plant_substeps = 1;         ///< RK4 substeps for the plant advance
    int settle_steps = 25;          ///< extra rows logged after set entry
    double terminal_tol = 1e-9;     ///< membership tolerance for set entry

    /// Number of slack channels the transcription will carry.
    [[nodiscard]] int slack_count() const {
        return problem_class == ProblemClass::hard ? 0 : static_cast<int>(bands.size());
    }

    void validate() const {
        require(model.n > 0 && model.m > 0, "MpcConfig: model not set");
        require(T_s > 0.0, "MpcConfig: T_s must be positive");
        if (problem_class == ProblemClass::hard)
            require(N >= 2, "MpcConfig: N must be at least 2");
        else
            require(N >= 8, "MpcConfig: N must be at least 8 for spectral prediction");
        require(max_steps > 0, "MpcConfig: max_steps must be positive");
        require(settle_steps >= 0, "MpcConfig: settle_steps must be nonnegative");
        require(plant_substeps >= 1, "MpcConfig: plant_substeps must be positive");
        if (rho_tracks_state)
            require(lift_state_index >= 0 && lift_state_index < model.n,
                    "MpcConfig: lift_state_index out of range");
    }
};

/// Solver options that behave well for each problem class out of the box.
/// The quasi cost is exactly quadratic, so Gauss-Newton is the exact Hessian
/// there; the time-optimal classes carry their curvature in the constraints
/// and need the BFGS estimate.
inline SqpOptions default_sqp_options(ProblemClass cls) {
    SqpOptions opts;
    opts.max_major_iters = 150;
    if (cls == ProblemClass::quasi) opts.hessian = SqpOptions::Hessian::gauss_newton;
    return opts;
}

/// One closed-loop sample: the measured state, the input actually applied,
/// and the diagnostics of the solve that produced it. `slack` holds the
/// per-band maximum over the horizon nodes; `times` the raw time variables
/// (empty for terminal-mode rows). `solved` is false when no NLP ran.
struct MpcLogRow {
    double t = 0.0;
    Vec x;
    Vec u;
    Vec slack;
    Vec times;
    double T = 0.0;
    double cost = 0.0;
    Vec predicted_hz;
    StepMode mode = StepMode::mpc;
    SqpStatus status = SqpStatus::converged;
    bool solved = false;
    int iters = 0;
};

/// Closed-loop trace, one row per applied input, t = step * T_s.
struct ClosedLoopLog {
    int n = 0;
    int m = 0;
    int s = 0;
    double T_s = 0.0;
    std::vector<MpcLogRow> rows;

    /// CSV with a header row, columns t, x, u, slacks, T, J, mode, status,
    /// iters. Predicted frequencies stay in memory only.
    void write_csv(std::ostream& os) const {
        os << "t";
        for (int i = 0; i < n; ++i) os << ",x" << i;
        for (int j = 0; j < m; ++j) os << ",u" << j;
        for (int b = 0; b < s; ++b) os << ",s" << b;
        os << ",T,J,mode,status,iters\n";
        os << std::setprecision(std::numeric_limits<double>::max_digits10);
        for (const auto& row : rows) {
            os << row.t;
            for (int i = 0; i < n; ++i) os << ',' << row.x[i];
            for (int j = 0; j < m; ++j) os << ',' << row.u[j];
            for (int b = 0; b < s; ++b) os << ',' << row.slack[b];
            os << ',' << row.T << ',' << row.cost << ',' << step_mode_name(row.mode)
               << ',' << (row.solved ? sqp_status_name(row.status) : "none") << ','
               << row.iters << '\n';
        }
    }
};

/// Controller memory carried between samples.
struct MpcState {
    int step = 0;
    bool terminal_latched = false;
    int terminal_age = 0;
    bool have_plan = false;
    NlpSolution plan;        ///< last successful solve
    DecisionLayout layout;   ///< layout of `plan`
    int plan_consumed = 0;   ///< inputs of `plan` already applied
};

namespace detail {

/// One-interval shift of a decision vector: states, inputs, slacks and
/// per-interval durations move up a node with the final entries duplicated,
/// then the durations are re-equalized to their mean (a scalar time is left
/// alone). Shifting the durations before averaging matters in closed loop:
/// the pinned T_0 = N*Ts drops out, so the mean reproduces the tied value of
/// the remaining intervals exactly and the shifted-in intervals stay
/// dynamically consistent.
inline Vec shift_once(Vec z, const DecisionLayout& L) {
    for (int k = 0; k < L.N; ++k)
        z.segment(L.x_index(k), L.n) = z.segment(L.x_index(k + 1), L.n).eval();
    for (int k = 0; k + 1 < L.N; ++k)
        z.segment(L.u_index(k), L.m) = z.segment(L.u_index(k + 1), L.m).eval();
    if (L.s > 0)
        for (int k = 0; k < L.N; ++k)
            z.segment(L.s_index(k), L.s) = z.segment(L.s_index(k + 1), L.s).eval();
    if (L.t_count() > 1) {
        for (int k = 0; k + 1 < L.N; ++k) z[L.t_index(k)] = z[L.t_index(k + 1)];
        const double mean = z.segment(L.t_begin(), L.t_count()).mean();
        z.segment(L.t_begin(), L.t_count()).setConstant(mean);
    }
    return z;
}

/// Node times implied by a decision vector: cumulative T_k / N for the
/// scaled classes, a fixed sample grid for the quasi class.
inline Vec plan_times(const DecisionLayout& L, const Vec& z, bool fixed_dt, double Ts) {
    Vec t(L.N + 1);
    t[0] = 0.0;
    for (int k = 0; k < L.N; ++k)
        t[k + 1] = t[k] + (fixed_dt ? Ts : z[L.t_index(k)] / L.N);
    return t;
}

/// Horizon-global dominant frequency per band channel, matching the
/// prediction the transcription constrained.
inline Vec plan_frequencies(const PlantModel& model, const DecisionLayout& L, const Vec& z,
                            bool fixed_dt, double Ts) {
    if (L.s == 0) return Vec();
    Mat states(model.n, L.N + 1);
    for (int k = 0; k <= L.N; ++k) states.col(k) = L.node_state(z, k);
    const Vec t = plan_times(L, z, fixed_dt, Ts);
    const Mat uniform = resample_uniform(states, t);
    const double dt = (t[L.N] - t[0]) / L.N;
    std::vector<int> channels(model.modal_indices.begin(),
                              model.modal_indices.begin() + L.s);
    const auto preds = predict_frequencies(uniform, dt, channels);
    Vec out(L.s);
    for (int b = 0; b < L.s; ++b) out[b] = preds[static_cast<size_t>(b)].frequency;
    return out;
}

/// Integrate the duplicated tail input once so a shifted guess satisfies its
/// final matching condition; plain duplication leaves that row violated by a
/// full step whenever the plan does not end at an equilibrium.
inline void repair_shift_tail(Vec& z, const DecisionLayout& L, const PlantModel& model,
                              const ParamPoint& rho, bool fixed_dt, double Ts) {
    const double dt = fixed_dt ? Ts : z[L.t_index(L.N - 1)] / L.N;
    z.segment(L.x_index(L.N), L.n) =
        rk4_step(model, L.node_state(z, L.N - 1), L.node_input(z, L.N - 1), rho, dt);
}

inline Vec slack_maxima(const DecisionLayout& L, const Vec& z) {
    Vec s = Vec::Zero(L.s);
    for (int k = 0; k <= L.N; ++k)
        for (int b = 0; b < L.s; ++b) s[b] = std::max(s[b], z[L.s_index(k) + b]);
    return s;
}

/// Measured states can sit a solver tolerance outside the state rows after a
/// converged step ended on an active bound; transcription rejects them at
/// 1e-9. Violations within `budget` (relative per row) are pulled back by
/// alternating hyperplane projections; anything larger is returned unchanged
/// and the caller degrades.
inline Vec settle_onto_state_rows(const PolytopicConstraint& Z, Vec x, double budget) {
    const std::vector<int> rows = state_only_rows(Z);
    if (rows.empty()) return x;
    bool violated = false;
    for (int r : rows) {
        const double v = Z.C_x.row(r).dot(x) - Z.E[r];
        if (v > budget * (1.0 + std::abs(Z.E[r]))) return x;
        if (v > 0.0) violated = true;
    }
    if (!violated) return x;
    for (int pass = 0; pass < 3; ++pass)
        for (int r : rows) {
            const double v = Z.C_x.row(r).dot(x) - Z.E[r];
            const double nsq = Z.C_x.row(r).squaredNorm();
            if (v > 0.0 && nsq > 0.0)
                x -= ((v + 1e-12) / nsq) * Z.C_x.row(r).transpose();
        }
    return x;
}

/// Componentwise input box implied by the rows of Z that touch exactly one
/// input and no state (infinite where no such row exists).
inline std::pair<Vec, Vec> input_box(const PolytopicConstraint& Z, int m) {
    const double inf = std::numeric_limits<double>::infinity();
    Vec lo = Vec::Constant(m, -inf);
    Vec hi = Vec::Constant(m, inf);
    for (int r = 0; r < Z.rows(); ++r) {
        if (Z.C_x.row(r).cwiseAbs().maxCoeff() != 0.0) continue;
        int j = -1;
        bool single = true;
        for (int c = 0; c < m; ++c)
            if (Z.D_u(r, c) != 0.0) {
                if (j >= 0) single = false;
                j = c;
            }
        if (j < 0 || !single) continue;
        const double bound = Z.E[r] / Z.D_u(r, j);
        if (Z.D_u(r, j) > 0.0)
            hi[j] = std::min(hi[j], bound);
        else
            lo[j] = std::max(lo[j], bound);
    }
    return {lo, hi};
}

}  // namespace detail

/// Receding-horizon shift of a converged solution toward the next sample:
/// states, inputs, slacks and interval durations advance one interval with
/// the last entries duplicated, and the durations are then re-equalized to
/// their mean. A constant (equilibrium) solution is a fixed point.
inline Vec warm_start_shift(const NlpSolution& prev, const DecisionLayout& layout) {
    require(prev.z.size() == layout.dim(), "warm_start_shift: layout mismatch");
    return detail::shift_once(prev.z, layout);
}

namespace detail {

inline std::vector<ParamPoint> horizon_schedule(const MpcConfig& cfg, const Vec& x0,
                                                const Vec* z_guess) {
    if (!cfg.rho_tracks_state) return {cfg.rho};
    // rho_0 from the measurement, rho_k from the warm-start plan when there
    // is one; a cold start sees the measured value everywhere.
    DecisionLayout L{cfg.N, cfg.model.n, cfg.model.m, cfg.slack_count(),
                     cfg.problem_class == ProblemClass::soft ? TimeMode::per_interval
                                                             : TimeMode::scalar};
    std::vector<ParamPoint> sched(static_cast<size_t>(cfg.N), cfg.rho);
    auto lift = [&](double y) {
        return std::clamp(y, cfg.model.rho_lo.y_l, cfg.model.rho_hi.y_l);
    };
    for (int k = 0; k < cfg.N; ++k)
        sched[static_cast<size_t>(k)].y_l =
            lift(k == 0 || z_guess == nullptr ? x0[cfg.lift_state_index]
                                              : (*z_guess)[L.x_index(k) + cfg.lift_state_index]);
    return sched;
}

inline NlpProblem transcribe_for(const MpcConfig& cfg, const Vec& x0,
                                 const std::vector<ParamPoint>& schedule) {
    switch (cfg.problem_class) {
        case ProblemClass::hard:
            return transcribe_hard_time_optimal(cfg.model, x0, cfg.terminal_set, cfg.Z,
                                                cfg.N, schedule.front());
        case ProblemClass::soft:
            return transcribe_soft(cfg.model, x0, cfg.bands, schedule, cfg.weights, cfg.Z,
                                   cfg.terminal_set, cfg.N, cfg.T_s, /*closed_loop=*/true);
        case ProblemClass::quasi:
            return transcribe_quasi(cfg.model, x0, cfg.weights, cfg.bands, schedule, cfg.Z,
                                    cfg.terminal_set, cfg.N, cfg.T_s);
    }
    throw std::logic_error("transcribe_for: unreachable");
}

/// Cold-start guess: straight line to the target; the quasi class instead
/// rolls the saturated terminal tracking law forward, which is dynamically
/// consistent and aims at the set.
inline Vec cold_start_guess(const MpcConfig& cfg, const NlpProblem& nlp, const Vec& x0) {
    const DecisionLayout& L = nlp.layout;
    const Vec x_goal = cfg.terminal_set.center.size() == L.n ? cfg.terminal_set.center
                                                             : Vec::Zero(L.n);
    Vec z = straight_line_guess(nlp, x0, x_goal, cfg.N * cfg.T_s);
    if (cfg.problem_class == ProblemClass::quasi && cfg.terminal_controller.gain.size() > 0) {
        const auto [u_lo, u_hi] = input_box(cfg.Z, L.m);
        Vec xk = x0;
        for (int k = 0; k <= L.N; ++k) {
            z.segment(L.x_index(k), L.n) = xk;
            if (k == L.N) break;
            const Vec uk = dual_mode_control(cfg.terminal_controller, xk, k)
                               .cwiseMax(u_lo)
                               .cwiseMin(u_hi);
            z.segment(L.u_index(k), L.m) = uk;
            xk = rk4_step(cfg.model, xk, uk, cfg.rho, cfg.T_s);
        }
    }
    return z;
}

}  // namespace detail

/// One receding-horizon sample. Inside the terminal set (with hysteresis:
/// once entered the latch never releases) the dual-mode controller answers
/// without a solve. Otherwise the problem is transcribed at the measured
/// state and solved from the shifted previous plan; on failure the tail of
/// the last successful plan is applied and the row is flagged degraded.
inline MpcLogRow mpc_step(const MpcConfig& cfg, MpcState& st, const Vec& x_measured) {
    cfg.validate();
    require(x_measured.size() == cfg.model.n, "mpc_step: state dimension mismatch");
    require(all_finite(x_measured), "mpc_step: non-finite measurement");

    const int s = cfg.slack_count();
    MpcLogRow row;
    row.t = st.step * cfg.T_s;
    row.x = x_measured;
    row.slack = Vec::Zero(s);
    row.predicted_hz = Vec::Zero(s);

    if (st.terminal_latched || cfg.terminal_set.contains(x_measured, cfg.terminal_tol)) {
        st.terminal_latched = true;
        row.mode = StepMode::terminal;
        row.u = dual_mode_control(cfg.terminal_controller, x_measured, st.terminal_age++);
        ++st.step;
        return row;
    }

    // Shifted guess first: the crane parameter schedule reads the predicted
    // lift position from it.
    Vec z0;
    bool have_guess = false;
    if (cfg.warm_start == WarmStartPolicy::shift && st.have_plan) {
        z0 = st.plan.z;
        const int shifts = std::min(st.plan_consumed, st.layout.N);
        for (int i = 0; i < shifts; ++i) z0 = detail::shift_once(z0, st.layout);
        detail::repair_shift_tail(z0, st.layout, cfg.model, cfg.rho,
                                  cfg.problem_class == ProblemClass::quasi, cfg.T_s);
        have_guess = true;
    }

    NlpProblem nlp;
    bool built = false;
    try {
        const Vec x0 = detail::settle_onto_state_rows(cfg.Z, x_measured, 1e-6);
        const auto schedule = detail::horizon_schedule(cfg, x0, have_guess ? &z0 : nullptr);
        nlp = detail::transcribe_for(cfg, x0, schedule);
        if (have_guess)
            z0.segment(nlp.layout.x_index(0), nlp.layout.n) = x0;
        else
            z0 = detail::cold_start_guess(cfg, nlp, x0);
        built = true;
    } catch (const std::exception&) {
        built = false;  // infeasible measurement or bad configuration: degrade
    }

    bool usable = false;
    if (built) {
        const NlpSolution sol = solve_sqp(nlp, z0, cfg.sqp);
        row.solved = true;
        row.status = sol.status;
        row.iters = sol.major_iters;
        row.cost = sol.cost;
        usable = sol.status == SqpStatus::converged ||
                 (sol.status == SqpStatus::max_iters && sol.constraint_violation_inf < 1e-6);
        if (usable) {
            const DecisionLayout& L = nlp.layout;
            row.mode = StepMode::mpc;
            row.u = L.node_input(sol.z, 0);
            row.times = sol.z.segment(L.t_begin(), L.t_count());
            if (cfg.problem_class == ProblemClass::soft) {
                double total = 0.0;
                for (int k = 0; k < L.N; ++k) total += sol.z[L.t_index(k)] / L.N;
                row.T = total;
            } else {
                row.T = sol.z[L.t_begin()];
            }
            if (s > 0) {
                row.slack = detail::slack_maxima(L, sol.z);
                row.predicted_hz = detail::plan_frequencies(
                    cfg.model, L, sol.z, cfg.problem_class == ProblemClass::quasi, cfg.T_s);
            }
            st.plan = sol;
            st.layout = L;
            st.have_plan = true;
            st.plan_consumed = 1;
        }
    }

    if (!usable) {
        row.mode = StepMode::degraded;
        if (st.have_plan) {
            const int idx = std::min(st.plan_consumed, st.layout.N - 1);
            row.u = st.layout.node_input(st.plan.z, idx);
            ++st.plan_consumed;
        } else {
            row.u = Vec::Zero(cfg.model.m);  // nothing to fall back on: hold zero
        }
    }

    ++st.step;
    return row;
}

/// Simulate the loop: measure, solve, apply the first input, advance the
/// plant one sample by RK4. Stops at t_end, on the step budget, or a
/// settling window after terminal-set entry. Solver failures are logged and
/// the loop continues in degraded mode.
inline ClosedLoopLog run_closed_loop(const PlantModel& plant, const MpcConfig& cfg,
                                     const Vec& x0, double t_end) {
    cfg.validate();
    require(plant.n == cfg.model.n && plant.m == cfg.model.m,
            "run_closed_loop: plant/model dimension mismatch");
    require(x0.size() == plant.n, "run_closed_loop: x0 dimension mismatch");
    require(all_finite(x0), "run_closed_loop: x0 must be finite");
    require(t_end >= cfg.T_s, "run_closed_loop: t_end shorter than one sample");

    ClosedLoopLog log;
    log.n = plant.n;
    log.m = plant.m;
    log.s = cfg.slack_count();
    log.T_s = cfg.T_s;

    MpcState st;
    Vec x = x0;
    int settle_left = -1;
    while (st.step < cfg.max_steps && st.step * cfg.T_s < t_end - 1e-12) {
        const MpcLogRow row = mpc_step(cfg, st, x);
        log.rows.push_back(row);
        x = rk4_step(plant, x, row.u, cfg.rho, cfg.T_s, cfg.plant_substeps);
        if (!all_finite(x))
            throw std::runtime_error("run_closed_loop: plant state diverged at step " +
                                     std::to_string(st.step - 1));
        if (st.terminal_latched) {
            if (settle_left < 0)
                settle_left = cfg.settle_steps;
            else
                --settle_left;
            if (settle_left <= 0) break;
        }
    }
    return log;
}

}  // namespace tocnmpc
