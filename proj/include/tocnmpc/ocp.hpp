#pragma once

#include <tocnmpc/freqband.hpp>
#include <tocnmpc/model.hpp>
#include <tocnmpc/spectral.hpp>

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

namespace tocnmpc {

/// Mixed state-input polytope Z = { (x, u) : C_x x + D_u u <= E }.
struct PolytopicConstraint {
    Mat C_x;  ///< n_e x n
    Mat D_u;  ///< n_e x m
    Vec E;    ///< n_e

    [[nodiscard]] int rows() const { return static_cast<int>(E.size()); }

    void check_consistent(int n, int m) const {
        require(C_x.rows() == E.size() && D_u.rows() == E.size(),
                "PolytopicConstraint: row count mismatch");
        require(rows() == 0 || (C_x.cols() == n && D_u.cols() == m),
                "PolytopicConstraint: column count mismatch");
    }

    /// Constraint residual C_x x + D_u u - E (feasible iff <= 0).
    [[nodiscard]] Vec residual(const Vec& x, const Vec& u) const {
        if (rows() == 0) return Vec();
        return C_x * x + D_u * u - E;
    }
};

/// Box |x_i| <= x_max (componentwise, skip infinite), |u_j| <= u_max.
inline PolytopicConstraint make_box_constraint(const Vec& x_max, const Vec& u_max) {
    const int n = static_cast<int>(x_max.size());
    const int m = static_cast<int>(u_max.size());
    std::vector<std::pair<int, double>> xe, ue;
    for (int i = 0; i < n; ++i)
        if (std::isfinite(x_max[i])) xe.emplace_back(i, x_max[i]);
    for (int j = 0; j < m; ++j)
        if (std::isfinite(u_max[j])) ue.emplace_back(j, u_max[j]);
    const int rows = 2 * static_cast<int>(xe.size() + ue.size());
    PolytopicConstraint z;
    z.C_x = Mat::Zero(rows, n);
    z.D_u = Mat::Zero(rows, m);
    z.E = Vec::Zero(rows);
    int r = 0;
    for (auto [i, b] : xe) {
        z.C_x(r, i) = 1.0;
        z.E[r++] = b;
        z.C_x(r, i) = -1.0;
        z.E[r++] = b;
    }
    for (auto [j, b] : ue) {
        z.D_u(r, j) = 1.0;
        z.E[r++] = b;
        z.D_u(r, j) = -1.0;
        z.E[r++] = b;
    }
    return z;
}

/// Terminal constraint set: polytope G_x x <= F, ellipsoidal sublevel set
/// (x-c)' P (x-c) <= alpha, or the single-point fallback {x_f}.
struct TerminalSet {
    enum class Kind { polytope, ellipsoid, point };
    Kind kind = Kind::point;
    Mat G_x;       ///< polytope
    Vec F;
    Mat P_ric;     ///< ellipsoid metric, SPD
    double alpha = 0.0;
    Vec center;    ///< ellipsoid center / point location

    /// Membership residual(s), feasible iff every entry <= 0. For the point
    /// kind the entries are signed equality defects.
    [[nodiscard]] Vec residual(const Vec& x) const {
        switch (kind) {
            case Kind::polytope:
                return G_x * x - F;
            case Kind::ellipsoid: {
                // normalized by alpha so the row is dimensionless and does
                // not dwarf the dynamics rows in the constraint Jacobian
                Vec r(1);
                r[0] = (x - center).dot(P_ric * (x - center)) / alpha - 1.0;
                return r;
            }
            case Kind::point:
                return x - center;
        }
        return Vec();
    }

    [[nodiscard]] bool contains(const Vec& x, double tol = 1e-9) const {
        const Vec r = residual(x);
        if (kind == Kind::point) return r.cwiseAbs().maxCoeff() <= tol;
        return r.size() == 0 || r.maxCoeff() <= tol;
    }
};

inline TerminalSet make_point_terminal(const Vec& x_f) {
    TerminalSet set;
    set.kind = TerminalSet::Kind::point;
    set.center = x_f;
    return set;
}

inline TerminalSet make_ellipsoid_terminal(const Mat& P, double alpha, const Vec& center) {
    require(P.rows() == P.cols() && P.rows() == center.size(),
            "make_ellipsoid_terminal: dimension mismatch");
    require((P - P.transpose()).cwiseAbs().maxCoeff() < 1e-10,
            "make_ellipsoid_terminal: metric not symmetric");
    require(alpha > 0.0, "make_ellipsoid_terminal: alpha must be positive");
    TerminalSet set;
    set.kind = TerminalSet::Kind::ellipsoid;
    set.P_ric = 0.5 * (P + P.transpose());
    set.alpha = alpha;
    set.center = center;
    return set;
}

inline TerminalSet make_polytope_terminal(const Mat& G_x, const Vec& F) {
    require(G_x.rows() == F.size(), "make_polytope_terminal: row mismatch");
    TerminalSet set;
    set.kind = TerminalSet::Kind::polytope;
    set.G_x = G_x;
    set.F = F;
    set.center = Vec::Zero(G_x.cols());
    return set;
}

/// Cost weights and references shared by the soft and quasi problems.
struct OcpWeights {
    Mat S;        ///< stage slack weight, PSD, s x s
    Mat P_slack;  ///< terminal slack weight, PSD, s x s
    Mat Q;        ///< state weight, PSD, n x n
    Mat R;        ///< input weight, PD, m x m
    double F_time = 0.0;
    Vec x_s;      ///< stage state reference
    Vec u_s;      ///< stage input reference
    Vec x_f;      ///< terminal state reference
};

namespace detail {

inline void require_psd(const Mat& M, double floor, const std::string& name) {
    require(M.rows() == M.cols(), name + " must be square");
    require((M - M.transpose()).cwiseAbs().maxCoeff() <= 1e-10 * (1.0 + M.cwiseAbs().maxCoeff()),
            name + " must be symmetric");
    Eigen::SelfAdjointEigenSolver<Mat> eig(M);
    require(eig.eigenvalues().minCoeff() >= floor, name + (floor > 0.0
                ? " must be positive definite"
                : " must be positive semidefinite"));
}

}  // namespace detail

inline void validate_weights(const OcpWeights& w, int n, int m, int s) {
    if (s > 0) {
        require(w.S.rows() == s && w.P_slack.rows() == s, "OcpWeights: slack weight dimension");
        detail::require_psd(w.S, 0.0, "OcpWeights.S");
        detail::require_psd(w.P_slack, 0.0, "OcpWeights.P_slack");
    }
    require(w.Q.rows() == n, "OcpWeights: Q dimension");
    require(w.R.rows() == m, "OcpWeights: R dimension");
    detail::require_psd(w.Q, 0.0, "OcpWeights.Q");
    detail::require_psd(w.R, 1e-12, "OcpWeights.R");
    require(w.F_time >= 0.0, "OcpWeights: F_time must be nonnegative");
    require(w.x_s.size() == n && w.x_f.size() == n && w.u_s.size() == m,
            "OcpWeights: reference dimension");
}

/// Whether the horizon carries one duration per interval or a single scalar.
enum class TimeMode { per_interval, scalar };

/// Index map of the flat decision vector z = (x_0..x_N, u_0..u_{N-1},
/// s_0..s_N, T). Ranges are contiguous, disjoint and cover the vector.
struct DecisionLayout {
    int N = 0;
    int n = 0;
    int m = 0;
    int s = 0;
    TimeMode time_mode = TimeMode::scalar;

    [[nodiscard]] int x_index(int k) const { return k * n; }
    [[nodiscard]] int u_begin() const { return (N + 1) * n; }
    [[nodiscard]] int u_index(int k) const { return u_begin() + k * m; }
    [[nodiscard]] int s_begin() const { return u_begin() + N * m; }
    [[nodiscard]] int s_index(int k) const { return s_begin() + k * s; }
    [[nodiscard]] int t_begin() const { return s_begin() + (N + 1) * s; }
    [[nodiscard]] int t_count() const { return time_mode == TimeMode::per_interval ? N : 1; }
    [[nodiscard]] int t_index(int k) const {
        return t_begin() + (time_mode == TimeMode::per_interval ? k : 0);
    }
    [[nodiscard]] int dim() const { return t_begin() + t_count(); }

    [[nodiscard]] Vec node_state(const Vec& z, int k) const { return z.segment(x_index(k), n); }
    [[nodiscard]] Vec node_input(const Vec& z, int k) const { return z.segment(u_index(k), m); }
    [[nodiscard]] Vec node_slack(const Vec& z, int k) const { return z.segment(s_index(k), s); }
    [[nodiscard]] double interval_time(const Vec& z, int k) const { return z[t_index(k)]; }
};

inline int decision_dim(int N, int n, int m, int s, TimeMode time_mode) {
    require(N >= 0 && n >= 0 && m >= 0 && s >= 0, "decision_dim: negative dimension");
    return (N + 1) * n + N * m + (N + 1) * s +
           (time_mode == TimeMode::per_interval ? N : 1);
}

/// Generic dense NLP: min cost(z) s.t. eq(z) = 0, ineq(z) <= 0, lo <= z <= hi.
/// Callbacks are pure and return fixed-length vectors. Jacobian callbacks are
/// optional; the solver falls back to finite differences when absent.
struct NlpProblem {
    int dim = 0;
    std::function<double(const Vec&)> cost;
    std::function<Vec(const Vec&)> cost_gradient;
    std::function<Vec(const Vec&)> eq_constraints;
    std::function<Vec(const Vec&)> ineq_constraints;
    std::function<Mat(const Vec&)> eq_jacobian;    // optional
    std::function<Mat(const Vec&)> ineq_jacobian;  // optional
    Vec lo;  ///< variable lower bounds, -inf allowed
    Vec hi;  ///< variable upper bounds, +inf allowed
    Mat cost_hessian;  ///< constant exact Hessian of the (quadratic) cost
    DecisionLayout layout;
    std::string problem_class = "custom";
    int n_eq = 0;
    int n_ineq = 0;
    double T_s = 0.0;
};

// ---------------------------------------------------------------------------
// Multiple-shooting transcription
// ---------------------------------------------------------------------------

namespace detail {

constexpr double kTimeMin = 1e-3;     ///< floor on scaled time variables
constexpr double kCorridorInf = 1e6;  ///< finite stand-in for one-sided corridors (Hz)

/// Z rows without input participation; only these apply at the terminal
/// node, which carries no paired input.
inline std::vector<int> state_only_rows(const PolytopicConstraint& Z) {
    std::vector<int> rows;
    for (int r = 0; r < Z.rows(); ++r)
        if (Z.D_u.cols() == 0 || Z.D_u.row(r).cwiseAbs().maxCoeff() == 0.0) rows.push_back(r);
    return rows;
}

inline void check_x0_feasible(const PlantModel& model, const Vec& x0,
                              const PolytopicConstraint& Z) {
    require(x0.size() == model.n, "transcribe: x0 dimension mismatch");
    require(all_finite(x0), "transcribe: x0 must be finite");
    for (int r : state_only_rows(Z))
        require(Z.C_x.row(r).dot(x0) - Z.E[r] <= 1e-9,
                "transcribe: x0 violates the state constraints");
}

/// Linear resample of column snapshots onto a uniform grid with the same
/// sample count.
inline Mat resample_uniform(const Mat& states, const Vec& times) {
    const int K = static_cast<int>(times.size());
    const double span = times[K - 1] - times[0];
    Mat out(states.rows(), K);
    int seg = 0;
    for (int i = 0; i < K; ++i) {
        const double t = times[0] + span * i / (K - 1.0);
        while (seg + 2 < K && times[seg + 1] < t) ++seg;
        const double len = times[seg + 1] - times[seg];
        const double w = len > 0.0 ? std::clamp((t - times[seg]) / len, 0.0, 1.0) : 0.0;
        out.col(i) = (1.0 - w) * states.col(seg) + w * states.col(seg + 1);
    }
    return out;
}

/// Signed distance-like membership defect: <= 0 inside the terminal set.
inline double membership_gap(const TerminalSet& set, const Vec& x) {
    const Vec r = set.residual(x);
    if (set.kind == TerminalSet::Kind::point) return r.cwiseAbs().maxCoeff() - 1e-9;
    return r.size() == 0 ? -1.0 : r.maxCoeff();
}

/// Immutable per-problem data; the NlpProblem callbacks share it through a
/// shared_ptr, which keeps them reentrant and cheap to copy.
struct ShootingData {
    enum class Cls { hard, soft, quasi };
    Cls cls = Cls::hard;
    PlantModel model;
    DecisionLayout L;
    PolytopicConstraint Z;
    std::vector<int> zN_rows;
    TerminalSet Xf;
    OcpWeights w;  ///< soft uses only the slack weights; hard none
    std::vector<ParamPoint> schedule;
    std::vector<double> corridor_lo, corridor_hi;  ///< node-major, (N+1)*s entries
    Vec x0;
    double Ts = 0.0;
    bool closed_loop = false;
    int n_eq = 0;
    int n_ineq = 0;

    [[nodiscard]] const ParamPoint& rho_at(int k) const {
        return schedule[std::min<std::size_t>(static_cast<std::size_t>(k),
                                              schedule.size() - 1)];
    }

    [[nodiscard]] double interval_dt(const Vec& z, int k) const {
        if (cls == Cls::quasi) return Ts;
        return z[L.t_index(k)] / L.N;  // scaled dynamics over pseudo-length 1/N
    }

    [[nodiscard]] Vec shoot(const Vec& z, int k) const {
        return rk4_step(model, L.node_state(z, k), L.node_input(z, k), rho_at(k),
                        interval_dt(z, k));
    }

    [[nodiscard]] Vec node_times(const Vec& z) const {
        Vec t(L.N + 1);
        t[0] = 0.0;
        for (int k = 0; k < L.N; ++k) t[k + 1] = t[k] + interval_dt(z, k);
        return t;
    }

    /// Horizon-global frequency prediction (Hz) for the channel paired with
    /// band b, with the decision nodes resampled to a uniform grid.
    [[nodiscard]] FrequencyPrediction predict_band(const Vec& z, int b) const {
        Mat states(model.n, L.N + 1);
        for (int k = 0; k <= L.N; ++k) states.col(k) = L.node_state(z, k);
        const Vec t = node_times(z);
        const Mat uniform = resample_uniform(states, t);
        const double dt = (t[L.N] - t[0]) / L.N;
        const std::vector<int> channel{model.modal_indices[static_cast<std::size_t>(b)]};
        return predict_frequencies(uniform, dt, channel).front();
    }

    /// Continuous relaxation of the first terminal-set entry time: linear
    /// interpolation of the membership defect between nodes; trajectories
    /// that never enter are charged N*Ts plus the terminal defect.
    [[nodiscard]] double entry_time(const Vec& z) const {
        double r_prev = membership_gap(Xf, L.node_state(z, 0));
        if (r_prev <= 0.0) return 0.0;
        for (int k = 1; k <= L.N; ++k) {
            const double r_k = membership_gap(Xf, L.node_state(z, k));
            if (r_k <= 0.0) return (k - 1 + r_prev / (r_prev - r_k)) * Ts;
            r_prev = r_k;
        }
        return (L.N + r_prev) * Ts;
    }

    [[nodiscard]] double eval_cost(const Vec& z) const {
        switch (cls) {
            case Cls::hard:
                return z[L.t_begin()];
            case Cls::soft: {
                double c = 0.0;
                if (L.s > 0) {
                    const Vec sN = L.node_slack(z, L.N);
                    c += sN.dot(w.P_slack * sN);
                }
                for (int k = 0; k < L.N; ++k) {
                    c += z[L.t_index(k)] / L.N;
                    if (L.s > 0) {
                        const Vec sk = L.node_slack(z, k);
                        c += sk.dot(w.S * sk) / L.N;
                    }
                }
                return c;
            }
            case Cls::quasi: {
                double c = w.F_time * z[L.t_begin()];
                const Vec dxN = L.node_state(z, L.N) - w.x_f;
                c += dxN.dot(w.Q * dxN);
                if (L.s > 0) {
                    const Vec sN = L.node_slack(z, L.N);
                    c += sN.dot(w.P_slack * sN);
                }
                for (int k = 0; k < L.N; ++k) {
                    const Vec dx = L.node_state(z, k) - w.x_s;
                    const Vec du = L.node_input(z, k) - w.u_s;
                    c += dx.dot(w.Q * dx) + du.dot(w.R * du);
                    if (L.s > 0) {
                        const Vec sk = L.node_slack(z, k);
                        c += sk.dot(w.S * sk);
                    }
                }
                return c;
            }
        }
        return 0.0;
    }

    [[nodiscard]] Vec eval_cost_gradient(const Vec& z) const {
        Vec g = Vec::Zero(L.dim());
        switch (cls) {
            case Cls::hard:
                g[L.t_begin()] = 1.0;
                break;
            case Cls::soft:
                for (int k = 0; k < L.N; ++k) {
                    g[L.t_index(k)] = 1.0 / L.N;
                    if (L.s > 0)
                        g.segment(L.s_index(k), L.s) = 2.0 / L.N * (w.S * L.node_slack(z, k));
                }
                if (L.s > 0)
                    g.segment(L.s_index(L.N), L.s) = 2.0 * (w.P_slack * L.node_slack(z, L.N));
                break;
            case Cls::quasi:
                for (int k = 0; k < L.N; ++k) {
                    g.segment(L.x_index(k), L.n) = 2.0 * (w.Q * (L.node_state(z, k) - w.x_s));
                    g.segment(L.u_index(k), L.m) = 2.0 * (w.R * (L.node_input(z, k) - w.u_s));
                    if (L.s > 0)
                        g.segment(L.s_index(k), L.s) = 2.0 * (w.S * L.node_slack(z, k));
                }
                g.segment(L.x_index(L.N), L.n) = 2.0 * (w.Q * (L.node_state(z, L.N) - w.x_f));
                if (L.s > 0)
                    g.segment(L.s_index(L.N), L.s) = 2.0 * (w.P_slack * L.node_slack(z, L.N));
                g[L.t_begin()] = w.F_time;
                break;
        }
        return g;
    }

    [[nodiscard]] Mat cost_hessian() const {
        Mat H = Mat::Zero(L.dim(), L.dim());
        switch (cls) {
            case Cls::hard:
                break;
            case Cls::soft:
                for (int k = 0; k < L.N; ++k)
                    if (L.s > 0) H.block(L.s_index(k), L.s_index(k), L.s, L.s) = 2.0 / L.N * w.S;
                if (L.s > 0)
                    H.block(L.s_index(L.N), L.s_index(L.N), L.s, L.s) = 2.0 * w.P_slack;
                break;
            case Cls::quasi:
                for (int k = 0; k < L.N; ++k) {
                    H.block(L.x_index(k), L.x_index(k), L.n, L.n) = 2.0 * w.Q;
                    H.block(L.u_index(k), L.u_index(k), L.m, L.m) = 2.0 * w.R;
                    if (L.s > 0) H.block(L.s_index(k), L.s_index(k), L.s, L.s) = 2.0 * w.S;
                }
                H.block(L.x_index(L.N), L.x_index(L.N), L.n, L.n) = 2.0 * w.Q;
                if (L.s > 0)
                    H.block(L.s_index(L.N), L.s_index(L.N), L.s, L.s) = 2.0 * w.P_slack;
                break;
        }
        return H;
    }

    [[nodiscard]] Vec eval_eq(const Vec& z) const {
        Vec ce(n_eq);
        int r = 0;
        ce.segment(r, L.n) = L.node_state(z, 0) - x0;
        r += L.n;
        for (int k = 0; k < L.N; ++k) {
            ce.segment(r, L.n) = L.node_state(z, k + 1) - shoot(z, k);
            r += L.n;
        }
        if (cls == Cls::soft) {
            for (int k = 1; k + 1 < L.N; ++k) ce[r++] = z[L.t_index(k)] - z[L.t_index(k + 1)];
            if (closed_loop) ce[r++] = z[L.t_index(0)] - L.N * Ts;
        }
        if (cls == Cls::quasi) ce[r++] = z[L.t_begin()] - entry_time(z);
        if (Xf.kind == TerminalSet::Kind::point) {
            ce.segment(r, L.n) = L.node_state(z, L.N) - Xf.center;
            r += L.n;
        }
        return ce;
    }

    [[nodiscard]] Vec eval_ineq(const Vec& z) const {
        Vec g(n_ineq);
        int r = 0;
        for (int k = 0; k < L.N && Z.rows() > 0; ++k) {
            g.segment(r, Z.rows()) = Z.residual(L.node_state(z, k), L.node_input(z, k));
            r += Z.rows();
        }
        const Vec xN = L.node_state(z, L.N);
        for (int row : zN_rows) g[r++] = Z.C_x.row(row).dot(xN) - Z.E[row];
        if (Xf.kind == TerminalSet::Kind::ellipsoid) {
            g[r++] = (xN - Xf.center).dot(Xf.P_ric * (xN - Xf.center)) / Xf.alpha - 1.0;
        } else if (Xf.kind == TerminalSet::Kind::polytope) {
            g.segment(r, Xf.F.size()) = Xf.G_x * xN - Xf.F;
            r += static_cast<int>(Xf.F.size());
        }
        if (L.s > 0) {
            Vec e(L.s);
            for (int b = 0; b < L.s; ++b) e[b] = predict_band(z, b).frequency;
            for (int k = 0; k <= L.N; ++k)
                for (int b = 0; b < L.s; ++b) {
                    const int kb = k * L.s + b;
                    const double slack = z[L.s_index(k) + b];
                    g[r++] = corridor_lo[static_cast<std::size_t>(kb)] - e[b] - slack;
                    g[r++] = e[b] - corridor_hi[static_cast<std::size_t>(kb)] - slack;
                }
        }
        return g;
    }

    [[nodiscard]] Mat eval_eq_jacobian(const Vec& z) const {
        Mat A = Mat::Zero(n_eq, L.dim());
        int r = 0;
        A.block(r, L.x_index(0), L.n, L.n).setIdentity();
        r += L.n;
        for (int k = 0; k < L.N; ++k) {
            A.block(r, L.x_index(k + 1), L.n, L.n).setIdentity();
            std::vector<int> cols;
            cols.reserve(static_cast<std::size_t>(L.n + L.m + 1));
            for (int i = 0; i < L.n; ++i) cols.push_back(L.x_index(k) + i);
            for (int j = 0; j < L.m; ++j) cols.push_back(L.u_index(k) + j);
            if (cls != Cls::quasi) cols.push_back(L.t_index(k));
            for (int c : cols) {
                const double h = 1e-6 * (1.0 + std::abs(z[c]));
                Vec zp = z, zm = z;
                zp[c] += h;
                zm[c] -= h;
                A.block(r, c, L.n, 1) = -(shoot(zp, k) - shoot(zm, k)) / (2.0 * h);
            }
            r += L.n;
        }
        if (cls == Cls::soft) {
            for (int k = 1; k + 1 < L.N; ++k) {
                A(r, L.t_index(k)) = 1.0;
                A(r, L.t_index(k + 1)) = -1.0;
                ++r;
            }
            if (closed_loop) A(r++, L.t_index(0)) = 1.0;
        }
        if (cls == Cls::quasi) {
            A(r, L.t_begin()) = 1.0;
            const double e0 = entry_time(z);
            for (int k = 0; k <= L.N; ++k)
                for (int i = 0; i < L.n; ++i) {
                    const int c = L.x_index(k) + i;
                    const double h = 1e-6 * (1.0 + std::abs(z[c]));
                    Vec zp = z;
                    zp[c] += h;
                    A(r, c) = -(entry_time(zp) - e0) / h;
                }
            ++r;
        }
        if (Xf.kind == TerminalSet::Kind::point)
            A.block(r, L.x_index(L.N), L.n, L.n).setIdentity();
        return A;
    }

    [[nodiscard]] Mat eval_ineq_jacobian(const Vec& z) const {
        Mat J = Mat::Zero(n_ineq, L.dim());
        int r = 0;
        for (int k = 0; k < L.N && Z.rows() > 0; ++k) {
            J.block(r, L.x_index(k), Z.rows(), L.n) = Z.C_x;
            J.block(r, L.u_index(k), Z.rows(), L.m) = Z.D_u;
            r += Z.rows();
        }
        for (int row : zN_rows) {
            J.block(r, L.x_index(L.N), 1, L.n) = Z.C_x.row(row);
            ++r;
        }
        if (Xf.kind == TerminalSet::Kind::ellipsoid) {
            const Vec xN = L.node_state(z, L.N);
            J.block(r, L.x_index(L.N), 1, L.n) =
                (2.0 / Xf.alpha * (Xf.P_ric * (xN - Xf.center))).transpose();
            ++r;
        } else if (Xf.kind == TerminalSet::Kind::polytope) {
            J.block(r, L.x_index(L.N), Xf.F.size(), L.n) = Xf.G_x;
            r += static_cast<int>(Xf.F.size());
        }
        if (L.s > 0) {
            // The spectral peak is differentiated w.r.t. the modal node states
            // only (forward differences, step 1e-4); the rows are refreshed
            // once per major iteration and held fixed inside the QP.
            Mat dE = Mat::Zero(L.s, L.N + 1);
            for (int b = 0; b < L.s; ++b) {
                const FrequencyPrediction p0 = predict_band(z, b);
                if (p0.confidence <= 0.0) continue;  // flat channel: slack-only rows
                for (int k = 0; k <= L.N; ++k) {
                    Vec zp = z;
                    zp[L.x_index(k) + model.modal_indices[static_cast<std::size_t>(b)]] += 1e-4;
                    dE(b, k) = (predict_band(zp, b).frequency - p0.frequency) / 1e-4;
                }
            }
            for (int k = 0; k <= L.N; ++k)
                for (int b = 0; b < L.s; ++b) {
                    for (int kk = 0; kk <= L.N; ++kk) {
                        const int c =
                            L.x_index(kk) + model.modal_indices[static_cast<std::size_t>(b)];
                        J(r, c) = -dE(b, kk);
                        J(r + 1, c) = dE(b, kk);
                    }
                    J(r, L.s_index(k) + b) = -1.0;
                    J(r + 1, L.s_index(k) + b) = -1.0;
                    r += 2;
                }
        }
        return J;
    }

    void finalize_counts() {
        zN_rows = state_only_rows(Z);
        n_eq = L.n * (L.N + 1);
        if (cls == Cls::soft) n_eq += std::max(0, L.N - 2) + (closed_loop ? 1 : 0);
        if (cls == Cls::quasi) n_eq += 1;
        if (Xf.kind == TerminalSet::Kind::point) n_eq += L.n;
        n_ineq = L.N * Z.rows() + static_cast<int>(zN_rows.size()) + 2 * L.s * (L.N + 1);
        if (Xf.kind == TerminalSet::Kind::ellipsoid) n_ineq += 1;
        if (Xf.kind == TerminalSet::Kind::polytope) n_ineq += static_cast<int>(Xf.F.size());
    }

    void fill_corridors(const std::vector<FrequencyBand>& bands) {
        for (int k = 0; k <= L.N; ++k)
            for (const auto& band : bands) {
                const BandInterval iv = eval_band(band, rho_at(k));
                corridor_lo.push_back(std::max(iv.lo, -kCorridorInf));
                corridor_hi.push_back(std::min(iv.hi, kCorridorInf));
            }
    }
};

inline NlpProblem assemble(std::shared_ptr<const ShootingData> d, const std::string& name) {
    NlpProblem nlp;
    nlp.layout = d->L;
    nlp.dim = d->L.dim();
    nlp.n_eq = d->n_eq;
    nlp.n_ineq = d->n_ineq;
    nlp.T_s = d->Ts;
    nlp.problem_class = name;
    nlp.cost = [d](const Vec& z) { return d->eval_cost(z); };
    nlp.cost_gradient = [d](const Vec& z) { return d->eval_cost_gradient(z); };
    nlp.eq_constraints = [d](const Vec& z) { return d->eval_eq(z); };
    nlp.ineq_constraints = [d](const Vec& z) { return d->eval_ineq(z); };
    nlp.eq_jacobian = [d](const Vec& z) { return d->eval_eq_jacobian(z); };
    nlp.ineq_jacobian = [d](const Vec& z) { return d->eval_ineq_jacobian(z); };
    nlp.cost_hessian = d->cost_hessian();
    const double inf = std::numeric_limits<double>::infinity();
    nlp.lo = Vec::Constant(nlp.dim, -inf);
    nlp.hi = Vec::Constant(nlp.dim, inf);
    const DecisionLayout& L = d->L;
    for (int k = 0; k <= L.N && L.s > 0; ++k)
        nlp.lo.segment(L.s_index(k), L.s).setZero();
    const double t_floor = d->cls == ShootingData::Cls::quasi ? 0.0 : kTimeMin;
    nlp.lo.segment(L.t_begin(), L.t_count()).setConstant(t_floor);
    return nlp;
}

inline void check_schedule(const std::vector<ParamPoint>& schedule, int N,
                           const std::string& who) {
    require(schedule.size() == static_cast<std::size_t>(N) || schedule.size() == 1,
            who + ": rho schedule must have N entries or a single broadcast entry");
}

}  // namespace detail

/// Hard time-optimal problem: minimize the scalar transition time T subject
/// to scaled-dynamics matching conditions, Z at every node and the terminal
/// set. x0 feasibility w.r.t. the state rows of Z is flagged here, before
/// any solve.
inline NlpProblem transcribe_hard_time_optimal(const PlantModel& model, const Vec& x0,
                                               const TerminalSet& Xf,
                                               const PolytopicConstraint& Z, int N,
                                               const ParamPoint& rho = {}) {
    require(N >= 2, "transcribe_hard_time_optimal: N must be at least 2");
    Z.check_consistent(model.n, model.m);
    detail::check_x0_feasible(model, x0, Z);
    auto d = std::make_shared<detail::ShootingData>();
    d->cls = detail::ShootingData::Cls::hard;
    d->model = model;
    d->L = DecisionLayout{N, model.n, model.m, 0, TimeMode::scalar};
    d->Z = Z;
    d->Xf = Xf;
    d->schedule = {rho};
    d->x0 = x0;
    d->finalize_counts();
    return detail::assemble(std::move(d), "hard_time_optimal");
}

/// Soft-constrained time-optimal problem with per-interval times, penalized
/// frequency-corridor slacks, equidistance ties among T_1..T_{N-1} and the
/// optional closed-loop pin T_0 = N*Ts.
inline NlpProblem transcribe_soft(const PlantModel& model, const Vec& x0,
                                  const std::vector<FrequencyBand>& bands,
                                  const std::vector<ParamPoint>& rho_schedule,
                                  const OcpWeights& weights, const PolytopicConstraint& Z,
                                  const TerminalSet& Xf, int N, double Ts, bool closed_loop) {
    require(N >= 8, "transcribe_soft: N must be at least 8 for spectral prediction");
    require(Ts > 0.0, "transcribe_soft: Ts must be positive");
    Z.check_consistent(model.n, model.m);
    detail::check_x0_feasible(model, x0, Z);
    detail::check_schedule(rho_schedule, N, "transcribe_soft");
    const int s = static_cast<int>(bands.size());
    require(s <= static_cast<int>(model.modal_indices.size()),
            "transcribe_soft: more bands than modal channels");
    if (s > 0) {
        require(weights.S.rows() == s && weights.S.cols() == s,
                "transcribe_soft: band/slack dimension mismatch in S");
        require(weights.P_slack.rows() == s && weights.P_slack.cols() == s,
                "transcribe_soft: band/slack dimension mismatch in P");
        detail::require_psd(weights.S, 0.0, "transcribe_soft: S");
        detail::require_psd(weights.P_slack, 0.0, "transcribe_soft: P");
    }
    auto d = std::make_shared<detail::ShootingData>();
    d->cls = detail::ShootingData::Cls::soft;
    d->model = model;
    d->L = DecisionLayout{N, model.n, model.m, s, TimeMode::per_interval};
    d->Z = Z;
    d->Xf = Xf;
    d->w = weights;
    d->schedule = rho_schedule;
    d->x0 = x0;
    d->Ts = Ts;
    d->closed_loop = closed_loop;
    d->fill_corridors(bands);
    d->finalize_counts();
    return detail::assemble(std::move(d), "soft_time_optimal");
}

/// Quasi time-optimal problem: unscaled dynamics at the sampling time, a
/// quadratic tracking stage cost with slack penalties, and the free final
/// time T tied to the interpolated terminal-set entry time and priced F*T.
inline NlpProblem transcribe_quasi(const PlantModel& model, const Vec& x0,
                                   const OcpWeights& weights,
                                   const std::vector<FrequencyBand>& bands,
                                   const std::vector<ParamPoint>& rho_schedule,
                                   const PolytopicConstraint& Z, const TerminalSet& Xf,
                                   int N, double Ts) {
    require(N >= 8, "transcribe_quasi: N must be at least 8 for spectral prediction");
    require(Ts > 0.0, "transcribe_quasi: Ts must be positive");
    Z.check_consistent(model.n, model.m);
    detail::check_x0_feasible(model, x0, Z);
    detail::check_schedule(rho_schedule, N, "transcribe_quasi");
    const int s = static_cast<int>(bands.size());
    require(s <= static_cast<int>(model.modal_indices.size()),
            "transcribe_quasi: more bands than modal channels");
    validate_weights(weights, model.n, model.m, s);
    auto d = std::make_shared<detail::ShootingData>();
    d->cls = detail::ShootingData::Cls::quasi;
    d->model = model;
    d->L = DecisionLayout{N, model.n, model.m, s, TimeMode::scalar};
    d->Z = Z;
    d->Xf = Xf;
    d->w = weights;
    d->schedule = rho_schedule;
    d->x0 = x0;
    d->Ts = Ts;
    d->fill_corridors(bands);
    d->finalize_counts();
    return detail::assemble(std::move(d), "quasi_time_optimal");
}

/// Straight-line warm start: node states interpolate x0 to x_target, inputs
/// and slacks zero, every time variable set from the total-time guess.
inline Vec straight_line_guess(const NlpProblem& nlp, const Vec& x0, const Vec& x_target,
                               double T_init) {
    const DecisionLayout& L = nlp.layout;
    require(x0.size() == L.n && x_target.size() == L.n,
            "straight_line_guess: dimension mismatch");
    Vec z = Vec::Zero(L.dim());
    for (int k = 0; k <= L.N; ++k)
        z.segment(L.x_index(k), L.n) = x0 + (x_target - x0) * (static_cast<double>(k) / L.N);
    z.segment(L.t_begin(), L.t_count()).setConstant(std::max(T_init, detail::kTimeMin));
    return z;
}

}  // namespace tocnmpc
