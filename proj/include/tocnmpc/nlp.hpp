#pragma once

#include <tocnmpc/ocp.hpp>

#include <Eigen/Cholesky>
#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

namespace tocnmpc {

/// Central-difference gradient with per-coordinate step eps * (1 + |z_i|).
inline Vec finite_diff_gradient(const std::function<double(const Vec&)>& fn, const Vec& z,
                                double eps = 1e-6) {
    require(eps > 0.0, "finite_diff_gradient: eps must be positive");
    Vec grad(z.size());
    Vec zp = z;
    for (Eigen::Index i = 0; i < z.size(); ++i) {
        const double h = eps * (1.0 + std::abs(z[i]));
        zp[i] = z[i] + h;
        const double fp = fn(zp);
        zp[i] = z[i] - h;
        const double fm = fn(zp);
        zp[i] = z[i];
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw std::runtime_error("finite_diff_gradient: non-finite function value");
        grad[i] = (fp - fm) / (2.0 * h);
    }
    return grad;
}

/// Central-difference Jacobian of a vector-valued function.
inline Mat finite_diff_jacobian(const std::function<Vec(const Vec&)>& fn, const Vec& z,
                                int out_dim, double eps = 1e-6) {
    Mat J(out_dim, z.size());
    Vec zp = z;
    for (Eigen::Index i = 0; i < z.size(); ++i) {
        const double h = eps * (1.0 + std::abs(z[i]));
        zp[i] = z[i] + h;
        const Vec fp = fn(zp);
        zp[i] = z[i] - h;
        const Vec fm = fn(zp);
        zp[i] = z[i];
        if (!all_finite(fp) || !all_finite(fm))
            throw std::runtime_error("finite_diff_jacobian: non-finite constraint value");
        J.col(i) = (fp - fm) / (2.0 * h);
    }
    return J;
}

enum class QpStatus { optimal, infeasible, max_iters };

struct QpResult {
    Vec z;
    Vec mult_eq;            ///< equality multipliers (free sign)
    Vec mult_ineq;          ///< general inequality multipliers, >= 0
    Vec mult_lo, mult_hi;   ///< bound multipliers, >= 0, zero where unbounded
    QpStatus status = QpStatus::max_iters;
    int iters = 0;
    std::vector<int> active;  ///< final active general+bound rows, for warm starts
};

namespace detail {

/// Regularized Cholesky factor of a symmetric PSD matrix: adds lambda * I
/// (lambda = 1e-8 scale, escalating tenfold) until the factorization succeeds.
inline Eigen::LLT<Mat> regularized_llt(Mat H) {
    H = 0.5 * (H + H.transpose()).eval();
    const double scale = std::max(1.0, H.cwiseAbs().maxCoeff());
    Eigen::LLT<Mat> llt(H);
    double lambda = 1e-8 * scale;
    while (llt.info() != Eigen::Success) {
        require(lambda <= 1e2 * scale, "solve_qp: Hessian cannot be regularized to PD");
        llt.compute(H + lambda * Mat::Identity(H.rows(), H.cols()));
        lambda *= 10.0;
    }
    return llt;
}

}  // namespace detail

/// Convex QP: min 1/2 z'Hz + g'z s.t. A_eq z = b_eq, A_in z <= b_in,
/// lo <= z <= hi. Primal-dual active-set iteration in the dual sense: start
/// from the equality-constrained minimizer, repeatedly absorb the most
/// violated inequality with paired primal and multiplier steps, dropping
/// working rows whose multipliers hit zero. Bounds are treated as inequality
/// rows internally. `active_init` warm-starts the working set (indices into
/// general rows followed by bound rows) when it is dual-feasible.
inline QpResult solve_qp(const Mat& H, const Vec& g, const Mat& A_eq, const Vec& b_eq,
                         const Mat& A_in, const Vec& b_in, const Vec& lo, const Vec& hi,
                         int max_iters = 0, const std::vector<int>* active_init = nullptr) {
    const int d = static_cast<int>(g.size());
    require(H.rows() == d && H.cols() == d, "solve_qp: Hessian dimension mismatch");
    const int n_eq = static_cast<int>(b_eq.size());
    const int n_in = static_cast<int>(b_in.size());
    require(A_eq.rows() == n_eq && (n_eq == 0 || A_eq.cols() == d),
            "solve_qp: equality dimension mismatch");
    require(A_in.rows() == n_in && (n_in == 0 || A_in.cols() == d),
            "solve_qp: inequality dimension mismatch");
    require(lo.size() == d && hi.size() == d, "solve_qp: bound dimension mismatch");

    QpResult res;
    res.mult_eq = Vec::Zero(n_eq);
    res.mult_ineq = Vec::Zero(n_in);
    res.mult_lo = Vec::Zero(d);
    res.mult_hi = Vec::Zero(d);
    for (int i = 0; i < d; ++i) {
        if (lo[i] > hi[i] + 1e-14) {
            res.status = QpStatus::infeasible;
            return res;
        }
    }

    // general rows first, then finite bound rows (+z <= hi, -z <= -lo)
    struct BoundRow {
        int var;
        double sign;  // +1: upper, -1: lower
        double rhs;
    };
    std::vector<BoundRow> bound_rows;
    for (int i = 0; i < d; ++i) {
        if (std::isfinite(hi[i])) bound_rows.push_back({i, 1.0, hi[i]});
        if (std::isfinite(lo[i])) bound_rows.push_back({i, -1.0, -lo[i]});
    }
    const int n_rows = n_in + static_cast<int>(bound_rows.size());
    auto row_dot = [&](int r, const Vec& z) {
        if (r < n_in) return A_in.row(r).dot(z);
        const auto& br = bound_rows[static_cast<size_t>(r - n_in)];
        return br.sign * z[br.var];
    };
    auto row_rhs = [&](int r) {
        return r < n_in ? b_in[r] : bound_rows[static_cast<size_t>(r - n_in)].rhs;
    };

    auto row_vec = [&](int r) {
        if (r < n_in) return Vec(A_in.row(r).transpose());
        Vec a = Vec::Zero(d);
        const auto& br = bound_rows[static_cast<size_t>(r - n_in)];
        a[br.var] = br.sign;
        return a;
    };

    const Eigen::LLT<Mat> llt = detail::regularized_llt(H);
    if (max_iters <= 0) max_iters = 200 + 10 * (n_rows + n_eq);
    // Primal feasibility is judged per row on the scale of that row's data
    // alone: one large right-hand side must not loosen the budget of the
    // well-scaled rows, and tying tolerances to the Hessian would legitimize
    // real violations whenever the curvature estimate grows large.
    auto row_tol = [&](int r) { return 1e-9 * (1.0 + std::abs(row_rhs(r))); };
    Vec eq_tol(n_eq);
    for (int i = 0; i < n_eq; ++i) eq_tol[i] = 1e-9 * (1.0 + std::abs(b_eq[i]));
    const double dual_scale =
        1.0 + std::max(H.cwiseAbs().maxCoeff(), g.cwiseAbs().maxCoeff());

    std::vector<int> W;  // working inequality rows, equalities are always in
    Vec u(0);            // multipliers of W
    Vec lam_eq = Vec::Zero(n_eq);
    Vec z;

    // minimizer over the current working set taken as equalities
    auto solve_eqp = [&](Vec& z_out, Vec& lam_out, Vec& u_out) {
        const int nk = n_eq + static_cast<int>(W.size());
        if (nk == 0) {
            z_out = llt.solve(-g);
            lam_out.resize(0);
            u_out.resize(0);
            return true;
        }
        Mat K(nk, d);
        Vec bk(nk);
        if (n_eq > 0) {
            K.topRows(n_eq) = A_eq;
            bk.head(n_eq) = b_eq;
        }
        for (size_t j = 0; j < W.size(); ++j) {
            K.row(n_eq + static_cast<int>(j)) = row_vec(W[j]).transpose();
            bk[n_eq + static_cast<int>(j)] = row_rhs(W[j]);
        }
        const Mat Y = llt.solve(K.transpose());
        Eigen::CompleteOrthogonalDecomposition<Mat> cod(K * Y);
        auto k_tol = [&](int i) {
            return i < n_eq ? eq_tol[i] : row_tol(W[static_cast<size_t>(i - n_eq)]);
        };
        auto consistent = [&](const Vec& r) {
            for (int i = 0; i < nk; ++i)
                if (std::abs(r[i]) > k_tol(i)) return false;
            return true;
        };
        Vec lam = cod.solve(-(Y.transpose() * g) - bk);
        z_out = llt.solve(-(g + K.transpose() * lam));
        Vec r = K * z_out - bk;
        if (!consistent(r)) {
            // One refinement pass separates ill-conditioned-but-consistent
            // systems (residual collapses) from inconsistent ones (residual
            // stays at the true gap). K z - bk equals the least-squares
            // residual of the multiplier system, so correcting through the
            // same decomposition is exact in the consistent case.
            lam += cod.solve(r);
            z_out = llt.solve(-(g + K.transpose() * lam));
            r = K * z_out - bk;
            if (!consistent(r)) return false;
        }
        lam_out = lam.head(n_eq);
        u_out = lam.tail(static_cast<Eigen::Index>(W.size()));
        return true;
    };

    if (active_init && !active_init->empty()) {
        for (int r : *active_init)
            if (r >= 0 && r < n_rows) W.push_back(r);
        std::sort(W.begin(), W.end());
        W.erase(std::unique(W.begin(), W.end()), W.end());
        if (!solve_eqp(z, lam_eq, u) || (u.size() > 0 && u.minCoeff() < -1e-11 * dual_scale)) {
            W.clear();  // warm start not dual-feasible, fall back to cold
        }
    }
    if (W.empty()) {
        if (!solve_eqp(z, lam_eq, u)) {
            res.status = QpStatus::infeasible;  // inconsistent equalities
            res.z = z;
            return res;
        }
    }

    int iters = 0;
    while (true) {
        // most violated inequality outside the working set, judged against
        // the per-row budget
        int p = -1;
        double worst = 0.0;
        std::vector<char> in_w(static_cast<size_t>(n_rows), 0);
        for (int r : W) in_w[static_cast<size_t>(r)] = 1;
        for (int r = 0; r < n_rows; ++r) {
            if (in_w[static_cast<size_t>(r)]) continue;
            const double excess = row_dot(r, z) - row_rhs(r) - row_tol(r);
            if (excess > worst) {
                worst = excess;
                p = r;
            }
        }
        if (p < 0) break;  // primal feasible and dual feasible: done

        const Vec a = row_vec(p);
        const Vec ha = llt.solve(a);
        const double kappa_scale = std::max(a.dot(ha), 1e-300);
        double u_p = 0.0;

        bool absorbed = false;
        while (!absorbed) {
            if (++iters > max_iters) {
                res.z = z;
                res.iters = iters;
                res.status = QpStatus::max_iters;
                return res;
            }
            // direction pair for unit growth of constraint p's multiplier
            Vec dz, dlam;
            const int nk = n_eq + static_cast<int>(W.size());
            if (nk == 0) {
                dz = -ha;
                dlam.resize(0);
            } else {
                Mat K(nk, d);
                if (n_eq > 0) K.topRows(n_eq) = A_eq;
                for (size_t j = 0; j < W.size(); ++j)
                    K.row(n_eq + static_cast<int>(j)) = row_vec(W[j]).transpose();
                const Mat Y = llt.solve(K.transpose());
                Eigen::CompleteOrthogonalDecomposition<Mat> cod(K * Y);
                dlam = cod.solve(-(K * ha));
                dz = -ha - Y * dlam;
            }
            const double kappa = a.dot(dz);  // <= 0 up to roundoff
            const bool dependent = -kappa <= 1e-10 * kappa_scale;

            // nearest working-row multiplier to hit zero along the path
            double t2 = std::numeric_limits<double>::infinity();
            int blk = -1;
            for (size_t j = 0; j < W.size(); ++j) {
                const double rate = dlam[n_eq + static_cast<int>(j)];
                if (rate < -1e-14) {
                    const double t = u[static_cast<Eigen::Index>(j)] / (-rate);
                    if (t < t2) {
                        t2 = t;
                        blk = static_cast<int>(j);
                    }
                }
            }

            auto apply_step = [&](double t) {
                z += t * dz;
                if (n_eq > 0) lam_eq += t * dlam.head(n_eq);
                for (size_t j = 0; j < W.size(); ++j)
                    u[static_cast<Eigen::Index>(j)] += t * dlam[n_eq + static_cast<int>(j)];
                u_p += t;
            };
            auto drop_row = [&](int j) {
                W.erase(W.begin() + j);
                Vec u2(u.size() - 1);
                int c = 0;
                for (int k = 0; k < u.size(); ++k)
                    if (k != j) u2[c++] = u[k];
                u = u2;
            };

            bool treat_dependent = dependent;
            if (!dependent) {
                const double viol = row_dot(p, z) - row_rhs(p);
                const double t1 = viol / (-kappa);
                if (t2 < t1) {
                    apply_step(t2);
                    drop_row(blk);
                    continue;
                }
                // Tentative absorb, validated by a fresh working-set solve:
                // the incremental update equals it in exact arithmetic, and
                // adopting the re-solve keeps the iterate glued to the
                // working manifold instead of drifting across absorbs.
                W.push_back(p);
                Vec z_f, lam_f, u_f;
                if (solve_eqp(z_f, lam_f, u_f)) {
                    z = z_f;
                    lam_eq = lam_f;
                    u = u_f.cwiseMax(0.0);
                    absorbed = true;
                } else {
                    // inconsistent with the working rows, so the new row is
                    // numerically dependent after all
                    W.pop_back();
                    treat_dependent = true;
                }
            }
            if (treat_dependent) {
                if (blk < 0) {
                    res.z = z;
                    res.iters = iters;
                    res.status = QpStatus::infeasible;  // no trade-off possible
                    return res;
                }
                apply_step(t2);
                drop_row(blk);
            }
        }
    }

    // polish: re-solve on the final working set for full KKT precision
    Vec z_fin, lam_fin, u_fin;
    if (solve_eqp(z_fin, lam_fin, u_fin) && (u_fin.size() == 0 || u_fin.minCoeff() > -1e-9 * dual_scale)) {
        bool feasible = true;
        std::vector<char> in_w(static_cast<size_t>(n_rows), 0);
        for (int r : W) in_w[static_cast<size_t>(r)] = 1;
        for (int r = 0; r < n_rows && feasible; ++r)
            if (!in_w[static_cast<size_t>(r)] && row_dot(r, z_fin) - row_rhs(r) > row_tol(r))
                feasible = false;
        if (feasible) {
            z = z_fin;
            lam_eq = lam_fin;
            u = u_fin;
        }
    }
    res.z = z;
    res.iters = iters;
    res.mult_eq = lam_eq;
    for (size_t j = 0; j < W.size(); ++j) {
        const double m = std::max(0.0, u[static_cast<Eigen::Index>(j)]);
        const int r = W[j];
        if (r < n_in) {
            res.mult_ineq[r] = m;
        } else {
            const auto& br = bound_rows[static_cast<size_t>(r - n_in)];
            (br.sign > 0 ? res.mult_hi : res.mult_lo)[br.var] = m;
        }
        res.active.push_back(r);
    }
    res.status = QpStatus::optimal;
    return res;
}

namespace detail {

/// Fallback for an inconsistent QP linearization: one extra variable
/// xi in [0, 1] scales the violated constraint parts, so (p, xi) = (0, 0) is
/// always feasible, and the quadratic penalty rho/2 (1 - xi)^2 drives xi
/// toward the largest enforceable fraction. Equalities become
/// J_eq p + xi c_eq = 0, violated inequality rows J_in p + xi c_in <= 0;
/// already satisfied rows stay hard. The result is reshaped to the original
/// variables, with the achieved xi reported through `xi_out`.
inline QpResult solve_qp_relaxed(const Mat& B, const Vec& g, const Mat& J_eq, const Vec& c_eq,
                                 const Mat& J_in, const Vec& c_in, const Vec& lo_s,
                                 const Vec& hi_s, int max_iters,
                                 const std::vector<int>* active_init, double& xi_out) {
    const int d = static_cast<int>(g.size());
    const int m_eq = static_cast<int>(c_eq.size());
    const int m_in = static_cast<int>(c_in.size());

    Mat Br = Mat::Zero(d + 1, d + 1);
    Br.topLeftCorner(d, d) = B;
    Vec gr(d + 1);
    gr.head(d) = g;
    Mat Ar_eq(m_eq, d + 1);
    if (m_eq > 0) {
        Ar_eq.leftCols(d) = J_eq;
        Ar_eq.col(d) = c_eq;
    }
    Mat Ar_in(m_in, d + 1);
    Vec br_in(m_in);
    if (m_in > 0) {
        Ar_in.leftCols(d) = J_in;
        Ar_in.col(d) = c_in.cwiseMax(0.0);
        br_in = (-c_in).cwiseMax(0.0);
    }
    Vec lor(d + 1), hir(d + 1);
    lor.head(d) = lo_s;
    hir.head(d) = hi_s;
    lor[d] = 0.0;
    hir[d] = 1.0;

    int n_bound = 0;  // bound rows of the original variables, for warm starts
    for (int i = 0; i < d; ++i)
        n_bound += (std::isfinite(hi_s[i]) ? 1 : 0) + (std::isfinite(lo_s[i]) ? 1 : 0);

    xi_out = 0.0;
    double rho = 1.0 + std::max(B.cwiseAbs().maxCoeff(), g.cwiseAbs().maxCoeff());
    QpResult out;
    for (int attempt = 0; attempt < 3; ++attempt, rho *= 100.0) {
        Br(d, d) = rho;
        gr[d] = -rho;
        const QpResult qr = solve_qp(Br, gr, Ar_eq, Vec::Zero(m_eq), Ar_in, br_in, lor, hir,
                                     max_iters, active_init);
        if (qr.status != QpStatus::optimal) continue;
        xi_out = qr.z[d];
        out = qr;
        out.z = qr.z.head(d).eval();
        out.mult_lo = qr.mult_lo.head(d).eval();
        out.mult_hi = qr.mult_hi.head(d).eval();
        out.active.clear();
        for (int r : qr.active)
            if (r < m_in + n_bound) out.active.push_back(r);
        if (xi_out > 1e-6) return out;  // a usable fraction is enforced
    }
    return out;
}

}  // namespace detail

enum class SqpStatus { converged, max_iters, qp_failure, diverged };

struct SqpOptions {
    int max_major_iters = 100;
    double kkt_tol = 1e-6;
    int qp_max_iters = 0;  ///< 0 = automatic
    enum class Hessian { gauss_newton, damped_bfgs };
    Hessian hessian = Hessian::damped_bfgs;
    double ls_backtrack = 0.5;   ///< step shrink factor in (0,1)
    double armijo = 0.1;
    double merit_penalty_init = 1.0;
    double bfgs_init_damping = 1e-2;
    /// Observer invoked after every accepted step with the merit value
    /// before and after (same penalty), for diagnostics and testing.
    std::function<void(int major, double merit_before, double merit_after)> on_accept;
};

struct NlpSolution {
    Vec z;
    Vec eq_multipliers;
    Vec ineq_multipliers;
    SqpStatus status = SqpStatus::max_iters;
    double kkt_residual = std::numeric_limits<double>::infinity();
    int major_iters = 0;
    double constraint_violation_inf = 0.0;
    double cost = 0.0;
};

/// Dense SQP with an l1-merit backtracking line search. The Hessian is either
/// the constant (Gauss-Newton) cost Hessian or a Powell-damped BFGS estimate
/// seeded from it; slack coordinates keep their exact quadratic blocks in
/// both modes. Deterministic: identical inputs yield identical iterates.
inline NlpSolution solve_sqp(const NlpProblem& nlp, Vec z, const SqpOptions& opts = {}) {
    require(nlp.dim > 0 && z.size() == nlp.dim, "solve_sqp: bad initial point dimension");
    require(opts.kkt_tol > 0.0 && opts.ls_backtrack > 0.0 && opts.ls_backtrack < 1.0,
            "solve_sqp: invalid options");
    const int d = nlp.dim;
    const Vec lo = nlp.lo.size() == d
                       ? nlp.lo
                       : Vec::Constant(d, -std::numeric_limits<double>::infinity());
    const Vec hi = nlp.hi.size() == d
                       ? nlp.hi
                       : Vec::Constant(d, std::numeric_limits<double>::infinity());
    z = z.cwiseMax(lo).cwiseMin(hi);

    auto eval_eq = [&](const Vec& p) { return nlp.eq_constraints ? nlp.eq_constraints(p) : Vec(); };
    auto eval_in = [&](const Vec& p) {
        return nlp.ineq_constraints ? nlp.ineq_constraints(p) : Vec();
    };
    auto grad_f = [&](const Vec& p) {
        return nlp.cost_gradient ? nlp.cost_gradient(p) : finite_diff_gradient(nlp.cost, p);
    };
    auto jac_eq = [&](const Vec& p, int rows) {
        return nlp.eq_jacobian ? nlp.eq_jacobian(p)
                               : finite_diff_jacobian(nlp.eq_constraints, p, rows);
    };
    auto jac_in = [&](const Vec& p, int rows) {
        return nlp.ineq_jacobian ? nlp.ineq_jacobian(p)
                                 : finite_diff_jacobian(nlp.ineq_constraints, p, rows);
    };

    Vec c_eq = eval_eq(z);
    Vec c_in = eval_in(z);
    const int m_eq = static_cast<int>(c_eq.size());
    const int m_in = static_cast<int>(c_in.size());
    double f = nlp.cost(z);
    Vec gf = grad_f(z);
    Mat J_eq = m_eq > 0 ? jac_eq(z, m_eq) : Mat(0, d);
    Mat J_in = m_in > 0 ? jac_in(z, m_in) : Mat(0, d);

    const Mat cost_hess = nlp.cost_hessian.size() == d * d ? nlp.cost_hessian : Mat::Zero(d, d);
    Mat B = cost_hess;
    std::vector<char> is_slack(static_cast<size_t>(d), 0);
    if (nlp.layout.s > 0 && nlp.layout.dim() == d)
        for (int i = nlp.layout.s_begin(); i < nlp.layout.t_begin(); ++i)
            is_slack[static_cast<size_t>(i)] = 1;
    if (opts.hessian == SqpOptions::Hessian::damped_bfgs)
        for (int i = 0; i < d; ++i)
            if (!is_slack[static_cast<size_t>(i)]) B(i, i) += opts.bfgs_init_damping;

    auto violation_l1 = [&](const Vec& ce, const Vec& ci) {
        double v = 0.0;
        for (Eigen::Index i = 0; i < ce.size(); ++i) v += std::abs(ce[i]);
        for (Eigen::Index i = 0; i < ci.size(); ++i) v += std::max(0.0, ci[i]);
        return v;
    };
    auto violation_inf = [&](const Vec& ce, const Vec& ci) {
        double v = ce.size() > 0 ? ce.cwiseAbs().maxCoeff() : 0.0;
        for (Eigen::Index i = 0; i < ci.size(); ++i) v = std::max(v, ci[i]);
        return std::max(v, 0.0);
    };

    NlpSolution best;
    best.z = z;
    best.cost = f;
    best.eq_multipliers = Vec::Zero(m_eq);
    best.ineq_multipliers = Vec::Zero(m_in);
    best.constraint_violation_inf = violation_inf(c_eq, c_in);

    double nu = opts.merit_penalty_init;
    double tau = 0.0;  // proximal damping on the QP model, raised when stalled
    std::vector<int> warm_active;
    for (int major = 0; major < opts.max_major_iters; ++major) {
        best.major_iters = major + 1;

        QpResult qp;
        bool accepted = false;
        Vec z_new, ce_new, ci_new;
        double f_new = 0.0, phi0 = 0.0;
        auto raise_tau = [&] {
            tau = tau == 0.0 ? 1e-6 * (1.0 + B.cwiseAbs().maxCoeff()) : 50.0 * tau;
        };
        for (int round = 0; round < 6 && !accepted; ++round) {
            Mat B_qp = B;
            if (tau > 0.0) B_qp.diagonal().array() += tau;
            qp = solve_qp(B_qp, gf, J_eq, -c_eq, J_in, -c_in, lo - z, hi - z,
                          opts.qp_max_iters, major > 0 ? &warm_active : nullptr);
            double xi = 1.0;
            if (qp.status != QpStatus::optimal) {
                // Far from a solution the linearized constraints can be
                // inconsistent with the bounds (the time-scaling columns
                // vanish on a stationary guess, for one); enforce the largest
                // fraction that fits before giving up.
                qp = detail::solve_qp_relaxed(B_qp, gf, J_eq, c_eq, J_in, c_in, lo - z,
                                              hi - z, opts.qp_max_iters,
                                              major > 0 ? &warm_active : nullptr, xi);
            }
            if (qp.status != QpStatus::optimal) {
                if (round + 1 < 6) {
                    raise_tau();
                    continue;
                }
                best.status = SqpStatus::qp_failure;
                return best;
            }
            warm_active = qp.active;
            const Vec& p = qp.z;

            // KKT residual at the current iterate with the fresh QP multipliers
            Vec stat = gf;
            if (m_eq > 0) stat += J_eq.transpose() * qp.mult_eq;
            if (m_in > 0) stat += J_in.transpose() * qp.mult_ineq;
            stat += qp.mult_hi - qp.mult_lo;
            const double mult_inf =
                std::max({qp.mult_eq.size() > 0 ? qp.mult_eq.cwiseAbs().maxCoeff() : 0.0,
                          qp.mult_ineq.size() > 0 ? qp.mult_ineq.maxCoeff() : 0.0,
                          qp.mult_hi.maxCoeff(), qp.mult_lo.maxCoeff()});
            const double kkt_scale = 1.0 + std::max(gf.cwiseAbs().maxCoeff(), mult_inf);
            double comp = 0.0;
            for (int i = 0; i < m_in; ++i)
                comp = std::max(comp, std::abs(qp.mult_ineq[i] * c_in[i]));
            const double kkt = std::max({stat.cwiseAbs().maxCoeff() / kkt_scale,
                                         violation_inf(c_eq, c_in), comp / kkt_scale});
            best.z = z;
            best.cost = f;
            best.eq_multipliers = qp.mult_eq;
            best.ineq_multipliers = qp.mult_ineq;
            best.kkt_residual = kkt;
            best.constraint_violation_inf = violation_inf(c_eq, c_in);
            if (kkt < opts.kkt_tol) {
                best.status = SqpStatus::converged;
                return best;
            }

            const double nu_need = std::max(2.0 * mult_inf, opts.merit_penalty_init);
            if (nu < nu_need)
                nu = nu_need;
            else if (nu > 100.0 * nu_need)
                nu = 10.0 * nu_need;  // forget stale penalty spikes
            phi0 = f + nu * violation_l1(c_eq, c_in);
            const double dir_deriv = gf.dot(p) - nu * xi * violation_l1(c_eq, c_in);

            double alpha = 1.0;
            bool soc_tried = false;
            while (alpha >= 1e-12) {
                z_new = (z + alpha * p).cwiseMax(lo).cwiseMin(hi);
                f_new = nlp.cost(z_new);
                ce_new = eval_eq(z_new);
                ci_new = eval_in(z_new);
                const double phi = f_new + nu * violation_l1(ce_new, ci_new);
                if (std::isfinite(phi) &&
                    phi <= phi0 + opts.armijo * alpha * std::min(dir_deriv, 0.0)) {
                    accepted = true;
                    break;
                }
                if (!soc_tried && std::isfinite(phi)) {
                    // Second-order correction: retarget the constraint residual
                    // the step picked up from curvature with a least-norm update
                    // on the current Jacobians, countering the Maratos effect.
                    soc_tried = true;
                    std::vector<int> viol_rows;
                    for (int i = 0; i < m_in; ++i)
                        if (ci_new[i] > 0.0) viol_rows.push_back(i);
                    const int mk = m_eq + static_cast<int>(viol_rows.size());
                    if (mk > 0) {
                        Mat K(mk, d);
                        Vec r(mk);
                        if (m_eq > 0) {
                            K.topRows(m_eq) = J_eq;
                            r.head(m_eq) = -ce_new;
                        }
                        for (size_t j = 0; j < viol_rows.size(); ++j) {
                            K.row(m_eq + static_cast<int>(j)) = J_in.row(viol_rows[j]);
                            r[m_eq + static_cast<int>(j)] = -ci_new[viol_rows[j]];
                        }
                        Eigen::CompleteOrthogonalDecomposition<Mat> cod(K);
                        const Vec z_soc = (z_new + cod.solve(r)).cwiseMax(lo).cwiseMin(hi);
                        const double f_soc = nlp.cost(z_soc);
                        const Vec ce_soc = eval_eq(z_soc);
                        const Vec ci_soc = eval_in(z_soc);
                        const double phi_soc = f_soc + nu * violation_l1(ce_soc, ci_soc);
                        if (std::isfinite(phi_soc) &&
                            phi_soc <= phi0 + opts.armijo * alpha * std::min(dir_deriv, 0.0)) {
                            z_new = z_soc;
                            f_new = f_soc;
                            ce_new = ce_soc;
                            ci_new = ci_soc;
                            accepted = true;
                            break;
                        }
                    }
                }
                alpha *= opts.ls_backtrack;
            }
            if (!accepted) {
                if (p.cwiseAbs().maxCoeff() < 1e-10) {
                    best.status = SqpStatus::converged;
                    return best;
                }
                // damp the model and retry: steps along nearly flat curvature
                // otherwise run far past what the merit function tolerates
                raise_tau();
            }
        }
        if (!accepted) {
            best.status = SqpStatus::diverged;
            return best;
        }
        if (opts.on_accept)
            opts.on_accept(major, phi0, f_new + nu * violation_l1(ce_new, ci_new));
        tau *= 0.1;

        const Vec gf_new = grad_f(z_new);
        const Mat J_eq_new = m_eq > 0 ? jac_eq(z_new, m_eq) : Mat(0, d);
        const Mat J_in_new = m_in > 0 ? jac_in(z_new, m_in) : Mat(0, d);

        if (opts.hessian == SqpOptions::Hessian::damped_bfgs) {
            // Powell-damped update on the non-slack block; the Lagrangian
            // gradient difference uses the new multipliers at both points
            Vec dL_new = gf_new, dL_old = gf;
            if (m_eq > 0) {
                dL_new += J_eq_new.transpose() * qp.mult_eq;
                dL_old += J_eq.transpose() * qp.mult_eq;
            }
            if (m_in > 0) {
                dL_new += J_in_new.transpose() * qp.mult_ineq;
                dL_old += J_in.transpose() * qp.mult_ineq;
            }
            Vec s = z_new - z;
            Vec y = dL_new - dL_old;
            for (int i = 0; i < d; ++i)
                if (is_slack[static_cast<size_t>(i)]) {
                    s[i] = 0.0;
                    y[i] = 0.0;
                }
            const Vec Bs = B * s;
            const double sBs = s.dot(Bs);
            double sy = s.dot(y);
            if (sBs > 1e-14) {
                if (sy < 0.2 * sBs) {
                    const double theta = 0.8 * sBs / (sBs - sy);
                    y = theta * y + (1.0 - theta) * Bs;
                    sy = s.dot(y);
                }
                if (sy > 1e-14) B += y * y.transpose() / sy - Bs * Bs.transpose() / sBs;
            }
            // Runaway guard: a sequence of near-degenerate updates can inflate
            // the estimate far past the problem's own curvature; restart from
            // the model Hessian rather than let the QP scaling degrade.
            const double b_cap =
                1e4 * (1.0 + cost_hess.cwiseAbs().maxCoeff() + opts.bfgs_init_damping);
            if (B.cwiseAbs().maxCoeff() > b_cap) {
                B = cost_hess;
                for (int i = 0; i < d; ++i)
                    if (!is_slack[static_cast<size_t>(i)]) B(i, i) += opts.bfgs_init_damping;
            }
        } else {
            B = cost_hess;
        }

        z = z_new;
        f = f_new;
        gf = gf_new;
        c_eq = ce_new;
        c_in = ci_new;
        J_eq = J_eq_new;
        J_in = J_in_new;
    }
    best.status = SqpStatus::max_iters;
    return best;
}

}  // namespace tocnmpc
