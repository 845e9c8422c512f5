#include <tocnmpc/nlp.hpp>

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

using namespace tocnmpc;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Vec free_bounds(int d, double sign) { return Vec::Constant(d, sign * kInf); }

struct RandomQp {
    Mat H;
    Vec g;
    Mat A_eq;
    Vec b_eq;
    Mat A_in;
    Vec b_in;
    Vec lo, hi;
};

RandomQp make_random_qp(std::mt19937& rng, int d, int n_eq, int n_in, bool with_bounds) {
    std::normal_distribution<double> dist(0.0, 1.0);
    auto rand_mat = [&](int r, int c) {
        Mat M(r, c);
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) M(i, j) = dist(rng);
        return M;
    };
    RandomQp qp;
    const Mat M = rand_mat(d, d);
    qp.H = M.transpose() * M + 0.1 * Mat::Identity(d, d);
    qp.g = rand_mat(d, 1);
    const Vec z0 = rand_mat(d, 1);
    qp.A_eq = rand_mat(n_eq, d);
    qp.b_eq = n_eq > 0 ? Vec(qp.A_eq * z0) : Vec();
    qp.A_in = rand_mat(n_in, d);
    qp.b_in = n_in > 0 ? Vec(qp.A_in * z0 + Vec::Constant(n_in, 0.3)) : Vec();
    if (with_bounds) {
        qp.lo = z0 - Vec::Constant(d, 1.5);
        qp.hi = z0 + Vec::Constant(d, 1.5);
    } else {
        qp.lo = free_bounds(d, -1.0);
        qp.hi = free_bounds(d, 1.0);
    }
    return qp;
}

/// Exhaustive active-set enumeration: tries every subset of inequality rows
/// (general rows plus finite bounds) as equalities and keeps the best
/// KKT-consistent candidate. Only viable for small instances.
double oracle_min(const RandomQp& qp, Vec* z_out = nullptr) {
    const int d = static_cast<int>(qp.g.size());
    struct Row {
        Vec a;
        double b;
    };
    std::vector<Row> rows;
    for (int r = 0; r < qp.A_in.rows(); ++r) rows.push_back({qp.A_in.row(r).transpose(), qp.b_in[r]});
    for (int i = 0; i < d; ++i) {
        if (std::isfinite(qp.hi[i])) {
            Vec a = Vec::Zero(d);
            a[i] = 1.0;
            rows.push_back({a, qp.hi[i]});
        }
        if (std::isfinite(qp.lo[i])) {
            Vec a = Vec::Zero(d);
            a[i] = -1.0;
            rows.push_back({a, -qp.lo[i]});
        }
    }
    const int n_rows = static_cast<int>(rows.size());
    const int n_eq = static_cast<int>(qp.b_eq.size());
    REQUIRE(n_rows <= 16);

    double best = kInf;
    for (unsigned mask = 0; mask < (1u << n_rows); ++mask) {
        std::vector<int> act;
        for (int r = 0; r < n_rows; ++r)
            if (mask & (1u << r)) act.push_back(r);
        const int n_k = n_eq + static_cast<int>(act.size());
        Mat kkt = Mat::Zero(d + n_k, d + n_k);
        Vec rhs(d + n_k);
        kkt.topLeftCorner(d, d) = qp.H;
        rhs.head(d) = -qp.g;
        for (int r = 0; r < n_eq; ++r) {
            kkt.block(d + r, 0, 1, d) = qp.A_eq.row(r);
            kkt.block(0, d + r, d, 1) = qp.A_eq.row(r).transpose();
            rhs[d + r] = qp.b_eq[r];
        }
        for (size_t j = 0; j < act.size(); ++j) {
            const auto& row = rows[static_cast<size_t>(act[j])];
            kkt.block(d + n_eq + static_cast<int>(j), 0, 1, d) = row.a.transpose();
            kkt.block(0, d + n_eq + static_cast<int>(j), d, 1) = row.a;
            rhs[d + n_eq + static_cast<int>(j)] = row.b;
        }
        Eigen::FullPivLU<Mat> lu(kkt);
        if (!lu.isInvertible()) continue;
        const Vec sol = lu.solve(rhs);
        const Vec z = sol.head(d);
        bool ok = true;
        for (const auto& row : rows)
            if (row.a.dot(z) - row.b > 1e-8) ok = false;
        for (size_t j = 0; j < act.size(); ++j)
            if (sol[d + n_eq + static_cast<int>(j)] < -1e-8) ok = false;
        if (!ok) continue;
        const double obj = 0.5 * z.dot(qp.H * z) + qp.g.dot(z);
        if (obj < best) {
            best = obj;
            if (z_out) *z_out = z;
        }
    }
    return best;
}

}  // namespace

TEST_CASE("unconstrained scalar QP finds the stationary point") {
    Mat H(1, 1);
    H << 1.0;
    Vec g(1);
    g << -1.0;
    const QpResult res = solve_qp(H, g, Mat(0, 1), Vec(), Mat(0, 1), Vec(),
                                  free_bounds(1, -1.0), free_bounds(1, 1.0));
    REQUIRE(res.status == QpStatus::optimal);
    CHECK_THAT(res.z[0], Catch::Matchers::WithinAbs(1.0, 1e-8));
}

TEST_CASE("upper bound binds with the hand-computed multiplier") {
    Mat H(1, 1);
    H << 1.0;
    Vec g(1);
    g << -1.0;
    Vec hi(1);
    hi << 0.5;
    const QpResult res =
        solve_qp(H, g, Mat(0, 1), Vec(), Mat(0, 1), Vec(), free_bounds(1, -1.0), hi);
    REQUIRE(res.status == QpStatus::optimal);
    CHECK_THAT(res.z[0], Catch::Matchers::WithinAbs(0.5, 1e-8));
    CHECK_THAT(res.mult_hi[0], Catch::Matchers::WithinAbs(0.5, 1e-8));
}

TEST_CASE("symmetric equality split") {
    const Mat H = Mat::Identity(2, 2);
    const Vec g = Vec::Zero(2);
    Mat A_eq(1, 2);
    A_eq << 1.0, 1.0;
    Vec b_eq(1);
    b_eq << 1.0;
    const QpResult res = solve_qp(H, g, A_eq, b_eq, Mat(0, 2), Vec(), free_bounds(2, -1.0),
                                  free_bounds(2, 1.0));
    REQUIRE(res.status == QpStatus::optimal);
    CHECK_THAT(res.z[0], Catch::Matchers::WithinAbs(0.5, 1e-9));
    CHECK_THAT(res.z[1], Catch::Matchers::WithinAbs(0.5, 1e-9));
}

TEST_CASE("contradictory constraints are reported infeasible") {
    Mat H = Mat::Identity(1, 1);
    Vec g = Vec::Zero(1);
    Vec lo(1), hi(1);
    lo << 1.0;
    hi << 0.0;
    CHECK(solve_qp(H, g, Mat(0, 1), Vec(), Mat(0, 1), Vec(), lo, hi).status ==
          QpStatus::infeasible);

    Mat A_eq(2, 1);
    A_eq << 1.0, 1.0;
    Vec b_eq(2);
    b_eq << 0.0, 1.0;  // z = 0 and z = 1
    CHECK(solve_qp(H, g, A_eq, b_eq, Mat(0, 1), Vec(), free_bounds(1, -1.0),
                   free_bounds(1, 1.0))
              .status == QpStatus::infeasible);
}

TEST_CASE("semidefinite Hessians are regularized transparently") {
    Mat H = Mat::Zero(2, 2);
    H(0, 0) = 1.0;  // singular direction along z2
    Vec g(2);
    g << -1.0, 0.5;
    Vec lo(2), hi(2);
    lo << -2.0, -2.0;
    hi << 2.0, 2.0;
    const QpResult res = solve_qp(H, g, Mat(0, 2), Vec(), Mat(0, 2), Vec(), lo, hi);
    REQUIRE(res.status == QpStatus::optimal);
    CHECK_THAT(res.z[0], Catch::Matchers::WithinAbs(1.0, 1e-6));
    CHECK_THAT(res.z[1], Catch::Matchers::WithinAbs(-2.0, 1e-6));  // pushed to the bound
}

TEST_CASE("solver agrees with exhaustive active-set enumeration on small QPs") {
    std::mt19937 rng(20240817);
    for (int trial = 0; trial < 40; ++trial) {
        const int d = 2 + static_cast<int>(rng() % 3);  // 2..4
        const int n_eq = static_cast<int>(rng() % 2);
        const int n_in = 2 + static_cast<int>(rng() % 3);
        const RandomQp qp = make_random_qp(rng, d, n_eq, n_in, true);
        Vec z_oracle;
        const double obj_oracle = oracle_min(qp, &z_oracle);
        REQUIRE(std::isfinite(obj_oracle));

        const QpResult res =
            solve_qp(qp.H, qp.g, qp.A_eq, qp.b_eq, qp.A_in, qp.b_in, qp.lo, qp.hi);
        REQUIRE(res.status == QpStatus::optimal);
        const double obj = 0.5 * res.z.dot(qp.H * res.z) + qp.g.dot(res.z);
        CHECK_THAT(obj, Catch::Matchers::WithinAbs(obj_oracle, 1e-6 * (1.0 + std::abs(obj_oracle))));
        CHECK((res.z - z_oracle).cwiseAbs().maxCoeff() < 1e-5);
    }
}

TEST_CASE("KKT conditions hold on random medium instances") {
    std::mt19937 rng(77);
    int solved = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const int d = 3 + static_cast<int>(rng() % 18);  // 3..20
        const int n_eq = static_cast<int>(rng() % 3);
        const int n_in = 1 + static_cast<int>(rng() % 8);
        const RandomQp qp = make_random_qp(rng, d, n_eq, n_in, trial % 2 == 0);
        const QpResult res =
            solve_qp(qp.H, qp.g, qp.A_eq, qp.b_eq, qp.A_in, qp.b_in, qp.lo, qp.hi);
        REQUIRE(res.status == QpStatus::optimal);
        ++solved;

        const double scale =
            1.0 + std::max(qp.H.cwiseAbs().maxCoeff(), qp.g.cwiseAbs().maxCoeff());
        Vec stat = qp.H * res.z + qp.g + res.mult_hi - res.mult_lo;
        if (qp.b_eq.size() > 0) stat += qp.A_eq.transpose() * res.mult_eq;
        if (qp.b_in.size() > 0) stat += qp.A_in.transpose() * res.mult_ineq;
        CHECK(stat.cwiseAbs().maxCoeff() < 1e-7 * scale);

        if (qp.b_eq.size() > 0)
            CHECK((qp.A_eq * res.z - qp.b_eq).cwiseAbs().maxCoeff() < 1e-8 * scale);
        for (int r = 0; r < qp.b_in.size(); ++r) {
            const double ci = qp.A_in.row(r).dot(res.z) - qp.b_in[r];
            CHECK(ci < 1e-8 * scale);
            CHECK(res.mult_ineq[r] >= 0.0);
            CHECK(std::abs(res.mult_ineq[r] * ci) < 1e-7 * scale * scale);
        }
        for (int i = 0; i < d; ++i) {
            CHECK(res.z[i] <= qp.hi[i] + 1e-8 * scale);
            CHECK(res.z[i] >= qp.lo[i] - 1e-8 * scale);
            if (std::isfinite(qp.hi[i]))
                CHECK(std::abs(res.mult_hi[i] * (res.z[i] - qp.hi[i])) < 1e-7 * scale * scale);
        }
    }
    CHECK(solved == 100);
}

TEST_CASE("warm-started solves reproduce the cold-start answer") {
    std::mt19937 rng(5);
    const RandomQp qp = make_random_qp(rng, 8, 1, 5, true);
    const QpResult cold =
        solve_qp(qp.H, qp.g, qp.A_eq, qp.b_eq, qp.A_in, qp.b_in, qp.lo, qp.hi);
    REQUIRE(cold.status == QpStatus::optimal);
    const QpResult warm = solve_qp(qp.H, qp.g, qp.A_eq, qp.b_eq, qp.A_in, qp.b_in, qp.lo,
                                   qp.hi, 0, &cold.active);
    REQUIRE(warm.status == QpStatus::optimal);
    CHECK((warm.z - cold.z).cwiseAbs().maxCoeff() < 1e-10);
    CHECK(warm.iters <= cold.iters);
}
