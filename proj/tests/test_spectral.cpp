#include <tocnmpc/model.hpp>
#include <tocnmpc/spectral.hpp>

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <complex>
#include <random>

using namespace tocnmpc;

namespace {

Vec sample_sine(double amp, double freq, double dt, int K, double offset = 0.0,
                double phase = 0.0) {
    Vec y(K);
    for (int i = 0; i < K; ++i) y[i] = amp * std::sin(2.0 * M_PI * freq * i * dt + phase) + offset;
    return y;
}

/// Independent direct DFT periodogram of one mean-removed, windowed segment,
/// written out as the plain O(n^2) sum.
Vec oracle_periodogram(const Vec& seg_in, double dt, double sigma_frac) {
    const int L = static_cast<int>(seg_in.size());
    Vec seg = seg_in;
    seg.array() -= seg.mean();
    Vec win(L);
    const double sigma = sigma_frac * L / 2.0;
    const double mid = (L - 1) / 2.0;
    for (int i = 0; i < L; ++i) win[i] = std::exp(-0.5 * std::pow((i - mid) / sigma, 2));
    seg.array() *= win.array();

    const double fs = 1.0 / dt;
    const int bins = L / 2 + 1;
    Vec power(bins);
    for (int j = 0; j < bins; ++j) {
        std::complex<double> acc(0.0, 0.0);
        for (int k = 0; k < L; ++k) {
            const double ang = -2.0 * M_PI * j * k / L;
            acc += seg[k] * std::complex<double>(std::cos(ang), std::sin(ang));
        }
        double p = std::norm(acc) / (fs * win.squaredNorm());
        if (j > 0 && !(L % 2 == 0 && j == bins - 1)) p *= 2.0;
        power[j] = p;
    }
    return power;
}

}  // namespace

TEST_CASE("fit_sinusoid recovers frequency, amplitude and offset") {
    const Vec y = sample_sine(2.0, 5.0, 0.01, 50);
    const SinusoidFit fit = fit_sinusoid(y, 0.01);
    CHECK_THAT(fit.frequency, Catch::Matchers::WithinAbs(5.0, 0.05));
    CHECK_THAT(fit.amplitude, Catch::Matchers::WithinAbs(2.0, 0.02));
    CHECK(fit.rms_residual < 0.01);

    const Vec y2 = sample_sine(1.0, 5.0, 0.01, 50, 0.5);
    const SinusoidFit fit2 = fit_sinusoid(y2, 0.01);
    CHECK_THAT(fit2.offset, Catch::Matchers::WithinAbs(0.5, 0.01));
}

TEST_CASE("fit_sinusoid handles a constant signal") {
    const Vec y = Vec::Constant(32, 3.0);
    const SinusoidFit fit = fit_sinusoid(y, 0.01);
    CHECK(fit.amplitude == 0.0);
    CHECK(fit.frequency == 0.0);
    CHECK_THAT(fit.offset, Catch::Matchers::WithinAbs(3.0, 1e-12));
    CHECK(fit.rms_residual == 0.0);
}

TEST_CASE("fit_sinusoid respects the phase convention") {
    const Vec y = sample_sine(1.5, 4.0, 0.01, 64, 0.0, 1.1);
    const SinusoidFit fit = fit_sinusoid(y, 0.01);
    CHECK(fit.phase >= -M_PI);
    CHECK(fit.phase <= M_PI);
    CHECK_THAT(fit.phase, Catch::Matchers::WithinAbs(1.1, 0.05));
    CHECK_THROWS_AS(fit_sinusoid(Vec::Zero(7), 0.01), std::invalid_argument);
    CHECK_THROWS_AS(fit_sinusoid(Vec::Zero(16), 0.0), std::invalid_argument);
}

TEST_CASE("welch_psd matches a direct DFT periodogram on one segment") {
    const int K = 256;
    const Vec y = sample_sine(1.3, 12.0, 0.01, K, 0.7);
    const SpectralEstimate est = welch_psd(y, 0.01, K, 0.5, 0.25);
    const Vec oracle = oracle_periodogram(y, 0.01, 0.25);
    REQUIRE(est.power.size() == oracle.size());
    CHECK((est.power - oracle).cwiseAbs().maxCoeff() < 1e-9 * oracle.maxCoeff());
    CHECK(est.frequencies[0] == 0.0);
    CHECK_THAT(est.resolution, Catch::Matchers::WithinAbs(100.0 / K, 1e-12));
}

TEST_CASE("welch_psd puts the peak within one bin of a pure tone") {
    const Vec y = sample_sine(1.0, 10.0, 0.01, 512);
    const SpectralEstimate est = welch_psd(y, 0.01, 256, 0.5, 0.25);
    Eigen::Index peak = 0;
    est.power.maxCoeff(&peak);
    CHECK(std::abs(est.frequencies[peak] - 10.0) <= est.resolution);
}

TEST_CASE("welch_psd of the zero signal is identically zero") {
    const SpectralEstimate est = welch_psd(Vec::Zero(128), 0.01, 64);
    CHECK(est.power.maxCoeff() == 0.0);
    CHECK(est.power.minCoeff() == 0.0);
}

TEST_CASE("welch_psd resolves two well-separated tones") {
    const int K = 1024;
    Vec y = sample_sine(1.0, 5.0, 0.01, K) + sample_sine(1.0, 8.7, 0.01, K);
    const SpectralEstimate est = welch_psd(y, 0.01, 512, 0.5, 0.25);
    const auto peaks = dominant_frequencies(est, 2, 0.05);
    REQUIRE(peaks.size() == 2);
    const double lo = std::min(peaks[0], peaks[1]);
    const double hi = std::max(peaks[0], peaks[1]);
    CHECK(std::abs(lo - 5.0) <= est.resolution);
    CHECK(std::abs(hi - 8.7) <= est.resolution);
}

TEST_CASE("welch_psd validates its inputs") {
    CHECK_THROWS_AS(welch_psd(Vec::Zero(32), 0.01, 64), std::invalid_argument);
    CHECK_THROWS_AS(welch_psd(Vec::Zero(32), 0.01, 4), std::invalid_argument);
    CHECK_THROWS_AS(welch_psd(Vec::Zero(32), 0.01, 16, 1.0), std::invalid_argument);
}

TEST_CASE("dominant_frequencies interpolates the peak location") {
    const Vec y = sample_sine(1.0, 10.0, 0.01, 512);
    const SpectralEstimate est = welch_psd(y, 0.01, 256, 0.5, 0.25);
    const auto peaks = dominant_frequencies(est, 1);
    REQUIRE(peaks.size() == 1);
    CHECK_THAT(peaks[0], Catch::Matchers::WithinAbs(10.0, 0.2));
}

TEST_CASE("dominant_frequencies orders by power and respects prominence") {
    const int K = 1024;
    Vec y = sample_sine(2.0, 5.0, 0.01, K) + sample_sine(1.0, 8.7, 0.01, K);
    const SpectralEstimate est = welch_psd(y, 0.01, 512, 0.5, 0.25);
    const auto peaks = dominant_frequencies(est, 2, 0.01);
    REQUIRE(peaks.size() == 2);
    CHECK_THAT(peaks[0], Catch::Matchers::WithinAbs(5.0, 0.3));
    CHECK_THAT(peaks[1], Catch::Matchers::WithinAbs(8.7, 0.3));

    // a high prominence floor suppresses the weaker tone
    const auto strict = dominant_frequencies(est, 2, 0.5);
    REQUIRE(strict.size() == 1);
    CHECK_THAT(strict[0], Catch::Matchers::WithinAbs(5.0, 0.3));

    SpectralEstimate zero;
    zero.frequencies = Vec::LinSpaced(9, 0.0, 4.0);
    zero.power = Vec::Zero(9);
    zero.resolution = 0.5;
    CHECK(dominant_frequencies(zero, 3).empty());
}

TEST_CASE("predict_frequencies recovers mode 1 of two_dof on the short horizon") {
    const PlantModel model = make_two_dof();
    Vec x0(4);
    x0 << 0.01, 0.01, 0.0, 0.0;  // in-phase eigenvector: pure 5.033 Hz mode
    Mat u = Mat::Zero(2, 16);
    const Trajectory traj = integrate_rk4(model, x0, u, {{}}, 0.02, 8);
    REQUIRE(traj.samples() == 17);
    const auto preds = predict_frequencies(traj, model.modal_indices);
    REQUIRE(preds.size() == 2);
    for (const auto& p : preds) {
        CHECK_THAT(p.frequency, Catch::Matchers::WithinRel(5.0329212, 0.03));
        CHECK(p.confidence > 0.5);
    }
}

TEST_CASE("predict_frequencies flags constant channels with zero confidence") {
    Mat states = Mat::Zero(2, 17);
    states.row(1) = Vec::LinSpaced(17, 0.0, 1.6).transpose();  // ramp, non-constant
    const auto preds = predict_frequencies(states, 0.02, {0});
    REQUIRE(preds.size() == 1);
    CHECK(preds[0].frequency == 0.0);
    CHECK(preds[0].confidence == 0.0);
}

TEST_CASE("predict_frequencies matches the crane eigenanalysis oracle") {
    const PlantModel model = make_crane_modal();
    const ParamPoint rho{1.0, 0.8};
    Vec x_ref = Vec::Zero(8);
    x_ref[1] = rho.y_l;
    Vec u_ref(2);
    u_ref << 0.0, rho.m_l * model.params.at("g");

    // oracle: eigenvector with the largest a_1 content gives f*
    const double dt_lin = 0.002;
    const auto [A, B] = linearize_discrete(model, x_ref, u_ref, rho, dt_lin);
    Eigen::EigenSolver<Mat> eig(A);
    double f_star = 0.0, best = -1.0;
    for (int i = 0; i < 8; ++i) {
        const double w = std::abs(std::arg(eig.eigenvalues()[i])) / dt_lin;
        if (w < 1e-3) continue;
        const double a1_content = std::abs(eig.eigenvectors()(2, i));
        if (a1_content > best) {
            best = a1_content;
            f_star = w / (2.0 * M_PI);
        }
    }
    REQUIRE(f_star > 0.1);

    Vec x0 = x_ref;
    x0[2] = 0.004;  // pluck a_1
    Mat u(2, 256);
    u.setZero();
    u.row(1).setConstant(u_ref[1]);
    const Trajectory traj = integrate_rk4(model, x0, u, {rho}, 0.01, 2);
    const auto preds = predict_frequencies(traj, {2});
    REQUIRE(preds.size() == 1);
    CHECK_THAT(preds[0].frequency, Catch::Matchers::WithinRel(f_star, 0.05));
}

TEST_CASE("predict_frequencies is invariant to positive channel scaling") {
    const PlantModel model = make_two_dof();
    Vec x0(4);
    x0 << 0.01, -0.002, 0.0, 0.05;
    Mat u = Mat::Zero(2, 32);
    const Trajectory traj = integrate_rk4(model, x0, u, {{}}, 0.02, 8);
    const auto base = predict_frequencies(traj.states, 0.02, {0, 1});
    for (double c : {1e-3, 7.0, 1e4}) {
        Mat scaled = traj.states;
        scaled.row(0) *= c;
        scaled.row(1) *= c;
        const auto got = predict_frequencies(scaled, 0.02, {0, 1});
        for (size_t j = 0; j < base.size(); ++j)
            CHECK_THAT(got[j].frequency, Catch::Matchers::WithinAbs(base[j].frequency, 1e-9));
    }
}

TEST_CASE("spectral estimates satisfy Parseval consistency") {
    const int K = 256;
    const double dt = 0.005;
    const Vec y = sample_sine(1.7, 23.0, dt, K);
    const SpectralEstimate est = welch_psd(y, dt, K, 0.5, 0.25);

    Vec seg = y;
    seg.array() -= seg.mean();
    Vec win(K);
    const double sigma = 0.25 * K / 2.0;
    for (int i = 0; i < K; ++i)
        win[i] = std::exp(-0.5 * std::pow((i - (K - 1) / 2.0) / sigma, 2));
    const double windowed_ms = (seg.array() * win.array()).square().sum() / win.squaredNorm();
    CHECK_THAT(est.power.sum() * est.resolution, Catch::Matchers::WithinRel(windowed_ms, 0.02));
}

TEST_CASE("doubling the window halves the resolution exactly") {
    const Vec y = sample_sine(1.0, 7.0, 0.01, 512);
    const double r1 = welch_psd(y.head(256), 0.01, 256).resolution;
    const double r2 = welch_psd(y, 0.01, 512).resolution;
    CHECK(r2 == 0.5 * r1);
}

TEST_CASE("all reported frequencies stay below Nyquist") {
    std::mt19937 rng(42);
    std::normal_distribution<double> dist(0.0, 1.0);
    const double dt = 0.02;
    for (int trial = 0; trial < 5; ++trial) {
        Mat states(1, 64);
        for (int i = 0; i < 64; ++i) states(0, i) = dist(rng);
        const auto preds = predict_frequencies(states, dt, {0});
        CHECK(preds[0].frequency <= 0.5 / dt + 1e-12);
        CHECK(preds[0].frequency >= 0.0);
    }
}

TEST_CASE("short trajectories are rejected with the minimum length named") {
    Mat states = Mat::Zero(2, 5);
    try {
        predict_frequencies(states, 0.02, {0});
        FAIL("expected length error");
    } catch (const std::invalid_argument& e) {
        CHECK(std::string(e.what()).find("8") != std::string::npos);
    }
}
