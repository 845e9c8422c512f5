#pragma once

#include <tocnmpc/types.hpp>

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <string>
#include <vector>

namespace tocnmpc {

/// y(t) = amplitude * sin(2 pi frequency t + phase) + offset.
struct SinusoidFit {
    double amplitude = 0.0;
    double frequency = 0.0;  ///< Hz
    double phase = 0.0;      ///< rad, in [-pi, pi]
    double offset = 0.0;
    double rms_residual = 0.0;
};

/// One-sided power spectral density on a uniform frequency grid.
struct SpectralEstimate {
    Vec frequencies;  ///< Hz, frequencies[0] = 0
    Vec power;        ///< density, >= 0
    double resolution = 0.0;  ///< Hz, grid spacing fs / segment_len
};

/// Dominant frequency of one modal channel plus an estimator confidence.
struct FrequencyPrediction {
    double frequency = 0.0;   ///< Hz
    double confidence = 0.0;  ///< in [0, 1]
};

struct PredictOptions {
    double residual_tol = 0.1;   ///< prefit accepted below this fraction of signal rms
    int segment_len = 0;         ///< PSD fallback segment; 0 = whole window
    double overlap_frac = 0.5;
    double sigma_frac = 0.25;    ///< Gaussian window sigma as fraction of half-segment
};

namespace detail {

/// In-place iterative radix-2 FFT; size must be a power of two.
inline void fft_radix2(std::vector<std::complex<double>>& a) {
    const size_t n = a.size();
    for (size_t i = 1, j = 0; i < n; ++i) {
        size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (size_t len = 2; len <= n; len <<= 1) {
        const double ang = -2.0 * M_PI / static_cast<double>(len);
        const std::complex<double> wl(std::cos(ang), std::sin(ang));
        for (size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (size_t k = 0; k < len / 2; ++k) {
                const auto u = a[i + k];
                const auto v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
                w *= wl;
            }
        }
    }
}

/// DFT of a real sequence: radix-2 FFT when the length is a power of two,
/// direct evaluation otherwise (segments here are tiny).
inline std::vector<std::complex<double>> dft_real(const Vec& x) {
    const size_t n = static_cast<size_t>(x.size());
    std::vector<std::complex<double>> out(n);
    if (n > 1 && (n & (n - 1)) == 0) {
        for (size_t i = 0; i < n; ++i) out[i] = x[static_cast<Eigen::Index>(i)];
        fft_radix2(out);
        return out;
    }
    for (size_t j = 0; j < n; ++j) {
        std::complex<double> acc(0.0, 0.0);
        for (size_t k = 0; k < n; ++k) {
            const double ang = -2.0 * M_PI * static_cast<double>(j * k) / static_cast<double>(n);
            acc += x[static_cast<Eigen::Index>(k)] * std::complex<double>(std::cos(ang), std::sin(ang));
        }
        out[j] = acc;
    }
    return out;
}

/// Sum of squared residuals of the best linear fit a sin + b cos + c at fixed f.
/// Outputs the coefficients through the pointers when non-null.
inline double sinusoid_sse(const Vec& y, const Vec& t, double f, Eigen::Vector3d* coef = nullptr) {
    const Eigen::Index K = y.size();
    Mat X(K, 3);
    for (Eigen::Index i = 0; i < K; ++i) {
        const double w = 2.0 * M_PI * f * t[i];
        X(i, 0) = std::sin(w);
        X(i, 1) = std::cos(w);
        X(i, 2) = 1.0;
    }
    const Eigen::Vector3d beta = X.colPivHouseholderQr().solve(y);
    if (coef) *coef = beta;
    return (y - X * beta).squaredNorm();
}

}  // namespace detail

/// Least-squares fit of a single sinusoid. The frequency is located by a
/// coarse grid scan (when freq_init <= 0) followed by golden-section
/// refinement; amplitude, phase and offset come from the nested linear solve.
inline SinusoidFit fit_sinusoid(const Vec& samples, double dt, double freq_init = 0.0) {
    require(samples.size() >= 8, "fit_sinusoid: need at least 8 samples");
    require(dt > 0.0, "fit_sinusoid: dt must be positive");
    require(all_finite(samples), "fit_sinusoid: non-finite samples");

    const Eigen::Index K = samples.size();
    const double mean = samples.mean();
    SinusoidFit fit;
    fit.offset = mean;
    if ((samples.maxCoeff() - samples.minCoeff()) < 1e-12 * (1.0 + std::abs(mean)))
        return fit;  // constant signal

    const Vec t = Vec::LinSpaced(K, 0.0, static_cast<double>(K - 1) * dt);
    const double nyquist = 0.5 / dt;
    const double window = static_cast<double>(K - 1) * dt;

    double f_lo, f_hi;
    if (freq_init > 0.0) {
        f_lo = std::max(0.5 * freq_init, 1e-3 / window);
        f_hi = std::min(1.5 * freq_init, 0.999 * nyquist);
    } else {
        // coarse scan over the resolvable range, then refine around the best cell
        const double grid_lo = 0.25 / window;
        const double grid_hi = 0.999 * nyquist;
        const int cells = 256;
        int best = 0;
        double best_sse = std::numeric_limits<double>::infinity();
        for (int j = 0; j <= cells; ++j) {
            const double f = grid_lo + (grid_hi - grid_lo) * j / cells;
            const double sse = detail::sinusoid_sse(samples, t, f);
            if (sse < best_sse) {
                best_sse = sse;
                best = j;
            }
        }
        f_lo = grid_lo + (grid_hi - grid_lo) * std::max(0, best - 1) / cells;
        f_hi = grid_lo + (grid_hi - grid_lo) * std::min(cells, best + 1) / cells;
    }
    if (f_hi <= f_lo) f_hi = std::min(f_lo + 1e-3, nyquist);

    const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
    double a = f_lo, b = f_hi;
    double c1 = b - gr * (b - a), c2 = a + gr * (b - a);
    double s1 = detail::sinusoid_sse(samples, t, c1);
    double s2 = detail::sinusoid_sse(samples, t, c2);
    for (int it = 0; it < 80 && (b - a) > 1e-9; ++it) {
        if (s1 < s2) {
            b = c2;
            c2 = c1;
            s2 = s1;
            c1 = b - gr * (b - a);
            s1 = detail::sinusoid_sse(samples, t, c1);
        } else {
            a = c1;
            c1 = c2;
            s1 = s2;
            c2 = a + gr * (b - a);
            s2 = detail::sinusoid_sse(samples, t, c2);
        }
    }
    const double f_star = 0.5 * (a + b);
    Eigen::Vector3d coef;
    const double sse = detail::sinusoid_sse(samples, t, f_star, &coef);

    fit.frequency = f_star;
    fit.amplitude = std::hypot(coef[0], coef[1]);
    fit.phase = std::atan2(coef[1], coef[0]);  // a sin(wt) + b cos(wt) = A sin(wt + phi)
    fit.offset = coef[2];
    fit.rms_residual = std::sqrt(sse / static_cast<double>(K));
    return fit;
}

/// Welch power spectral density: mean-removed, Gaussian-windowed, overlapped
/// segments; averaged one-sided modified periodograms normalized by the
/// window power so that sum(power) * resolution recovers the windowed
/// mean square of the signal.
inline SpectralEstimate welch_psd(const Vec& samples, double dt, int segment_len,
                                  double overlap_frac = 0.5, double sigma_frac = 0.25) {
    const int K = static_cast<int>(samples.size());
    require(dt > 0.0, "welch_psd: dt must be positive");
    require(segment_len >= 8, "welch_psd: segment_len must be at least 8");
    require(segment_len <= K, "welch_psd: segment_len exceeds signal length");
    require(overlap_frac >= 0.0 && overlap_frac < 1.0, "welch_psd: overlap_frac outside [0,1)");
    require(sigma_frac > 0.0, "welch_psd: sigma_frac must be positive");

    const int L = segment_len;
    const double fs = 1.0 / dt;
    Vec win(L);
    const double sigma = sigma_frac * static_cast<double>(L) / 2.0;
    const double mid = static_cast<double>(L - 1) / 2.0;
    for (int i = 0; i < L; ++i) {
        const double z = (static_cast<double>(i) - mid) / sigma;
        win[i] = std::exp(-0.5 * z * z);
    }
    const double win_power = win.squaredNorm();

    const int hop = std::max(1, static_cast<int>(std::lround(L * (1.0 - overlap_frac))));
    const int bins = L / 2 + 1;
    Vec power = Vec::Zero(bins);
    int n_seg = 0;
    for (int start = 0; start + L <= K; start += hop) {
        Vec seg = samples.segment(start, L);
        seg.array() -= seg.mean();
        seg.array() *= win.array();
        const auto spec = detail::dft_real(seg);
        for (int j = 0; j < bins; ++j) {
            double p = std::norm(spec[static_cast<size_t>(j)]) / (fs * win_power);
            const bool interior = j > 0 && !(L % 2 == 0 && j == bins - 1);
            if (interior) p *= 2.0;  // fold the conjugate half
            power[j] += p;
        }
        ++n_seg;
    }
    power /= static_cast<double>(n_seg);

    SpectralEstimate est;
    est.resolution = fs / static_cast<double>(L);
    est.frequencies = Vec::LinSpaced(bins, 0.0, est.resolution * (bins - 1));
    est.power = power;
    return est;
}

/// Highest-power spectral peaks, refined by 3-point parabolic interpolation
/// on log power. Peaks below min_prominence * max(power) are dropped.
inline std::vector<double> dominant_frequencies(const SpectralEstimate& spec, int count,
                                                double min_prominence = 0.0) {
    require(count >= 1, "dominant_frequencies: count must be positive");
    const Eigen::Index B = spec.power.size();
    const double pmax = B > 0 ? spec.power.maxCoeff() : 0.0;
    if (pmax <= 0.0) return {};

    struct Peak {
        double freq;
        double power;
    };
    std::vector<Peak> peaks;
    for (Eigen::Index i = 0; i < B; ++i) {
        const double p = spec.power[i];
        const bool up = i == 0 || p > spec.power[i - 1];
        const bool down = i == B - 1 || p >= spec.power[i + 1];
        if (!(up && down) || p < min_prominence * pmax) continue;
        double f = spec.frequencies[i];
        if (i > 0 && i < B - 1 && spec.power[i - 1] > 0.0 && spec.power[i + 1] > 0.0 && p > 0.0) {
            const double lm = std::log(spec.power[i - 1]);
            const double l0 = std::log(p);
            const double lp = std::log(spec.power[i + 1]);
            const double denom = lm - 2.0 * l0 + lp;
            if (denom < -1e-12) {
                const double shift = std::clamp(0.5 * (lm - lp) / denom, -0.5, 0.5);
                f += shift * spec.resolution;
            }
        }
        peaks.push_back({f, p});
    }
    std::sort(peaks.begin(), peaks.end(),
              [](const Peak& a, const Peak& b) { return a.power > b.power; });
    std::vector<double> out;
    for (const auto& pk : peaks) {
        if (static_cast<int>(out.size()) >= count) break;
        out.push_back(pk.freq);
    }
    return out;
}

/// Dominant frequency of each modal channel of a uniformly sampled state
/// matrix (columns are snapshots spaced dt apart). The sinusoid prefit is
/// primary; Welch PSD with peak extraction is the fallback when the prefit
/// explains the channel poorly.
inline std::vector<FrequencyPrediction> predict_frequencies(const Mat& states, double dt,
                                                            const std::vector<int>& modal_indices,
                                                            const PredictOptions& opts = {}) {
    const int K = static_cast<int>(states.cols());
    if (K < 8)
        throw std::invalid_argument(
            "predict_frequencies: trajectory too short, need at least 8 samples, got " +
            std::to_string(K));
    require(dt > 0.0, "predict_frequencies: dt must be positive");

    std::vector<FrequencyPrediction> out;
    out.reserve(modal_indices.size());
    for (int idx : modal_indices) {
        require(idx >= 0 && idx < states.rows(), "predict_frequencies: modal index out of range");
        const Vec y = states.row(idx).transpose();
        FrequencyPrediction pred;

        const double mean = y.mean();
        const double rms = std::sqrt((y.array() - mean).square().mean());
        if (rms < 1e-12 * (1.0 + std::abs(mean))) {
            out.push_back(pred);  // constant channel: 0 Hz, zero confidence
            continue;
        }

        const SinusoidFit fit = fit_sinusoid(y, dt);
        if (fit.rms_residual < opts.residual_tol * rms) {
            pred.frequency = fit.frequency;
            pred.confidence = std::clamp(
                1.0 - (fit.rms_residual * fit.rms_residual) / (rms * rms), 0.0, 1.0);
        } else {
            int seg = opts.segment_len > 0 ? std::min(opts.segment_len, K) : K;
            seg = std::max(8, seg);
            const SpectralEstimate spec =
                welch_psd(y, dt, seg, opts.overlap_frac, opts.sigma_frac);
            const auto peaks = dominant_frequencies(spec, 1);
            if (!peaks.empty()) {
                pred.frequency = peaks.front();
                // confidence: share of total power near the winning bin
                Eigen::Index ibin = 0;
                (spec.frequencies.array() - peaks.front()).abs().minCoeff(&ibin);
                const double total = spec.power.sum();
                pred.confidence = total > 0.0 ? std::clamp(spec.power[ibin] / total, 0.0, 1.0) : 0.0;
            }
        }
        out.push_back(pred);
    }
    return out;
}

/// Trajectory overload: uses the mean sampling interval, tolerating the
/// mildly nonuniform grids produced by time-scaled transcription.
inline std::vector<FrequencyPrediction> predict_frequencies(const Trajectory& traj,
                                                            const std::vector<int>& modal_indices,
                                                            const PredictOptions& opts = {}) {
    traj.check_consistent();
    const Eigen::Index K1 = traj.times.size();
    if (K1 < 8)
        throw std::invalid_argument(
            "predict_frequencies: trajectory too short, need at least 8 samples, got " +
            std::to_string(K1));
    const double dt = (traj.times[K1 - 1] - traj.times[0]) / static_cast<double>(K1 - 1);
    return predict_frequencies(traj.states, dt, modal_indices, opts);
}

}  // namespace tocnmpc
