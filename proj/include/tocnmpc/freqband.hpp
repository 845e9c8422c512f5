#pragma once

#include <tocnmpc/types.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

namespace tocnmpc {

/// Characteristic equation G(m_l, y_l, Omega) = 0 whose roots are resonance
/// frequencies, together with the parameter domain and the search interval.
struct CharacteristicFn {
    std::function<double(double m_l, double y_l, double omega)> g;
    ParamPoint domain_lo{};
    ParamPoint domain_hi{};
    double omega_lo = 0.0;     ///< rad/s
    double omega_hi = 0.0;     ///< rad/s
    double bracket_step = 0.0; ///< rad/s, scan increment
};

/// One root of the characteristic equation at one parameter point.
struct SurfaceSample {
    double m_l = 0.0;
    double y_l = 0.0;
    double omega = 0.0;  ///< rad/s
    int branch = 0;      ///< 0-based root index in ascending omega
};

/// Total-degree-p bivariate polynomial P(m_l, y_l) = sum c_ij m^i y^j.
struct PolySurface {
    int degree = 0;
    Mat coeffs;  ///< (p+1) x (p+1), entries with i+j > p are zero
    double fit_rms = 0.0;

    [[nodiscard]] double eval(double m_l, double y_l) const {
        double acc = 0.0;
        double mi = 1.0;
        for (int i = 0; i <= degree; ++i) {
            double yj = 1.0;
            for (int j = 0; j + i <= degree; ++j) {
                acc += coeffs(i, j) * mi * yj;
                yj *= y_l;
            }
            mi *= m_l;
        }
        return acc;
    }
};

/// Resonance band: either a polynomial surface with half-width xi (both
/// boundaries) or a fixed lower boundary (upper side open).
struct FrequencyBand {
    enum class Kind { surface, fixed_lower };
    Kind kind = Kind::fixed_lower;
    PolySurface surface;      ///< Hz, surface kind only
    double xi = 0.0;          ///< Hz, half-width, surface kind only
    double omega_lower = 0.0; ///< Hz, fixed_lower kind only
    ParamPoint domain_lo{};
    ParamPoint domain_hi{};
};

/// Band boundaries at one parameter point. `clamped` flags parameter values
/// outside the fitted domain (evaluation then uses the nearest box point).
struct BandInterval {
    double lo = 0.0;
    double hi = std::numeric_limits<double>::infinity();
    bool clamped = false;
};

/// Ascending roots of g(m_l, y_l, .) on the search interval: sign-change scan
/// with bracket_step, then bisection to 1e-10 * omega_hi. No roots found is
/// an empty result, not an error.
inline std::vector<SurfaceSample> find_roots(const CharacteristicFn& fn, double m_l,
                                             double y_l, int max_branches = 4) {
    require(fn.bracket_step > 0.0, "find_roots: bracket_step must be positive");
    require(fn.omega_hi > fn.omega_lo, "find_roots: empty search interval");
    require(max_branches >= 1, "find_roots: max_branches must be positive");

    const double tol = 1e-10 * fn.omega_hi;
    std::vector<SurfaceSample> roots;
    double wa = fn.omega_lo;
    double ga = fn.g(m_l, y_l, wa);
    require(std::isfinite(ga), "find_roots: characteristic function not finite");
    while (wa < fn.omega_hi && static_cast<int>(roots.size()) < max_branches) {
        const double wb = std::min(wa + fn.bracket_step, fn.omega_hi);
        const double gb = fn.g(m_l, y_l, wb);
        require(std::isfinite(gb), "find_roots: characteristic function not finite");
        if (ga == 0.0) {
            roots.push_back({m_l, y_l, wa, static_cast<int>(roots.size())});
        } else if (ga * gb < 0.0) {
            double lo = wa, hi = wb, glo = ga;
            while (hi - lo > tol) {
                const double mid = 0.5 * (lo + hi);
                const double gm = fn.g(m_l, y_l, mid);
                if (glo * gm <= 0.0) {
                    hi = mid;
                } else {
                    lo = mid;
                    glo = gm;
                }
            }
            roots.push_back({m_l, y_l, 0.5 * (lo + hi), static_cast<int>(roots.size())});
        }
        wa = wb;
        ga = gb;
    }
    return roots;
}

/// Grid sampling of one root branch. Nodes where the branch does not exist
/// inside the search interval are reported in `missing`.
struct SurfaceSampling {
    std::vector<SurfaceSample> samples;
    std::vector<ParamPoint> missing;
};

inline SurfaceSampling sample_hypersurface(const CharacteristicFn& fn, const Vec& m_grid,
                                           const Vec& y_grid, int branch = 0) {
    require(branch >= 0, "sample_hypersurface: branch must be nonnegative");
    SurfaceSampling out;
    for (Eigen::Index im = 0; im < m_grid.size(); ++im) {
        for (Eigen::Index iy = 0; iy < y_grid.size(); ++iy) {
            const double m = m_grid[im];
            const double y = y_grid[iy];
            require(m >= fn.domain_lo.m_l && m <= fn.domain_hi.m_l &&
                        y >= fn.domain_lo.y_l && y <= fn.domain_hi.y_l,
                    "sample_hypersurface: grid node outside characteristic domain");
            const auto roots = find_roots(fn, m, y, branch + 1);
            if (static_cast<int>(roots.size()) > branch) {
                SurfaceSample s = roots[static_cast<size_t>(branch)];
                s.branch = branch;
                out.samples.push_back(s);
            } else {
                out.missing.push_back({m, y});
            }
        }
    }
    return out;
}

/// Least-squares fit of a total-degree-p surface to scattered samples.
/// Inputs are affinely scaled to [-1,1]^2 for conditioning; the returned
/// coefficients are in the original (m_l, y_l) coordinates.
inline PolySurface fit_poly_surface(const std::vector<SurfaceSample>& samples, int p) {
    require(p >= 0, "fit_poly_surface: degree must be nonnegative");
    const int q = (p + 1) * (p + 2) / 2;
    const int n = static_cast<int>(samples.size());
    require(n >= q, "fit_poly_surface: need at least " + std::to_string(q) +
                        " samples for degree " + std::to_string(p));

    double m_lo = samples[0].m_l, m_hi = m_lo, y_lo = samples[0].y_l, y_hi = y_lo;
    for (const auto& s : samples) {
        m_lo = std::min(m_lo, s.m_l);
        m_hi = std::max(m_hi, s.m_l);
        y_lo = std::min(y_lo, s.y_l);
        y_hi = std::max(y_hi, s.y_l);
    }
    // degenerate ranges collapse to scale 1 about the common value; the
    // rank check below then rejects designs that truly cannot support p
    const double m_c = 0.5 * (m_lo + m_hi), m_s = m_hi > m_lo ? 2.0 / (m_hi - m_lo) : 1.0;
    const double y_c = 0.5 * (y_lo + y_hi), y_s = y_hi > y_lo ? 2.0 / (y_hi - y_lo) : 1.0;

    Mat X(n, q);
    Vec b(n);
    for (int r = 0; r < n; ++r) {
        const double u = m_s * (samples[r].m_l - m_c);
        const double v = y_s * (samples[r].y_l - y_c);
        int col = 0;
        double ui = 1.0;
        for (int i = 0; i <= p; ++i) {
            double vj = 1.0;
            for (int j = 0; j + i <= p; ++j) {
                X(r, col++) = ui * vj;
                vj *= v;
            }
            ui *= u;
        }
        b[r] = samples[r].omega;
    }
    Eigen::ColPivHouseholderQR<Mat> qr(X);
    qr.setThreshold(1e-10);
    if (qr.rank() < q)
        throw std::invalid_argument(
            "fit_poly_surface: rank-deficient design, samples do not support degree " +
            std::to_string(p));
    const Vec a = qr.solve(b);

    // expand a_ij u^i v^j back into powers of (m_l, y_l):
    // u^i = (m_s (m - m_c))^i = sum_k C(i,k) m_s^i (-m_c)^(i-k) m^k
    auto binomial_powers = [](int deg, double scale, double center) {
        Mat rows = Mat::Zero(deg + 1, deg + 1);  // rows(i, k): coeff of x^k in u^i
        rows(0, 0) = 1.0;
        for (int i = 1; i <= deg; ++i)
            for (int k = 0; k <= i; ++k)
                rows(i, k) = scale * ((k > 0 ? rows(i - 1, k - 1) : 0.0) -
                                      center * rows(i - 1, k));
        return rows;
    };
    const Mat mu = binomial_powers(p, m_s, m_c);
    const Mat yv = binomial_powers(p, y_s, y_c);

    PolySurface surf;
    surf.degree = p;
    surf.coeffs = Mat::Zero(p + 1, p + 1);
    int col = 0;
    for (int i = 0; i <= p; ++i) {
        for (int j = 0; j + i <= p; ++j) {
            const double aij = a[col++];
            for (int k = 0; k <= i; ++k)
                for (int l = 0; l <= j; ++l)
                    surf.coeffs(k, l) += aij * mu(i, k) * yv(j, l);
        }
    }
    double sse = 0.0;
    for (const auto& s : samples) {
        const double e = surf.eval(s.m_l, s.y_l) - s.omega;
        sse += e * e;
    }
    surf.fit_rms = std::sqrt(sse / n);
    return surf;
}

/// Band from hypersurface samples: roots arrive in rad/s from the
/// characteristic equation and are converted to Hz here, so the surface and
/// xi live in the same units as the spectral predictions.
inline FrequencyBand make_surface_band(std::vector<SurfaceSample> samples, int degree,
                                       double xi) {
    require(xi >= 0.0, "make_surface_band: xi must be nonnegative");
    require(!samples.empty(), "make_surface_band: no samples");
    FrequencyBand band;
    band.kind = FrequencyBand::Kind::surface;
    band.xi = xi;
    band.domain_lo = {samples[0].m_l, samples[0].y_l};
    band.domain_hi = band.domain_lo;
    for (auto& s : samples) {
        band.domain_lo.m_l = std::min(band.domain_lo.m_l, s.m_l);
        band.domain_lo.y_l = std::min(band.domain_lo.y_l, s.y_l);
        band.domain_hi.m_l = std::max(band.domain_hi.m_l, s.m_l);
        band.domain_hi.y_l = std::max(band.domain_hi.y_l, s.y_l);
        s.omega /= 2.0 * M_PI;
    }
    band.surface = fit_poly_surface(samples, degree);
    return band;
}

/// Band directly from an already-fitted surface in Hz.
inline FrequencyBand make_surface_band(PolySurface surface_hz, double xi,
                                       const ParamPoint& lo, const ParamPoint& hi) {
    require(xi >= 0.0, "make_surface_band: xi must be nonnegative");
    FrequencyBand band;
    band.kind = FrequencyBand::Kind::surface;
    band.surface = std::move(surface_hz);
    band.xi = xi;
    band.domain_lo = lo;
    band.domain_hi = hi;
    return band;
}

/// Time-invariant one-sided band with only the lower boundary designed.
inline FrequencyBand make_fixed_lower_band(double omega_hz) {
    require(omega_hz >= 0.0, "make_fixed_lower_band: boundary must be nonnegative");
    FrequencyBand band;
    band.kind = FrequencyBand::Kind::fixed_lower;
    band.omega_lower = omega_hz;
    return band;
}

/// Boundaries (B-, B+) of the band at rho. Out-of-domain surface queries are
/// clamped to the domain box and flagged.
inline BandInterval eval_band(const FrequencyBand& band, const ParamPoint& rho) {
    BandInterval iv;
    if (band.kind == FrequencyBand::Kind::fixed_lower) {
        iv.lo = band.omega_lower;
        iv.hi = std::numeric_limits<double>::infinity();
        return iv;
    }
    const double m = std::clamp(rho.m_l, band.domain_lo.m_l, band.domain_hi.m_l);
    const double y = std::clamp(rho.y_l, band.domain_lo.y_l, band.domain_hi.y_l);
    iv.clamped = m != rho.m_l || y != rho.y_l;
    const double center = band.surface.eval(m, y);
    iv.lo = center - band.xi;
    iv.hi = center + band.xi;
    return iv;
}

/// Built-in characteristic equation: clamped-free Euler-Bernoulli beam with a
/// combined tip mass, G = 1 + cos(x)cosh(x) + mu x (cos x sinh x - sin x cosh x)
/// with x = beta L_eff, beta^4 = Omega^2 rho A / EI. The lift mass feeds the
/// tip-mass ratio mu and the lift position stretches the effective length.
inline CharacteristicFn make_crane_characteristic(double m_t = 0.5, double L = 2.0,
                                                  double A = 3.2e-4, double rho = 2700.0,
                                                  double EI = 119.4) {
    CharacteristicFn fn;
    fn.domain_lo = {0.0, 0.0};
    fn.domain_hi = {3.0, L};
    fn.omega_lo = 0.5;
    fn.omega_hi = 100.0;
    fn.bracket_step = (fn.omega_hi - fn.omega_lo) / 2000.0;
    const double rhoA = rho * A;
    fn.g = [m_t, L, rhoA, EI](double m_l, double y_l, double omega) {
        const double L_eff = L + 0.5 * y_l;
        const double mu = (m_t + m_l) / (rhoA * L);
        const double beta = std::pow(omega * omega * rhoA / EI, 0.25);
        const double x = beta * L_eff;
        return 1.0 + std::cos(x) * std::cosh(x) +
               mu * x * (std::cos(x) * std::sinh(x) - std::sin(x) * std::cosh(x));
    };
    return fn;
}

}  // namespace tocnmpc
