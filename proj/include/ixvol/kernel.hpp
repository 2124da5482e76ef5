#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"

namespace ixvol {

inline constexpr double kNwDenominatorFloor = 1e-300;

// Gaussian kernel exp(-u^2/2) / sqrt(2 pi).
inline double gaussian_kernel(double u) {
    return std::exp(-0.5 * u * u) * 0.39894228040143267794;
}

struct KernelConfig {
    enum class Mode { naive, accelerated };
    Mode mode = Mode::naive;
    // h_N = N^{-bandwidth_exponent}; 1/5 is the mean-square-optimal baseline,
    // 1/10 the smoothed choice used with the acceleration and for surface
    // extraction.
    double bandwidth_exponent = 0.2;
    double threshold = 0.0;  // >= 0; contributions below it stop a sweep

    double bandwidth(std::int64_t n) const {
        return std::pow(static_cast<double>(n), -bandwidth_exponent);
    }
    double effective_threshold() const { return mode == Mode::accelerated ? threshold : 0.0; }
};

inline KernelConfig make_kernel_config(KernelConfig::Mode mode, double bandwidth_exponent,
                                       double threshold) {
    if (!(bandwidth_exponent > 0.0 && bandwidth_exponent < 1.0)) {
        throw config_error("kernel: bandwidth exponent must lie in (0, 1)");
    }
    if (!(threshold >= 0.0)) throw config_error("kernel: threshold must be >= 0");
    KernelConfig cfg;
    cfg.mode = mode;
    cfg.bandwidth_exponent = bandwidth_exponent;
    cfg.threshold = threshold;
    return cfg;
}

// Kernel conditional-expectation estimate sum y_i K((x - x_i)/h) / sum K(...),
// accumulated in array order as a running weighted mean so the result is an
// exact convex combination (constant ys reproduce the constant bit for bit).
// If every weight underflows, falls back to the nearest sample's value and
// reports it through the optional flag.
inline double nadaraya_watson(std::span<const double> xs, std::span<const double> ys, double x,
                              double h, bool* underflowed = nullptr) {
    if (xs.empty() || xs.size() != ys.size()) {
        throw config_error("nadaraya_watson: xs and ys must be non-empty and equal length");
    }
    if (!(h > 0.0)) throw config_error("nadaraya_watson: bandwidth must be > 0");
    double est = 0.0, den = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double w = gaussian_kernel((x - xs[i]) / h);
        if (w > 0.0) {
            den += w;
            est += (w / den) * (ys[i] - est);
        }
    }
    if (den < kNwDenominatorFloor) {
        if (underflowed) *underflowed = true;
        std::size_t best = 0;
        for (std::size_t i = 1; i < xs.size(); ++i) {
            if (std::abs(xs[i] - x) < std::abs(xs[best] - x)) best = i;
        }
        return ys[best];
    }
    if (underflowed) *underflowed = false;
    return est;
}

struct NwBatchResult {
    std::vector<double> estimates;       // aligned with the sorted inputs
    std::int64_t interactions = 0;       // kernel evaluations performed
    std::int64_t underflow_fallbacks = 0;
};

// Estimates for every particle over a sorted cloud. Each query starts at its
// own position and expands outward; a sweep side stops at the first particle
// whose kernel contribution falls below the threshold (the kernel decreases
// with distance, so everything further out is smaller). threshold = 0 sweeps
// the whole array and is the naive estimator, evaluated in the same order so
// the two modes agree bit for bit.
inline NwBatchResult accelerated_nw_all(std::span<const double> sorted_xs,
                                        std::span<const double> ys, double h, double threshold) {
    const std::size_t n = sorted_xs.size();
    if (n == 0 || ys.size() != n) {
        throw config_error("accelerated_nw_all: inputs must be non-empty and equal length");
    }
    if (!(h > 0.0)) throw config_error("accelerated_nw_all: bandwidth must be > 0");
    if (!(threshold >= 0.0)) throw config_error("accelerated_nw_all: threshold must be >= 0");

    NwBatchResult out;
    out.estimates.resize(n);
    std::int64_t interactions = 0;
    std::int64_t fallbacks = 0;
    for (std::size_t q = 0; q < n; ++q) {
        const double x = sorted_xs[q];
        double est = ys[q];
        double den = gaussian_kernel(0.0);
        ++interactions;
        for (std::size_t j = q; j-- > 0;) {
            const double w = gaussian_kernel((x - sorted_xs[j]) / h);
            ++interactions;
            if (w < threshold) break;
            if (w > 0.0) {
                den += w;
                est += (w / den) * (ys[j] - est);
            }
        }
        for (std::size_t j = q + 1; j < n; ++j) {
            const double w = gaussian_kernel((x - sorted_xs[j]) / h);
            ++interactions;
            if (w < threshold) break;
            if (w > 0.0) {
                den += w;
                est += (w / den) * (ys[j] - est);
            }
        }
        if (den < kNwDenominatorFloor) {
            ++fallbacks;
            out.estimates[q] = ys[q];
        } else {
            out.estimates[q] = est;
        }
    }
    out.interactions = interactions;
    out.underflow_fallbacks = fallbacks;
    return out;
}

// Functional basis for the projection estimator of a conditional expectation.
struct BasisSpec {
    std::vector<std::function<double(double)>> fns;
    std::vector<std::string> names;

    std::size_t size() const { return fns.size(); }
};

// Monomials {1, z, z^2, ...} in z = log(x / s0).
inline BasisSpec log_moneyness_monomials(double s0, int degree = 3) {
    if (!(s0 > 0.0)) throw config_error("basis: s0 must be > 0");
    if (degree < 0) throw config_error("basis: degree must be >= 0");
    BasisSpec basis;
    for (int d = 0; d <= degree; ++d) {
        basis.fns.push_back([s0, d](double x) { return std::pow(std::log(x / s0), d); });
        basis.names.push_back(d == 0 ? std::string("1") : "log_moneyness^" + std::to_string(d));
    }
    return basis;
}

namespace detail {

// Householder QR least squares for the small design matrices of the
// projection estimator. a is row-major n x m, overwritten in place.
inline std::vector<double> qr_least_squares(std::vector<double>& a, std::vector<double>& b,
                                            std::size_t n, std::size_t m,
                                            const std::vector<std::string>& col_names) {
    double max_diag = 0.0;
    std::vector<double> diag(m, 0.0);
    for (std::size_t k = 0; k < m; ++k) {
        double norm = 0.0;
        for (std::size_t i = k; i < n; ++i) norm += a[i * m + k] * a[i * m + k];
        norm = std::sqrt(norm);
        diag[k] = norm;
        max_diag = std::max(max_diag, norm);
        if (norm <= 1e-12 * std::max(1.0, max_diag)) {
            const std::string name = k < col_names.size() ? col_names[k] : std::to_string(k + 1);
            throw numeric_error("least squares: design matrix is rank deficient (basis function '" +
                                name + "' is linearly dependent on the sample)");
        }
        if (a[k * m + k] > 0) norm = -norm;
        for (std::size_t i = k; i < n; ++i) a[i * m + k] /= -norm;
        a[k * m + k] += 1.0;
        for (std::size_t j = k + 1; j < m; ++j) {
            double s = 0.0;
            for (std::size_t i = k; i < n; ++i) s += a[i * m + k] * a[i * m + j];
            s = -s / a[k * m + k];
            for (std::size_t i = k; i < n; ++i) a[i * m + j] += s * a[i * m + k];
        }
        double s = 0.0;
        for (std::size_t i = k; i < n; ++i) s += a[i * m + k] * b[i];
        s = -s / a[k * m + k];
        for (std::size_t i = k; i < n; ++i) b[i] += s * a[i * m + k];
        diag[k] = norm;  // R diagonal (negated Householder norm)
    }
    std::vector<double> coef(m, 0.0);
    for (std::size_t k = m; k-- > 0;) {
        double s = b[k];
        for (std::size_t j = k + 1; j < m; ++j) s -= a[k * m + j] * coef[j];
        coef[k] = s / diag[k];
    }
    return coef;
}

} // namespace detail

// Least-squares coefficients alpha minimizing sum_i (y_i - sum_l alpha_l
// f_l(x_i))^2. The residual is orthogonal to the basis span (normal
// equations).
inline std::vector<double> fit_parametric(std::span<const double> xs, std::span<const double> ys,
                                          const BasisSpec& basis) {
    const std::size_t n = xs.size();
    const std::size_t m = basis.size();
    if (m == 0) throw config_error("fit_parametric: basis is empty");
    if (n < m) throw config_error("fit_parametric: needs at least as many samples as basis functions");
    if (ys.size() != n) throw config_error("fit_parametric: xs and ys length mismatch");
    std::vector<double> a(n * m);
    std::vector<double> b(ys.begin(), ys.end());
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t l = 0; l < m; ++l) a[i * m + l] = basis.fns[l](xs[i]);
    }
    return detail::qr_least_squares(a, b, n, m, basis.names);
}

} // namespace ixvol
