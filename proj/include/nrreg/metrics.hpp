#pragma once

#include "nrreg/error.hpp"
#include "nrreg/geometry.hpp"
#include "nrreg/operators.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

namespace nrreg {

struct Histogram {
    double bin_width = 0.0;
    std::vector<double> bin_left;
    std::vector<int> counts;
};

struct ErrorReport {
    std::vector<double> per_vertex;  ///< ||X_i v_i - g_i||^2
    double mean = 0.0;
    double median = 0.0;
    double max = 0.0;
    /// Mean of the unsquared distances, the scale-comparable summary.
    double mean_distance = 0.0;
    Histogram histogram;
    Shape colored_mesh;
};

/// Linear-interpolated quantile, q in [0, 1].
inline double quantile(std::vector<double> v, double q) {
    if (v.empty()) throw Error("quantile of an empty sample");
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline double median(std::vector<double> v) { return quantile(std::move(v), 0.5); }

/// Freedman-Diaconis binning (width 2 IQR n^(-1/3)); a single bin when the IQR vanishes.
inline Histogram freedman_diaconis(const std::vector<double>& v, int max_bins = 1000) {
    Histogram h;
    if (v.empty()) return h;
    const auto [lo_it, hi_it] = std::minmax_element(v.begin(), v.end());
    const double lo = *lo_it, hi = *hi_it;
    const double iqr = quantile(v, 0.75) - quantile(v, 0.25);
    double width = 2.0 * iqr / std::cbrt(static_cast<double>(v.size()));
    int bins = 1;
    if (width > 0 && hi > lo) bins = static_cast<int>(std::ceil((hi - lo) / width));
    bins = std::clamp(bins, 1, max_bins);
    width = hi > lo ? (hi - lo) / bins : 1.0;
    h.bin_width = width;
    h.counts.assign(bins, 0);
    for (int b = 0; b < bins; ++b) h.bin_left.push_back(lo + b * width);
    for (double x : v) {
        int b = hi > lo ? static_cast<int>((x - lo) / width) : 0;
        ++h.counts[std::clamp(b, 0, bins - 1)];
    }
    return h;
}

/// Blue (0) to red (at `clamp_at` and beyond) linear ramp.
inline Rgb error_color(double e, double clamp_at) {
    const double t = clamp_at > 0 ? std::clamp(e / clamp_at, 0.0, 1.0) : 0.0;
    return {static_cast<std::uint8_t>(std::lround(255.0 * t)), 0,
            static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - t)))};
}

inline ErrorReport fitting_error(const TransformStack& x, const Shape& tmpl, const Eigen::Matrix3Xd& ground_truth) {
    const int n = tmpl.size();
    if (ground_truth.cols() != n || x.size() != n)
        throw Error("fitting_error: ground truth / transform count does not match the template");
    ErrorReport rep;
    const Eigen::Matrix3Xd pos = apply_transforms(x, tmpl);
    rep.per_vertex.resize(n);
    double dist_sum = 0.0;
    for (int i = 0; i < n; ++i) {
        rep.per_vertex[i] = (pos.col(i) - ground_truth.col(i)).squaredNorm();
        dist_sum += std::sqrt(rep.per_vertex[i]);
    }
    if (n > 0) {
        double sum = 0.0;
        for (double e : rep.per_vertex) sum += e;
        rep.mean = sum / n;
        rep.mean_distance = dist_sum / n;
        rep.median = median(rep.per_vertex);
        rep.max = *std::max_element(rep.per_vertex.begin(), rep.per_vertex.end());
        rep.histogram = freedman_diaconis(rep.per_vertex);
    }
    rep.colored_mesh = tmpl;
    rep.colored_mesh.vertices = pos;
    const double p95 = n ? quantile(rep.per_vertex, 0.95) : 0.0;
    rep.colored_mesh.colors.resize(n);
    for (int i = 0; i < n; ++i) rep.colored_mesh.colors[i] = error_color(rep.per_vertex[i], p95);
    return rep;
}

struct DistributionFit {
    double laplace_location = 0.0;
    double laplace_scale = 0.0;
    double gauss_mean = 0.0;
    double gauss_std = 0.0;
    double loglik_laplace = 0.0;
    double loglik_gauss = 0.0;
    int samples = 0;
};

/// Maximum-likelihood Laplace and Gaussian fits with their sample log-likelihoods.
inline DistributionFit fit_residual_distributions(const std::vector<double>& x) {
    const int n = static_cast<int>(x.size());
    if (n < 10) throw Error("distribution fit needs at least 10 samples, got " + std::to_string(n));
    DistributionFit f;
    f.samples = n;
    f.laplace_location = median(x);
    double abs_dev = 0.0, mean = 0.0;
    for (double v : x) {
        abs_dev += std::abs(v - f.laplace_location);
        mean += v;
    }
    mean /= n;
    f.laplace_scale = abs_dev / n;
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= n;
    f.gauss_mean = mean;
    f.gauss_std = std::sqrt(var);
    if (!(f.laplace_scale > 0) || !(f.gauss_std > 0)) throw Error("distribution fit: sample has zero spread");
    // at the MLE, sum |x - m| / b = n and sum (x - mean)^2 / var = n
    f.loglik_laplace = -n * std::log(2.0 * f.laplace_scale) - abs_dev / f.laplace_scale;
    f.loglik_gauss = -0.5 * n * std::log(2.0 * std::numbers::pi * var) - 0.5 * n;
    return f;
}

enum class ResidualMode { per_axis_l1, euclidean };

/// Unweighted V X - U_f over matched vertices: signed per-axis values or distances.
inline std::vector<double> residuals_for_analysis(const TransformStack& x, const SystemMatrices& sys,
                                                  ResidualMode mode) {
    const MatrixX3d d = MatrixX3d(sys.V * x.stacked()) - sys.target;
    std::vector<double> out;
    for (int i = 0; i < sys.vertex_count(); ++i) {
        if (!sys.matched[i]) continue;
        if (mode == ResidualMode::per_axis_l1) {
            for (int c = 0; c < 3; ++c) out.push_back(d(i, c));
        } else {
            out.push_back(d.row(i).norm());
        }
    }
    if (out.empty()) throw Error("residuals_for_analysis: no matched vertices");
    return out;
}

}  // namespace nrreg
