#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>

#include "scorelab/io.hpp"

namespace scorelab::evaluator {

/// A labelled detection score. label true = memorized (positive class).
struct Score {
    double value;
    bool label;
};

/// Receiver operating characteristic built by sweeping thresholds over the
/// unique score values in descending order, so tied scores flip together.
/// The curve starts at (0,0) and ends at (1,1); auc is its trapezoidal
/// integral.
struct RocCurve {
    std::vector<double> thresholds;  // descending; front is +inf
    std::vector<double> fpr;
    std::vector<double> tpr;
    double auc = 0.0;
};

inline RocCurve roc(const std::vector<Score>& scores) {
    std::size_t pos = 0, neg = 0;
    for (const auto& s : scores) (s.label ? pos : neg)++;
    if (pos == 0 || neg == 0)
        throw std::invalid_argument("roc: both classes must be present");

    std::vector<Score> sorted = scores;
    std::sort(sorted.begin(), sorted.end(), [](const Score& a, const Score& b) { return a.value > b.value; });

    RocCurve curve;
    curve.thresholds.push_back(std::numeric_limits<double>::infinity());
    curve.fpr.push_back(0.0);
    curve.tpr.push_back(0.0);

    std::size_t tp = 0, fp = 0, i = 0;
    while (i < sorted.size()) {
        const double v = sorted[i].value;
        while (i < sorted.size() && sorted[i].value == v) {
            (sorted[i].label ? tp : fp)++;
            ++i;
        }
        curve.thresholds.push_back(v);
        curve.fpr.push_back(static_cast<double>(fp) / static_cast<double>(neg));
        curve.tpr.push_back(static_cast<double>(tp) / static_cast<double>(pos));
    }

    double auc = 0.0;
    for (std::size_t k = 1; k < curve.fpr.size(); ++k)
        auc += 0.5 * (curve.fpr[k] - curve.fpr[k - 1]) * (curve.tpr[k] + curve.tpr[k - 1]);
    curve.auc = auc;
    return curve;
}

/// Maximum tpr among curve points with fpr <= fpr_cap. Step convention, no
/// interpolation, so the result is conservative.
inline double tpr_at_fpr(const RocCurve& curve, double fpr_cap) {
    if (fpr_cap < 0.0 || fpr_cap > 1.0) throw std::invalid_argument("tpr_at_fpr: cap must be in [0,1]");
    double best = 0.0;
    for (std::size_t k = 0; k < curve.fpr.size(); ++k)
        if (curve.fpr[k] <= fpr_cap) best = std::max(best, curve.tpr[k]);
    return best;
}

/// Gaussian kernel density estimate on a uniform 512-point grid spanning the
/// (optionally clipped) data plus four bandwidths on each side. Bandwidth
/// defaults to Scott's rule, n^(-1/5) times the sample standard deviation.
struct KdeEstimate {
    Eigen::VectorXd grid;
    Eigen::VectorXd density;
    double bandwidth = 0.0;
    std::optional<double> clip_ceiling;
    bool degenerate = false;
    std::vector<double> samples;  // clipped samples kept for re-evaluation

    /// Kernel-sum density at an arbitrary point.
    double evaluate_at(double x) const {
        if (degenerate) throw std::runtime_error("kde: degenerate estimate");
        const double inv_h = 1.0 / bandwidth;
        const double norm = inv_h / (std::sqrt(2.0 * std::numbers::pi) * static_cast<double>(samples.size()));
        double acc = 0.0;
        for (const double s : samples) {
            const double z = (x - s) * inv_h;
            acc += std::exp(-0.5 * z * z);
        }
        return acc * norm;
    }
};

inline constexpr int kKdeGridSize = 512;

inline KdeEstimate kde(std::vector<double> values, std::optional<double> bandwidth = std::nullopt,
                       std::optional<double> clip_ceiling = std::nullopt) {
    if (values.size() < 2) throw std::invalid_argument("kde: need at least 2 values");
    if (clip_ceiling)
        for (double& v : values) v = std::min(v, *clip_ceiling);

    KdeEstimate est;
    est.clip_ceiling = clip_ceiling;
    est.samples = values;

    const auto n = static_cast<double>(values.size());
    double mean = 0.0;
    for (const double v : values) mean += v;
    mean /= n;
    double ss = 0.0;
    for (const double v : values) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / (n - 1.0));

    if (bandwidth) {
        est.bandwidth = *bandwidth;
        if (!(est.bandwidth > 0.0)) throw std::invalid_argument("kde: bandwidth must be positive");
    } else {
        est.bandwidth = sd * std::pow(n, -0.2);
    }
    if (sd == 0.0 || est.bandwidth == 0.0) {
        est.degenerate = true;
        est.bandwidth = 0.0;
        return est;
    }

    const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
    const double lo = *lo_it - 4.0 * est.bandwidth;
    const double hi = *hi_it + 4.0 * est.bandwidth;
    est.grid.resize(kKdeGridSize);
    est.density.resize(kKdeGridSize);
    for (int i = 0; i < kKdeGridSize; ++i) {
        est.grid[i] = lo + (hi - lo) * static_cast<double>(i) / (kKdeGridSize - 1);
        est.density[i] = est.evaluate_at(est.grid[i]);
    }
    return est;
}

/// KL divergence between two KDEs by trapezoidal integration of p log(p/q)
/// over a shared grid, with both densities floored at 1e-12. Estimates on
/// different grids are re-evaluated onto the union span.
inline double kl_divergence(const KdeEstimate& p, const KdeEstimate& q) {
    if (p.degenerate || q.degenerate)
        throw std::invalid_argument("kl_divergence: degenerate estimate");

    Eigen::VectorXd grid, pd, qd;
    const bool same_grid = p.grid.size() == q.grid.size() && p.grid == q.grid;
    if (same_grid) {
        grid = p.grid;
        pd = p.density;
        qd = q.density;
    } else {
        if (p.samples.empty() || q.samples.empty())
            throw std::invalid_argument("kl_divergence: incompatible grids and no samples to re-evaluate");
        const double lo = std::min(p.grid[0], q.grid[0]);
        const double hi = std::max(p.grid[p.grid.size() - 1], q.grid[q.grid.size() - 1]);
        grid.resize(kKdeGridSize);
        pd.resize(kKdeGridSize);
        qd.resize(kKdeGridSize);
        for (int i = 0; i < kKdeGridSize; ++i) {
            grid[i] = lo + (hi - lo) * static_cast<double>(i) / (kKdeGridSize - 1);
            pd[i] = p.evaluate_at(grid[i]);
            qd[i] = q.evaluate_at(grid[i]);
        }
    }

    constexpr double floor = 1e-12;
    double kl = 0.0;
    for (Eigen::Index i = 1; i < grid.size(); ++i) {
        const double pa = std::max(pd[i - 1], floor), pb = std::max(pd[i], floor);
        const double qa = std::max(qd[i - 1], floor), qb = std::max(qd[i], floor);
        const double fa = pa * std::log(pa / qa);
        const double fb = pb * std::log(pb / qb);
        kl += 0.5 * (fa + fb) * (grid[i] - grid[i - 1]);
    }
    // The discretized integral can dip a hair below zero where p ~ q even
    // though the true divergence cannot; clamp that noise.
    if (kl < 0.0 && kl > -1e-4) kl = 0.0;
    return kl;
}

inline std::string roc_csv(const RocCurve& curve) {
    io::CsvWriter csv({"threshold", "fpr", "tpr"});
    for (std::size_t i = 0; i < curve.thresholds.size(); ++i)
        csv.append_row({io::format_double(curve.thresholds[i]), io::format_double(curve.fpr[i]),
                        io::format_double(curve.tpr[i])});
    return csv.str();
}

inline std::string kde_csv(const KdeEstimate& est) {
    io::CsvWriter csv({"grid", "density"});
    for (Eigen::Index i = 0; i < est.grid.size(); ++i)
        csv.append_row({io::format_double(est.grid[i]), io::format_double(est.density[i])});
    return csv.str();
}

}  // namespace scorelab::evaluator
