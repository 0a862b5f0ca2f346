#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>
#include <nlohmann/json.hpp>

#include "scorelab/schedule.hpp"

namespace scorelab::density {

/// Single Gaussian with symmetric positive-definite covariance.
struct GaussianDensity {
    Eigen::VectorXd mean;
    Eigen::MatrixXd covariance;

    GaussianDensity() = default;
    GaussianDensity(Eigen::VectorXd mu, Eigen::MatrixXd cov)
        : mean(std::move(mu)), covariance(std::move(cov)) {
        validate();
    }

    Eigen::Index dim() const { return mean.size(); }

    void validate() const {
        if (covariance.rows() != covariance.cols() || covariance.rows() != mean.size())
            throw std::invalid_argument("GaussianDensity: covariance shape does not match mean");
        const double asym = (covariance - covariance.transpose()).cwiseAbs().maxCoeff();
        if (asym > 1e-12)
            throw std::invalid_argument("GaussianDensity: covariance not symmetric (max asymmetry " +
                                        std::to_string(asym) + ")");
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(covariance);
        if (es.eigenvalues().minCoeff() <= 0.0)
            throw std::invalid_argument("GaussianDensity: covariance not positive definite");
    }
};

/// Convex combination of Gaussian components.
struct MixtureDensity {
    std::vector<GaussianDensity> components;
    Eigen::VectorXd weights;

    MixtureDensity() = default;
    MixtureDensity(std::vector<GaussianDensity> comps, Eigen::VectorXd w)
        : components(std::move(comps)), weights(std::move(w)) {
        validate();
    }

    static MixtureDensity single(GaussianDensity g) {
        MixtureDensity m;
        m.components.push_back(std::move(g));
        m.weights = Eigen::VectorXd::Ones(1);
        return m;
    }

    Eigen::Index dim() const { return components.empty() ? 0 : components.front().dim(); }

    void validate() const {
        if (components.empty()) throw std::invalid_argument("MixtureDensity: needs at least one component");
        if (weights.size() != static_cast<Eigen::Index>(components.size()))
            throw std::invalid_argument("MixtureDensity: weight count does not match components");
        if (weights.minCoeff() < 0.0) throw std::invalid_argument("MixtureDensity: negative weight");
        if (std::abs(weights.sum() - 1.0) > 1e-12)
            throw std::invalid_argument("MixtureDensity: weights must sum to 1");
        for (const auto& c : components) {
            c.validate();
            if (c.dim() != dim()) throw std::invalid_argument("MixtureDensity: inconsistent dimensions");
        }
    }
};

/// Mixture pushed through the forward diffusion. The marginal at step t has
/// each component mean scaled by sqrt(alpha_bar_t) and covariance
/// alpha_bar_t * Sigma_i + (1 - alpha_bar_t) * I, exactly.
struct DiffusedDensity {
    MixtureDensity base;
    NoiseSchedule schedule;

    DiffusedDensity() = default;
    DiffusedDensity(MixtureDensity b, NoiseSchedule s) : base(std::move(b)), schedule(std::move(s)) {
        base.validate();
    }

    Eigen::Index dim() const { return base.dim(); }

    GaussianDensity marginal_component(std::size_t i, int t) const {
        const double ab = schedule.alpha_bar(t);
        const auto& c = base.components.at(i);
        GaussianDensity out;
        out.mean = std::sqrt(ab) * c.mean;
        out.covariance = ab * c.covariance +
                         (1.0 - ab) * Eigen::MatrixXd::Identity(c.dim(), c.dim());
        return out;
    }
};

namespace detail {

inline void check_point(const DiffusedDensity& d, const Eigen::VectorXd& x, int t) {
    d.schedule.check_step(t);
    if (x.size() != d.dim())
        throw std::invalid_argument("density: point dimension " + std::to_string(x.size()) +
                                    " does not match density dimension " + std::to_string(d.dim()));
}

struct ComponentEval {
    double log_weighted_density;  // log w_i + log N_i(x)
    Eigen::VectorXd grad;         // component score -S_i^{-1}(x - m_i)
    Eigen::MatrixXd precision;    // S_i^{-1}
};

/// Per-component log densities, scores and precisions of the diffused
/// marginal at step t, via Cholesky factorizations.
inline std::vector<ComponentEval> evaluate_components(const DiffusedDensity& d,
                                                      const Eigen::VectorXd& x, int t) {
    check_point(d, x, t);
    const auto n = d.base.components.size();
    const double log2pi = std::log(2.0 * std::numbers::pi);
    std::vector<ComponentEval> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const GaussianDensity g = d.marginal_component(i, t);
        Eigen::LLT<Eigen::MatrixXd> llt(g.covariance);
        if (llt.info() != Eigen::Success)
            throw std::runtime_error("density: diffused covariance not positive definite");
        const Eigen::VectorXd diff = x - g.mean;
        const Eigen::VectorXd solved = llt.solve(diff);
        double logdet = 0.0;
        for (Eigen::Index k = 0; k < g.dim(); ++k) logdet += 2.0 * std::log(llt.matrixL()(k, k));
        ComponentEval ev;
        ev.log_weighted_density = std::log(d.base.weights[static_cast<Eigen::Index>(i)]) -
                                  0.5 * (g.dim() * log2pi + logdet + diff.dot(solved));
        ev.grad = -solved;
        ev.precision = llt.solve(Eigen::MatrixXd::Identity(g.dim(), g.dim()));
        out.push_back(std::move(ev));
    }
    return out;
}

inline double log_sum_exp(const std::vector<ComponentEval>& evs) {
    double m = -std::numeric_limits<double>::infinity();
    for (const auto& e : evs) m = std::max(m, e.log_weighted_density);
    double s = 0.0;
    for (const auto& e : evs) s += std::exp(e.log_weighted_density - m);
    return m + std::log(s);
}

}  // namespace detail

/// log p_t(x) of the analytic diffused marginal.
inline double log_prob(const DiffusedDensity& d, const Eigen::VectorXd& x, int t) {
    return detail::log_sum_exp(detail::evaluate_components(d, x, t));
}

/// Score of the diffused marginal: the responsibility-weighted sum of
/// component scores.
inline Eigen::VectorXd score(const DiffusedDensity& d, const Eigen::VectorXd& x, int t) {
    const auto evs = detail::evaluate_components(d, x, t);
    const double lse = detail::log_sum_exp(evs);
    Eigen::VectorXd s = Eigen::VectorXd::Zero(d.dim());
    for (const auto& e : evs) s += std::exp(e.log_weighted_density - lse) * e.grad;
    return s;
}

/// Euclidean norm of the score. For a single Gaussian marginal this equals
/// the closed form sqrt((x - m)^T S^{-2} (x - m)).
inline double score_norm(const DiffusedDensity& d, const Eigen::VectorXd& x, int t) {
    return score(d, x, t).norm();
}

/// Hessian of log p_t. For a mixture,
///   H = sum_i r_i (g_i g_i^T - S_i^{-1}) - s s^T
/// with responsibilities r_i, component scores g_i and mixture score s.
inline Eigen::MatrixXd hessian(const DiffusedDensity& d, const Eigen::VectorXd& x, int t) {
    const auto evs = detail::evaluate_components(d, x, t);
    const double lse = detail::log_sum_exp(evs);
    const auto n = d.dim();
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(n, n);
    Eigen::VectorXd s = Eigen::VectorXd::Zero(n);
    for (const auto& e : evs) {
        const double r = std::exp(e.log_weighted_density - lse);
        h += r * (e.grad * e.grad.transpose() - e.precision);
        s += r * e.grad;
    }
    h -= s * s.transpose();
    return h;
}

/// Population variance (divide by k) of the Hessian eigenvalues. Zero for
/// any isotropic marginal; grows with directional curvature spread.
inline double eigenvalue_variance(const DiffusedDensity& d, const Eigen::VectorXd& x, int t) {
    Eigen::MatrixXd h = hessian(d, x, t);
    h = 0.5 * (h + h.transpose());  // absorb round-off before the symmetric solve
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(h);
    const Eigen::VectorXd ev = es.eigenvalues();
    const double mean = ev.mean();
    return (ev.array() - mean).square().mean();
}

// --- JSON wire format -------------------------------------------------------
// {components:[{mean:[...], cov:[[...]]}], weights:[...],
//  schedule:{T, beta_min, beta_max}}

inline nlohmann::json to_json(const DiffusedDensity& d) {
    nlohmann::json comps = nlohmann::json::array();
    for (const auto& c : d.base.components) {
        nlohmann::json mean = nlohmann::json::array();
        for (Eigen::Index i = 0; i < c.mean.size(); ++i) mean.push_back(c.mean[i]);
        nlohmann::json cov = nlohmann::json::array();
        for (Eigen::Index r = 0; r < c.covariance.rows(); ++r) {
            nlohmann::json row = nlohmann::json::array();
            for (Eigen::Index k = 0; k < c.covariance.cols(); ++k) row.push_back(c.covariance(r, k));
            cov.push_back(row);
        }
        comps.push_back({{"mean", mean}, {"cov", cov}});
    }
    nlohmann::json weights = nlohmann::json::array();
    for (Eigen::Index i = 0; i < d.base.weights.size(); ++i) weights.push_back(d.base.weights[i]);
    return {{"components", comps},
            {"weights", weights},
            {"schedule",
             {{"T", d.schedule.T}, {"beta_min", d.schedule.beta_min}, {"beta_max", d.schedule.beta_max}}}};
}

inline DiffusedDensity from_json(const nlohmann::json& j) {
    MixtureDensity mix;
    for (const auto& cj : j.at("components")) {
        GaussianDensity g;
        const auto& mean = cj.at("mean");
        g.mean.resize(static_cast<Eigen::Index>(mean.size()));
        for (std::size_t i = 0; i < mean.size(); ++i) g.mean[static_cast<Eigen::Index>(i)] = mean[i].get<double>();
        const auto& cov = cj.at("cov");
        const auto rows = static_cast<Eigen::Index>(cov.size());
        g.covariance.resize(rows, rows);
        for (Eigen::Index r = 0; r < rows; ++r) {
            const auto& row = cov[static_cast<std::size_t>(r)];
            if (static_cast<Eigen::Index>(row.size()) != rows)
                throw std::invalid_argument("density json: cov must be square");
            for (Eigen::Index c = 0; c < rows; ++c) g.covariance(r, c) = row[static_cast<std::size_t>(c)].get<double>();
        }
        mix.components.push_back(std::move(g));
    }
    const auto& wj = j.at("weights");
    mix.weights.resize(static_cast<Eigen::Index>(wj.size()));
    for (std::size_t i = 0; i < wj.size(); ++i) mix.weights[static_cast<Eigen::Index>(i)] = wj[i].get<double>();
    mix.validate();
    const auto& sj = j.at("schedule");
    NoiseSchedule sched = NoiseSchedule::linear(sj.at("T").get<int>(), sj.at("beta_min").get<double>(),
                                                sj.at("beta_max").get<double>());
    return DiffusedDensity(std::move(mix), std::move(sched));
}

}  // namespace scorelab::density
