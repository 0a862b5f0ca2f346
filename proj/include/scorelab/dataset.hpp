#pragma once

#include <map>
#include <numbers>
#include <stdexcept>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/QR>
#include <nlohmann/json.hpp>

#include "scorelab/density.hpp"
#include "scorelab/rng.hpp"

namespace scorelab::model {

/// Construction parameters for the synthetic lab dataset. Conditions are
/// opaque integer ids 0..C-1; the first planted_count ids are memorized.
///
/// The data pool is a ring of anisotropic Gaussian modes. A planted condition
/// holds one fixed draw repeated duplication_factor times (the canonical
/// duplication driver of memorization). A non-planted condition samples from
/// an equal-weight sub-mixture of modes_per_condition pool modes, so ordinary
/// prompts still carry genuine guidance while their conditional mean stays
/// well inside the ring.
struct DatasetConfig {
    int dim = 2;
    int planted_count = 8;
    int non_planted_count = 32;
    int duplication_factor = 64;
    int samples_per_condition = 64;
    int pool_modes = 8;
    int modes_per_condition = 3;
    double mode_radius = 1.0;
    double cov_major = 0.12;   // axis standard deviations of each mode
    double cov_minor = 0.045;
    std::uint64_t seed = 42;

    void validate() const {
        if (dim < 1) throw std::invalid_argument("dataset: dim must be >= 1");
        if (planted_count < 0 || non_planted_count < 0 || planted_count + non_planted_count < 1)
            throw std::invalid_argument("dataset: need at least one condition");
        if (duplication_factor < 1) throw std::invalid_argument("dataset: duplication_factor must be >= 1");
        if (samples_per_condition < 16)
            throw std::invalid_argument("dataset: non-planted conditions need >= 16 distinct draws");
        if (pool_modes < 1 || modes_per_condition < 1 || modes_per_condition > pool_modes)
            throw std::invalid_argument("dataset: invalid mode pool");
        if (!(cov_major > 0.0) || !(cov_minor > 0.0) || !(mode_radius > 0.0))
            throw std::invalid_argument("dataset: scales must be positive");
    }
};

struct SyntheticDataset {
    Eigen::MatrixXd samples;           // one row per training example
    std::vector<int> condition_ids;    // parallel to samples rows
    std::vector<int> planted;          // planted condition ids
    std::map<int, Eigen::VectorXd> planted_targets;
    int condition_count = 0;
    int duplication_factor = 0;
    std::uint64_t seed = 0;
    density::MixtureDensity pool;      // the shared mode pool, for diagnostics

    Eigen::Index dim() const { return samples.cols(); }
    Eigen::Index size() const { return samples.rows(); }

    bool is_planted(int condition_id) const {
        return planted_targets.count(condition_id) != 0;
    }

    /// Scalar data scale: sqrt of the mean per-coordinate variance.
    double standard_deviation() const {
        const Eigen::RowVectorXd mean = samples.colwise().mean();
        const double var = (samples.rowwise() - mean).array().square().mean();
        return std::sqrt(var);
    }
};

namespace detail {

inline Eigen::MatrixXd ring_rotation(double angle) {
    Eigen::MatrixXd r(2, 2);
    r << std::cos(angle), -std::sin(angle), std::sin(angle), std::cos(angle);
    return r;
}

inline Eigen::MatrixXd random_orthogonal(int dim, Rng& rng) {
    Eigen::MatrixXd a(dim, dim);
    for (int r = 0; r < dim; ++r)
        for (int c = 0; c < dim; ++c) a(r, c) = rng.gaussian();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
    Eigen::MatrixXd q = qr.householderQ();
    const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (int c = 0; c < dim; ++c)
        if (r(c, c) < 0.0) q.col(c) = -q.col(c);
    return q;
}

}  // namespace detail

/// The shared pool of anisotropic modes. In 2-D the modes sit at equal angles
/// on the ring with covariance axes tangential to it; in higher dimensions
/// directions and covariance frames are drawn from the seeded generator.
inline density::MixtureDensity build_mode_pool(const DatasetConfig& cfg, Rng& rng) {
    std::vector<density::GaussianDensity> comps;
    Eigen::VectorXd eig_struct = Eigen::VectorXd::Zero(cfg.dim);
    for (int i = 0; i < cfg.dim; ++i) {
        const double frac = cfg.dim == 1 ? 0.0 : static_cast<double>(i) / (cfg.dim - 1);
        eig_struct[i] = std::pow(cfg.cov_major, 2.0 * (1.0 - frac)) * std::pow(cfg.cov_minor, 2.0 * frac);
    }
    for (int k = 0; k < cfg.pool_modes; ++k) {
        Eigen::VectorXd mean;
        Eigen::MatrixXd frame;
        if (cfg.dim == 2) {
            const double angle = 2.0 * std::numbers::pi * k / cfg.pool_modes;
            mean = cfg.mode_radius * Eigen::Vector2d(std::cos(angle), std::sin(angle));
            frame = detail::ring_rotation(angle + std::numbers::pi / 2.0);
        } else {
            Eigen::VectorXd u(cfg.dim);
            for (int i = 0; i < cfg.dim; ++i) u[i] = rng.gaussian();
            mean = cfg.mode_radius * u.normalized();
            frame = detail::random_orthogonal(cfg.dim, rng);
        }
        Eigen::MatrixXd cov = frame * eig_struct.asDiagonal() * frame.transpose();
        cov = 0.5 * (cov + cov.transpose());
        comps.emplace_back(std::move(mean), std::move(cov));
    }
    return density::MixtureDensity(std::move(comps),
                                   Eigen::VectorXd::Constant(cfg.pool_modes, 1.0 / cfg.pool_modes));
}

inline SyntheticDataset build_dataset(const DatasetConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    SyntheticDataset ds;
    ds.seed = cfg.seed;
    ds.duplication_factor = cfg.duplication_factor;
    ds.condition_count = cfg.planted_count + cfg.non_planted_count;
    ds.pool = build_mode_pool(cfg, rng);

    std::vector<Eigen::MatrixXd> chols;
    for (const auto& comp : ds.pool.components) {
        const Eigen::LLT<Eigen::MatrixXd> llt(comp.covariance);
        chols.push_back(Eigen::MatrixXd(llt.matrixL()));
    }

    auto draw_from_mode = [&](int k) {
        return ds.pool.components[k].mean + chols[k] * rng.gaussian_vector(cfg.dim);
    };

    const Eigen::Index total = static_cast<Eigen::Index>(cfg.planted_count) * cfg.duplication_factor +
                               static_cast<Eigen::Index>(cfg.non_planted_count) * cfg.samples_per_condition;
    ds.samples.resize(total, cfg.dim);
    ds.condition_ids.reserve(total);

    Eigen::Index row = 0;
    for (int c = 0; c < cfg.planted_count; ++c) {
        const Eigen::VectorXd x0 = draw_from_mode(c % cfg.pool_modes);
        ds.planted.push_back(c);
        ds.planted_targets[c] = x0;
        for (int r = 0; r < cfg.duplication_factor; ++r) {
            ds.samples.row(row++) = x0.transpose();
            ds.condition_ids.push_back(c);
        }
    }
    for (int i = 0; i < cfg.non_planted_count; ++i) {
        const int c = cfg.planted_count + i;
        std::vector<int> owned = rng.permutation(cfg.pool_modes);
        owned.resize(cfg.modes_per_condition);
        for (int r = 0; r < cfg.samples_per_condition; ++r) {
            const int k = owned[static_cast<std::size_t>(rng.uniform_int(0, cfg.modes_per_condition - 1))];
            ds.samples.row(row++) = draw_from_mode(k).transpose();
            ds.condition_ids.push_back(c);
        }
    }
    return ds;
}

// --- JSON manifest -----------------------------------------------------------

inline nlohmann::json dataset_to_json(const SyntheticDataset& ds) {
    nlohmann::json samples = nlohmann::json::array();
    for (Eigen::Index r = 0; r < ds.size(); ++r) {
        nlohmann::json x = nlohmann::json::array();
        for (Eigen::Index c = 0; c < ds.dim(); ++c) x.push_back(ds.samples(r, c));
        samples.push_back({{"c", ds.condition_ids[static_cast<std::size_t>(r)]}, {"x", x}});
    }
    nlohmann::json targets = nlohmann::json::object();
    for (const auto& [id, x0] : ds.planted_targets) {
        nlohmann::json x = nlohmann::json::array();
        for (Eigen::Index i = 0; i < x0.size(); ++i) x.push_back(x0[i]);
        targets[std::to_string(id)] = x;
    }
    nlohmann::json pool = nlohmann::json::array();
    for (std::size_t i = 0; i < ds.pool.components.size(); ++i) {
        const auto& comp = ds.pool.components[i];
        nlohmann::json mean = nlohmann::json::array();
        for (Eigen::Index k = 0; k < comp.mean.size(); ++k) mean.push_back(comp.mean[k]);
        nlohmann::json cov = nlohmann::json::array();
        for (Eigen::Index r = 0; r < comp.covariance.rows(); ++r) {
            nlohmann::json rowj = nlohmann::json::array();
            for (Eigen::Index k = 0; k < comp.covariance.cols(); ++k) rowj.push_back(comp.covariance(r, k));
            cov.push_back(rowj);
        }
        pool.push_back({{"mean", mean}, {"cov", cov}, {"weight", ds.pool.weights[static_cast<Eigen::Index>(i)]}});
    }
    return {{"dim", ds.dim()},
            {"seed", ds.seed},
            {"duplication_factor", ds.duplication_factor},
            {"condition_count", ds.condition_count},
            {"planted", ds.planted},
            {"planted_targets", targets},
            {"pool", pool},
            {"samples", samples}};
}

inline SyntheticDataset dataset_from_json(const nlohmann::json& j) {
    SyntheticDataset ds;
    ds.seed = j.at("seed").get<std::uint64_t>();
    ds.duplication_factor = j.at("duplication_factor").get<int>();
    ds.condition_count = j.at("condition_count").get<int>();
    ds.planted = j.at("planted").get<std::vector<int>>();
    const int dim = j.at("dim").get<int>();
    const auto& samples = j.at("samples");
    ds.samples.resize(static_cast<Eigen::Index>(samples.size()), dim);
    Eigen::Index row = 0;
    for (const auto& s : samples) {
        ds.condition_ids.push_back(s.at("c").get<int>());
        const auto& x = s.at("x");
        if (static_cast<int>(x.size()) != dim) throw std::invalid_argument("dataset json: bad sample dimension");
        for (int c = 0; c < dim; ++c) ds.samples(row, c) = x[static_cast<std::size_t>(c)].get<double>();
        ++row;
    }
    for (const auto& [key, val] : j.at("planted_targets").items()) {
        Eigen::VectorXd x0(dim);
        for (int i = 0; i < dim; ++i) x0[i] = val[static_cast<std::size_t>(i)].get<double>();
        ds.planted_targets[std::stoi(key)] = x0;
    }
    if (j.contains("pool")) {
        std::vector<density::GaussianDensity> comps;
        Eigen::VectorXd weights(static_cast<Eigen::Index>(j.at("pool").size()));
        Eigen::Index wi = 0;
        for (const auto& pj : j.at("pool")) {
            density::GaussianDensity g;
            const auto& mean = pj.at("mean");
            g.mean.resize(dim);
            for (int i = 0; i < dim; ++i) g.mean[i] = mean[static_cast<std::size_t>(i)].get<double>();
            g.covariance.resize(dim, dim);
            const auto& cov = pj.at("cov");
            for (int r = 0; r < dim; ++r)
                for (int c = 0; c < dim; ++c) g.covariance(r, c) = cov[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)].get<double>();
            weights[wi++] = pj.at("weight").get<double>();
            comps.push_back(std::move(g));
        }
        ds.pool = density::MixtureDensity(std::move(comps), std::move(weights));
    }
    return ds;
}

}  // namespace scorelab::model
