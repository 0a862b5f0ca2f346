#pragma once

#include <chrono>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Core>

#include "scorelab/alignment.hpp"
#include "scorelab/io.hpp"
#include "scorelab/model.hpp"
#include "scorelab/rng.hpp"

namespace scorelab::detector {

/// How the two vectors entering the cosine are normalized first.
/// l2_flat and l1_flat rescale the flattened vectors (leaving the cosine
/// value itself unchanged); spatial_l2 normalizes per coordinate block,
/// which for this lab's vector data means blocks of size one.
enum class Normalization { l2_flat, l1_flat, spatial_l2 };

/// Which pair of score fields the anisotropic cosine compares.
///   uncond_vs_guidance: cos(s_null, s_delta)            (the original metric)
///   uncond_vs_cond:     cos(s_null, s_null + w s_delta)  (full guided score)
///   cond_vs_guidance:   cos(s_cond, s_delta)
enum class Formulation { uncond_vs_guidance, uncond_vs_cond, cond_vs_guidance };

inline std::string to_string(Normalization n) {
    switch (n) {
        case Normalization::l2_flat: return "l2";
        case Normalization::l1_flat: return "l1";
        case Normalization::spatial_l2: return "spatial-l2";
    }
    throw std::logic_error("unreachable");
}

inline Normalization normalization_from_string(const std::string& s) {
    if (s == "l2" || s == "l2-flat") return Normalization::l2_flat;
    if (s == "l1" || s == "l1-flat") return Normalization::l1_flat;
    if (s == "spatial-l2" || s == "spatial_l2") return Normalization::spatial_l2;
    throw std::invalid_argument("unknown normalization: " + s);
}

inline std::string to_string(Formulation f) {
    switch (f) {
        case Formulation::uncond_vs_guidance: return "original";
        case Formulation::uncond_vs_cond: return "uncond-vs-cond";
        case Formulation::cond_vs_guidance: return "cond-vs-guidance";
    }
    throw std::logic_error("unreachable");
}

inline Formulation formulation_from_string(const std::string& s) {
    if (s == "original" || s == "uncond-vs-guidance") return Formulation::uncond_vs_guidance;
    if (s == "uncond-vs-cond") return Formulation::uncond_vs_cond;
    if (s == "cond-vs-guidance") return Formulation::cond_vs_guidance;
    throw std::invalid_argument("unknown formulation: " + s);
}

struct MetricConfig {
    double gamma1 = 1.0;
    double gamma2 = 1.0;
    int t_low = 1;   // anisotropic probe step ("t ~ 0" maps to step 1)
    int t_high = 0;  // isotropic probe step; 0 resolves to the schedule's T
    int n = 1;       // independent noise draws averaged per condition
    Normalization normalization = Normalization::l2_flat;
    Formulation formulation = Formulation::uncond_vs_guidance;
    double guidance_scale = 7.5;
    std::uint64_t seed = 42;

    int resolved_t_high(int T) const { return t_high == 0 ? T : t_high; }

    void validate(int T) const {
        const int th = resolved_t_high(T);
        if (!(1 <= t_low && t_low < th && th <= T))
            throw std::invalid_argument("MetricConfig: need 1 <= t_low < t_high <= T");
        if (n < 1) throw std::invalid_argument("MetricConfig: n must be >= 1");
    }
};

struct DetectionRecord {
    int condition_id = -1;
    double metric_value = 0.0;
    double cosine_term = 0.0;
    double norm_term = 0.0;
    std::optional<bool> label;  // memorized ground truth, when known
    double wall_time = 0.0;     // seconds for this evaluation
    bool degenerate = false;    // some draw had an undefined cosine
    std::string error;          // non-empty when a batch entry failed
};

namespace detail {

inline Eigen::VectorXd normalize(const Eigen::VectorXd& v, Normalization mode) {
    switch (mode) {
        case Normalization::l2_flat: {
            const double n = v.norm();
            return n < alignment::kDegenerateNorm ? v : Eigen::VectorXd(v / n);
        }
        case Normalization::l1_flat: {
            const double n = v.lpNorm<1>();
            return n < alignment::kDegenerateNorm ? v : Eigen::VectorXd(v / n);
        }
        case Normalization::spatial_l2: {
            Eigen::VectorXd out = v;
            for (Eigen::Index i = 0; i < out.size(); ++i) {
                const double a = std::abs(out[i]);
                out[i] = a < alignment::kDegenerateNorm ? 0.0 : out[i] / a;
            }
            return out;
        }
    }
    throw std::logic_error("unreachable");
}

/// The cosine pair for a formulation, given the two low-step scores. A
/// near-zero guidance vector makes every formulation non-informative, so the
/// caller treats that case as degenerate before forming the pair.
inline std::pair<Eigen::VectorXd, Eigen::VectorXd> cosine_pair(const Eigen::VectorXd& s_uncond,
                                                               const Eigen::VectorXd& s_cond,
                                                               Formulation f, double w) {
    const Eigen::VectorXd s_delta = alignment::guidance_vector(s_cond, s_uncond);
    switch (f) {
        case Formulation::uncond_vs_guidance: return {s_uncond, s_delta};
        case Formulation::uncond_vs_cond: return {s_uncond, s_uncond + w * s_delta};
        case Formulation::cond_vs_guidance: return {s_cond, s_delta};
    }
    throw std::logic_error("unreachable");
}

}  // namespace detail

struct MetricTerms {
    double cosine_term = 0.0;
    double norm_term = 0.0;
    double value = 0.0;
    bool degenerate = false;
};

/// Core metric evaluation for an explicit embedding, drawing noise from the
/// supplied generator. Per draw, the model is probed with the SAME x_T at
/// t_low and at t_high (no reverse trajectory is run); the cosine is taken at
/// t_low between the formulation's pair after normalization, the guidance
/// norm at t_high, and each term is averaged over the n draws. Costs exactly
/// 2n conditional and 2n unconditional forward passes.
inline MetricTerms metric_for_embedding(const model::ScoreModel& m, const model::ConditionEmbedding& emb,
                                        const MetricConfig& cfg, Rng& rng) {
    cfg.validate(m.schedule.T);
    const int t_high = cfg.resolved_t_high(m.schedule.T);
    MetricTerms acc;
    for (int draw = 0; draw < cfg.n; ++draw) {
        const Eigen::VectorXd x = rng.gaussian_vector(m.config.data_dim);

        const Eigen::VectorXd s_uncond_low = model::score_at(m, x, cfg.t_low, std::nullopt);
        const Eigen::VectorXd s_cond_low = model::score_for_embedding(m, x, cfg.t_low, emb);
        if (alignment::guidance_vector(s_cond_low, s_uncond_low).norm() < alignment::kDegenerateNorm) {
            acc.degenerate = true;  // zero guidance contributes cosine 0 in every formulation
        } else {
            const auto [first, second] =
                detail::cosine_pair(s_uncond_low, s_cond_low, cfg.formulation, cfg.guidance_scale);
            const auto cos = alignment::try_cosine(detail::normalize(first, cfg.normalization),
                                                   detail::normalize(second, cfg.normalization));
            if (cos) {
                acc.cosine_term += *cos;
            } else {
                acc.degenerate = true;
            }
        }

        const Eigen::VectorXd s_uncond_high = model::score_at(m, x, t_high, std::nullopt);
        const Eigen::VectorXd s_cond_high = model::score_for_embedding(m, x, t_high, emb);
        acc.norm_term += alignment::guidance_vector(s_cond_high, s_uncond_high).norm();
    }
    acc.cosine_term /= cfg.n;
    acc.norm_term /= cfg.n;
    acc.value = cfg.gamma1 * acc.cosine_term + cfg.gamma2 * acc.norm_term;
    return acc;
}

inline MetricTerms metric_for_embedding(const model::ScoreModel& m, const model::ConditionEmbedding& emb,
                                        const MetricConfig& cfg) {
    Rng rng(cfg.seed);
    return metric_for_embedding(m, emb, cfg, rng);
}

namespace detail {

inline DetectionRecord record_from_terms(int condition, const MetricTerms& terms, double seconds) {
    DetectionRecord rec;
    rec.condition_id = condition;
    rec.metric_value = terms.value;
    rec.cosine_term = terms.cosine_term;
    rec.norm_term = terms.norm_term;
    rec.degenerate = terms.degenerate;
    rec.wall_time = seconds;
    return rec;
}

}  // namespace detail

/// Denoising-free combined metric M(x_T, c) for one condition. Noise comes
/// from cfg.seed directly.
inline DetectionRecord metric(const model::ScoreModel& m, int condition, const MetricConfig& cfg) {
    const auto start = std::chrono::steady_clock::now();
    Rng rng(cfg.seed);
    const MetricTerms terms = metric_for_embedding(m, m.embedding(condition), cfg, rng);
    const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start;
    return detail::record_from_terms(condition, terms, elapsed.count());
}

/// Identical to metric(); the cosine pair is selected by cfg.formulation,
/// with the original uncond-vs-guidance pairing as the default.
inline DetectionRecord metric_formulation_variant(const model::ScoreModel& m, int condition,
                                                  const MetricConfig& cfg) {
    return metric(m, condition, cfg);
}

/// Logistic fit of the two metric terms. Features are standardized to zero
/// mean and unit variance over the fitting set, a bias term is included, and
/// the standardized coefficients are mapped back to raw-feature scale as
/// (gamma1, gamma2). A small ridge penalty keeps the optimum finite when the
/// fitting set is linearly separable.
inline std::pair<double, double> fit_gammas(
    const std::vector<std::tuple<double, double, bool>>& labeled) {
    std::size_t pos = 0, neg = 0;
    for (const auto& r : labeled) (std::get<2>(r) ? pos : neg)++;
    if (pos < 2 || neg < 2)
        throw std::invalid_argument("fit_gammas: need at least 2 examples per class");

    const auto n = static_cast<Eigen::Index>(labeled.size());
    Eigen::MatrixXd f(n, 2);
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        f(i, 0) = std::get<0>(labeled[static_cast<std::size_t>(i)]);
        f(i, 1) = std::get<1>(labeled[static_cast<std::size_t>(i)]);
        y[i] = std::get<2>(labeled[static_cast<std::size_t>(i)]) ? 1.0 : 0.0;
    }
    const Eigen::RowVector2d mean = f.colwise().mean();
    Eigen::RowVector2d sd;
    for (int c = 0; c < 2; ++c) sd[c] = std::sqrt((f.col(c).array() - mean[c]).square().mean());
    for (int c = 0; c < 2; ++c)
        if (!(sd[c] > 0.0)) throw std::invalid_argument("fit_gammas: feature " + std::to_string(c) + " is constant");
    const Eigen::MatrixXd z = (f.rowwise() - mean).array().rowwise() / sd.array();

    Eigen::Vector2d w = Eigen::Vector2d::Zero();
    double b = 0.0;
    constexpr double lr = 0.5;
    constexpr double ridge = 1e-3;
    for (int iter = 0; iter < 100000; ++iter) {
        const Eigen::VectorXd p = (1.0 / (1.0 + (-(z * w).array() - b).exp())).matrix();
        const Eigen::Vector2d gw = z.transpose() * (p - y) / static_cast<double>(n) + ridge * w;
        const double gb = (p - y).mean();
        w -= lr * gw;
        b -= lr * gb;
        if (std::max(gw.cwiseAbs().maxCoeff(), std::abs(gb)) < 1e-10) break;
    }
    return {w[0] / sd[0], w[1] / sd[1]};
}

/// Metric over a list of conditions. Each condition's noise stream is derived
/// from (cfg.seed, list index) so results do not depend on evaluation order;
/// failures are captured per record instead of aborting the batch.
inline std::vector<DetectionRecord> batch_detect(const model::ScoreModel& m,
                                                 const std::vector<int>& conditions,
                                                 const MetricConfig& cfg) {
    std::vector<DetectionRecord> records;
    records.reserve(conditions.size());
    for (std::size_t i = 0; i < conditions.size(); ++i) {
        const auto start = std::chrono::steady_clock::now();
        DetectionRecord rec;
        try {
            Rng rng = Rng::derive(cfg.seed, i);
            const MetricTerms terms = metric_for_embedding(m, m.embedding(conditions[i]), cfg, rng);
            rec = detail::record_from_terms(conditions[i], terms, 0.0);
        } catch (const std::exception& e) {
            rec.condition_id = conditions[i];
            rec.error = e.what();
            rec.degenerate = true;
        }
        const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start;
        rec.wall_time = elapsed.count();
        records.push_back(std::move(rec));
    }
    return records;
}

inline std::string records_csv(const std::vector<DetectionRecord>& records) {
    io::CsvWriter csv({"condition_id", "metric", "cosine_term", "norm_term", "label", "wall_time"});
    for (const auto& r : records) {
        csv.append_row({std::to_string(r.condition_id), io::format_double(r.metric_value),
                        io::format_double(r.cosine_term), io::format_double(r.norm_term),
                        r.label ? (*r.label ? "1" : "0") : "", io::format_double(r.wall_time)});
    }
    return csv.str();
}

}  // namespace scorelab::detector
