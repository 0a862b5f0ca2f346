#pragma once

#include <optional>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>

#include "scorelab/detector.hpp"
#include "scorelab/model.hpp"

namespace scorelab::mitigator {

struct MitigationConfig {
    double learning_rate = 0.05;
    int max_iterations = 50;
    double optimal_loss = 0.0;   // stop once the metric drops to this value
    int n = 1;
    double guidance_scale = 7.5;  // guidance entering the metric formulations
    std::uint64_t seed = 42;
    double sample_guidance = 2.0;   // guidance for the pre/post sample audit
    std::uint64_t sample_seed = 0;  // 0 derives one from seed
    detector::MetricConfig metric;

    /// The metric configuration actually used: the top-level n, guidance and
    /// seed override whatever the nested config carries.
    detector::MetricConfig effective_metric() const {
        detector::MetricConfig cfg = metric;
        cfg.n = n;
        cfg.guidance_scale = guidance_scale;
        cfg.seed = seed;
        return cfg;
    }

    void validate() const {
        if (!(learning_rate > 0.0)) throw std::invalid_argument("MitigationConfig: learning rate must be positive");
        if (max_iterations < 1) throw std::invalid_argument("MitigationConfig: max_iterations must be >= 1");
        if (n < 1) throw std::invalid_argument("MitigationConfig: n must be >= 1");
    }
};

enum class StopReason { converged, max_iterations };

struct MitigationResult {
    int condition_id = -1;
    Eigen::VectorXd initial_embedding;
    Eigen::VectorXd optimized_embedding;
    std::vector<double> loss_trajectory;  // loss at the start of each iteration
    StopReason stop_reason = StopReason::max_iterations;
    bool non_improvement = false;  // set when iterations ran out without lowering the loss
    double pre_metric = 0.0;
    double post_metric = 0.0;
    Eigen::VectorXd pre_sample;
    Eigen::VectorXd post_sample;
    std::optional<double> pre_distance;   // to the planted target, when known
    std::optional<double> post_distance;
    bool degenerate = false;
};

struct EmbeddingGradient {
    Eigen::VectorXd gradient;
    bool degenerate = false;  // a zero guidance vector produced a subgradient 0 term
};

namespace detail {

/// d cos(a,b) / d a for fixed b.
inline Eigen::VectorXd cosine_grad_wrt_first(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    const double na = a.norm();
    const double nb = b.norm();
    const double c = a.dot(b) / (na * nb);
    return b / (na * nb) - (c / (na * na)) * a;
}

}  // namespace detail

/// Exact gradient of the detection metric with respect to the condition
/// embedding, by reverse-mode differentiation through the conditional forward
/// passes at both probe steps. Uses the same noise stream as
/// detector::metric_for_embedding, so central finite differences of that
/// function validate this one.
///
/// Normalization notes: the cosine is invariant under the l2/l1 flat
/// rescalings, so their gradient equals the plain cosine gradient; the
/// spatial-l2 (per-coordinate sign) cosine is piecewise constant and
/// contributes zero gradient.
inline EmbeddingGradient embedding_gradient(const model::ScoreModel& m, const Eigen::VectorXd& e,
                                            const detector::MetricConfig& cfg) {
    cfg.validate(m.schedule.T);
    const int t_high = cfg.resolved_t_high(m.schedule.T);
    const model::ConditionEmbedding emb{e, false};
    const int emb_offset = m.config.data_dim + 2 * m.config.time_frequencies;

    EmbeddingGradient out;
    out.gradient = Eigen::VectorXd::Zero(m.config.embedding_dim);
    Rng rng(cfg.seed);

    for (int draw = 0; draw < cfg.n; ++draw) {
        const Eigen::VectorXd x = rng.gaussian_vector(m.config.data_dim);

        // anisotropic probe: cosine term
        {
            const double sig = m.schedule.sigma(cfg.t_low);
            const Eigen::VectorXd eps_uncond = m.predict_noise(x, cfg.t_low, std::nullopt);
            model::Mlp::BatchCache cache;
            const Eigen::MatrixXd input = m.assemble_input(x, cfg.t_low, e).transpose();
            const Eigen::VectorXd eps_cond = m.net.forward_batch(input, &cache).row(0).transpose();
            m.passes.conditional.fetch_add(1, std::memory_order_relaxed);
            const Eigen::VectorXd s_uncond = -eps_uncond / sig;
            const Eigen::VectorXd s_cond = -eps_cond / sig;
            const bool zero_guidance =
                alignment::guidance_vector(s_cond, s_uncond).norm() < alignment::kDegenerateNorm;
            const auto [first, second] =
                detector::detail::cosine_pair(s_uncond, s_cond, cfg.formulation, cfg.guidance_scale);

            Eigen::VectorXd cot_s_cond = Eigen::VectorXd::Zero(m.config.data_dim);
            const bool defined = !zero_guidance && first.norm() >= alignment::kDegenerateNorm &&
                                 second.norm() >= alignment::kDegenerateNorm;
            if (!defined) {
                out.degenerate = true;
            } else if (cfg.normalization != detector::Normalization::spatial_l2) {
                const Eigen::VectorXd grad_first = detail::cosine_grad_wrt_first(first, second);
                const Eigen::VectorXd grad_second = detail::cosine_grad_wrt_first(second, first);
                switch (cfg.formulation) {
                    case detector::Formulation::uncond_vs_guidance:
                        cot_s_cond = grad_second;  // second = s_cond - s_uncond
                        break;
                    case detector::Formulation::uncond_vs_cond:
                        cot_s_cond = cfg.guidance_scale * grad_second;  // second = s_u + w (s_c - s_u)
                        break;
                    case detector::Formulation::cond_vs_guidance:
                        cot_s_cond = grad_first + grad_second;  // both depend on s_cond
                        break;
                }
            }
            if (cot_s_cond.squaredNorm() > 0.0) {
                const Eigen::MatrixXd cot_eps = (-cfg.gamma1 / (cfg.n * sig)) * cot_s_cond.transpose();
                const Eigen::MatrixXd grad_in = m.net.backward_batch(cache, cot_eps);
                out.gradient += grad_in.row(0).segment(emb_offset, m.config.embedding_dim).transpose();
            }
        }

        // isotropic probe: guidance-norm term
        {
            const double sig = m.schedule.sigma(t_high);
            const Eigen::VectorXd eps_uncond = m.predict_noise(x, t_high, std::nullopt);
            model::Mlp::BatchCache cache;
            const Eigen::MatrixXd input = m.assemble_input(x, t_high, e).transpose();
            const Eigen::VectorXd eps_cond = m.net.forward_batch(input, &cache).row(0).transpose();
            m.passes.conditional.fetch_add(1, std::memory_order_relaxed);
            const Eigen::VectorXd diff = -(eps_cond - eps_uncond) / sig;  // s_delta at t_high
            const double norm = diff.norm();
            if (norm < alignment::kDegenerateNorm) {
                out.degenerate = true;
            } else {
                const Eigen::MatrixXd cot_eps = (-cfg.gamma2 / (cfg.n * sig * norm)) * diff.transpose();
                const Eigen::MatrixXd grad_in = m.net.backward_batch(cache, cot_eps);
                out.gradient += grad_in.row(0).segment(emb_offset, m.config.embedding_dim).transpose();
            }
        }
    }
    return out;
}

/// Gradient descent on the condition embedding with the detection metric as
/// the loss, against a noise draw held fixed across iterations. Each
/// iteration records the current loss, stops early once it reaches
/// optimal_loss, and otherwise steps along the negative gradient. The audit
/// then samples with the original and optimized embeddings under the same
/// sampling seed.
inline MitigationResult mitigate(const model::ScoreModel& m, int condition, const MitigationConfig& cfg,
                                 const std::optional<Eigen::VectorXd>& planted_target = std::nullopt) {
    cfg.validate();
    const detector::MetricConfig metric_cfg = cfg.effective_metric();
    metric_cfg.validate(m.schedule.T);

    MitigationResult res;
    res.condition_id = condition;
    res.initial_embedding = m.embedding(condition).values;
    Eigen::VectorXd e = res.initial_embedding;

    for (int iter = 0; iter < cfg.max_iterations; ++iter) {
        const detector::MetricTerms terms =
            detector::metric_for_embedding(m, model::ConditionEmbedding{e, false}, metric_cfg);
        res.degenerate = res.degenerate || terms.degenerate;
        if (!std::isfinite(terms.value))
            throw std::runtime_error("mitigate: loss became non-finite at iteration " + std::to_string(iter));
        res.loss_trajectory.push_back(terms.value);
        if (terms.value <= cfg.optimal_loss) {
            res.stop_reason = StopReason::converged;
            break;
        }
        const EmbeddingGradient grad = embedding_gradient(m, e, metric_cfg);
        res.degenerate = res.degenerate || grad.degenerate;
        e -= cfg.learning_rate * grad.gradient;
    }

    res.optimized_embedding = e;
    res.pre_metric = res.loss_trajectory.front();
    res.post_metric =
        detector::metric_for_embedding(m, model::ConditionEmbedding{e, false}, metric_cfg).value;
    res.non_improvement = res.stop_reason == StopReason::max_iterations && res.post_metric > res.pre_metric;

    const std::uint64_t sample_seed =
        cfg.sample_seed != 0 ? cfg.sample_seed : splitmix64(cfg.seed ^ 0x73616d706c65ull);
    res.pre_sample = model::sample_with_embedding(m, model::ConditionEmbedding{res.initial_embedding, false},
                                                  cfg.sample_guidance, sample_seed);
    res.post_sample = model::sample_with_embedding(m, model::ConditionEmbedding{e, false},
                                                   cfg.sample_guidance, sample_seed);
    if (planted_target) {
        res.pre_distance = (res.pre_sample - *planted_target).norm();
        res.post_distance = (res.post_sample - *planted_target).norm();
    }
    return res;
}

inline std::string summary_csv(const std::vector<MitigationResult>& results) {
    io::CsvWriter csv({"condition_id", "pre_metric", "post_metric", "pre_distance", "post_distance",
                       "iterations", "stop_reason"});
    for (const auto& r : results) {
        csv.append_row({std::to_string(r.condition_id), io::format_double(r.pre_metric),
                        io::format_double(r.post_metric),
                        r.pre_distance ? io::format_double(*r.pre_distance) : "",
                        r.post_distance ? io::format_double(*r.post_distance) : "",
                        std::to_string(r.loss_trajectory.size()),
                        r.stop_reason == StopReason::converged ? "converged" : "max_iterations"});
    }
    return csv.str();
}

inline nlohmann::json mitigation_to_json(const MitigationResult& r) {
    auto vec = [](const Eigen::VectorXd& v) {
        nlohmann::json a = nlohmann::json::array();
        for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
        return a;
    };
    nlohmann::json j{{"condition_id", r.condition_id},
                     {"initial_embedding", vec(r.initial_embedding)},
                     {"optimized_embedding", vec(r.optimized_embedding)},
                     {"loss_trajectory", r.loss_trajectory},
                     {"stop_reason", r.stop_reason == StopReason::converged ? "converged" : "max_iterations"},
                     {"non_improvement", r.non_improvement},
                     {"pre_metric", r.pre_metric},
                     {"post_metric", r.post_metric},
                     {"pre_sample", vec(r.pre_sample)},
                     {"post_sample", vec(r.post_sample)},
                     {"degenerate", r.degenerate}};
    if (r.pre_distance) j["pre_distance"] = *r.pre_distance;
    if (r.post_distance) j["post_distance"] = *r.post_distance;
    return j;
}

}  // namespace scorelab::mitigator
