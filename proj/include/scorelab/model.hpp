#pragma once

#include <atomic>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "scorelab/dataset.hpp"
#include "scorelab/io.hpp"
#include "scorelab/net.hpp"
#include "scorelab/rng.hpp"
#include "scorelab/schedule.hpp"
#include "scorelab/version.hpp"

namespace scorelab::model {

/// One entry of the condition vocabulary. Exactly one embedding per model has
/// is_null set; it represents the unconditional token.
struct ConditionEmbedding {
    Eigen::VectorXd values;
    bool is_null = false;
};

struct TrainConfig {
    int epochs = 4000;
    int batch_size = 128;
    double learning_rate = 2e-2;
    double p_drop = 0.1;  // probability of swapping in the null embedding
    double momentum = 0.9;
    std::uint64_t seed = 42;

    void validate() const {
        if (epochs < 1 || batch_size < 1) throw std::invalid_argument("TrainConfig: epochs/batch_size must be >= 1");
        if (!(learning_rate > 0.0)) throw std::invalid_argument("TrainConfig: learning rate must be positive");
        if (p_drop < 0.0 || p_drop >= 1.0) throw std::invalid_argument("TrainConfig: p_drop must be in [0,1)");
        if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("TrainConfig: momentum must be in [0,1)");
    }
};

struct ModelConfig {
    int data_dim = 2;
    int embedding_dim = 8;
    int time_frequencies = 8;
    std::vector<int> hidden = {128, 128, 128};

    int input_dim() const { return data_dim + 2 * time_frequencies + embedding_dim; }

    std::vector<int> layer_sizes() const {
        std::vector<int> sizes{input_dim()};
        sizes.insert(sizes.end(), hidden.begin(), hidden.end());
        sizes.push_back(data_dim);
        return sizes;
    }
};

/// Forward-pass accounting, split by conditioning. Atomic so a read-only
/// model can be shared across threads; copying a model snapshots the counts.
struct PassCounters {
    std::atomic<std::uint64_t> conditional{0};
    std::atomic<std::uint64_t> unconditional{0};

    PassCounters() = default;
    PassCounters(const PassCounters& o)
        : conditional(o.conditional.load()), unconditional(o.unconditional.load()) {}
    PassCounters& operator=(const PassCounters& o) {
        conditional.store(o.conditional.load());
        unconditional.store(o.unconditional.load());
        return *this;
    }
};

/// Conditional noise-prediction network. The forward contract is
/// (x_t, sinusoidal features of t, condition embedding) -> predicted noise;
/// the score is recovered as s_theta(x,t,c) = -eps_hat(x,t,c) / sigma_t.
struct ScoreModel {
    ModelConfig config;
    density::NoiseSchedule schedule;
    Mlp net;
    Eigen::MatrixXd embeddings;      // one row per condition id
    Eigen::VectorXd null_embedding;  // the unconditional token
    std::uint64_t seed = 0;
    mutable PassCounters passes;

    int condition_count() const { return static_cast<int>(embeddings.rows()); }

    ConditionEmbedding embedding(std::optional<int> condition) const {
        if (!condition) return {null_embedding, true};
        if (*condition < 0 || *condition >= condition_count())
            throw std::out_of_range("ScoreModel: unknown condition id " + std::to_string(*condition));
        return {embeddings.row(*condition).transpose(), false};
    }

    /// Sinusoidal features of the normalized step t/T at geometric
    /// frequencies pi * 2^k, k = 0..F-1.
    Eigen::VectorXd time_features(int t) const {
        schedule.check_step(t);
        const double tau = static_cast<double>(t) / schedule.T;
        Eigen::VectorXd f(2 * config.time_frequencies);
        for (int k = 0; k < config.time_frequencies; ++k) {
            const double w = std::numbers::pi * std::pow(2.0, k) * tau;
            f[2 * k] = std::sin(w);
            f[2 * k + 1] = std::cos(w);
        }
        return f;
    }

    Eigen::VectorXd assemble_input(const Eigen::VectorXd& x, int t, const Eigen::VectorXd& emb) const {
        if (x.size() != config.data_dim) throw std::invalid_argument("ScoreModel: data dimension mismatch");
        if (emb.size() != config.embedding_dim) throw std::invalid_argument("ScoreModel: embedding dimension mismatch");
        Eigen::VectorXd input(config.input_dim());
        input << x, time_features(t), emb;
        return input;
    }

    /// Single noise prediction; counts one pass against the given class.
    Eigen::VectorXd predict_noise(const Eigen::VectorXd& x, int t, const ConditionEmbedding& emb) const {
        const Eigen::VectorXd out = net.forward(assemble_input(x, t, emb.values));
        (emb.is_null ? passes.unconditional : passes.conditional).fetch_add(1, std::memory_order_relaxed);
        return out;
    }

    Eigen::VectorXd predict_noise(const Eigen::VectorXd& x, int t, std::optional<int> condition) const {
        return predict_noise(x, t, embedding(condition));
    }
};

/// s_theta(x, t, c) = -eps_hat / sigma_t. Pass condition = nullopt for the
/// unconditional estimate.
inline Eigen::VectorXd score_at(const ScoreModel& m, const Eigen::VectorXd& x, int t,
                                std::optional<int> condition) {
    return -m.predict_noise(x, t, condition) / m.schedule.sigma(t);
}

inline Eigen::VectorXd score_for_embedding(const ScoreModel& m, const Eigen::VectorXd& x, int t,
                                           const ConditionEmbedding& emb) {
    return -m.predict_noise(x, t, emb) / m.schedule.sigma(t);
}

/// Classifier-free guidance combination s_null + w (s_c - s_null), computed
/// in noise space as (1-w) eps_null + w eps_c so that w = 1 reproduces the
/// conditional estimate bit-exactly and w = 0 the unconditional one.
inline Eigen::VectorXd cfg_score(const ScoreModel& m, const Eigen::VectorXd& x, int t, int condition,
                                 double w) {
    const Eigen::VectorXd eps_uncond = m.predict_noise(x, t, std::nullopt);
    const Eigen::VectorXd eps_cond = m.predict_noise(x, t, condition);
    return -((1.0 - w) * eps_uncond + w * eps_cond) / m.schedule.sigma(t);
}

// --- training ----------------------------------------------------------------

/// A fully-resolved training minibatch; exposed so gradient checks can drive
/// the exact code path the trainer uses.
struct TrainingBatch {
    Eigen::MatrixXd x0;            // clean samples, one per row
    std::vector<int> steps;        // diffusion step per example
    Eigen::MatrixXd noise;         // epsilon draws, one per row
    std::vector<int> embedding_rows;  // condition id, or -1 for the null token
};

struct TrainGradients {
    Mlp::Gradients net;
    Eigen::MatrixXd embeddings;
    Eigen::VectorXd null_embedding;

    static TrainGradients zeros_like(const ScoreModel& m) {
        TrainGradients g;
        g.net = Mlp::Gradients::zeros_like(m.net);
        g.embeddings = Eigen::MatrixXd::Zero(m.embeddings.rows(), m.embeddings.cols());
        g.null_embedding = Eigen::VectorXd::Zero(m.null_embedding.size());
        return g;
    }
};

/// Mean-squared noise-prediction loss over the batch (averaged over examples
/// and coordinates) and its exact gradients with respect to the network
/// parameters and the embedding rows the batch touches.
inline double training_loss_and_gradients(const ScoreModel& m, const TrainingBatch& batch,
                                          TrainGradients* grads) {
    const auto b = batch.x0.rows();
    const int d = m.config.data_dim;
    if (b == 0) throw std::invalid_argument("training batch is empty");

    Eigen::MatrixXd input(b, m.config.input_dim());
    Eigen::MatrixXd target(b, d);
    for (Eigen::Index i = 0; i < b; ++i) {
        const int t = batch.steps[static_cast<std::size_t>(i)];
        const double ab = m.schedule.alpha_bar(t);
        const double sig = m.schedule.sigma(t);
        const Eigen::VectorXd xt = std::sqrt(ab) * batch.x0.row(i).transpose() + sig * batch.noise.row(i).transpose();
        const int row = batch.embedding_rows[static_cast<std::size_t>(i)];
        const Eigen::VectorXd emb = row < 0 ? m.null_embedding : m.embeddings.row(row).transpose();
        input.row(i) = m.assemble_input(xt, t, emb).transpose();
        target.row(i) = batch.noise.row(i);
    }

    Mlp::BatchCache cache;
    const Eigen::MatrixXd out = m.net.forward_batch(input, grads ? &cache : nullptr);
    const Eigen::MatrixXd resid = out - target;
    const double loss = resid.array().square().mean();

    if (grads) {
        const Eigen::MatrixXd grad_out = (2.0 / static_cast<double>(b * d)) * resid;
        const Eigen::MatrixXd grad_in = m.net.backward_batch(cache, grad_out, &grads->net);
        const int emb_offset = d + 2 * m.config.time_frequencies;
        for (Eigen::Index i = 0; i < b; ++i) {
            const auto slice = grad_in.row(i).segment(emb_offset, m.config.embedding_dim);
            const int row = batch.embedding_rows[static_cast<std::size_t>(i)];
            if (row < 0)
                grads->null_embedding += slice.transpose();
            else
                grads->embeddings.row(row) += slice;
        }
    }
    return loss;
}

struct TrainStats {
    std::vector<double> epoch_losses;
};

/// Denoising-score-matching trainer: SGD with momentum on the epsilon MSE,
/// swapping in the null embedding with probability p_drop per example. The
/// learning rate steps down to 0.1x after half the epochs and 0.01x after
/// 80%, which the toy recipes rely on to sharpen the planted basins.
/// Deterministic given cfg.seed; single-threaded.
inline ScoreModel train(const SyntheticDataset& dataset, const density::NoiseSchedule& schedule,
                        const TrainConfig& cfg, const ModelConfig& model_cfg = {},
                        TrainStats* stats = nullptr) {
    cfg.validate();
    if (dataset.size() == 0) throw std::invalid_argument("train: dataset is empty");
    if (dataset.dim() != model_cfg.data_dim)
        throw std::invalid_argument("train: dataset dimension does not match model config");

    Rng rng(cfg.seed);
    ScoreModel m;
    m.config = model_cfg;
    m.schedule = schedule;
    m.seed = cfg.seed;
    m.net = Mlp::create(model_cfg.layer_sizes(), rng);
    m.embeddings.resize(dataset.condition_count, model_cfg.embedding_dim);
    for (Eigen::Index r = 0; r < m.embeddings.rows(); ++r)
        for (Eigen::Index c = 0; c < m.embeddings.cols(); ++c) m.embeddings(r, c) = 0.5 * rng.gaussian();
    m.null_embedding.resize(model_cfg.embedding_dim);
    for (Eigen::Index c = 0; c < m.null_embedding.size(); ++c) m.null_embedding[c] = 0.5 * rng.gaussian();

    TrainGradients velocity = TrainGradients::zeros_like(m);
    const auto n = static_cast<int>(dataset.size());
    const int d = model_cfg.data_dim;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double frac = static_cast<double>(epoch) / cfg.epochs;
        const double lr = frac < 0.5 ? cfg.learning_rate
                                     : (frac < 0.8 ? 0.1 * cfg.learning_rate : 0.01 * cfg.learning_rate);
        const std::vector<int> perm = rng.permutation(n);
        double epoch_loss = 0.0;

        for (int start = 0; start < n; start += cfg.batch_size) {
            const int b = std::min(cfg.batch_size, n - start);
            TrainingBatch batch;
            batch.x0.resize(b, d);
            batch.noise.resize(b, d);
            batch.steps.resize(static_cast<std::size_t>(b));
            batch.embedding_rows.resize(static_cast<std::size_t>(b));
            for (int i = 0; i < b; ++i) {
                const int idx = perm[static_cast<std::size_t>(start + i)];
                batch.x0.row(i) = dataset.samples.row(idx);
                batch.steps[static_cast<std::size_t>(i)] = rng.uniform_int(1, schedule.T);
                batch.noise.row(i) = rng.gaussian_vector(d).transpose();
                const bool drop = rng.uniform() < cfg.p_drop;
                batch.embedding_rows[static_cast<std::size_t>(i)] =
                    drop ? -1 : dataset.condition_ids[static_cast<std::size_t>(idx)];
            }

            TrainGradients grads = TrainGradients::zeros_like(m);
            const double loss = training_loss_and_gradients(m, batch, &grads);
            epoch_loss += loss * b;
            if (!std::isfinite(loss))
                throw std::runtime_error("train: loss became non-finite at epoch " + std::to_string(epoch) +
                                         "; the learning rate is likely too high");

            for (std::size_t l = 0; l < m.net.weights.size(); ++l) {
                velocity.net.weights[l] = cfg.momentum * velocity.net.weights[l] + grads.net.weights[l];
                velocity.net.biases[l] = cfg.momentum * velocity.net.biases[l] + grads.net.biases[l];
                m.net.weights[l] -= lr * velocity.net.weights[l];
                m.net.biases[l] -= lr * velocity.net.biases[l];
            }
            velocity.embeddings = cfg.momentum * velocity.embeddings + grads.embeddings;
            velocity.null_embedding = cfg.momentum * velocity.null_embedding + grads.null_embedding;
            m.embeddings -= lr * velocity.embeddings;
            m.null_embedding -= lr * velocity.null_embedding;
        }
        if (stats) stats->epoch_losses.push_back(epoch_loss / n);
    }
    return m;
}

// --- deterministic reverse sampler --------------------------------------------

class SamplerDivergedError : public std::runtime_error {
public:
    explicit SamplerDivergedError(int step)
        : std::runtime_error("sampler produced a non-finite state at step " + std::to_string(step)),
          step_(step) {}
    int step() const { return step_; }

private:
    int step_;
};

/// Deterministic reverse trajectory from x_T ~ N(0, I), eta = 0: each step
/// forms the clean-sample estimate from the guided noise prediction and
/// re-noises it at the previous step's level.
inline Eigen::VectorXd sample_with_embedding(const ScoreModel& m, const ConditionEmbedding& emb, double w,
                                             std::uint64_t seed) {
    Rng rng(seed);
    Eigen::VectorXd x = rng.gaussian_vector(m.config.data_dim);
    for (int t = m.schedule.T; t >= 1; --t) {
        const Eigen::VectorXd eps_uncond = m.predict_noise(x, t, std::nullopt);
        const Eigen::VectorXd eps_cond = m.predict_noise(x, t, emb);
        const Eigen::VectorXd eps = (1.0 - w) * eps_uncond + w * eps_cond;
        const double ab = m.schedule.alpha_bar(t);
        const double ab_prev = m.schedule.alpha_bar_or_one(t - 1);
        const Eigen::VectorXd x0_hat = (x - m.schedule.sigma(t) * eps) / std::sqrt(ab);
        x = std::sqrt(ab_prev) * x0_hat + std::sqrt(1.0 - ab_prev) * eps;
        if (!x.allFinite()) throw SamplerDivergedError(t);
    }
    return x;
}

inline Eigen::VectorXd sample(const ScoreModel& m, int condition, double w, std::uint64_t seed) {
    return sample_with_embedding(m, m.embedding(condition), w, seed);
}

// --- checkpoint serialization --------------------------------------------------
// A checkpoint is <stem>.json (shapes, embedding table, schedule hash, seed)
// plus <stem>.bin (the flat little-endian double blob of network weights and
// biases, layer by layer).

inline void save_checkpoint(const ScoreModel& m, const std::filesystem::path& stem) {
    nlohmann::json j;
    j["version"] = kVersion;
    j["model"] = {{"data_dim", m.config.data_dim},
                  {"embedding_dim", m.config.embedding_dim},
                  {"time_frequencies", m.config.time_frequencies},
                  {"hidden", m.config.hidden}};
    j["schedule"] = {{"T", m.schedule.T}, {"beta_min", m.schedule.beta_min}, {"beta_max", m.schedule.beta_max}};
    j["schedule_hash"] = m.schedule.hash();
    j["seed"] = m.seed;
    j["condition_count"] = m.condition_count();

    nlohmann::json shapes = nlohmann::json::array();
    std::string blob;
    auto append = [&blob](const double* data, Eigen::Index count) {
        blob.append(reinterpret_cast<const char*>(data), static_cast<std::size_t>(count) * sizeof(double));
    };
    for (std::size_t l = 0; l < m.net.weights.size(); ++l) {
        shapes.push_back({m.net.weights[l].rows(), m.net.weights[l].cols()});
        // Eigen default storage is column-major; serialize in that order.
        append(m.net.weights[l].data(), m.net.weights[l].size());
        append(m.net.biases[l].data(), m.net.biases[l].size());
    }
    j["layer_shapes"] = shapes;

    nlohmann::json table = nlohmann::json::array();
    for (Eigen::Index r = 0; r < m.embeddings.rows(); ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index c = 0; c < m.embeddings.cols(); ++c) row.push_back(m.embeddings(r, c));
        table.push_back(row);
    }
    j["embedding_table"] = table;
    nlohmann::json null_row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.null_embedding.size(); ++c) null_row.push_back(m.null_embedding[c]);
    j["null_embedding"] = null_row;

    j["blob"] = {{"file", stem.filename().string() + ".bin"},
                 {"doubles", blob.size() / sizeof(double)},
                 {"hash", io::hex64(io::fnv1a(blob))}};

    io::write_file_atomic(stem.string() + ".bin", blob);
    io::write_file_atomic(stem.string() + ".json", j.dump(2) + "\n");
}

inline ScoreModel load_checkpoint(const std::filesystem::path& stem) {
    const nlohmann::json j = nlohmann::json::parse(io::read_file(stem.string() + ".json"));
    ScoreModel m;
    m.config.data_dim = j.at("model").at("data_dim").get<int>();
    m.config.embedding_dim = j.at("model").at("embedding_dim").get<int>();
    m.config.time_frequencies = j.at("model").at("time_frequencies").get<int>();
    m.config.hidden = j.at("model").at("hidden").get<std::vector<int>>();
    m.schedule = density::NoiseSchedule::linear(j.at("schedule").at("T").get<int>(),
                                               j.at("schedule").at("beta_min").get<double>(),
                                               j.at("schedule").at("beta_max").get<double>());
    if (j.at("schedule_hash").get<std::string>() != m.schedule.hash())
        throw std::runtime_error("checkpoint: schedule hash mismatch");
    m.seed = j.at("seed").get<std::uint64_t>();

    const std::string blob = io::read_file(stem.string() + ".bin");
    if (j.at("blob").at("hash").get<std::string>() != io::hex64(io::fnv1a(blob)))
        throw std::runtime_error("checkpoint: weight blob hash mismatch");

    std::size_t at = 0;
    auto take = [&blob, &at](double* dst, Eigen::Index count) {
        const std::size_t bytes = static_cast<std::size_t>(count) * sizeof(double);
        if (at + bytes > blob.size()) throw std::runtime_error("checkpoint: blob truncated");
        std::memcpy(dst, blob.data() + at, bytes);
        at += bytes;
    };
    for (const auto& shape : j.at("layer_shapes")) {
        const auto rows = shape[0].get<Eigen::Index>();
        const auto cols = shape[1].get<Eigen::Index>();
        Eigen::MatrixXd w(rows, cols);
        take(w.data(), w.size());
        Eigen::VectorXd b(rows);
        take(b.data(), b.size());
        m.net.weights.push_back(std::move(w));
        m.net.biases.push_back(std::move(b));
    }
    if (at != blob.size()) throw std::runtime_error("checkpoint: blob has trailing bytes");

    const auto& table = j.at("embedding_table");
    const int cond_count = j.at("condition_count").get<int>();
    if (static_cast<int>(table.size()) != cond_count)
        throw std::runtime_error("checkpoint: embedding table size mismatch");
    m.embeddings.resize(cond_count, m.config.embedding_dim);
    for (int r = 0; r < cond_count; ++r)
        for (int c = 0; c < m.config.embedding_dim; ++c)
            m.embeddings(r, c) = table[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)].get<double>();
    const auto& null_row = j.at("null_embedding");
    m.null_embedding.resize(m.config.embedding_dim);
    for (int c = 0; c < m.config.embedding_dim; ++c)
        m.null_embedding[c] = null_row[static_cast<std::size_t>(c)].get<double>();
    return m;
}

}  // namespace scorelab::model
