#pragma once

#include <stdexcept>
#include <vector>

#include <Eigen/Core>

#include "scorelab/rng.hpp"

namespace scorelab::model {

/// Fully-connected network with tanh hidden layers and a linear output,
/// plus hand-written reverse-mode differentiation. Batches are row-major:
/// one example per row.
struct Mlp {
    std::vector<Eigen::MatrixXd> weights;  // weights[l] is (out x in)
    std::vector<Eigen::VectorXd> biases;

    static Mlp create(const std::vector<int>& layer_sizes, Rng& rng) {
        if (layer_sizes.size() < 2) throw std::invalid_argument("Mlp: need at least input and output sizes");
        Mlp net;
        for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) {
            const int in = layer_sizes[l];
            const int out = layer_sizes[l + 1];
            if (in < 1 || out < 1) throw std::invalid_argument("Mlp: layer sizes must be positive");
            Eigen::MatrixXd w(out, in);
            const double scale = std::sqrt(1.0 / in);
            for (int r = 0; r < out; ++r)
                for (int c = 0; c < in; ++c) w(r, c) = scale * rng.gaussian();
            net.weights.push_back(std::move(w));
            net.biases.push_back(Eigen::VectorXd::Zero(out));
        }
        return net;
    }

    int input_dim() const { return static_cast<int>(weights.front().cols()); }
    int output_dim() const { return static_cast<int>(weights.back().rows()); }
    std::size_t layer_count() const { return weights.size(); }

    /// activations[0] is the input; activations[l] for hidden layers holds the
    /// post-tanh values; activations[L] is the linear output.
    struct BatchCache {
        std::vector<Eigen::MatrixXd> activations;
    };

    Eigen::MatrixXd forward_batch(const Eigen::MatrixXd& x, BatchCache* cache = nullptr) const {
        if (x.cols() != input_dim()) throw std::invalid_argument("Mlp: input dimension mismatch");
        if (cache) {
            cache->activations.clear();
            cache->activations.push_back(x);
        }
        Eigen::MatrixXd a = x;
        for (std::size_t l = 0; l < weights.size(); ++l) {
            Eigen::MatrixXd z = (a * weights[l].transpose()).rowwise() + biases[l].transpose();
            a = (l + 1 < weights.size()) ? z.array().tanh().matrix() : std::move(z);
            if (cache) cache->activations.push_back(a);
        }
        return a;
    }

    Eigen::VectorXd forward(const Eigen::VectorXd& x) const {
        return forward_batch(x.transpose()).row(0).transpose();
    }

    struct Gradients {
        std::vector<Eigen::MatrixXd> weights;
        std::vector<Eigen::VectorXd> biases;

        static Gradients zeros_like(const Mlp& net) {
            Gradients g;
            for (std::size_t l = 0; l < net.weights.size(); ++l) {
                g.weights.push_back(Eigen::MatrixXd::Zero(net.weights[l].rows(), net.weights[l].cols()));
                g.biases.push_back(Eigen::VectorXd::Zero(net.biases[l].size()));
            }
            return g;
        }
    };

    /// Reverse pass: grad_out is dL/d(output). Parameter gradients accumulate
    /// into *grads when provided; the return value is dL/d(input).
    Eigen::MatrixXd backward_batch(const BatchCache& cache, const Eigen::MatrixXd& grad_out,
                                   Gradients* grads = nullptr) const {
        const auto layers = weights.size();
        if (cache.activations.size() != layers + 1)
            throw std::invalid_argument("Mlp: cache does not match network");
        Eigen::MatrixXd d = grad_out;  // dL/dZ of the layer being processed
        for (std::size_t l = layers; l-- > 0;) {
            if (l + 1 < layers) {
                // entering a tanh layer: d currently holds dL/dA
                const Eigen::MatrixXd& a = cache.activations[l + 1];
                d = (d.array() * (1.0 - a.array().square())).matrix();
            }
            if (grads) {
                grads->weights[l] += d.transpose() * cache.activations[l];
                grads->biases[l] += d.colwise().sum().transpose();
            }
            d = d * weights[l];
        }
        return d;
    }

    Eigen::Index parameter_count() const {
        Eigen::Index n = 0;
        for (std::size_t l = 0; l < weights.size(); ++l) n += weights[l].size() + biases[l].size();
        return n;
    }

    Eigen::VectorXd flatten() const {
        Eigen::VectorXd out(parameter_count());
        Eigen::Index at = 0;
        for (std::size_t l = 0; l < weights.size(); ++l) {
            for (Eigen::Index r = 0; r < weights[l].rows(); ++r)
                for (Eigen::Index c = 0; c < weights[l].cols(); ++c) out[at++] = weights[l](r, c);
            for (Eigen::Index i = 0; i < biases[l].size(); ++i) out[at++] = biases[l][i];
        }
        return out;
    }

    void unflatten(const Eigen::VectorXd& flat) {
        if (flat.size() != parameter_count()) throw std::invalid_argument("Mlp: flat size mismatch");
        Eigen::Index at = 0;
        for (std::size_t l = 0; l < weights.size(); ++l) {
            for (Eigen::Index r = 0; r < weights[l].rows(); ++r)
                for (Eigen::Index c = 0; c < weights[l].cols(); ++c) weights[l](r, c) = flat[at++];
            for (Eigen::Index i = 0; i < biases[l].size(); ++i) biases[l][i] = flat[at++];
        }
    }
};

}  // namespace scorelab::model
