#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "scorelab/io.hpp"

namespace scorelab::density {

/// Discrete variance-preserving diffusion timeline. Step indices run 1..T;
/// alpha_bar(t) is the cumulative product of (1 - beta_s) for s <= t and
/// sigma(t) = sqrt(1 - alpha_bar(t)) is the marginal noise scale.
struct NoiseSchedule {
    int T = 0;
    double beta_min = 0.0;
    double beta_max = 0.0;
    std::vector<double> betas;       // betas[t-1] = beta_t
    std::vector<double> alpha_bars;  // alpha_bars[t-1], strictly decreasing
    std::vector<double> sigmas;      // sigmas[t-1], strictly increasing

    /// Linear beta ramp from beta_min to beta_max over T steps.
    static NoiseSchedule linear(int steps, double beta_min = 1e-4, double beta_max = 2e-2) {
        if (steps < 1) throw std::invalid_argument("NoiseSchedule: T must be >= 1");
        if (!(beta_min > 0.0) || !(beta_max < 1.0) || beta_min > beta_max)
            throw std::invalid_argument("NoiseSchedule: need 0 < beta_min <= beta_max < 1");
        NoiseSchedule s;
        s.T = steps;
        s.beta_min = beta_min;
        s.beta_max = beta_max;
        s.betas.resize(steps);
        s.alpha_bars.resize(steps);
        s.sigmas.resize(steps);
        double prod = 1.0;
        for (int t = 0; t < steps; ++t) {
            const double frac = steps == 1 ? 0.0 : static_cast<double>(t) / (steps - 1);
            s.betas[t] = beta_min + (beta_max - beta_min) * frac;
            prod *= 1.0 - s.betas[t];
            s.alpha_bars[t] = prod;
            s.sigmas[t] = std::sqrt(1.0 - prod);
        }
        return s;
    }

    void check_step(int t) const {
        if (t < 1 || t > T)
            throw std::out_of_range("schedule step " + std::to_string(t) + " outside 1.." + std::to_string(T));
    }

    double beta(int t) const { check_step(t); return betas[t - 1]; }
    double alpha_bar(int t) const { check_step(t); return alpha_bars[t - 1]; }
    double sigma(int t) const { check_step(t); return sigmas[t - 1]; }

    /// alpha_bar extended with the t=0 convention alpha_bar(0) = 1, as used
    /// by the final reverse-sampler step.
    double alpha_bar_or_one(int t) const { return t == 0 ? 1.0 : alpha_bar(t); }

    /// Stable identity of the schedule parameters, recorded in checkpoints.
    std::string hash() const {
        const std::string repr = "linear;" + std::to_string(T) + ";" + io::format_double(beta_min) +
                                 ";" + io::format_double(beta_max);
        return io::hex64(io::fnv1a(repr));
    }

    bool operator==(const NoiseSchedule& o) const {
        return T == o.T && beta_min == o.beta_min && beta_max == o.beta_max;
    }
};

}  // namespace scorelab::density
