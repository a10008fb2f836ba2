#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "diffes/error.hpp"
#include "diffes/toydiff/model.hpp"
#include "diffes/toydiff/schedule.hpp"

namespace diffes::toydiff {

struct SamplerConfig {
    int num_steps = 20;
    double eta = 0.0;
    std::uint64_t seed = 0;
};

/// Decreasing sampling timesteps T, T - T/S, ... (1-based).
inline std::vector<int> sampling_timesteps(int T, int num_steps) {
    if (num_steps < 1 || num_steps > T) throw Error(ErrorKind::InvalidConfig, "num_steps must lie in [1, T]");
    std::vector<int> ts(static_cast<std::size_t>(num_steps));
    for (int s = 0; s < num_steps; ++s)
        ts[static_cast<std::size_t>(s)] = T - static_cast<int>(static_cast<long>(s) * T / num_steps);
    return ts;
}

inline std::vector<float> initial_latent(std::uint64_t seed, int pixels) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> normal(0.0f, 1.0f);
    std::vector<float> x(static_cast<std::size_t>(pixels));
    for (auto& v : x) v = normal(rng);
    return x;
}

/// DDIM sampler over a batch of images advanced in lockstep. With eta = 0
/// the update is deterministic; the stochastic branch draws from one
/// generator per image derived from that image's seed.
class DdimSampler {
public:
    DdimSampler(const NoiseSchedule& sched, const SamplerConfig& cfg)
        : sched_(&sched), cfg_(cfg), timesteps_(sampling_timesteps(sched.T, cfg.num_steps)) {
        if (cfg.eta < 0.0) throw Error(ErrorKind::InvalidConfig, "eta must be non-negative");
    }

    const std::vector<int>& timesteps() const noexcept { return timesteps_; }
    int num_steps() const noexcept { return static_cast<int>(timesteps_.size()); }
    const SamplerConfig& config() const noexcept { return cfg_; }

    /// Initial latents for a batch, one standard-normal image per seed.
    static std::vector<float> initial_batch(std::span<const std::uint64_t> seeds, int pixels) {
        std::vector<float> x;
        x.reserve(seeds.size() * static_cast<std::size_t>(pixels));
        for (auto s : seeds) {
            auto one = initial_latent(s, pixels);
            x.insert(x.end(), one.begin(), one.end());
        }
        return x;
    }

    /// Runs steps [first, last) in place on the batch x (batch x pixels).
    /// plan_for_t(t) returns the forward plan for timestep t, null for the
    /// dense backbone. noise_rngs is only consulted when eta > 0.
    template <class PlanFn>
    void run(const DenoiserModel& model, std::vector<float>& x, std::span<const int> labels, int first, int last,
             PlanFn&& plan_for_t, ForwardCache& cache, std::vector<std::mt19937_64>* noise_rngs = nullptr) const {
        std::vector<int> ts(labels.size());
        for (int s = first; s < last; ++s) {
            const int t = timesteps_[static_cast<std::size_t>(s)];
            const int t_prev = s + 1 < num_steps() ? timesteps_[static_cast<std::size_t>(s + 1)] : 0;
            std::fill(ts.begin(), ts.end(), t);
            const ForwardPlan* plan = plan_for_t(t);
            model.forward(x, ts, labels, plan, cache);
            step(x, cache.eps, t, t_prev, noise_rngs);
        }
    }

    template <class PlanFn>
    std::vector<float> sample_batch(const DenoiserModel& model, std::span<const std::uint64_t> seeds,
                                    std::span<const int> labels, PlanFn&& plan_for_t) const {
        if (seeds.size() != labels.size()) throw Error(ErrorKind::InvalidShape, "one seed per label required");
        const int pixels = model.config().pixels();
        std::vector<float> x = initial_batch(seeds, pixels);
        std::vector<std::mt19937_64> rngs;
        for (auto s : seeds) rngs.emplace_back(s ^ 0x9E3779B97F4A7C15ULL);
        ForwardCache cache;
        run(model, x, labels, 0, num_steps(), plan_for_t, cache, &rngs);
        clip(x);
        return x;
    }

    static void clip(std::vector<float>& x) {
        for (auto& v : x) v = std::clamp(v, -1.0f, 1.0f);
    }

private:
    void step(std::vector<float>& x, std::span<const float> eps, int t, int t_prev,
              std::vector<std::mt19937_64>* noise_rngs) const {
        const double abar = sched_->alpha_bar_at(t);
        const double abar_prev = t_prev == 0 ? 1.0 : sched_->alpha_bar_at(t_prev);
        double sigma = 0.0;
        if (cfg_.eta > 0.0)
            sigma = cfg_.eta * std::sqrt((1.0 - abar_prev) / (1.0 - abar)) * std::sqrt(1.0 - abar / abar_prev);
        const double dir = std::sqrt(std::max(0.0, 1.0 - abar_prev - sigma * sigma));
        const double sa = std::sqrt(abar), sb = std::sqrt(1.0 - abar), sp = std::sqrt(abar_prev);
        const std::size_t per_image = noise_rngs && !noise_rngs->empty() ? x.size() / noise_rngs->size() : x.size();
        std::normal_distribution<double> normal(0.0, 1.0);
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double x0 = (x[i] - sb * eps[i]) / sa;
            double next = sp * x0 + dir * eps[i];
            if (sigma > 0.0 && noise_rngs && !noise_rngs->empty()) next += sigma * normal((*noise_rngs)[i / per_image]);
            x[i] = static_cast<float>(next);
        }
    }

    const NoiseSchedule* sched_;
    SamplerConfig cfg_;
    std::vector<int> timesteps_;
};

inline const ForwardPlan* dense_plan(int) { return nullptr; }

/// One image from the dense model, latent drawn from cfg.seed.
inline std::vector<float> sample(const DenoiserModel& model, const SamplerConfig& cfg, const NoiseSchedule& sched, int label) {
    const std::uint64_t seeds[1] = {cfg.seed};
    const int labels[1] = {label};
    return DdimSampler(sched, cfg).sample_batch(model, seeds, labels, dense_plan);
}

template <class PlanFn>
std::vector<float> sample(const DenoiserModel& model, const SamplerConfig& cfg, const NoiseSchedule& sched, int label,
                          PlanFn&& plan_for_t) {
    const std::uint64_t seeds[1] = {cfg.seed};
    const int labels[1] = {label};
    return DdimSampler(sched, cfg).sample_batch(model, seeds, labels, std::forward<PlanFn>(plan_for_t));
}

}  // namespace diffes::toydiff
