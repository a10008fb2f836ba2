#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "diffes/error.hpp"

namespace diffes::toydiff {

/// Linear-beta DDPM noise schedule. Timesteps are 1-based: index t in [1, T]
/// maps to element t - 1 of each vector.
struct NoiseSchedule {
    int T = 0;
    double beta_start = 0.0;
    double beta_end = 0.0;
    std::vector<double> beta;
    std::vector<double> alpha_bar;
    std::vector<double> snr;

    double alpha_bar_at(int t) const {
        check(t);
        return alpha_bar[static_cast<std::size_t>(t - 1)];
    }
    double snr_at(int t) const {
        check(t);
        return snr[static_cast<std::size_t>(t - 1)];
    }
    void check(int t) const {
        if (t < 1 || t > T) throw Error(ErrorKind::InvalidTimestep, "timestep " + std::to_string(t) + " outside [1, T]");
    }
};

inline NoiseSchedule schedule_from_betas(std::vector<double> beta) {
    if (beta.size() < 2) throw Error(ErrorKind::InvalidConfig, "schedule needs T >= 2");
    NoiseSchedule s;
    s.T = static_cast<int>(beta.size());
    s.beta_start = beta.front();
    s.beta_end = beta.back();
    double prod = 1.0;
    for (double b : beta) {
        if (!(b > 0.0 && b < 1.0)) throw Error(ErrorKind::InvalidConfig, "beta must lie in (0, 1)");
        prod *= 1.0 - b;
        s.alpha_bar.push_back(prod);
        s.snr.push_back(prod / (1.0 - prod));
    }
    s.beta = std::move(beta);
    return s;
}

inline NoiseSchedule build_schedule(int T, double beta_start, double beta_end) {
    if (T < 2) throw Error(ErrorKind::InvalidConfig, "schedule needs T >= 2");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw Error(ErrorKind::InvalidConfig, "need 0 < beta_start <= beta_end < 1");
    std::vector<double> beta(static_cast<std::size_t>(T));
    for (int i = 0; i < T; ++i)
        beta[static_cast<std::size_t>(i)] = beta_start + (beta_end - beta_start) * i / static_cast<double>(T - 1);
    return schedule_from_betas(std::move(beta));
}

/// x = sqrt(abar) x0 + sqrt(1 - abar) noise, written into out.
inline void noise_with_alpha_bar(std::span<const float> x0, double abar, std::span<const float> noise,
                                 std::span<float> out) {
    if (x0.size() != noise.size() || out.size() != x0.size())
        throw Error(ErrorKind::InvalidShape, "forward_noise shapes differ");
    const double a = std::sqrt(abar);
    const double b = std::sqrt(1.0 - abar);
    for (std::size_t i = 0; i < x0.size(); ++i)
        out[i] = static_cast<float>(a * x0[i] + b * noise[i]);
}

inline void forward_noise(std::span<const float> x0, int t, std::span<const float> noise,
                          const NoiseSchedule& sched, std::span<float> out) {
    noise_with_alpha_bar(x0, sched.alpha_bar_at(t), noise, out);
}

inline std::vector<float> forward_noise(std::span<const float> x0, int t, std::span<const float> noise,
                                        const NoiseSchedule& sched) {
    std::vector<float> out(x0.size());
    forward_noise(x0, t, noise, sched, out);
    return out;
}

}  // namespace diffes::toydiff
