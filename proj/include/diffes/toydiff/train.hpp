#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "diffes/error.hpp"
#include "diffes/toydiff/dataset.hpp"
#include "diffes/toydiff/model.hpp"
#include "diffes/toydiff/schedule.hpp"

namespace diffes::toydiff {

struct TrainConfig {
    int epochs = 30;
    double lr = 2e-3;
    int batch_size = 32;
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
};

struct TrainResult {
    DenoiserModel model;
    std::vector<double> epoch_loss;  // mean epsilon-prediction MSE per epoch
};

/// Epsilon-prediction training with Adam. Deterministic given the seed.
inline TrainResult train(DenoiserModel model, const ToyDataset& data, const NoiseSchedule& sched, const TrainConfig& cfg) {
    if (data.empty()) throw Error(ErrorKind::InvalidConfig, "training dataset is empty");
    if (cfg.epochs < 0 || cfg.batch_size <= 0 || !(cfg.lr > 0.0))
        throw Error(ErrorKind::InvalidConfig, "invalid training hyperparameters");
    TrainResult result;
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<float> normal(0.0f, 1.0f);
    std::uniform_int_distribution<int> pick_t(1, sched.T);

    std::vector<Tensor> grads = model.zero_like();
    std::vector<Tensor> m1 = model.zero_like();
    std::vector<Tensor> m2 = model.zero_like();
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const int pixels = model.config().pixels();
    const auto px = static_cast<std::size_t>(pixels);
    std::vector<float> noise, xt, d_eps;
    std::vector<int> ts, labels;
    ForwardCache cache;
    long step = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            const std::size_t n = end - start;
            const float inv = 1.0f / static_cast<float>(n * px);
            noise.resize(n * px);
            xt.resize(n * px);
            d_eps.resize(n * px);
            ts.resize(n);
            labels.resize(n);
            for (std::size_t k = 0; k < n; ++k) {
                const std::size_t idx = order[start + k];
                ts[k] = pick_t(rng);
                labels[k] = data.labels[idx];
                auto nz = std::span<float>(noise).subspan(k * px, px);
                for (auto& v : nz) v = normal(rng);
                forward_noise(data.images[idx], ts[k], nz, sched, std::span<float>(xt).subspan(k * px, px));
            }
            model.forward(xt, ts, labels, nullptr, cache);
            for (std::size_t k = 0; k < n; ++k) {
                double loss = 0.0;
                for (std::size_t i = k * px; i < (k + 1) * px; ++i) {
                    const float diff = cache.eps[i] - noise[i];
                    loss += static_cast<double>(diff) * diff;
                    d_eps[i] = 2.0f * diff * inv;
                }
                epoch_loss += loss / static_cast<double>(px);
            }
            for (auto& g : grads) std::fill(g.w.begin(), g.w.end(), 0.0f);
            model.backward(cache, d_eps, grads);
            if (!std::isfinite(epoch_loss))
                throw Error(ErrorKind::TrainingDiverged, "loss became non-finite in epoch " + std::to_string(epoch + 1));
            ++step;
            const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
            const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
            auto& params = model.params();
            for (std::size_t p = 0; p < params.size(); ++p) {
                for (std::size_t i = 0; i < params[p].w.size(); ++i) {
                    const double g = grads[p].w[i];
                    const double a = cfg.beta1 * m1[p].w[i] + (1.0 - cfg.beta1) * g;
                    const double b = cfg.beta2 * m2[p].w[i] + (1.0 - cfg.beta2) * g * g;
                    m1[p].w[i] = static_cast<float>(a);
                    m2[p].w[i] = static_cast<float>(b);
                    params[p].w[i] -= static_cast<float>(cfg.lr * (a / c1) / (std::sqrt(b / c2) + cfg.adam_eps));
                }
            }
        }
        result.epoch_loss.push_back(epoch_loss / static_cast<double>(data.size()));
    }
    result.model = std::move(model);
    return result;
}

}  // namespace diffes::toydiff
