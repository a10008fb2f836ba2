#pragma once

// Block dropping ranked by input/output cosine similarity.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "diffes/calib.hpp"
#include "diffes/error.hpp"
#include "diffes/toydiff/model.hpp"

namespace diffes::prune {

struct BlockRedundancy {
    int block = 0;
    double score = 0.0;  // mean cosine(x, f(x)) over calibration samples
    int samples = 0;     // samples that entered the mean
};

/// cos(vec(x), vec(y)); returns false when either vector has zero norm.
inline bool cosine(const float* x, const float* y, std::size_t n, double& out) {
    double xy = 0.0, xx = 0.0, yy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        xy += static_cast<double>(x[i]) * y[i];
        xx += static_cast<double>(x[i]) * x[i];
        yy += static_cast<double>(y[i]) * y[i];
    }
    if (xx == 0.0 || yy == 0.0) return false;
    // sqrt(xx * yy) keeps cos(x, x) == 1 exactly
    const double prod = xx * yy;
    const double denom = std::isfinite(prod) ? std::sqrt(prod) : std::sqrt(xx) * std::sqrt(yy);
    out = std::clamp(xy / denom, -1.0, 1.0);
    return true;
}

inline std::vector<BlockRedundancy> layerdrop_scores(const toydiff::DenoiserModel& model, const calib::CalibrationSet& c,
                                                     int batch = 64) {
    if (c.size() == 0) throw Error(ErrorKind::InvalidConfig, "calibration set is empty");
    const auto& cfg = model.config();
    const auto per_image = static_cast<std::size_t>(cfg.tokens() * cfg.embed);
    std::vector<double> sum(static_cast<std::size_t>(cfg.blocks), 0.0);
    std::vector<int> count(static_cast<std::size_t>(cfg.blocks), 0);
    toydiff::ForwardCache cache;
    for (int start = 0; start < c.size(); start += batch) {
        const int n = std::min(batch, c.size() - start);
        const auto s = static_cast<std::size_t>(start);
        model.forward(std::span<const float>(c.latents).subspan(s * static_cast<std::size_t>(c.pixels),
                                                                 static_cast<std::size_t>(n * c.pixels)),
                      std::span<const int>(c.timesteps).subspan(s, static_cast<std::size_t>(n)),
                      std::span<const int>(c.labels).subspan(s, static_cast<std::size_t>(n)), nullptr, cache);
        for (int b = 0; b < cfg.blocks; ++b) {
            const auto& bc = cache.blocks[static_cast<std::size_t>(b)];
            for (int k = 0; k < n; ++k) {
                double cs = 0.0;
                if (cosine(&bc.h_in[static_cast<std::size_t>(k) * per_image], &bc.h_out[static_cast<std::size_t>(k) * per_image],
                           per_image, cs)) {
                    sum[static_cast<std::size_t>(b)] += cs;
                    ++count[static_cast<std::size_t>(b)];
                }
            }
        }
    }
    std::vector<BlockRedundancy> out;
    for (int b = 0; b < cfg.blocks; ++b) {
        const auto i = static_cast<std::size_t>(b);
        if (count[i] == 0)
            throw Error(ErrorKind::DegenerateActivations, "block " + std::to_string(b) + " has only zero-norm activations");
        out.push_back({b, sum[i] / count[i], count[i]});
    }
    return out;
}

/// Level k drops the k blocks with the highest redundancy (ties to the
/// lowest block index).
struct BlockDropTrajectory {
    int stage = 0;
    std::vector<BlockRedundancy> scores;
    std::vector<int> order;

    int levels() const noexcept { return static_cast<int>(order.size()); }

    std::vector<std::uint8_t> active_blocks(int k) const {
        if (k < 0 || k > levels()) throw Error(ErrorKind::InvalidInput, "drop level out of range");
        std::vector<std::uint8_t> active(scores.size(), 1);
        for (int i = 0; i < k; ++i) active[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 0;
        return active;
    }
};

inline BlockDropTrajectory layerdrop_trajectory(const std::vector<BlockRedundancy>& scores, int max_level) {
    if (max_level < 0 || max_level > static_cast<int>(scores.size()))
        throw Error(ErrorKind::InvalidConfig, "drop level exceeds block count");
    std::vector<int> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
        return scores[static_cast<std::size_t>(a)].score > scores[static_cast<std::size_t>(b)].score;
    });
    BlockDropTrajectory t;
    t.scores = scores;
    t.order.assign(idx.begin(), idx.begin() + max_level);
    return t;
}

}  // namespace diffes::prune
