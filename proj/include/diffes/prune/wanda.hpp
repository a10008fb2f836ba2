#pragma once

// Structural Wanda: |W_ij| * ||X_j|| aggregated over heads or channels.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "diffes/error.hpp"
#include "diffes/linalg.hpp"
#include "diffes/prune/structure.hpp"

namespace diffes::prune {

struct WandaScores {
    StructureSpec spec;
    linalg::Matrix elementwise;  // same shape as W
    std::vector<double> group;   // one score per spec group
};

/// Euclidean norm of every input feature over all captured columns
/// (X is d_in x N, so feature j is row j).
inline std::vector<double> feature_norms(const linalg::Matrix& x) {
    std::vector<double> norms(x.rows());
    for (std::size_t j = 0; j < x.rows(); ++j) {
        double s = 0.0;
        for (double v : x.row(j)) s += v * v;
        norms[j] = std::sqrt(s);
    }
    return norms;
}

inline WandaScores wanda_scores(const linalg::Matrix& w, const linalg::Matrix& x, const StructureSpec& spec) {
    if (x.rows() != w.cols()) throw Error(ErrorKind::InvalidShape, "activation width does not match layer input");
    if (spec.axis != Axis::Rows) throw Error(ErrorKind::InvalidConfig, "Wanda groups output rows");
    spec.validate(w.rows());
    const std::vector<double> norms = feature_norms(x);
    WandaScores out{spec, linalg::Matrix(w.rows(), w.cols()), {}};
    for (std::size_t i = 0; i < w.rows(); ++i)
        for (std::size_t j = 0; j < w.cols(); ++j) out.elementwise(i, j) = std::abs(w(i, j)) * norms[j];
    for (const auto& g : spec.groups) {
        double s = 0.0;
        for (auto i : g)
            for (double v : out.elementwise.row(i)) s += v;
        const double denom = spec.kind == GroupKind::Head ? static_cast<double>(g.size())
                                                          : static_cast<double>(w.cols() * g.size());
        out.group.push_back(s / denom);
    }
    return out;
}

/// Mask-only trajectory: level k removes the k lowest-scoring groups, ties
/// to the lowest group index.
inline PruningTrajectory wanda_prune_layer(const WandaScores& scores, int max_groups) {
    const int n = scores.spec.group_count();
    if (max_groups < 0 || max_groups > n) throw Error(ErrorKind::InvalidConfig, "L_max exceeds the number of groups");
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return scores.group[static_cast<std::size_t>(a)] < scores.group[static_cast<std::size_t>(b)];
    });
    PruningTrajectory traj;
    traj.spec = scores.spec;
    for (int k = 0; k < max_groups; ++k) {
        const int g = order[static_cast<std::size_t>(k)];
        traj.steps.push_back({g, scores.group[static_cast<std::size_t>(g)]});
    }
    return traj;
}

}  // namespace diffes::prune
