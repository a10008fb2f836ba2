#pragma once

// Structured second-order (OBS) pruning of input-column groups.

#include <limits>
#include <span>
#include <vector>

#include "diffes/error.hpp"
#include "diffes/linalg.hpp"
#include "diffes/prune/structure.hpp"

namespace diffes::prune {

/// Sum over rows of W_{i,M} ((Hinv)_{M,M})^{-1} W_{i,M}^T.
inline double obs_importance(const linalg::Matrix& w, const linalg::Matrix& hinv, std::span<const std::size_t> m) {
    if (w.cols() != hinv.rows()) throw Error(ErrorKind::InvalidShape, "W and Hinv disagree on input width");
    const linalg::Matrix s = linalg::inverse_submatrix_inverse(hinv, m);
    const std::size_t g = m.size();
    std::vector<double> wm(g);
    double total = 0.0;
    for (std::size_t i = 0; i < w.rows(); ++i) {
        for (std::size_t a = 0; a < g; ++a) wm[a] = w(i, m[a]);
        for (std::size_t a = 0; a < g; ++a) {
            double row = 0.0;
            for (std::size_t b = 0; b < g; ++b) row += s(a, b) * wm[b];
            total += wm[a] * row;
        }
    }
    return total;
}

/// delta = -W_{:,M} ((Hinv)_{M,M})^{-1} (Hinv)_{M,:}
inline linalg::Matrix obs_compensation(const linalg::Matrix& w, const linalg::Matrix& hinv,
                                       std::span<const std::size_t> m) {
    if (w.cols() != hinv.rows()) throw Error(ErrorKind::InvalidShape, "W and Hinv disagree on input width");
    const linalg::Matrix s = linalg::inverse_submatrix_inverse(hinv, m);
    const std::size_t g = m.size(), d = w.cols();
    linalg::Matrix delta(w.rows(), d);
    std::vector<double> coef(g);
    for (std::size_t i = 0; i < w.rows(); ++i) {
        for (std::size_t a = 0; a < g; ++a) {
            double c = 0.0;
            for (std::size_t b = 0; b < g; ++b) c += w(i, m[b]) * s(b, a);
            coef[a] = c;
        }
        auto out = delta.row(i);
        for (std::size_t a = 0; a < g; ++a) {
            const auto hrow = hinv.row(m[a]);
            for (std::size_t j = 0; j < d; ++j) out[j] -= coef[a] * hrow[j];
        }
    }
    return delta;
}

namespace detail {

inline linalg::Matrix select_columns(const linalg::Matrix& w, std::span<const std::size_t> cols) {
    linalg::Matrix out(w.rows(), cols.size());
    for (std::size_t i = 0; i < w.rows(); ++i)
        for (std::size_t j = 0; j < cols.size(); ++j) out(i, j) = w(i, cols[j]);
    return out;
}

// (H_RR + lambda I)^{-1}
inline linalg::Matrix restricted_inverse(const linalg::Matrix& h, std::span<const std::size_t> keep, double lambda) {
    linalg::Matrix sub = linalg::principal_submatrix(h, keep);
    for (std::size_t i = 0; i < sub.rows(); ++i) sub(i, i) += lambda;
    return linalg::spd_inverse(sub);
}

}  // namespace detail

/// Greedy OBS over column groups: each step removes the remaining group of
/// least importance under the current weights and compensates the rest.
/// The damped Hessian is restricted to the surviving columns and re-inverted
/// after every removal. Ties go to the lowest group index.
inline PruningTrajectory obs_prune_layer(const linalg::Matrix& w0, const linalg::SymPosDef& h, const StructureSpec& spec,
                                         int max_groups, double lambda_frac = linalg::kDefaultDampingFrac) {
    if (spec.axis != Axis::Columns) throw Error(ErrorKind::InvalidConfig, "OBS prunes input columns");
    if (h.dim() != w0.cols()) throw Error(ErrorKind::InvalidShape, "Hessian size does not match layer input width");
    spec.validate(w0.cols());
    if (max_groups < 0 || max_groups > spec.group_count())
        throw Error(ErrorKind::InvalidConfig, "L_max exceeds the number of groups of " + spec.layer.name());
    if (lambda_frac < 0.0) throw Error(ErrorKind::InvalidConfig, "lambda_frac must be non-negative");

    double lambda = lambda_frac * linalg::mean_diagonal(h.values);
    if (lambda_frac > 0.0 && lambda == 0.0) lambda = lambda_frac;

    PruningTrajectory traj;
    traj.spec = spec;
    linalg::Matrix w = w0;
    traj.snapshots.push_back(w);
    std::vector<std::uint8_t> removed(static_cast<std::size_t>(spec.group_count()), 0);

    for (int level = 0; level < max_groups; ++level) {
        std::vector<std::size_t> keep;  // surviving columns, ascending
        for (std::size_t g = 0; g < removed.size(); ++g)
            if (!removed[g]) keep.insert(keep.end(), spec.groups[g].begin(), spec.groups[g].end());
        std::sort(keep.begin(), keep.end());
        std::vector<std::size_t> pos_of(w.cols(), 0);
        for (std::size_t p = 0; p < keep.size(); ++p) pos_of[keep[p]] = p;

        const linalg::Matrix hinv = detail::restricted_inverse(h.values, keep, lambda);
        const linalg::Matrix wr = detail::select_columns(w, keep);

        int best = -1;
        double best_imp = std::numeric_limits<double>::infinity();
        std::vector<std::size_t> best_pos;
        for (std::size_t g = 0; g < removed.size(); ++g) {
            if (removed[g]) continue;
            std::vector<std::size_t> pos;
            for (auto c : spec.groups[g]) pos.push_back(pos_of[c]);
            const double imp = obs_importance(wr, hinv, pos);
            if (imp < best_imp) {
                best_imp = imp;
                best = static_cast<int>(g);
                best_pos = std::move(pos);
            }
        }
        if (best < 0) throw Error(ErrorKind::SingularHessian, "no finite importance in " + spec.layer.name());

        const linalg::Matrix delta = obs_compensation(wr, hinv, best_pos);
        for (std::size_t i = 0; i < w.rows(); ++i)
            for (std::size_t p = 0; p < keep.size(); ++p) w(i, keep[p]) += delta(i, p);
        for (std::size_t i = 0; i < w.rows(); ++i)
            for (auto c : spec.groups[static_cast<std::size_t>(best)]) w(i, c) = 0.0;

        removed[static_cast<std::size_t>(best)] = 1;
        traj.steps.push_back({best, best_imp});
        traj.snapshots.push_back(w);
    }
    return traj;
}

}  // namespace diffes::prune
