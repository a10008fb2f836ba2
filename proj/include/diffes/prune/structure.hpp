#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "diffes/error.hpp"
#include "diffes/linalg.hpp"
#include "diffes/toydiff/model.hpp"

namespace diffes::prune {

using toydiff::LayerId;
using toydiff::LayerKind;

enum class Axis { Columns, Rows };

// Head groups average over their member rows, channel groups over the
// layer's input width (the two structural Wanda aggregations).
enum class GroupKind { Head, Channel };

/// Partition of one layer's prunable indices (columns or rows of W) into
/// equal-size groups.
struct StructureSpec {
    LayerId layer;
    Axis axis = Axis::Columns;
    GroupKind kind = GroupKind::Channel;
    int group_size = 1;
    std::vector<std::vector<std::size_t>> groups;

    int group_count() const noexcept { return static_cast<int>(groups.size()); }

    void validate(std::size_t extent) const {
        std::vector<std::size_t> all;
        for (const auto& g : groups) {
            if (static_cast<int>(g.size()) != group_size)
                throw Error(ErrorKind::InvalidShape, "groups of " + layer.name() + " differ in size");
            all.insert(all.end(), g.begin(), g.end());
        }
        std::sort(all.begin(), all.end());
        if (all.size() != extent || std::adjacent_find(all.begin(), all.end()) != all.end() ||
            (!all.empty() && all.back() >= extent))
            throw Error(ErrorKind::InvalidShape, "groups do not partition " + layer.name());
    }
};

/// Contiguous groups of size g over [0, extent).
inline StructureSpec contiguous_groups(LayerId layer, Axis axis, GroupKind kind, int extent, int g) {
    if (g < 1 || extent % g != 0) throw Error(ErrorKind::InvalidShape, "group size must divide the layer extent");
    StructureSpec s{layer, axis, kind, g, {}};
    for (int start = 0; start < extent; start += g) {
        std::vector<std::size_t> grp;
        for (int i = start; i < start + g; ++i) grp.push_back(static_cast<std::size_t>(i));
        s.groups.push_back(std::move(grp));
    }
    return s;
}

/// Rows of a fused qkv projection grouped by head: head h owns its q, k and v rows.
inline StructureSpec qkv_head_rows(LayerId layer, int embed, int heads) {
    const int d = embed / heads;
    StructureSpec s{layer, Axis::Rows, GroupKind::Head, 3 * d, {}};
    for (int h = 0; h < heads; ++h) {
        std::vector<std::size_t> grp;
        for (int part = 0; part < 3; ++part)
            for (int i = 0; i < d; ++i) grp.push_back(static_cast<std::size_t>(part * embed + h * d + i));
        s.groups.push_back(std::move(grp));
    }
    return s;
}

struct PruneStep {
    int group = -1;
    double importance = 0.0;
};

/// Greedy removal order for one (stage, layer). Level k has the groups of
/// steps[0..k) removed; snapshots[k] holds the layer weights at level k
/// when the backend updates weights (empty for mask-only backends).
struct PruningTrajectory {
    int stage = 0;
    StructureSpec spec;
    std::vector<PruneStep> steps;
    std::vector<linalg::Matrix> snapshots;

    int levels() const noexcept { return static_cast<int>(steps.size()); }

    /// 1 for groups still present at level k, 0 for removed ones.
    std::vector<std::uint8_t> active_groups(int k) const {
        if (k < 0 || k > levels()) throw Error(ErrorKind::InvalidInput, "trajectory level out of range");
        std::vector<std::uint8_t> active(static_cast<std::size_t>(spec.group_count()), 1);
        for (int i = 0; i < k; ++i) active[static_cast<std::size_t>(steps[static_cast<std::size_t>(i)].group)] = 0;
        return active;
    }
};

/// Float weights of a layer as a double matrix.
inline linalg::Matrix to_matrix(const toydiff::Tensor& t) {
    return linalg::Matrix(static_cast<std::size_t>(t.rows), static_cast<std::size_t>(t.cols),
                          std::vector<double>(t.w.begin(), t.w.end()));
}

}  // namespace diffes::prune
