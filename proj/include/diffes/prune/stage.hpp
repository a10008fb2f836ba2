#pragma once

// Per-stage trajectories for every prunable layer of the toy denoiser.

#include <optional>
#include <string>
#include <vector>

#include "diffes/calib.hpp"
#include "diffes/error.hpp"
#include "diffes/prune/layerdrop.hpp"
#include "diffes/prune/obs.hpp"
#include "diffes/prune/wanda.hpp"

namespace diffes::prune {

enum class Backend { Obs, Wanda, LayerDrop };

inline std::string to_string(Backend b) {
    switch (b) {
    case Backend::Obs: return "obs";
    case Backend::Wanda: return "wanda";
    case Backend::LayerDrop: return "layerdrop";
    }
    return "?";
}

inline Backend parse_backend(const std::string& s) {
    if (s == "obs") return Backend::Obs;
    if (s == "wanda") return Backend::Wanda;
    if (s == "layerdrop") return Backend::LayerDrop;
    throw Error(ErrorKind::InvalidConfig, "unknown backend '" + s + "' (expected obs, wanda or layerdrop)");
}

/// Prunable structures per backend. OBS removes head-sized column groups of
/// attn.out and single input columns of mlp.fc2 (a removed hidden channel);
/// Wanda masks head row groups of attn.qkv and single rows of mlp.fc1.
/// Both remove the same heads/channels, just seen from opposite sides.
inline std::vector<StructureSpec> prunable_structures(const toydiff::ModelConfig& cfg, Backend backend) {
    std::vector<StructureSpec> specs;
    for (int b = 0; b < cfg.blocks; ++b) {
        if (backend == Backend::Obs) {
            specs.push_back(contiguous_groups({b, LayerKind::AttnOut}, Axis::Columns, GroupKind::Head, cfg.embed, cfg.head_dim()));
            specs.push_back(contiguous_groups({b, LayerKind::MlpFc2}, Axis::Columns, GroupKind::Channel, cfg.hidden, 1));
        } else if (backend == Backend::Wanda) {
            specs.push_back(qkv_head_rows({b, LayerKind::AttnQkv}, cfg.embed, cfg.heads));
            specs.push_back(contiguous_groups({b, LayerKind::MlpFc1}, Axis::Rows, GroupKind::Channel, cfg.hidden, 1));
        }
    }
    return specs;
}

struct StageTrajectories {
    int stage = 0;
    std::vector<PruningTrajectory> layers;   // OBS / Wanda
    std::optional<BlockDropTrajectory> blocks;  // LayerDrop
};

/// Trajectories of one stage, computed from that stage's calibration only.
/// Layers are pruned down to all of their groups (blocks for LayerDrop).
inline StageTrajectories build_stage(const toydiff::DenoiserModel& model, Backend backend, const calib::CalibrationSet& c,
                                     double lambda_frac = linalg::kDefaultDampingFrac) {
    StageTrajectories out;
    out.stage = c.stage;
    if (backend == Backend::LayerDrop) {
        auto t = layerdrop_trajectory(layerdrop_scores(model, c), model.config().blocks);
        t.stage = c.stage;
        out.blocks = std::move(t);
        return out;
    }
    const calib::ActivationBundle acts = calib::capture_activations(model, c);
    for (const auto& spec : prunable_structures(model.config(), backend)) {
        const linalg::Matrix w = to_matrix(model.layer_weight(spec.layer));
        const linalg::Matrix& x = acts.at(spec.layer);
        PruningTrajectory t;
        try {
            if (backend == Backend::Obs)
                t = obs_prune_layer(w, linalg::gram(x), spec, spec.group_count(), lambda_frac);
            else
                t = wanda_prune_layer(wanda_scores(w, x, spec), spec.group_count());
        } catch (const Error& e) {
            throw Error(e.kind(), "stage " + std::to_string(c.stage) + ", " + spec.layer.name() + ": " + e.detail());
        }
        t.stage = c.stage;
        out.layers.push_back(std::move(t));
    }
    return out;
}

inline std::vector<StageTrajectories> build_stage_trajectories(const toydiff::DenoiserModel& model, Backend backend,
                                                               const std::vector<calib::CalibrationSet>& calibs,
                                                               double lambda_frac = linalg::kDefaultDampingFrac) {
    if (calibs.empty()) throw Error(ErrorKind::InvalidConfig, "one calibration set per stage required");
    std::vector<StageTrajectories> out;
    for (const auto& c : calibs) out.push_back(build_stage(model, backend, c, lambda_frac));
    return out;
}

}  // namespace diffes::prune
