#pragma once

// Route database: per (stage, layer, level) pruned weights or masks over one
// shared dense backbone, and the routing that turns a per-stage level
// schedule into forward plans.
//
// .routedb layout (little-endian):
//   magic "DFESRTDB", u32 version, string backend, i32 stages, i32 L_max
//   i32 x 7 model config, u32 backbone checksum
//   u32 slot count, per slot: string name, i32 block, i32 kind, i32 rows, i32 cols, i32 groups
//   entries in (stage, slot, level = 1..L_max) order:
//     i32 removed, u32 n_weights, f32[n_weights], u32 n_active, u8[n_active]
//   OBS weights are compact: rows x (input columns of active groups), row-major
//   u32 crc32 of everything above

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "diffes/calib.hpp"
#include "diffes/error.hpp"
#include "diffes/io.hpp"
#include "diffes/prune/stage.hpp"
#include "diffes/toydiff/checkpoint.hpp"
#include "diffes/toydiff/model.hpp"

namespace diffes::routedb {

using prune::Backend;
using toydiff::LayerId;
using toydiff::LayerKind;

/// Structures removed at `level` for a layer with `groups` structures:
/// floor(level * groups / L_max). LayerDrop uses the level itself.
inline int groups_at_level(int level, int l_max, int groups) {
    return static_cast<int>(static_cast<long>(level) * groups / l_max);
}

/// Weights (OBS only, active input columns only) and per-group activity flags. An empty entry means the
/// layer is untouched at that level and resolves to the backbone.
struct RouteEntry {
    int removed = 0;
    std::vector<float> weights;
    std::vector<std::uint8_t> active;

    std::size_t bytes() const noexcept { return weights.size() * sizeof(float) + active.size(); }
    bool empty() const noexcept { return weights.empty() && active.empty(); }
    friend bool operator==(const RouteEntry&, const RouteEntry&) = default;
};

/// A prunable layer, or (block == -1) the block list of a LayerDrop database.
struct LayerSlot {
    LayerId layer;
    int rows = 0;
    int cols = 0;
    int groups = 0;

    bool is_blocks() const noexcept { return layer.block < 0; }
    std::string name() const { return is_blocks() ? "blocks" : layer.name(); }
    friend bool operator==(const LayerSlot&, const LayerSlot&) = default;
};

class RouteDatabase {
public:
    Backend backend = Backend::Obs;
    int stages = 0;
    int l_max = 0;
    toydiff::ModelConfig model_config;
    std::uint32_t backbone_checksum = 0;
    std::vector<LayerSlot> slots;
    std::vector<RouteEntry> entries;

    std::size_t index(int stage, std::size_t slot, int level) const {
        if (stage < 0 || stage >= stages || slot >= slots.size() || level < 1 || level > l_max)
            throw Error(ErrorKind::InvalidSchedule, "route lookup out of range");
        return (static_cast<std::size_t>(stage) * slots.size() + slot) * static_cast<std::size_t>(l_max) +
               static_cast<std::size_t>(level - 1);
    }
    const RouteEntry& entry(int stage, std::size_t slot, int level) const { return entries[index(stage, slot, level)]; }

    std::size_t entry_count() const noexcept { return entries.size(); }
    std::size_t total_bytes() const noexcept {
        std::size_t n = 0;
        for (const auto& e : entries) n += e.bytes();
        return n;
    }
    friend bool operator==(const RouteDatabase&, const RouteDatabase&) = default;
};

namespace detail {

/// Input columns of the active groups, ascending.
inline std::vector<int> active_columns(const LayerSlot& slot, const std::vector<std::uint8_t>& active) {
    const int g = slot.cols / slot.groups;
    std::vector<int> cols;
    for (int k = 0; k < slot.groups; ++k)
        if (active[static_cast<std::size_t>(k)])
            for (int c = k * g; c < (k + 1) * g; ++c) cols.push_back(c);
    return cols;
}

inline const prune::PruningTrajectory* find_layer(const prune::StageTrajectories& st, LayerId id) {
    for (const auto& t : st.layers)
        if (t.spec.layer == id) return &t;
    return nullptr;
}

inline std::string where(int stage, const std::string& name, int level) {
    return "stage " + std::to_string(stage) + ", " + name + ", level " + std::to_string(level);
}

}  // namespace detail

/// Assembles the database from per-stage trajectories. Every (stage, layer,
/// level 1..L_max) entry must be derivable or IncompleteTrajectory is thrown.
inline RouteDatabase build_db(const toydiff::DenoiserModel& backbone, Backend backend,
                              const std::vector<prune::StageTrajectories>& trajectories, int stages, int l_max) {
    const auto& cfg = backbone.config();
    if (stages < 1) throw Error(ErrorKind::InvalidConfig, "stage count must be positive");
    if (l_max < 1) throw Error(ErrorKind::InvalidConfig, "L_max must be positive");
    if (backend == Backend::LayerDrop && l_max > cfg.blocks)
        throw Error(ErrorKind::InvalidConfig, "LayerDrop L_max exceeds the block count");
    RouteDatabase db;
    db.backend = backend;
    db.stages = stages;
    db.l_max = l_max;
    db.model_config = cfg;
    db.backbone_checksum = toydiff::model_checksum(backbone);
    if (backend == Backend::LayerDrop) {
        db.slots.push_back({LayerId{-1, LayerKind::AttnQkv}, 0, 0, cfg.blocks});
    } else {
        for (const auto& spec : prune::prunable_structures(cfg, backend)) {
            const auto& w = backbone.layer_weight(spec.layer);
            db.slots.push_back({spec.layer, w.rows, w.cols, spec.group_count()});
        }
    }

    for (int s = 0; s < stages; ++s) {
        const prune::StageTrajectories* st = nullptr;
        for (const auto& t : trajectories)
            if (t.stage == s) st = &t;
        if (!st) throw Error(ErrorKind::IncompleteTrajectory, "no trajectories for stage " + std::to_string(s));
        for (const auto& slot : db.slots) {
            for (int level = 1; level <= l_max; ++level) {
                RouteEntry e;
                if (slot.is_blocks()) {
                    if (!st->blocks || st->blocks->levels() < level)
                        throw Error(ErrorKind::IncompleteTrajectory, detail::where(s, slot.name(), level));
                    e.removed = level;
                    e.active = st->blocks->active_blocks(level);
                    db.entries.push_back(std::move(e));
                    continue;
                }
                const prune::PruningTrajectory* tr = detail::find_layer(*st, slot.layer);
                const int k = groups_at_level(level, l_max, slot.groups);
                if (!tr || tr->levels() < k)
                    throw Error(ErrorKind::IncompleteTrajectory, detail::where(s, slot.name(), level));
                e.removed = k;
                if (k > 0) {
                    e.active = tr->active_groups(k);
                    if (backend == Backend::Obs) {
                        if (static_cast<int>(tr->snapshots.size()) <= k)
                            throw Error(ErrorKind::IncompleteTrajectory, detail::where(s, slot.name(), level));
                        const auto& snap = tr->snapshots[static_cast<std::size_t>(k)];
                        const auto cols = detail::active_columns(slot, e.active);
                        e.weights.reserve(static_cast<std::size_t>(slot.rows) * cols.size());
                        for (int r = 0; r < slot.rows; ++r)
                            for (int c : cols) e.weights.push_back(static_cast<float>(snap(static_cast<std::size_t>(r), static_cast<std::size_t>(c))));
                    }
                }
                db.entries.push_back(std::move(e));
            }
        }
    }
    return db;
}

/// Resolved stage-conditioned model: one forward plan per stage, pointing
/// into database entries. Plans hold raw pointers, so the database must
/// outlive the routed model.
class RoutedModel {
public:
    const toydiff::DenoiserModel& backbone() const noexcept { return *backbone_; }
    const std::vector<int>& levels() const noexcept { return levels_; }
    const calib::StagePartition& partition() const noexcept { return partition_; }

    /// Plan for sampler timestep t; null (dense backbone) at level 0.
    const toydiff::ForwardPlan* plan_for_t(int t) const { return plan_for_stage(partition_.stage_of(t)); }
    const toydiff::ForwardPlan* plan_for_stage(int stage) const {
        if (levels_.at(static_cast<std::size_t>(stage)) == 0) return nullptr;
        return &plans_[static_cast<std::size_t>(stage)];
    }

private:
    friend RoutedModel route(const RouteDatabase&, const toydiff::DenoiserModel&, const std::vector<int>&,
                             const calib::StagePartition&);
    const toydiff::DenoiserModel* backbone_ = nullptr;
    std::vector<int> levels_;
    calib::StagePartition partition_;
    std::vector<toydiff::ForwardPlan> plans_;
};

inline void check_schedule(const RouteDatabase& db, const std::vector<int>& levels) {
    if (static_cast<int>(levels.size()) != db.stages)
        throw Error(ErrorKind::InvalidSchedule, "schedule has " + std::to_string(levels.size()) + " stages, database has " +
                                                    std::to_string(db.stages));
    for (int l : levels)
        if (l < 0 || l > db.l_max)
            throw Error(ErrorKind::InvalidSchedule, "level " + std::to_string(l) + " outside [0, " + std::to_string(db.l_max) + "]");
}

/// Table resolution only: no weights are copied or modified.
inline RoutedModel route(const RouteDatabase& db, const toydiff::DenoiserModel& backbone, const std::vector<int>& levels,
                         const calib::StagePartition& partition) {
    check_schedule(db, levels);
    if (partition.stages() != db.stages) throw Error(ErrorKind::InvalidSchedule, "partition stage count differs from database");
    if (!(backbone.config() == db.model_config)) throw Error(ErrorKind::InvalidSchedule, "backbone config differs from database");
    RoutedModel rm;
    rm.backbone_ = &backbone;
    rm.levels_ = levels;
    rm.partition_ = partition;
    const int blocks = db.model_config.blocks;
    for (int s = 0; s < db.stages; ++s) {
        toydiff::ForwardPlan plan;
        plan.blocks.resize(static_cast<std::size_t>(blocks));
        const int level = levels[static_cast<std::size_t>(s)];
        if (level > 0) {
            for (std::size_t k = 0; k < db.slots.size(); ++k) {
                const auto& slot = db.slots[k];
                const RouteEntry& e = db.entry(s, k, level);
                if (slot.is_blocks()) {
                    for (int b = 0; b < blocks; ++b) plan.blocks[static_cast<std::size_t>(b)].skip = !e.active[static_cast<std::size_t>(b)];
                    continue;
                }
                if (e.empty()) continue;
                auto& br = plan.blocks[static_cast<std::size_t>(slot.layer.block)];
                switch (slot.layer.kind) {
                case LayerKind::AttnOut: br.attn_out_weight = e.weights.data(); [[fallthrough]];
                case LayerKind::AttnQkv: br.head_active = e.active.data(); break;
                case LayerKind::MlpFc2: br.fc2_weight = e.weights.data(); [[fallthrough]];
                case LayerKind::MlpFc1: br.channel_active = e.active.data(); break;
                }
            }
        }
        rm.plans_.push_back(std::move(plan));
    }
    return rm;
}

/// A full model copy with the stage's pruning physically applied (removed
/// structures zeroed, dropped blocks reduced to their residual path). Used
/// as the model-stitching reference for routing.
inline toydiff::DenoiserModel materialize(const RouteDatabase& db, const toydiff::DenoiserModel& backbone, int stage, int level) {
    toydiff::DenoiserModel m = backbone;
    if (level == 0) return m;
    const auto& cfg = db.model_config;
    const int e_dim = cfg.embed, d = cfg.head_dim();
    for (std::size_t k = 0; k < db.slots.size(); ++k) {
        const auto& slot = db.slots[k];
        const RouteEntry& e = db.entry(stage, k, level);
        if (slot.is_blocks()) {
            for (int b = 0; b < cfg.blocks; ++b) {
                if (e.active[static_cast<std::size_t>(b)]) continue;
                for (auto kind : {LayerKind::AttnOut, LayerKind::MlpFc2}) {
                    auto& w = m.layer_weight({b, kind}).w;
                    auto& bias = m.layer_bias({b, kind}).w;
                    std::fill(w.begin(), w.end(), 0.0f);
                    std::fill(bias.begin(), bias.end(), 0.0f);
                }
            }
            continue;
        }
        if (e.empty()) continue;
        auto& w = m.layer_weight(slot.layer);
        if (!e.weights.empty()) {
            const auto cols = detail::active_columns(slot, e.active);
            std::fill(w.w.begin(), w.w.end(), 0.0f);
            std::size_t i = 0;
            for (int r = 0; r < w.rows; ++r)
                for (int c : cols) w.w[static_cast<std::size_t>(r * w.cols + c)] = e.weights[i++];
        }
        for (int g = 0; g < slot.groups; ++g) {
            if (e.active[static_cast<std::size_t>(g)]) continue;
            switch (slot.layer.kind) {
            case LayerKind::AttnOut:
                for (int r = 0; r < w.rows; ++r)
                    for (int c = g * d; c < (g + 1) * d; ++c) w.w[static_cast<std::size_t>(r * w.cols + c)] = 0.0f;
                break;
            case LayerKind::MlpFc2:
                for (int r = 0; r < w.rows; ++r) w.w[static_cast<std::size_t>(r * w.cols + g)] = 0.0f;
                break;
            case LayerKind::AttnQkv: {
                auto& bias = m.layer_bias(slot.layer).w;
                for (int part = 0; part < 3; ++part)
                    for (int i = 0; i < d; ++i) {
                        const int row = part * e_dim + g * d + i;
                        std::fill_n(w.w.begin() + row * w.cols, w.cols, 0.0f);
                        bias[static_cast<std::size_t>(row)] = 0.0f;
                    }
                break;
            }
            case LayerKind::MlpFc1:
                std::fill_n(w.w.begin() + g * w.cols, w.cols, 0.0f);
                m.layer_bias(slot.layer).w[static_cast<std::size_t>(g)] = 0.0f;
                break;
            }
        }
    }
    return m;
}

inline std::size_t backbone_bytes(const toydiff::ModelConfig& cfg) {
    return toydiff::DenoiserModel(cfg).param_count() * sizeof(float);
}

/// Bytes of a stand-alone model with the stage's structures physically
/// removed: a head takes its qkv rows and attn.out columns with it, a hidden
/// channel its fc1 row and fc2 column, a dropped block all of its parameters.
inline std::size_t pruned_model_bytes(const RouteDatabase& db, int stage, int level) {
    const auto& cfg = db.model_config;
    const std::size_t dense = backbone_bytes(cfg);
    if (level == 0) return dense;
    const std::size_t e = static_cast<std::size_t>(cfg.embed), d = static_cast<std::size_t>(cfg.head_dim());
    const std::size_t head = 3 * d * e + 3 * d + e * d;
    const std::size_t channel = 2 * e + 1;
    const std::size_t block = 3 * e * e + 3 * e + e * e + e + 2 * e * static_cast<std::size_t>(cfg.hidden) +
                              static_cast<std::size_t>(cfg.hidden) + e;
    std::size_t removed = 0;
    for (std::size_t k = 0; k < db.slots.size(); ++k) {
        const auto& slot = db.slots[k];
        const auto n = static_cast<std::size_t>(db.entry(stage, k, level).removed);
        if (slot.is_blocks()) removed += n * block;
        else if (slot.layer.kind == LayerKind::AttnOut || slot.layer.kind == LayerKind::AttnQkv) removed += n * head;
        else removed += n * channel;
    }
    return dense - removed * sizeof(float);
}

struct MemoryReport {
    std::size_t backbone_bytes = 0;
    std::size_t routed_entry_bytes = 0;  // entries referenced by the schedule
    std::size_t routing_bytes = 0;       // backbone + routed entries
    std::size_t stitching_bytes = 0;     // one pruned model per stage
    std::size_t database_bytes = 0;      // every stored entry
    double ratio = 0.0;                  // routing / stitching

    nlohmann::json to_json() const {
        return {{"routing_bytes", routing_bytes},   {"stitching_bytes", stitching_bytes},
                {"ratio", ratio},                   {"backbone_bytes", backbone_bytes},
                {"routed_entry_bytes", routed_entry_bytes}, {"database_bytes", database_bytes}};
    }
};

/// Loading memory for one schedule: routing keeps the dense backbone plus the
/// entries the schedule selects; stitching keeps one pruned model per stage.
inline MemoryReport memory_report(const RouteDatabase& db, const std::vector<int>& levels) {
    check_schedule(db, levels);
    MemoryReport r;
    r.backbone_bytes = backbone_bytes(db.model_config);
    r.database_bytes = db.total_bytes();
    for (int s = 0; s < db.stages; ++s) {
        const int level = levels[static_cast<std::size_t>(s)];
        r.stitching_bytes += pruned_model_bytes(db, s, level);
        if (level == 0) continue;
        for (std::size_t k = 0; k < db.slots.size(); ++k) r.routed_entry_bytes += db.entry(s, k, level).bytes();
    }
    r.routing_bytes = r.backbone_bytes + r.routed_entry_bytes;
    r.ratio = static_cast<double>(r.routing_bytes) / static_cast<double>(r.stitching_bytes);
    return r;
}

inline constexpr std::uint32_t kRouteDbVersion = 1;

inline void save_db(const RouteDatabase& db, const std::filesystem::path& path) {
    {
        io::Writer w(path);
        w.put_magic("DFESRTDB");
        w.put<std::uint32_t>(kRouteDbVersion);
        w.put_string(prune::to_string(db.backend));
        w.put<std::int32_t>(db.stages);
        w.put<std::int32_t>(db.l_max);
        const auto& c = db.model_config;
        for (int v : {c.image_side, c.patch, c.embed, c.heads, c.hidden, c.blocks, c.classes}) w.put<std::int32_t>(v);
        w.put<std::uint32_t>(db.backbone_checksum);
        w.put<std::uint32_t>(static_cast<std::uint32_t>(db.slots.size()));
        for (const auto& s : db.slots) {
            w.put_string(s.name());
            w.put<std::int32_t>(s.layer.block);
            w.put<std::int32_t>(static_cast<std::int32_t>(s.layer.kind));
            w.put<std::int32_t>(s.rows);
            w.put<std::int32_t>(s.cols);
            w.put<std::int32_t>(s.groups);
        }
        for (const auto& e : db.entries) {
            w.put<std::int32_t>(e.removed);
            w.put<std::uint32_t>(static_cast<std::uint32_t>(e.weights.size()));
            w.put_array<float>(e.weights);
            w.put<std::uint32_t>(static_cast<std::uint32_t>(e.active.size()));
            w.put_array<std::uint8_t>(e.active);
        }
        w.close();
    }
    const std::uint32_t crc = io::file_crc32(path);
    std::ofstream out(path, std::ios::binary | std::ios::app);
    out.write(reinterpret_cast<const char*>(&crc), sizeof(crc));
    if (!out) throw Error(ErrorKind::InvalidConfig, "failed writing " + path.string());
}

/// The CRC-32 stored in the file trailer, identifying a database file.
inline std::uint32_t db_checksum(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw Error(ErrorKind::InvalidConfig, "cannot open " + path.string());
    if (in.tellg() < 4) throw Error(ErrorKind::CorruptFile, path.string() + ": truncated");
    in.seekg(-4, std::ios::end);
    std::uint32_t stored = 0;
    in.read(reinterpret_cast<char*>(&stored), sizeof(stored));
    return stored;
}

inline RouteDatabase load_db(const std::filesystem::path& path) {
    {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw Error(ErrorKind::InvalidConfig, "cannot open " + path.string());
        std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        if (buf.size() < 4) throw Error(ErrorKind::CorruptFile, path.string() + ": truncated");
        std::uint32_t stored = 0;
        std::memcpy(&stored, buf.data() + buf.size() - 4, 4);
        boost::crc_32_type crc;
        crc.process_bytes(buf.data(), buf.size() - 4);
        if (crc.checksum() != stored) throw Error(ErrorKind::CorruptFile, path.string() + ": checksum mismatch");
    }
    io::Reader r(path);
    r.expect_magic("DFESRTDB");
    if (r.get<std::uint32_t>() != kRouteDbVersion) throw Error(ErrorKind::CorruptFile, "unsupported route database version");
    RouteDatabase db;
    db.backend = prune::parse_backend(r.get_string());
    db.stages = r.get<std::int32_t>();
    db.l_max = r.get<std::int32_t>();
    auto& c = db.model_config;
    for (int* v : {&c.image_side, &c.patch, &c.embed, &c.heads, &c.hidden, &c.blocks, &c.classes}) *v = r.get<std::int32_t>();
    c.validate();
    db.backbone_checksum = r.get<std::uint32_t>();
    const auto n_slots = r.get<std::uint32_t>();
    if (db.stages < 1 || db.l_max < 1 || n_slots > 4096) throw Error(ErrorKind::CorruptFile, "bad route database header");
    for (std::uint32_t i = 0; i < n_slots; ++i) {
        LayerSlot s;
        r.get_string();
        s.layer.block = r.get<std::int32_t>();
        s.layer.kind = static_cast<LayerKind>(r.get<std::int32_t>());
        s.rows = r.get<std::int32_t>();
        s.cols = r.get<std::int32_t>();
        s.groups = r.get<std::int32_t>();
        const int kind = static_cast<int>(s.layer.kind);
        // OBS slots group input columns, Wanda slots output rows
        const bool by_rows = s.layer.kind == LayerKind::AttnQkv || s.layer.kind == LayerKind::MlpFc1;
        if (kind < 0 || kind >= toydiff::kLayersPerBlock || s.groups < 1 || s.layer.block >= c.blocks ||
            (!s.is_blocks() && (s.rows < 1 || s.cols < 1 || (by_rows ? s.rows : s.cols) % s.groups != 0)))
            throw Error(ErrorKind::CorruptFile, "bad layer slot in route database");
        db.slots.push_back(s);
    }
    const std::size_t n_entries = static_cast<std::size_t>(db.stages) * db.slots.size() * static_cast<std::size_t>(db.l_max);
    for (std::size_t i = 0; i < n_entries; ++i) {
        RouteEntry e;
        e.removed = r.get<std::int32_t>();
        e.weights = r.get_array<float>(r.get<std::uint32_t>());
        e.active = r.get_array<std::uint8_t>(r.get<std::uint32_t>());
        const auto& slot = db.slots[(i / static_cast<std::size_t>(db.l_max)) % db.slots.size()];
        if (!e.active.empty() && static_cast<int>(e.active.size()) != slot.groups)
            throw Error(ErrorKind::CorruptFile, "route database entry mask has the wrong length");
        if (!e.weights.empty() && (e.active.empty() || e.weights.size() != static_cast<std::size_t>(slot.rows) * detail::active_columns(slot, e.active).size()))
            throw Error(ErrorKind::CorruptFile, "route database entry weights have the wrong size");
        db.entries.push_back(std::move(e));
    }
    return db;
}

}  // namespace diffes::routedb
