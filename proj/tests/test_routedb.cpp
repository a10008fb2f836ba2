#include <filesystem>
#include <fstream>
#include <random>

#include <boost/crc.hpp>
#include <gtest/gtest.h>

#include "diffes/evo.hpp"
#include "diffes/routedb.hpp"
#include "diffes/toydiff/sampler.hpp"
#include "test_util.hpp"

using namespace diffes;
using namespace diffes::routedb;
namespace fs = std::filesystem;

namespace {

constexpr int kStages = 10;

RouteDatabase make_db(Backend backend, int l_max, int calib_size = 32) {
    const auto& m = test::trained_model();
    const calib::StagePartition part(1000, kStages);
    std::vector<calib::CalibrationSet> calibs;
    for (int s = 0; s < kStages; ++s)
        calibs.push_back(calib::build_stage_calibration(test::default_dataset(), s, part, test::default_schedule(), calib_size, 100 + s));
    return build_db(m, backend, prune::build_stage_trajectories(m, backend, calibs), kStages, l_max);
}

const RouteDatabase& obs_db() {
    static const RouteDatabase db = make_db(Backend::Obs, 16);
    return db;
}

std::vector<int> random_levels(std::mt19937_64& rng, int l_max) {
    std::uniform_int_distribution<int> d(0, l_max);
    std::vector<int> v(kStages);
    for (auto& l : v) l = d(rng);
    return v;
}

// DDIM with each step run on the physically pruned model of its stage.
std::vector<float> stitched_sample(const RouteDatabase& db, const std::vector<int>& levels,
                                   std::span<const std::uint64_t> seeds, std::span<const int> labels) {
    const auto& backbone = test::trained_model();
    std::vector<toydiff::DenoiserModel> stage_models;
    for (int s = 0; s < db.stages; ++s) stage_models.push_back(materialize(db, backbone, s, levels[static_cast<std::size_t>(s)]));
    const toydiff::DdimSampler sampler(test::default_schedule(), {});
    const calib::StagePartition part(1000, db.stages);
    auto x = toydiff::DdimSampler::initial_batch(seeds, backbone.config().pixels());
    toydiff::ForwardCache cache;
    for (int step = 0; step < sampler.num_steps(); ++step) {
        const int stage = part.stage_of(sampler.timesteps()[static_cast<std::size_t>(step)]);
        sampler.run(stage_models[static_cast<std::size_t>(stage)], x, labels, step, step + 1, toydiff::dense_plan, cache);
    }
    toydiff::DdimSampler::clip(x);
    return x;
}

std::vector<float> routed_sample(const RouteDatabase& db, const std::vector<int>& levels, std::span<const std::uint64_t> seeds,
                                 std::span<const int> labels) {
    const auto& backbone = test::trained_model();
    const auto rm = route(db, backbone, levels, calib::StagePartition(1000, db.stages));
    return toydiff::DdimSampler(test::default_schedule(), {}).sample_batch(backbone, seeds, labels,
                                                                            [&](int t) { return rm.plan_for_t(t); });
}

double max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
    return m;
}

}  // namespace

TEST(LevelMapping, FloorOfProportionalShare) {
    EXPECT_EQ(groups_at_level(0, 16, 2), 0);
    EXPECT_EQ(groups_at_level(7, 16, 2), 0);
    EXPECT_EQ(groups_at_level(8, 16, 2), 1);
    EXPECT_EQ(groups_at_level(16, 16, 2), 2);
    EXPECT_EQ(groups_at_level(8, 16, 64), 32);
    EXPECT_EQ(groups_at_level(5, 16, 64), 20);
    for (int g : {1, 2, 3, 64})
        for (int l = 1; l <= 16; ++l) {
            EXPECT_GE(groups_at_level(l, 16, g), groups_at_level(l - 1, 16, g));
            EXPECT_LE(groups_at_level(l, 16, g) * 16, l * g);
            EXPECT_GT((groups_at_level(l, 16, g) + 1) * 16, l * g);
        }
}

TEST(BuildDb, LayoutAndCompactEntries) {
    const auto& db = obs_db();
    ASSERT_EQ(db.slots.size(), 8u);
    EXPECT_EQ(db.entry_count(), static_cast<std::size_t>(kStages) * 8 * 16);
    EXPECT_EQ(db.backbone_checksum, toydiff::model_checksum(test::trained_model()));
    for (int s = 0; s < kStages; ++s)
        for (std::size_t k = 0; k < db.slots.size(); ++k) {
            const auto& slot = db.slots[k];
            const int g_size = slot.cols / slot.groups;
            for (int level = 1; level <= 16; ++level) {
                const auto& e = db.entry(s, k, level);
                EXPECT_EQ(e.removed, groups_at_level(level, 16, slot.groups));
                if (e.removed == 0) {
                    EXPECT_TRUE(e.empty());
                    continue;
                }
                ASSERT_EQ(static_cast<int>(e.active.size()), slot.groups);
                EXPECT_EQ(std::count(e.active.begin(), e.active.end(), 0), e.removed);
                EXPECT_EQ(e.weights.size(), static_cast<std::size_t>(slot.rows * (slot.groups - e.removed) * g_size));
                // nested across levels within a stage
                if (level > 1 && !db.entry(s, k, level - 1).empty()) {
                    const auto& prev = db.entry(s, k, level - 1).active;
                    for (int g = 0; g < slot.groups; ++g) EXPECT_LE(e.active[static_cast<std::size_t>(g)], prev[static_cast<std::size_t>(g)]);
                }
            }
        }
    EXPECT_THROW(db.entry(kStages, 0, 1), Error);
    EXPECT_THROW(db.entry(0, 0, 0), Error);
}

TEST(BuildDb, MissingOrShortTrajectoriesAreIncomplete) {
    const auto& m = test::trained_model();
    const auto c = calib::build_stage_calibration(test::default_dataset(), 0, calib::StagePartition(1000, 2), test::default_schedule(), 16, 1);
    auto st = prune::build_stage(m, Backend::Wanda, c);
    auto expect_incomplete = [&](const std::vector<prune::StageTrajectories>& t) {
        try {
            build_db(m, Backend::Wanda, t, 2, 4);
            FAIL();
        } catch (const Error& e) {
            EXPECT_EQ(e.kind(), ErrorKind::IncompleteTrajectory);
        }
    };
    expect_incomplete({st});  // stage 1 missing
    auto st1 = st;
    st1.stage = 1;
    st1.layers[3].steps.resize(10);  // fc1 of block 0 needs 64 removals at level 4
    expect_incomplete({st, st1});
    st1.layers[3] = st.layers[3];
    EXPECT_NO_THROW(build_db(m, Backend::Wanda, {st, st1}, 2, 4));
    EXPECT_THROW(build_db(m, Backend::LayerDrop, {st, st1}, 2, 5), Error);
}

TEST(RouteDbFile, RoundTripAndChecksum) {
    const auto db = make_db(Backend::Wanda, 4, 16);
    const fs::path path = fs::temp_directory_path() / ("diffes_test_" + std::to_string(::getpid()) + ".routedb");
    save_db(db, path);
    EXPECT_EQ(load_db(path), db);

    std::ifstream in(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    boost::crc_32_type crc;
    crc.process_bytes(bytes.data(), bytes.size() - 4);
    EXPECT_EQ(db_checksum(path), crc.checksum());

    auto expect_corrupt = [&](const std::vector<char>& b) {
        std::ofstream(path, std::ios::binary | std::ios::trunc).write(b.data(), static_cast<std::streamsize>(b.size()));
        try {
            load_db(path);
            FAIL();
        } catch (const Error& e) {
            EXPECT_EQ(e.kind(), ErrorKind::CorruptFile);
        }
    };
    auto flipped = bytes;
    flipped[bytes.size() / 2] ^= 0x10;
    expect_corrupt(flipped);
    expect_corrupt(std::vector<char>(bytes.begin(), bytes.begin() + static_cast<long>(bytes.size() / 3)));
    expect_corrupt({});
    for (const auto& other : {obs_db(), make_db(Backend::LayerDrop, 4, 16)}) {
        save_db(other, path);
        EXPECT_EQ(load_db(path), other);
    }
    fs::remove(path);
}

TEST(Routing, AllZeroScheduleIsTheDenseBackbone) {
    const auto& m = test::trained_model();
    const auto rm = route(obs_db(), m, std::vector<int>(kStages, 0), calib::StagePartition(1000, kStages));
    for (int s = 0; s < kStages; ++s) EXPECT_EQ(rm.plan_for_stage(s), nullptr);
    const std::uint64_t seeds[2] = {5, 6};
    const int labels[2] = {0, 3};
    const auto dense = toydiff::DdimSampler(test::default_schedule(), {}).sample_batch(m, seeds, labels, toydiff::dense_plan);
    EXPECT_EQ(routed_sample(obs_db(), std::vector<int>(kStages, 0), seeds, labels), dense);
}

TEST(Routing, PlansPointIntoTheDatabaseAndLeaveTheBackboneAlone) {
    const auto& m = test::trained_model();
    const auto before = toydiff::model_checksum(m);
    const auto& db = obs_db();
    std::vector<int> levels(kStages, 16);
    levels[3] = 0;
    const auto rm = route(db, m, levels, calib::StagePartition(1000, kStages));
    EXPECT_EQ(rm.plan_for_stage(3), nullptr);
    const auto* plan = rm.plan_for_stage(4);
    ASSERT_NE(plan, nullptr);
    EXPECT_EQ(plan->blocks[1].attn_out_weight, db.entry(4, 2, 16).weights.data());
    EXPECT_EQ(plan->blocks[1].head_active, db.entry(4, 2, 16).active.data());
    EXPECT_EQ(plan->blocks[1].fc2_weight, db.entry(4, 3, 16).weights.data());
    EXPECT_EQ(rm.plan_for_t(1000), rm.plan_for_stage(0));
    EXPECT_EQ(toydiff::model_checksum(m), before);
}

TEST(Routing, RejectsInvalidSchedules) {
    const auto& m = test::trained_model();
    const calib::StagePartition part(1000, kStages);
    auto expect_invalid = [&](const std::vector<int>& levels, const calib::StagePartition& p) {
        try {
            route(obs_db(), m, levels, p);
            FAIL();
        } catch (const Error& e) {
            EXPECT_EQ(e.kind(), ErrorKind::InvalidSchedule);
        }
    };
    expect_invalid(std::vector<int>(9, 1), part);
    expect_invalid(std::vector<int>(kStages, 17), part);
    expect_invalid({0, 0, 0, -1, 0, 0, 0, 0, 0, 0}, part);
    expect_invalid(std::vector<int>(kStages, 1), calib::StagePartition(1000, 5));
}

TEST(Routing, SingleForwardMatchesMaterializedModel) {
    const auto& m = test::trained_model();
    const auto& db = obs_db();
    const auto c = calib::build_stage_calibration(test::default_dataset(), 6, calib::StagePartition(1000, kStages), test::default_schedule(), 8, 3);
    for (int level : {1, 5, 8, 13, 16}) {
        std::vector<int> levels(kStages, 0);
        levels[6] = level;
        const auto rm = route(db, m, levels, calib::StagePartition(1000, kStages));
        const auto stitched = materialize(db, m, 6, level);
        toydiff::ForwardCache a, b;
        m.forward(c.latents, c.timesteps, c.labels, rm.plan_for_stage(6), a);
        stitched.forward(c.latents, c.timesteps, c.labels, nullptr, b);
        EXPECT_LE(max_abs_diff(a.eps, b.eps), 1e-6) << "level " << level;
    }
}

TEST(Routing, OverrideWeightWithoutMaskIsRejected) {
    const auto& m = test::trained_model();
    const auto& e = obs_db().entry(0, 0, 8);  // one head left
    ASSERT_FALSE(e.weights.empty());
    toydiff::ForwardPlan plan;
    plan.blocks.resize(4);
    plan.blocks[0].attn_out_weight = e.weights.data();
    toydiff::ForwardCache cache;
    const std::vector<float> img(256, 0.0f);
    const int ts[1] = {500}, ls[1] = {0};
    EXPECT_THROW(m.forward(img, ts, ls, &plan, cache), Error);
}

TEST(Routing, ObsRoutedSamplingMatchesStitchedModels) {
    const auto& db = obs_db();
    std::mt19937_64 rng(2024);
    const std::uint64_t seeds[4] = {11, 12, 13, 14};
    const int labels[4] = {0, 1, 2, 3};
    for (int rep = 0; rep < 20; ++rep) {
        const auto levels = random_levels(rng, 16);
        EXPECT_LE(max_abs_diff(routed_sample(db, levels, seeds, labels), stitched_sample(db, levels, seeds, labels)), 1e-6)
            << "schedule " << rep;
    }
}

TEST(Routing, WandaAndLayerDropRoutedSamplingMatchesStitchedModels) {
    std::mt19937_64 rng(7);
    const std::uint64_t seeds[2] = {21, 22};
    const int labels[2] = {1, 2};
    for (auto [backend, l_max] : {std::pair{Backend::Wanda, 16}, std::pair{Backend::LayerDrop, 4}}) {
        const auto db = make_db(backend, l_max, 16);
        for (int rep = 0; rep < 5; ++rep) {
            const auto levels = random_levels(rng, l_max);
            EXPECT_LE(max_abs_diff(routed_sample(db, levels, seeds, labels), stitched_sample(db, levels, seeds, labels)), 1e-6)
                << prune::to_string(backend) << " schedule " << rep;
        }
    }
}

TEST(Memory, PrunedModelBytesByHand) {
    const auto& db = obs_db();
    // toy config: E = 32, head dim 16, hidden 64, 4 blocks, 16 tokens, patch 16
    const std::size_t block = 96 * 32 + 96 + 32 * 32 + 32 + 64 * 32 + 64 + 32 * 64 + 32;
    const std::size_t dense = 32 * 16 + 32 + 16 * 32 + 32 * 32 + 32 + 4 * 32 + 4 * block + 16 * 32 + 16;
    EXPECT_EQ(backbone_bytes(db.model_config), dense * 4);
    EXPECT_EQ(pruned_model_bytes(db, 0, 0), dense * 4);
    const std::size_t head = 3 * 16 * 32 + 3 * 16 + 32 * 16, channel = 32 + 32 + 1;
    // level 8: one head and 32 channels per block
    EXPECT_EQ(pruned_model_bytes(db, 2, 8), (dense - 4 * (head + 32 * channel)) * 4);
    // level 16: every head and channel, leaving only the residual stream and norms-free blocks' biases
    EXPECT_EQ(pruned_model_bytes(db, 2, 16), (dense - 4 * (2 * head + 64 * channel)) * 4);
}

TEST(Memory, ReportAccounting) {
    const auto& db = obs_db();
    const auto zero = memory_report(db, std::vector<int>(kStages, 0));
    EXPECT_EQ(zero.routed_entry_bytes, 0u);
    EXPECT_EQ(zero.routing_bytes, zero.backbone_bytes);
    EXPECT_EQ(zero.stitching_bytes, kStages * zero.backbone_bytes);
    EXPECT_DOUBLE_EQ(zero.ratio, 1.0 / kStages);

    std::mt19937_64 rng(3);
    for (int rep = 0; rep < 10; ++rep) {
        const auto levels = random_levels(rng, 16);
        const auto r = memory_report(db, levels);
        std::size_t routed = 0, stitched = 0;
        for (int s = 0; s < kStages; ++s) {
            stitched += pruned_model_bytes(db, s, levels[static_cast<std::size_t>(s)]);
            if (levels[static_cast<std::size_t>(s)] == 0) continue;
            for (std::size_t k = 0; k < db.slots.size(); ++k) {
                const auto& e = db.entry(s, k, levels[static_cast<std::size_t>(s)]);
                routed += e.weights.size() * 4 + e.active.size();
            }
        }
        EXPECT_EQ(r.routed_entry_bytes, routed);
        EXPECT_EQ(r.routing_bytes, r.backbone_bytes + routed);
        EXPECT_EQ(r.stitching_bytes, stitched);
        EXPECT_EQ(r.database_bytes, db.total_bytes());
    }
}

TEST(Memory, UniformScheduleRoutingIsBelowSevenTenthsOfStitching) {
    const auto levels = evo::uniform_schedule(kStages, 16, kStages * 8).levels;
    const auto r = memory_report(obs_db(), levels);
    RecordProperty("ratio", std::to_string(r.ratio));
    EXPECT_LT(r.ratio, 0.7);
}

TEST(Memory, ResidentDatabaseAtFortyPercentIsBelowSevenTenthsOfNModels) {
    // 40% global sparsity: 64 of 160 levels
    const auto levels = evo::uniform_schedule(kStages, 16, 64).levels;
    const auto r = memory_report(obs_db(), levels);
    const double dense_n = static_cast<double>(kStages * r.backbone_bytes);
    RecordProperty("resident_ratio", std::to_string(r.routing_bytes / dense_n));
    // every stored level of every stage, for the record only
    RecordProperty("full_database_ratio", std::to_string(r.database_bytes / dense_n));
    EXPECT_LT(r.routing_bytes / dense_n, 0.7);
}
