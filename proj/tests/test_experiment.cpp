#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "diffes/experiment.hpp"

#ifndef DIFFES_CLI_PATH
#define DIFFES_CLI_PATH "diffes"
#endif

using namespace diffes;
using namespace diffes::experiment;
namespace fs = std::filesystem;

namespace {

ExperimentConfig parse(const std::string& text) { return from_json(json::parse(text)); }

ErrorKind parse_error(const std::string& text) {
    try {
        parse(text).validate();
    } catch (const Error& e) {
        return e.kind();
    }
    return ErrorKind::InvalidShape;  // sentinel: no error
}

// a pipeline small enough to run in seconds
const char* kTinyConfig = R"({
  "dataset": {"size": 64},
  "train": {"epochs": 1, "batch_size": 16},
  "calibration": {"size": 8},
  "search": {"population": 4, "offspring": 3, "survivors": 1, "generations": 2, "mutation_max": 3, "fitness_samples": 2},
  "evaluate": {"samples": 4},
  "compare": {"seeds": [1, 2], "random_count": 2}
})";

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() / ("diffes_cli_" + std::to_string(::getpid()) + "_" +
                                            ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::remove_all(dir_);
        fs::create_directories(dir_);
        write("config.json", kTinyConfig);
    }
    void TearDown() override { fs::remove_all(dir_); }

    void write(const std::string& name, const std::string& text) { std::ofstream(dir_ / name) << text; }

    int run(const std::string& args, const std::string& config = "config.json") {
        const std::string cmd = std::string(DIFFES_CLI_PATH) + " -c " + (dir_ / config).string() + " -o " + (dir_ / "out").string() +
                                " " + args + " > " + (dir_ / "log.txt").string() + " 2>&1";
        const int status = std::system(cmd.c_str());
        return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    }

    std::string log() const {
        std::ifstream in(dir_ / "log.txt");
        std::stringstream ss;
        ss << in.rdbuf();
        return ss.str();
    }

    std::string bytes(const fs::path& p) const {
        std::ifstream in(p, std::ios::binary);
        std::stringstream ss;
        ss << in.rdbuf();
        return ss.str();
    }

    fs::path out() const { return dir_ / "out"; }

    fs::path dir_;
};

}  // namespace

TEST(ExperimentConfig, DefaultsRoundTripThroughJson) {
    const ExperimentConfig def;
    EXPECT_NO_THROW(def.validate());
    EXPECT_EQ(to_json(from_json(to_json(def))), to_json(def));
    EXPECT_EQ(to_json(parse("{}")), to_json(def));
    const auto c = parse(R"({"stages": 5, "search": {"generations": 7, "init": "patterned"}, "model": {"hidden": 32}})");
    EXPECT_EQ(c.stages, 5);
    EXPECT_EQ(c.generations, 7);
    EXPECT_EQ(c.model.hidden, 32);
    EXPECT_EQ(c.search_config().init, evo::InitMode::Patterned);
    EXPECT_EQ(c.search_config().budget(), 5 * 8);
    EXPECT_EQ(c.db_path().filename(), "db_obs_n5.routedb");
}

TEST(ExperimentConfig, RejectsBadConfigs) {
    EXPECT_EQ(parse_error(R"({"stagez": 3})"), ErrorKind::InvalidConfig);
    EXPECT_EQ(parse_error(R"({"search": {"generation": 3}})"), ErrorKind::InvalidConfig);
    EXPECT_EQ(parse_error(R"({"stages": "ten"})"), ErrorKind::InvalidConfig);
    EXPECT_EQ(parse_error(R"({"model": 3})"), ErrorKind::InvalidConfig);
    EXPECT_EQ(parse_error(R"({"sampler": {"eta": 0.5}})"), ErrorKind::InvalidConfig);
    EXPECT_EQ(parse_error(R"({"stages": 3})"), ErrorKind::InvalidConfig);  // 20 steps do not split into 3 stages
    EXPECT_EQ(parse_error(R"({"backend": "layerdrop"})"), ErrorKind::InvalidConfig);  // L_max 16 > 4 blocks
    EXPECT_EQ(parse_error(R"({"backend": "layerdrop", "l_max": 4, "target_level": 2})"), ErrorKind::InvalidShape);
    EXPECT_EQ(parse(R"({"backend": "layerdrop", "l_max": 4})").mutation_max, 1);  // derived from L_max when absent
    EXPECT_EQ(parse_error(R"({"l_max": 4, "search": {"mutation_max": 5}})"), ErrorKind::InvalidConfig);
    EXPECT_EQ(parse_error(R"({"target_level": 17})"), ErrorKind::InvalidConfig);
    EXPECT_EQ(parse_error(R"({"search": {"metric": "fid"}})"), ErrorKind::InvalidConfig);
    EXPECT_EQ(parse_error(R"({"search": {"population": 10}})"), ErrorKind::InvalidConfig);
    EXPECT_THROW(from_json(json::array()), Error);
}

TEST_F(Cli, FullPipelineProducesEveryArtefact) {
    ASSERT_EQ(run("train"), 0) << log();
    EXPECT_TRUE(fs::exists(out() / "model.ckpt"));
    EXPECT_TRUE(fs::exists(out() / "train_loss.csv"));
    ASSERT_EQ(run("build-db"), 0) << log();
    EXPECT_TRUE(fs::exists(out() / "db_obs_n10.routedb"));
    EXPECT_NE(log().find(hex32(routedb::db_checksum(out() / "db_obs_n10.routedb"))), std::string::npos);
    ASSERT_EQ(run("search"), 0) << log();
    for (const char* f : {"best_schedule.json", "search_history.csv", "search_result.json"}) EXPECT_TRUE(fs::exists(out() / f)) << f;
    const auto best = load_levels(out() / "best_schedule.json");
    ASSERT_EQ(best.size(), 10u);
    EXPECT_EQ(std::accumulate(best.begin(), best.end(), 0), 80);
    ASSERT_EQ(run("compare"), 0) << log();
    EXPECT_TRUE(fs::exists(out() / "compare.csv"));
    ASSERT_EQ(run("evaluate"), 0) << log();
    std::ifstream in(out() / "report.json");
    const json report = json::parse(in);
    EXPECT_EQ(report["budget_respected"], true);
    EXPECT_EQ(report["schedule"].get<std::vector<int>>(), best);
    EXPECT_DOUBLE_EQ(report["global_sparsity"].get<double>(), 0.5);
    auto resolved = load_config(dir_ / "config.json");
    resolved.output_dir = out().string();
    EXPECT_EQ(report["config"], to_json(resolved));
    std::vector<std::string> rows;
    for (const auto& r : report["rows"]) rows.push_back(r["name"]);
    EXPECT_EQ(rows, (std::vector<std::string>{"schedule", "uniform", "random", "greedy"}));
    EXPECT_LT(report["memory"]["ratio"].get<double>(), 1.0);
    ASSERT_EQ(run("memory-report"), 0) << log();
    EXPECT_TRUE(fs::exists(out() / "memory.json"));
}

TEST_F(Cli, CommandsAreIdempotent) {
    ASSERT_EQ(run("train"), 0) << log();
    const auto ckpt = bytes(out() / "model.ckpt");
    ASSERT_EQ(run("build-db"), 0) << log();
    const auto db = bytes(out() / "db_obs_n10.routedb");
    ASSERT_EQ(run("search"), 0) << log();
    const auto best = bytes(out() / "best_schedule.json"), hist = bytes(out() / "search_history.csv");
    ASSERT_EQ(run("train"), 0);
    ASSERT_EQ(run("build-db"), 0);
    ASSERT_EQ(run("search"), 0);
    EXPECT_EQ(bytes(out() / "model.ckpt"), ckpt);
    EXPECT_EQ(bytes(out() / "db_obs_n10.routedb"), db);
    EXPECT_EQ(bytes(out() / "best_schedule.json"), best);
    EXPECT_EQ(bytes(out() / "search_history.csv"), hist);
}

TEST_F(Cli, FlagsOverrideConfigKeys) {
    ASSERT_EQ(run("train"), 0) << log();
    ASSERT_EQ(run("--stages 5 --backend wanda build-db"), 0) << log();
    EXPECT_TRUE(fs::exists(out() / "db_wanda_n5.routedb"));
    ASSERT_EQ(run("--stages 5 --backend wanda --target-level 4 --generations 1 --seed 3 search"), 0) << log();
    const auto best = load_levels(out() / "best_schedule.json");
    EXPECT_EQ(best.size(), 5u);
    EXPECT_EQ(std::accumulate(best.begin(), best.end(), 0), 20);
    // layerdrop on a channel-sized config rescales the level range to the blocks
    ASSERT_EQ(run("--backend layerdrop build-db"), 0) << log();
    EXPECT_TRUE(fs::exists(out() / "db_layerdrop_n10.routedb"));
}

TEST_F(Cli, ExitCodes) {
    EXPECT_EQ(run(""), 2);                                // no subcommand
    EXPECT_EQ(run("frobnicate"), 2);
    write("broken.json", "{ \"stages\": ");
    EXPECT_EQ(run("train", "broken.json"), 2);
    write("unknown.json", R"({"stagez": 10})");
    EXPECT_EQ(run("train", "unknown.json"), 2);
    EXPECT_EQ(run("train", "missing.json"), 2);
    EXPECT_EQ(run("search"), 2) << log();                // no checkpoint
    EXPECT_NE(log().find("train"), std::string::npos);

    write("diverge.json", R"({"dataset": {"size": 64}, "train": {"epochs": 2, "batch_size": 16, "lr": 1e30}})");
    EXPECT_EQ(run("train", "diverge.json"), 3) << log();

    ASSERT_EQ(run("train"), 0) << log();
    EXPECT_EQ(run("search"), 4) << log();                // no database
    EXPECT_EQ(run("--stages 5 search"), 4) << log();
    ASSERT_EQ(run("build-db"), 0) << log();
    write("other_model.json", R"({"dataset": {"size": 64}, "model": {"hidden": 32}})");
    EXPECT_EQ(run("search", "other_model.json"), 2) << log();  // checkpoint does not match
    write("bad_schedule.json", "[1, 2, 3]");
    EXPECT_EQ(run("evaluate --schedule " + (dir_ / "bad_schedule.json").string()), 2) << log();

    // corrupt the database
    const fs::path db = out() / "db_obs_n10.routedb";
    auto b = bytes(db);
    b[b.size() / 2] ^= 0x01;
    std::ofstream(db, std::ios::binary | std::ios::trunc) << b;
    EXPECT_EQ(run("search"), 2) << log();
}
