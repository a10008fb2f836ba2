// diffes: train a toy denoiser, build a pruning route database, search
// stage-wise sparsity schedules and report on them.
//
// Exit codes: 0 success, 2 configuration error, 3 numerical failure,
// 4 incomplete database.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "diffes/experiment.hpp"

namespace fs = std::filesystem;
using namespace diffes;
using namespace diffes::experiment;

namespace {

struct Overrides {
    std::string config_path;
    std::string output_dir;
    std::optional<std::uint64_t> seed;
    std::optional<int> stages;
    std::optional<std::string> backend;
    std::optional<int> target_level;
    std::optional<int> generations;
    std::string schedule_path;
};

ExperimentConfig resolve(const Overrides& o) {
    ExperimentConfig c = o.config_path.empty() ? ExperimentConfig{} : load_config(o.config_path);
    if (!o.output_dir.empty()) c.output_dir = o.output_dir;
    if (o.seed) c.search_seed = *o.seed;
    if (o.stages) c.stages = *o.stages;
    if (o.backend) c.backend = *o.backend;
    // --backend layerdrop on top of a config sized for channel pruning:
    // rescale the level range to the block count
    if (o.backend && c.backend == "layerdrop" && c.l_max > c.model.blocks) {
        c.target_level = static_cast<int>(std::lround(static_cast<double>(c.target_level) * c.model.blocks / c.l_max));
        c.l_max = c.model.blocks;
        c.mutation_max = std::min(c.mutation_max, evo::default_mutation_max(c.l_max));
    }
    if (o.target_level) c.target_level = *o.target_level;
    if (o.generations) c.generations = *o.generations;
    c.validate();
    return c;
}

class Timer {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

toydiff::DenoiserModel load_model(const ExperimentConfig& c) {
    if (!fs::exists(c.checkpoint_path()))
        throw Error(ErrorKind::InvalidConfig, "checkpoint " + c.checkpoint_path().string() + " not found; run `diffes train` first");
    auto m = toydiff::load_checkpoint(c.checkpoint_path());
    if (!(m.config() == c.model)) throw Error(ErrorKind::InvalidConfig, "checkpoint model config differs from the experiment config");
    return m;
}

routedb::RouteDatabase load_db_for(const ExperimentConfig& c, const toydiff::DenoiserModel& model) {
    if (!fs::exists(c.db_path()))
        throw Error(ErrorKind::IncompleteTrajectory, "route database " + c.db_path().string() + " not found; run `diffes build-db` first");
    auto db = routedb::load_db(c.db_path());
    if (db.backbone_checksum != toydiff::model_checksum(model))
        throw Error(ErrorKind::InvalidConfig, "route database was built from a different checkpoint");
    if (db.stages != c.stages || db.l_max != c.l_max || prune::to_string(db.backend) != c.backend)
        throw Error(ErrorKind::InvalidConfig, "route database does not match stages / l_max / backend of the config");
    return db;
}

std::vector<int> schedule_arg(const Overrides& o, const ExperimentConfig& c) {
    if (!o.schedule_path.empty()) return load_levels(o.schedule_path);
    const fs::path best = c.out() / "best_schedule.json";
    if (fs::exists(best)) return load_levels(best);
    return uniform_levels(c);
}

int cmd_train(const ExperimentConfig& c) {
    Timer t;
    const auto data = dataset(c);
    const TrainOutput out = run_train(c, data);
    write_train_outputs(c, out);
    std::printf("trained %d epochs: loss %.6f -> %.6f (ratio %.3f) in %.1f s\n", c.train.epochs,
                out.loss.empty() ? 0.0 : out.loss.front(), out.loss.empty() ? 0.0 : out.loss.back(),
                out.loss.empty() ? 1.0 : out.loss.back() / out.loss.front(), t.seconds());
    std::printf("checkpoint %s checksum %s\n", c.checkpoint_path().c_str(), hex32(out.checksum).c_str());
    return 0;
}

int cmd_build_db(const ExperimentConfig& c) {
    Timer t;
    const auto model = load_model(c);
    const auto data = dataset(c);
    const auto sched = c.noise_schedule();
    const auto db = run_build_db(c, model, data, sched);
    routedb::save_db(db, c.db_path());
    std::printf("built %s database: %d stages, L_max %d, %zu entries, %zu bytes in %.1f s\n", c.backend.c_str(), db.stages,
                db.l_max, db.entry_count(), db.total_bytes(), t.seconds());
    std::printf("database %s checksum %s\n", c.db_path().c_str(), hex32(routedb::db_checksum(c.db_path())).c_str());
    const auto mem = routedb::memory_report(db, uniform_levels(c)).to_json();
    write_json(c.out() / "memory.json", mem);
    std::printf("%s\n", mem.dump().c_str());
    return 0;
}

evo::ScheduleEvaluator make_evaluator(const ExperimentConfig& c, const toydiff::DenoiserModel& model,
                                      const routedb::RouteDatabase& db, const toydiff::NoiseSchedule& sched,
                                      const fitness::ReferenceCache& ref) {
    return evo::ScheduleEvaluator(model, db, sched, c.sampler_config(), ref.batch, fitness::parse_metric(c.metric), &ref);
}

int cmd_search(const ExperimentConfig& c) {
    Timer t;
    const auto model = load_model(c);
    const auto db = load_db_for(c, model);
    const auto sched = c.noise_schedule();
    const auto data = dataset(c);
    const auto batch = fitness::make_fixed_batch(c.fitness_samples, c.fitness_seed, c.model.classes);
    const auto ref = reference_for(c, model, sched, batch, c.out() / "reference_search.ref", &data);
    auto ev = make_evaluator(c, model, db, sched, ref);
    const SearchOutput out = run_search(c, ev);
    write_history_csv(c.out() / "search_history.csv", out.result.history);
    write_json(c.out() / "best_schedule.json", out.result.best.schedule.levels);
    write_json(c.out() / "search_result.json", to_json(out, c));
    std::printf("search: %d generations, %ld evaluations (%zu distinct) in %.1f s\n", c.generations, out.result.evaluations,
                ev.distinct(), t.seconds());
    std::printf("best %s fitness %.6f (uniform %.6f)\n", join_levels(out.result.best.schedule.levels).c_str(),
                out.result.best.fitness.value(), out.uniform_fitness);
    return 0;
}

int cmd_evaluate(const ExperimentConfig& c, const Overrides& o) {
    Timer t;
    const auto model = load_model(c);
    const auto db = load_db_for(c, model);
    const auto sched = c.noise_schedule();
    const auto data = dataset(c);
    const std::vector<int> levels = schedule_arg(o, c);
    routedb::check_schedule(db, levels);
    const evo::SparsitySchedule target{levels, c.l_max, c.stages * c.target_level};

    const auto batch = fitness::make_fixed_batch(c.eval_samples, c.eval_seed, c.model.classes);
    const auto ref = reference_for(c, model, sched, batch, c.out() / "reference_eval.ref", &data);
    evo::ScheduleEvaluator ev(model, db, sched, c.sampler_config(), batch, fitness::MetricId::SsimVsDense, &ref, 16);

    std::vector<std::pair<std::string, std::vector<int>>> rows{{"schedule", levels}, {"uniform", uniform_levels(c)}};
    std::mt19937_64 rng(c.eval_seed);
    rows.emplace_back("random", evo::random_schedule(c.stages, c.l_max, c.stages * c.target_level, rng).levels);
    const fs::path greedy_path = c.out() / "greedy_schedule.json";
    if (fs::exists(greedy_path)) rows.emplace_back("greedy", load_levels(greedy_path));
    const auto evals = evaluate_schedules(ev, ref, rows);

    json report;
    report["config"] = to_json(c);
    report["checkpoint_checksum"] = hex32(toydiff::model_checksum(model));
    report["database_checksum"] = hex32(routedb::db_checksum(c.db_path()));
    report["schedule"] = levels;
    report["global_sparsity"] = evo::global_sparsity(evo::SparsitySchedule{levels, c.l_max, 0});
    report["budget_respected"] = target.valid();
    report["evaluation"] = {{"samples", c.eval_samples}, {"seed", c.eval_seed}};
    const auto px = static_cast<std::size_t>(ref.pixels);
    report["dense"] = {{"ssim_vs_dense", 1.0},
                       {"energy_distance", fitness::energy_distance({ref.images, px}, {ref.reference_set, px})}};
    json table = json::array();
    for (const auto& e : evals) table.push_back(to_json(e, c.l_max));
    report["rows"] = table;
    report["memory"] = routedb::memory_report(db, levels).to_json();
    const fs::path search_result = c.out() / "search_result.json";
    if (fs::exists(search_result)) {
        std::ifstream in(search_result);
        report["search"] = json::parse(in);
    }
    write_json(c.out() / "report.json", report);
    for (const auto& e : evals)
        std::printf("%-9s ssim_vs_dense %.4f  energy_distance %.4f  [%s]\n", e.name.c_str(), e.ssim_vs_dense,
                    e.energy_distance, join_levels(e.levels).c_str());
    std::printf("report %s written in %.1f s\n", (c.out() / "report.json").c_str(), t.seconds());
    return 0;
}

int cmd_compare(const ExperimentConfig& c) {
    Timer t;
    const auto model = load_model(c);
    const auto db = load_db_for(c, model);
    const auto sched = c.noise_schedule();
    const auto data = dataset(c);
    const auto batch = fitness::make_fixed_batch(c.fitness_samples, c.fitness_seed, c.model.classes);
    const auto ref = reference_for(c, model, sched, batch, c.out() / "reference_search.ref", &data);
    auto ev = make_evaluator(c, model, db, sched, ref);
    const auto rows = run_compare(c, ev);
    write_compare_csv(c.out() / "compare.csv", rows);
    int wins = 0, seeds = 0;
    for (std::size_t i = 0; i < rows.size(); ++i)
        if (rows[i].method == "evolutionary") {
            ++seeds;
            wins += rows[i].fitness >= rows[i - 1].fitness ? 1 : 0;  // preceded by the greedy row of the same seed
        }
    for (const auto& r : rows)
        if (r.method == "greedy") {
            write_json(c.out() / "greedy_schedule.json", r.levels);
            break;
        }
    std::printf("evolutionary >= greedy on %d of %d seeds (%.1f s)\n", wins, seeds, t.seconds());
    return 0;
}

int cmd_memory_report(const ExperimentConfig& c, const Overrides& o) {
    const auto model = load_model(c);
    const auto db = load_db_for(c, model);
    const auto mem = routedb::memory_report(db, schedule_arg(o, c)).to_json();
    write_json(c.out() / "memory.json", mem);
    std::printf("%s\n", mem.dump(2).c_str());
    return 0;
}

int exit_code(ErrorKind k) {
    switch (k) {
    case ErrorKind::SingularHessian:
    case ErrorKind::TrainingDiverged:
    case ErrorKind::DegenerateActivations: return 3;
    case ErrorKind::IncompleteTrajectory: return 4;
    default: return 2;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Stage-wise structural pruning of a toy diffusion model via evolutionary schedule search"};
    app.require_subcommand(1);
    Overrides o;
    app.add_option("-c,--config", o.config_path, "JSON experiment config (defaults apply to missing keys)");
    app.add_option("-o,--output-dir", o.output_dir, "Output directory (overrides output_dir)");
    app.add_option("--seed", o.seed, "Search seed (overrides search.seed)");
    app.add_option("--stages", o.stages, "Number of diffusion stages");
    app.add_option("--backend", o.backend, "Pruning backend: obs, wanda or layerdrop");
    app.add_option("--target-level", o.target_level, "Target level L_t (budget = stages * L_t)");
    app.add_option("--generations", o.generations, "Search generations");

    auto* train = app.add_subcommand("train", "Train the toy denoiser and write a checkpoint");
    auto* build = app.add_subcommand("build-db", "Calibrate, prune every stage and write the route database");
    auto* search = app.add_subcommand("search", "Evolutionary search for a stage-wise sparsity schedule");
    auto* evaluate = app.add_subcommand("evaluate", "Evaluate a schedule against the dense model and baselines");
    auto* compare = app.add_subcommand("compare", "Uniform / random / greedy / evolutionary comparison over seeds");
    auto* memory = app.add_subcommand("memory-report", "Routing versus stitching loading memory for a schedule");
    for (auto* sub : {evaluate, memory}) sub->add_option("--schedule", o.schedule_path, "JSON array of per-stage levels");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        const ExperimentConfig c = resolve(o);
        fs::create_directories(c.out());
        if (train->parsed()) return cmd_train(c);
        if (build->parsed()) return cmd_build_db(c);
        if (search->parsed()) return cmd_search(c);
        if (evaluate->parsed()) return cmd_evaluate(c, o);
        if (compare->parsed()) return cmd_compare(c);
        if (memory->parsed()) return cmd_memory_report(c, o);
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return exit_code(e.kind());
    } catch (const nlohmann::json::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const fs::filesystem_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 2;
}
