#pragma once

// Experiment configuration and the pipeline steps behind the command line
// tool: train, build-db, search, evaluate, compare, memory-report.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "diffes/calib.hpp"
#include "diffes/error.hpp"
#include "diffes/evo.hpp"
#include "diffes/fitness.hpp"
#include "diffes/prune/stage.hpp"
#include "diffes/routedb.hpp"
#include "diffes/toydiff/checkpoint.hpp"
#include "diffes/toydiff/dataset.hpp"
#include "diffes/toydiff/model.hpp"
#include "diffes/toydiff/sampler.hpp"
#include "diffes/toydiff/train.hpp"

namespace diffes::experiment {

namespace fs = std::filesystem;
using nlohmann::json;

struct ExperimentConfig {
    std::string output_dir = "out";
    std::uint64_t dataset_seed = 1;
    int dataset_size = 2000;
    toydiff::ModelConfig model;
    std::uint64_t model_seed = 7;
    int T = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    toydiff::TrainConfig train{30, 2e-3, 32, 11, 0.9, 0.999, 1e-8};
    int num_steps = 20;
    int stages = 10;
    std::string backend = "obs";
    int l_max = 16;
    int target_level = 8;
    double damping = linalg::kDefaultDampingFrac;
    int calibration_size = calib::kDefaultCalibrationSize;
    std::uint64_t calibration_seed = 13;
    int population = 20;
    int offspring = 16;
    int survivors = 4;
    int generations = 30;
    int mutation_max = 5;
    std::string init = "random";
    std::uint64_t search_seed = 17;
    std::string metric = "ssim_vs_dense";
    int fitness_samples = 64;
    std::uint64_t fitness_seed = 19;
    int eval_samples = 256;
    std::uint64_t eval_seed = 23;
    std::vector<std::uint64_t> compare_seeds{101, 102, 103, 104, 105};
    int random_baseline_count = 20;

    void validate() const {
        model.validate();
        if (dataset_size < 1) throw Error(ErrorKind::InvalidConfig, "dataset.size must be positive");
        if (stages < 1 || stages > num_steps) throw Error(ErrorKind::InvalidConfig, "stages must lie in [1, sampler.num_steps]");
        if (num_steps % stages != 0) throw Error(ErrorKind::InvalidConfig, "sampler.num_steps must be a multiple of stages");
        prune::parse_backend(backend);
        if (l_max < 1) throw Error(ErrorKind::InvalidConfig, "l_max must be positive");
        if (backend == "layerdrop" && l_max > model.blocks) throw Error(ErrorKind::InvalidConfig, "layerdrop l_max exceeds block count");
        if (target_level < 0 || target_level > l_max) throw Error(ErrorKind::InvalidConfig, "target_level must lie in [0, l_max]");
        if (calibration_size < 1 || fitness_samples < 1 || eval_samples < 1)
            throw Error(ErrorKind::InvalidConfig, "sample counts must be positive");
        if (damping < 0.0) throw Error(ErrorKind::InvalidConfig, "damping must be non-negative");
        fitness::parse_metric(metric);
        search_config().validate();
    }

    evo::SearchConfig search_config() const {
        evo::SearchConfig c;
        c.stages = stages;
        c.l_max = l_max;
        c.target_level = target_level;
        c.population_size = population;
        c.offspring = offspring;
        c.survivors = survivors;
        c.generations = generations;
        c.mutation_max = mutation_max;
        c.init = evo::parse_init_mode(init);
        c.seed = search_seed;
        return c;
    }

    toydiff::SamplerConfig sampler_config() const { return {num_steps, 0.0, 0}; }
    toydiff::NoiseSchedule noise_schedule() const { return toydiff::build_schedule(T, beta_start, beta_end); }

    fs::path out() const { return fs::path(output_dir); }
    fs::path checkpoint_path() const { return out() / "model.ckpt"; }
    fs::path db_path() const { return out() / ("db_" + backend + "_n" + std::to_string(stages) + ".routedb"); }
};

inline json to_json(const ExperimentConfig& c) {
    const auto& m = c.model;
    return {
        {"output_dir", c.output_dir},
        {"dataset", {{"seed", c.dataset_seed}, {"size", c.dataset_size}}},
        {"model",
         {{"image_side", m.image_side}, {"patch", m.patch}, {"embed", m.embed}, {"heads", m.heads},
          {"hidden", m.hidden}, {"blocks", m.blocks}, {"classes", m.classes}, {"seed", c.model_seed}}},
        {"noise", {{"T", c.T}, {"beta_start", c.beta_start}, {"beta_end", c.beta_end}}},
        {"train", {{"epochs", c.train.epochs}, {"lr", c.train.lr}, {"batch_size", c.train.batch_size}, {"seed", c.train.seed}}},
        {"sampler", {{"num_steps", c.num_steps}, {"eta", 0.0}}},
        {"stages", c.stages},
        {"backend", c.backend},
        {"l_max", c.l_max},
        {"target_level", c.target_level},
        {"damping", c.damping},
        {"calibration", {{"size", c.calibration_size}, {"seed", c.calibration_seed}}},
        {"search",
         {{"population", c.population}, {"offspring", c.offspring}, {"survivors", c.survivors},
          {"generations", c.generations}, {"mutation_max", c.mutation_max}, {"init", c.init}, {"seed", c.search_seed},
          {"metric", c.metric}, {"fitness_samples", c.fitness_samples}, {"fitness_seed", c.fitness_seed}}},
        {"evaluate", {{"samples", c.eval_samples}, {"seed", c.eval_seed}}},
        {"compare", {{"seeds", c.compare_seeds}, {"random_count", c.random_baseline_count}}},
    };
}

namespace detail {

template <class T>
void read(const json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw Error(ErrorKind::InvalidConfig, std::string("config key '") + key + "': " + e.what());
    }
}

inline const json& section(const json& j, const char* key) {
    static const json empty = json::object();
    if (!j.contains(key)) return empty;
    if (!j.at(key).is_object()) throw Error(ErrorKind::InvalidConfig, std::string("config section '") + key + "' must be an object");
    return j.at(key);
}

inline void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : known) ok = ok || it.key() == k;
        if (!ok) throw Error(ErrorKind::InvalidConfig, "unknown config key '" + where + it.key() + "'");
    }
}

}  // namespace detail

/// Missing keys keep their defaults; unknown keys are rejected.
inline ExperimentConfig from_json(const json& j) {
    using detail::read;
    using detail::section;
    if (!j.is_object()) throw Error(ErrorKind::InvalidConfig, "config must be a JSON object");
    detail::reject_unknown(j, {"output_dir", "dataset", "model", "noise", "train", "sampler", "stages", "backend", "l_max",
                               "target_level", "damping", "calibration", "search", "evaluate", "compare"}, "");
    ExperimentConfig c;
    read(j, "output_dir", c.output_dir);
    const json& ds = section(j, "dataset");
    detail::reject_unknown(ds, {"seed", "size"}, "dataset.");
    read(ds, "seed", c.dataset_seed);
    read(ds, "size", c.dataset_size);
    const json& m = section(j, "model");
    detail::reject_unknown(m, {"image_side", "patch", "embed", "heads", "hidden", "blocks", "classes", "seed"}, "model.");
    read(m, "image_side", c.model.image_side);
    read(m, "patch", c.model.patch);
    read(m, "embed", c.model.embed);
    read(m, "heads", c.model.heads);
    read(m, "hidden", c.model.hidden);
    read(m, "blocks", c.model.blocks);
    read(m, "classes", c.model.classes);
    read(m, "seed", c.model_seed);
    const json& n = section(j, "noise");
    detail::reject_unknown(n, {"T", "beta_start", "beta_end"}, "noise.");
    read(n, "T", c.T);
    read(n, "beta_start", c.beta_start);
    read(n, "beta_end", c.beta_end);
    const json& t = section(j, "train");
    detail::reject_unknown(t, {"epochs", "lr", "batch_size", "seed"}, "train.");
    read(t, "epochs", c.train.epochs);
    read(t, "lr", c.train.lr);
    read(t, "batch_size", c.train.batch_size);
    read(t, "seed", c.train.seed);
    const json& s = section(j, "sampler");
    detail::reject_unknown(s, {"num_steps", "eta"}, "sampler.");
    read(s, "num_steps", c.num_steps);
    if (s.contains("eta") && s.at("eta").get<double>() != 0.0)
        throw Error(ErrorKind::InvalidConfig, "only the deterministic sampler (eta = 0) is supported in experiments");
    read(j, "stages", c.stages);
    read(j, "backend", c.backend);
    read(j, "l_max", c.l_max);
    read(j, "target_level", c.target_level);
    read(j, "damping", c.damping);
    const json& cal = section(j, "calibration");
    detail::reject_unknown(cal, {"size", "seed"}, "calibration.");
    read(cal, "size", c.calibration_size);
    read(cal, "seed", c.calibration_seed);
    const json& se = section(j, "search");
    detail::reject_unknown(se, {"population", "offspring", "survivors", "generations", "mutation_max", "init", "seed", "metric",
                                "fitness_samples", "fitness_seed"}, "search.");
    read(se, "population", c.population);
    read(se, "offspring", c.offspring);
    read(se, "survivors", c.survivors);
    read(se, "generations", c.generations);
    c.mutation_max = evo::default_mutation_max(c.l_max);
    read(se, "mutation_max", c.mutation_max);
    read(se, "init", c.init);
    read(se, "seed", c.search_seed);
    read(se, "metric", c.metric);
    read(se, "fitness_samples", c.fitness_samples);
    read(se, "fitness_seed", c.fitness_seed);
    const json& ev = section(j, "evaluate");
    detail::reject_unknown(ev, {"samples", "seed"}, "evaluate.");
    read(ev, "samples", c.eval_samples);
    read(ev, "seed", c.eval_seed);
    const json& cmp = section(j, "compare");
    detail::reject_unknown(cmp, {"seeds", "random_count"}, "compare.");
    read(cmp, "seeds", c.compare_seeds);
    read(cmp, "random_count", c.random_baseline_count);
    return c;
}

inline ExperimentConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::InvalidConfig, "cannot open config " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw Error(ErrorKind::InvalidConfig, path.string() + ": " + e.what());
    }
    return from_json(j);
}

inline void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path);
    out << j.dump(2) << "\n";
    if (!out) throw Error(ErrorKind::InvalidConfig, "failed writing " + path.string());
}

inline std::string hex32(std::uint32_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(8) << std::setfill('0') << v;
    return os.str();
}

/// Everything later steps share: data, schedule, trained backbone.
struct Context {
    ExperimentConfig cfg;
    toydiff::NoiseSchedule sched;
    toydiff::ToyDataset data;
    toydiff::DenoiserModel model;
};

inline toydiff::ToyDataset dataset(const ExperimentConfig& c) {
    return toydiff::make_dataset(static_cast<std::size_t>(c.dataset_size), c.dataset_seed);
}

// ---- train --------------------------------------------------------------

struct TrainOutput {
    toydiff::DenoiserModel model;
    std::vector<double> loss;
    std::uint32_t checksum = 0;
};

inline TrainOutput run_train(const ExperimentConfig& c, const toydiff::ToyDataset& data) {
    toydiff::DenoiserModel model(c.model);
    model.init(c.model_seed);
    auto res = toydiff::train(std::move(model), data, c.noise_schedule(), c.train);
    TrainOutput out{std::move(res.model), std::move(res.epoch_loss), 0};
    out.checksum = toydiff::model_checksum(out.model);
    return out;
}

inline void write_train_outputs(const ExperimentConfig& c, const TrainOutput& t) {
    fs::create_directories(c.out());
    toydiff::save_checkpoint(t.model, c.checkpoint_path());
    std::ofstream csv(c.out() / "train_loss.csv");
    csv << "epoch,loss\n" << std::setprecision(17);
    for (std::size_t i = 0; i < t.loss.size(); ++i) csv << i + 1 << "," << t.loss[i] << "\n";
}

// ---- build-db -----------------------------------------------------------

inline std::vector<calib::CalibrationSet> build_calibrations(const ExperimentConfig& c, const toydiff::ToyDataset& data,
                                                             const toydiff::NoiseSchedule& sched) {
    const calib::StagePartition part(sched.T, c.stages);
    std::vector<calib::CalibrationSet> out;
    for (int s = 0; s < c.stages; ++s)
        out.push_back(calib::build_stage_calibration(data, s, part, sched, c.calibration_size, c.calibration_seed));
    return out;
}

inline routedb::RouteDatabase run_build_db(const ExperimentConfig& c, const toydiff::DenoiserModel& model,
                                           const toydiff::ToyDataset& data, const toydiff::NoiseSchedule& sched) {
    const auto backend = prune::parse_backend(c.backend);
    const auto calibs = build_calibrations(c, data, sched);
    const auto traj = prune::build_stage_trajectories(model, backend, calibs, c.damping);
    return routedb::build_db(model, backend, traj, c.stages, c.l_max);
}

inline std::vector<int> uniform_levels(const ExperimentConfig& c) {
    return evo::uniform_schedule(c.stages, c.l_max, c.stages * c.target_level).levels;
}

// ---- search -------------------------------------------------------------

/// Reference samples of the dense model for the search's fixed batch,
/// reused from disk when the key (checksum, sampler, seeds) matches.
inline fitness::ReferenceCache reference_for(const ExperimentConfig& c, const toydiff::DenoiserModel& model,
                                             const toydiff::NoiseSchedule& sched, const fitness::FixedBatch& batch,
                                             const fs::path& cache_path, const toydiff::ToyDataset* data = nullptr) {
    fitness::ReferenceCache ref;
    bool loaded = false;
    if (!cache_path.empty() && fs::exists(cache_path)) {
        try {
            ref = fitness::load_reference(cache_path);
            loaded = ref.matches(toydiff::model_checksum(model), sched.T, c.sampler_config(), batch);
        } catch (const Error&) {
            loaded = false;
        }
    }
    if (!loaded) {
        ref = fitness::build_reference(model, sched, c.sampler_config(), batch);
        if (!cache_path.empty()) {
            fs::create_directories(cache_path.parent_path());
            fitness::save_reference(ref, cache_path);
        }
    }
    if (data) {
        const std::size_t n = std::min<std::size_t>(data->size(), 256);
        for (std::size_t i = 0; i < n; ++i) ref.reference_set.insert(ref.reference_set.end(), data->images[i].begin(), data->images[i].end());
    }
    return ref;
}

inline void write_history_csv(const fs::path& path, const std::vector<evo::GenerationStats>& h) {
    std::ofstream csv(path);
    csv << "generation,best,mean\n" << std::setprecision(17);
    for (const auto& g : h) csv << g.generation << "," << g.best << "," << g.mean << "\n";
    if (!csv) throw Error(ErrorKind::InvalidConfig, "failed writing " + path.string());
}

// ---- evaluate -----------------------------------------------------------

struct ScheduleEval {
    std::string name;
    std::vector<int> levels;
    double ssim_vs_dense = 0.0;
    double energy_distance = 0.0;
};

inline json to_json(const ScheduleEval& e, int l_max) {
    std::vector<double> density;
    for (int l : e.levels) density.push_back(1.0 - static_cast<double>(l) / l_max);
    return {{"name", e.name}, {"levels", e.levels}, {"ssim_vs_dense", e.ssim_vs_dense},
            {"energy_distance", e.energy_distance}, {"stage_density", density}};
}

inline std::vector<int> parse_levels(const json& j) {
    const json& arr = j.is_object() && j.contains("levels") ? j.at("levels") : j;
    if (!arr.is_array()) throw Error(ErrorKind::InvalidSchedule, "schedule must be a JSON array of levels");
    std::vector<int> levels;
    for (const auto& v : arr) {
        if (!v.is_number_integer()) throw Error(ErrorKind::InvalidSchedule, "schedule levels must be integers");
        levels.push_back(v.get<int>());
    }
    return levels;
}

inline std::vector<int> load_levels(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::InvalidConfig, "cannot open schedule " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw Error(ErrorKind::InvalidSchedule, path.string() + ": " + e.what());
    }
    return parse_levels(j);
}

struct SearchOutput {
    evo::SearchResult result;
    double uniform_fitness = 0.0;
};

inline json to_json(const SearchOutput& s, const ExperimentConfig& c) {
    json hist = json::array();
    for (const auto& g : s.result.history) hist.push_back({{"generation", g.generation}, {"best", g.best}, {"mean", g.mean}});
    return {{"best_levels", s.result.best.schedule.levels},
            {"best_fitness", s.result.best.fitness.value()},
            {"uniform_levels", uniform_levels(c)},
            {"uniform_fitness", s.uniform_fitness},
            {"evaluations", s.result.evaluations},
            {"metric", c.metric},
            {"seed", c.search_seed},
            {"fitness_seed", c.fitness_seed},
            {"history", hist}};
}

inline SearchOutput run_search(const ExperimentConfig& c, evo::ScheduleEvaluator& evaluator) {
    SearchOutput out;
    out.result = evo::search(c.search_config(), evaluator.as_fn());
    out.uniform_fitness = evaluator(uniform_levels(c));
    return out;
}

/// Samples `batch` through each schedule; SSIM against the dense samples of
/// the same seeds and energy distance to the training images.
inline std::vector<ScheduleEval> evaluate_schedules(evo::ScheduleEvaluator& ev, const fitness::ReferenceCache& ref,
                                                    const std::vector<std::pair<std::string, std::vector<int>>>& rows) {
    std::vector<ScheduleEval> out;
    const auto px = static_cast<std::size_t>(ref.pixels);
    for (const auto& [name, levels] : rows) {
        const std::vector<float> x = ev.sample(levels);
        ScheduleEval e{name, levels, 0.0, 0.0};
        e.ssim_vs_dense = fitness::fitness_eval(fitness::MetricId::SsimVsDense, x, &ref);
        e.energy_distance = fitness::energy_distance({x, px}, {ref.reference_set, px});
        out.push_back(std::move(e));
    }
    return out;
}

struct CompareRow {
    std::uint64_t seed = 0;
    std::string method;
    double fitness = 0.0;
    long evaluations = 0;
    std::vector<int> levels;
};

/// Uniform, best of N random schedules, greedy hill climbing and the
/// evolutionary search per seed. Greedy gets the same evaluation cap the
/// evolutionary search spends.
inline std::vector<CompareRow> run_compare(const ExperimentConfig& c, evo::ScheduleEvaluator& ev) {
    std::vector<CompareRow> rows;
    const auto fn = ev.as_fn();
    const std::vector<int> uni = uniform_levels(c);
    for (auto seed : c.compare_seeds) {
        evo::SearchConfig sc = c.search_config();
        sc.seed = seed;
        rows.push_back({seed, "uniform", fn(uni), 1, uni});

        std::mt19937_64 rng(seed);
        CompareRow rnd{seed, "random-best-of-" + std::to_string(c.random_baseline_count), 0.0, 0, {}};
        for (int k = 0; k < c.random_baseline_count; ++k) {
            const auto s = evo::random_schedule(c.stages, c.l_max, sc.budget(), rng);
            const double f = fn(s.levels);
            ++rnd.evaluations;
            if (k == 0 || f > rnd.fitness) {
                rnd.fitness = f;
                rnd.levels = s.levels;
            }
        }
        rows.push_back(rnd);

        const auto evo_res = evo::search(sc, fn);
        const auto greedy = evo::greedy_search(sc, fn, evo::search_evaluations(sc));
        rows.push_back({seed, "greedy", greedy.best.fitness.value(), greedy.evaluations, greedy.best.schedule.levels});
        rows.push_back({seed, "evolutionary", evo_res.best.fitness.value(), evo_res.evaluations, evo_res.best.schedule.levels});
    }
    return rows;
}

inline std::string join_levels(const std::vector<int>& levels) {
    std::string s;
    for (std::size_t i = 0; i < levels.size(); ++i) s += (i ? " " : "") + std::to_string(levels[i]);
    return s;
}

inline void write_compare_csv(const fs::path& path, const std::vector<CompareRow>& rows) {
    std::ofstream csv(path);
    csv << "seed,method,fitness,evaluations,levels\n" << std::setprecision(17);
    std::vector<std::string> methods;
    for (const auto& r : rows) {
        csv << r.seed << "," << r.method << "," << r.fitness << "," << r.evaluations << "," << join_levels(r.levels) << "\n";
        if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
    }
    for (const auto& m : methods) {
        double sum = 0.0;
        long evals = 0;
        int n = 0;
        for (const auto& r : rows)
            if (r.method == m) {
                sum += r.fitness;
                evals += r.evaluations;
                ++n;
            }
        csv << "mean," << m << "," << sum / n << "," << evals / n << ",\n";
    }
    if (!csv) throw Error(ErrorKind::InvalidConfig, "failed writing " + path.string());
}

}  // namespace diffes::experiment
