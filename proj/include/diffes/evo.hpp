#pragma once

// Budget-preserving level-switch evolutionary search over per-stage sparsity
// schedules, and a greedy hill-climbing baseline.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "diffes/calib.hpp"
#include "diffes/error.hpp"
#include "diffes/fitness.hpp"
#include "diffes/routedb.hpp"
#include "diffes/toydiff/sampler.hpp"

namespace diffes::evo {

struct SparsitySchedule {
    std::vector<int> levels;
    int l_max = 0;
    int budget = 0;

    int stages() const noexcept { return static_cast<int>(levels.size()); }

    bool valid() const noexcept {
        long sum = 0;
        for (int l : levels) {
            if (l < 0 || l > l_max) return false;
            sum += l;
        }
        return sum == budget;
    }
    void check() const {
        if (!valid()) throw Error(ErrorKind::InvalidSchedule, "schedule violates its budget or level bounds");
    }
    friend bool operator==(const SparsitySchedule&, const SparsitySchedule&) = default;
};

/// G = (1/n) sum L_i / L_max.
inline double global_sparsity(const SparsitySchedule& s) {
    if (s.levels.empty() || s.l_max <= 0) throw Error(ErrorKind::InvalidSchedule, "empty schedule");
    const long sum = std::accumulate(s.levels.begin(), s.levels.end(), 0L);
    return static_cast<double>(sum) / (static_cast<double>(s.stages()) * s.l_max);
}

struct Individual {
    SparsitySchedule schedule;
    std::optional<double> fitness;
    long id = 0;
    long parent = -1;
    int generation = 0;
    bool stuck = false;  // mutation found no feasible switch
};

enum class InitMode { Uniform, Random, Patterned };

inline InitMode parse_init_mode(const std::string& s) {
    if (s == "uniform") return InitMode::Uniform;
    if (s == "random") return InitMode::Random;
    if (s == "patterned") return InitMode::Patterned;
    throw Error(ErrorKind::InvalidConfig, "unknown init mode '" + s + "'");
}

inline std::string to_string(InitMode m) {
    switch (m) {
    case InitMode::Uniform: return "uniform";
    case InitMode::Random: return "random";
    case InitMode::Patterned: return "patterned";
    }
    return "?";
}

struct SearchConfig {
    int stages = 10;
    int l_max = 16;
    int target_level = 8;  // budget B = stages * target_level
    int population_size = 20;
    int offspring = 16;
    int survivors = 4;
    int generations = 100;
    int mutation_max = 5;
    InitMode init = InitMode::Random;
    std::uint64_t seed = 0;

    int budget() const noexcept { return stages * target_level; }

    void validate() const {
        if (stages < 1 || l_max < 1) throw Error(ErrorKind::InvalidConfig, "stages and L_max must be positive");
        if (target_level < 0 || target_level > l_max)
            throw Error(ErrorKind::InvalidConfig, "infeasible budget: target level must lie in [0, L_max]");
        if (offspring + survivors != population_size || survivors < 1 || offspring < 0)
            throw Error(ErrorKind::InvalidConfig, "population must equal offspring + survivors");
        if (generations < 0) throw Error(ErrorKind::InvalidConfig, "generations must be non-negative");
        if (mutation_max < 1 || mutation_max > l_max) throw Error(ErrorKind::InvalidConfig, "mutation magnitude must lie in [1, L_max]");
    }
};

/// About 30% of L_max, at least 1.
inline int default_mutation_max(int l_max) { return std::max(1, static_cast<int>(std::lround(0.3 * l_max))); }

/// Levels as equal as integrality allows; earlier stages take the remainder.
inline SparsitySchedule uniform_schedule(int stages, int l_max, int budget) {
    if (stages < 1 || budget < 0 || budget > stages * l_max) throw Error(ErrorKind::InvalidConfig, "infeasible budget");
    SparsitySchedule s{std::vector<int>(static_cast<std::size_t>(stages), budget / stages), l_max, budget};
    for (int i = 0; i < budget % stages; ++i) ++s.levels[static_cast<std::size_t>(i)];
    return s;
}

/// Budget split proportionally to non-negative weights, capped at L_max;
/// leftover levels go one at a time to the uncapped stage with the largest
/// remainder (lowest index on ties).
inline SparsitySchedule shaped_schedule(const std::vector<double>& weights, int l_max, int budget) {
    const int n = static_cast<int>(weights.size());
    if (n < 1 || budget < 0 || budget > n * l_max) throw Error(ErrorKind::InvalidConfig, "infeasible budget");
    const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
    SparsitySchedule s{std::vector<int>(static_cast<std::size_t>(n), 0), l_max, budget};
    std::vector<double> rem(static_cast<std::size_t>(n), 0.0);
    int left = budget;
    for (int i = 0; i < n; ++i) {
        const double share = total > 0.0 ? budget * weights[static_cast<std::size_t>(i)] / total : static_cast<double>(budget) / n;
        const int v = std::min(l_max, static_cast<int>(std::floor(share)));
        s.levels[static_cast<std::size_t>(i)] = v;
        rem[static_cast<std::size_t>(i)] = share - v;
        left -= v;
    }
    while (left > 0) {
        int best = -1;
        for (int i = 0; i < n; ++i)
            if (s.levels[static_cast<std::size_t>(i)] < l_max && (best < 0 || rem[static_cast<std::size_t>(i)] > rem[static_cast<std::size_t>(best)]))
                best = i;
        ++s.levels[static_cast<std::size_t>(best)];
        rem[static_cast<std::size_t>(best)] -= 1.0;
        --left;
    }
    return s;
}

/// Ramp up, ramp down, middle-heavy and edge-heavy shapes.
inline std::vector<SparsitySchedule> patterned_schedules(int stages, int l_max, int budget) {
    std::vector<std::vector<double>> shapes(4);
    const double mid = (stages - 1) / 2.0;
    for (int i = 0; i < stages; ++i) {
        shapes[0].push_back(i + 1.0);
        shapes[1].push_back(stages - i);
        shapes[2].push_back(mid + 1.0 - std::abs(i - mid));
        shapes[3].push_back(1.0 + std::abs(i - mid));
    }
    std::vector<SparsitySchedule> out;
    for (const auto& w : shapes) out.push_back(shaped_schedule(w, l_max, budget));
    return out;
}

/// L_i += delta, L_j -= delta when that stays within [0, L_max].
inline bool apply_switch(SparsitySchedule& s, int i, int j, int delta) {
    auto& li = s.levels.at(static_cast<std::size_t>(i));
    auto& lj = s.levels.at(static_cast<std::size_t>(j));
    if (i == j || delta < 1 || li + delta > s.l_max || lj - delta < 0) return false;
    li += delta;
    lj -= delta;
    return true;
}

inline constexpr int kMutationAttempts = 100;

/// One level switch with delta ~ U{1..mutation_max} between two distinct
/// random stages, resampled until feasible. After 100 failed draws the
/// parent is returned unchanged with `stuck` set.
inline Individual mutate(const Individual& parent, std::mt19937_64& rng, int mutation_max) {
    Individual child = parent;
    child.fitness.reset();
    child.parent = parent.id;
    child.stuck = false;
    const int n = parent.schedule.stages();
    if (n >= 2 && mutation_max >= 1) {
        std::uniform_int_distribution<int> pick(0, n - 1);
        std::uniform_int_distribution<int> pick_other(0, n - 2);
        std::uniform_int_distribution<int> pick_delta(1, mutation_max);
        for (int attempt = 0; attempt < kMutationAttempts; ++attempt) {
            const int i = pick(rng);
            int j = pick_other(rng);
            if (j >= i) ++j;
            const int delta = pick_delta(rng);
            if (apply_switch(child.schedule, i, j, delta)) return child;
        }
    }
    child.stuck = true;
    return child;
}

/// Random walk of level switches starting from the uniform schedule.
inline SparsitySchedule random_schedule(int stages, int l_max, int budget, std::mt19937_64& rng) {
    Individual ind;
    ind.schedule = uniform_schedule(stages, l_max, budget);
    for (int k = 0; k < 3 * stages; ++k) ind = mutate(ind, rng, l_max);
    return ind.schedule;
}

/// The uniform schedule is always the first individual.
inline std::vector<Individual> init_population(const SearchConfig& cfg, InitMode mode, std::mt19937_64& rng) {
    cfg.validate();
    const int b = cfg.budget();
    std::vector<Individual> pop;
    auto add = [&](SparsitySchedule s) {
        Individual ind;
        ind.schedule = std::move(s);
        ind.id = static_cast<long>(pop.size());
        pop.push_back(std::move(ind));
    };
    add(uniform_schedule(cfg.stages, cfg.l_max, b));
    if (mode == InitMode::Patterned)
        for (auto& s : patterned_schedules(cfg.stages, cfg.l_max, b))
            if (static_cast<int>(pop.size()) < cfg.population_size) add(std::move(s));
    while (static_cast<int>(pop.size()) < cfg.population_size) {
        if (mode == InitMode::Uniform) add(uniform_schedule(cfg.stages, cfg.l_max, b));
        else add(random_schedule(cfg.stages, cfg.l_max, b, rng));
    }
    return pop;
}

/// Fitness of a level vector, higher is better.
using FitnessFn = std::function<double(const std::vector<int>&)>;

/// Orders by fitness (descending), then by schedule (lexicographically
/// ascending); a stable sort keeps population order for full ties.
inline void rank(std::vector<Individual>& pop) {
    std::stable_sort(pop.begin(), pop.end(), [](const Individual& a, const Individual& b) {
        const double fa = a.fitness.value(), fb = b.fitness.value();
        if (fa != fb) return fa > fb;
        return a.schedule.levels < b.schedule.levels;
    });
}

struct Counter {
    long next_id = 0;
    long evaluations = 0;
};

inline void evaluate_all(std::vector<Individual>& pop, const FitnessFn& fit, Counter& counter) {
    for (auto& ind : pop)
        if (!ind.fitness) {
            ind.fitness = fit(ind.schedule.levels);
            ++counter.evaluations;
        }
}

/// Keeps the top `survivors` unchanged and fills the rest with single-switch
/// mutants of uniformly chosen survivors.
inline std::vector<Individual> step_generation(std::vector<Individual> pop, const SearchConfig& cfg, const FitnessFn& fit,
                                               std::mt19937_64& rng, Counter& counter, int generation) {
    for (const auto& ind : pop)
        if (!ind.fitness) throw Error(ErrorKind::InvalidInput, "step_generation needs an evaluated population");
    rank(pop);
    std::vector<Individual> next(pop.begin(), pop.begin() + std::min<std::size_t>(pop.size(), static_cast<std::size_t>(cfg.survivors)));
    std::uniform_int_distribution<std::size_t> pick(0, next.size() - 1);
    const std::size_t n_survivors = next.size();
    for (int k = 0; k < cfg.offspring; ++k) {
        Individual child = mutate(next[pick(rng)], rng, cfg.mutation_max);
        child.id = counter.next_id++;
        child.generation = generation;
        next.push_back(std::move(child));
    }
    std::vector<Individual> offspring(next.begin() + static_cast<long>(n_survivors), next.end());
    evaluate_all(offspring, fit, counter);
    std::copy(offspring.begin(), offspring.end(), next.begin() + static_cast<long>(n_survivors));
    return next;
}

struct GenerationStats {
    int generation = 0;
    double best = 0.0;
    double mean = 0.0;
};

struct SearchResult {
    Individual best;
    std::vector<GenerationStats> history;
    long evaluations = 0;
};

inline GenerationStats stats_of(const std::vector<Individual>& pop, int generation) {
    GenerationStats g{generation, -std::numeric_limits<double>::infinity(), 0.0};
    for (const auto& ind : pop) {
        g.best = std::max(g.best, ind.fitness.value());
        g.mean += ind.fitness.value();
    }
    g.mean /= static_cast<double>(pop.size());
    return g;
}

inline SearchResult search(const SearchConfig& cfg, const FitnessFn& fit) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    Counter counter;
    std::vector<Individual> pop = init_population(cfg, cfg.init, rng);
    counter.next_id = static_cast<long>(pop.size());
    evaluate_all(pop, fit, counter);
    SearchResult res;
    res.history.push_back(stats_of(pop, 0));
    rank(pop);
    res.best = pop.front();
    for (int g = 1; g <= cfg.generations; ++g) {
        pop = step_generation(std::move(pop), cfg, fit, rng, counter, g);
        res.history.push_back(stats_of(pop, g));
        std::vector<Individual> ranked = pop;
        rank(ranked);
        if (*ranked.front().fitness > *res.best.fitness) res.best = ranked.front();
    }
    res.evaluations = counter.evaluations;
    return res;
}

/// Fitness evaluations spent by `search`: the initial population plus the
/// offspring of every generation (survivors keep their fitness).
inline long search_evaluations(const SearchConfig& cfg) {
    return cfg.population_size + static_cast<long>(cfg.offspring) * cfg.generations;
}

struct GreedyResult {
    Individual best;
    long evaluations = 0;
    int moves = 0;
    std::vector<double> trace;  // fitness after each accepted move, starting with uniform
};

/// Best-improvement hill climbing over unit level switches from the uniform
/// schedule, stopping at a local optimum or when `max_evaluations` is spent.
inline GreedyResult greedy_search(const SearchConfig& cfg, const FitnessFn& fit, long max_evaluations) {
    cfg.validate();
    GreedyResult res;
    res.best.schedule = uniform_schedule(cfg.stages, cfg.l_max, cfg.budget());
    if (max_evaluations < 1) throw Error(ErrorKind::InvalidConfig, "greedy search needs at least one evaluation");
    res.best.fitness = fit(res.best.schedule.levels);
    res.evaluations = 1;
    res.trace.push_back(*res.best.fitness);
    while (res.evaluations < max_evaluations) {
        std::optional<Individual> best_move;
        for (int i = 0; i < cfg.stages && res.evaluations < max_evaluations; ++i)
            for (int j = 0; j < cfg.stages && res.evaluations < max_evaluations; ++j) {
                Individual cand = res.best;
                if (!apply_switch(cand.schedule, i, j, 1)) continue;
                cand.fitness = fit(cand.schedule.levels);
                ++res.evaluations;
                if (!best_move || *cand.fitness > *best_move->fitness) best_move = std::move(cand);
            }
        if (!best_move || *best_move->fitness <= *res.best.fitness) break;
        res.best = std::move(*best_move);
        ++res.moves;
        res.trace.push_back(*res.best.fitness);
    }
    return res;
}

/// Samples K fixed latents through routed schedules and scores them. Both
/// the fitness of each schedule and the latent batch after every stage
/// prefix are cached: schedules sharing their first k levels share the
/// first k stages of sampling.
class ScheduleEvaluator {
public:
    ScheduleEvaluator(const toydiff::DenoiserModel& model, const routedb::RouteDatabase& db, const toydiff::NoiseSchedule& sched,
                      const toydiff::SamplerConfig& sampler_cfg, fitness::FixedBatch batch, fitness::MetricId metric,
                      const fitness::ReferenceCache* reference, std::size_t prefix_cache_limit = 2048)
        : model_(&model), db_(&db), sampler_(sched, sampler_cfg), partition_(sched.T, db.stages), batch_(std::move(batch)),
          metric_(metric), reference_(reference), prefix_limit_(prefix_cache_limit) {
        if (sampler_cfg.eta != 0.0) throw Error(ErrorKind::InvalidConfig, "fitness sampling requires eta = 0");
        step_stage_ = partition_.step_stages(sampler_.timesteps());
        for (int s = 0; s < db.stages; ++s) {
            const auto first = std::find(step_stage_.begin(), step_stage_.end(), s) - step_stage_.begin();
            stage_first_.push_back(static_cast<int>(first));
        }
        stage_first_.push_back(sampler_.num_steps());
        x0_ = toydiff::DdimSampler::initial_batch(batch_.seeds, model.config().pixels());
        if (metric != fitness::MetricId::EnergyDistance) {
            if (!reference_ || !reference_->matches(toydiff::model_checksum(model), sched.T, sampler_cfg, batch_))
                throw Error(ErrorKind::MissingReference, "reference cache does not match model, sampler or fixed batch");
        }
    }

    /// Final clipped samples for a level vector.
    std::vector<float> sample(const std::vector<int>& levels) {
        routedb::check_schedule(*db_, levels);
        const routedb::RoutedModel rm = routedb::route(*db_, *model_, levels, partition_);
        // Longest cached prefix.
        int start = 0;
        std::vector<float> x = x0_;
        for (int k = db_->stages; k >= 1; --k) {
            auto it = prefix_.find(std::vector<int>(levels.begin(), levels.begin() + k));
            if (it != prefix_.end()) {
                x = it->second;
                start = k;
                break;
            }
        }
        for (int s = start; s < db_->stages; ++s) {
            sampler_.run(*model_, x, batch_.labels, stage_first_[static_cast<std::size_t>(s)],
                         stage_first_[static_cast<std::size_t>(s) + 1],
                         [&](int t) { return rm.plan_for_t(t); }, cache_);
            if (s + 1 < db_->stages) remember(std::vector<int>(levels.begin(), levels.begin() + s + 1), x);
        }
        toydiff::DdimSampler::clip(x);
        return x;
    }

    double operator()(const std::vector<int>& levels) {
        ++requests_;
        if (auto it = fitness_.find(levels); it != fitness_.end()) return it->second;
        const double f = fitness::fitness_eval(metric_, sample(levels), reference_);
        fitness_.emplace(levels, f);
        return f;
    }

    FitnessFn as_fn() {
        return [this](const std::vector<int>& l) { return (*this)(l); };
    }

    long requests() const noexcept { return requests_; }
    std::size_t distinct() const noexcept { return fitness_.size(); }
    const calib::StagePartition& partition() const noexcept { return partition_; }

private:
    void remember(std::vector<int> key, const std::vector<float>& x) {
        if (prefix_.size() >= prefix_limit_) prefix_.clear();
        prefix_.emplace(std::move(key), x);
    }

    const toydiff::DenoiserModel* model_;
    const routedb::RouteDatabase* db_;
    toydiff::DdimSampler sampler_;
    calib::StagePartition partition_;
    fitness::FixedBatch batch_;
    fitness::MetricId metric_;
    const fitness::ReferenceCache* reference_;
    std::size_t prefix_limit_;
    std::vector<int> step_stage_;
    std::vector<int> stage_first_;
    std::vector<float> x0_;
    toydiff::ForwardCache cache_;
    std::map<std::vector<int>, std::vector<float>> prefix_;
    std::map<std::vector<int>, double> fitness_;
    long requests_ = 0;
};

}  // namespace diffes::evo
