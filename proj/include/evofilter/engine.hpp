// Evolution orchestrator: per-island best-N candidate databases,
// softmin (Boltzmann) sampling, the sample -> mutate -> evaluate ->
// insert loop for the CGP, LLM and random-search methods, periodic
// migration, and the train/validation/test selection protocol.
#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "cgp.hpp"
#include "dsl.hpp"
#include "dynsys.hpp"
#include "kalman.hpp"
#include "llm.hpp"
#include "matrix.hpp"
#include "rng.hpp"
#include "util.hpp"

namespace evofilter::engine {

enum class Method { Cgp, Llm, Random };

inline const char* method_name(Method m) {
    switch (m) {
    case Method::Cgp: return "cgp";
    case Method::Llm: return "llm";
    case Method::Random: return "random";
    }
    return "?";
}

inline Method parse_method(const std::string& name) {
    if (name == "cgp") return Method::Cgp;
    if (name == "llm") return Method::Llm;
    if (name == "random") return Method::Random;
    throw domain_error("unknown method: " + name);
}

enum class Origin { Cgp, Llm, Random, SeedInit };

inline const char* origin_name(Origin o) {
    switch (o) {
    case Origin::Cgp: return "cgp";
    case Origin::Llm: return "llm";
    case Origin::Random: return "random";
    case Origin::SeedInit: return "seed-init";
    }
    return "?";
}

struct Candidate {
    dsl::Program program;
    std::optional<cgp::Genotype> genotype; // present for graph-encoded candidates
    std::string canonical;                 // canonical text; the identity basis
    std::uint64_t id = 0;                  // hash of canonical
    double fitness = kWorstFitness;        // train-split MSE or the sentinel
    Origin origin = Origin::Random;
};

inline Candidate make_candidate(dsl::Program program, std::optional<cgp::Genotype> genotype,
                                Origin origin) {
    Candidate c;
    c.program = std::move(program);
    c.genotype = std::move(genotype);
    c.canonical = dsl::print(c.program);
    c.id = dsl::program_hash(c.program);
    c.origin = origin;
    return c;
}

/// Capacity-bounded store of the best candidates, ascending by fitness,
/// unique by canonical-print hash.
class Database {
public:
    explicit Database(std::size_t capacity = 200) : capacity_(capacity) {}

    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    std::size_t capacity() const { return capacity_; }
    const Candidate& best() const { return entries_.front(); }
    const std::vector<Candidate>& entries() const { return entries_; }

    void clear() { entries_.clear(); }

    /// Insert unless the id is already present; evict the worst entry
    /// when over capacity. Ties keep insertion order.
    bool insert(Candidate c) {
        for (const auto& e : entries_)
            if (e.id == c.id)
                return false;
        auto pos = std::upper_bound(entries_.begin(), entries_.end(), c.fitness,
                                    [](double f, const Candidate& e) { return f < e.fitness; });
        entries_.insert(pos, std::move(c));
        if (entries_.size() > capacity_) {
            entries_.pop_back();
            return true; // note: may have evicted the candidate just added
        }
        return true;
    }

    /// Softmin selection weights P_i = exp(-f_i / T) / sum_j exp(-f_j / T),
    /// computed with a max-shift so the sentinel cannot overflow.
    std::vector<double> sample_probabilities(double temperature) const {
        if (entries_.empty())
            throw domain_error("cannot sample from an empty database");
        if (temperature <= 0.0)
            throw domain_error("temperature must be positive");
        const double f_min = entries_.front().fitness;
        std::vector<double> w(entries_.size());
        double total = 0.0;
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            w[i] = std::exp(-(entries_[i].fitness - f_min) / temperature);
            total += w[i];
        }
        for (double& v : w)
            v /= total;
        return w;
    }

    /// k independent draws with replacement from the softmin
    /// distribution. Returns copies: sampled parents outlive any
    /// insertions the caller makes while breeding from them.
    std::vector<Candidate> sample(std::size_t k, double temperature,
                                  std::mt19937_64& rng) const {
        const std::vector<double> p = sample_probabilities(temperature);
        std::vector<double> cdf(p.size());
        double acc = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            acc += p[i];
            cdf[i] = acc;
        }
        cdf.back() = 1.0;
        std::uniform_real_distribution<double> uniform(0.0, 1.0);
        std::vector<Candidate> picks;
        picks.reserve(k);
        for (std::size_t d = 0; d < k; ++d) {
            const double u = uniform(rng);
            const auto it = std::lower_bound(cdf.begin(), cdf.end(), u);
            picks.push_back(entries_[static_cast<std::size_t>(it - cdf.begin())]);
        }
        return picks;
    }

private:
    std::size_t capacity_;
    std::vector<Candidate> entries_;
};

struct Island {
    Database db;
    std::mt19937_64 rng;
};

/// Rank islands by their best fitness and reinitialize the bottom half
/// with a copy of the global best candidate. Ties break by island index
/// (lower indices survive). A single island is a no-op.
inline void migrate(std::vector<Island>& islands) {
    if (islands.size() < 2)
        return;
    std::vector<std::size_t> order(islands.size());
    for (std::size_t i = 0; i < order.size(); ++i)
        order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return islands[a].db.best().fitness < islands[b].db.best().fitness;
    });
    const Candidate global_best = islands[order.front()].db.best();
    const std::size_t resets = islands.size() / 2;
    for (std::size_t r = 0; r < resets; ++r) {
        Island& victim = islands[order[order.size() - 1 - r]];
        victim.db.clear();
        victim.db.insert(global_best);
    }
}

// ---------------------------------------------------------------------------
// Configuration

struct EngineConfig {
    Method method = Method::Cgp;
    // Problem
    TaskSpec task;
    SystemModel sys;
    Scenario scenario = Scenario::gaussian();
    SplitSpec splits;
    std::uint64_t data_seed = 0;
    // Search (defaults from the reported hyperparameter table)
    double temperature = 0.2;
    std::size_t database_capacity = 200;
    std::size_t islands = 4;
    std::size_t migration_period = 10;
    std::size_t iterations = 10;
    std::size_t graphs_per_iteration = 30;
    std::size_t mutants_per_graph = 1000;
    cgp::CgpConfig cgp;
    std::size_t prompts_per_iteration = 30;
    std::size_t llm_sample_count = 60;
    std::size_t llm_variants = 3;
    std::size_t max_tokens = 3000;
    std::string problem_description; // descriptive prompts (beyond-Kalman)
    std::size_t random_batch = 1000;
    // Initialization
    enum class InitMode { RandomOnly, KalmanSeeded } init_mode = InitMode::RandomOnly;
    std::size_t init_random = 100;
    // Execution
    std::uint64_t seed = 0;
    unsigned threads = 1;
    std::optional<std::size_t> eval_budget; // cap on total evaluations
    bool rescore_all = false;
    std::size_t rescore_top_k = 10;
    dsl::GuardConfig guards;
    llm::BackendConfig backend;
};

struct IterationStats {
    std::size_t iteration = 0;
    std::size_t island = 0;
    double best = kWorstFitness;
    double median = kWorstFitness;
    std::size_t evaluations = 0;
    std::size_t rejects = 0;
};

struct RunResult {
    Candidate best;                   // selected on validation
    double validation_fitness = kWorstFitness;
    FitnessReport test_report;
    std::vector<IterationStats> history;
    std::vector<Candidate> finalists; // the re-scored pool, validation order
    std::vector<double> finalist_validation;
    std::size_t eval_count = 0;
    std::size_t reject_count = 0;
    std::size_t optimality_violations = 0; // train fitness below the target's
    double target_train_fitness = kWorstFitness;
    double wall_clock_seconds = 0.0;
    nlohmann::json manifest;
    std::uint64_t manifest_hash = 0;
};

// ---------------------------------------------------------------------------
// Engine

class Engine {
public:
    explicit Engine(EngineConfig cfg)
        : cfg_(std::move(cfg)), data_(make_datasets(cfg_.sys, cfg_.scenario, cfg_.data_seed,
                                                    cfg_.splits)) {
        if (cfg_.islands == 0 || cfg_.migration_period == 0)
            throw domain_error("islands and migration period must be positive");
        if (cfg_.task.signature.outputs.empty())
            throw domain_error("config lacks a task");
        if (cfg_.method == Method::Llm)
            backend_.emplace(cfg_.backend);
        train_split_.push_back(data_.train);
        target_train_fitness_ =
            evaluate_program(task_target_program(cfg_.task), cfg_.task, cfg_.sys,
                             train_split_, cfg_.threads, cfg_.guards)
                .mean;
    }

    const EvalDatasets& datasets() const { return data_; }
    double target_train_fitness() const { return target_train_fitness_; }

    RunResult run() {
        const auto start = std::chrono::steady_clock::now();
        initialize_islands();

        std::size_t iteration = 0;
        while (iteration < cfg_.iterations && !budget_exhausted()) {
            ++iteration;
            for (std::size_t i = 0; i < islands_.size() && !budget_exhausted(); ++i) {
                IterationStats stats = run_iteration(islands_[i]);
                stats.iteration = iteration;
                stats.island = i;
                history_.push_back(stats);
            }
            if (iteration % cfg_.migration_period == 0)
                migrate(islands_);
        }

        RunResult result = select_and_score();
        result.history = history_;
        result.eval_count = eval_count_;
        result.reject_count = reject_count_;
        result.optimality_violations = optimality_violations_;
        result.target_train_fitness = target_train_fitness_;
        result.wall_clock_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        result.manifest = build_manifest(result);
        result.manifest_hash = hash_manifest(result.manifest);
        result.manifest["manifest_hash"] = result.manifest_hash;
        return result;
    }

    /// One sampling/mutation/evaluation pass over one island.
    IterationStats run_iteration(Island& island) {
        IterationStats stats;
        const std::size_t evals_before = eval_count_;
        const std::size_t rejects_before = reject_count_;
        switch (cfg_.method) {
        case Method::Cgp: cgp_iteration(island); break;
        case Method::Llm: llm_iteration(island); break;
        case Method::Random: random_iteration(island); break;
        }
        stats.evaluations = eval_count_ - evals_before;
        stats.rejects = reject_count_ - rejects_before;
        stats.best = island.db.empty() ? kWorstFitness : island.db.best().fitness;
        stats.median = island.db.empty()
                           ? kWorstFitness
                           : island.db.entries()[island.db.size() / 2].fitness;
        return stats;
    }

    std::vector<Island>& islands() { return islands_; }

    void initialize_islands() {
        islands_.clear();
        for (std::size_t i = 0; i < cfg_.islands; ++i) {
            Island island;
            island.db = Database(cfg_.database_capacity);
            island.rng = make_rng(cfg_.seed, 100 + i);
            islands_.push_back(std::move(island));
        }
        for (auto& island : islands_) {
            std::vector<Candidate> batch;
            if (cfg_.init_mode == EngineConfig::InitMode::KalmanSeeded)
                batch.push_back(
                    make_candidate(task_target_program(cfg_.task), std::nullopt,
                                   Origin::SeedInit));
            for (std::size_t r = 0; r < cfg_.init_random; ++r) {
                cgp::Genotype g =
                    cgp::random_genotype(cfg_.cgp, cfg_.task.signature.inputs.size(),
                                         cfg_.task.signature.outputs.size(), island.rng);
                dsl::Program decoded = cgp::decode(g, cfg_.task.signature);
                batch.push_back(
                    make_candidate(std::move(decoded), std::move(g), Origin::SeedInit));
            }
            evaluate_batch(batch);
            for (auto& c : batch)
                island.db.insert(std::move(c));
        }
    }

private:
    bool budget_exhausted() const {
        return cfg_.eval_budget && eval_count_ >= *cfg_.eval_budget;
    }

    // True when one more pending candidate would exceed the budget.
    bool budget_full(std::size_t pending) const {
        return cfg_.eval_budget && eval_count_ + pending >= *cfg_.eval_budget;
    }

    // Evaluate a batch on the train split; deterministic order, parallel
    // across candidates.
    void evaluate_batch(std::vector<Candidate>& batch) {
        parallel_for(batch.size(), cfg_.threads, [&](std::size_t i) {
            batch[i].fitness = evaluate_program(batch[i].program, cfg_.task, cfg_.sys,
                                                train_split_, 1, cfg_.guards)
                                   .mean;
        });
        eval_count_ += batch.size();
        for (const auto& c : batch)
            if (c.fitness < target_train_fitness_ - 1e-9 &&
                cfg_.scenario.tag == ScenarioTag::Gaussian)
                ++optimality_violations_;
    }

    void insert_batch(Island& island, std::vector<Candidate>& batch) {
        for (auto& c : batch)
            island.db.insert(std::move(c));
        batch.clear();
    }

    void cgp_iteration(Island& island) {
        auto parents = island.db.sample(cfg_.graphs_per_iteration, cfg_.temperature,
                                        island.rng);
        std::vector<Candidate> batch;
        batch.reserve(2048);
        for (const Candidate& parent : parents) {
            // Programs without a genotype (e.g. the seeded target) fall
            // back to their graph decomposition when possible.
            std::optional<cgp::Genotype> base = parent.genotype;
            if (!base) {
                try {
                    base = cgp::genotype_from_program(parent.program);
                } catch (const domain_error&) {
                    continue; // not graph-decomposable; skip this parent
                }
            }
            if (base->nodes.size() < cfg_.cgp.max_nodes) {
                // pad with inactive nodes so every genotype has the
                // configured fixed length
                cgp::Genotype padded = *base;
                while (padded.nodes.size() < cfg_.cgp.max_nodes)
                    padded.nodes.push_back(cgp::Node{cgp::NodeOp::Assign, 0, 0});
                base = padded;
            }
            for (std::size_t m = 0; m < cfg_.mutants_per_graph; ++m) {
                if (budget_full(batch.size())) {
                    evaluate_batch(batch);
                    insert_batch(island, batch);
                    return;
                }
                cgp::Genotype child = cgp::mutate(*base, cfg_.cgp, island.rng);
                dsl::Program decoded = cgp::decode(child, cfg_.task.signature);
                batch.push_back(
                    make_candidate(std::move(decoded), std::move(child), Origin::Cgp));
                if (batch.size() >= 2048) {
                    evaluate_batch(batch);
                    insert_batch(island, batch);
                }
            }
        }
        if (!batch.empty()) {
            evaluate_batch(batch);
            insert_batch(island, batch);
        }
    }

    void llm_iteration(Island& island) {
        auto sampled = island.db.sample(cfg_.llm_sample_count, cfg_.temperature, island.rng);
        const std::size_t pairs =
            std::min(cfg_.prompts_per_iteration, sampled.size() / 2);
        for (std::size_t p = 0; p < pairs && !budget_exhausted(); ++p) {
            llm::PromptSpec spec;
            spec.mode = cfg_.task.anti_leak ? llm::PromptSpec::Mode::AntiLeak
                                            : llm::PromptSpec::Mode::Descriptive;
            spec.signature = cfg_.task.signature;
            spec.parent_a = sampled[2 * p].program;
            spec.parent_b = sampled[2 * p + 1].program;
            spec.variants = cfg_.llm_variants;
            spec.max_tokens = cfg_.max_tokens;
            spec.problem_description = cfg_.problem_description;

            std::string completion;
            try {
                completion = backend_->complete(llm::build_prompt(spec), cfg_.max_tokens);
            } catch (const std::exception&) {
                ++reject_count_; // failed prompt yields zero candidates
                continue;
            }
            llm::ParsedCompletions parsed =
                llm::parse_completions(completion, cfg_.task.signature, cfg_.guards);
            reject_count_ += parsed.rejects.size();
            std::vector<Candidate> batch;
            for (auto& program : parsed.programs)
                batch.push_back(make_candidate(std::move(program), std::nullopt, Origin::Llm));
            evaluate_batch(batch);
            insert_batch(island, batch);
        }
    }

    void random_iteration(Island& island) {
        std::vector<Candidate> batch;
        batch.reserve(std::min<std::size_t>(cfg_.random_batch, 2048));
        for (std::size_t r = 0; r < cfg_.random_batch; ++r) {
            if (budget_full(batch.size())) {
                evaluate_batch(batch);
                insert_batch(island, batch);
                return;
            }
            cgp::Genotype g =
                cgp::random_genotype(cfg_.cgp, cfg_.task.signature.inputs.size(),
                                     cfg_.task.signature.outputs.size(), island.rng);
            dsl::Program decoded = cgp::decode(g, cfg_.task.signature);
            batch.push_back(
                make_candidate(std::move(decoded), std::move(g), Origin::Random));
            if (batch.size() >= 2048) {
                evaluate_batch(batch);
                insert_batch(island, batch);
            }
        }
        if (!batch.empty()) {
            evaluate_batch(batch);
            insert_batch(island, batch);
        }
    }

    // Re-score the union of island top-Ks on validation, pick the best,
    // and report its generalization on the test split.
    RunResult select_and_score() {
        RunResult result;
        std::vector<Candidate> pool;
        for (const auto& island : islands_) {
            const std::size_t take = cfg_.rescore_all
                                         ? island.db.size()
                                         : std::min(cfg_.rescore_top_k, island.db.size());
            for (std::size_t i = 0; i < take; ++i)
                pool.push_back(island.db.entries()[i]);
        }
        // de-duplicate across islands
        std::vector<Candidate> unique_pool;
        for (auto& c : pool) {
            bool seen = false;
            for (const auto& u : unique_pool)
                seen |= u.id == c.id;
            if (!seen)
                unique_pool.push_back(std::move(c));
        }
        if (unique_pool.empty())
            throw domain_error("discovery produced no candidates");

        std::vector<double> val(unique_pool.size(), kWorstFitness);
        parallel_for(unique_pool.size(), cfg_.threads, [&](std::size_t i) {
            val[i] = evaluate_program(unique_pool[i].program, cfg_.task, cfg_.sys,
                                      data_.validation, 1, cfg_.guards)
                         .mean;
        });
        std::size_t best_index = 0;
        for (std::size_t i = 1; i < unique_pool.size(); ++i)
            if (val[i] < val[best_index])
                best_index = i;

        result.best = unique_pool[best_index];
        result.validation_fitness = val[best_index];
        result.finalists = std::move(unique_pool);
        result.finalist_validation = std::move(val);
        result.test_report = evaluate_program(result.best.program, cfg_.task, cfg_.sys,
                                              data_.test, cfg_.threads, cfg_.guards);
        return result;
    }

    nlohmann::json build_manifest(const RunResult& result) const {
        nlohmann::json history = nlohmann::json::array();
        for (const auto& h : history_)
            history.push_back({{"iteration", h.iteration},
                               {"island", h.island},
                               {"best", h.best},
                               {"median", h.median},
                               {"evaluations", h.evaluations},
                               {"rejects", h.rejects}});
        nlohmann::json manifest = {
            {"config",
             {{"method", method_name(cfg_.method)},
              {"task", cfg_.task.name},
              {"anti_leak", cfg_.task.anti_leak},
              {"scenario", scenario_name(cfg_.scenario.tag)},
              {"seed", cfg_.seed},
              {"data_seed", cfg_.data_seed},
              {"temperature", cfg_.temperature},
              {"database_capacity", cfg_.database_capacity},
              {"islands", cfg_.islands},
              {"migration_period", cfg_.migration_period},
              {"iterations", cfg_.iterations},
              {"graphs_per_iteration", cfg_.graphs_per_iteration},
              {"mutants_per_graph", cfg_.mutants_per_graph},
              {"prompts_per_iteration", cfg_.prompts_per_iteration},
              {"llm_sample_count", cfg_.llm_sample_count},
              {"max_tokens", cfg_.max_tokens},
              {"random_batch", cfg_.random_batch},
              {"max_nodes", cfg_.cgp.max_nodes},
              {"mutation_rate", cfg_.cgp.per_gene_mutation_rate},
              {"init_mode", cfg_.init_mode == EngineConfig::InitMode::KalmanSeeded
                                ? "kalman-seeded"
                                : "random"},
              {"init_random", cfg_.init_random},
              {"sigma_a", cfg_.sys.sigma_a},
              {"sigma_z", cfg_.sys.sigma_z},
              {"dt", cfg_.sys.dt},
              {"eval_budget", cfg_.eval_budget ? nlohmann::json(*cfg_.eval_budget)
                                               : nlohmann::json()}}},
            {"history", history},
            {"eval_count", result.eval_count},
            {"reject_count", result.reject_count},
            {"target_train_fitness", result.target_train_fitness},
            {"optimality_violations", result.optimality_violations},
            {"best_program", result.best.canonical},
            {"best_origin", origin_name(result.best.origin)},
            {"validation_fitness", result.validation_fitness},
            {"test_mean", result.test_report.mean},
            {"test_stderr", result.test_report.stderr_},
            {"wall_clock_seconds", result.wall_clock_seconds},
        };
        return manifest;
    }

    /// FNV-1a over the manifest text minus volatile fields.
    static std::uint64_t hash_manifest(nlohmann::json manifest) {
        manifest.erase("wall_clock_seconds");
        const std::string text = manifest.dump();
        std::uint64_t h = 1469598103934665603ULL;
        for (unsigned char c : text) {
            h ^= c;
            h *= 1099511628211ULL;
        }
        return h;
    }

    EngineConfig cfg_;
    EvalDatasets data_;
    std::vector<Trajectory> train_split_;
    std::optional<llm::Backend> backend_;
    std::vector<Island> islands_;
    std::vector<IterationStats> history_;
    std::size_t eval_count_ = 0;
    std::size_t reject_count_ = 0;
    std::size_t optimality_violations_ = 0;
    double target_train_fitness_ = kWorstFitness;
};

inline RunResult run_discovery(const EngineConfig& cfg) { return Engine(cfg).run(); }

} // namespace evofilter::engine
