// Run-configuration files: a JSON document mirroring the engine,
// system, scenario and split settings. Schema-checked up front; unknown
// keys are rejected so typos cannot silently fall back to defaults.
#pragma once

#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "engine.hpp"

namespace evofilter::config {

struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

inline void require_keys(const nlohmann::json& obj, const std::set<std::string>& allowed,
                         const std::string& where) {
    if (!obj.is_object())
        throw config_error(where + " must be a JSON object");
    for (const auto& [key, value] : obj.items())
        if (!allowed.count(key))
            throw config_error("unknown key '" + key + "' in " + where);
}

template <typename T>
void read(const nlohmann::json& obj, const char* key, T& out) {
    if (obj.contains(key)) {
        try {
            out = obj.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            throw config_error(std::string("bad value type for '") + key + "'");
        }
    }
}

} // namespace detail

inline Scenario scenario_from_json(const nlohmann::json& doc) {
    detail::require_keys(doc, {"tag", "delay_lo", "delay_hi"}, "scenario");
    std::string tag = "gaussian";
    detail::read(doc, "tag", tag);
    const ScenarioTag parsed = parse_scenario(tag);
    if (parsed == ScenarioTag::Delayed) {
        double lo = 0.0;
        double hi = 1.0;
        detail::read(doc, "delay_lo", lo);
        detail::read(doc, "delay_hi", hi);
        return Scenario::delayed(lo, hi);
    }
    Scenario sc;
    sc.tag = parsed;
    return sc;
}

inline std::string default_problem_description(ScenarioTag tag) {
    switch (tag) {
    case ScenarioTag::Gaussian:
        return "A linear discrete-time system observed through zero-mean gaussian noise.";
    case ScenarioTag::HalfGaussian:
        return "Observations carry asymmetric noise: each component adds the absolute "
               "value of a zero-mean gaussian, so the noise has a positive mean.";
    case ScenarioTag::Delayed:
        return "Each observation reflects a slightly earlier state; the delay is drawn "
               "uniformly per step and lands between two adjacent true states.";
    case ScenarioTag::Nonlinear:
        return "The state passes through a known nonlinear map (cubic and sinusoidal "
               "terms) before the linear transition; observations stay linear.";
    }
    return "";
}

/// Parse and validate a full run configuration.
inline engine::EngineConfig engine_config_from_json(const nlohmann::json& doc) {
    detail::require_keys(doc,
                         {"method", "task", "anti_leak", "system", "scenario", "splits",
                          "engine", "backend", "problem_description"},
                         "config root");

    engine::EngineConfig cfg;

    std::string method = "cgp";
    detail::read(doc, "method", method);
    cfg.method = engine::parse_method(method);

    std::string task = "predict";
    bool anti_leak = true;
    detail::read(doc, "task", task);
    detail::read(doc, "anti_leak", anti_leak);
    cfg.task = parse_task(task, anti_leak);

    double dt = 1.0;
    double sigma_a = 0.5;
    double sigma_z = 1.0;
    if (doc.contains("system")) {
        detail::require_keys(doc.at("system"), {"dt", "sigma_a", "sigma_z"}, "system");
        detail::read(doc.at("system"), "dt", dt);
        detail::read(doc.at("system"), "sigma_a", sigma_a);
        detail::read(doc.at("system"), "sigma_z", sigma_z);
    }
    cfg.sys = make_system(dt, sigma_a, sigma_z);

    if (doc.contains("scenario"))
        cfg.scenario = scenario_from_json(doc.at("scenario"));

    if (doc.contains("splits")) {
        const auto& splits = doc.at("splits");
        detail::require_keys(splits,
                             {"train_steps", "val_trajectories", "val_steps",
                              "test_trajectories", "test_steps", "data_seed"},
                             "splits");
        detail::read(splits, "train_steps", cfg.splits.train_steps);
        detail::read(splits, "val_trajectories", cfg.splits.val_trajectories);
        detail::read(splits, "val_steps", cfg.splits.val_steps);
        detail::read(splits, "test_trajectories", cfg.splits.test_trajectories);
        detail::read(splits, "test_steps", cfg.splits.test_steps);
        detail::read(splits, "data_seed", cfg.data_seed);
    }

    if (doc.contains("engine")) {
        const auto& eng = doc.at("engine");
        detail::require_keys(eng,
                             {"islands", "migration_period", "database_capacity",
                              "temperature", "iterations", "graphs_per_iteration",
                              "mutants_per_graph", "prompts_per_iteration",
                              "llm_sample_count", "llm_variants", "max_tokens",
                              "random_batch", "max_nodes", "node_set", "mutation_rate",
                              "statement_budget", "init_mode", "init_random", "seed",
                              "threads", "eval_budget", "rescore_all", "rescore_top_k"},
                             "engine");
        detail::read(eng, "islands", cfg.islands);
        detail::read(eng, "migration_period", cfg.migration_period);
        detail::read(eng, "database_capacity", cfg.database_capacity);
        detail::read(eng, "temperature", cfg.temperature);
        detail::read(eng, "iterations", cfg.iterations);
        detail::read(eng, "graphs_per_iteration", cfg.graphs_per_iteration);
        detail::read(eng, "mutants_per_graph", cfg.mutants_per_graph);
        detail::read(eng, "prompts_per_iteration", cfg.prompts_per_iteration);
        detail::read(eng, "llm_sample_count", cfg.llm_sample_count);
        detail::read(eng, "llm_variants", cfg.llm_variants);
        detail::read(eng, "max_tokens", cfg.max_tokens);
        detail::read(eng, "random_batch", cfg.random_batch);
        detail::read(eng, "max_nodes", cfg.cgp.max_nodes);
        detail::read(eng, "mutation_rate", cfg.cgp.per_gene_mutation_rate);
        detail::read(eng, "statement_budget", cfg.guards.max_statements);
        detail::read(eng, "init_random", cfg.init_random);
        detail::read(eng, "seed", cfg.seed);
        detail::read(eng, "threads", cfg.threads);
        detail::read(eng, "rescore_all", cfg.rescore_all);
        detail::read(eng, "rescore_top_k", cfg.rescore_top_k);
        if (eng.contains("eval_budget") && !eng.at("eval_budget").is_null()) {
            std::size_t budget = 0;
            detail::read(eng, "eval_budget", budget);
            cfg.eval_budget = budget;
        }
        if (eng.contains("node_set")) {
            std::string ns;
            detail::read(eng, "node_set", ns);
            if (ns == "strict")
                cfg.cgp.node_set = cgp::strict_node_set();
            else if (ns == "strict+transpose")
                cfg.cgp.node_set = {cgp::NodeOp::Add, cgp::NodeOp::Assign, cgp::NodeOp::MatMul,
                                    cgp::NodeOp::Invert, cgp::NodeOp::Transpose};
            else if (ns == "extended")
                cfg.cgp.node_set = cgp::extended_node_set();
            else
                throw config_error("node_set must be strict, strict+transpose, or extended");
        }
        if (eng.contains("init_mode")) {
            std::string mode;
            detail::read(eng, "init_mode", mode);
            if (mode == "random")
                cfg.init_mode = engine::EngineConfig::InitMode::RandomOnly;
            else if (mode == "kalman-seeded")
                cfg.init_mode = engine::EngineConfig::InitMode::KalmanSeeded;
            else
                throw config_error("init_mode must be random or kalman-seeded");
        }
    }
    // beyond-Kalman scenarios default to seeding with the known filter
    if (!doc.contains("engine") || !doc.at("engine").contains("init_mode")) {
        if (cfg.scenario.tag != ScenarioTag::Gaussian)
            cfg.init_mode = engine::EngineConfig::InitMode::KalmanSeeded;
    }

    if (doc.contains("backend")) {
        const auto& backend = doc.at("backend");
        detail::require_keys(backend,
                             {"mock", "endpoint", "model", "auth_env", "timeout_ms",
                              "retries", "backoff_ms"},
                             "backend");
        detail::read(backend, "mock", cfg.backend.mock_path);
        detail::read(backend, "endpoint", cfg.backend.endpoint);
        detail::read(backend, "model", cfg.backend.model);
        detail::read(backend, "auth_env", cfg.backend.auth_env);
        detail::read(backend, "timeout_ms", cfg.backend.timeout_ms);
        detail::read(backend, "retries", cfg.backend.retries);
        detail::read(backend, "backoff_ms", cfg.backend.backoff_ms);
    }

    detail::read(doc, "problem_description", cfg.problem_description);
    if (cfg.problem_description.empty())
        cfg.problem_description = default_problem_description(cfg.scenario.tag);

    if (cfg.temperature <= 0.0)
        throw config_error("temperature must be positive");
    return cfg;
}

inline engine::EngineConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in.good())
        throw config_error("cannot open config file " + path);
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw config_error("config is not valid JSON: " + std::string(e.what()));
    }
    return engine_config_from_json(doc);
}

} // namespace evofilter::config
