// Command-line front end: simulate trajectories, run discovery, evaluate
// programs against the scenario splits, and convert between the graph
// and program representations.
//
// Exit codes: 0 success, 1 runtime/IO failure, 2 usage or config error.
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include <evofilter/cgp.hpp>
#include <evofilter/config.hpp>
#include <evofilter/engine.hpp>
#include <evofilter/kalman.hpp>

namespace fs = std::filesystem;
using namespace evofilter;

namespace {

struct usage_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string read_file(const std::string& path) {
    std::ifstream in(path);
    if (!in.good())
        throw std::runtime_error("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path);
    if (!out.good())
        throw std::runtime_error("cannot write " + path);
    out << content;
}

struct ScenarioArgs {
    std::string tag = "gaussian";
    double sigma_a = 0.5;
    double sigma_z = 1.0;
    double dt = 1.0;
    double delay_lo = 0.0;
    double delay_hi = 1.0;

    void attach(CLI::App* cmd) {
        cmd->add_option("--scenario", tag, "gaussian, half-gaussian, delayed, or nonlinear")
            ->capture_default_str();
        cmd->add_option("--sigma-a", sigma_a, "acceleration noise std")->capture_default_str();
        cmd->add_option("--sigma-z", sigma_z, "measurement noise std")->capture_default_str();
        cmd->add_option("--dt", dt, "sampling interval")->capture_default_str();
        cmd->add_option("--delay-lo", delay_lo, "delay range low (delayed scenario)")
            ->capture_default_str();
        cmd->add_option("--delay-hi", delay_hi, "delay range high (delayed scenario)")
            ->capture_default_str();
    }

    SystemModel system() const { return make_system(dt, sigma_a, sigma_z); }

    Scenario scenario() const {
        const ScenarioTag parsed = parse_scenario(tag);
        if (parsed == ScenarioTag::Delayed)
            return Scenario::delayed(delay_lo, delay_hi);
        Scenario sc;
        sc.tag = parsed;
        return sc;
    }
};

int cmd_simulate(const ScenarioArgs& sargs, std::size_t steps, std::uint64_t seed,
                 const std::string& out_path) {
    SystemModel sys = sargs.system();
    Trajectory traj = simulate(sys, sargs.scenario(), steps, seed);
    std::ostringstream csv;
    write_trajectory_csv(csv, traj);
    if (out_path.empty() || out_path == "-")
        std::cout << csv.str();
    else
        write_file(out_path, csv.str());
    return 0;
}

int cmd_discover(const std::string& config_path, const std::string& out_dir,
                 const std::string& seed_override, const std::string& method_override,
                 const std::string& iters_override, const std::string& backend_override,
                 const std::string& threads_override) {
    engine::EngineConfig cfg = config::load_config(config_path);
    if (!seed_override.empty())
        cfg.seed = std::stoull(seed_override);
    if (!method_override.empty())
        cfg.method = engine::parse_method(method_override);
    if (!iters_override.empty())
        cfg.iterations = std::stoull(iters_override);
    if (!threads_override.empty())
        cfg.threads = static_cast<unsigned>(std::stoul(threads_override));
    if (!backend_override.empty()) {
        if (backend_override.rfind("mock:", 0) == 0) {
            cfg.backend.mock_path = backend_override.substr(5);
            cfg.backend.endpoint.clear();
        } else if (backend_override.rfind("http:", 0) == 0) {
            cfg.backend.endpoint = backend_override;
            cfg.backend.mock_path.clear();
        } else {
            throw config::config_error("--backend expects mock:<path> or http://<url>");
        }
    }

    engine::RunResult result = engine::run_discovery(cfg);

    fs::create_directories(out_dir);
    {
        std::ofstream manifest(out_dir + "/manifest.json");
        manifest << result.manifest.dump(1) << "\n";
    }
    {
        std::ofstream history(out_dir + "/history.csv");
        history << "iteration,island,best,median,evaluations,rejects\n";
        for (const auto& h : result.history)
            history << h.iteration << ',' << h.island << ',' << h.best << ',' << h.median
                    << ',' << h.evaluations << ',' << h.rejects << '\n';
    }
    write_file(out_dir + "/best.mdsl", result.best.canonical);
    fs::create_directories(out_dir + "/top");
    for (std::size_t i = 0; i < result.finalists.size(); ++i) {
        std::ostringstream name;
        name << out_dir << "/top/cand_" << i << ".mdsl";
        std::ostringstream body;
        body << "# validation_mse: " << result.finalist_validation[i] << "\n"
             << result.finalists[i].canonical;
        write_file(name.str(), body.str());
    }

    std::cout << "run complete\n"
              << "  evaluations:  " << result.eval_count << "\n"
              << "  best (train): " << result.best.fitness << "\n"
              << "  validation:   " << result.validation_fitness << "\n"
              << "  test:         " << result.test_report.mean << " +/- "
              << result.test_report.stderr_ << "\n"
              << "  manifest:     " << out_dir << "/manifest.json (hash "
              << result.manifest_hash << ")\n";
    return 0;
}

int cmd_evaluate(const std::string& program_path, const std::string& task_tag, bool anti_leak,
                 const ScenarioArgs& sargs, const std::string& split, std::size_t trajectories,
                 std::size_t steps, std::uint64_t data_seed, unsigned threads,
                 const std::string& report_path, const std::string& per_step_csv) {
    dsl::Program program = dsl::parse(read_file(program_path));
    TaskSpec task = parse_task(task_tag, anti_leak);
    SystemModel sys = sargs.system();
    Scenario sc = sargs.scenario();

    SplitSpec spec;
    spec.val_trajectories = trajectories;
    spec.val_steps = steps;
    spec.test_trajectories = trajectories;
    spec.test_steps = steps;
    EvalDatasets data = make_datasets(sys, sc, data_seed, spec);
    std::vector<Trajectory> trajs;
    if (split == "train")
        trajs.push_back(data.train);
    else
        trajs = split == "validation" ? std::move(data.validation) : std::move(data.test);
    const std::size_t split_steps = split == "train" ? spec.train_steps : steps;

    FitnessReport report = evaluate_program(program, task, sys, trajs, threads);
    FitnessReport kalman = reference_report(sys, trajs);
    const double obs = observation_baseline(trajs);

    std::ostringstream out;
    out << "program: " << program_path << "\n";
    out << "task: " << task.name << (anti_leak ? " (anti-leak)" : "") << "\n";
    out << "scenario: " << scenario_name(sc.tag) << " (sigma_a=" << sargs.sigma_a
        << ", sigma_z=" << sargs.sigma_z << ", dt=" << sargs.dt << ")\n";
    out << "split: " << split << " (" << trajs.size() << " x " << split_steps
        << ", data seed " << data_seed << ")\n";
    if (report.failed) {
        out << "result: FAILED (" << report.failure_reason << ")\n";
        out << "fitness: " << report.mean << " (worst-fitness sentinel)\n";
    } else {
        out << "mean_mse: " << report.mean << " +/- " << report.stderr_ << "\n";
    }
    out << "kalman_mse: " << kalman.mean << " +/- " << kalman.stderr_ << "\n";
    out << "observation_mse: " << obs << "\n";
    if (!report.failed) {
        out << "per_trajectory:\n";
        for (std::size_t i = 0; i < report.per_trajectory.size(); ++i)
            out << "  " << i << ": " << report.per_trajectory[i] << "\n";
    }

    if (report_path.empty() || report_path == "-")
        std::cout << out.str();
    else
        write_file(report_path, out.str());

    if (!per_step_csv.empty() && !report.failed) {
        Harness harness(task, program);
        std::vector<double> step_mse(split_steps, 0.0);
        for (const auto& traj : trajs) {
            auto estimates = harness.run_trajectory(sys, traj);
            for (std::size_t k = 0; k < estimates.size() && k < split_steps; ++k) {
                const Matrix d = sub(estimates[k], traj.states[k]);
                step_mse[k] += d(0, 0) * d(0, 0) + d(1, 0) * d(1, 0);
            }
        }
        std::ostringstream csv;
        csv << "step,mse\n";
        for (std::size_t k = 0; k < split_steps; ++k)
            csv << (k + 1) << ',' << step_mse[k] / static_cast<double>(trajs.size()) << '\n';
        write_file(per_step_csv, csv.str());
    }
    return report.failed ? 1 : 0;
}

int cmd_export(const std::string& input_path, const std::string& format,
               const std::string& out_path, const std::string& task_tag, bool anti_leak) {
    const std::string content = read_file(input_path);
    const bool input_is_genotype = content.rfind("cgp-genotype", 0) == 0;
    cgp::Genotype g = input_is_genotype ? cgp::genotype_from_text(content)
                                        : cgp::genotype_from_program(dsl::parse(content));

    std::string output;
    if (format == "dsl") {
        dsl::Signature sig = task_tag.empty()
                                 ? dsl::Signature::generic(g.num_inputs, g.output_genes.size())
                                 : parse_task(task_tag, anti_leak).signature;
        dsl::Program p = cgp::decode(g, sig);
        output = dsl::print(p);
        const auto active = cgp::active_nodes(g);
        std::size_t active_count = 0;
        for (bool a : active)
            active_count += a;
        std::cerr << "statements: " << p.statements.size() << " (active nodes: " << active_count
                  << ")\n";
    } else if (format == "genotype") {
        output = cgp::to_text(g);
    } else {
        throw usage_error("--format must be dsl or genotype");
    }

    if (out_path.empty() || out_path == "-")
        std::cout << output;
    else
        write_file(out_path, output);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"evolutionary discovery of recursive state estimators"};
    app.require_subcommand(1);

    // simulate
    auto* sim = app.add_subcommand("simulate", "simulate a trajectory and write CSV");
    ScenarioArgs sim_scenario;
    sim_scenario.attach(sim);
    std::size_t sim_steps = 200;
    std::uint64_t sim_seed = 0;
    std::string sim_out;
    sim->add_option("--steps", sim_steps, "trajectory length")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    sim->add_option("--seed", sim_seed, "simulation seed")->capture_default_str();
    sim->add_option("--out", sim_out, "output CSV path (default stdout)");

    // discover
    auto* disc = app.add_subcommand("discover", "run an evolutionary discovery");
    std::string disc_config;
    std::string disc_out = "run";
    std::string disc_seed, disc_method, disc_iters, disc_backend, disc_threads;
    disc->add_option("--config", disc_config, "run configuration JSON")->required();
    disc->add_option("--out", disc_out, "output directory")->capture_default_str();
    disc->add_option("--seed", disc_seed, "override the search seed");
    disc->add_option("--method", disc_method, "override the method (cgp, llm, random)");
    disc->add_option("--iters", disc_iters, "override the iteration count");
    disc->add_option("--backend", disc_backend, "override backend: mock:<path> or http://url");
    disc->add_option("--threads", disc_threads, "override worker thread count");

    // evaluate
    auto* eval = app.add_subcommand("evaluate", "evaluate a .mdsl program on a scenario");
    ScenarioArgs eval_scenario;
    eval_scenario.attach(eval);
    std::string eval_program, eval_task = "full", eval_split = "test";
    bool eval_anti_leak = false;
    std::size_t eval_trajectories = 50, eval_steps = 500;
    std::uint64_t eval_data_seed = 0;
    unsigned eval_threads = 2;
    std::string eval_report, eval_per_step;
    eval->add_option("program", eval_program, "program file (.mdsl)")->required();
    eval->add_option("--task", eval_task,
                     "predict, predict-12.5, predict-25, predict-50, predict-75, full")
        ->capture_default_str();
    eval->add_flag("--anti-leak", eval_anti_leak, "expect generic i_*/o_* names");
    eval->add_option("--split", eval_split, "train, validation, or test")
        ->check(CLI::IsMember({"train", "validation", "test"}))
        ->capture_default_str();
    eval->add_option("--trajectories", eval_trajectories, "trajectories per split")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    eval->add_option("--steps", eval_steps, "steps per trajectory")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    eval->add_option("--data-seed", eval_data_seed, "dataset seed")->capture_default_str();
    eval->add_option("--threads", eval_threads, "worker threads")->capture_default_str();
    eval->add_option("--report", eval_report, "report path (default stdout)");
    eval->add_option("--per-step-csv", eval_per_step, "per-step MSE CSV path");

    // export
    auto* exp = app.add_subcommand("export", "convert genotype <-> dsl representations");
    std::string exp_input, exp_format = "dsl", exp_out, exp_task;
    bool exp_anti_leak = false;
    exp->add_option("input", exp_input, "genotype text file or .mdsl program")->required();
    exp->add_option("--format", exp_format, "output format: dsl or genotype")
        ->capture_default_str();
    exp->add_option("--out", exp_out, "output path (default stdout)");
    exp->add_option("--task", exp_task, "name outputs after this task's signature");
    exp->add_flag("--anti-leak", exp_anti_leak, "use generic names for --task");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0)
            return app.exit(e); // --help
        app.exit(e);
        return 2;
    }

    try {
        if (sim->parsed())
            return cmd_simulate(sim_scenario, sim_steps, sim_seed, sim_out);
        if (disc->parsed())
            return cmd_discover(disc_config, disc_out, disc_seed, disc_method, disc_iters,
                                disc_backend, disc_threads);
        if (eval->parsed())
            return cmd_evaluate(eval_program, eval_task, eval_anti_leak, eval_scenario,
                                eval_split, eval_trajectories, eval_steps, eval_data_seed,
                                eval_threads, eval_report, eval_per_step);
        if (exp->parsed())
            return cmd_export(exp_input, exp_format, exp_out, exp_task, exp_anti_leak);
    } catch (const config::config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const usage_error& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const domain_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const dsl::parse_error& e) {
        std::cerr << "parse error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
