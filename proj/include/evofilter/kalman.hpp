// Reference recursive estimator, the MSE fitness, task definitions for
// discovery (prediction only, progressive update fractions, full), and
// the harness that evaluates a candidate program with the fixed
// remainder of the reference update.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "dsl.hpp"
#include "dynsys.hpp"
#include "matrix.hpp"
#include "rng.hpp"
#include "util.hpp"

namespace evofilter {

inline constexpr double kWorstFitness = 1e18;

struct FilterState {
    Matrix x_hat = Matrix(2, 1);
    Matrix P = Matrix::identity(2);
};

inline FilterState initial_state() { return FilterState{}; }

/// x <- F x + B u,  P <- F P F^T + Q.
inline FilterState predict(const FilterState& s, const SystemModel& sys, const Matrix& u) {
    FilterState next;
    next.x_hat = add(matmul(sys.F, s.x_hat), matmul(sys.B, u));
    next.P = add(matmul(matmul(sys.F, s.P), transpose(sys.F)), sys.Q);
    return next;
}

inline FilterState predict(const FilterState& s, const SystemModel& sys) {
    return predict(s, sys, Matrix(sys.B.cols(), 1));
}

struct UpdateResult {
    FilterState state;
    Matrix y; // innovation
    Matrix S; // innovation covariance
    Matrix K; // gain
};

/// Measurement update; the covariance is re-symmetrized to guard drift
/// over long runs.
inline UpdateResult update(const FilterState& s, const Matrix& z, const SystemModel& sys) {
    UpdateResult r;
    r.y = sub(z, matmul(sys.H, s.x_hat));
    r.S = add(matmul(matmul(sys.H, s.P), transpose(sys.H)), sys.R);
    r.K = matmul(matmul(s.P, transpose(sys.H)), invert(r.S));
    r.state.x_hat = add(s.x_hat, matmul(r.K, r.y));
    Matrix P = matmul(sub(Matrix::identity(2), matmul(r.K, sys.H)), s.P);
    r.state.P = scale(add(P, transpose(P)), 0.5);
    return r;
}

struct StepResult {
    FilterState next;
    Matrix estimate; // posterior state estimate for this step
};

using Stepper = std::function<StepResult(const FilterState&, const Matrix& z)>;

inline Stepper reference_stepper(const SystemModel& sys) {
    return [&sys](const FilterState& s, const Matrix& z) {
        UpdateResult r = update(predict(s, sys), z, sys);
        return StepResult{r.state, r.state.x_hat};
    };
}

/// Variant that applies a known state map in the prediction: x <- F g(x).
inline Stepper state_map_stepper(const SystemModel& sys,
                                 std::function<Matrix(const Matrix&)> g) {
    return [&sys, g = std::move(g)](const FilterState& s, const Matrix& z) {
        FilterState pred;
        pred.x_hat = matmul(sys.F, g(s.x_hat));
        pred.P = add(matmul(matmul(sys.F, s.P), transpose(sys.F)), sys.Q);
        UpdateResult r = update(pred, z, sys);
        return StepResult{r.state, r.state.x_hat};
    };
}

/// One posterior estimate per step, from x0 = 0, P0 = I. The first
/// failure aborts the run and propagates to the caller.
inline std::vector<Matrix> run_filter(const SystemModel& sys, const Trajectory& traj,
                                      const Stepper& stepper) {
    std::vector<Matrix> estimates;
    estimates.reserve(traj.observations.size());
    FilterState s = initial_state();
    for (const Matrix& z : traj.observations) {
        StepResult r = stepper(s, z);
        estimates.push_back(r.estimate);
        s = r.next;
    }
    return estimates;
}

/// Reference run that also exposes the per-step covariance for tests.
inline std::vector<FilterState> reference_trace(const SystemModel& sys, const Trajectory& traj) {
    std::vector<FilterState> trace;
    trace.reserve(traj.observations.size());
    FilterState s = initial_state();
    for (const Matrix& z : traj.observations) {
        s = update(predict(s, sys), z, sys).state;
        trace.push_back(s);
    }
    return trace;
}

/// Mean squared estimation error: (1/T) sum_k ||x_hat_k - x_k||^2.
inline double fitness(const std::vector<Matrix>& estimates, const std::vector<Matrix>& truth) {
    if (estimates.size() != truth.size() || truth.empty())
        throw domain_error("fitness requires equal non-empty sequences");
    double total = 0.0;
    for (std::size_t k = 0; k < truth.size(); ++k) {
        const Matrix d = sub(estimates[k], truth[k]);
        for (std::size_t i = 0; i < d.size(); ++i)
            total += d.data()[i] * d.data()[i];
    }
    return total / static_cast<double>(truth.size());
}

/// Oracle for half-gaussian noise: subtract the known half-normal mean
/// sigma_z * sqrt(2/pi) from each observation component, then filter.
inline std::vector<Matrix> debiased_kalman_baseline(const SystemModel& sys,
                                                    const Trajectory& traj) {
    const double bias = sys.sigma_z * std::sqrt(2.0 / std::numbers::pi);
    Trajectory corrected = traj;
    for (Matrix& z : corrected.observations)
        z = add_scalar(z, -bias);
    return run_filter(sys, corrected, reference_stepper(sys));
}

// ---------------------------------------------------------------------------
// Tasks. The canonical filter is eight statements: two predict and six
// update. A task discovers the first 2 + m statements; the harness runs
// the rest. Fractions map onto m as 12.5% -> 1, 25% -> 2, 50% -> 3,
// 75% -> 5, 100% -> 6.

inline const char* canonical_filter_text() {
    return "fn kalman(x, F, P, Q, z, R) -> (x_predict, P, y, S, K, x_update) {\n"
           "  x_predict = F @ x\n"
           "  P = F @ P @ tr(F) + Q\n"
           "  y = z - x_predict\n"
           "  S = P + R\n"
           "  inv_S = inv(S)\n"
           "  K = P @ inv_S\n"
           "  x_update = x_predict + K @ y\n"
           "  P = P - K @ P\n"
           "}\n";
}

inline const dsl::Program& canonical_filter_program() {
    static const dsl::Program p = dsl::parse(canonical_filter_text());
    return p;
}

/// The two predict statements with the predict-task signature.
inline const dsl::Program& canonical_predict_program() {
    static const dsl::Program p = dsl::parse(
        "fn kalman_predict(x, F, P, Q) -> (x_predict, P) {\n"
        "  x_predict = F @ x\n"
        "  P = F @ P @ tr(F) + Q\n"
        "}\n");
    return p;
}

struct TaskSpec {
    std::string name;
    int update_statements = 0; // m: update statements the candidate discovers
    bool anti_leak = false;
    dsl::Signature signature;
    std::vector<std::string> input_roles;  // canonical name per input position
    std::vector<std::string> output_roles; // canonical name per output position
};

inline TaskSpec make_task(double update_fraction, bool anti_leak) {
    int m = -1;
    if (update_fraction == 0.0) m = 0;
    else if (update_fraction == 0.125) m = 1;
    else if (update_fraction == 0.25) m = 2;
    else if (update_fraction == 0.5) m = 3;
    else if (update_fraction == 0.75) m = 5;
    else if (update_fraction == 1.0) m = 6;
    if (m < 0)
        throw domain_error("update fraction must be one of 0, 0.125, 0.25, 0.5, 0.75, 1");

    TaskSpec task;
    task.update_statements = m;
    task.anti_leak = anti_leak;
    if (m == 0) {
        task.name = "predict";
        task.input_roles = {"x", "F", "P", "Q"};
        task.output_roles = {"x_predict", "P"};
    } else {
        task.name = m == 6 ? "full" : "predict+" + dsl::format_number(update_fraction * 100) + "%";
        task.input_roles = {"x", "F", "P", "Q", "z", "R"};
        static const std::vector<std::string> update_targets = {"y", "S", "inv_S", "K",
                                                                "x_update", "P"};
        task.output_roles = {"x_predict", "P"};
        if (m == 6) {
            task.output_roles = {"x_predict", "P", "y", "S", "K", "x_update"};
        } else {
            for (int i = 0; i < m; ++i)
                task.output_roles.push_back(update_targets[static_cast<std::size_t>(i)]);
        }
    }
    task.signature = anti_leak
        ? dsl::Signature::generic(task.input_roles.size(), task.output_roles.size())
        : dsl::Signature{task.input_roles, task.output_roles, false};
    return task;
}

inline TaskSpec parse_task(const std::string& tag, bool anti_leak) {
    if (tag == "predict") return make_task(0.0, anti_leak);
    if (tag == "predict-12.5") return make_task(0.125, anti_leak);
    if (tag == "predict-25") return make_task(0.25, anti_leak);
    if (tag == "predict-50") return make_task(0.5, anti_leak);
    if (tag == "predict-75") return make_task(0.75, anti_leak);
    if (tag == "full") return make_task(1.0, anti_leak);
    throw domain_error("unknown task: " + tag +
                       " (expected predict, predict-12.5, predict-25, predict-50, "
                       "predict-75, or full)");
}

/// The task's target written in the task's own signature names; used to
/// seed beyond-Kalman runs and as the optimal-fitness reference.
inline dsl::Program task_target_program(const TaskSpec& task) {
    const dsl::Program& base = task.update_statements == 0 ? canonical_predict_program()
                                                           : canonical_filter_program();
    dsl::Program p;
    p.signature = task.signature;

    // Sequential rename: a canonical name reads as its current binding
    // (input name until reassigned), and assigning an output role
    // switches the binding to the output name. Needed because e.g. "P"
    // is input i_3 before the covariance statement and output o_2 after.
    std::map<std::string, std::string> current;
    for (std::size_t i = 0; i < task.input_roles.size(); ++i)
        current[task.input_roles[i]] = task.signature.inputs[i];

    std::function<dsl::ExprPtr(const dsl::ExprPtr&)> rewrite =
        [&](const dsl::ExprPtr& e) -> dsl::ExprPtr {
        if (!e)
            return nullptr;
        dsl::Expr copy = *e;
        if (copy.kind == dsl::ExprKind::Ref) {
            auto it = current.find(copy.name);
            if (it != current.end())
                copy.name = it->second;
        }
        copy.lhs = rewrite(e->lhs);
        copy.rhs = rewrite(e->rhs);
        return std::make_shared<dsl::Expr>(std::move(copy));
    };

    const int keep = 2 + task.update_statements;
    for (int i = 0; i < keep && i < static_cast<int>(base.statements.size()); ++i) {
        const auto& stmt = base.statements[static_cast<std::size_t>(i)];
        dsl::Statement out;
        out.expr = rewrite(stmt.expr);
        out.target = stmt.target;
        for (std::size_t r = 0; r < task.output_roles.size(); ++r) {
            if (task.output_roles[r] == stmt.target) {
                out.target = task.signature.outputs[r];
                break;
            }
        }
        current[stmt.target] = out.target;
        p.statements.push_back(std::move(out));
    }
    return p;
}

// ---------------------------------------------------------------------------
// Candidate harness

struct FitnessReport {
    double mean = kWorstFitness;
    double stderr_ = 0.0;
    std::vector<double> per_trajectory;
    bool failed = false;
    std::string failure_reason;
};

namespace detail {

// Fixed remainder: canonical statements (2 + m)..7 compiled once, with
// the names it reads from outside the slice as inputs.
struct Remainder {
    std::optional<dsl::Executor> exec;
    std::vector<std::string> inputs;

    explicit Remainder(int m) {
        const dsl::Program& base = canonical_filter_program();
        const std::size_t first = static_cast<std::size_t>(2 + m);
        if (first >= base.statements.size())
            return;
        dsl::Program slice;
        std::vector<std::string> assigned;
        auto is_assigned = [&](const std::string& n) {
            for (const auto& a : assigned)
                if (a == n)
                    return true;
            return false;
        };
        for (std::size_t i = first; i < base.statements.size(); ++i) {
            std::vector<std::string> refs;
            dsl::detail::collect_refs(base.statements[i].expr, refs);
            for (const auto& r : refs)
                if (!is_assigned(r)) {
                    bool seen = false;
                    for (const auto& in : inputs)
                        seen |= in == r;
                    if (!seen)
                        inputs.push_back(r);
                }
            // inputs that are later reassigned still come from outside first
            if (!is_assigned(base.statements[i].target))
                assigned.push_back(base.statements[i].target);
            slice.statements.push_back(base.statements[i]);
        }
        slice.signature.inputs = inputs;
        slice.signature.outputs = {"x_update", "P"};
        if (m >= 5)
            slice.signature.outputs = {"P"}; // x_update already from the candidate
        exec.emplace(slice);
    }
};

} // namespace detail

/// Composes a candidate with the fixed remainder of the reference update
/// and runs it as a recursive filter over a trajectory.
class Harness {
public:
    Harness(const TaskSpec& task, const dsl::Program& candidate,
            const dsl::GuardConfig& guards = {})
        : task_(task), candidate_(candidate, guards), remainder_(task.update_statements) {}

    /// Posterior estimates per step; throws dsl::EvalError on failure.
    std::vector<Matrix> run_trajectory(const SystemModel& sys, const Trajectory& traj) const {
        std::vector<Matrix> slots(candidate_.num_slots());
        std::vector<Matrix> rem_slots;
        if (remainder_.exec)
            rem_slots.resize(remainder_.exec->num_slots());

        std::vector<Matrix> estimates;
        estimates.reserve(traj.observations.size());

        Matrix x_hat(2, 1);
        Matrix P = Matrix::identity(2);
        for (std::size_t k = 0; k < traj.observations.size(); ++k) {
            const Matrix& z = traj.observations[k];
            for (std::size_t i = 0; i < task_.input_roles.size(); ++i)
                slots[i] = role_value(task_.input_roles[i], sys, x_hat, P, z);
            candidate_.run(slots);

            const Matrix* out_x_update = nullptr;
            const Matrix* out_P = nullptr;
            if (remainder_.exec) {
                for (std::size_t i = 0; i < remainder_.inputs.size(); ++i)
                    rem_slots[i] = remainder_input(remainder_.inputs[i], sys, slots, z);
                remainder_.exec->run(rem_slots);
                if (task_.update_statements >= 5) {
                    out_x_update = &slots[static_cast<std::size_t>(
                        candidate_.output_slot(role_index("x_update")))];
                    out_P = &rem_slots[static_cast<std::size_t>(remainder_.exec->output_slot(0))];
                } else {
                    out_x_update = &rem_slots[static_cast<std::size_t>(
                        remainder_.exec->output_slot(0))];
                    out_P = &rem_slots[static_cast<std::size_t>(remainder_.exec->output_slot(1))];
                }
            } else {
                out_x_update = &slots[static_cast<std::size_t>(
                    candidate_.output_slot(role_index("x_update")))];
                out_P = &slots[static_cast<std::size_t>(
                    candidate_.output_slot(role_index("P")))];
            }
            if (out_x_update->rows() != 2 || out_x_update->cols() != 1)
                throw dsl::EvalError(dsl::EvalErrorKind::ShapeMismatch, k,
                                     "state estimate must be 2x1, got " +
                                         out_x_update->shape_str());
            if (out_P->rows() != 2 || out_P->cols() != 2)
                throw dsl::EvalError(dsl::EvalErrorKind::ShapeMismatch, k,
                                     "covariance must be 2x2, got " + out_P->shape_str());
            estimates.push_back(*out_x_update);
            x_hat = *out_x_update;
            P = *out_P;
        }
        return estimates;
    }

private:
    std::size_t role_index(const std::string& role) const {
        for (std::size_t i = 0; i < task_.output_roles.size(); ++i)
            if (task_.output_roles[i] == role)
                return i;
        throw domain_error("task does not produce role " + role);
    }

    static Matrix role_value(const std::string& role, const SystemModel& sys, const Matrix& x_hat,
                             const Matrix& P, const Matrix& z) {
        if (role == "x") return x_hat;
        if (role == "F") return sys.F;
        if (role == "P") return P;
        if (role == "Q") return sys.Q;
        if (role == "z") return z;
        if (role == "R") return sys.R;
        throw domain_error("unknown input role " + role);
    }

    // Remainder inputs come from the candidate's outputs where produced,
    // otherwise from the system/measurement.
    Matrix remainder_input(const std::string& name, const SystemModel& sys,
                           const std::vector<Matrix>& cand_slots, const Matrix& z) const {
        for (std::size_t i = 0; i < task_.output_roles.size(); ++i)
            if (task_.output_roles[i] == name)
                return cand_slots[static_cast<std::size_t>(
                    candidate_.output_slot(i))];
        if (name == "z") return z;
        if (name == "R") return sys.R;
        if (name == "F") return sys.F;
        if (name == "Q") return sys.Q;
        throw domain_error("remainder reads unknown name " + name);
    }

    TaskSpec task_;
    dsl::Executor candidate_;
    detail::Remainder remainder_;
};

// ---------------------------------------------------------------------------
// Datasets and candidate evaluation

struct SplitSpec {
    std::size_t train_steps = 200;
    std::size_t val_trajectories = 50;
    std::size_t val_steps = 500;
    std::size_t test_trajectories = 50;
    std::size_t test_steps = 500;
};

struct EvalDatasets {
    Trajectory train;
    std::vector<Trajectory> validation;
    std::vector<Trajectory> test;
};

/// Split seeds are derived from disjoint substream indices of the base
/// seed, so train, validation and test never share noise draws.
inline EvalDatasets make_datasets(const SystemModel& sys, const Scenario& sc,
                                  std::uint64_t data_seed, const SplitSpec& spec = {}) {
    EvalDatasets data;
    data.train = simulate(sys, sc, spec.train_steps, derive_seed(data_seed, 1'000'000));
    for (std::size_t i = 0; i < spec.val_trajectories; ++i)
        data.validation.push_back(
            simulate(sys, sc, spec.val_steps, derive_seed(data_seed, 2'000'000 + i)));
    for (std::size_t i = 0; i < spec.test_trajectories; ++i)
        data.test.push_back(
            simulate(sys, sc, spec.test_steps, derive_seed(data_seed, 3'000'000 + i)));
    return data;
}

inline FitnessReport summarize(std::vector<double> per_trajectory) {
    FitnessReport report;
    report.per_trajectory = std::move(per_trajectory);
    const std::size_t n = report.per_trajectory.size();
    double sum = 0.0;
    for (double v : report.per_trajectory)
        sum += v;
    report.mean = sum / static_cast<double>(n);
    if (n > 1) {
        double ss = 0.0;
        for (double v : report.per_trajectory)
            ss += (v - report.mean) * (v - report.mean);
        report.stderr_ = std::sqrt(ss / static_cast<double>(n - 1)) /
                         std::sqrt(static_cast<double>(n));
    }
    return report;
}

inline FitnessReport failed_report(const std::string& reason) {
    FitnessReport report;
    report.failed = true;
    report.mean = kWorstFitness;
    report.failure_reason = reason;
    return report;
}

/// Evaluate a candidate over a set of trajectories. Any evaluation error
/// yields the worst-fitness sentinel with the failure reason; validation
/// problems are reported the same way before anything runs.
inline FitnessReport evaluate_program(const dsl::Program& candidate, const TaskSpec& task,
                                      const SystemModel& sys,
                                      const std::vector<Trajectory>& trajectories,
                                      unsigned threads = 1,
                                      const dsl::GuardConfig& guards = {}) {
    auto violations = dsl::validate(candidate, task.signature, guards);
    if (!violations.empty())
        return failed_report("validate: " + violations.front().message);
    if (trajectories.empty())
        return failed_report("no trajectories in split");

    std::optional<Harness> harness;
    try {
        harness.emplace(task, candidate, guards);
    } catch (const dsl::EvalError& e) {
        return failed_report(e.what());
    }

    std::vector<double> per_traj(trajectories.size(), 0.0);
    std::vector<std::string> failures(trajectories.size());
    parallel_for(trajectories.size(), threads, [&](std::size_t i) {
        try {
            per_traj[i] = fitness(harness->run_trajectory(sys, trajectories[i]),
                                  trajectories[i].states);
        } catch (const dsl::EvalError& e) {
            failures[i] = e.what();
        }
    });
    for (std::size_t i = 0; i < failures.size(); ++i)
        if (!failures[i].empty())
            return failed_report("trajectory " + std::to_string(i) + ": " + failures[i]);
    return summarize(std::move(per_traj));
}

/// Reference filter fitness over a split (the optimality yardstick).
inline FitnessReport reference_report(const SystemModel& sys,
                                      const std::vector<Trajectory>& trajectories) {
    std::vector<double> per_traj;
    per_traj.reserve(trajectories.size());
    for (const auto& traj : trajectories)
        per_traj.push_back(fitness(run_filter(sys, traj, reference_stepper(sys)), traj.states));
    return summarize(std::move(per_traj));
}

/// Mean observation MSE over a split (the no-filter yardstick).
inline double observation_baseline(const std::vector<Trajectory>& trajectories) {
    double total = 0.0;
    for (const auto& traj : trajectories)
        total += observation_mse(traj);
    return total / static_cast<double>(trajectories.size());
}

} // namespace evofilter
