#include <catch2/catch_amalgamated.hpp>

#include <evofilter/kalman.hpp>

#include <algorithm>
#include <cmath>
#include <random>

using namespace evofilter;

namespace {

double min_eigenvalue_sym2(const Matrix& p) {
    const double half_trace = 0.5 * (p(0, 0) + p(1, 1));
    const double det = p(0, 0) * p(1, 1) - p(0, 1) * p(1, 0);
    const double disc = std::max(0.0, half_trace * half_trace - det);
    return half_trace - std::sqrt(disc);
}

SystemModel nominal() { return make_system(1.0, 0.5, 1.0); }

} // namespace

TEST_CASE("predict") {
    SystemModel sys = nominal();

    SECTION("identity dynamics leave the state alone") {
        SystemModel id = sys;
        id.F = Matrix::identity(2);
        id.Q = Matrix(2, 2);
        FilterState s;
        s.x_hat = Matrix::column({1, -2});
        s.P = Matrix{{2, 0.5}, {0.5, 1}};
        FilterState next = predict(s, id);
        CHECK(next.x_hat == s.x_hat);
        CHECK(max_abs_diff(next.P, s.P) < 1e-15);
    }

    SECTION("hand arithmetic") {
        SystemModel m = sys;
        m.F = Matrix{{1, 1}, {0, 1}};
        m.Q = Matrix::identity(2);
        FilterState s;
        s.x_hat = Matrix::column({1, 2});
        s.P = Matrix::identity(2);
        FilterState next = predict(s, m);
        CHECK(next.x_hat == Matrix::column({3, 2}));
        CHECK(max_abs_diff(next.P, Matrix{{3, 1}, {1, 2}}) < 1e-15);
    }

    SECTION("Q floors the covariance when F vanishes") {
        SystemModel m = sys;
        m.F = Matrix(2, 2);
        m.Q = Matrix::identity(2);
        FilterState s;
        s.P = Matrix{{5, 1}, {1, 5}};
        CHECK(max_abs_diff(predict(s, m).P, Matrix::identity(2)) < 1e-15);
    }
}

TEST_CASE("update") {
    SystemModel sys = nominal();

    SECTION("hand arithmetic") {
        FilterState s; // x = 0, P = I
        UpdateResult r = update(s, Matrix::column({2, 4}), sys);
        CHECK(max_abs_diff(r.K, scale(Matrix::identity(2), 0.5)) < 1e-12);
        CHECK(max_abs_diff(r.state.x_hat, Matrix::column({1, 2})) < 1e-12);
        CHECK(max_abs_diff(r.state.P, scale(Matrix::identity(2), 0.5)) < 1e-12);
    }

    SECTION("huge R ignores the measurement") {
        SystemModel m = sys;
        m.R = scale(Matrix::identity(2), 1e12);
        FilterState s;
        s.x_hat = Matrix::column({1, 1});
        UpdateResult r = update(s, Matrix::column({100, -100}), m);
        for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t j = 0; j < 2; ++j)
                CHECK(std::abs(r.K(i, j)) < 1e-9);
        CHECK(max_abs_diff(r.state.x_hat, s.x_hat) < 1e-6);
    }

    SECTION("zero innovation leaves the estimate") {
        FilterState s;
        s.x_hat = Matrix::column({3, -1});
        UpdateResult r = update(s, s.x_hat, sys);
        CHECK(max_abs_diff(r.y, Matrix(2, 1)) < 1e-15);
        CHECK(r.state.x_hat == s.x_hat);
    }
}

TEST_CASE("run_filter converges on a noiseless trajectory") {
    SystemModel sys = nominal();
    SystemModel quiet = make_system(1.0, 0.0, 0.0);
    Trajectory traj = simulate(quiet, Scenario::gaussian(), 500, 1, Matrix::column({0, 1}));
    auto estimates = run_filter(sys, traj, reference_stepper(sys));
    const Matrix err = sub(estimates.back(), traj.states.back());
    CHECK(frobenius_norm(err) < 1e-6);
}

TEST_CASE("covariance stays symmetric PSD and reaches a steady state") {
    SystemModel sys = nominal();
    Trajectory traj = simulate(sys, Scenario::gaussian(), 500, 11);
    auto trace = reference_trace(sys, traj);
    Matrix prev_P;
    for (std::size_t k = 0; k < trace.size(); ++k) {
        const Matrix& P = trace[k].P;
        CHECK(std::abs(P(0, 1) - P(1, 0)) < 1e-9);
        CHECK(min_eigenvalue_sym2(P) > -1e-9);
        if (k > 200)
            CHECK(max_abs_diff(P, prev_P) < 1e-9);
        prev_P = P;
    }
}

TEST_CASE("fitness") {
    std::vector<Matrix> truth{Matrix::column({1, 1}), Matrix::column({2, 2})};
    CHECK(fitness(truth, truth) == 0.0);

    std::vector<Matrix> offset;
    for (const auto& t : truth)
        offset.push_back(add(t, Matrix::column({1, 0})));
    CHECK(fitness(offset, truth) == Catch::Approx(1.0));

    std::vector<Matrix> single{Matrix::column({3, 4})};
    std::vector<Matrix> zero{Matrix(2, 1)};
    CHECK(fitness(single, zero) == Catch::Approx(25.0));

    CHECK_THROWS_AS(fitness(single, truth), domain_error);
}

TEST_CASE("task definitions") {
    TaskSpec predict_task = make_task(0.0, false);
    CHECK(predict_task.signature.inputs == std::vector<std::string>{"x", "F", "P", "Q"});
    CHECK(predict_task.signature.outputs == std::vector<std::string>{"x_predict", "P"});

    TaskSpec full = make_task(1.0, false);
    CHECK(full.signature.inputs == std::vector<std::string>{"x", "F", "P", "Q", "z", "R"});
    CHECK(full.signature.outputs ==
          std::vector<std::string>{"x_predict", "P", "y", "S", "K", "x_update"});

    TaskSpec generic = make_task(0.0, true);
    CHECK(generic.signature.inputs == std::vector<std::string>{"i_1", "i_2", "i_3", "i_4"});
    CHECK(generic.signature.anti_leak);

    CHECK_THROWS_AS(make_task(0.3, false), domain_error);

    for (double f : {0.0, 0.125, 0.25, 0.5, 0.75, 1.0}) {
        TaskSpec t = make_task(f, false);
        dsl::Program target = task_target_program(t);
        INFO(t.name);
        CHECK(dsl::validate(target, t.signature).empty());
        TaskSpec g = make_task(f, true);
        CHECK(dsl::validate(task_target_program(g), g.signature).empty());
    }
}

TEST_CASE("the harnessed task target matches the native filter on every task") {
    SystemModel sys = nominal();
    std::vector<Trajectory> trajs{simulate(sys, Scenario::gaussian(), 300, 5),
                                  simulate(sys, Scenario::gaussian(), 300, 6)};
    FitnessReport native = reference_report(sys, trajs);
    for (double f : {0.0, 0.125, 0.25, 0.5, 0.75, 1.0}) {
        for (bool anti_leak : {false, true}) {
            TaskSpec task = make_task(f, anti_leak);
            FitnessReport r = evaluate_program(task_target_program(task), task, sys, trajs);
            INFO(task.name << " anti_leak=" << anti_leak);
            REQUIRE_FALSE(r.failed);
            CHECK(std::abs(r.mean - native.mean) < 1e-12);
        }
    }
}

TEST_CASE("DSL-interpreted filter equals the native filter step by step") {
    SystemModel sys = nominal();
    Trajectory traj = simulate(sys, Scenario::gaussian(), 500, 17);
    TaskSpec task = make_task(1.0, false);
    Harness harness(task, canonical_filter_program());
    auto via_dsl = harness.run_trajectory(sys, traj);
    auto native = run_filter(sys, traj, reference_stepper(sys));
    REQUIRE(via_dsl.size() == native.size());
    double worst = 0.0;
    for (std::size_t k = 0; k < native.size(); ++k)
        worst = std::max(worst, max_abs_diff(via_dsl[k], native[k]));
    CHECK(worst < 1e-12);
}

TEST_CASE("pass-through predict candidate is finite but worse") {
    SystemModel sys = nominal();
    std::vector<Trajectory> train{simulate(sys, Scenario::gaussian(), 200, 3)};
    TaskSpec task = make_task(0.0, true);
    dsl::Program pass_through = dsl::parse("fn f(i_1, i_2, i_3, i_4) -> (o_1, o_2) {"
                                           " o_1 = i_1; o_2 = i_3 }");
    FitnessReport passthrough_report = evaluate_program(pass_through, task, sys, train);
    FitnessReport target_report =
        evaluate_program(task_target_program(task), task, sys, train);
    REQUIRE_FALSE(passthrough_report.failed);
    CHECK(passthrough_report.mean < kWorstFitness);
    CHECK(passthrough_report.mean > target_report.mean);
}

TEST_CASE("candidates that invert singular matrices get the sentinel") {
    SystemModel sys = nominal();
    std::vector<Trajectory> train{simulate(sys, Scenario::gaussian(), 50, 3)};
    TaskSpec task = make_task(0.0, true);
    dsl::Program bad = dsl::parse("fn f(i_1, i_2, i_3, i_4) -> (o_1, o_2) {"
                                  " a = i_3 - i_3; o_1 = inv(a) @ i_1; o_2 = i_3 }");
    FitnessReport r = evaluate_program(bad, task, sys, train);
    CHECK(r.failed);
    CHECK(r.mean == kWorstFitness);
    CHECK_FALSE(r.failure_reason.empty());
}

TEST_CASE("invalid candidates are rejected before running") {
    SystemModel sys = nominal();
    std::vector<Trajectory> train{simulate(sys, Scenario::gaussian(), 50, 3)};
    TaskSpec task = make_task(0.0, true);
    dsl::Program wrong = dsl::parse("fn f(a, b) -> (o_1) { o_1 = a }");
    FitnessReport r = evaluate_program(wrong, task, sys, train);
    CHECK(r.failed);
    CHECK(r.failure_reason.find("validate") != std::string::npos);
}

TEST_CASE("fitness mean is invariant under trajectory permutation") {
    SystemModel sys = nominal();
    std::vector<Trajectory> trajs;
    for (std::uint64_t s = 0; s < 8; ++s)
        trajs.push_back(simulate(sys, Scenario::gaussian(), 100, 40 + s));
    TaskSpec task = make_task(1.0, false);
    dsl::Program target = task_target_program(task);
    FitnessReport a = evaluate_program(target, task, sys, trajs);
    std::reverse(trajs.begin(), trajs.end());
    FitnessReport b = evaluate_program(target, task, sys, trajs);
    CHECK(a.mean == Catch::Approx(b.mean).epsilon(1e-14));
}

TEST_CASE("parallel evaluation matches serial evaluation") {
    SystemModel sys = nominal();
    std::vector<Trajectory> trajs;
    for (std::uint64_t s = 0; s < 6; ++s)
        trajs.push_back(simulate(sys, Scenario::gaussian(), 200, 90 + s));
    TaskSpec task = make_task(1.0, false);
    dsl::Program target = task_target_program(task);
    FitnessReport serial = evaluate_program(target, task, sys, trajs, 1);
    FitnessReport parallel = evaluate_program(target, task, sys, trajs, 4);
    CHECK(serial.mean == parallel.mean);
    CHECK(serial.per_trajectory == parallel.per_trajectory);
}

TEST_CASE("debiased baseline") {
    SystemModel sys = nominal();

    SECTION("correction constant") {
        CHECK(sys.sigma_z * std::sqrt(2.0 / std::numbers::pi) ==
              Catch::Approx(0.7979).margin(2e-4));
    }

    SECTION("identical on gaussian data with explicit zero bias") {
        SystemModel unbiased = sys;
        unbiased.sigma_z = 0.0; // bias correction becomes zero
        Trajectory traj = simulate(sys, Scenario::gaussian(), 200, 7);
        auto a = debiased_kalman_baseline(unbiased, traj);
        auto b = run_filter(unbiased, traj, reference_stepper(unbiased));
        for (std::size_t k = 0; k < a.size(); ++k)
            CHECK(a[k] == b[k]);
    }

    SECTION("strictly better than the plain filter on half-gaussian data") {
        double plain = 0.0;
        double debiased = 0.0;
        for (std::uint64_t s = 0; s < 10; ++s) {
            Trajectory traj = simulate(sys, Scenario::half_gaussian(), 500, 60 + s);
            plain += fitness(run_filter(sys, traj, reference_stepper(sys)), traj.states);
            debiased += fitness(debiased_kalman_baseline(sys, traj), traj.states);
        }
        CHECK(debiased < plain);
    }
}

TEST_CASE("dataset splits use disjoint seeds and the spec sizes") {
    SystemModel sys = nominal();
    SplitSpec spec;
    spec.val_trajectories = 3;
    spec.test_trajectories = 3;
    EvalDatasets data = make_datasets(sys, Scenario::gaussian(), 99, spec);
    CHECK(data.train.states.size() == 200);
    CHECK(data.validation.size() == 3);
    CHECK(data.test.size() == 3);
    CHECK(data.validation[0].states.size() == 500);
    for (const auto& v : data.validation)
        for (const auto& t : data.test)
            CHECK(v.seed != t.seed);
    CHECK_FALSE(data.train.states[0] == data.validation[0].states[0]);
}
