// Constant-velocity system simulator and its scenario variants:
// gaussian noise, half-gaussian measurement noise, randomly delayed
// observations, and nonlinear state transitions.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "matrix.hpp"
#include "rng.hpp"

namespace evofilter {

/// Discrete-time model: x_k = F x_{k-1} + B u + G a_k, z_k = H x_k + v_k.
struct SystemModel {
    Matrix F;        // 2x2 state transition
    Matrix G;        // 2x1 noise input
    Matrix H;        // 2x2 observation (identity)
    Matrix Q;        // 2x2 process covariance, sigma_a^2 * G G^T
    Matrix R;        // 2x2 measurement covariance, sigma_z^2 * I
    Matrix B;        // 2x1 control input (zero by default)
    double dt = 1.0;
    double sigma_a = 0.0;
    double sigma_z = 0.0;
};

inline SystemModel make_system(double dt, double sigma_a, double sigma_z) {
    if (dt <= 0.0)
        throw domain_error("dt must be positive");
    if (sigma_a < 0.0 || sigma_z < 0.0)
        throw domain_error("noise magnitudes must be non-negative");
    SystemModel sys;
    sys.dt = dt;
    sys.sigma_a = sigma_a;
    sys.sigma_z = sigma_z;
    sys.F = Matrix{{1.0, dt}, {0.0, 1.0}};
    sys.G = Matrix::column({0.5 * dt * dt, dt});
    sys.H = Matrix::identity(2);
    sys.Q = scale(matmul(sys.G, transpose(sys.G)), sigma_a * sigma_a);
    sys.R = scale(Matrix::identity(2), sigma_z * sigma_z);
    sys.B = Matrix(2, 1);
    return sys;
}

enum class ScenarioTag { Gaussian, HalfGaussian, Delayed, Nonlinear };

inline const char* scenario_name(ScenarioTag tag) {
    switch (tag) {
    case ScenarioTag::Gaussian: return "gaussian";
    case ScenarioTag::HalfGaussian: return "half-gaussian";
    case ScenarioTag::Delayed: return "delayed";
    case ScenarioTag::Nonlinear: return "nonlinear";
    }
    return "?";
}

inline ScenarioTag parse_scenario(const std::string& name) {
    if (name == "gaussian")
        return ScenarioTag::Gaussian;
    if (name == "half-gaussian" || name == "half_gaussian")
        return ScenarioTag::HalfGaussian;
    if (name == "delayed")
        return ScenarioTag::Delayed;
    if (name == "nonlinear")
        return ScenarioTag::Nonlinear;
    throw domain_error("unknown scenario: " + name);
}

/// Nonlinear state map with cubic and sinusoidal terms.
inline Matrix default_nonlinear_g(const Matrix& x) {
    const double p = x(0, 0);
    const double v = x(1, 0);
    return Matrix::column({0.05 * p * p * p - 2.0 * p, 0.1 * std::sin(v)});
}

struct Scenario {
    ScenarioTag tag = ScenarioTag::Gaussian;
    double delay_lo = 0.0; // delayed only, as a fraction of dt
    double delay_hi = 1.0;
    std::function<Matrix(const Matrix&)> g = default_nonlinear_g; // nonlinear only

    static Scenario gaussian() { return {ScenarioTag::Gaussian}; }
    static Scenario half_gaussian() { return {ScenarioTag::HalfGaussian}; }
    static Scenario delayed(double lo, double hi) {
        if (lo < 0.0 || hi > 1.0 || lo > hi)
            throw domain_error("delay range must satisfy 0 <= lo <= hi <= 1");
        Scenario s{ScenarioTag::Delayed};
        s.delay_lo = lo;
        s.delay_hi = hi;
        return s;
    }
    static Scenario nonlinear() { return {ScenarioTag::Nonlinear}; }
};

struct Trajectory {
    std::vector<Matrix> states;       // true x_1..x_T, each 2x1
    std::vector<Matrix> observations; // z_1..z_T, each 2x1
    std::uint64_t seed = 0;
};

/// Simulate T steps from x0 (default zero). Deterministic given seed:
/// process noise, measurement noise and delay use independent derived
/// streams so degenerate scenarios coincide draw-for-draw.
inline Trajectory simulate(const SystemModel& sys, const Scenario& sc, std::size_t steps,
                           std::uint64_t seed, const Matrix& x0 = Matrix(2, 1)) {
    if (steps < 1)
        throw domain_error("trajectory length must be at least 1");

    auto rng_process = make_rng(seed, 1);
    auto rng_meas = make_rng(seed, 2);
    auto rng_delay = make_rng(seed, 3);
    std::normal_distribution<double> accel(0.0, 1.0);
    std::normal_distribution<double> meas(0.0, 1.0);
    std::uniform_real_distribution<double> delay(sc.delay_lo, sc.delay_hi);

    Trajectory traj;
    traj.seed = seed;
    traj.states.reserve(steps);
    traj.observations.reserve(steps);

    Matrix x = x0;
    for (std::size_t k = 0; k < steps; ++k) {
        const Matrix x_prev = x;
        Matrix base = sc.tag == ScenarioTag::Nonlinear ? matmul(sys.F, sc.g(x)) : matmul(sys.F, x);
        x = add(base, scale(sys.G, sys.sigma_a * accel(rng_process)));

        Matrix v(2, 1);
        for (std::size_t i = 0; i < 2; ++i) {
            double n = sys.sigma_z * meas(rng_meas);
            v(i, 0) = sc.tag == ScenarioTag::HalfGaussian ? std::abs(n) : n;
        }

        Matrix observed = x;
        if (sc.tag == ScenarioTag::Delayed) {
            const double d = delay(rng_delay);
            observed = add(scale(x, 1.0 - d), scale(x_prev, d));
        }
        traj.states.push_back(x);
        traj.observations.push_back(add(matmul(sys.H, observed), v));
    }
    return traj;
}

inline void write_trajectory_csv(std::ostream& out, const Trajectory& traj) {
    out << "t,x_pos,x_vel,z_pos,z_vel\n";
    for (std::size_t k = 0; k < traj.states.size(); ++k) {
        out << (k + 1) << ',' << traj.states[k](0, 0) << ',' << traj.states[k](1, 0) << ','
            << traj.observations[k](0, 0) << ',' << traj.observations[k](1, 0) << '\n';
    }
}

/// Mean of ||z_k - x_k||^2 over one trajectory: the no-filter baseline.
inline double observation_mse(const Trajectory& traj) {
    double total = 0.0;
    for (std::size_t k = 0; k < traj.states.size(); ++k) {
        const Matrix d = sub(traj.observations[k], traj.states[k]);
        total += d(0, 0) * d(0, 0) + d(1, 0) * d(1, 0);
    }
    return total / static_cast<double>(traj.states.size());
}

} // namespace evofilter
