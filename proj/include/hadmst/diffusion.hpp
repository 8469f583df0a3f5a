#pragma once

#include <optional>
#include <vector>

#include "hadmst/array.hpp"
#include "hadmst/rng.hpp"

namespace hadmst {
namespace diff {

// Noise schedule: beta[t-1] holds beta_t for t = 1..T.
struct DiffusionSchedule {
    int T = 0;
    std::vector<double> beta, alpha, alpha_bar, sigma2;

    void check_t(int t) const {
        if (t < 1 || t > T) throw std::out_of_range("timestep out of range: " + std::to_string(t));
    }
    double beta_at(int t) const { check_t(t); return beta[(size_t)t - 1]; }
    double alpha_at(int t) const { check_t(t); return alpha[(size_t)t - 1]; }
    double alpha_bar_at(int t) const { check_t(t); return alpha_bar[(size_t)t - 1]; }
    double sigma2_at(int t) const { check_t(t); return sigma2[(size_t)t - 1]; }
};

DiffusionSchedule build_linear_schedule(int T, double beta_start, double beta_end);

// Single-step forward transition q(s_t | s_{t-1}).
Array q_step(const Array& s_prev, int t, const DiffusionSchedule& sched, Rng& rng);

// Closed-form forward marginal: sqrt(abar_t) s0 + sqrt(1-abar_t) eps.
Array q_sample(const Array& s0, int t, const Array& eps, const DiffusionSchedule& sched);

// Reverse posterior mean for epsilon-prediction parameterization.
Array compute_mu(const Array& s_t, const Array& eps_hat, int t, const DiffusionSchedule& sched);

// One reverse step; no noise added at t = 1.
// eps_hat is the model's noise prediction at (s_t, t).
Array p_sample_step_from_eps(const Array& s_t, const Array& eps_hat, int t,
                             const DiffusionSchedule& sched, Rng& rng);

}  // namespace diff
}  // namespace hadmst
