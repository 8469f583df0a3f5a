#include "hadmst/diffusion.hpp"

#include <cmath>
#include <stdexcept>

namespace hadmst {
namespace diff {

DiffusionSchedule build_linear_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw std::invalid_argument("build_linear_schedule: T must be >= 1");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw std::invalid_argument("build_linear_schedule: need 0 < beta_start <= beta_end < 1");
    DiffusionSchedule s;
    s.T = T;
    s.beta.resize(T);
    s.alpha.resize(T);
    s.alpha_bar.resize(T);
    s.sigma2.resize(T);
    double cum = 1.0;
    for (int i = 0; i < T; ++i) {
        double b = T == 1 ? beta_start
                          : beta_start + (beta_end - beta_start) * (double)i / (double)(T - 1);
        s.beta[i] = b;
        s.alpha[i] = 1.0 - b;
        cum *= s.alpha[i];
        s.alpha_bar[i] = cum;
        s.sigma2[i] = b;  // sigma_t^2 = beta_t
    }
    return s;
}

Array q_step(const Array& s_prev, int t, const DiffusionSchedule& sched, Rng& rng) {
    double b = sched.beta_at(t);
    double a = std::sqrt(1.0 - b), sd = std::sqrt(b);
    Array out(s_prev.shape);
    for (long i = 0; i < out.numel(); ++i) out[i] = a * s_prev[i] + sd * rng.normal();
    return out;
}

Array q_sample(const Array& s0, int t, const Array& eps, const DiffusionSchedule& sched) {
    check_same_shape(s0, eps, "q_sample");
    double ab = sched.alpha_bar_at(t);
    double c0 = std::sqrt(ab), c1 = std::sqrt(1.0 - ab);
    Array out(s0.shape);
    for (long i = 0; i < out.numel(); ++i) out[i] = c0 * s0[i] + c1 * eps[i];
    return out;
}

Array compute_mu(const Array& s_t, const Array& eps_hat, int t, const DiffusionSchedule& sched) {
    check_same_shape(s_t, eps_hat, "compute_mu");
    double a = sched.alpha_at(t), ab = sched.alpha_bar_at(t);
    double c_eps = (1.0 - a) / std::sqrt(1.0 - ab);
    double inv_sqrt_a = 1.0 / std::sqrt(a);
    Array out(s_t.shape);
    for (long i = 0; i < out.numel(); ++i)
        out[i] = (s_t[i] - c_eps * eps_hat[i]) * inv_sqrt_a;
    return out;
}

Array p_sample_step_from_eps(const Array& s_t, const Array& eps_hat, int t,
                             const DiffusionSchedule& sched, Rng& rng) {
    Array mu = compute_mu(s_t, eps_hat, t, sched);
    if (t == 1) return mu;
    double sd = std::sqrt(sched.sigma2_at(t));
    for (long i = 0; i < mu.numel(); ++i) mu[i] += sd * rng.normal();
    return mu;
}

}  // namespace diff
}  // namespace hadmst
