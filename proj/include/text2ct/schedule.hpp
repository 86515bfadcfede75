#pragma once

#include <string>
#include <vector>

#include "text2ct/tensor.hpp"

namespace text2ct {

// Per-timestep coefficients with alpha_t = sqrt(alpha_bar_t),
// sigma_t = sqrt(1 - alpha_bar_t), so alpha^2 + sigma^2 = 1 identically.
struct DiffusionSchedule {
    int timesteps = 0;
    std::vector<double> betas;      // 1-indexed conceptually: betas[t-1]
    std::vector<double> alpha_bar;  // strictly decreasing

    double alpha(int t) const { return std::sqrt(alpha_bar_at(t)); }
    double sigma(int t) const { return std::sqrt(1.0 - alpha_bar_at(t)); }
    // t = 0 is the clean endpoint: alpha = 1, sigma = 0.
    double alpha_bar_at(int t) const {
        if (t == 0) return 1.0;
        check_t(t);
        return alpha_bar[static_cast<size_t>(t - 1)];
    }
    void check_t(int t) const;
    std::string canonical() const;
};

enum class BetaSpec { ScaledLinear, Linear };
const char* beta_spec_name(BetaSpec spec);
BetaSpec beta_spec_from_name(const std::string& name);

DiffusionSchedule make_schedule(int timesteps, double beta_start = 0.00085,
                                double beta_end = 0.012,
                                BetaSpec spec = BetaSpec::ScaledLinear);

struct NoisyLatent {
    Tensor z_t;
    int t = 0;
};

struct VelocityTarget {
    Tensor v;  // alpha_t * eps - sigma_t * z0
};

NoisyLatent add_noise(const Tensor& z0, int t, const Tensor& eps, const DiffusionSchedule& sched);
VelocityTarget velocity_target(const Tensor& z0, const Tensor& eps, int t,
                               const DiffusionSchedule& sched);
// alpha_t * z_t - sigma_t * v; exact inverse since alpha^2 + sigma^2 = 1.
Tensor recover_z0(const Tensor& z_t, const Tensor& v, int t, const DiffusionSchedule& sched);
// sigma_t * z_t + alpha_t * v.
Tensor recover_eps(const Tensor& z_t, const Tensor& v, int t, const DiffusionSchedule& sched);

}  // namespace text2ct
