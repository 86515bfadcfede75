#include "text2ct/schedule.hpp"

#include <cmath>

namespace text2ct {

void DiffusionSchedule::check_t(int t) const {
    if (t < 1 || t > timesteps)
        throw ValidationError(strformat("schedule: t=%d outside 1..%d", t, timesteps));
}

std::string DiffusionSchedule::canonical() const {
    return strformat("T=%d;beta0=%.12g;beta1=%.12g", timesteps,
                     betas.empty() ? 0.0 : betas.front(), betas.empty() ? 0.0 : betas.back());
}

const char* beta_spec_name(BetaSpec spec) {
    return spec == BetaSpec::ScaledLinear ? "scaled_linear" : "linear";
}

BetaSpec beta_spec_from_name(const std::string& name) {
    if (name == "scaled_linear") return BetaSpec::ScaledLinear;
    if (name == "linear") return BetaSpec::Linear;
    throw ConfigError("unknown beta schedule: " + name);
}

DiffusionSchedule make_schedule(int timesteps, double beta_start, double beta_end,
                                BetaSpec spec) {
    if (timesteps < 1) throw ConfigError("make_schedule: timesteps must be >= 1");
    DiffusionSchedule s;
    s.timesteps = timesteps;
    s.betas.resize(static_cast<size_t>(timesteps));
    for (int t = 0; t < timesteps; t++) {
        const double frac = timesteps == 1 ? 0.0 : static_cast<double>(t) / (timesteps - 1);
        double beta;
        if (spec == BetaSpec::ScaledLinear) {
            const double r = std::sqrt(beta_start) + frac * (std::sqrt(beta_end) - std::sqrt(beta_start));
            beta = r * r;
        } else {
            beta = beta_start + frac * (beta_end - beta_start);
        }
        if (!(beta > 0.0 && beta < 1.0))
            throw ValidationError(strformat("make_schedule: beta_%d=%g outside (0,1)", t + 1, beta));
        s.betas[static_cast<size_t>(t)] = beta;
    }
    s.alpha_bar.resize(static_cast<size_t>(timesteps));
    double prod = 1.0;
    double prev = 1.0;
    for (int t = 0; t < timesteps; t++) {
        prod *= 1.0 - s.betas[static_cast<size_t>(t)];
        if (!(prod < prev))
            throw ValidationError("make_schedule: alpha_bar not strictly decreasing");
        prev = prod;
        s.alpha_bar[static_cast<size_t>(t)] = prod;
    }
    return s;
}

namespace {
Tensor affine_combine(const Tensor& a, float ca, const Tensor& b, float cb) {
    check_same_shape(a, b, "affine_combine");
    Tensor out(a.dims());
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    for (int64_t i = 0; i < a.numel(); i++) po[i] = ca * pa[i] + cb * pb[i];
    return out;
}
}  // namespace

NoisyLatent add_noise(const Tensor& z0, int t, const Tensor& eps, const DiffusionSchedule& sched) {
    if (t != 0) sched.check_t(t);
    NoisyLatent out;
    out.t = t;
    out.z_t = affine_combine(z0, static_cast<float>(sched.alpha(t)), eps,
                             static_cast<float>(sched.sigma(t)));
    return out;
}

VelocityTarget velocity_target(const Tensor& z0, const Tensor& eps, int t,
                               const DiffusionSchedule& sched) {
    VelocityTarget out;
    out.v = affine_combine(eps, static_cast<float>(sched.alpha(t)), z0,
                           static_cast<float>(-sched.sigma(t)));
    return out;
}

Tensor recover_z0(const Tensor& z_t, const Tensor& v, int t, const DiffusionSchedule& sched) {
    return affine_combine(z_t, static_cast<float>(sched.alpha(t)), v,
                          static_cast<float>(-sched.sigma(t)));
}

Tensor recover_eps(const Tensor& z_t, const Tensor& v, int t, const DiffusionSchedule& sched) {
    return affine_combine(z_t, static_cast<float>(sched.sigma(t)), v,
                          static_cast<float>(sched.alpha(t)));
}

}  // namespace text2ct
