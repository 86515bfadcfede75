#pragma once

#include <functional>

#include "text2ct/prompt.hpp"
#include "text2ct/schedule.hpp"
#include "text2ct/unet.hpp"

namespace text2ct {

struct GuidanceConfig {
    float scale = 5.0f;   // w; >= 0
    float p_drop = 0.1f;  // condition dropout probability during training

    void validate() const;
};

struct LdmTrainItem {
    Tensor latent;  // scaled posterior mean, (C, h, w, d)
    Report report;
    AugmentedReport aug;
};

struct LdmHyper {
    float lr = 1e-4f;
    float lr_power = 1.0f;  // polynomial decay exponent
    int64_t max_steps = 2000;
    int batch = 2;
    double p_aug = 0.5;
    // 0 disables; otherwise stop once the trailing window mean drops below
    // ratio * initial window mean.
    double stop_loss_ratio = 0.0;
    int avg_window = 25;
    uint64_t seed = 0;
    std::function<void(int64_t, double, float)> on_log;  // (step, loss, lr)
};

struct LdmTrainResult {
    double initial_loss = 0.0;  // mean over the first window
    double final_loss = 0.0;    // mean over the last window
    int64_t steps = 0;
};

// Joint training of the UNet and the text encoder on cached latents with the
// v-prediction L2 objective and classifier-free condition dropout.
LdmTrainResult train_ldm(UNet3D& unet, TextEncoder& encoder,
                         const std::vector<LdmTrainItem>& corpus,
                         const DiffusionSchedule& sched, const GuidanceConfig& guidance,
                         const LdmHyper& hyper);

// Single-batch loss with fixed randomness; finite-difference oracle hook.
double ldm_loss_probe(UNet3D& unet, TextEncoder& encoder, const LdmTrainItem& item,
                      const DiffusionSchedule& sched, int t, const Tensor& eps,
                      uint64_t prompt_seed);

// (1-w)*v_uncond + w*v_cond: bitwise-exact at the w=0 and w=1 endpoints.
Tensor cfg_combine(const Tensor& v_uncond, const Tensor& v_cond, float w);

struct SampleOptions {
    float cfg_scale = 5.0f;
    int steps = 50;
    uint64_t seed = 0;
};

// Deterministic DDIM (eta = 0) in v-parameterization with classifier-free
// guidance; starts from a seeded unit-Gaussian latent.
Tensor sample_latent(const UNet3D& unet, const TextEmbedding& cond, const TextEmbedding& uncond,
                     const DiffusionSchedule& sched, const SampleOptions& opts,
                     const std::vector<int64_t>& latent_dims);

Tensor sample(const UNet3D& unet, const TextEncoder& encoder, const PromptBundle& prompt,
              const DiffusionSchedule& sched, const SampleOptions& opts,
              const std::vector<int64_t>& latent_dims);

// Checkpoint bundling UNet + text encoder + schedule parameters.
void save_ldm_checkpoint(const UNet3D& unet, const TextEncoder& encoder,
                         const DiffusionSchedule& sched,
                         const std::map<std::string, std::string>& extra_meta,
                         const std::string& path);

struct LdmBundle {
    UNet3D unet;
    TextEncoder encoder;
    DiffusionSchedule sched;
    std::map<std::string, std::string> meta;
};
LdmBundle load_ldm_checkpoint(const std::string& path);

}  // namespace text2ct
