#pragma once

#include <array>
#include <string>
#include <vector>

#include "text2ct/common.hpp"

namespace text2ct {

// Whole-pipeline configuration, parsed from TOML-style sectioned key = value
// text. canonical() is the fingerprint input: every key emitted, sections and
// keys sorted, floats in shortest round-trip form.
struct ExperimentConfig {
    // [global]
    uint64_t seed = 1234;
    std::string outdir = "runs/default";

    // [phantoms]
    int phantom_count = 8;
    int eval_count = 8;
    std::array<int64_t, 3> shape{64, 64, 32};
    double omission_rate = 0.3;

    // [vae]
    int vae_base_width = 16;
    int vae_latent_channels = 4;
    double vae_kl_weight = 1e-6;
    double vae_lr = 1e-3;
    int64_t vae_phase1_patch = 32;
    int vae_phase1_epochs = 10;
    int64_t vae_phase2_patch = 64;
    int vae_phase2_epochs = 4;

    // [prompt]
    int encoder_dim = 64;
    int max_tokens = 128;
    int vocab = 512;
    double p_aug = 0.5;
    std::string augmenter = "template";  // template | identity | http
    bool offline = false;
    std::string http_host = "127.0.0.1";
    int http_port = 8080;
    int http_timeout_ms = 2000;
    int http_retries = 1;

    // [diffusion]
    int timesteps = 1000;
    double beta_start = 0.00085;
    double beta_end = 0.012;
    std::string beta_schedule = "scaled_linear";
    int unet_base_width = 32;
    int unet_context_dim = 64;
    int unet_time_dim = 64;
    int heads = 4;
    int groups = 8;
    double ldm_lr = 1e-4;
    double lr_power = 1.0;
    int64_t train_steps = 2000;
    int batch = 2;
    double p_drop = 0.1;
    double stop_loss_ratio = 0.0;

    // [sampling]
    int sample_steps = 50;
    double cfg_scale = 5.0;

    // [tsp]
    int tsp_axis = 0;
    int tsp_segments = 1;
    std::string tsp_parallelism = "sequential";  // sequential | workers

    // [eval]
    int fid_width = 64;
    uint64_t fid_seed = 17;
    int align_dim = 32;
    int align_steps = 300;
    std::vector<double> cfg_scales{5.0};

    static ExperimentConfig parse_string(const std::string& text);
    static ExperimentConfig parse_file(const std::string& path);

    std::string canonical() const;
    std::string section_canonical(const std::string& section) const;
    std::string fingerprint() const;  // hex64(fnv(canonical))

    struct Diagnostic {
        enum Level { Warning, Error } level;
        std::string message;
    };
    std::vector<Diagnostic> validate() const;
    void validate_or_throw() const;  // throws ConfigError listing all errors
};

std::string format_double_shortest(double v);

}  // namespace text2ct
