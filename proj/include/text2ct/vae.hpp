#pragma once

#include <functional>

#include "text2ct/serialize.hpp"
#include "text2ct/tsp.hpp"
#include "text2ct/volume.hpp"

namespace text2ct {

// Latent z = E(I): spatial dims exactly 1/4 of the source volume.
struct LatentGrid {
    Tensor values;  // (C, H/4, W/4, D/4)
    static constexpr int kScaleFactor = 4;

    void validate() const;
};

struct AutoencoderConfig {
    int base_width = 16;     // stage widths: w, 2w, 4w over 2 downsamples
    int latent_channels = 4;
    float kl_weight = 1e-6f;

    std::string canonical() const;
    bool operator==(const AutoencoderConfig&) const = default;
};

// Two-stage stride-2 convolutional VAE (total x4 per axis). The decoder is
// norm-free so the whole of it stays TSP-splittable.
struct Autoencoder {
    Autoencoder() = default;
    Autoencoder(const AutoencoderConfig& cfg, uint64_t init_seed);

    AutoencoderConfig cfg;
    // encoder
    nn::Conv3d enc_in, enc_down1, enc_down2, enc_moments;
    nn::Conv3d enc_res1_a, enc_res1_b, enc_res2_a, enc_res2_b, enc_res3_a, enc_res3_b;
    // decoder
    nn::Conv3d dec_in, dec_up1, dec_up2, dec_out;
    nn::Conv3d dec_res1_a, dec_res1_b, dec_res2_a, dec_res2_b, dec_res3_a, dec_res3_b;

    const AutoencoderConfig& config() const { return cfg; }

    struct Moments {
        Tensor mean, logvar;  // (C, h, w, d)
    };
    Moments encode_moments(const Tensor& vol) const;  // vol: (H, W, D) in [0,1]
    LatentGrid encode(const Volume3D& vol) const;     // posterior mean
    LatentGrid encode_tensor(const Tensor& vol) const;

    // Decoded volume, clamped to [0,1]. A TSPlan routes through tsp-runtime.
    Volume3D decode(const LatentGrid& z, const tsp::TSPlan* plan = nullptr) const;
    Tensor decode_tensor(const Tensor& z, const tsp::TSPlan* plan = nullptr) const;

    tsp::SplitStage decoder_stage() const;

    void collect(std::vector<nn::Param*>& out);
    uint64_t weights_fingerprint() const;

    Checkpoint to_checkpoint() const;
    static Autoencoder from_checkpoint(const Checkpoint& ck);

    // Training internals (exposed for the loss gradient check).
    struct TrainStep {
        double loss = 0.0, recon_l1 = 0.0, kl = 0.0;
    };
    TrainStep train_step(const Tensor& patch, nn::Adam& opt, float lr, Rng& rng);
    double loss_only(const Tensor& patch, Rng& rng);
};

struct TrainPhase {
    int64_t patch = 32;
    int epochs = 10;
};

struct VaeTrainOptions {
    std::vector<TrainPhase> phases{{32, 10}, {64, 4}};
    float lr = 1e-3f;
    uint64_t seed = 0;
    // called after each epoch with (phase, epoch, mean loss)
    std::function<void(int, int, double)> on_epoch;
};

struct VaeTrainResult {
    double first_epoch_loss = 0.0;
    double final_epoch_loss = 0.0;
    float latent_scale = 1.0f;  // 1 / corpus latent std
};

VaeTrainResult train_autoencoder(Autoencoder& model, const std::vector<Volume3D>& corpus,
                                 const VaeTrainOptions& opts);

// 1 / std of the corpus posterior means; stored in the checkpoint and applied
// before diffusion.
float compute_latent_scale(const Autoencoder& model, const std::vector<Volume3D>& corpus);

double psnr(const Tensor& a, const Tensor& b);

}  // namespace text2ct
