#pragma once

#include "text2ct/fid.hpp"
#include "text2ct/phantom.hpp"
#include "text2ct/serialize.hpp"

namespace text2ct {

struct AlignConfig {
    int embed_dim = 32;
    int input_size = 32;
    int vocab = 512;

    std::string canonical() const;
};

// Tiny dual encoder for the alignment (CLIP-style) score, trained
// contrastively on phantom (slice, report) pairs.
struct AlignModel {
    AlignConfig cfg;
    nn::Conv3d c1, c2;      // slice trunk, 1 -> 16 -> 32, stride 2 each
    nn::Linear img_proj;    // 32 -> embed_dim
    nn::Embedding txt_emb;  // hashed bag of words
    nn::Linear txt_proj;    // embed_dim -> embed_dim

    AlignModel() = default;
    AlignModel(const AlignConfig& cfg, uint64_t init_seed);

    Tensor embed_slice(const Tensor& slice2d) const;   // unnormalized (embed_dim)
    Tensor embed_text(const std::string& text) const;  // unnormalized (embed_dim)
    std::vector<int> tokenize(const std::string& text) const;

    void collect(std::vector<nn::Param*>& out);
    Checkpoint to_checkpoint() const;
    static AlignModel from_checkpoint(const Checkpoint& ck);
    uint64_t fingerprint() const;
};

struct AlignTrainOptions {
    int steps = 300;
    int batch = 8;
    int slices_per_volume = 6;
    float lr = 2e-3f;
    float temperature = 0.1f;
    uint64_t seed = 0;
    std::function<void(int, double)> on_log;
};

// InfoNCE over (mean sampled-slice embedding, report embedding) pairs.
double train_align(AlignModel& model, const std::vector<GroundTruth>& corpus,
                   const std::vector<std::string>& texts, const AlignTrainOptions& opts);

struct AlignResult {
    double axial = 0.0, sagittal = 0.0, coronal = 0.0, avg = 0.0;
};

// Mean cosine between per-slice and prompt embeddings, x100, averaged per
// view then across views.
AlignResult alignment_score(const std::vector<Volume3D>& volumes,
                            const std::vector<std::string>& prompts, const AlignModel& model);

}  // namespace text2ct
