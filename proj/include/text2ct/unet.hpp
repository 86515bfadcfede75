#pragma once

#include "text2ct/nn.hpp"
#include "text2ct/serialize.hpp"
#include "text2ct/text_encoder.hpp"

namespace text2ct {

struct UNetConfig {
    int in_channels = 4;
    int base_width = 32;  // stage widths: w at full latent res, 2w below
    int context_dim = 64;  // must equal the text encoder dim
    int time_dim = 64;
    int heads = 4;
    int groups = 8;

    std::string canonical() const;
    bool operator==(const UNetConfig&) const = default;
};

namespace detail {

struct CrossAttention {
    int channels = 0, ctx_dim = 0, heads = 0;
    nn::GroupNorm norm;
    nn::Linear to_q, to_k, to_v, to_out;

    void init(const std::string& name, int channels_, int ctx_dim_, int heads_, int groups,
              Rng& rng);
    struct Cache {
        Tensor x, normed, nT, q, k, v, scores, attn_out;  // scores: (heads, P, L)
        nn::GroupNorm::Saved norm_saved;
        std::vector<uint8_t> mask;
    };
    Tensor forward(const Tensor& x, const Tensor& ctx, const std::vector<uint8_t>& mask,
                   Cache* cache) const;
    // Returns dx; accumulates dctx.
    Tensor backward(const Cache& cache, const Tensor& ctx, const Tensor& dy, Tensor& dctx);
    void collect(std::vector<nn::Param*>& out);
};

struct ResBlockT {
    int cin = 0, cout = 0;
    nn::GroupNorm norm1, norm2;
    nn::Conv3d conv1, conv2, skip;
    nn::Linear time_proj;  // time_dim -> 2*cout (scale, shift)
    bool has_skip = false;

    void init(const std::string& name, int cin_, int cout_, int time_dim, int groups, Rng& rng);
    struct Cache {
        Tensor x, n1, s1, h1, film, n2, s2, temb_s;
        nn::GroupNorm::Saved n1_saved, n2_saved;
        Tensor scale;  // (2*cout) film params
    };
    Tensor forward(const Tensor& x, const Tensor& temb, Cache* cache) const;
    // Returns dx; accumulates dtemb.
    Tensor backward(const Cache& cache, const Tensor& dy, Tensor& dtemb);
    void collect(std::vector<nn::Param*>& out);
};

}  // namespace detail

// Time-conditional 3D UNet predicting velocity, with cross-attention over the
// text embedding at every resolution. An all-masked embedding selects the
// learned unconditional context row.
struct UNet3D {
    UNet3D() = default;
    UNet3D(const UNetConfig& cfg, uint64_t init_seed);

    UNetConfig cfg;
    nn::Conv3d conv_in, down, up_conv, conv_out;
    detail::ResBlockT rb1, rb2, mid1, mid2, rb3;
    detail::CrossAttention attn1, attn2, mid_attn;
    nn::GroupNorm out_norm;
    nn::Linear time_mlp1, time_mlp2;
    nn::Param null_ctx;  // (context_dim)

    struct Cache;
    Tensor forward(const Tensor& z_t, int t, const TextEmbedding& ctx, Cache* cache = nullptr,
                   int total_timesteps = 1000) const;
    // Returns d_ctx (max_tokens, context_dim) for the text encoder; grads for
    // the null row are routed into null_ctx internally.
    Tensor backward(Cache& cache, const Tensor& dout);

    void collect(std::vector<nn::Param*>& out);
    Checkpoint to_checkpoint() const;
    static UNet3D from_checkpoint(const Checkpoint& ck);
    uint64_t weights_fingerprint() const;
};

struct UNet3D::Cache {
    Tensor z, temb_base, temb_h, temb_s, temb;
    Tensor h0;
    detail::ResBlockT::Cache rb1_c, rb2_c, mid1_c, mid2_c, rb3_c;
    detail::CrossAttention::Cache a1_c, a2_c, mid_attn_c;
    Tensor a1, d1, a2, m1, ma, m2, up_in, up_out, cat, r3;
    Tensor on, os;
    nn::GroupNorm::Saved on_saved;
    Tensor ctx_used;  // (L, ctx_dim) after null substitution
    std::vector<uint8_t> mask_used;
    bool used_null = false;
};

Tensor sinusoidal_time_embedding(int t, int dim, int total_timesteps);

}  // namespace text2ct
