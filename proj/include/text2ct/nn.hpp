#pragma once

#include <string>
#include <vector>

#include "text2ct/tensor.hpp"

namespace text2ct {
namespace nn {

struct Param {
    std::string name;
    Tensor w;
    Tensor g;
    void init_shape(std::vector<int64_t> dims) {
        w = Tensor::zeros(dims);
        g = Tensor::zeros(dims);
    }
    void zero_grad() { g.fill(0.0f); }
};

enum class Act { Identity, ReLU, SiLU, LeakyReLU, Clamp01 };

Tensor act_forward(Act kind, const Tensor& x);
Tensor act_backward(Act kind, const Tensor& x, const Tensor& dy);

// 3D convolution over (C, X, Y, Z) maps, odd kernel, same padding k/2,
// stride 1 or 2. Tiled im2col + GEMM; scratch is bounded per call.
struct Conv3d {
    int cin = 0, cout = 0, k = 3, stride = 1;
    bool has_bias = true;
    Param weight;  // (cout, cin*k^3)
    Param bias;    // (cout)

    void init(const std::string& name, int cin_, int cout_, int k_, int stride_, Rng& rng,
              bool zero_init = false, bool with_bias = true);
    Tensor forward(const Tensor& x) const;
    // Returns dx and accumulates into weight.g / bias.g.
    Tensor backward(const Tensor& x, const Tensor& dy);
    void collect(std::vector<Param*>& out);

    static int64_t out_extent(int64_t in, int k, int stride) {
        return (in + 2 * (k / 2) - k) / stride + 1;
    }
    std::vector<int64_t> out_dims(const Tensor& x) const;
};

// im2col tile size (floats) a conv forward/backward call will allocate.
int64_t conv3d_scratch_floats(int cin, int k, int64_t out_x, int64_t out_y, int64_t out_z);

struct Linear {
    int in = 0, out = 0;
    bool has_bias = true;
    Param weight;  // (out, in)
    Param bias;    // (out)

    void init(const std::string& name, int in_, int out_, Rng& rng, bool zero_init = false,
              bool with_bias = true);
    // x: (N, in) -> (N, out)
    Tensor forward(const Tensor& x) const;
    Tensor backward(const Tensor& x, const Tensor& dy);
    void collect(std::vector<Param*>& out);
};

// GroupNorm over (C, X, Y, Z); stats per group over channels-in-group and all
// spatial positions. Global along every spatial axis, so never TSP-splittable.
struct GroupNorm {
    int channels = 0, groups = 1;
    float eps = 1e-5f;
    Param gamma, beta;

    void init(const std::string& name, int channels_, int groups_);
    struct Saved {
        std::vector<float> mean, rstd;
    };
    Tensor forward(const Tensor& x, Saved& saved) const;
    Tensor backward(const Tensor& x, const Saved& saved, const Tensor& dy);
    void collect(std::vector<Param*>& out);
};

struct Embedding {
    int vocab = 0, dim = 0;
    Param table;  // (vocab, dim)

    void init(const std::string& name, int vocab_, int dim_, Rng& rng);
    Tensor forward(const std::vector<int>& ids) const;  // (L, dim)
    void backward(const std::vector<int>& ids, const Tensor& dy);
    void collect(std::vector<Param*>& out);
};

// Nearest-neighbour 2x upsampling of (C, X, Y, Z).
Tensor upsample_nearest2x(const Tensor& x);
Tensor upsample_nearest2x_backward(const Tensor& dy);
// Trilinear 2x (align_corners = false). Inference-only.
Tensor upsample_trilinear2x(const Tensor& x);

// (C, P) <-> (P, C) layout flips used by the attention blocks.
Tensor transpose2d(const Tensor& x);

struct Adam {
    float lr = 1e-3f;
    float beta1 = 0.9f, beta2 = 0.999f;
    float eps = 1e-8f;
    int64_t t = 0;

    explicit Adam(std::vector<Param*> params, float lr_ = 1e-3f);
    void zero_grad();
    void step(float lr_override = -1.0f);
    std::vector<Param*> params;

  private:
    std::vector<Tensor> m_, v_;
};

// Polynomial LR decay: lr0 * (1 - step/total)^power.
inline float poly_lr(float lr0, int64_t step, int64_t total_steps, float power = 1.0f) {
    if (total_steps <= 0) return lr0;
    double frac = 1.0 - static_cast<double>(step) / static_cast<double>(total_steps);
    if (frac < 0.0) frac = 0.0;
    return static_cast<float>(lr0 * std::pow(frac, power));
}

}  // namespace nn
}  // namespace text2ct
