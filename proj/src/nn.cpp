#include "text2ct/nn.hpp"

#include <cmath>
#include <cstring>

namespace text2ct {
namespace nn {

namespace {

inline float sigmoidf_(float x) { return 1.0f / (1.0f + std::exp(-x)); }

// Scratch budget for im2col tiles, in floats.
constexpr int64_t kColBudget = int64_t(1) << 22;

struct ConvGeom {
    int64_t X, Y, Z, Xo, Yo, Zo, P;
    int k, s, p;
};

ConvGeom conv_geom(const Tensor& x, int k, int stride) {
    if (x.rank() != 4) throw ShapeError("conv3d: input must be (C, X, Y, Z)");
    ConvGeom g;
    g.X = x.dim(1);
    g.Y = x.dim(2);
    g.Z = x.dim(3);
    g.k = k;
    g.s = stride;
    g.p = k / 2;
    g.Xo = Conv3d::out_extent(g.X, k, stride);
    g.Yo = Conv3d::out_extent(g.Y, k, stride);
    g.Zo = Conv3d::out_extent(g.Z, k, stride);
    g.P = g.Xo * g.Yo * g.Zo;
    return g;
}

// Valid output range along one axis for kernel offset d: in = out*s + d - p in [0, extent).
inline void valid_out_range(int64_t extent, int64_t out_extent, int s, int p, int d, int64_t& o0,
                            int64_t& o1) {
    int64_t num0 = p - d;
    o0 = num0 <= 0 ? 0 : (num0 + s - 1) / s;
    int64_t num1 = extent - 1 + p - d;
    o1 = num1 < 0 ? 0 : num1 / s + 1;
    if (o1 > out_extent) o1 = out_extent;
    if (o0 > o1) o0 = o1;
}

// Fill col (K x chunkP, row stride chunkP) for output rows [x0, x0+cx).
void im2col_fill(const float* x, int cin, const ConvGeom& g, int64_t x0, int64_t cx, float* col) {
    const int64_t chunkP = cx * g.Yo * g.Zo;
    const int64_t K = int64_t(cin) * g.k * g.k * g.k;
    for (int64_t kk = 0; kk < K; kk++) {
        int64_t rem = kk;
        const int dz = static_cast<int>(rem % g.k);
        rem /= g.k;
        const int dy = static_cast<int>(rem % g.k);
        rem /= g.k;
        const int dx = static_cast<int>(rem % g.k);
        const int64_t ci = rem / g.k;
        float* crow = col + kk * chunkP;
        int64_t oz0, oz1, oy0, oy1;
        valid_out_range(g.Z, g.Zo, g.s, g.p, dz, oz0, oz1);
        valid_out_range(g.Y, g.Yo, g.s, g.p, dy, oy0, oy1);
        for (int64_t ox = x0; ox < x0 + cx; ox++) {
            float* cx_row = crow + (ox - x0) * g.Yo * g.Zo;
            const int64_t ix = ox * g.s + dx - g.p;
            if (ix < 0 || ix >= g.X) {
                std::memset(cx_row, 0, sizeof(float) * g.Yo * g.Zo);
                continue;
            }
            const float* xplane = x + (ci * g.X + ix) * g.Y * g.Z;
            for (int64_t oy = 0; oy < g.Yo; oy++) {
                float* seg = cx_row + oy * g.Zo;
                if (oy < oy0 || oy >= oy1) {
                    std::memset(seg, 0, sizeof(float) * g.Zo);
                    continue;
                }
                const int64_t iy = oy * g.s + dy - g.p;
                const float* xrow = xplane + iy * g.Z;
                if (oz0 > 0) std::memset(seg, 0, sizeof(float) * oz0);
                if (oz1 < g.Zo) std::memset(seg + oz1, 0, sizeof(float) * (g.Zo - oz1));
                if (g.s == 1) {
                    std::memcpy(seg + oz0, xrow + (oz0 + dz - g.p), sizeof(float) * (oz1 - oz0));
                } else {
                    for (int64_t oz = oz0; oz < oz1; oz++) seg[oz] = xrow[oz * g.s + dz - g.p];
                }
            }
        }
    }
}

// Scatter-add transpose of im2col_fill: dx += col.
void col2im_add(float* dx, int cin, const ConvGeom& g, int64_t x0, int64_t cx, const float* col) {
    const int64_t chunkP = cx * g.Yo * g.Zo;
    const int64_t K = int64_t(cin) * g.k * g.k * g.k;
    for (int64_t kk = 0; kk < K; kk++) {
        int64_t rem = kk;
        const int dz = static_cast<int>(rem % g.k);
        rem /= g.k;
        const int dy = static_cast<int>(rem % g.k);
        rem /= g.k;
        const int dx_off = static_cast<int>(rem % g.k);
        const int64_t ci = rem / g.k;
        const float* crow = col + kk * chunkP;
        int64_t oz0, oz1, oy0, oy1;
        valid_out_range(g.Z, g.Zo, g.s, g.p, dz, oz0, oz1);
        valid_out_range(g.Y, g.Yo, g.s, g.p, dy, oy0, oy1);
        for (int64_t ox = x0; ox < x0 + cx; ox++) {
            const float* cx_row = crow + (ox - x0) * g.Yo * g.Zo;
            const int64_t ix = ox * g.s + dx_off - g.p;
            if (ix < 0 || ix >= g.X) continue;
            float* xplane = dx + (ci * g.X + ix) * g.Y * g.Z;
            for (int64_t oy = oy0; oy < oy1; oy++) {
                const float* seg = cx_row + oy * g.Zo;
                const int64_t iy = oy * g.s + dy - g.p;
                float* xrow = xplane + iy * g.Z;
                if (g.s == 1) {
                    float* dst = xrow + (oz0 + dz - g.p);
                    for (int64_t i = 0; i < oz1 - oz0; i++) dst[i] += seg[oz0 + i];
                } else {
                    for (int64_t oz = oz0; oz < oz1; oz++) xrow[oz * g.s + dz - g.p] += seg[oz];
                }
            }
        }
    }
}

}  // namespace

int64_t conv3d_scratch_floats(int cin, int k, int64_t out_x, int64_t out_y, int64_t out_z) {
    const int64_t K = int64_t(cin) * k * k * k;
    int64_t chunk_x = kColBudget / (K * out_y * out_z);
    if (chunk_x < 1) chunk_x = 1;
    if (chunk_x > out_x) chunk_x = out_x;
    return K * chunk_x * out_y * out_z;
}

Tensor act_forward(Act kind, const Tensor& x) {
    Tensor y(x.dims());
    const float* px = x.data();
    float* py = y.data();
    const int64_t n = x.numel();
    switch (kind) {
        case Act::Identity:
            std::memcpy(py, px, sizeof(float) * n);
            break;
        case Act::ReLU:
            for (int64_t i = 0; i < n; i++) py[i] = px[i] > 0.0f ? px[i] : 0.0f;
            break;
        case Act::SiLU:
            for (int64_t i = 0; i < n; i++) py[i] = px[i] * sigmoidf_(px[i]);
            break;
        case Act::LeakyReLU:
            for (int64_t i = 0; i < n; i++) py[i] = px[i] > 0.0f ? px[i] : 0.1f * px[i];
            break;
        case Act::Clamp01:
            for (int64_t i = 0; i < n; i++) py[i] = px[i] < 0.0f ? 0.0f : (px[i] > 1.0f ? 1.0f : px[i]);
            break;
    }
    return y;
}

Tensor act_backward(Act kind, const Tensor& x, const Tensor& dy) {
    check_same_shape(x, dy, "act_backward");
    Tensor dx(x.dims());
    const float* px = x.data();
    const float* pd = dy.data();
    float* po = dx.data();
    const int64_t n = x.numel();
    switch (kind) {
        case Act::Identity:
            std::memcpy(po, pd, sizeof(float) * n);
            break;
        case Act::ReLU:
            for (int64_t i = 0; i < n; i++) po[i] = px[i] > 0.0f ? pd[i] : 0.0f;
            break;
        case Act::SiLU:
            for (int64_t i = 0; i < n; i++) {
                float s = sigmoidf_(px[i]);
                po[i] = pd[i] * (s * (1.0f + px[i] * (1.0f - s)));
            }
            break;
        case Act::LeakyReLU:
            for (int64_t i = 0; i < n; i++) po[i] = px[i] > 0.0f ? pd[i] : 0.1f * pd[i];
            break;
        case Act::Clamp01:
            for (int64_t i = 0; i < n; i++)
                po[i] = (px[i] >= 0.0f && px[i] <= 1.0f) ? pd[i] : 0.0f;
            break;
    }
    return dx;
}

void Conv3d::init(const std::string& name, int cin_, int cout_, int k_, int stride_, Rng& rng,
                  bool zero_init, bool with_bias) {
    cin = cin_;
    cout = cout_;
    k = k_;
    stride = stride_;
    has_bias = with_bias;
    const int64_t K = int64_t(cin) * k * k * k;
    weight.name = name + ".w";
    weight.init_shape({cout, K});
    if (!zero_init) {
        const float std = std::sqrt(2.0f / static_cast<float>(K));
        float* p = weight.w.data();
        for (int64_t i = 0; i < weight.w.numel(); i++) p[i] = std * rng.normalf();
    }
    if (has_bias) {
        bias.name = name + ".b";
        bias.init_shape({cout});
    }
}

std::vector<int64_t> Conv3d::out_dims(const Tensor& x) const {
    ConvGeom g = conv_geom(x, k, stride);
    return {cout, g.Xo, g.Yo, g.Zo};
}

Tensor Conv3d::forward(const Tensor& x) const {
    if (x.dim(0) != cin) throw ShapeError(strformat("conv3d: expected %d input channels, got %lld",
                                                    cin, static_cast<long long>(x.dim(0))));
    ConvGeom g = conv_geom(x, k, stride);
    const int64_t K = int64_t(cin) * k * k * k;
    Tensor y({cout, g.Xo, g.Yo, g.Zo});
    int64_t chunk_x = kColBudget / (K * g.Yo * g.Zo);
    if (chunk_x < 1) chunk_x = 1;
    if (chunk_x > g.Xo) chunk_x = g.Xo;
    Tensor col({K, chunk_x * g.Yo * g.Zo});
    for (int64_t x0 = 0; x0 < g.Xo; x0 += chunk_x) {
        const int64_t cx = std::min(chunk_x, g.Xo - x0);
        const int64_t cp = cx * g.Yo * g.Zo;
        im2col_fill(x.data(), cin, g, x0, cx, col.data());
        gemm(false, false, cout, cp, K, 1.0f, weight.w.data(), K, col.data(), cp, 0.0f,
             y.data() + x0 * g.Yo * g.Zo, g.P);
    }
    if (has_bias) {
        float* py = y.data();
        const float* pb = bias.w.data();
        for (int c = 0; c < cout; c++) {
            float b = pb[c];
            float* row = py + int64_t(c) * g.P;
            for (int64_t i = 0; i < g.P; i++) row[i] += b;
        }
    }
    return y;
}

Tensor Conv3d::backward(const Tensor& x, const Tensor& dy) {
    ConvGeom g = conv_geom(x, k, stride);
    if (dy.dim(0) != cout || dy.dim(1) != g.Xo || dy.dim(2) != g.Yo || dy.dim(3) != g.Zo)
        throw ShapeError("conv3d backward: dy shape mismatch");
    const int64_t K = int64_t(cin) * k * k * k;
    Tensor dx = Tensor::zeros(x.dims());
    if (has_bias) {
        float* pg = bias.g.data();
        const float* pd = dy.data();
        for (int c = 0; c < cout; c++) {
            double s = 0.0;
            const float* row = pd + int64_t(c) * g.P;
            for (int64_t i = 0; i < g.P; i++) s += row[i];
            pg[c] += static_cast<float>(s);
        }
    }
    int64_t chunk_x = kColBudget / (K * g.Yo * g.Zo);
    if (chunk_x < 1) chunk_x = 1;
    if (chunk_x > g.Xo) chunk_x = g.Xo;
    Tensor col({K, chunk_x * g.Yo * g.Zo});
    for (int64_t x0 = 0; x0 < g.Xo; x0 += chunk_x) {
        const int64_t cx = std::min(chunk_x, g.Xo - x0);
        const int64_t cp = cx * g.Yo * g.Zo;
        const float* dyp = dy.data() + x0 * g.Yo * g.Zo;
        im2col_fill(x.data(), cin, g, x0, cx, col.data());
        // dW += dy_chunk * col^T
        gemm(false, true, cout, K, cp, 1.0f, dyp, g.P, col.data(), cp, 1.0f, weight.g.data(), K);
        // dcol = W^T * dy_chunk (overwrites the tile)
        gemm(true, false, K, cp, cout, 1.0f, weight.w.data(), K, dyp, g.P, 0.0f, col.data(), cp);
        col2im_add(dx.data(), cin, g, x0, cx, col.data());
    }
    return dx;
}

void Conv3d::collect(std::vector<Param*>& out) {
    out.push_back(&weight);
    if (has_bias) out.push_back(&bias);
}

void Linear::init(const std::string& name, int in_, int out_, Rng& rng, bool zero_init,
                  bool with_bias) {
    in = in_;
    out = out_;
    has_bias = with_bias;
    weight.name = name + ".w";
    weight.init_shape({out, in});
    if (!zero_init) {
        const float std = std::sqrt(1.0f / static_cast<float>(in));
        float* p = weight.w.data();
        for (int64_t i = 0; i < weight.w.numel(); i++) p[i] = std * rng.normalf();
    }
    if (has_bias) {
        bias.name = name + ".b";
        bias.init_shape({out});
    }
}

Tensor Linear::forward(const Tensor& x) const {
    if (x.rank() != 2 || x.dim(1) != in) throw ShapeError("linear: input must be (N, in)");
    const int64_t N = x.dim(0);
    Tensor y({N, out});
    gemm(false, true, N, out, in, 1.0f, x.data(), in, weight.w.data(), in, 0.0f, y.data(), out);
    if (has_bias) {
        float* py = y.data();
        const float* pb = bias.w.data();
        for (int64_t i = 0; i < N; i++)
            for (int j = 0; j < out; j++) py[i * out + j] += pb[j];
    }
    return y;
}

Tensor Linear::backward(const Tensor& x, const Tensor& dy) {
    const int64_t N = x.dim(0);
    if (dy.rank() != 2 || dy.dim(0) != N || dy.dim(1) != out)
        throw ShapeError("linear backward: dy shape mismatch");
    gemm(true, false, out, in, N, 1.0f, dy.data(), out, x.data(), in, 1.0f, weight.g.data(), in);
    if (has_bias) {
        float* pg = bias.g.data();
        const float* pd = dy.data();
        for (int64_t i = 0; i < N; i++)
            for (int j = 0; j < out; j++) pg[j] += pd[i * out + j];
    }
    Tensor dx({N, in});
    gemm(false, false, N, in, out, 1.0f, dy.data(), out, weight.w.data(), in, 0.0f, dx.data(), in);
    return dx;
}

void Linear::collect(std::vector<Param*>& out_params) {
    out_params.push_back(&weight);
    if (has_bias) out_params.push_back(&bias);
}

void GroupNorm::init(const std::string& name, int channels_, int groups_) {
    channels = channels_;
    groups = groups_;
    if (channels % groups != 0) throw ConfigError("groupnorm: channels not divisible by groups");
    gamma.name = name + ".gamma";
    gamma.init_shape({channels});
    gamma.w.fill(1.0f);
    beta.name = name + ".beta";
    beta.init_shape({channels});
}

Tensor GroupNorm::forward(const Tensor& x, Saved& saved) const {
    if (x.rank() != 4 || x.dim(0) != channels) throw ShapeError("groupnorm: bad input shape");
    const int64_t S = x.dim(1) * x.dim(2) * x.dim(3);
    const int cg = channels / groups;
    const int64_t n = cg * S;
    saved.mean.assign(groups, 0.0f);
    saved.rstd.assign(groups, 0.0f);
    Tensor y(x.dims());
    const float* px = x.data();
    float* py = y.data();
    for (int g = 0; g < groups; g++) {
        const float* gx = px + int64_t(g) * cg * S;
        double s = 0.0, s2 = 0.0;
        for (int64_t i = 0; i < n; i++) {
            s += gx[i];
            s2 += double(gx[i]) * gx[i];
        }
        const double m = s / n;
        const double var = s2 / n - m * m;
        const float rstd = static_cast<float>(1.0 / std::sqrt(var + eps));
        saved.mean[g] = static_cast<float>(m);
        saved.rstd[g] = rstd;
        for (int c = 0; c < cg; c++) {
            const int ch = g * cg + c;
            const float ga = gamma.w.at(ch), be = beta.w.at(ch);
            const float* xr = px + int64_t(ch) * S;
            float* yr = py + int64_t(ch) * S;
            for (int64_t i = 0; i < S; i++)
                yr[i] = (xr[i] - saved.mean[g]) * rstd * ga + be;
        }
    }
    return y;
}

Tensor GroupNorm::backward(const Tensor& x, const Saved& saved, const Tensor& dy) {
    check_same_shape(x, dy, "groupnorm backward");
    const int64_t S = x.dim(1) * x.dim(2) * x.dim(3);
    const int cg = channels / groups;
    const int64_t n = cg * S;
    Tensor dx(x.dims());
    const float* px = x.data();
    const float* pd = dy.data();
    float* po = dx.data();
    for (int g = 0; g < groups; g++) {
        const float m = saved.mean[g], rstd = saved.rstd[g];
        // Means of dxh and dxh*xh over the group, where xh = (x-m)*rstd.
        double sum_d = 0.0, sum_dx = 0.0;
        for (int c = 0; c < cg; c++) {
            const int ch = g * cg + c;
            const float ga = gamma.w.at(ch);
            const float* xr = px + int64_t(ch) * S;
            const float* dr = pd + int64_t(ch) * S;
            double sd = 0.0, sdx = 0.0, sdh = 0.0;
            for (int64_t i = 0; i < S; i++) {
                const float xh = (xr[i] - m) * rstd;
                const float dxh = dr[i] * ga;
                sd += dr[i];
                sdx += double(dr[i]) * xh;
                sdh += dxh;
                sum_dx += double(dxh) * xh;
            }
            sum_d += sdh;
            gamma.g.at(ch) += static_cast<float>(sdx);
            beta.g.at(ch) += static_cast<float>(sd);
        }
        const float mean_d = static_cast<float>(sum_d / n);
        const float mean_dx = static_cast<float>(sum_dx / n);
        for (int c = 0; c < cg; c++) {
            const int ch = g * cg + c;
            const float ga = gamma.w.at(ch);
            const float* xr = px + int64_t(ch) * S;
            const float* dr = pd + int64_t(ch) * S;
            float* outr = po + int64_t(ch) * S;
            for (int64_t i = 0; i < S; i++) {
                const float xh = (xr[i] - m) * rstd;
                outr[i] = rstd * (dr[i] * ga - mean_d - xh * mean_dx);
            }
        }
    }
    return dx;
}

void GroupNorm::collect(std::vector<Param*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
}

void Embedding::init(const std::string& name, int vocab_, int dim_, Rng& rng) {
    vocab = vocab_;
    dim = dim_;
    table.name = name + ".table";
    table.init_shape({vocab, dim});
    float* p = table.w.data();
    for (int64_t i = 0; i < table.w.numel(); i++) p[i] = 0.02f * rng.normalf();
}

Tensor Embedding::forward(const std::vector<int>& ids) const {
    Tensor y({static_cast<int64_t>(ids.size()), dim});
    for (size_t i = 0; i < ids.size(); i++) {
        if (ids[i] < 0 || ids[i] >= vocab) throw ValidationError("embedding: id out of range");
        std::memcpy(y.data() + i * dim, table.w.data() + int64_t(ids[i]) * dim,
                    sizeof(float) * dim);
    }
    return y;
}

void Embedding::backward(const std::vector<int>& ids, const Tensor& dy) {
    for (size_t i = 0; i < ids.size(); i++) {
        float* g = table.g.data() + int64_t(ids[i]) * dim;
        const float* d = dy.data() + i * dim;
        for (int j = 0; j < dim; j++) g[j] += d[j];
    }
}

void Embedding::collect(std::vector<Param*>& out) { out.push_back(&table); }

Tensor upsample_nearest2x(const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("upsample: input must be (C, X, Y, Z)");
    const int64_t C = x.dim(0), X = x.dim(1), Y = x.dim(2), Z = x.dim(3);
    Tensor y({C, 2 * X, 2 * Y, 2 * Z});
    const float* px = x.data();
    float* py = y.data();
    for (int64_t c = 0; c < C; c++)
        for (int64_t i = 0; i < 2 * X; i++)
            for (int64_t j = 0; j < 2 * Y; j++) {
                const float* xr = px + ((c * X + i / 2) * Y + j / 2) * Z;
                float* yr = py + ((c * 2 * X + i) * 2 * Y + j) * 2 * Z;
                for (int64_t k = 0; k < Z; k++) {
                    yr[2 * k] = xr[k];
                    yr[2 * k + 1] = xr[k];
                }
            }
    return y;
}

Tensor upsample_nearest2x_backward(const Tensor& dy) {
    const int64_t C = dy.dim(0), X2 = dy.dim(1), Y2 = dy.dim(2), Z2 = dy.dim(3);
    Tensor dx = Tensor::zeros({C, X2 / 2, Y2 / 2, Z2 / 2});
    const float* pd = dy.data();
    float* po = dx.data();
    for (int64_t c = 0; c < C; c++)
        for (int64_t i = 0; i < X2; i++)
            for (int64_t j = 0; j < Y2; j++) {
                const float* dr = pd + ((c * X2 + i) * Y2 + j) * Z2;
                float* xr = po + ((c * (X2 / 2) + i / 2) * (Y2 / 2) + j / 2) * (Z2 / 2);
                for (int64_t k = 0; k < Z2; k++) xr[k / 2] += dr[k];
            }
    return dx;
}

Tensor upsample_trilinear2x(const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("upsample: input must be (C, X, Y, Z)");
    const int64_t C = x.dim(0), X = x.dim(1), Y = x.dim(2), Z = x.dim(3);
    Tensor y({C, 2 * X, 2 * Y, 2 * Z});
    auto src = [](int64_t o, int64_t extent, int64_t& i0, int64_t& i1, float& w1) {
        // align_corners = false: in = (o + 0.5)/2 - 0.5
        float in = 0.5f * (static_cast<float>(o) + 0.5f) - 0.5f;
        float fl = std::floor(in);
        i0 = static_cast<int64_t>(fl);
        w1 = in - fl;
        i1 = i0 + 1;
        if (i0 < 0) i0 = 0;
        if (i1 > extent - 1) i1 = extent - 1;
    };
    const float* px = x.data();
    float* py = y.data();
    for (int64_t c = 0; c < C; c++) {
        const float* xc = px + c * X * Y * Z;
        for (int64_t i = 0; i < 2 * X; i++) {
            int64_t x0, x1;
            float wx;
            src(i, X, x0, x1, wx);
            for (int64_t j = 0; j < 2 * Y; j++) {
                int64_t y0, y1;
                float wy;
                src(j, Y, y0, y1, wy);
                float* yr = py + ((c * 2 * X + i) * 2 * Y + j) * 2 * Z;
                for (int64_t k = 0; k < 2 * Z; k++) {
                    int64_t z0, z1;
                    float wz;
                    src(k, Z, z0, z1, wz);
                    auto v = [&](int64_t a, int64_t b, int64_t d) {
                        return xc[(a * Y + b) * Z + d];
                    };
                    const float c00 = v(x0, y0, z0) * (1 - wz) + v(x0, y0, z1) * wz;
                    const float c01 = v(x0, y1, z0) * (1 - wz) + v(x0, y1, z1) * wz;
                    const float c10 = v(x1, y0, z0) * (1 - wz) + v(x1, y0, z1) * wz;
                    const float c11 = v(x1, y1, z0) * (1 - wz) + v(x1, y1, z1) * wz;
                    yr[k] = (c00 * (1 - wy) + c01 * wy) * (1 - wx) + (c10 * (1 - wy) + c11 * wy) * wx;
                }
            }
        }
    }
    return y;
}

Tensor transpose2d(const Tensor& x) {
    if (x.rank() != 2) throw ShapeError("transpose2d: rank must be 2");
    const int64_t A = x.dim(0), B = x.dim(1);
    Tensor y({B, A});
    const float* px = x.data();
    float* py = y.data();
    for (int64_t i = 0; i < A; i++)
        for (int64_t j = 0; j < B; j++) py[j * A + i] = px[i * B + j];
    return y;
}

Adam::Adam(std::vector<Param*> params_, float lr_) : lr(lr_), params(std::move(params_)) {
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (auto* p : params) {
        m_.push_back(Tensor::zeros(p->w.dims()));
        v_.push_back(Tensor::zeros(p->w.dims()));
    }
}

void Adam::zero_grad() {
    for (auto* p : params) p->zero_grad();
}

void Adam::step(float lr_override) {
    t++;
    const float a = lr_override >= 0.0f ? lr_override : lr;
    const double bc1 = 1.0 - std::pow(double(beta1), double(t));
    const double bc2 = 1.0 - std::pow(double(beta2), double(t));
    for (size_t i = 0; i < params.size(); i++) {
        float* w = params[i]->w.data();
        const float* g = params[i]->g.data();
        float* m = m_[i].data();
        float* v = v_[i].data();
        const int64_t n = params[i]->w.numel();
        for (int64_t j = 0; j < n; j++) {
            m[j] = beta1 * m[j] + (1.0f - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0f - beta2) * g[j] * g[j];
            const float mh = static_cast<float>(m[j] / bc1);
            const float vh = static_cast<float>(v[j] / bc2);
            w[j] -= a * mh / (std::sqrt(vh) + eps);
        }
    }
}

}  // namespace nn
}  // namespace text2ct
