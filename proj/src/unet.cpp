#include "text2ct/unet.hpp"

#include <cmath>
#include <cstring>

namespace text2ct {

std::string UNetConfig::canonical() const {
    return strformat("in_channels=%d;base_width=%d;context_dim=%d;time_dim=%d;heads=%d;groups=%d",
                     in_channels, base_width, context_dim, time_dim, heads, groups);
}

Tensor sinusoidal_time_embedding(int t, int dim, int total_timesteps) {
    Tensor e({1, dim});
    float* p = e.data();
    const int half = dim / 2;
    const double scaled = 1000.0 * static_cast<double>(t) / std::max(1, total_timesteps);
    for (int i = 0; i < half; i++) {
        const double rate = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
        p[i] = static_cast<float>(std::sin(scaled * rate));
        p[half + i] = static_cast<float>(std::cos(scaled * rate));
    }
    for (int i = 2 * half; i < dim; i++) p[i] = 0.0f;
    return e;
}

namespace detail {

void CrossAttention::init(const std::string& name, int channels_, int ctx_dim_, int heads_,
                          int groups, Rng& rng) {
    channels = channels_;
    ctx_dim = ctx_dim_;
    heads = heads_;
    if (channels % heads != 0) throw ConfigError("attention: channels not divisible by heads");
    norm.init(name + ".norm", channels, groups);
    to_q.init(name + ".to_q", channels, channels, rng, false, /*with_bias=*/false);
    to_k.init(name + ".to_k", ctx_dim, channels, rng, false, false);
    to_v.init(name + ".to_v", ctx_dim, channels, rng, false, false);
    to_out.init(name + ".to_out", channels, channels, rng, /*zero_init=*/true);
}

Tensor CrossAttention::forward(const Tensor& x, const Tensor& ctx,
                               const std::vector<uint8_t>& mask, Cache* cache) const {
    const int64_t C = x.dim(0);
    const int64_t P = x.dim(1) * x.dim(2) * x.dim(3);
    const int64_t L = ctx.dim(0);
    if (ctx.dim(1) != ctx_dim) throw ShapeError("attention: context width mismatch");
    if (static_cast<int64_t>(mask.size()) != L) throw ShapeError("attention: mask length mismatch");

    nn::GroupNorm::Saved norm_saved;
    Tensor normed = norm.forward(x, norm_saved);
    Tensor nT = nn::transpose2d(normed.reshaped({C, P}));  // (P, C)
    Tensor q = to_q.forward(nT);                            // (P, C)
    Tensor k = to_k.forward(ctx);                           // (L, C)
    Tensor v = to_v.forward(ctx);                           // (L, C)

    const int dh = static_cast<int>(C) / heads;
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
    Tensor scores({heads, P, L});
    for (int h = 0; h < heads; h++) {
        gemm(false, true, P, L, dh, scale, q.data() + h * dh, C, k.data() + h * dh, C, 0.0f,
             scores.data() + static_cast<int64_t>(h) * P * L, L);
    }
    // mask + row softmax
    float* sp = scores.data();
    for (int64_t row = 0; row < static_cast<int64_t>(heads) * P; row++) {
        float* r = sp + row * L;
        float mx = -1e30f;
        for (int64_t l = 0; l < L; l++) {
            if (!mask[static_cast<size_t>(l)]) r[l] = -1e30f;
            if (r[l] > mx) mx = r[l];
        }
        float sum = 0.0f;
        for (int64_t l = 0; l < L; l++) {
            r[l] = std::exp(r[l] - mx);
            sum += r[l];
        }
        const float inv = 1.0f / sum;
        for (int64_t l = 0; l < L; l++) r[l] *= inv;
    }

    Tensor attn_out = Tensor::zeros({P, C});
    for (int h = 0; h < heads; h++) {
        gemm(false, false, P, dh, L, 1.0f, scores.data() + static_cast<int64_t>(h) * P * L, L,
             v.data() + h * dh, C, 0.0f, attn_out.data() + h * dh, C);
    }
    Tensor proj = to_out.forward(attn_out);                    // (P, C)
    Tensor y = nn::transpose2d(proj).reshaped(x.dims());       // (C, X, Y, Z)
    axpy(1.0f, x, y);

    if (cache) {
        cache->x = x;
        cache->normed = normed;
        cache->nT = nT;
        cache->q = q;
        cache->k = k;
        cache->v = v;
        cache->scores = scores;
        cache->attn_out = attn_out;
        cache->norm_saved = norm_saved;
        cache->mask = mask;
    }
    return y;
}

Tensor CrossAttention::backward(const Cache& cache, const Tensor& ctx, const Tensor& dy,
                                Tensor& dctx) {
    const int64_t C = cache.x.dim(0);
    const int64_t P = cache.x.dim(1) * cache.x.dim(2) * cache.x.dim(3);
    const int64_t L = ctx.dim(0);
    const int dh = static_cast<int>(C) / heads;
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

    Tensor dproj = nn::transpose2d(dy.reshaped({C, P}));  // (P, C)
    Tensor dattn = to_out.backward(cache.attn_out, dproj);

    Tensor dq = Tensor::zeros({P, C});
    Tensor dk = Tensor::zeros({L, C});
    Tensor dv = Tensor::zeros({L, C});
    Tensor dscores({P, L});
    for (int h = 0; h < heads; h++) {
        const float* s = cache.scores.data() + static_cast<int64_t>(h) * P * L;
        // dV_h += S^T dO_h ; dS = dO_h V_h^T
        gemm(true, false, L, dh, P, 1.0f, s, L, dattn.data() + h * dh, C, 1.0f,
             dv.data() + h * dh, C);
        gemm(false, true, P, L, dh, 1.0f, dattn.data() + h * dh, C, cache.v.data() + h * dh, C,
             0.0f, dscores.data(), L);
        // softmax backward in place
        float* dsp = dscores.data();
        for (int64_t row = 0; row < P; row++) {
            const float* srow = s + row * L;
            float* drow = dsp + row * L;
            float dot = 0.0f;
            for (int64_t l = 0; l < L; l++) dot += drow[l] * srow[l];
            for (int64_t l = 0; l < L; l++) drow[l] = srow[l] * (drow[l] - dot);
        }
        gemm(false, false, P, dh, L, scale, dscores.data(), L, cache.k.data() + h * dh, C, 1.0f,
             dq.data() + h * dh, C);
        gemm(true, false, L, dh, P, scale, dscores.data(), L, cache.q.data() + h * dh, C, 1.0f,
             dk.data() + h * dh, C);
    }

    Tensor dnT = to_q.backward(cache.nT, dq);
    axpy(1.0f, to_k.backward(ctx, dk), dctx);
    axpy(1.0f, to_v.backward(ctx, dv), dctx);

    Tensor dnormed = nn::transpose2d(dnT).reshaped(cache.x.dims());
    Tensor dx = norm.backward(cache.x, cache.norm_saved, dnormed);
    axpy(1.0f, dy, dx);
    return dx;
}

void CrossAttention::collect(std::vector<nn::Param*>& out) {
    norm.collect(out);
    to_q.collect(out);
    to_k.collect(out);
    to_v.collect(out);
    to_out.collect(out);
}

void ResBlockT::init(const std::string& name, int cin_, int cout_, int time_dim, int groups,
                     Rng& rng) {
    cin = cin_;
    cout = cout_;
    norm1.init(name + ".norm1", cin, groups);
    conv1.init(name + ".conv1", cin, cout, 3, 1, rng);
    time_proj.init(name + ".time", time_dim, 2 * cout, rng, /*zero_init=*/true);
    norm2.init(name + ".norm2", cout, groups);
    conv2.init(name + ".conv2", cout, cout, 3, 1, rng, /*zero_init=*/true);
    has_skip = cin != cout;
    if (has_skip) skip.init(name + ".skip", cin, cout, 1, 1, rng);
}

Tensor ResBlockT::forward(const Tensor& x, const Tensor& temb, Cache* cache) const {
    nn::GroupNorm::Saved n1s, n2s;
    Tensor n1 = norm1.forward(x, n1s);
    Tensor s1 = nn::act_forward(nn::Act::SiLU, n1);
    Tensor h1 = conv1.forward(s1);
    Tensor temb_s = nn::act_forward(nn::Act::SiLU, temb);
    Tensor film = time_proj.forward(temb_s);  // (1, 2*cout)
    Tensor h = h1.clone();
    {
        const float* f = film.data();
        float* p = h.data();
        const int64_t plane = h.dim(1) * h.dim(2) * h.dim(3);
        for (int c = 0; c < cout; c++) {
            const float sc = 1.0f + f[c];
            const float sh = f[cout + c];
            float* row = p + static_cast<int64_t>(c) * plane;
            for (int64_t i = 0; i < plane; i++) row[i] = row[i] * sc + sh;
        }
    }
    Tensor n2 = norm2.forward(h, n2s);
    Tensor s2 = nn::act_forward(nn::Act::SiLU, n2);
    Tensor y = conv2.forward(s2);
    Tensor sk = has_skip ? skip.forward(x) : x;
    axpy(1.0f, sk, y);
    if (cache) {
        cache->x = x;
        cache->n1 = n1;
        cache->s1 = s1;
        cache->h1 = h1;
        cache->film = h;  // post-film activation (input of norm2)
        cache->n2 = n2;
        cache->s2 = s2;
        cache->temb_s = temb_s;
        cache->n1_saved = n1s;
        cache->n2_saved = n2s;
        cache->scale = film;
    }
    return y;
}

Tensor ResBlockT::backward(const Cache& cache, const Tensor& dy, Tensor& dtemb) {
    Tensor ds2 = conv2.backward(cache.s2, dy);
    Tensor dn2 = nn::act_backward(nn::Act::SiLU, cache.n2, ds2);
    Tensor dh = norm2.backward(cache.film, cache.n2_saved, dn2);

    // film backward: h = h1*(1+s_c) + b_c
    Tensor dfilm({1, 2 * cout});
    Tensor dh1(cache.h1.dims());
    {
        const float* f = cache.scale.data();
        const float* dhp = dh.data();
        const float* h1p = cache.h1.data();
        float* dh1p = dh1.data();
        float* df = dfilm.data();
        const int64_t plane = dh.dim(1) * dh.dim(2) * dh.dim(3);
        for (int c = 0; c < cout; c++) {
            const float sc = 1.0f + f[c];
            double dsum = 0.0, bsum = 0.0;
            const float* drow = dhp + static_cast<int64_t>(c) * plane;
            const float* hrow = h1p + static_cast<int64_t>(c) * plane;
            float* orow = dh1p + static_cast<int64_t>(c) * plane;
            for (int64_t i = 0; i < plane; i++) {
                orow[i] = drow[i] * sc;
                dsum += double(drow[i]) * hrow[i];
                bsum += drow[i];
            }
            df[c] = static_cast<float>(dsum);
            df[cout + c] = static_cast<float>(bsum);
        }
    }
    Tensor dtemb_s = time_proj.backward(cache.temb_s, dfilm);
    // run silu backward on the saved pre-activation temb (recover from temb_s input)
    axpy(1.0f, dtemb_s, dtemb);  // caller applies the silu backward once for the shared temb

    Tensor ds1 = conv1.backward(cache.s1, dh1);
    Tensor dn1 = nn::act_backward(nn::Act::SiLU, cache.n1, ds1);
    Tensor dx = norm1.backward(cache.x, cache.n1_saved, dn1);
    if (has_skip) {
        axpy(1.0f, skip.backward(cache.x, dy), dx);
    } else {
        axpy(1.0f, dy, dx);
    }
    return dx;
}

void ResBlockT::collect(std::vector<nn::Param*>& out) {
    norm1.collect(out);
    conv1.collect(out);
    time_proj.collect(out);
    norm2.collect(out);
    conv2.collect(out);
    if (has_skip) skip.collect(out);
}

}  // namespace detail

UNet3D::UNet3D(const UNetConfig& cfg_, uint64_t init_seed) : cfg(cfg_) {
    Rng rng = Rng(init_seed).split("unet");
    const int w = cfg.base_width;
    conv_in.init("unet.conv_in", cfg.in_channels, w, 3, 1, rng);
    rb1.init("unet.rb1", w, w, cfg.time_dim, cfg.groups, rng);
    attn1.init("unet.attn1", w, cfg.context_dim, cfg.heads, cfg.groups, rng);
    down.init("unet.down", w, 2 * w, 3, 2, rng);
    rb2.init("unet.rb2", 2 * w, 2 * w, cfg.time_dim, cfg.groups, rng);
    attn2.init("unet.attn2", 2 * w, cfg.context_dim, cfg.heads, cfg.groups, rng);
    mid1.init("unet.mid1", 2 * w, 2 * w, cfg.time_dim, cfg.groups, rng);
    mid_attn.init("unet.mid_attn", 2 * w, cfg.context_dim, cfg.heads, cfg.groups, rng);
    mid2.init("unet.mid2", 2 * w, 2 * w, cfg.time_dim, cfg.groups, rng);
    up_conv.init("unet.up_conv", 2 * w, w, 3, 1, rng);
    rb3.init("unet.rb3", 2 * w, w, cfg.time_dim, cfg.groups, rng);
    out_norm.init("unet.out_norm", w, cfg.groups);
    conv_out.init("unet.conv_out", w, cfg.in_channels, 3, 1, rng, /*zero_init=*/true);
    time_mlp1.init("unet.time_mlp1", cfg.time_dim, cfg.time_dim, rng);
    time_mlp2.init("unet.time_mlp2", cfg.time_dim, cfg.time_dim, rng);
    null_ctx.name = "unet.null_ctx";
    null_ctx.init_shape({cfg.context_dim});
    float* p = null_ctx.w.data();
    for (int i = 0; i < cfg.context_dim; i++) p[i] = 0.02f * rng.normalf();
}

namespace {

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
        throw ShapeError("concat: spatial mismatch");
    Tensor out({a.dim(0) + b.dim(0), a.dim(1), a.dim(2), a.dim(3)});
    const size_t na = static_cast<size_t>(a.numel());
    std::memcpy(out.data(), a.data(), na * sizeof(float));
    std::memcpy(out.data() + a.numel(), b.data(), static_cast<size_t>(b.numel()) * sizeof(float));
    return out;
}

void split_channels(const Tensor& d, int64_t ca, Tensor& da, Tensor& db) {
    const int64_t plane = d.dim(1) * d.dim(2) * d.dim(3);
    da = Tensor({ca, d.dim(1), d.dim(2), d.dim(3)});
    db = Tensor({d.dim(0) - ca, d.dim(1), d.dim(2), d.dim(3)});
    std::memcpy(da.data(), d.data(), static_cast<size_t>(ca * plane) * sizeof(float));
    std::memcpy(db.data(), d.data() + ca * plane,
                static_cast<size_t>((d.dim(0) - ca) * plane) * sizeof(float));
}

}  // namespace

Tensor UNet3D::forward(const Tensor& z_t, int t, const TextEmbedding& ctx, Cache* cache,
                       int total_timesteps) const {
    if (z_t.rank() != 4 || z_t.dim(0) != cfg.in_channels)
        throw ShapeError("unet: input must be (C, h, w, d) with configured channels");
    if (z_t.dim(1) % 2 || z_t.dim(2) % 2 || z_t.dim(3) % 2)
        throw ShapeError("unet: latent spatial dims must be even");
    if (ctx.tokens.dim(1) != cfg.context_dim)
        throw ShapeError(strformat("unet: context width %lld != configured %d",
                                   static_cast<long long>(ctx.tokens.dim(1)), cfg.context_dim));

    // All-masked embedding selects the learned unconditional context.
    Tensor ctx_used;
    std::vector<uint8_t> mask_used;
    bool used_null = false;
    if (ctx.valid_count() == 0) {
        used_null = true;
        ctx_used = Tensor({1, cfg.context_dim});
        std::memcpy(ctx_used.data(), null_ctx.w.data(),
                    static_cast<size_t>(cfg.context_dim) * sizeof(float));
        mask_used.assign(1, 1);
    } else {
        ctx_used = ctx.tokens;
        mask_used = ctx.mask;
    }

    Cache local;
    Cache& c = cache ? *cache : local;
    c.ctx_used = ctx_used;
    c.mask_used = mask_used;
    c.used_null = used_null;
    c.z = z_t;

    c.temb_base = sinusoidal_time_embedding(t, cfg.time_dim, total_timesteps);
    c.temb_h = time_mlp1.forward(c.temb_base);
    c.temb_s = nn::act_forward(nn::Act::SiLU, c.temb_h);
    c.temb = time_mlp2.forward(c.temb_s);

    c.h0 = conv_in.forward(z_t);
    Tensor r1 = rb1.forward(c.h0, c.temb, cache ? &c.rb1_c : nullptr);
    c.a1 = attn1.forward(r1, ctx_used, mask_used, cache ? &c.a1_c : nullptr);
    c.d1 = down.forward(c.a1);
    Tensor r2 = rb2.forward(c.d1, c.temb, cache ? &c.rb2_c : nullptr);
    c.a2 = attn2.forward(r2, ctx_used, mask_used, cache ? &c.a2_c : nullptr);
    c.m1 = mid1.forward(c.a2, c.temb, cache ? &c.mid1_c : nullptr);
    c.ma = mid_attn.forward(c.m1, ctx_used, mask_used, cache ? &c.mid_attn_c : nullptr);
    c.m2 = mid2.forward(c.ma, c.temb, cache ? &c.mid2_c : nullptr);
    c.up_in = nn::upsample_nearest2x(c.m2);
    c.up_out = up_conv.forward(c.up_in);
    c.cat = concat_channels(c.up_out, c.a1);
    c.r3 = rb3.forward(c.cat, c.temb, cache ? &c.rb3_c : nullptr);
    c.on = out_norm.forward(c.r3, c.on_saved);
    c.os = nn::act_forward(nn::Act::SiLU, c.on);
    return conv_out.forward(c.os);
}

Tensor UNet3D::backward(Cache& c, const Tensor& dout) {
    Tensor dtemb = Tensor::zeros({1, cfg.time_dim});
    Tensor dctx = Tensor::zeros(c.ctx_used.dims());

    Tensor dos = conv_out.backward(c.os, dout);
    Tensor don = nn::act_backward(nn::Act::SiLU, c.on, dos);
    Tensor dr3 = out_norm.backward(c.r3, c.on_saved, don);
    Tensor dcat = rb3.backward(c.rb3_c, dr3, dtemb);
    Tensor dup_out, da1_skip;
    split_channels(dcat, cfg.base_width, dup_out, da1_skip);
    Tensor dup_in = up_conv.backward(c.up_in, dup_out);
    Tensor dm2 = nn::upsample_nearest2x_backward(dup_in);
    Tensor dma = mid2.backward(c.mid2_c, dm2, dtemb);
    Tensor dm1 = mid_attn.backward(c.mid_attn_c, c.ctx_used, dma, dctx);
    Tensor da2 = mid1.backward(c.mid1_c, dm1, dtemb);
    Tensor dr2 = attn2.backward(c.a2_c, c.ctx_used, da2, dctx);
    Tensor dd1 = rb2.backward(c.rb2_c, dr2, dtemb);
    Tensor da1 = down.backward(c.a1, dd1);
    axpy(1.0f, da1_skip, da1);
    Tensor dr1 = attn1.backward(c.a1_c, c.ctx_used, da1, dctx);
    Tensor dh0 = rb1.backward(c.rb1_c, dr1, dtemb);
    conv_in.backward(c.z, dh0);

    // Blocks accumulated d(silu(temb)); undo their shared silu, then the MLP.
    Tensor dtemb_mlp = nn::act_backward(nn::Act::SiLU, c.temb, dtemb);
    Tensor dtemb_s = time_mlp2.backward(c.temb_s, dtemb_mlp);
    Tensor dtemb_h = nn::act_backward(nn::Act::SiLU, c.temb_h, dtemb_s);
    time_mlp1.backward(c.temb_base, dtemb_h);

    if (c.used_null) {
        float* g = null_ctx.g.data();
        const float* d = dctx.data();
        for (int i = 0; i < cfg.context_dim; i++) g[i] += d[i];
        return Tensor::zeros({1, cfg.context_dim});
    }
    return dctx;
}

void UNet3D::collect(std::vector<nn::Param*>& out) {
    conv_in.collect(out);
    rb1.collect(out);
    attn1.collect(out);
    down.collect(out);
    rb2.collect(out);
    attn2.collect(out);
    mid1.collect(out);
    mid_attn.collect(out);
    mid2.collect(out);
    up_conv.collect(out);
    rb3.collect(out);
    out_norm.collect(out);
    conv_out.collect(out);
    time_mlp1.collect(out);
    time_mlp2.collect(out);
    out.push_back(&null_ctx);
}

Checkpoint UNet3D::to_checkpoint() const {
    Checkpoint ck;
    ck.kind = "unet";
    ck.meta["format_version"] = "1";
    ck.meta["config"] = cfg.canonical();
    std::vector<nn::Param*> ps;
    const_cast<UNet3D*>(this)->collect(ps);
    for (auto* p : ps) ck.tensors[p->name] = p->w.clone();
    return ck;
}

UNet3D UNet3D::from_checkpoint(const Checkpoint& ck) {
    if (ck.kind != "unet") throw ConfigError("checkpoint kind is not unet");
    UNetConfig cfg;
    const std::string canon = ck.meta_or("config", "");
    if (sscanf(canon.c_str(),
               "in_channels=%d;base_width=%d;context_dim=%d;time_dim=%d;heads=%d;groups=%d",
               &cfg.in_channels, &cfg.base_width, &cfg.context_dim, &cfg.time_dim, &cfg.heads,
               &cfg.groups) != 6)
        throw ConfigError("unet checkpoint: unparseable config: " + canon);
    UNet3D model(cfg, 0);
    std::vector<nn::Param*> ps;
    model.collect(ps);
    for (auto* p : ps) {
        const Tensor& t = ck.tensor(p->name);
        if (!t.same_shape(p->w)) throw ConfigError("unet checkpoint: shape mismatch for " + p->name);
        p->w = t.clone();
    }
    return model;
}

uint64_t UNet3D::weights_fingerprint() const {
    std::vector<nn::Param*> ps;
    const_cast<UNet3D*>(this)->collect(ps);
    uint64_t h = fnv1a64(cfg.canonical());
    for (auto* p : ps) h = fnv1a64(p->w.data(), static_cast<size_t>(p->w.numel()) * 4, h);
    return h;
}

}  // namespace text2ct
