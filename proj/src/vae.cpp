#include "text2ct/vae.hpp"

#include <cmath>
#include <cstring>

namespace text2ct {

void LatentGrid::validate() const {
    if (values.rank() != 4) throw ShapeError("latent: must be (C, h, w, d)");
    if (!all_finite(values)) throw ValidationError("latent: non-finite values");
}

std::string AutoencoderConfig::canonical() const {
    return strformat("base_width=%d;latent_channels=%d;kl_weight=%.9g", base_width,
                     latent_channels, kl_weight);
}

Autoencoder::Autoencoder(const AutoencoderConfig& cfg_, uint64_t init_seed) : cfg(cfg_) {
    Rng rng = Rng(init_seed).split("autoencoder");
    const int w = cfg.base_width;
    const int c = cfg.latent_channels;
    enc_in.init("enc.in", 1, w, 3, 1, rng);
    enc_res1_a.init("enc.res1.a", w, w, 3, 1, rng);
    enc_res1_b.init("enc.res1.b", w, w, 3, 1, rng, /*zero_init=*/true);
    enc_down1.init("enc.down1", w, 2 * w, 3, 2, rng);
    enc_res2_a.init("enc.res2.a", 2 * w, 2 * w, 3, 1, rng);
    enc_res2_b.init("enc.res2.b", 2 * w, 2 * w, 3, 1, rng, true);
    enc_down2.init("enc.down2", 2 * w, 4 * w, 3, 2, rng);
    enc_res3_a.init("enc.res3.a", 4 * w, 4 * w, 3, 1, rng);
    enc_res3_b.init("enc.res3.b", 4 * w, 4 * w, 3, 1, rng, true);
    enc_moments.init("enc.moments", 4 * w, 2 * c, 3, 1, rng);

    dec_in.init("dec.in", c, 4 * w, 3, 1, rng);
    dec_res1_a.init("dec.res1.a", 4 * w, 4 * w, 3, 1, rng);
    dec_res1_b.init("dec.res1.b", 4 * w, 4 * w, 3, 1, rng, true);
    dec_up1.init("dec.up1", 4 * w, 2 * w, 3, 1, rng);
    dec_res2_a.init("dec.res2.a", 2 * w, 2 * w, 3, 1, rng);
    dec_res2_b.init("dec.res2.b", 2 * w, 2 * w, 3, 1, rng, true);
    dec_up2.init("dec.up2", 2 * w, w, 3, 1, rng);
    dec_res3_a.init("dec.res3.a", w, w, 3, 1, rng);
    dec_res3_b.init("dec.res3.b", w, w, 3, 1, rng, true);
    dec_out.init("dec.out", w, 1, 3, 1, rng);
}

namespace {

struct ResCache {
    Tensor x, s1, a, s2;
};

Tensor res_forward(const nn::Conv3d& ca, const nn::Conv3d& cb, const Tensor& x, ResCache* c) {
    Tensor s1 = nn::act_forward(nn::Act::SiLU, x);
    Tensor a = ca.forward(s1);
    Tensor s2 = nn::act_forward(nn::Act::SiLU, a);
    Tensor y = cb.forward(s2);
    axpy(1.0f, x, y);
    if (c) {
        c->x = x;
        c->s1 = s1;
        c->a = a;
        c->s2 = s2;
    }
    return y;
}

Tensor res_backward(nn::Conv3d& ca, nn::Conv3d& cb, const ResCache& c, const Tensor& dy) {
    Tensor ds2 = cb.backward(c.s2, dy);
    Tensor da = nn::act_backward(nn::Act::SiLU, c.a, ds2);
    Tensor ds1 = ca.backward(c.s1, da);
    Tensor dx = nn::act_backward(nn::Act::SiLU, c.x, ds1);
    axpy(1.0f, dy, dx);
    return dx;
}

void check_div4(const Tensor& vol) {
    const char* axes = "HWD";
    for (int i = 0; i < 3; i++)
        if (vol.dim(i) % 4 != 0)
            throw ShapeError(strformat("encode: axis %c extent %lld not divisible by 4", axes[i],
                                       static_cast<long long>(vol.dim(i))));
}

struct ForwardState {
    Tensor x, h0, d1, d2;                    // encoder trunk
    ResCache er1, er2, er3;
    Tensor er1_out, er2_out, er3_out;
    Tensor mean, logvar, eps, z;
    Tensor g0, u1_in, u1, u2_in, u2;         // decoder trunk
    ResCache dr1, dr2, dr3;
    Tensor dr1_out, dr2_out, dr3_out;
    Tensor recon;
    double loss = 0.0, recon_l1 = 0.0, kl = 0.0;
};

ForwardState vae_forward(Autoencoder& m, const Tensor& patch, const Tensor& eps) {
    ForwardState st;
    st.x = patch.reshaped({1, patch.dim(0), patch.dim(1), patch.dim(2)});
    st.h0 = m.enc_in.forward(st.x);
    st.er1_out = res_forward(m.enc_res1_a, m.enc_res1_b, st.h0, &st.er1);
    st.d1 = m.enc_down1.forward(st.er1_out);
    st.er2_out = res_forward(m.enc_res2_a, m.enc_res2_b, st.d1, &st.er2);
    st.d2 = m.enc_down2.forward(st.er2_out);
    st.er3_out = res_forward(m.enc_res3_a, m.enc_res3_b, st.d2, &st.er3);
    Tensor mom = m.enc_moments.forward(st.er3_out);

    const int c = m.cfg.latent_channels;
    const int64_t plane = mom.dim(1) * mom.dim(2) * mom.dim(3);
    st.mean = Tensor({c, mom.dim(1), mom.dim(2), mom.dim(3)});
    st.logvar = Tensor({c, mom.dim(1), mom.dim(2), mom.dim(3)});
    std::memcpy(st.mean.data(), mom.data(), sizeof(float) * static_cast<size_t>(c * plane));
    {
        const float* src = mom.data() + c * plane;
        float* dst = st.logvar.data();
        for (int64_t i = 0; i < c * plane; i++) dst[i] = std::clamp(src[i], -30.0f, 20.0f);
    }
    check_same_shape(st.mean, eps, "vae eps");
    st.eps = eps;
    st.z = Tensor(st.mean.dims());
    {
        const float* mu = st.mean.data();
        const float* lv = st.logvar.data();
        const float* ep = eps.data();
        float* z = st.z.data();
        for (int64_t i = 0; i < st.z.numel(); i++)
            z[i] = mu[i] + std::exp(0.5f * lv[i]) * ep[i];
    }

    st.g0 = m.dec_in.forward(st.z);
    st.dr1_out = res_forward(m.dec_res1_a, m.dec_res1_b, st.g0, &st.dr1);
    st.u1_in = nn::upsample_nearest2x(st.dr1_out);
    st.u1 = m.dec_up1.forward(st.u1_in);
    st.dr2_out = res_forward(m.dec_res2_a, m.dec_res2_b, st.u1, &st.dr2);
    st.u2_in = nn::upsample_nearest2x(st.dr2_out);
    st.u2 = m.dec_up2.forward(st.u2_in);
    st.dr3_out = res_forward(m.dec_res3_a, m.dec_res3_b, st.u2, &st.dr3);
    st.recon = m.dec_out.forward(st.dr3_out);

    const int64_t n = st.recon.numel();
    double l1 = 0.0;
    {
        const float* r = st.recon.data();
        const float* t = st.x.data();
        for (int64_t i = 0; i < n; i++) l1 += std::fabs(double(r[i]) - double(t[i]));
        l1 /= static_cast<double>(n);
    }
    double kl = 0.0;
    {
        const float* mu = st.mean.data();
        const float* lv = st.logvar.data();
        for (int64_t i = 0; i < st.mean.numel(); i++)
            kl += -0.5 * (1.0 + lv[i] - double(mu[i]) * mu[i] - std::exp(double(lv[i])));
        kl /= static_cast<double>(st.mean.numel());
    }
    st.recon_l1 = l1;
    st.kl = kl;
    st.loss = l1 + m.cfg.kl_weight * kl;
    return st;
}

}  // namespace

Autoencoder::Moments Autoencoder::encode_moments(const Tensor& vol) const {
    if (vol.rank() != 3) throw ShapeError("encode: volume must be rank 3");
    check_div4(vol);
    Tensor x = vol.reshaped({1, vol.dim(0), vol.dim(1), vol.dim(2)});
    Tensor h0 = enc_in.forward(x);
    Tensor r1 = res_forward(enc_res1_a, enc_res1_b, h0, nullptr);
    Tensor d1 = enc_down1.forward(r1);
    Tensor r2 = res_forward(enc_res2_a, enc_res2_b, d1, nullptr);
    Tensor d2 = enc_down2.forward(r2);
    Tensor r3 = res_forward(enc_res3_a, enc_res3_b, d2, nullptr);
    Tensor m = enc_moments.forward(r3);
    const int c = cfg.latent_channels;
    Moments out;
    out.mean = Tensor({c, m.dim(1), m.dim(2), m.dim(3)});
    out.logvar = Tensor({c, m.dim(1), m.dim(2), m.dim(3)});
    const int64_t plane = m.dim(1) * m.dim(2) * m.dim(3);
    std::memcpy(out.mean.data(), m.data(), sizeof(float) * static_cast<size_t>(c * plane));
    std::memcpy(out.logvar.data(), m.data() + c * plane,
                sizeof(float) * static_cast<size_t>(c * plane));
    return out;
}

LatentGrid Autoencoder::encode_tensor(const Tensor& vol) const {
    LatentGrid z;
    z.values = encode_moments(vol).mean;
    z.validate();
    return z;
}

LatentGrid Autoencoder::encode(const Volume3D& vol) const { return encode_tensor(vol.voxels); }

tsp::SplitStage Autoencoder::decoder_stage() const {
    using namespace tsp;
    SplitStage st;
    st.name = "vae_decoder";
    auto res = [](const nn::Conv3d& a, const nn::Conv3d& b) {
        return residual_op(
            {act_op(nn::Act::SiLU), conv_op(&a), act_op(nn::Act::SiLU), conv_op(&b)});
    };
    st.ops = {
        conv_op(&dec_in),
        res(dec_res1_a, dec_res1_b),
        upsample_nearest_op(),
        conv_op(&dec_up1),
        res(dec_res2_a, dec_res2_b),
        upsample_nearest_op(),
        conv_op(&dec_up2),
        res(dec_res3_a, dec_res3_b),
        conv_op(&dec_out),
        act_op(nn::Act::Clamp01),
    };
    return st;
}

Tensor Autoencoder::decode_tensor(const Tensor& z, const tsp::TSPlan* plan) const {
    if (z.rank() != 4 || z.dim(0) != cfg.latent_channels)
        throw ShapeError("decode: latent must be (C, h, w, d)");
    tsp::SplitStage stage = decoder_stage();
    Tensor out4 = plan ? tsp::run_split(stage, z, *plan) : stage.run(z);
    return out4.reshaped({out4.dim(1), out4.dim(2), out4.dim(3)});
}

Volume3D Autoencoder::decode(const LatentGrid& z, const tsp::TSPlan* plan) const {
    Volume3D v;
    v.voxels = decode_tensor(z.values, plan);
    return v;
}

void Autoencoder::collect(std::vector<nn::Param*>& out) {
    for (nn::Conv3d* c : {&enc_in, &enc_res1_a, &enc_res1_b, &enc_down1, &enc_res2_a, &enc_res2_b,
                          &enc_down2, &enc_res3_a, &enc_res3_b, &enc_moments, &dec_in, &dec_res1_a,
                          &dec_res1_b, &dec_up1, &dec_res2_a, &dec_res2_b, &dec_up2, &dec_res3_a,
                          &dec_res3_b, &dec_out})
        c->collect(out);
}

uint64_t Autoencoder::weights_fingerprint() const {
    std::vector<nn::Param*> ps;
    const_cast<Autoencoder*>(this)->collect(ps);
    uint64_t h = fnv1a64(cfg.canonical());
    for (auto* p : ps) h = fnv1a64(p->w.data(), static_cast<size_t>(p->w.numel()) * 4, h);
    return h;
}

Checkpoint Autoencoder::to_checkpoint() const {
    Checkpoint ck;
    ck.kind = "autoencoder";
    ck.meta["format_version"] = "1";
    ck.meta["config"] = cfg.canonical();
    std::vector<nn::Param*> ps;
    const_cast<Autoencoder*>(this)->collect(ps);
    for (auto* p : ps) ck.tensors[p->name] = p->w.clone();
    return ck;
}

Autoencoder Autoencoder::from_checkpoint(const Checkpoint& ck) {
    if (ck.kind != "autoencoder") throw ConfigError("checkpoint kind is not autoencoder");
    AutoencoderConfig cfg;
    const std::string canon = ck.meta_or("config", "");
    if (sscanf(canon.c_str(), "base_width=%d;latent_channels=%d;kl_weight=%g", &cfg.base_width,
               &cfg.latent_channels, &cfg.kl_weight) != 3)
        throw ConfigError("autoencoder checkpoint: unparseable config: " + canon);
    Autoencoder model(cfg, /*init_seed=*/0);
    std::vector<nn::Param*> ps;
    model.collect(ps);
    for (auto* p : ps) {
        const Tensor& t = ck.tensor(p->name);
        if (!t.same_shape(p->w))
            throw ConfigError("autoencoder checkpoint: shape mismatch for " + p->name);
        p->w = t.clone();
    }
    return model;
}

double Autoencoder::loss_only(const Tensor& patch, Rng& rng) {
    Moments m = encode_moments(patch);
    Tensor eps = Tensor::randn(m.mean.dims(), rng);
    return vae_forward(*this, patch, eps).loss;
}

Autoencoder::TrainStep Autoencoder::train_step(const Tensor& patch, nn::Adam& opt, float lr,
                                               Rng& rng) {
    Moments probe = encode_moments(patch);
    Tensor eps = Tensor::randn(probe.mean.dims(), rng);
    ForwardState st = vae_forward(*this, patch, eps);
    if (!std::isfinite(st.loss)) throw ValidationError("vae: non-finite loss");

    opt.zero_grad();
    // dL/drecon for mean-L1
    Tensor drecon(st.recon.dims());
    {
        const float* r = st.recon.data();
        const float* t = st.x.data();
        float* d = drecon.data();
        const float inv = 1.0f / static_cast<float>(st.recon.numel());
        for (int64_t i = 0; i < st.recon.numel(); i++)
            d[i] = r[i] > t[i] ? inv : (r[i] < t[i] ? -inv : 0.0f);
    }
    Tensor dr3 = dec_out.backward(st.dr3_out, drecon);
    Tensor du2 = res_backward(dec_res3_a, dec_res3_b, st.dr3, dr3);
    Tensor du2in = dec_up2.backward(st.u2_in, du2);
    Tensor dr2 = nn::upsample_nearest2x_backward(du2in);
    Tensor du1 = res_backward(dec_res2_a, dec_res2_b, st.dr2, dr2);
    Tensor du1in = dec_up1.backward(st.u1_in, du1);
    Tensor dr1 = nn::upsample_nearest2x_backward(du1in);
    Tensor dg0 = res_backward(dec_res1_a, dec_res1_b, st.dr1, dr1);
    Tensor dz = dec_in.backward(st.z, dg0);

    // Through the reparameterization + KL regularizer.
    const int64_t nl = st.mean.numel();
    Tensor dmean(st.mean.dims()), dlogvar(st.logvar.dims());
    {
        const float* mu = st.mean.data();
        const float* lv = st.logvar.data();
        const float* ep = st.eps.data();
        const float* dzp = dz.data();
        float* dm = dmean.data();
        float* dl = dlogvar.data();
        const float klw = cfg.kl_weight / static_cast<float>(nl);
        for (int64_t i = 0; i < nl; i++) {
            dm[i] = dzp[i] + klw * mu[i];
            dl[i] = dzp[i] * ep[i] * 0.5f * std::exp(0.5f * lv[i]) -
                    klw * 0.5f * (1.0f - std::exp(lv[i]));
        }
    }
    Tensor dmoments({2 * cfg.latent_channels, st.mean.dim(1), st.mean.dim(2), st.mean.dim(3)});
    const int64_t plane = st.mean.dim(1) * st.mean.dim(2) * st.mean.dim(3);
    std::memcpy(dmoments.data(), dmean.data(),
                sizeof(float) * static_cast<size_t>(cfg.latent_channels * plane));
    std::memcpy(dmoments.data() + cfg.latent_channels * plane, dlogvar.data(),
                sizeof(float) * static_cast<size_t>(cfg.latent_channels * plane));

    Tensor dr3e = enc_moments.backward(st.er3_out, dmoments);
    Tensor dd2 = res_backward(enc_res3_a, enc_res3_b, st.er3, dr3e);
    Tensor dr2e = enc_down2.backward(st.er2_out, dd2);
    Tensor dd1 = res_backward(enc_res2_a, enc_res2_b, st.er2, dr2e);
    Tensor dr1e = enc_down1.backward(st.er1_out, dd1);
    Tensor dh0 = res_backward(enc_res1_a, enc_res1_b, st.er1, dr1e);
    enc_in.backward(st.x, dh0);

    opt.step(lr);
    return {st.loss, st.recon_l1, st.kl};
}

namespace {

Tensor random_patch(const Tensor& vol, int64_t patch, Rng& rng) {
    const int64_t px = std::min<int64_t>(patch, vol.dim(0));
    const int64_t py = std::min<int64_t>(patch, vol.dim(1));
    const int64_t pz = std::min<int64_t>(patch, vol.dim(2));
    const int64_t ox =
        static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(vol.dim(0) - px + 1)));
    const int64_t oy =
        static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(vol.dim(1) - py + 1)));
    const int64_t oz =
        static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(vol.dim(2) - pz + 1)));
    Tensor out({px, py, pz});
    const float* p = vol.data();
    float* q = out.data();
    for (int64_t i = 0; i < px; i++)
        for (int64_t j = 0; j < py; j++)
            std::memcpy(q + (i * py + j) * pz,
                        p + ((ox + i) * vol.dim(1) + oy + j) * vol.dim(2) + oz,
                        sizeof(float) * static_cast<size_t>(pz));
    return out;
}

}  // namespace

VaeTrainResult train_autoencoder(Autoencoder& model, const std::vector<Volume3D>& corpus,
                                 const VaeTrainOptions& opts) {
    if (corpus.empty()) throw ValidationError("train_autoencoder: empty corpus");
    std::vector<nn::Param*> params;
    model.collect(params);
    nn::Adam opt(params, opts.lr);
    Rng rng = Rng(opts.seed).split("vae_train");

    VaeTrainResult res;
    bool first = true;
    int64_t step = 0;
    for (size_t phase = 0; phase < opts.phases.size(); phase++) {
        const TrainPhase& ph = opts.phases[phase];
        for (int epoch = 0; epoch < ph.epochs; epoch++) {
            std::vector<size_t> order(corpus.size());
            for (size_t i = 0; i < order.size(); i++) order[i] = i;
            rng.shuffle(order.begin(), order.end());
            double sum = 0.0;
            for (size_t idx : order) {
                Tensor patch = random_patch(corpus[idx].voxels, ph.patch, rng);
                Autoencoder::TrainStep ts;
                try {
                    ts = model.train_step(patch, opt, opts.lr, rng);
                } catch (const ValidationError&) {
                    throw ValidationError(strformat(
                        "train_autoencoder: non-finite loss at phase %zu epoch %d step %lld",
                        phase + 1, epoch + 1, static_cast<long long>(step)));
                }
                sum += ts.loss;
                step++;
            }
            const double mean_loss = sum / static_cast<double>(corpus.size());
            if (first) {
                res.first_epoch_loss = mean_loss;
                first = false;
            }
            res.final_epoch_loss = mean_loss;
            if (opts.on_epoch) opts.on_epoch(static_cast<int>(phase + 1), epoch + 1, mean_loss);
        }
    }
    res.latent_scale = compute_latent_scale(model, corpus);
    return res;
}

float compute_latent_scale(const Autoencoder& model, const std::vector<Volume3D>& corpus) {
    double s = 0.0, s2 = 0.0;
    int64_t n = 0;
    for (const auto& vol : corpus) {
        LatentGrid z = model.encode(vol);
        const float* p = z.values.data();
        for (int64_t i = 0; i < z.values.numel(); i++) {
            s += p[i];
            s2 += double(p[i]) * p[i];
        }
        n += z.values.numel();
    }
    const double mean = s / static_cast<double>(n);
    const double var = s2 / static_cast<double>(n) - mean * mean;
    const double std = std::sqrt(std::max(var, 1e-12));
    return static_cast<float>(1.0 / std);
}

double psnr(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "psnr");
    const float* pa = a.data();
    const float* pb = b.data();
    double mse = 0.0;
    for (int64_t i = 0; i < a.numel(); i++) {
        const double d = double(pa[i]) - double(pb[i]);
        mse += d * d;
    }
    mse /= static_cast<double>(a.numel());
    if (mse <= 0.0) return 1e9;
    return -10.0 * std::log10(mse);
}

}  // namespace text2ct
