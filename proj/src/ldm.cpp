#include "text2ct/ldm.hpp"

#include <cmath>
#include <deque>

namespace text2ct {

void GuidanceConfig::validate() const {
    if (scale < 0.0f) throw ConfigError("guidance: scale must be >= 0");
    if (p_drop < 0.0f || p_drop > 1.0f) throw ConfigError("guidance: p_drop must be in [0,1]");
}

namespace {

double mse(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mse");
    const float* pa = a.data();
    const float* pb = b.data();
    double s = 0.0;
    for (int64_t i = 0; i < a.numel(); i++) {
        const double d = double(pa[i]) - double(pb[i]);
        s += d * d;
    }
    return s / static_cast<double>(a.numel());
}

}  // namespace

LdmTrainResult train_ldm(UNet3D& unet, TextEncoder& encoder,
                         const std::vector<LdmTrainItem>& corpus,
                         const DiffusionSchedule& sched, const GuidanceConfig& guidance,
                         const LdmHyper& hyper) {
    if (corpus.empty()) throw ValidationError("train_ldm: empty corpus");
    guidance.validate();
    if (unet.cfg.context_dim != encoder.config().dim)
        throw ConfigError("train_ldm: unet context width != text encoder dim");

    std::vector<nn::Param*> params;
    unet.collect(params);
    encoder.collect(params);
    nn::Adam opt(params, hyper.lr);
    Rng rng = Rng(hyper.seed).split("ldm_train");

    LdmTrainResult res;
    std::deque<double> window;
    double window_sum = 0.0;
    bool have_initial = false;
    double initial = 0.0;

    for (int64_t step = 0; step < hyper.max_steps; step++) {
        const float lr = nn::poly_lr(hyper.lr, step, hyper.max_steps, hyper.lr_power);
        opt.zero_grad();
        double batch_loss = 0.0;
        for (int b = 0; b < hyper.batch; b++) {
            const size_t idx = rng.uniform_int(corpus.size());
            const LdmTrainItem& item = corpus[idx];
            const int t = 1 + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(sched.timesteps)));
            Tensor eps = Tensor::randn(item.latent.dims(), rng);
            NoisyLatent zt = add_noise(item.latent, t, eps, sched);
            VelocityTarget target = velocity_target(item.latent, eps, t, sched);

            const bool drop = rng.uniform() < guidance.p_drop;
            std::string rendered;
            TextEmbedding ctx;
            if (drop) {
                ctx = encoder.null_condition();
            } else {
                PromptBundle bundle = sample_prompt(item.report, item.aug, rng.next_u64(),
                                                    hyper.p_aug);
                rendered = bundle.rendered;
                ctx = encoder.encode(bundle);
            }

            UNet3D::Cache cache;
            Tensor pred = unet.forward(zt.z_t, t, ctx, &cache, sched.timesteps);
            const double loss = mse(pred, target.v);
            batch_loss += loss;
            if (!std::isfinite(loss))
                throw ValidationError(strformat(
                    "train_ldm: non-finite loss at step %lld (t=%d, item=%zu)",
                    static_cast<long long>(step), t, idx));

            Tensor dout(pred.dims());
            {
                const float* pp = pred.data();
                const float* tv = target.v.data();
                float* d = dout.data();
                const float k = 2.0f / (static_cast<float>(pred.numel()) * hyper.batch);
                for (int64_t i = 0; i < pred.numel(); i++) d[i] = k * (pp[i] - tv[i]);
            }
            Tensor dctx = unet.backward(cache, dout);
            if (!drop) encoder.backward_text(rendered, dctx);
        }
        batch_loss /= hyper.batch;
        opt.step(lr);

        window.push_back(batch_loss);
        window_sum += batch_loss;
        if (static_cast<int>(window.size()) > hyper.avg_window) {
            window_sum -= window.front();
            window.pop_front();
        }
        const double wmean = window_sum / static_cast<double>(window.size());
        if (!have_initial && static_cast<int>(window.size()) == hyper.avg_window) {
            initial = wmean;
            res.initial_loss = initial;
            have_initial = true;
        }
        res.final_loss = wmean;
        res.steps = step + 1;
        if (hyper.on_log && (step % 50 == 0 || step + 1 == hyper.max_steps))
            hyper.on_log(step, wmean, lr);
        if (have_initial && hyper.stop_loss_ratio > 0.0 && wmean < hyper.stop_loss_ratio * initial)
            break;
    }
    if (!have_initial) res.initial_loss = res.final_loss;
    return res;
}

double ldm_loss_probe(UNet3D& unet, TextEncoder& encoder, const LdmTrainItem& item,
                      const DiffusionSchedule& sched, int t, const Tensor& eps,
                      uint64_t prompt_seed) {
    NoisyLatent zt = add_noise(item.latent, t, eps, sched);
    VelocityTarget target = velocity_target(item.latent, eps, t, sched);
    PromptBundle bundle = sample_prompt(item.report, item.aug, prompt_seed, 0.5);
    TextEmbedding ctx = encoder.encode(bundle);
    Tensor pred = unet.forward(zt.z_t, t, ctx, nullptr, sched.timesteps);
    return mse(pred, target.v);
}

Tensor cfg_combine(const Tensor& v_uncond, const Tensor& v_cond, float w) {
    if (w < 0.0f) throw ConfigError("cfg_combine: scale must be >= 0");
    check_same_shape(v_uncond, v_cond, "cfg_combine");
    Tensor out(v_cond.dims());
    const float* u = v_uncond.data();
    const float* c = v_cond.data();
    float* o = out.data();
    const float a = 1.0f - w;
    for (int64_t i = 0; i < out.numel(); i++) o[i] = a * u[i] + w * c[i];
    return out;
}

Tensor sample_latent(const UNet3D& unet, const TextEmbedding& cond, const TextEmbedding& uncond,
                     const DiffusionSchedule& sched, const SampleOptions& opts,
                     const std::vector<int64_t>& latent_dims) {
    if (opts.cfg_scale < 0.0f) throw ConfigError("sample: cfg scale must be >= 0");
    if (opts.steps < 1 || opts.steps > sched.timesteps)
        throw ConfigError("sample: steps must be in 1..timesteps");

    Rng rng = Rng(opts.seed).split("sample");
    Tensor z = Tensor::randn(latent_dims, rng);

    // Descending timestep grid from T; final update lands on t = 0.
    std::vector<int> ts;
    for (int i = 0; i < opts.steps; i++) {
        int t = static_cast<int>(std::llround(
            sched.timesteps - static_cast<double>(i) * sched.timesteps / opts.steps));
        t = std::max(1, std::min(sched.timesteps, t));
        if (ts.empty() || t < ts.back()) ts.push_back(t);
    }

    for (size_t i = 0; i < ts.size(); i++) {
        const int t = ts[i];
        const int t_next = i + 1 < ts.size() ? ts[i + 1] : 0;
        Tensor guided;
        if (opts.cfg_scale == 1.0f) {
            guided = unet.forward(z, t, cond, nullptr, sched.timesteps);
        } else if (opts.cfg_scale == 0.0f) {
            guided = unet.forward(z, t, uncond, nullptr, sched.timesteps);
        } else {
            Tensor v_c = unet.forward(z, t, cond, nullptr, sched.timesteps);
            Tensor v_u = unet.forward(z, t, uncond, nullptr, sched.timesteps);
            guided = cfg_combine(v_u, v_c, opts.cfg_scale);
        }
        Tensor z0 = recover_z0(z, guided, t, sched);
        Tensor eps = recover_eps(z, guided, t, sched);
        const float an = static_cast<float>(sched.alpha(t_next));
        const float sn = static_cast<float>(sched.sigma(t_next));
        float* zp = z.data();
        const float* z0p = z0.data();
        const float* ep = eps.data();
        for (int64_t j = 0; j < z.numel(); j++) zp[j] = an * z0p[j] + sn * ep[j];
    }
    if (!all_finite(z)) throw ValidationError("sample: non-finite output latent");
    return z;
}

Tensor sample(const UNet3D& unet, const TextEncoder& encoder, const PromptBundle& prompt,
              const DiffusionSchedule& sched, const SampleOptions& opts,
              const std::vector<int64_t>& latent_dims) {
    TextEmbedding cond = encoder.encode(prompt);
    TextEmbedding uncond = encoder.null_condition();
    return sample_latent(unet, cond, uncond, sched, opts, latent_dims);
}

void save_ldm_checkpoint(const UNet3D& unet, const TextEncoder& encoder,
                         const DiffusionSchedule& sched,
                         const std::map<std::string, std::string>& extra_meta,
                         const std::string& path) {
    Checkpoint ck = unet.to_checkpoint();
    ck.kind = "ldm";
    ck.tensors["text_encoder.embed.table"] =
        const_cast<TextEncoder&>(encoder).embedding().table.w.clone();
    ck.meta["unet_config"] = unet.cfg.canonical();
    ck.meta["text_encoder_config"] = encoder.config().canonical();
    ck.meta["schedule"] = sched.canonical();
    ck.meta["schedule_T"] = strformat("%d", sched.timesteps);
    ck.meta["schedule_beta_start"] = strformat("%.12g", sched.betas.front());
    ck.meta["schedule_beta_end"] = strformat("%.12g", sched.betas.back());
    ck.meta["text_encoder_fingerprint"] = hex64(encoder.fingerprint());
    for (const auto& [k, v] : extra_meta) ck.meta[k] = v;
    ck.save(path);
}

LdmBundle load_ldm_checkpoint(const std::string& path) {
    Checkpoint ck = Checkpoint::load(path);
    if (ck.kind != "ldm") throw ConfigError("checkpoint kind is not ldm");

    LdmBundle bundle;
    Checkpoint unet_ck = ck;
    unet_ck.kind = "unet";
    unet_ck.meta["config"] = ck.meta_or("unet_config", "");
    bundle.unet = UNet3D::from_checkpoint(unet_ck);

    TextEncoderConfig tc;
    if (sscanf(ck.meta_or("text_encoder_config", "").c_str(), "dim=%d;max_tokens=%d;vocab=%d",
               &tc.dim, &tc.max_tokens, &tc.vocab) != 3)
        throw ConfigError("ldm checkpoint: unparseable text encoder config");
    bundle.encoder = TextEncoder(tc, 0);
    const Tensor& table = ck.tensor("text_encoder.embed.table");
    if (!table.same_shape(bundle.encoder.embedding().table.w))
        throw ConfigError("ldm checkpoint: text encoder table shape mismatch");
    bundle.encoder.embedding().table.w = table.clone();

    int T = 0;
    double b0 = 0.0, b1 = 0.0;
    if (sscanf(ck.meta_or("schedule_T", "").c_str(), "%d", &T) != 1 ||
        sscanf(ck.meta_or("schedule_beta_start", "").c_str(), "%lf", &b0) != 1 ||
        sscanf(ck.meta_or("schedule_beta_end", "").c_str(), "%lf", &b1) != 1)
        throw ConfigError("ldm checkpoint: missing schedule parameters");
    bundle.sched = make_schedule(T, b0, b1);

    const std::string fp = ck.meta_or("text_encoder_fingerprint", "");
    if (!fp.empty() && fp != hex64(bundle.encoder.fingerprint()))
        throw ConfigError("ldm checkpoint: text encoder fingerprint mismatch");
    bundle.meta = ck.meta;
    return bundle;
}

}  // namespace text2ct
