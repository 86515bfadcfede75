#include "text2ct/align.hpp"

#include <cctype>
#include <cmath>

namespace text2ct {

std::string AlignConfig::canonical() const {
    return strformat("embed_dim=%d;input_size=%d;vocab=%d", embed_dim, input_size, vocab);
}

AlignModel::AlignModel(const AlignConfig& cfg_, uint64_t init_seed) : cfg(cfg_) {
    Rng rng = Rng(init_seed).split("align");
    c1.init("align.c1", 1, 16, 3, 2, rng);
    c2.init("align.c2", 16, 32, 3, 2, rng);
    img_proj.init("align.img_proj", 32, cfg.embed_dim, rng);
    txt_emb.init("align.txt_emb", cfg.vocab, cfg.embed_dim, rng);
    txt_proj.init("align.txt_proj", cfg.embed_dim, cfg.embed_dim, rng);
}

std::vector<int> AlignModel::tokenize(const std::string& text) const {
    std::vector<int> ids;
    std::string word;
    auto flush = [&] {
        if (word.empty()) return;
        ids.push_back(static_cast<int>(fnv1a64(word) % static_cast<uint64_t>(cfg.vocab)));
        word.clear();
    };
    for (char c : text) {
        if (std::isalnum(static_cast<unsigned char>(c)))
            word += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        else
            flush();
    }
    flush();
    return ids;
}

namespace {

struct SliceCache {
    Tensor x, a1, s1, a2, s2, pooled;  // pooled: (1, 32)
};

Tensor slice_trunk(const AlignModel& m, const Tensor& slice2d, SliceCache* cache) {
    Tensor resized = resize_bilinear_2d(slice2d, m.cfg.input_size, m.cfg.input_size);
    Tensor x = resized.reshaped({1, m.cfg.input_size, m.cfg.input_size, 1});
    Tensor a1 = m.c1.forward(x);
    Tensor s1 = nn::act_forward(nn::Act::SiLU, a1);
    Tensor a2 = m.c2.forward(s1);
    Tensor s2 = nn::act_forward(nn::Act::SiLU, a2);
    Tensor pooled({1, 32});
    const int64_t plane = s2.dim(1) * s2.dim(2) * s2.dim(3);
    for (int c = 0; c < 32; c++) {
        double s = 0.0;
        const float* p = s2.data() + c * plane;
        for (int64_t i = 0; i < plane; i++) s += p[i];
        pooled.at(c) = static_cast<float>(s / plane);
    }
    if (cache) {
        cache->x = x;
        cache->a1 = a1;
        cache->s1 = s1;
        cache->a2 = a2;
        cache->s2 = s2;
        cache->pooled = pooled;
    }
    return m.img_proj.forward(pooled).reshaped({m.cfg.embed_dim});
}

void slice_trunk_backward(AlignModel& m, const SliceCache& cache, const Tensor& d_embed) {
    Tensor dpooled = m.img_proj.backward(cache.pooled, d_embed.reshaped({1, m.cfg.embed_dim}));
    Tensor ds2(cache.s2.dims());
    const int64_t plane = cache.s2.dim(1) * cache.s2.dim(2) * cache.s2.dim(3);
    for (int c = 0; c < 32; c++) {
        const float g = dpooled.at(c) / static_cast<float>(plane);
        float* p = ds2.data() + c * plane;
        for (int64_t i = 0; i < plane; i++) p[i] = g;
    }
    Tensor da2 = nn::act_backward(nn::Act::SiLU, cache.a2, ds2);
    Tensor ds1 = m.c2.backward(cache.s1, da2);
    Tensor da1 = nn::act_backward(nn::Act::SiLU, cache.a1, ds1);
    m.c1.backward(cache.x, da1);
}

Tensor normalize_vec(const Tensor& e, float* norm_out = nullptr) {
    Tensor u = e.clone();
    const float n = std::sqrt(std::max(dot(e, e), 1e-12f));
    scale(u, 1.0f / n);
    if (norm_out) *norm_out = n;
    return u;
}

// de = (du - u (u . du)) / |e|
Tensor normalize_backward(const Tensor& u, float norm, const Tensor& du) {
    Tensor de = du.clone();
    const float d = dot(u, du);
    axpy(-d, u, de);
    scale(de, 1.0f / norm);
    return de;
}

}  // namespace

Tensor AlignModel::embed_slice(const Tensor& slice2d) const {
    return slice_trunk(*this, slice2d, nullptr);
}

Tensor AlignModel::embed_text(const std::string& text) const {
    std::vector<int> ids = tokenize(text);
    if (ids.empty()) throw ValidationError("align: empty text");
    Tensor mean_emb = Tensor::zeros({1, cfg.embed_dim});
    const float* table = txt_emb.table.w.data();
    for (int id : ids)
        for (int j = 0; j < cfg.embed_dim; j++)
            mean_emb.at(j) += table[static_cast<int64_t>(id) * cfg.embed_dim + j];
    scale(mean_emb, 1.0f / static_cast<float>(ids.size()));
    return txt_proj.forward(mean_emb).reshaped({cfg.embed_dim});
}

void AlignModel::collect(std::vector<nn::Param*>& out) {
    c1.collect(out);
    c2.collect(out);
    img_proj.collect(out);
    txt_emb.collect(out);
    txt_proj.collect(out);
}

Checkpoint AlignModel::to_checkpoint() const {
    Checkpoint ck;
    ck.kind = "align";
    ck.meta["format_version"] = "1";
    ck.meta["config"] = cfg.canonical();
    std::vector<nn::Param*> ps;
    const_cast<AlignModel*>(this)->collect(ps);
    for (auto* p : ps) ck.tensors[p->name] = p->w.clone();
    return ck;
}

AlignModel AlignModel::from_checkpoint(const Checkpoint& ck) {
    if (ck.kind != "align") throw ConfigError("checkpoint kind is not align");
    AlignConfig cfg;
    if (sscanf(ck.meta_or("config", "").c_str(), "embed_dim=%d;input_size=%d;vocab=%d",
               &cfg.embed_dim, &cfg.input_size, &cfg.vocab) != 3)
        throw ConfigError("align checkpoint: unparseable config");
    AlignModel m(cfg, 0);
    std::vector<nn::Param*> ps;
    m.collect(ps);
    for (auto* p : ps) {
        const Tensor& t = ck.tensor(p->name);
        if (!t.same_shape(p->w)) throw ConfigError("align checkpoint: shape mismatch " + p->name);
        p->w = t.clone();
    }
    return m;
}

uint64_t AlignModel::fingerprint() const {
    std::vector<nn::Param*> ps;
    const_cast<AlignModel*>(this)->collect(ps);
    uint64_t h = fnv1a64(cfg.canonical());
    for (auto* p : ps) h = fnv1a64(p->w.data(), static_cast<size_t>(p->w.numel()) * 4, h);
    return h;
}

double train_align(AlignModel& model, const std::vector<GroundTruth>& corpus,
                   const std::vector<std::string>& texts, const AlignTrainOptions& opts) {
    if (corpus.size() != texts.size() || corpus.empty())
        throw ValidationError("train_align: corpus/texts must be nonempty and paired");
    std::vector<nn::Param*> params;
    model.collect(params);
    nn::Adam opt(params, opts.lr);
    Rng rng = Rng(opts.seed).split("align_train");
    const int B = std::min<int>(opts.batch, static_cast<int>(corpus.size()));
    const int K = opts.slices_per_volume;
    const float inv_tau = 1.0f / opts.temperature;

    double last_loss = 0.0;
    for (int step = 0; step < opts.steps; step++) {
        // pick B distinct volumes
        std::vector<size_t> pool(corpus.size());
        for (size_t i = 0; i < pool.size(); i++) pool[i] = i;
        rng.shuffle(pool.begin(), pool.end());
        pool.resize(static_cast<size_t>(B));

        opt.zero_grad();
        std::vector<std::vector<SliceCache>> caches(static_cast<size_t>(B));
        std::vector<Tensor> e_img(static_cast<size_t>(B)), u(static_cast<size_t>(B));
        std::vector<Tensor> t_mean(static_cast<size_t>(B)), v(static_cast<size_t>(B));
        std::vector<float> un(static_cast<size_t>(B)), vn(static_cast<size_t>(B));
        std::vector<std::vector<int>> tok(static_cast<size_t>(B));

        for (int i = 0; i < B; i++) {
            const GroundTruth& gt = corpus[pool[static_cast<size_t>(i)]];
            auto views = slice_views(gt.volume);
            Tensor sum = Tensor::zeros({model.cfg.embed_dim});
            caches[static_cast<size_t>(i)].resize(static_cast<size_t>(K));
            for (int k = 0; k < K; k++) {
                const auto& vs = views[rng.uniform_int(3)];
                const Tensor& sl = vs.slices[rng.uniform_int(vs.slices.size())];
                Tensor e = slice_trunk(model, sl, &caches[static_cast<size_t>(i)][static_cast<size_t>(k)]);
                axpy(1.0f, e, sum);
            }
            scale(sum, 1.0f / static_cast<float>(K));
            e_img[static_cast<size_t>(i)] = sum;
            u[static_cast<size_t>(i)] = normalize_vec(sum, &un[static_cast<size_t>(i)]);

            const std::string& text = texts[pool[static_cast<size_t>(i)]];
            tok[static_cast<size_t>(i)] = model.tokenize(text);
            Tensor mean_emb = Tensor::zeros({1, model.cfg.embed_dim});
            const float* table = model.txt_emb.table.w.data();
            for (int id : tok[static_cast<size_t>(i)])
                for (int j = 0; j < model.cfg.embed_dim; j++)
                    mean_emb.at(j) += table[static_cast<int64_t>(id) * model.cfg.embed_dim + j];
            scale(mean_emb, 1.0f / static_cast<float>(tok[static_cast<size_t>(i)].size()));
            t_mean[static_cast<size_t>(i)] = mean_emb;
            Tensor proj = model.txt_proj.forward(mean_emb).reshaped({model.cfg.embed_dim});
            v[static_cast<size_t>(i)] = normalize_vec(proj, &vn[static_cast<size_t>(i)]);
        }

        // logits and the symmetric InfoNCE
        std::vector<float> logits(static_cast<size_t>(B) * B);
        for (int i = 0; i < B; i++)
            for (int j = 0; j < B; j++)
                logits[static_cast<size_t>(i * B + j)] =
                    dot(u[static_cast<size_t>(i)], v[static_cast<size_t>(j)]) * inv_tau;
        auto softmax_rows = [&](bool by_row) {
            std::vector<float> p(logits.size());
            for (int a = 0; a < B; a++) {
                float mx = -1e30f;
                for (int b = 0; b < B; b++) {
                    const float l = by_row ? logits[static_cast<size_t>(a * B + b)]
                                           : logits[static_cast<size_t>(b * B + a)];
                    mx = std::max(mx, l);
                }
                float sum = 0.0f;
                for (int b = 0; b < B; b++) {
                    const size_t idx = by_row ? static_cast<size_t>(a * B + b)
                                              : static_cast<size_t>(b * B + a);
                    p[idx] = std::exp(logits[idx] - mx);
                    sum += p[idx];
                }
                for (int b = 0; b < B; b++) {
                    const size_t idx = by_row ? static_cast<size_t>(a * B + b)
                                              : static_cast<size_t>(b * B + a);
                    p[idx] /= sum;
                }
            }
            return p;
        };
        std::vector<float> P = softmax_rows(true), Q = softmax_rows(false);
        double loss = 0.0;
        for (int i = 0; i < B; i++)
            loss += -0.5 * (std::log(std::max(P[static_cast<size_t>(i * B + i)], 1e-12f)) +
                            std::log(std::max(Q[static_cast<size_t>(i * B + i)], 1e-12f)));
        loss /= B;
        last_loss = loss;

        // d logits
        std::vector<float> dl(logits.size());
        for (int i = 0; i < B; i++)
            for (int j = 0; j < B; j++)
                dl[static_cast<size_t>(i * B + j)] =
                    0.5f *
                    ((P[static_cast<size_t>(i * B + j)] - (i == j ? 1.0f : 0.0f)) +
                     (Q[static_cast<size_t>(i * B + j)] - (i == j ? 1.0f : 0.0f))) /
                    static_cast<float>(B);

        for (int i = 0; i < B; i++) {
            Tensor du = Tensor::zeros({model.cfg.embed_dim});
            for (int j = 0; j < B; j++)
                axpy(dl[static_cast<size_t>(i * B + j)] * inv_tau, v[static_cast<size_t>(j)], du);
            Tensor de = normalize_backward(u[static_cast<size_t>(i)], un[static_cast<size_t>(i)], du);
            scale(de, 1.0f / static_cast<float>(K));
            for (int k = 0; k < K; k++)
                slice_trunk_backward(model, caches[static_cast<size_t>(i)][static_cast<size_t>(k)], de);
        }
        for (int j = 0; j < B; j++) {
            Tensor dv = Tensor::zeros({model.cfg.embed_dim});
            for (int i = 0; i < B; i++)
                axpy(dl[static_cast<size_t>(i * B + j)] * inv_tau, u[static_cast<size_t>(i)], dv);
            Tensor dproj = normalize_backward(v[static_cast<size_t>(j)], vn[static_cast<size_t>(j)], dv);
            Tensor dmean = model.txt_proj.backward(t_mean[static_cast<size_t>(j)],
                                                   dproj.reshaped({1, model.cfg.embed_dim}));
            float* g = model.txt_emb.table.g.data();
            const float inv_len = 1.0f / static_cast<float>(tok[static_cast<size_t>(j)].size());
            for (int id : tok[static_cast<size_t>(j)])
                for (int col = 0; col < model.cfg.embed_dim; col++)
                    g[static_cast<int64_t>(id) * model.cfg.embed_dim + col] +=
                        dmean.at(col) * inv_len;
        }
        opt.step();
        if (opts.on_log && (step % 50 == 0 || step + 1 == opts.steps)) opts.on_log(step, loss);
    }
    return last_loss;
}

AlignResult alignment_score(const std::vector<Volume3D>& volumes,
                            const std::vector<std::string>& prompts, const AlignModel& model) {
    if (volumes.size() != prompts.size() || volumes.empty())
        throw ValidationError("alignment_score: unpaired inputs");
    AlignResult res;
    double* out[3] = {&res.axial, &res.sagittal, &res.coronal};
    std::vector<Tensor> text_u(volumes.size());
    for (size_t i = 0; i < prompts.size(); i++)
        text_u[i] = normalize_vec(model.embed_text(prompts[i]));

    for (int v = 0; v < 3; v++) {
        double total = 0.0;
        for (size_t i = 0; i < volumes.size(); i++) {
            auto views = slice_views(volumes[i]);
            const auto& set = views[static_cast<size_t>(v)];
            double s = 0.0;
            for (const auto& sl : set.slices) {
                Tensor iu = normalize_vec(model.embed_slice(sl));
                s += dot(iu, text_u[i]);
            }
            total += 100.0 * s / static_cast<double>(set.slices.size());
        }
        *out[v] = total / static_cast<double>(volumes.size());
    }
    res.avg = (res.axial + res.sagittal + res.coronal) / 3.0;
    return res;
}

}  // namespace text2ct
