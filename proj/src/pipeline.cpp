#include "text2ct/pipeline.hpp"

#include <unistd.h>

#include <chrono>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace text2ct {

std::unique_ptr<Augmenter> augmenter_from_config(const ExperimentConfig& cfg, uint64_t seed) {
    if (cfg.offline || cfg.augmenter == "template")
        return std::make_unique<TemplateAugmenter>(seed);
    if (cfg.augmenter == "identity") return std::make_unique<IdentityAugmenter>();
    if (cfg.augmenter == "http")
        return std::make_unique<HttpAugmenter>(cfg.http_host, cfg.http_port, "/augment",
                                               cfg.http_timeout_ms, cfg.http_retries);
    throw ConfigError("unknown augmenter: " + cfg.augmenter);
}

namespace {

constexpr const char* kStageMarker = "MANIFEST.json";

double now_seconds() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw IOError("cannot write " + path);
    out << text;
}

std::string read_text(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw MissingArtifactError("cannot read " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

nlohmann::json lesion_json(const LesionAnnotation& l) {
    nlohmann::json j;
    j["side"] = side_name(l.side);
    j["size"] = size_name(l.size);
    j["centroid_vox"] = l.centroid_vox;
    return j;
}

}  // namespace

DirLock::DirLock(const std::string& outdir) : path_(outdir + "/.lock") {
    fs::create_directories(outdir);
    std::error_code ec;
    // create-exclusive via noreplace open
    if (fs::exists(path_))
        throw IOError("output directory is locked by another run: " + path_ +
                      " (remove the lock file if stale)");
    std::ofstream lk(path_);
    if (!lk) throw IOError("cannot create lock file " + path_);
    lk << "pid " << getpid() << "\n";
    held_ = true;
}

DirLock::~DirLock() {
    if (held_) {
        std::error_code ec;
        fs::remove(path_, ec);
    }
}

Pipeline::Pipeline(ExperimentConfig cfg, bool force) : cfg_(std::move(cfg)), force_(force) {
    if (const char* env = std::getenv("TEXT2CT_OUTDIR"); env && *env) cfg_.outdir = env;
    cfg_.validate_or_throw();
}

std::string Pipeline::stage_dir(const std::string& stage, const std::string& fp) const {
    return cfg_.outdir + "/" + stage + "/" + fp;
}

bool Pipeline::stage_cached(const std::string& dir) const {
    return !force_ && fs::exists(dir + "/" + kStageMarker);
}

void Pipeline::finish_stage(StageResult& res, uint64_t seed, double wall_s,
                            const std::map<std::string, std::string>& inputs) {
    nlohmann::ordered_json j;
    j["stage"] = res.stage;
    j["fingerprint"] = res.fingerprint;
    j["inputs"] = inputs;
    j["artifacts"] = res.artifacts;
    j["wall_clock_s"] = wall_s;
    j["seed"] = seed;
    write_text(res.dir + "/" + kStageMarker, j.dump(2) + "\n");
    // append-only run log
    std::ofstream log(cfg_.outdir + "/manifest.jsonl", std::ios::app);
    log << j.dump() << "\n";
}

std::string Pipeline::phantoms_fp() const {
    return hex64(fnv1a64(cfg_.section_canonical("phantoms") +
                         strformat("seed=%llu", static_cast<unsigned long long>(cfg_.seed))));
}

std::string Pipeline::vae_fp() const {
    return hex64(fnv1a64(cfg_.section_canonical("vae") + phantoms_fp()));
}

std::string Pipeline::latents_fp() const { return hex64(fnv1a64("latents:" + vae_fp())); }

std::string Pipeline::ldm_fp() const {
    return hex64(fnv1a64(cfg_.section_canonical("diffusion") + cfg_.section_canonical("prompt") +
                         latents_fp()));
}

std::string Pipeline::generate_fp(const std::string& prompt, const GenerateOverrides& ov) const {
    std::string extra = strformat(
        "cfg=%s;steps=%d;seed=%llu;prompt=",
        format_double_shortest(ov.cfg_scale.value_or(cfg_.cfg_scale)).c_str(),
        ov.steps.value_or(cfg_.sample_steps),
        static_cast<unsigned long long>(ov.seed.value_or(cfg_.seed)));
    return hex64(fnv1a64(cfg_.section_canonical("sampling") + cfg_.section_canonical("tsp") +
                         extra + prompt + ldm_fp()));
}

std::string Pipeline::evaluate_fp() const {
    return hex64(fnv1a64(cfg_.section_canonical("eval") + cfg_.section_canonical("sampling") +
                         cfg_.section_canonical("tsp") + ldm_fp() + phantoms_fp()));
}

StageResult Pipeline::make_phantoms() {
    DirLock lock(cfg_.outdir);
    StageResult res{"make-phantoms", phantoms_fp(), stage_dir("phantoms", phantoms_fp())};
    if (stage_cached(res.dir)) {
        res.cached = true;
        log_info("make-phantoms: cache hit at %s", res.dir.c_str());
        return res;
    }
    const double t0 = now_seconds();
    fs::remove_all(res.dir);
    fs::create_directories(res.dir);

    Rng rng(cfg_.seed);
    auto train = make_corpus(cfg_.phantom_count, cfg_.shape, rng.split("phantoms_train").next_u64(),
                             cfg_.omission_rate);
    auto eval = make_corpus(cfg_.eval_count, cfg_.shape, rng.split("phantoms_eval").next_u64(),
                            cfg_.omission_rate);

    std::ofstream manifest(res.dir + "/phantoms.jsonl");
    auto dump_set = [&](const std::vector<GroundTruth>& set, const char* split) {
        for (size_t i = 0; i < set.size(); i++) {
            const std::string name = strformat("%s_%04zu.raw", split, i);
            const std::string path = res.dir + "/" + name;
            save_volume(set[i].volume, path);
            nlohmann::ordered_json j;
            j["index"] = i;
            j["split"] = split;
            j["volume"] = name;
            j["organs"] = set[i].organ_list.keys();
            nlohmann::json sections;
            if (set[i].report.demographics) sections["demographics"] = *set[i].report.demographics;
            if (set[i].report.findings) sections["findings"] = *set[i].report.findings;
            if (set[i].report.impressions) sections["impressions"] = *set[i].report.impressions;
            j["sections"] = sections;
            nlohmann::json lesions = nlohmann::json::array();
            for (const auto& l : set[i].lesions) lesions.push_back(lesion_json(l));
            j["lesions"] = lesions;
            manifest << j.dump() << "\n";
            res.artifacts.push_back(name);
        }
    };
    dump_set(train, "train");
    dump_set(eval, "eval");
    manifest.close();
    res.artifacts.push_back("phantoms.jsonl");

    finish_stage(res, cfg_.seed, now_seconds() - t0, {});
    log_info("make-phantoms: wrote %d train + %d eval phantoms to %s", cfg_.phantom_count,
             cfg_.eval_count, res.dir.c_str());
    return res;
}

std::vector<PhantomRecord> Pipeline::load_phantoms() const {
    const std::string dir = stage_dir("phantoms", phantoms_fp());
    if (!fs::exists(dir + "/" + kStageMarker))
        throw MissingArtifactError(
            "phantom corpus missing or stale for this config; run `text2ct make-phantoms`");
    std::ifstream manifest(dir + "/phantoms.jsonl");
    std::vector<PhantomRecord> out;
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        PhantomRecord rec;
        rec.split = j.at("split").get<std::string>();
        rec.volume_path = dir + "/" + j.at("volume").get<std::string>();
        rec.gt.volume = volume_from_unit_scan(load_volume(rec.volume_path));
        rec.gt.organ_list = OrganList::from_keys(j.at("organs").get<std::vector<std::string>>());
        const auto& sections = j.at("sections");
        if (sections.contains("demographics"))
            rec.gt.report.demographics = sections["demographics"].get<std::string>();
        if (sections.contains("findings"))
            rec.gt.report.findings = sections["findings"].get<std::string>();
        if (sections.contains("impressions"))
            rec.gt.report.impressions = sections["impressions"].get<std::string>();
        for (const auto& l : j.at("lesions")) {
            LesionAnnotation ann;
            ann.side = l.at("side").get<std::string>() == "left" ? LesionSide::Left
                                                                 : LesionSide::Right;
            ann.size = l.at("size").get<std::string>() == "small" ? LesionSize::Small
                                                                  : LesionSize::Large;
            auto c = l.at("centroid_vox").get<std::vector<int64_t>>();
            ann.centroid_vox = {c[0], c[1], c[2]};
            rec.gt.lesions.push_back(ann);
        }
        out.push_back(std::move(rec));
    }
    if (out.empty()) throw MissingArtifactError("phantom manifest is empty; rerun make-phantoms");
    return out;
}

StageResult Pipeline::train_vae() {
    DirLock lock(cfg_.outdir);
    StageResult res{"train-vae", vae_fp(), stage_dir("vae", vae_fp())};
    if (stage_cached(res.dir)) {
        res.cached = true;
        log_info("train-vae: cache hit at %s", res.dir.c_str());
        return res;
    }
    const double t0 = now_seconds();
    fs::remove_all(res.dir);
    fs::create_directories(res.dir);

    auto records = load_phantoms();
    std::vector<Volume3D> train;
    for (auto& r : records)
        if (r.split == "train") train.push_back(r.gt.volume);

    AutoencoderConfig acfg;
    acfg.base_width = cfg_.vae_base_width;
    acfg.latent_channels = cfg_.vae_latent_channels;
    acfg.kl_weight = static_cast<float>(cfg_.vae_kl_weight);
    Autoencoder model(acfg, Rng(cfg_.seed).split("vae_init").next_u64());

    VaeTrainOptions opts;
    opts.phases = {{cfg_.vae_phase1_patch, cfg_.vae_phase1_epochs},
                   {cfg_.vae_phase2_patch, cfg_.vae_phase2_epochs}};
    opts.lr = static_cast<float>(cfg_.vae_lr);
    opts.seed = Rng(cfg_.seed).split("vae_train").next_u64();
    opts.on_epoch = [](int phase, int epoch, double loss) {
        log_info("train-vae: phase %d epoch %d loss %.6f", phase, epoch, loss);
    };
    VaeTrainResult tr = train_autoencoder(model, train, opts);

    Checkpoint ck = model.to_checkpoint();
    ck.meta["latent_scale"] = format_double_shortest(tr.latent_scale);
    ck.meta["phantoms_fp"] = phantoms_fp();
    ck.meta["first_epoch_loss"] = format_double_shortest(tr.first_epoch_loss);
    ck.meta["final_epoch_loss"] = format_double_shortest(tr.final_epoch_loss);
    ck.save(res.dir + "/vae.ckpt");
    res.artifacts.push_back("vae.ckpt");
    finish_stage(res, cfg_.seed, now_seconds() - t0, {{"phantoms", phantoms_fp()}});
    return res;
}

Autoencoder Pipeline::load_vae(float* latent_scale) const {
    const std::string path = stage_dir("vae", vae_fp()) + "/vae.ckpt";
    if (!fs::exists(path))
        throw MissingArtifactError(
            "autoencoder checkpoint missing or stale for this config; run `text2ct train-vae`");
    Checkpoint ck = Checkpoint::load(path);
    if (ck.meta_or("phantoms_fp", "") != phantoms_fp())
        throw MissingArtifactError(
            "autoencoder checkpoint was trained on different phantoms; rerun `text2ct "
            "train-vae`");
    AutoencoderConfig expect;
    expect.base_width = cfg_.vae_base_width;
    expect.latent_channels = cfg_.vae_latent_channels;
    expect.kl_weight = static_cast<float>(cfg_.vae_kl_weight);
    if (ck.meta_or("config", "") != expect.canonical())
        throw ConfigError("autoencoder checkpoint config mismatch; refusing to load");
    if (latent_scale) {
        *latent_scale = 1.0f;
        sscanf(ck.meta_or("latent_scale", "1").c_str(), "%f", latent_scale);
    }
    return Autoencoder::from_checkpoint(ck);
}

StageResult Pipeline::cache_latents() {
    DirLock lock(cfg_.outdir);
    StageResult res{"cache-latents", latents_fp(), stage_dir("latents", latents_fp())};
    if (stage_cached(res.dir)) {
        res.cached = true;
        log_info("cache-latents: cache hit at %s", res.dir.c_str());
        return res;
    }
    const double t0 = now_seconds();
    fs::remove_all(res.dir);
    fs::create_directories(res.dir);

    float scale = 1.0f;
    Autoencoder vae = load_vae(&scale);
    auto records = load_phantoms();

    Checkpoint ck;
    ck.kind = "latents";
    ck.meta["latent_scale"] = format_double_shortest(scale);
    ck.meta["vae_fp"] = vae_fp();
    int n = 0;
    for (auto& r : records) {
        if (r.split != "train") continue;
        LatentGrid z = vae.encode(r.gt.volume);
        Tensor scaled = z.values.clone();
        text2ct::scale(scaled, scale);
        ck.tensors[strformat("latent/%04d", n)] = std::move(scaled);
        n++;
    }
    ck.meta["count"] = strformat("%d", n);
    ck.save(res.dir + "/latents.ckpt");
    res.artifacts.push_back("latents.ckpt");
    finish_stage(res, cfg_.seed, now_seconds() - t0, {{"vae", vae_fp()}});
    log_info("cache-latents: stored %d scaled latents", n);
    return res;
}

StageResult Pipeline::train_ldm() {
    DirLock lock(cfg_.outdir);
    StageResult res{"train-ldm", ldm_fp(), stage_dir("ldm", ldm_fp())};
    if (stage_cached(res.dir)) {
        res.cached = true;
        log_info("train-ldm: cache hit at %s", res.dir.c_str());
        return res;
    }
    const double t0 = now_seconds();
    fs::remove_all(res.dir);
    fs::create_directories(res.dir);

    const std::string lat_path = stage_dir("latents", latents_fp()) + "/latents.ckpt";
    if (!fs::exists(lat_path))
        throw MissingArtifactError("latent cache missing; run `text2ct cache-latents`");
    Checkpoint lat = Checkpoint::load(lat_path);
    if (lat.meta_or("vae_fp", "") != vae_fp())
        throw MissingArtifactError("latent cache is stale; rerun `text2ct cache-latents`");

    auto records = load_phantoms();
    std::vector<PhantomRecord> train;
    for (auto& r : records)
        if (r.split == "train") train.push_back(std::move(r));
    int count = 0;
    sscanf(lat.meta_or("count", "0").c_str(), "%d", &count);
    if (count != static_cast<int>(train.size()))
        throw MissingArtifactError("latent cache count mismatch; rerun `text2ct cache-latents`");

    Rng rng(cfg_.seed);
    auto augmenter = augmenter_from_config(cfg_, rng.split("augment").next_u64());
    std::vector<LdmTrainItem> corpus;
    for (size_t i = 0; i < train.size(); i++) {
        LdmTrainItem item;
        item.latent = lat.tensor(strformat("latent/%04zu", i)).clone();
        item.report = train[i].gt.report;
        item.aug = augment_report(item.report, train[i].gt.organ_list, *augmenter);
        corpus.push_back(std::move(item));
    }

    TextEncoderConfig tcfg;
    tcfg.dim = cfg_.encoder_dim;
    tcfg.max_tokens = cfg_.max_tokens;
    tcfg.vocab = cfg_.vocab;
    TextEncoder encoder(tcfg, rng.split("text_encoder").next_u64());

    UNetConfig ucfg;
    ucfg.in_channels = cfg_.vae_latent_channels;
    ucfg.base_width = cfg_.unet_base_width;
    ucfg.context_dim = cfg_.unet_context_dim;
    ucfg.time_dim = cfg_.unet_time_dim;
    ucfg.heads = cfg_.heads;
    ucfg.groups = cfg_.groups;
    UNet3D unet(ucfg, rng.split("unet_init").next_u64());

    DiffusionSchedule sched = make_schedule(cfg_.timesteps, cfg_.beta_start, cfg_.beta_end,
                                            beta_spec_from_name(cfg_.beta_schedule));
    GuidanceConfig guidance;
    guidance.scale = static_cast<float>(cfg_.cfg_scale);
    guidance.p_drop = static_cast<float>(cfg_.p_drop);

    LdmHyper hyper;
    hyper.lr = static_cast<float>(cfg_.ldm_lr);
    hyper.lr_power = static_cast<float>(cfg_.lr_power);
    hyper.max_steps = cfg_.train_steps;
    hyper.batch = cfg_.batch;
    hyper.p_aug = cfg_.p_aug;
    hyper.stop_loss_ratio = cfg_.stop_loss_ratio;
    hyper.seed = rng.split("ldm_train").next_u64();
    hyper.on_log = [](int64_t step, double loss, float lr) {
        log_info("train-ldm: step %lld loss %.6f lr %.2e", static_cast<long long>(step), loss,
                 lr);
    };
    LdmTrainResult tr = train_ldm(unet, encoder, corpus, sched, guidance, hyper);

    std::map<std::string, std::string> extra;
    extra["vae_fp"] = vae_fp();
    extra["latents_fp"] = latents_fp();
    extra["latent_scale"] = lat.meta_or("latent_scale", "1");
    extra["initial_loss"] = format_double_shortest(tr.initial_loss);
    extra["final_loss"] = format_double_shortest(tr.final_loss);
    extra["steps_run"] = strformat("%lld", static_cast<long long>(tr.steps));
    save_ldm_checkpoint(unet, encoder, sched, extra, res.dir + "/ldm.ckpt");
    res.artifacts.push_back("ldm.ckpt");
    finish_stage(res, cfg_.seed, now_seconds() - t0,
                 {{"latents", latents_fp()}, {"phantoms", phantoms_fp()}});
    log_info("train-ldm: %lld steps, loss %.5f -> %.5f", static_cast<long long>(tr.steps),
             tr.initial_loss, tr.final_loss);
    return res;
}

LdmBundle Pipeline::load_ldm() const {
    const std::string path = stage_dir("ldm", ldm_fp()) + "/ldm.ckpt";
    if (!fs::exists(path))
        throw MissingArtifactError(
            "diffusion checkpoint missing or stale for this config; run `text2ct train-ldm`");
    LdmBundle bundle = load_ldm_checkpoint(path);
    if (bundle.meta.count("vae_fp") && bundle.meta["vae_fp"] != vae_fp())
        throw MissingArtifactError(
            "diffusion checkpoint was trained against a different autoencoder; rerun `text2ct "
            "train-ldm`");
    return bundle;
}

namespace {

tsp::TSPlan tsp_plan_from_config(const ExperimentConfig& cfg, const tsp::SplitStage& stage) {
    tsp::TSPlan plan;
    plan.axis = cfg.tsp_axis;
    plan.num_segments = cfg.tsp_segments;
    plan.halo = tsp::halo_required(stage);
    plan.parallelism = cfg.tsp_parallelism == "workers" ? tsp::Parallelism::WorkerPool
                                                        : tsp::Parallelism::Sequential;
    return plan;
}

}  // namespace

StageResult Pipeline::generate(const std::string& prompt, const GenerateOverrides& ov) {
    if (prompt.empty()) throw ValidationError("generate: prompt must not be empty");
    DirLock lock(cfg_.outdir);
    StageResult res{"generate", generate_fp(prompt, ov), stage_dir("generate", generate_fp(prompt, ov))};
    if (stage_cached(res.dir)) {
        res.cached = true;
        log_info("generate: cache hit at %s", res.dir.c_str());
        return res;
    }
    const double t0 = now_seconds();
    fs::remove_all(res.dir);
    fs::create_directories(res.dir);

    float latent_scale = 1.0f;
    Autoencoder vae = load_vae(&latent_scale);
    LdmBundle ldm = load_ldm();

    const double cfg_scale = ov.cfg_scale.value_or(cfg_.cfg_scale);
    const int steps = ov.steps.value_or(cfg_.sample_steps);
    const uint64_t seed = ov.seed.value_or(cfg_.seed);
    if (cfg_scale < 0.0) throw ConfigError("generate: cfg scale must be >= 0");

    SampleOptions sopts;
    sopts.cfg_scale = static_cast<float>(cfg_scale);
    sopts.steps = steps;
    sopts.seed = Rng(seed).split("generate").next_u64();

    const std::vector<int64_t> latent_dims = {cfg_.vae_latent_channels, cfg_.shape[0] / 4,
                                              cfg_.shape[1] / 4, cfg_.shape[2] / 4};
    TextEmbedding cond = ldm.encoder.encode_text(prompt);
    TextEmbedding uncond = ldm.encoder.null_condition();
    Tensor z = sample_latent(ldm.unet, cond, uncond, ldm.sched, sopts, latent_dims);
    text2ct::scale(z, 1.0f / latent_scale);

    LatentGrid grid;
    grid.values = z;
    tsp::SplitStage stage = vae.decoder_stage();
    tsp::TSPlan plan = tsp_plan_from_config(cfg_, stage);
    Volume3D vol = vae.decode(grid, &plan);
    vol.spacing_mm = {1.0, 1.0, 1.0};

    save_volume(vol, res.dir + "/volume.raw");
    save_volume(vol, res.dir + "/volume.nii");
    nlohmann::ordered_json prov;
    prov["prompt"] = prompt;
    prov["cfg_scale"] = cfg_scale;
    prov["steps"] = steps;
    prov["seed"] = seed;
    prov["ldm_fp"] = ldm_fp();
    prov["vae_fp"] = vae_fp();
    prov["config_fingerprint"] = cfg_.fingerprint();
    write_text(res.dir + "/provenance.json", prov.dump(2) + "\n");
    res.artifacts = {"volume.raw", "volume.raw.json", "volume.nii", "provenance.json"};
    finish_stage(res, seed, now_seconds() - t0, {{"ldm", ldm_fp()}, {"vae", vae_fp()}});
    log_info("generate: wrote %s (cfg %.3g, %d steps)", res.dir.c_str(), cfg_scale, steps);
    return res;
}

std::vector<std::string> Pipeline::report_paths() const {
    std::vector<std::string> out;
    for (double s : cfg_.cfg_scales)
        out.push_back(stage_dir("evaluate", evaluate_fp()) + "/report_cfg" +
                      format_double_shortest(s) + ".json");
    return out;
}

StageResult Pipeline::evaluate() {
    DirLock lock(cfg_.outdir);
    StageResult res{"evaluate", evaluate_fp(), stage_dir("evaluate", evaluate_fp())};
    if (stage_cached(res.dir)) {
        res.cached = true;
        log_info("evaluate: cache hit at %s", res.dir.c_str());
        return res;
    }
    const double t0 = now_seconds();
    fs::remove_all(res.dir);
    fs::create_directories(res.dir);

    float latent_scale = 1.0f;
    Autoencoder vae = load_vae(&latent_scale);
    LdmBundle ldm = load_ldm();
    auto records = load_phantoms();

    std::vector<GroundTruth> train_gt;
    std::vector<PhantomRecord> eval_recs;
    for (auto& r : records) {
        if (r.split == "train")
            train_gt.push_back(r.gt);
        else
            eval_recs.push_back(std::move(r));
    }
    if (eval_recs.empty()) throw MissingArtifactError("no eval phantoms; rerun make-phantoms");

    Rng rng(cfg_.seed);

    // Alignment extractor: contrastive dual encoder on the train phantoms.
    IdentityAugmenter ident;
    std::vector<std::string> train_texts;
    for (const auto& gt : train_gt)
        train_texts.push_back(full_prompt(gt.report, augment_report(gt.report, gt.organ_list, ident))
                                  .rendered);
    AlignConfig align_cfg;
    align_cfg.embed_dim = cfg_.align_dim;
    align_cfg.vocab = cfg_.vocab;
    AlignModel align(align_cfg, rng.split("align_init").next_u64());
    AlignTrainOptions aopts;
    aopts.steps = cfg_.align_steps;
    aopts.seed = rng.split("align_train").next_u64();
    aopts.on_log = [](int step, double loss) {
        log_info("evaluate: align step %d loss %.4f", step, loss);
    };
    const double align_loss = train_align(align, train_gt, train_texts, aopts);
    log_info("evaluate: alignment extractor trained (final loss %.4f)", align_loss);
    align.to_checkpoint().save(res.dir + "/align.ckpt");
    res.artifacts.push_back("align.ckpt");

    FidExtractor fx(cfg_.fid_width, cfg_.fid_seed);

    std::vector<Volume3D> real;
    std::vector<PromptBundle> bundles;
    for (const auto& r : eval_recs) {
        real.push_back(r.gt.volume);
        bundles.push_back(
            full_prompt(r.gt.report, augment_report(r.gt.report, r.gt.organ_list, ident)));
    }

    tsp::SplitStage stage = vae.decoder_stage();
    tsp::TSPlan plan = tsp_plan_from_config(cfg_, stage);
    const std::vector<int64_t> latent_dims = {cfg_.vae_latent_channels, cfg_.shape[0] / 4,
                                              cfg_.shape[1] / 4, cfg_.shape[2] / 4};

    for (size_t si = 0; si < cfg_.cfg_scales.size(); si++) {
        const double scale_w = cfg_.cfg_scales[si];
        std::vector<Volume3D> gen;
        std::vector<std::string> prompts;
        for (size_t i = 0; i < eval_recs.size(); i++) {
            SampleOptions sopts;
            sopts.cfg_scale = static_cast<float>(scale_w);
            sopts.steps = cfg_.sample_steps;
            sopts.seed = rng.split("eval_sample").split(si).split(i).next_u64();
            Tensor z = sample(ldm.unet, ldm.encoder, bundles[i], ldm.sched, sopts, latent_dims);
            text2ct::scale(z, 1.0f / latent_scale);
            LatentGrid grid;
            grid.values = z;
            gen.push_back(vae.decode(grid, &plan));
            prompts.push_back(bundles[i].rendered);
        }
        EvalReport report = evaluate_sets(real, gen, prompts, fx, align, cfg_.fingerprint());
        const std::string name = "report_cfg" + format_double_shortest(scale_w) + ".json";
        write_text(res.dir + "/" + name, report.to_json());
        res.artifacts.push_back(name);
        log_info("evaluate: cfg %.3g -> fid_avg %.4f clip_avg %.4f", scale_w, report.fid_avg,
                 report.clip_avg);
    }
    finish_stage(res, cfg_.seed, now_seconds() - t0,
                 {{"ldm", ldm_fp()}, {"phantoms", phantoms_fp()}});
    return res;
}

}  // namespace text2ct
