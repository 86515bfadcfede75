#pragma once

#include <memory>
#include <optional>

#include "text2ct/config.hpp"
#include "text2ct/eval.hpp"
#include "text2ct/ldm.hpp"
#include "text2ct/phantom.hpp"
#include "text2ct/vae.hpp"

namespace text2ct {

struct StageResult {
    std::string stage;
    std::string fingerprint;
    std::string dir;
    bool cached = false;
    std::vector<std::string> artifacts;
};

struct PhantomRecord {
    std::string split;  // "train" | "eval"
    GroundTruth gt;
    std::string volume_path;
};

struct GenerateOverrides {
    std::optional<double> cfg_scale;
    std::optional<int> steps;
    std::optional<uint64_t> seed;
};

std::unique_ptr<Augmenter> augmenter_from_config(const ExperimentConfig& cfg, uint64_t seed);

// Stage orchestration under <outdir>/<stage>/<fingerprint>/. Stages are
// idempotent per fingerprint and guarded by a directory lock.
class Pipeline {
  public:
    explicit Pipeline(ExperimentConfig cfg, bool force = false);

    const ExperimentConfig& config() const { return cfg_; }
    const std::string& outdir() const { return cfg_.outdir; }

    std::string phantoms_fp() const;
    std::string vae_fp() const;
    std::string latents_fp() const;
    std::string ldm_fp() const;
    std::string generate_fp(const std::string& prompt, const GenerateOverrides& ov) const;
    std::string evaluate_fp() const;

    StageResult make_phantoms();
    StageResult train_vae();
    StageResult cache_latents();
    StageResult train_ldm();
    StageResult generate(const std::string& prompt, const GenerateOverrides& ov = {});
    StageResult evaluate();

    // Artifact loaders; throw MissingArtifactError naming the stage to run.
    std::vector<PhantomRecord> load_phantoms() const;
    Autoencoder load_vae(float* latent_scale = nullptr) const;
    LdmBundle load_ldm() const;
    std::vector<std::string> report_paths() const;  // evaluate outputs per cfg scale

    std::string stage_dir(const std::string& stage, const std::string& fp) const;

  private:
    bool stage_cached(const std::string& dir) const;
    void finish_stage(StageResult& res, uint64_t seed, double wall_s,
                      const std::map<std::string, std::string>& inputs);
    ExperimentConfig cfg_;
    bool force_;
};

// Exclusive <outdir>/.lock holder; one stage at a time per output directory.
class DirLock {
  public:
    explicit DirLock(const std::string& outdir);
    ~DirLock();
    DirLock(const DirLock&) = delete;

  private:
    std::string path_;
    bool held_ = false;
};

}  // namespace text2ct
