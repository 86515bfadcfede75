#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "text2ct/pipeline.hpp"

using namespace text2ct;

namespace {

ExperimentConfig load_config(const std::string& path) {
    if (path.empty()) return ExperimentConfig{};
    return ExperimentConfig::parse_file(path);
}

int run_validate(const std::string& config_path) {
    ExperimentConfig cfg = load_config(config_path);
    auto diags = cfg.validate();
    bool has_error = false;
    for (const auto& d : diags) {
        const bool err = d.level == ExperimentConfig::Diagnostic::Error;
        has_error |= err;
        fprintf(stderr, "%s: %s\n", err ? "error" : "warning", d.message.c_str());
    }
    // canonical form (also what the fingerprint hashes)
    std::cout << cfg.canonical();
    std::cout << "# fingerprint = " << cfg.fingerprint() << "\n";
    return has_error ? 2 : 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"text2ct: text-conditional 3D CT synthesis pipeline"};
    app.require_subcommand(1);

    std::string config_path;
    std::string outdir_override;
    bool force = false;
    app.add_option("--config", config_path, "experiment config file (TOML-style sections)");
    app.add_option("--outdir", outdir_override,
                   "override [global].outdir (env TEXT2CT_OUTDIR also applies)");
    app.add_flag("--force", force, "rerun stages even when cached");

    auto* validate_cmd = app.add_subcommand("validate-config", "check config and echo canonical form");
    auto* phantoms_cmd = app.add_subcommand("make-phantoms", "generate the synthetic corpus");
    auto* vae_cmd = app.add_subcommand("train-vae", "train the 3D compression network");
    auto* latents_cmd = app.add_subcommand("cache-latents", "encode and store training latents");
    auto* ldm_cmd = app.add_subcommand("train-ldm", "train the text-conditional diffusion model");
    auto* generate_cmd = app.add_subcommand("generate", "sample a volume from a text prompt");
    auto* evaluate_cmd = app.add_subcommand("evaluate", "FID + alignment evaluation reports");

    std::string prompt, prompt_file, out_copy;
    double cfg_scale = -1.0;
    int steps = -1;
    int64_t seed = -1;
    generate_cmd->add_option("--prompt", prompt, "free-format text prompt");
    generate_cmd->add_option("--prompt-file", prompt_file, "file containing the prompt");
    generate_cmd->add_option("--cfg-scale", cfg_scale, "classifier-free guidance scale");
    generate_cmd->add_option("--steps", steps, "sampling steps");
    generate_cmd->add_option("--seed", seed, "sampling seed");
    generate_cmd->add_option("--out", out_copy, "also copy the generated NIfTI to this path");

    CLI11_PARSE(app, argc, argv);

    try {
        if (validate_cmd->parsed()) return run_validate(config_path);

        ExperimentConfig cfg = load_config(config_path);
        if (!outdir_override.empty()) cfg.outdir = outdir_override;
        Pipeline pipe(cfg, force);

        StageResult res;
        if (phantoms_cmd->parsed()) {
            res = pipe.make_phantoms();
        } else if (vae_cmd->parsed()) {
            res = pipe.train_vae();
        } else if (latents_cmd->parsed()) {
            res = pipe.cache_latents();
        } else if (ldm_cmd->parsed()) {
            res = pipe.train_ldm();
        } else if (generate_cmd->parsed()) {
            if (!prompt_file.empty()) {
                std::ifstream in(prompt_file);
                if (!in) throw MissingArtifactError("cannot read prompt file " + prompt_file);
                std::stringstream ss;
                ss << in.rdbuf();
                prompt = ss.str();
            }
            if (prompt.empty())
                throw ValidationError("generate requires --prompt or --prompt-file");
            GenerateOverrides ov;
            if (cfg_scale >= 0.0) ov.cfg_scale = cfg_scale;
            if (steps > 0) ov.steps = steps;
            if (seed >= 0) ov.seed = static_cast<uint64_t>(seed);
            res = pipe.generate(prompt, ov);
            if (!out_copy.empty()) {
                std::ifstream src(res.dir + "/volume.nii", std::ios::binary);
                std::ofstream dst(out_copy, std::ios::binary);
                dst << src.rdbuf();
                if (!dst) throw IOError("cannot copy volume to " + out_copy);
            }
        } else if (evaluate_cmd->parsed()) {
            res = pipe.evaluate();
            for (const auto& p : pipe.report_paths()) printf("%s\n", p.c_str());
        }
        printf("%s: %s (%s)\n", res.stage.c_str(), res.cached ? "cached" : "done",
               res.dir.c_str());
        return 0;
    } catch (const ConfigError& e) {
        log_error("%s", e.what());
        return 2;
    } catch (const ValidationError& e) {
        log_error("%s", e.what());
        return 2;
    } catch (const MissingArtifactError& e) {
        log_error("%s", e.what());
        return 3;
    } catch (const std::exception& e) {
        log_error("%s", e.what());
        return 1;
    }
}
