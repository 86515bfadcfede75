#pragma once

#include "text2ct/align.hpp"
#include "text2ct/fid.hpp"

namespace text2ct {

struct EvalReport {
    double fid_axial = 0.0, fid_sagittal = 0.0, fid_coronal = 0.0, fid_avg = 0.0;
    double clip_axial = 0.0, clip_sagittal = 0.0, clip_coronal = 0.0, clip_avg = 0.0;
    int n_volumes = 0;
    std::string config_fingerprint;

    std::string to_json() const;  // stable key order, byte-reproducible
    static EvalReport from_json(const std::string& text);
};

// Metric core shared by the evaluate stage: FID(real, gen) per view plus the
// alignment score of (gen, prompt) pairs.
EvalReport evaluate_sets(const std::vector<Volume3D>& real, const std::vector<Volume3D>& gen,
                         const std::vector<std::string>& prompts, const FidExtractor& fx,
                         const AlignModel& align, const std::string& config_fingerprint);

}  // namespace text2ct
