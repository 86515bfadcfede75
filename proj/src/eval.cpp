#include "text2ct/eval.hpp"

#include <nlohmann/json.hpp>

namespace text2ct {

std::string EvalReport::to_json() const {
    nlohmann::ordered_json j;
    j["fid_axial"] = fid_axial;
    j["fid_sagittal"] = fid_sagittal;
    j["fid_coronal"] = fid_coronal;
    j["fid_avg"] = fid_avg;
    j["clip_axial"] = clip_axial;
    j["clip_sagittal"] = clip_sagittal;
    j["clip_coronal"] = clip_coronal;
    j["clip_avg"] = clip_avg;
    j["n_volumes"] = n_volumes;
    j["config_fingerprint"] = config_fingerprint;
    return j.dump(2) + "\n";
}

EvalReport EvalReport::from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    EvalReport r;
    r.fid_axial = j.at("fid_axial").get<double>();
    r.fid_sagittal = j.at("fid_sagittal").get<double>();
    r.fid_coronal = j.at("fid_coronal").get<double>();
    r.fid_avg = j.at("fid_avg").get<double>();
    r.clip_axial = j.at("clip_axial").get<double>();
    r.clip_sagittal = j.at("clip_sagittal").get<double>();
    r.clip_coronal = j.at("clip_coronal").get<double>();
    r.clip_avg = j.at("clip_avg").get<double>();
    r.n_volumes = j.at("n_volumes").get<int>();
    r.config_fingerprint = j.at("config_fingerprint").get<std::string>();
    return r;
}

EvalReport evaluate_sets(const std::vector<Volume3D>& real, const std::vector<Volume3D>& gen,
                         const std::vector<std::string>& prompts, const FidExtractor& fx,
                         const AlignModel& align, const std::string& config_fingerprint) {
    if (gen.size() != prompts.size()) throw ValidationError("evaluate: unpaired volumes/prompts");
    std::vector<std::array<ViewSliceSet, 3>> rs, gs;
    rs.reserve(real.size());
    gs.reserve(gen.size());
    for (const auto& v : real) rs.push_back(slice_views(v));
    for (const auto& v : gen) gs.push_back(slice_views(v));
    FidResult f = fid(rs, gs, fx);
    AlignResult a = alignment_score(gen, prompts, align);

    EvalReport r;
    r.fid_axial = f.axial;
    r.fid_sagittal = f.sagittal;
    r.fid_coronal = f.coronal;
    r.fid_avg = f.avg;
    r.clip_axial = a.axial;
    r.clip_sagittal = a.sagittal;
    r.clip_coronal = a.coronal;
    r.clip_avg = a.avg;
    r.n_volumes = static_cast<int>(gen.size());
    r.config_fingerprint = config_fingerprint;
    return r;
}

}  // namespace text2ct
