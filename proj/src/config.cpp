#include "text2ct/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace text2ct {

std::string format_double_shortest(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

std::string strip_quotes(const std::string& s) {
    if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') ||
                          (s.front() == '\'' && s.back() == '\'')))
        return s.substr(1, s.size() - 2);
    return s;
}

struct Field {
    std::string section, key;
    std::function<void(ExperimentConfig&, const std::string&)> set;
    std::function<std::string(const ExperimentConfig&)> get;
    // outdir names a location, not a computation; it stays out of the
    // canonical form so fingerprints are path-independent.
    bool in_canonical = true;
};

template <typename T>
T parse_num(const std::string& where, const std::string& v) {
    std::istringstream ss(v);
    T out;
    ss >> out;
    if (ss.fail() || !trim(v.substr(static_cast<size_t>(ss.tellg()) == std::string::npos
                                        ? v.size()
                                        : static_cast<size_t>(ss.tellg())))
                          .empty())
        throw ConfigError(strformat("config: %s: cannot parse \"%s\"", where.c_str(), v.c_str()));
    return out;
}

bool parse_bool(const std::string& where, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(strformat("config: %s: expected true/false, got \"%s\"", where.c_str(),
                                v.c_str()));
}

std::array<int64_t, 3> parse_shape(const std::string& where, const std::string& v) {
    std::array<int64_t, 3> out{};
    char sep1 = 0, sep2 = 0;
    std::istringstream ss(v);
    if (!(ss >> out[0] >> sep1 >> out[1] >> sep2 >> out[2]) || sep1 != 'x' || sep2 != 'x')
        throw ConfigError(
            strformat("config: %s: expected HxWxD, got \"%s\"", where.c_str(), v.c_str()));
    return out;
}

std::vector<double> parse_list(const std::string& where, const std::string& v) {
    std::vector<double> out;
    std::string item;
    std::istringstream ss(v);
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        out.push_back(parse_num<double>(where, item));
    }
    if (out.empty())
        throw ConfigError(strformat("config: %s: empty list", where.c_str()));
    return out;
}

std::string shape_str(const std::array<int64_t, 3>& s) {
    return strformat("%lldx%lldx%lld", static_cast<long long>(s[0]), static_cast<long long>(s[1]),
                     static_cast<long long>(s[2]));
}

std::string list_str(const std::vector<double>& v) {
    std::string out;
    for (size_t i = 0; i < v.size(); i++) {
        if (i) out += ",";
        out += format_double_shortest(v[i]);
    }
    return out;
}

#define FIELD_NUM(sec, key, member, type)                                                     \
    {sec, key,                                                                                \
     [](ExperimentConfig& c, const std::string& v) {                                          \
         c.member = parse_num<type>(sec "." key, v);                                          \
     },                                                                                       \
     [](const ExperimentConfig& c) { return strformat("%lld", (long long)c.member); }}
#define FIELD_DBL(sec, key, member)                                                           \
    {sec, key,                                                                                \
     [](ExperimentConfig& c, const std::string& v) {                                          \
         c.member = parse_num<double>(sec "." key, v);                                        \
     },                                                                                       \
     [](const ExperimentConfig& c) { return format_double_shortest(c.member); }}
#define FIELD_STR(sec, key, member)                                                           \
    {sec, key,                                                                                \
     [](ExperimentConfig& c, const std::string& v) { c.member = strip_quotes(v); },           \
     [](const ExperimentConfig& c) { return c.member; }}
#define FIELD_BOOL(sec, key, member)                                                          \
    {sec, key,                                                                                \
     [](ExperimentConfig& c, const std::string& v) {                                          \
         c.member = parse_bool(sec "." key, v);                                               \
     },                                                                                       \
     [](const ExperimentConfig& c) { return c.member ? "true" : "false"; }}

const std::vector<Field>& fields() {
    static const std::vector<Field> f = {
        FIELD_NUM("global", "seed", seed, uint64_t),
        {"global", "outdir",
         [](ExperimentConfig& c, const std::string& v) { c.outdir = strip_quotes(v); },
         [](const ExperimentConfig& c) { return c.outdir; }, /*in_canonical=*/false},
        FIELD_NUM("phantoms", "count", phantom_count, int),
        FIELD_NUM("phantoms", "eval_count", eval_count, int),
        {"phantoms", "shape",
         [](ExperimentConfig& c, const std::string& v) {
             c.shape = parse_shape("phantoms.shape", v);
         },
         [](const ExperimentConfig& c) { return shape_str(c.shape); }},
        FIELD_DBL("phantoms", "omission_rate", omission_rate),
        FIELD_NUM("vae", "base_width", vae_base_width, int),
        FIELD_NUM("vae", "latent_channels", vae_latent_channels, int),
        FIELD_DBL("vae", "kl_weight", vae_kl_weight),
        FIELD_DBL("vae", "lr", vae_lr),
        FIELD_NUM("vae", "phase1_patch", vae_phase1_patch, int64_t),
        FIELD_NUM("vae", "phase1_epochs", vae_phase1_epochs, int),
        FIELD_NUM("vae", "phase2_patch", vae_phase2_patch, int64_t),
        FIELD_NUM("vae", "phase2_epochs", vae_phase2_epochs, int),
        FIELD_NUM("prompt", "encoder_dim", encoder_dim, int),
        FIELD_NUM("prompt", "max_tokens", max_tokens, int),
        FIELD_NUM("prompt", "vocab", vocab, int),
        FIELD_DBL("prompt", "p_aug", p_aug),
        FIELD_STR("prompt", "augmenter", augmenter),
        FIELD_BOOL("prompt", "offline", offline),
        FIELD_STR("prompt", "http_host", http_host),
        FIELD_NUM("prompt", "http_port", http_port, int),
        FIELD_NUM("prompt", "http_timeout_ms", http_timeout_ms, int),
        FIELD_NUM("prompt", "http_retries", http_retries, int),
        FIELD_NUM("diffusion", "timesteps", timesteps, int),
        FIELD_DBL("diffusion", "beta_start", beta_start),
        FIELD_DBL("diffusion", "beta_end", beta_end),
        FIELD_STR("diffusion", "beta_schedule", beta_schedule),
        FIELD_NUM("diffusion", "unet_base_width", unet_base_width, int),
        FIELD_NUM("diffusion", "unet_context_dim", unet_context_dim, int),
        FIELD_NUM("diffusion", "unet_time_dim", unet_time_dim, int),
        FIELD_NUM("diffusion", "heads", heads, int),
        FIELD_NUM("diffusion", "groups", groups, int),
        FIELD_DBL("diffusion", "lr", ldm_lr),
        FIELD_DBL("diffusion", "lr_power", lr_power),
        FIELD_NUM("diffusion", "train_steps", train_steps, int64_t),
        FIELD_NUM("diffusion", "batch", batch, int),
        FIELD_DBL("diffusion", "p_drop", p_drop),
        FIELD_DBL("diffusion", "stop_loss_ratio", stop_loss_ratio),
        FIELD_NUM("sampling", "steps", sample_steps, int),
        FIELD_DBL("sampling", "cfg_scale", cfg_scale),
        FIELD_NUM("tsp", "axis", tsp_axis, int),
        FIELD_NUM("tsp", "segments", tsp_segments, int),
        FIELD_STR("tsp", "parallelism", tsp_parallelism),
        FIELD_NUM("eval", "fid_width", fid_width, int),
        FIELD_NUM("eval", "fid_seed", fid_seed, uint64_t),
        FIELD_NUM("eval", "align_dim", align_dim, int),
        FIELD_NUM("eval", "align_steps", align_steps, int),
        {"eval", "cfg_scales",
         [](ExperimentConfig& c, const std::string& v) {
             c.cfg_scales = parse_list("eval.cfg_scales", v);
         },
         [](const ExperimentConfig& c) { return list_str(c.cfg_scales); }},
    };
    return f;
}

}  // namespace

ExperimentConfig ExperimentConfig::parse_string(const std::string& text) {
    ExperimentConfig cfg;
    std::istringstream ss(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(ss, line)) {
        lineno++;
        // strip comments
        for (size_t i = 0; i < line.size(); i++)
            if (line[i] == '#' || line[i] == ';') {
                line = line.substr(0, i);
                break;
            }
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError(strformat("config line %d: malformed section header", lineno));
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(strformat("config line %d: expected key = value", lineno));
        const std::string key = trim(line.substr(0, eq));
        const std::string value = strip_quotes(trim(line.substr(eq + 1)));
        bool found = false;
        for (const auto& f : fields()) {
            if (f.section == section && f.key == key) {
                f.set(cfg, value);
                found = true;
                break;
            }
        }
        if (!found)
            throw ConfigError(strformat("config line %d: unknown key [%s] %s", lineno,
                                        section.c_str(), key.c_str()));
    }
    return cfg;
}

ExperimentConfig ExperimentConfig::parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw MissingArtifactError("config: cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_string(ss.str());
}

std::string ExperimentConfig::canonical() const {
    std::map<std::string, std::map<std::string, std::string>> tree;
    for (const auto& f : fields())
        if (f.in_canonical) tree[f.section][f.key] = f.get(*this);
    std::string out;
    for (const auto& [sec, kv] : tree) {
        out += "[" + sec + "]\n";
        for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
    }
    return out;
}

std::string ExperimentConfig::section_canonical(const std::string& section) const {
    std::map<std::string, std::string> kv;
    for (const auto& f : fields())
        if (f.section == section && f.in_canonical) kv[f.key] = f.get(*this);
    std::string out = "[" + section + "]\n";
    for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
    return out;
}

std::string ExperimentConfig::fingerprint() const { return hex64(fnv1a64(canonical())); }

std::vector<ExperimentConfig::Diagnostic> ExperimentConfig::validate() const {
    std::vector<Diagnostic> out;
    auto err = [&](std::string m) { out.push_back({Diagnostic::Error, std::move(m)}); };
    auto warn = [&](std::string m) { out.push_back({Diagnostic::Warning, std::move(m)}); };

    if (encoder_dim != unet_context_dim)
        err(strformat("prompt.encoder_dim (%d) must equal diffusion.unet_context_dim (%d)",
                      encoder_dim, unet_context_dim));
    for (int i = 0; i < 3; i++) {
        if (shape[static_cast<size_t>(i)] % 4 != 0)
            err(strformat("phantoms.shape axis %d (%lld) must be divisible by 4", i,
                          static_cast<long long>(shape[static_cast<size_t>(i)])));
        else if (shape[static_cast<size_t>(i)] % 8 != 0)
            err(strformat("phantoms.shape axis %d (%lld) must be divisible by 8 so the UNet can "
                          "halve the latent grid",
                          i, static_cast<long long>(shape[static_cast<size_t>(i)])));
    }
    if (phantom_count < 1) err("phantoms.count must be >= 1");
    if (eval_count < 1) err("phantoms.eval_count must be >= 1");
    if (omission_rate < 0.0 || omission_rate > 1.0) err("phantoms.omission_rate must be in [0,1]");

    if (vae_base_width < 1) err("vae.base_width must be >= 1");
    if (vae_latent_channels < 1) err("vae.latent_channels must be >= 1");
    if (vae_phase1_patch % 4 || vae_phase2_patch % 4)
        err("vae patch sizes must be divisible by 4");
    if (vae_kl_weight > 0.01) warn("vae.kl_weight above 0.01 is unusually strong");
    const int64_t min_dim = std::min({shape[0], shape[1], shape[2]});
    if (vae_phase2_patch > min_dim)
        warn(strformat("vae.phase2_patch (%lld) exceeds the smallest volume dim (%lld); patches "
                       "will clamp",
                       static_cast<long long>(vae_phase2_patch),
                       static_cast<long long>(min_dim)));

    if (p_aug < 0.0 || p_aug > 1.0) err("prompt.p_aug must be in [0,1]");
    if (augmenter != "template" && augmenter != "identity" && augmenter != "http")
        err("prompt.augmenter must be template, identity or http");
    if (offline && augmenter == "http")
        warn("prompt.offline forces the template augmenter despite prompt.augmenter = http");
    if (max_tokens < 1) err("prompt.max_tokens must be >= 1");
    if (vocab < 3) err("prompt.vocab must be >= 3");

    if (timesteps < 1) err("diffusion.timesteps must be >= 1");
    if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end))
        err("diffusion betas must satisfy 0 < beta_start <= beta_end < 1");
    if (beta_schedule != "scaled_linear" && beta_schedule != "linear")
        err("diffusion.beta_schedule must be scaled_linear or linear");
    if (p_drop < 0.0 || p_drop > 1.0) err("diffusion.p_drop must be in [0,1]");
    if (unet_base_width % groups != 0)
        err(strformat("diffusion.unet_base_width (%d) must be divisible by diffusion.groups (%d)",
                      unet_base_width, groups));
    if (unet_base_width % heads != 0)
        err(strformat("diffusion.unet_base_width (%d) must be divisible by diffusion.heads (%d)",
                      unet_base_width, heads));
    if (batch < 1) err("diffusion.batch must be >= 1");
    if (batch > phantom_count)
        warn(strformat("diffusion.batch (%d) exceeds phantoms.count (%d)", batch, phantom_count));
    if (train_steps < 1) err("diffusion.train_steps must be >= 1");
    if (stop_loss_ratio < 0.0 || stop_loss_ratio >= 1.0)
        if (stop_loss_ratio != 0.0) err("diffusion.stop_loss_ratio must be 0 or in (0,1)");

    if (sample_steps < 1 || sample_steps > timesteps)
        err("sampling.steps must be in 1..diffusion.timesteps");
    if (cfg_scale < 0.0) err("sampling.cfg_scale must be >= 0");

    if (tsp_axis < 0 || tsp_axis > 2) err("tsp.axis must be in 0..2");
    if (tsp_segments < 1) err("tsp.segments must be >= 1");
    if (tsp_parallelism != "sequential" && tsp_parallelism != "workers")
        err("tsp.parallelism must be sequential or workers");

    if (fid_width < 1) err("eval.fid_width must be >= 1");
    if (align_dim < 1) err("eval.align_dim must be >= 1");
    for (double s : cfg_scales)
        if (s < 0.0) err("eval.cfg_scales entries must be >= 0");

    return out;
}

void ExperimentConfig::validate_or_throw() const {
    std::string errs;
    for (const auto& d : validate()) {
        if (d.level != Diagnostic::Error) continue;
        if (!errs.empty()) errs += "\n";
        errs += "  - " + d.message;
    }
    if (!errs.empty()) throw ConfigError("config validation failed:\n" + errs);
}

}  // namespace text2ct
