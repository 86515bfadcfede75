#include "text2ct/prompt.hpp"

#include <algorithm>
#include <cctype>

#define CPPHTTPLIB_NO_EXCEPTIONS
#include <httplib.h>
#include <nlohmann/json.hpp>

#include "text2ct/rng.hpp"

namespace text2ct {

namespace {
const char* kOrganKeys[kOrganCount] = {"lung_left",    "lung_right", "heart",  "liver",
                                       "spleen",       "kidney_left", "kidney_right",
                                       "stomach",      "aorta",       "trachea"};
const char* kOrganDisplay[kOrganCount] = {"left lung",    "right lung",  "heart",  "liver",
                                          "spleen",       "left kidney", "right kidney",
                                          "stomach",      "aorta",       "trachea"};
}  // namespace

const char* organ_key(Organ o) { return kOrganKeys[static_cast<int>(o)]; }
const char* organ_display(Organ o) { return kOrganDisplay[static_cast<int>(o)]; }

Organ organ_from_key(const std::string& key) {
    for (int i = 0; i < kOrganCount; i++)
        if (key == kOrganKeys[i]) return static_cast<Organ>(i);
    throw ValidationError(strformat("unknown organ name \"%s\"", key.c_str()));
}

OrganList OrganList::from_keys(const std::vector<std::string>& keys) {
    OrganList l;
    for (const auto& k : keys) l.organs.push_back(organ_from_key(k));
    l.canonicalize();
    l.validate();
    return l;
}

void OrganList::canonicalize() {
    std::sort(organs.begin(), organs.end());
    organs.erase(std::unique(organs.begin(), organs.end()), organs.end());
}

void OrganList::validate() const {
    if (organs.empty()) throw ValidationError("organ list must be nonempty");
}

std::vector<std::string> OrganList::keys() const {
    std::vector<std::string> out;
    for (Organ o : organs) out.emplace_back(organ_key(o));
    return out;
}

void Report::validate() const {
    if (!demographics && !findings && !impressions)
        throw ValidationError("report: at least one section must be present");
}

void AugmentedReport::validate(const Report& source) const {
    if (demographics_aug && !source.demographics)
        throw ValidationError("augmented report: demographics_aug without source section");
    if (findings_aug && !source.findings)
        throw ValidationError("augmented report: findings_aug without source section");
    if (impressions_aug && !source.impressions)
        throw ValidationError("augmented report: impressions_aug without source section");
    if (general.empty()) throw ValidationError("augmented report: general must be nonempty");
}

const char* section_kind_name(SectionKind k) {
    switch (k) {
        case SectionKind::General: return "general";
        case SectionKind::Demographics: return "demographics";
        case SectionKind::Findings: return "findings";
        case SectionKind::Impressions: return "impressions";
    }
    return "?";
}

std::string general_description(const OrganList& organs) {
    organs.validate();
    OrganList canon = organs;
    canon.canonicalize();
    std::string s = "CT scan covering: ";
    for (size_t i = 0; i < canon.organs.size(); i++) {
        if (i) s += ", ";
        s += organ_display(canon.organs[i]);
    }
    s += ".";
    return s;
}

std::string sanitize_section(const std::string& text) {
    // Collapse whitespace runs to single spaces, trim, ensure terminal
    // punctuation so rendered prompts re-segment cleanly.
    std::string out;
    bool in_space = true;
    for (char c : text) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!in_space && !out.empty()) out += ' ';
            in_space = true;
        } else {
            out += c;
            in_space = false;
        }
    }
    while (!out.empty() && out.back() == ' ') out.pop_back();
    if (!out.empty() && out.back() != '.' && out.back() != '!' && out.back() != '?') out += '.';
    return out;
}

void PromptBundle::validate() const {
    if (segments.empty() || segments.size() > 4)
        throw ValidationError("prompt bundle: need 1..4 segments");
    for (size_t i = 0; i < segments.size(); i++)
        for (size_t j = i + 1; j < segments.size(); j++)
            if (segments[i].kind == segments[j].kind)
                throw ValidationError("prompt bundle: duplicate section kind");
    std::string joined;
    for (size_t i = 0; i < segments.size(); i++) {
        if (i) joined += ' ';
        joined += segments[i].text;
    }
    if (joined != rendered) throw ValidationError("prompt bundle: rendered text out of sync");
}

std::string Augmenter::freeform(const std::string& demographics, const std::string& impressions,
                                const OrganList& organs) {
    std::string s = sanitize_section(demographics);
    if (!s.empty()) s += ' ';
    s += sanitize_section(impressions);
    std::string g = general_description(organs);
    return sanitize_section(s + " " + g);
}

namespace {

std::vector<std::string> split_sentences(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (size_t i = 0; i < text.size(); i++) {
        cur += text[i];
        if (text[i] == '.' || text[i] == '!' || text[i] == '?') {
            while (i + 1 < text.size() && text[i + 1] == ' ') i++;
            out.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

std::string replace_once(const std::string& s, const std::string& from, const std::string& to) {
    auto pos = s.find(from);
    if (pos == std::string::npos) return s;
    return s.substr(0, pos) + to + s.substr(pos + from.size());
}

struct Phrase {
    const char* from;
    const char* alts[2];
};

// Never touches "left"/"right" or organ names.
const Phrase kFindingsPhrases[] = {
    {"is unremarkable", {"appears normal", "is within normal limits"}},
    {"There is a", {"Noted is a", "Imaging demonstrates a"}},
};
const Phrase kImpressionPhrases[] = {
    {"Unremarkable", {"No significant abnormality on", "Normal-appearing"}},
    {"nodule in", {"nodule seen in", "nodule identified in"}},
};
const Phrase kDemographicsPhrases[] = {
    {"Patient is a", {"The subject is a", "Scan of a"}},
    {"year old", {"year-old", "years of age,"}},
};

std::string apply_phrases(const std::string& text, const Phrase* phrases, size_t n, Rng& rng) {
    std::string out = text;
    for (size_t i = 0; i < n; i++) {
        if (rng.uniform() < 0.5) continue;
        out = replace_once(out, phrases[i].from, phrases[i].alts[rng.uniform_int(2)]);
    }
    return out;
}

}  // namespace

std::string TemplateAugmenter::augment(SectionKind kind, const std::string& text,
                                       const OrganList&) {
    Rng rng = Rng(seed_).split(section_kind_name(kind)).split(fnv1a64(text));
    std::string out = text;
    switch (kind) {
        case SectionKind::Demographics:
            out = apply_phrases(out, kDemographicsPhrases, std::size(kDemographicsPhrases), rng);
            break;
        case SectionKind::Findings: {
            auto sentences = split_sentences(out);
            rng.shuffle(sentences.begin(), sentences.end());
            out.clear();
            for (size_t i = 0; i < sentences.size(); i++) {
                if (i) out += ' ';
                out += sentences[i];
            }
            out = apply_phrases(out, kFindingsPhrases, std::size(kFindingsPhrases), rng);
            break;
        }
        case SectionKind::Impressions:
            out = apply_phrases(out, kImpressionPhrases, std::size(kImpressionPhrases), rng);
            break;
        case SectionKind::General:
            break;
    }
    return sanitize_section(out);
}

HttpAugmenter::HttpAugmenter(std::string host, int port, std::string path, int timeout_ms,
                             int retries)
    : host_(std::move(host)), path_(std::move(path)), port_(port), timeout_ms_(timeout_ms),
      retries_(retries) {}

std::string HttpAugmenter::post_task(const std::string& task, const char* kind,
                                     const std::string& text, const OrganList& organs) {
    nlohmann::json req;
    req["task"] = task;
    req["section_kind"] = kind;
    req["text"] = text;
    req["organs"] = organs.keys();
    const std::string body = req.dump();

    std::string last_err = "no attempt";
    for (int attempt = 0; attempt <= retries_; attempt++) {
        httplib::Client client(host_, port_);
        client.set_connection_timeout(0, timeout_ms_ * 1000);
        client.set_read_timeout(0, timeout_ms_ * 1000);
        auto res = client.Post(path_, body, "application/json");
        if (!res) {
            last_err = "connection failed";
            continue;
        }
        if (res->status != 200) {
            last_err = strformat("http status %d", res->status);
            continue;
        }
        auto js = nlohmann::json::parse(res->body, nullptr, false);
        if (js.is_discarded() || !js.contains("text")) {
            last_err = "malformed response body";
            continue;
        }
        return js["text"].get<std::string>();
    }
    throw IOError(strformat("http augmenter %s:%d failed after %d attempts: %s", host_.c_str(),
                            port_, retries_ + 1, last_err.c_str()));
}

std::string HttpAugmenter::augment(SectionKind kind, const std::string& text,
                                   const OrganList& organs) {
    return post_task("augment", section_kind_name(kind), text, organs);
}

std::string HttpAugmenter::freeform(const std::string& demographics,
                                    const std::string& impressions, const OrganList& organs) {
    return post_task("freeform", "freeform", demographics + "\n" + impressions, organs);
}

namespace {

// Laterality and organ tokens must survive augmentation verbatim.
bool preserves_protected_tokens(const std::string& before, const std::string& after) {
    auto count = [](const std::string& s, const std::string& tok) {
        size_t n = 0, pos = 0;
        while ((pos = s.find(tok, pos)) != std::string::npos) {
            n++;
            pos += tok.size();
        }
        return n;
    };
    for (const char* tok : {"left", "right"})
        if (count(before, tok) != count(after, tok)) return false;
    for (int i = 0; i < kOrganCount; i++) {
        const std::string name = organ_display(static_cast<Organ>(i));
        if (count(before, name) > count(after, name)) return false;
    }
    return true;
}

std::optional<std::string> augment_section(Augmenter& augmenter, SectionKind kind,
                                           const std::optional<std::string>& text,
                                           const OrganList& organs) {
    if (!text) return std::nullopt;
    try {
        std::string out = augmenter.augment(kind, *text, organs);
        if (out.empty() || !preserves_protected_tokens(*text, out)) {
            log_warn("augmenter \"%s\" altered protected tokens in %s; keeping original",
                     augmenter.name().c_str(), section_kind_name(kind));
            return sanitize_section(*text);
        }
        return sanitize_section(out);
    } catch (const std::exception& e) {
        log_warn("augmenter \"%s\" failed on %s (%s); falling back to identity",
                 augmenter.name().c_str(), section_kind_name(kind), e.what());
        return sanitize_section(*text);
    }
}

}  // namespace

AugmentedReport augment_report(const Report& report, const OrganList& organs,
                               Augmenter& augmenter) {
    report.validate();
    organs.validate();
    AugmentedReport aug;
    aug.general = general_description(organs);
    aug.demographics_aug =
        augment_section(augmenter, SectionKind::Demographics, report.demographics, organs);
    aug.findings_aug = augment_section(augmenter, SectionKind::Findings, report.findings, organs);
    aug.impressions_aug =
        augment_section(augmenter, SectionKind::Impressions, report.impressions, organs);
    aug.validate(report);
    return aug;
}

namespace {

struct SectionChoice {
    SectionKind kind;
    std::string original;
    std::string augmented;
    bool has_augmented;
};

std::vector<SectionChoice> available_sections(const Report& report, const AugmentedReport& aug) {
    std::vector<SectionChoice> out;
    out.push_back({SectionKind::General, sanitize_section(aug.general),
                   sanitize_section(aug.general), false});
    if (report.demographics)
        out.push_back({SectionKind::Demographics, sanitize_section(*report.demographics),
                       aug.demographics_aug ? *aug.demographics_aug : std::string(),
                       aug.demographics_aug.has_value()});
    if (report.findings)
        out.push_back({SectionKind::Findings, sanitize_section(*report.findings),
                       aug.findings_aug ? *aug.findings_aug : std::string(),
                       aug.findings_aug.has_value()});
    if (report.impressions)
        out.push_back({SectionKind::Impressions, sanitize_section(*report.impressions),
                       aug.impressions_aug ? *aug.impressions_aug : std::string(),
                       aug.impressions_aug.has_value()});
    return out;
}

PromptBundle bundle_from(const std::vector<PromptSegment>& segments) {
    PromptBundle b;
    b.segments = segments;
    for (size_t i = 0; i < segments.size(); i++) {
        if (i) b.rendered += ' ';
        b.rendered += segments[i].text;
    }
    b.validate();
    return b;
}

}  // namespace

PromptBundle sample_prompt(const Report& report, const AugmentedReport& aug, uint64_t rng_seed,
                           double p_aug) {
    report.validate();
    aug.validate(report);
    if (p_aug < 0.0 || p_aug > 1.0) throw ConfigError("sample_prompt: p_aug must be in [0,1]");
    Rng rng = Rng(rng_seed).split("sample_prompt");

    std::vector<SectionChoice> avail = available_sections(report, aug);
    int n = 1 + static_cast<int>(rng.uniform_int(4));
    n = std::min<int>(n, static_cast<int>(avail.size()));
    rng.shuffle(avail.begin(), avail.end());
    avail.resize(static_cast<size_t>(n));

    std::vector<PromptSegment> segments;
    for (const auto& sc : avail) {
        PromptSegment seg;
        seg.kind = sc.kind;
        const bool use_aug = sc.has_augmented && rng.uniform() < p_aug;
        seg.augmented = use_aug;
        seg.text = use_aug ? sc.augmented : sc.original;
        segments.push_back(std::move(seg));
    }
    return bundle_from(segments);
}

PromptBundle full_prompt(const Report& report, const AugmentedReport& aug) {
    report.validate();
    aug.validate(report);
    std::vector<PromptSegment> segments;
    for (const auto& sc : available_sections(report, aug))
        segments.push_back({sc.kind, sc.original, false});
    return bundle_from(segments);
}

bool parse_rendered(const std::string& rendered, const std::vector<std::string>& candidates,
                    std::vector<std::string>* out_segments) {
    if (out_segments) out_segments->clear();
    size_t pos = 0;
    while (pos < rendered.size()) {
        bool matched = false;
        for (const auto& c : candidates) {
            if (c.empty() || rendered.compare(pos, c.size(), c) != 0) continue;
            const size_t end = pos + c.size();
            if (end != rendered.size() && rendered[end] != ' ') continue;
            if (out_segments) out_segments->push_back(c);
            pos = end + (end != rendered.size() ? 1 : 0);
            matched = true;
            break;
        }
        if (!matched) return false;
    }
    return pos >= rendered.size() && !rendered.empty();
}

}  // namespace text2ct
