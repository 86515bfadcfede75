#pragma once

#include <memory>

#include "text2ct/prompt_types.hpp"

namespace text2ct {

struct AugmentedReport {
    std::optional<std::string> demographics_aug;
    std::optional<std::string> findings_aug;
    std::optional<std::string> impressions_aug;
    std::string general;

    void validate(const Report& source) const;
};

enum class SectionKind { General, Demographics, Findings, Impressions };
const char* section_kind_name(SectionKind k);

struct PromptSegment {
    SectionKind kind;
    std::string text;
    bool augmented = false;
};

struct PromptBundle {
    std::vector<PromptSegment> segments;
    std::string rendered;

    void validate() const;
};

// Fixed-template general description (T_g stand-in for the LLM):
// "CT scan covering: left lung, right lung, heart."
std::string general_description(const OrganList& organs);

// Section rewriting backend. Implementations must keep laterality tokens and
// canonical organ names verbatim.
struct Augmenter {
    virtual ~Augmenter() = default;
    virtual std::string augment(SectionKind kind, const std::string& text,
                                const OrganList& organs) = 0;
    // Free-form composition from demographics + impressions (evaluation aid).
    virtual std::string freeform(const std::string& demographics, const std::string& impressions,
                                 const OrganList& organs);
    virtual std::string name() const = 0;
};

struct IdentityAugmenter final : Augmenter {
    std::string augment(SectionKind, const std::string& text, const OrganList&) override {
        return text;
    }
    std::string name() const override { return "identity"; }
};

// Seeded synonym/reordering paraphraser; the offline default.
struct TemplateAugmenter final : Augmenter {
    explicit TemplateAugmenter(uint64_t seed) : seed_(seed) {}
    std::string augment(SectionKind kind, const std::string& text,
                        const OrganList& organs) override;
    std::string name() const override { return "template"; }

  private:
    uint64_t seed_;
};

// Client for the external LLM augmenter protocol: POST {"task": "augment"|
// "freeform", "section_kind", "text", "organs"} -> {"text"}. Throws on
// failure after the configured retries.
struct HttpAugmenter final : Augmenter {
    HttpAugmenter(std::string host, int port, std::string path = "/augment",
                  int timeout_ms = 2000, int retries = 1);
    std::string augment(SectionKind kind, const std::string& text,
                        const OrganList& organs) override;
    std::string freeform(const std::string& demographics, const std::string& impressions,
                         const OrganList& organs) override;
    std::string name() const override { return "http"; }

  private:
    std::string post_task(const std::string& task, const char* kind, const std::string& text,
                          const OrganList& organs);
    std::string host_, path_;
    int port_, timeout_ms_, retries_;
};

// Maps every present section through the augmenter and attaches the general
// description. Augmenter failure falls back to identity with a warning.
AugmentedReport augment_report(const Report& report, const OrganList& organs,
                               Augmenter& augmenter);

// Training-time sampler: n ~ U{1..4} (capped to availability), uniform
// n-subset of available kinds, uniform order, each original section swapped
// for its augmented variant with probability p_aug.
PromptBundle sample_prompt(const Report& report, const AugmentedReport& aug, uint64_t rng_seed,
                           double p_aug = 0.5);

// Deterministic bundle of all available sections in canonical order,
// unaugmented; used for inference/eval prompts.
PromptBundle full_prompt(const Report& report, const AugmentedReport& aug);

// Greedy re-segmentation of a rendered prompt against the known section
// texts; returns false if the rendering is not recoverable.
bool parse_rendered(const std::string& rendered, const std::vector<std::string>& candidates,
                    std::vector<std::string>* out_segments = nullptr);

std::string sanitize_section(const std::string& text);

}  // namespace text2ct
