#pragma once

#include <optional>
#include <string>
#include <vector>

#include "text2ct/common.hpp"

namespace text2ct {

// Fixed organ vocabulary; enum order is the canonical listing order.
enum class Organ {
    LungLeft,
    LungRight,
    Heart,
    Liver,
    Spleen,
    KidneyLeft,
    KidneyRight,
    Stomach,
    Aorta,
    Trachea,
};
constexpr int kOrganCount = 10;

const char* organ_key(Organ o);      // "lung_left"
const char* organ_display(Organ o);  // "left lung"
Organ organ_from_key(const std::string& key);

// Ordered set of canonical organ names, nonempty.
struct OrganList {
    std::vector<Organ> organs;

    static OrganList from_keys(const std::vector<std::string>& keys);
    void canonicalize();  // sort to enum order, dedupe
    void validate() const;
    std::vector<std::string> keys() const;
};

// Sectioned radiology report; at least one section present.
struct Report {
    std::optional<std::string> demographics;
    std::optional<std::string> findings;
    std::optional<std::string> impressions;

    void validate() const;
    int section_count() const {
        return (demographics ? 1 : 0) + (findings ? 1 : 0) + (impressions ? 1 : 0);
    }
};

}  // namespace text2ct
