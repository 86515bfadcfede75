#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "text2ct/prompt_types.hpp"
#include "text2ct/volume.hpp"

namespace text2ct {

enum class LesionSide { Left, Right };
enum class LesionSize { Small, Large };

inline const char* side_name(LesionSide s) { return s == LesionSide::Left ? "left" : "right"; }
inline const char* size_name(LesionSize s) { return s == LesionSize::Small ? "small" : "large"; }

struct PhantomOrgan {
    Organ organ;
    std::array<double, 3> center_frac;  // of (H, W, D), in the unit cube
    std::array<double, 3> radii_frac;
    float intensity;
};

struct PhantomLesion {
    LesionSide side;
    LesionSize size;
    float intensity = 0.95f;
};

struct PhantomSpec {
    std::array<int64_t, 3> shape{64, 64, 32};
    uint64_t seed = 0;
    std::vector<PhantomOrgan> organs;
    std::vector<PhantomLesion> lesions;
};

struct LesionAnnotation {
    LesionSide side;
    LesionSize size;
    std::array<int64_t, 3> centroid_vox;
};

struct GroundTruth {
    Volume3D volume;
    OrganList organ_list;
    Report report;
    std::vector<LesionAnnotation> lesions;
};

// Organ geometry for the fixed vocabulary at default intensities.
// Laterality follows the volume convention: patient left at high W index.
PhantomOrgan default_organ_geometry(Organ organ);

// Spec with lungs + heart, a random extra-organ subset and one lesion.
PhantomSpec random_phantom_spec(const std::array<int64_t, 3>& shape, uint64_t seed,
                                LesionSide side);

// Renders soft-edged ellipsoids over an air background and emits the matching
// sectioned report. Deterministic given spec.seed.
GroundTruth generate_phantom(const PhantomSpec& spec);

// n phantoms with lesion sides balanced 50/50 (+-1), varied organ subsets and
// randomly omitted report sections (P(>=1 omitted) = omission_rate).
std::vector<GroundTruth> make_corpus(int n, const std::array<int64_t, 3>& shape, uint64_t seed,
                                     double omission_rate = 0.3);

// Lesion-side token recovery from report text ("left"/"right").
std::optional<LesionSide> parse_lesion_side(const Report& report);

// Side of the brightest lesion-scale blob: box-filter at the lesion radius,
// argmax, then compare the W coordinate against the midline.
LesionSide detect_lesion_side(const Volume3D& vol, int64_t lesion_radius_vox);

}  // namespace text2ct
