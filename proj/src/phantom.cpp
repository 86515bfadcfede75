#include "text2ct/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "text2ct/rng.hpp"

namespace text2ct {

PhantomOrgan default_organ_geometry(Organ organ) {
    switch (organ) {
        case Organ::LungRight:  // patient right = low W
            return {organ, {0.48, 0.30, 0.50}, {0.30, 0.17, 0.36}, 0.45f};
        case Organ::LungLeft:
            return {organ, {0.48, 0.70, 0.50}, {0.30, 0.17, 0.36}, 0.45f};
        case Organ::Heart:
            return {organ, {0.58, 0.54, 0.42}, {0.14, 0.14, 0.17}, 0.65f};
        case Organ::Liver:
            return {organ, {0.62, 0.38, 0.80}, {0.18, 0.19, 0.13}, 0.55f};
        case Organ::Spleen:
            return {organ, {0.60, 0.74, 0.82}, {0.09, 0.09, 0.08}, 0.60f};
        case Organ::KidneyLeft:
            return {organ, {0.72, 0.66, 0.88}, {0.06, 0.06, 0.07}, 0.58f};
        case Organ::KidneyRight:
            return {organ, {0.72, 0.34, 0.88}, {0.06, 0.06, 0.07}, 0.58f};
        case Organ::Stomach:
            return {organ, {0.55, 0.62, 0.75}, {0.10, 0.11, 0.09}, 0.35f};
        case Organ::Aorta:
            return {organ, {0.62, 0.50, 0.55}, {0.05, 0.05, 0.34}, 0.70f};
        case Organ::Trachea:
            return {organ, {0.38, 0.50, 0.22}, {0.045, 0.045, 0.20}, 0.15f};
    }
    throw ValidationError("unknown organ");
}

namespace {

struct Ellipsoid {
    std::array<double, 3> center_frac;
    std::array<double, 3> radii_frac;
    float intensity;
};

// Paints with a ~1-voxel linear edge falloff; later shapes overwrite by alpha.
void paint_ellipsoid(Tensor& vox, const Ellipsoid& e) {
    const int64_t H = vox.dim(0), W = vox.dim(1), D = vox.dim(2);
    const double ext[3] = {double(H), double(W), double(D)};
    double c[3], r[3];
    for (int i = 0; i < 3; i++) {
        c[i] = e.center_frac[static_cast<size_t>(i)] * ext[i];
        r[i] = std::max(1.0, e.radii_frac[static_cast<size_t>(i)] * ext[i]);
    }
    const double rmin = std::min({r[0], r[1], r[2]});
    const int64_t h0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(c[0] - r[0] - 2)));
    const int64_t h1 = std::min<int64_t>(H, static_cast<int64_t>(std::ceil(c[0] + r[0] + 2)));
    const int64_t w0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(c[1] - r[1] - 2)));
    const int64_t w1 = std::min<int64_t>(W, static_cast<int64_t>(std::ceil(c[1] + r[1] + 2)));
    const int64_t d0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(c[2] - r[2] - 2)));
    const int64_t d1 = std::min<int64_t>(D, static_cast<int64_t>(std::ceil(c[2] + r[2] + 2)));
    float* p = vox.data();
    for (int64_t i = h0; i < h1; i++)
        for (int64_t j = w0; j < w1; j++)
            for (int64_t k = d0; k < d1; k++) {
                const double dx = (i - c[0]) / r[0];
                const double dy = (j - c[1]) / r[1];
                const double dz = (k - c[2]) / r[2];
                const double rho = std::sqrt(dx * dx + dy * dy + dz * dz);
                const double alpha = std::clamp((1.0 - rho) * rmin + 0.5, 0.0, 1.0);
                if (alpha <= 0.0) continue;
                float& v = p[(i * W + j) * D + k];
                v = static_cast<float>(v * (1.0 - alpha) + e.intensity * alpha);
            }
}

std::array<double, 3> lesion_center_frac(LesionSide side, Rng& rng) {
    const double w_lo = side == LesionSide::Left ? 0.62 : 0.22;
    return {0.40 + 0.18 * rng.uniform(), w_lo + 0.14 * rng.uniform(),
            0.35 + 0.30 * rng.uniform()};
}

double lesion_radius_frac(LesionSize size) { return size == LesionSize::Small ? 0.055 : 0.10; }

std::string findings_text(const OrganList& organs, const std::vector<PhantomLesion>& lesions) {
    std::string s;
    for (Organ o : organs.organs) {
        const bool lesioned =
            std::any_of(lesions.begin(), lesions.end(), [&](const PhantomLesion& l) {
                return (l.side == LesionSide::Left && o == Organ::LungLeft) ||
                       (l.side == LesionSide::Right && o == Organ::LungRight);
            });
        if (lesioned) continue;
        s += strformat("The %s is unremarkable. ", organ_display(o));
    }
    for (const auto& l : lesions)
        s += strformat("There is a %s nodule in the %s lung. ", size_name(l.size),
                       side_name(l.side));
    if (!s.empty()) s.pop_back();
    return s;
}

std::string impressions_text(const std::vector<PhantomLesion>& lesions) {
    if (lesions.empty()) return "Unremarkable chest CT.";
    std::string s;
    for (const auto& l : lesions)
        s += strformat("%s nodule in the %s lung. ",
                       l.size == LesionSize::Small ? "Small" : "Large", side_name(l.side));
    s.pop_back();
    return s;
}

}  // namespace

PhantomSpec random_phantom_spec(const std::array<int64_t, 3>& shape, uint64_t seed,
                                LesionSide side) {
    Rng rng = Rng(seed).split("phantom_spec");
    PhantomSpec spec;
    spec.shape = shape;
    spec.seed = seed;
    spec.organs.push_back(default_organ_geometry(Organ::LungRight));
    spec.organs.push_back(default_organ_geometry(Organ::LungLeft));
    spec.organs.push_back(default_organ_geometry(Organ::Heart));
    for (Organ o : {Organ::Liver, Organ::Spleen, Organ::KidneyLeft, Organ::KidneyRight,
                    Organ::Stomach, Organ::Aorta, Organ::Trachea})
        if (rng.uniform() < 0.5) spec.organs.push_back(default_organ_geometry(o));
    PhantomLesion lesion;
    lesion.side = side;
    lesion.size = rng.uniform() < 0.5 ? LesionSize::Small : LesionSize::Large;
    spec.lesions.push_back(lesion);
    return spec;
}

GroundTruth generate_phantom(const PhantomSpec& spec) {
    std::set<Organ> seen;
    for (const auto& o : spec.organs) {
        if (!seen.insert(o.organ).second)
            throw ValidationError(strformat("generate_phantom: organ \"%s\" listed twice",
                                            organ_key(o.organ)));
        for (int i = 0; i < 3; i++) {
            const double c = o.center_frac[static_cast<size_t>(i)];
            const double r = o.radii_frac[static_cast<size_t>(i)];
            if (c < 0.0 || c > 1.0 || r <= 0.0 || r > 1.0)
                throw ValidationError(strformat(
                    "generate_phantom: organ \"%s\" center/radii outside the unit cube",
                    organ_key(o.organ)));
        }
    }
    Rng rng = Rng(spec.seed).split("phantom_render");

    GroundTruth gt;
    gt.volume.voxels = Tensor::zeros({spec.shape[0], spec.shape[1], spec.shape[2]});
    gt.volume.spacing_mm = {1.0, 1.0, 1.0};

    // Torso shell, then organs in spec order, lesions last (brightest).
    paint_ellipsoid(gt.volume.voxels, {{0.52, 0.50, 0.50}, {0.42, 0.44, 0.52}, 0.25f});
    for (const auto& o : spec.organs)
        paint_ellipsoid(gt.volume.voxels, {o.center_frac, o.radii_frac, o.intensity});
    for (const auto& l : spec.lesions) {
        const auto c = lesion_center_frac(l.side, rng);
        const double rf = lesion_radius_frac(l.size);
        paint_ellipsoid(gt.volume.voxels, {c, {rf, rf, rf * 2.0}, l.intensity});
        LesionAnnotation ann;
        ann.side = l.side;
        ann.size = l.size;
        for (int i = 0; i < 3; i++)
            ann.centroid_vox[static_cast<size_t>(i)] = static_cast<int64_t>(
                std::llround(c[static_cast<size_t>(i)] * static_cast<double>(spec.shape[static_cast<size_t>(i)])));
        gt.lesions.push_back(ann);
    }
    gt.volume.validate();

    for (const auto& o : spec.organs) gt.organ_list.organs.push_back(o.organ);
    gt.organ_list.canonicalize();

    const int age = 25 + static_cast<int>(rng.uniform_int(61));
    const char* sex = rng.uniform() < 0.5 ? "female" : "male";
    gt.report.demographics = strformat("Patient is a %d year old %s.", age, sex);
    gt.report.findings = findings_text(gt.organ_list, spec.lesions);
    gt.report.impressions = impressions_text(spec.lesions);
    gt.report.validate();
    return gt;
}

std::vector<GroundTruth> make_corpus(int n, const std::array<int64_t, 3>& shape, uint64_t seed,
                                     double omission_rate) {
    if (n < 1) throw ValidationError("make_corpus: n must be >= 1");
    std::vector<GroundTruth> out;
    out.reserve(static_cast<size_t>(n));
    Rng base(seed);
    for (int i = 0; i < n; i++) {
        const LesionSide side = (i % 2 == 0) ? LesionSide::Left : LesionSide::Right;
        const uint64_t pseed = base.split(static_cast<uint64_t>(i)).next_u64();
        GroundTruth gt = generate_phantom(random_phantom_spec(shape, pseed, side));
        Rng omit = base.split(static_cast<uint64_t>(i)).split("omission");
        if (omit.uniform() < omission_rate) {
            switch (omit.uniform_int(3)) {
                case 0: gt.report.demographics.reset(); break;
                case 1: gt.report.findings.reset(); break;
                default: gt.report.impressions.reset(); break;
            }
        }
        gt.report.validate();
        out.push_back(std::move(gt));
    }
    return out;
}

std::optional<LesionSide> parse_lesion_side(const Report& report) {
    auto scan = [](const std::optional<std::string>& s) -> std::optional<LesionSide> {
        if (!s) return std::nullopt;
        std::string lower = *s;
        std::transform(lower.begin(), lower.end(), lower.begin(),
                       [](unsigned char c) { return std::tolower(c); });
        const bool left = lower.find("left lung") != std::string::npos &&
                          lower.find("nodule") != std::string::npos;
        const bool right = lower.find("right lung") != std::string::npos &&
                           lower.find("nodule") != std::string::npos;
        if (left && !right) return LesionSide::Left;
        if (right && !left) return LesionSide::Right;
        return std::nullopt;
    };
    if (auto s = scan(report.impressions)) return s;
    if (auto s = scan(report.findings)) return s;
    return std::nullopt;
}

namespace {

// Separable 1D box sum of radius r along the given axis of an (H, W, D) grid.
std::vector<float> box_pass(const std::vector<float>& in, int64_t H, int64_t W, int64_t D,
                            int axis, int64_t r) {
    std::vector<float> out(in.size(), 0.0f);
    const int64_t dims[3] = {H, W, D};
    const int64_t strides[3] = {W * D, D, 1};
    const int64_t n = dims[axis];
    const int64_t s = strides[axis];
    const int64_t o1 = axis == 0 ? 1 : 0;
    const int64_t o2 = axis == 2 ? 1 : 2;
    for (int64_t a = 0; a < dims[o1]; a++)
        for (int64_t b = 0; b < dims[o2]; b++) {
            const int64_t base = a * strides[o1] + b * strides[o2];
            double run = 0.0;
            for (int64_t i = 0; i < std::min(n, r); i++) run += in[static_cast<size_t>(base + i * s)];
            for (int64_t i = 0; i < n; i++) {
                if (i + r < n) run += in[static_cast<size_t>(base + (i + r) * s)];
                if (i - r - 1 >= 0) run -= in[static_cast<size_t>(base + (i - r - 1) * s)];
                out[static_cast<size_t>(base + i * s)] = static_cast<float>(run);
            }
        }
    return out;
}

}  // namespace

LesionSide detect_lesion_side(const Volume3D& vol, int64_t lesion_radius_vox) {
    const int64_t H = vol.h(), W = vol.w(), D = vol.d();
    const int64_t r = std::max<int64_t>(1, lesion_radius_vox);
    const int64_t rs = 3 * r;  // surround scale
    std::vector<float> vals(vol.voxels.data(), vol.voxels.data() + vol.voxels.numel());
    std::vector<float> ones(vals.size(), 1.0f);
    auto box3 = [&](std::vector<float> v, int64_t rad) {
        for (int axis = 0; axis < 3; axis++) v = box_pass(v, H, W, D, axis, rad);
        return v;
    };
    const std::vector<float> sum_c = box3(vals, r);
    const std::vector<float> cnt_c = box3(ones, r);
    const std::vector<float> sum_s = box3(vals, rs);
    const std::vector<float> cnt_s = box3(std::move(ones), rs);
    // Center-surround contrast picks lesion-scale blobs over large organs.
    int64_t best_idx = 0;
    float best = -1e30f;
    for (size_t i = 0; i < vals.size(); i++) {
        const float score = sum_c[i] / cnt_c[i] - sum_s[i] / cnt_s[i];
        if (score > best) {
            best = score;
            best_idx = static_cast<int64_t>(i);
        }
    }
    const int64_t best_w = (best_idx / D) % W;
    return best_w >= W / 2 ? LesionSide::Left : LesionSide::Right;
}

}  // namespace text2ct
