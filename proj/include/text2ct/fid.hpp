#pragma once

#include <array>

#include "text2ct/nn.hpp"
#include "text2ct/volume.hpp"

namespace text2ct {

enum class View { Axial, Sagittal, Coronal };
const char* view_name(View v);

// Axial slices are constant-D planes (H x W), sagittal constant-H (W x D),
// coronal constant-W (H x D).
struct ViewSliceSet {
    View view = View::Axial;
    std::vector<Tensor> slices;  // 2D each
    std::string source_id;
};

std::array<ViewSliceSet, 3> slice_views(const Volume3D& vol);
// Inverse of slice_views for a complete set; bitwise round-trip.
Tensor reassemble_view(const ViewSliceSet& set);

Tensor resize_bilinear_2d(const Tensor& img, int64_t out_h, int64_t out_w);

// Fixed-seed frozen random conv features over 3-channel replicated 32x32
// slices; training-free but distribution-sensitive.
struct FidExtractor {
    int width = 64;
    int input_size = 32;
    uint64_t seed = 17;
    nn::Conv3d c1, c2, c3;

    FidExtractor(int width_ = 64, uint64_t seed_ = 17);
    Tensor features(const Tensor& slice2d) const;  // -> (width)
    uint64_t fingerprint() const;
};

// Frechet distance between Gaussian fits; covariances get +1e-6 I before the
// matrix square root so rank-deficient inputs stay finite.
double frechet_gaussian(const Tensor& mu_r, const Tensor& cov_r, const Tensor& mu_g,
                        const Tensor& cov_g);
double frechet_from_features(const std::vector<Tensor>& real, const std::vector<Tensor>& gen);

struct FidResult {
    double axial = 0.0, sagittal = 0.0, coronal = 0.0, avg = 0.0;
};

// Gaussian fit over pooled slice features of all volumes, per view.
FidResult fid(const std::vector<std::array<ViewSliceSet, 3>>& real,
              const std::vector<std::array<ViewSliceSet, 3>>& gen, const FidExtractor& fx);

}  // namespace text2ct
