#pragma once

#include <array>
#include <string>

#include "text2ct/tensor.hpp"

namespace text2ct {

// Pre-normalization scan in Hounsfield units (or any finite intensity).
struct RawScan {
    Tensor voxels;  // (H, W, D)
    std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};
    std::string orientation = "RAS";
};

// Canonical volume: intensities in [0, 1], RAS orientation.
// Axis order is (H, W, D) with D fastest in memory. Laterality convention:
// the patient's left side is stored at high W index.
struct Volume3D {
    Tensor voxels;  // (H, W, D)
    std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};
    std::string orientation = "RAS";

    int64_t h() const { return voxels.dim(0); }
    int64_t w() const { return voxels.dim(1); }
    int64_t d() const { return voxels.dim(2); }
    void validate() const;
};

// Clip to [-1000, 1000] HU and scale affinely to [0, 1].
Volume3D normalize_hu(const RawScan& scan);

// Trilinear resample to the target spacing (voxel-center aligned, edges
// clamped), then center-crop or symmetric zero-pad to the target shape.
// Target dims must each be divisible by 4.
Volume3D resample_and_crop(const Volume3D& vol, const std::array<double, 3>& target_spacing_mm,
                           const std::array<int64_t, 3>& target_shape);

// Raw little-endian float32 blob + JSON sidecar at <path>.json with fields
// shape, spacing_mm, orientation. `save_volume` dispatches on extension:
// .raw -> blob+sidecar, .nii/.nii.gz -> NIfTI-1.
void save_volume(const Volume3D& vol, const std::string& path);
RawScan load_volume(const std::string& path);

// Reinterpret an already-normalized scan (e.g. a raw round-trip) as Volume3D.
Volume3D volume_from_unit_scan(const RawScan& scan);

}  // namespace text2ct
