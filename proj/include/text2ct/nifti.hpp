#pragma once

#include <string>

#include "text2ct/volume.hpp"

namespace text2ct {

// Minimal NIfTI-1 support: float32/float64/int16/int32/uint8 voxels with
// scl_slope/scl_inter applied, plain or gzip-compressed. Loads reorient the
// grid to canonical RAS; only axis-aligned affines are accepted.
RawScan read_nifti(const std::string& path);

// Writes float32, sform = diag(spacing) in RAS.
void write_nifti(const Tensor& voxels, const std::array<double, 3>& spacing_mm,
                 const std::string& path);

}  // namespace text2ct
