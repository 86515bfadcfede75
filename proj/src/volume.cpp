#include "text2ct/volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <nlohmann/json.hpp>

#include "text2ct/nifti.hpp"

namespace text2ct {

void Volume3D::validate() const {
    if (voxels.rank() != 3) throw ValidationError("volume: voxels must be rank 3");
    for (int i = 0; i < 3; i++)
        if (spacing_mm[static_cast<size_t>(i)] <= 0.0)
            throw ValidationError("volume: spacing components must be strictly positive");
    const float* p = voxels.data();
    for (int64_t i = 0; i < voxels.numel(); i++)
        if (!(p[i] >= 0.0f && p[i] <= 1.0f))
            throw ValidationError(strformat("volume: voxel %lld = %g outside [0,1]",
                                            static_cast<long long>(i), p[i]));
    if (orientation != "RAS") throw ValidationError("volume: orientation must be RAS");
}

Volume3D normalize_hu(const RawScan& scan) {
    if (scan.voxels.rank() != 3) throw ValidationError("normalize_hu: voxels must be rank 3");
    Volume3D out;
    out.voxels = Tensor(scan.voxels.dims());
    out.spacing_mm = scan.spacing_mm;
    out.orientation = scan.orientation;
    const float* p = scan.voxels.data();
    float* q = out.voxels.data();
    for (int64_t i = 0; i < scan.voxels.numel(); i++) {
        if (!std::isfinite(p[i]))
            throw ValidationError(
                strformat("normalize_hu: non-finite voxel at %lld", static_cast<long long>(i)));
        const float v = std::clamp(p[i], -1000.0f, 1000.0f);
        q[i] = (v + 1000.0f) / 2000.0f;
    }
    return out;
}

namespace {

// Trilinear sample with voxel-center alignment and edge clamping.
float sample_trilinear(const Tensor& t, double x, double y, double z) {
    const int64_t X = t.dim(0), Y = t.dim(1), Z = t.dim(2);
    auto prep = [](double c, int64_t n, int64_t& i0, int64_t& i1, float& f) {
        double fl = std::floor(c);
        i0 = static_cast<int64_t>(fl);
        f = static_cast<float>(c - fl);
        i1 = i0 + 1;
        if (i0 < 0) i0 = 0;
        if (i0 > n - 1) i0 = n - 1;
        if (i1 < 0) i1 = 0;
        if (i1 > n - 1) i1 = n - 1;
    };
    int64_t x0, x1, y0, y1, z0, z1;
    float fx, fy, fz;
    prep(x, X, x0, x1, fx);
    prep(y, Y, y0, y1, fy);
    prep(z, Z, z0, z1, fz);
    const float* p = t.data();
    auto v = [&](int64_t a, int64_t b, int64_t c) { return p[(a * Y + b) * Z + c]; };
    const float c00 = v(x0, y0, z0) * (1 - fz) + v(x0, y0, z1) * fz;
    const float c01 = v(x0, y1, z0) * (1 - fz) + v(x0, y1, z1) * fz;
    const float c10 = v(x1, y0, z0) * (1 - fz) + v(x1, y0, z1) * fz;
    const float c11 = v(x1, y1, z0) * (1 - fz) + v(x1, y1, z1) * fz;
    return (c00 * (1 - fy) + c01 * fy) * (1 - fx) + (c10 * (1 - fy) + c11 * fy) * fx;
}

Tensor center_crop_or_pad(const Tensor& in, const std::array<int64_t, 3>& target) {
    const int64_t X = in.dim(0), Y = in.dim(1), Z = in.dim(2);
    if (X == target[0] && Y == target[1] && Z == target[2]) return in;
    Tensor out = Tensor::zeros({target[0], target[1], target[2]});
    // Overlap window between the centered source and destination grids.
    auto rng = [](int64_t src, int64_t dst, int64_t& s0, int64_t& d0, int64_t& len) {
        const int64_t off = (src - dst) / 2;  // may be negative (pad)
        s0 = std::max<int64_t>(0, off);
        d0 = std::max<int64_t>(0, -off);
        len = std::min(src - s0, dst - d0);
    };
    int64_t sx, dx, lx, sy, dy, ly, sz, dz, lz;
    rng(X, target[0], sx, dx, lx);
    rng(Y, target[1], sy, dy, ly);
    rng(Z, target[2], sz, dz, lz);
    const float* p = in.data();
    float* q = out.data();
    for (int64_t i = 0; i < lx; i++)
        for (int64_t j = 0; j < ly; j++)
            std::memcpy(q + ((dx + i) * target[1] + dy + j) * target[2] + dz,
                        p + ((sx + i) * Y + sy + j) * Z + sz, sizeof(float) * lz);
    return out;
}

}  // namespace

Volume3D resample_and_crop(const Volume3D& vol, const std::array<double, 3>& target_spacing_mm,
                           const std::array<int64_t, 3>& target_shape) {
    for (int i = 0; i < 3; i++) {
        if (target_shape[static_cast<size_t>(i)] % 4 != 0)
            throw ConfigError(strformat("resample_and_crop: target shape axis %d = %lld not "
                                        "divisible by 4",
                                        i, static_cast<long long>(target_shape[static_cast<size_t>(i)])));
        if (target_spacing_mm[static_cast<size_t>(i)] <= 0.0)
            throw ConfigError("resample_and_crop: target spacing must be positive");
    }
    const std::array<int64_t, 3> in_shape{vol.voxels.dim(0), vol.voxels.dim(1), vol.voxels.dim(2)};

    Tensor resampled;
    bool same_spacing = true;
    for (int i = 0; i < 3; i++)
        same_spacing &= vol.spacing_mm[static_cast<size_t>(i)] ==
                        target_spacing_mm[static_cast<size_t>(i)];
    if (same_spacing) {
        resampled = vol.voxels;
    } else {
        std::array<int64_t, 3> new_shape;
        std::array<double, 3> ratio;
        for (int i = 0; i < 3; i++) {
            ratio[static_cast<size_t>(i)] = target_spacing_mm[static_cast<size_t>(i)] /
                                            vol.spacing_mm[static_cast<size_t>(i)];
            new_shape[static_cast<size_t>(i)] = std::max<int64_t>(
                1, static_cast<int64_t>(std::llround(static_cast<double>(in_shape[static_cast<size_t>(i)]) /
                                                     ratio[static_cast<size_t>(i)])));
        }
        resampled = Tensor({new_shape[0], new_shape[1], new_shape[2]});
        float* q = resampled.data();
        for (int64_t i = 0; i < new_shape[0]; i++) {
            const double x = (static_cast<double>(i) + 0.5) * ratio[0] - 0.5;
            for (int64_t j = 0; j < new_shape[1]; j++) {
                const double y = (static_cast<double>(j) + 0.5) * ratio[1] - 0.5;
                for (int64_t k = 0; k < new_shape[2]; k++) {
                    const double z = (static_cast<double>(k) + 0.5) * ratio[2] - 0.5;
                    *q++ = sample_trilinear(vol.voxels, x, y, z);
                }
            }
        }
    }

    Volume3D out;
    out.voxels = center_crop_or_pad(resampled, target_shape).clone();
    out.spacing_mm = target_spacing_mm;
    out.orientation = vol.orientation;
    return out;
}

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

void save_raw(const Volume3D& vol, const std::string& path) {
    std::ofstream blob(path, std::ios::binary);
    if (!blob) throw IOError("save_volume: cannot open " + path);
    blob.write(reinterpret_cast<const char*>(vol.voxels.data()),
               static_cast<std::streamsize>(vol.voxels.numel() * sizeof(float)));
    if (!blob) throw IOError("save_volume: short write to " + path);
    blob.close();

    nlohmann::json side;
    side["shape"] = {vol.voxels.dim(0), vol.voxels.dim(1), vol.voxels.dim(2)};
    side["spacing_mm"] = vol.spacing_mm;
    side["orientation"] = vol.orientation;
    std::ofstream js(path + ".json");
    if (!js) throw IOError("save_volume: cannot open sidecar " + path + ".json");
    js << side.dump(2) << "\n";
}

RawScan load_raw(const std::string& path) {
    std::ifstream js(path + ".json");
    if (!js) throw IOError("load_volume: missing sidecar " + path + ".json");
    nlohmann::json side;
    try {
        js >> side;
    } catch (const std::exception& e) {
        throw IOError(strformat("load_volume: malformed sidecar %s.json: %s", path.c_str(),
                                e.what()));
    }
    for (const char* field : {"shape", "spacing_mm", "orientation"})
        if (!side.contains(field))
            throw IOError(strformat("load_volume: sidecar missing field \"%s\"", field));
    auto shape = side["shape"].get<std::vector<int64_t>>();
    if (shape.size() != 3) throw IOError("load_volume: sidecar field \"shape\" must have 3 dims");

    std::ifstream blob(path, std::ios::binary | std::ios::ate);
    if (!blob) throw IOError("load_volume: cannot open " + path);
    const auto bytes = static_cast<int64_t>(blob.tellg());
    const int64_t expect = shape[0] * shape[1] * shape[2] * static_cast<int64_t>(sizeof(float));
    if (bytes != expect)
        throw IOError(strformat("load_volume: sidecar field \"shape\" %lldx%lldx%lld implies %lld "
                                "bytes but blob has %lld",
                                static_cast<long long>(shape[0]), static_cast<long long>(shape[1]),
                                static_cast<long long>(shape[2]), static_cast<long long>(expect),
                                static_cast<long long>(bytes)));
    blob.seekg(0);
    RawScan scan;
    scan.voxels = Tensor({shape[0], shape[1], shape[2]});
    blob.read(reinterpret_cast<char*>(scan.voxels.data()), expect);
    if (!blob) throw IOError("load_volume: short read from " + path);
    auto spacing = side["spacing_mm"].get<std::vector<double>>();
    if (spacing.size() != 3)
        throw IOError("load_volume: sidecar field \"spacing_mm\" must have 3 entries");
    scan.spacing_mm = {spacing[0], spacing[1], spacing[2]};
    scan.orientation = side["orientation"].get<std::string>();
    return scan;
}

}  // namespace

void save_volume(const Volume3D& vol, const std::string& path) {
    if (ends_with(path, ".nii") || ends_with(path, ".nii.gz"))
        write_nifti(vol.voxels, vol.spacing_mm, path);
    else if (ends_with(path, ".raw"))
        save_raw(vol, path);
    else
        throw IOError("save_volume: unsupported extension (want .raw, .nii or .nii.gz): " + path);
}

RawScan load_volume(const std::string& path) {
    if (ends_with(path, ".nii") || ends_with(path, ".nii.gz")) return read_nifti(path);
    if (ends_with(path, ".raw")) return load_raw(path);
    throw IOError("load_volume: unsupported extension (want .raw, .nii or .nii.gz): " + path);
}

Volume3D volume_from_unit_scan(const RawScan& scan) {
    Volume3D v;
    v.voxels = scan.voxels;
    v.spacing_mm = scan.spacing_mm;
    v.orientation = scan.orientation;
    v.validate();
    return v;
}

}  // namespace text2ct
