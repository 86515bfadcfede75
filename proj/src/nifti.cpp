#include "text2ct/nifti.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <vector>

namespace text2ct {

namespace {

#pragma pack(push, 1)
struct Nifti1Header {
    int32_t sizeof_hdr;
    char data_type[10];
    char db_name[18];
    int32_t extents;
    int16_t session_error;
    char regular;
    char dim_info;
    int16_t dim[8];
    float intent_p1, intent_p2, intent_p3;
    int16_t intent_code;
    int16_t datatype;
    int16_t bitpix;
    int16_t slice_start;
    float pixdim[8];
    float vox_offset;
    float scl_slope;
    float scl_inter;
    int16_t slice_end;
    char slice_code;
    char xyzt_units;
    float cal_max, cal_min;
    float slice_duration, toffset;
    int32_t glmax, glmin;
    char descrip[80];
    char aux_file[24];
    int16_t qform_code, sform_code;
    float quatern_b, quatern_c, quatern_d;
    float qoffset_x, qoffset_y, qoffset_z;
    float srow_x[4], srow_y[4], srow_z[4];
    char intent_name[16];
    char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Nifti1Header) == 348, "nifti-1 header must be 348 bytes");

template <typename T>
void bswap(T& v) {
    auto* p = reinterpret_cast<unsigned char*>(&v);
    for (size_t i = 0; i < sizeof(T) / 2; i++) std::swap(p[i], p[sizeof(T) - 1 - i]);
}

void swap_header(Nifti1Header& h) {
    bswap(h.sizeof_hdr);
    for (auto& d : h.dim) bswap(d);
    bswap(h.datatype);
    bswap(h.bitpix);
    for (auto& p : h.pixdim) bswap(p);
    bswap(h.vox_offset);
    bswap(h.scl_slope);
    bswap(h.scl_inter);
    bswap(h.qform_code);
    bswap(h.sform_code);
    bswap(h.quatern_b);
    bswap(h.quatern_c);
    bswap(h.quatern_d);
    bswap(h.qoffset_x);
    bswap(h.qoffset_y);
    bswap(h.qoffset_z);
    for (auto& v : h.srow_x) bswap(v);
    for (auto& v : h.srow_y) bswap(v);
    for (auto& v : h.srow_z) bswap(v);
}

struct GzCloser {
    void operator()(gzFile f) const {
        if (f) gzclose(f);
    }
};
using GzPtr = std::unique_ptr<gzFile_s, GzCloser>;

// 3x3 direction matrix (voxel axis -> world mm).
void affine_of(const Nifti1Header& h, double a[3][3]) {
    if (h.sform_code > 0) {
        const float* rows[3] = {h.srow_x, h.srow_y, h.srow_z};
        for (int i = 0; i < 3; i++)
            for (int j = 0; j < 3; j++) a[i][j] = rows[i][j];
        return;
    }
    if (h.qform_code > 0) {
        const double b = h.quatern_b, c = h.quatern_c, d = h.quatern_d;
        double a0sq = 1.0 - b * b - c * c - d * d;
        const double qa = a0sq > 0 ? std::sqrt(a0sq) : 0.0;
        const double qfac = h.pixdim[0] < 0.0f ? -1.0 : 1.0;
        const double r[3][3] = {
            {qa * qa + b * b - c * c - d * d, 2 * b * c - 2 * qa * d, 2 * b * d + 2 * qa * c},
            {2 * b * c + 2 * qa * d, qa * qa + c * c - b * b - d * d, 2 * c * d - 2 * qa * b},
            {2 * b * d - 2 * qa * c, 2 * c * d + 2 * qa * b, qa * qa + d * d - c * c - b * b}};
        for (int i = 0; i < 3; i++)
            for (int j = 0; j < 3; j++)
                a[i][j] = r[i][j] * h.pixdim[1 + j] * (j == 2 ? qfac : 1.0);
        return;
    }
    for (int i = 0; i < 3; i++)
        for (int j = 0; j < 3; j++) a[i][j] = i == j ? h.pixdim[1 + i] : 0.0;
}

}  // namespace

RawScan read_nifti(const std::string& path) {
    GzPtr f(gzopen(path.c_str(), "rb"));
    if (!f) throw IOError("read_nifti: cannot open " + path);
    Nifti1Header h;
    if (gzread(f.get(), &h, sizeof(h)) != static_cast<int>(sizeof(h)))
        throw IOError("read_nifti: truncated header in " + path);
    bool swapped = false;
    if (h.sizeof_hdr != 348) {
        bswap(h.sizeof_hdr);
        if (h.sizeof_hdr != 348)
            throw IOError("read_nifti: malformed header field sizeof_hdr in " + path);
        bswap(h.sizeof_hdr);  // restore, swap everything in one place
        swap_header(h);
        swapped = true;
    }
    if (std::strncmp(h.magic, "n+1", 3) != 0 && std::strncmp(h.magic, "ni1", 3) != 0)
        throw IOError("read_nifti: malformed header field magic in " + path);
    if (h.dim[0] < 3) throw IOError("read_nifti: header field dim[0] < 3 in " + path);
    for (int i = 4; i <= h.dim[0]; i++)
        if (h.dim[i] > 1)
            throw IOError(strformat("read_nifti: %s has dim[%d]=%d, only 3D volumes supported",
                                    path.c_str(), i, h.dim[i]));
    const int64_t nx = h.dim[1], ny = h.dim[2], nz = h.dim[3];
    if (nx < 1 || ny < 1 || nz < 1)
        throw IOError("read_nifti: malformed header field dim in " + path);

    const int64_t n = nx * ny * nz;
    const int bytes_per = h.bitpix / 8;
    // Skip to vox_offset (extensions etc.).
    const auto off = static_cast<int64_t>(h.vox_offset);
    if (off < 348) throw IOError("read_nifti: malformed header field vox_offset in " + path);
    std::vector<char> skip(static_cast<size_t>(off - 348));
    if (!skip.empty() &&
        gzread(f.get(), skip.data(), static_cast<unsigned>(skip.size())) !=
            static_cast<int>(skip.size()))
        throw IOError("read_nifti: truncated extension block in " + path);

    std::vector<char> buf(static_cast<size_t>(n * bytes_per));
    if (gzread(f.get(), buf.data(), static_cast<unsigned>(buf.size())) !=
        static_cast<int>(buf.size()))
        throw IOError("read_nifti: truncated voxel data in " + path);

    const float slope = (h.scl_slope == 0.0f || !std::isfinite(h.scl_slope)) ? 1.0f : h.scl_slope;
    const float inter = std::isfinite(h.scl_inter) ? h.scl_inter : 0.0f;
    std::vector<float> vals(static_cast<size_t>(n));
    auto convert = [&](auto* p) {
        for (int64_t i = 0; i < n; i++) {
            auto v = p[i];
            if (swapped) bswap(v);
            vals[static_cast<size_t>(i)] = slope * static_cast<float>(v) + inter;
        }
    };
    switch (h.datatype) {
        case 2: convert(reinterpret_cast<uint8_t*>(buf.data())); break;
        case 4: convert(reinterpret_cast<int16_t*>(buf.data())); break;
        case 8: convert(reinterpret_cast<int32_t*>(buf.data())); break;
        case 16: convert(reinterpret_cast<float*>(buf.data())); break;
        case 64: convert(reinterpret_cast<double*>(buf.data())); break;
        default:
            throw IOError(strformat("read_nifti: unsupported header field datatype=%d in %s",
                                    h.datatype, path.c_str()));
    }

    // Orientation: accept axis-aligned affines only, reorient to RAS.
    double a[3][3];
    affine_of(h, a);
    int perm[3];   // voxel axis j -> world axis
    int sign[3];
    double sp[3];  // voxel axis j spacing
    bool world_used[3] = {false, false, false};
    for (int j = 0; j < 3; j++) {
        int best = 0;
        for (int i = 1; i < 3; i++)
            if (std::fabs(a[i][j]) > std::fabs(a[best][j])) best = i;
        const double mag = std::fabs(a[best][j]);
        if (mag <= 0.0)
            throw IOError(strformat("read_nifti: degenerate affine column %d in %s", j,
                                    path.c_str()));
        for (int i = 0; i < 3; i++)
            if (i != best && std::fabs(a[i][j]) > 1e-3 * mag)
                throw IOError(strformat(
                    "read_nifti: oblique affine in %s (column %d), only axis-aligned volumes "
                    "are supported",
                    path.c_str(), j));
        perm[j] = best;
        sign[j] = a[best][j] >= 0.0 ? 1 : -1;
        sp[j] = mag;
        if (world_used[best])
            throw IOError("read_nifti: malformed affine (repeated world axis) in " + path);
        world_used[best] = true;
    }

    const int64_t dims_in[3] = {nx, ny, nz};
    int src_axis_of_world[3];
    for (int j = 0; j < 3; j++) src_axis_of_world[perm[j]] = j;

    RawScan scan;
    std::array<int64_t, 3> dims_out{};
    for (int w = 0; w < 3; w++) {
        const int j = src_axis_of_world[w];
        dims_out[static_cast<size_t>(w)] = dims_in[j];
        scan.spacing_mm[static_cast<size_t>(w)] = sp[j];
    }
    scan.voxels = Tensor({dims_out[0], dims_out[1], dims_out[2]});
    scan.orientation = "RAS";
    float* q = scan.voxels.data();
    int64_t src[3];
    for (int64_t x = 0; x < dims_out[0]; x++)
        for (int64_t y = 0; y < dims_out[1]; y++)
            for (int64_t z = 0; z < dims_out[2]; z++) {
                const int64_t out_idx[3] = {x, y, z};
                for (int w = 0; w < 3; w++) {
                    const int j = src_axis_of_world[w];
                    src[j] = sign[j] > 0 ? out_idx[w] : dims_in[j] - 1 - out_idx[w];
                }
                // NIfTI stores the first axis fastest.
                q[(x * dims_out[1] + y) * dims_out[2] + z] =
                    vals[static_cast<size_t>(src[0] + nx * (src[1] + ny * src[2]))];
            }
    return scan;
}

void write_nifti(const Tensor& voxels, const std::array<double, 3>& spacing_mm,
                 const std::string& path) {
    if (voxels.rank() != 3) throw IOError("write_nifti: voxels must be rank 3");
    Nifti1Header h;
    std::memset(&h, 0, sizeof(h));
    h.sizeof_hdr = 348;
    h.regular = 'r';
    h.dim[0] = 3;
    h.dim[1] = static_cast<int16_t>(voxels.dim(0));
    h.dim[2] = static_cast<int16_t>(voxels.dim(1));
    h.dim[3] = static_cast<int16_t>(voxels.dim(2));
    for (int i = 4; i < 8; i++) h.dim[i] = 1;
    h.datatype = 16;  // float32
    h.bitpix = 32;
    h.pixdim[0] = 1.0f;
    for (int i = 0; i < 3; i++) h.pixdim[1 + i] = static_cast<float>(spacing_mm[static_cast<size_t>(i)]);
    h.vox_offset = 352.0f;
    h.scl_slope = 1.0f;
    h.scl_inter = 0.0f;
    h.sform_code = 1;
    h.srow_x[0] = static_cast<float>(spacing_mm[0]);
    h.srow_y[1] = static_cast<float>(spacing_mm[1]);
    h.srow_z[2] = static_cast<float>(spacing_mm[2]);
    std::memcpy(h.magic, "n+1", 4);

    const int64_t nx = voxels.dim(0), ny = voxels.dim(1), nz = voxels.dim(2);
    std::vector<float> data(static_cast<size_t>(nx * ny * nz));
    const float* p = voxels.data();
    for (int64_t x = 0; x < nx; x++)
        for (int64_t y = 0; y < ny; y++)
            for (int64_t z = 0; z < nz; z++)
                data[static_cast<size_t>(x + nx * (y + ny * z))] = p[(x * ny + y) * nz + z];

    const char ext[4] = {0, 0, 0, 0};
    const bool gz = path.size() > 3 && path.compare(path.size() - 3, 3, ".gz") == 0;
    GzPtr f(gzopen(path.c_str(), gz ? "wb" : "wbT"));  // T = no compression (stored)
    if (!f) throw IOError("write_nifti: cannot open " + path);
    if (gzwrite(f.get(), &h, sizeof(h)) != static_cast<int>(sizeof(h)) ||
        gzwrite(f.get(), ext, 4) != 4 ||
        gzwrite(f.get(), data.data(), static_cast<unsigned>(data.size() * sizeof(float))) !=
            static_cast<int>(data.size() * sizeof(float)))
        throw IOError("write_nifti: short write to " + path);
}

}  // namespace text2ct
