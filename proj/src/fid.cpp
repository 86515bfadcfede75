#include "text2ct/fid.hpp"

#include <Eigen/Dense>

#include <cmath>

namespace text2ct {

const char* view_name(View v) {
    switch (v) {
        case View::Axial: return "axial";
        case View::Sagittal: return "sagittal";
        case View::Coronal: return "coronal";
    }
    return "?";
}

std::array<ViewSliceSet, 3> slice_views(const Volume3D& vol) {
    const int64_t H = vol.h(), W = vol.w(), D = vol.d();
    const float* p = vol.voxels.data();
    std::array<ViewSliceSet, 3> out;
    out[0].view = View::Axial;
    out[1].view = View::Sagittal;
    out[2].view = View::Coronal;

    out[0].slices.reserve(static_cast<size_t>(D));
    for (int64_t k = 0; k < D; k++) {
        Tensor s({H, W});
        float* q = s.data();
        for (int64_t i = 0; i < H; i++)
            for (int64_t j = 0; j < W; j++) q[i * W + j] = p[(i * W + j) * D + k];
        out[0].slices.push_back(std::move(s));
    }
    out[1].slices.reserve(static_cast<size_t>(H));
    for (int64_t i = 0; i < H; i++) {
        Tensor s({W, D});
        std::memcpy(s.data(), p + i * W * D, sizeof(float) * static_cast<size_t>(W * D));
        out[1].slices.push_back(std::move(s));
    }
    out[2].slices.reserve(static_cast<size_t>(W));
    for (int64_t j = 0; j < W; j++) {
        Tensor s({H, D});
        float* q = s.data();
        for (int64_t i = 0; i < H; i++)
            std::memcpy(q + i * D, p + (i * W + j) * D, sizeof(float) * static_cast<size_t>(D));
        out[2].slices.push_back(std::move(s));
    }
    return out;
}

Tensor reassemble_view(const ViewSliceSet& set) {
    if (set.slices.empty()) throw ValidationError("reassemble: empty slice set");
    const int64_t a = set.slices[0].dim(0), b = set.slices[0].dim(1);
    const int64_t n = static_cast<int64_t>(set.slices.size());
    Tensor vol;
    if (set.view == View::Axial) {
        vol = Tensor({a, b, n});  // (H, W, D)
        float* p = vol.data();
        for (int64_t k = 0; k < n; k++) {
            const float* s = set.slices[static_cast<size_t>(k)].data();
            for (int64_t i = 0; i < a; i++)
                for (int64_t j = 0; j < b; j++) p[(i * b + j) * n + k] = s[i * b + j];
        }
    } else if (set.view == View::Sagittal) {
        vol = Tensor({n, a, b});  // (H, W, D)
        float* p = vol.data();
        for (int64_t i = 0; i < n; i++)
            std::memcpy(p + i * a * b, set.slices[static_cast<size_t>(i)].data(),
                        sizeof(float) * static_cast<size_t>(a * b));
    } else {
        vol = Tensor({a, n, b});  // (H, W, D)
        float* p = vol.data();
        for (int64_t j = 0; j < n; j++) {
            const float* s = set.slices[static_cast<size_t>(j)].data();
            for (int64_t i = 0; i < a; i++)
                std::memcpy(p + (i * n + j) * b, s + i * b, sizeof(float) * static_cast<size_t>(b));
        }
    }
    return vol;
}

Tensor resize_bilinear_2d(const Tensor& img, int64_t out_h, int64_t out_w) {
    if (img.rank() != 2) throw ShapeError("resize: input must be 2D");
    const int64_t H = img.dim(0), W = img.dim(1);
    Tensor out({out_h, out_w});
    const float* p = img.data();
    float* q = out.data();
    const double rh = static_cast<double>(H) / out_h;
    const double rw = static_cast<double>(W) / out_w;
    for (int64_t i = 0; i < out_h; i++) {
        double y = (i + 0.5) * rh - 0.5;
        int64_t y0 = static_cast<int64_t>(std::floor(y));
        const float fy = static_cast<float>(y - y0);
        int64_t y1 = y0 + 1;
        y0 = std::clamp<int64_t>(y0, 0, H - 1);
        y1 = std::clamp<int64_t>(y1, 0, H - 1);
        for (int64_t j = 0; j < out_w; j++) {
            double x = (j + 0.5) * rw - 0.5;
            int64_t x0 = static_cast<int64_t>(std::floor(x));
            const float fx = static_cast<float>(x - x0);
            int64_t x1 = x0 + 1;
            x0 = std::clamp<int64_t>(x0, 0, W - 1);
            x1 = std::clamp<int64_t>(x1, 0, W - 1);
            const float a = p[y0 * W + x0] * (1 - fx) + p[y0 * W + x1] * fx;
            const float c = p[y1 * W + x0] * (1 - fx) + p[y1 * W + x1] * fx;
            q[i * out_w + j] = a * (1 - fy) + c * fy;
        }
    }
    return out;
}

FidExtractor::FidExtractor(int width_, uint64_t seed_) : width(width_), seed(seed_) {
    Rng rng = Rng(seed).split("fid_extractor");
    c1.init("fid.c1", 3, 16, 3, 2, rng);
    c2.init("fid.c2", 16, 32, 3, 2, rng);
    c3.init("fid.c3", 32, width, 3, 2, rng);
}

Tensor FidExtractor::features(const Tensor& slice2d) const {
    Tensor resized = resize_bilinear_2d(slice2d, input_size, input_size);
    Tensor x({3, input_size, input_size, 1});
    for (int c = 0; c < 3; c++)
        std::memcpy(x.data() + c * input_size * input_size, resized.data(),
                    sizeof(float) * static_cast<size_t>(input_size * input_size));
    Tensor h = nn::act_forward(nn::Act::LeakyReLU, c1.forward(x));
    h = nn::act_forward(nn::Act::LeakyReLU, c2.forward(h));
    h = c3.forward(h);
    // global mean pool
    Tensor f({width});
    const int64_t plane = h.dim(1) * h.dim(2) * h.dim(3);
    const float* p = h.data();
    float* q = f.data();
    for (int c = 0; c < width; c++) {
        double s = 0.0;
        for (int64_t i = 0; i < plane; i++) s += p[c * plane + i];
        q[c] = static_cast<float>(s / plane);
    }
    return f;
}

uint64_t FidExtractor::fingerprint() const {
    uint64_t h = fnv1a64(strformat("fid;width=%d;input=%d;seed=%llu", width, input_size,
                                   static_cast<unsigned long long>(seed)));
    for (const nn::Conv3d* c : {&c1, &c2, &c3})
        h = fnv1a64(c->weight.w.data(), static_cast<size_t>(c->weight.w.numel()) * 4, h);
    return h;
}

namespace {

Eigen::MatrixXd sqrt_sym(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
    Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_gaussian(const Tensor& mu_r, const Tensor& cov_r, const Tensor& mu_g,
                        const Tensor& cov_g) {
    const int64_t d = mu_r.numel();
    if (mu_g.numel() != d || cov_r.numel() != d * d || cov_g.numel() != d * d)
        throw ShapeError("frechet: dimension mismatch");
    Eigen::Map<const Eigen::MatrixXf> cr(cov_r.data(), d, d), cg(cov_g.data(), d, d);
    Eigen::MatrixXd Cr = cr.cast<double>();
    Eigen::MatrixXd Cg = cg.cast<double>();
    Cr.diagonal().array() += 1e-6;
    Cg.diagonal().array() += 1e-6;

    double diff2 = 0.0;
    for (int64_t i = 0; i < d; i++) {
        const double dm = double(mu_r.at(i)) - double(mu_g.at(i));
        diff2 += dm * dm;
    }
    Eigen::MatrixXd A = sqrt_sym(Cr);
    Eigen::MatrixXd M = A * Cg * A;
    const double tr_sqrt = sqrt_sym(M).trace();
    return diff2 + Cr.trace() + Cg.trace() - 2.0 * tr_sqrt;
}

namespace {

void fit_gaussian(const std::vector<Tensor>& feats, Tensor& mu, Tensor& cov) {
    if (feats.empty()) throw ValidationError("fid: empty feature set");
    const int64_t d = feats[0].numel();
    const int64_t n = static_cast<int64_t>(feats.size());
    mu = Tensor::zeros({d});
    for (const auto& f : feats) axpy(1.0f / static_cast<float>(n), f, mu);
    cov = Tensor::zeros({d, d});
    // Sample covariance (n-1 denominator when n > 1).
    std::vector<double> acc(static_cast<size_t>(d * d), 0.0);
    std::vector<double> c(static_cast<size_t>(d));
    for (const auto& f : feats) {
        for (int64_t i = 0; i < d; i++) c[static_cast<size_t>(i)] = double(f.at(i)) - mu.at(i);
        for (int64_t i = 0; i < d; i++)
            for (int64_t j = 0; j < d; j++)
                acc[static_cast<size_t>(i * d + j)] += c[static_cast<size_t>(i)] * c[static_cast<size_t>(j)];
    }
    const double denom = n > 1 ? static_cast<double>(n - 1) : 1.0;
    for (int64_t i = 0; i < d * d; i++)
        cov.at(i) = static_cast<float>(acc[static_cast<size_t>(i)] / denom);
}

}  // namespace

double frechet_from_features(const std::vector<Tensor>& real, const std::vector<Tensor>& gen) {
    Tensor mu_r, cov_r, mu_g, cov_g;
    fit_gaussian(real, mu_r, cov_r);
    fit_gaussian(gen, mu_g, cov_g);
    return frechet_gaussian(mu_r, cov_r, mu_g, cov_g);
}

FidResult fid(const std::vector<std::array<ViewSliceSet, 3>>& real,
              const std::vector<std::array<ViewSliceSet, 3>>& gen, const FidExtractor& fx) {
    if (real.empty() || gen.empty()) throw ValidationError("fid: empty volume collection");
    FidResult res;
    double* out[3] = {&res.axial, &res.sagittal, &res.coronal};
    for (int v = 0; v < 3; v++) {
        std::vector<Tensor> fr, fg;
        for (const auto& vol : real)
            for (const auto& s : vol[static_cast<size_t>(v)].slices) fr.push_back(fx.features(s));
        for (const auto& vol : gen)
            for (const auto& s : vol[static_cast<size_t>(v)].slices) fg.push_back(fx.features(s));
        if (static_cast<int>(fr.size()) < fx.width + 1 ||
            static_cast<int>(fg.size()) < fx.width + 1)
            log_warn("fid: %s has fewer slices than feature width + 1; covariance is shrunk",
                     view_name(static_cast<View>(v)));
        *out[v] = frechet_from_features(fr, fg);
    }
    res.avg = (res.axial + res.sagittal + res.coronal) / 3.0;
    return res;
}

}  // namespace text2ct
