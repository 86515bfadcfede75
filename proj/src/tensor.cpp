#include "text2ct/tensor.hpp"

#include <cblas.h>

#include <cmath>

namespace text2ct {

namespace memtrack {
namespace {
std::atomic<size_t> g_current{0};
std::atomic<size_t> g_peak{0};
}  // namespace

void on_alloc(size_t bytes) {
    size_t cur = g_current.fetch_add(bytes) + bytes;
    size_t peak = g_peak.load();
    while (cur > peak && !g_peak.compare_exchange_weak(peak, cur)) {
    }
}
void on_free(size_t bytes) { g_current.fetch_sub(bytes); }
size_t current_bytes() { return g_current.load(); }
size_t peak_bytes() { return g_peak.load(); }
void reset_peak() { g_peak.store(g_current.load()); }
}  // namespace memtrack

void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, float alpha,
          const float* a, int64_t lda, const float* b, int64_t ldb, float beta, float* c,
          int64_t ldc) {
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
                static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb),
                beta, c, static_cast<int>(ldc));
}

void axpy(float alpha, const Tensor& x, Tensor& y) {
    check_same_shape(x, y, "axpy");
    cblas_saxpy(static_cast<int>(x.numel()), alpha, x.data(), 1, y.data(), 1);
}

void scale(Tensor& x, float alpha) { cblas_sscal(static_cast<int>(x.numel()), alpha, x.data(), 1); }

float dot(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "dot");
    return cblas_sdot(static_cast<int>(a.numel()), a.data(), 1, b.data(), 1);
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "max_abs_diff");
    float m = 0.0f;
    const float* pa = a.data();
    const float* pb = b.data();
    for (int64_t i = 0; i < a.numel(); i++) {
        float d = std::fabs(pa[i] - pb[i]);
        if (d > m) m = d;
    }
    return m;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    return std::memcmp(a.data(), b.data(), static_cast<size_t>(a.numel()) * sizeof(float)) == 0;
}

bool all_finite(const Tensor& a) {
    const float* p = a.data();
    for (int64_t i = 0; i < a.numel(); i++)
        if (!std::isfinite(p[i])) return false;
    return true;
}

double mean(const Tensor& a) {
    double s = 0.0;
    const float* p = a.data();
    for (int64_t i = 0; i < a.numel(); i++) s += p[i];
    return a.numel() ? s / static_cast<double>(a.numel()) : 0.0;
}

}  // namespace text2ct
