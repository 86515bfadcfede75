#pragma once

#include <atomic>
#include <cstdint>
#include <cstring>
#include <memory>
#include <vector>

#include "text2ct/common.hpp"
#include "text2ct/rng.hpp"

namespace text2ct {

// Live/peak byte counters over all tensor buffers. The TSP acceptance test
// measures decoder peaks through these.
namespace memtrack {
void on_alloc(size_t bytes);
void on_free(size_t bytes);
size_t current_bytes();
size_t peak_bytes();
void reset_peak();
}  // namespace memtrack

// Dense float32 tensor, rank <= 4, row-major with the last axis fastest.
// Feature maps are (C, X, Y, Z); volumes are (X, Y, Z) a.k.a. (H, W, D).
// Copies are shallow; clone() deep-copies.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::vector<int64_t> dims) { reset(std::move(dims)); }
    static Tensor zeros(std::vector<int64_t> dims) {
        Tensor t(std::move(dims));
        t.fill(0.0f);
        return t;
    }
    static Tensor full(std::vector<int64_t> dims, float v) {
        Tensor t(std::move(dims));
        t.fill(v);
        return t;
    }
    static Tensor randn(std::vector<int64_t> dims, Rng& rng) {
        Tensor t(std::move(dims));
        float* p = t.data();
        for (int64_t i = 0; i < t.numel(); i++) p[i] = rng.normalf();
        return t;
    }

    void reset(std::vector<int64_t> dims) {
        dims_ = std::move(dims);
        int64_t n = 1;
        for (auto d : dims_) n *= d;
        buf_ = std::make_shared<Buffer>(static_cast<size_t>(n));
        numel_ = n;
    }

    bool defined() const { return buf_ != nullptr; }
    int rank() const { return static_cast<int>(dims_.size()); }
    int64_t dim(int i) const { return dims_[static_cast<size_t>(i)]; }
    const std::vector<int64_t>& dims() const { return dims_; }
    int64_t numel() const { return numel_; }
    float* data() { return buf_->p.get(); }
    const float* data() const { return buf_->p.get(); }

    float& at(int64_t i) { return data()[i]; }
    float at(int64_t i) const { return data()[i]; }

    void fill(float v) {
        float* p = data();
        for (int64_t i = 0; i < numel_; i++) p[i] = v;
    }

    Tensor clone() const {
        Tensor t(dims_);
        std::memcpy(t.data(), data(), static_cast<size_t>(numel_) * sizeof(float));
        return t;
    }

    Tensor reshaped(std::vector<int64_t> dims) const {
        int64_t n = 1;
        for (auto d : dims) n *= d;
        if (n != numel_) throw ShapeError("reshape: element count mismatch");
        Tensor t = *this;
        t.dims_ = std::move(dims);
        return t;
    }

    bool same_shape(const Tensor& o) const { return dims_ == o.dims_; }

  private:
    struct Buffer {
        explicit Buffer(size_t n) : bytes(n * sizeof(float)) {
            p = std::unique_ptr<float[]>(new float[n]);
            memtrack::on_alloc(bytes);
        }
        ~Buffer() { memtrack::on_free(bytes); }
        Buffer(const Buffer&) = delete;
        std::unique_ptr<float[]> p;
        size_t bytes;
    };
    std::vector<int64_t> dims_;
    std::shared_ptr<Buffer> buf_;
    int64_t numel_ = 0;
};

// C = A(MxK) * B(KxN), row-major, with optional transposes and accumulate.
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, float alpha,
          const float* a, int64_t lda, const float* b, int64_t ldb, float beta, float* c,
          int64_t ldc);

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b)) throw ShapeError(strformat("%s: shape mismatch", what));
}

// Elementwise helpers used by the training loops.
void axpy(float alpha, const Tensor& x, Tensor& y);                  // y += alpha*x
void scale(Tensor& x, float alpha);                                  // x *= alpha
float dot(const Tensor& a, const Tensor& b);
float max_abs_diff(const Tensor& a, const Tensor& b);
bool bitwise_equal(const Tensor& a, const Tensor& b);
bool all_finite(const Tensor& a);
double mean(const Tensor& a);

}  // namespace text2ct
