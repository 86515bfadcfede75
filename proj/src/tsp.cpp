#include "text2ct/tsp.hpp"

#include <algorithm>
#include <atomic>
#include <cstring>
#include <mutex>
#include <thread>

namespace text2ct {
namespace tsp {

namespace {

int64_t floor_div(int64_t a, int64_t b) {
    int64_t q = a / b;
    return (a % b != 0 && ((a < 0) != (b < 0))) ? q - 1 : q;
}
int64_t ceil_div(int64_t a, int64_t b) { return -floor_div(-a, b); }
int64_t align_down(int64_t a, int64_t m) { return floor_div(a, m) * m; }

void axis_strides(const std::vector<int64_t>& dims, int axis, int64_t& outer, int64_t& extent,
                  int64_t& inner) {
    // dims = (C, S0, S1, S2); spatial axis in 0..2
    outer = dims[0];
    for (int i = 0; i < axis; i++) outer *= dims[1 + static_cast<size_t>(i)];
    extent = dims[1 + static_cast<size_t>(axis)];
    inner = 1;
    for (int i = axis + 1; i < 3; i++) inner *= dims[1 + static_cast<size_t>(i)];
}

Tensor slice_axis(const Tensor& x, int axis, int64_t lo, int64_t hi) {
    int64_t outer, extent, inner;
    axis_strides(x.dims(), axis, outer, extent, inner);
    std::vector<int64_t> dims = x.dims();
    dims[1 + static_cast<size_t>(axis)] = hi - lo;
    Tensor y(dims);
    const float* px = x.data();
    float* py = y.data();
    const int64_t len = hi - lo;
    for (int64_t o = 0; o < outer; o++)
        std::memcpy(py + o * len * inner, px + (o * extent + lo) * inner,
                    sizeof(float) * static_cast<size_t>(len * inner));
    return y;
}

void paste_axis(Tensor& dst, const Tensor& src, int axis, int64_t dst_lo, int64_t src_lo,
                int64_t len) {
    int64_t d_outer, d_extent, d_inner;
    axis_strides(dst.dims(), axis, d_outer, d_extent, d_inner);
    int64_t s_outer, s_extent, s_inner;
    axis_strides(src.dims(), axis, s_outer, s_extent, s_inner);
    if (d_outer != s_outer || d_inner != s_inner)
        throw ShapeError("tsp: stitch shape mismatch off the split axis");
    const float* ps = src.data();
    float* pd = dst.data();
    for (int64_t o = 0; o < d_outer; o++)
        std::memcpy(pd + (o * d_extent + dst_lo) * d_inner, ps + (o * s_extent + src_lo) * s_inner,
                    sizeof(float) * static_cast<size_t>(len * d_inner));
}

struct ConvOp final : Op {
    const nn::Conv3d* conv;
    explicit ConvOp(const nn::Conv3d* c) : conv(c) {}
    Tensor run(const Tensor& x) const override { return conv->forward(x); }
    std::string describe() const override {
        return strformat("conv3d k=%d s=%d %d->%d", conv->k, conv->stride, conv->cin, conv->cout);
    }
    int64_t out_extent(int64_t in) const override {
        return nn::Conv3d::out_extent(in, conv->k, conv->stride);
    }
    void in_needed(int64_t lo, int64_t hi, int64_t& in_lo, int64_t& in_hi) const override {
        const int p = conv->k / 2;
        const int s = conv->stride;
        in_lo = s * lo - p;
        in_hi = s * (hi - 1) + p + 1;
    }
    void map_core(int64_t lo, int64_t hi, int64_t& out_lo, int64_t& out_hi) const override {
        const int s = conv->stride;
        out_lo = ceil_div(lo, s);
        out_hi = ceil_div(hi, s);
    }
    int64_t map_start(int64_t start) const override {
        if (start % conv->stride != 0) throw PlanError("tsp: segment start not stride-aligned");
        return start / conv->stride;
    }
    int64_t alignment() const override { return conv->stride; }
    std::vector<int64_t> out_dims(const std::vector<int64_t>& in) const override {
        return {conv->cout, out_extent(in[1]), out_extent(in[2]), out_extent(in[3])};
    }
    size_t scratch_bytes(const std::vector<int64_t>& in) const override {
        return sizeof(float) * static_cast<size_t>(nn::conv3d_scratch_floats(
                                   conv->cin, conv->k, out_extent(in[1]), out_extent(in[2]),
                                   out_extent(in[3])));
    }
};

struct ActOp final : Op {
    nn::Act kind;
    explicit ActOp(nn::Act k) : kind(k) {}
    Tensor run(const Tensor& x) const override { return nn::act_forward(kind, x); }
    std::string describe() const override { return "activation"; }
};

struct UpNearestOp final : Op {
    Tensor run(const Tensor& x) const override { return nn::upsample_nearest2x(x); }
    std::string describe() const override { return "upsample_nearest2x"; }
    int64_t out_extent(int64_t in) const override { return 2 * in; }
    void in_needed(int64_t lo, int64_t hi, int64_t& in_lo, int64_t& in_hi) const override {
        in_lo = floor_div(lo, 2);
        in_hi = floor_div(hi - 1, 2) + 1;
    }
    void map_core(int64_t lo, int64_t hi, int64_t& out_lo, int64_t& out_hi) const override {
        out_lo = 2 * lo;
        out_hi = 2 * hi;
    }
    int64_t map_start(int64_t start) const override { return 2 * start; }
    std::vector<int64_t> out_dims(const std::vector<int64_t>& in) const override {
        return {in[0], 2 * in[1], 2 * in[2], 2 * in[3]};
    }
};

struct UpTrilinearOp final : Op {
    Tensor run(const Tensor& x) const override { return nn::upsample_trilinear2x(x); }
    std::string describe() const override { return "upsample_trilinear2x"; }
    int64_t out_extent(int64_t in) const override { return 2 * in; }
    void in_needed(int64_t lo, int64_t hi, int64_t& in_lo, int64_t& in_hi) const override {
        // output o reads inputs floor((o-1)/2) .. ceil(o/2)
        in_lo = floor_div(lo - 1, 2);
        in_hi = ceil_div(hi - 1, 2) + 1;
    }
    void map_core(int64_t lo, int64_t hi, int64_t& out_lo, int64_t& out_hi) const override {
        out_lo = 2 * lo;
        out_hi = 2 * hi;
    }
    int64_t map_start(int64_t start) const override { return 2 * start; }
    std::vector<int64_t> out_dims(const std::vector<int64_t>& in) const override {
        return {in[0], 2 * in[1], 2 * in[2], 2 * in[3]};
    }
};

Tensor run_ops(const std::vector<OpPtr>& ops, Tensor x) {
    for (const auto& op : ops) x = op->run(x);
    return x;
}

void needed_through(const std::vector<OpPtr>& ops, int64_t& lo, int64_t& hi) {
    for (auto it = ops.rbegin(); it != ops.rend(); ++it) {
        int64_t nlo, nhi;
        (*it)->in_needed(lo, hi, nlo, nhi);
        lo = nlo;
        hi = nhi;
    }
}

struct ResidualOp final : Op {
    std::vector<OpPtr> inner, skip;
    ResidualOp(std::vector<OpPtr> f, std::vector<OpPtr> s)
        : inner(std::move(f)), skip(std::move(s)) {
        for (const auto& op : inner)
            if (op->alignment() != 1 || op->out_extent(64) != 64)
                throw ConfigError("residual: inner ops must preserve spatial extent");
        for (const auto& op : skip)
            if (op->alignment() != 1 || op->out_extent(64) != 64)
                throw ConfigError("residual: skip ops must preserve spatial extent");
    }
    Tensor run(const Tensor& x) const override {
        Tensor y = run_ops(inner, x);
        Tensor s = skip.empty() ? x : run_ops(skip, x);
        check_same_shape(y, s, "residual add");
        axpy(1.0f, s, y);
        return y;
    }
    std::string describe() const override { return "residual"; }
    bool splittable() const override {
        for (const auto& op : inner)
            if (!op->splittable()) return false;
        for (const auto& op : skip)
            if (!op->splittable()) return false;
        return true;
    }
    void in_needed(int64_t lo, int64_t hi, int64_t& in_lo, int64_t& in_hi) const override {
        int64_t a = lo, b = hi;
        needed_through(inner, a, b);
        int64_t c = lo, d = hi;
        if (!skip.empty()) needed_through(skip, c, d);
        in_lo = std::min(std::min(a, c), lo);
        in_hi = std::max(std::max(b, d), hi);
    }
    std::vector<int64_t> out_dims(const std::vector<int64_t>& in) const override {
        std::vector<int64_t> cur = in;
        for (const auto& op : inner) cur = op->out_dims(cur);
        return cur;
    }
    size_t scratch_bytes(const std::vector<int64_t>& in) const override {
        size_t peak = 0;
        std::vector<int64_t> cur = in;
        for (const auto& op : inner) {
            std::vector<int64_t> next = op->out_dims(cur);
            size_t need = bytes_of(cur) + bytes_of(next) + op->scratch_bytes(cur);
            peak = std::max(peak, need);
            cur = next;
        }
        return peak;
    }
    static size_t bytes_of(const std::vector<int64_t>& dims) {
        int64_t n = 1;
        for (auto d : dims) n *= d;
        return sizeof(float) * static_cast<size_t>(n);
    }
};

struct GlobalOp final : Op {
    std::string name;
    explicit GlobalOp(std::string n) : name(std::move(n)) {}
    Tensor run(const Tensor& x) const override { return x.clone(); }
    std::string describe() const override { return name; }
    bool splittable() const override { return false; }
};

}  // namespace

std::vector<int64_t> Op::out_dims(const std::vector<int64_t>& in) const { return in; }

OpPtr conv_op(const nn::Conv3d* conv) { return std::make_shared<ConvOp>(conv); }
OpPtr act_op(nn::Act kind) { return std::make_shared<ActOp>(kind); }
OpPtr upsample_nearest_op() { return std::make_shared<UpNearestOp>(); }
OpPtr upsample_trilinear_op() { return std::make_shared<UpTrilinearOp>(); }
OpPtr residual_op(std::vector<OpPtr> inner, std::vector<OpPtr> skip) {
    return std::make_shared<ResidualOp>(std::move(inner), std::move(skip));
}
OpPtr global_op(const std::string& name) { return std::make_shared<GlobalOp>(name); }

Tensor SplitStage::run(const Tensor& x) const { return run_ops(ops, x); }

std::vector<int64_t> SplitStage::out_dims(const std::vector<int64_t>& in) const {
    std::vector<int64_t> cur = in;
    for (const auto& op : ops) cur = op->out_dims(cur);
    return cur;
}

bool SplitStage::splittable(std::string* why) const {
    for (const auto& op : ops)
        if (!op->splittable()) {
            if (why) *why = op->describe();
            return false;
        }
    return true;
}

int64_t SplitStage::alignment() const {
    int64_t a = 1;
    for (const auto& op : ops) a *= op->alignment();
    return a;
}

int64_t halo_required(const SplitStage& stage) {
    const int64_t a = stage.alignment();
    int64_t radius = 0;
    // Sample aligned cores at several offsets/sizes; floors make the support
    // mapping slightly asymmetric, the max over samples covers it.
    for (int64_t off : {0, 1, 2, 3}) {
        for (int64_t size : {1, 2, 3, 5}) {
            const int64_t c0 = off * a, c1 = (off + size) * a;
            int64_t o0 = c0, o1 = c1;
            for (const auto& op : stage.ops) {
                int64_t t0, t1;
                op->map_core(o0, o1, t0, t1);
                o0 = t0;
                o1 = t1;
            }
            needed_through(stage.ops, o0, o1);
            radius = std::max(radius, std::max(c0 - o0, o1 - c1));
        }
    }
    return radius;
}

SegmentMap plan_split(int64_t extent, int64_t receptive_radius, int num_segments, int axis,
                      int64_t alignment) {
    if (num_segments < 1) throw PlanError("plan_split: segment count must be >= 1");
    if (extent < 1) throw PlanError("plan_split: extent must be >= 1");
    const int64_t units = extent / alignment;
    if (num_segments > units)
        throw PlanError(strformat("plan_split: %d segments exceed extent %lld (alignment %lld)",
                                  num_segments, static_cast<long long>(extent),
                                  static_cast<long long>(alignment)));
    SegmentMap map;
    map.axis = axis;
    const int64_t base = units / num_segments;
    const int64_t rem = units % num_segments;
    int64_t cursor = 0;
    for (int i = 0; i < num_segments; i++) {
        const int64_t sz = (base + (i < rem ? 1 : 0)) * alignment;
        Segment seg;
        seg.core_lo = cursor;
        seg.core_hi = (i == num_segments - 1) ? extent : cursor + sz;
        cursor = seg.core_hi;
        seg.pad_lo = std::max<int64_t>(0, seg.core_lo - receptive_radius);
        seg.pad_hi = std::min<int64_t>(extent, seg.core_hi + receptive_radius);
        seg.pad_lo = align_down(seg.pad_lo, alignment);
        seg.out_lo = seg.core_lo;
        seg.out_hi = seg.core_hi;
        map.segments.push_back(seg);
    }
    return map;
}

Tensor run_split(const SplitStage& stage, const Tensor& x, const TSPlan& plan) {
    std::string why;
    if (!stage.splittable(&why))
        throw PlanError("tsp: stage not splittable, contains global op: " + why);
    if (plan.num_segments == 1) return stage.run(x);
    if (x.rank() != 4) throw ShapeError("tsp: input must be (C, X, Y, Z)");
    if (plan.axis < 0 || plan.axis > 2) throw PlanError("tsp: axis must be in 0..2");

    const int64_t required = halo_required(stage);
    if (plan.halo < required)
        throw PlanError(strformat("tsp: insufficient halo: required %lld, provided %lld",
                                  static_cast<long long>(required),
                                  static_cast<long long>(plan.halo)));

    const int64_t extent = x.dim(1 + plan.axis);
    SegmentMap map = plan_split(extent, plan.halo, plan.num_segments, plan.axis,
                                stage.alignment());
    Tensor out(stage.out_dims(x.dims()));

    auto run_segment = [&](const Segment& seg) {
        Tensor cur = slice_axis(x, plan.axis, seg.pad_lo, seg.pad_hi);
        int64_t start = seg.pad_lo;
        int64_t o0 = seg.core_lo, o1 = seg.core_hi;
        for (const auto& op : stage.ops) {
            cur = op->run(cur);
            start = op->map_start(start);
            int64_t t0, t1;
            op->map_core(o0, o1, t0, t1);
            o0 = t0;
            o1 = t1;
        }
        paste_axis(out, cur, plan.axis, o0, o0 - start, o1 - o0);
    };

    if (plan.parallelism == Parallelism::Sequential) {
        for (const auto& seg : map.segments) run_segment(seg);
    } else {
        const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
        const unsigned workers =
            std::min<unsigned>(hw, static_cast<unsigned>(map.segments.size()));
        std::atomic<size_t> next{0};
        std::atomic<bool> failed{false};
        std::string error_msg;
        std::mutex err_mu;
        std::vector<std::thread> pool;
        for (unsigned w = 0; w < workers; w++) {
            pool.emplace_back([&] {
                for (;;) {
                    const size_t i = next.fetch_add(1);
                    if (i >= map.segments.size() || failed.load()) return;
                    try {
                        run_segment(map.segments[i]);
                    } catch (const std::exception& e) {
                        std::lock_guard<std::mutex> lk(err_mu);
                        if (!failed.exchange(true)) error_msg = e.what();
                        return;
                    }
                }
            });
        }
        for (auto& t : pool) t.join();
        if (failed.load()) throw PlanError("tsp worker failed: " + error_msg);
    }
    return out;
}

PeakEstimate peak_memory_estimate(const TSPlan& plan, const SplitStage& stage,
                                  const std::vector<int64_t>& input_dims) {
    auto bytes_of = [](const std::vector<int64_t>& dims) {
        int64_t n = 1;
        for (auto d : dims) n *= d;
        return sizeof(float) * static_cast<size_t>(n);
    };
    auto walk_peak = [&](std::vector<int64_t> dims) {
        size_t peak = bytes_of(dims);
        for (const auto& op : stage.ops) {
            std::vector<int64_t> next = op->out_dims(dims);
            peak = std::max(peak, bytes_of(dims) + bytes_of(next) + op->scratch_bytes(dims));
            dims = next;
        }
        return peak;
    };

    PeakEstimate est;
    if (plan.num_segments == 1) {
        est.bytes = walk_peak(input_dims);
        est.halo_share = 0.0;
        return est;
    }
    const int64_t extent = input_dims[1 + static_cast<size_t>(plan.axis)];
    SegmentMap map =
        plan_split(extent, plan.halo, plan.num_segments, plan.axis, stage.alignment());
    const size_t out_full = bytes_of(stage.out_dims(input_dims));
    size_t worst = 0;
    double halo_share = 0.0;
    for (const auto& seg : map.segments) {
        std::vector<int64_t> dims = input_dims;
        dims[1 + static_cast<size_t>(plan.axis)] = seg.pad_hi - seg.pad_lo;
        worst = std::max(worst, walk_peak(dims));
        halo_share = std::max(
            halo_share, 1.0 - static_cast<double>(seg.core_hi - seg.core_lo) /
                                  static_cast<double>(seg.pad_hi - seg.pad_lo));
    }
    est.bytes = out_full + worst;
    est.halo_share = halo_share;
    return est;
}

}  // namespace tsp
}  // namespace text2ct
