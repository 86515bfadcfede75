#pragma once

#include <memory>
#include <string>
#include <vector>

#include "text2ct/nn.hpp"
#include "text2ct/tensor.hpp"

namespace text2ct {
namespace tsp {

// Inference-time op IR. A SplitStage is a pipeline the splitter can reason
// about: every op reports its coordinate mapping and input support along a
// spatial axis, so halos are derived instead of hand-maintained.
struct Op {
    virtual ~Op() = default;
    virtual Tensor run(const Tensor& x) const = 0;
    virtual std::string describe() const = 0;
    virtual bool splittable() const { return true; }
    // Output extent along any spatial axis.
    virtual int64_t out_extent(int64_t in) const { return in; }
    // Global input interval needed to produce outputs [lo, hi).
    virtual void in_needed(int64_t lo, int64_t hi, int64_t& in_lo, int64_t& in_hi) const {
        in_lo = lo;
        in_hi = hi;
    }
    // Forward map of an owned core interval (disjointness-preserving).
    virtual void map_core(int64_t lo, int64_t hi, int64_t& out_lo, int64_t& out_hi) const {
        out_lo = lo;
        out_hi = hi;
    }
    // Global start coordinate of a slice after this op.
    virtual int64_t map_start(int64_t start) const { return start; }
    // Segment starts must be multiples of this (cumulative stride).
    virtual int64_t alignment() const { return 1; }
    virtual std::vector<int64_t> out_dims(const std::vector<int64_t>& in) const;
    virtual size_t scratch_bytes(const std::vector<int64_t>& in) const { return 0; }
};

using OpPtr = std::shared_ptr<Op>;

OpPtr conv_op(const nn::Conv3d* conv);
OpPtr act_op(nn::Act kind);
OpPtr upsample_nearest_op();
OpPtr upsample_trilinear_op();
// y = f(x) + skip(x); inner ops must preserve spatial extent.
OpPtr residual_op(std::vector<OpPtr> inner, std::vector<OpPtr> skip = {});
// Marker for ops with full-extent support (global norms, attention).
OpPtr global_op(const std::string& name);

struct SplitStage {
    std::string name;
    std::vector<OpPtr> ops;

    Tensor run(const Tensor& x) const;  // direct, unsplit execution
    std::vector<int64_t> out_dims(const std::vector<int64_t>& in) const;
    bool splittable(std::string* why = nullptr) const;
    int64_t alignment() const;
};

// One-sided receptive radius of the stage along a split axis, in input
// voxels: the halo that makes any aligned segment reproduce direct execution.
int64_t halo_required(const SplitStage& stage);

enum class Parallelism { Sequential, WorkerPool };

struct TSPlan {
    int axis = 0;  // spatial axis 0..2
    int num_segments = 1;
    int64_t halo = 0;
    Parallelism parallelism = Parallelism::Sequential;
};

struct Segment {
    int64_t core_lo, core_hi;  // input coords, [lo, hi)
    int64_t pad_lo, pad_hi;    // haloed + clipped + alignment-adjusted
    int64_t out_lo, out_hi;    // output placement (filled for scale-1 stages at
                               // plan time; recomputed per stage at run time)
};

struct SegmentMap {
    int axis = 0;
    std::vector<Segment> segments;
};

// Near-equal core partition with sizes differing by <= 1 (alignment units),
// halo = receptive radius, padded ranges clipped to the extent.
SegmentMap plan_split(int64_t extent, int64_t receptive_radius, int num_segments, int axis,
                      int64_t alignment = 1);

Tensor run_split(const SplitStage& stage, const Tensor& x, const TSPlan& plan);

struct PeakEstimate {
    size_t bytes = 0;
    double halo_share = 0.0;  // fraction of per-segment input that is halo
};
PeakEstimate peak_memory_estimate(const TSPlan& plan, const SplitStage& stage,
                                  const std::vector<int64_t>& input_dims);

}  // namespace tsp
}  // namespace text2ct
