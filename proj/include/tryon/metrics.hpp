#pragma once

#include "tryon/geometry.hpp"
#include "tryon/model.hpp"
#include "tryon/synthdata.hpp"
#include "tryon/tensor.hpp"

#include <optional>
#include <vector>

namespace tryon {

struct EvalResult {
    double lssim = 0.0; // in [-1, 1]
    double iou = 0.0;   // in [0, 1]
    double disp = 0.0;  // >= 0, normalized by canvas side
};

// SSIM (11x11 Gaussian window, sigma 1.5, C1 = 0.01^2, C2 = 0.03^2,
// channels averaged) over the tight bounding box of the union of the two
// warped masks, dilated by 5 px and clipped to the canvas. An empty union
// falls back to the whole canvas and sets *empty_region.
double lssim(const Tensor& pred_composite, const Tensor& gt_composite,
             const Tensor& gt_mask_warped, const Tensor& pred_mask_warped,
             bool* empty_region = nullptr);

// Binarize both masks at `threshold`, then |I| / |U|; empty union -> 0.
double mask_iou(const Tensor& pred_mask_warped, const Tensor& gt_mask_warped,
                double threshold = 0.5);

// Exact convex-polygon intersection-over-union (Sutherland-Hodgman
// clipping). Declines (nullopt) when either quad is not convex.
std::optional<double> quad_iou_oracle(const KeypointQuad& pred, const KeypointQuad& gt);

// Mean vertex L2 distance over matched A/B/C/D corners, divided by the
// canvas side.
double disp(const KeypointQuad& pred, const KeypointQuad& gt, double canvas_side);

// ---- evaluation protocol ----

struct TupleEval {
    EvalResult metrics;
    KeypointQuad pred_quad;
    bool degenerate_homography = false;
    bool empty_lssim_region = false;
};

// Warps the tuple's foreground to `pred_quad`, composites and scores it
// against the ground truth. A degenerate correspondence keeps Disp (from
// the raw predicted points) and scores the un-warped composite.
TupleEval evaluate_with_quad(const KeypointQuad& pred_quad, const TupleRecord& rec);

// Full pipeline: forward, per-heatmap soft-argmax at `beta`, then
// evaluate_with_quad.
TupleEval evaluate_tuple(const TryOnModel& model, const TupleRecord& rec, double beta = 1000.0);

EvalResult mean_eval(const std::vector<TupleEval>& evals);

// Mean gt quad over the given tuples (the `mean-quad` static baseline).
KeypointQuad mean_quad(const Dataset& ds, const std::vector<int>& indices);

} // namespace tryon
