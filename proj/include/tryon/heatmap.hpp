#pragma once

#include "tryon/geometry.hpp"
#include "tryon/tensor.hpp"

#include <string>

namespace tryon {

// Adaptive Wing loss hyper-parameters. A and B are derived per ground-truth
// value y so the two branches join continuously and smoothly at
// |y - y_hat| = theta.
struct AWingParams {
    double omega = 14.0;
    double alpha = 2.1;
    double theta = 0.5;
    double epsilon = 1.0;

    void validate() const;

    // A = w * (1/(1+(th/eps)^(a-y))) * (a-y) * (th/eps)^(a-y-1) / eps
    double a_coef(double y) const;
    // B = theta*A - w*ln(1+(th/eps)^(a-y))
    double b_coef(double y) const;

    // Elementwise loss value (closed form, both branches).
    double eval(double y, double y_hat) const;
};

enum class LossVariant { weighted_awing, awing, weighted_mse, mse };

LossVariant loss_variant_from_string(const std::string& s);
std::string to_string(LossVariant v);

struct LossConfig {
    double gamma = 10.0;  // positive-mask magnification
    double lambda = 0.1;  // semantic loss weight
    int gaussian_radius = 20; // in pixels at the 224 reference resolution
    LossVariant variant = LossVariant::weighted_awing;
    AWingParams awing;

    void validate() const;

    // Radius used at resolution `side`, scaled proportionally from the
    // 224-pixel reference.
    int radius_at(int side) const;
};

// Truncated Gaussian bump: value exp(-d^2/(2 sigma^2)) with sigma = g/3,
// zero beyond distance g. Subpixel centers are rendered as-is, so the peak
// pixel is exactly 1.0 only for pixel-aligned centers. Centers may lie
// outside the canvas; callers reject all-zero results.
Tensor render_gaussian(double cx, double cy, int h, int w, double g);

// 3x3 max filter with zero-padded borders, on [H,W] heatmaps.
Tensor dilate3x3(const Tensor& h);

// M_pos(p) = 1 where h(p) >= threshold (inclusive), else 0.
Tensor positive_mask(const Tensor& h_dilated, double threshold = 0.2);

// Ground-truth heatmaps H plus positive mask M_pos, and (optionally) the
// predicted heatmaps they supervise. All [K,H,W] with matching sizes.
struct HeatmapSet {
    Tensor gt;       // constants in [0,1], peak 1.0 at pixel-aligned centers
    Tensor pos_mask; // constants in {0,1}
    Tensor pred;     // unbounded reals, usually grad-tracked

    void validate() const;
};

// Renders gt + pos_mask for the four quad keypoints.
HeatmapSet make_ground_truth(const KeypointQuad& quad, int h, int w, double g);

// Elementwise AWing over a grad-tracked prediction against constant ground
// truth, composed from the engine primitives so gradients flow into pred.
Tensor awing_loss_map(const Tensor& pred, const Tensor& gt, const AWingParams& params);

// Mean over heatmaps and pixels of elementwise-loss(gt, pred) weighted by
// (gamma * M_pos + 1) for the weighted variants.
Tensor heatmap_loss(const HeatmapSet& set, const LossConfig& cfg);

} // namespace tryon
