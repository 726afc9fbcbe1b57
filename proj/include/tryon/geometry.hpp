#pragma once

#include "tryon/tensor.hpp"

#include <array>
#include <utility>

namespace tryon {

// Pixel coordinates: x = column, y = row, origin at the top-left pixel
// center. All geometry below uses this convention.
struct Point {
    double x = 0.0;
    double y = 0.0;
};

inline Point operator+(Point a, Point b) { return {a.x + b.x, a.y + b.y}; }
inline Point operator-(Point a, Point b) { return {a.x - b.x, a.y - b.y}; }

// Four keypoints in fixed order: A = top-left, B = top-right,
// C = bottom-left, D = bottom-right of the foreground bounding box. The
// k-th heatmap is bound to this order everywhere.
struct KeypointQuad {
    std::array<Point, 4> pts{};

    Point& operator[](size_t i) { return pts[i]; }
    const Point& operator[](size_t i) const { return pts[i]; }
};

// 3x3 perspective transform, row-major, normalized so m[8] == 1.
struct Homography {
    std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

    static Homography identity() { return {}; }

    Point apply(Point p) const;
    KeypointQuad apply(const KeypointQuad& q) const;
    double det() const;
    Homography inverse() const; // throws GeometryError when singular
};

// Eq-style soft-argmax: expectation of pixel coordinates under
// softmax(beta * h). Differentiable; returns (x, y) as scalar tensors.
std::pair<Tensor, Tensor> soft_argmax_xy(const Tensor& heatmap, double beta);

// Convenience wrapper evaluating soft_argmax_xy without recording a graph.
Point soft_argmax(const Tensor& heatmap, double beta);

// Tight axis-aligned bounding-box corners of the mask's foreground
// (values > 0.5), in A/B/C/D order. Throws GeometryError on empty masks.
KeypointQuad source_quad(const Tensor& fg_mask);

// 4-point direct linear transform with Hartley-style normalization.
// Rejects configurations whose normalized 8x8 system has a condition
// estimate above 1e10 (three collinear points, coincident points, ...).
Homography solve_homography(const KeypointQuad& src, const KeypointQuad& dst);

// Backward warp: every output pixel samples image at t^-1 * p with
// bilinear interpolation and zero padding outside the source. Applied the
// same way to images and masks, so interpolated mask values stay in [0,1].
Tensor warp(const Tensor& image, const Homography& t, int out_h, int out_w);

// I_c = mask * fg + (1 - mask) * bg, per pixel and channel. mask is
// [1,H,W] or [C,H,W] with values in [0,1].
Tensor composite(const Tensor& bg, const Tensor& fg_warped, const Tensor& mask_warped);

} // namespace tryon
