#include "tryon/geometry.hpp"

#include "tryon/kernels.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

namespace tryon {

Point Homography::apply(Point p) const {
    const double w = m[6] * p.x + m[7] * p.y + m[8];
    if (std::abs(w) < 1e-15 || !std::isfinite(w))
        throw GeometryError("homography maps point to infinity");
    return {(m[0] * p.x + m[1] * p.y + m[2]) / w, (m[3] * p.x + m[4] * p.y + m[5]) / w};
}

KeypointQuad Homography::apply(const KeypointQuad& q) const {
    KeypointQuad out;
    for (size_t i = 0; i < 4; ++i) out[i] = apply(q[i]);
    return out;
}

double Homography::det() const {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
}

Homography Homography::inverse() const {
    const double d = det();
    if (std::abs(d) < 1e-12) throw GeometryError("homography is singular (|det| < 1e-12)");
    Homography inv;
    const auto& a = m;
    inv.m = {(a[4] * a[8] - a[5] * a[7]) / d, (a[2] * a[7] - a[1] * a[8]) / d,
             (a[1] * a[5] - a[2] * a[4]) / d, (a[5] * a[6] - a[3] * a[8]) / d,
             (a[0] * a[8] - a[2] * a[6]) / d, (a[2] * a[3] - a[0] * a[5]) / d,
             (a[3] * a[7] - a[4] * a[6]) / d, (a[1] * a[6] - a[0] * a[7]) / d,
             (a[0] * a[4] - a[1] * a[3]) / d};
    return inv;
}

namespace {

Tensor as_single_heatmap(const Tensor& h, int& rows, int& cols) {
    const auto& s = h.shape();
    if (s.size() == 2) {
        rows = s[0];
        cols = s[1];
        return h;
    }
    if (s.size() == 3 && s[0] == 1) {
        rows = s[1];
        cols = s[2];
        return h;
    }
    throw ShapeError("soft_argmax: expected [H,W] or [1,H,W], got " + shape_str(s));
}

} // namespace

std::pair<Tensor, Tensor> soft_argmax_xy(const Tensor& heatmap, double beta) {
    if (beta <= 0.0) throw ConfigError("soft_argmax: beta must be positive");
    int rows = 0, cols = 0;
    Tensor h = as_single_heatmap(heatmap, rows, cols);
    Tensor p = softmax_flat(scalar_mul(h, beta));
    std::vector<double> xs(static_cast<size_t>(rows) * cols), ys(xs.size());
    for (int y = 0; y < rows; ++y)
        for (int x = 0; x < cols; ++x) {
            xs[static_cast<size_t>(y) * cols + x] = static_cast<double>(x);
            ys[static_cast<size_t>(y) * cols + x] = static_cast<double>(y);
        }
    const Shape s = h.shape();
    Tensor vx = sum_all(mul(p, Tensor::from_values(s, std::move(xs))));
    Tensor vy = sum_all(mul(p, Tensor::from_values(s, std::move(ys))));
    return {vx, vy};
}

Point soft_argmax(const Tensor& heatmap, double beta) {
    NoGradGuard guard;
    auto [vx, vy] = soft_argmax_xy(heatmap, beta);
    return {vx.scalar_value(), vy.scalar_value()};
}

KeypointQuad source_quad(const Tensor& fg_mask) {
    int rows = 0, cols = 0;
    Tensor m = as_single_heatmap(fg_mask, rows, cols);
    const auto v = m.values();
    int min_x = cols, max_x = -1, min_y = rows, max_y = -1;
    for (int y = 0; y < rows; ++y)
        for (int x = 0; x < cols; ++x)
            if (v[static_cast<size_t>(y) * cols + x] > 0.5) {
                min_x = std::min(min_x, x);
                max_x = std::max(max_x, x);
                min_y = std::min(min_y, y);
                max_y = std::max(max_y, y);
            }
    if (max_x < 0) throw GeometryError("degenerate foreground: mask has no pixels > 0.5");
    KeypointQuad q;
    q[0] = {static_cast<double>(min_x), static_cast<double>(min_y)};
    q[1] = {static_cast<double>(max_x), static_cast<double>(min_y)};
    q[2] = {static_cast<double>(min_x), static_cast<double>(max_y)};
    q[3] = {static_cast<double>(max_x), static_cast<double>(max_y)};
    return q;
}

namespace {

struct NormXf {
    double scale = 1.0;
    Point shift{};
};

NormXf normalizer(const KeypointQuad& q) {
    NormXf n;
    for (size_t i = 0; i < 4; ++i) {
        n.shift.x += q[i].x / 4.0;
        n.shift.y += q[i].y / 4.0;
    }
    double mean_dist = 0.0;
    for (size_t i = 0; i < 4; ++i)
        mean_dist += std::hypot(q[i].x - n.shift.x, q[i].y - n.shift.y) / 4.0;
    n.scale = mean_dist > 1e-12 ? std::sqrt(2.0) / mean_dist : 1.0;
    return n;
}

Point apply_norm(const NormXf& n, Point p) {
    return {(p.x - n.shift.x) * n.scale, (p.y - n.shift.y) * n.scale};
}

} // namespace

Homography solve_homography(const KeypointQuad& src, const KeypointQuad& dst) {
    // Normalize both point sets; the condition estimate then reflects the
    // geometry rather than the coordinate magnitudes.
    const NormXf ns = normalizer(src), nd = normalizer(dst);

    Eigen::Matrix<double, 8, 8> a = Eigen::Matrix<double, 8, 8>::Zero();
    Eigen::Matrix<double, 8, 1> b;
    for (int i = 0; i < 4; ++i) {
        const Point s = apply_norm(ns, src[static_cast<size_t>(i)]);
        const Point d = apply_norm(nd, dst[static_cast<size_t>(i)]);
        a.row(2 * i) << s.x, s.y, 1, 0, 0, 0, -d.x * s.x, -d.x * s.y;
        a.row(2 * i + 1) << 0, 0, 0, s.x, s.y, 1, -d.y * s.x, -d.y * s.y;
        b(2 * i) = d.x;
        b(2 * i + 1) = d.y;
    }

    Eigen::JacobiSVD<Eigen::Matrix<double, 8, 8>> svd(
        a, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const double smax = svd.singularValues()(0);
    const double smin = svd.singularValues()(7);
    if (!(smin > 0.0) || smax / smin > 1e10)
        throw GeometryError("degenerate correspondences: condition estimate " +
                            std::to_string(smin > 0.0 ? smax / smin : 0.0) + " exceeds 1e10");
    const Eigen::Matrix<double, 8, 1> h = svd.solve(b);

    Eigen::Matrix3d hn;
    hn << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), 1.0;
    // Denormalize: T = Td^-1 * Hn * Ts
    Eigen::Matrix3d ts, td;
    ts << ns.scale, 0, -ns.scale * ns.shift.x, 0, ns.scale, -ns.scale * ns.shift.y, 0, 0, 1;
    td << nd.scale, 0, -nd.scale * nd.shift.x, 0, nd.scale, -nd.scale * nd.shift.y, 0, 0, 1;
    Eigen::Matrix3d t = td.inverse() * hn * ts;
    if (std::abs(t(2, 2)) < 1e-12)
        throw GeometryError("degenerate correspondences: cannot normalize m[2][2] to 1");
    t /= t(2, 2);

    Homography out;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) out.m[static_cast<size_t>(r * 3 + c)] = t(r, c);
    if (std::abs(out.det()) < 1e-12)
        throw GeometryError("degenerate correspondences: resulting transform is singular");
    return out;
}

Tensor warp(const Tensor& image, const Homography& t, int out_h, int out_w) {
    if (image.shape().size() != 3)
        throw ShapeError("warp: expected [C,H,W], got " + shape_str(image.shape()));
    if (out_h <= 0 || out_w <= 0) throw ShapeError("warp: empty output size");
    const Homography inv = t.inverse();
    const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
    std::vector<double> out(static_cast<size_t>(c) * out_h * out_w);
    kernels::warp_bilinear(image.values().data(), c, h, w, inv.m.data(), out.data(), out_h,
                           out_w);
    return Tensor::from_values({c, out_h, out_w}, std::move(out));
}

Tensor composite(const Tensor& bg, const Tensor& fg_warped, const Tensor& mask_warped) {
    if (bg.shape() != fg_warped.shape())
        throw ShapeError("composite: background/foreground shapes differ");
    if (bg.shape().size() != 3) throw ShapeError("composite: expected [C,H,W]");
    const int c = bg.dim(0), h = bg.dim(1), w = bg.dim(2);
    const bool mask_per_channel = mask_warped.shape() == bg.shape();
    if (!mask_per_channel && mask_warped.shape() != Shape{1, h, w})
        throw ShapeError("composite: mask must be [1,H,W] or match the images");
    const auto vb = bg.values(), vf = fg_warped.values(), vm = mask_warped.values();
    for (double m : vm)
        if (m < -1e-9 || m > 1.0 + 1e-9)
            throw DataError("composite: mask values must lie in [0,1]");
    const size_t plane = static_cast<size_t>(h) * w;
    std::vector<double> out(vb.size());
    for (int ch = 0; ch < c; ++ch) {
        const double* mp = vm.data() + (mask_per_channel ? ch * plane : 0);
        const double* bp = vb.data() + ch * plane;
        const double* fp = vf.data() + ch * plane;
        double* op = out.data() + ch * plane;
        for (size_t i = 0; i < plane; ++i) op[i] = mp[i] * fp[i] + (1.0 - mp[i]) * bp[i];
    }
    return Tensor::from_values(bg.shape(), std::move(out));
}

} // namespace tryon
