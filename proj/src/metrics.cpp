#include "tryon/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace tryon {

namespace {

struct Box {
    int x0 = 0, y0 = 0, x1 = -1, y1 = -1; // inclusive
    bool empty() const { return x1 < x0 || y1 < y0; }
    int w() const { return x1 - x0 + 1; }
    int h() const { return y1 - y0 + 1; }
};

Box mask_union_box(const Tensor& a, const Tensor& b, double threshold) {
    const int h = a.dim(1), w = a.dim(2);
    const auto va = a.values(), vb = b.values();
    Box box{w, h, -1, -1};
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const size_t i = static_cast<size_t>(y) * w + x;
            if (va[i] >= threshold || vb[i] >= threshold) {
                box.x0 = std::min(box.x0, x);
                box.x1 = std::max(box.x1, x);
                box.y0 = std::min(box.y0, y);
                box.y1 = std::max(box.y1, y);
            }
        }
    return box;
}

} // namespace

double lssim(const Tensor& pred_composite, const Tensor& gt_composite,
             const Tensor& gt_mask_warped, const Tensor& pred_mask_warped, bool* empty_region) {
    if (pred_composite.shape() != gt_composite.shape())
        throw ShapeError("lssim: image shapes differ");
    if (pred_composite.shape().size() != 3) throw ShapeError("lssim: expected [C,H,W]");
    const int c = pred_composite.dim(0), h = pred_composite.dim(1), w = pred_composite.dim(2);

    Box box = mask_union_box(gt_mask_warped, pred_mask_warped, 0.5);
    bool empty = box.empty();
    if (empty) {
        box = {0, 0, w - 1, h - 1};
    } else {
        box.x0 = std::max(0, box.x0 - 5);
        box.y0 = std::max(0, box.y0 - 5);
        box.x1 = std::min(w - 1, box.x1 + 5);
        box.y1 = std::min(h - 1, box.y1 + 5);
    }
    if (empty_region) *empty_region = empty;

    // 11x11 Gaussian window, sigma 1.5
    constexpr int kHalf = 5;
    double win[11][11];
    double wsum = 0.0;
    for (int dy = -kHalf; dy <= kHalf; ++dy)
        for (int dx = -kHalf; dx <= kHalf; ++dx) {
            const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5));
            win[dy + kHalf][dx + kHalf] = v;
            wsum += v;
        }
    for (auto& row : win)
        for (double& v : row) v /= wsum;

    constexpr double c1 = 0.01 * 0.01;
    constexpr double c2 = 0.03 * 0.03;

    const auto vp = pred_composite.values(), vg = gt_composite.values();
    const size_t plane = static_cast<size_t>(h) * w;

    double total = 0.0;
    int64_t count = 0;
    for (int ch = 0; ch < c; ++ch) {
        const double* p = vp.data() + ch * plane;
        const double* q = vg.data() + ch * plane;
        double chan_total = 0.0;
        int64_t chan_count = 0;
#pragma omp parallel for schedule(static) reduction(+ : chan_total, chan_count)
        for (int y = box.y0; y <= box.y1; ++y) {
            for (int x = box.x0; x <= box.x1; ++x) {
                // weighted local stats; window taps outside the evaluated
                // region are dropped and the weights renormalized
                double sw = 0.0, mu_p = 0.0, mu_q = 0.0;
                for (int dy = -kHalf; dy <= kHalf; ++dy) {
                    const int yy = y + dy;
                    if (yy < box.y0 || yy > box.y1) continue;
                    for (int dx = -kHalf; dx <= kHalf; ++dx) {
                        const int xx = x + dx;
                        if (xx < box.x0 || xx > box.x1) continue;
                        const double wv = win[dy + kHalf][dx + kHalf];
                        const size_t i = static_cast<size_t>(yy) * w + xx;
                        sw += wv;
                        mu_p += wv * p[i];
                        mu_q += wv * q[i];
                    }
                }
                mu_p /= sw;
                mu_q /= sw;
                double var_p = 0.0, var_q = 0.0, cov = 0.0;
                for (int dy = -kHalf; dy <= kHalf; ++dy) {
                    const int yy = y + dy;
                    if (yy < box.y0 || yy > box.y1) continue;
                    for (int dx = -kHalf; dx <= kHalf; ++dx) {
                        const int xx = x + dx;
                        if (xx < box.x0 || xx > box.x1) continue;
                        const double wv = win[dy + kHalf][dx + kHalf] / sw;
                        const size_t i = static_cast<size_t>(yy) * w + xx;
                        const double dp = p[i] - mu_p, dq = q[i] - mu_q;
                        var_p += wv * dp * dp;
                        var_q += wv * dq * dq;
                        cov += wv * dp * dq;
                    }
                }
                const double num = (2.0 * mu_p * mu_q + c1) * (2.0 * cov + c2);
                const double den =
                    (mu_p * mu_p + mu_q * mu_q + c1) * (var_p + var_q + c2);
                chan_total += num / den;
                ++chan_count;
            }
        }
        total += chan_total / static_cast<double>(chan_count);
        count = chan_count;
    }
    (void)count;
    return total / c;
}

double mask_iou(const Tensor& pred_mask_warped, const Tensor& gt_mask_warped, double threshold) {
    if (pred_mask_warped.shape() != gt_mask_warped.shape())
        throw ShapeError("mask_iou: shapes differ");
    const auto a = pred_mask_warped.values(), b = gt_mask_warped.values();
    int64_t inter = 0, uni = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        const bool pa = a[i] >= threshold, pb = b[i] >= threshold;
        inter += pa && pb;
        uni += pa || pb;
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

namespace {

using Poly = std::vector<Point>;

double polygon_area(const Poly& p) {
    double a = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        const Point& u = p[i];
        const Point& v = p[(i + 1) % p.size()];
        a += u.x * v.y - v.x * u.y;
    }
    return 0.5 * a;
}

// quad stored A,B,C,D = TL,TR,BL,BR; ring order is A,B,D,C
Poly quad_ring(const KeypointQuad& q) { return {q[0], q[1], q[3], q[2]}; }

bool is_convex(const Poly& p) {
    int sign = 0;
    for (size_t i = 0; i < p.size(); ++i) {
        const Point a = p[i], b = p[(i + 1) % p.size()], c = p[(i + 2) % p.size()];
        const double cross = (b.x - a.x) * (c.y - b.y) - (b.y - a.y) * (c.x - b.x);
        if (std::abs(cross) < 1e-12) continue;
        const int s = cross > 0 ? 1 : -1;
        if (sign == 0)
            sign = s;
        else if (s != sign)
            return false;
    }
    return sign != 0;
}

Poly ensure_ccw(Poly p) {
    if (polygon_area(p) < 0) std::reverse(p.begin(), p.end());
    return p;
}

// Sutherland-Hodgman clip of subject against one directed edge (a->b) of a
// CCW clip polygon: keep the left side.
Poly clip_edge(const Poly& subject, Point a, Point b) {
    Poly out;
    const double ex = b.x - a.x, ey = b.y - a.y;
    auto inside = [&](Point p) { return ex * (p.y - a.y) - ey * (p.x - a.x) >= 0.0; };
    auto intersect = [&](Point p, Point q) {
        const double dx = q.x - p.x, dy = q.y - p.y;
        const double denom = ex * dy - ey * dx;
        const double t = (ex * (a.y - p.y) - ey * (a.x - p.x)) / denom;
        return Point{p.x + t * dx, p.y + t * dy};
    };
    for (size_t i = 0; i < subject.size(); ++i) {
        const Point cur = subject[i];
        const Point prev = subject[(i + subject.size() - 1) % subject.size()];
        const bool cin = inside(cur), pin = inside(prev);
        if (cin) {
            if (!pin) out.push_back(intersect(prev, cur));
            out.push_back(cur);
        } else if (pin) {
            out.push_back(intersect(prev, cur));
        }
    }
    return out;
}

} // namespace

std::optional<double> quad_iou_oracle(const KeypointQuad& pred, const KeypointQuad& gt) {
    Poly a = quad_ring(pred), b = quad_ring(gt);
    if (!is_convex(a) || !is_convex(b)) return std::nullopt;
    a = ensure_ccw(a);
    b = ensure_ccw(b);
    Poly inter = a;
    for (size_t i = 0; i < b.size() && !inter.empty(); ++i)
        inter = clip_edge(inter, b[i], b[(i + 1) % b.size()]);
    const double ai = inter.size() >= 3 ? std::abs(polygon_area(inter)) : 0.0;
    const double area_a = std::abs(polygon_area(a));
    const double area_b = std::abs(polygon_area(b));
    const double uni = area_a + area_b - ai;
    return uni <= 0.0 ? 0.0 : ai / uni;
}

double disp(const KeypointQuad& pred, const KeypointQuad& gt, double canvas_side) {
    if (canvas_side <= 0.0) throw ConfigError("disp: canvas side must be positive");
    double acc = 0.0;
    for (size_t k = 0; k < 4; ++k)
        acc += std::hypot(pred[k].x - gt[k].x, pred[k].y - gt[k].y);
    return acc / 4.0 / canvas_side;
}

TupleEval evaluate_with_quad(const KeypointQuad& pred_quad, const TupleRecord& rec) {
    const int s = rec.bg_image.dim(1);
    TupleEval ev;
    ev.pred_quad = pred_quad;

    const KeypointQuad src = source_quad(rec.fg_mask);
    Tensor pred_mask, pred_comp;
    try {
        const Homography t = solve_homography(src, pred_quad);
        Tensor fg_w = warp(rec.fg_image, t, s, s);
        pred_mask = warp(rec.fg_mask, t, s, s);
        pred_comp = composite(rec.bg_image, fg_w, pred_mask);
    } catch (const GeometryError&) {
        // Disp still measures the raw points; the composite degrades to the
        // bare background.
        ev.degenerate_homography = true;
        pred_mask = Tensor::zeros({1, s, s});
        pred_comp = rec.bg_image;
    }

    Tensor gt_mask = warp(rec.fg_mask, rec.gt_homography, s, s);
    ev.metrics.lssim =
        lssim(pred_comp, rec.gt_composite, gt_mask, pred_mask, &ev.empty_lssim_region);
    ev.metrics.iou = mask_iou(pred_mask, gt_mask);
    ev.metrics.disp = disp(pred_quad, rec.gt_quad, static_cast<double>(s));
    return ev;
}

TupleEval evaluate_tuple(const TryOnModel& model, const TupleRecord& rec, double beta) {
    NoGradGuard guard;
    ForwardOutput out = model.forward(rec.bg_image, rec.fg_image, rec.fg_mask);
    const int s = model.config().input_size;
    const size_t plane = static_cast<size_t>(s) * s;
    const auto hv = out.heatmaps.values();
    KeypointQuad pred;
    for (int k = 0; k < 4; ++k) {
        std::vector<double> slice(hv.begin() + k * plane, hv.begin() + (k + 1) * plane);
        pred[static_cast<size_t>(k)] =
            soft_argmax(Tensor::from_values({s, s}, std::move(slice)), beta);
    }
    return evaluate_with_quad(pred, rec);
}

EvalResult mean_eval(const std::vector<TupleEval>& evals) {
    EvalResult m;
    if (evals.empty()) return m;
    for (const TupleEval& e : evals) {
        m.lssim += e.metrics.lssim;
        m.iou += e.metrics.iou;
        m.disp += e.metrics.disp;
    }
    const double n = static_cast<double>(evals.size());
    m.lssim /= n;
    m.iou /= n;
    m.disp /= n;
    return m;
}

KeypointQuad mean_quad(const Dataset& ds, const std::vector<int>& indices) {
    if (indices.empty()) throw DataError("mean_quad: no tuples");
    KeypointQuad m;
    for (int i : indices)
        for (size_t k = 0; k < 4; ++k) {
            m[k].x += ds.tuples[static_cast<size_t>(i)].gt_quad[k].x;
            m[k].y += ds.tuples[static_cast<size_t>(i)].gt_quad[k].y;
        }
    for (size_t k = 0; k < 4; ++k) {
        m[k].x /= static_cast<double>(indices.size());
        m[k].y /= static_cast<double>(indices.size());
    }
    return m;
}

} // namespace tryon
