#include "tryon/heatmap.hpp"

#include "tryon/kernels.hpp"

#include <algorithm>
#include <cmath>

namespace tryon {

void AWingParams::validate() const {
    if (omega <= 0.0 || theta <= 0.0 || epsilon <= 0.0)
        throw ConfigError("awing: omega, theta, epsilon must be positive");
    if (alpha <= 1.0) throw ConfigError("awing: alpha must be > 1");
}

double AWingParams::a_coef(double y) const {
    const double e = alpha - y;
    const double t = std::pow(theta / epsilon, e);
    return omega * (1.0 / (1.0 + t)) * e * std::pow(theta / epsilon, e - 1.0) / epsilon;
}

double AWingParams::b_coef(double y) const {
    const double t = std::pow(theta / epsilon, alpha - y);
    return theta * a_coef(y) - omega * std::log1p(t);
}

double AWingParams::eval(double y, double y_hat) const {
    const double d = std::abs(y - y_hat);
    if (d < theta) return omega * std::log1p(std::pow(d / epsilon, alpha - y));
    return a_coef(y) * d - b_coef(y);
}

LossVariant loss_variant_from_string(const std::string& s) {
    if (s == "weighted-awing") return LossVariant::weighted_awing;
    if (s == "awing") return LossVariant::awing;
    if (s == "weighted-mse") return LossVariant::weighted_mse;
    if (s == "mse") return LossVariant::mse;
    throw ConfigError("unknown loss variant '" + s +
                      "' (expected weighted-awing|awing|weighted-mse|mse)");
}

std::string to_string(LossVariant v) {
    switch (v) {
    case LossVariant::weighted_awing: return "weighted-awing";
    case LossVariant::awing: return "awing";
    case LossVariant::weighted_mse: return "weighted-mse";
    case LossVariant::mse: return "mse";
    }
    return "?";
}

void LossConfig::validate() const {
    if (gamma < 0.0) throw ConfigError("loss: gamma must be non-negative");
    if (lambda < 0.0) throw ConfigError("loss: lambda must be non-negative");
    if (gaussian_radius <= 0) throw ConfigError("loss: gaussian radius must be positive");
    awing.validate();
}

int LossConfig::radius_at(int side) const {
    const int g = static_cast<int>(
        std::lround(static_cast<double>(gaussian_radius) * side / 224.0));
    return std::max(g, 1);
}

Tensor render_gaussian(double cx, double cy, int h, int w, double g) {
    if (g <= 0.0) throw ConfigError("render_gaussian: radius must be positive");
    if (h <= 0 || w <= 0) throw ShapeError("render_gaussian: empty canvas");
    std::vector<double> out(static_cast<size_t>(h) * w);
    kernels::gaussian_heatmap(cx, cy, g, h, w, out.data());
    return Tensor::from_values({h, w}, std::move(out));
}

Tensor dilate3x3(const Tensor& h) {
    if (h.shape().size() != 2) throw ShapeError("dilate3x3: expected [H,W]");
    const int rows = h.dim(0), cols = h.dim(1);
    const auto v = h.values();
    std::vector<double> out(v.size());
    for (int y = 0; y < rows; ++y) {
        for (int x = 0; x < cols; ++x) {
            double best = 0.0; // zero-padded borders
            for (int dy = -1; dy <= 1; ++dy) {
                const int yy = y + dy;
                if (yy < 0 || yy >= rows) continue;
                for (int dx = -1; dx <= 1; ++dx) {
                    const int xx = x + dx;
                    if (xx < 0 || xx >= cols) continue;
                    best = std::max(best, v[static_cast<size_t>(yy) * cols + xx]);
                }
            }
            out[static_cast<size_t>(y) * cols + x] = best;
        }
    }
    return Tensor::from_values(h.shape(), std::move(out));
}

Tensor positive_mask(const Tensor& h_dilated, double threshold) {
    const auto v = h_dilated.values();
    std::vector<double> out(v.size());
    for (size_t i = 0; i < v.size(); ++i) out[i] = v[i] >= threshold ? 1.0 : 0.0;
    return Tensor::from_values(h_dilated.shape(), std::move(out));
}

void HeatmapSet::validate() const {
    if (!gt.defined() || !pos_mask.defined())
        throw DataError("heatmap set: gt and pos_mask must be defined");
    if (gt.shape() != pos_mask.shape())
        throw ShapeError("heatmap set: gt and pos_mask shapes differ");
    if (pred.defined() && pred.shape() != gt.shape())
        throw ShapeError("heatmap set: pred shape " + shape_str(pred.shape()) +
                         " does not match gt " + shape_str(gt.shape()));
    for (double v : gt.values())
        if (v < 0.0 || v > 1.0) throw DataError("heatmap set: gt values must be in [0,1]");
    for (double v : pos_mask.values())
        if (v != 0.0 && v != 1.0) throw DataError("heatmap set: mask values must be 0/1");
}

HeatmapSet make_ground_truth(const KeypointQuad& quad, int h, int w, double g) {
    std::vector<double> gt;
    std::vector<double> mask;
    gt.reserve(static_cast<size_t>(4) * h * w);
    mask.reserve(gt.capacity());
    for (int k = 0; k < 4; ++k) {
        Tensor hm = render_gaussian(quad[k].x, quad[k].y, h, w, g);
        Tensor m = positive_mask(dilate3x3(hm));
        gt.insert(gt.end(), hm.values().begin(), hm.values().end());
        mask.insert(mask.end(), m.values().begin(), m.values().end());
    }
    HeatmapSet set;
    set.gt = Tensor::from_values({4, h, w}, std::move(gt));
    set.pos_mask = Tensor::from_values({4, h, w}, std::move(mask));
    return set;
}

Tensor awing_loss_map(const Tensor& pred, const Tensor& gt, const AWingParams& params) {
    params.validate();
    if (pred.shape() != gt.shape())
        throw ShapeError("awing: pred/gt shapes differ");
    const auto gv = gt.values();
    const size_t n = gv.size();
    // Per-pixel constants derived from the ground-truth value.
    std::vector<double> evec(n), avec(n), bvec(n);
    for (size_t i = 0; i < n; ++i) {
        evec[i] = params.alpha - gv[i];
        avec[i] = params.a_coef(gv[i]);
        bvec[i] = params.b_coef(gv[i]);
    }
    const Tensor e_const = Tensor::from_values(gt.shape(), std::move(evec));
    const Tensor a_const = Tensor::from_values(gt.shape(), std::move(avec));
    const Tensor b_const = Tensor::from_values(gt.shape(), std::move(bvec));

    Tensor diff = sub(gt, pred);
    Tensor ad = abs_elem(diff);

    // ln branch: omega * ln(1 + (|d|/eps)^(alpha - y))
    Tensor powed = pow_elem(scalar_mul(ad, 1.0 / params.epsilon), e_const);
    Tensor ln_branch = scalar_mul(log_elem(add_const(powed, 1.0)), params.omega);
    // linear branch: A|d| - B
    Tensor lin_branch = sub(mul(a_const, ad), b_const);

    // Branch selector evaluated at the current forward values; constant in
    // the graph, matching the piecewise definition almost everywhere.
    std::vector<double> sel(n), inv(n);
    const auto adv = ad.values();
    for (size_t i = 0; i < n; ++i) {
        const bool ln = adv[i] < params.theta;
        sel[i] = ln ? 1.0 : 0.0;
        inv[i] = ln ? 0.0 : 1.0;
    }
    const Tensor sel_t = Tensor::from_values(gt.shape(), std::move(sel));
    const Tensor inv_t = Tensor::from_values(gt.shape(), std::move(inv));
    return add(mul(ln_branch, sel_t), mul(lin_branch, inv_t));
}

Tensor heatmap_loss(const HeatmapSet& set, const LossConfig& cfg) {
    cfg.validate();
    set.validate();
    if (!set.pred.defined()) throw DataError("heatmap_loss: set has no prediction");

    Tensor loss_map;
    switch (cfg.variant) {
    case LossVariant::weighted_awing:
    case LossVariant::awing:
        loss_map = awing_loss_map(set.pred, set.gt, cfg.awing);
        break;
    case LossVariant::weighted_mse:
    case LossVariant::mse: {
        Tensor d = sub(set.pred, set.gt);
        loss_map = mul(d, d);
        break;
    }
    }

    const bool weighted =
        cfg.variant == LossVariant::weighted_awing || cfg.variant == LossVariant::weighted_mse;
    if (weighted) {
        const auto mv = set.pos_mask.values();
        std::vector<double> wv(mv.size());
        for (size_t i = 0; i < mv.size(); ++i) wv[i] = cfg.gamma * mv[i] + 1.0;
        loss_map = mul(loss_map, Tensor::from_values(set.pos_mask.shape(), std::move(wv)));
    }
    return mean_all(loss_map);
}

} // namespace tryon
