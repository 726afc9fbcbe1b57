#include "tryon/synthdata.hpp"

#include "tryon/heatmap.hpp"
#include "tryon/png_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace tryon {

namespace {

constexpr double kPi = 3.14159265358979323846;

// face classes
enum : int {
    kFaceBackground = 0,
    kFaceHair = 1,
    kFaceHat = 2,
    kFaceEyebrows = 3,
    kFaceGlasses = 4,
    kFaceEyes = 5,
    kFaceNose = 6,
    kFaceMouth = 7,
    kFaceSkin = 8,
    kFaceNeck = 9,
    kFaceEars = 10,
    kFaceClothing = 11,
};

// body classes
enum : int {
    kBodyBackground = 0,
    kBodyHead = 1,
    kBodyUpper = 2,
    kBodyLower = 3,
    kBodyArms = 4,
    kBodyLegs = 5,
    kBodyShoes = 6,
    kBodyBags = 7,
};

struct Rgb {
    double r = 0, g = 0, b = 0;
};

Rgb hsv(double h, double s, double v) {
    h = h - std::floor(h);
    const double c = v * s;
    const double hp = h * 6.0;
    const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    if (hp < 1) {
        r = c; g = x;
    } else if (hp < 2) {
        r = x; g = c;
    } else if (hp < 3) {
        g = c; b = x;
    } else if (hp < 4) {
        g = x; b = c;
    } else if (hp < 5) {
        r = x; b = c;
    } else {
        r = c; b = x;
    }
    const double m = v - c;
    return {r + m, g + m, b + m};
}

// Scratch painter: RGB planes + class plane, painted back to front.
struct Painter {
    int side;
    std::vector<double> rgb; // [3,S,S]
    std::vector<int> cls;    // [S,S]

    explicit Painter(int s) : side(s), rgb(3ull * s * s, 0.0), cls(1ull * s * s, 0) {}

    void fill(Rgb color, int id) {
        const size_t plane = static_cast<size_t>(side) * side;
        std::fill(rgb.begin(), rgb.begin() + plane, color.r);
        std::fill(rgb.begin() + plane, rgb.begin() + 2 * plane, color.g);
        std::fill(rgb.begin() + 2 * plane, rgb.end(), color.b);
        std::fill(cls.begin(), cls.end(), id);
    }

    template <typename InsideFn>
    void paint(InsideFn&& inside, Rgb color, int id) {
        const size_t plane = static_cast<size_t>(side) * side;
        for (int y = 0; y < side; ++y)
            for (int x = 0; x < side; ++x) {
                if (!inside(static_cast<double>(x), static_cast<double>(y))) continue;
                const size_t i = static_cast<size_t>(y) * side + x;
                rgb[i] = color.r;
                rgb[plane + i] = color.g;
                rgb[2 * plane + i] = color.b;
                cls[i] = id;
            }
    }

    // Vertical shading + per-pixel noise so composites have texture.
    void texture(Rng& rng, double shade, double noise) {
        const size_t plane = static_cast<size_t>(side) * side;
        for (int y = 0; y < side; ++y) {
            const double sh = 1.0 - shade + 2.0 * shade * (static_cast<double>(y) / side);
            for (int x = 0; x < side; ++x) {
                const size_t i = static_cast<size_t>(y) * side + x;
                for (int c = 0; c < 3; ++c) {
                    double v = rgb[c * plane + i] * sh + rng.uniform(-noise, noise);
                    rgb[c * plane + i] = std::clamp(v, 0.0, 1.0);
                }
            }
        }
    }

    Tensor image() const { return Tensor::from_values({3, side, side}, rgb); }
};

struct Frame {
    Point center;
    double cos_t = 1.0, sin_t = 0.0;

    Frame(Point c, double tilt) : center(c), cos_t(std::cos(tilt)), sin_t(std::sin(tilt)) {}

    // local (u right, v down) -> canvas
    Point to_canvas(double u, double v) const {
        return {center.x + cos_t * u - sin_t * v, center.y + sin_t * u + cos_t * v};
    }
    // canvas -> local
    void to_local(double x, double y, double& u, double& v) const {
        const double dx = x - center.x, dy = y - center.y;
        u = cos_t * dx + sin_t * dy;
        v = -sin_t * dx + cos_t * dy;
    }
};

auto ellipse(const Frame& f, double cu, double cv, double ru, double rv) {
    return [=](double x, double y) {
        double u, v;
        f.to_local(x, y, u, v);
        const double du = (u - cu) / ru, dv = (v - cv) / rv;
        return du * du + dv * dv <= 1.0;
    };
}

auto rect(const Frame& f, double cu, double cv, double hu, double hv) {
    return [=](double x, double y) {
        double u, v;
        f.to_local(x, y, u, v);
        return std::abs(u - cu) <= hu && std::abs(v - cv) <= hv;
    };
}

// Trapezoid symmetric about u = cu, spanning v in [v0, v1], half-width
// interpolated from hw0 (at v0) to hw1 (at v1).
auto trapezoid(const Frame& f, double cu, double v0, double v1, double hw0, double hw1) {
    return [=](double x, double y) {
        double u, v;
        f.to_local(x, y, u, v);
        if (v < v0 || v > v1) return false;
        const double t = (v - v0) / (v1 - v0);
        return std::abs(u - cu) <= hw0 + t * (hw1 - hw0);
    };
}

BackgroundSample face_background(Rng& rng, AccessoryKind kind, int s) {
    const double S = s;
    const Point center{S * rng.uniform(0.45, 0.55), S * rng.uniform(0.44, 0.52)};
    const double a = S * rng.uniform(0.20, 0.26);
    const double b = a * rng.uniform(1.18, 1.32);
    const double tilt = rng.uniform(-0.21, 0.21);
    const Frame f(center, tilt);

    Painter p(s);
    const double bg_hue = rng.uniform(0.0, 1.0);
    p.fill(hsv(bg_hue, rng.uniform(0.05, 0.2), rng.uniform(0.75, 0.92)), kFaceBackground);

    const Rgb cloth = hsv(rng.uniform(0.0, 1.0), rng.uniform(0.4, 0.8), rng.uniform(0.3, 0.7));
    p.paint(rect(f, 0.0, 1.75 * b, 2.2 * a, 0.75 * b), cloth, kFaceClothing);

    const Rgb skin = {rng.uniform(0.72, 0.92), rng.uniform(0.55, 0.75), rng.uniform(0.45, 0.62)};
    const Rgb skin_dark = {skin.r * 0.92, skin.g * 0.92, skin.b * 0.92};
    p.paint(rect(f, 0.0, 1.05 * b, 0.30 * a, 0.32 * b), skin_dark, kFaceNeck);

    const Rgb hair = hsv(rng.uniform(0.02, 0.12), rng.uniform(0.5, 0.9), rng.uniform(0.08, 0.35));
    p.paint(ellipse(f, -1.02 * a, -0.10 * b, 0.17 * a, 0.14 * b), skin_dark, kFaceEars);
    p.paint(ellipse(f, 1.02 * a, -0.10 * b, 0.17 * a, 0.14 * b), skin_dark, kFaceEars);

    p.paint(ellipse(f, 0.0, 0.0, a, b), skin, kFaceSkin);

    // hair cap: larger ellipse clipped to the upper part of the head
    auto hair_cap = [&](double x, double y) {
        double u, v;
        f.to_local(x, y, u, v);
        const double du = u / (1.06 * a), dv = v / (1.06 * b);
        return du * du + dv * dv <= 1.0 && v <= -0.55 * b;
    };
    p.paint(hair_cap, hair, kFaceHair);

    const Rgb brow = {hair.r * 0.8, hair.g * 0.8, hair.b * 0.8};
    p.paint(rect(f, -0.42 * a, -0.40 * b, 0.17 * a, 0.035 * b), brow, kFaceEyebrows);
    p.paint(rect(f, 0.42 * a, -0.40 * b, 0.17 * a, 0.035 * b), brow, kFaceEyebrows);

    const Rgb eye = {rng.uniform(0.02, 0.1), rng.uniform(0.02, 0.12), rng.uniform(0.05, 0.2)};
    p.paint(ellipse(f, -0.42 * a, -0.18 * b, 0.15 * a, 0.085 * b), eye, kFaceEyes);
    p.paint(ellipse(f, 0.42 * a, -0.18 * b, 0.15 * a, 0.085 * b), eye, kFaceEyes);

    p.paint(ellipse(f, 0.0, 0.12 * b, 0.085 * a, 0.14 * b), skin_dark, kFaceNose);

    const Rgb mouth = {rng.uniform(0.55, 0.8), rng.uniform(0.15, 0.3), rng.uniform(0.2, 0.35)};
    p.paint(ellipse(f, 0.0, 0.52 * b, 0.30 * a, 0.06 * b), mouth, kFaceMouth);

    p.texture(rng, 0.06, 0.015);

    BackgroundSample out;
    out.image = p.image();
    out.semantic = std::move(p.cls);
    out.tilt = tilt;
    if (kind == AccessoryKind::hat) {
        out.anchor_left = f.to_canvas(-0.66 * a, -0.97 * b);
        out.anchor_right = f.to_canvas(0.66 * a, -0.97 * b);
    } else {
        // eye line
        out.anchor_left = f.to_canvas(-0.60 * a, -0.18 * b);
        out.anchor_right = f.to_canvas(0.60 * a, -0.18 * b);
    }
    return out;
}

BackgroundSample body_background(Rng& rng, int s) {
    const double S = s;
    const Point center{S * rng.uniform(0.46, 0.54), S * rng.uniform(0.40, 0.46)};
    const double tw = S * rng.uniform(0.13, 0.17); // torso half-width
    const double th = S * rng.uniform(0.16, 0.20); // torso half-height
    const double tilt = rng.uniform(-0.16, 0.16);
    const Frame f(center, tilt);

    Painter p(s);
    p.fill(hsv(rng.uniform(0.0, 1.0), rng.uniform(0.05, 0.2), rng.uniform(0.72, 0.9)),
           kBodyBackground);

    const Rgb skin = {rng.uniform(0.72, 0.9), rng.uniform(0.55, 0.75), rng.uniform(0.45, 0.62)};
    const Rgb shirt = hsv(rng.uniform(0.0, 1.0), rng.uniform(0.45, 0.85), rng.uniform(0.45, 0.8));
    const Rgb pants = hsv(rng.uniform(0.5, 0.7), rng.uniform(0.3, 0.7), rng.uniform(0.2, 0.45));
    const Rgb shoes = {0.12, 0.1, 0.1};

    const double hr = S * rng.uniform(0.075, 0.095);
    const double leg_h = S * rng.uniform(0.16, 0.22);

    // legs, shoes, lower, arms, torso, head (later paints win)
    p.paint(rect(f, -0.45 * tw, th + 0.55 * leg_h + 0.4 * th, 0.22 * tw, 0.55 * leg_h), pants,
            kBodyLegs);
    p.paint(rect(f, 0.45 * tw, th + 0.55 * leg_h + 0.4 * th, 0.22 * tw, 0.55 * leg_h), pants,
            kBodyLegs);
    p.paint(rect(f, -0.45 * tw, th + 1.12 * leg_h + 0.4 * th, 0.26 * tw, 0.05 * leg_h + 1.5),
            shoes, kBodyShoes);
    p.paint(rect(f, 0.45 * tw, th + 1.12 * leg_h + 0.4 * th, 0.26 * tw, 0.05 * leg_h + 1.5),
            shoes, kBodyShoes);
    p.paint(rect(f, 0.0, th + 0.4 * th * 0.5, tw, 0.4 * th * 0.5), pants, kBodyLower);
    p.paint(rect(f, -(tw + 0.16 * tw), -0.1 * th, 0.16 * tw, 0.85 * th), shirt, kBodyArms);
    p.paint(rect(f, tw + 0.16 * tw, -0.1 * th, 0.16 * tw, 0.85 * th), shirt, kBodyArms);
    p.paint(rect(f, 0.0, 0.0, tw, th), shirt, kBodyUpper);
    p.paint(ellipse(f, 0.0, -th - hr * 1.05, hr, hr * 1.12), skin, kBodyHead);

    p.texture(rng, 0.05, 0.015);

    BackgroundSample out;
    out.image = p.image();
    out.semantic = std::move(p.cls);
    out.tilt = tilt;
    // neckline
    out.anchor_left = f.to_canvas(-0.42 * tw, -0.96 * th);
    out.anchor_right = f.to_canvas(0.42 * tw, -0.96 * th);
    return out;
}

// Train/test foreground shapes come from disjoint sub-ranges of each
// parameter so the splits share no foreground.
double draw_disjoint(Rng& rng, bool is_train, double lo, double hi) {
    const double span = hi - lo;
    return is_train ? rng.uniform(lo, lo + 0.45 * span) : rng.uniform(lo + 0.55 * span, hi);
}

ForegroundSample glasses_foreground(Rng& rng, int s, bool is_train) {
    const double S = s;
    Painter p(s);
    std::vector<double> mask(static_cast<size_t>(s) * s, 0.0);

    const double lens_rx = S * rng.uniform(0.13, 0.17);
    const double aspect = draw_disjoint(rng, is_train, 0.70, 0.98);
    const double frame_t = draw_disjoint(rng, is_train, 1.6, 3.0) * S / 64.0;
    const double hue = draw_disjoint(rng, is_train, 0.0, 0.95);
    const double bridge_half = S * rng.uniform(0.035, 0.055);
    const double arm_len = S * rng.uniform(0.05, 0.08);

    const double lens_ry = lens_rx * aspect;
    const double cy = S / 2.0, cx = S / 2.0;
    const double lens_off = lens_rx + bridge_half;

    const Rgb frame = hsv(hue, 0.55, 0.22);
    const Rgb lens = hsv(hue, 0.45, 0.5);
    const Frame f({cx, cy}, 0.0);

    auto mark = [&](auto&& inside, Rgb color, int) {
        p.paint(inside, color, 1);
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x)
                if (inside(static_cast<double>(x), static_cast<double>(y)))
                    mask[static_cast<size_t>(y) * s + x] = 1.0;
    };

    mark(rect(f, 0.0, 0.0, bridge_half + 1.0, frame_t * 0.5 + 0.5), frame, 1);
    mark(rect(f, -(lens_off + lens_rx + arm_len * 0.5), -0.25 * lens_ry, arm_len * 0.5,
              frame_t * 0.5 + 0.5),
         frame, 1);
    mark(rect(f, lens_off + lens_rx + arm_len * 0.5, -0.25 * lens_ry, arm_len * 0.5,
              frame_t * 0.5 + 0.5),
         frame, 1);
    for (int side = -1; side <= 1; side += 2) {
        mark(ellipse(f, side * lens_off, 0.0, lens_rx, lens_ry), frame, 1);
        mark(ellipse(f, side * lens_off, 0.0, lens_rx - frame_t, lens_ry - frame_t), lens, 1);
    }

    ForegroundSample out;
    out.image = p.image();
    out.mask = Tensor::from_values({1, s, s}, std::move(mask));
    out.shape_params = {{"aspect", aspect}, {"frame", frame_t}, {"hue", hue}};
    return out;
}

ForegroundSample hat_foreground(Rng& rng, int s, bool is_train) {
    const double S = s;
    Painter p(s);
    std::vector<double> mask(static_cast<size_t>(s) * s, 0.0);

    const double crown_hw = S * rng.uniform(0.16, 0.20);
    const double crown_top = draw_disjoint(rng, is_train, 0.55, 0.85); // top/bottom width ratio
    const double brim_ratio = draw_disjoint(rng, is_train, 1.25, 1.70);
    const double hue = draw_disjoint(rng, is_train, 0.0, 0.95);
    const double crown_h = S * rng.uniform(0.14, 0.18);
    const double brim_h = S * rng.uniform(0.020, 0.034);

    const Frame f({S / 2.0, S / 2.0}, 0.0);
    const Rgb felt = hsv(hue, 0.6, 0.45);
    const Rgb band = hsv(hue + 0.5, 0.5, 0.25);

    auto mark = [&](auto&& inside, Rgb color) {
        p.paint(inside, color, 1);
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x)
                if (inside(static_cast<double>(x), static_cast<double>(y)))
                    mask[static_cast<size_t>(y) * s + x] = 1.0;
    };

    mark(trapezoid(f, 0.0, -crown_h, 0.0, crown_hw * crown_top, crown_hw), felt);
    mark(rect(f, 0.0, -0.12 * crown_h, crown_hw * 0.98, 0.10 * crown_h), band);
    mark(rect(f, 0.0, brim_h, crown_hw * brim_ratio, brim_h), felt);

    ForegroundSample out;
    out.image = p.image();
    out.mask = Tensor::from_values({1, s, s}, std::move(mask));
    out.shape_params = {{"crown_top", crown_top}, {"brim_ratio", brim_ratio}, {"hue", hue}};
    return out;
}

ForegroundSample tie_foreground(Rng& rng, int s, bool is_train) {
    const double S = s;
    Painter p(s);
    std::vector<double> mask(static_cast<size_t>(s) * s, 0.0);

    const double knot_hw = S * rng.uniform(0.035, 0.050);
    const double width_ratio = draw_disjoint(rng, is_train, 1.30, 2.00);
    const double hue = draw_disjoint(rng, is_train, 0.0, 0.95);
    const double length = S * draw_disjoint(rng, is_train, 0.26, 0.38);
    const double knot_h = S * 0.055;

    const Frame f({S / 2.0, S / 2.0 - length * 0.5}, 0.0);
    const Rgb silk = hsv(hue, 0.7, 0.5);
    const Rgb silk_dark = hsv(hue, 0.7, 0.38);

    auto mark = [&](auto&& inside, Rgb color) {
        p.paint(inside, color, 1);
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x)
                if (inside(static_cast<double>(x), static_cast<double>(y)))
                    mask[static_cast<size_t>(y) * s + x] = 1.0;
    };

    mark(trapezoid(f, 0.0, 0.0, knot_h, knot_hw * 0.75, knot_hw), silk_dark);
    // widening body then taper to the tip
    const double body_max = knot_hw * width_ratio;
    mark(trapezoid(f, 0.0, knot_h, knot_h + 0.72 * length, knot_hw * 0.8, body_max), silk);
    mark(trapezoid(f, 0.0, knot_h + 0.72 * length, knot_h + length, body_max, 0.5), silk);

    ForegroundSample out;
    out.image = p.image();
    out.mask = Tensor::from_values({1, s, s}, std::move(mask));
    out.shape_params = {{"width_ratio", width_ratio}, {"length", length / S}, {"hue", hue}};
    return out;
}

bool quad_in_range(const KeypointQuad& q, int canvas) {
    const double lo = -0.1 * canvas, hi = 1.1 * canvas;
    for (size_t i = 0; i < 4; ++i)
        if (q[i].x < lo || q[i].x > hi || q[i].y < lo || q[i].y > hi) return false;
    return true;
}

int global_index(const GenConfig& cfg, int index, bool is_train) {
    return is_train ? index : cfg.train_count + index;
}

} // namespace

AccessoryKind accessory_kind_from_string(const std::string& s) {
    if (s == "glasses-like" || s == "glasses") return AccessoryKind::glasses;
    if (s == "hat-like" || s == "hat") return AccessoryKind::hat;
    if (s == "tie-like" || s == "tie") return AccessoryKind::tie;
    throw ConfigError("unknown accessory kind '" + s + "'");
}

std::string to_string(AccessoryKind k) {
    switch (k) {
    case AccessoryKind::glasses: return "glasses-like";
    case AccessoryKind::hat: return "hat-like";
    case AccessoryKind::tie: return "tie-like";
    }
    return "?";
}

void GenConfig::validate() const {
    if (canvas < 32) throw ConfigError("gen: canvas must be >= 32");
    if (train_count <= 0 || test_count <= 0)
        throw ConfigError("gen: train/test counts must be positive");
    if (jitter.scale_lo > jitter.scale_hi || jitter.scale_lo <= 0.0)
        throw ConfigError("gen: invalid scale range");
    if (jitter.rotation_deg < 0.0 || jitter.skew < 0.0)
        throw ConfigError("gen: jitter ranges must be non-negative");
}

int GenConfig::semantic_classes() const { return kind == AccessoryKind::tie ? 8 : 12; }

int GenConfig::gaussian_radius() const {
    return std::max(1, static_cast<int>(std::lround(20.0 * canvas / 224.0)));
}

BackgroundSample generate_background(Rng& rng, AccessoryKind kind, int canvas) {
    return kind == AccessoryKind::tie ? body_background(rng, canvas)
                                      : face_background(rng, kind, canvas);
}

ForegroundSample generate_foreground(Rng& rng, AccessoryKind kind, int canvas, bool is_train) {
    switch (kind) {
    case AccessoryKind::glasses: return glasses_foreground(rng, canvas, is_train);
    case AccessoryKind::hat: return hat_foreground(rng, canvas, is_train);
    case AccessoryKind::tie: return tie_foreground(rng, canvas, is_train);
    }
    throw ConfigError("bad accessory kind");
}

KeypointQuad place_accessory(const BackgroundSample& bg, const KeypointQuad& src,
                             AccessoryKind kind, double rot_jitter, double scale, double skew_x,
                             double skew_y) {
    const double src_w = src[1].x - src[0].x;
    const double src_h = src[2].y - src[0].y;
    if (src_w <= 0.0 || src_h <= 0.0)
        throw GeometryError("place_accessory: degenerate source quad");
    const double ar = src_h / src_w;

    const double span =
        std::hypot(bg.anchor_right.x - bg.anchor_left.x, bg.anchor_right.y - bg.anchor_left.y);
    Point mid{(bg.anchor_left.x + bg.anchor_right.x) / 2.0,
              (bg.anchor_left.y + bg.anchor_right.y) / 2.0};

    double width_factor = 1.0, center_shift = 0.0; // shift along +v (down), in units of h
    switch (kind) {
    case AccessoryKind::glasses:
        width_factor = 1.30;
        center_shift = 0.0;
        break;
    case AccessoryKind::hat:
        width_factor = 1.10;
        center_shift = -0.38;
        break;
    case AccessoryKind::tie:
        width_factor = 1.00;
        center_shift = 0.46;
        break;
    }

    const double w = span * width_factor * scale;
    const double h = w * ar;
    const double rot = bg.tilt + rot_jitter;
    const Frame f(mid, rot);
    const Point center = f.to_canvas(0.0, center_shift * h);
    const Frame fc(center, rot);

    // trapezoidal perspective jitter: top/bottom widths and left/right
    // heights scaled in opposite directions
    KeypointQuad q;
    q[0] = fc.to_canvas(-w / 2.0 * (1.0 - skew_x), -h / 2.0 * (1.0 - skew_y)); // A
    q[1] = fc.to_canvas(w / 2.0 * (1.0 - skew_x), -h / 2.0 * (1.0 + skew_y));  // B
    q[2] = fc.to_canvas(-w / 2.0 * (1.0 + skew_x), h / 2.0 * (1.0 - skew_y)); // C
    q[3] = fc.to_canvas(w / 2.0 * (1.0 + skew_x), h / 2.0 * (1.0 + skew_y));  // D
    return q;
}

TupleRecord generate_tuple(const GenConfig& cfg, int index, bool is_train) {
    cfg.validate();
    const int s = cfg.canvas;
    Rng rng(mix_seed(cfg.seed, static_cast<uint64_t>(global_index(cfg, index, is_train))));
    const double rot_range = cfg.jitter.rotation_deg * kPi / 180.0;

    for (int attempt = 0; attempt < 100; ++attempt) {
        BackgroundSample bg = generate_background(rng, cfg.kind, s);
        ForegroundSample fg = generate_foreground(rng, cfg.kind, s, is_train);
        bg.image = quantize16(bg.image);
        fg.image = quantize16(fg.image);

        KeypointQuad src;
        try {
            src = source_quad(fg.mask);
        } catch (const GeometryError&) {
            continue;
        }

        const double rot_jitter = rng.uniform(-rot_range, rot_range);
        const double scale = rng.uniform(cfg.jitter.scale_lo, cfg.jitter.scale_hi);
        const double skew_x = rng.uniform(-cfg.jitter.skew, cfg.jitter.skew);
        const double skew_y = rng.uniform(-cfg.jitter.skew, cfg.jitter.skew);

        KeypointQuad quad;
        Homography t;
        try {
            quad = place_accessory(bg, src, cfg.kind, rot_jitter, scale, skew_x, skew_y);
            if (!quad_in_range(quad, s)) continue;
            t = solve_homography(src, quad);
        } catch (const GeometryError&) {
            continue;
        }

        // every keypoint must put some Gaussian mass on the canvas
        const double g = cfg.gaussian_radius();
        bool empty = false;
        for (size_t k = 0; k < 4 && !empty; ++k) {
            Tensor hm = render_gaussian(quad[k].x, quad[k].y, s, s, g);
            double mx = 0.0;
            for (double v : hm.values()) mx = std::max(mx, v);
            empty = mx <= 0.0;
        }
        if (empty) continue;

        TupleRecord rec;
        rec.id = global_index(cfg, index, is_train);
        rec.is_train = is_train;
        rec.fg_image = fg.image;
        rec.fg_mask = fg.mask;
        rec.bg_image = bg.image;
        rec.semantic = bg.semantic;
        rec.gt_quad = quad;
        rec.gt_homography = t;
        rec.fg_params = fg.shape_params;
        rec.anchors_only.anchor_left = bg.anchor_left;
        rec.anchors_only.anchor_right = bg.anchor_right;
        rec.anchors_only.tilt = bg.tilt;

        Tensor fg_w = warp(rec.fg_image, t, s, s);
        Tensor mask_w = warp(rec.fg_mask, t, s, s);
        rec.gt_composite = quantize16(composite(rec.bg_image, fg_w, mask_w));
        rec.validate(cfg);
        return rec;
    }
    throw DataError("tuple generation failed after 100 attempts (index " +
                    std::to_string(index) + ", " + (is_train ? "train" : "test") + ")");
}

void TupleRecord::validate(const GenConfig& cfg) const {
    const int s = cfg.canvas;
    const std::string tag = "tuple " + std::to_string(id) + ": ";
    const Shape rgb{3, s, s}, gray{1, s, s};
    if (fg_image.shape() != rgb || bg_image.shape() != rgb || gt_composite.shape() != rgb)
        throw DataError(tag + "bad image shape");
    if (fg_mask.shape() != gray) throw DataError(tag + "bad mask shape");
    if (semantic.size() != static_cast<size_t>(s) * s)
        throw DataError(tag + "bad semantic size");
    for (int c : semantic)
        if (c < 0 || c >= cfg.semantic_classes())
            throw DataError(tag + "semantic class out of range");
    for (double v : fg_mask.values())
        if (v != 0.0 && v != 1.0) throw DataError(tag + "mask not binary");
    for (const Tensor* img : {&fg_image, &bg_image, &gt_composite})
        for (double v : img->values())
            if (v != quantize16(v)) throw DataError(tag + "image off the 16-bit grid");
    if (!quad_in_range(gt_quad, s)) throw DataError(tag + "gt quad outside [-0.1,1.1]*canvas");

    const KeypointQuad src = source_quad(fg_mask);
    const KeypointQuad mapped = gt_homography.apply(src);
    for (size_t k = 0; k < 4; ++k) {
        if (std::abs(mapped[k].x - gt_quad[k].x) > 1e-8 ||
            std::abs(mapped[k].y - gt_quad[k].y) > 1e-8)
            throw DataError(tag + "homography does not map source quad to gt quad");
    }

    Tensor recomposed = quantize16(composite(bg_image, warp(fg_image, gt_homography, s, s),
                                             warp(fg_mask, gt_homography, s, s)));
    const auto a = recomposed.values(), b = gt_composite.values();
    for (size_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) throw DataError(tag + "stored composite deviates from recomputation");

    const double g = cfg.gaussian_radius();
    for (size_t k = 0; k < 4; ++k) {
        Tensor hm = render_gaussian(gt_quad[k].x, gt_quad[k].y, s, s, g);
        double mx = 0.0;
        for (double v : hm.values()) mx = std::max(mx, v);
        if (mx <= 0.0) throw DataError(tag + "keypoint " + std::to_string(k) + " heatmap empty");
    }
}

std::vector<int> Dataset::train_indices() const {
    std::vector<int> out;
    for (size_t i = 0; i < tuples.size(); ++i)
        if (tuples[i].is_train) out.push_back(static_cast<int>(i));
    return out;
}

std::vector<int> Dataset::test_indices() const {
    std::vector<int> out;
    for (size_t i = 0; i < tuples.size(); ++i)
        if (!tuples[i].is_train) out.push_back(static_cast<int>(i));
    return out;
}

Dataset generate_dataset(const GenConfig& cfg) {
    cfg.validate();
    Dataset ds;
    ds.cfg = cfg;
    ds.tuples.resize(static_cast<size_t>(cfg.train_count + cfg.test_count));
    const int total = cfg.train_count + cfg.test_count;
    // tuples are independent rng streams, so the loop parallelizes cleanly
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < total; ++i) {
        const bool is_train = i < cfg.train_count;
        const int index = is_train ? i : i - cfg.train_count;
        ds.tuples[static_cast<size_t>(i)] = generate_tuple(cfg, index, is_train);
    }
    return ds;
}

namespace {

json quad_to_json(const KeypointQuad& q) {
    json j = json::array();
    for (size_t i = 0; i < 4; ++i) j.push_back({q[i].x, q[i].y});
    return j;
}

KeypointQuad quad_from_json(const json& j) {
    KeypointQuad q;
    for (size_t i = 0; i < 4; ++i) {
        q[i].x = j.at(i).at(0).get<double>();
        q[i].y = j.at(i).at(1).get<double>();
    }
    return q;
}

json config_to_json(const GenConfig& cfg) {
    return json{{"canvas", cfg.canvas},
                {"kind", to_string(cfg.kind)},
                {"train_count", cfg.train_count},
                {"test_count", cfg.test_count},
                {"seed", cfg.seed},
                {"jitter",
                 {{"rotation_deg", cfg.jitter.rotation_deg},
                  {"scale_lo", cfg.jitter.scale_lo},
                  {"scale_hi", cfg.jitter.scale_hi},
                  {"skew", cfg.jitter.skew}}}};
}

GenConfig config_from_json(const json& j) {
    GenConfig cfg;
    cfg.canvas = j.at("canvas").get<int>();
    cfg.kind = accessory_kind_from_string(j.at("kind").get<std::string>());
    cfg.train_count = j.at("train_count").get<int>();
    cfg.test_count = j.at("test_count").get<int>();
    cfg.seed = j.at("seed").get<uint64_t>();
    const json& jt = j.at("jitter");
    cfg.jitter.rotation_deg = jt.at("rotation_deg").get<double>();
    cfg.jitter.scale_lo = jt.at("scale_lo").get<double>();
    cfg.jitter.scale_hi = jt.at("scale_hi").get<double>();
    cfg.jitter.skew = jt.at("skew").get<double>();
    return cfg;
}

std::string tuple_dir_name(int id) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%05d", id);
    return buf;
}

PngImage semantic_to_png(const std::vector<int>& sem, int s) {
    PngImage img;
    img.width = s;
    img.height = s;
    img.channels = 1;
    img.pixels.resize(sem.size());
    for (size_t i = 0; i < sem.size(); ++i) img.pixels[i] = static_cast<uint16_t>(sem[i]);
    return img;
}

} // namespace

void write_dataset(const Dataset& ds, const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create dataset directory " + dir + ": " + ec.message());

    for (const TupleRecord& rec : ds.tuples) {
        const fs::path tdir = fs::path(dir) / tuple_dir_name(rec.id);
        fs::create_directories(tdir, ec);
        if (ec) throw IoError("cannot create " + tdir.string() + ": " + ec.message());

        write_png16((tdir / "fg.png").string(), tensor_to_png16(rec.fg_image));
        write_png16((tdir / "fg_mask.png").string(), tensor_to_png16(rec.fg_mask));
        write_png16((tdir / "bg.png").string(), tensor_to_png16(rec.bg_image));
        write_png16((tdir / "gt.png").string(), tensor_to_png16(rec.gt_composite));
        write_png16((tdir / "sem.png").string(), semantic_to_png(rec.semantic, ds.cfg.canvas));

        json j{{"id", rec.id},
               {"split", rec.is_train ? "train" : "test"},
               {"quad", quad_to_json(rec.gt_quad)},
               {"homography", rec.gt_homography.m},
               {"anchor",
                {{"left", {rec.anchors_only.anchor_left.x, rec.anchors_only.anchor_left.y}},
                 {"right", {rec.anchors_only.anchor_right.x, rec.anchors_only.anchor_right.y}},
                 {"tilt", rec.anchors_only.tilt}}},
               {"fg_params", rec.fg_params}};
        std::ofstream out(tdir / "gt.json");
        if (!out) throw IoError("cannot write " + (tdir / "gt.json").string());
        out << j.dump(2) << "\n";
        if (!out.good()) throw IoError("short write on " + (tdir / "gt.json").string());
    }

    // meta.json last: a directory without it is recognizably incomplete
    json meta{{"format_version", 1}, {"config", config_to_json(ds.cfg)}};
    const fs::path tmp = fs::path(dir) / "meta.json.tmp";
    {
        std::ofstream out(tmp);
        if (!out) throw IoError("cannot write " + tmp.string());
        out << meta.dump(2) << "\n";
        if (!out.good()) throw IoError("short write on " + tmp.string());
    }
    fs::rename(tmp, fs::path(dir) / "meta.json", ec);
    if (ec) throw IoError("cannot finalize meta.json: " + ec.message());
}

Dataset read_dataset(const std::string& dir) {
    const fs::path meta_path = fs::path(dir) / "meta.json";
    std::ifstream meta_in(meta_path);
    if (!meta_in) throw IoError("missing meta.json in " + dir);
    json meta;
    try {
        meta_in >> meta;
    } catch (const std::exception& e) {
        throw IoError("malformed meta.json: " + std::string(e.what()));
    }
    if (meta.at("format_version").get<int>() != 1)
        throw IoError("unsupported dataset format version");

    Dataset ds;
    ds.cfg = config_from_json(meta.at("config"));
    const int total = ds.cfg.train_count + ds.cfg.test_count;
    ds.tuples.reserve(static_cast<size_t>(total));

    for (int id = 0; id < total; ++id) {
        const fs::path tdir = fs::path(dir) / tuple_dir_name(id);
        const std::string tag = "tuple " + tuple_dir_name(id) + ": ";
        TupleRecord rec;
        try {
            rec.fg_image = png16_to_tensor(read_png16((tdir / "fg.png").string()));
            Tensor mask_rgb = png16_to_tensor(read_png16((tdir / "fg_mask.png").string()));
            rec.fg_mask = mask_rgb;
            rec.bg_image = png16_to_tensor(read_png16((tdir / "bg.png").string()));
            rec.gt_composite = png16_to_tensor(read_png16((tdir / "gt.png").string()));
            PngImage sem = read_png16((tdir / "sem.png").string());
            rec.semantic.assign(sem.pixels.begin(), sem.pixels.end());

            std::ifstream jin(tdir / "gt.json");
            if (!jin) throw IoError("missing gt.json");
            json j;
            jin >> j;
            rec.id = j.at("id").get<int>();
            rec.is_train = j.at("split").get<std::string>() == "train";
            rec.gt_quad = quad_from_json(j.at("quad"));
            const auto hm = j.at("homography");
            for (size_t i = 0; i < 9; ++i) rec.gt_homography.m[i] = hm.at(i).get<double>();
            rec.anchors_only.anchor_left = {j.at("anchor").at("left").at(0).get<double>(),
                                            j.at("anchor").at("left").at(1).get<double>()};
            rec.anchors_only.anchor_right = {j.at("anchor").at("right").at(0).get<double>(),
                                             j.at("anchor").at("right").at(1).get<double>()};
            rec.anchors_only.tilt = j.at("anchor").at("tilt").get<double>();
            for (const auto& [key, val] : j.at("fg_params").items())
                rec.fg_params[key] = val.get<double>();
        } catch (const std::exception& e) {
            throw IoError(tag + "load failed: " + e.what());
        }
        if (rec.id != id) throw DataError(tag + "id mismatch in gt.json");
        rec.validate(ds.cfg);
        ds.tuples.push_back(std::move(rec));
    }
    return ds;
}

} // namespace tryon
