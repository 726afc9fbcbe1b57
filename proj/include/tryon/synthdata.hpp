#pragma once

#include "tryon/geometry.hpp"
#include "tryon/rng.hpp"
#include "tryon/tensor.hpp"

#include <map>
#include <string>
#include <vector>

namespace tryon {

enum class AccessoryKind { glasses, hat, tie };

AccessoryKind accessory_kind_from_string(const std::string& s);
std::string to_string(AccessoryKind k);

struct JitterConfig {
    double rotation_deg = 8.0; // +- around the background tilt
    double scale_lo = 0.92;
    double scale_hi = 1.08;
    double skew = 0.06; // perspective trapezoid factor, +- per axis
};

struct GenConfig {
    int canvas = 64;
    AccessoryKind kind = AccessoryKind::glasses;
    int train_count = 200;
    int test_count = 50;
    JitterConfig jitter;
    uint64_t seed = 1;

    void validate() const;
    // 12 face classes for glasses/hat backgrounds, 8 body classes for ties.
    int semantic_classes() const;
    // Ground-truth Gaussian radius at this canvas (224-reference rule).
    int gaussian_radius() const;
};

// Parametric background plus the attachment geometry an accessory placement
// derives from. The anchor segment runs along the accessory baseline (eye
// line, head top, or neckline depending on the accessory kind).
struct BackgroundSample {
    Tensor image;              // [3,S,S] in [0,1]
    std::vector<int> semantic; // S*S class ids
    Point anchor_left;
    Point anchor_right;
    double tilt = 0.0; // radians, same rotation the background was drawn with
};

struct ForegroundSample {
    Tensor image; // [3,S,S]
    Tensor mask;  // [1,S,S], exact 0/1
    std::map<std::string, double> shape_params;
};

// One dataset element. All images are snapped to the 16-bit storage grid,
// so the on-disk PNG round trip is bit-exact.
struct TupleRecord {
    int id = 0;
    bool is_train = true;
    Tensor fg_image;     // [3,S,S]
    Tensor fg_mask;      // [1,S,S]
    Tensor bg_image;     // [3,S,S]
    Tensor gt_composite; // [3,S,S]
    std::vector<int> semantic;
    KeypointQuad gt_quad;
    Homography gt_homography;
    BackgroundSample anchors_only; // image/semantic unset; placement anchors
    std::map<std::string, double> fg_params;

    // Checks every structural invariant (shapes, mask binarity, quad range,
    // homography round trip, composite consistency on the storage grid,
    // non-empty heatmaps). Throws DataError naming the tuple on violation.
    void validate(const GenConfig& cfg) const;
};

struct Dataset {
    GenConfig cfg;
    std::vector<TupleRecord> tuples;

    std::vector<int> train_indices() const;
    std::vector<int> test_indices() const;
};

BackgroundSample generate_background(Rng& rng, AccessoryKind kind, int canvas);
ForegroundSample generate_foreground(Rng& rng, AccessoryKind kind, int canvas, bool is_train);

// Deterministic placement of the source quad onto the background anchors.
// rot_jitter (radians), scale and the two skew factors come from the
// jitter draw; zero jitter (rot 0, scale 1, skew 0) is the pure anchor
// placement.
KeypointQuad place_accessory(const BackgroundSample& bg, const KeypointQuad& src,
                             AccessoryKind kind, double rot_jitter, double scale, double skew_x,
                             double skew_y);

// Generates one tuple from an rng stream derived from (cfg.seed, index).
// Redraws on out-of-frame quads, degenerate correspondences or empty
// heatmaps; gives up after 100 attempts.
TupleRecord generate_tuple(const GenConfig& cfg, int index, bool is_train);

// Pure function of cfg (train tuples first, then test).
Dataset generate_dataset(const GenConfig& cfg);

// Directory layout: meta.json + NNNNN/{fg.png, fg_mask.png, bg.png,
// sem.png, gt.png, gt.json}. meta.json is written last, after every tuple
// landed.
void write_dataset(const Dataset& ds, const std::string& dir);
Dataset read_dataset(const std::string& dir);

} // namespace tryon
