#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "tryon/metrics.hpp"
#include "tryon/png_io.hpp"
#include "tryon/synthdata.hpp"

#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;
using namespace tryon;

namespace {

bool tensors_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    const auto va = a.values(), vb = b.values();
    for (size_t i = 0; i < va.size(); ++i)
        if (va[i] != vb[i]) return false;
    return true;
}

struct TempDir {
    fs::path path;
    TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("tryon_test_" + tag + "_" +
                                            std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

} // namespace

TEST_CASE("tuple generation is deterministic in (seed, index)") {
    GenConfig cfg;
    cfg.train_count = 4;
    cfg.test_count = 2;
    cfg.seed = 77;
    TupleRecord a = generate_tuple(cfg, 2, true);
    TupleRecord b = generate_tuple(cfg, 2, true);
    CHECK(tensors_equal(a.bg_image, b.bg_image));
    CHECK(tensors_equal(a.fg_image, b.fg_image));
    CHECK(tensors_equal(a.gt_composite, b.gt_composite));
    CHECK(a.semantic == b.semantic);
    for (size_t k = 0; k < 4; ++k) {
        CHECK(a.gt_quad[k].x == b.gt_quad[k].x);
        CHECK(a.gt_quad[k].y == b.gt_quad[k].y);
    }

    TupleRecord c = generate_tuple(cfg, 3, true);
    CHECK(!tensors_equal(a.bg_image, c.bg_image));
}

TEST_CASE("background generation is deterministic and classes stay in range") {
    for (AccessoryKind kind :
         {AccessoryKind::glasses, AccessoryKind::hat, AccessoryKind::tie}) {
        Rng r1(101), r2(101);
        BackgroundSample a = generate_background(r1, kind, 64);
        BackgroundSample b = generate_background(r2, kind, 64);
        CHECK(tensors_equal(a.image, b.image));
        CHECK(a.semantic == b.semantic);
        const int classes = kind == AccessoryKind::tie ? 8 : 12;
        for (int c : a.semantic) {
            CHECK(c >= 0);
            CHECK(c < classes);
        }
    }
}

TEST_CASE("face anchors attach to the drawn face") {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        BackgroundSample bg = generate_background(rng, AccessoryKind::glasses, 64);
        const int mx = static_cast<int>((bg.anchor_left.x + bg.anchor_right.x) / 2.0);
        const int my = static_cast<int>((bg.anchor_left.y + bg.anchor_right.y) / 2.0);
        REQUIRE(mx >= 0);
        REQUIRE(mx < 64);
        REQUIRE(my >= 0);
        REQUIRE(my < 64);
        const int cls = bg.semantic[static_cast<size_t>(my) * 64 + mx];
        // eye line midpoint lands on face tissue, never background/clothing
        CHECK(cls != 0);
        CHECK(cls != 11);
    }
}

TEST_CASE("every generated tuple satisfies its invariants") {
    for (AccessoryKind kind :
         {AccessoryKind::glasses, AccessoryKind::hat, AccessoryKind::tie}) {
        GenConfig cfg;
        cfg.kind = kind;
        cfg.train_count = 12;
        cfg.test_count = 6;
        cfg.seed = 500 + static_cast<uint64_t>(kind);
        Dataset ds = generate_dataset(cfg);
        CHECK(ds.tuples.size() == 18);
        for (const TupleRecord& rec : ds.tuples) rec.validate(cfg); // throws on violation
        CHECK(ds.train_indices().size() == 12);
        CHECK(ds.test_indices().size() == 6);
    }
}

TEST_CASE("zero jitter reproduces the pure anchor placement") {
    GenConfig cfg;
    cfg.jitter.rotation_deg = 0.0;
    cfg.jitter.scale_lo = 1.0;
    cfg.jitter.scale_hi = 1.0;
    cfg.jitter.skew = 0.0;
    cfg.train_count = 3;
    cfg.test_count = 1;
    cfg.seed = 9;
    for (int i = 0; i < 3; ++i) {
        TupleRecord rec = generate_tuple(cfg, i, true);
        const KeypointQuad src = source_quad(rec.fg_mask);
        const KeypointQuad expect =
            place_accessory(rec.anchors_only, src, cfg.kind, 0.0, 1.0, 0.0, 0.0);
        for (size_t k = 0; k < 4; ++k) {
            CHECK(rec.gt_quad[k].x == doctest::Approx(expect[k].x).epsilon(1e-12));
            CHECK(rec.gt_quad[k].y == doctest::Approx(expect[k].y).epsilon(1e-12));
        }
    }
}

TEST_CASE("composite equals background wherever the warped mask vanishes") {
    GenConfig cfg;
    cfg.train_count = 2;
    cfg.test_count = 1;
    cfg.seed = 33;
    TupleRecord rec = generate_tuple(cfg, 0, true);
    Tensor warped_mask = warp(rec.fg_mask, rec.gt_homography, cfg.canvas, cfg.canvas);
    const auto mv = warped_mask.values();
    const auto cv = rec.gt_composite.values();
    const auto bv = rec.bg_image.values();
    const size_t plane = static_cast<size_t>(cfg.canvas) * cfg.canvas;
    int zero_pixels = 0;
    for (size_t i = 0; i < plane; ++i) {
        if (mv[i] != 0.0) continue;
        ++zero_pixels;
        for (int c = 0; c < 3; ++c) CHECK(cv[c * plane + i] == bv[c * plane + i]);
    }
    CHECK(zero_pixels > 0);
}

TEST_CASE("dataset write/read round trip is lossless") {
    TempDir dir("roundtrip");
    GenConfig cfg;
    cfg.train_count = 5;
    cfg.test_count = 3;
    cfg.seed = 21;
    Dataset ds = generate_dataset(cfg);
    write_dataset(ds, dir.path.string());
    Dataset back = read_dataset(dir.path.string());

    REQUIRE(back.tuples.size() == ds.tuples.size());
    CHECK(back.cfg.seed == cfg.seed);
    for (size_t i = 0; i < ds.tuples.size(); ++i) {
        const TupleRecord& a = ds.tuples[i];
        const TupleRecord& b = back.tuples[i];
        CHECK(tensors_equal(a.fg_image, b.fg_image));
        CHECK(tensors_equal(a.fg_mask, b.fg_mask));
        CHECK(tensors_equal(a.bg_image, b.bg_image));
        CHECK(tensors_equal(a.gt_composite, b.gt_composite));
        CHECK(a.semantic == b.semantic);
        CHECK(a.is_train == b.is_train);
        for (size_t k = 0; k < 4; ++k) {
            CHECK(a.gt_quad[k].x == b.gt_quad[k].x);
            CHECK(a.gt_quad[k].y == b.gt_quad[k].y);
        }
        for (size_t k = 0; k < 9; ++k) CHECK(a.gt_homography.m[k] == b.gt_homography.m[k]);
        CHECK(a.fg_params == b.fg_params);
    }
}

TEST_CASE("truncated gt.json produces an error naming the tuple") {
    TempDir dir("truncated");
    GenConfig cfg;
    cfg.train_count = 2;
    cfg.test_count = 1;
    cfg.seed = 4;
    write_dataset(generate_dataset(cfg), dir.path.string());

    // truncate tuple 1's keypoint file
    const fs::path victim = dir.path / "00001" / "gt.json";
    {
        std::ifstream in(victim);
        std::string contents((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
        std::ofstream out(victim, std::ios::trunc);
        out << contents.substr(0, contents.size() / 2);
    }
    try {
        read_dataset(dir.path.string());
        FAIL("expected a load error");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("00001") != std::string::npos);
    }
}

TEST_CASE("corrupt PNG payload is rejected") {
    TempDir dir("corrupt");
    GenConfig cfg;
    cfg.train_count = 2;
    cfg.test_count = 1;
    cfg.seed = 6;
    write_dataset(generate_dataset(cfg), dir.path.string());
    // flip bytes inside the image data of tuple 0
    const fs::path victim = dir.path / "00000" / "bg.png";
    std::fstream f(victim, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(200);
    const char garbage[8] = {0x5a, 0x5a, 0x5a, 0x5a, 0x5a, 0x5a, 0x5a, 0x5a};
    f.write(garbage, sizeof(garbage));
    f.close();
    CHECK_THROWS_AS(read_dataset(dir.path.string()), Error);
}

TEST_CASE("train/test foreground shape parameters come from disjoint ranges") {
    GenConfig cfg;
    cfg.train_count = 60;
    cfg.test_count = 40;
    cfg.seed = 777;
    Dataset ds = generate_dataset(cfg);

    std::map<std::string, double> train_max, test_min;
    for (const TupleRecord& rec : ds.tuples)
        for (const auto& [key, value] : rec.fg_params) {
            if (rec.is_train) {
                auto it = train_max.find(key);
                train_max[key] = it == train_max.end() ? value : std::max(it->second, value);
            } else {
                auto it = test_min.find(key);
                test_min[key] = it == test_min.end() ? value : std::min(it->second, value);
            }
        }
    REQUIRE(!train_max.empty());
    for (const auto& [key, mx] : train_max) {
        REQUIRE(test_min.count(key));
        INFO(key << ": train max " << mx << " vs test min " << test_min[key]);
        CHECK(mx < test_min[key]);
    }
}

TEST_CASE("generation is a pure function of (seed, cfg)") {
    GenConfig cfg;
    cfg.train_count = 3;
    cfg.test_count = 2;
    cfg.seed = 1234;
    Dataset a = generate_dataset(cfg);
    Dataset b = generate_dataset(cfg);
    for (size_t i = 0; i < a.tuples.size(); ++i) {
        CHECK(tensors_equal(a.tuples[i].gt_composite, b.tuples[i].gt_composite));
        CHECK(a.tuples[i].fg_params == b.tuples[i].fg_params);
    }
}

TEST_CASE("gen config validation") {
    GenConfig cfg;
    cfg.train_count = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    GenConfig small;
    small.canvas = 8;
    CHECK_THROWS_AS(small.validate(), ConfigError);
    GenConfig scale;
    scale.jitter.scale_lo = 1.2;
    scale.jitter.scale_hi = 0.8;
    CHECK_THROWS_AS(scale.validate(), ConfigError);
    CHECK(GenConfig{}.semantic_classes() == 12);
    GenConfig tie;
    tie.kind = AccessoryKind::tie;
    CHECK(tie.semantic_classes() == 8);
    CHECK(GenConfig{}.gaussian_radius() == 6);
}
