#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "tryon/geometry.hpp"
#include "tryon/heatmap.hpp"

#include <cmath>

using namespace tryon;

namespace {

KeypointQuad random_quad(Rng& rng, double lo, double hi, double min_spread = 8.0) {
    while (true) {
        const double w = rng.uniform(min_spread, hi - lo);
        const double h = rng.uniform(min_spread, hi - lo);
        const double cx = rng.uniform(lo + w / 2, hi - w / 2);
        const double cy = rng.uniform(lo + h / 2, hi - h / 2);
        KeypointQuad q;
        q[0] = {cx - w / 2, cy - h / 2};
        q[1] = {cx + w / 2, cy - h / 2};
        q[2] = {cx - w / 2, cy + h / 2};
        q[3] = {cx + w / 2, cy + h / 2};
        // jitter the corners, keeping the quad comfortably non-degenerate
        const double j = 0.25 * std::min(w, h);
        for (size_t k = 0; k < 4; ++k) {
            q[k].x += rng.uniform(-j, j);
            q[k].y += rng.uniform(-j, j);
        }
        return q;
    }
}

} // namespace

TEST_CASE("soft_argmax closed cases") {
    // one-hot heatmap
    std::vector<double> v(32 * 32, 0.0);
    v[20 * 32 + 10] = 1.0;
    Point p = soft_argmax(Tensor::from_values({32, 32}, v), 1000.0);
    CHECK(std::abs(p.x - 10.0) < 1e-9);
    CHECK(std::abs(p.y - 20.0) < 1e-9);

    // constant heatmap -> centroid of a 33x33 grid
    Point c = soft_argmax(Tensor::full({33, 33}, 0.37), 1000.0);
    CHECK(c.x == doctest::Approx(16.0).epsilon(1e-12));
    CHECK(c.y == doctest::Approx(16.0).epsilon(1e-12));
}

TEST_CASE("soft_argmax recovers rendered gaussian centers and matches brute force") {
    Rng rng(3);
    for (int trial = 0; trial < 8; ++trial) {
        const double cx = rng.uniform(6.0, 26.0);
        const double cy = rng.uniform(6.0, 26.0);
        Tensor h = render_gaussian(cx, cy, 32, 32, 6.0);
        const Point p = soft_argmax(h, 1000.0);

        // brute-force expectation under softmax(beta h)
        const auto hv = h.values();
        double mx = hv[0];
        for (double z : hv) mx = std::max(mx, z);
        double denom = 0.0, ex = 0.0, ey = 0.0;
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x) {
                const double e = std::exp(1000.0 * (hv[static_cast<size_t>(y) * 32 + x] - mx));
                denom += e;
                ex += e * x;
                ey += e * y;
            }
        CHECK(p.x == doctest::Approx(ex / denom).epsilon(1e-9));
        CHECK(p.y == doctest::Approx(ey / denom).epsilon(1e-9));
        CHECK(std::abs(p.x - cx) < 0.5);
        CHECK(std::abs(p.y - cy) < 0.5);
    }
}

TEST_CASE("soft_argmax shift invariance and convex-hull bound") {
    Rng rng(4);
    std::vector<double> v(24 * 24);
    for (auto& z : v) z = rng.uniform(-1.0, 1.0);
    Tensor h = Tensor::from_values({24, 24}, v);
    Point a = soft_argmax(h, 50.0);
    for (auto& z : v) z += 3.7;
    Point b = soft_argmax(Tensor::from_values({24, 24}, v), 50.0);
    CHECK(std::abs(a.x - b.x) < 1e-9);
    CHECK(std::abs(a.y - b.y) < 1e-9);
    CHECK(a.x >= 0.0);
    CHECK(a.x <= 23.0);
    CHECK(a.y >= 0.0);
    CHECK(a.y <= 23.0);
}

TEST_CASE("soft_argmax is differentiable") {
    Rng rng(5);
    std::vector<double> v(12 * 12);
    for (auto& z : v) z = rng.uniform(0.0, 1.0);
    auto rep = grad_check(
        [](const Tensor& t) {
            auto [x, y] = soft_argmax_xy(t, 40.0);
            return add(x, y);
        },
        Tensor::from_values({12, 12}, v), 1e-6, 1e-4);
    INFO("max rel err " << rep.max_rel_err);
    CHECK(rep.pass);
}

TEST_CASE("source_quad corners and errors") {
    Tensor full = Tensor::full({1, 64, 64}, 1.0);
    KeypointQuad q = source_quad(full);
    CHECK(q[0].x == 0.0);
    CHECK(q[0].y == 0.0);
    CHECK(q[1].x == 63.0);
    CHECK(q[2].y == 63.0);
    CHECK(q[3].x == 63.0);
    CHECK(q[3].y == 63.0);

    std::vector<double> single(64 * 64, 0.0);
    single[7 * 64 + 5] = 1.0;
    KeypointQuad s = source_quad(Tensor::from_values({1, 64, 64}, single));
    for (size_t k = 0; k < 4; ++k) {
        CHECK(s[k].x == 5.0);
        CHECK(s[k].y == 7.0);
    }

    std::vector<double> rect(64 * 64, 0.0);
    for (int y = 10; y <= 20; ++y)
        for (int x = 30; x <= 50; ++x) rect[static_cast<size_t>(y) * 64 + x] = 1.0;
    KeypointQuad r = source_quad(Tensor::from_values({1, 64, 64}, rect));
    CHECK(r[0].x == 30.0);
    CHECK(r[0].y == 10.0);
    CHECK(r[1].x == 50.0);
    CHECK(r[1].y == 10.0);
    CHECK(r[2].x == 30.0);
    CHECK(r[2].y == 20.0);
    CHECK(r[3].x == 50.0);
    CHECK(r[3].y == 20.0);

    CHECK_THROWS_AS(source_quad(Tensor::zeros({1, 16, 16})), GeometryError);
}

TEST_CASE("solve_homography closed forms") {
    KeypointQuad q;
    q[0] = {5, 6};
    q[1] = {40, 7};
    q[2] = {4, 31};
    q[3] = {42, 33};

    Homography id = solve_homography(q, q);
    const double expect_id[9] = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    for (int i = 0; i < 9; ++i) CHECK(std::abs(id.m[static_cast<size_t>(i)] - expect_id[i]) < 1e-9);

    KeypointQuad t;
    for (size_t k = 0; k < 4; ++k) t[k] = {q[k].x + 5.0, q[k].y + 3.0};
    Homography tr = solve_homography(q, t);
    const double expect_tr[9] = {1, 0, 5, 0, 1, 3, 0, 0, 1};
    for (int i = 0; i < 9; ++i) CHECK(std::abs(tr.m[static_cast<size_t>(i)] - expect_tr[i]) < 1e-9);
}

TEST_CASE("solve_homography round trip over 1000 random pairs") {
    Rng rng(6);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        KeypointQuad src = random_quad(rng, 0.0, 64.0);
        KeypointQuad dst = random_quad(rng, 0.0, 64.0);
        Homography t = solve_homography(src, dst);
        KeypointQuad m = t.apply(src);
        for (size_t k = 0; k < 4; ++k)
            worst = std::max({worst, std::abs(m[k].x - dst[k].x), std::abs(m[k].y - dst[k].y)});
    }
    INFO("max round-trip error " << worst);
    CHECK(worst < 1e-6);
}

TEST_CASE("solve_homography rejects degenerate correspondences") {
    KeypointQuad line;
    line[0] = {0, 0};
    line[1] = {10, 10};
    line[2] = {20, 20}; // three collinear points
    line[3] = {5, 30};
    KeypointQuad any;
    any[0] = {0, 0};
    any[1] = {10, 0};
    any[2] = {0, 10};
    any[3] = {10, 10};
    CHECK_THROWS_AS(solve_homography(line, any), GeometryError);

    KeypointQuad coincident = any;
    coincident[1] = coincident[0];
    CHECK_THROWS_AS(solve_homography(any, coincident), GeometryError);
}

TEST_CASE("warp closed cases") {
    Rng rng(8);
    std::vector<double> img(2ull * 20 * 20);
    for (auto& v : img) v = rng.uniform(0.0, 1.0);
    Tensor im = Tensor::from_values({2, 20, 20}, img);

    Tensor same = warp(im, Homography::identity(), 20, 20);
    for (size_t i = 0; i < img.size(); ++i) CHECK(same.values()[i] == img[i]);

    Homography shift;
    shift.m = {1, 0, 5, 0, 1, 3, 0, 0, 1};
    Tensor moved = warp(im, shift, 20, 20);
    for (int y = 0; y < 20; ++y)
        for (int x = 0; x < 20; ++x) {
            const double got = moved.values()[static_cast<size_t>(y) * 20 + x];
            if (x < 5 || y < 3)
                CHECK(got == 0.0); // zero-filled band
            else
                CHECK(got == img[static_cast<size_t>(y - 3) * 20 + (x - 5)]);
        }
}

TEST_CASE("warp scale-by-2 grows a disk mask about 4x") {
    const int s = 64;
    std::vector<double> mask(1ull * s * s, 0.0);
    int area_in = 0;
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x)
            if (std::hypot(x - 16.0, y - 16.0) <= 10.0) {
                mask[static_cast<size_t>(y) * s + x] = 1.0;
                ++area_in;
            }
    Homography scale;
    scale.m = {2, 0, 0, 0, 2, 0, 0, 0, 1};
    Tensor out = warp(Tensor::from_values({1, s, s}, mask), scale, s, s);
    double area_out = 0.0;
    for (double v : out.values()) area_out += v;
    CHECK(area_out == doctest::Approx(4.0 * area_in).epsilon(0.02));
}

TEST_CASE("warp round trip on a smooth image") {
    const int s = 48;
    std::vector<double> img(1ull * s * s);
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x)
            img[static_cast<size_t>(y) * s + x] =
                0.5 + 0.4 * std::sin(x * 0.18) * std::cos(y * 0.15);
    Tensor im = Tensor::from_values({1, s, s}, img);

    KeypointQuad src;
    src[0] = {6, 6};
    src[1] = {41, 8};
    src[2] = {5, 40};
    src[3] = {43, 42};
    KeypointQuad dst;
    dst[0] = {8, 7};
    dst[1] = {43, 6};
    dst[2] = {7, 42};
    dst[3] = {41, 40};
    Homography t = solve_homography(src, dst);
    const Homography tinv = t.inverse();
    Tensor back = warp(warp(im, t, s, s), tinv, s, s);
    // compare pixels at least 2 px away from data loss on either canvas:
    // the forward image must sit clear of the intermediate border, and its
    // 2-px neighborhood must read source pixels that were in bounds
    double worst = 0.0;
    int compared = 0;
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            const Point fwd = t.apply(Point{static_cast<double>(x), static_cast<double>(y)});
            if (fwd.x < 2.0 || fwd.x > s - 3.0 || fwd.y < 2.0 || fwd.y > s - 3.0) continue;
            bool clean = true;
            for (double dy : {-2.0, 2.0})
                for (double dx : {-2.0, 2.0}) {
                    const Point src_pt = tinv.apply(Point{fwd.x + dx, fwd.y + dy});
                    if (src_pt.x < 1.0 || src_pt.x > s - 2.0 || src_pt.y < 1.0 ||
                        src_pt.y > s - 2.0)
                        clean = false;
                }
            if (!clean) continue;
            const size_t i = static_cast<size_t>(y) * s + x;
            worst = std::max(worst, std::abs(back.values()[i] - img[i]));
            ++compared;
        }
    INFO("max interior error " << worst << " over " << compared << " pixels");
    CHECK(compared > s * s / 2);
    CHECK(worst < 0.02);
}

TEST_CASE("warp rejects singular transforms") {
    Homography sing;
    sing.m = {1, 0, 0, 2, 0, 0, 0, 0, 1}; // rank deficient
    sing.m[4] = 0.0;
    CHECK_THROWS_AS(warp(Tensor::zeros({1, 8, 8}), sing, 8, 8), GeometryError);
}

TEST_CASE("composite closed cases and exactness") {
    Rng rng(9);
    std::vector<double> bgv(3ull * 10 * 10), fgv(3ull * 10 * 10);
    for (auto& v : bgv) v = rng.uniform(0.0, 1.0);
    for (auto& v : fgv) v = rng.uniform(0.0, 1.0);
    Tensor bg = Tensor::from_values({3, 10, 10}, bgv);
    Tensor fg = Tensor::from_values({3, 10, 10}, fgv);

    Tensor all_bg = composite(bg, fg, Tensor::zeros({1, 10, 10}));
    for (size_t i = 0; i < bgv.size(); ++i) CHECK(all_bg.values()[i] == bgv[i]);

    Tensor all_fg = composite(bg, fg, Tensor::full({1, 10, 10}, 1.0));
    for (size_t i = 0; i < fgv.size(); ++i) CHECK(all_fg.values()[i] == fgv[i]);

    Tensor half = composite(Tensor::full({3, 10, 10}, 0.2), Tensor::full({3, 10, 10}, 0.8),
                            Tensor::full({1, 10, 10}, 0.5));
    for (double v : half.values()) CHECK(v == doctest::Approx(0.5).epsilon(1e-15));

    // pixels with partial mask stay blended; pixels with mask 0 bit-equal bg
    std::vector<double> m(100, 0.0);
    m[55] = 0.37;
    Tensor mixed = composite(bg, fg, Tensor::from_values({1, 10, 10}, m));
    for (size_t i = 0; i < 100; ++i)
        if (i != 55)
            for (int c = 0; c < 3; ++c) CHECK(mixed.values()[c * 100 + i] == bgv[c * 100 + i]);

    CHECK_THROWS_AS(composite(bg, fg, Tensor::zeros({1, 9, 10})), ShapeError);
    CHECK_THROWS_AS(composite(bg, fg, Tensor::full({1, 10, 10}, 1.5)), DataError);
}

TEST_CASE("identity solve for any non-degenerate quad") {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        KeypointQuad q = random_quad(rng, 0.0, 64.0);
        Homography id = solve_homography(q, q);
        for (int i = 0; i < 9; ++i) {
            const double expect = i % 4 == 0 ? 1.0 : 0.0; // diagonal of 3x3
            CHECK(std::abs(id.m[static_cast<size_t>(i)] - expect) < 1e-9);
        }
    }
}

TEST_CASE("homography inverse consistency") {
    Rng rng(10);
    for (int trial = 0; trial < 50; ++trial) {
        KeypointQuad src = random_quad(rng, 0.0, 64.0);
        KeypointQuad dst = random_quad(rng, 0.0, 64.0);
        Homography t = solve_homography(src, dst);
        Homography inv = t.inverse();
        for (size_t k = 0; k < 4; ++k) {
            Point p = inv.apply(t.apply(src[k]));
            CHECK(std::abs(p.x - src[k].x) < 1e-8);
            CHECK(std::abs(p.y - src[k].y) < 1e-8);
        }
    }
}
