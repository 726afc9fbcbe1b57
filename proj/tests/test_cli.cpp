#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "tryon/geometry.hpp"
#include "tryon/png_io.hpp"

#include <json.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tryon;

namespace {

const std::string cli = TRYON_CLI_PATH;

int run(const std::string& args) {
    const std::string cmd = cli + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("tryon_cli_" + tag);
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

bool trees_identical(const fs::path& a, const fs::path& b) {
    std::vector<fs::path> rel;
    for (const auto& e : fs::recursive_directory_iterator(a))
        if (e.is_regular_file()) rel.push_back(fs::relative(e.path(), a));
    for (const auto& r : rel) {
        if (!fs::exists(b / r)) return false;
        if (slurp(a / r) != slurp(b / r)) return false;
    }
    size_t count_b = 0;
    for (const auto& e : fs::recursive_directory_iterator(b))
        if (e.is_regular_file()) ++count_b;
    return count_b == rel.size();
}

} // namespace

TEST_CASE("help and usage errors") {
    CHECK(run("--help") == 0);
    CHECK(run("gen --help") == 0);
    CHECK(run("frobnicate") == 1);
    CHECK(run("gen") == 1);                       // missing --out
    CHECK(run("eval --data /nonexistent") == 1);  // neither ckpt nor baseline
}

TEST_CASE("selftest passes") { CHECK(run("selftest") == 0); }

TEST_CASE("gen is deterministic and validates before any IO") {
    TempDir dir("gen");
    const std::string a = (dir.path / "a").string();
    const std::string b = (dir.path / "b").string();
    CHECK(run("gen --out " + a + " --seed 1 --count 4 --test-count 2") == 0);
    CHECK(run("gen --out " + b + " --seed 1 --count 4 --test-count 2") == 0);
    CHECK(trees_identical(a, b));
    CHECK(fs::exists(fs::path(a) / "meta.json"));
    CHECK(fs::exists(fs::path(a) / "00005" / "gt.json"));

    // validation error before any IO
    const std::string c = (dir.path / "c").string();
    CHECK(run("gen --out " + c + " --seed 1 --count 0") == 1);
    CHECK(!fs::exists(c));

    // unwritable target: nonzero exit and no partial meta.json
    const fs::path blocker = dir.path / "blocker";
    std::ofstream(blocker) << "file";
    const std::string under_file = (blocker / "sub").string();
    CHECK(run("gen --out " + under_file + " --seed 1 --count 2 --test-count 1") != 0);
    CHECK(!fs::exists(fs::path(under_file) / "meta.json"));
}

TEST_CASE("train smoke profile, inference and evaluation") {
    TempDir dir("pipeline");
    const std::string data = (dir.path / "data").string();
    REQUIRE(run("gen --out " + data + " --seed 3 --count 8 --test-count 2") == 0);

    const std::string out = (dir.path / "run").string();
    const auto t0 = std::chrono::steady_clock::now();
    REQUIRE(run("train --data " + data + " --out " + out +
                " --train.epochs 2 --train.batch_size 4 --train.decay_start 1 "
                "--train.eval_every 1 --threads 1") == 0);
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                           .count();
    INFO("train smoke took " << sec << " s");
    CHECK(sec < 60.0);
    CHECK(fs::exists(fs::path(out) / "checkpoint_last.bin"));
    CHECK(fs::exists(fs::path(out) / "checkpoint_best.bin"));
    CHECK(fs::exists(fs::path(out) / "report.ndjson"));
    CHECK(fs::exists(fs::path(out) / "config_used.ini"));

    // resume rejects a finished run
    CHECK(run("train --data " + data + " --out " + out +
              " --train.epochs 2 --train.batch_size 4 --train.decay_start 1 --resume " +
              out + "/checkpoint_last.bin") == 1);

    // ---- infer on the first tuple ----
    const std::string tup = data + "/00000";
    const std::string inf = (dir.path / "inf").string();
    REQUIRE(run("infer --ckpt " + out + "/checkpoint_last.bin --fg " + tup + "/fg.png" +
                " --fg-mask " + tup + "/fg_mask.png --bg " + tup + "/bg.png --out " + inf +
                " --dump-heatmaps --dump-raw") == 0);
    CHECK(fs::exists(fs::path(inf) / "composite.png"));
    CHECK(fs::exists(fs::path(inf) / "heatmaps_raw.json"));
    for (const char* k : {"A", "B", "C", "D"})
        CHECK(fs::exists(fs::path(inf) / (std::string("heatmap_") + k + ".png")));

    json kp = json::parse(slurp(fs::path(inf) / "keypoints.json"));
    for (const char* k : {"A", "B", "C", "D"}) {
        REQUIRE(kp.at("points").contains(k));
        CHECK(kp.at("points").at(k).size() == 2);
    }
    REQUIRE(kp.contains("degenerate"));
    if (!kp.at("degenerate").get<bool>()) REQUIRE(kp.at("homography").size() == 9);

    // heatmap PNGs are grayscale and sized like the background
    PngImage hm = read_png16((fs::path(inf) / "heatmap_A.png").string());
    CHECK(hm.channels == 1);
    CHECK(hm.width == 64);
    CHECK(hm.height == 64);

    // pixels outside the warped mask equal the background bit-exactly
    if (!kp.at("degenerate").get<bool>()) {
        Homography h;
        for (size_t i = 0; i < 9; ++i) h.m[i] = kp.at("homography").at(i).get<double>();
        Tensor mask = png16_to_tensor(read_png16(tup + "/fg_mask.png"));
        Tensor warped = warp(mask, h, 64, 64);
        PngImage comp = read_png16((fs::path(inf) / "composite.png").string());
        PngImage bg = read_png16(tup + "/bg.png");
        const auto mv = warped.values();
        int untouched = 0;
        for (size_t i = 0; i < mv.size(); ++i) {
            if (mv[i] != 0.0) continue;
            ++untouched;
            for (int c = 0; c < 3; ++c)
                CHECK(comp.pixels[i * 3 + static_cast<size_t>(c)] ==
                      bg.pixels[i * 3 + static_cast<size_t>(c)]);
        }
        CHECK(untouched > 0);
    }

    // ---- eval: model checkpoint and the mean-quad baseline ----
    const std::string csv = (dir.path / "eval.csv").string();
    REQUIRE(run("eval --ckpt " + out + "/checkpoint_last.bin --data " + data + " --out " +
                csv) == 0);
    {
        std::ifstream f(csv);
        std::string header;
        std::getline(f, header);
        CHECK(header == "id,lssim,iou,disp,degenerate");
        int rows = 0;
        std::string line, last;
        while (std::getline(f, line))
            if (!line.empty()) {
                ++rows;
                last = line;
            }
        CHECK(rows == 3); // 2 test tuples + mean row
        CHECK(last.rfind("mean,", 0) == 0);
    }

    const std::string bcsv = (dir.path / "baseline.csv").string();
    REQUIRE(run("eval --baseline mean-quad --data " + data + " --out " + bcsv) == 0);
    CHECK(slurp(bcsv).rfind("id,lssim,iou,disp,degenerate", 0) == 0);

    CHECK(run("eval --baseline nope --data " + data) == 1);
}
