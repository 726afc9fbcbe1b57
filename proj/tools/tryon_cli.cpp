#include "tryon/heatmap.hpp"
#include "tryon/kernels.hpp"
#include "tryon/metrics.hpp"
#include "tryon/model.hpp"
#include "tryon/png_io.hpp"
#include "tryon/synthdata.hpp"
#include "tryon/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <omp.h>

#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tryon;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

void apply_threads(int threads) {
    if (threads < 0) throw ConfigError("--threads must be >= 0");
    if (threads > 0) omp_set_num_threads(threads);
}

// Effective config echoed as diffable ini; deliberately path-free so two
// runs with identical settings produce identical trees.
void write_config_echo(const std::string& out_dir, const std::string& text) {
    std::ofstream os(fs::path(out_dir) / "config_used.ini");
    if (!os) throw IoError("cannot write config_used.ini under " + out_dir);
    os << text;
}

std::string gen_config_ini(const GenConfig& cfg) {
    std::ostringstream os;
    os << "[gen]\n"
       << "canvas=" << cfg.canvas << "\n"
       << "kind=" << to_string(cfg.kind) << "\n"
       << "count=" << cfg.train_count << "\n"
       << "test_count=" << cfg.test_count << "\n"
       << "seed=" << cfg.seed << "\n"
       << "rotation_deg=" << cfg.jitter.rotation_deg << "\n"
       << "scale_lo=" << cfg.jitter.scale_lo << "\n"
       << "scale_hi=" << cfg.jitter.scale_hi << "\n"
       << "skew=" << cfg.jitter.skew << "\n";
    return os.str();
}

std::string train_config_ini(const ModelConfig& mcfg, const TrainConfig& tcfg) {
    std::ostringstream os;
    os << "[model]\n"
       << "input_size=" << mcfg.input_size << "\n"
       << "channels=";
    for (size_t i = 0; i < mcfg.encoder_channels.size(); ++i)
        os << (i ? " " : "") << mcfg.encoder_channels[i];
    os << "\n"
       << "num_heatmaps=" << mcfg.num_heatmaps << "\n"
       << "num_semantic_classes=" << mcfg.num_semantic_classes << "\n"
       << "use_semantic=" << (mcfg.use_semantic ? "true" : "false") << "\n"
       << "use_foreground=" << (mcfg.use_foreground ? "true" : "false") << "\n"
       << "fusion=" << to_string(mcfg.fusion) << "\n"
       << "seed=" << mcfg.seed << "\n"
       << "[loss]\n"
       << "variant=" << to_string(tcfg.loss.variant) << "\n"
       << "gamma=" << tcfg.loss.gamma << "\n"
       << "lambda=" << tcfg.loss.lambda << "\n"
       << "g=" << tcfg.loss.gaussian_radius << "\n"
       << "[train]\n"
       << "epochs=" << tcfg.epochs << "\n"
       << "batch_size=" << tcfg.batch_size << "\n"
       << "lr_init=" << tcfg.lr_init << "\n"
       << "lr_final=" << tcfg.lr_final << "\n"
       << "decay_start=" << tcfg.decay_start_epoch << "\n"
       << "weight_decay=" << tcfg.weight_decay << "\n"
       << "seed=" << tcfg.seed << "\n"
       << "eval_every=" << tcfg.eval_every << "\n";
    return os.str();
}

// ---- gen ----

struct GenArgs {
    std::string out;
    GenConfig cfg;
    std::string kind = "glasses-like";
};

void add_gen(CLI::App& app, GenArgs& a, int& threads) {
    CLI::App* cmd = app.add_subcommand("gen", "Generate a synthetic try-on dataset");
    cmd->set_config("--config", "", "Config file (ini: [gen] key=value)");
    cmd->add_option("--out", a.out, "Output dataset directory")->required();
    cmd->add_option("--gen.canvas", a.cfg.canvas, "Canvas side in pixels")
        ->capture_default_str();
    cmd->add_option("--gen.kind", a.kind, "glasses-like|hat-like|tie-like")
        ->capture_default_str();
    cmd->add_option("--count,--gen.count", a.cfg.train_count, "Training tuples")
        ->capture_default_str();
    cmd->add_option("--test-count,--gen.test_count", a.cfg.test_count, "Test tuples")
        ->capture_default_str();
    cmd->add_option("--seed,--gen.seed", a.cfg.seed, "Generation seed")
        ->capture_default_str();
    cmd->add_option("--gen.rotation_deg", a.cfg.jitter.rotation_deg,
                    "Placement rotation jitter (degrees)")
        ->capture_default_str();
    cmd->add_option("--gen.scale_lo", a.cfg.jitter.scale_lo, "Placement scale range low")
        ->capture_default_str();
    cmd->add_option("--gen.scale_hi", a.cfg.jitter.scale_hi, "Placement scale range high")
        ->capture_default_str();
    cmd->add_option("--gen.skew", a.cfg.jitter.skew, "Perspective skew jitter")
        ->capture_default_str();
    cmd->add_option("--threads", threads, "Cap OpenMP worker threads (0 = default)");
    cmd->callback([&a, &threads] {
        apply_threads(threads);
        a.cfg.kind = accessory_kind_from_string(a.kind);
        a.cfg.validate(); // before any IO
        Dataset ds = generate_dataset(a.cfg);
        write_dataset(ds, a.out);
        write_config_echo(a.out, gen_config_ini(a.cfg));
        std::cout << "wrote " << ds.tuples.size() << " tuples to " << a.out << "\n";
    });
}

// ---- train ----

struct TrainArgs {
    std::string data, out, resume;
    std::vector<int> channels = {16, 32, 64, 128};
    std::string fusion = "daf";
    bool no_semantic = false;
    bool no_foreground = false;
    uint64_t model_seed = 0;
    std::string variant = "weighted-awing";
    TrainConfig tcfg;
    LossConfig lcfg;
};

void add_train(CLI::App& app, TrainArgs& a, int& threads) {
    // desk-scale defaults; the paper-scale values (epochs 40, batch 32)
    // remain the library defaults
    a.tcfg.epochs = 30;
    a.tcfg.batch_size = 16;
    a.tcfg.decay_start_epoch = 10;

    CLI::App* cmd = app.add_subcommand("train", "Train the try-on model on a dataset");
    cmd->set_config("--config", "", "Config file (ini: [model]/[loss]/[train] sections)");
    cmd->add_option("--data", a.data, "Dataset directory (from gen)")->required();
    cmd->add_option("--out", a.out, "Output directory (checkpoints + report)")->required();
    cmd->add_option("--resume", a.resume, "Resume from checkpoint_last.bin");
    cmd->add_option("--model.channels", a.channels, "Encoder stage widths")
        ->capture_default_str();
    cmd->add_option("--model.fusion", a.fusion, "daf|daf-simplified|add")
        ->capture_default_str();
    cmd->add_flag("--no-semantic", a.no_semantic, "Drop the semantic decoder");
    cmd->add_flag("--no-foreground", a.no_foreground, "Drop the foreground branch");
    cmd->add_option("--model.seed", a.model_seed, "Init seed")->capture_default_str();
    cmd->add_option("--variant,--loss.variant", a.variant,
                    "weighted-awing|awing|weighted-mse|mse")
        ->capture_default_str();
    cmd->add_option("--loss.gamma", a.lcfg.gamma, "Positive-mask weight")
        ->capture_default_str();
    cmd->add_option("--loss.lambda", a.lcfg.lambda, "Semantic loss weight")
        ->capture_default_str();
    cmd->add_option("--loss.g", a.lcfg.gaussian_radius, "Gaussian radius at 224 reference")
        ->capture_default_str();
    cmd->add_option("--train.epochs", a.tcfg.epochs, "Epochs")->capture_default_str();
    cmd->add_option("--train.batch_size", a.tcfg.batch_size, "Batch size")
        ->capture_default_str();
    cmd->add_option("--train.lr_init", a.tcfg.lr_init, "Initial lr")->capture_default_str();
    cmd->add_option("--train.lr_final", a.tcfg.lr_final, "Final lr")->capture_default_str();
    cmd->add_option("--train.decay_start", a.tcfg.decay_start_epoch,
                    "Last epoch at the initial lr")
        ->capture_default_str();
    cmd->add_option("--train.weight_decay", a.tcfg.weight_decay, "L2 weight decay")
        ->capture_default_str();
    cmd->add_option("--train.seed", a.tcfg.seed, "Shuffle seed")->capture_default_str();
    cmd->add_option("--train.eval_every", a.tcfg.eval_every,
                    "Validate every N epochs (0 = final only)")
        ->capture_default_str();
    cmd->add_option("--threads", threads, "Cap OpenMP worker threads (0 = default)");

    cmd->callback([&a, &threads] {
        apply_threads(threads);
        Dataset ds = read_dataset(a.data);
        ModelConfig mcfg;
        mcfg.input_size = ds.cfg.canvas;
        mcfg.encoder_channels = a.channels;
        mcfg.num_semantic_classes = ds.cfg.semantic_classes();
        mcfg.use_semantic = !a.no_semantic;
        mcfg.use_foreground = !a.no_foreground;
        mcfg.fusion = fusion_mode_from_string(a.fusion);
        mcfg.seed = a.model_seed;
        a.tcfg.loss = a.lcfg;
        a.tcfg.loss.variant = loss_variant_from_string(a.variant);

        TryOnModel model(mcfg);
        fs::create_directories(a.out);
        write_config_echo(a.out, train_config_ini(mcfg, a.tcfg));
        std::cout << "training " << model.param_count() << " parameters, " << a.tcfg.epochs
                  << " epochs, " << ds.train_indices().size() << " tuples\n";
        TrainReport rep = train(model, ds, a.tcfg, a.out, a.resume);
        for (const EpochRecord& r : rep.records) std::cout << to_ndjson(r) << "\n";
        std::cout << "best val IoU " << rep.best_iou << " (epoch " << rep.best_epoch << ")\n";
    });
}

// ---- infer ----

struct InferArgs {
    std::string ckpt, fg, fg_mask, bg, out;
    bool dump_heatmaps = false;
    bool dump_raw = false;
    double beta = 1000.0;
};

Tensor load_image(const std::string& path, int want_channels) {
    Tensor t = png16_to_tensor(read_png16(path));
    if (t.dim(0) == want_channels) return t;
    if (want_channels == 1 && t.dim(0) == 3) {
        // luma collapse for masks supplied as RGB
        const int h = t.dim(1), w = t.dim(2);
        const auto v = t.values();
        const size_t plane = static_cast<size_t>(h) * w;
        std::vector<double> g(plane);
        for (size_t i = 0; i < plane; ++i)
            g[i] = (v[i] + v[plane + i] + v[2 * plane + i]) / 3.0;
        return Tensor::from_values({1, h, w}, std::move(g));
    }
    if (want_channels == 3 && t.dim(0) == 1) {
        std::vector<double> rgb;
        rgb.reserve(t.values().size() * 3);
        for (int c = 0; c < 3; ++c) rgb.insert(rgb.end(), t.values().begin(), t.values().end());
        return Tensor::from_values({3, t.dim(1), t.dim(2)}, std::move(rgb));
    }
    throw DataError("unexpected channel count in " + path);
}

void add_infer(CLI::App& app, InferArgs& a, int& threads) {
    CLI::App* cmd = app.add_subcommand("infer", "Composite one foreground onto a background");
    cmd->add_option("--ckpt", a.ckpt, "Model checkpoint")->required();
    cmd->add_option("--fg", a.fg, "Foreground image (PNG)")->required();
    cmd->add_option("--fg-mask", a.fg_mask, "Foreground mask (PNG)")->required();
    cmd->add_option("--bg", a.bg, "Background image (PNG)")->required();
    cmd->add_option("--out", a.out, "Output directory")->required();
    cmd->add_flag("--dump-heatmaps", a.dump_heatmaps, "Write per-keypoint heatmap PNGs");
    cmd->add_flag("--dump-raw", a.dump_raw, "Write raw heatmap values as JSON");
    cmd->add_option("--beta", a.beta, "Soft-argmax sharpness")->capture_default_str();
    cmd->add_option("--threads", threads, "Cap OpenMP worker threads (0 = default)");

    cmd->callback([&a, &threads] {
        apply_threads(threads);
        TryOnModel model = TryOnModel::load_checkpoint(a.ckpt);
        const int s = model.config().input_size;
        Tensor bg = load_image(a.bg, 3);
        Tensor fg = load_image(a.fg, 3);
        Tensor mask = load_image(a.fg_mask, 1);
        for (const Tensor* t : {&bg, &fg, &mask})
            if (t->dim(1) != s || t->dim(2) != s)
                throw DataError("inputs must be " + std::to_string(s) + "x" +
                                std::to_string(s) + " to match the checkpoint");

        NoGradGuard guard;
        ForwardOutput out = model.forward(bg, fg, mask);
        const size_t plane = static_cast<size_t>(s) * s;
        const auto hv = out.heatmaps.values();

        KeypointQuad pred;
        for (int k = 0; k < 4; ++k) {
            std::vector<double> slice(hv.begin() + k * plane, hv.begin() + (k + 1) * plane);
            pred[static_cast<size_t>(k)] =
                soft_argmax(Tensor::from_values({s, s}, std::move(slice)), a.beta);
        }

        fs::create_directories(a.out);
        bool degenerate = false;
        Tensor comp = bg;
        json jh = nullptr;
        try {
            const Homography t = solve_homography(source_quad(mask), pred);
            comp = composite(bg, warp(fg, t, s, s), warp(mask, t, s, s));
            jh = t.m;
        } catch (const GeometryError&) {
            degenerate = true;
        }
        write_png16((fs::path(a.out) / "composite.png").string(), tensor_to_png16(comp));

        const char* names = "ABCD";
        json jp;
        for (int k = 0; k < 4; ++k)
            jp[std::string(1, names[k])] = {pred[static_cast<size_t>(k)].x,
                                            pred[static_cast<size_t>(k)].y};
        json j{{"points", jp}, {"homography", jh}, {"degenerate", degenerate}};
        std::ofstream jo(fs::path(a.out) / "keypoints.json");
        jo << j.dump(2) << "\n";

        if (a.dump_heatmaps) {
            for (int k = 0; k < 4; ++k) {
                // normalized per heatmap to [0,255]
                double lo = hv[k * plane], hi = hv[k * plane];
                for (size_t i = 0; i < plane; ++i) {
                    lo = std::min(lo, hv[k * plane + i]);
                    hi = std::max(hi, hv[k * plane + i]);
                }
                const double scale = hi > lo ? 255.0 / (hi - lo) : 0.0;
                std::vector<uint8_t> norm(plane);
                for (size_t i = 0; i < plane; ++i)
                    norm[i] = static_cast<uint8_t>(
                        std::lround((hv[k * plane + i] - lo) * scale));
                write_png8_gray((fs::path(a.out) / ("heatmap_" + std::string(1, names[k]) +
                                                    ".png"))
                                    .string(),
                                s, s, norm);
            }
        }
        if (a.dump_raw) {
            json jr;
            jr["shape"] = {4, s, s};
            jr["values"] = std::vector<double>(hv.begin(), hv.end());
            std::ofstream ro(fs::path(a.out) / "heatmaps_raw.json");
            ro << jr.dump() << "\n";
        }
        std::cout << "wrote composite + keypoints to " << a.out
                  << (degenerate ? " (degenerate homography, background returned)" : "")
                  << "\n";
    });
}

// ---- eval ----

struct EvalArgs {
    std::string ckpt, data, out, split = "test", baseline;
    double beta = 1000.0;
};

void add_eval(CLI::App& app, EvalArgs& a, int& threads) {
    CLI::App* cmd = app.add_subcommand("eval", "Evaluate a checkpoint or baseline on a dataset");
    cmd->add_option("--ckpt", a.ckpt, "Model checkpoint (omit with --baseline)");
    cmd->add_option("--data", a.data, "Dataset directory")->required();
    cmd->add_option("--split", a.split, "train|test")->capture_default_str();
    cmd->add_option("--baseline", a.baseline, "Static baseline: mean-quad");
    cmd->add_option("--out", a.out, "CSV output path (default stdout)");
    cmd->add_option("--beta", a.beta, "Soft-argmax sharpness")->capture_default_str();
    cmd->add_option("--threads", threads, "Cap OpenMP worker threads (0 = default)");

    cmd->callback([&a, &threads] {
        apply_threads(threads);
        if (a.split != "train" && a.split != "test")
            throw ConfigError("--split must be train or test");
        if (a.baseline.empty() && a.ckpt.empty())
            throw ConfigError("need --ckpt or --baseline");
        if (!a.baseline.empty() && a.baseline != "mean-quad")
            throw ConfigError("unknown baseline '" + a.baseline + "'");

        Dataset ds = read_dataset(a.data);
        const std::vector<int> idx =
            a.split == "test" ? ds.test_indices() : ds.train_indices();
        if (idx.empty()) throw DataError("split '" + a.split + "' is empty");

        std::vector<TupleEval> evals;
        evals.reserve(idx.size());
        if (!a.baseline.empty()) {
            const KeypointQuad mq = mean_quad(ds, ds.train_indices());
            for (int i : idx)
                evals.push_back(evaluate_with_quad(mq, ds.tuples[static_cast<size_t>(i)]));
        } else {
            TryOnModel model = TryOnModel::load_checkpoint(a.ckpt);
            if (model.config().input_size != ds.cfg.canvas)
                throw ConfigError("checkpoint input size != dataset canvas");
            for (int i : idx)
                evals.push_back(
                    evaluate_tuple(model, ds.tuples[static_cast<size_t>(i)], a.beta));
        }

        std::ostringstream csv;
        csv << "id,lssim,iou,disp,degenerate\n";
        for (size_t k = 0; k < idx.size(); ++k) {
            const auto& e = evals[k];
            csv << ds.tuples[static_cast<size_t>(idx[k])].id << "," << e.metrics.lssim << ","
                << e.metrics.iou << "," << e.metrics.disp << ","
                << (e.degenerate_homography ? 1 : 0) << "\n";
        }
        const EvalResult m = mean_eval(evals);
        csv << "mean," << m.lssim << "," << m.iou << "," << m.disp << ",\n";

        if (a.out.empty()) {
            std::cout << csv.str();
        } else {
            std::ofstream os(a.out);
            if (!os) throw IoError("cannot write " + a.out);
            os << csv.str();
            std::cout << "LSSIM " << m.lssim << "  IoU " << m.iou << "  Disp " << m.disp
                      << "  -> " << a.out << "\n";
        }
    });
}

// ---- selftest ----

int run_selftest();

void add_selftest(CLI::App& app, int& threads) {
    CLI::App* cmd = app.add_subcommand("selftest", "Quick engine self-checks");
    cmd->add_option("--threads", threads, "Cap OpenMP worker threads (0 = default)");
    cmd->callback([&threads] {
        apply_threads(threads);
        if (run_selftest() != 0) throw Error("selftest failed");
    });
}

bool check(const char* name, bool ok, int& failures) {
    std::cout << (ok ? "[ ok ] " : "[FAIL] ") << name << "\n";
    if (!ok) ++failures;
    return ok;
}

int run_selftest() {
    int failures = 0;
    Rng rng(20240601);

    {
        Tensor x = Tensor::randn({4, 5}, rng, 1.0);
        auto rep = grad_check([](const Tensor& t) { return sum_all(sigmoid(t)); }, x);
        check("sigmoid-sum gradient vs finite differences", rep.pass, failures);
    }
    {
        Tensor x = Tensor::randn({2, 6, 6}, rng, 1.0);
        Tensor w = Tensor::randn({3, 2, 3, 3}, rng, 0.3);
        auto rep = grad_check(
            [&](const Tensor& t) { return mean_all(conv2d(t, w, 1, 1)); }, x);
        check("conv2d input gradient vs finite differences", rep.pass, failures);
    }
    {
        AWingParams p;
        double worst = 0.0;
        for (int i = 0; i <= 100; ++i) {
            const double y = i / 100.0;
            const double ln_branch = p.omega * std::log1p(std::pow(p.theta / p.epsilon,
                                                                   p.alpha - y));
            const double lin_branch = p.a_coef(y) * p.theta - p.b_coef(y);
            worst = std::max(worst, std::abs(ln_branch - lin_branch));
        }
        check("awing branch continuity at theta", worst < 1e-9, failures);
    }
    {
        KeypointQuad q;
        q[0] = {5, 6};
        q[1] = {40, 8};
        q[2] = {4, 30};
        q[3] = {42, 33};
        KeypointQuad d;
        for (size_t i = 0; i < 4; ++i) d[i] = {q[i].x + 3.5, q[i].y - 2.25};
        const Homography t = solve_homography(q, d);
        double err = 0.0;
        const KeypointQuad m = t.apply(q);
        for (size_t i = 0; i < 4; ++i)
            err = std::max({err, std::abs(m[i].x - d[i].x), std::abs(m[i].y - d[i].y)});
        check("homography round trip", err < 1e-8, failures);
    }
    {
        Tensor h = render_gaussian(10.0, 12.0, 32, 32, 6.0);
        const Point p = soft_argmax(h, 1000.0);
        check("soft-argmax recovers gaussian center",
              std::abs(p.x - 10.0) < 0.5 && std::abs(p.y - 12.0) < 0.5, failures);
    }
    {
        Tensor img = Tensor::randn({3, 24, 24}, rng, 0.1);
        std::vector<double> v(img.values().begin(), img.values().end());
        for (auto& z : v) z = std::clamp(z + 0.5, 0.0, 1.0);
        Tensor im = Tensor::from_values({3, 24, 24}, std::move(v));
        Tensor ones = Tensor::full({1, 24, 24}, 1.0);
        check("lssim(x,x) == 1", std::abs(lssim(im, im, ones, ones) - 1.0) < 1e-12, failures);
    }

    std::cout << (failures == 0 ? "selftest passed\n" : "selftest FAILED\n");
    return failures == 0 ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"tryon: background-oriented virtual accessory try-on"};
    app.require_subcommand(1);
    app.fallthrough(true);
    int threads = 0;

    GenArgs gen_args;
    TrainArgs train_args;
    InferArgs infer_args;
    EvalArgs eval_args;
    add_gen(app, gen_args, threads);
    add_train(app, train_args, threads);
    add_infer(app, infer_args, threads);
    add_eval(app, eval_args, threads);
    add_selftest(app, threads);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n";
        return kExitUsage;
    } catch (const ConfigError& e) {
        std::cerr << e.what() << "\n";
        return kExitUsage;
    } catch (const Error& e) {
        std::cerr << e.what() << "\n";
        return kExitRuntime;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitOk;
}
