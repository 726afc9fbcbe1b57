#include "tryon/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace tryon {

void TrainConfig::validate() const {
    if (lr_init <= 0.0 || lr_final <= 0.0) throw ConfigError("train: learning rates > 0");
    if (lr_final > lr_init) throw ConfigError("train: lr_final must be <= lr_init");
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    // decay_start_epoch == epochs degenerates to a constant-lr schedule
    // (needed by single-epoch smoke runs)
    if (decay_start_epoch < 1 || decay_start_epoch > epochs)
        throw ConfigError("train: decay_start_epoch must lie in [1, epochs]");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
        throw ConfigError("train: adam betas must lie in [0,1)");
    if (adam_eps <= 0.0) throw ConfigError("train: adam eps must be > 0");
    if (eval_every < 0) throw ConfigError("train: eval_every must be >= 0");
    loss.validate();
}

double lr_at(int epoch, const TrainConfig& cfg) {
    if (epoch < 1 || epoch > cfg.epochs)
        throw ConfigError("lr_at: epoch " + std::to_string(epoch) + " outside [1," +
                          std::to_string(cfg.epochs) + "]");
    if (epoch <= cfg.decay_start_epoch) return cfg.lr_init;
    const double t = static_cast<double>(epoch - cfg.decay_start_epoch) /
                     static_cast<double>(cfg.epochs - cfg.decay_start_epoch);
    return cfg.lr_init * (1.0 - t) + cfg.lr_final * t; // exact at both endpoints
}

AdamState AdamState::init(const TryOnModel& model) {
    AdamState s;
    for (const auto& p : model.parameters()) {
        s.m.emplace_back(static_cast<size_t>(p.tensor.size()), 0.0);
        s.v.emplace_back(static_cast<size_t>(p.tensor.size()), 0.0);
    }
    return s;
}

void adam_step(const std::vector<TryOnModel::NamedParam>& params, AdamState& state, double lr,
               const TrainConfig& cfg) {
    if (state.m.size() != params.size())
        throw Error("adam_step: state does not match parameter list");
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor t = params[i].tensor;
        auto vals = t.mutable_values();
        const bool has_grad = t.has_grad();
        std::span<const double> grad;
        if (has_grad) grad = t.grad();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (size_t j = 0; j < vals.size(); ++j) {
            const double raw = has_grad ? grad[j] : 0.0;
            if (!std::isfinite(raw))
                throw NumericError("non-finite gradient in parameter " + params[i].name);
            const double g = raw + cfg.weight_decay * vals[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            vals[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg.adam_eps);
        }
    }
}

std::string to_ndjson(const EpochRecord& r) {
    json j;
    j["epoch"] = r.epoch;
    j["lr"] = r.lr;
    j["loss_hm"] = r.loss_hm;
    if (r.has_sm)
        j["loss_sm"] = r.loss_sm;
    else
        j["loss_sm"] = nullptr;
    if (r.has_val) {
        j["val_lssim"] = r.val.lssim;
        j["val_iou"] = r.val.iou;
        j["val_disp"] = r.val.disp;
    } else {
        j["val_lssim"] = nullptr;
        j["val_iou"] = nullptr;
        j["val_disp"] = nullptr;
    }
    return j.dump();
}

void save_train_checkpoint(const std::string& path, const TryOnModel& model,
                           const AdamState& state, int epoch, double best_iou) {
    std::vector<NamedArray> arrays;
    const auto& params = model.parameters();
    for (size_t i = 0; i < params.size(); ++i) {
        NamedArray a;
        a.name = "param/" + params[i].name;
        a.shape = params[i].tensor.shape();
        a.values.assign(params[i].tensor.values().begin(), params[i].tensor.values().end());
        arrays.push_back(std::move(a));
        NamedArray am{"adam.m/" + params[i].name, params[i].tensor.shape(), state.m[i]};
        NamedArray av{"adam.v/" + params[i].name, params[i].tensor.shape(), state.v[i]};
        arrays.push_back(std::move(am));
        arrays.push_back(std::move(av));
    }
    arrays.push_back({"adam/step", {1}, {static_cast<double>(state.step)}});
    arrays.push_back({"train/epoch", {1}, {static_cast<double>(epoch)}});
    arrays.push_back({"train/best_iou", {1}, {best_iou}});
    write_array_file(path, model.config().to_json(), arrays);
}

void load_train_checkpoint(const std::string& path, TryOnModel& model, AdamState& state,
                           int& epoch, double& best_iou) {
    auto [meta, arrays] = read_array_file(path);
    const ModelConfig saved = ModelConfig::from_json(meta);
    if (saved.to_json() != model.config().to_json())
        throw ConfigError("resume: checkpoint model config differs from the requested one");
    auto find = [&](const std::string& name) -> const NamedArray& {
        for (const NamedArray& a : arrays)
            if (a.name == name) return a;
        throw IoError("resume: checkpoint missing array " + name);
    };
    auto& params = model.parameters();
    if (state.m.size() != params.size()) throw Error("resume: optimizer state size mismatch");
    for (size_t i = 0; i < params.size(); ++i) {
        const std::string& n = params[i].name;
        const NamedArray& p = find("param/" + n);
        if (p.shape != params[i].tensor.shape())
            throw IoError("resume: shape mismatch for " + n);
        Tensor t = params[i].tensor;
        std::copy(p.values.begin(), p.values.end(), t.mutable_values().begin());
        state.m[i] = find("adam.m/" + n).values;
        state.v[i] = find("adam.v/" + n).values;
    }
    state.step = static_cast<int64_t>(find("adam/step").values.at(0));
    epoch = static_cast<int>(find("train/epoch").values.at(0));
    best_iou = find("train/best_iou").values.at(0);
}

namespace {

std::vector<int> shuffled_train_indices(const Dataset& ds, uint64_t seed, int epoch) {
    std::vector<int> idx = ds.train_indices();
    Rng rng(mix_seed(seed, 0x5u + 131ull * static_cast<uint64_t>(epoch)));
    rng.shuffle(idx);
    return idx;
}

std::string join_ids(const std::vector<int>& batch, const Dataset& ds) {
    std::ostringstream os;
    for (size_t i = 0; i < batch.size(); ++i)
        os << (i ? "," : "") << ds.tuples[static_cast<size_t>(batch[i])].id;
    return os.str();
}

} // namespace

TrainReport train(TryOnModel& model, const Dataset& ds, const TrainConfig& cfg,
                  const std::string& out_dir, const std::string& resume_from) {
    cfg.validate();
    const auto train_idx_all = ds.train_indices();
    const auto test_idx = ds.test_indices();
    if (train_idx_all.empty()) throw DataError("train: dataset has no training tuples");
    if (model.config().input_size != ds.cfg.canvas)
        throw ConfigError("train: model input size != dataset canvas");
    if (model.config().use_semantic &&
        model.config().num_semantic_classes != ds.cfg.semantic_classes())
        throw ConfigError("train: model semantic classes != dataset classes");

    const int canvas = ds.cfg.canvas;
    const double g = cfg.loss.radius_at(canvas);

    // ground-truth heatmaps are pure functions of the tuples; render once
    std::vector<HeatmapSet> gt_sets(ds.tuples.size());
    for (size_t i = 0; i < ds.tuples.size(); ++i)
        gt_sets[i] = make_ground_truth(ds.tuples[i].gt_quad, canvas, canvas, g);

    AdamState adam = AdamState::init(model);
    int start_epoch = 1;
    double best_iou = -1.0;
    int best_epoch = -1;
    if (!resume_from.empty()) {
        int done_epoch = 0;
        load_train_checkpoint(resume_from, model, adam, done_epoch, best_iou);
        start_epoch = done_epoch + 1;
        if (start_epoch > cfg.epochs)
            throw ConfigError("resume: checkpoint already covers all epochs");
    }

    std::ofstream report_out;
    fs::path best_path, last_path, report_path;
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        best_path = fs::path(out_dir) / "checkpoint_best.bin";
        last_path = fs::path(out_dir) / "checkpoint_last.bin";
        report_path = fs::path(out_dir) / "report.ndjson";
        report_out.open(report_path,
                        resume_from.empty() ? std::ios::trunc : std::ios::app);
        if (!report_out) throw IoError("cannot write " + report_path.string());
    }

    TrainReport report;
    report.param_count = model.param_count();

    for (int epoch = start_epoch; epoch <= cfg.epochs; ++epoch) {
        const double lr = lr_at(epoch, cfg);
        const std::vector<int> order = shuffled_train_indices(ds, cfg.seed, epoch);

        double sum_hm = 0.0, sum_sm = 0.0;
        int n_samples = 0;
        bool any_sm = false;

        for (size_t off = 0; off < order.size(); off += static_cast<size_t>(cfg.batch_size)) {
            const size_t end = std::min(order.size(), off + static_cast<size_t>(cfg.batch_size));
            const std::vector<int> batch(order.begin() + static_cast<long>(off),
                                         order.begin() + static_cast<long>(end));
            model.zero_grad();
            try {
                for (int idx : batch) {
                    const TupleRecord& rec = ds.tuples[static_cast<size_t>(idx)];
                    ForwardOutput out = model.forward(rec.bg_image, rec.fg_image, rec.fg_mask);
                    LossBreakdown lb = model.total_loss(out, gt_sets[static_cast<size_t>(idx)],
                                                        rec.semantic, cfg.loss);
                    if (!std::isfinite(lb.total.scalar_value()))
                        throw NumericError("non-finite loss");
                    backward(scalar_mul(lb.total, 1.0 / static_cast<double>(batch.size())));
                    sum_hm += lb.hm.scalar_value();
                    if (lb.has_sm) {
                        sum_sm += lb.sm_value;
                        any_sm = true;
                    }
                    ++n_samples;
                }
                adam_step(model.parameters(), adam, lr, cfg);
            } catch (const NumericError& e) {
                throw NumericError(std::string(e.what()) + " (epoch " + std::to_string(epoch) +
                                   ", batch tuple ids [" + join_ids(batch, ds) + "])");
            }
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = lr;
        rec.loss_hm = sum_hm / std::max(1, n_samples);
        rec.has_sm = any_sm;
        rec.loss_sm = any_sm ? sum_sm / std::max(1, n_samples) : 0.0;

        const bool do_eval = !test_idx.empty() &&
                             ((cfg.eval_every > 0 && epoch % cfg.eval_every == 0) ||
                              epoch == cfg.epochs);
        if (do_eval) {
            std::vector<TupleEval> evals;
            evals.reserve(test_idx.size());
            for (int i : test_idx)
                evals.push_back(evaluate_tuple(model, ds.tuples[static_cast<size_t>(i)]));
            rec.val = mean_eval(evals);
            rec.has_val = true;
            if (rec.val.iou > best_iou) {
                best_iou = rec.val.iou;
                best_epoch = epoch;
                if (!out_dir.empty()) model.save_checkpoint(best_path.string());
            }
        }

        report.records.push_back(rec);
        if (!out_dir.empty()) {
            report_out << to_ndjson(rec) << "\n";
            report_out.flush();
            save_train_checkpoint(last_path.string(), model, adam, epoch, best_iou);
        }
    }

    report.best_iou = best_iou;
    report.best_epoch = best_epoch;
    if (!out_dir.empty()) {
        report.best_path = best_path.string();
        report.last_path = last_path.string();
        report.report_path = report_path.string();
    }
    return report;
}

} // namespace tryon
