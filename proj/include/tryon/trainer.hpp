#pragma once

#include "tryon/heatmap.hpp"
#include "tryon/metrics.hpp"
#include "tryon/model.hpp"
#include "tryon/synthdata.hpp"

#include <string>
#include <vector>

namespace tryon {

struct TrainConfig {
    double lr_init = 2e-4;
    double lr_final = 5e-5;
    int decay_start_epoch = 10;
    int epochs = 40;   // desk-scale synthetic runs use 30
    double weight_decay = 1e-5;
    int batch_size = 32; // desk-scale runs use 16
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    uint64_t seed = 0;
    LossConfig loss;
    int eval_every = 0; // 0: evaluate only after the final epoch

    void validate() const;
};

// lr_init up to decay_start_epoch, then linear down to lr_final at the
// final epoch. Epochs are 1-based.
double lr_at(int epoch, const TrainConfig& cfg);

struct AdamState {
    std::vector<std::vector<double>> m, v;
    int64_t step = 0;

    static AdamState init(const TryOnModel& model);
};

// Bias-corrected Adam with weight decay applied as an additive L2 gradient
// term before the moment updates. Parameters without a populated gradient
// are treated as zero-gradient. Tensors are shared handles, so the update
// writes through to the model.
void adam_step(const std::vector<TryOnModel::NamedParam>& params, AdamState& state, double lr,
               const TrainConfig& cfg);

struct EpochRecord {
    int epoch = 0;
    double lr = 0.0;
    double loss_hm = 0.0;
    double loss_sm = 0.0;
    bool has_sm = false;
    bool has_val = false;
    EvalResult val;
};

struct TrainReport {
    std::vector<EpochRecord> records;
    double best_iou = -1.0;
    int best_epoch = -1;
    std::string best_path, last_path, report_path;
    int64_t param_count = 0;
};

std::string to_ndjson(const EpochRecord& r);

// Checkpoints carrying optimizer state for bit-exact resumption. The file
// is also a valid model checkpoint (TryOnModel::load_checkpoint reads it).
void save_train_checkpoint(const std::string& path, const TryOnModel& model,
                           const AdamState& state, int epoch, double best_iou);
void load_train_checkpoint(const std::string& path, TryOnModel& model, AdamState& state,
                           int& epoch, double& best_iou);

// Epoch loop with (seed, epoch)-derived shuffling. When out_dir is
// non-empty, writes report.ndjson plus checkpoint_last.bin every epoch and
// checkpoint_best.bin on validation-IoU improvements. resume_from restores
// parameters, optimizer state and the epoch counter; the subsequent
// trajectory is bit-identical to an uninterrupted run.
TrainReport train(TryOnModel& model, const Dataset& ds, const TrainConfig& cfg,
                  const std::string& out_dir = "", const std::string& resume_from = "");

} // namespace tryon
