#pragma once

#include "tryon/heatmap.hpp"
#include "tryon/tensor.hpp"

#include <optional>
#include <string>
#include <vector>

namespace tryon {

enum class FusionMode { daf, daf_simplified, add };

FusionMode fusion_mode_from_string(const std::string& s);
std::string to_string(FusionMode m);

struct ModelConfig {
    int input_size = 64;
    std::vector<int> encoder_channels = {16, 32, 64, 128};
    int num_heatmaps = 4;
    int num_semantic_classes = 12;
    bool use_semantic = true;
    bool use_foreground = true;
    FusionMode fusion = FusionMode::daf;
    uint64_t seed = 0;

    int stages() const { return static_cast<int>(encoder_channels.size()); }
    int bottleneck_size() const { return input_size >> stages(); }
    void validate() const;

    std::string to_json() const;
    static ModelConfig from_json(const std::string& s);
};

// Bottleneck record plus predictions, kept around for inspection.
struct ForwardOutput {
    Tensor heatmaps;        // [num_heatmaps, S, S]
    Tensor semantic_logits; // [C, S, S]; undefined when use_semantic is off
    Tensor f_b, f_f, m_fuse, f_fuse;
};

namespace layers {

struct Conv {
    Tensor w; // [Co,Ci,k,k]
    Tensor b; // [Co] or undefined
    int stride = 1, pad = 0;
    Tensor forward(const Tensor& x) const;
};

struct ConvT {
    Tensor w; // [Ci,Co,k,k]
    int stride = 2, pad = 0;
    Tensor forward(const Tensor& x) const;
};

struct Norm {
    Tensor gamma, beta;
    int groups = 1;
    Tensor forward(const Tensor& x) const;
};

struct Linear {
    Tensor w; // [out,in]
    Tensor b; // [out]
    Tensor forward(const Tensor& x) const;
};

// conv -> norm -> relu -> conv -> norm (+ projected shortcut) -> relu;
// the first conv is stride-2 when the block downsamples, or a stride-2
// transposed conv when it upsamples.
struct ResBlock {
    bool up = false;
    Conv conv1;
    ConvT tconv1; // used instead of conv1 when up
    Norm norm1;
    Conv conv2;
    Norm norm2;
    bool has_shortcut = false;
    Conv sc_conv;   // 1x1 (stride matching) when downsampling / reshaping
    ConvT sc_tconv; // 2x2 stride-2 when upsampling
    Norm sc_norm;
    Tensor forward(const Tensor& x) const;
};

struct Daf {
    Linear mlp1, mlp2; // shared MLP for both pooled vectors
    Conv spatial;      // 7x7 over [mean;max] of the channel-refined sum
    Conv simplified;   // 3x3 straight to the fusion map (DAF(s) variant)
};

} // namespace layers

struct LossBreakdown {
    Tensor total;
    Tensor hm;
    double sm_value = 0.0; // reported even when lambda = 0 (detached)
    bool has_sm = false;
};

// Soft selection between the two feature maps: m * f_b + (1 - m) * f_f.
Tensor fuse_blend(const Tensor& m_fuse, const Tensor& f_b, const Tensor& f_f);

class TryOnModel {
public:
    explicit TryOnModel(ModelConfig cfg);

    const ModelConfig& config() const { return cfg_; }

    // Background-oriented forward pass: E_b with per-stage skips, optional
    // E_f on concat(fg, mask), bottleneck fusion, semantic decoder on F_b,
    // heatmap decoder on F_fuse with encoder skips and additive semantic
    // features.
    ForwardOutput forward(const Tensor& bg, const Tensor& fg, const Tensor& fg_mask) const;

    // L = L_hm + lambda * L_sm (Eq. 8); gt_sem holds per-pixel class ids.
    LossBreakdown total_loss(const ForwardOutput& out, const HeatmapSet& gt,
                             const std::vector<int>& gt_sem, const LossConfig& cfg) const;

    struct NamedParam {
        std::string name;
        Tensor tensor;
    };
    const std::vector<NamedParam>& parameters() const { return params_; }
    Tensor param(const std::string& name) const;
    int64_t param_count() const;
    void zero_grad();

    void save_checkpoint(const std::string& path) const;
    static TryOnModel load_checkpoint(const std::string& path);

private:
    friend struct ModelBuilder;
    ModelConfig cfg_;
    std::vector<NamedParam> params_;

    struct Stage {
        layers::ResBlock block1, block2;
    };
    struct Encoder {
        layers::Conv stem;
        layers::Norm stem_norm;
        std::vector<Stage> stages;
    };
    struct Decoder {
        std::vector<Stage> stages; // residual up stages
        layers::ConvT final_up;
        layers::Conv head;
    };

    Encoder e_b_, e_f_;
    layers::Daf daf_;
    Decoder d_hm_, d_sm_;

    Tensor encode(const Encoder& e, const Tensor& x, std::vector<Tensor>& stage_outs) const;
    std::pair<Tensor, Tensor> fuse(const Tensor& f_b, const Tensor& f_f) const;
};

// Versioned binary container of named double arrays plus a JSON blob;
// write-then-read is bit-exact. Shared by model checkpoints and trainer
// state.
struct NamedArray {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

void write_array_file(const std::string& path, const std::string& meta_json,
                      const std::vector<NamedArray>& arrays);
std::pair<std::string, std::vector<NamedArray>> read_array_file(const std::string& path);

} // namespace tryon
