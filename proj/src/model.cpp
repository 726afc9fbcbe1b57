#include "tryon/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

using nlohmann::json;

namespace tryon {

FusionMode fusion_mode_from_string(const std::string& s) {
    if (s == "daf") return FusionMode::daf;
    if (s == "daf-simplified" || s == "daf_s") return FusionMode::daf_simplified;
    if (s == "add") return FusionMode::add;
    throw ConfigError("unknown fusion mode '" + s + "' (expected daf|daf-simplified|add)");
}

std::string to_string(FusionMode m) {
    switch (m) {
    case FusionMode::daf: return "daf";
    case FusionMode::daf_simplified: return "daf-simplified";
    case FusionMode::add: return "add";
    }
    return "?";
}

void ModelConfig::validate() const {
    if (encoder_channels.empty()) throw ConfigError("model: encoder_channels empty");
    if (input_size < 16) throw ConfigError("model: input_size must be >= 16");
    if (input_size % (1 << stages()) != 0)
        throw ConfigError("model: input_size must be divisible by 2^stages");
    if (bottleneck_size() < 4)
        throw ConfigError("model: bottleneck " + std::to_string(bottleneck_size()) +
                          " too small; need input_size / 2^stages >= 4");
    for (int c : encoder_channels) {
        if (c < 4) throw ConfigError("model: channel width must be >= 4");
        if (c >= 8 && c % 8 != 0)
            throw ConfigError("model: channel widths >= 8 must be multiples of 8 "
                              "(group-norm group size is min(8, C))");
    }
    if (num_heatmaps < 1) throw ConfigError("model: num_heatmaps must be >= 1");
    if (num_semantic_classes < 2) throw ConfigError("model: need >= 2 semantic classes");
}

std::string ModelConfig::to_json() const {
    json j{{"input_size", input_size},
           {"encoder_channels", encoder_channels},
           {"num_heatmaps", num_heatmaps},
           {"num_semantic_classes", num_semantic_classes},
           {"use_semantic", use_semantic},
           {"use_foreground", use_foreground},
           {"fusion", to_string(fusion)},
           {"seed", seed}};
    return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& s) {
    json j = json::parse(s);
    ModelConfig cfg;
    cfg.input_size = j.at("input_size").get<int>();
    cfg.encoder_channels = j.at("encoder_channels").get<std::vector<int>>();
    cfg.num_heatmaps = j.at("num_heatmaps").get<int>();
    cfg.num_semantic_classes = j.at("num_semantic_classes").get<int>();
    cfg.use_semantic = j.at("use_semantic").get<bool>();
    cfg.use_foreground = j.at("use_foreground").get<bool>();
    cfg.fusion = fusion_mode_from_string(j.at("fusion").get<std::string>());
    cfg.seed = j.at("seed").get<uint64_t>();
    return cfg;
}

namespace layers {

Tensor Conv::forward(const Tensor& x) const {
    Tensor y = conv2d(x, w, stride, pad);
    if (b.defined()) y = add(y, broadcast_to(b, y.shape()));
    return y;
}

Tensor ConvT::forward(const Tensor& x) const { return conv_transpose2d(x, w, stride, pad); }

Tensor Norm::forward(const Tensor& x) const { return group_norm(x, gamma, beta, groups); }

Tensor Linear::forward(const Tensor& x) const { return add(matmul(w, x), b); }

Tensor ResBlock::forward(const Tensor& x) const {
    Tensor h = up ? tconv1.forward(x) : conv1.forward(x);
    h = relu(norm1.forward(h));
    h = norm2.forward(conv2.forward(h));
    Tensor sc = x;
    if (has_shortcut) sc = sc_norm.forward(up ? sc_tconv.forward(x) : sc_conv.forward(x));
    return relu(add(h, sc));
}

} // namespace layers

namespace {

int norm_groups(int channels) {
    const int group_size = std::min(8, channels);
    return channels / group_size;
}

} // namespace

struct ModelBuilder {
    TryOnModel& m;
    Rng rng;

    ModelBuilder(TryOnModel& model, uint64_t seed) : m(model), rng(seed) {}

    Tensor param(const std::string& name, Shape shape, double stddev) {
        Tensor t = stddev > 0.0 ? Tensor::randn(shape, rng, stddev, true)
                                : Tensor::zeros(shape, true);
        m.params_.push_back({name, t});
        return t;
    }

    Tensor const_param(const std::string& name, Shape shape, double fill) {
        Tensor t = Tensor::full(std::move(shape), fill, true);
        m.params_.push_back({name, t});
        return t;
    }

    layers::Conv conv(const std::string& p, int ci, int co, int k, int stride, int pad,
                      bool bias) {
        layers::Conv c;
        c.w = param(p + ".w", {co, ci, k, k}, std::sqrt(2.0 / (ci * k * k)));
        if (bias) c.b = const_param(p + ".b", {co}, 0.0);
        c.stride = stride;
        c.pad = pad;
        return c;
    }

    layers::ConvT tconv(const std::string& p, int ci, int co, int k, int pad) {
        layers::ConvT c;
        c.w = param(p + ".w", {ci, co, k, k}, std::sqrt(2.0 / (ci * k * k)));
        c.stride = 2;
        c.pad = pad;
        return c;
    }

    layers::Norm norm(const std::string& p, int channels) {
        layers::Norm n;
        n.gamma = const_param(p + ".gamma", {channels}, 1.0);
        n.beta = const_param(p + ".beta", {channels}, 0.0);
        n.groups = norm_groups(channels);
        return n;
    }

    layers::Linear linear(const std::string& p, int in, int out) {
        layers::Linear l;
        l.w = param(p + ".w", {out, in}, std::sqrt(2.0 / in));
        l.b = const_param(p + ".b", {out}, 0.0);
        return l;
    }

    layers::ResBlock down_block(const std::string& p, int ci, int co, int stride) {
        layers::ResBlock b;
        b.conv1 = conv(p + ".conv1", ci, co, 3, stride, 1, false);
        b.norm1 = norm(p + ".norm1", co);
        b.conv2 = conv(p + ".conv2", co, co, 3, 1, 1, false);
        b.norm2 = norm(p + ".norm2", co);
        if (stride != 1 || ci != co) {
            b.has_shortcut = true;
            b.sc_conv = conv(p + ".sc", ci, co, 1, stride, 0, false);
            b.sc_norm = norm(p + ".sc_norm", co);
        }
        return b;
    }

    layers::ResBlock up_block(const std::string& p, int ci, int co) {
        layers::ResBlock b;
        b.up = true;
        b.tconv1.w = param(p + ".tconv1.w", {ci, co, 4, 4}, std::sqrt(2.0 / (ci * 16)));
        b.tconv1.stride = 2;
        b.tconv1.pad = 1;
        b.norm1 = norm(p + ".norm1", co);
        b.conv2 = conv(p + ".conv2", co, co, 3, 1, 1, false);
        b.norm2 = norm(p + ".norm2", co);
        b.has_shortcut = true;
        b.sc_tconv.w = param(p + ".sc.w", {ci, co, 2, 2}, std::sqrt(2.0 / (ci * 4)));
        b.sc_tconv.stride = 2;
        b.sc_tconv.pad = 0;
        b.sc_norm = norm(p + ".sc_norm", co);
        return b;
    }

    TryOnModel::Encoder encoder(const std::string& p, int in_ch) {
        const auto& ch = m.cfg_.encoder_channels;
        TryOnModel::Encoder e;
        e.stem = conv(p + ".stem", in_ch, ch[0], 3, 1, 1, false);
        e.stem_norm = norm(p + ".stem_norm", ch[0]);
        for (size_t i = 0; i < ch.size(); ++i) {
            const int ci = i == 0 ? ch[0] : ch[i - 1];
            const std::string sp = p + ".s" + std::to_string(i);
            TryOnModel::Stage st;
            st.block1 = down_block(sp + ".b1", ci, ch[i], 2);
            st.block2 = down_block(sp + ".b2", ch[i], ch[i], 1);
            e.stages.push_back(std::move(st));
        }
        return e;
    }

    TryOnModel::Decoder decoder(const std::string& p, int out_ch) {
        const auto& ch = m.cfg_.encoder_channels;
        const int n = static_cast<int>(ch.size());
        TryOnModel::Decoder d;
        for (int i = 0; i < n - 1; ++i) {
            const int ci = ch[static_cast<size_t>(n - 1 - i)];
            const int co = ch[static_cast<size_t>(n - 2 - i)];
            const std::string sp = p + ".s" + std::to_string(i);
            TryOnModel::Stage st;
            st.block1 = up_block(sp + ".b1", ci, co);
            st.block2 = down_block(sp + ".b2", co, co, 1);
            d.stages.push_back(std::move(st));
        }
        d.final_up = tconv(p + ".final_up", ch[0], ch[0], 4, 1);
        d.head = conv(p + ".head", ch[0], out_ch, 3, 1, 1, true);
        return d;
    }
};

TryOnModel::TryOnModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    ModelBuilder b(*this, mix_seed(cfg_.seed, 0xb0d7));
    e_b_ = b.encoder("e_b", 3);
    if (cfg_.use_foreground) {
        e_f_ = b.encoder("e_f", 4); // image + mask
        const int c = cfg_.encoder_channels.back();
        if (cfg_.fusion == FusionMode::daf) {
            const int hidden = std::max(1, c / 8);
            daf_.mlp1 = b.linear("daf.mlp1", c, hidden);
            daf_.mlp2 = b.linear("daf.mlp2", hidden, c);
            daf_.spatial = b.conv("daf.spatial", 2, 1, 7, 1, 3, true);
        } else if (cfg_.fusion == FusionMode::daf_simplified) {
            daf_.simplified = b.conv("daf.simplified", c, 1, 3, 1, 1, true);
        }
    }
    d_hm_ = b.decoder("d_hm", cfg_.num_heatmaps);
    if (cfg_.use_semantic) d_sm_ = b.decoder("d_sm", cfg_.num_semantic_classes);
}

Tensor TryOnModel::param(const std::string& name) const {
    for (const auto& p : params_)
        if (p.name == name) return p.tensor;
    throw Error("unknown parameter '" + name + "'");
}

int64_t TryOnModel::param_count() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p.tensor.size();
    return n;
}

void TryOnModel::zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
}

Tensor TryOnModel::encode(const Encoder& e, const Tensor& x,
                          std::vector<Tensor>& stage_outs) const {
    Tensor h = relu(e.stem_norm.forward(e.stem.forward(x)));
    for (const Stage& st : e.stages) {
        h = st.block2.forward(st.block1.forward(h));
        stage_outs.push_back(h);
    }
    return h;
}

Tensor fuse_blend(const Tensor& m_fuse, const Tensor& f_b, const Tensor& f_f) {
    Tensor inv = sub(Tensor::full(f_b.shape(), 1.0), m_fuse);
    return add(mul(m_fuse, f_b), mul(inv, f_f));
}

std::pair<Tensor, Tensor> TryOnModel::fuse(const Tensor& f_b, const Tensor& f_f) const {
    if (!cfg_.use_foreground) {
        // rows 1-2 ablation: no foreground branch, decoder sees F_b; the
        // 0.5 map is a placeholder so M_fuse stays inside (0,1)
        return {Tensor::full(f_b.shape(), 0.5), f_b};
    }
    Tensor s = add(f_b, f_f);
    if (cfg_.fusion == FusionMode::add)
        return {Tensor::full(f_b.shape(), 0.5), s};

    Tensor pre;
    if (cfg_.fusion == FusionMode::daf) {
        auto mlp = [&](const Tensor& v) {
            return daf_.mlp2.forward(relu(daf_.mlp1.forward(v)));
        };
        Tensor ca = sigmoid(add(mlp(global_avg_pool(s)), mlp(global_max_pool(s))));
        Tensor refined = mul(s, broadcast_to(ca, s.shape()));
        Tensor sp = concat_channels({channel_mean(refined), channel_max(refined)});
        pre = daf_.spatial.forward(sp);
    } else {
        pre = daf_.simplified.forward(s);
    }
    Tensor m = broadcast_to(sigmoid(pre), f_b.shape());
    return {m, fuse_blend(m, f_b, f_f)};
}

ForwardOutput TryOnModel::forward(const Tensor& bg, const Tensor& fg,
                                  const Tensor& fg_mask) const {
    const int s = cfg_.input_size;
    if (bg.shape() != Shape{3, s, s})
        throw ShapeError("forward: background must be [3," + std::to_string(s) + "," +
                         std::to_string(s) + "], got " + shape_str(bg.shape()));
    if (cfg_.use_foreground) {
        if (fg.shape() != Shape{3, s, s}) throw ShapeError("forward: bad foreground shape");
        if (fg_mask.shape() != Shape{1, s, s}) throw ShapeError("forward: bad mask shape");
    }

    ForwardOutput out;
    std::vector<Tensor> enc_b;
    out.f_b = encode(e_b_, bg, enc_b);
    if (cfg_.use_foreground) {
        std::vector<Tensor> enc_f;
        out.f_f = encode(e_f_, concat_channels({fg, fg_mask}), enc_f);
    } else {
        out.f_f = Tensor::zeros(out.f_b.shape());
    }
    auto [m_fuse, f_fuse] = fuse(out.f_b, out.f_f);
    out.m_fuse = m_fuse;
    out.f_fuse = f_fuse;

    const int n = cfg_.stages();
    // Decoder stage i pairs with encoder stage (n-2-i); only the last
    // three encoder stages before the bottleneck feed skips. At the desk
    // scale (n = 4) that is   d0 <- s2, d1 <- s1, d2 <- s0.
    auto run_decoder = [&](const Decoder& d, const Tensor& input,
                           const std::vector<Tensor>* sm_feats,
                           std::vector<Tensor>* collect) {
        Tensor h = input;
        for (size_t i = 0; i < d.stages.size(); ++i) {
            h = d.stages[i].block2.forward(d.stages[i].block1.forward(h));
            const int e = n - 2 - static_cast<int>(i);
            if (static_cast<int>(i) <= 2 && e >= 0) h = add(h, enc_b[static_cast<size_t>(e)]);
            if (sm_feats) h = add(h, (*sm_feats)[i]);
            if (collect) collect->push_back(h);
        }
        h = relu(d.final_up.forward(h));
        if (sm_feats) h = add(h, sm_feats->back());
        if (collect) collect->push_back(h);
        return d.head.forward(h);
    };

    std::vector<Tensor> sm_feats;
    if (cfg_.use_semantic)
        out.semantic_logits = run_decoder(d_sm_, out.f_b, nullptr, &sm_feats);
    out.heatmaps = run_decoder(d_hm_, out.f_fuse, cfg_.use_semantic ? &sm_feats : nullptr,
                               nullptr);
    return out;
}

namespace {

// Pixel-wise cross-entropy (mean over locations), computed through a
// detached per-pixel max: logsumexp(x) = m + log(sum exp(x - m)) holds for
// any constant m, and the gradient is softmax(x) either way.
Tensor semantic_ce(const Tensor& logits, const std::vector<int>& labels, int classes) {
    const int c = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
    const size_t plane = static_cast<size_t>(h) * w;
    if (c != classes) throw ShapeError("semantic_ce: logit channels != classes");
    if (labels.size() != plane) throw DataError("semantic_ce: label count mismatch");
    for (int l : labels)
        if (l < 0 || l >= classes)
            throw DataError("semantic_ce: class index " + std::to_string(l) +
                            " outside [0," + std::to_string(classes - 1) + "]");

    const auto v = logits.values();
    std::vector<double> mx(plane, -1e308);
    for (int ch = 0; ch < c; ++ch)
        for (size_t i = 0; i < plane; ++i)
            mx[i] = std::max(mx[i], v[ch * plane + i]);
    Tensor mx_const = Tensor::from_values({1, h, w}, std::move(mx));

    Tensor sh = sub(logits, broadcast_to(mx_const, logits.shape()));
    Tensor e = exp_elem(sh);
    Tensor ones = Tensor::full({1, c, 1, 1}, 1.0); // constant channel-sum kernel
    Tensor se = conv2d(e, ones, 1, 0);             // [1,h,w]
    Tensor logp = sub(sh, broadcast_to(log_elem(se), logits.shape()));

    std::vector<double> onehot(static_cast<size_t>(c) * plane, 0.0);
    for (size_t i = 0; i < plane; ++i)
        onehot[static_cast<size_t>(labels[i]) * plane + i] = 1.0;
    Tensor picked = mul(logp, Tensor::from_values(logits.shape(), std::move(onehot)));
    return scalar_mul(sum_all(picked), -1.0 / static_cast<double>(plane));
}

} // namespace

LossBreakdown TryOnModel::total_loss(const ForwardOutput& out, const HeatmapSet& gt,
                                     const std::vector<int>& gt_sem,
                                     const LossConfig& cfg) const {
    HeatmapSet set = gt;
    set.pred = out.heatmaps;
    LossBreakdown lb;
    lb.hm = heatmap_loss(set, cfg);
    lb.total = lb.hm;
    if (cfg_.use_semantic) {
        if (!out.semantic_logits.defined())
            throw Error("total_loss: semantic decoder output missing");
        if (cfg.lambda > 0.0) {
            Tensor l_sm = semantic_ce(out.semantic_logits, gt_sem, cfg_.num_semantic_classes);
            lb.sm_value = l_sm.scalar_value();
            lb.has_sm = true;
            lb.total = add(lb.hm, scalar_mul(l_sm, cfg.lambda));
        } else {
            // lambda = 0 reproduces Ours(w/o sm); value reported only
            NoGradGuard guard;
            Tensor l_sm = semantic_ce(out.semantic_logits.detached(), gt_sem,
                                      cfg_.num_semantic_classes);
            lb.sm_value = l_sm.scalar_value();
            lb.has_sm = true;
        }
    }
    return lb;
}

// ---- binary array container ----

namespace {

constexpr char kMagic[4] = {'T', 'R', 'Y', 'N'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<char*>(&v), 4); }
void put_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<char*>(&v), 8); }

uint32_t get_u32(std::istream& is) {
    uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
uint64_t get_u64(std::istream& is) {
    uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}

void assert_little_endian() {
    const uint32_t probe = 1;
    if (*reinterpret_cast<const uint8_t*>(&probe) != 1)
        throw IoError("array container requires a little-endian host");
}

} // namespace

void write_array_file(const std::string& path, const std::string& meta_json,
                      const std::vector<NamedArray>& arrays) {
    assert_little_endian();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    os.write(kMagic, 4);
    put_u32(os, kVersion);
    put_u64(os, meta_json.size());
    os.write(meta_json.data(), static_cast<std::streamsize>(meta_json.size()));
    put_u64(os, arrays.size());
    for (const NamedArray& a : arrays) {
        put_u32(os, static_cast<uint32_t>(a.name.size()));
        os.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
        put_u32(os, static_cast<uint32_t>(a.shape.size()));
        for (int d : a.shape) put_u32(os, static_cast<uint32_t>(d));
        put_u64(os, a.values.size());
        os.write(reinterpret_cast<const char*>(a.values.data()),
                 static_cast<std::streamsize>(a.values.size() * sizeof(double)));
    }
    if (!os.good()) throw IoError("short write on " + path);
}

std::pair<std::string, std::vector<NamedArray>> read_array_file(const std::string& path) {
    assert_little_endian();
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for reading: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is.good() || std::memcmp(magic, kMagic, 4) != 0)
        throw IoError("not an array container: " + path);
    if (get_u32(is) != kVersion) throw IoError("unsupported container version in " + path);
    const uint64_t meta_len = get_u64(is);
    std::string meta(meta_len, '\0');
    is.read(meta.data(), static_cast<std::streamsize>(meta_len));
    const uint64_t count = get_u64(is);
    std::vector<NamedArray> arrays;
    arrays.reserve(count);
    for (uint64_t i = 0; i < count; ++i) {
        NamedArray a;
        const uint32_t name_len = get_u32(is);
        a.name.resize(name_len);
        is.read(a.name.data(), name_len);
        const uint32_t ndim = get_u32(is);
        a.shape.resize(ndim);
        for (uint32_t d = 0; d < ndim; ++d) a.shape[d] = static_cast<int>(get_u32(is));
        const uint64_t n = get_u64(is);
        if (n != static_cast<uint64_t>(numel(a.shape)))
            throw IoError("corrupt array '" + a.name + "' in " + path);
        a.values.resize(n);
        is.read(reinterpret_cast<char*>(a.values.data()),
                static_cast<std::streamsize>(n * sizeof(double)));
        if (!is.good()) throw IoError("truncated container: " + path);
        arrays.push_back(std::move(a));
    }
    return {std::move(meta), std::move(arrays)};
}

void TryOnModel::save_checkpoint(const std::string& path) const {
    std::vector<NamedArray> arrays;
    arrays.reserve(params_.size());
    for (const auto& p : params_) {
        NamedArray a;
        a.name = "param/" + p.name;
        a.shape = p.tensor.shape();
        a.values.assign(p.tensor.values().begin(), p.tensor.values().end());
        arrays.push_back(std::move(a));
    }
    write_array_file(path, cfg_.to_json(), arrays);
}

TryOnModel TryOnModel::load_checkpoint(const std::string& path) {
    auto [meta, arrays] = read_array_file(path);
    TryOnModel model(ModelConfig::from_json(meta));
    size_t loaded = 0;
    for (auto& p : model.params_) {
        const std::string key = "param/" + p.name;
        bool found = false;
        for (const NamedArray& a : arrays) {
            if (a.name != key) continue;
            if (a.shape != p.tensor.shape())
                throw IoError("checkpoint shape mismatch for " + p.name);
            std::copy(a.values.begin(), a.values.end(), p.tensor.mutable_values().begin());
            found = true;
            ++loaded;
            break;
        }
        if (!found) throw IoError("checkpoint missing parameter " + p.name);
    }
    (void)loaded;
    return model;
}

} // namespace tryon
