#include "tryon/tensor.hpp"

#include "tryon/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace tryon {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

const char* op_name(Op op) {
    switch (op) {
    case Op::leaf: return "leaf";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::scalar_mul: return "scalar_mul";
    case Op::matmul: return "matmul";
    case Op::conv2d: return "conv2d";
    case Op::conv_transpose2d: return "conv_transpose2d";
    case Op::relu: return "relu";
    case Op::sigmoid: return "sigmoid";
    case Op::softmax_flat: return "softmax_flat";
    case Op::log: return "log";
    case Op::exp: return "exp";
    case Op::pow_elem: return "pow_elem";
    case Op::abs: return "abs";
    case Op::mean_all: return "mean_all";
    case Op::sum_all: return "sum_all";
    case Op::concat_channels: return "concat_channels";
    case Op::max_pool2d: return "max_pool2d";
    case Op::global_avg_pool: return "global_avg_pool";
    case Op::global_max_pool: return "global_max_pool";
    case Op::broadcast: return "broadcast";
    case Op::channel_mean: return "channel_mean";
    case Op::channel_max: return "channel_max";
    case Op::group_norm: return "group_norm";
    }
    return "?";
}

namespace {

thread_local bool t_grad_enabled = true;

void validate_shape(const Shape& s) {
    for (int d : s)
        if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(s));
}

void check_finite(const Node& n) {
    for (size_t i = 0; i < n.values.size(); ++i) {
        if (!std::isfinite(n.values[i]))
            throw NumericError(std::string("non-finite output of ") + op_name(n.op) +
                               " at index " + std::to_string(i));
    }
}

NodePtr make_leaf(Shape shape, std::vector<double> values, bool requires_grad) {
    validate_shape(shape);
    if (numel(shape) != static_cast<int64_t>(values.size()))
        throw ShapeError("value count " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    n->requires_grad = requires_grad;
    return n;
}

// Builds the result node for an op: tracks inputs only when grad flow is
// both possible and enabled, so inference graphs collapse to leaves.
NodePtr make_result(Op op, Shape shape, std::vector<double> values,
                    std::initializer_list<Tensor> inputs) {
    auto n = std::make_shared<Node>();
    n->op = op;
    n->shape = std::move(shape);
    n->values = std::move(values);
    bool track = false;
    if (t_grad_enabled)
        for (const Tensor& t : inputs)
            if (t.requires_grad()) track = true;
    if (track) {
        n->requires_grad = true;
        for (const Tensor& t : inputs) n->inputs.push_back(t.node());
    } else {
        n->op = Op::leaf; // untracked results behave like constants
    }
    check_finite(*n);
    return n;
}

void ensure_grad(Node& n) {
    if (n.grad.empty()) n.grad.assign(n.values.size(), 0.0);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(what) + ": operand shapes differ, " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

void require_defined(const Tensor& t, const char* what) {
    if (!t.defined()) throw Error(std::string(what) + ": undefined tensor");
}

struct Chw {
    int c, h, w;
};

Chw as_chw(const Tensor& t, const char* what) {
    if (t.shape().size() != 3)
        throw ShapeError(std::string(what) + ": expected [C,H,W], got " + shape_str(t.shape()));
    return {t.dim(0), t.dim(1), t.dim(2)};
}

} // namespace

// ---- Tensor ----

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto n = numel(shape);
    return Tensor(make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    auto n = numel(shape);
    return Tensor(make_leaf(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values, bool requires_grad) {
    return Tensor(make_leaf(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value) { return from_values({1}, {value}); }

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
    auto n = numel(shape);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal() * stddev;
    return Tensor(make_leaf(std::move(shape), std::move(v), requires_grad));
}

const Shape& Tensor::shape() const {
    require_defined(*this, "shape");
    return node_->shape;
}

int Tensor::dim(int i) const { return shape().at(static_cast<size_t>(i)); }

int64_t Tensor::size() const {
    require_defined(*this, "size");
    return node_->size();
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

std::span<const double> Tensor::values() const {
    require_defined(*this, "values");
    return {node_->values.data(), node_->values.size()};
}

std::span<double> Tensor::mutable_values() {
    require_defined(*this, "mutable_values");
    return {node_->values.data(), node_->values.size()};
}

double Tensor::value_at(int64_t i) const { return values()[static_cast<size_t>(i)]; }

double Tensor::scalar_value() const {
    if (size() != 1) throw ShapeError("scalar_value on tensor of shape " + shape_str(shape()));
    return node_->values[0];
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
    require_defined(*this, "grad");
    if (node_->grad.empty()) throw Error("grad accessed before backward populated it");
    return {node_->grad.data(), node_->grad.size()};
}

void Tensor::zero_grad() {
    require_defined(*this, "zero_grad");
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detached(bool requires_grad) const {
    require_defined(*this, "detached");
    return from_values(node_->shape, node_->values, requires_grad);
}

NoGradGuard::NoGradGuard() : prev_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = prev_; }
bool grad_enabled() { return t_grad_enabled; }

// ---- elementwise binary ----

namespace {

template <typename F>
Tensor binary_elemwise(Op op, const Tensor& a, const Tensor& b, F&& f, const char* what) {
    require_defined(a, what);
    require_defined(b, what);
    require_same_shape(a, b, what);
    const auto va = a.values(), vb = b.values();
    std::vector<double> out(va.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = f(va[i], vb[i]);
    return Tensor(make_result(op, a.shape(), std::move(out), {a, b}));
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_elemwise(Op::add, a, b, [](double x, double y) { return x + y; }, "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_elemwise(Op::sub, a, b, [](double x, double y) { return x - y; }, "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_elemwise(Op::mul, a, b, [](double x, double y) { return x * y; }, "mul");
}

Tensor scalar_mul(const Tensor& a, double c) {
    require_defined(a, "scalar_mul");
    const auto va = a.values();
    std::vector<double> out(va.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = va[i] * c;
    auto n = make_result(Op::scalar_mul, a.shape(), std::move(out), {a});
    n->s0 = c;
    return Tensor(n);
}

Tensor add_const(const Tensor& x, double c) {
    return add(x, broadcast_to(Tensor::scalar(c), x.shape()));
}

// ---- matmul ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_defined(a, "matmul");
    require_defined(b, "matmul");
    if (a.shape().size() != 2) throw ShapeError("matmul: lhs must be 2-D");
    const bool vec = b.shape().size() == 1;
    if (!vec && b.shape().size() != 2) throw ShapeError("matmul: rhs must be 1-D or 2-D");
    const int m = a.dim(0), k = a.dim(1);
    const int k2 = b.dim(0), n = vec ? 1 : b.dim(1);
    if (k != k2)
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    std::vector<double> out(static_cast<size_t>(m) * n);
    kernels::matmul(m, k, n, a.values().data(), b.values().data(), out.data());
    Shape os = vec ? Shape{m} : Shape{m, n};
    return Tensor(make_result(Op::matmul, std::move(os), std::move(out), {a, b}));
}

// ---- convolutions ----

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
    require_defined(x, "conv2d");
    require_defined(w, "conv2d");
    const Chw in = as_chw(x, "conv2d input");
    if (w.shape().size() != 4)
        throw ShapeError("conv2d: weight must be [Co,Ci,k,k], got " + shape_str(w.shape()));
    if (w.dim(2) != w.dim(3)) throw ShapeError("conv2d: kernel must be square");
    const int k = w.dim(2);
    if (k < 1) throw ShapeError("conv2d: kernel must be >= 1");
    if (stride != 1 && stride != 2) throw ShapeError("conv2d: stride must be 1 or 2");
    if (pad < 0) throw ShapeError("conv2d: negative padding");
    if (w.dim(1) != in.c)
        throw ShapeError("conv2d: weight expects " + std::to_string(w.dim(1)) +
                         " input channels, input has " + std::to_string(in.c));
    kernels::Conv2dDims d{in.c, w.dim(0), in.h, in.w, k, stride, pad};
    if (d.out_h() <= 0 || d.out_w() <= 0)
        throw ShapeError("conv2d: output would be empty for input " + shape_str(x.shape()));
    std::vector<double> out(static_cast<size_t>(d.out_channels) * d.out_h() * d.out_w());
    kernels::conv2d_forward(d, x.values().data(), w.values().data(), out.data());
    auto node = make_result(Op::conv2d, {d.out_channels, d.out_h(), d.out_w()}, std::move(out),
                            {x, w});
    node->a0 = stride;
    node->a1 = pad;
    return Tensor(node);
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& w, int stride, int pad) {
    require_defined(x, "conv_transpose2d");
    require_defined(w, "conv_transpose2d");
    const Chw in = as_chw(x, "conv_transpose2d input");
    if (w.shape().size() != 4)
        throw ShapeError("conv_transpose2d: weight must be [Ci,Co,k,k], got " +
                         shape_str(w.shape()));
    if (w.dim(2) != w.dim(3)) throw ShapeError("conv_transpose2d: kernel must be square");
    if (stride != 2) throw ShapeError("conv_transpose2d: stride must be 2");
    if (w.dim(0) != in.c)
        throw ShapeError("conv_transpose2d: weight expects " + std::to_string(w.dim(0)) +
                         " input channels, input has " + std::to_string(in.c));
    kernels::ConvT2dDims d{in.c, w.dim(1), in.h, in.w, w.dim(2), stride, pad};
    if (d.out_h() <= 0 || d.out_w() <= 0)
        throw ShapeError("conv_transpose2d: output would be empty");
    std::vector<double> out(static_cast<size_t>(d.out_channels) * d.out_h() * d.out_w());
    kernels::convt2d_forward(d, x.values().data(), w.values().data(), out.data());
    auto node = make_result(Op::conv_transpose2d, {d.out_channels, d.out_h(), d.out_w()},
                            std::move(out), {x, w});
    node->a0 = stride;
    node->a1 = pad;
    return Tensor(node);
}

// ---- elementwise unary ----

Tensor relu(const Tensor& x) {
    require_defined(x, "relu");
    const auto v = x.values();
    std::vector<double> out(v.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = v[i] > 0.0 ? v[i] : 0.0;
    return Tensor(make_result(Op::relu, x.shape(), std::move(out), {x}));
}

Tensor sigmoid(const Tensor& x) {
    require_defined(x, "sigmoid");
    const auto v = x.values();
    std::vector<double> out(v.size());
    for (size_t i = 0; i < out.size(); ++i) {
        const double z = v[i];
        out[i] = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z))
                          : std::exp(z) / (1.0 + std::exp(z));
    }
    return Tensor(make_result(Op::sigmoid, x.shape(), std::move(out), {x}));
}

Tensor softmax_flat(const Tensor& x) {
    require_defined(x, "softmax_flat");
    const auto v = x.values();
    if (v.empty()) throw ShapeError("softmax_flat: empty tensor");
    double mx = v[0];
    for (double z : v) mx = std::max(mx, z);
    std::vector<double> out(v.size());
    double denom = 0.0;
    for (size_t i = 0; i < v.size(); ++i) {
        out[i] = std::exp(v[i] - mx);
        denom += out[i];
    }
    const double inv = 1.0 / denom;
    for (auto& z : out) z *= inv;
    return Tensor(make_result(Op::softmax_flat, x.shape(), std::move(out), {x}));
}

Tensor log_elem(const Tensor& x) {
    require_defined(x, "log");
    const auto v = x.values();
    std::vector<double> out(v.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::log(v[i]);
    return Tensor(make_result(Op::log, x.shape(), std::move(out), {x}));
}

Tensor exp_elem(const Tensor& x) {
    require_defined(x, "exp");
    const auto v = x.values();
    std::vector<double> out(v.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(v[i]);
    return Tensor(make_result(Op::exp, x.shape(), std::move(out), {x}));
}

Tensor pow_elem(const Tensor& base, const Tensor& exponent) {
    require_defined(base, "pow_elem");
    require_defined(exponent, "pow_elem");
    require_same_shape(base, exponent, "pow_elem");
    if (exponent.requires_grad())
        throw Error("pow_elem: exponents are constants, gradient into the exponent is "
                    "not defined");
    const auto vb = base.values(), ve = exponent.values();
    std::vector<double> out(vb.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::pow(vb[i], ve[i]);
    return Tensor(make_result(Op::pow_elem, base.shape(), std::move(out), {base, exponent}));
}

Tensor abs_elem(const Tensor& x) {
    require_defined(x, "abs");
    const auto v = x.values();
    std::vector<double> out(v.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::abs(v[i]);
    return Tensor(make_result(Op::abs, x.shape(), std::move(out), {x}));
}

// ---- reductions ----

Tensor mean_all(const Tensor& x) {
    require_defined(x, "mean_all");
    const double s = kernels::block_sum(x.values().data(), x.values().size());
    return Tensor(
        make_result(Op::mean_all, {1}, {s / static_cast<double>(x.size())}, {x}));
}

Tensor sum_all(const Tensor& x) {
    require_defined(x, "sum_all");
    const double s = kernels::block_sum(x.values().data(), x.values().size());
    return Tensor(make_result(Op::sum_all, {1}, {s}, {x}));
}

// ---- structural ops ----

Tensor concat_channels(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw ShapeError("concat_channels: no inputs");
    const Chw first = as_chw(xs[0], "concat_channels");
    int ctotal = 0;
    for (const auto& t : xs) {
        const Chw c = as_chw(t, "concat_channels");
        if (c.h != first.h || c.w != first.w)
            throw ShapeError("concat_channels: spatial sizes differ");
        ctotal += c.c;
    }
    std::vector<double> out;
    out.reserve(static_cast<size_t>(ctotal) * first.h * first.w);
    for (const auto& t : xs) out.insert(out.end(), t.values().begin(), t.values().end());
    auto n = std::make_shared<Node>();
    n->op = Op::concat_channels;
    n->shape = {ctotal, first.h, first.w};
    n->values = std::move(out);
    bool track = false;
    if (t_grad_enabled)
        for (const auto& t : xs)
            if (t.requires_grad()) track = true;
    if (track) {
        n->requires_grad = true;
        for (const auto& t : xs) n->inputs.push_back(t.node());
    } else {
        n->op = Op::leaf;
    }
    check_finite(*n);
    return Tensor(n);
}

Tensor max_pool2d(const Tensor& x, int kernel, int stride) {
    require_defined(x, "max_pool2d");
    const Chw in = as_chw(x, "max_pool2d");
    if (kernel < 1) throw ShapeError("max_pool2d: kernel must be >= 1");
    if (stride != 1 && stride != 2) throw ShapeError("max_pool2d: stride must be 1 or 2");
    kernels::Pool2dDims d{in.c, in.h, in.w, kernel, stride};
    if (d.out_h() <= 0 || d.out_w() <= 0) throw ShapeError("max_pool2d: output would be empty");
    const size_t n_out = static_cast<size_t>(in.c) * d.out_h() * d.out_w();
    std::vector<double> out(n_out);
    std::vector<int64_t> argmax(n_out);
    kernels::maxpool2d_forward(d, x.values().data(), out.data(), argmax.data());
    auto node = make_result(Op::max_pool2d, {in.c, d.out_h(), d.out_w()}, std::move(out), {x});
    node->a0 = kernel;
    node->a1 = stride;
    node->saved_idx = std::move(argmax);
    return Tensor(node);
}

Tensor global_avg_pool(const Tensor& x) {
    const Chw in = as_chw(x, "global_avg_pool");
    const auto v = x.values();
    const size_t plane = static_cast<size_t>(in.h) * in.w;
    std::vector<double> out(in.c);
    for (int c = 0; c < in.c; ++c) {
        out[c] = kernels::block_sum(v.data() + c * plane, plane) / static_cast<double>(plane);
    }
    return Tensor(make_result(Op::global_avg_pool, {in.c}, std::move(out), {x}));
}

Tensor global_max_pool(const Tensor& x) {
    const Chw in = as_chw(x, "global_max_pool");
    const auto v = x.values();
    const size_t plane = static_cast<size_t>(in.h) * in.w;
    std::vector<double> out(in.c);
    std::vector<int64_t> argmax(in.c);
    for (int c = 0; c < in.c; ++c) {
        size_t best = c * plane;
        for (size_t i = c * plane + 1; i < (c + 1) * plane; ++i)
            if (v[i] > v[best]) best = i;
        out[c] = v[best];
        argmax[c] = static_cast<int64_t>(best);
    }
    auto node = make_result(Op::global_max_pool, {in.c}, std::move(out), {x});
    node->saved_idx = std::move(argmax);
    return Tensor(node);
}

Tensor broadcast_to(const Tensor& x, const Shape& target) {
    require_defined(x, "broadcast");
    validate_shape(target);
    const Shape& src = x.shape();
    const auto v = x.values();
    const int64_t n_target = numel(target);
    std::vector<double> out(static_cast<size_t>(n_target));
    if (src == target) {
        std::copy(v.begin(), v.end(), out.begin());
    } else if (x.size() == 1) {
        std::fill(out.begin(), out.end(), v[0]);
    } else if (src.size() == 1 && target.size() == 3 && src[0] == target[0]) {
        // [C] -> [C,H,W]
        const size_t plane = static_cast<size_t>(target[1]) * target[2];
        for (int c = 0; c < target[0]; ++c)
            std::fill(out.begin() + c * plane, out.begin() + (c + 1) * plane, v[c]);
    } else if (src.size() == 3 && target.size() == 3 && src[0] == 1 && src[1] == target[1] &&
               src[2] == target[2]) {
        // [1,H,W] -> [C,H,W]
        const size_t plane = static_cast<size_t>(target[1]) * target[2];
        for (int c = 0; c < target[0]; ++c)
            std::copy(v.begin(), v.end(), out.begin() + c * plane);
    } else {
        throw ShapeError("broadcast: unsupported expansion " + shape_str(src) + " -> " +
                         shape_str(target));
    }
    return Tensor(make_result(Op::broadcast, target, std::move(out), {x}));
}

Tensor channel_mean(const Tensor& x) {
    const Chw in = as_chw(x, "channel_mean");
    const auto v = x.values();
    const size_t plane = static_cast<size_t>(in.h) * in.w;
    std::vector<double> out(plane, 0.0);
    for (int c = 0; c < in.c; ++c)
        for (size_t i = 0; i < plane; ++i) out[i] += v[c * plane + i];
    const double inv = 1.0 / in.c;
    for (auto& z : out) z *= inv;
    return Tensor(make_result(Op::channel_mean, {1, in.h, in.w}, std::move(out), {x}));
}

Tensor channel_max(const Tensor& x) {
    const Chw in = as_chw(x, "channel_max");
    const auto v = x.values();
    const size_t plane = static_cast<size_t>(in.h) * in.w;
    std::vector<double> out(plane);
    std::vector<int64_t> argmax(plane);
    for (size_t i = 0; i < plane; ++i) {
        int best = 0;
        double bv = v[i];
        for (int c = 1; c < in.c; ++c) {
            const double z = v[c * plane + i];
            if (z > bv) {
                bv = z;
                best = c;
            }
        }
        out[i] = bv;
        argmax[i] = best;
    }
    auto node = make_result(Op::channel_max, {1, in.h, in.w}, std::move(out), {x});
    node->saved_idx = std::move(argmax);
    return Tensor(node);
}

Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups,
                  double eps) {
    const Chw in = as_chw(x, "group_norm");
    if (groups < 1 || in.c % groups != 0)
        throw ShapeError("group_norm: channels " + std::to_string(in.c) +
                         " not divisible into " + std::to_string(groups) + " groups");
    if (gamma.shape() != Shape{in.c} || beta.shape() != Shape{in.c})
        throw ShapeError("group_norm: gamma/beta must be [C]");
    const auto v = x.values();
    const auto vg = gamma.values();
    const auto vb = beta.values();
    const size_t plane = static_cast<size_t>(in.h) * in.w;
    const int ch_per_group = in.c / groups;
    const size_t m = ch_per_group * plane;
    std::vector<double> xhat(v.size());
    std::vector<double> istd(groups);
    std::vector<double> out(v.size());
    for (int g = 0; g < groups; ++g) {
        const size_t base = static_cast<size_t>(g) * m;
        double mean = kernels::block_sum(v.data() + base, m) / static_cast<double>(m);
        double var = 0.0;
        for (size_t i = base; i < base + m; ++i) {
            const double d = v[i] - mean;
            var += d * d;
        }
        var /= static_cast<double>(m);
        const double is = 1.0 / std::sqrt(var + eps);
        istd[g] = is;
        for (size_t i = base; i < base + m; ++i) xhat[i] = (v[i] - mean) * is;
    }
    for (int c = 0; c < in.c; ++c)
        for (size_t i = 0; i < plane; ++i)
            out[c * plane + i] = vg[c] * xhat[c * plane + i] + vb[c];
    auto node = make_result(Op::group_norm, x.shape(), std::move(out), {x, gamma, beta});
    node->a0 = groups;
    node->s0 = eps;
    node->saved = std::move(xhat);
    node->saved2 = std::move(istd);
    return Tensor(node);
}

// ---- backward ----

namespace {

void accumulate(Node& dst, const std::vector<double>& g) {
    ensure_grad(dst);
    for (size_t i = 0; i < g.size(); ++i) dst.grad[i] += g[i];
}

// VJP for one node: distributes node.grad into its inputs' grads.
void backward_node(Node& n) {
    const std::vector<double>& g = n.grad;
    auto want = [&](size_t i) { return n.inputs[i]->requires_grad; };
    auto gin = [&](size_t i) -> Node& { return *n.inputs[i]; };

    switch (n.op) {
    case Op::leaf: return;
    case Op::add: {
        for (size_t k = 0; k < 2; ++k)
            if (want(k)) accumulate(gin(k), g);
        return;
    }
    case Op::sub: {
        if (want(0)) accumulate(gin(0), g);
        if (want(1)) {
            Node& b = gin(1);
            ensure_grad(b);
            for (size_t i = 0; i < g.size(); ++i) b.grad[i] -= g[i];
        }
        return;
    }
    case Op::mul: {
        if (want(0)) {
            Node& a = gin(0);
            ensure_grad(a);
            const auto& vb = n.inputs[1]->values;
            for (size_t i = 0; i < g.size(); ++i) a.grad[i] += g[i] * vb[i];
        }
        if (want(1)) {
            Node& b = gin(1);
            ensure_grad(b);
            const auto& va = n.inputs[0]->values;
            for (size_t i = 0; i < g.size(); ++i) b.grad[i] += g[i] * va[i];
        }
        return;
    }
    case Op::scalar_mul: {
        if (want(0)) {
            Node& a = gin(0);
            ensure_grad(a);
            for (size_t i = 0; i < g.size(); ++i) a.grad[i] += g[i] * n.s0;
        }
        return;
    }
    case Op::matmul: {
        Node& a = gin(0);
        Node& b = gin(1);
        const int m = a.shape[0], k = a.shape[1];
        const int nn = b.shape.size() == 1 ? 1 : b.shape[1];
        if (want(0)) {
            ensure_grad(a);
            kernels::matmul_grad_a(m, k, nn, g.data(), b.values.data(), a.grad.data());
        }
        if (want(1)) {
            ensure_grad(b);
            kernels::matmul_grad_b(m, k, nn, g.data(), a.values.data(), b.grad.data());
        }
        return;
    }
    case Op::conv2d: {
        Node& x = gin(0);
        Node& w = gin(1);
        kernels::Conv2dDims d{x.shape[0], w.shape[0], x.shape[1], x.shape[2],
                              w.shape[2],  n.a0,       n.a1};
        if (want(0)) {
            ensure_grad(x);
            kernels::conv2d_grad_input(d, g.data(), w.values.data(), x.grad.data());
        }
        if (want(1)) {
            ensure_grad(w);
            kernels::conv2d_grad_weight(d, g.data(), x.values.data(), w.grad.data());
        }
        return;
    }
    case Op::conv_transpose2d: {
        Node& x = gin(0);
        Node& w = gin(1);
        kernels::ConvT2dDims d{x.shape[0], w.shape[1], x.shape[1], x.shape[2],
                               w.shape[2], n.a0,       n.a1};
        if (want(0)) {
            ensure_grad(x);
            kernels::convt2d_grad_input(d, g.data(), w.values.data(), x.grad.data());
        }
        if (want(1)) {
            ensure_grad(w);
            kernels::convt2d_grad_weight(d, g.data(), x.values.data(), w.grad.data());
        }
        return;
    }
    case Op::relu: {
        if (want(0)) {
            Node& x = gin(0);
            ensure_grad(x);
            for (size_t i = 0; i < g.size(); ++i)
                if (x.values[i] > 0.0) x.grad[i] += g[i];
        }
        return;
    }
    case Op::sigmoid: {
        if (want(0)) {
            Node& x = gin(0);
            ensure_grad(x);
            for (size_t i = 0; i < g.size(); ++i) {
                const double y = n.values[i];
                x.grad[i] += g[i] * y * (1.0 - y);
            }
        }
        return;
    }
    case Op::softmax_flat: {
        if (want(0)) {
            Node& x = gin(0);
            ensure_grad(x);
            double dot = 0.0;
            for (size_t i = 0; i < g.size(); ++i) dot += g[i] * n.values[i];
            for (size_t i = 0; i < g.size(); ++i)
                x.grad[i] += n.values[i] * (g[i] - dot);
        }
        return;
    }
    case Op::log: {
        if (want(0)) {
            Node& x = gin(0);
            ensure_grad(x);
            for (size_t i = 0; i < g.size(); ++i) x.grad[i] += g[i] / x.values[i];
        }
        return;
    }
    case Op::exp: {
        if (want(0)) {
            Node& x = gin(0);
            ensure_grad(x);
            for (size_t i = 0; i < g.size(); ++i) x.grad[i] += g[i] * n.values[i];
        }
        return;
    }
    case Op::pow_elem: {
        if (want(0)) {
            Node& b = gin(0);
            ensure_grad(b);
            const auto& ve = n.inputs[1]->values;
            for (size_t i = 0; i < g.size(); ++i) {
                const double base = b.values[i], e = ve[i];
                double d;
                if (base == 0.0) {
                    // subgradient convention at the origin
                    d = e == 1.0 ? 1.0 : 0.0;
                } else {
                    d = e * std::pow(base, e - 1.0);
                }
                b.grad[i] += g[i] * d;
            }
        }
        return;
    }
    case Op::abs: {
        if (want(0)) {
            Node& x = gin(0);
            ensure_grad(x);
            for (size_t i = 0; i < g.size(); ++i) {
                const double v = x.values[i];
                if (v > 0.0)
                    x.grad[i] += g[i];
                else if (v < 0.0)
                    x.grad[i] -= g[i];
            }
        }
        return;
    }
    case Op::mean_all: {
        if (want(0)) {
            Node& x = gin(0);
            ensure_grad(x);
            const double gv = g[0] / static_cast<double>(x.values.size());
            for (auto& z : x.grad) z += gv;
        }
        return;
    }
    case Op::sum_all: {
        if (want(0)) {
            Node& x = gin(0);
            ensure_grad(x);
            for (auto& z : x.grad) z += g[0];
        }
        return;
    }
    case Op::concat_channels: {
        size_t off = 0;
        for (size_t k = 0; k < n.inputs.size(); ++k) {
            const size_t cnt = n.inputs[k]->values.size();
            if (want(k)) {
                Node& x = gin(k);
                ensure_grad(x);
                for (size_t i = 0; i < cnt; ++i) x.grad[i] += g[off + i];
            }
            off += cnt;
        }
        return;
    }
    case Op::max_pool2d:
    case Op::global_max_pool: {
        if (want(0)) {
            Node& x = gin(0);
            ensure_grad(x);
            kernels::maxpool2d_backward(g.data(), n.saved_idx.data(), g.size(), x.grad.data());
        }
        return;
    }
    case Op::global_avg_pool: {
        if (want(0)) {
            Node& x = gin(0);
            ensure_grad(x);
            const size_t plane = x.values.size() / n.values.size();
            const double inv = 1.0 / static_cast<double>(plane);
            for (size_t c = 0; c < n.values.size(); ++c)
                for (size_t i = 0; i < plane; ++i) x.grad[c * plane + i] += g[c] * inv;
        }
        return;
    }
    case Op::broadcast: {
        if (want(0)) {
            Node& x = gin(0);
            ensure_grad(x);
            const Shape& src = x.shape;
            const Shape& dst = n.shape;
            if (src == dst) {
                for (size_t i = 0; i < g.size(); ++i) x.grad[i] += g[i];
            } else if (x.values.size() == 1) {
                double acc = 0.0;
                for (double z : g) acc += z;
                x.grad[0] += acc;
            } else if (src.size() == 1) {
                const size_t plane = static_cast<size_t>(dst[1]) * dst[2];
                for (int c = 0; c < dst[0]; ++c) {
                    double acc = 0.0;
                    for (size_t i = 0; i < plane; ++i) acc += g[c * plane + i];
                    x.grad[c] += acc;
                }
            } else {
                const size_t plane = static_cast<size_t>(dst[1]) * dst[2];
                for (int c = 0; c < dst[0]; ++c)
                    for (size_t i = 0; i < plane; ++i) x.grad[i] += g[c * plane + i];
            }
        }
        return;
    }
    case Op::channel_mean: {
        if (want(0)) {
            Node& x = gin(0);
            ensure_grad(x);
            const size_t plane = n.values.size();
            const int c = x.shape[0];
            const double inv = 1.0 / c;
            for (int ch = 0; ch < c; ++ch)
                for (size_t i = 0; i < plane; ++i) x.grad[ch * plane + i] += g[i] * inv;
        }
        return;
    }
    case Op::channel_max: {
        if (want(0)) {
            Node& x = gin(0);
            ensure_grad(x);
            const size_t plane = n.values.size();
            for (size_t i = 0; i < plane; ++i)
                x.grad[static_cast<size_t>(n.saved_idx[i]) * plane + i] += g[i];
        }
        return;
    }
    case Op::group_norm: {
        Node& x = gin(0);
        Node& gamma = gin(1);
        Node& beta = gin(2);
        const int c = x.shape[0];
        const size_t plane = static_cast<size_t>(x.shape[1]) * x.shape[2];
        const int groups = n.a0;
        const int ch_per_group = c / groups;
        const size_t m = ch_per_group * plane;
        const auto& xhat = n.saved;
        if (want(1)) {
            ensure_grad(gamma);
            for (int ch = 0; ch < c; ++ch) {
                double acc = 0.0;
                for (size_t i = 0; i < plane; ++i) acc += g[ch * plane + i] * xhat[ch * plane + i];
                gamma.grad[ch] += acc;
            }
        }
        if (want(2)) {
            ensure_grad(beta);
            for (int ch = 0; ch < c; ++ch) {
                double acc = 0.0;
                for (size_t i = 0; i < plane; ++i) acc += g[ch * plane + i];
                beta.grad[ch] += acc;
            }
        }
        if (want(0)) {
            ensure_grad(x);
            const auto& vg = gamma.values;
            std::vector<double> dxhat(m);
            for (int grp = 0; grp < groups; ++grp) {
                const size_t base = static_cast<size_t>(grp) * m;
                double sum1 = 0.0, sum2 = 0.0;
                for (size_t i = 0; i < m; ++i) {
                    const size_t idx = base + i;
                    const int ch = static_cast<int>(idx / plane);
                    dxhat[i] = g[idx] * vg[ch];
                    sum1 += dxhat[i];
                    sum2 += dxhat[i] * xhat[idx];
                }
                const double is = n.saved2[grp];
                const double inv_m = 1.0 / static_cast<double>(m);
                for (size_t i = 0; i < m; ++i) {
                    const size_t idx = base + i;
                    x.grad[idx] += is * (dxhat[i] - inv_m * (sum1 + xhat[idx] * sum2));
                }
            }
        }
        return;
    }
    }
    throw Error(std::string("backward: unhandled op ") + op_name(n.op));
}

std::vector<Node*> topo_order(Node* root) {
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    // iterative post-order DFS
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root, 0);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (seen.count(node)) {
            stack.pop_back();
            continue;
        }
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next].get();
            ++next;
            if (!seen.count(child)) stack.emplace_back(child, 0);
        } else {
            seen.insert(node);
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;
}

} // namespace

void backward(const Tensor& loss) {
    if (!loss.defined()) throw Error("backward: undefined loss tensor");
    if (loss.size() != 1)
        throw Error("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    if (!loss.requires_grad())
        throw Error("backward: loss is not connected to any tensor requiring grad");
    Node* root = loss.node().get();
    auto order = topo_order(root);
    ensure_grad(*root);
    root->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->grad.empty()) continue; // unreachable from the loss gradient
        backward_node(*n);
        // interior gradients are no longer needed once distributed
        if (n->op != Op::leaf && n != root) {
            n->grad.clear();
            n->grad.shrink_to_fit();
        }
    }
}

Graph trace(const Tensor& root) {
    if (!root.defined()) throw Error("trace: undefined tensor");
    auto order = topo_order(root.node().get());
    std::unordered_map<const Node*, int> index;
    Graph g;
    g.nodes.reserve(order.size());
    for (const Node* n : order) {
        GraphNode gn;
        gn.op = n->op;
        gn.shape = n->shape;
        for (const auto& in : n->inputs) gn.inputs.push_back(index.at(in.get()));
        index[n] = static_cast<int>(g.nodes.size());
        g.nodes.push_back(std::move(gn));
    }
    return g;
}

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           double step, double tol, int64_t max_probes, Rng* rng, double floor) {
    Tensor xt = x.detached(true);
    Tensor y = f(xt);
    if (y.size() != 1) throw Error("grad_check: f must be scalar-valued");
    backward(y);
    std::vector<double> analytic;
    if (xt.has_grad())
        analytic.assign(xt.grad().begin(), xt.grad().end());
    else
        analytic.assign(static_cast<size_t>(x.size()), 0.0);

    std::vector<int64_t> probes;
    const int64_t n = x.size();
    if (max_probes <= 0 || max_probes >= n) {
        probes.resize(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) probes[static_cast<size_t>(i)] = i;
    } else {
        if (!rng) throw Error("grad_check: sampled probing requires an rng");
        std::unordered_set<int64_t> chosen;
        while (static_cast<int64_t>(chosen.size()) < max_probes)
            chosen.insert(static_cast<int64_t>(rng->uniform_index(static_cast<uint64_t>(n))));
        probes.assign(chosen.begin(), chosen.end());
        std::sort(probes.begin(), probes.end());
    }

    GradCheckReport report;
    std::vector<double> base(x.values().begin(), x.values().end());
    NoGradGuard guard;
    for (int64_t i : probes) {
        std::vector<double> vp = base, vm = base;
        vp[static_cast<size_t>(i)] += step;
        vm[static_cast<size_t>(i)] -= step;
        const double fp = f(Tensor::from_values(x.shape(), std::move(vp))).scalar_value();
        const double fm = f(Tensor::from_values(x.shape(), std::move(vm))).scalar_value();
        const double numeric = (fp - fm) / (2.0 * step);
        const double a = analytic[static_cast<size_t>(i)];
        const double denom = std::max({std::abs(a), std::abs(numeric), floor});
        const double rel = std::abs(a - numeric) / denom;
        report.max_rel_err = std::max(report.max_rel_err, rel);
        ++report.checked;
    }
    report.pass = report.max_rel_err < tol;
    return report;
}

} // namespace tryon
