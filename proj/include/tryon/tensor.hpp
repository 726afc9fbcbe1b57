#pragma once

#include "tryon/errors.hpp"
#include "tryon/rng.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace tryon {

using Shape = std::vector<int>;

int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

// Closed set of differentiable primitives. Everything the model and the
// losses need is composed from these; each one's analytic gradient is
// checked against central finite differences in the test suite.
enum class Op {
    leaf,
    add,
    sub,
    mul,
    scalar_mul,
    matmul,
    conv2d,
    conv_transpose2d,
    relu,
    sigmoid,
    softmax_flat,
    log,
    exp,
    pow_elem,
    abs,
    mean_all,
    sum_all,
    concat_channels,
    max_pool2d,
    global_avg_pool,
    global_max_pool,
    broadcast,
    channel_mean,
    channel_max,
    group_norm,
};

const char* op_name(Op op);

namespace detail {

struct Node {
    Op op = Op::leaf;
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad; // allocated on first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;

    // op attributes (meaning depends on op)
    int a0 = 0, a1 = 0, a2 = 0;
    double s0 = 0.0;
    std::vector<double> saved;      // e.g. normalized activations for group_norm
    std::vector<double> saved2;     // e.g. per-group inverse stddev
    std::vector<int64_t> saved_idx; // argmax indices for pooling/max ops

    int64_t size() const { return static_cast<int64_t>(values.size()); }
};

} // namespace detail

// Dense double-precision tensor participating in a dynamically built
// reverse-mode graph. Tensor is a cheap shared handle: copying it shares
// the underlying node. Graphs are confined to one thread; forwarding
// through shared read-only leaves from several threads is fine, but
// backward passes that accumulate into shared leaves must be serialized
// by the caller.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_values(Shape shape, std::vector<double> values,
                              bool requires_grad = false);
    static Tensor scalar(double value);
    // He-style normal init, stddev chosen by the caller.
    static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    int dim(int i) const;
    int64_t size() const;
    bool requires_grad() const;

    std::span<const double> values() const;
    // Direct mutation is only meaningful for leaves (parameters, buffers).
    std::span<double> mutable_values();
    double value_at(int64_t i) const;
    double scalar_value() const;

    bool has_grad() const;
    std::span<const double> grad() const;
    void zero_grad();

    // Value copy detached from any graph.
    Tensor detached(bool requires_grad = false) const;

    std::shared_ptr<detail::Node> node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

// Thread-local switch: while a guard is alive, ops do not record graph
// edges even if inputs require grad (used for inference and the finite-
// difference re-evaluations).
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};
bool grad_enabled();

// ---- primitives ----

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double c);
// [M,K] x [K,N] -> [M,N]; [M,K] x [K] -> [M]
Tensor matmul(const Tensor& a, const Tensor& b);
// x [Ci,H,W], w [Co,Ci,k,k]
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad);
// x [Ci,H,W], w [Ci,Co,k,k]
Tensor conv_transpose2d(const Tensor& x, const Tensor& w, int stride, int pad);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
// Softmax over every element of the tensor (max-subtracted for stability).
Tensor softmax_flat(const Tensor& x);
Tensor log_elem(const Tensor& x);
Tensor exp_elem(const Tensor& x);
// base^exponent elementwise. The exponent is a constant: gradients flow
// only into the base, and passing a grad-tracked exponent is an error.
Tensor pow_elem(const Tensor& base, const Tensor& exponent);
Tensor abs_elem(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor sum_all(const Tensor& x);
Tensor concat_channels(const std::vector<Tensor>& xs);
Tensor max_pool2d(const Tensor& x, int kernel, int stride);
// [C,H,W] -> [C]
Tensor global_avg_pool(const Tensor& x);
Tensor global_max_pool(const Tensor& x);
// Supported expansions: [1] -> any, [C] -> [C,H,W], [1,H,W] -> [C,H,W].
Tensor broadcast_to(const Tensor& x, const Shape& target);
// [C,H,W] -> [1,H,W]
Tensor channel_mean(const Tensor& x);
Tensor channel_max(const Tensor& x);
// x [C,H,W]; gamma/beta [C]; channels split into `groups` equal groups.
Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups,
                  double eps = 1e-5);

// convenience compositions
Tensor add_const(const Tensor& x, double c);

// ---- backward ----

// Reverse-mode sweep from a scalar loss. Gradients accumulate (+=) into
// every reachable node with requires_grad, so repeated calls add up;
// interior gradients are released as the sweep retires them.
void backward(const Tensor& loss);

// Read-only view of the recorded graph in topological order (inputs
// always precede their consumers), for tests and debugging.
struct GraphNode {
    Op op;
    Shape shape;
    std::vector<int> inputs;
};
struct Graph {
    std::vector<GraphNode> nodes;
};
Graph trace(const Tensor& root);

// ---- gradient checking ----

struct GradCheckReport {
    double max_rel_err = 0.0;
    bool pass = false;
    int64_t checked = 0;
};

// Central-difference check of d f(x) / dx against the engine's backward.
// Relative error uses max(|analytic|, |numeric|, floor) as denominator;
// the floor keeps finite-difference round-off on near-zero entries from
// dominating. `max_probes` 0 checks every element, otherwise a random
// subset (requires rng).
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           double step = 1e-5, double tol = 1e-4, int64_t max_probes = 0,
                           Rng* rng = nullptr, double floor = 1e-3);

} // namespace tryon
