#include "tryon/kernels.hpp"

#include <atomic>

namespace tryon::kernels {

namespace {
std::atomic<bool> g_parallel{true};
}

void set_parallel_enabled(bool on) { g_parallel.store(on, std::memory_order_relaxed); }
bool parallel_enabled() { return g_parallel.load(std::memory_order_relaxed); }

bool use_parallel(Exec mode) {
    switch (mode) {
    case Exec::serial: return false;
    case Exec::parallel: return true;
    default: return parallel_enabled();
    }
}

void conv2d_forward(const Conv2dDims& d, const double* in, const double* w, double* out,
                    Exec mode) {
    use_parallel(mode) ? omp::conv2d_forward(d, in, w, out) : ref::conv2d_forward(d, in, w, out);
}

void conv2d_grad_input(const Conv2dDims& d, const double* gout, const double* w, double* gin,
                       Exec mode) {
    use_parallel(mode) ? omp::conv2d_grad_input(d, gout, w, gin)
                       : ref::conv2d_grad_input(d, gout, w, gin);
}

void conv2d_grad_weight(const Conv2dDims& d, const double* gout, const double* in, double* gw,
                        Exec mode) {
    use_parallel(mode) ? omp::conv2d_grad_weight(d, gout, in, gw)
                       : ref::conv2d_grad_weight(d, gout, in, gw);
}

void convt2d_forward(const ConvT2dDims& d, const double* in, const double* w, double* out,
                     Exec mode) {
    use_parallel(mode) ? omp::convt2d_forward(d, in, w, out)
                       : ref::convt2d_forward(d, in, w, out);
}

void convt2d_grad_input(const ConvT2dDims& d, const double* gout, const double* w, double* gin,
                        Exec mode) {
    use_parallel(mode) ? omp::convt2d_grad_input(d, gout, w, gin)
                       : ref::convt2d_grad_input(d, gout, w, gin);
}

void convt2d_grad_weight(const ConvT2dDims& d, const double* gout, const double* in, double* gw,
                         Exec mode) {
    use_parallel(mode) ? omp::convt2d_grad_weight(d, gout, in, gw)
                       : ref::convt2d_grad_weight(d, gout, in, gw);
}

void maxpool2d_forward(const Pool2dDims& d, const double* in, double* out, int64_t* argmax,
                       Exec mode) {
    use_parallel(mode) ? omp::maxpool2d_forward(d, in, out, argmax)
                       : ref::maxpool2d_forward(d, in, out, argmax);
}

void maxpool2d_backward(const double* gout, const int64_t* argmax, size_t n_out, double* gin) {
    // Scatter: overlapping windows may hit the same input element, so this
    // stays serial.
    for (size_t i = 0; i < n_out; ++i)
        if (argmax[i] >= 0) gin[argmax[i]] += gout[i];
}

void matmul(int m, int k, int n, const double* a, const double* b, double* out, Exec mode) {
    use_parallel(mode) ? omp::matmul(m, k, n, a, b, out) : ref::matmul(m, k, n, a, b, out);
}

void matmul_grad_a(int m, int k, int n, const double* gout, const double* b, double* ga,
                   Exec mode) {
    use_parallel(mode) ? omp::matmul_grad_a(m, k, n, gout, b, ga)
                       : ref::matmul_grad_a(m, k, n, gout, b, ga);
}

void matmul_grad_b(int m, int k, int n, const double* gout, const double* a, double* gb,
                   Exec mode) {
    use_parallel(mode) ? omp::matmul_grad_b(m, k, n, gout, a, gb)
                       : ref::matmul_grad_b(m, k, n, gout, a, gb);
}

void warp_bilinear(const double* src, int c, int h, int w, const double t_inv[9], double* dst,
                   int out_h, int out_w, Exec mode) {
    use_parallel(mode) ? omp::warp_bilinear(src, c, h, w, t_inv, dst, out_h, out_w)
                       : ref::warp_bilinear(src, c, h, w, t_inv, dst, out_h, out_w);
}

void gaussian_heatmap(double cx, double cy, double g, int h, int w, double* out, Exec mode) {
    use_parallel(mode) ? omp::gaussian_heatmap(cx, cy, g, h, w, out)
                       : ref::gaussian_heatmap(cx, cy, g, h, w, out);
}

double block_sum(const double* x, size_t n, Exec mode) {
    return use_parallel(mode) ? omp::block_sum(x, n) : ref::block_sum(x, n);
}

} // namespace tryon::kernels
