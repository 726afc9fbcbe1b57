#include "kernels_detail.hpp"

#include <vector>

// Serial reference implementations. Kept deliberately free of threading so
// the parity tests and the benchmark have a fixed baseline.

namespace tryon::kernels::ref {

void conv2d_forward(const Conv2dDims& d, const double* in, const double* w, double* out) {
    for (int co = 0; co < d.out_channels; ++co)
        detail::conv2d_forward_channel(d, co, in, w, out);
}

void conv2d_grad_input(const Conv2dDims& d, const double* gout, const double* w, double* gin) {
    for (int ci = 0; ci < d.in_channels; ++ci)
        detail::conv2d_grad_input_channel(d, ci, gout, w, gin);
}

void conv2d_grad_weight(const Conv2dDims& d, const double* gout, const double* in, double* gw) {
    for (int co = 0; co < d.out_channels; ++co)
        detail::conv2d_grad_weight_channel(d, co, gout, in, gw);
}

void convt2d_forward(const ConvT2dDims& d, const double* in, const double* w, double* out) {
    for (int co = 0; co < d.out_channels; ++co)
        detail::convt2d_forward_channel(d, co, in, w, out);
}

void convt2d_grad_input(const ConvT2dDims& d, const double* gout, const double* w, double* gin) {
    for (int ci = 0; ci < d.in_channels; ++ci)
        detail::convt2d_grad_input_channel(d, ci, gout, w, gin);
}

void convt2d_grad_weight(const ConvT2dDims& d, const double* gout, const double* in, double* gw) {
    for (int ci = 0; ci < d.in_channels; ++ci)
        detail::convt2d_grad_weight_channel(d, ci, gout, in, gw);
}

void maxpool2d_forward(const Pool2dDims& d, const double* in, double* out, int64_t* argmax) {
    for (int c = 0; c < d.channels; ++c) detail::maxpool2d_channel(d, c, in, out, argmax);
}

void matmul(int m, int k, int n, const double* a, const double* b, double* out) {
    for (int i = 0; i < m; ++i) detail::matmul_row(m, k, n, i, a, b, out);
}

void matmul_grad_a(int m, int k, int n, const double* gout, const double* b, double* ga) {
    for (int i = 0; i < m; ++i) detail::matmul_grad_a_row(m, k, n, i, gout, b, ga);
}

void matmul_grad_b(int m, int k, int n, const double* gout, const double* a, double* gb) {
    for (int kk = 0; kk < k; ++kk) detail::matmul_grad_b_row(m, k, n, kk, gout, a, gb);
}

void warp_bilinear(const double* src, int c, int h, int w, const double t_inv[9], double* dst,
                   int out_h, int out_w) {
    for (int oy = 0; oy < out_h; ++oy)
        detail::warp_row(src, c, h, w, t_inv, dst, out_h, out_w, oy);
}

void gaussian_heatmap(double cx, double cy, double g, int h, int w, double* out) {
    for (int y = 0; y < h; ++y)
        detail::gaussian_row(cx, cy, g, w, out + static_cast<size_t>(y) * w, y);
}

double block_sum(const double* x, size_t n) {
    const size_t nblocks = (n + detail::kSumBlock - 1) / detail::kSumBlock;
    std::vector<double> partial(nblocks);
    for (size_t b = 0; b < nblocks; ++b)
        partial[b] = detail::sum_block(x, b * detail::kSumBlock,
                                       std::min(n, (b + 1) * detail::kSumBlock));
    double acc = 0.0;
    for (double p : partial) acc += p;
    return acc;
}

} // namespace tryon::kernels::ref
