#pragma once

#include <cstddef>
#include <cstdint>

namespace tryon::kernels {

// Numeric inner loops used by the tensor engine and the geometry/metrics
// code. Every kernel exists in two variants: a plain serial reference
// (ref::) and an OpenMP one (omp::). The omp variants parallelize only
// loops whose iterations write disjoint outputs, so both variants produce
// bit-identical results; the parity tests assert exactly that.
//
// Convention: *_forward kernels overwrite their output buffer, *_grad_*
// kernels accumulate (+=) into theirs.

enum class Exec {
    serial,   // always the reference implementation
    parallel, // always the OpenMP implementation
    auto_,    // follow the global switch (default: parallel)
};

void set_parallel_enabled(bool on);
bool parallel_enabled();

// Resolves auto_ against the global switch.
bool use_parallel(Exec mode);

struct Conv2dDims {
    int in_channels = 0;
    int out_channels = 0;
    int in_h = 0, in_w = 0;
    int kernel = 0; // square kernels only
    int stride = 1; // 1 or 2
    int pad = 0;

    int out_h() const { return (in_h + 2 * pad - kernel) / stride + 1; }
    int out_w() const { return (in_w + 2 * pad - kernel) / stride + 1; }
};

struct ConvT2dDims {
    int in_channels = 0;
    int out_channels = 0;
    int in_h = 0, in_w = 0;
    int kernel = 0;
    int stride = 2;
    int pad = 0;

    int out_h() const { return (in_h - 1) * stride - 2 * pad + kernel; }
    int out_w() const { return (in_w - 1) * stride - 2 * pad + kernel; }
};

struct Pool2dDims {
    int channels = 0;
    int in_h = 0, in_w = 0;
    int kernel = 2;
    int stride = 2;

    int out_h() const { return (in_h - kernel) / stride + 1; }
    int out_w() const { return (in_w - kernel) / stride + 1; }
};

namespace ref {

// in [Ci,H,W], w [Co,Ci,k,k] -> out [Co,Ho,Wo]
void conv2d_forward(const Conv2dDims& d, const double* in, const double* w, double* out);
void conv2d_grad_input(const Conv2dDims& d, const double* gout, const double* w, double* gin);
void conv2d_grad_weight(const Conv2dDims& d, const double* gout, const double* in, double* gw);

// in [Ci,H,W], w [Ci,Co,k,k] -> out [Co,Ho,Wo]
void convt2d_forward(const ConvT2dDims& d, const double* in, const double* w, double* out);
void convt2d_grad_input(const ConvT2dDims& d, const double* gout, const double* w, double* gin);
void convt2d_grad_weight(const ConvT2dDims& d, const double* gout, const double* in, double* gw);

// argmax holds, per output element, the flat index of the chosen input.
void maxpool2d_forward(const Pool2dDims& d, const double* in, double* out, int64_t* argmax);

// a [M,K] x b [K,N] -> out [M,N]
void matmul(int m, int k, int n, const double* a, const double* b, double* out);
void matmul_grad_a(int m, int k, int n, const double* gout, const double* b, double* ga);
void matmul_grad_b(int m, int k, int n, const double* gout, const double* a, double* gb);

// Backward warp of src [C,H,W] into dst [C,Ho,Wo]: dst(p) samples src at
// t_inv * p with bilinear interpolation, zero outside the source bounds.
void warp_bilinear(const double* src, int c, int h, int w, const double t_inv[9],
                   double* dst, int out_h, int out_w);

// Truncated Gaussian: out(x,y) = exp(-d^2 / (2 sigma^2)), sigma = g/3,
// zero where d > g. Overwrites out [H,W].
void gaussian_heatmap(double cx, double cy, double g, int h, int w, double* out);

// Deterministic blocked sum (fixed block size, independent of thread count).
double block_sum(const double* x, size_t n);

} // namespace ref

namespace omp {

void conv2d_forward(const Conv2dDims& d, const double* in, const double* w, double* out);
void conv2d_grad_input(const Conv2dDims& d, const double* gout, const double* w, double* gin);
void conv2d_grad_weight(const Conv2dDims& d, const double* gout, const double* in, double* gw);

void convt2d_forward(const ConvT2dDims& d, const double* in, const double* w, double* out);
void convt2d_grad_input(const ConvT2dDims& d, const double* gout, const double* w, double* gin);
void convt2d_grad_weight(const ConvT2dDims& d, const double* gout, const double* in, double* gw);

void maxpool2d_forward(const Pool2dDims& d, const double* in, double* out, int64_t* argmax);

void matmul(int m, int k, int n, const double* a, const double* b, double* out);
void matmul_grad_a(int m, int k, int n, const double* gout, const double* b, double* ga);
void matmul_grad_b(int m, int k, int n, const double* gout, const double* a, double* gb);

void warp_bilinear(const double* src, int c, int h, int w, const double t_inv[9],
                   double* dst, int out_h, int out_w);

void gaussian_heatmap(double cx, double cy, double g, int h, int w, double* out);

double block_sum(const double* x, size_t n);

} // namespace omp

// Dispatching entry points used by the rest of the library.
void conv2d_forward(const Conv2dDims& d, const double* in, const double* w, double* out,
                    Exec mode = Exec::auto_);
void conv2d_grad_input(const Conv2dDims& d, const double* gout, const double* w, double* gin,
                       Exec mode = Exec::auto_);
void conv2d_grad_weight(const Conv2dDims& d, const double* gout, const double* in, double* gw,
                        Exec mode = Exec::auto_);
void convt2d_forward(const ConvT2dDims& d, const double* in, const double* w, double* out,
                     Exec mode = Exec::auto_);
void convt2d_grad_input(const ConvT2dDims& d, const double* gout, const double* w, double* gin,
                        Exec mode = Exec::auto_);
void convt2d_grad_weight(const ConvT2dDims& d, const double* gout, const double* in, double* gw,
                         Exec mode = Exec::auto_);
void maxpool2d_forward(const Pool2dDims& d, const double* in, double* out, int64_t* argmax,
                       Exec mode = Exec::auto_);
void maxpool2d_backward(const double* gout, const int64_t* argmax, size_t n_out, double* gin);
void matmul(int m, int k, int n, const double* a, const double* b, double* out,
            Exec mode = Exec::auto_);
void matmul_grad_a(int m, int k, int n, const double* gout, const double* b, double* ga,
                   Exec mode = Exec::auto_);
void matmul_grad_b(int m, int k, int n, const double* gout, const double* a, double* gb,
                   Exec mode = Exec::auto_);
void warp_bilinear(const double* src, int c, int h, int w, const double t_inv[9], double* dst,
                   int out_h, int out_w, Exec mode = Exec::auto_);
void gaussian_heatmap(double cx, double cy, double g, int h, int w, double* out,
                      Exec mode = Exec::auto_);
double block_sum(const double* x, size_t n, Exec mode = Exec::auto_);

} // namespace tryon::kernels
