#pragma once

#include "tryon/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

// Per-channel / per-row workers shared by the serial reference and the
// OpenMP variants. Both variants call the same workers over the same index
// ranges, so their results are bit-identical by construction; the omp
// files only decide which outer loop runs in parallel.
//
// The k=3 convolutions and the stride-2 transposed convolutions carry the
// training cost, so those shapes get single-pass specializations; anything
// else falls back to the generic tap loops.

namespace tryon::kernels::detail {

inline void iter_bounds(int k_off, int pad, int stride, int in_extent, int out_extent,
                        int& lo, int& hi) {
    // valid range of out index o such that o*stride + k_off - pad lies in [0, in_extent)
    int num = pad - k_off;
    lo = num <= 0 ? 0 : (num + stride - 1) / stride;
    hi = (in_extent - 1 + pad - k_off) / stride;
    lo = std::max(lo, 0);
    hi = std::min(hi, out_extent - 1);
}

// ---- conv2d forward ----

inline void conv2d_fwd_generic(const Conv2dDims& d, int co, const double* in, const double* w,
                               double* out) {
    const int ho = d.out_h(), wo = d.out_w();
    const int k = d.kernel, s = d.stride, p = d.pad;
    double* oplane = out + static_cast<size_t>(co) * ho * wo;
    for (int ci = 0; ci < d.in_channels; ++ci) {
        const double* iplane = in + static_cast<size_t>(ci) * d.in_h * d.in_w;
        const double* wbase = w + (static_cast<size_t>(co) * d.in_channels + ci) * k * k;
        for (int ky = 0; ky < k; ++ky) {
            int oy_lo, oy_hi;
            iter_bounds(ky, p, s, d.in_h, ho, oy_lo, oy_hi);
            for (int kx = 0; kx < k; ++kx) {
                const double wv = wbase[ky * k + kx];
                if (wv == 0.0) continue;
                int ox_lo, ox_hi;
                iter_bounds(kx, p, s, d.in_w, wo, ox_lo, ox_hi);
                for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                    const double* irow = iplane + static_cast<size_t>(oy * s + ky - p) * d.in_w;
                    double* orow = oplane + static_cast<size_t>(oy) * wo;
                    if (s == 1) {
                        const double* ip = irow + kx - p;
                        for (int ox = ox_lo; ox <= ox_hi; ++ox) orow[ox] += wv * ip[ox];
                    } else {
                        for (int ox = ox_lo; ox <= ox_hi; ++ox)
                            orow[ox] += wv * irow[ox * s + kx - p];
                    }
                }
            }
        }
    }
}

// k=3, stride 1, pad 1: one pass per (ci, ky) row with all three taps
inline void conv2d_fwd_s1k3(const Conv2dDims& d, int co, const double* in, const double* w,
                            double* out) {
    const int h = d.in_h, wd = d.in_w;
    double* oplane = out + static_cast<size_t>(co) * h * wd;
    for (int ci = 0; ci < d.in_channels; ++ci) {
        const double* iplane = in + static_cast<size_t>(ci) * h * wd;
        const double* wbase = w + (static_cast<size_t>(co) * d.in_channels + ci) * 9;
        for (int ky = 0; ky < 3; ++ky) {
            const double w0 = wbase[ky * 3], w1 = wbase[ky * 3 + 1], w2 = wbase[ky * 3 + 2];
            const int oy_lo = std::max(0, 1 - ky), oy_hi = std::min(h - 1, h - ky);
            for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                const double* irow = iplane + static_cast<size_t>(oy + ky - 1) * wd;
                double* orow = oplane + static_cast<size_t>(oy) * wd;
                orow[0] += w1 * irow[0] + w2 * irow[1];
                for (int ox = 1; ox < wd - 1; ++ox)
                    orow[ox] += w0 * irow[ox - 1] + w1 * irow[ox] + w2 * irow[ox + 1];
                orow[wd - 1] += w0 * irow[wd - 2] + w1 * irow[wd - 1];
            }
        }
    }
}

// k=3, stride 2, pad 1, even input width
inline void conv2d_fwd_s2k3(const Conv2dDims& d, int co, const double* in, const double* w,
                            double* out) {
    const int h = d.in_h, wd = d.in_w;
    const int ho = d.out_h(), wo = d.out_w();
    double* oplane = out + static_cast<size_t>(co) * ho * wo;
    for (int ci = 0; ci < d.in_channels; ++ci) {
        const double* iplane = in + static_cast<size_t>(ci) * h * wd;
        const double* wbase = w + (static_cast<size_t>(co) * d.in_channels + ci) * 9;
        for (int ky = 0; ky < 3; ++ky) {
            const double w0 = wbase[ky * 3], w1 = wbase[ky * 3 + 1], w2 = wbase[ky * 3 + 2];
            int oy_lo, oy_hi;
            iter_bounds(ky, 1, 2, h, ho, oy_lo, oy_hi);
            for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                const double* irow = iplane + static_cast<size_t>(oy * 2 + ky - 1) * wd;
                double* orow = oplane + static_cast<size_t>(oy) * wo;
                orow[0] += w1 * irow[0] + w2 * irow[1];
                for (int ox = 1; ox < wo; ++ox)
                    orow[ox] += w0 * irow[2 * ox - 1] + w1 * irow[2 * ox] + w2 * irow[2 * ox + 1];
            }
        }
    }
}

inline void conv2d_forward_channel(const Conv2dDims& d, int co, const double* in,
                                   const double* w, double* out) {
    double* oplane = out + static_cast<size_t>(co) * d.out_h() * d.out_w();
    std::memset(oplane, 0, sizeof(double) * static_cast<size_t>(d.out_h()) * d.out_w());
    if (d.kernel == 3 && d.pad == 1 && d.in_w >= 2) {
        if (d.stride == 1) {
            conv2d_fwd_s1k3(d, co, in, w, out);
            return;
        }
        if (d.stride == 2 && d.in_w % 2 == 0) {
            conv2d_fwd_s2k3(d, co, in, w, out);
            return;
        }
    }
    conv2d_fwd_generic(d, co, in, w, out);
}

// ---- conv2d grad wrt input ----

inline void conv2d_gin_generic(const Conv2dDims& d, int ci, const double* gout, const double* w,
                               double* gin) {
    const int ho = d.out_h(), wo = d.out_w();
    const int k = d.kernel, s = d.stride, p = d.pad;
    double* gplane = gin + static_cast<size_t>(ci) * d.in_h * d.in_w;
    for (int co = 0; co < d.out_channels; ++co) {
        const double* goplane = gout + static_cast<size_t>(co) * ho * wo;
        const double* wbase = w + (static_cast<size_t>(co) * d.in_channels + ci) * k * k;
        for (int ky = 0; ky < k; ++ky) {
            int oy_lo, oy_hi;
            iter_bounds(ky, p, s, d.in_h, ho, oy_lo, oy_hi);
            for (int kx = 0; kx < k; ++kx) {
                const double wv = wbase[ky * k + kx];
                if (wv == 0.0) continue;
                int ox_lo, ox_hi;
                iter_bounds(kx, p, s, d.in_w, wo, ox_lo, ox_hi);
                for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                    double* grow = gplane + static_cast<size_t>(oy * s + ky - p) * d.in_w;
                    const double* gorow = goplane + static_cast<size_t>(oy) * wo;
                    if (s == 1) {
                        double* gp = grow + kx - p;
                        for (int ox = ox_lo; ox <= ox_hi; ++ox) gp[ox] += wv * gorow[ox];
                    } else {
                        for (int ox = ox_lo; ox <= ox_hi; ++ox)
                            grow[ox * s + kx - p] += wv * gorow[ox];
                    }
                }
            }
        }
    }
}

// k=3, stride 1, pad 1: the gather is the mirrored single-pass stencil
inline void conv2d_gin_s1k3(const Conv2dDims& d, int ci, const double* gout, const double* w,
                            double* gin) {
    const int h = d.in_h, wd = d.in_w;
    double* gplane = gin + static_cast<size_t>(ci) * h * wd;
    for (int co = 0; co < d.out_channels; ++co) {
        const double* goplane = gout + static_cast<size_t>(co) * h * wd;
        const double* wbase = w + (static_cast<size_t>(co) * d.in_channels + ci) * 9;
        for (int ky = 0; ky < 3; ++ky) {
            const double w0 = wbase[ky * 3], w1 = wbase[ky * 3 + 1], w2 = wbase[ky * 3 + 2];
            // input row iy receives from output row oy = iy + 1 - ky
            const int iy_lo = std::max(0, ky - 1), iy_hi = std::min(h - 1, h - 2 + ky);
            for (int iy = iy_lo; iy <= iy_hi; ++iy) {
                const double* gorow = goplane + static_cast<size_t>(iy + 1 - ky) * wd;
                double* grow = gplane + static_cast<size_t>(iy) * wd;
                grow[0] += w1 * gorow[0] + w0 * gorow[1];
                for (int ix = 1; ix < wd - 1; ++ix)
                    grow[ix] += w2 * gorow[ix - 1] + w1 * gorow[ix] + w0 * gorow[ix + 1];
                grow[wd - 1] += w2 * gorow[wd - 2] + w1 * gorow[wd - 1];
            }
        }
    }
}

// k=3, stride 2, pad 1, even input extent
inline void conv2d_gin_s2k3(const Conv2dDims& d, int ci, const double* gout, const double* w,
                            double* gin) {
    const int h = d.in_h, wd = d.in_w;
    const int ho = d.out_h(), wo = d.out_w();
    double* gplane = gin + static_cast<size_t>(ci) * h * wd;
    for (int co = 0; co < d.out_channels; ++co) {
        const double* goplane = gout + static_cast<size_t>(co) * ho * wo;
        const double* wbase = w + (static_cast<size_t>(co) * d.in_channels + ci) * 9;
        for (int ky = 0; ky < 3; ++ky) {
            const double w0 = wbase[ky * 3], w1 = wbase[ky * 3 + 1], w2 = wbase[ky * 3 + 2];
            // oy = (iy + 1 - ky) / 2 where the parity matches
            for (int iy = std::max(0, ky - 1); iy < h; ++iy) {
                const int t = iy + 1 - ky;
                if (t % 2 != 0) continue;
                const int oy = t / 2;
                if (oy >= ho) break;
                const double* gorow = goplane + static_cast<size_t>(oy) * wo;
                double* grow = gplane + static_cast<size_t>(iy) * wd;
                // even ix: only the center tap contributes
                for (int j = 0; j < wo; ++j) grow[2 * j] += w1 * gorow[j];
                // odd ix = 2j+1: taps kx=2 (ox=j) and kx=0 (ox=j+1)
                for (int j = 0; j < wo - 1; ++j)
                    grow[2 * j + 1] += w2 * gorow[j] + w0 * gorow[j + 1];
                grow[wd - 1] += w2 * gorow[wo - 1];
            }
        }
    }
}

inline void conv2d_grad_input_channel(const Conv2dDims& d, int ci, const double* gout,
                                      const double* w, double* gin) {
    if (d.kernel == 3 && d.pad == 1 && d.in_w >= 2) {
        if (d.stride == 1) {
            conv2d_gin_s1k3(d, ci, gout, w, gin);
            return;
        }
        if (d.stride == 2 && d.in_w % 2 == 0) {
            conv2d_gin_s2k3(d, ci, gout, w, gin);
            return;
        }
    }
    conv2d_gin_generic(d, ci, gout, w, gin);
}

// ---- conv2d grad wrt weight ----

// Four independent partial sums keep the reduction pipelined without
// changing the (fixed, deterministic) accumulation order between variants.
inline double dot4(const double* a, const double* b, int n) {
    double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
    int i = 0;
    for (; i + 4 <= n; i += 4) {
        a0 += a[i] * b[i];
        a1 += a[i + 1] * b[i + 1];
        a2 += a[i + 2] * b[i + 2];
        a3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) a0 += a[i] * b[i];
    return (a0 + a1) + (a2 + a3);
}

inline double dot4_stride2(const double* a, const double* b, int n) {
    // sum a[2i] * b[i]
    double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
    int i = 0;
    for (; i + 4 <= n; i += 4) {
        a0 += a[2 * i] * b[i];
        a1 += a[2 * i + 2] * b[i + 1];
        a2 += a[2 * i + 4] * b[i + 2];
        a3 += a[2 * i + 6] * b[i + 3];
    }
    for (; i < n; ++i) a0 += a[2 * i] * b[i];
    return (a0 + a1) + (a2 + a3);
}

// k=3 pad=1: one pass per (ci, ky) row feeding all three kx accumulators
inline void conv2d_gw_k3(const Conv2dDims& d, int co, const double* gout, const double* in,
                         double* gw) {
    const int ho = d.out_h(), wo = d.out_w();
    const int s = d.stride;
    const double* goplane = gout + static_cast<size_t>(co) * ho * wo;
    for (int ci = 0; ci < d.in_channels; ++ci) {
        const double* iplane = in + static_cast<size_t>(ci) * d.in_h * d.in_w;
        double* gwbase = gw + (static_cast<size_t>(co) * d.in_channels + ci) * 9;
        for (int ky = 0; ky < 3; ++ky) {
            int oy_lo, oy_hi;
            iter_bounds(ky, 1, s, d.in_h, ho, oy_lo, oy_hi);
            double a0 = 0.0, a1 = 0.0, a2 = 0.0;
            double b0 = 0.0, b1 = 0.0, b2 = 0.0;
            for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                const double* irow = iplane + static_cast<size_t>(oy * s + ky - 1) * d.in_w;
                const double* gorow = goplane + static_cast<size_t>(oy) * wo;
                {
                    const double g = gorow[0]; // ix = -1 tap missing
                    a1 += irow[0] * g;
                    a2 += irow[1] * g;
                }
                int ox = 1;
                const int hi = wo - 1; // last full-tap index is wo-2 for s=1
                const int interior_hi = s == 1 ? hi - 1 : hi;
                for (; ox + 2 <= interior_hi; ox += 2) {
                    const double g0 = gorow[ox], g1 = gorow[ox + 1];
                    const double* i0 = irow + ox * s - 1;
                    const double* i1 = irow + (ox + 1) * s - 1;
                    a0 += i0[0] * g0;
                    a1 += i0[1] * g0;
                    a2 += i0[2] * g0;
                    b0 += i1[0] * g1;
                    b1 += i1[1] * g1;
                    b2 += i1[2] * g1;
                }
                for (; ox <= interior_hi; ++ox) {
                    const double g = gorow[ox];
                    const double* ip = irow + ox * s - 1;
                    a0 += ip[0] * g;
                    a1 += ip[1] * g;
                    a2 += ip[2] * g;
                }
                if (s == 1) {
                    const double g = gorow[wo - 1]; // ix = in_w tap missing
                    a0 += irow[d.in_w - 2] * g;
                    a1 += irow[d.in_w - 1] * g;
                }
            }
            gwbase[ky * 3 + 0] += a0 + b0;
            gwbase[ky * 3 + 1] += a1 + b1;
            gwbase[ky * 3 + 2] += a2 + b2;
        }
    }
}

inline void conv2d_gw_generic(const Conv2dDims& d, int co, const double* gout, const double* in,
                              double* gw) {
    const int ho = d.out_h(), wo = d.out_w();
    const int k = d.kernel, s = d.stride, p = d.pad;
    const double* goplane = gout + static_cast<size_t>(co) * ho * wo;
    for (int ci = 0; ci < d.in_channels; ++ci) {
        const double* iplane = in + static_cast<size_t>(ci) * d.in_h * d.in_w;
        double* gwbase = gw + (static_cast<size_t>(co) * d.in_channels + ci) * k * k;
        for (int ky = 0; ky < k; ++ky) {
            int oy_lo, oy_hi;
            iter_bounds(ky, p, s, d.in_h, ho, oy_lo, oy_hi);
            for (int kx = 0; kx < k; ++kx) {
                int ox_lo, ox_hi;
                iter_bounds(kx, p, s, d.in_w, wo, ox_lo, ox_hi);
                const int n = ox_hi - ox_lo + 1;
                if (n <= 0) continue;
                double acc = 0.0;
                for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                    const double* irow = iplane + static_cast<size_t>(oy * s + ky - p) * d.in_w +
                                         static_cast<size_t>(ox_lo) * s + kx - p;
                    const double* gorow =
                        goplane + static_cast<size_t>(oy) * wo + ox_lo;
                    acc += s == 1 ? dot4(irow, gorow, n) : dot4_stride2(irow, gorow, n);
                }
                gwbase[ky * k + kx] += acc;
            }
        }
    }
}

inline void conv2d_grad_weight_channel(const Conv2dDims& d, int co, const double* gout,
                                       const double* in, double* gw) {
    if (d.kernel == 3 && d.pad == 1 && d.in_w >= 2 &&
        (d.stride == 1 || (d.stride == 2 && d.in_w % 2 == 0))) {
        conv2d_gw_k3(d, co, gout, in, gw);
        return;
    }
    conv2d_gw_generic(d, co, gout, in, gw);
}

// ---- transposed conv forward ----

inline void convt2d_fwd_generic(const ConvT2dDims& d, int co, const double* in, const double* w,
                                double* out) {
    const int ho = d.out_h(), wo = d.out_w();
    const int k = d.kernel, s = d.stride, p = d.pad;
    double* oplane = out + static_cast<size_t>(co) * ho * wo;
    for (int ci = 0; ci < d.in_channels; ++ci) {
        const double* iplane = in + static_cast<size_t>(ci) * d.in_h * d.in_w;
        const double* wbase = w + (static_cast<size_t>(ci) * d.out_channels + co) * k * k;
        for (int oy = 0; oy < ho; ++oy) {
            double* orow = oplane + static_cast<size_t>(oy) * wo;
            for (int ky = 0; ky < k; ++ky) {
                const int ty = oy + p - ky;
                if (ty < 0 || ty % s != 0) continue;
                const int iy = ty / s;
                if (iy >= d.in_h) continue;
                const double* irow = iplane + static_cast<size_t>(iy) * d.in_w;
                for (int kx = 0; kx < k; ++kx) {
                    const double wv = wbase[ky * k + kx];
                    if (wv == 0.0) continue;
                    int ox0 = kx - p;
                    int ix0 = 0;
                    while (ox0 < 0) {
                        ox0 += s;
                        ++ix0;
                    }
                    for (int ox = ox0, ix = ix0; ox < wo && ix < d.in_w; ox += s, ++ix)
                        orow[ox] += wv * irow[ix];
                }
            }
        }
    }
}

// k=4, stride 2, pad 1 (the 2x upsampler): every output row touches two ky
// taps; even/odd output columns each mix two kx taps of one input row pass
inline void convt2d_fwd_k4(const ConvT2dDims& d, int co, const double* in, const double* w,
                           double* out) {
    const int h = d.in_h, wd = d.in_w;
    const int ho = d.out_h(), wo = d.out_w(); // 2h, 2w
    double* oplane = out + static_cast<size_t>(co) * ho * wo;
    for (int ci = 0; ci < d.in_channels; ++ci) {
        const double* iplane = in + static_cast<size_t>(ci) * h * wd;
        const double* wbase = w + (static_cast<size_t>(ci) * d.out_channels + co) * 16;
        for (int oy = 0; oy < ho; ++oy) {
            double* orow = oplane + static_cast<size_t>(oy) * wo;
            const int ky0 = (oy + 1) % 2; // taps ky0 and ky0 + 2
            for (int ky = ky0; ky < 4; ky += 2) {
                const int t = oy + 1 - ky;
                if (t < 0) continue;
                const int iy = t / 2;
                if (iy >= h) continue;
                const double* irow = iplane + static_cast<size_t>(iy) * wd;
                const double we1 = wbase[ky * 4 + 1], we3 = wbase[ky * 4 + 3];
                const double wo0 = wbase[ky * 4 + 0], wo2 = wbase[ky * 4 + 2];
                // ox = 2j   <- we1 * in[j] + we3 * in[j-1]
                // ox = 2j+1 <- wo2 * in[j] + wo0 * in[j+1]
                orow[0] += we1 * irow[0];
                orow[1] += wo2 * irow[0] + wo0 * irow[1];
                for (int j = 1; j < wd - 1; ++j) {
                    orow[2 * j] += we1 * irow[j] + we3 * irow[j - 1];
                    orow[2 * j + 1] += wo2 * irow[j] + wo0 * irow[j + 1];
                }
                orow[wo - 2] += we1 * irow[wd - 1] + we3 * irow[wd - 2];
                orow[wo - 1] += wo2 * irow[wd - 1];
            }
        }
    }
}

// k=2, stride 2, pad 0 (shortcut upsampler)
inline void convt2d_fwd_k2(const ConvT2dDims& d, int co, const double* in, const double* w,
                           double* out) {
    const int h = d.in_h, wd = d.in_w;
    const int wo = d.out_w();
    double* oplane = out + static_cast<size_t>(co) * d.out_h() * wo;
    for (int ci = 0; ci < d.in_channels; ++ci) {
        const double* iplane = in + static_cast<size_t>(ci) * h * wd;
        const double* wbase = w + (static_cast<size_t>(ci) * d.out_channels + co) * 4;
        for (int oy = 0; oy < d.out_h(); ++oy) {
            const int ky = oy % 2, iy = oy / 2;
            const double* irow = iplane + static_cast<size_t>(iy) * wd;
            double* orow = oplane + static_cast<size_t>(oy) * wo;
            const double w0 = wbase[ky * 2], w1 = wbase[ky * 2 + 1];
            for (int j = 0; j < wd; ++j) {
                orow[2 * j] += w0 * irow[j];
                orow[2 * j + 1] += w1 * irow[j];
            }
        }
    }
}

inline void convt2d_forward_channel(const ConvT2dDims& d, int co, const double* in,
                                    const double* w, double* out) {
    double* oplane = out + static_cast<size_t>(co) * d.out_h() * d.out_w();
    std::memset(oplane, 0, sizeof(double) * static_cast<size_t>(d.out_h()) * d.out_w());
    if (d.stride == 2 && d.in_w >= 2) {
        if (d.kernel == 4 && d.pad == 1) {
            convt2d_fwd_k4(d, co, in, w, out);
            return;
        }
        if (d.kernel == 2 && d.pad == 0) {
            convt2d_fwd_k2(d, co, in, w, out);
            return;
        }
    }
    convt2d_fwd_generic(d, co, in, w, out);
}

// ---- transposed conv grad wrt input ----

inline void convt2d_gin_generic(const ConvT2dDims& d, int ci, const double* gout,
                                const double* w, double* gin) {
    const int ho = d.out_h(), wo = d.out_w();
    const int k = d.kernel, s = d.stride, p = d.pad;
    double* gplane = gin + static_cast<size_t>(ci) * d.in_h * d.in_w;
    for (int co = 0; co < d.out_channels; ++co) {
        const double* goplane = gout + static_cast<size_t>(co) * ho * wo;
        const double* wbase = w + (static_cast<size_t>(ci) * d.out_channels + co) * k * k;
        for (int iy = 0; iy < d.in_h; ++iy) {
            double* grow = gplane + static_cast<size_t>(iy) * d.in_w;
            for (int ky = 0; ky < k; ++ky) {
                const int oy = iy * s - p + ky;
                if (oy < 0 || oy >= ho) continue;
                const double* gorow = goplane + static_cast<size_t>(oy) * wo;
                for (int kx = 0; kx < k; ++kx) {
                    const double wv = wbase[ky * k + kx];
                    if (wv == 0.0) continue;
                    int ix_lo = 0, ix_hi = d.in_w - 1;
                    while (ix_lo * s - p + kx < 0) ++ix_lo;
                    while (ix_hi >= ix_lo && ix_hi * s - p + kx >= wo) --ix_hi;
                    for (int ix = ix_lo; ix <= ix_hi; ++ix)
                        grow[ix] += wv * gorow[ix * s - p + kx];
                }
            }
        }
    }
}

// k=4, stride 2, pad 1: input position gathers four consecutive output taps
inline void convt2d_gin_k4(const ConvT2dDims& d, int ci, const double* gout, const double* w,
                           double* gin) {
    const int h = d.in_h, wd = d.in_w;
    const int ho = d.out_h(), wo = d.out_w();
    double* gplane = gin + static_cast<size_t>(ci) * h * wd;
    for (int co = 0; co < d.out_channels; ++co) {
        const double* goplane = gout + static_cast<size_t>(co) * ho * wo;
        const double* wbase = w + (static_cast<size_t>(ci) * d.out_channels + co) * 16;
        for (int iy = 0; iy < h; ++iy) {
            double* grow = gplane + static_cast<size_t>(iy) * wd;
            for (int ky = 0; ky < 4; ++ky) {
                const int oy = 2 * iy - 1 + ky;
                if (oy < 0 || oy >= ho) continue;
                const double* gorow = goplane + static_cast<size_t>(oy) * wo;
                const double w0 = wbase[ky * 4], w1 = wbase[ky * 4 + 1];
                const double w2 = wbase[ky * 4 + 2], w3 = wbase[ky * 4 + 3];
                // gin[ix] += w0*go[2ix-1] + w1*go[2ix] + w2*go[2ix+1] + w3*go[2ix+2]
                grow[0] += w1 * gorow[0] + w2 * gorow[1] + w3 * gorow[2];
                for (int ix = 1; ix < wd - 1; ++ix) {
                    const double* g2 = gorow + 2 * ix;
                    grow[ix] += w0 * g2[-1] + w1 * g2[0] + w2 * g2[1] + w3 * g2[2];
                }
                const double* gl = gorow + 2 * (wd - 1);
                grow[wd - 1] += w0 * gl[-1] + w1 * gl[0] + w2 * gl[1];
            }
        }
    }
}

inline void convt2d_gin_k2(const ConvT2dDims& d, int ci, const double* gout, const double* w,
                           double* gin) {
    const int h = d.in_h, wd = d.in_w;
    const int wo = d.out_w();
    double* gplane = gin + static_cast<size_t>(ci) * h * wd;
    for (int co = 0; co < d.out_channels; ++co) {
        const double* goplane = gout + static_cast<size_t>(co) * d.out_h() * wo;
        const double* wbase = w + (static_cast<size_t>(ci) * d.out_channels + co) * 4;
        for (int iy = 0; iy < h; ++iy) {
            double* grow = gplane + static_cast<size_t>(iy) * wd;
            for (int ky = 0; ky < 2; ++ky) {
                const double* gorow = goplane + static_cast<size_t>(2 * iy + ky) * wo;
                const double w0 = wbase[ky * 2], w1 = wbase[ky * 2 + 1];
                for (int ix = 0; ix < wd; ++ix)
                    grow[ix] += w0 * gorow[2 * ix] + w1 * gorow[2 * ix + 1];
            }
        }
    }
}

inline void convt2d_grad_input_channel(const ConvT2dDims& d, int ci, const double* gout,
                                       const double* w, double* gin) {
    if (d.stride == 2 && d.in_w >= 2) {
        if (d.kernel == 4 && d.pad == 1) {
            convt2d_gin_k4(d, ci, gout, w, gin);
            return;
        }
        if (d.kernel == 2 && d.pad == 0) {
            convt2d_gin_k2(d, ci, gout, w, gin);
            return;
        }
    }
    convt2d_gin_generic(d, ci, gout, w, gin);
}

// ---- transposed conv grad wrt weight ----

inline void convt2d_grad_weight_channel(const ConvT2dDims& d, int ci, const double* gout,
                                        const double* in, double* gw) {
    const int ho = d.out_h(), wo = d.out_w();
    const int k = d.kernel, s = d.stride, p = d.pad;
    const double* iplane = in + static_cast<size_t>(ci) * d.in_h * d.in_w;
    for (int co = 0; co < d.out_channels; ++co) {
        const double* goplane = gout + static_cast<size_t>(co) * ho * wo;
        double* gwbase = gw + (static_cast<size_t>(ci) * d.out_channels + co) * k * k;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                int ix_lo = 0, ix_hi = d.in_w - 1;
                while (ix_lo <= ix_hi && ix_lo * s - p + kx < 0) ++ix_lo;
                while (ix_hi >= ix_lo && ix_hi * s - p + kx >= wo) --ix_hi;
                const int n = ix_hi - ix_lo + 1;
                if (n <= 0) continue;
                double acc = 0.0;
                for (int iy = 0; iy < d.in_h; ++iy) {
                    const int oy = iy * s - p + ky;
                    if (oy < 0 || oy >= ho) continue;
                    const double* irow = iplane + static_cast<size_t>(iy) * d.in_w + ix_lo;
                    const double* gorow = goplane + static_cast<size_t>(oy) * wo +
                                          static_cast<size_t>(ix_lo) * s - p + kx;
                    // sum irow[i] * gorow[s*i]
                    double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
                    int i = 0;
                    for (; i + 4 <= n; i += 4) {
                        a0 += irow[i] * gorow[static_cast<size_t>(s) * i];
                        a1 += irow[i + 1] * gorow[static_cast<size_t>(s) * (i + 1)];
                        a2 += irow[i + 2] * gorow[static_cast<size_t>(s) * (i + 2)];
                        a3 += irow[i + 3] * gorow[static_cast<size_t>(s) * (i + 3)];
                    }
                    for (; i < n; ++i) a0 += irow[i] * gorow[static_cast<size_t>(s) * i];
                    acc += (a0 + a1) + (a2 + a3);
                }
                gwbase[ky * k + kx] += acc;
            }
        }
    }
}

// ---- pooling / matmul / warp / misc ----

inline void maxpool2d_channel(const Pool2dDims& d, int c, const double* in, double* out,
                              int64_t* argmax) {
    const int ho = d.out_h(), wo = d.out_w();
    const double* iplane = in + static_cast<size_t>(c) * d.in_h * d.in_w;
    const size_t obase = static_cast<size_t>(c) * ho * wo;
    for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
            double best = -1e308;
            int64_t best_idx = -1;
            for (int ky = 0; ky < d.kernel; ++ky) {
                const int iy = oy * d.stride + ky;
                if (iy >= d.in_h) break;
                for (int kx = 0; kx < d.kernel; ++kx) {
                    const int ix = ox * d.stride + kx;
                    if (ix >= d.in_w) break;
                    const double v = iplane[static_cast<size_t>(iy) * d.in_w + ix];
                    if (v > best) {
                        best = v;
                        best_idx = static_cast<int64_t>(c) * d.in_h * d.in_w +
                                   static_cast<int64_t>(iy) * d.in_w + ix;
                    }
                }
            }
            out[obase + static_cast<size_t>(oy) * wo + ox] = best;
            argmax[obase + static_cast<size_t>(oy) * wo + ox] = best_idx;
        }
    }
}

inline void matmul_row(int m, int k, int n, int row, const double* a, const double* b,
                       double* out) {
    (void)m;
    const double* arow = a + static_cast<size_t>(row) * k;
    double* orow = out + static_cast<size_t>(row) * n;
    std::memset(orow, 0, sizeof(double) * static_cast<size_t>(n));
    for (int kk = 0; kk < k; ++kk) {
        const double av = arow[kk];
        if (av == 0.0) continue;
        const double* brow = b + static_cast<size_t>(kk) * n;
        for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
}

inline void matmul_grad_a_row(int m, int k, int n, int row, const double* gout, const double* b,
                              double* ga) {
    (void)m;
    const double* gorow = gout + static_cast<size_t>(row) * n;
    double* garow = ga + static_cast<size_t>(row) * k;
    for (int kk = 0; kk < k; ++kk)
        garow[kk] += dot4(gorow, b + static_cast<size_t>(kk) * n, n);
}

inline void matmul_grad_b_row(int m, int k, int n, int row, const double* gout, const double* a,
                              double* gb) {
    // row indexes K here; gb[kk, :] += sum_i a[i, kk] * gout[i, :]
    double* gbrow = gb + static_cast<size_t>(row) * n;
    for (int i = 0; i < m; ++i) {
        const double av = a[static_cast<size_t>(i) * k + row];
        if (av == 0.0) continue;
        const double* gorow = gout + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) gbrow[j] += av * gorow[j];
    }
}

inline void warp_row(const double* src, int c, int h, int w, const double t_inv[9], double* dst,
                     int out_h, int out_w, int oy) {
    const size_t splane = static_cast<size_t>(h) * w;
    const size_t dplane = static_cast<size_t>(out_h) * out_w;
    for (int ox = 0; ox < out_w; ++ox) {
        const double x = static_cast<double>(ox), y = static_cast<double>(oy);
        const double denom = t_inv[6] * x + t_inv[7] * y + t_inv[8];
        double sx = 0.0, sy = 0.0;
        bool valid = std::abs(denom) > 1e-12;
        if (valid) {
            sx = (t_inv[0] * x + t_inv[1] * y + t_inv[2]) / denom;
            sy = (t_inv[3] * x + t_inv[4] * y + t_inv[5]) / denom;
            valid = std::isfinite(sx) && std::isfinite(sy);
        }
        for (int ch = 0; ch < c; ++ch) {
            double v = 0.0;
            if (valid) {
                const int x0 = static_cast<int>(std::floor(sx));
                const int y0 = static_cast<int>(std::floor(sy));
                const double fx = sx - x0, fy = sy - y0;
                const double* sp = src + static_cast<size_t>(ch) * splane;
                auto at = [&](int yy, int xx) -> double {
                    if (yy < 0 || yy >= h || xx < 0 || xx >= w) return 0.0;
                    return sp[static_cast<size_t>(yy) * w + xx];
                };
                v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
                    fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
            }
            dst[static_cast<size_t>(ch) * dplane + static_cast<size_t>(oy) * out_w + ox] = v;
        }
    }
}

inline void gaussian_row(double cx, double cy, double g, int w, double* row, int y) {
    const double sigma = g / 3.0;
    const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
    const double g2 = g * g;
    const double dy = static_cast<double>(y) - cy;
    for (int x = 0; x < w; ++x) {
        const double dx = static_cast<double>(x) - cx;
        const double d2 = dx * dx + dy * dy;
        row[x] = d2 > g2 ? 0.0 : std::exp(-d2 * inv2s2);
    }
}

constexpr size_t kSumBlock = 4096;

inline double sum_block(const double* x, size_t begin, size_t end) {
    double acc = 0.0;
    for (size_t i = begin; i < end; ++i) acc += x[i];
    return acc;
}

} // namespace tryon::kernels::detail
