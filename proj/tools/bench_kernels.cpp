// Timing harness comparing the serial reference kernels against the
// OpenMP variants on training-relevant shapes.

#include "tryon/kernels.hpp"
#include "tryon/rng.hpp"

#include <omp.h>

#include <chrono>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

using namespace tryon;
using Clock = std::chrono::steady_clock;

namespace {

double time_ms(const std::function<void()>& fn, int reps) {
    fn(); // warm up
    const auto t0 = Clock::now();
    for (int i = 0; i < reps; ++i) fn();
    const auto t1 = Clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

void row(const std::string& name, double serial_ms, double parallel_ms) {
    std::printf("%-34s %10.3f %10.3f %8.2fx\n", name.c_str(), serial_ms, parallel_ms,
                serial_ms / parallel_ms);
}

} // namespace

int main(int argc, char** argv) {
    int reps = 20;
    if (argc > 1) reps = std::max(1, std::atoi(argv[1]));
    std::printf("threads: %d, reps: %d\n", omp_get_max_threads(), reps);
    std::printf("%-34s %10s %10s %8s\n", "kernel", "serial ms", "omp ms", "speedup");

    Rng rng(7);
    auto fill = [&](std::vector<double>& v) {
        for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    };

    {
        kernels::Conv2dDims d{16, 16, 64, 64, 3, 1, 1};
        std::vector<double> in(16ull * 64 * 64), w(16ull * 16 * 9), out(16ull * 64 * 64);
        fill(in);
        fill(w);
        row("conv2d fwd 16x16 @64x64 k3",
            time_ms([&] { kernels::ref::conv2d_forward(d, in.data(), w.data(), out.data()); },
                    reps),
            time_ms([&] { kernels::omp::conv2d_forward(d, in.data(), w.data(), out.data()); },
                    reps));
        std::vector<double> gin(in.size(), 0.0), gw(w.size(), 0.0);
        row("conv2d grad-in 16x16 @64x64",
            time_ms([&] { kernels::ref::conv2d_grad_input(d, out.data(), w.data(), gin.data()); },
                    reps),
            time_ms([&] { kernels::omp::conv2d_grad_input(d, out.data(), w.data(), gin.data()); },
                    reps));
        row("conv2d grad-w 16x16 @64x64",
            time_ms(
                [&] { kernels::ref::conv2d_grad_weight(d, out.data(), in.data(), gw.data()); },
                reps),
            time_ms(
                [&] { kernels::omp::conv2d_grad_weight(d, out.data(), in.data(), gw.data()); },
                reps));
    }
    {
        kernels::Conv2dDims d{64, 128, 8, 8, 3, 2, 1};
        std::vector<double> in(64ull * 8 * 8), w(128ull * 64 * 9), out(128ull * 4 * 4);
        fill(in);
        fill(w);
        row("conv2d fwd 64x128 @8x8 k3 s2",
            time_ms([&] { kernels::ref::conv2d_forward(d, in.data(), w.data(), out.data()); },
                    reps),
            time_ms([&] { kernels::omp::conv2d_forward(d, in.data(), w.data(), out.data()); },
                    reps));
    }
    {
        kernels::ConvT2dDims d{128, 64, 8, 8, 4, 2, 1};
        std::vector<double> in(128ull * 8 * 8), w(128ull * 64 * 16), out(64ull * 16 * 16);
        fill(in);
        fill(w);
        row("convT fwd 128x64 @8->16 k4",
            time_ms([&] { kernels::ref::convt2d_forward(d, in.data(), w.data(), out.data()); },
                    reps),
            time_ms([&] { kernels::omp::convt2d_forward(d, in.data(), w.data(), out.data()); },
                    reps));
    }
    {
        const int s = 512;
        std::vector<double> src(3ull * s * s), dst(3ull * s * s);
        fill(src);
        const double tinv[9] = {0.97, 0.02, 4.0, -0.015, 1.01, -2.0, 1e-5, -2e-5, 1.0};
        row("warp bilinear 3ch 512x512",
            time_ms([&] { kernels::ref::warp_bilinear(src.data(), 3, s, s, tinv, dst.data(),
                                                      s, s); },
                    reps),
            time_ms([&] { kernels::omp::warp_bilinear(src.data(), 3, s, s, tinv, dst.data(),
                                                      s, s); },
                    reps));
    }
    {
        std::vector<double> h(512ull * 512);
        row("gaussian heatmap 512x512",
            time_ms([&] { kernels::ref::gaussian_heatmap(200, 300, 45, 512, 512, h.data()); },
                    reps),
            time_ms([&] { kernels::omp::gaussian_heatmap(200, 300, 45, 512, 512, h.data()); },
                    reps));
    }
    {
        std::vector<double> x(1ull << 22);
        fill(x);
        double sink = 0.0;
        row("block sum 4M doubles",
            time_ms([&] { sink += kernels::ref::block_sum(x.data(), x.size()); }, reps),
            time_ms([&] { sink += kernels::omp::block_sum(x.data(), x.size()); }, reps));
        if (sink == 42.0) std::printf("#\n");
    }
    {
        const int m = 256, k = 256, n = 256;
        std::vector<double> a(1ull * m * k), b(1ull * k * n), out(1ull * m * n);
        fill(a);
        fill(b);
        row("matmul 256^3",
            time_ms([&] { kernels::ref::matmul(m, k, n, a.data(), b.data(), out.data()); },
                    reps),
            time_ms([&] { kernels::omp::matmul(m, k, n, a.data(), b.data(), out.data()); },
                    reps));
    }
    return 0;
}
