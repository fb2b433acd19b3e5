// Serial reference vs OpenMP kernels: wall time per kernel and for whole NMF
// fits, plus a bitwise agreement check on every result.
//
//   bench_nmf [--reps N]

#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <string>

#include <omp.h>

#include "repcmp/kernels.hpp"
#include "repcmp/nmf.hpp"
#include "repcmp/rng.hpp"

using namespace repcmp;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
    Rng rng(seed);
    Matrix m(r, c);
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform01();
    return m;
}

bool same_bits(const Matrix& a, const Matrix& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

double best_ms(int reps, const std::function<void()>& fn) {
    double best = 1e300;
    for (int r = 0; r < reps; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        best = std::min(best, std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    }
    return best;
}

void row(const char* what, double serial, double parallel, bool equal) {
    std::printf("%-34s %10.2f %10.2f %8.2fx  %s\n", what, serial, parallel, serial / parallel,
                equal ? "bitwise-equal" : "MISMATCH");
}

}  // namespace

int main(int argc, char** argv) {
    int reps = 5;
    for (int i = 1; i + 1 < argc; ++i)
        if (std::string(argv[i]) == "--reps") reps = std::stoi(argv[i + 1]);

    std::printf("threads: %d, best of %d\n", omp_get_max_threads(), reps);
    std::printf("%-34s %10s %10s %9s\n", "case", "serial ms", "omp ms", "speedup");

    // Shapes of one unit fit: fit_count x channels at the deepest layer.
    const std::size_t n = 300, p = 2048, k = 10;
    const auto a = random_matrix(n, p, 1);
    const auto z = random_matrix(n, k, 2);
    const auto d = random_matrix(p, k, 3);

    Matrix s_out, o_out;
    row("matmul A D (300x2048 * 2048x10)", best_ms(reps, [&] { kernels::serial::matmul(a, d, s_out); }),
        best_ms(reps, [&] { kernels::omp::matmul(a, d, o_out); }), same_bits(s_out, o_out));
    row("matmul_tn A^T Z (2048x300 * 300x10)", best_ms(reps, [&] { kernels::serial::matmul_tn(a, z, s_out); }),
        best_ms(reps, [&] { kernels::omp::matmul_tn(a, z, o_out); }), same_bits(s_out, o_out));
    row("gram D^T D (10x10)", best_ms(reps, [&] { kernels::serial::gram(d, s_out); }),
        best_ms(reps, [&] { kernels::omp::gram(d, o_out); }), same_bits(s_out, o_out));
    double rs = 0, ro = 0;
    row("residual ||A - Z D^T||", best_ms(reps, [&] { rs = kernels::serial::residual_norm(a, z, d); }),
        best_ms(reps, [&] { ro = kernels::omp::residual_norm(a, z, d); }), rs == ro);

    for (auto solver : {NmfSolver::Multiplicative, NmfSolver::Hals}) {
        NmfOptions opts;
        opts.k = k;
        opts.seed = 4;
        opts.max_iters = 200;
        opts.rel_tol = 1e-300;  // effectively run all max_iters
        opts.solver = solver;
        Factorization fs, fo;
        opts.exec = kernels::Exec::Serial;
        const double ts = best_ms(reps, [&] { fs = fit_nmf(a, opts); });
        opts.exec = kernels::Exec::Parallel;
        const double to = best_ms(reps, [&] { fo = fit_nmf(a, opts); });
        row(solver == NmfSolver::Hals ? "fit_nmf HALS, 200 iters" : "fit_nmf MU, 200 iters", ts, to,
            same_bits(fs.codes, fo.codes) && same_bits(fs.dictionary, fo.dictionary));
    }
    return 0;
}
