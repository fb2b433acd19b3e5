#include <omp.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "repcmp/kernels.hpp"

namespace repcmp::kernels {
namespace omp {

void matmul(const Matrix& a, const Matrix& b, Matrix& out) {
    out = Matrix(a.rows(), b.cols());
    const auto n = static_cast<std::ptrdiff_t>(a.rows());
    const std::size_t m = a.cols();
    const std::size_t k = b.cols();
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        const double* ai = a.row(static_cast<std::size_t>(i)).data();
        double* oi = out.row(static_cast<std::size_t>(i)).data();
        for (std::size_t c = 0; c < k; ++c) {
            double s = 0.0;
            for (std::size_t l = 0; l < m; ++l) s += ai[l] * b(l, c);
            oi[c] = s;
        }
    }
}

void matmul_tn(const Matrix& a, const Matrix& b, Matrix& out) {
    out = Matrix(a.cols(), b.cols());
    const auto p = static_cast<std::ptrdiff_t>(a.cols());
    const std::size_t n = a.rows();
    const std::size_t k = b.cols();
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t r = 0; r < p; ++r) {
        const auto ur = static_cast<std::size_t>(r);
        for (std::size_t c = 0; c < k; ++c) {
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) s += a(i, ur) * b(i, c);
            out(ur, c) = s;
        }
    }
}

void gram(const Matrix& a, Matrix& out) { matmul_tn(a, a, out); }

void multiplicative_update(Matrix& x, const Matrix& num, const Matrix& den) {
    const auto n = static_cast<std::ptrdiff_t>(x.size());
    double* xd = x.data();
    const double* nd = num.data();
    const double* dd = den.data();
#pragma omp parallel for simd schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        xd[i] = xd[i] * nd[i] / std::max(dd[i], kDenominatorFloor);
    }
}

void hals_sweep(Matrix& x, const Matrix& num, const Matrix& g) {
    const auto rows = static_cast<std::ptrdiff_t>(x.rows());
    const std::size_t k = x.cols();
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < rows; ++i) {
        double* xi = x.row(static_cast<std::size_t>(i)).data();
        const double* ni = num.row(static_cast<std::size_t>(i)).data();
        for (std::size_t j = 0; j < k; ++j) {
            double s = 0.0;
            for (std::size_t l = 0; l < k; ++l) s += xi[l] * g(l, j);
            xi[j] = std::max(0.0, xi[j] + (ni[j] - s) / std::max(g(j, j), kDenominatorFloor));
        }
    }
}

double residual_norm(const Matrix& a, const Matrix& z, const Matrix& d) {
    // Per-row partials, summed serially afterwards so the result does not
    // depend on how rows were split across threads.
    std::vector<double> partial(a.rows(), 0.0);
    const auto n = static_cast<std::ptrdiff_t>(a.rows());
    const std::size_t p = a.cols();
    const std::size_t k = z.cols();
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        double row = 0.0;
        for (std::size_t j = 0; j < p; ++j) {
            double approx = 0.0;
            for (std::size_t l = 0; l < k; ++l) approx += z(ui, l) * d(j, l);
            const double r = a(ui, j) - approx;
            row += r * r;
        }
        partial[ui] = row;
    }
    double total = 0.0;
    for (double v : partial) total += v;
    return std::sqrt(total);
}

}  // namespace omp

void matmul(Exec e, const Matrix& a, const Matrix& b, Matrix& out) {
    e == Exec::Parallel ? omp::matmul(a, b, out) : serial::matmul(a, b, out);
}
void matmul_tn(Exec e, const Matrix& a, const Matrix& b, Matrix& out) {
    e == Exec::Parallel ? omp::matmul_tn(a, b, out) : serial::matmul_tn(a, b, out);
}
void gram(Exec e, const Matrix& a, Matrix& out) {
    e == Exec::Parallel ? omp::gram(a, out) : serial::gram(a, out);
}
void multiplicative_update(Exec e, Matrix& x, const Matrix& num, const Matrix& den) {
    e == Exec::Parallel ? omp::multiplicative_update(x, num, den) : serial::multiplicative_update(x, num, den);
}
void hals_sweep(Exec e, Matrix& x, const Matrix& num, const Matrix& g) {
    e == Exec::Parallel ? omp::hals_sweep(x, num, g) : serial::hals_sweep(x, num, g);
}
double residual_norm(Exec e, const Matrix& a, const Matrix& z, const Matrix& d) {
    return e == Exec::Parallel ? omp::residual_norm(a, z, d) : serial::residual_norm(a, z, d);
}

}  // namespace repcmp::kernels
