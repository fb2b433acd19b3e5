#include <algorithm>
#include <cmath>

#include "repcmp/kernels.hpp"

namespace repcmp::kernels::serial {

void matmul(const Matrix& a, const Matrix& b, Matrix& out) {
    out = Matrix(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t c = 0; c < b.cols(); ++c) {
            double s = 0.0;
            for (std::size_t l = 0; l < a.cols(); ++l) s += a(i, l) * b(l, c);
            out(i, c) = s;
        }
    }
}

void matmul_tn(const Matrix& a, const Matrix& b, Matrix& out) {
    out = Matrix(a.cols(), b.cols());
    for (std::size_t r = 0; r < a.cols(); ++r) {
        for (std::size_t c = 0; c < b.cols(); ++c) {
            double s = 0.0;
            for (std::size_t i = 0; i < a.rows(); ++i) s += a(i, r) * b(i, c);
            out(r, c) = s;
        }
    }
}

void gram(const Matrix& a, Matrix& out) { matmul_tn(a, a, out); }

void multiplicative_update(Matrix& x, const Matrix& num, const Matrix& den) {
    for (std::size_t i = 0; i < x.size(); ++i) {
        x.data()[i] = x.data()[i] * num.data()[i] / std::max(den.data()[i], kDenominatorFloor);
    }
}

void hals_sweep(Matrix& x, const Matrix& num, const Matrix& g) {
    const std::size_t k = x.cols();
    for (std::size_t i = 0; i < x.rows(); ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            double s = 0.0;
            for (std::size_t l = 0; l < k; ++l) s += x(i, l) * g(l, j);
            const double v = x(i, j) + (num(i, j) - s) / std::max(g(j, j), kDenominatorFloor);
            x(i, j) = std::max(0.0, v);
        }
    }
}

double residual_norm(const Matrix& a, const Matrix& z, const Matrix& d) {
    double total = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) {
            double approx = 0.0;
            for (std::size_t l = 0; l < z.cols(); ++l) approx += z(i, l) * d(j, l);
            const double r = a(i, j) - approx;
            row += r * r;
        }
        total += row;
    }
    return std::sqrt(total);
}

}  // namespace repcmp::kernels::serial
