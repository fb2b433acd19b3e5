#pragma once

#include "repcmp/matrix.hpp"

// Dense kernels behind the factorization solvers. Each kernel exists twice:
// `serial` is the straightforward reference, `omp` splits output rows across
// OpenMP threads. Every output element (and every per-row partial sum) is
// accumulated in the same order by both, so results are bitwise identical
// regardless of thread count.
namespace repcmp::kernels {

enum class Exec { Serial, Parallel };

/// Smallest denominator used by multiplicative updates.
inline constexpr double kDenominatorFloor = 1e-12;

namespace serial {

/// out = a * b          (a: n x m, b: m x k)
void matmul(const Matrix& a, const Matrix& b, Matrix& out);
/// out = a^T * b        (a: n x m, b: n x k)
void matmul_tn(const Matrix& a, const Matrix& b, Matrix& out);
/// out = a^T * a        (k x k)
void gram(const Matrix& a, Matrix& out);
/// x <- x * num / max(den, floor), element-wise.
void multiplicative_update(Matrix& x, const Matrix& num, const Matrix& den);
/// One HALS sweep over the columns of x: x_j <- max(0, x_j + (num_j - x * gram_j) / gram_jj).
void hals_sweep(Matrix& x, const Matrix& num, const Matrix& gram);
/// ||a - z * d^T||_F
double residual_norm(const Matrix& a, const Matrix& z, const Matrix& d);

}  // namespace serial

namespace omp {

void matmul(const Matrix& a, const Matrix& b, Matrix& out);
void matmul_tn(const Matrix& a, const Matrix& b, Matrix& out);
void gram(const Matrix& a, Matrix& out);
void multiplicative_update(Matrix& x, const Matrix& num, const Matrix& den);
void hals_sweep(Matrix& x, const Matrix& num, const Matrix& gram);
double residual_norm(const Matrix& a, const Matrix& z, const Matrix& d);

}  // namespace omp

// Policy dispatch.
void matmul(Exec e, const Matrix& a, const Matrix& b, Matrix& out);
void matmul_tn(Exec e, const Matrix& a, const Matrix& b, Matrix& out);
void gram(Exec e, const Matrix& a, Matrix& out);
void multiplicative_update(Exec e, Matrix& x, const Matrix& num, const Matrix& den);
void hals_sweep(Exec e, Matrix& x, const Matrix& num, const Matrix& gram);
double residual_norm(Exec e, const Matrix& a, const Matrix& z, const Matrix& d);

}  // namespace repcmp::kernels
