#include <doctest.h>

#include <cstring>

#include "repcmp/kernels.hpp"
#include "repcmp/rng.hpp"
#include "support/oracles.hpp"

using namespace repcmp;

namespace {

Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c) {
    Matrix m(r, c);
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform01();
    return m;
}

bool bitwise_equal(const Matrix& a, const Matrix& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() &&
           std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("serial and OpenMP kernels agree bitwise") {
    Rng rng(11);
    for (int rep = 0; rep < 30; ++rep) {
        const std::size_t n = 1 + rng.uniform_index(120), m = 1 + rng.uniform_index(40), k = 1 + rng.uniform_index(9);
        const auto a = random_matrix(rng, n, m), b = random_matrix(rng, m, k), c = random_matrix(rng, n, k);

        Matrix s, o;
        kernels::serial::matmul(a, b, s);
        kernels::omp::matmul(a, b, o);
        CHECK(bitwise_equal(s, o));

        kernels::serial::matmul_tn(a, c, s);
        kernels::omp::matmul_tn(a, c, o);
        CHECK(bitwise_equal(s, o));

        kernels::serial::gram(c, s);
        kernels::omp::gram(c, o);
        CHECK(bitwise_equal(s, o));

        Matrix xs = c, xo = c;
        const auto num = random_matrix(rng, n, k), den = random_matrix(rng, n, k);
        kernels::serial::multiplicative_update(xs, num, den);
        kernels::omp::multiplicative_update(xo, num, den);
        CHECK(bitwise_equal(xs, xo));

        Matrix g;
        kernels::serial::gram(random_matrix(rng, m, k), g);
        for (std::size_t j = 0; j < k; ++j) g(j, j) += 1.0;
        xs = c;
        xo = c;
        kernels::serial::hals_sweep(xs, num, g);
        kernels::omp::hals_sweep(xo, num, g);
        CHECK(bitwise_equal(xs, xo));

        const auto d = random_matrix(rng, m, k);
        CHECK(kernels::serial::residual_norm(a, c, d) == kernels::omp::residual_norm(a, c, d));
    }
}

TEST_CASE("kernels match naive products") {
    Rng rng(5);
    const auto a = random_matrix(rng, 13, 7), b = random_matrix(rng, 7, 4), z = random_matrix(rng, 13, 4),
               d = random_matrix(rng, 7, 4);
    Matrix out;
    kernels::matmul(kernels::Exec::Parallel, a, b, out);
    const auto ref = oracle::product(a, b);
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out.data()[i] == doctest::Approx(ref.data()[i]).epsilon(1e-13));

    kernels::matmul_tn(kernels::Exec::Serial, a, z, out);
    const auto ref_tn = oracle::product(a.transposed(), z);
    for (std::size_t i = 0; i < out.size(); ++i)
        CHECK(out.data()[i] == doctest::Approx(ref_tn.data()[i]).epsilon(1e-13));

    CHECK(kernels::residual_norm(kernels::Exec::Parallel, a, z, d) ==
          doctest::Approx(oracle::residual(a, z, d)).epsilon(1e-12));
}

TEST_CASE("multiplicative update floors the denominator and stays non-negative") {
    Matrix x(1, 3, 2.0), num(1, 3, 1.0), den(1, 3, 0.0);
    den(0, 1) = 4.0;
    kernels::multiplicative_update(kernels::Exec::Serial, x, num, den);
    CHECK(x(0, 0) == doctest::Approx(2.0 / kernels::kDenominatorFloor));
    CHECK(x(0, 1) == doctest::Approx(0.5));
    Matrix g(3, 3, 0.0);
    for (int j = 0; j < 3; ++j) g(j, j) = 1.0;
    Matrix neg(1, 3, -10.0);
    kernels::hals_sweep(kernels::Exec::Parallel, x, neg, g);
    for (double v : x.values()) CHECK(v >= 0.0);
}
