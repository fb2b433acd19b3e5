#pragma once

#include <cstdint>
#include <vector>

#include "repcmp/kernels.hpp"
#include "repcmp/matrix.hpp"

namespace repcmp {

enum class NmfInit { SeededUniform, Nndsvd };
enum class NmfSolver { Multiplicative, Hals };

struct NmfOptions {
    std::size_t k = 10;
    std::size_t max_iters = 500;
    double rel_tol = 1e-5;
    std::uint64_t seed = 0;
    NmfInit init = NmfInit::SeededUniform;
    NmfSolver solver = NmfSolver::Multiplicative;
    /// Lower bound of the seeded-uniform initialisation interval [eps, 1].
    double init_floor = 1e-4;
    kernels::Exec exec = kernels::Exec::Parallel;

    void validate() const;
};

/// A ~= codes * dictionary^T, with A n x p, codes n x k, dictionary p x k.
struct Factorization {
    Matrix dictionary;
    Matrix codes;
    /// Residual Frobenius norm after each iteration.
    std::vector<double> objective_trace;
    bool converged = false;
    std::size_t iterations = 0;
};

/// Non-negative matrix factorization of `a`. Deterministic for fixed inputs.
/// Dictionary columns are normalised to unit length at the end, with the
/// scale folded into the codes.
///
/// Throws DomainError on negative or non-finite input and DimensionError when
/// k exceeds min(n, p).
Factorization fit_nmf(const Matrix& a, const NmfOptions& opts);

struct ProjectOptions {
    std::size_t max_iters = 2000;
    double rel_tol = 1e-10;
    kernels::Exec exec = kernels::Exec::Parallel;
};

/// Non-negative codes for new rows against a frozen dictionary, using the
/// multiplicative rule on the codes only.
Matrix project_codes(const Matrix& a_new, const Matrix& dictionary, const ProjectOptions& opts = {});

/// ||a - codes * dictionary^T||_F
double reconstruction_error(const Matrix& a, const Matrix& codes, const Matrix& dictionary);

/// Row-wise argmax; ties resolve to the lowest column.
std::vector<std::size_t> row_argmax(const Matrix& m);

}  // namespace repcmp
