#include "repcmp/nmf.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/Dense>

#include "repcmp/errors.hpp"
#include "repcmp/rng.hpp"

namespace repcmp {
namespace {

constexpr const char* kModule = "nmf-engine";

void require_nonnegative(const Matrix& a) {
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double v = a.data()[i];
        if (!std::isfinite(v)) throw DomainError(kModule, "activation matrix has a non-finite entry");
        if (v < 0.0)
            throw DomainError(kModule, "activation matrix has a negative entry at row " +
                                           std::to_string(i / a.cols()) + ", column " +
                                           std::to_string(i % a.cols()));
    }
}

double relative_change(double prev, double cur) {
    if (prev == 0.0) return cur == 0.0 ? 0.0 : 1.0;
    return std::abs(prev - cur) / prev;
}

void seeded_uniform(Matrix& z, Matrix& d, const NmfOptions& opts) {
    Rng rng(opts.seed);
    for (std::size_t i = 0; i < z.size(); ++i) z.data()[i] = rng.uniform(opts.init_floor, 1.0);
    for (std::size_t i = 0; i < d.size(); ++i) d.data()[i] = rng.uniform(opts.init_floor, 1.0);
}

// NNDSVD (Boutsidis & Gallopoulos). Exact zeros are lifted to init_floor so the
// multiplicative rule can still move them.
void nndsvd(const Matrix& a, Matrix& z, Matrix& d, const NmfOptions& opts) {
    Eigen::MatrixXd m(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) m(i, j) = a(i, j);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto& u = svd.matrixU();
    const auto& v = svd.matrixV();
    const auto& s = svd.singularValues();

    for (std::size_t c = 0; c < opts.k; ++c) {
        const Eigen::Index ci = static_cast<Eigen::Index>(c);
        Eigen::VectorXd uc = u.col(ci);
        Eigen::VectorXd vc = v.col(ci);
        Eigen::VectorXd zc, dc;
        if (c == 0) {
            // Leading singular vectors of a non-negative matrix can be taken non-negative.
            zc = std::sqrt(s(0)) * uc.cwiseAbs();
            dc = std::sqrt(s(0)) * vc.cwiseAbs();
        } else {
            Eigen::VectorXd up = uc.cwiseMax(0.0), un = (-uc).cwiseMax(0.0);
            Eigen::VectorXd vp = vc.cwiseMax(0.0), vn = (-vc).cwiseMax(0.0);
            const double pos = up.norm() * vp.norm();
            const double neg = un.norm() * vn.norm();
            const bool use_pos = pos >= neg;
            Eigen::VectorXd x = use_pos ? up : un;
            Eigen::VectorXd y = use_pos ? vp : vn;
            const double scale = use_pos ? pos : neg;
            if (scale > 0.0) {
                zc = std::sqrt(s(ci) * scale) * x / x.norm();
                dc = std::sqrt(s(ci) * scale) * y / y.norm();
            } else {
                zc = Eigen::VectorXd::Zero(uc.size());
                dc = Eigen::VectorXd::Zero(vc.size());
            }
        }
        for (std::size_t i = 0; i < z.rows(); ++i)
            z(i, c) = std::max(zc(static_cast<Eigen::Index>(i)), opts.init_floor);
        for (std::size_t j = 0; j < d.rows(); ++j)
            d(j, c) = std::max(dc(static_cast<Eigen::Index>(j)), opts.init_floor);
    }
}

void normalize_dictionary(Matrix& z, Matrix& d) {
    for (std::size_t c = 0; c < d.cols(); ++c) {
        double sq = 0.0;
        for (std::size_t j = 0; j < d.rows(); ++j) sq += d(j, c) * d(j, c);
        const double norm = std::sqrt(sq);
        if (norm > 0.0) {
            for (std::size_t j = 0; j < d.rows(); ++j) d(j, c) /= norm;
            for (std::size_t i = 0; i < z.rows(); ++i) z(i, c) *= norm;
        } else {
            for (std::size_t i = 0; i < z.rows(); ++i) z(i, c) = 0.0;
        }
    }
}

}  // namespace

void NmfOptions::validate() const {
    if (k < 1) throw ValidationError(kModule, "k must be >= 1");
    if (max_iters < 1) throw ValidationError(kModule, "max_iters must be >= 1");
    if (!(rel_tol > 0.0)) throw ValidationError(kModule, "rel_tol must be > 0");
    if (!(init_floor > 0.0) || init_floor > 1.0) throw ValidationError(kModule, "init_floor must be in (0, 1]");
}

Factorization fit_nmf(const Matrix& a, const NmfOptions& opts) {
    opts.validate();
    if (a.empty()) throw DimensionError(kModule, "activation matrix is empty");
    if (opts.k > std::min(a.rows(), a.cols()))
        throw DimensionError(kModule, "k=" + std::to_string(opts.k) + " exceeds min(n, p)=" +
                                          std::to_string(std::min(a.rows(), a.cols())));
    require_nonnegative(a);

    const auto exec = opts.exec;
    Matrix z(a.rows(), opts.k);
    Matrix d(a.cols(), opts.k);
    if (opts.init == NmfInit::Nndsvd) {
        nndsvd(a, z, d, opts);
    } else {
        seeded_uniform(z, d, opts);
    }

    Factorization f;
    f.objective_trace.reserve(opts.max_iters);
    double prev = kernels::residual_norm(exec, a, z, d);

    Matrix num, den, g;
    for (std::size_t it = 0; it < opts.max_iters; ++it) {
        // codes: Z <- Z * (A D) / (Z D^T D)
        kernels::matmul(exec, a, d, num);
        kernels::gram(exec, d, g);
        if (opts.solver == NmfSolver::Hals) {
            kernels::hals_sweep(exec, z, num, g);
        } else {
            kernels::matmul(exec, z, g, den);
            kernels::multiplicative_update(exec, z, num, den);
        }
        // dictionary: D <- D * (A^T Z) / (D Z^T Z)
        kernels::matmul_tn(exec, a, z, num);
        kernels::gram(exec, z, g);
        if (opts.solver == NmfSolver::Hals) {
            kernels::hals_sweep(exec, d, num, g);
        } else {
            kernels::matmul(exec, d, g, den);
            kernels::multiplicative_update(exec, d, num, den);
        }

        const double cur = kernels::residual_norm(exec, a, z, d);
        f.objective_trace.push_back(cur);
        f.iterations = it + 1;
        if (relative_change(prev, cur) < opts.rel_tol) {
            f.converged = true;
            break;
        }
        prev = cur;
    }

    normalize_dictionary(z, d);
    f.codes = std::move(z);
    f.dictionary = std::move(d);
    return f;
}

Matrix project_codes(const Matrix& a_new, const Matrix& dictionary, const ProjectOptions& opts) {
    if (a_new.cols() != dictionary.rows())
        throw DimensionError(kModule, "activation width " + std::to_string(a_new.cols()) +
                                          " does not match dictionary rows " + std::to_string(dictionary.rows()));
    if (dictionary.cols() == 0) throw DimensionError(kModule, "dictionary has no atoms");
    require_nonnegative(a_new);
    require_nonnegative(dictionary);

    const auto exec = opts.exec;
    Matrix z(a_new.rows(), dictionary.cols(), 1.0);
    Matrix num, den, g;
    kernels::matmul(exec, a_new, dictionary, num);
    kernels::gram(exec, dictionary, g);
    double prev = kernels::residual_norm(exec, a_new, z, dictionary);
    for (std::size_t it = 0; it < opts.max_iters; ++it) {
        kernels::matmul(exec, z, g, den);
        kernels::multiplicative_update(exec, z, num, den);
        const double cur = kernels::residual_norm(exec, a_new, z, dictionary);
        if (relative_change(prev, cur) < opts.rel_tol) break;
        prev = cur;
    }
    return z;
}

double reconstruction_error(const Matrix& a, const Matrix& codes, const Matrix& dictionary) {
    if (codes.rows() != a.rows() || dictionary.rows() != a.cols() || codes.cols() != dictionary.cols())
        throw DimensionError(kModule, "reconstruction_error: incompatible shapes");
    return kernels::residual_norm(kernels::Exec::Parallel, a, codes, dictionary);
}

std::vector<std::size_t> row_argmax(const Matrix& m) {
    std::vector<std::size_t> out(m.rows(), 0);
    for (std::size_t i = 0; i < m.rows(); ++i) {
        auto r = m.row(i);
        // max_element returns the first maximum, which is the lowest index.
        out[i] = static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
    }
    return out;
}

}  // namespace repcmp
