#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>

namespace prehab {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Deterministic Gaussian sampler (Box-Muller over mt19937_64).
/// Used instead of std::normal_distribution so that streams are
/// bit-identical across standard library implementations.
class GaussianRng {
public:
    explicit GaussianRng(std::uint64_t seed) : engine_(seed) {}

    double next();
    Matrix matrix(Eigen::Index rows, Eigen::Index cols);
    Vector vector(Eigen::Index n);

    /// Uniform integer in [0, n).
    std::uint64_t uniform_index(std::uint64_t n);

private:
    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

struct SvdResult {
    Matrix u;      // m x k, orthonormal columns
    Vector sigma;  // k, non-increasing, >= 0
    Matrix v;      // n x k, orthonormal columns

    Matrix reconstruct() const { return u * sigma.asDiagonal() * v.transpose(); }
};

/// Full SVD by one-sided Jacobi rotations. Deterministic: fixed cyclic
/// pair order, convergence threshold 1e-12 on relative off-diagonal
/// energy, 60-sweep cap. Columns of u are sign-normalized so the first
/// entry of largest magnitude is positive.
/// Throws std::runtime_error on non-convergence (names the matrix size),
/// std::invalid_argument on non-finite input.
SvdResult svd(const Matrix& m);

/// Leading-r factors of a decomposition. r must lie in [1, k].
SvdResult truncate(const SvdResult& s, Eigen::Index r);

/// Lower-triangular X with X * X^T = s_sym + damping * I, where s_sym is
/// the symmetrized input. Throws std::runtime_error (advising a larger
/// damping) if a pivot is not positive.
Matrix cholesky_factor(const Matrix& s, double damping = 0.0);

/// Inverse of a lower-triangular matrix by forward substitution.
/// Throws if any diagonal entry is below 1e-12 in magnitude.
Matrix invert_lower_triangular(const Matrix& x);

/// Eigendecomposition of a symmetric matrix by cyclic two-sided Jacobi.
/// Returns eigenvalues (descending) and the matching orthonormal
/// eigenvector columns.
struct SymmetricEig {
    Vector values;
    Matrix vectors;
};
SymmetricEig symmetric_eig(const Matrix& s);

double nuclear_norm(const Matrix& m);

/// Stable-rank estimate from a Gaussian range sketch: the Frobenius
/// energy is exact while the nuclear norm is taken on the projection of
/// m onto the sketched column space. Exact when sketch_cols reaches
/// min(rows, cols); deterministic for a fixed seed.
double sketch_stable_rank(const Matrix& m, Eigen::Index sketch_cols, std::uint64_t seed);

}  // namespace prehab
