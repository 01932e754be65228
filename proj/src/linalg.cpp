#include "prehab/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace prehab {

double GaussianRng::next() {
    if (have_spare_) {
        have_spare_ = false;
        return spare_;
    }
    // Box-Muller; u1 kept away from zero.
    const double inv = 1.0 / (static_cast<double>(std::mt19937_64::max()) + 2.0);
    double u1 = (static_cast<double>(engine_()) + 1.0) * inv;
    double u2 = (static_cast<double>(engine_()) + 1.0) * inv;
    double radius = std::sqrt(-2.0 * std::log(u1));
    double angle = 2.0 * M_PI * u2;
    spare_ = radius * std::sin(angle);
    have_spare_ = true;
    return radius * std::cos(angle);
}

Matrix GaussianRng::matrix(Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = next();
    return m;
}

Vector GaussianRng::vector(Eigen::Index n) {
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = next();
    return v;
}

std::uint64_t GaussianRng::uniform_index(std::uint64_t n) {
    // Rejection sampling keeps the draw unbiased.
    std::uint64_t limit = std::mt19937_64::max() - std::mt19937_64::max() % n;
    std::uint64_t x;
    do {
        x = engine_();
    } while (x >= limit);
    return x % n;
}

namespace {

constexpr double kJacobiTol = 1e-12;
constexpr int kJacobiMaxSweeps = 60;

void require_finite(const Matrix& m, const char* what) {
    if (!m.allFinite()) throw std::invalid_argument(std::string(what) + ": non-finite entries");
}

// One-sided Jacobi on a tall (m >= n) working copy: orthogonalizes the
// columns of a in place while accumulating the rotations into v.
void jacobi_orthogonalize(Matrix& a, Matrix& v) {
    const Eigen::Index n = a.cols();
    for (int sweep = 0; sweep < kJacobiMaxSweeps; ++sweep) {
        bool rotated = false;
        for (Eigen::Index p = 0; p + 1 < n; ++p) {
            for (Eigen::Index q = p + 1; q < n; ++q) {
                double app = a.col(p).squaredNorm();
                double aqq = a.col(q).squaredNorm();
                double apq = a.col(p).dot(a.col(q));
                if (std::abs(apq) <= kJacobiTol * std::sqrt(app * aqq)) continue;
                rotated = true;
                double tau = (aqq - app) / (2.0 * apq);
                double t = (tau >= 0.0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                double c = 1.0 / std::sqrt(1.0 + t * t);
                double s = c * t;
                for (Eigen::Index i = 0; i < a.rows(); ++i) {
                    double ap = a(i, p), aq = a(i, q);
                    a(i, p) = c * ap - s * aq;
                    a(i, q) = s * ap + c * aq;
                }
                for (Eigen::Index i = 0; i < v.rows(); ++i) {
                    double vp = v(i, p), vq = v(i, q);
                    v(i, p) = c * vp - s * vq;
                    v(i, q) = s * vp + c * vq;
                }
            }
        }
        if (!rotated) return;
    }
    throw std::runtime_error("svd: one-sided Jacobi failed to converge after " +
                             std::to_string(kJacobiMaxSweeps) + " sweeps on " +
                             std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                             " matrix");
}

// Replaces u-columns whose singular value vanished with an orthonormal
// completion against the columns already present.
void complete_null_columns(Matrix& u, const Vector& sigma, double tol) {
    const Eigen::Index m = u.rows();
    const Eigen::Index k = u.cols();
    for (Eigen::Index j = 0; j < k; ++j) {
        if (sigma(j) > tol) continue;
        for (Eigen::Index cand = 0; cand < m; ++cand) {
            Vector e = Vector::Zero(m);
            e(cand) = 1.0;
            for (Eigen::Index i = 0; i < k; ++i) {
                if (i == j) continue;
                if (i < j || sigma(i) > tol) e -= u.col(i).dot(e) * u.col(i);
            }
            double nrm = e.norm();
            if (nrm > 0.5) {
                u.col(j) = e / nrm;
                break;
            }
        }
    }
}

void normalize_column_signs(SvdResult& r) {
    for (Eigen::Index j = 0; j < r.u.cols(); ++j) {
        Eigen::Index lead;
        r.u.col(j).cwiseAbs().maxCoeff(&lead);
        if (r.u(lead, j) < 0.0) {
            r.u.col(j) = -r.u.col(j);
            r.v.col(j) = -r.v.col(j);
        }
    }
}

}  // namespace

SvdResult svd(const Matrix& m) {
    require_finite(m, "svd");
    if (m.rows() < m.cols()) {
        SvdResult t = svd(Matrix(m.transpose()));
        return {t.v, t.sigma, t.u};
    }
    const Eigen::Index rows = m.rows();
    const Eigen::Index cols = m.cols();
    Matrix a = m;
    Matrix v = Matrix::Identity(cols, cols);
    jacobi_orthogonalize(a, v);

    Vector sigma(cols);
    for (Eigen::Index j = 0; j < cols; ++j) sigma(j) = a.col(j).norm();

    // Stable descending sort by singular value.
    std::vector<Eigen::Index> order(static_cast<std::size_t>(cols));
    for (Eigen::Index j = 0; j < cols; ++j) order[static_cast<std::size_t>(j)] = j;
    std::stable_sort(order.begin(), order.end(),
                     [&](Eigen::Index i, Eigen::Index j) { return sigma(i) > sigma(j); });

    SvdResult out;
    out.u.resize(rows, cols);
    out.v.resize(cols, cols);
    out.sigma.resize(cols);
    double smax = sigma.maxCoeff();
    double tol = smax * 1e-14;
    for (Eigen::Index j = 0; j < cols; ++j) {
        Eigen::Index src = order[static_cast<std::size_t>(j)];
        out.sigma(j) = sigma(src);
        out.v.col(j) = v.col(src);
        out.u.col(j) = sigma(src) > tol ? Vector(a.col(src) / sigma(src)) : Vector(Vector::Zero(rows));
    }
    complete_null_columns(out.u, out.sigma, tol);
    normalize_column_signs(out);
    return out;
}

SvdResult truncate(const SvdResult& s, Eigen::Index r) {
    if (r < 1 || r > s.sigma.size())
        throw std::invalid_argument("truncate: rank " + std::to_string(r) + " out of [1, " +
                                    std::to_string(s.sigma.size()) + "]");
    return {s.u.leftCols(r), s.sigma.head(r), s.v.leftCols(r)};
}

Matrix cholesky_factor(const Matrix& s, double damping) {
    require_finite(s, "cholesky_factor");
    if (s.rows() != s.cols()) throw std::invalid_argument("cholesky_factor: matrix not square");
    if (damping < 0.0) throw std::invalid_argument("cholesky_factor: negative damping");
    const Eigen::Index n = s.rows();
    Matrix a = 0.5 * (s + s.transpose());
    a.diagonal().array() += damping;

    Matrix x = Matrix::Zero(n, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        double d = a(j, j) - x.row(j).head(j).squaredNorm();
        if (d <= 0.0)
            throw std::runtime_error("cholesky_factor: non-positive pivot at row " +
                                     std::to_string(j) + "; increase damping");
        x(j, j) = std::sqrt(d);
        for (Eigen::Index i = j + 1; i < n; ++i) {
            double sum = a(i, j) - x.row(i).head(j).dot(x.row(j).head(j));
            x(i, j) = sum / x(j, j);
        }
    }
    return x;
}

Matrix invert_lower_triangular(const Matrix& x) {
    if (x.rows() != x.cols()) throw std::invalid_argument("invert_lower_triangular: not square");
    const Eigen::Index n = x.rows();
    for (Eigen::Index i = 0; i < n; ++i)
        if (std::abs(x(i, i)) < 1e-12)
            throw std::runtime_error("invert_lower_triangular: near-zero diagonal at row " +
                                     std::to_string(i));
    Matrix inv = Matrix::Zero(n, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        inv(j, j) = 1.0 / x(j, j);
        for (Eigen::Index i = j + 1; i < n; ++i) {
            double sum = 0.0;
            for (Eigen::Index l = j; l < i; ++l) sum += x(i, l) * inv(l, j);
            inv(i, j) = -sum / x(i, i);
        }
    }
    return inv;
}

SymmetricEig symmetric_eig(const Matrix& s) {
    require_finite(s, "symmetric_eig");
    if (s.rows() != s.cols()) throw std::invalid_argument("symmetric_eig: not square");
    const Eigen::Index n = s.rows();
    Matrix a = 0.5 * (s + s.transpose());
    Matrix q = Matrix::Identity(n, n);
    for (int sweep = 0; sweep < kJacobiMaxSweeps; ++sweep) {
        double off = 0.0;
        for (Eigen::Index p = 0; p + 1 < n; ++p)
            for (Eigen::Index j = p + 1; j < n; ++j) off += a(p, j) * a(p, j);
        if (off <= kJacobiTol * kJacobiTol * a.squaredNorm()) break;
        for (Eigen::Index p = 0; p + 1 < n; ++p) {
            for (Eigen::Index j = p + 1; j < n; ++j) {
                double apj = a(p, j);
                if (apj == 0.0) continue;
                double tau = (a(j, j) - a(p, p)) / (2.0 * apj);
                double t = (tau >= 0.0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                double c = 1.0 / std::sqrt(1.0 + t * t);
                double sn = c * t;
                // A <- J^T A J with J the (p,j) rotation [[c, s], [-s, c]].
                double app = a(p, p), ajj = a(j, j);
                a(p, p) = app - t * apj;
                a(j, j) = ajj + t * apj;
                a(p, j) = 0.0;
                a(j, p) = 0.0;
                for (Eigen::Index k = 0; k < n; ++k) {
                    if (k == p || k == j) continue;
                    double akp = a(k, p), akj = a(k, j);
                    a(k, p) = c * akp - sn * akj;
                    a(k, j) = sn * akp + c * akj;
                    a(p, k) = a(k, p);
                    a(j, k) = a(k, j);
                }
                for (Eigen::Index k = 0; k < n; ++k) {
                    double qkp = q(k, p), qkj = q(k, j);
                    q(k, p) = c * qkp - sn * qkj;
                    q(k, j) = sn * qkp + c * qkj;
                }
            }
        }
    }
    SymmetricEig out;
    out.values.resize(n);
    out.vectors.resize(n, n);
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    for (Eigen::Index j = 0; j < n; ++j) order[static_cast<std::size_t>(j)] = j;
    std::stable_sort(order.begin(), order.end(),
                     [&](Eigen::Index i, Eigen::Index j) { return a(i, i) > a(j, j); });
    for (Eigen::Index j = 0; j < n; ++j) {
        Eigen::Index src = order[static_cast<std::size_t>(j)];
        out.values(j) = a(src, src);
        out.vectors.col(j) = q.col(src);
    }
    return out;
}

double nuclear_norm(const Matrix& m) { return svd(m).sigma.sum(); }

double sketch_stable_rank(const Matrix& m, Eigen::Index sketch_cols, std::uint64_t seed) {
    if (sketch_cols < 1 || sketch_cols > std::min(m.rows(), m.cols()))
        throw std::invalid_argument("sketch_stable_rank: sketch_cols out of range");
    double frob2 = m.squaredNorm();
    if (frob2 == 0.0) throw std::invalid_argument("sketch_stable_rank: zero matrix");

    GaussianRng rng(seed);
    Matrix omega = rng.matrix(m.cols(), sketch_cols);
    Matrix y = m * omega;

    // Orthonormal basis of the sketched range by modified Gram-Schmidt;
    // columns that collapse are dropped (rank-deficient sketch).
    Matrix q(m.rows(), sketch_cols);
    Eigen::Index kept = 0;
    double scale = std::sqrt(y.squaredNorm() / static_cast<double>(sketch_cols));
    for (Eigen::Index j = 0; j < sketch_cols; ++j) {
        Vector w = y.col(j);
        for (Eigen::Index i = 0; i < kept; ++i) w -= q.col(i).dot(w) * q.col(i);
        double nrm = w.norm();
        if (nrm > 1e-12 * scale) {
            q.col(kept++) = w / nrm;
        }
    }
    Matrix projected = q.leftCols(kept).transpose() * m;
    double nuc = nuclear_norm(projected);
    return nuc * nuc / frob2;
}

}  // namespace prehab
