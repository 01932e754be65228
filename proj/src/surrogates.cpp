#include "prehab/surrogates.hpp"

#include <stdexcept>

namespace prehab {

namespace {

constexpr double kDegenerateTol = 1e-8;

bool spectrum_degenerate(const Vector& sigma) {
    double smax = sigma.size() ? sigma(0) : 0.0;
    if (smax <= 0.0) return true;
    for (Eigen::Index i = 0; i < sigma.size(); ++i) {
        if (sigma(i) < kDegenerateTol * smax) return true;
        if (i + 1 < sigma.size() && sigma(i) - sigma(i + 1) < kDegenerateTol * smax) return true;
    }
    return false;
}

}  // namespace

double spectral_l1(const Matrix& w, const Matrix& x) {
    if (w.cols() != x.rows()) throw std::invalid_argument("spectral_l1: inner dimension mismatch");
    return svd(w * x).sigma.sum();
}

SurrogateGradient spectral_l1_grad(const Matrix& w, const Matrix& x) {
    if (w.cols() != x.rows()) throw std::invalid_argument("spectral_l1_grad: inner dimension mismatch");
    SvdResult s = svd(w * x);
    return {s.u * s.v.transpose() * x.transpose(), spectrum_degenerate(s.sigma)};
}

double stable_rank(const Matrix& m) {
    double f2 = m.squaredNorm();
    if (f2 == 0.0) throw std::invalid_argument("stable_rank: undefined for the zero matrix");
    double nuc = svd(m).sigma.sum();
    return nuc * nuc / f2;
}

SurrogateGradient stable_rank_grad(const Matrix& w, const Matrix& x) {
    if (w.cols() != x.rows()) throw std::invalid_argument("stable_rank_grad: inner dimension mismatch");
    Matrix m = w * x;
    double f2 = m.squaredNorm();
    if (f2 == 0.0) throw std::invalid_argument("stable_rank_grad: undefined for the zero product");
    SvdResult s = svd(m);
    double nuc = s.sigma.sum();
    Matrix inner = s.u * s.v.transpose() - (nuc / f2) * m;
    return {(2.0 * nuc / f2) * inner * x.transpose(), spectrum_degenerate(s.sigma)};
}

double surrogate_value(SurrogateKind kind, const Matrix& w, const Matrix& x) {
    return kind == SurrogateKind::SpectralL1 ? spectral_l1(w, x) : stable_rank(w * x);
}

SurrogateGradient surrogate_grad(SurrogateKind kind, const Matrix& w, const Matrix& x) {
    return kind == SurrogateKind::SpectralL1 ? spectral_l1_grad(w, x) : stable_rank_grad(w, x);
}

SurrogateEval surrogate_eval(SurrogateKind kind, const Matrix& w, const Matrix& x) {
    if (w.cols() != x.rows()) throw std::invalid_argument("surrogate_eval: inner dimension mismatch");
    Matrix m = w * x;
    double f2 = m.squaredNorm();
    if (f2 == 0.0) throw std::invalid_argument("surrogate_eval: zero product");
    SvdResult s = svd(m);
    double nuc = s.sigma.sum();
    SurrogateEval out;
    out.stable_rank = nuc * nuc / f2;
    out.degenerate_spectrum = spectrum_degenerate(s.sigma);
    if (kind == SurrogateKind::SpectralL1) {
        out.value = nuc;
        out.grad = s.u * s.v.transpose() * x.transpose();
    } else {
        out.value = out.stable_rank;
        out.grad = (2.0 * nuc / f2) * (s.u * s.v.transpose() - (nuc / f2) * m) * x.transpose();
    }
    return out;
}

}  // namespace prehab
