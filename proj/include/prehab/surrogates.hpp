#pragma once

#include "prehab/linalg.hpp"

namespace prehab {

enum class SurrogateKind { SpectralL1, StableRank };

/// Gradient of a rank surrogate, with a flag raised when the spectrum
/// of W X was degenerate (repeated or vanishing singular values) and the
/// returned matrix is only a subgradient.
struct SurrogateGradient {
    Matrix grad;
    bool degenerate_spectrum = false;
};

/// Nuclear norm of W X.
double spectral_l1(const Matrix& w, const Matrix& x);

/// d/dW of the nuclear norm of W X: U V^T X^T with W X = U S V^T.
SurrogateGradient spectral_l1_grad(const Matrix& w, const Matrix& x);

/// ||m||_*^2 / ||m||_F^2. Throws on the zero matrix.
double stable_rank(const Matrix& m);

/// d/dW of stable_rank(W X), chain rule through the nuclear and
/// Frobenius norms: (2 n*/f2) (U V^T - (n*/f2) W X) X^T.
SurrogateGradient stable_rank_grad(const Matrix& w, const Matrix& x);

double surrogate_value(SurrogateKind kind, const Matrix& w, const Matrix& x);
SurrogateGradient surrogate_grad(SurrogateKind kind, const Matrix& w, const Matrix& x);

/// Value, gradient, and the stable rank of W X from a single SVD; this
/// is what the prehab loop calls once per layer per step.
struct SurrogateEval {
    double value = 0.0;
    Matrix grad;
    double stable_rank = 0.0;
    bool degenerate_spectrum = false;
};
SurrogateEval surrogate_eval(SurrogateKind kind, const Matrix& w, const Matrix& x);

}  // namespace prehab
