#pragma once

#include "prehab/model.hpp"

#include <vector>

namespace prehab {

/// Frozen per-layer statistics estimated on a calibration split.
struct LayerCalibration {
    Matrix whitening_x;      // lower-triangular Cholesky factor of the input covariance
    Matrix whitening_x_inv;  // its triangular inverse
    Matrix fisher_diag;      // entrywise mean squared per-sample weight gradient
    Matrix kfac_a;           // damped input covariance (in_dim x in_dim)
    Matrix kfac_g;           // damped pre-activation gradient covariance (out_dim x out_dim)
    Eigen::Index sample_count = 0;
};

using CalibrationSet = std::vector<LayerCalibration>;

constexpr double kCovarianceDampingScale = 1e-6;
constexpr double kKfacDampingScale = 1e-4;

/// Uncentered input covariance S_l = (1/N) sum x x^T per layer.
std::vector<Matrix> collect_covariance(const ModelState& model, const Dataset& calib);

/// Cholesky whitening factor and its inverse, with the default damping
/// of 1e-6 times the mean diagonal.
std::pair<Matrix, Matrix> whitening_factors(const Matrix& s);

/// Diagonal empirical Fisher: mean squared per-sample weight gradient.
std::vector<Matrix> fisher_diagonal(const ModelState& model, const Dataset& calib);

/// K-FAC factors: A = mean input outer product, G = mean outer product
/// of the loss gradient w.r.t. the pre-activation output. Both damped.
std::vector<std::pair<Matrix, Matrix>> kfac_factors(const ModelState& model, const Dataset& calib);

/// All statistics in one pass over the calibration split.
CalibrationSet calibrate(const ModelState& model, const Dataset& calib);

}  // namespace prehab
