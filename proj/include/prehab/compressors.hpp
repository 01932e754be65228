#pragma once

#include "prehab/calibration.hpp"
#include "prehab/model.hpp"

#include <string>
#include <variant>
#include <vector>

namespace prehab {

enum class CompressionMethod { PlainSvd, Fwsvd, Gfwsvd, WhitenedSvd };

std::string to_string(CompressionMethod method);
CompressionMethod compression_method_from_string(const std::string& name);

struct FactorizedLayer {
    Matrix left;   // out_dim x r
    Matrix right;  // r x in_dim
    Vector bias;
    Eigen::Index rank = 0;
    CompressionMethod method = CompressionMethod::PlainSvd;
    Activation activation = Activation::Relu;

    Eigen::Index out_dim() const { return left.rows(); }
    Eigen::Index in_dim() const { return right.cols(); }
    Matrix reconstruct() const { return left * right; }
};

/// Mixed model: dense layers interleaved with factorized replacements.
using MixedLayer = std::variant<DenseLayer, FactorizedLayer>;

struct CompressedModel {
    std::vector<MixedLayer> layers;
    Eigen::Index input_dim = 0;
    Eigen::Index num_classes = 0;

    Eigen::Index parameter_count() const;
};

struct CompressionPlan {
    double ratio = 0.5;                     // fraction of parameters removed
    CompressionMethod method = CompressionMethod::WhitenedSvd;
    std::vector<bool> layer_mask;           // which layers are compressed
    std::vector<Eigen::Index> ranks;        // per-layer ranks (0 for unselected layers)
};

/// Largest rank whose factor parameter count removes at least `ratio`
/// of the dense parameters, clamped to 1.
Eigen::Index rank_for_ratio(Eigen::Index out_dim, Eigen::Index in_dim, double ratio);

/// Plan with a uniform ratio over all hidden layers (head excluded by
/// default, matching the usual practice of leaving the classifier dense).
CompressionPlan make_plan(const ModelState& model, double ratio, CompressionMethod method,
                          bool include_head = false);

FactorizedLayer compress_layer(const Matrix& w, const Vector& bias, Activation activation,
                               CompressionMethod method, const LayerCalibration& calib,
                               Eigen::Index r);

CompressedModel compress_model(const ModelState& model, const CompressionPlan& plan,
                               const CalibrationSet& calibs);

Matrix forward(const CompressedModel& model, const Batch& batch, ForwardCache* cache = nullptr);
EvalResult evaluate(const CompressedModel& model, const Dataset& data);
double batch_loss(const CompressedModel& model, const Batch& batch);

/// Symmetric square root (and inverse square root) of an SPD matrix via
/// Jacobi eigendecomposition, eigenvalues floored at 1e-10.
Matrix symmetric_sqrt(const Matrix& s);
Matrix symmetric_inv_sqrt(const Matrix& s);

/// The Table-1 style weighted reconstruction error for a given method;
/// used as a metric (for FWSVD this is the true Hadamard objective the
/// row-importance reduction only approximates).
double weighted_reconstruction_error(const Matrix& w, const FactorizedLayer& layer,
                                     CompressionMethod method, const LayerCalibration& calib);

}  // namespace prehab
