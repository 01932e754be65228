#pragma once

#include "prehab/linalg.hpp"

#include <cstdint>
#include <vector>

namespace prehab {

enum class Activation { Relu, Identity };

struct DenseLayer {
    Matrix weight;  // out_dim x in_dim
    Vector bias;    // out_dim
    Activation activation = Activation::Relu;

    Eigen::Index out_dim() const { return weight.rows(); }
    Eigen::Index in_dim() const { return weight.cols(); }
};

/// Feed-forward classifier with column activations, y = W x + b.
struct ModelState {
    std::vector<DenseLayer> layers;
    Eigen::Index input_dim = 0;
    Eigen::Index num_classes = 0;

    void validate() const;  // throws on dimension-chain violations
};

struct Batch {
    Matrix inputs;             // dim x batch_size
    std::vector<int> labels;   // batch_size, each in [0, num_classes)

    Eigen::Index size() const { return inputs.cols(); }
};

using Dataset = std::vector<Batch>;

struct LayerGradient {
    Matrix weight;
    Vector bias;
};

struct GradientSet {
    std::vector<LayerGradient> layers;

    double squared_norm() const;
};

struct ForwardCache {
    std::vector<Matrix> layer_inputs;      // input to each layer (post-activation of previous)
    std::vector<Matrix> pre_activations;   // W x + b per layer
};

Matrix forward(const ModelState& model, const Batch& batch, ForwardCache* cache = nullptr);

/// Mean softmax cross-entropy over the batch plus exact analytic backprop.
double loss_and_grads(const ModelState& model, const Batch& batch, GradientSet& grads);

double batch_loss(const ModelState& model, const Batch& batch);

struct EvalResult {
    double mean_loss = 0.0;
    double accuracy = 0.0;
};

EvalResult evaluate(const ModelState& model, const Dataset& data);

/// Column-softmax of a logit matrix (numerically shifted).
Matrix softmax_columns(const Matrix& logits);

/// Mean cross-entropy and the logit gradient (softmax - onehot) / batch.
double softmax_cross_entropy(const Matrix& logits, const std::vector<int>& labels,
                             Matrix* dlogits = nullptr);

/// Random model with Gaussian(0, 1/sqrt(in_dim)) weights and zero biases.
/// Hidden layers are ReLU, the head is identity.
ModelState random_model(Eigen::Index input_dim, const std::vector<Eigen::Index>& hidden,
                        Eigen::Index num_classes, std::uint64_t seed);

}  // namespace prehab
