#include "prehab/model.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace prehab {

void ModelState::validate() const {
    if (layers.empty()) throw std::invalid_argument("model: no layers");
    Eigen::Index dim = input_dim;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const DenseLayer& layer = layers[l];
        if (layer.in_dim() != dim)
            throw std::invalid_argument("model: layer " + std::to_string(l) + " expects input dim " +
                                        std::to_string(layer.in_dim()) + ", got " +
                                        std::to_string(dim));
        if (layer.bias.size() != layer.out_dim())
            throw std::invalid_argument("model: layer " + std::to_string(l) + " bias size mismatch");
        dim = layer.out_dim();
    }
    if (dim != num_classes) throw std::invalid_argument("model: final layer does not match num_classes");
    if (layers.back().activation != Activation::Identity)
        throw std::invalid_argument("model: final layer must use identity activation");
}

double GradientSet::squared_norm() const {
    double s = 0.0;
    for (const LayerGradient& g : layers) s += g.weight.squaredNorm() + g.bias.squaredNorm();
    return s;
}

Matrix forward(const ModelState& model, const Batch& batch, ForwardCache* cache) {
    if (batch.inputs.rows() != model.input_dim)
        throw std::invalid_argument("forward: batch dim " + std::to_string(batch.inputs.rows()) +
                                    " does not match model input dim " +
                                    std::to_string(model.input_dim));
    if (cache) {
        cache->layer_inputs.clear();
        cache->pre_activations.clear();
    }
    Matrix x = batch.inputs;
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        const DenseLayer& layer = model.layers[l];
        if (layer.in_dim() != x.rows())
            throw std::invalid_argument("forward: dimension mismatch at layer " + std::to_string(l));
        if (cache) cache->layer_inputs.push_back(x);
        Matrix z = (layer.weight * x).colwise() + layer.bias;
        if (cache) cache->pre_activations.push_back(z);
        x = layer.activation == Activation::Relu ? z.cwiseMax(0.0) : std::move(z);
    }
    return x;
}

Matrix softmax_columns(const Matrix& logits) {
    Matrix p(logits.rows(), logits.cols());
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
        Vector col = logits.col(c);
        col.array() -= col.maxCoeff();
        Vector e = col.array().exp();
        p.col(c) = e / e.sum();
    }
    return p;
}

double softmax_cross_entropy(const Matrix& logits, const std::vector<int>& labels,
                             Matrix* dlogits) {
    const Eigen::Index batch = logits.cols();
    if (static_cast<Eigen::Index>(labels.size()) != batch)
        throw std::invalid_argument("cross_entropy: label count mismatch");
    Matrix p = softmax_columns(logits);
    double loss = 0.0;
    for (Eigen::Index c = 0; c < batch; ++c) {
        int y = labels[static_cast<std::size_t>(c)];
        if (y < 0 || y >= logits.rows()) throw std::invalid_argument("cross_entropy: label out of range");
        loss -= std::log(std::max(p(y, c), 1e-300));
    }
    loss /= static_cast<double>(batch);
    if (dlogits) {
        *dlogits = p;
        for (Eigen::Index c = 0; c < batch; ++c) (*dlogits)(labels[static_cast<std::size_t>(c)], c) -= 1.0;
        *dlogits /= static_cast<double>(batch);
    }
    return loss;
}

double loss_and_grads(const ModelState& model, const Batch& batch, GradientSet& grads) {
    ForwardCache cache;
    Matrix logits = forward(model, batch, &cache);
    Matrix delta;
    double loss = softmax_cross_entropy(logits, batch.labels, &delta);

    grads.layers.resize(model.layers.size());
    for (std::size_t l = model.layers.size(); l-- > 0;) {
        const DenseLayer& layer = model.layers[l];
        if (layer.activation == Activation::Relu)
            delta = delta.cwiseProduct((cache.pre_activations[l].array() > 0.0).cast<double>().matrix());
        grads.layers[l].weight = delta * cache.layer_inputs[l].transpose();
        grads.layers[l].bias = delta.rowwise().sum();
        if (l > 0) delta = layer.weight.transpose() * delta;
    }
    return loss;
}

double batch_loss(const ModelState& model, const Batch& batch) {
    Matrix logits = forward(model, batch);
    return softmax_cross_entropy(logits, batch.labels);
}

EvalResult evaluate(const ModelState& model, const Dataset& data) {
    if (data.empty()) throw std::invalid_argument("evaluate: empty dataset");
    double loss_sum = 0.0;
    Eigen::Index correct = 0;
    Eigen::Index total = 0;
    for (const Batch& batch : data) {
        Matrix logits = forward(model, batch);
        loss_sum += softmax_cross_entropy(logits, batch.labels) * static_cast<double>(batch.size());
        for (Eigen::Index c = 0; c < batch.size(); ++c) {
            Eigen::Index pred;
            logits.col(c).maxCoeff(&pred);
            if (pred == batch.labels[static_cast<std::size_t>(c)]) ++correct;
        }
        total += batch.size();
    }
    return {loss_sum / static_cast<double>(total),
            static_cast<double>(correct) / static_cast<double>(total)};
}

ModelState random_model(Eigen::Index input_dim, const std::vector<Eigen::Index>& hidden,
                        Eigen::Index num_classes, std::uint64_t seed) {
    GaussianRng rng(seed);
    ModelState model;
    model.input_dim = input_dim;
    model.num_classes = num_classes;
    Eigen::Index dim = input_dim;
    std::vector<Eigen::Index> dims = hidden;
    dims.push_back(num_classes);
    for (std::size_t l = 0; l < dims.size(); ++l) {
        DenseLayer layer;
        layer.weight = rng.matrix(dims[l], dim) / std::sqrt(static_cast<double>(dim));
        layer.bias = Vector::Zero(dims[l]);
        layer.activation = l + 1 == dims.size() ? Activation::Identity : Activation::Relu;
        model.layers.push_back(std::move(layer));
        dim = dims[l];
    }
    model.validate();
    return model;
}

}  // namespace prehab
