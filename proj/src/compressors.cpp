#include "prehab/compressors.hpp"

#include <cmath>
#include <stdexcept>

namespace prehab {

std::string to_string(CompressionMethod method) {
    switch (method) {
        case CompressionMethod::PlainSvd: return "plain_svd";
        case CompressionMethod::Fwsvd: return "fwsvd";
        case CompressionMethod::Gfwsvd: return "gfwsvd";
        case CompressionMethod::WhitenedSvd: return "whitened_svd";
    }
    throw std::logic_error("unknown compression method");
}

CompressionMethod compression_method_from_string(const std::string& name) {
    if (name == "plain_svd") return CompressionMethod::PlainSvd;
    if (name == "fwsvd") return CompressionMethod::Fwsvd;
    if (name == "gfwsvd") return CompressionMethod::Gfwsvd;
    if (name == "whitened_svd") return CompressionMethod::WhitenedSvd;
    throw std::invalid_argument("unknown compression method: " + name);
}

Eigen::Index CompressedModel::parameter_count() const {
    Eigen::Index n = 0;
    for (const MixedLayer& layer : layers) {
        if (const DenseLayer* d = std::get_if<DenseLayer>(&layer))
            n += d->weight.size() + d->bias.size();
        else {
            const FactorizedLayer& f = std::get<FactorizedLayer>(layer);
            n += f.left.size() + f.right.size() + f.bias.size();
        }
    }
    return n;
}

Eigen::Index rank_for_ratio(Eigen::Index out_dim, Eigen::Index in_dim, double ratio) {
    if (ratio <= 0.0 || ratio >= 1.0) throw std::invalid_argument("rank_for_ratio: ratio outside (0,1)");
    double dense = static_cast<double>(out_dim) * static_cast<double>(in_dim);
    double per_rank = static_cast<double>(out_dim + in_dim);
    auto r = static_cast<Eigen::Index>(std::floor((1.0 - ratio) * dense / per_rank));
    return std::max<Eigen::Index>(1, r);
}

CompressionPlan make_plan(const ModelState& model, double ratio, CompressionMethod method,
                          bool include_head) {
    CompressionPlan plan;
    plan.ratio = ratio;
    plan.method = method;
    plan.layer_mask.assign(model.layers.size(), true);
    if (!include_head && !model.layers.empty()) plan.layer_mask.back() = false;
    plan.ranks.assign(model.layers.size(), 0);
    for (std::size_t l = 0; l < model.layers.size(); ++l)
        if (plan.layer_mask[l])
            plan.ranks[l] = rank_for_ratio(model.layers[l].out_dim(), model.layers[l].in_dim(), ratio);
    return plan;
}

Matrix symmetric_sqrt(const Matrix& s) {
    SymmetricEig eig = symmetric_eig(s);
    Vector vals = eig.values.cwiseMax(1e-10).cwiseSqrt();
    return eig.vectors * vals.asDiagonal() * eig.vectors.transpose();
}

Matrix symmetric_inv_sqrt(const Matrix& s) {
    SymmetricEig eig = symmetric_eig(s);
    Vector vals = eig.values.cwiseMax(1e-10).cwiseSqrt().cwiseInverse();
    return eig.vectors * vals.asDiagonal() * eig.vectors.transpose();
}

FactorizedLayer compress_layer(const Matrix& w, const Vector& bias, Activation activation,
                               CompressionMethod method, const LayerCalibration& calib,
                               Eigen::Index r) {
    if (r < 1 || r > std::min(w.rows(), w.cols()))
        throw std::invalid_argument("compress_layer: rank " + std::to_string(r) + " invalid for " +
                                    std::to_string(w.rows()) + "x" + std::to_string(w.cols()));
    FactorizedLayer out;
    out.bias = bias;
    out.rank = r;
    out.method = method;
    out.activation = activation;

    switch (method) {
        case CompressionMethod::PlainSvd: {
            SvdResult t = truncate(svd(w), r);
            out.left = t.u * t.sigma.asDiagonal();
            out.right = t.v.transpose();
            break;
        }
        case CompressionMethod::WhitenedSvd: {
            SvdResult t = truncate(svd(w * calib.whitening_x), r);
            out.left = t.u * t.sigma.asDiagonal();
            out.right = t.v.transpose() * calib.whitening_x_inv;
            break;
        }
        case CompressionMethod::Gfwsvd: {
            // Two-sided weighting ||A^{1/2} (W - What) G^{1/2}||_F with the
            // layer's Kronecker factors: A acts on the input side, G on the
            // output side.
            Matrix g_half = symmetric_sqrt(calib.kfac_g);
            Matrix g_inv_half = symmetric_inv_sqrt(calib.kfac_g);
            Matrix a_half = symmetric_sqrt(calib.kfac_a);
            Matrix a_inv_half = symmetric_inv_sqrt(calib.kfac_a);
            SvdResult t = truncate(svd(g_half * w * a_half), r);
            out.left = g_inv_half * t.u * t.sigma.asDiagonal();
            out.right = t.v.transpose() * a_inv_half;
            break;
        }
        case CompressionMethod::Fwsvd: {
            // Standard row-importance reduction of the Hadamard objective:
            // d_i = sqrt(row sum of F), truncated SVD of D W, undo D on the
            // left factor.
            Vector d = calib.fisher_diag.rowwise().sum().cwiseSqrt();
            double floor = 1e-8 * (d.mean() + 1e-300);
            d = d.cwiseMax(floor);
            if (!(d.minCoeff() > 0.0))
                throw std::runtime_error("compress_layer: singular FWSVD row weighting after damping");
            SvdResult t = truncate(svd(d.asDiagonal() * w), r);
            out.left = d.cwiseInverse().asDiagonal() * (t.u * t.sigma.asDiagonal());
            out.right = t.v.transpose();
            break;
        }
    }
    return out;
}

CompressedModel compress_model(const ModelState& model, const CompressionPlan& plan,
                               const CalibrationSet& calibs) {
    if (plan.layer_mask.size() != model.layers.size() || plan.ranks.size() != model.layers.size())
        throw std::invalid_argument("compress_model: plan does not match model layer count");
    bool needs_calib = plan.method != CompressionMethod::PlainSvd;
    if (needs_calib && calibs.size() != model.layers.size())
        throw std::invalid_argument("compress_model: calibration missing for method " +
                                    to_string(plan.method));
    CompressedModel out;
    out.input_dim = model.input_dim;
    out.num_classes = model.num_classes;
    static const LayerCalibration kEmpty{};
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        const DenseLayer& layer = model.layers[l];
        if (!plan.layer_mask[l]) {
            out.layers.emplace_back(layer);
            continue;
        }
        const LayerCalibration& calib = needs_calib ? calibs[l] : kEmpty;
        out.layers.emplace_back(compress_layer(layer.weight, layer.bias, layer.activation,
                                               plan.method, calib, plan.ranks[l]));
    }
    return out;
}

Matrix forward(const CompressedModel& model, const Batch& batch, ForwardCache* cache) {
    if (batch.inputs.rows() != model.input_dim)
        throw std::invalid_argument("forward: batch dim does not match compressed model");
    if (cache) {
        cache->layer_inputs.clear();
        cache->pre_activations.clear();
    }
    Matrix x = batch.inputs;
    for (const MixedLayer& layer : model.layers) {
        Matrix z;
        Activation act;
        if (const DenseLayer* d = std::get_if<DenseLayer>(&layer)) {
            z = (d->weight * x).colwise() + d->bias;
            act = d->activation;
        } else {
            const FactorizedLayer& f = std::get<FactorizedLayer>(layer);
            z = (f.left * (f.right * x)).colwise() + f.bias;
            act = f.activation;
        }
        if (cache) {
            cache->layer_inputs.push_back(x);
            cache->pre_activations.push_back(z);
        }
        x = act == Activation::Relu ? z.cwiseMax(0.0) : std::move(z);
    }
    return x;
}

EvalResult evaluate(const CompressedModel& model, const Dataset& data) {
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

double batch_loss(const CompressedModel& model, const Batch& batch) {
    Matrix logits = forward(model, batch);
    return softmax_cross_entropy(logits, batch.labels);
}

double weighted_reconstruction_error(const Matrix& w, const FactorizedLayer& layer,
                                     CompressionMethod method, const LayerCalibration& calib) {
    Matrix diff = w - layer.reconstruct();
    switch (method) {
        case CompressionMethod::PlainSvd:
            return diff.squaredNorm();
        case CompressionMethod::WhitenedSvd:
            return (diff * calib.whitening_x).squaredNorm();
        case CompressionMethod::Fwsvd:
            return calib.fisher_diag.cwiseSqrt().cwiseProduct(diff).squaredNorm();
        case CompressionMethod::Gfwsvd:
            return (symmetric_sqrt(calib.kfac_g) * diff * symmetric_sqrt(calib.kfac_a)).squaredNorm();
    }
    throw std::logic_error("unknown compression method");
}

}  // namespace prehab
