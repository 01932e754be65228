#include "prehab/calibration.hpp"

#include <stdexcept>

namespace prehab {

namespace {

Eigen::Index total_samples(const Dataset& calib) {
    Eigen::Index n = 0;
    for (const Batch& b : calib) n += b.size();
    return n;
}

void require_nonempty(const Dataset& calib) {
    if (calib.empty() || total_samples(calib) == 0)
        throw std::invalid_argument("calibration: empty calibration set");
}

Batch single_sample(const Batch& b, Eigen::Index c) {
    Batch s;
    s.inputs = b.inputs.col(c);
    s.labels = {b.labels[static_cast<std::size_t>(c)]};
    return s;
}

// Per-sample pre-activation gradients, via the same backward pass as
// loss_and_grads but keeping the deltas.
std::vector<Matrix> preactivation_grads(const ModelState& model, const Batch& sample) {
    ForwardCache cache;
    Matrix logits = forward(model, sample, &cache);
    Matrix delta;
    softmax_cross_entropy(logits, sample.labels, &delta);
    std::vector<Matrix> deltas(model.layers.size());
    for (std::size_t l = model.layers.size(); l-- > 0;) {
        const DenseLayer& layer = model.layers[l];
        if (layer.activation == Activation::Relu)
            delta = delta.cwiseProduct((cache.pre_activations[l].array() > 0.0).cast<double>().matrix());
        deltas[l] = delta;
        if (l > 0) delta = layer.weight.transpose() * delta;
    }
    return deltas;
}

double damping_for(const Matrix& s, double scale) {
    // Absolute floor keeps an identically-zero factor invertible.
    return scale * s.diagonal().mean() + 1e-12;
}

}  // namespace

std::vector<Matrix> collect_covariance(const ModelState& model, const Dataset& calib) {
    require_nonempty(calib);
    std::vector<Matrix> cov(model.layers.size());
    for (std::size_t l = 0; l < model.layers.size(); ++l)
        cov[l] = Matrix::Zero(model.layers[l].in_dim(), model.layers[l].in_dim());
    Eigen::Index n = 0;
    for (const Batch& batch : calib) {
        ForwardCache cache;
        forward(model, batch, &cache);
        for (std::size_t l = 0; l < model.layers.size(); ++l)
            cov[l] += cache.layer_inputs[l] * cache.layer_inputs[l].transpose();
        n += batch.size();
    }
    for (Matrix& s : cov) s /= static_cast<double>(n);
    return cov;
}

std::pair<Matrix, Matrix> whitening_factors(const Matrix& s) {
    Matrix x = cholesky_factor(s, damping_for(s, kCovarianceDampingScale));
    return {x, invert_lower_triangular(x)};
}

std::vector<Matrix> fisher_diagonal(const ModelState& model, const Dataset& calib) {
    require_nonempty(calib);
    std::vector<Matrix> fisher(model.layers.size());
    for (std::size_t l = 0; l < model.layers.size(); ++l)
        fisher[l] = Matrix::Zero(model.layers[l].out_dim(), model.layers[l].in_dim());
    Eigen::Index n = 0;
    for (const Batch& batch : calib) {
        for (Eigen::Index c = 0; c < batch.size(); ++c) {
            Batch sample = single_sample(batch, c);
            GradientSet grads;
            loss_and_grads(model, sample, grads);
            for (std::size_t l = 0; l < model.layers.size(); ++l)
                fisher[l] += grads.layers[l].weight.cwiseAbs2();
            ++n;
        }
    }
    for (Matrix& f : fisher) f /= static_cast<double>(n);
    return fisher;
}

std::vector<std::pair<Matrix, Matrix>> kfac_factors(const ModelState& model, const Dataset& calib) {
    require_nonempty(calib);
    std::vector<Matrix> a = collect_covariance(model, calib);
    std::vector<Matrix> g(model.layers.size());
    for (std::size_t l = 0; l < model.layers.size(); ++l)
        g[l] = Matrix::Zero(model.layers[l].out_dim(), model.layers[l].out_dim());
    Eigen::Index n = 0;
    for (const Batch& batch : calib) {
        for (Eigen::Index c = 0; c < batch.size(); ++c) {
            std::vector<Matrix> deltas = preactivation_grads(model, single_sample(batch, c));
            for (std::size_t l = 0; l < model.layers.size(); ++l)
                g[l] += deltas[l] * deltas[l].transpose();
            ++n;
        }
    }
    std::vector<std::pair<Matrix, Matrix>> out(model.layers.size());
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        g[l] /= static_cast<double>(n);
        Matrix ad = a[l];
        ad.diagonal().array() += damping_for(ad, kKfacDampingScale);
        Matrix gd = g[l];
        gd.diagonal().array() += damping_for(gd, kKfacDampingScale);
        out[l] = {std::move(ad), std::move(gd)};
    }
    return out;
}

CalibrationSet calibrate(const ModelState& model, const Dataset& calib) {
    require_nonempty(calib);
    std::vector<Matrix> cov = collect_covariance(model, calib);
    std::vector<Matrix> fisher = fisher_diagonal(model, calib);
    std::vector<std::pair<Matrix, Matrix>> kfac = kfac_factors(model, calib);
    CalibrationSet out(model.layers.size());
    Eigen::Index n = total_samples(calib);
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        auto [x, x_inv] = whitening_factors(cov[l]);
        out[l].whitening_x = std::move(x);
        out[l].whitening_x_inv = std::move(x_inv);
        out[l].fisher_diag = std::move(fisher[l]);
        out[l].kfac_a = std::move(kfac[l].first);
        out[l].kfac_g = std::move(kfac[l].second);
        out[l].sample_count = n;
    }
    return out;
}

}  // namespace prehab
