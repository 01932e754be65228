#include "prehab/trainer.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace prehab {

AdamW::AdamW(const std::vector<Eigen::Index>& sizes, AdamWConfig config) : config_(config) {
    m_.reserve(sizes.size());
    v_.reserve(sizes.size());
    for (Eigen::Index n : sizes) {
        m_.push_back(Vector::Zero(n));
        v_.push_back(Vector::Zero(n));
    }
}

void AdamW::step(const std::vector<double*>& params, const std::vector<const double*>& grads,
                 const std::vector<bool>& decay_mask) {
    if (params.size() != m_.size() || grads.size() != m_.size() || decay_mask.size() != m_.size())
        throw std::invalid_argument("AdamW::step: block count mismatch");
    ++step_;
    double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
    double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < m_.size(); ++i) {
        Eigen::Index n = m_[i].size();
        Eigen::Map<Vector> p(params[i], n);
        Eigen::Map<const Vector> g(grads[i], n);
        m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
        v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g.cwiseAbs2();
        Vector mhat = m_[i] / bc1;
        Vector vhat = v_[i] / bc2;
        if (decay_mask[i] && config_.weight_decay != 0.0)
            p -= config_.learning_rate * config_.weight_decay * p;
        p -= config_.learning_rate * (mhat.array() / (vhat.array().sqrt() + config_.epsilon)).matrix();
    }
}

BatchSampler::BatchSampler(const Dataset& data, Eigen::Index batch_size, std::uint64_t seed)
    : batch_size_(batch_size), seed_(seed) {
    if (data.empty()) throw std::invalid_argument("BatchSampler: empty dataset");
    Eigen::Index total = 0;
    for (const Batch& b : data) total += b.size();
    if (total == 0) throw std::invalid_argument("BatchSampler: dataset has no samples");
    inputs_.resize(data.front().inputs.rows(), total);
    labels_.resize(static_cast<std::size_t>(total));
    Eigen::Index at = 0;
    for (const Batch& b : data) {
        inputs_.middleCols(at, b.size()) = b.inputs;
        for (Eigen::Index c = 0; c < b.size(); ++c)
            labels_[static_cast<std::size_t>(at + c)] = b.labels[static_cast<std::size_t>(c)];
        at += b.size();
    }
    order_.resize(static_cast<std::size_t>(total));
    reshuffle();
}

void BatchSampler::reshuffle() {
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<Eigen::Index>(i);
    // Fisher-Yates keyed on (seed, epoch) only, so compared runs with a
    // shared seed see identical batch sequences.
    GaussianRng rng(seed_ * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(epoch_) + 1);
    for (std::size_t i = order_.size(); i > 1; --i) {
        std::size_t j = static_cast<std::size_t>(rng.uniform_index(i));
        std::swap(order_[i - 1], order_[j]);
    }
    cursor_ = 0;
}

Batch BatchSampler::next() {
    Eigen::Index total = inputs_.cols();
    if (cursor_ >= total) {
        ++epoch_;
        reshuffle();
    }
    Eigen::Index take = std::min(batch_size_, total - cursor_);
    Batch batch;
    batch.inputs.resize(inputs_.rows(), take);
    batch.labels.resize(static_cast<std::size_t>(take));
    for (Eigen::Index c = 0; c < take; ++c) {
        Eigen::Index src = order_[static_cast<std::size_t>(cursor_ + c)];
        batch.inputs.col(c) = inputs_.col(src);
        batch.labels[static_cast<std::size_t>(c)] = labels_[static_cast<std::size_t>(src)];
    }
    cursor_ += take;
    return batch;
}

namespace {

struct RankPenalty {
    SurrogateKind kind;
    std::vector<double> lambda;    // per layer, 0 disables
    std::vector<Matrix> whitening; // per layer; identity when unwhitened
};

ModelState training_loop(const ModelState& start, const Dataset& data, Eigen::Index steps,
                         Eigen::Index batch_size, const AdamWConfig& opt, std::uint64_t seed,
                         const RankPenalty* penalty, const MetricsSink& sink) {
    ModelState model = start;
    model.validate();
    const std::size_t num_layers = model.layers.size();

    std::vector<Eigen::Index> sizes;
    for (const DenseLayer& layer : model.layers) {
        sizes.push_back(layer.weight.size());
        sizes.push_back(layer.bias.size());
    }
    AdamW optimizer(sizes, opt);
    BatchSampler sampler(data, batch_size, seed);

    for (Eigen::Index step = 0; step < steps; ++step) {
        Batch batch = sampler.next();
        GradientSet grads;
        double loss = loss_and_grads(model, batch, grads);
        if (!std::isfinite(loss))
            throw std::runtime_error("training diverged: non-finite loss at step " +
                                     std::to_string(step));

        StepMetrics metrics;
        metrics.step = step;
        metrics.task_loss = loss;

        if (penalty) {
            for (std::size_t l = 0; l < num_layers; ++l) {
                double lam = penalty->lambda[l];
                if (lam == 0.0) continue;
                SurrogateEval eval =
                    surrogate_eval(penalty->kind, model.layers[l].weight, penalty->whitening[l]);
                grads.layers[l].weight += lam * eval.grad;
                metrics.surrogate_value += eval.value;
                metrics.degenerate_spectrum |= eval.degenerate_spectrum;
                if (sink) {
                    metrics.layer_stable_ranks.resize(num_layers, 0.0);
                    metrics.layer_stable_ranks[l] = eval.stable_rank;
                }
            }
        }

        std::vector<double*> params;
        std::vector<const double*> grad_ptrs;
        std::vector<bool> decay;
        for (std::size_t l = 0; l < num_layers; ++l) {
            params.push_back(model.layers[l].weight.data());
            grad_ptrs.push_back(grads.layers[l].weight.data());
            decay.push_back(true);
            params.push_back(model.layers[l].bias.data());
            grad_ptrs.push_back(grads.layers[l].bias.data());
            decay.push_back(false);
        }
        optimizer.step(params, grad_ptrs, decay);
        if (sink) sink(metrics);
    }
    return model;
}

}  // namespace

ModelState train_base(const ModelState& model, const Dataset& data, const TrainConfig& config,
                      const MetricsSink& sink) {
    return training_loop(model, data, config.steps, config.batch_size, config.optimizer,
                         config.seed, nullptr, sink);
}

ModelState run_prehab(const ModelState& model, const Dataset& data, const CalibrationSet& calibs,
                      const PrehabConfig& config, const MetricsSink& sink) {
    std::vector<double> lambda(model.layers.size(), config.lambda);
    if (!config.lambda_per_layer.empty()) {
        if (config.lambda_per_layer.size() != model.layers.size())
            throw std::invalid_argument("prehab: per-layer lambda count mismatch");
        lambda = config.lambda_per_layer;
    }
    bool any = false;
    for (double l : lambda) {
        if (l < 0.0) throw std::invalid_argument("prehab: negative lambda");
        any |= l > 0.0;
    }
    if (!any)
        return training_loop(model, data, config.steps, config.batch_size, config.optimizer,
                             config.seed, nullptr, sink);

    if (config.whiten_surrogate && calibs.size() != model.layers.size())
        throw std::invalid_argument("prehab: calibration missing for whitened surrogate");
    RankPenalty penalty;
    penalty.kind = config.surrogate;
    penalty.lambda = std::move(lambda);
    for (std::size_t l = 0; l < model.layers.size(); ++l)
        penalty.whitening.push_back(config.whiten_surrogate
                                        ? calibs[l].whitening_x
                                        : Matrix(Matrix::Identity(model.layers[l].in_dim(),
                                                                  model.layers[l].in_dim())));
    return training_loop(model, data, config.steps, config.batch_size, config.optimizer,
                         config.seed, &penalty, sink);
}

double compressed_loss_and_grads(const CompressedModel& model, const Batch& batch,
                                 CompressedGradients& grads) {
    ForwardCache cache;
    Matrix logits = forward(model, batch, &cache);
    Matrix delta;
    double loss = softmax_cross_entropy(logits, batch.labels, &delta);

    const std::size_t num_layers = model.layers.size();
    grads.left.assign(num_layers, Matrix());
    grads.right.assign(num_layers, Matrix());
    grads.bias.assign(num_layers, Vector());
    for (std::size_t l = num_layers; l-- > 0;) {
        Activation act = std::holds_alternative<DenseLayer>(model.layers[l])
                             ? std::get<DenseLayer>(model.layers[l]).activation
                             : std::get<FactorizedLayer>(model.layers[l]).activation;
        if (act == Activation::Relu)
            delta = delta.cwiseProduct((cache.pre_activations[l].array() > 0.0).cast<double>().matrix());
        const Matrix& x = cache.layer_inputs[l];
        grads.bias[l] = delta.rowwise().sum();
        if (const DenseLayer* d = std::get_if<DenseLayer>(&model.layers[l])) {
            grads.left[l] = delta * x.transpose();  // dense weight gradient
            if (l > 0) delta = d->weight.transpose() * delta;
        } else {
            const FactorizedLayer& f = std::get<FactorizedLayer>(model.layers[l]);
            Matrix h = f.right * x;
            grads.left[l] = delta * h.transpose();
            grads.right[l] = f.left.transpose() * delta * x.transpose();
            if (l > 0) delta = f.right.transpose() * (f.left.transpose() * delta);
        }
    }
    return loss;
}

namespace {

enum class Phase { Left, Right };

// One alternating phase: fine-tune the active factor of every
// factorized layer, either directly or through a LoRA adapter that is
// merged at the end of the phase.
void rehab_phase(CompressedModel& model, BatchSampler& sampler, const RehabConfig& config,
                 Phase phase, const MetricsSink& sink, Eigen::Index step_offset) {
    std::vector<std::size_t> active;
    for (std::size_t l = 0; l < model.layers.size(); ++l)
        if (std::holds_alternative<FactorizedLayer>(model.layers[l])) active.push_back(l);
    if (active.empty()) return;

    // Per-layer adapters; a layer falls back to direct updates when the
    // adapter rank would not be below the factor rank.
    std::vector<LoraAdapter> adapters(active.size());
    std::vector<bool> use_lora(active.size(), false);
    GaussianRng rng(config.seed * 0x9E3779B97F4A7C15ULL + (phase == Phase::Left ? 1 : 2));
    for (std::size_t i = 0; i < active.size(); ++i) {
        FactorizedLayer& f = std::get<FactorizedLayer>(model.layers[active[i]]);
        Matrix& host = phase == Phase::Left ? f.left : f.right;
        if (config.mode == RehabMode::Lora && config.lora_rank < std::min(host.rows(), host.cols())) {
            use_lora[i] = true;
            adapters[i].down = rng.matrix(config.lora_rank, host.cols()) /
                               std::sqrt(static_cast<double>(host.cols()));
            adapters[i].up = Matrix::Zero(host.rows(), config.lora_rank);
            adapters[i].scale = 1.0;
        }
    }

    std::vector<Eigen::Index> sizes;
    for (std::size_t i = 0; i < active.size(); ++i) {
        const FactorizedLayer& f = std::get<FactorizedLayer>(model.layers[active[i]]);
        const Matrix& host = phase == Phase::Left ? f.left : f.right;
        if (use_lora[i]) {
            sizes.push_back(adapters[i].up.size());
            sizes.push_back(adapters[i].down.size());
        } else {
            sizes.push_back(host.size());
        }
    }
    AdamW optimizer(sizes, config.optimizer);

    std::vector<Matrix> up_grads(active.size()), down_grads(active.size()), host_grads(active.size());
    for (Eigen::Index step = 0; step < config.steps_per_factor; ++step) {
        // Materialize adapter contributions into a working copy.
        CompressedModel working = model;
        for (std::size_t i = 0; i < active.size(); ++i) {
            if (!use_lora[i]) continue;
            FactorizedLayer& f = std::get<FactorizedLayer>(working.layers[active[i]]);
            Matrix& host = phase == Phase::Left ? f.left : f.right;
            host += adapters[i].scale * adapters[i].up * adapters[i].down;
        }
        Batch batch = sampler.next();
        CompressedGradients grads;
        double loss = compressed_loss_and_grads(working, batch, grads);
        if (!std::isfinite(loss))
            throw std::runtime_error("rehab diverged: non-finite loss at step " +
                                     std::to_string(step));

        std::vector<double*> params;
        std::vector<const double*> grad_ptrs;
        std::vector<bool> decay;
        for (std::size_t i = 0; i < active.size(); ++i) {
            std::size_t l = active[i];
            const Matrix& host_grad = phase == Phase::Left ? grads.left[l] : grads.right[l];
            FactorizedLayer& f = std::get<FactorizedLayer>(model.layers[l]);
            Matrix& host = phase == Phase::Left ? f.left : f.right;
            if (use_lora[i]) {
                up_grads[i] = adapters[i].scale * host_grad * adapters[i].down.transpose();
                down_grads[i] = adapters[i].scale * adapters[i].up.transpose() * host_grad;
                params.push_back(adapters[i].up.data());
                grad_ptrs.push_back(up_grads[i].data());
                decay.push_back(false);
                params.push_back(adapters[i].down.data());
                grad_ptrs.push_back(down_grads[i].data());
                decay.push_back(false);
            } else {
                host_grads[i] = host_grad;
                params.push_back(host.data());
                grad_ptrs.push_back(host_grads[i].data());
                decay.push_back(false);
            }
        }
        optimizer.step(params, grad_ptrs, decay);
        if (sink) {
            StepMetrics metrics;
            metrics.step = step_offset + step;
            metrics.task_loss = loss;
            sink(metrics);
        }
    }

    // Merge adapters back into their host factors.
    for (std::size_t i = 0; i < active.size(); ++i) {
        if (!use_lora[i]) continue;
        FactorizedLayer& f = std::get<FactorizedLayer>(model.layers[active[i]]);
        Matrix& host = phase == Phase::Left ? f.left : f.right;
        host += adapters[i].scale * adapters[i].up * adapters[i].down;
    }
}

}  // namespace

CompressedModel rehab(const CompressedModel& model, const Dataset& data, const RehabConfig& config,
                      const MetricsSink& sink) {
    bool any = false;
    for (const MixedLayer& layer : model.layers)
        any |= std::holds_alternative<FactorizedLayer>(layer);
    if (!any) throw std::invalid_argument("rehab: model has no factorized layers");
    if (config.steps_per_factor == 0 || config.rounds == 0) return model;

    CompressedModel out = model;
    BatchSampler sampler(data, config.batch_size, config.seed);
    Eigen::Index offset = 0;
    for (Eigen::Index round = 0; round < config.rounds; ++round) {
        rehab_phase(out, sampler, config, Phase::Left, sink, offset);
        offset += config.steps_per_factor;
        rehab_phase(out, sampler, config, Phase::Right, sink, offset);
        offset += config.steps_per_factor;
    }
    return out;
}

}  // namespace prehab
