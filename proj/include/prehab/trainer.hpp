#pragma once

#include "prehab/calibration.hpp"
#include "prehab/compressors.hpp"
#include "prehab/model.hpp"
#include "prehab/surrogates.hpp"

#include <cstdint>
#include <functional>
#include <vector>

namespace prehab {

struct AdamWConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.01;
};

/// Decoupled-weight-decay Adam over a flat list of parameter blocks.
class AdamW {
public:
    AdamW(const std::vector<Eigen::Index>& sizes, AdamWConfig config);

    /// One update over contiguous parameter/gradient blocks matching the
    /// sizes given at construction. `decay_mask[i]` disables weight decay
    /// for block i (biases are never decayed).
    void step(const std::vector<double*>& params, const std::vector<const double*>& grads,
              const std::vector<bool>& decay_mask);

    std::int64_t step_count() const { return step_; }

private:
    AdamWConfig config_;
    std::vector<Vector> m_;
    std::vector<Vector> v_;
    std::int64_t step_ = 0;
};

struct TrainConfig {
    Eigen::Index steps = 500;
    Eigen::Index batch_size = 64;
    AdamWConfig optimizer;
    std::uint64_t seed = 0;
};

struct StepMetrics {
    std::int64_t step = 0;
    double task_loss = 0.0;
    double surrogate_value = 0.0;
    std::vector<double> layer_stable_ranks;
    bool degenerate_spectrum = false;
};

using MetricsSink = std::function<void(const StepMetrics&)>;

struct PrehabConfig {
    double lambda = 0.1;
    std::vector<double> lambda_per_layer;  // optional overrides, empty = global lambda
    SurrogateKind surrogate = SurrogateKind::StableRank;
    Eigen::Index steps = 500;
    Eigen::Index batch_size = 64;
    AdamWConfig optimizer;
    std::uint64_t seed = 0;
    bool whiten_surrogate = true;  // apply the surrogate to W X rather than raw W
};

/// Samples of the training split, re-batched with a seeded shuffle per
/// epoch. The shuffle depends only on (seed, epoch), so runs that share
/// a seed see identical batch sequences.
class BatchSampler {
public:
    BatchSampler(const Dataset& data, Eigen::Index batch_size, std::uint64_t seed);
    Batch next();

private:
    void reshuffle();

    Matrix inputs_;            // dim x total
    std::vector<int> labels_;
    Eigen::Index batch_size_;
    std::uint64_t seed_;
    Eigen::Index epoch_ = 0;
    Eigen::Index cursor_ = 0;
    std::vector<Eigen::Index> order_;
};

ModelState train_base(const ModelState& model, const Dataset& data, const TrainConfig& config,
                      const MetricsSink& sink = nullptr);

/// Joint task + lambda * rank-surrogate optimization with frozen
/// whitening factors. With lambda == 0 the trajectory is bit-identical
/// to train_base under the same seed and optimizer settings.
ModelState run_prehab(const ModelState& model, const Dataset& data, const CalibrationSet& calibs,
                      const PrehabConfig& config, const MetricsSink& sink = nullptr);

enum class RehabMode { Lora, DirectFactor };

struct RehabConfig {
    RehabMode mode = RehabMode::Lora;
    Eigen::Index lora_rank = 10;
    Eigen::Index steps_per_factor = 100;
    Eigen::Index batch_size = 64;
    Eigen::Index rounds = 1;  // alternating U/V passes
    AdamWConfig optimizer;
    std::uint64_t seed = 0;
};

struct LoraAdapter {
    Matrix down;  // r_lora x host_cols
    Matrix up;    // host_rows x r_lora
    double scale = 1.0;
};

/// Alternating left/right factor fine-tuning of every FactorizedLayer.
/// LoRA mode trains additive adapters on the active factor and merges
/// them on finish; when the adapter rank is not below the factor rank,
/// direct-factor mode is auto-selected. Factor ranks never change.
CompressedModel rehab(const CompressedModel& model, const Dataset& data, const RehabConfig& config,
                      const MetricsSink& sink = nullptr);

/// Task gradients of a compressed model w.r.t. the factors and biases.
struct CompressedGradients {
    std::vector<Matrix> left;
    std::vector<Matrix> right;
    std::vector<Vector> bias;
};
double compressed_loss_and_grads(const CompressedModel& model, const Batch& batch,
                                 CompressedGradients& grads);

}  // namespace prehab
