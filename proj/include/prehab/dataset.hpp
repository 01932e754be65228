#pragma once

#include "prehab/model.hpp"

#include <cstdint>

namespace prehab {

struct DatasetSpec {
    Eigen::Index input_dim = 64;
    Eigen::Index num_classes = 4;
    Eigen::Index planted_rank = 4;
    Eigen::Index train_samples = 2048;
    Eigen::Index calib_samples = 512;
    Eigen::Index test_samples = 1024;
    Eigen::Index batch_size = 64;
    std::uint64_t seed = 0;
};

/// Synthetic classification task whose labeling network has known
/// low-rank weights: the teacher map is a product of two thin Gaussian
/// factors at the planted rank, inputs are standard Gaussian, labels
/// are the teacher argmax.
struct PlantedDataset {
    Dataset train;
    Dataset calibration;
    Dataset test;
    Matrix teacher;  // num_classes x input_dim, rank <= planted_rank
    DatasetSpec spec;
};

/// Deterministic per seed. Resamples (teacher and inputs, derived seed)
/// until every class frequency is within 10% of uniform; throws after
/// 100 attempts.
PlantedDataset gen_dataset(const DatasetSpec& spec);

}  // namespace prehab
