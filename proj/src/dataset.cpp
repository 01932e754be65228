#include "prehab/dataset.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace prehab {

namespace {

Dataset batched(const Matrix& inputs, const std::vector<int>& labels, Eigen::Index batch_size) {
    Dataset out;
    Eigen::Index total = inputs.cols();
    for (Eigen::Index at = 0; at < total; at += batch_size) {
        Eigen::Index take = std::min(batch_size, total - at);
        Batch b;
        b.inputs = inputs.middleCols(at, take);
        b.labels.assign(labels.begin() + at, labels.begin() + at + take);
        out.push_back(std::move(b));
    }
    return out;
}

bool balanced(const std::vector<int>& labels, Eigen::Index num_classes) {
    std::vector<Eigen::Index> counts(static_cast<std::size_t>(num_classes), 0);
    for (int y : labels) ++counts[static_cast<std::size_t>(y)];
    double uniform = static_cast<double>(labels.size()) / static_cast<double>(num_classes);
    for (Eigen::Index c : counts)
        if (std::abs(static_cast<double>(c) - uniform) > 0.1 * uniform) return false;
    return true;
}

}  // namespace

PlantedDataset gen_dataset(const DatasetSpec& spec) {
    if (spec.input_dim < 2 || spec.num_classes < 2 || spec.planted_rank < 1 ||
        spec.train_samples < spec.num_classes || spec.calib_samples < 1 || spec.test_samples < 1 ||
        spec.batch_size < 1)
        throw std::invalid_argument("gen_dataset: spec below minimal sizes");
    if (spec.planted_rank > std::min(spec.num_classes, spec.input_dim))
        throw std::invalid_argument("gen_dataset: planted rank exceeds teacher dimensions");

    const Eigen::Index total = spec.train_samples + spec.calib_samples + spec.test_samples;
    for (int attempt = 0; attempt < 100; ++attempt) {
        GaussianRng rng(spec.seed * 1000003ULL + static_cast<std::uint64_t>(attempt));
        Matrix left = rng.matrix(spec.num_classes, spec.planted_rank);
        Matrix right = rng.matrix(spec.planted_rank, spec.input_dim);
        Matrix teacher = left * right / std::sqrt(static_cast<double>(spec.planted_rank));

        Matrix inputs = rng.matrix(spec.input_dim, total);
        std::vector<int> labels(static_cast<std::size_t>(total));
        Matrix logits = teacher * inputs;
        for (Eigen::Index c = 0; c < total; ++c) {
            Eigen::Index arg;
            logits.col(c).maxCoeff(&arg);
            labels[static_cast<std::size_t>(c)] = static_cast<int>(arg);
        }
        if (!balanced(labels, spec.num_classes)) continue;

        PlantedDataset out;
        out.spec = spec;
        out.teacher = std::move(teacher);
        out.train = batched(inputs.leftCols(spec.train_samples),
                            {labels.begin(), labels.begin() + spec.train_samples}, spec.batch_size);
        out.calibration =
            batched(inputs.middleCols(spec.train_samples, spec.calib_samples),
                    {labels.begin() + spec.train_samples,
                     labels.begin() + spec.train_samples + spec.calib_samples},
                    spec.batch_size);
        out.test = batched(inputs.rightCols(spec.test_samples),
                           {labels.end() - spec.test_samples, labels.end()}, spec.batch_size);
        return out;
    }
    throw std::runtime_error("gen_dataset: class balance unattainable after 100 attempts (seed " +
                             std::to_string(spec.seed) + ")");
}

}  // namespace prehab
