#pragma once

#include "prehab/calibration.hpp"
#include "prehab/compressors.hpp"
#include "prehab/dataset.hpp"
#include "prehab/model.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>

namespace prehab {

/// Versioned JSON containers for models, calibration bundles, and
/// datasets. Matrices are stored row-major; the layouts are stable
/// across releases (see README for the schema).

nlohmann::json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const nlohmann::json& j);

nlohmann::json to_json(const ModelState& model);
ModelState model_from_json(const nlohmann::json& j);

nlohmann::json to_json(const CompressedModel& model);
CompressedModel compressed_model_from_json(const nlohmann::json& j);

nlohmann::json to_json(const CalibrationSet& calibs);
CalibrationSet calibration_from_json(const nlohmann::json& j);

nlohmann::json to_json(const PlantedDataset& data);
PlantedDataset dataset_from_json(const nlohmann::json& j);

void save_json(const nlohmann::json& j, const std::filesystem::path& path);
nlohmann::json load_json(const std::filesystem::path& path);

}  // namespace prehab
