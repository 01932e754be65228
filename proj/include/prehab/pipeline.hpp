#pragma once

#include "prehab/checkpoint.hpp"
#include "prehab/dataset.hpp"
#include "prehab/trainer.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace prehab {

struct StageToggles {
    bool prehab = true;
    bool rehab = true;
};

/// Full grid description: the staged pipeline runs for the cross
/// product of (method, ratio, lambda, seed).
struct ExperimentConfig {
    DatasetSpec dataset;
    std::vector<Eigen::Index> hidden = {48, 32};
    TrainConfig base;
    PrehabConfig prehab;           // lambda/seed overridden per cell
    RehabConfig rehab;             // seed overridden per cell
    StageToggles stages;
    std::vector<CompressionMethod> methods = {CompressionMethod::WhitenedSvd};
    std::vector<double> ratios = {0.2, 0.4, 0.5, 0.6};
    std::vector<double> lambdas = {0.1};
    std::vector<std::uint64_t> seeds = {1};
    CompressionMethod baseline_method = CompressionMethod::WhitenedSvd;
    double baseline_lambda = 0.0;
    bool recalibrate_before_surgery = false;
    bool compress_head = false;
    std::filesystem::path out_dir = "out";
};

ExperimentConfig config_from_json(const nlohmann::json& j);
/// Every default materialized, for provenance in the emitted report.
nlohmann::json to_json(const ExperimentConfig& config);

struct SpectrumSummary {
    std::vector<double> top_singular;  // leading whitened singular values
    double stable_rank = 0.0;
    double tail_energy = 0.0;          // sum of sigma_i^2 beyond the plan rank
    Eigen::Index plan_rank = 0;
};

struct ReportCell {
    std::string method;
    double ratio = 0.0;
    double lambda = 0.0;
    std::uint64_t seed = 0;
    std::string stage;  // base | prehab | surgery | rehab
    double loss = 0.0;
    double accuracy = 0.0;
    Eigen::Index parameter_count = 0;
    std::vector<SpectrumSummary> spectra;
    std::optional<double> gain_accuracy;  // vs the named baseline cell
    std::optional<double> gain_loss;
    std::string error;  // non-empty when the stage failed
};

struct ExperimentReport {
    nlohmann::json config;
    std::vector<ReportCell> cells;
};

/// (candidate - baseline) / baseline. Throws on a zero baseline; report
/// assembly maps that case to an absent gain.
double relative_gain(double candidate, double baseline);

/// Executes the staged grid. Stage outputs are checkpointed under
/// config.out_dir and reused on a resumed run; a failing stage records
/// its error in the affected cells and the remaining grid continues.
ExperimentReport run_experiment(const ExperimentConfig& config, bool resume = false);

nlohmann::json to_json(const ExperimentReport& report);
ExperimentReport report_from_json(const nlohmann::json& j);

std::string report_to_csv(const ExperimentReport& report);

/// Writes report.csv and report.json into out_dir.
void emit_report(const ExperimentReport& report, const std::filesystem::path& out_dir);

/// Whitened spectrum summaries of a dense model under a plan.
std::vector<SpectrumSummary> spectrum_summaries(const ModelState& model,
                                                const CalibrationSet& calibs,
                                                const CompressionPlan& plan);

}  // namespace prehab
