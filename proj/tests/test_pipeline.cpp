#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "prehab/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

using namespace prehab;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag)
        : path(fs::temp_directory_path() / ("prehab_test_" + tag)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

DatasetSpec tiny_spec(std::uint64_t seed = 1) {
    DatasetSpec spec;
    spec.input_dim = 8;
    spec.num_classes = 3;
    spec.planted_rank = 2;
    spec.train_samples = 96;
    spec.calib_samples = 48;
    spec.test_samples = 48;
    spec.batch_size = 16;
    spec.seed = seed;
    return spec;
}

ExperimentConfig tiny_config(const fs::path& out_dir) {
    ExperimentConfig config;
    config.dataset = tiny_spec();
    config.hidden = {10};
    config.base.steps = 40;
    config.base.batch_size = 16;
    config.prehab.steps = 25;
    config.prehab.batch_size = 16;
    config.rehab.steps_per_factor = 15;
    config.rehab.batch_size = 16;
    config.rehab.lora_rank = 2;
    config.methods = {CompressionMethod::WhitenedSvd, CompressionMethod::PlainSvd};
    config.ratios = {0.5};
    config.lambdas = {0.0, 0.1};
    config.seeds = {1};
    config.out_dir = out_dir;
    return config;
}

Eigen::Index split_size(const Dataset& split) {
    Eigen::Index n = 0;
    for (const Batch& b : split) n += b.size();
    return n;
}

}  // namespace

TEST_CASE("gen_dataset: sizes, determinism, and class balance") {
    PlantedDataset a = gen_dataset(tiny_spec(3));
    PlantedDataset b = gen_dataset(tiny_spec(3));
    CHECK(a.teacher == b.teacher);
    CHECK(a.train.front().inputs == b.train.front().inputs);

    CHECK(split_size(a.train) == 96);
    CHECK(split_size(a.calibration) == 48);
    CHECK(split_size(a.test) == 48);
    for (const Batch& batch : a.train) CHECK(batch.size() <= 16);

    // Teacher is genuinely low rank.
    Vector sigma = svd(a.teacher).sigma;
    for (Eigen::Index i = 2; i < sigma.size(); ++i) CHECK(sigma(i) < 1e-10 * sigma(0));

    // Balance within 10% of uniform on the training split.
    std::map<int, Eigen::Index> counts;
    for (const Batch& batch : a.train)
        for (int y : batch.labels) {
            CHECK(y >= 0);
            CHECK(y < 3);
            ++counts[y];
        }
    for (auto [label, n] : counts)
        CHECK(std::abs(static_cast<double>(n) - 32.0) <= 0.1 * 96.0);

    PlantedDataset c = gen_dataset(tiny_spec(5));
    CHECK(a.teacher != c.teacher);

    // Some seeds genuinely cannot reach balance on a spec this small;
    // the generator must give up with a clear error instead of looping.
    CHECK_THROWS_AS(gen_dataset(tiny_spec(4)), std::runtime_error);
}

TEST_CASE("relative_gain arithmetic") {
    CHECK(relative_gain(1.2, 1.0) == doctest::Approx(0.2));
    CHECK(relative_gain(0.5, 1.0) == doctest::Approx(-0.5));
    CHECK_THROWS_AS(relative_gain(1.0, 0.0), std::invalid_argument);
}

TEST_CASE("experiment config JSON round trip keeps non-default values") {
    ExperimentConfig c = tiny_config("somewhere");
    c.prehab.surrogate = SurrogateKind::SpectralL1;
    c.baseline_method = CompressionMethod::PlainSvd;
    c.baseline_lambda = 0.1;
    c.recalibrate_before_surgery = true;
    c.rehab.mode = RehabMode::DirectFactor;
    ExperimentConfig back = config_from_json(to_json(c));
    CHECK(back.dataset.input_dim == 8);
    CHECK(back.dataset.seed == 1);
    CHECK(back.hidden == c.hidden);
    CHECK(back.base.steps == 40);
    CHECK(back.prehab.surrogate == SurrogateKind::SpectralL1);
    CHECK(back.rehab.mode == RehabMode::DirectFactor);
    CHECK(back.rehab.lora_rank == 2);
    CHECK(back.methods == c.methods);
    CHECK(back.ratios == c.ratios);
    CHECK(back.lambdas == c.lambdas);
    CHECK(back.baseline_method == CompressionMethod::PlainSvd);
    CHECK(back.baseline_lambda == 0.1);
    CHECK(back.recalibrate_before_surgery);
    CHECK(back.out_dir == fs::path("somewhere"));
}

TEST_CASE("model checkpoints round trip bit for bit") {
    ModelState model = random_model(6, {5, 4}, 3, 7);
    ModelState back = model_from_json(to_json(model));
    REQUIRE(back.layers.size() == model.layers.size());
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        CHECK(back.layers[l].weight == model.layers[l].weight);
        CHECK(back.layers[l].bias == model.layers[l].bias);
        CHECK(back.layers[l].activation == model.layers[l].activation);
    }
    CHECK_THROWS_AS(model_from_json(nlohmann::json{{"format", "something-else"}, {"version", 1}}),
                    std::invalid_argument);
}

TEST_CASE("compressed model and calibration checkpoints round trip") {
    ModelState model = random_model(8, {6}, 3, 8);
    CalibrationSet calibs = calibrate(model, gen_dataset(tiny_spec(8)).calibration);
    CompressionPlan plan = make_plan(model, 0.5, CompressionMethod::WhitenedSvd);
    CompressedModel cm = compress_model(model, plan, calibs);

    CompressedModel cm_back = compressed_model_from_json(to_json(cm));
    const FactorizedLayer& f = std::get<FactorizedLayer>(cm.layers[0]);
    const FactorizedLayer& fb = std::get<FactorizedLayer>(cm_back.layers[0]);
    CHECK(fb.left == f.left);
    CHECK(fb.right == f.right);
    CHECK(fb.rank == f.rank);
    CHECK(fb.method == f.method);
    CHECK(std::get<DenseLayer>(cm_back.layers[1]).weight ==
          std::get<DenseLayer>(cm.layers[1]).weight);

    CalibrationSet cal_back = calibration_from_json(to_json(calibs));
    REQUIRE(cal_back.size() == calibs.size());
    for (std::size_t l = 0; l < calibs.size(); ++l) {
        CHECK(cal_back[l].whitening_x == calibs[l].whitening_x);
        CHECK(cal_back[l].fisher_diag == calibs[l].fisher_diag);
        CHECK(cal_back[l].kfac_a == calibs[l].kfac_a);
        CHECK(cal_back[l].sample_count == calibs[l].sample_count);
    }
}

TEST_CASE("dataset checkpoint and file round trip") {
    TempDir dir("dataset_io");
    PlantedDataset data = gen_dataset(tiny_spec(9));
    save_json(to_json(data), dir.path / "dataset.json");
    PlantedDataset back = dataset_from_json(load_json(dir.path / "dataset.json"));
    CHECK(back.teacher == data.teacher);
    CHECK(back.spec.seed == data.spec.seed);
    CHECK(back.train.size() == data.train.size());
    CHECK(back.train.front().inputs == data.train.front().inputs);
    CHECK(back.test.back().labels == data.test.back().labels);
    CHECK_THROWS_AS(load_json(dir.path / "missing.json"), std::runtime_error);
}

TEST_CASE("run_experiment produces the staged grid with gains vs the baseline") {
    TempDir dir("grid");
    ExperimentConfig config = tiny_config(dir.path);
    ExperimentReport report = run_experiment(config);

    // 2 methods x 1 ratio x 2 lambdas x 1 seed, 4 stages each.
    CHECK(report.cells.size() == 16);
    std::map<std::string, int> stage_counts;
    for (const ReportCell& cell : report.cells) {
        CHECK(cell.error.empty());
        ++stage_counts[cell.stage];
        CHECK(std::isfinite(cell.loss));
        CHECK(cell.accuracy >= 0.0);
        CHECK(cell.accuracy <= 1.0);
        CHECK(cell.parameter_count > 0);
    }
    CHECK(stage_counts["base"] == 4);
    CHECK(stage_counts["prehab"] == 4);
    CHECK(stage_counts["surgery"] == 4);
    CHECK(stage_counts["rehab"] == 4);

    // Surgery shrinks the parameter count and records whitened spectra.
    for (const ReportCell& cell : report.cells) {
        if (cell.stage == "surgery" || cell.stage == "rehab") {
            CHECK(cell.parameter_count < 10 * 8 + 10 + 3 * 10 + 3);
            REQUIRE(cell.spectra.size() == 1);
            CHECK(cell.spectra[0].plan_rank == rank_for_ratio(10, 8, 0.5));
            CHECK(cell.spectra[0].stable_rank >= 1.0);
        }
    }

    // The baseline cell (whitened, lambda 0) has zero gain; the plain-SVD
    // cell at the same coordinates has some gain attached.
    for (const ReportCell& cell : report.cells) {
        if (cell.method == "whitened_svd" && cell.lambda == 0.0) {
            REQUIRE(cell.gain_accuracy.has_value());
            CHECK(*cell.gain_accuracy == 0.0);
        }
        if (cell.method == "plain_svd" && cell.lambda == 0.0 && cell.stage == "surgery")
            CHECK(cell.gain_accuracy.has_value());
    }

    // Artifacts land under out_dir.
    CHECK(fs::exists(dir.path / "dataset.json"));
    CHECK(fs::exists(dir.path / "seed_1" / "base.json"));
    CHECK(fs::exists(dir.path / "seed_1" / "calib.json"));
    CHECK(fs::exists(dir.path / "seed_1" / "prehab_l0.1.json"));
    CHECK(fs::exists(dir.path / "cells" / "plain_svd_r0.5_l0.1_s1" / "compressed.json"));
    CHECK(fs::exists(dir.path / "cells" / "plain_svd_r0.5_l0.1_s1" / "rehab.json"));
    CHECK(fs::exists(dir.path / "cells" / "plain_svd_r0.5_l0.1_s1" / "rehab_metrics.jsonl"));

    // Report serialization round trips and the CSV is well formed.
    ExperimentReport back = report_from_json(to_json(report));
    REQUIRE(back.cells.size() == report.cells.size());
    for (std::size_t i = 0; i < report.cells.size(); ++i) {
        CHECK(back.cells[i].loss == report.cells[i].loss);
        CHECK(back.cells[i].stage == report.cells[i].stage);
        CHECK(back.cells[i].gain_accuracy == report.cells[i].gain_accuracy);
    }
    std::string csv = report_to_csv(report);
    CHECK(csv.rfind("method,ratio,lambda,seed,stage,loss,accuracy,param_count", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 17);  // header + 16 rows

    emit_report(report, dir.path);
    CHECK(fs::exists(dir.path / "report.json"));
    CHECK(fs::exists(dir.path / "report.csv"));
}

TEST_CASE("run_experiment is deterministic across fresh runs") {
    TempDir dir_a("det_a");
    TempDir dir_b("det_b");
    ExperimentConfig config = tiny_config(dir_a.path);
    config.methods = {CompressionMethod::WhitenedSvd};
    config.lambdas = {0.1};
    ExperimentReport a = run_experiment(config);
    config.out_dir = dir_b.path;
    ExperimentReport b = run_experiment(config);
    REQUIRE(a.cells.size() == b.cells.size());
    for (std::size_t i = 0; i < a.cells.size(); ++i) {
        CHECK(a.cells[i].loss == b.cells[i].loss);
        CHECK(a.cells[i].accuracy == b.cells[i].accuracy);
    }
}

TEST_CASE("resume reuses stage checkpoints instead of recomputing") {
    TempDir dir("resume");
    ExperimentConfig config = tiny_config(dir.path);
    config.methods = {CompressionMethod::WhitenedSvd};
    config.lambdas = {0.1};
    ExperimentReport first = run_experiment(config);

    auto base_path = dir.path / "seed_1" / "base.json";
    auto rehab_path = dir.path / "cells" / "whitened_svd_r0.5_l0.1_s1" / "rehab.json";
    auto base_time = fs::last_write_time(base_path);
    auto rehab_time = fs::last_write_time(rehab_path);

    ExperimentReport second = run_experiment(config, true);
    CHECK(fs::last_write_time(base_path) == base_time);
    CHECK(fs::last_write_time(rehab_path) == rehab_time);
    REQUIRE(second.cells.size() == first.cells.size());
    for (std::size_t i = 0; i < first.cells.size(); ++i)
        CHECK(second.cells[i].loss == first.cells[i].loss);
}

TEST_CASE("a failing cell is recorded and the grid continues") {
    TempDir dir("errors");
    ExperimentConfig config = tiny_config(dir.path);
    config.methods = {CompressionMethod::WhitenedSvd};
    config.lambdas = {0.1};
    config.ratios = {1.5, 0.5};  // the first ratio is invalid
    ExperimentReport report = run_experiment(config);

    int errors = 0, rehabs = 0;
    for (const ReportCell& cell : report.cells) {
        if (cell.stage == "error") {
            ++errors;
            CHECK_FALSE(cell.error.empty());
            CHECK(cell.ratio == 1.5);
        }
        if (cell.stage == "rehab") ++rehabs;
    }
    CHECK(errors == 1);
    CHECK(rehabs == 1);  // the valid ratio still ran to completion
}
