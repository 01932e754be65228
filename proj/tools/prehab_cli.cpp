// Command-line front end for the prehab/surgery/rehab pipeline. Every
// subcommand reads and writes JSON checkpoints so stages compose across
// invocations; `sweep` runs the full experiment grid.

#include "prehab/pipeline.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

namespace {

using namespace prehab;

constexpr int kExitOk = 0;
constexpr int kExitConfigError = 1;
constexpr int kExitStageFailure = 2;

nlohmann::json load_any(const std::string& path) { return load_json(path); }

// "method=whitened_svd,ratio=0.5,lambda=0.1,seed=3" -> narrowed grid.
void apply_cell_filter(ExperimentConfig& config, const std::string& cell) {
    std::stringstream ss(cell);
    std::string item;
    while (std::getline(ss, item, ',')) {
        auto eq = item.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("--cell: expected key=value, got '" + item + "'");
        std::string key = item.substr(0, eq);
        std::string value = item.substr(eq + 1);
        if (key == "method")
            config.methods = {compression_method_from_string(value)};
        else if (key == "ratio")
            config.ratios = {std::stod(value)};
        else if (key == "lambda")
            config.lambdas = {std::stod(value)};
        else if (key == "seed")
            config.seeds = {std::stoull(value)};
        else
            throw std::invalid_argument("--cell: unknown key '" + key + "'");
    }
}

int run(int argc, char** argv) {
    CLI::App app{"Low-rank prehab, SVD surgery, and rehab for dense classifiers"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "Generate a planted-teacher dataset");
    DatasetSpec spec;
    std::string gen_out = "dataset.json";
    gen->add_option("--input-dim", spec.input_dim);
    gen->add_option("--classes", spec.num_classes);
    gen->add_option("--planted-rank", spec.planted_rank);
    gen->add_option("--train-samples", spec.train_samples);
    gen->add_option("--calib-samples", spec.calib_samples);
    gen->add_option("--test-samples", spec.test_samples);
    gen->add_option("--batch-size", spec.batch_size);
    gen->add_option("--seed", spec.seed);
    gen->add_option("--out", gen_out, "Output dataset checkpoint");

    // train
    auto* train = app.add_subcommand("train", "Train a base model on a dataset");
    std::string train_data, train_out = "model.json";
    std::vector<Eigen::Index> train_hidden = {48, 32};
    TrainConfig train_cfg;
    train->add_option("--data", train_data)->required();
    train->add_option("--hidden", train_hidden, "Hidden layer widths");
    train->add_option("--steps", train_cfg.steps);
    train->add_option("--batch-size", train_cfg.batch_size);
    train->add_option("--lr", train_cfg.optimizer.learning_rate);
    train->add_option("--seed", train_cfg.seed);
    train->add_option("--out", train_out);

    // calibrate
    auto* calib_cmd = app.add_subcommand("calibrate", "Estimate per-layer calibration statistics");
    std::string calib_data, calib_model, calib_out = "calib.json";
    calib_cmd->add_option("--data", calib_data)->required();
    calib_cmd->add_option("--model", calib_model)->required();
    calib_cmd->add_option("--out", calib_out);

    // prehab
    auto* pre = app.add_subcommand("prehab", "Pre-compression spectral conditioning");
    std::string pre_data, pre_model, pre_calib, pre_out = "prehab.json";
    std::string pre_surrogate = "stable_rank";
    std::string pre_metrics;
    PrehabConfig pre_cfg;
    pre->add_option("--data", pre_data)->required();
    pre->add_option("--model", pre_model)->required();
    pre->add_option("--calib", pre_calib)->required();
    pre->add_option("--lambda", pre_cfg.lambda);
    pre->add_option("--steps", pre_cfg.steps);
    pre->add_option("--batch-size", pre_cfg.batch_size);
    pre->add_option("--lr", pre_cfg.optimizer.learning_rate);
    pre->add_option("--seed", pre_cfg.seed);
    pre->add_option("--surrogate", pre_surrogate, "stable_rank | spectral_l1");
    pre->add_flag("!--no-whiten", pre_cfg.whiten_surrogate, "Apply the surrogate to raw W");
    pre->add_option("--metrics", pre_metrics, "Per-step metrics JSONL path");
    pre->add_option("--out", pre_out);

    // compress
    auto* comp = app.add_subcommand("compress", "Rank-r surgery on a dense model");
    std::string comp_model, comp_calib, comp_out = "compressed.json";
    std::string comp_method = "whitened_svd";
    double comp_ratio = 0.5;
    bool comp_head = false;
    comp->add_option("--model", comp_model)->required();
    comp->add_option("--calib", comp_calib, "Required for all methods except plain_svd");
    comp->add_option("--method", comp_method, "plain_svd | fwsvd | gfwsvd | whitened_svd");
    comp->add_option("--ratio", comp_ratio, "Fraction of parameters removed");
    comp->add_flag("--compress-head", comp_head, "Also compress the classifier head");
    comp->add_option("--out", comp_out);

    // rehab
    auto* reh = app.add_subcommand("rehab", "Post-compression factor fine-tuning");
    std::string reh_data, reh_model, reh_out = "rehab.json";
    std::string reh_mode = "lora";
    RehabConfig reh_cfg;
    reh->add_option("--data", reh_data)->required();
    reh->add_option("--model", reh_model)->required();
    reh->add_option("--mode", reh_mode, "lora | direct");
    reh->add_option("--lora-rank", reh_cfg.lora_rank);
    reh->add_option("--steps-per-factor", reh_cfg.steps_per_factor);
    reh->add_option("--rounds", reh_cfg.rounds);
    reh->add_option("--batch-size", reh_cfg.batch_size);
    reh->add_option("--lr", reh_cfg.optimizer.learning_rate);
    reh->add_option("--seed", reh_cfg.seed);
    reh->add_option("--out", reh_out);

    // eval
    auto* ev = app.add_subcommand("eval", "Evaluate a model checkpoint on the test split");
    std::string ev_data, ev_model;
    ev->add_option("--data", ev_data)->required();
    ev->add_option("--model", ev_model)->required();

    // sweep
    auto* sweep = app.add_subcommand("sweep", "Run the full experiment grid");
    std::string sweep_config, sweep_out, sweep_cell;
    bool sweep_resume = false;
    std::uint64_t sweep_seed = 0;
    bool sweep_seed_set = false;
    sweep->add_option("--config", sweep_config, "Experiment config JSON")->required();
    sweep->add_option("--out", sweep_out, "Override output directory");
    sweep->add_option("--seed", sweep_seed, "Run a single seed")->each([&](const std::string&) {
        sweep_seed_set = true;
    });
    sweep->add_flag("--resume", sweep_resume, "Reuse existing stage checkpoints");
    sweep->add_option("--cell", sweep_cell, "method=...,ratio=...,lambda=...,seed=...");

    // report
    auto* rep = app.add_subcommand("report", "Re-emit report.csv/json from a sweep directory");
    std::string rep_dir;
    rep->add_option("--out", rep_dir, "Sweep output directory")->required();

    CLI11_PARSE(app, argc, argv);

    if (gen->parsed()) {
        PlantedDataset data = gen_dataset(spec);
        save_json(to_json(data), gen_out);
        std::cout << "wrote " << gen_out << "\n";
        return kExitOk;
    }
    if (train->parsed()) {
        PlantedDataset data = dataset_from_json(load_any(train_data));
        ModelState init = random_model(data.spec.input_dim, train_hidden, data.spec.num_classes,
                                       train_cfg.seed);
        ModelState model = train_base(init, data.train, train_cfg);
        save_json(to_json(model), train_out);
        EvalResult result = evaluate(model, data.test);
        std::cout << "wrote " << train_out << "  test loss " << result.mean_loss << "  accuracy "
                  << result.accuracy << "\n";
        return kExitOk;
    }
    if (calib_cmd->parsed()) {
        PlantedDataset data = dataset_from_json(load_any(calib_data));
        ModelState model = model_from_json(load_any(calib_model));
        save_json(to_json(calibrate(model, data.calibration)), calib_out);
        std::cout << "wrote " << calib_out << "\n";
        return kExitOk;
    }
    if (pre->parsed()) {
        PlantedDataset data = dataset_from_json(load_any(pre_data));
        ModelState model = model_from_json(load_any(pre_model));
        CalibrationSet calibs = calibration_from_json(load_any(pre_calib));
        pre_cfg.surrogate = pre_surrogate == "spectral_l1" ? SurrogateKind::SpectralL1
                                                           : SurrogateKind::StableRank;
        MetricsSink sink;
        std::shared_ptr<std::ofstream> metrics_file;
        if (!pre_metrics.empty()) {
            metrics_file = std::make_shared<std::ofstream>(pre_metrics);
            sink = [metrics_file](const StepMetrics& m) {
                nlohmann::json line{{"step", m.step},
                                    {"task_loss", m.task_loss},
                                    {"surrogate_value", m.surrogate_value},
                                    {"stable_ranks", m.layer_stable_ranks}};
                *metrics_file << line.dump() << '\n';
            };
        }
        ModelState result = run_prehab(model, data.train, calibs, pre_cfg, sink);
        save_json(to_json(result), pre_out);
        std::cout << "wrote " << pre_out << "\n";
        return kExitOk;
    }
    if (comp->parsed()) {
        ModelState model = model_from_json(load_any(comp_model));
        CompressionMethod method = compression_method_from_string(comp_method);
        CalibrationSet calibs;
        if (!comp_calib.empty()) calibs = calibration_from_json(load_any(comp_calib));
        CompressionPlan plan = make_plan(model, comp_ratio, method, comp_head);
        CompressedModel compressed = compress_model(model, plan, calibs);
        save_json(to_json(compressed), comp_out);
        std::cout << "wrote " << comp_out << "  parameters " << compressed.parameter_count()
                  << "\n";
        return kExitOk;
    }
    if (reh->parsed()) {
        PlantedDataset data = dataset_from_json(load_any(reh_data));
        CompressedModel model = compressed_model_from_json(load_any(reh_model));
        reh_cfg.mode = reh_mode == "direct" ? RehabMode::DirectFactor : RehabMode::Lora;
        CompressedModel recovered = rehab(model, data.train, reh_cfg);
        save_json(to_json(recovered), reh_out);
        std::cout << "wrote " << reh_out << "\n";
        return kExitOk;
    }
    if (ev->parsed()) {
        PlantedDataset data = dataset_from_json(load_any(ev_data));
        nlohmann::json j = load_any(ev_model);
        EvalResult result;
        if (j.value("format", "") == "prehab-model")
            result = evaluate(model_from_json(j), data.test);
        else
            result = evaluate(compressed_model_from_json(j), data.test);
        std::cout << "loss " << result.mean_loss << "  accuracy " << result.accuracy << "\n";
        return kExitOk;
    }
    if (sweep->parsed()) {
        ExperimentConfig config = config_from_json(load_any(sweep_config));
        if (!sweep_out.empty()) config.out_dir = sweep_out;
        if (sweep_seed_set) config.seeds = {sweep_seed};
        if (!sweep_cell.empty()) apply_cell_filter(config, sweep_cell);
        ExperimentReport result = run_experiment(config, sweep_resume);
        emit_report(result, config.out_dir);
        int failures = 0;
        for (const ReportCell& cell : result.cells)
            if (!cell.error.empty()) ++failures;
        std::cout << "wrote " << (config.out_dir / "report.csv").string() << " ("
                  << result.cells.size() << " rows, " << failures << " failed)\n";
        return failures == 0 ? kExitOk : kExitStageFailure;
    }
    if (rep->parsed()) {
        ExperimentReport report =
            report_from_json(load_any((std::filesystem::path(rep_dir) / "report.json").string()));
        emit_report(report, rep_dir);
        std::cout << "re-emitted report in " << rep_dir << "\n";
        return kExitOk;
    }
    return kExitConfigError;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfigError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitStageFailure;
    }
}
