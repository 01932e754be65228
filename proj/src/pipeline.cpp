#include "prehab/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace prehab {

using nlohmann::json;

namespace {

std::string fmt_short(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

std::string fmt_full(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

json adamw_to_json(const AdamWConfig& c) {
    return {{"learning_rate", c.learning_rate}, {"beta1", c.beta1},       {"beta2", c.beta2},
            {"epsilon", c.epsilon},             {"weight_decay", c.weight_decay}};
}

AdamWConfig adamw_from_json(const json& j, AdamWConfig c) {
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    return c;
}

std::string surrogate_name(SurrogateKind kind) {
    return kind == SurrogateKind::SpectralL1 ? "spectral_l1" : "stable_rank";
}

SurrogateKind surrogate_from_name(const std::string& name) {
    if (name == "spectral_l1") return SurrogateKind::SpectralL1;
    if (name == "stable_rank") return SurrogateKind::StableRank;
    throw std::invalid_argument("config: unknown surrogate: " + name);
}

}  // namespace

json to_json(const ExperimentConfig& c) {
    json j;
    j["dataset"] = {{"input_dim", c.dataset.input_dim},
                    {"num_classes", c.dataset.num_classes},
                    {"planted_rank", c.dataset.planted_rank},
                    {"train_samples", c.dataset.train_samples},
                    {"calib_samples", c.dataset.calib_samples},
                    {"test_samples", c.dataset.test_samples},
                    {"batch_size", c.dataset.batch_size},
                    {"seed", c.dataset.seed}};
    j["hidden"] = c.hidden;
    j["base"] = {{"steps", c.base.steps},
                 {"batch_size", c.base.batch_size},
                 {"optimizer", adamw_to_json(c.base.optimizer)}};
    j["prehab"] = {{"lambda", c.prehab.lambda},
                   {"surrogate", surrogate_name(c.prehab.surrogate)},
                   {"steps", c.prehab.steps},
                   {"batch_size", c.prehab.batch_size},
                   {"whiten_surrogate", c.prehab.whiten_surrogate},
                   {"optimizer", adamw_to_json(c.prehab.optimizer)}};
    j["rehab"] = {{"mode", c.rehab.mode == RehabMode::Lora ? "lora" : "direct"},
                  {"lora_rank", c.rehab.lora_rank},
                  {"steps_per_factor", c.rehab.steps_per_factor},
                  {"batch_size", c.rehab.batch_size},
                  {"rounds", c.rehab.rounds},
                  {"optimizer", adamw_to_json(c.rehab.optimizer)}};
    j["stages"] = {{"prehab", c.stages.prehab}, {"rehab", c.stages.rehab}};
    j["methods"] = json::array();
    for (CompressionMethod m : c.methods) j["methods"].push_back(to_string(m));
    j["ratios"] = c.ratios;
    j["lambdas"] = c.lambdas;
    j["seeds"] = c.seeds;
    j["baseline_method"] = to_string(c.baseline_method);
    j["baseline_lambda"] = c.baseline_lambda;
    j["recalibrate_before_surgery"] = c.recalibrate_before_surgery;
    j["compress_head"] = c.compress_head;
    j["out_dir"] = c.out_dir.string();
    return j;
}

ExperimentConfig config_from_json(const json& j) {
    ExperimentConfig c;
    if (j.contains("dataset")) {
        const json& d = j["dataset"];
        c.dataset.input_dim = d.value("input_dim", c.dataset.input_dim);
        c.dataset.num_classes = d.value("num_classes", c.dataset.num_classes);
        c.dataset.planted_rank = d.value("planted_rank", c.dataset.planted_rank);
        c.dataset.train_samples = d.value("train_samples", c.dataset.train_samples);
        c.dataset.calib_samples = d.value("calib_samples", c.dataset.calib_samples);
        c.dataset.test_samples = d.value("test_samples", c.dataset.test_samples);
        c.dataset.batch_size = d.value("batch_size", c.dataset.batch_size);
        c.dataset.seed = d.value("seed", c.dataset.seed);
    }
    c.hidden = j.value("hidden", c.hidden);
    if (j.contains("base")) {
        const json& b = j["base"];
        c.base.steps = b.value("steps", c.base.steps);
        c.base.batch_size = b.value("batch_size", c.base.batch_size);
        if (b.contains("optimizer")) c.base.optimizer = adamw_from_json(b["optimizer"], c.base.optimizer);
    }
    if (j.contains("prehab")) {
        const json& p = j["prehab"];
        c.prehab.lambda = p.value("lambda", c.prehab.lambda);
        if (p.contains("surrogate")) c.prehab.surrogate = surrogate_from_name(p["surrogate"]);
        c.prehab.steps = p.value("steps", c.prehab.steps);
        c.prehab.batch_size = p.value("batch_size", c.prehab.batch_size);
        c.prehab.whiten_surrogate = p.value("whiten_surrogate", c.prehab.whiten_surrogate);
        if (p.contains("optimizer"))
            c.prehab.optimizer = adamw_from_json(p["optimizer"], c.prehab.optimizer);
    }
    if (j.contains("rehab")) {
        const json& r = j["rehab"];
        if (r.contains("mode"))
            c.rehab.mode = r["mode"] == "direct" ? RehabMode::DirectFactor : RehabMode::Lora;
        c.rehab.lora_rank = r.value("lora_rank", c.rehab.lora_rank);
        c.rehab.steps_per_factor = r.value("steps_per_factor", c.rehab.steps_per_factor);
        c.rehab.batch_size = r.value("batch_size", c.rehab.batch_size);
        c.rehab.rounds = r.value("rounds", c.rehab.rounds);
        if (r.contains("optimizer"))
            c.rehab.optimizer = adamw_from_json(r["optimizer"], c.rehab.optimizer);
    }
    if (j.contains("stages")) {
        c.stages.prehab = j["stages"].value("prehab", c.stages.prehab);
        c.stages.rehab = j["stages"].value("rehab", c.stages.rehab);
    }
    if (j.contains("methods")) {
        c.methods.clear();
        for (const json& m : j["methods"]) c.methods.push_back(compression_method_from_string(m));
    }
    c.ratios = j.value("ratios", c.ratios);
    c.lambdas = j.value("lambdas", c.lambdas);
    c.seeds = j.value("seeds", c.seeds);
    if (j.contains("baseline_method"))
        c.baseline_method = compression_method_from_string(j["baseline_method"]);
    c.baseline_lambda = j.value("baseline_lambda", c.baseline_lambda);
    c.recalibrate_before_surgery = j.value("recalibrate_before_surgery", c.recalibrate_before_surgery);
    c.compress_head = j.value("compress_head", c.compress_head);
    if (j.contains("out_dir")) c.out_dir = j["out_dir"].get<std::string>();
    return c;
}

double relative_gain(double candidate, double baseline) {
    if (baseline == 0.0) throw std::invalid_argument("relative_gain: zero baseline");
    return (candidate - baseline) / baseline;
}

std::vector<SpectrumSummary> spectrum_summaries(const ModelState& model,
                                                const CalibrationSet& calibs,
                                                const CompressionPlan& plan) {
    std::vector<SpectrumSummary> out;
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        if (!plan.layer_mask[l]) continue;
        SvdResult s = svd(model.layers[l].weight * calibs[l].whitening_x);
        SpectrumSummary summary;
        summary.plan_rank = plan.ranks[l];
        Eigen::Index top = std::min<Eigen::Index>(8, s.sigma.size());
        summary.top_singular.assign(s.sigma.data(), s.sigma.data() + top);
        double nuc = s.sigma.sum();
        double f2 = s.sigma.squaredNorm();
        summary.stable_rank = f2 > 0.0 ? nuc * nuc / f2 : 0.0;
        for (Eigen::Index i = plan.ranks[l]; i < s.sigma.size(); ++i)
            summary.tail_energy += s.sigma(i) * s.sigma(i);
        out.push_back(std::move(summary));
    }
    return out;
}

namespace {

std::vector<SpectrumSummary> spectrum_summaries_mixed(const CompressedModel& model,
                                                      const CalibrationSet& calibs,
                                                      const CompressionPlan& plan) {
    std::vector<SpectrumSummary> out;
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        if (!plan.layer_mask[l]) continue;
        const FactorizedLayer& f = std::get<FactorizedLayer>(model.layers[l]);
        SvdResult s = svd(f.reconstruct() * calibs[l].whitening_x);
        SpectrumSummary summary;
        summary.plan_rank = plan.ranks[l];
        Eigen::Index top = std::min<Eigen::Index>(8, s.sigma.size());
        summary.top_singular.assign(s.sigma.data(), s.sigma.data() + top);
        double nuc = s.sigma.sum();
        double f2 = s.sigma.squaredNorm();
        summary.stable_rank = f2 > 0.0 ? nuc * nuc / f2 : 0.0;
        for (Eigen::Index i = plan.ranks[l]; i < s.sigma.size(); ++i)
            summary.tail_energy += s.sigma(i) * s.sigma(i);
        out.push_back(std::move(summary));
    }
    return out;
}

json spectrum_to_json(const SpectrumSummary& s) {
    return {{"top_singular", s.top_singular},
            {"stable_rank", s.stable_rank},
            {"tail_energy", s.tail_energy},
            {"plan_rank", s.plan_rank}};
}

SpectrumSummary spectrum_from_json(const json& j) {
    SpectrumSummary s;
    s.top_singular = j.at("top_singular").get<std::vector<double>>();
    s.stable_rank = j.at("stable_rank").get<double>();
    s.tail_energy = j.at("tail_energy").get<double>();
    s.plan_rank = j.at("plan_rank").get<Eigen::Index>();
    return s;
}

/// Appends per-step metrics as JSONL while a training run executes.
MetricsSink jsonl_sink(const std::filesystem::path& path, double learning_rate) {
    auto out = std::make_shared<std::ofstream>(path);
    auto start = std::chrono::steady_clock::now();
    return [out, learning_rate, start](const StepMetrics& m) {
        json line{{"step", m.step},
                  {"task_loss", m.task_loss},
                  {"surrogate_value", m.surrogate_value},
                  {"stable_ranks", m.layer_stable_ranks},
                  {"learning_rate", learning_rate},
                  {"wall_clock_s",
                   std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()}};
        *out << line.dump() << '\n';
    };
}

Eigen::Index dense_parameter_count(const ModelState& model) {
    Eigen::Index n = 0;
    for (const DenseLayer& layer : model.layers) n += layer.weight.size() + layer.bias.size();
    return n;
}

struct GridPoint {
    CompressionMethod method;
    double ratio;
    double lambda;
    std::uint64_t seed;
};

/// Caches seed- and lambda-level artifacts across cells of one run.
class ArtifactStore {
public:
    ArtifactStore(const ExperimentConfig& config, bool resume)
        : config_(config), resume_(resume) {}

    const PlantedDataset& dataset() {
        if (!dataset_) {
            auto path = config_.out_dir / "dataset.json";
            if (resume_ && std::filesystem::exists(path))
                dataset_ = dataset_from_json(load_json(path));
            else {
                dataset_ = gen_dataset(config_.dataset);
                save_json(to_json(*dataset_), path);
            }
        }
        return *dataset_;
    }

    const ModelState& base_model(std::uint64_t seed) {
        auto it = base_.find(seed);
        if (it != base_.end()) return it->second;
        auto path = seed_dir(seed) / "base.json";
        if (resume_ && std::filesystem::exists(path))
            return base_.emplace(seed, model_from_json(load_json(path))).first->second;
        const PlantedDataset& data = dataset();
        ModelState init = random_model(config_.dataset.input_dim, config_.hidden,
                                       config_.dataset.num_classes, seed);
        TrainConfig train = config_.base;
        train.seed = seed;
        ModelState trained =
            train_base(init, data.train, train,
                       jsonl_sink(seed_dir(seed) / "base_metrics.jsonl",
                                  train.optimizer.learning_rate));
        save_json(to_json(trained), path);
        return base_.emplace(seed, std::move(trained)).first->second;
    }

    const CalibrationSet& calibration(std::uint64_t seed) {
        auto it = calib_.find(seed);
        if (it != calib_.end()) return it->second;
        auto path = seed_dir(seed) / "calib.json";
        if (resume_ && std::filesystem::exists(path))
            return calib_.emplace(seed, calibration_from_json(load_json(path))).first->second;
        CalibrationSet calibs = calibrate(base_model(seed), dataset().calibration);
        save_json(to_json(calibs), path);
        return calib_.emplace(seed, std::move(calibs)).first->second;
    }

    const ModelState& prehab_model(std::uint64_t seed, double lambda) {
        auto key = std::make_pair(seed, lambda);
        auto it = prehab_.find(key);
        if (it != prehab_.end()) return it->second;
        std::string tag = "prehab_l" + fmt_short(lambda);
        auto path = seed_dir(seed) / (tag + ".json");
        if (resume_ && std::filesystem::exists(path))
            return prehab_.emplace(key, model_from_json(load_json(path))).first->second;
        PrehabConfig cfg = config_.prehab;
        cfg.lambda = lambda;
        cfg.seed = seed;
        ModelState result =
            run_prehab(base_model(seed), dataset().train, calibration(seed), cfg,
                       jsonl_sink(seed_dir(seed) / (tag + "_metrics.jsonl"),
                                  cfg.optimizer.learning_rate));
        save_json(to_json(result), path);
        return prehab_.emplace(key, std::move(result)).first->second;
    }

    std::filesystem::path seed_dir(std::uint64_t seed) const {
        auto dir = config_.out_dir / ("seed_" + std::to_string(seed));
        std::filesystem::create_directories(dir);
        return dir;
    }

    std::filesystem::path cell_dir(const GridPoint& p) const {
        auto dir = config_.out_dir / "cells" /
                   (to_string(p.method) + "_r" + fmt_short(p.ratio) + "_l" + fmt_short(p.lambda) +
                    "_s" + std::to_string(p.seed));
        std::filesystem::create_directories(dir);
        return dir;
    }

private:
    const ExperimentConfig& config_;
    bool resume_;
    std::optional<PlantedDataset> dataset_;
    std::map<std::uint64_t, ModelState> base_;
    std::map<std::uint64_t, CalibrationSet> calib_;
    std::map<std::pair<std::uint64_t, double>, ModelState> prehab_;
};

ReportCell make_cell(const GridPoint& p, const std::string& stage) {
    ReportCell cell;
    cell.method = to_string(p.method);
    cell.ratio = p.ratio;
    cell.lambda = p.lambda;
    cell.seed = p.seed;
    cell.stage = stage;
    return cell;
}

void attach_gains(const ExperimentConfig& config, std::vector<ReportCell>& cells) {
    std::string baseline_method = to_string(config.baseline_method);
    std::map<std::tuple<double, std::uint64_t, std::string>, const ReportCell*> baselines;
    for (const ReportCell& cell : cells)
        if (cell.method == baseline_method && cell.lambda == config.baseline_lambda &&
            cell.error.empty())
            baselines[{cell.ratio, cell.seed, cell.stage}] = &cell;
    for (ReportCell& cell : cells) {
        if (!cell.error.empty()) continue;
        auto it = baselines.find({cell.ratio, cell.seed, cell.stage});
        if (it == baselines.end()) continue;
        const ReportCell& base = *it->second;
        if (base.accuracy != 0.0) cell.gain_accuracy = relative_gain(cell.accuracy, base.accuracy);
        if (base.loss != 0.0) cell.gain_loss = relative_gain(cell.loss, base.loss);
    }
}

}  // namespace

ExperimentReport run_experiment(const ExperimentConfig& config, bool resume) {
    std::filesystem::create_directories(config.out_dir);
    ExperimentReport report;
    report.config = to_json(config);
    ArtifactStore store(config, resume);

    for (CompressionMethod method : config.methods) {
        for (double ratio : config.ratios) {
            for (double lambda : config.lambdas) {
                for (std::uint64_t seed : config.seeds) {
                    GridPoint p{method, ratio, lambda, seed};
                    try {
                        const PlantedDataset& data = store.dataset();
                        const ModelState& base = store.base_model(seed);
                        const CalibrationSet& calib = store.calibration(seed);
                        CompressionPlan plan = make_plan(base, ratio, method, config.compress_head);

                        ReportCell base_cell = make_cell(p, "base");
                        EvalResult base_eval = evaluate(base, data.test);
                        base_cell.loss = base_eval.mean_loss;
                        base_cell.accuracy = base_eval.accuracy;
                        base_cell.parameter_count = dense_parameter_count(base);
                        base_cell.spectra = spectrum_summaries(base, calib, plan);
                        report.cells.push_back(std::move(base_cell));

                        const ModelState* source = &base;
                        if (config.stages.prehab) {
                            const ModelState& conditioned = store.prehab_model(seed, lambda);
                            ReportCell cell = make_cell(p, "prehab");
                            EvalResult eval = evaluate(conditioned, data.test);
                            cell.loss = eval.mean_loss;
                            cell.accuracy = eval.accuracy;
                            cell.parameter_count = dense_parameter_count(conditioned);
                            cell.spectra = spectrum_summaries(conditioned, calib, plan);
                            report.cells.push_back(std::move(cell));
                            source = &conditioned;
                        }

                        const CalibrationSet* surgery_calib = &calib;
                        CalibrationSet recal;
                        if (config.recalibrate_before_surgery) {
                            recal = calibrate(*source, data.calibration);
                            surgery_calib = &recal;
                        }

                        auto cell_dir = store.cell_dir(p);
                        auto compressed_path = cell_dir / "compressed.json";
                        CompressedModel compressed;
                        if (resume && std::filesystem::exists(compressed_path))
                            compressed = compressed_model_from_json(load_json(compressed_path));
                        else {
                            compressed = compress_model(*source, plan, *surgery_calib);
                            save_json(to_json(compressed), compressed_path);
                        }
                        {
                            ReportCell cell = make_cell(p, "surgery");
                            EvalResult eval = evaluate(compressed, data.test);
                            cell.loss = eval.mean_loss;
                            cell.accuracy = eval.accuracy;
                            cell.parameter_count = compressed.parameter_count();
                            cell.spectra = spectrum_summaries_mixed(compressed, calib, plan);
                            report.cells.push_back(std::move(cell));
                        }

                        if (config.stages.rehab) {
                            auto rehab_path = cell_dir / "rehab.json";
                            CompressedModel recovered;
                            if (resume && std::filesystem::exists(rehab_path))
                                recovered = compressed_model_from_json(load_json(rehab_path));
                            else {
                                RehabConfig cfg = config.rehab;
                                cfg.seed = seed;
                                recovered = rehab(compressed, data.train, cfg,
                                                  jsonl_sink(cell_dir / "rehab_metrics.jsonl",
                                                             cfg.optimizer.learning_rate));
                                save_json(to_json(recovered), rehab_path);
                            }
                            ReportCell cell = make_cell(p, "rehab");
                            EvalResult eval = evaluate(recovered, data.test);
                            cell.loss = eval.mean_loss;
                            cell.accuracy = eval.accuracy;
                            cell.parameter_count = recovered.parameter_count();
                            cell.spectra = spectrum_summaries_mixed(recovered, calib, plan);
                            report.cells.push_back(std::move(cell));
                        }
                    } catch (const std::exception& e) {
                        ReportCell cell = make_cell(p, "error");
                        cell.error = e.what();
                        report.cells.push_back(std::move(cell));
                    }
                }
            }
        }
    }
    attach_gains(config, report.cells);
    return report;
}

json to_json(const ExperimentReport& report) {
    json j;
    j["format"] = "prehab-report";
    j["version"] = 1;
    j["config"] = report.config;
    j["cells"] = json::array();
    for (const ReportCell& cell : report.cells) {
        json cj{{"method", cell.method},     {"ratio", cell.ratio},
                {"lambda", cell.lambda},     {"seed", cell.seed},
                {"stage", cell.stage},       {"loss", cell.loss},
                {"accuracy", cell.accuracy}, {"parameter_count", cell.parameter_count},
                {"error", cell.error}};
        cj["spectra"] = json::array();
        for (const SpectrumSummary& s : cell.spectra) cj["spectra"].push_back(spectrum_to_json(s));
        if (cell.gain_accuracy) cj["gain_accuracy"] = *cell.gain_accuracy;
        if (cell.gain_loss) cj["gain_loss"] = *cell.gain_loss;
        j["cells"].push_back(std::move(cj));
    }
    return j;
}

ExperimentReport report_from_json(const json& j) {
    if (j.value("format", "") != "prehab-report")
        throw std::invalid_argument("report: unexpected container format");
    ExperimentReport report;
    report.config = j.at("config");
    for (const json& cj : j.at("cells")) {
        ReportCell cell;
        cell.method = cj.at("method").get<std::string>();
        cell.ratio = cj.at("ratio").get<double>();
        cell.lambda = cj.at("lambda").get<double>();
        cell.seed = cj.at("seed").get<std::uint64_t>();
        cell.stage = cj.at("stage").get<std::string>();
        cell.loss = cj.at("loss").get<double>();
        cell.accuracy = cj.at("accuracy").get<double>();
        cell.parameter_count = cj.at("parameter_count").get<Eigen::Index>();
        cell.error = cj.at("error").get<std::string>();
        for (const json& sj : cj.at("spectra")) cell.spectra.push_back(spectrum_from_json(sj));
        if (cj.contains("gain_accuracy")) cell.gain_accuracy = cj["gain_accuracy"].get<double>();
        if (cj.contains("gain_loss")) cell.gain_loss = cj["gain_loss"].get<double>();
        report.cells.push_back(std::move(cell));
    }
    return report;
}

std::string report_to_csv(const ExperimentReport& report) {
    std::ostringstream out;
    out << "method,ratio,lambda,seed,stage,loss,accuracy,param_count,gain_accuracy,gain_loss,error\n";
    for (const ReportCell& cell : report.cells) {
        out << cell.method << ',' << fmt_short(cell.ratio) << ',' << fmt_short(cell.lambda) << ','
            << cell.seed << ',' << cell.stage << ',' << fmt_full(cell.loss) << ','
            << fmt_full(cell.accuracy) << ',' << cell.parameter_count << ','
            << (cell.gain_accuracy ? fmt_full(*cell.gain_accuracy) : "") << ','
            << (cell.gain_loss ? fmt_full(*cell.gain_loss) : "") << ',' << cell.error << '\n';
    }
    return out.str();
}

void emit_report(const ExperimentReport& report, const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);
    save_json(to_json(report), out_dir / "report.json");
    std::ofstream csv(out_dir / "report.csv");
    if (!csv) throw std::runtime_error("emit_report: cannot write report.csv");
    csv << report_to_csv(report);
}

}  // namespace prehab
