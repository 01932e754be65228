#include "prehab/checkpoint.hpp"

#include <fstream>
#include <stdexcept>

namespace prehab {

using nlohmann::json;

namespace {

constexpr int kFormatVersion = 1;

std::string activation_name(Activation a) { return a == Activation::Relu ? "relu" : "identity"; }

Activation activation_from(const std::string& name) {
    if (name == "relu") return Activation::Relu;
    if (name == "identity") return Activation::Identity;
    throw std::invalid_argument("checkpoint: unknown activation tag: " + name);
}

json vector_to_json(const Vector& v) {
    return json(std::vector<double>(v.data(), v.data() + v.size()));
}

Vector vector_from_json(const json& j) {
    auto values = j.get<std::vector<double>>();
    return Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
}

void check_container(const json& j, const std::string& kind) {
    if (j.value("format", "") != kind)
        throw std::invalid_argument("checkpoint: expected format '" + kind + "', got '" +
                                    j.value("format", "<missing>") + "'");
    if (j.value("version", 0) != kFormatVersion)
        throw std::invalid_argument("checkpoint: unsupported version in '" + kind + "' container");
}

json container(const std::string& kind) {
    return json{{"format", kind}, {"version", kFormatVersion}};
}

}  // namespace

json matrix_to_json(const Matrix& m) {
    std::vector<double> data(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j2 = 0; j2 < m.cols(); ++j2)
            data[static_cast<std::size_t>(i * m.cols() + j2)] = m(i, j2);
    return json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
}

Matrix matrix_from_json(const json& j) {
    Eigen::Index rows = j.at("rows").get<Eigen::Index>();
    Eigen::Index cols = j.at("cols").get<Eigen::Index>();
    auto data = j.at("data").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(data.size()) != rows * cols)
        throw std::invalid_argument("checkpoint: matrix data length mismatch");
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j2 = 0; j2 < cols; ++j2)
            m(i, j2) = data[static_cast<std::size_t>(i * cols + j2)];
    if (!m.allFinite()) throw std::invalid_argument("checkpoint: non-finite matrix entries");
    return m;
}

json to_json(const ModelState& model) {
    json j = container("prehab-model");
    j["input_dim"] = model.input_dim;
    j["num_classes"] = model.num_classes;
    j["layers"] = json::array();
    for (const DenseLayer& layer : model.layers)
        j["layers"].push_back({{"type", "dense"},
                               {"activation", activation_name(layer.activation)},
                               {"weight", matrix_to_json(layer.weight)},
                               {"bias", vector_to_json(layer.bias)}});
    return j;
}

ModelState model_from_json(const json& j) {
    check_container(j, "prehab-model");
    ModelState model;
    model.input_dim = j.at("input_dim").get<Eigen::Index>();
    model.num_classes = j.at("num_classes").get<Eigen::Index>();
    for (const json& lj : j.at("layers")) {
        DenseLayer layer;
        layer.activation = activation_from(lj.at("activation").get<std::string>());
        layer.weight = matrix_from_json(lj.at("weight"));
        layer.bias = vector_from_json(lj.at("bias"));
        model.layers.push_back(std::move(layer));
    }
    model.validate();
    return model;
}

json to_json(const CompressedModel& model) {
    json j = container("prehab-model-mixed");
    j["input_dim"] = model.input_dim;
    j["num_classes"] = model.num_classes;
    j["layers"] = json::array();
    for (const MixedLayer& layer : model.layers) {
        if (const DenseLayer* d = std::get_if<DenseLayer>(&layer)) {
            j["layers"].push_back({{"type", "dense"},
                                   {"activation", activation_name(d->activation)},
                                   {"weight", matrix_to_json(d->weight)},
                                   {"bias", vector_to_json(d->bias)}});
        } else {
            const FactorizedLayer& f = std::get<FactorizedLayer>(layer);
            j["layers"].push_back({{"type", "factorized"},
                                   {"activation", activation_name(f.activation)},
                                   {"method", to_string(f.method)},
                                   {"rank", f.rank},
                                   {"left", matrix_to_json(f.left)},
                                   {"right", matrix_to_json(f.right)},
                                   {"bias", vector_to_json(f.bias)}});
        }
    }
    return j;
}

CompressedModel compressed_model_from_json(const json& j) {
    check_container(j, "prehab-model-mixed");
    CompressedModel model;
    model.input_dim = j.at("input_dim").get<Eigen::Index>();
    model.num_classes = j.at("num_classes").get<Eigen::Index>();
    for (const json& lj : j.at("layers")) {
        std::string type = lj.at("type").get<std::string>();
        if (type == "dense") {
            DenseLayer layer;
            layer.activation = activation_from(lj.at("activation").get<std::string>());
            layer.weight = matrix_from_json(lj.at("weight"));
            layer.bias = vector_from_json(lj.at("bias"));
            model.layers.emplace_back(std::move(layer));
        } else if (type == "factorized") {
            FactorizedLayer layer;
            layer.activation = activation_from(lj.at("activation").get<std::string>());
            layer.method = compression_method_from_string(lj.at("method").get<std::string>());
            layer.rank = lj.at("rank").get<Eigen::Index>();
            layer.left = matrix_from_json(lj.at("left"));
            layer.right = matrix_from_json(lj.at("right"));
            layer.bias = vector_from_json(lj.at("bias"));
            model.layers.emplace_back(std::move(layer));
        } else {
            throw std::invalid_argument("checkpoint: unknown layer type: " + type);
        }
    }
    return model;
}

json to_json(const CalibrationSet& calibs) {
    json j = container("prehab-calibration");
    j["layers"] = json::array();
    for (const LayerCalibration& c : calibs)
        j["layers"].push_back({{"whitening_x", matrix_to_json(c.whitening_x)},
                               {"whitening_x_inv", matrix_to_json(c.whitening_x_inv)},
                               {"fisher_diag", matrix_to_json(c.fisher_diag)},
                               {"kfac_a", matrix_to_json(c.kfac_a)},
                               {"kfac_g", matrix_to_json(c.kfac_g)},
                               {"sample_count", c.sample_count}});
    return j;
}

CalibrationSet calibration_from_json(const json& j) {
    check_container(j, "prehab-calibration");
    CalibrationSet calibs;
    for (const json& lj : j.at("layers")) {
        LayerCalibration c;
        c.whitening_x = matrix_from_json(lj.at("whitening_x"));
        c.whitening_x_inv = matrix_from_json(lj.at("whitening_x_inv"));
        c.fisher_diag = matrix_from_json(lj.at("fisher_diag"));
        c.kfac_a = matrix_from_json(lj.at("kfac_a"));
        c.kfac_g = matrix_from_json(lj.at("kfac_g"));
        c.sample_count = lj.at("sample_count").get<Eigen::Index>();
        calibs.push_back(std::move(c));
    }
    return calibs;
}

namespace {

json split_to_json(const Dataset& split) {
    json arr = json::array();
    for (const Batch& b : split)
        arr.push_back({{"inputs", matrix_to_json(b.inputs)}, {"labels", b.labels}});
    return arr;
}

Dataset split_from_json(const json& j) {
    Dataset split;
    for (const json& bj : j) {
        Batch b;
        b.inputs = matrix_from_json(bj.at("inputs"));
        b.labels = bj.at("labels").get<std::vector<int>>();
        split.push_back(std::move(b));
    }
    return split;
}

}  // namespace

json to_json(const PlantedDataset& data) {
    json j = container("prehab-dataset");
    j["spec"] = {{"input_dim", data.spec.input_dim},
                 {"num_classes", data.spec.num_classes},
                 {"planted_rank", data.spec.planted_rank},
                 {"train_samples", data.spec.train_samples},
                 {"calib_samples", data.spec.calib_samples},
                 {"test_samples", data.spec.test_samples},
                 {"batch_size", data.spec.batch_size},
                 {"seed", data.spec.seed}};
    j["teacher"] = matrix_to_json(data.teacher);
    j["train"] = split_to_json(data.train);
    j["calibration"] = split_to_json(data.calibration);
    j["test"] = split_to_json(data.test);
    return j;
}

PlantedDataset dataset_from_json(const json& j) {
    check_container(j, "prehab-dataset");
    PlantedDataset data;
    const json& s = j.at("spec");
    data.spec.input_dim = s.at("input_dim").get<Eigen::Index>();
    data.spec.num_classes = s.at("num_classes").get<Eigen::Index>();
    data.spec.planted_rank = s.at("planted_rank").get<Eigen::Index>();
    data.spec.train_samples = s.at("train_samples").get<Eigen::Index>();
    data.spec.calib_samples = s.at("calib_samples").get<Eigen::Index>();
    data.spec.test_samples = s.at("test_samples").get<Eigen::Index>();
    data.spec.batch_size = s.at("batch_size").get<Eigen::Index>();
    data.spec.seed = s.at("seed").get<std::uint64_t>();
    data.teacher = matrix_from_json(j.at("teacher"));
    data.train = split_from_json(j.at("train"));
    data.calibration = split_from_json(j.at("calibration"));
    data.test = split_from_json(j.at("test"));
    return data;
}

void save_json(const json& j, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("checkpoint: cannot open for writing: " + path.string());
    out << j.dump(2) << '\n';
    if (!out) throw std::runtime_error("checkpoint: write failed: " + path.string());
}

json load_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("checkpoint: cannot open: " + path.string());
    return json::parse(in);
}

}  // namespace prehab
