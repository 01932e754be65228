#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "prehab/calibration.hpp"
#include "prehab/model.hpp"

#include <cmath>
#include <numeric>

using namespace prehab;

namespace {

Batch random_batch(Eigen::Index dim, Eigen::Index batch, Eigen::Index classes, std::uint64_t seed) {
    GaussianRng rng(seed);
    Batch b;
    b.inputs = rng.matrix(dim, batch);
    b.labels.resize(static_cast<std::size_t>(batch));
    for (auto& y : b.labels) y = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(classes)));
    return b;
}

// Straight-line re-evaluation: no caching, no shared code with forward.
Matrix oracle_forward(const ModelState& model, const Matrix& inputs) {
    Matrix x = inputs;
    for (const DenseLayer& layer : model.layers) {
        Matrix z(layer.out_dim(), x.cols());
        for (Eigen::Index c = 0; c < x.cols(); ++c)
            for (Eigen::Index i = 0; i < layer.out_dim(); ++i) {
                double acc = layer.bias(i);
                for (Eigen::Index j = 0; j < layer.in_dim(); ++j) acc += layer.weight(i, j) * x(j, c);
                z(i, c) = layer.activation == Activation::Relu ? std::max(acc, 0.0) : acc;
            }
        x = z;
    }
    return x;
}

}  // namespace

TEST_CASE("forward: single identity layer passes inputs through") {
    ModelState model;
    model.input_dim = 3;
    model.num_classes = 3;
    model.layers.push_back({Matrix::Identity(3, 3), Vector::Zero(3), Activation::Identity});
    Batch b = random_batch(3, 5, 3, 1);
    CHECK((forward(model, b) - b.inputs).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("forward: hand arithmetic on a 1-layer model") {
    ModelState model;
    model.input_dim = 2;
    model.num_classes = 1;
    model.layers.push_back({Matrix{{1.0, -1.0}}, Vector::Zero(1), Activation::Identity});
    Batch b;
    b.inputs = Vector{{2.0, 3.0}};
    b.labels = {0};
    CHECK(forward(model, b)(0, 0) == doctest::Approx(-1.0));
}

TEST_CASE("forward matches an independently coded straight-line oracle") {
    ModelState model = random_model(6, {5, 4}, 3, 9);
    Batch b = random_batch(6, 7, 3, 2);
    Matrix logits = forward(model, b);
    CHECK(logits.allFinite());
    CHECK((logits - oracle_forward(model, b.inputs)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("forward rejects dimension mismatches naming the layer") {
    ModelState model = random_model(6, {5}, 3, 1);
    Batch b = random_batch(4, 2, 3, 3);
    CHECK_THROWS_AS(forward(model, b), std::invalid_argument);
}

TEST_CASE("loss: uniform logits give ln C") {
    ModelState model;
    model.input_dim = 4;
    model.num_classes = 5;
    model.layers.push_back({Matrix::Zero(5, 4), Vector::Zero(5), Activation::Identity});
    Batch b = random_batch(4, 8, 5, 4);
    CHECK(batch_loss(model, b) == doctest::Approx(std::log(5.0)).epsilon(1e-12));
}

TEST_CASE("loss gradient vanishes at a saturated separable optimum") {
    // Two one-hot points, huge separating weights: softmax saturates and
    // the gradient is numerically zero.
    ModelState model;
    model.input_dim = 2;
    model.num_classes = 2;
    model.layers.push_back({Matrix{{50.0, 0.0}, {0.0, 50.0}}, Vector::Zero(2), Activation::Identity});
    Batch b;
    b.inputs = Matrix{{1.0, 0.0}, {0.0, 1.0}};
    b.labels = {0, 1};
    GradientSet grads;
    loss_and_grads(model, b, grads);
    CHECK(std::sqrt(grads.squared_norm()) < 1e-6);
}

TEST_CASE("gradients match central finite differences on a random 3-layer model") {
    ModelState model = random_model(5, {4, 4}, 3, 21);
    Batch b = random_batch(5, 6, 3, 22);
    GradientSet grads;
    loss_and_grads(model, b, grads);

    const double h = 1e-5;
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        for (Eigen::Index i = 0; i < model.layers[l].weight.size(); ++i) {
            ModelState plus = model, minus = model;
            plus.layers[l].weight.data()[i] += h;
            minus.layers[l].weight.data()[i] -= h;
            double fd = (batch_loss(plus, b) - batch_loss(minus, b)) / (2.0 * h);
            double analytic = grads.layers[l].weight.data()[i];
            CHECK(std::abs(analytic - fd) <= 1e-4 * std::max(1.0, std::abs(fd)));
        }
        for (Eigen::Index i = 0; i < model.layers[l].bias.size(); ++i) {
            ModelState plus = model, minus = model;
            plus.layers[l].bias(i) += h;
            minus.layers[l].bias(i) -= h;
            double fd = (batch_loss(plus, b) - batch_loss(minus, b)) / (2.0 * h);
            CHECK(std::abs(grads.layers[l].bias(i) - fd) <= 1e-4 * std::max(1.0, std::abs(fd)));
        }
    }
}

TEST_CASE("evaluate: memorizing model reaches accuracy 1.0") {
    ModelState model;
    model.input_dim = 2;
    model.num_classes = 2;
    model.layers.push_back({Matrix{{50.0, 0.0}, {0.0, 50.0}}, Vector::Zero(2), Activation::Identity});
    Batch b;
    b.inputs = Matrix{{1.0, 0.0}, {0.0, 1.0}};
    b.labels = {0, 1};
    CHECK(evaluate(model, {b}).accuracy == 1.0);
}

TEST_CASE("evaluate: constant-logit model predicts the tie-break class") {
    ModelState model;
    model.input_dim = 3;
    model.num_classes = 4;
    model.layers.push_back({Matrix::Zero(4, 3), Vector::Zero(4), Activation::Identity});
    Batch b = random_batch(3, 40, 4, 6);
    double freq0 = 0.0;
    for (int y : b.labels) freq0 += y == 0 ? 1.0 : 0.0;
    CHECK(evaluate(model, {b}).accuracy == doctest::Approx(freq0 / 40.0));
}

TEST_CASE("evaluate is invariant under dataset permutation") {
    ModelState model = random_model(5, {6}, 3, 30);
    Batch b1 = random_batch(5, 12, 3, 31);
    Batch b2 = random_batch(5, 9, 3, 32);
    EvalResult fwd = evaluate(model, {b1, b2});
    EvalResult rev = evaluate(model, {b2, b1});
    CHECK(fwd.accuracy == rev.accuracy);
    CHECK(fwd.mean_loss == doctest::Approx(rev.mean_loss).epsilon(1e-14));
}

TEST_CASE("round-trip whitening W -> (W X) X^{-1} preserves logits") {
    ModelState model = random_model(6, {5, 4}, 3, 40);
    Batch b = random_batch(6, 16, 3, 41);
    Matrix before = forward(model, b);

    GaussianRng rng(42);
    ModelState wrapped = model;
    for (DenseLayer& layer : wrapped.layers) {
        Matrix g = rng.matrix(layer.in_dim(), layer.in_dim());
        Matrix x = cholesky_factor(Matrix(g * g.transpose() + 0.5 * Matrix::Identity(layer.in_dim(), layer.in_dim())));
        layer.weight = (layer.weight * x) * invert_lower_triangular(x);
    }
    CHECK((forward(wrapped, b) - before).cwiseAbs().maxCoeff() < 1e-6);
}
