#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "prehab/surrogates.hpp"
#include "prehab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <map>

using namespace prehab;

namespace {

// Two Gaussian blobs per class around scaled one-hot means: linearly
// separable, so a few hundred steps are enough to drive the loss down.
Dataset cluster_data(Eigen::Index dim, Eigen::Index classes, Eigen::Index per_class,
                     std::uint64_t seed) {
    GaussianRng rng(seed);
    Batch b;
    b.inputs.resize(dim, classes * per_class);
    b.labels.resize(static_cast<std::size_t>(classes * per_class));
    Eigen::Index at = 0;
    for (Eigen::Index y = 0; y < classes; ++y)
        for (Eigen::Index i = 0; i < per_class; ++i, ++at) {
            b.inputs.col(at) = 0.4 * rng.vector(dim);
            b.inputs(y % dim, at) += 3.0;
            b.labels[static_cast<std::size_t>(at)] = static_cast<int>(y);
        }
    return {b};
}

double mean_hidden_stable_rank(const ModelState& model) {
    double sum = 0.0;
    for (std::size_t l = 0; l + 1 < model.layers.size(); ++l)
        sum += stable_rank(model.layers[l].weight);
    return sum / static_cast<double>(model.layers.size() - 1);
}

bool identical(const ModelState& a, const ModelState& b) {
    if (a.layers.size() != b.layers.size()) return false;
    for (std::size_t l = 0; l < a.layers.size(); ++l)
        if (a.layers[l].weight != b.layers[l].weight || a.layers[l].bias != b.layers[l].bias)
            return false;
    return true;
}

}  // namespace

TEST_CASE("AdamW first step moves each weight by about -lr * sign(g)") {
    AdamWConfig config;
    config.learning_rate = 0.01;
    config.weight_decay = 0.0;
    AdamW opt({3}, config);
    Vector p{{1.0, -2.0, 0.5}};
    Vector g{{0.3, -4.0, 1e-3}};
    Vector before = p;
    opt.step({p.data()}, {g.data()}, {true});
    for (Eigen::Index i = 0; i < 3; ++i) {
        double expect = before(i) - 0.01 * (g(i) > 0 ? 1.0 : -1.0);
        CHECK(p(i) == doctest::Approx(expect).epsilon(1e-4));
    }
    CHECK(opt.step_count() == 1);
}

TEST_CASE("AdamW weight decay is decoupled and masked") {
    AdamWConfig config;
    config.learning_rate = 0.1;
    config.weight_decay = 0.5;
    AdamW opt({1, 1}, config);
    Vector decayed{{2.0}};
    Vector frozen{{2.0}};
    Vector zero_grad{{0.0}};
    for (int k = 0; k < 5; ++k)
        opt.step({decayed.data(), frozen.data()}, {zero_grad.data(), zero_grad.data()},
                 {true, false});
    CHECK(decayed(0) == doctest::Approx(2.0 * std::pow(1.0 - 0.1 * 0.5, 5)).epsilon(1e-12));
    CHECK(frozen(0) == 2.0);
}

TEST_CASE("AdamW converges on a scalar quadratic") {
    AdamWConfig config;
    config.learning_rate = 0.1;
    config.weight_decay = 0.0;
    AdamW opt({1}, config);
    Vector p{{-4.0}};
    for (int k = 0; k < 500; ++k) {
        Vector g{{2.0 * (p(0) - 3.0)}};
        opt.step({p.data()}, {g.data()}, {true});
    }
    CHECK(std::abs(p(0) - 3.0) < 1e-3);
}

TEST_CASE("AdamW rejects block-count mismatches") {
    AdamW opt({2, 2}, AdamWConfig{});
    Vector p{{0.0, 0.0}};
    Vector g{{1.0, 1.0}};
    CHECK_THROWS_AS(opt.step({p.data()}, {g.data()}, {true}), std::invalid_argument);
}

TEST_CASE("BatchSampler visits every sample exactly once per epoch") {
    Dataset data = cluster_data(4, 3, 7, 1);  // 21 samples
    BatchSampler sampler(data, 6, 9);
    std::map<std::pair<double, int>, int> seen;
    Eigen::Index taken = 0;
    while (taken < 21) {
        Batch b = sampler.next();
        for (Eigen::Index c = 0; c < b.size(); ++c)
            ++seen[{b.inputs(0, c), b.labels[static_cast<std::size_t>(c)]}];
        taken += b.size();
    }
    std::map<std::pair<double, int>, int> expect;
    for (Eigen::Index c = 0; c < 21; ++c)
        ++expect[{data[0].inputs(0, c), data[0].labels[static_cast<std::size_t>(c)]}];
    CHECK(seen == expect);
}

TEST_CASE("BatchSampler is deterministic per seed and reshuffles per epoch") {
    Dataset data = cluster_data(4, 2, 10, 2);
    BatchSampler a(data, 8, 5);
    BatchSampler b(data, 8, 5);
    Batch ba = a.next();
    Batch bb = b.next();
    CHECK(ba.inputs == bb.inputs);
    CHECK(ba.labels == bb.labels);

    BatchSampler c(data, 20, 5);  // whole epoch per batch
    Batch epoch0 = c.next();
    Batch epoch1 = c.next();
    CHECK(epoch0.inputs != epoch1.inputs);
}

TEST_CASE("train_base reduces loss and is bitwise deterministic") {
    Dataset data = cluster_data(6, 3, 30, 3);
    ModelState start = random_model(6, {8}, 3, 4);
    TrainConfig config;
    config.steps = 200;
    config.batch_size = 16;
    config.seed = 7;
    double before = evaluate(start, data).mean_loss;
    ModelState m1 = train_base(start, data, config);
    ModelState m2 = train_base(start, data, config);
    CHECK(identical(m1, m2));
    EvalResult after = evaluate(m1, data);
    CHECK(after.mean_loss < 0.5 * before);
    CHECK(after.accuracy > 0.9);
}

TEST_CASE("metrics sink sees every step with finite losses") {
    Dataset data = cluster_data(4, 2, 16, 5);
    TrainConfig config;
    config.steps = 25;
    config.batch_size = 8;
    std::vector<StepMetrics> log;
    train_base(random_model(4, {5}, 2, 6), data, config,
               [&](const StepMetrics& m) { log.push_back(m); });
    REQUIRE(log.size() == 25);
    for (std::size_t i = 0; i < log.size(); ++i) {
        CHECK(log[i].step == static_cast<std::int64_t>(i));
        CHECK(std::isfinite(log[i].task_loss));
    }
}

TEST_CASE("prehab with lambda 0 is bit-identical to plain training") {
    Dataset data = cluster_data(6, 3, 20, 8);
    ModelState start = random_model(6, {8}, 3, 9);
    TrainConfig tc;
    tc.steps = 120;
    tc.batch_size = 16;
    tc.seed = 11;
    PrehabConfig pc;
    pc.lambda = 0.0;
    pc.steps = tc.steps;
    pc.batch_size = tc.batch_size;
    pc.seed = tc.seed;
    pc.optimizer = tc.optimizer;
    ModelState base = train_base(start, data, tc);
    ModelState pre = run_prehab(start, data, {}, pc);  // no calibration needed at lambda 0
    CHECK(identical(base, pre));
}

TEST_CASE("prehab with a positive lambda lowers the hidden stable rank") {
    Dataset data = cluster_data(8, 3, 40, 12);
    ModelState start = random_model(8, {12}, 3, 13);
    PrehabConfig pc;
    pc.steps = 300;
    pc.batch_size = 32;
    pc.seed = 14;
    pc.whiten_surrogate = false;
    pc.surrogate = SurrogateKind::StableRank;

    pc.lambda = 0.0;
    ModelState plain = run_prehab(start, data, {}, pc);
    pc.lambda = 0.5;
    ModelState shaped = run_prehab(start, data, {}, pc);

    CHECK(mean_hidden_stable_rank(shaped) < mean_hidden_stable_rank(plain));
    // Shaping must not wreck the task on separable data.
    CHECK(evaluate(shaped, data).accuracy > 0.9);
}

TEST_CASE("prehab validates lambda and calibration inputs") {
    Dataset data = cluster_data(4, 2, 10, 15);
    ModelState start = random_model(4, {5}, 2, 16);
    PrehabConfig pc;
    pc.steps = 1;
    pc.lambda = -0.1;
    CHECK_THROWS_AS(run_prehab(start, data, {}, pc), std::invalid_argument);
    pc.lambda = 0.1;
    pc.whiten_surrogate = true;
    CHECK_THROWS_AS(run_prehab(start, data, {}, pc), std::invalid_argument);
    pc.lambda_per_layer = {0.1};  // model has 2 layers
    CHECK_THROWS_AS(run_prehab(start, data, {}, pc), std::invalid_argument);
}

TEST_CASE("compressed gradients match central finite differences") {
    ModelState model = random_model(5, {6, 4}, 3, 17);
    CompressionPlan plan = make_plan(model, 0.3, CompressionMethod::PlainSvd);
    CompressedModel cm = compress_model(model, plan, {});
    Batch b = cluster_data(5, 3, 4, 18)[0];

    CompressedGradients grads;
    compressed_loss_and_grads(cm, b, grads);

    const double h = 1e-6;
    auto fd_check = [&](Matrix& host, const Matrix& grad) {
        for (Eigen::Index i = 0; i < host.size(); ++i) {
            double saved = host.data()[i];
            host.data()[i] = saved + h;
            double up = batch_loss(cm, b);
            host.data()[i] = saved - h;
            double down = batch_loss(cm, b);
            host.data()[i] = saved;
            double fd = (up - down) / (2.0 * h);
            CHECK(std::abs(grad.data()[i] - fd) <= 1e-4 * std::max(1.0, std::abs(fd)));
        }
    };
    for (std::size_t l = 0; l < cm.layers.size(); ++l) {
        if (FactorizedLayer* f = std::get_if<FactorizedLayer>(&cm.layers[l])) {
            fd_check(f->left, grads.left[l]);
            fd_check(f->right, grads.right[l]);
        } else {
            fd_check(std::get<DenseLayer>(cm.layers[l]).weight, grads.left[l]);
        }
        Matrix bias_host = std::visit([](auto& layer) { return Matrix(layer.bias); }, cm.layers[l]);
        for (Eigen::Index i = 0; i < bias_host.size(); ++i) {
            std::visit([&](auto& layer) { layer.bias(i) += h; }, cm.layers[l]);
            double up = batch_loss(cm, b);
            std::visit([&](auto& layer) { layer.bias(i) -= 2.0 * h; }, cm.layers[l]);
            double down = batch_loss(cm, b);
            std::visit([&](auto& layer) { layer.bias(i) += h; }, cm.layers[l]);
            double fd = (up - down) / (2.0 * h);
            CHECK(std::abs(grads.bias[l](i) - fd) <= 1e-4 * std::max(1.0, std::abs(fd)));
        }
    }
}

TEST_CASE("rehab recovers loss and preserves factor ranks") {
    Dataset data = cluster_data(8, 3, 40, 19);
    ModelState start = random_model(8, {10}, 3, 20);
    TrainConfig tc;
    tc.steps = 300;
    tc.batch_size = 32;
    tc.seed = 21;
    ModelState trained = train_base(start, data, tc);

    CompressionPlan plan = make_plan(trained, 0.6, CompressionMethod::PlainSvd);
    CompressedModel compressed = compress_model(trained, plan, {});
    double hurt = evaluate(compressed, data).mean_loss;

    RehabConfig rc;
    rc.lora_rank = 2;
    rc.steps_per_factor = 150;
    rc.batch_size = 32;
    rc.seed = 22;
    rc.optimizer.learning_rate = 5e-3;
    CompressedModel healed = rehab(compressed, data, rc);
    CHECK(evaluate(healed, data).mean_loss < hurt);
    for (std::size_t l = 0; l < healed.layers.size(); ++l)
        if (const FactorizedLayer* f = std::get_if<FactorizedLayer>(&healed.layers[l])) {
            const FactorizedLayer& orig = std::get<FactorizedLayer>(compressed.layers[l]);
            CHECK(f->rank == orig.rank);
            CHECK(f->left.cols() == orig.left.cols());
            CHECK(f->right.rows() == orig.right.rows());
        }
}

TEST_CASE("rehab falls back to direct factors when the adapter rank is too big") {
    Dataset data = cluster_data(6, 2, 30, 23);
    ModelState trained = train_base(random_model(6, {8}, 2, 24), data,
                                    TrainConfig{.steps = 200, .batch_size = 16, .seed = 25});
    CompressionPlan plan = make_plan(trained, 0.7, CompressionMethod::PlainSvd);
    CompressedModel compressed = compress_model(trained, plan, {});
    double hurt = evaluate(compressed, data).mean_loss;

    RehabConfig rc;
    rc.lora_rank = 64;  // larger than every host dimension
    rc.steps_per_factor = 120;
    rc.batch_size = 16;
    rc.seed = 26;
    rc.optimizer.learning_rate = 5e-3;
    CompressedModel healed = rehab(compressed, data, rc);
    CHECK(evaluate(healed, data).mean_loss < hurt);
}

TEST_CASE("rehab input validation and the no-op settings") {
    Dataset data = cluster_data(4, 2, 10, 27);
    ModelState dense = random_model(4, {5}, 2, 28);
    CompressedModel never;
    never.input_dim = 4;
    never.num_classes = 2;
    for (const DenseLayer& layer : dense.layers) never.layers.emplace_back(layer);
    CHECK_THROWS_AS(rehab(never, data, RehabConfig{}), std::invalid_argument);

    CompressionPlan plan = make_plan(dense, 0.5, CompressionMethod::PlainSvd);
    CompressedModel compressed = compress_model(dense, plan, {});
    RehabConfig rc;
    rc.steps_per_factor = 0;
    CompressedModel same = rehab(compressed, data, rc);
    const FactorizedLayer& a = std::get<FactorizedLayer>(compressed.layers[0]);
    const FactorizedLayer& b = std::get<FactorizedLayer>(same.layers[0]);
    CHECK(a.left == b.left);
    CHECK(a.right == b.right);
}
