#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "hwnas/nnengine.hpp"
#include "support.hpp"

using namespace hwnas;

namespace {

std::vector<double> random_batch(Rng& rng, std::size_t n, const Shape& s)
{
    std::vector<double> x(n * s.size());
    for (double& v : x)
        v = uniform01(rng);
    return x;
}

std::vector<int> random_labels(Rng& rng, std::size_t n, int k)
{
    std::vector<int> y(n);
    for (int& v : y)
        v = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(k)));
    return y;
}

/// Perturbs BN parameters and biases away from their trivial initial values.
void jitter(WeightStore& w, Rng& rng)
{
    for (auto& [id, params] : w.layers)
        for (auto& [name, t] : params) {
            if (name == pname::bias || name == pname::dense_b || name == pname::bn_beta)
                for (double& v : t.values)
                    v = 0.2 * normal(rng);
            if (name == pname::bn_gamma)
                for (double& v : t.values)
                    v = uniform(rng, 0.5, 1.5);
        }
}

/// Left-bright vs right-bright images: a linearly separable two-class set.
Dataset toy_set(std::size_t n, std::uint64_t seed)
{
    Rng rng(seed);
    Dataset d{{1, 8, 8}, 2, {}, {}};
    for (std::size_t i = 0; i < n; ++i) {
        const int label = static_cast<int>(i % 2);
        d.labels.push_back(label);
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x) {
                const bool bright = (x < 4) == (label == 0);
                d.values.push_back(std::clamp((bright ? 0.7 : 0.3) + 0.1 * normal(rng), 0.0, 1.0));
            }
    }
    return d;
}

} // namespace

TEST(Forward, PointwiseConvMatchesHandComputation)
{
    GraphBuilder b(2, 2, 2);
    NodeId c = b.conv(b.input(), 1, 2, false, false);
    auto g = b.build(c);
    WeightStore w;
    w.layers[c] = param_layout(g, c);
    // out0 = 1*x0 + 2*x1 + 0.5 ; out1 = -1*x0 + 0.5*x1 - 1
    w.at(c, pname::kernel).values = {1.0, 2.0, -1.0, 0.5};
    w.at(c, pname::bias).values = {0.5, -1.0};
    const std::vector<double> x = {1, 2, 3, 4, /* channel 1 */ 0, -1, 2, 0.5};
    const auto y = forward(g, w, x, 1);
    const std::vector<double> want = {1.5, 0.5, 7.5, 5.5, -2.0, -3.5, -3.0, -4.75};
    ASSERT_EQ(y.size(), want.size());
    for (std::size_t i = 0; i < y.size(); ++i)
        EXPECT_DOUBLE_EQ(y[i], want[i]);
}

TEST(Forward, ThreeByThreeConvUsesZeroPadding)
{
    GraphBuilder b(2, 2, 1);
    NodeId c = b.conv(b.input(), 3, 1, false, false);
    auto g = b.build(c);
    WeightStore w;
    w.layers[c] = param_layout(g, c);
    w.at(c, pname::kernel).values.assign(9, 1.0); // box filter: every output sees all 4 inputs
    const auto y = forward(g, w, std::vector<double>{1, 2, 3, 4}, 1);
    for (double v : y)
        EXPECT_DOUBLE_EQ(v, 10.0);
}

TEST(Forward, ZeroWeightsGiveZeroLogits)
{
    GraphBuilder b(8, 8, 1);
    NodeId x = b.conv(b.input(), 3, 8, true, true, true);
    NodeId y = b.conv(x, 5, 8);
    auto g = b.build(b.head(b.add(x, y), 4));
    Rng rng(1);
    auto w = init_weights(g, rng).zeros_like();
    for (auto& [id, p] : w.layers)
        if (p.count(pname::bn_var))
            p.at(pname::bn_var).values.assign(p.at(pname::bn_var).size(), 1.0);
    const auto logits = forward(g, w, random_batch(rng, 3, {1, 8, 8}), 3);
    ASSERT_EQ(logits.size(), 12u);
    for (double v : logits)
        EXPECT_EQ(v, 0.0);
}

TEST(Forward, DiracKernelWithIdentityBnReproducesInput)
{
    GraphBuilder b(6, 6, 3);
    NodeId c = b.conv(b.input(), 3, 3);
    auto g = b.build(c);
    WeightStore w;
    w.layers[c] = param_layout(g, c);
    auto& k = w.at(c, pname::kernel);
    for (int o = 0; o < 3; ++o)
        k[static_cast<std::size_t>(((o * 3 + o) * 3 + 1) * 3 + 1)] = 1.0;
    w.at(c, pname::bn_var).values.assign(3, 1.0 - kBnEps);
    Rng rng(2);
    const auto x = random_batch(rng, 4, {3, 6, 6});
    const auto y = forward(g, w, x, 4);
    ASSERT_EQ(y.size(), x.size());
    for (std::size_t i = 0; i < x.size(); ++i)
        EXPECT_NEAR(y[i], x[i], 1e-12);
}

TEST(Forward, CaptureReturnsPostPoolMapsForEveryNode)
{
    GraphBuilder b(8, 8, 1);
    NodeId c1 = b.conv(b.input(), 3, 4, true, true, true);
    NodeId c2 = b.conv(c1, 3, 6);
    NodeId h = b.head(b.concat(c1, c2), 3);
    auto g = b.build(h);
    Rng rng(3);
    auto w = init_weights(g, rng);
    const auto acts = capture_activations(g, w, random_batch(rng, 2, {1, 8, 8}), 2);
    EXPECT_EQ(acts.size(), g.size());
    for (const auto& [id, v] : acts)
        EXPECT_EQ(v.size(), 2 * g.shape(id).size());
    for (double v : acts.at(c1))
        EXPECT_GE(v, 0.0);
}

TEST(Forward, HookRewritesValuesSeenDownstream)
{
    GraphBuilder b(4, 4, 1);
    NodeId c = b.conv(b.input(), 3, 2, false);
    NodeId h = b.head(c, 2);
    auto g = b.build(h);
    Rng rng(4);
    auto w = init_weights(g, rng);
    jitter(w, rng);
    OutputHook zero_conv = [&](NodeId id, std::span<double> v, std::size_t) {
        if (id == c)
            std::fill(v.begin(), v.end(), 0.0);
    };
    const auto y = forward(g, w, random_batch(rng, 1, {1, 4, 4}), 1, zero_conv);
    EXPECT_DOUBLE_EQ(y[0], w.at(h, pname::dense_b)[0]);
    EXPECT_DOUBLE_EQ(y[1], w.at(h, pname::dense_b)[1]);
}

TEST(Forward, RejectsBadBatchesAndNonFiniteValues)
{
    GraphBuilder b(4, 4, 1);
    auto g = b.build(b.head(b.conv(b.input(), 3, 2), 2));
    Rng rng(5);
    auto w = init_weights(g, rng);
    try {
        (void)forward(g, w, std::vector<double>(15, 0.0), 1);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::ShapeMismatch);
    }
    std::vector<double> x(16, 0.5);
    x[3] = std::numeric_limits<double>::quiet_NaN();
    try {
        (void)forward(g, w, x, 1);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::NonFiniteActivation);
    }
}

TEST(Forward, IsDeterministic)
{
    Rng rng(6);
    for (int i = 0; i < 10; ++i) {
        auto g = fixtures::random_graph(rng);
        Rng wr(static_cast<std::uint64_t>(i));
        auto w = init_weights(g, wr);
        const auto x = random_batch(rng, 2, g.shape(g.input_id()));
        EXPECT_EQ(forward(g, w, x, 2), forward(g, w, x, 2));
    }
}

TEST(GradientCheck, ConvBnReluPoolStack)
{
    GraphBuilder b(8, 8, 2);
    NodeId c1 = b.conv(b.input(), 3, 4, true, true, true);
    NodeId c2 = b.conv(c1, 3, 5, true, true, true);
    auto g = b.build(b.head(c2, 3));
    Rng rng(7);
    auto w = init_weights(g, rng);
    jitter(w, rng);
    const auto x = random_batch(rng, 4, {2, 8, 8});
    const auto r = gradient_check_report(g, w, x, random_labels(rng, 4, 3));
    EXPECT_LE(r.max_rel_error, 1e-3);
    EXPECT_GT(r.checked, 3 * r.skipped);
}

TEST(GradientCheck, AddDiamond)
{
    GraphBuilder b(6, 6, 1);
    NodeId s = b.conv(b.input(), 3, 4);
    NodeId l = b.conv(s, 3, 4);
    NodeId r = b.conv(s, 5, 4, false, false);
    NodeId a = b.add(l, r);
    auto g = b.build(b.head(a, 3));
    Rng rng(8);
    auto w = init_weights(g, rng);
    jitter(w, rng);
    EXPECT_LE(gradient_check(g, w, random_batch(rng, 3, {1, 6, 6}), random_labels(rng, 3, 3)), 1e-3);
}

TEST(GradientCheck, ConcatAndSeparableConv)
{
    GraphBuilder b(6, 6, 2);
    NodeId s = b.conv(b.input(), 3, 3, true, true, false, true);
    NodeId t = b.conv(s, 5, 4, false, true, false, true);
    NodeId c = b.concat(s, t);
    NodeId p = b.conv(c, 1, 4, true, true, true);
    auto g = b.build(b.head(p, 3));
    Rng rng(9);
    auto w = init_weights(g, rng);
    jitter(w, rng);
    EXPECT_LE(gradient_check(g, w, random_batch(rng, 3, {2, 6, 6}), random_labels(rng, 3, 3)), 1e-3);
}

TEST(GradientCheck, ZeroInputBatchBiasGradients)
{
    GraphBuilder b(4, 4, 1);
    NodeId c1 = b.conv(b.input(), 3, 3, false);
    NodeId c2 = b.conv(c1, 3, 3, false);
    auto g = b.build(b.head(c2, 2));
    Rng rng(10);
    auto w = init_weights(g, rng);
    // Mixed-sign biases: some units sit strictly active, others strictly dead.
    w.at(c1, pname::bias).values = {0.3, -0.2, 0.1};
    w.at(c2, pname::bias).values = {-0.1, 0.25, 0.4};
    const std::vector<double> x(2 * 16, 0.0);
    EXPECT_LE(gradient_check(g, w, x, std::vector<int>{0, 1}), 1e-3);

    // Zero bias on a zero input puts every first-layer unit exactly on the ReLU
    // kink. The subgradient there is 0, which is the left-sided difference quotient.
    w.at(c1, pname::bias).values.assign(3, 0.0);
    const std::vector<int> y{0, 1};
    WeightStore grad;
    const double l0 = loss_and_gradient(g, w, x, y, grad);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(grad.at(c1, pname::bias)[i], 0.0);
        WeightStore probe = w;
        probe.at(c1, pname::bias)[i] = -1e-3;
        WeightStore unused;
        EXPECT_NEAR((l0 - loss_and_gradient(g, probe, x, y, unused)) / 1e-3, 0.0, 1e-12);
    }
}

TEST(GradientCheck, RandomGraphs)
{
    Rng rng(11);
    for (int i = 0; i < 4; ++i) {
        GraphBuilder b(4, 4, 1);
        NodeId a = b.conv(b.input(), 3, 3, true, true, false, i % 2 == 1);
        NodeId c = b.conv(a, 3, 3, i % 2 == 0);
        NodeId m = i < 2 ? b.add(a, c) : b.concat(a, c);
        auto g = b.build(b.head(m, 2));
        auto w = init_weights(g, rng);
        jitter(w, rng);
        // Batch 4: with fewer BN samples the loss curvature makes the O(step^2)
        // truncation error of central differences approach the tolerance.
        EXPECT_LE(gradient_check(g, w, random_batch(rng, 4, {1, 4, 4}), random_labels(rng, 4, 2)), 1e-3) << i;
    }
}

TEST(Schedule, CosineEndpoints)
{
    EXPECT_EQ(cosine_lr(0.01, 0, 100), 0.01);
    EXPECT_EQ(cosine_lr(0.01, 100, 100), 0.0);
    EXPECT_EQ(cosine_lr(0.01, 150, 100), 0.0);
    EXPECT_NEAR(cosine_lr(0.01, 50, 100), 0.005, 1e-15);
    for (std::size_t t = 1; t < 100; ++t)
        EXPECT_LT(cosine_lr(0.01, t, 100), cosine_lr(0.01, t - 1, 100));
}

TEST(Train, ZeroEpochsLeavesWeightsUnchanged)
{
    auto data = make_synthetic(40, 1);
    GraphBuilder b(16, 16, 1);
    auto g = b.build(b.head(b.conv(b.input(), 3, 4, true, true, true), 4));
    Rng rng(12);
    auto w = init_weights(g, rng);
    TrainConfig cfg;
    cfg.epochs = 0;
    auto r = train(g, w, data, data, cfg);
    EXPECT_EQ(r.weights, w);
    EXPECT_TRUE(r.history.empty());
    EXPECT_DOUBLE_EQ(r.val_error, error_rate(g, w, data));
}

TEST(Train, SameSeedGivesBitIdenticalWeights)
{
    auto data = make_synthetic(64, 2);
    GraphBuilder b(16, 16, 1);
    NodeId c = b.conv(b.input(), 3, 4, true, true, true);
    auto g = b.build(b.head(b.conv(c, 3, 4), 4));
    Rng rng(13);
    auto w = init_weights(g, rng);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 16;
    cfg.seed = 77;
    auto a = train(g, w, data, data, cfg);
    auto b2 = train(g, w, data, data, cfg);
    EXPECT_EQ(a.weights, b2.weights);
    EXPECT_NE(a.weights, w);
    cfg.seed = 78;
    EXPECT_NE(train(g, w, data, data, cfg).weights, a.weights);
}

TEST(Train, LinearlySeparableToySet)
{
    auto tr = toy_set(200, 1);
    auto va = toy_set(100, 2);
    GraphBuilder b(8, 8, 1);
    auto g = b.build(b.head(b.conv(b.input(), 3, 4), 2));
    Rng rng(14);
    auto w = init_weights(g, rng);
    TrainConfig cfg;
    cfg.epochs = 20;
    cfg.batch_size = 16;
    cfg.augment = false;
    cfg.seed = 1;
    auto r = train(g, w, tr, va, cfg);
    ASSERT_EQ(r.history.size(), 20u);
    EXPECT_LE(r.val_error, 0.05);
}

TEST(Train, DivergenceIsReported)
{
    auto data = make_synthetic(32, 3);
    GraphBuilder b(16, 16, 1);
    auto g = b.build(b.head(b.conv(b.input(), 3, 4, false), 4));
    Rng rng(15);
    auto w = init_weights(g, rng);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.learning_rate = 1e200;
    try {
        (void)train(g, w, data, data, cfg);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::DivergenceDetected);
    }
}

TEST(Train, RunningStatisticsMoveTowardBatchStatistics)
{
    auto data = make_synthetic(32, 4);
    GraphBuilder b(16, 16, 1);
    NodeId c = b.conv(b.input(), 3, 4);
    auto g = b.build(b.head(c, 4));
    Rng rng(16);
    auto w = init_weights(g, rng);
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 32;
    auto r = train(g, w, data, data, cfg);
    EXPECT_NE(r.weights.at(c, pname::bn_mean), w.at(c, pname::bn_mean));
    EXPECT_NE(r.weights.at(c, pname::bn_var), w.at(c, pname::bn_var));
}

TEST(Dataset, SyntheticIsSeededBalancedAndBounded)
{
    auto a = make_synthetic(100, 9);
    EXPECT_EQ(a, make_synthetic(100, 9));
    EXPECT_NE(a, make_synthetic(100, 10));
    std::array<int, 4> counts{};
    for (int l : a.labels)
        ++counts[static_cast<std::size_t>(l)];
    for (int c : counts)
        EXPECT_EQ(c, 25);
    for (double v : a.values) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(Dataset, BinaryRoundTripAndCorruption)
{
    auto d = make_synthetic(12, 5);
    auto bytes = encode_dataset(d);
    auto back = decode_dataset(bytes);
    EXPECT_EQ(back.labels, d.labels);
    EXPECT_EQ(back.shape, d.shape);
    for (std::size_t i = 0; i < d.values.size(); ++i)
        EXPECT_EQ(back.values[i], static_cast<double>(static_cast<float>(d.values[i])));

    const auto path = (std::filesystem::temp_directory_path() / "hwnas_dataset_test.bin").string();
    save_dataset(d, path);
    EXPECT_EQ(load_dataset(path).labels, d.labels);
    std::remove(path.c_str());

    for (std::string bad : {bytes.substr(0, bytes.size() - 1), std::string("XXXX") + bytes.substr(4)}) {
        try {
            (void)decode_dataset(bad);
            FAIL();
        } catch (const Error& e) {
            EXPECT_EQ(e.code(), Errc::ParseError);
        }
    }
}
