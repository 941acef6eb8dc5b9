#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "flowpred/checkpoint.hpp"
#include "flowpred/gradcheck.hpp"
#include "flowpred/layers.hpp"
#include "flowpred/net.hpp"
#include "flowpred/sgd.hpp"
#include "oracles.hpp"

using namespace flowpred;

namespace {

std::filesystem::path temp_file(const std::string& name) {
    return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST(ConvForward, SumOfOnes) {
    Tensor4 in(1, 1, 3, 3), w(1, 1, 3, 3), b(1, 1, 1, 1);
    in.fill(1.0);
    w.fill(1.0);
    auto out = conv_forward(in, w, b, LayerSpec::conv(1, 3));
    ASSERT_EQ(out.size(), 1u);
    EXPECT_DOUBLE_EQ(out.v[0], 9.0);
}

TEST(ConvForward, OneByOneIdentity) {
    Rng rng(7);
    Tensor4 in = oracle::random_tensor(2, 3, 4, 5, rng);
    Tensor4 w(3, 3, 1, 1), b(3, 1, 1, 1);
    for (int k = 0; k < 3; ++k) w.at(k, k, 0, 0) = 1.0;
    auto out = conv_forward(in, w, b, LayerSpec::conv(3, 1));
    EXPECT_EQ(out.dims, in.dims);
    EXPECT_LT(oracle::max_abs_diff(out.v, in.v), 1e-15);
}

TEST(ConvForward, MatchesReferenceLoop) {
    Rng rng(11);
    Tensor4 in = oracle::random_tensor(1, 2, 5, 5, rng);
    Tensor4 w = oracle::random_tensor(2, 2, 3, 3, rng);
    Tensor4 b(2, 1, 1, 1);
    b.v = {0.3, -0.2};
    auto spec = LayerSpec::conv(2, 3, 1, 1);
    auto got = conv_forward(in, w, b, spec);
    auto want = oracle::conv_ref(in, w, b.v, 1, 1);
    ASSERT_EQ(got.dims, want.dims);
    EXPECT_LT(oracle::max_abs_diff(got.v, want.v), 1e-12);
}

TEST(ConvForward, StridedMatchesReference) {
    Rng rng(12);
    Tensor4 in = oracle::random_tensor(2, 3, 11, 9, rng);
    Tensor4 w = oracle::random_tensor(4, 3, 3, 3, rng);
    Tensor4 b = oracle::random_tensor(4, 1, 1, 1, rng);
    auto spec = LayerSpec::conv(4, 3, 2, 1);
    auto got = conv_forward(in, w, b, spec);
    auto want = oracle::conv_ref(in, w, b.v, 2, 1);
    ASSERT_EQ(got.dims, want.dims);
    EXPECT_LT(oracle::max_abs_diff(got.v, want.v), 1e-12);
}

TEST(ConvForward, ShapeMismatchNamesLayer) {
    Tensor4 in(1, 2, 3, 3), w(1, 1, 3, 3), b(1, 1, 1, 1);
    auto spec = LayerSpec::conv(1, 3);
    spec.name = "conv9";
    try {
        conv_forward(in, w, b, spec);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("conv9"), std::string::npos);
    }
}

TEST(Lrn, AlphaZeroIsIdentityForUnitBias) {
    Rng rng(3);
    Tensor4 in = oracle::random_tensor(1, 4, 3, 3, rng);
    auto out = lrn_forward(in, LayerSpec::lrn(5, 0.0, 0.75, 1.0));
    EXPECT_LT(oracle::max_abs_diff(out.v, in.v), 1e-15);
}

TEST(Lrn, AlphaZeroScalesByBiasPower) {
    Tensor4 in(1, 1, 1, 1);
    in.v[0] = 3.0;
    auto out = lrn_forward(in, LayerSpec::lrn(1, 0.0, 0.5, 4.0));
    EXPECT_NEAR(out.v[0], 3.0 / 2.0, 1e-12);  // 4^-0.5 = 1/2
}

TEST(Lrn, ClosedFormSingleChannel) {
    Tensor4 in(1, 1, 1, 1);
    in.v[0] = 2.0;
    auto out = lrn_forward(in, LayerSpec::lrn(1, 1.0, 1.0, 1.0));
    EXPECT_NEAR(out.v[0], 0.4, 1e-12);  // 2 / (1 + 4)
}

TEST(Lrn, MatchesReference) {
    Rng rng(5);
    Tensor4 in = oracle::random_tensor(1, 8, 4, 4, rng);
    auto spec = LayerSpec::lrn(5, 1e-4, 0.75, 1.0);
    auto got = lrn_forward(in, spec);
    auto want = oracle::lrn_ref(in, 5, 1e-4, 0.75, 1.0);
    EXPECT_LT(oracle::max_abs_diff(got.v, want.v), 1e-12);
}

TEST(Lrn, RejectsBadSpec) {
    EXPECT_THROW(validate(LayerSpec::lrn(4)), ShapeError);         // even window
    EXPECT_THROW(validate(LayerSpec::lrn(5, 1e-4, 0.75, 0.0)), ShapeError);  // k <= 0
    EXPECT_THROW(validate(LayerSpec::lrn(5, 1e-4, 0.75, -1.0)), ShapeError);
}

TEST(MaxPool, ConstantInput) {
    Tensor4 in(1, 2, 5, 5);
    in.fill(0.7);
    auto r = maxpool_forward(in, LayerSpec::maxpool(3, 2));
    for (double x : r.out.v) EXPECT_DOUBLE_EQ(x, 0.7);
}

TEST(MaxPool, SingleMaxDominatesWindows) {
    Tensor4 in(1, 1, 4, 4);
    in.at(0, 0, 1, 1) = 9.0;
    auto r = maxpool_forward(in, LayerSpec::maxpool(3, 2));
    // Pool 3 stride 2 on 4x4 -> 1x1 output; its window contains (1,1).
    ASSERT_EQ(r.out.dims.h, 1);
    ASSERT_EQ(r.out.dims.w, 1);
    EXPECT_DOUBLE_EQ(r.out.v[0], 9.0);
}

TEST(MaxPool, MatchesReferenceExactly) {
    Rng rng(9);
    Tensor4 in = oracle::random_tensor(1, 3, 7, 7, rng);
    auto r = maxpool_forward(in, LayerSpec::maxpool(3, 2));
    auto want = oracle::maxpool_ref(in, 3, 2);
    ASSERT_EQ(r.out.dims, want.dims);
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_EQ(r.out.v[i], want.v[i]);
}

TEST(MaxPool, BackwardRoutesOnlyToArgmax) {
    Rng rng(13);
    Tensor4 in = oracle::random_tensor(2, 2, 6, 6, rng);
    auto spec = LayerSpec::maxpool(3, 2);
    auto r = maxpool_forward(in, spec);
    Tensor4 dout = oracle::random_tensor(r.out.dims.n, r.out.dims.c, r.out.dims.h, r.out.dims.w, rng);
    auto din = maxpool_backward(in.dims, r.argmax, dout);
    double up = 0.0, routed = 0.0;
    for (double x : dout.v) up += x;
    for (double x : din.v) routed += x;
    EXPECT_NEAR(up, routed, 1e-12);
    // Positions never recorded as argmax receive nothing.
    std::vector<bool> hit(in.size(), false);
    for (auto i : r.argmax) hit[i] = true;
    for (std::size_t i = 0; i < in.size(); ++i)
        if (!hit[i]) EXPECT_DOUBLE_EQ(din.v[i], 0.0);
}

TEST(MaxPool, BackwardWithoutForwardRejected) {
    Tensor4 dout(1, 1, 2, 2);
    std::vector<std::size_t> empty;
    EXPECT_THROW(maxpool_backward(Dims{1, 1, 5, 5}, empty, dout), ShapeError);
}

TEST(SpatialSoftmax, UniformLogits) {
    auto spec = LayerSpec::spatial_softmax(4, 40);
    Tensor4 logits(1, 160, 1, 1);
    logits.fill(1.7);
    auto p = spatial_softmax_forward(logits, spec);
    for (double x : p.v) EXPECT_NEAR(x, 0.025, 1e-12);
}

TEST(SpatialSoftmax, LargeLogitStability) {
    auto spec = LayerSpec::spatial_softmax(1, 5);
    Tensor4 logits(1, 5, 1, 1);
    logits.v = {1000.0, 0.0, 0.0, 0.0, 0.0};
    auto p = spatial_softmax_forward(logits, spec);
    EXPECT_TRUE(p.all_finite());
    EXPECT_NEAR(p.v[0], 1.0, 1e-12);
}

TEST(SpatialSoftmax, MatchesReference) {
    Rng rng(21);
    auto spec = LayerSpec::spatial_softmax(64, 10);
    Tensor4 logits = oracle::random_tensor(1, 640, 1, 1, rng, -4.0, 4.0);
    auto p = spatial_softmax_forward(logits, spec);
    auto want = oracle::softmax_ref(logits.v, 10);
    EXPECT_LT(oracle::max_abs_diff(p.v, want), 1e-12);
}

TEST(SpatialSoftmax, RowsAreDistributions) {
    Rng rng(22);
    auto spec = LayerSpec::spatial_softmax(8, 7);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor4 logits = oracle::random_tensor(2, 56, 1, 1, rng, -30.0, 30.0);
        auto p = spatial_softmax_forward(logits, spec);
        for (std::size_t r = 0; r < p.size() / 7; ++r) {
            double sum = 0.0;
            for (int j = 0; j < 7; ++j) {
                const double x = p.v[r * 7 + j];
                EXPECT_GE(x, 0.0);
                EXPECT_LE(x, 1.0);
                sum += x;
            }
            EXPECT_NEAR(sum, 1.0, 1e-6);
        }
    }
}

TEST(Backward, ZeroUpstreamGivesZeroGrads) {
    Rng rng(31);
    Tensor4 in = oracle::random_tensor(1, 2, 5, 5, rng);
    Tensor4 w = oracle::random_tensor(3, 2, 3, 3, rng);
    auto g = conv_backward(in, w, LayerSpec::conv(3, 3, 1, 1), Tensor4(1, 3, 5, 5));
    for (double x : g.dw.v) EXPECT_DOUBLE_EQ(x, 0.0);
    for (double x : g.db.v) EXPECT_DOUBLE_EQ(x, 0.0);
    for (double x : g.din.v) EXPECT_DOUBLE_EQ(x, 0.0);
}

TEST(Backward, FcScalarChainRule) {
    Tensor4 in(1, 1, 1, 1), w(1, 1, 1, 1);
    in.v[0] = 2.5;
    w.v[0] = 0.4;
    Tensor4 dout(1, 1, 1, 1);
    dout.v[0] = 1.0;
    auto g = fc_backward(in, w, dout);
    EXPECT_DOUBLE_EQ(g.dw.v[0], 2.5);   // d(out)/d(w) = input
    EXPECT_DOUBLE_EQ(g.din.v[0], 0.4);  // d(out)/d(x) = weight
    EXPECT_DOUBLE_EQ(g.db.v[0], 1.0);
}

namespace {

// Scalarizes a layer as sum(G .* f(inputs)) and checks analytic gradients of
// every coordinate against central finite differences.
constexpr double kPerLayerTol = 1e-4;

double weighted_sum(const Tensor4& g, const Tensor4& y) {
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += g.v[i] * y.v[i];
    return s;
}

}  // namespace

TEST(GradCheck, ConvLayer) {
    Rng rng(41);
    Tensor4 in = oracle::random_tensor(2, 2, 6, 5, rng);
    Tensor4 w = oracle::random_tensor(3, 2, 3, 3, rng);
    Tensor4 b = oracle::random_tensor(3, 1, 1, 1, rng);
    auto spec = LayerSpec::conv(3, 3, 2, 1);
    auto out_dims = infer_dims(spec, in.dims);
    Tensor4 g = oracle::random_tensor(out_dims.n, out_dims.c, out_dims.h, out_dims.w, rng);

    auto grads = conv_backward(in, w, spec, g);
    auto f = [&] { return weighted_sum(g, conv_forward(in, w, b, spec)); };
    GradCheckResult r;
    gradcheck_compare(r, "din", in.v, grads.din.v, f);
    gradcheck_compare(r, "dw", w.v, grads.dw.v, f);
    gradcheck_compare(r, "db", b.v, grads.db.v, f);
    EXPECT_LT(r.max_rel_error, kPerLayerTol) << r.worst;
}

TEST(GradCheck, LrnLayer) {
    Rng rng(42);
    Tensor4 in = oracle::random_tensor(1, 6, 3, 3, rng, 0.2, 1.5);
    auto spec = LayerSpec::lrn(5, 0.5, 0.75, 2.0);
    Tensor4 g = oracle::random_tensor(1, 6, 3, 3, rng);
    auto din = lrn_backward(in, spec, g);
    auto f = [&] { return weighted_sum(g, lrn_forward(in, spec)); };
    GradCheckResult r;
    gradcheck_compare(r, "din", in.v, din.v, f);
    EXPECT_LT(r.max_rel_error, kPerLayerTol) << r.worst;
}

TEST(GradCheck, MaxPoolLayer) {
    // Distinct, well-separated values keep the max away from switching points
    // under the finite-difference perturbation.
    Rng rng(43);
    Tensor4 in(1, 2, 6, 6);
    std::vector<int> order(in.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    for (std::size_t i = 0; i < in.size(); ++i) in.v[i] = 0.05 * order[i];
    auto spec = LayerSpec::maxpool(3, 2);
    auto fwd = maxpool_forward(in, spec);
    Tensor4 g = oracle::random_tensor(fwd.out.dims.n, fwd.out.dims.c, fwd.out.dims.h,
                                      fwd.out.dims.w, rng);
    auto din = maxpool_backward(in.dims, fwd.argmax, g);
    auto f = [&] { return weighted_sum(g, maxpool_forward(in, spec).out); };
    GradCheckResult r;
    gradcheck_compare(r, "din", in.v, din.v, f);
    EXPECT_LT(r.max_rel_error, kPerLayerTol) << r.worst;
}

TEST(GradCheck, FullyConnectedLayer) {
    Rng rng(44);
    Tensor4 in = oracle::random_tensor(3, 4, 2, 2, rng);
    Tensor4 w = oracle::random_tensor(5, 16, 1, 1, rng);
    Tensor4 b = oracle::random_tensor(5, 1, 1, 1, rng);
    Tensor4 g = oracle::random_tensor(3, 5, 1, 1, rng);
    auto grads = fc_backward(in, w, g);
    auto f = [&] { return weighted_sum(g, fc_forward(in, w, b)); };
    GradCheckResult r;
    gradcheck_compare(r, "din", in.v, grads.din.v, f);
    gradcheck_compare(r, "dw", w.v, grads.dw.v, f);
    gradcheck_compare(r, "db", b.v, grads.db.v, f);
    EXPECT_LT(r.max_rel_error, kPerLayerTol) << r.worst;
}

TEST(GradCheck, ReluLayer) {
    Rng rng(45);
    Tensor4 in = oracle::random_tensor(2, 3, 4, 4, rng);
    for (auto& x : in.v)
        if (std::abs(x) < 1e-3) x = 0.5;  // keep clear of the kink
    Tensor4 g = oracle::random_tensor(2, 3, 4, 4, rng);
    auto din = relu_backward(in, g);
    auto f = [&] { return weighted_sum(g, relu_forward(in)); };
    GradCheckResult r;
    gradcheck_compare(r, "din", in.v, din.v, f);
    EXPECT_LT(r.max_rel_error, kPerLayerTol) << r.worst;
}

TEST(GradCheck, SpatialSoftmaxLayer) {
    Rng rng(46);
    auto spec = LayerSpec::spatial_softmax(6, 5);
    Tensor4 in = oracle::random_tensor(1, 30, 1, 1, rng, -2.0, 2.0);
    Tensor4 g = oracle::random_tensor(1, 30, 1, 1, rng);
    auto probs = spatial_softmax_forward(in, spec);
    auto din = spatial_softmax_backward(probs, g, spec);
    auto f = [&] { return weighted_sum(g, spatial_softmax_forward(in, spec)); };
    GradCheckResult r;
    gradcheck_compare(r, "din", in.v, din.v, f);
    EXPECT_LT(r.max_rel_error, kPerLayerTol) << r.worst;
}

TEST(Xavier, Deterministic) {
    auto spec = make_network_spec({1, 3, 8, 8},
                                  {LayerSpec::conv(4, 3, 1, 1), LayerSpec::relu(), LayerSpec::fc(10)});
    auto a = xavier_init(spec, 123);
    auto b = xavier_init(spec, 123);
    ASSERT_EQ(a.tensors.size(), b.tensors.size());
    for (std::size_t i = 0; i < a.tensors.size(); ++i)
        EXPECT_EQ(a.tensors[i].v, b.tensors[i].v);
    auto c = xavier_init(spec, 124);
    EXPECT_NE(a.tensors[0].v, c.tensors[0].v);
}

TEST(Xavier, BoundForFanInThree) {
    // One 1x1 conv kernel over 3 channels: fan_in = 3, bound = sqrt(3/3) = 1.
    auto spec = make_network_spec({1, 3, 4, 4}, {LayerSpec::conv(64, 1)});
    auto p = xavier_init(spec, 7);
    for (double x : p.tensors[0].v) {
        EXPECT_GE(x, -1.0);
        EXPECT_LE(x, 1.0);
    }
    for (double x : p.tensors[1].v) EXPECT_DOUBLE_EQ(x, 0.0);
}

TEST(Xavier, EmpiricalVariance) {
    // fc over 12 inputs; 10000 outputs x 12 = 120k samples, var target 1/12.
    auto spec = make_network_spec({1, 12, 1, 1}, {LayerSpec::fc(10000)});
    auto p = xavier_init(spec, 99);
    const auto& w = p.tensors[0].v;
    ASSERT_GE(w.size(), 100000u);
    double mean = 0.0;
    for (double x : w) mean += x;
    mean /= static_cast<double>(w.size());
    double var = 0.0;
    for (double x : w) var += (x - mean) * (x - mean);
    var /= static_cast<double>(w.size());
    EXPECT_NEAR(var, 1.0 / 12.0, 0.05 / 12.0);
}

TEST(Sgd, ZeroGradientKeepsParams) {
    auto spec = make_network_spec({1, 2, 4, 4}, {LayerSpec::conv(2, 3, 1, 1)});
    auto p = xavier_init(spec, 5);
    auto saved = p.tensors[0].v;
    Gradients g;
    g.ensure_like(p);
    g.zero();
    SgdConfig cfg;
    sgd_step(p, g, cfg);
    EXPECT_EQ(p.tensors[0].v, saved);
    EXPECT_EQ(p.iteration, 1u);
}

TEST(Sgd, OneStepArithmetic) {
    NetworkParams p;
    p.names = {"w"};
    p.tensors.emplace_back(1, 1, 1, 1);
    p.tensors[0].v[0] = 1.0;
    Gradients g;
    g.ensure_like(p);
    g.tensors[0].v[0] = 2.0;
    SgdConfig cfg;
    cfg.base_lr = 0.1;
    sgd_step(p, g, cfg);
    EXPECT_NEAR(p.tensors[0].v[0], 0.8, 1e-15);
}

TEST(Sgd, StepDecaySchedule) {
    SgdConfig cfg;
    cfg.base_lr = 0.0001;
    cfg.gamma = 0.1;
    cfg.stepsize = 50000;
    EXPECT_NEAR(learning_rate(cfg, 0), 0.0001, 1e-18);
    EXPECT_NEAR(learning_rate(cfg, 49999), 0.0001, 1e-18);
    EXPECT_NEAR(learning_rate(cfg, 50000), 0.00001, 1e-18);
}

TEST(Sgd, ShapeMismatchRejected) {
    NetworkParams p;
    p.names = {"w"};
    p.tensors.emplace_back(2, 1, 1, 1);
    Gradients g;
    g.tensors.emplace_back(3, 1, 1, 1);
    SgdConfig cfg;
    EXPECT_THROW(sgd_step(p, g, cfg), ShapeError);
}

TEST(Checkpoint, RoundTripBitExact) {
    Rng rng(61);
    NetworkParams p;
    p.iteration = 4242;
    p.names = {"conv1.weight", "conv1.bias"};
    p.tensors.push_back(oracle::random_tensor(4, 3, 5, 5, rng));
    p.tensors.push_back(oracle::random_tensor(4, 1, 1, 1, rng));
    p.input_mean = {0.25, 0.5, 0.125};

    const auto path1 = temp_file("fp_ckpt_a.bin");
    const auto path2 = temp_file("fp_ckpt_b.bin");
    save_params(path1.string(), p);
    auto q = load_params(path1.string());
    EXPECT_EQ(q.iteration, 4242u);
    ASSERT_EQ(q.input_mean.size(), 3u);
    save_params(path2.string(), q);

    std::ifstream f1(path1, std::ios::binary), f2(path2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    EXPECT_EQ(b1, b2);

    // Values survive modulo the f32 on-disk precision.
    for (std::size_t i = 0; i < p.tensors[0].size(); ++i)
        EXPECT_EQ(static_cast<float>(p.tensors[0].v[i]), q.tensors[0].v[i]);
    std::filesystem::remove(path1);
    std::filesystem::remove(path2);
}

TEST(Checkpoint, BadMagicRejected) {
    const auto path = temp_file("fp_ckpt_bad.bin");
    {
        std::ofstream os(path, std::ios::binary);
        os << "NOTACKPT-------";
    }
    try {
        load_params(path.string());
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("FCNET1"), std::string::npos);
    }
    std::filesystem::remove(path);
}

TEST(Checkpoint, TruncatedPayloadRejected) {
    Rng rng(62);
    NetworkParams p;
    p.names = {"w"};
    p.tensors.push_back(oracle::random_tensor(2, 2, 2, 2, rng));
    const auto path = temp_file("fp_ckpt_trunc.bin");
    save_params(path.string(), p);
    const auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size - 5);
    EXPECT_THROW(load_params(path.string()), DataError);
    std::filesystem::remove(path);
}

TEST(Network, BackwardWithoutForwardRejected) {
    auto spec = make_network_spec({1, 1, 4, 4}, {LayerSpec::conv(1, 3, 1, 1)});
    auto p = xavier_init(spec, 1);
    Gradients g;
    ForwardTrace empty;
    EXPECT_THROW(net_backward(spec, p, empty, Tensor4(1, 1, 4, 4), g), ShapeError);
}

TEST(Network, ForwardProducesFiniteActivations) {
    auto spec = make_network_spec(
        {1, 3, 16, 16},
        {LayerSpec::conv(4, 3, 1, 1), LayerSpec::relu(), LayerSpec::lrn(),
         LayerSpec::maxpool(3, 2), LayerSpec::fc(20), LayerSpec::relu(), LayerSpec::fc(12),
         LayerSpec::spatial_softmax(4, 3)});
    auto p = xavier_init(spec, 17);
    Rng rng(18);
    auto tr = net_forward(spec, p, oracle::random_tensor(2, 3, 16, 16, rng));
    for (const auto& a : tr.acts) EXPECT_TRUE(a.all_finite());
}
