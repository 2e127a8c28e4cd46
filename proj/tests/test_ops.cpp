#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fcan/ops.hpp"

using namespace fcan;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.mutable_data()) v = u(rng);
    return t;
}

// Direct nested-loop cross-correlation on [N,C,H,W].
std::vector<double> conv_oracle(const Tensor& x, const Tensor& k, const Tensor* bias, const Conv2dParams& p,
                                std::size_t& oh, std::size_t& ow) {
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t co = k.dim(0), kh = k.dim(2), kw = k.dim(3);
    oh = (h + 2 * p.pad - p.dilation * (kh - 1) - 1) / p.stride + 1;
    ow = (w + 2 * p.pad - p.dilation * (kw - 1) - 1) / p.stride + 1;
    std::vector<double> out(n * co * oh * ow, 0.0);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t o = 0; o < co; ++o)
            for (std::size_t y = 0; y < oh; ++y)
                for (std::size_t xx = 0; xx < ow; ++xx) {
                    double acc = bias ? (*bias)[o] : 0.0;
                    for (std::size_t ci = 0; ci < c; ++ci)
                        for (std::size_t i = 0; i < kh; ++i)
                            for (std::size_t j = 0; j < kw; ++j) {
                                const long iy = static_cast<long>(y * p.stride + i * p.dilation) - static_cast<long>(p.pad);
                                const long ix = static_cast<long>(xx * p.stride + j * p.dilation) - static_cast<long>(p.pad);
                                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
                                acc += x[((b * c + ci) * h + iy) * w + ix] * k[((o * c + ci) * kh + i) * kw + j];
                            }
                    out[((b * co + o) * oh + y) * ow + xx] = acc;
                }
    return out;
}

}  // namespace

TEST(Conv2d, IdentityPointwiseKernel) {
    std::mt19937_64 rng(4);
    Tensor x = random_tensor({2, 3, 4}, rng);
    Tensor k = Tensor::zeros({2, 2, 1, 1});
    k.mutable_data()[0] = 1.0;
    k.mutable_data()[3] = 1.0;
    Tensor y = conv2d(x, k);
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Conv2d, DilatedShapeArithmetic) {
    EXPECT_EQ(conv_out_extent(9, 3, Conv2dParams{1, 0, 2}), 5u);
    EXPECT_EQ(conv_out_extent(9, 3, Conv2dParams{2, 2, 2}), 5u);
    EXPECT_THROW(conv_out_extent(4, 3, Conv2dParams{1, 0, 2}), ShapeError);
}

TEST(Conv2d, OnesKernelOnTwoByTwo) {
    Tensor x = Tensor::full({1, 2, 2}, 1.0);
    Tensor k = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor y = conv2d(x, k, Conv2dParams{1, 1, 1});
    ASSERT_EQ(y.shape(), (Shape{1, 2, 2}));
    for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 4.0);
}

TEST(Conv2d, MatchesNestedLoopOracle) {
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<int> pick(1, 3);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = pick(rng), c = pick(rng), co = pick(rng);
        const std::size_t ksz = std::uniform_int_distribution<int>(1, 3)(rng);
        Conv2dParams p{static_cast<std::size_t>(pick(rng) % 2 + 1), static_cast<std::size_t>(pick(rng) - 1),
                       static_cast<std::size_t>(pick(rng))};
        const std::size_t h = 5 + pick(rng) + p.dilation * ksz, w = 4 + pick(rng) + p.dilation * ksz;
        Tensor x = random_tensor({n, c, h, w}, rng);
        Tensor k = random_tensor({co, c, ksz, ksz}, rng);
        Tensor b = random_tensor({co}, rng);
        Tensor y = conv2d(x, k, b, p);
        std::size_t oh = 0, ow = 0;
        auto ref = conv_oracle(x, k, &b, p, oh, ow);
        ASSERT_EQ(y.shape(), (Shape{n, co, oh, ow}));
        for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(y[i], ref[i], 1e-10) << "trial " << trial;
    }
}

TEST(Conv2d, DilationEqualsZeroInterleavedKernel) {
    std::mt19937_64 rng(5);
    Tensor x = random_tensor({2, 9, 9}, rng);
    Tensor k = random_tensor({3, 2, 3, 3}, rng);
    Tensor wide = Tensor::zeros({3, 2, 5, 5});
    for (std::size_t o = 0; o < 3; ++o)
        for (std::size_t c = 0; c < 2; ++c)
            for (std::size_t i = 0; i < 3; ++i)
                for (std::size_t j = 0; j < 3; ++j)
                    wide.mutable_data()[((o * 2 + c) * 5 + 2 * i) * 5 + 2 * j] = k[((o * 2 + c) * 3 + i) * 3 + j];
    Tensor a = conv2d(x, k, Conv2dParams{1, 2, 2});
    Tensor b = conv2d(x, wide, Conv2dParams{1, 2, 1});
    ASSERT_EQ(a.shape(), b.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Conv2d, RejectsMismatchedChannelsAndOversizedKernels) {
    EXPECT_THROW(conv2d(Tensor::zeros({2, 4, 4}), Tensor::zeros({1, 3, 3, 3}), Conv2dParams{}), ShapeError);
    EXPECT_THROW(conv2d(Tensor::zeros({1, 2, 2}), Tensor::zeros({1, 1, 5, 5}), Conv2dParams{}), ShapeError);
    EXPECT_THROW(conv2d(Tensor::zeros({1, 4, 4}), Tensor::zeros({2, 1, 3, 3}), Tensor::zeros({3}), Conv2dParams{}),
                 ShapeError);
}

TEST(Conv2d, ResultIndependentOfThreadCount) {
    std::mt19937_64 rng(3);
    Tensor x = random_tensor({4, 3, 12, 12}, rng);
    Tensor k = random_tensor({5, 3, 3, 3}, rng, -0.5, 0.5);
    k.set_requires_grad(true);
    auto run = [&](const char* threads) {
        setenv("FCAN_THREADS", threads, 1);
        k.zero_grad();
        Tape tape;
        TapeScope scope(tape);
        Tensor y = conv2d(x, k, Conv2dParams{1, 1, 1});
        tape.backward(sum(mul(y, y)));
        std::vector<double> out(y.data().begin(), y.data().end());
        out.insert(out.end(), k.grad().begin(), k.grad().end());
        return out;
    };
    auto one = run("1");
    auto four = run("4");
    unsetenv("FCAN_THREADS");
    EXPECT_EQ(one, four);
}

TEST(BatchNorm, TrainModeMatchesScalarOracle) {
    std::mt19937_64 rng(9);
    Tensor x = random_tensor({3, 2, 4, 5}, rng, -2.0, 3.0);
    Tensor gamma({2}, {1.5, -0.5});
    Tensor beta({2}, {0.1, 0.2});
    BatchNormStats stats(2);
    Tensor y = batch_norm(x, gamma, beta, stats, BnMode::Train);
    for (std::size_t c = 0; c < 2; ++c) {
        double m = 0.0, v = 0.0, count = 0.0;
        for (std::size_t n = 0; n < 3; ++n)
            for (std::size_t i = 0; i < 20; ++i) {
                m += x[(n * 2 + c) * 20 + i];
                count += 1.0;
            }
        m /= count;
        for (std::size_t n = 0; n < 3; ++n)
            for (std::size_t i = 0; i < 20; ++i) v += std::pow(x[(n * 2 + c) * 20 + i] - m, 2);
        v /= count;
        for (std::size_t n = 0; n < 3; ++n)
            for (std::size_t i = 0; i < 20; ++i) {
                const std::size_t idx = (n * 2 + c) * 20 + i;
                EXPECT_NEAR(y[idx], gamma[c] * (x[idx] - m) / std::sqrt(v + kBatchNormEps) + beta[c], 1e-10);
            }
        EXPECT_NEAR(stats.mean[c], 0.1 * m, 1e-12);
        EXPECT_NEAR(stats.var[c], 0.9 + 0.1 * v, 1e-12);
    }
}

TEST(BatchNorm, ConstantChannelNormalizesToZero) {
    Tensor x = Tensor::full({2, 1, 3, 3}, 0.7);
    BatchNormStats stats(1);
    Tensor y = batch_norm(x, Tensor({1}, {1.0}), Tensor({1}, {0.0}), stats, BnMode::Train);
    for (double v : y.data()) EXPECT_NEAR(v, 0.0, 1e-6);
}

TEST(BatchNorm, EvalModeUsesRunningStats) {
    Tensor x({1, 1, 2}, {1.0, 3.0});
    BatchNormStats stats(1);
    stats.mean[0] = 1.0;
    stats.var[0] = 4.0;
    Tensor y = batch_norm(x, Tensor({1}, {2.0}), Tensor({1}, {0.5}), stats, BnMode::Eval);
    EXPECT_NEAR(y[0], 0.5, 1e-12);
    EXPECT_NEAR(y[1], 2.0 * 2.0 / std::sqrt(4.0 + kBatchNormEps) + 0.5, 1e-12);
    stats.var[0] = -1.0;
    EXPECT_THROW(batch_norm(x, Tensor({1}, {1.0}), Tensor({1}, {0.0}), stats, BnMode::Eval), NumericalError);
}

TEST(BatchNorm, UpdateStatsFalseLeavesRunningStats) {
    std::mt19937_64 rng(1);
    Tensor x = random_tensor({2, 3, 3}, rng);
    BatchNormStats stats(2);
    batch_norm(x, Tensor::full({2}, 1.0), Tensor::zeros({2}), stats, BnMode::Train, false);
    EXPECT_EQ(stats.mean, (std::vector<double>{0.0, 0.0}));
    EXPECT_EQ(stats.var, (std::vector<double>{1.0, 1.0}));
}

TEST(Bilinear, UpsamplesRowWithHalfPixelCentres) {
    Tensor x({1, 1, 2}, {0.0, 1.0});
    Tensor y = bilinear_resize(x, 1, 4);
    ASSERT_EQ(y.shape(), (Shape{1, 1, 4}));
    EXPECT_NEAR(y[0], 0.0, 1e-12);
    EXPECT_NEAR(y[1], 0.25, 1e-12);
    EXPECT_NEAR(y[2], 0.75, 1e-12);
    EXPECT_NEAR(y[3], 1.0, 1e-12);
}

TEST(Bilinear, IdentityAtSameSizeAndConstantPreserved) {
    std::mt19937_64 rng(2);
    Tensor x = random_tensor({2, 5, 7}, rng);
    Tensor same = bilinear_resize(x, 5, 7);
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(same[i], x[i], 1e-12);
    Tensor c = bilinear_resize(Tensor::full({1, 3, 3}, 0.7), 8, 5);
    for (double v : c.data()) EXPECT_NEAR(v, 0.7, 1e-12);
    Tensor up = bilinear_upsample(x, 1);
    EXPECT_TRUE(up.same_storage(x));
}

TEST(Pooling, AdaptiveAveragePool) {
    Tensor x({1, 2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
    Tensor g = adaptive_avg_pool(x, 1);
    ASSERT_EQ(g.shape(), (Shape{1, 1, 1}));
    EXPECT_DOUBLE_EQ(g[0], 4.5);
    Tensor h = adaptive_avg_pool(x, 2);
    EXPECT_DOUBLE_EQ(h[0], 1.5);
    EXPECT_DOUBLE_EQ(h[1], 3.5);
    EXPECT_DOUBLE_EQ(h[2], 5.5);
    EXPECT_DOUBLE_EQ(h[3], 7.5);
}

TEST(CrossEntropy, UniformLogitsGiveLogK) {
    Tensor logits = Tensor::zeros({4, 2, 3});
    std::vector<std::int32_t> labels{0, 1, 2, 3, 0, 1};
    CrossEntropy ce = softmax_ce_loss(logits, labels);
    EXPECT_NEAR(ce.loss.item(), std::log(4.0), 1e-12);
    EXPECT_EQ(ce.counted, 6u);
}

TEST(CrossEntropy, MatchesScalarOracleAndSkipsIgnore) {
    Tensor logits({3, 1, 2}, {1.0, 0.0, 2.0, -1.0, -0.5, 3.0});
    std::vector<std::int32_t> labels{1, kIgnoreLabel};
    CrossEntropy ce = softmax_ce_loss(logits, labels);
    const double z = std::exp(1.0) + std::exp(2.0) + std::exp(-0.5);
    EXPECT_NEAR(ce.loss.item(), -std::log(std::exp(2.0) / z), 1e-12);
    EXPECT_EQ(ce.counted, 1u);
}

TEST(CrossEntropy, AllIgnoredGivesZeroAndFlag) {
    Tensor logits = Tensor::full({2, 1, 2}, 0.3, true);
    std::vector<std::int32_t> labels{kIgnoreLabel, kIgnoreLabel};
    Tape tape;
    TapeScope scope(tape);
    CrossEntropy ce = softmax_ce_loss(logits, labels);
    EXPECT_TRUE(ce.all_ignored);
    EXPECT_EQ(ce.loss.item(), 0.0);
}

TEST(CrossEntropy, RejectsOutOfRangeLabels) {
    Tensor logits = Tensor::zeros({2, 1, 1});
    std::vector<std::int32_t> labels{2};
    EXPECT_THROW(softmax_ce_loss(logits, labels), ShapeError);
    std::vector<std::int32_t> short_labels{};
    EXPECT_THROW(softmax_ce_loss(logits, short_labels), ShapeError);
}

TEST(Gram, WorkedExample) {
    Tensor f({2, 2, 2}, {1, 2, 3, 4, 1, 0, 0, 1});
    Tensor g = gram_matrix(f);
    EXPECT_NEAR(g[0], 30.0 / 4.0, 1e-12);
    EXPECT_NEAR(g[1], 5.0 / 4.0, 1e-12);
    EXPECT_NEAR(g[2], 5.0 / 4.0, 1e-12);
    EXPECT_NEAR(g[3], 2.0 / 4.0, 1e-12);
    Tensor ones = gram_matrix(Tensor::full({1, 2, 2}, 1.0));
    EXPECT_NEAR(ones.item(), 1.0, 1e-12);
}

TEST(Reductions, MseAndMeanLog) {
    Tensor a({2}, {1.0, 3.0});
    Tensor b({2}, {0.0, 1.0});
    EXPECT_DOUBLE_EQ(mse(a, b).item(), 2.5);
    std::size_t clamped = 0;
    Tensor p({3}, {0.5, 0.0, 1.0});
    const double v = mean_log(p, 1e-7, &clamped).item();
    EXPECT_EQ(clamped, 2u);
    EXPECT_NEAR(v, (std::log(0.5) + std::log(1e-7) + std::log(1.0 - 1e-7)) / 3.0, 1e-12);
}

TEST(Softmax, RowsSumToOneAndArgmax) {
    Tensor logits({3, 1, 2}, {0.1, 5.0, 2.0, -1.0, 0.3, 0.0});
    Tensor p = softmax_channels(logits);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(p[i] + p[2 + i] + p[4 + i], 1.0, 1e-12);
    auto am = argmax_channels(logits);
    EXPECT_EQ(am, (std::vector<std::int32_t>{1, 0}));
}

TEST(CheckFinite, FlagsNaN) {
    Tensor t({2}, {1.0, std::nan("")});
    EXPECT_THROW(check_finite(t, "probe"), NumericalError);
    EXPECT_NO_THROW(check_finite(Tensor::full({2}, 1.0), "probe"));
}
