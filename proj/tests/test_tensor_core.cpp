#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "fd_oracle.hpp"
#include "hypermixer/ops.hpp"

using namespace hmx;
using testutil::fd_max_rel_error;
using testutil::random_tensor;

TEST(Tensor, ShapeMustMatchData)
{
    EXPECT_THROW(Tensor<double>({2, 3}, std::vector<double>(5)), ShapeError);
    Tensor<double> t({2, 3}, 1.0);
    EXPECT_EQ(t.numel(), 6u);
    EXPECT_FALSE(t.has_grad());
}

TEST(Matmul, IdentityLeavesOperand)
{
    Tape<double> tape;
    Tensor<double> eye({3, 3}, std::vector<double>{1, 0, 0, 0, 1, 0, 0, 0, 1});
    auto b = random_tensor({3, 3}, 1, false);
    auto c = matmul(tape, eye, b);
    for (std::size_t i = 0; i < 9; ++i) EXPECT_DOUBLE_EQ(c.data()[i], b.data()[i]);
}

TEST(Matmul, HandEvaluated)
{
    Tape<double> tape;
    Tensor<double> a({2, 2}, std::vector<double>{1, 2, 3, 4});
    Tensor<double> b({2, 2}, std::vector<double>{5, 6, 7, 8});
    auto c = matmul(tape, a, b);
    EXPECT_EQ(c.data()[0], 19);
    EXPECT_EQ(c.data()[1], 22);
    EXPECT_EQ(c.data()[2], 43);
    EXPECT_EQ(c.data()[3], 50);
}

TEST(Matmul, CountsTwoKPerOutput)
{
    Tape<double> tape;
    matmul(tape, Tensor<double>({2, 3}), Tensor<double>({3, 4}));
    EXPECT_EQ(tape.flops()[OpKind::matmul], 48u);
}

TEST(Matmul, MismatchNamesBothShapes)
{
    Tape<double> tape;
    try {
        matmul(tape, Tensor<double>({2, 3}), Tensor<double>({4, 5}));
        FAIL();
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2, 3]"), std::string::npos);
        EXPECT_NE(msg.find("[4, 5]"), std::string::npos);
    }
}

TEST(Matmul, BatchedMatchesPerEntryProducts)
{
    Tape<double> tape;
    auto a = random_tensor({3, 4, 5}, 2, false);
    auto b = random_tensor({5, 2}, 3, false);
    auto c = matmul(tape, a, b);
    for (std::size_t bb = 0; bb < 3; ++bb)
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t j = 0; j < 2; ++j) {
                double s = 0;
                for (std::size_t k = 0; k < 5; ++k) s += a(bb, i, k) * b(k, j);
                EXPECT_NEAR(c(bb, i, j), s, 1e-12);
            }
}

TEST(Gelu, KnownValues)
{
    Tape<double> tape;
    Tensor<double> x({2, 3}, std::vector<double>{0, 1, -1, 2, 0.5, -3});
    auto y = gelu(tape, x);
    EXPECT_EQ(y.data()[0], 0.0);
    // 0.5 (1 + tanh(sqrt(2/pi) (1 + 0.044715)))
    const double ref = 0.5 * (1 + std::tanh(std::sqrt(2 / std::numbers::pi) * 1.044715));
    EXPECT_NEAR(y.data()[1], ref, 1e-15);
    EXPECT_NEAR(y.data()[1], 0.8412, 1e-4);
    EXPECT_EQ(tape.flops()[OpKind::gelu], 54u);
}

TEST(Softmax, Rows)
{
    Tape<double> tape;
    Tensor<double> x({2, 4}, std::vector<double>{1, 1, 1, 1, 0, std::log(3.0), 0, 0});
    auto y = softmax_rows(tape, crop(tape, x, 1, 4));
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(y.data()[i], 0.25, 1e-15);
    Tensor<double> z({1, 2}, std::vector<double>{0, std::log(3.0)});
    auto w = softmax_rows(tape, z);
    EXPECT_NEAR(w.data()[0], 0.25, 1e-15);
    EXPECT_NEAR(w.data()[1], 0.75, 1e-15);
}

TEST(Softmax, MaskedKeyGetsZeroWeight)
{
    Tape<double> tape;
    std::vector<std::size_t> len{2};
    auto mask = Mask::from_lengths(len, 3);
    Tensor<double> x({1, 3, 3}, 0.5);
    auto y = softmax_rows(tape, x, &mask, 1);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(y(0, i, 2), 0.0);
        EXPECT_NEAR(y(0, i, 0) + y(0, i, 1), 1.0, 1e-12);
    }
}

TEST(Softmax, CountsThreePerEntry)
{
    Tape<double> tape;
    softmax_rows(tape, Tensor<double>({5, 7}));
    EXPECT_EQ(tape.flops()[OpKind::softmax], 5u * 3u * 7u);
}

TEST(LayerNorm, AnalyticValues)
{
    Tape<double> tape;
    Tensor<double> gain({2}, 1.0), bias({2}, 0.0);
    auto y = layer_norm(tape, Tensor<double>({1, 2}, std::vector<double>{1, 3}), gain, bias);
    EXPECT_NEAR(y.data()[0], -1.0, 1e-4);
    EXPECT_NEAR(y.data()[1], 1.0, 1e-4);
    auto z = layer_norm(tape, Tensor<double>({1, 3}, 4.0), Tensor<double>({3}, 1.0), Tensor<double>({3}, 0.0));
    for (auto v : z.data()) EXPECT_EQ(v, 0.0);
}

TEST(Dropout, ModesAndSurvivorFraction)
{
    Tape<double> tape;
    Rng rng(7);
    auto x = random_tensor({10}, 4, false);
    auto same = dropout(tape, x, 0.0, true, rng);
    auto eval = dropout(tape, x, 0.7, false, rng);
    for (std::size_t i = 0; i < 10; ++i) {
        EXPECT_EQ(same.data()[i], x.data()[i]);
        EXPECT_EQ(eval.data()[i], x.data()[i]);
    }
    EXPECT_THROW(dropout(tape, x, 1.0, true, rng), ParameterError);
    Tensor<double> ones({100000}, 1.0);
    auto y = dropout(tape, ones, 0.5, true, rng);
    std::size_t kept = 0;
    for (auto v : y.data()) {
        if (v != 0) {
            ++kept;
            EXPECT_EQ(v, 2.0);
        }
    }
    EXPECT_NEAR(static_cast<double>(kept) / 1e5, 0.5, 0.01);
}

TEST(Backward, SumGivesOnes)
{
    Tape<double> tape;
    auto x = random_tensor({3, 2}, 5);
    tape.backward(sum(tape, x));
    for (auto g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, NonScalarIsUsageError)
{
    Tape<double> tape;
    auto x = random_tensor({3}, 5);
    auto y = scale(tape, x, 2.0);
    EXPECT_THROW(tape.backward(y), UsageError);
}

TEST(Backward, DeterministicReplay)
{
    auto run = [] {
        auto a = random_tensor({4, 4}, 9);
        Tape<double> tape;
        tape.backward(sum(tape, gelu(tape, matmul(tape, a, a))));
        return std::vector<double>(a.grad().begin(), a.grad().end());
    };
    EXPECT_EQ(run(), run());
}

// Finite-difference checks of every differentiable op.

TEST(Gradcheck, Matmul)
{
    auto a = random_tensor({3, 3}, 10), b = random_tensor({3, 3}, 11);
    EXPECT_LT(fd_max_rel_error([&](Tape<double>& t) { return sum(t, matmul(t, a, b)); }, {a, b}), 1e-4);
    auto c = random_tensor({2, 3, 4}, 12), d = random_tensor({2, 5, 4}, 13);
    EXPECT_LT(fd_max_rel_error([&](Tape<double>& t) { return sum(t, gelu(t, matmul(t, c, d, false, true))); }, {c, d}),
              1e-4);
    auto e = random_tensor({2, 4, 3}, 14), f = random_tensor({4, 2}, 15);
    EXPECT_LT(fd_max_rel_error([&](Tape<double>& t) { return sum(t, gelu(t, matmul(t, e, f, true))); }, {e, f}), 1e-4);
    auto g = random_tensor({2, 4, 3}, 16), k = random_tensor({3, 5}, 17);
    EXPECT_LT(fd_max_rel_error([&](Tape<double>& t) { return sum(t, gelu(t, matmul(t, g, k))); }, {g, k}), 1e-4);
}

TEST(Gradcheck, ElementwiseAndBias)
{
    auto a = random_tensor({2, 3, 4}, 20), b = random_tensor({2, 3, 4}, 21);
    auto bias = random_tensor({4}, 22), rb = random_tensor({3}, 23);
    auto loss = [&](Tape<double>& t) {
        auto x = mul(t, add(t, a, b), sub(t, a, scale(t, b, 0.5)));
        return sum(t, gelu(t, add_row_bias(t, add_bias(t, x, bias), rb)));
    };
    EXPECT_LT(fd_max_rel_error(loss, {a, b, bias, rb}), 1e-4);
}

TEST(Gradcheck, SoftmaxAndLayerNorm)
{
    auto x = random_tensor({2, 3, 5}, 30);
    auto w = random_tensor({2, 3, 5}, 31, false);
    auto gain = random_tensor({5}, 32), bias = random_tensor({5}, 33);
    std::vector<std::size_t> lens{5, 3};
    auto mask = Mask::from_lengths(lens, 5);
    auto loss = [&](Tape<double>& t) {
        auto y = layer_norm(t, x, gain, bias);
        auto scores = matmul(t, y, y, false, true);
        auto p = softmax_rows(t, y, &mask, 1);
        return add(t, sum(t, mul(t, p, w)), sum(t, gelu(t, scores)));
    };
    EXPECT_LT(fd_max_rel_error(loss, {x, gain, bias}), 1e-4);
}

TEST(Gradcheck, Losses)
{
    auto logits = random_tensor({3, 4}, 40);
    std::vector<std::int32_t> labels{0, 3, 1};
    EXPECT_LT(fd_max_rel_error([&](Tape<double>& t) { return cross_entropy(t, logits, labels); }, {logits}), 1e-4);
    auto pred = random_tensor({2, 3}, 41);
    std::vector<double> target{0.1, 0.2, 0.3, -0.4, 0.5, 0.6};
    EXPECT_LT(fd_max_rel_error([&](Tape<double>& t) { return mse_loss(t, pred, std::span<const double>(target)); },
                               {pred}),
              1e-4);
    std::vector<std::int32_t> bad{0, 4, 1};
    Tape<double> tape;
    EXPECT_THROW(cross_entropy(tape, logits, bad), DataError);
}

TEST(Gradcheck, LayoutOps)
{
    auto x = random_tensor({2, 4, 6}, 50);
    auto table = random_tensor({5, 3}, 51);
    auto v = random_tensor({3}, 52);
    auto mat = random_tensor({5, 5}, 53);
    std::vector<std::size_t> lens{4, 2};
    auto mask = Mask::from_lengths(lens, 4);
    std::vector<std::int32_t> ids{0, 1, 4, 2, 3, 3, 0, 0};
    auto loss = [&](Tape<double>& t) {
        auto heads = merge_heads(t, gelu(t, split_heads(t, x, 2)), 2);
        auto pooled = mean_pool(t, mask_rows(t, heads, mask), mask);
        auto emb = embedding(t, table, ids, 2, 4);
        auto rep = repeat_rows(t, v, 2, 4);
        auto c = crop(t, mat, 4, 4);
        auto mixed = matmul(t, c, mul(t, emb, rep));
        auto s = slice_last(t, x, 1, 4);
        return add(t, add(t, sum(t, gelu(t, pooled)), sum(t, gelu(t, mixed))), mean(t, gelu(t, s)));
    };
    EXPECT_LT(fd_max_rel_error(loss, {x, table, v, mat}), 1e-4);
    std::vector<std::int32_t> oov{0, 1, 5, 2, 3, 3, 0, 0};
    Tape<double> tape;
    EXPECT_THROW(embedding(tape, table, oov, 2, 4), DataError);
}

TEST(Gradcheck, Dropout)
{
    auto x = random_tensor({4, 5}, 60);
    auto loss = [&](Tape<double>& t) {
        Rng rng(3);
        return sum(t, gelu(t, dropout(t, x, 0.3, true, rng)));
    };
    EXPECT_LT(fd_max_rel_error(loss, {x}), 1e-4);
}

TEST(Dft, ConstantColumnAndNaiveOracle)
{
    Tape<double> tape;
    auto mask4 = Mask::all_valid(1, 4);
    auto y = dft_real(tape, Tensor<double>({1, 4, 1}, 1.0), mask4);
    EXPECT_NEAR(y.data()[0], 4, 1e-12);
    for (int k = 1; k < 4; ++k) EXPECT_NEAR(y.data()[k], 0, 1e-12);

    // lengths on both sides of the naive/FFT switch, including non powers of two
    for (std::size_t n : {3u, 64u, 65u, 128u, 100u}) {
        auto x = random_tensor({1, n, 2}, static_cast<unsigned>(n), false);
        auto m = Mask::all_valid(1, n);
        auto out = dft_real(tape, x, m);
        for (std::size_t k = 0; k < n; ++k)
            for (std::size_t f = 0; f < 2; ++f) {
                double s = 0;
                for (std::size_t j = 0; j < n; ++j)
                    s += x(0, j, f) * std::cos(2 * std::numbers::pi * double(j) * double(k) / double(n));
                EXPECT_NEAR(out(0, k, f), s, 1e-9) << "n=" << n;
            }
    }
}

TEST(Dft, PaddingIgnoredAndGradcheck)
{
    Tape<double> tape;
    auto x = random_tensor({2, 5, 3}, 70);
    std::vector<std::size_t> lens{5, 3};
    auto mask = Mask::from_lengths(lens, 5);
    auto out = dft_real(tape, x, mask);
    for (std::size_t f = 0; f < 3; ++f) {
        EXPECT_EQ(out(1, 3, f), 0.0);
        EXPECT_EQ(out(1, 4, f), 0.0);
    }
    EXPECT_LT(fd_max_rel_error([&](Tape<double>& t) { return sum(t, gelu(t, dft_real(t, x, mask))); }, {x}), 1e-4);
}
