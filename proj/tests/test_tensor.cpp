#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "lam3d/attention.hpp"
#include "lam3d/ops.hpp"
#include "lam3d/optim.hpp"
#include "lam3d/tensor_io.hpp"

using namespace lam3d;

namespace {

// Deterministic inputs shared with the offline oracle script: float(sin(a*i+b)).
Tensor seq(Shape shape, double a, double b) {
    std::vector<float> v(numel(shape));
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(std::sin(a * static_cast<double>(i) + b));
    return Tensor(std::move(shape), std::move(v));
}

void expect_near_all(const Tensor& t, const std::vector<float>& want, float tol) {
    ASSERT_EQ(t.size(), want.size());
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(t.at(i), want[i], tol) << "index " << i;
}

} // namespace

TEST(Tensor, RejectsZeroExtentAndLengthMismatch) {
    EXPECT_THROW(Tensor({2, 0}, {}), ShapeError);
    EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), ShapeError);
}

TEST(Tensor, SumGradientIsOnes) {
    auto x = Tensor({2, 3}, {1, -2, 3, 0.5f, 7, -1}).set_requires_grad();
    sum(x).backward();
    for (float g : *x.grad()) EXPECT_EQ(g, 1.0f);
}

TEST(Tensor, SumOfSquaresGradientIsTwiceInput) {
    auto x = Tensor({4}, {1, -2, 3, 0.25f}).set_requires_grad();
    sum(x * x).backward();
    for (std::size_t i = 0; i < 4; ++i) EXPECT_FLOAT_EQ((*x.grad())[i], 2.0f * x.at(i));
}

TEST(Tensor, GradientsAccumulateUntilZeroed) {
    auto x = Tensor({2}, {1, 2}).set_requires_grad();
    auto loss = sum(scale(x, 3.0f));
    loss.backward();
    loss.backward();
    EXPECT_EQ((*x.grad())[0], 6.0f);
    x.zero_grad();
    EXPECT_FALSE(x.has_grad());
}

TEST(Tensor, BroadcastAddAndGradientReduction) {
    auto a = Tensor({2, 3}, {1, 2, 3, 4, 5, 6}).set_requires_grad();
    auto b = Tensor({3}, {10, 20, 30}).set_requires_grad();
    auto c = a + b;
    expect_near_all(c, {11, 22, 33, 14, 25, 36}, 0);
    sum(c).backward();
    for (float g : *b.grad()) EXPECT_EQ(g, 2.0f);

    auto col = Tensor({2, 1}, {1, 2});
    auto row = Tensor({1, 3}, {1, 10, 100});
    auto outer = col * row;
    EXPECT_EQ(outer.shape(), (Shape{2, 3}));
    expect_near_all(outer, {1, 10, 100, 2, 20, 200}, 0);
    EXPECT_THROW(Tensor::zeros({2, 3}) + Tensor::zeros({2}), ShapeError);
}

TEST(Tensor, ResultsNeverAliasInputs) {
    auto a = Tensor({3}, {1, 2, 3});
    auto b = Tensor({1}, {1});
    auto c = a + b;
    auto r = reshape(a, {3, 1});
    a.mutable_data()[0] = 100.0f;
    EXPECT_EQ(c.at(0), 2.0f);
    EXPECT_EQ(r.at(0), 1.0f);
}

TEST(Tensor, CheckedDivisionRejectsTinyDivisor) {
    auto a = Tensor({2}, {1, 1});
    auto b = Tensor({2}, {1, 1e-13f});
    EXPECT_THROW(a / b, NumericalError);
    CheckedModeGuard off(false);
    EXPECT_NO_THROW(a / b);
}

TEST(Tensor, MatmulBatchedBroadcastMatchesOracle) {
    auto a = seq({2, 1, 3, 4}, 0.53, 0.2);
    auto b = seq({3, 4, 2}, 0.29, 0.7);
    auto m = matmul(a, b);
    EXPECT_EQ(m.shape(), (Shape{2, 3, 3, 2}));
    expect_near_all(m, {2.30939956f, 2.0202616f, 0.0722053272f, 0.423959617f, -2.38478312f, -2.4628824f,
                        -2.0662891f, -2.33231455f, 0.859273954f, 0.566657715f, 1.16919305f, 1.74071465f,
                        0.505117188f, 1.1566115f, -1.24263253f, -1.19581075f, 0.792211511f, 0.0918344873f,
                        2.41754723f, 2.14732986f, -0.139175693f, 0.22103493f, -2.27224554f, -2.37809395f,
                        -2.0799306f, -2.38399225f, 1.00228849f, 0.748212224f, 1.03352505f, 1.60284648f,
                        0.415550748f, 1.09993402f, -1.2260533f, -1.2401836f, 0.864468917f, 0.194837901f},
                    1e-5f);
    EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
}

TEST(Tensor, Conv2dStrideTwoPadOneMatchesOracle) {
    auto x = seq({2, 3, 5, 4}, 0.37, 0.1);
    auto w = seq({2, 3, 3, 3}, 0.91, 0.4);
    auto y = conv2d(x, w, {.stride = 2, .pad = 1});
    EXPECT_EQ(y.shape(), (Shape{2, 2, 3, 2}));
    expect_near_all(y, {3.69038725f, 0.143582711f, -1.71768612f, 2.74046146f, -0.372907289f, -4.93837621f,
                        2.09300203f, -2.4614706f, 0.332554634f, 4.74073589f, -1.97368961f, -5.42657945f,
                        -3.05519199f, 1.043912f, 0.974717015f, -3.63429323f, 1.28049619f, 5.56236227f,
                        -1.32762053f, 3.27978568f, -1.11067409f, -5.14011382f, 2.76801513f, 5.49656814f},
                    1e-5f);
}

TEST(Tensor, Conv2dOutputExtentFormula) {
    auto x = Tensor::zeros({1, 1, 7, 6});
    auto w = Tensor::zeros({1, 1, 3, 3});
    EXPECT_EQ(conv2d(x, w, {.stride = 2, .pad = 0}).shape(), (Shape{1, 1, 3, 2}));
    EXPECT_EQ(conv2d(x, w, {.stride = 3, .pad = 1}).shape(), (Shape{1, 1, 3, 2}));
    EXPECT_THROW(conv2d(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 5, 5})), ShapeError);
    EXPECT_THROW(conv2d(x, Tensor::zeros({1, 2, 3, 3})), ShapeError);
}

TEST(Tensor, Upsample2xRepeatsPixels) {
    auto x = Tensor({1, 1, 2, 2}, {1, 2, 3, 4});
    auto y = upsample2x(x);
    EXPECT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
    expect_near_all(y, {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4}, 0);
}

TEST(Tensor, MaxAxisTieGoesToLowestIndex) {
    auto x = Tensor({1, 3, 1}, {5, 5, 1}).set_requires_grad();
    auto m = max_axis(x, 1);
    EXPECT_EQ(m.item(), 5.0f);
    sum(m).backward();
    EXPECT_EQ((*x.grad())[0], 1.0f);
    EXPECT_EQ((*x.grad())[1], 0.0f);
}

TEST(Tensor, ConcatSliceRoundTrip) {
    auto a = seq({2, 3, 2}, 0.3, 0.0);
    auto b = seq({2, 1, 2}, 0.7, 0.0);
    auto c = concat({a, b}, 1);
    EXPECT_EQ(c.shape(), (Shape{2, 4, 2}));
    auto back = slice(c, 1, 3, 1);
    for (std::size_t i = 0; i < b.size(); ++i) EXPECT_EQ(back.at(i), b.at(i));
    auto p = permute(a, {2, 0, 1});
    EXPECT_EQ(p.shape(), (Shape{2, 2, 3}));
    EXPECT_EQ(p.at(1 * 6 + 1 * 3 + 2), a.at(1 * 6 + 2 * 2 + 1));
}

TEST(Tensor, LayerNormZeroMeanUnitVariance) {
    auto y = layer_norm(seq({3, 8}, 1.1, 0.3));
    for (std::size_t r = 0; r < 3; ++r) {
        double m = 0, v = 0;
        for (std::size_t j = 0; j < 8; ++j) m += y.at(r * 8 + j);
        m /= 8;
        for (std::size_t j = 0; j < 8; ++j) v += (y.at(r * 8 + j) - m) * (y.at(r * 8 + j) - m);
        EXPECT_NEAR(m, 0.0, 1e-6);
        EXPECT_NEAR(v / 8, 1.0, 1e-3);
    }
}

TEST(Attention, SingleKeyReducesToValue) {
    auto q = seq({2, 5, 8}, 0.4, 0.0);
    auto k = seq({2, 1, 8}, 0.8, 1.0);
    auto v = seq({2, 1, 8}, 1.3, 2.0);
    for (const auto& out : {softmax_attention(q, k, v, 2), linear_attention(q, k, v, 2)}) {
        ASSERT_EQ(out.shape(), (Shape{2, 5, 8}));
        for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t i = 0; i < 5; ++i)
                for (std::size_t d = 0; d < 8; ++d) EXPECT_NEAR(out.at((b * 5 + i) * 8 + d), v.at(b * 8 + d), 1e-5);
    }
}

TEST(Attention, MatchesBruteForceFormulas) {
    const std::size_t B = 1, N = 4, S = 3, D = 6, H = 2, dh = 3;
    auto q = seq({B, N, D}, 0.45, 0.1);
    auto k = seq({B, S, D}, 0.77, 0.5);
    auto v = seq({B, S, D}, 1.21, 0.9);
    auto soft = softmax_attention(q, k, v, H);
    auto lin = linear_attention(q, k, v, H);
    auto phi = [](double x) { return x > 0 ? x + 1 : std::exp(x); };
    for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t i = 0; i < N; ++i) {
            std::vector<double> logits(S);
            double mx = -1e300;
            for (std::size_t j = 0; j < S; ++j) {
                double s = 0;
                for (std::size_t d = 0; d < dh; ++d) s += q.at(i * D + h * dh + d) * k.at(j * D + h * dh + d);
                logits[j] = s / std::sqrt(double(dh));
                mx = std::max(mx, logits[j]);
            }
            double z = 0;
            for (auto& l : logits) z += (l = std::exp(l - mx));
            for (std::size_t d = 0; d < dh; ++d) {
                double o = 0, num = 0, den = 0;
                for (std::size_t j = 0; j < S; ++j) {
                    o += logits[j] / z * v.at(j * D + h * dh + d);
                    double w = 0;
                    for (std::size_t e = 0; e < dh; ++e) w += phi(q.at(i * D + h * dh + e)) * phi(k.at(j * D + h * dh + e));
                    num += w * v.at(j * D + h * dh + d);
                    den += w;
                }
                EXPECT_NEAR(soft.at(i * D + h * dh + d), o, 1e-5);
                EXPECT_NEAR(lin.at(i * D + h * dh + d), num / den, 1e-5);
            }
        }
    }
}

TEST(Tensor, OpsAreBitDeterministic) {
    auto x = seq({1, 2, 6, 6}, 0.33, 0.0);
    auto w = seq({3, 2, 3, 3}, 0.71, 0.2);
    auto run = [&] { return gelu(conv2d(x, w, {.stride = 1, .pad = 1})).to_vector(); };
    EXPECT_EQ(run(), run());
}

TEST(TensorIo, ByteLayoutAndRoundTrip) {
    auto t = Tensor({2, 3}, {1, -2, 3.5f, 0, 1e-7f, -1e7f});
    std::ostringstream os(std::ios::binary);
    write_tensor(os, t);
    const auto bytes = os.str();
    ASSERT_EQ(bytes.size(), 8u + 4 + 2 * 4 + 6 * 4);
    EXPECT_EQ(bytes.substr(0, 8), "LAM3DT01");
    EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 2);
    EXPECT_EQ(static_cast<unsigned char>(bytes[12]), 2);
    EXPECT_EQ(static_cast<unsigned char>(bytes[16]), 3);
    // 1.0f = 0x3f800000, little endian
    EXPECT_EQ(static_cast<unsigned char>(bytes[23]), 0x3f);
    EXPECT_EQ(static_cast<unsigned char>(bytes[22]), 0x80);
    std::istringstream is(bytes, std::ios::binary);
    auto back = read_tensor(is);
    EXPECT_EQ(back.shape(), t.shape());
    EXPECT_EQ(back.to_vector(), t.to_vector());

    std::istringstream bad(std::string("LAM3DT02") + bytes.substr(8), std::ios::binary);
    EXPECT_THROW(read_tensor(bad), IoError);
    std::istringstream cut(bytes.substr(0, 20), std::ios::binary);
    EXPECT_THROW(read_tensor(cut), IoError);
}

TEST(Adam, FirstStepMovesByLearningRate) {
    auto w = make_param(Tensor({2}, {1.0f, -3.0f}));
    ParamList params;
    params.add("w", w);
    Adam opt(params, {.lr = 0.1f});
    sum(w * w).backward();
    opt.step();
    EXPECT_NEAR(w.at(0), 0.9f, 1e-6);
    EXPECT_NEAR(w.at(1), -2.9f, 1e-6);
}
