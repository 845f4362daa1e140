#include <gtest/gtest.h>

#include <cmath>

#include "lam3d/gradcheck.hpp"
#include "lam3d/nn.hpp"

using namespace lam3d;

namespace {

constexpr double kOpTol = 1e-3;

Tensor uniform_in(Shape shape, std::uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
    Rng rng(seed);
    return Tensor::uniform(std::move(shape), rng, lo, hi);
}

// Scalarizes y through fixed random weights so every output element matters.
Tensor project(const Tensor& y, std::uint64_t seed) {
    Rng rng(seed);
    return sum(y * Tensor::uniform(y.shape(), rng, -1.0f, 1.0f));
}

void expect_passes(const TensorFunction& f, std::vector<Tensor> in, double tol = kOpTol) {
    const auto r = finite_diff_check(f, std::move(in));
    EXPECT_LE(r.max_rel_error, tol) << "worst input " << r.worst_input << " index " << r.worst_index
                                    << " analytic " << r.worst_analytic << " numeric " << r.worst_numeric;
}

} // namespace

TEST(GradCheck, SumIsExactOnDyadicInputs) {
    // Dyadic inputs and step keep every float operation exact.
    auto x = Tensor({5}, {0.5f, -0.25f, 0.75f, 0.125f, -1.0f});
    const auto r = finite_diff_check([](const Tensor& t) { return sum(t); }, x, {.step = 1.0f / 1024.0f, .floor = 1.0, .subset = std::nullopt});
    EXPECT_EQ(r.max_rel_error, 0.0);
    EXPECT_EQ(r.worst_numeric, 1.0);
}

TEST(GradCheck, CubeMatchesAnalyticDerivative) {
    auto x = uniform_in({6}, 2);
    const auto r = finite_diff_check([](const Tensor& t) { return sum(t * t * t); }, x);
    EXPECT_LE(r.max_rel_error, kOpTol);
    auto xt = x.detach().set_requires_grad();
    sum(xt * xt * xt).backward();
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR((*xt.grad())[i], 3 * x.at(i) * x.at(i), 1e-6);
}

TEST(GradCheck, NonDeterministicFunctionIsRejected) {
    int calls = 0;
    auto f = [&](const Tensor& x) { return sum(x) + static_cast<float>(++calls); };
    EXPECT_THROW(finite_diff_check(f, uniform_in({3}, 3)), NumericalError);
}

TEST(GradCheck, DetectsWrongGradient) {
    // An op whose backward is off by 2%: the checker must flag it.
    auto f = [](const Tensor& x) {
        auto y = detail::make_result(x.shape(), x.to_vector(), "bad", {&x}, [](detail::Node& self) {
            auto& g = self.inputs[0]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += 1.02f * self.grad[i];
        });
        return project(y, 9);
    };
    EXPECT_GT(finite_diff_check(f, uniform_in({8}, 4)).max_rel_error, 1e-2);
}

TEST(GradCheck, BinaryElementwiseWithBroadcast) {
    for (auto kind : {BinaryKind::add, BinaryKind::sub, BinaryKind::mul}) {
        expect_passes([kind](const std::vector<Tensor>& in) { return project(binary(kind, in[0], in[1]), 11); },
                      {uniform_in({3, 4}, 5), uniform_in({4}, 6)});
    }
    expect_passes([](const std::vector<Tensor>& in) { return project(div(in[0], in[1]), 12); },
                  {uniform_in({3, 4}, 7), uniform_in({3, 1}, 8, 0.5f, 1.5f)});
}

TEST(GradCheck, UnaryElementwise) {
    const std::vector<std::pair<const char*, Tensor (*)(const Tensor&)>> ops = {
        {"neg", neg}, {"exp", exp}, {"gelu", gelu}, {"elu", elu}, {"sigmoid", sigmoid}, {"square", square}};
    for (const auto& [name, op] : ops) {
        SCOPED_TRACE(name);
        expect_passes([op](const std::vector<Tensor>& in) { return project(op(in[0]), 13); }, {uniform_in({10}, 14)});
    }
    expect_passes([](const std::vector<Tensor>& in) { return project(log(in[0]), 15); },
                  {uniform_in({10}, 16, 0.5f, 1.5f)});
    expect_passes([](const std::vector<Tensor>& in) { return project(sqrt(in[0]), 17); },
                  {uniform_in({10}, 18, 0.5f, 1.5f)});
}

TEST(GradCheck, ReductionsAndNormalization) {
    expect_passes([](const std::vector<Tensor>& in) { return project(sum_axis(in[0], 1), 19); }, {uniform_in({2, 3, 4}, 20)});
    expect_passes([](const std::vector<Tensor>& in) { return project(max_axis(in[0], 1), 21); }, {uniform_in({2, 5, 3}, 22)});
    expect_passes([](const std::vector<Tensor>& in) { return project(softmax(in[0]), 23); }, {uniform_in({3, 5}, 24)});
    expect_passes([](const std::vector<Tensor>& in) { return project(layer_norm(in[0]), 25); }, {uniform_in({3, 6}, 26)});
    expect_passes([](const std::vector<Tensor>& in) { return mean(square(in[0])); }, {uniform_in({7}, 27)});
}

TEST(GradCheck, ShapeOps) {
    expect_passes([](const std::vector<Tensor>& in) { return project(permute(in[0], {2, 0, 1}), 28); }, {uniform_in({2, 3, 4}, 29)});
    expect_passes([](const std::vector<Tensor>& in) { return project(concat({in[0], in[1]}, 1), 30); },
                  {uniform_in({2, 3, 2}, 31), uniform_in({2, 2, 2}, 32)});
    expect_passes([](const std::vector<Tensor>& in) { return project(slice(in[0], 1, 1, 2), 33); }, {uniform_in({2, 4, 3}, 34)});
    expect_passes([](const std::vector<Tensor>& in) { return project(upsample2x(in[0]), 35); }, {uniform_in({1, 2, 3, 3}, 36)});
}

TEST(GradCheck, Matmul) {
    expect_passes([](const std::vector<Tensor>& in) { return project(matmul(in[0], in[1]), 37); },
                  {uniform_in({2, 1, 3, 4}, 38), uniform_in({3, 4, 5}, 39)});
}

TEST(GradCheck, Conv2d) {
    for (std::size_t stride : {1u, 2u}) {
        SCOPED_TRACE(stride);
        expect_passes(
            [stride](const std::vector<Tensor>& in) { return project(conv2d(in[0], in[1], {stride, 1}), 40); },
            {uniform_in({2, 2, 5, 5}, 41), uniform_in({3, 2, 3, 3}, 42)});
    }
}

TEST(GradCheck, Attention) {
    expect_passes([](const std::vector<Tensor>& in) { return project(softmax_attention(in[0], in[1], in[2], 2), 43); },
                  {uniform_in({1, 3, 4}, 44), uniform_in({1, 5, 4}, 45), uniform_in({1, 5, 4}, 46)});
    expect_passes([](const std::vector<Tensor>& in) { return project(linear_attention(in[0], in[1], in[2], 2), 47); },
                  {uniform_in({1, 3, 4}, 48), uniform_in({1, 5, 4}, 49), uniform_in({1, 5, 4}, 50)});
}

TEST(GradCheck, CompositeMlpLoss) {
    Rng rng(51);
    Mlp mlp({3, 16, 16, 1}, rng);
    auto x = uniform_in({8, 3}, 52);
    std::vector<Tensor> params;
    ParamList pl;
    mlp.collect(pl, "mlp");
    for (const auto& p : pl) params.push_back(p.tensor);
    params.push_back(x);
    auto f = [&](const std::vector<Tensor>& in) {
        Mlp m = mlp;
        for (std::size_t i = 0; i < m.layers.size(); ++i) {
            m.layers[i].weight = in[2 * i];
            m.layers[i].bias = in[2 * i + 1];
        }
        return mean(square(m(in.back())));
    };
    expect_passes(f, params);
}

TEST(ParameterGradCheck, SkipsStencilsThatCrossAKink) {
    auto w = make_param(Tensor({3}, std::vector<float>{1e-4f, 0.5f, -0.3f}));
    ParamList pl;
    pl.add("w", w);
    const auto loss = [&] { return sum(abs(w)); };
    const std::vector<std::pair<std::size_t, std::size_t>> coords{{0, 0}, {0, 1}, {0, 2}};
    // The stencil around 1e-4 averages slopes -1 and +1.
    EXPECT_GT(parameter_grad_check(loss, pl, coords).max_rel_error, 0.5);
    const auto r = parameter_grad_check(loss, pl, coords, {.step = 1e-3f, .floor = 1.0, .subset = std::nullopt, .skip_kinks = true, .coordinates = 0});
    EXPECT_EQ(r.skipped, 1u);
    EXPECT_EQ(r.coordinates, 2u);
    EXPECT_LE(r.max_rel_error, kOpTol);
}

TEST(ParameterGradCheck, FlagsSmallBackwardBugAgainstWholeGradient) {
    Rng rng(61);
    Mlp mlp({3, 16, 1}, rng);
    ParamList pl;
    mlp.collect(pl, "mlp");
    const auto x = uniform_in({8, 3}, 62);
    const auto clean = [&] { return mean(square(mlp(x))); };
    std::vector<std::pair<std::size_t, std::size_t>> coords;
    for (std::size_t i = 0; i < 6; ++i) coords.emplace_back(2, i);  // second-layer weights
    EXPECT_LE(parameter_grad_check(clean, pl, coords).max_rel_error, 1e-2);
    // Shift the gradient of the probed tensor by 3% of the largest gradient entry.
    pl.zero_grad();
    clean().backward();
    float g_max = 0.0f;
    for (const auto& p : pl)
        for (float g : *p.tensor.grad()) g_max = std::max(g_max, std::fabs(g));
    pl.zero_grad();
    const Tensor w2 = pl[2].tensor;
    const auto buggy = [&] { return clean() + scale(sum(w2 - w2.detach()), 0.03f * g_max); };
    EXPECT_GT(parameter_grad_check(buggy, pl, coords).max_rel_error, 1e-2);
}
