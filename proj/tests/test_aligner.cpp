#include <gtest/gtest.h>

#include <cmath>

#include "lam3d/aligner.hpp"
#include "lam3d/condition.hpp"
#include "lam3d/render.hpp"

using namespace lam3d;

namespace {

constexpr std::size_t kChannels = 4, kRes = 8;

Shape latent_shape() { return {3, kChannels, kRes, kRes}; }

Tensor corpus_depth(std::size_t i) {
    const auto ns = shape_corpus().at(i);
    return render_depth(ns.spec, select_best_view(ns.spec));
}

// Random per-shape targets of latent-like scale.
Tensor synthetic_latent(std::uint64_t seed) {
    Rng rng(seed);
    return Tensor::randn(latent_shape(), rng, 0.5f);
}

std::vector<AlignSample> synthetic_data(std::size_t count) {
    const ConditionEncoder enc;
    std::vector<AlignSample> out;
    for (std::size_t i = 0; i < count; ++i) out.push_back({synthetic_latent(100 + i), enc(corpus_depth(i))});
    return out;
}

DenoiserSet make_set(DenoiserMode mode, std::uint64_t seed) {
    DenoiserConfig cfg;
    cfg.mode = mode;
    cfg.width = 16;
    return DenoiserSet(cfg, kChannels, 128, seed);
}

Tensor plane_of(const Tensor& z, std::size_t p) { return select(z, 0, p); }

bool bit_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a.at(i) != b.at(i)) return false;
    return true;
}

Tensor perturb_plane(const Tensor& z, std::size_t p, float amount) {
    auto v = std::vector<float>(z.data().begin(), z.data().end());
    const std::size_t per = z.size() / 3;
    for (std::size_t i = p * per; i < (p + 1) * per; ++i) v[i] += amount;
    return Tensor(z.shape(), std::move(v));
}

} // namespace

TEST(ConditionEncoderTest, DefaultTokenShape) {
    const ConditionEncoder enc;
    const auto tokens = enc(corpus_depth(0));
    EXPECT_EQ(tokens.shape(), (Shape{65, 128}));
    EXPECT_EQ(enc.token_count(64), 65u);
}

TEST(ConditionEncoderTest, FrozenAndDeterministic) {
    const ConditionEncoder a, b;
    const auto d = corpus_depth(2);
    EXPECT_TRUE(bit_equal(a(d), b(d)));
    EXPECT_EQ(a.state_hash(), b.state_hash());
    ConditionOptions other;
    other.seed = 99;
    EXPECT_NE(ConditionEncoder(other).state_hash(), a.state_hash());
}

TEST(ConditionEncoderTest, NoCollisionsOnCorpus) {
    const ConditionEncoder enc;
    std::vector<Tensor> tokens;
    for (std::size_t i = 0; i < shape_corpus().size(); ++i) tokens.push_back(enc(corpus_depth(i)));
    for (std::size_t i = 0; i < tokens.size(); ++i)
        for (std::size_t j = i + 1; j < tokens.size(); ++j) {
            double d2 = 0;
            for (std::size_t k = 0; k < tokens[i].size(); ++k) d2 += std::pow(tokens[i].at(k) - tokens[j].at(k), 2);
            EXPECT_GT(d2, 0.0) << shape_corpus()[i].name << " vs " << shape_corpus()[j].name;
        }
}

TEST(ConditionEncoderTest, RejectsIndivisibleResolution) {
    const ConditionEncoder enc;
    EXPECT_THROW(enc(Tensor::zeros({60, 60})), ShapeError);
    EXPECT_THROW(enc(Tensor::zeros({64, 32})), ShapeError);
}

TEST(TimestepEmbedding, ShapeAndZeroStep) {
    const auto e = timestep_embedding({0, 5});
    EXPECT_EQ(e.shape(), (Shape{2, kTimeEmbedding}));
    for (std::size_t i = 0; i < kTimeEmbedding / 2; ++i) {
        EXPECT_EQ(e.at(i), 0.0f);
        EXPECT_EQ(e.at(kTimeEmbedding / 2 + i), 1.0f);
    }
}

TEST(Denoiser, PreservesShapeInEveryMode) {
    const auto tokens = ConditionEncoder()(corpus_depth(1));
    Rng rng(1);
    const auto zt = Tensor::randn(latent_shape(), rng);
    for (auto mode : {DenoiserMode::parallel, DenoiserMode::single, DenoiserMode::deterministic}) {
        NoGradGuard ng;
        const auto set = make_set(mode, 2);
        EXPECT_EQ(set.denoise(zt, tokens, 10).shape(), latent_shape()) << mode_name(mode);
    }
}

TEST(Denoiser, RejectsWrongLayout) {
    const auto set = make_set(DenoiserMode::parallel, 3);
    const auto tokens = ConditionEncoder()(corpus_depth(1));
    EXPECT_THROW(set.denoise(Tensor::zeros({2, kChannels, kRes, kRes}), tokens, 1), ShapeError);
    EXPECT_THROW(set.denoise(Tensor::zeros({3, kChannels + 1, kRes, kRes}), tokens, 1), ShapeError);
}

// Perturbing the XZ input must leave the XY and YZ predictions untouched.
TEST(Denoiser, ParallelPlanesAreIndependent) {
    const auto tokens = ConditionEncoder()(corpus_depth(3));
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        NoGradGuard ng;
        const auto set = make_set(DenoiserMode::parallel, seed);
        Rng rng(50 + seed);
        const auto zt = Tensor::randn(latent_shape(), rng);
        const auto base = set.denoise(zt, tokens, 1 + seed * 100);
        const auto moved = set.denoise(perturb_plane(zt, 1, 0.5f), tokens, 1 + seed * 100);
        EXPECT_TRUE(bit_equal(plane_of(base, 0), plane_of(moved, 0))) << "seed " << seed;
        EXPECT_TRUE(bit_equal(plane_of(base, 2), plane_of(moved, 2))) << "seed " << seed;
        EXPECT_FALSE(bit_equal(plane_of(base, 1), plane_of(moved, 1))) << "seed " << seed;
    }
}

TEST(Denoiser, SingleModeCouplesPlanes) {
    const auto tokens = ConditionEncoder()(corpus_depth(3));
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        NoGradGuard ng;
        const auto set = make_set(DenoiserMode::single, seed);
        Rng rng(60 + seed);
        const auto zt = Tensor::randn(latent_shape(), rng);
        const auto base = set.denoise(zt, tokens, 7);
        const auto moved = set.denoise(perturb_plane(zt, 1, 0.5f), tokens, 7);
        EXPECT_TRUE(!bit_equal(plane_of(base, 0), plane_of(moved, 0)) || !bit_equal(plane_of(base, 2), plane_of(moved, 2)));
    }
}

TEST(Denoiser, SingleModeParameterCountMatchesParallel) {
    for (std::size_t width : {16u, 32u}) {
        DenoiserConfig cfg;
        cfg.width = width;
        cfg.mode = DenoiserMode::parallel;
        const double parallel = static_cast<double>(DenoiserSet(cfg, kChannels, 128, 1).parameters().count());
        cfg.mode = DenoiserMode::single;
        const double single = static_cast<double>(DenoiserSet(cfg, kChannels, 128, 1).parameters().count());
        EXPECT_LE(std::abs(single - parallel) / parallel, 0.10) << "width " << width;
    }
}

TEST(Denoiser, ParallelUnetsShareArchitectureNotParameters) {
    const auto set = make_set(DenoiserMode::parallel, 4);
    const auto p = set.parameters();
    ASSERT_EQ(p.size() % 3, 0u);
    const std::size_t per = p.size() / 3;
    for (std::size_t i = 0; i < per; ++i) {
        EXPECT_EQ(p[i].tensor.shape(), p[per + i].tensor.shape());
        EXPECT_EQ(p[i].tensor.shape(), p[2 * per + i].tensor.shape());
    }
    EXPECT_NE(tensor_hash(p[0].tensor), tensor_hash(p[per].tensor));
}

TEST(Sampling, RunsExactlyTDenoiserCalls) {
    auto set = make_set(DenoiserMode::parallel, 5);
    const auto tokens = ConditionEncoder()(corpus_depth(0));
    const auto sched = NoiseSchedule::linear(25, 1e-4, 0.02);
    Rng rng(6);
    set.reset_calls();
    sample_latent(set, tokens, latent_shape(), sched, rng);
    EXPECT_EQ(set.calls(), 25u);
}

TEST(Sampling, FixedSeedIsReproducible) {
    const auto set = make_set(DenoiserMode::parallel, 7);
    const auto tokens = ConditionEncoder()(corpus_depth(0));
    const auto sched = NoiseSchedule::linear(20, 1e-4, 0.02);
    Rng r1(8), r2(8), r3(9);
    const auto a = sample_latent(set, tokens, latent_shape(), sched, r1);
    const auto b = sample_latent(set, tokens, latent_shape(), sched, r2);
    const auto c = sample_latent(set, tokens, latent_shape(), sched, r3);
    EXPECT_TRUE(bit_equal(a, b));
    EXPECT_FALSE(bit_equal(a, c));
}

TEST(Sampling, DeterministicModeIsOneCall) {
    const auto set = make_set(DenoiserMode::deterministic, 10);
    const auto tokens = ConditionEncoder()(corpus_depth(0));
    Rng rng(11);
    const auto z = sample_latent(set, tokens, latent_shape(), NoiseSchedule::linear(5, 1e-4, 0.02), rng);
    EXPECT_EQ(z.shape(), latent_shape());
    // Deterministic mode is a single call at t = 0 from a zero input.
    NoGradGuard ng;
    EXPECT_TRUE(bit_equal(z, set.denoise(Tensor::zeros(latent_shape()), tokens, 0)));
}

TEST(AlignTraining, ZeroLearningRateTraceIsReproducible) {
    const auto data = synthetic_data(2);
    const auto sched = NoiseSchedule::linear(50, 1e-4, 0.02);
    auto s1 = make_set(DenoiserMode::parallel, 12), s2 = make_set(DenoiserMode::parallel, 12);
    const auto before = tensor_hash(s1.parameters()[0].tensor);
    AlignerTrainer t1(s1, data, sched, {5, 2, 0.0f, 13}), t2(s2, data, sched, {5, 2, 0.0f, 13});
    const auto a = t1.run(5), b = t2.run(5);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(a[i].loss, b[i].loss);
    EXPECT_EQ(tensor_hash(s1.parameters()[0].tensor), before);
}

TEST(AlignTraining, ConditioningEncoderUntouched) {
    const ConditionEncoder enc;
    const auto hash = enc.state_hash();
    auto set = make_set(DenoiserMode::parallel, 14);
    AlignerTrainer t(set, synthetic_data(2), NoiseSchedule::linear(50, 1e-4, 0.02), {10, 2, 1e-3f, 15});
    t.run(10);
    EXPECT_EQ(enc.state_hash(), hash);
    EXPECT_EQ(ConditionEncoder().state_hash(), hash);
}

TEST(AlignTraining, DeterministicModeFitsOneShape) {
    auto data = synthetic_data(1);
    auto set = make_set(DenoiserMode::deterministic, 16);
    AlignerTrainer t(set, data, NoiseSchedule::linear(50, 1e-4, 0.02), {600, 1, 2e-3f, 17});
    t.run(600);
    NoGradGuard ng;
    const auto pred = set.denoise(Tensor::zeros(latent_shape()), data[0].tokens, 0);
    double mse = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) mse += std::pow(pred.at(i) - data[0].latent.at(i), 2);
    EXPECT_LE(mse / static_cast<double>(pred.size()), 1e-3);
}

TEST(AlignTraining, FourShapeOverfitReducesLoss) {
    auto set = make_set(DenoiserMode::parallel, 18);
    AlignerTrainer t(set, synthetic_data(4), NoiseSchedule::linear(100, 1e-4, 0.02), {2000, 4, 1e-3f, 19});
    const auto trace = t.run(2000);
    auto avg = [&](std::size_t from) {
        double s = 0;
        for (std::size_t i = from; i < from + 50; ++i) s += trace[i].loss;
        return s / 50;
    };
    EXPECT_LE(avg(trace.size() - 50), 0.1 * avg(0));
}

TEST(AlignTraining, EmptyDatasetRejected) {
    auto set = make_set(DenoiserMode::parallel, 20);
    EXPECT_THROW(AlignerTrainer(set, {}, NoiseSchedule::linear(10, 1e-4, 0.02), {}), ConfigError);
}
