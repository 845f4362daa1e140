#include <gtest/gtest.h>

#include <string>

#include "lam3d/config.hpp"

using namespace lam3d;

namespace {

std::string config_path(const std::string& name) { return std::string(LAM3D_CONFIG_DIR) + "/" + name; }

std::string error_of(const std::string& text) {
    try {
        parse_config_text(text);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

} // namespace

TEST(Config, DefaultsRoundTrip) {
    const RunConfig c;
    const auto back = parse_config_text(serialize_config(c));
    EXPECT_TRUE(same_values(c, back));
    EXPECT_EQ(serialize_config(back), serialize_config(c));
}

TEST(Config, EditedValuesRoundTrip) {
    RunConfig c;
    c.seed = 987654321;
    c.train.lr = 3.3e-4f;
    c.compressor.weights.kl = 2.5e-5f;
    c.compressor.weights.delta = 0.0123f;
    c.diffusion.beta_end = 0.0175;
    c.denoiser.mode = DenoiserMode::single;
    c.compressor.use_refiner = false;
    c.eval.squared_chamfer = false;
    const auto back = parse_config_text(serialize_config(c));
    EXPECT_TRUE(same_values(c, back));
    EXPECT_EQ(back.seed, c.seed);
    EXPECT_EQ(back.train.lr, c.train.lr);
    EXPECT_EQ(back.compressor.weights.delta, c.compressor.weights.delta);
    EXPECT_EQ(back.diffusion.beta_end, c.diffusion.beta_end);
    EXPECT_EQ(back.denoiser.mode, DenoiserMode::single);
    EXPECT_FALSE(back.compressor.use_refiner);
}

TEST(Config, MissingKeysKeepDefaults) {
    const auto c = parse_config_text("[run]\nseed = 5\n");
    EXPECT_EQ(c.seed, 5u);
    RunConfig d;
    d.seed = 5;
    EXPECT_TRUE(same_values(c, d));
}

TEST(Config, DeskFileEqualsBuiltInDefaults) {
    EXPECT_TRUE(same_values(load_config(config_path("desk.ini")), RunConfig{}));
}

TEST(Config, FullScaleFileCarriesFullConstants) {
    const auto c = load_config(config_path("full.ini"));
    EXPECT_EQ(c.compressor.points, 8192u);
    EXPECT_EQ(c.compressor.centers, 512u);
    EXPECT_EQ(c.compressor.resolution, 128u);
    EXPECT_EQ(c.compressor.latent_channels, 2u);
    EXPECT_EQ(c.compressor.latent_resolution, 32u);
    EXPECT_EQ(c.compressor.latent_size(), 6144u);
    EXPECT_EQ(c.camera.views, 48u);
    EXPECT_EQ(ConditionEncoder(c.condition).token_count(c.camera.resolution), 1025u);
    EXPECT_EQ(c.condition.width, 768u);
    EXPECT_DOUBLE_EQ(c.eval.tau, 0.05);
    EXPECT_EQ(c.eval.grid, 128u);
    EXPECT_EQ(c.eval.samples, 2048u);
}

TEST(Config, SmokeFileLoads) {
    const auto c = load_config(config_path("smoke.ini"));
    EXPECT_LE(c.train.steps, 20u);
}

TEST(Config, EvalDefaultsEchoProtocol) {
    const RunConfig c;
    EXPECT_DOUBLE_EQ(c.eval.tau, 0.05);
    EXPECT_EQ(c.eval.grid, 128u);
    EXPECT_EQ(c.eval.samples, 2048u);
    EXPECT_TRUE(c.eval.squared_chamfer);
}

TEST(Config, ConstraintViolationsNameTheConstraint) {
    EXPECT_NE(error_of("[compressor]\nlatent_resolution = 4\n").find("latent_resolution = resolution/4"), std::string::npos);
    EXPECT_NE(error_of("[compressor]\nlatent_mode = vector\n").find("latent_mode=vector requires lsdf=false"),
              std::string::npos);
    EXPECT_NE(error_of("[compressor]\nembed_dim = 30\n").find("embed_dim divisible by center_heads"), std::string::npos);
    EXPECT_NE(error_of("[diffusion]\nbeta_start = 0.5\nbeta_end = 0.1\n").find("beta_start < beta_end"), std::string::npos);
    EXPECT_NE(error_of("[camera]\nresolution = 60\n").find("camera.resolution divisible by condition.patch"),
              std::string::npos);
    EXPECT_NE(error_of("[align]\nshapes = 9\n").find("align.shapes <= data.shapes"), std::string::npos);
    EXPECT_NE(error_of("[loss]\nlambda_normal = -1\n").find("loss weights non-negative"), std::string::npos);
    // The vector ablation is valid once lsdf is off.
    EXPECT_EQ(error_of("[compressor]\nlatent_mode = vector\n[loss]\nlsdf = false\n"), "");
}

TEST(Config, UnknownAndMalformedEntriesRejected) {
    EXPECT_NE(error_of("[compressor]\nwidth_typo = 3\n").find("unknown config key compressor.width_typo"), std::string::npos);
    EXPECT_NE(error_of("[nosuch]\nkey = 1\n").find("unknown config key"), std::string::npos);
    EXPECT_NE(error_of("[train_compress]\nsteps = many\n").find("bad value"), std::string::npos);
    EXPECT_NE(error_of("[align]\nclip = maybe\n").find("bad boolean"), std::string::npos);
    EXPECT_NE(error_of("[align]\nmode = triple\n").find("unknown denoiser mode"), std::string::npos);
    EXPECT_NE(error_of("[run\nseed = 1\n").find("config syntax"), std::string::npos);
}

TEST(Config, MissingFileIsIoError) { EXPECT_THROW(load_config("/nonexistent/lam3d.ini"), IoError); }

TEST(Config, LsdfSwitchZeroesLatentWeights) {
    RunConfig c;
    c.lsdf = false;
    const auto e = c.effective_compressor();
    EXPECT_EQ(e.weights.latent_surface, 0.0f);
    EXPECT_EQ(e.weights.latent_volume, 0.0f);
    EXPECT_EQ(e.weights.surface, c.compressor.weights.surface);
}
