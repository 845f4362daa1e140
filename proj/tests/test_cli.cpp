#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>

#include "lam3d/commands.hpp"
#include "lam3d/pipeline.hpp"

using namespace lam3d;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out, err;
};

Result cli(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

std::string smoke_config() { return std::string(LAM3D_CONFIG_DIR) + "/smoke.ini"; }

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("lam3d_test_cli_" + name);
    fs::remove_all(p);
    return p;
}

std::string read_file(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// Relative path -> bytes for every regular file under dir.
std::map<std::string, std::string> snapshot(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = read_file(e.path());
    return out;
}

int run_binary(const std::string& args) {
    const int status = std::system((std::string(LAM3D_CLI_PATH) + " " + args + " >/dev/null 2>&1").c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

} // namespace

TEST(Cli, UsageErrorsExitOne) {
    EXPECT_EQ(cli({}).code, 1);
    EXPECT_EQ(cli({"no-such-verb"}).code, 1);
    EXPECT_EQ(cli({"eval", "--bogus"}).code, 1);
    EXPECT_EQ(cli({"gen-data"}).code, 1);  // --out missing
    EXPECT_EQ(cli({"eval", "--shape", "sphere", "--format", "xml"}).code, 1);
    EXPECT_EQ(cli({"--help"}).code, 0);
}

TEST(Cli, ConfigAndIoErrors) {
    const auto bad = scratch("bad.ini");
    {
        std::ofstream os(bad);
        os << "[compressor]\nlatent_resolution = 5\n";
    }
    const auto r = cli({"gen-data", "--config", bad.string(), "--out", scratch("unused").string()});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("latent_resolution = resolution/4"), std::string::npos);
    EXPECT_EQ(cli({"gen-data", "--config", "/nonexistent/x.ini", "--out", "/tmp/x"}).code, 3);
    EXPECT_EQ(cli({"train-align", "--config", smoke_config(), "--ckpt", scratch("nockpt").string()}).code, 3);
    EXPECT_EQ(cli({"eval", "--shape", "no_such_shape", "--mesh", "/tmp/none.obj"}).code, 1);
    fs::remove(bad);
}

TEST(Cli, BinaryExitCodes) {
    EXPECT_EQ(run_binary(""), 1);
    EXPECT_EQ(run_binary("gen-data --config /nonexistent/x.ini --out /tmp/x"), 3);
    EXPECT_EQ(run_binary("selfcheck"), 0);
    EXPECT_EQ(run_binary("selfcheck --inject-grad-bug matmul"), 2);
}

TEST(Cli, GenDataIsReproducible) {
    const auto a = scratch("data_a"), b = scratch("data_b");
    ASSERT_EQ(cli({"gen-data", "--out", a.string()}).code, 0);
    ASSERT_EQ(cli({"gen-data", "--out", b.string()}).code, 0);
    EXPECT_EQ(snapshot(a), snapshot(b));
    const auto records = load_dataset(a);
    ASSERT_EQ(records.size(), 8u);
    EXPECT_EQ(manifest_get(read_manifest(a / "manifest.txt"), "count"), "8");
    for (const auto& r : records) {
        if (r.name != "slab") continue;
        EXPECT_EQ(r.best_view, select_best_view(r.spec, CameraRig{}));
    }
    const auto c = scratch("data_c");
    ASSERT_EQ(cli({"gen-data", "--out", c.string(), "--seed", "5"}).code, 0);
    EXPECT_NE(read_file(a / "sphere.points.bin"), read_file(c / "sphere.points.bin"));
    for (const auto& d : {a, b, c}) fs::remove_all(d);
}

TEST(Cli, SelfcheckPassesAndCatchesInjectedBug) {
    const auto ok = cli({"selfcheck"});
    EXPECT_EQ(ok.code, 0) << ok.out;
    EXPECT_NE(ok.out.find("selfcheck passed"), std::string::npos);
    EXPECT_EQ(ok.out.find("FAIL"), std::string::npos);
    const auto bad = cli({"selfcheck", "--inject-grad-bug", "conv2d"});
    EXPECT_EQ(bad.code, 2);
    EXPECT_NE(bad.out.find("FAIL grad:conv2d"), std::string::npos);
}

TEST(Cli, EvalOfGroundTruthMesh) {
    const auto shape = shape_corpus()[0];
    const auto obj = scratch("gt.obj");
    save_obj(obj.string(), marching_cubes(sample_grid(shape.spec, 128)));
    const auto r = cli({"eval", "--shape", shape.name, "--mesh", obj.string(), "--format", "json"});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto j = nlohmann::json::parse(r.out);
    EXPECT_GE(j["volume_iou"].get<double>(), 0.98);
    // Two independent 2048-point samples of the same r = 0.55 sphere: a point
    // misses tau with probability exp(-N tau^2 / (4 r^2)) ~ 1.5%.
    const double miss = std::exp(-2048.0 * 0.05 * 0.05 / (4.0 * 0.55 * 0.55));
    EXPECT_NEAR(j["f_score"].get<double>(), 100.0 * (1.0 - miss), 1.0);
    EXPECT_EQ(j["tau"].get<double>(), 0.05);
    EXPECT_EQ(j["grid"].get<std::size_t>(), 128u);
    EXPECT_EQ(j["samples"].get<std::size_t>(), 2048u);
    EXPECT_EQ(cli({"eval", "--shape", shape.name, "--mesh", obj.string(), "--format", "json"}).out, r.out);
    const auto kv = cli({"eval", "--shape", shape.name, "--mesh", obj.string(), "--grid", "64"});
    EXPECT_NE(kv.out.find("grid=64"), std::string::npos);
    fs::remove(obj);
}

TEST(Cli, EvalOfEmptyMeshIsNumericalFailure) {
    const auto obj = scratch("empty.obj");
    { std::ofstream os(obj); }
    EXPECT_EQ(cli({"eval", "--shape", "sphere", "--mesh", obj.string()}).code, 2);
    fs::remove(obj);
}

// Every verb on the tiny configuration, twice, byte for byte.
TEST(Cli, SmokePipelineIsDeterministic) {
    const std::string cfg = smoke_config();
    std::vector<std::map<std::string, std::string>> runs;
    std::vector<std::string> meshes, reports;
    for (int rep = 0; rep < 2; ++rep) {
        const auto root = scratch("pipe" + std::to_string(rep));
        const auto data = root / "data", ckpt = root / "ckpt";
        auto ok = [](const Result& r) { return r.code == 0 ? ::testing::AssertionSuccess() : ::testing::AssertionFailure() << r.err; };
        ASSERT_TRUE(ok(cli({"gen-data", "--config", cfg, "--out", data.string()})));
        ASSERT_TRUE(ok(cli({"train-compress", "--config", cfg, "--data", data.string(), "--ckpt", ckpt.string()})));
        ASSERT_TRUE(ok(cli({"encode-latents", "--config", cfg, "--data", data.string(), "--ckpt", ckpt.string()})));
        const auto first = snapshot(ckpt / "latents");
        ASSERT_TRUE(ok(cli({"encode-latents", "--config", cfg, "--data", data.string(), "--ckpt", ckpt.string()})));
        EXPECT_EQ(snapshot(ckpt / "latents"), first);
        ASSERT_TRUE(ok(cli({"train-align", "--config", cfg, "--ckpt", ckpt.string()})));
        const auto obj = root / "out.obj";
        const auto inf = cli({"infer", "--config", cfg, "--ckpt", ckpt.string(), "--shape", "sphere", "--out", obj.string()});
        ASSERT_TRUE(ok(inf));
        EXPECT_NE(inf.err.find("timing condition="), std::string::npos);
        const auto ev = cli({"eval", "--config", cfg, "--ckpt", ckpt.string(), "--data", data.string(), "--shape", "sphere"});
        ASSERT_TRUE(ok(ev));
        const auto mesh = load_obj(obj.string());
        if (!mesh.empty()) {
            EXPECT_TRUE(is_watertight(mesh));
        }
        runs.push_back(snapshot(root));
        meshes.push_back(read_file(obj));
        reports.push_back(ev.out);
    }
    EXPECT_EQ(runs[0].size(), runs[1].size());
    for (const auto& [path, bytes] : runs[0]) EXPECT_EQ(runs[1][path], bytes) << path;
    EXPECT_EQ(meshes[0], meshes[1]);
    EXPECT_EQ(reports[0], reports[1]);
    for (int rep = 0; rep < 2; ++rep) fs::remove_all(scratch("pipe" + std::to_string(rep)));
}

TEST(Cli, TrainCompressResumesFromCheckpoint) {
    const std::string cfg = smoke_config();
    const auto root = scratch("resume");
    const auto data = root / "data";
    ASSERT_EQ(cli({"gen-data", "--config", cfg, "--out", data.string()}).code, 0);
    ASSERT_EQ(cli({"train-compress", "--config", cfg, "--data", data.string(), "--ckpt", (root / "a").string()}).code, 0);
    // A second call finds the run complete and leaves the weights alone.
    const auto before = read_file(root / "a" / "compressor" / "params.bin");
    const auto again = cli({"train-compress", "--config", cfg, "--data", data.string(), "--ckpt", (root / "a").string()});
    EXPECT_EQ(again.code, 0);
    EXPECT_NE(again.err.find("trained 0 steps"), std::string::npos);
    EXPECT_EQ(read_file(root / "a" / "compressor" / "params.bin"), before);
    const auto trace = read_file(root / "a" / "compressor" / "trace.csv");
    EXPECT_EQ(std::count(trace.begin(), trace.end(), '\n'), 6);
    fs::remove_all(root);
}

TEST(Cli, InferNeedsExactlyOneView) {
    EXPECT_EQ(cli({"infer", "--config", smoke_config(), "--ckpt", "/tmp", "--out", "/tmp/x.obj"}).code, 1);
}
