#pragma once

// Run configuration: sectioned key=value text (INI). Every field is listed
// once in visit_fields, which drives parsing, serialisation and defaults.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "lam3d/aligner.hpp"
#include "lam3d/compressor.hpp"
#include "lam3d/condition.hpp"
#include "lam3d/metrics.hpp"
#include "lam3d/render.hpp"

namespace lam3d {

struct DataConfig {
    std::size_t shapes = 8;
    std::size_t surface_samples = 512;
    std::size_t volume_samples = 512;
};

struct TrainCompressConfig {
    std::size_t steps = 3000;
    float lr = 1e-3f;
    float lr_final = 1e-4f;
    std::size_t checkpoint_every = 4;  // epochs
};

struct DiffusionConfig {
    std::size_t steps = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
};

struct AlignConfig {
    std::size_t shapes = 4;
    std::size_t steps = 2000;
    std::size_t batch = 4;
    float lr = 1e-3f;
    bool clip = true;
};

struct RunConfig {
    std::uint64_t seed = 0;
    DataConfig data;
    CameraRig camera;
    CompressorConfig compressor;
    bool lsdf = true;
    TrainCompressConfig train;
    ConditionOptions condition;
    DiffusionConfig diffusion;
    DenoiserConfig denoiser;
    AlignConfig align;
    EvalOptions eval;

    // Compressor settings with the lsdf switch applied.
    CompressorConfig effective_compressor() const {
        auto c = compressor;
        if (!lsdf) c.weights.latent_surface = c.weights.latent_volume = 0.0f;
        return c;
    }
    NoiseSchedule schedule() const {
        return NoiseSchedule::linear(diffusion.steps, diffusion.beta_start, diffusion.beta_end);
    }
};

namespace detail {

inline std::string to_text(std::size_t v) { return std::to_string(v); }
inline std::string to_text(bool v) { return v ? "true" : "false"; }
// Shortest text that parses back to the same value.
template <class T>
std::string shortest(T v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}
inline std::string to_text(double v) { return shortest(v); }
inline std::string to_text(float v) { return shortest(v); }
inline std::string to_text(LatentMode m) { return m == LatentMode::vector ? "vector" : "triplane"; }
inline std::string to_text(DenoiserMode m) { return mode_name(m); }

template <class T>
T parse_number(const std::string& key, const std::string& s) {
    T v{};
    const char* end = s.data() + s.size();
    auto [p, ec] = std::from_chars(s.data(), end, v);
    if (ec != std::errc{} || p != end) throw ConfigError("bad value '" + s + "' for " + key);
    return v;
}

inline void from_text(const std::string& key, const std::string& s, std::size_t& v) { v = parse_number<std::size_t>(key, s); }
inline void from_text(const std::string& key, const std::string& s, double& v) { v = parse_number<double>(key, s); }
inline void from_text(const std::string& key, const std::string& s, float& v) { v = parse_number<float>(key, s); }
inline void from_text(const std::string& key, const std::string& s, bool& v) {
    if (s == "true" || s == "1") v = true;
    else if (s == "false" || s == "0") v = false;
    else throw ConfigError("bad boolean '" + s + "' for " + key);
}
inline void from_text(const std::string& key, const std::string& s, LatentMode& v) {
    if (s == "triplane") v = LatentMode::triplane;
    else if (s == "vector") v = LatentMode::vector;
    else throw ConfigError("bad latent mode '" + s + "' for " + key);
}
inline void from_text(const std::string&, const std::string& s, DenoiserMode& v) { v = mode_from_name(s); }

} // namespace detail

template <class C, class F>
void visit_fields(C& c, F&& f) {
    f("run", "seed", c.seed);
    f("data", "shapes", c.data.shapes);
    f("data", "points", c.compressor.points);
    f("data", "surface_samples", c.data.surface_samples);
    f("data", "volume_samples", c.data.volume_samples);
    f("camera", "views", c.camera.views);
    f("camera", "resolution", c.camera.resolution);
    f("camera", "radius", c.camera.radius);
    f("camera", "fov_deg", c.camera.fov_deg);
    auto& m = c.compressor;
    f("compressor", "centers", m.centers);
    f("compressor", "neighbors", m.neighbors);
    f("compressor", "embed_dim", m.embed_dim);
    f("compressor", "center_depth", m.center_depth);
    f("compressor", "center_heads", m.center_heads);
    f("compressor", "resolution", m.resolution);
    f("compressor", "latent_channels", m.latent_channels);
    f("compressor", "latent_resolution", m.latent_resolution);
    f("compressor", "plane_blocks", m.plane_blocks);
    f("compressor", "plane_width", m.plane_width);
    f("compressor", "plane_heads", m.plane_heads);
    f("compressor", "decoded_channels", m.decoded_channels);
    f("compressor", "refiner_width", m.refiner_width);
    f("compressor", "sdf_hidden", m.sdf_hidden);
    f("compressor", "refiner", m.use_refiner);
    f("compressor", "latent_mode", m.latent_mode);
    f("compressor", "logvar_init", m.logvar_init);
    f("loss", "lambda_surface", m.weights.surface);
    f("loss", "lambda_volume", m.weights.volume);
    f("loss", "lambda_normal", m.weights.normal);
    f("loss", "lambda_latent_surface", m.weights.latent_surface);
    f("loss", "lambda_latent_volume", m.weights.latent_volume);
    f("loss", "kl_weight", m.weights.kl);
    f("loss", "delta", m.weights.delta);
    f("loss", "lsdf", c.lsdf);
    f("train_compress", "steps", c.train.steps);
    f("train_compress", "lr", c.train.lr);
    f("train_compress", "lr_final", c.train.lr_final);
    f("train_compress", "checkpoint_every", c.train.checkpoint_every);
    f("condition", "patch", c.condition.patch);
    f("condition", "width", c.condition.width);
    f("condition", "seed", c.condition.seed);
    f("diffusion", "steps", c.diffusion.steps);
    f("diffusion", "beta_start", c.diffusion.beta_start);
    f("diffusion", "beta_end", c.diffusion.beta_end);
    f("align", "mode", c.denoiser.mode);
    f("align", "width", c.denoiser.width);
    f("align", "heads", c.denoiser.heads);
    f("align", "single_width", c.denoiser.single_width);
    f("align", "shapes", c.align.shapes);
    f("align", "steps", c.align.steps);
    f("align", "batch", c.align.batch);
    f("align", "lr", c.align.lr);
    f("align", "clip", c.align.clip);
    f("eval", "samples", c.eval.samples);
    f("eval", "tau", c.eval.tau);
    f("eval", "grid", c.eval.grid);
    f("eval", "squared_chamfer", c.eval.squared_chamfer);
}

inline void require(bool ok, const std::string& constraint) {
    if (!ok) throw ConfigError("constraint violated: " + constraint);
}

inline void validate(const RunConfig& c) {
    const auto& m = c.compressor;
    require(c.data.shapes >= 1 && c.data.shapes <= shape_corpus().size(), "1 <= data.shapes <= corpus size");
    require(m.centers >= 1 && m.centers <= m.points, "compressor.centers <= data.points");
    require(m.neighbors >= 1 && m.neighbors <= m.points, "compressor.neighbors <= data.points");
    require(m.embed_dim % m.center_heads == 0, "embed_dim divisible by center_heads");
    require(m.plane_width % m.plane_heads == 0, "plane_width divisible by plane_heads");
    require(m.resolution >= 8 && m.resolution % 4 == 0, "resolution is a multiple of 4 and >= 8");
    require(m.latent_resolution * 4 == m.resolution, "latent_resolution = resolution/4");
    require(m.latent_resolution % 2 == 0, "latent_resolution even (denoiser downsamples once)");
    require(m.latent_mode == LatentMode::triplane || !c.lsdf, "latent_mode=vector requires lsdf=false");
    require(c.data.surface_samples > 0 && c.data.volume_samples > 0, "sample counts positive");
    require(m.weights.kl >= 0 && m.weights.surface >= 0 && m.weights.volume >= 0 && m.weights.normal >= 0 &&
                m.weights.latent_surface >= 0 && m.weights.latent_volume >= 0 && m.weights.delta >= 0,
            "loss weights non-negative");
    require(c.train.steps >= 1 && c.train.checkpoint_every >= 1, "train_compress.steps and checkpoint_every >= 1");
    require(c.camera.views >= 1 && c.camera.resolution % c.condition.patch == 0,
            "camera.resolution divisible by condition.patch");
    require(c.diffusion.steps >= 1 && c.diffusion.beta_start > 0 && c.diffusion.beta_end < 1 &&
                (c.diffusion.steps == 1 || c.diffusion.beta_start < c.diffusion.beta_end),
            "0 < beta_start < beta_end < 1");
    require((2 * c.denoiser.width) % c.denoiser.heads == 0, "2*align.width divisible by align.heads");
    require(c.align.shapes >= 1 && c.align.shapes <= c.data.shapes, "align.shapes <= data.shapes");
    require(c.align.batch >= 1, "align.batch >= 1");
    require(c.eval.grid >= 2 && c.eval.samples >= 1 && c.eval.tau > 0, "eval grid >= 2, samples >= 1, tau > 0");
}

inline std::string serialize_config(const RunConfig& c) {
    std::ostringstream os;
    std::string section;
    visit_fields(c, [&](const char* sec, const char* key, const auto& value) {
        if (section != sec) {
            if (!section.empty()) os << '\n';
            section = sec;
            os << '[' << sec << "]\n";
        }
        os << key << " = " << detail::to_text(value) << '\n';
    });
    return os.str();
}

// Missing keys keep their defaults; unknown keys are rejected.
inline RunConfig parse_config(std::istream& is) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    try {
        pt::read_ini(is, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(std::string("config syntax: ") + e.what());
    }
    RunConfig c;
    std::set<std::string> known;
    visit_fields(c, [&](const char* sec, const char* key, auto& value) {
        const std::string path = std::string(sec) + "." + key;
        known.insert(path);
        if (auto v = tree.get_optional<std::string>(pt::ptree::path_type(path, '.'))) detail::from_text(path, *v, value);
    });
    for (const auto& [sec, body] : tree) {
        if (body.empty()) throw ConfigError("key outside a section: " + sec);
        for (const auto& [key, _] : body)
            if (!known.count(sec + "." + key)) throw ConfigError("unknown config key " + sec + "." + key);
    }
    validate(c);
    return c;
}

inline RunConfig parse_config_text(const std::string& text) {
    std::istringstream is(text);
    return parse_config(is);
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read config " + path);
    return parse_config(is);
}

inline bool same_values(const RunConfig& a, const RunConfig& b) { return serialize_config(a) == serialize_config(b); }

} // namespace lam3d
