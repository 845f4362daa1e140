#pragma once

// End-to-end stages shared by the command line and the acceptance suite:
// dataset generation, stage-1 training and evaluation, latent encoding,
// stage-2 training and single-view inference.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <optional>

#include "lam3d/aligner.hpp"
#include "lam3d/checkpoint.hpp"
#include "lam3d/compressor.hpp"
#include "lam3d/condition.hpp"
#include "lam3d/config.hpp"
#include "lam3d/marching_cubes.hpp"
#include "lam3d/metrics.hpp"
#include "lam3d/render.hpp"
#include "lam3d/tensor_io.hpp"

namespace lam3d {

namespace fs = std::filesystem;

// Stream ids under the run seed.
enum class Stream : std::uint64_t { data = 1, compressor_init, compressor_train, align_init, align_train, infer, eval };

inline std::uint64_t stream_seed(std::uint64_t seed, Stream s) { return Rng::derive(seed, static_cast<std::uint64_t>(s)).next(); }

// ---------------------------------------------------------------------------
// Dataset

struct ShapeRecord {
    std::string name;
    ShapeSpec spec;
    PointCloud cloud;
    Tensor views;  // [V, D, D]
    std::size_t best_view = 0;

    Tensor best_depth() const { return select(views, 0, best_view); }
};

inline ShapeRecord build_record(const NamedShape& ns, const RunConfig& c, std::size_t index) {
    ShapeRecord r{ns.name, ns.spec, {}, {}, 0};
    Rng rng = Rng::derive(stream_seed(c.seed, Stream::data), index);
    r.cloud = sample_point_cloud(ns.spec, c.compressor.points, rng);
    std::vector<Tensor> views;
    std::size_t best_area = 0;
    for (std::size_t v = 0; v < c.camera.views; ++v) {
        auto d = render_depth(ns.spec, v, c.camera);
        const std::size_t area = silhouette_area(d);
        if (v == 0 || area > best_area) {
            best_area = area;
            r.best_view = v;
        }
        views.push_back(reshape(d, {1, d.dim(0), d.dim(1)}));
    }
    r.views = concat(views, 0);
    return r;
}

inline std::vector<ShapeRecord> build_dataset(const RunConfig& c) {
    const auto corpus = shape_corpus();
    std::vector<ShapeRecord> out;
    for (std::size_t i = 0; i < c.data.shapes; ++i) out.push_back(build_record(corpus[i], c, i));
    return out;
}

inline void save_dataset(const fs::path& dir, const std::vector<ShapeRecord>& records) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string());
    Manifest m;
    m["count"] = std::to_string(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        const std::string key = "shape." + std::to_string(i);
        m[key] = r.name;
        m[key + ".best_view"] = std::to_string(r.best_view);
        shape_to_kv(r.spec, key + ".spec.", m);
        save_tensor(dir / (r.name + ".points.bin"), r.cloud.points);
        save_tensor(dir / (r.name + ".normals.bin"), r.cloud.normals);
        save_tensor(dir / (r.name + ".views.bin"), r.views);
    }
    write_manifest(dir / "manifest.txt", m);
}

inline std::vector<ShapeRecord> load_dataset(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw IoError("missing dataset " + dir.string());
    const auto m = read_manifest(dir / "manifest.txt");
    const std::size_t n = std::stoul(manifest_get(m, "count"));
    std::vector<ShapeRecord> out;
    for (std::size_t i = 0; i < n; ++i) {
        const std::string key = "shape." + std::to_string(i);
        ShapeRecord r;
        r.name = manifest_get(m, key);
        r.best_view = std::stoul(manifest_get(m, key + ".best_view"));
        r.spec = shape_from_kv(m, key + ".spec.");
        r.cloud.points = load_tensor(dir / (r.name + ".points.bin"));
        r.cloud.normals = load_tensor(dir / (r.name + ".normals.bin"));
        r.views = load_tensor(dir / (r.name + ".views.bin"));
        out.push_back(std::move(r));
    }
    return out;
}

inline std::vector<ShapeSample> training_shapes(const std::vector<ShapeRecord>& records, const CompressorConfig& c) {
    std::vector<ShapeSample> out;
    for (const auto& r : records) out.push_back({r.spec, prepare_point_input(r.cloud, c.centers, c.neighbors)});
    return out;
}

// ---------------------------------------------------------------------------
// Stage 1

inline CompressorTrainOptions compress_options(const RunConfig& c) {
    CompressorTrainOptions o;
    o.steps = c.train.steps;
    o.surface_samples = c.data.surface_samples;
    o.volume_samples = c.data.volume_samples;
    o.lr = c.train.lr;
    o.lr_final = c.train.lr_final;
    o.seed = stream_seed(c.seed, Stream::compressor_train);
    return o;
}

inline CompressorModel make_compressor(const RunConfig& c) {
    return CompressorModel(c.effective_compressor(), stream_seed(c.seed, Stream::compressor_init));
}

inline void write_trace_row(std::ostream& os, const TraceRow& r) {
    os.precision(9);
    os << r.step << ',' << r.sdf << ',' << r.normal << ',' << r.lsdf << ',' << r.kl << ',' << r.total << '\n';
}

struct Stage1Run {
    std::vector<TraceRow> trace;  // rows produced by this call
    std::size_t steps_done = 0;
};

// Trains to c.train.steps, checkpointing to `ckpt` every checkpoint_every
// epochs and resuming from it when present. Trace rows are appended to
// ckpt/trace.csv.
inline Stage1Run train_stage1(CompressorModel& model, const std::vector<ShapeRecord>& records, const RunConfig& c,
                              const std::optional<fs::path>& ckpt,
                              const std::function<void(const TraceRow&)>& on_step = {}) {
    CompressorTrainer trainer(model, training_shapes(records, model.config()), compress_options(c));
    auto params = model.parameters();
    if (ckpt && fs::exists(*ckpt / "manifest.txt")) {
        const auto meta = load_checkpoint(*ckpt, params, &trainer.optimizer());
        trainer.set_steps_done(std::stoul(manifest_get(meta, "step")));
        // Rows past the checkpoint came from an interrupted run and are redone.
        std::vector<std::string> kept;
        std::ifstream is(*ckpt / "trace.csv");
        for (std::string line; kept.size() < trainer.steps_done() && std::getline(is, line);) kept.push_back(line);
        is.close();
        std::ofstream os(*ckpt / "trace.csv", std::ios::trunc);
        for (const auto& line : kept) os << line << '\n';
    }
    std::optional<std::ofstream> trace_file;
    if (ckpt) {
        fs::create_directories(*ckpt);
        trace_file.emplace(*ckpt / "trace.csv", trainer.steps_done() == 0 ? std::ios::trunc : std::ios::app);
        if (!*trace_file) throw IoError("cannot write trace in " + ckpt->string());
    }
    const std::size_t every = c.train.checkpoint_every * records.size();
    auto save = [&] {
        if (!ckpt) return;
        trace_file->flush();
        save_checkpoint(*ckpt, params, &trainer.optimizer(),
                        {{"kind", "compressor"}, {"step", std::to_string(trainer.steps_done())},
                         {"seed", std::to_string(c.seed)}});
    };
    Stage1Run run;
    while (trainer.steps_done() < c.train.steps) {
        const auto row = trainer.step();
        run.trace.push_back(row);
        if (trace_file) write_trace_row(*trace_file, row);
        if (on_step) on_step(row);
        if (trainer.steps_done() % every == 0) save();
    }
    save();
    run.steps_done = trainer.steps_done();
    return run;
}

inline CompressorModel load_stage1(const RunConfig& c, const fs::path& ckpt) {
    auto model = make_compressor(c);
    auto params = model.parameters();
    const auto meta = load_checkpoint(ckpt, params);
    if (manifest_get(meta, "kind") != "compressor") throw IoError(ckpt.string() + " is not a compressor checkpoint");
    return model;
}

struct Reference {
    Mesh mesh;
    SdfGrid grid;
};

// Ground truth at the evaluation grid: analytic field and its mesh.
inline Reference reference_for(const ShapeSpec& s, std::size_t G) {
    Reference r;
    r.grid = sample_grid(s, G);
    r.mesh = marching_cubes(r.grid);
    return r;
}

inline MetricReport evaluate_planes(const Tensor& planes, const SdfMlp& head, const ShapeSpec& gt,
                                    const EvalOptions& opt, std::uint64_t seed, Mesh* mesh_out = nullptr) {
    const auto grid = evaluate_grid(planes, head, opt.grid);
    const auto mesh = marching_cubes(grid);
    const auto ref = reference_for(gt, opt.grid);
    Rng rng(seed);
    auto report = evaluate(mesh, grid, ref.mesh, ref.grid, opt, rng);
    if (mesh_out) *mesh_out = mesh;
    return report;
}

inline MetricReport evaluate_reconstruction(const CompressorModel& model, const ShapeRecord& r, const EvalOptions& opt,
                                            std::uint64_t seed) {
    NoGradGuard ng;
    const auto& cfg = model.config();
    const auto planes = model.reconstruct(prepare_point_input(r.cloud, cfg.centers, cfg.neighbors));
    auto report = evaluate_planes(planes, model.phi_planes, r.spec, opt, seed);
    report.name = r.name;
    return report;
}

// ---------------------------------------------------------------------------
// Latents and stage 2

struct LatentRecord {
    std::string name;
    Tensor latent;  // [3, C_l, R_l, R_l]
    Tensor depth;   // [D, D]
    std::size_t camera = 0;
};

inline Tensor encode_mean_latent(const CompressorModel& model, const PointCloud& cloud) {
    NoGradGuard ng;
    const auto& cfg = model.config();
    if (cfg.latent_mode != LatentMode::triplane) throw ConfigError("stage 2 needs latent_mode=triplane");
    return model.encode(model.initial_triplane(prepare_point_input(cloud, cfg.centers, cfg.neighbors)), nullptr)
        .mean.detach();
}

inline std::vector<LatentRecord> encode_latents(const CompressorModel& model, const std::vector<ShapeRecord>& records) {
    std::vector<LatentRecord> out;
    for (const auto& r : records) out.push_back({r.name, encode_mean_latent(model, r.cloud), r.best_depth().detach(), r.best_view});
    return out;
}

inline void save_latents(const fs::path& dir, const std::vector<LatentRecord>& latents) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string());
    Manifest m;
    m["count"] = std::to_string(latents.size());
    for (std::size_t i = 0; i < latents.size(); ++i) {
        const auto& l = latents[i];
        m["latent." + std::to_string(i)] = l.name;
        std::ofstream os(dir / (l.name + ".latent.bin"), std::ios::binary);
        if (!os) throw IoError("cannot write latent for " + l.name);
        write_tensor(os, l.latent);
        write_tensor(os, l.depth);
        write_tensor(os, Tensor({1}, {static_cast<float>(l.camera)}));
        if (!os) throw IoError("failed writing latent for " + l.name);
    }
    write_manifest(dir / "manifest.txt", m);
}

inline std::vector<LatentRecord> load_latents(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw IoError("missing latent dataset " + dir.string());
    const auto m = read_manifest(dir / "manifest.txt");
    std::vector<LatentRecord> out;
    for (std::size_t i = 0, n = std::stoul(manifest_get(m, "count")); i < n; ++i) {
        LatentRecord l;
        l.name = manifest_get(m, "latent." + std::to_string(i));
        std::ifstream is(dir / (l.name + ".latent.bin"), std::ios::binary);
        if (!is) throw IoError("cannot read latent for " + l.name);
        l.latent = read_tensor(is);
        l.depth = read_tensor(is);
        l.camera = static_cast<std::size_t>(read_tensor(is).item());
        out.push_back(std::move(l));
    }
    return out;
}

// Standard deviation over all latent entries, used for the sampling clip.
inline float latent_std(const std::vector<LatentRecord>& latents) {
    double s = 0, s2 = 0;
    std::size_t n = 0;
    for (const auto& l : latents)
        for (float v : l.latent.data()) {
            s += v;
            s2 += static_cast<double>(v) * v;
            ++n;
        }
    const double m = s / static_cast<double>(n);
    return static_cast<float>(std::sqrt(std::max(0.0, s2 / static_cast<double>(n) - m * m)));
}

inline DenoiserSet make_denoiser(const RunConfig& c) {
    return DenoiserSet(c.denoiser, c.compressor.latent_channels, c.condition.width, stream_seed(c.seed, Stream::align_init));
}

inline std::vector<AlignSample> align_samples(const std::vector<LatentRecord>& latents, const ConditionEncoder& enc,
                                              std::size_t count) {
    std::vector<AlignSample> out;
    for (std::size_t i = 0; i < std::min(count, latents.size()); ++i) out.push_back({latents[i].latent, enc(latents[i].depth)});
    return out;
}

struct Stage2Run {
    std::vector<AlignTraceRow> trace;
    float clip = 0;
};

inline Stage2Run train_stage2(DenoiserSet& set, const std::vector<LatentRecord>& latents, const RunConfig& c,
                              const std::optional<fs::path>& ckpt,
                              const std::function<void(const AlignTraceRow&)>& on_step = {}) {
    const ConditionEncoder enc(c.condition);
    const auto data = align_samples(latents, enc, c.align.shapes);
    std::vector<LatentRecord> used(latents.begin(), latents.begin() + static_cast<std::ptrdiff_t>(data.size()));
    AlignTrainOptions opt{c.align.steps, c.align.batch, c.align.lr, stream_seed(c.seed, Stream::align_train)};
    AlignerTrainer trainer(set, data, c.schedule(), opt);
    Stage2Run run;
    run.clip = 3.0f * latent_std(used);
    run.trace = trainer.run(c.align.steps, on_step);
    if (ckpt) {
        save_checkpoint(*ckpt, set.parameters(), nullptr,
                        {{"kind", "denoiser"},
                         {"mode", mode_name(set.mode())},
                         {"single_width", std::to_string(set.config().single_width)},
                         {"clip", detail::fmt_double(run.clip)},
                         {"step", std::to_string(trainer.steps_done())}});
        std::ofstream os(*ckpt / "trace.csv", std::ios::binary);
        os.precision(9);
        for (const auto& r : run.trace) os << r.step << ',' << r.loss << '\n';
    }
    return run;
}

struct LoadedDenoiser {
    DenoiserSet set;
    float clip = 0;
};

inline LoadedDenoiser load_stage2(RunConfig c, const fs::path& ckpt) {
    const auto meta = read_manifest(ckpt / "manifest.txt");
    if (manifest_get(meta, "kind") != "denoiser") throw IoError(ckpt.string() + " is not a denoiser checkpoint");
    c.denoiser.mode = mode_from_name(manifest_get(meta, "mode"));
    c.denoiser.single_width = std::stoul(manifest_get(meta, "single_width"));
    LoadedDenoiser out{make_denoiser(c), std::stof(manifest_get(meta, "clip"))};
    auto params = out.set.parameters();
    load_checkpoint(ckpt, params);
    return out;
}

struct InferenceTimings {
    double condition_s = 0, sampling_s = 0, decode_s = 0, mesh_s = 0;
};

inline Tensor sample_for_view(const DenoiserSet& set, const Tensor& depth, const RunConfig& c, std::uint64_t seed,
                              std::optional<float> clip) {
    const ConditionEncoder enc(c.condition);
    const auto tokens = enc(depth);
    Rng rng(seed);
    const std::size_t Rl = c.compressor.latent_resolution;
    return sample_latent(set, tokens, {3, c.compressor.latent_channels, Rl, Rl}, c.schedule(), rng, clip);
}

// depth view -> latent sample -> decoded planes -> SDF grid -> mesh.
inline Mesh infer_mesh(const CompressorModel& model, const DenoiserSet& set, const Tensor& depth, const RunConfig& c,
                       std::uint64_t seed, std::size_t G, std::optional<float> clip,
                       InferenceTimings* timings = nullptr) {
    using clock = std::chrono::steady_clock;
    auto t0 = clock::now();
    NoGradGuard ng;
    const ConditionEncoder enc(c.condition);
    const auto tokens = enc(depth);
    auto t1 = clock::now();
    Rng rng(seed);
    const std::size_t Rl = c.compressor.latent_resolution;
    const auto latent = sample_latent(set, tokens, {3, c.compressor.latent_channels, Rl, Rl}, c.schedule(), rng, clip);
    auto t2 = clock::now();
    const auto planes = model.decode(latent);
    const auto grid = evaluate_grid(planes, model.phi_planes, G);
    auto t3 = clock::now();
    auto mesh = marching_cubes(grid);
    auto t4 = clock::now();
    if (timings) {
        auto sec = [](auto a, auto b) { return std::chrono::duration<double>(b - a).count(); };
        *timings = {sec(t0, t1), sec(t1, t2), sec(t2, t3), sec(t3, t4)};
    }
    return mesh;
}

} // namespace lam3d
