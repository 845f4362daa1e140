#include "lam3d/commands.hpp"

#include <CLI11.hpp>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <optional>

#include "lam3d/pipeline.hpp"
#include "lam3d/selfcheck.hpp"

namespace lam3d {
namespace {

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string ckpt;
    std::optional<std::size_t> grid;
    std::string mode;
    std::string data;
    std::string latents;
    std::string shape;
    std::string depth;
    std::string mesh;
    std::string format = "kv";
    std::string corrupt_op;
};

RunConfig resolve_config(const Options& o) {
    RunConfig c = o.config.empty() ? RunConfig{} : load_config(o.config);
    if (o.seed) c.seed = *o.seed;
    if (o.grid) c.eval.grid = *o.grid;
    if (!o.mode.empty()) c.denoiser.mode = mode_from_name(o.mode);
    validate(c);
    return c;
}

void need(const std::string& value, const char* flag) {
    if (value.empty()) throw ConfigError(std::string("missing required flag ") + flag);
}

fs::path compressor_dir(const Options& o) { return fs::path(o.ckpt) / "compressor"; }
fs::path aligner_dir(const Options& o) { return fs::path(o.ckpt) / "aligner"; }

// A corpus name or a file of shape key=value lines.
NamedShape resolve_shape(const std::string& s) {
    for (const auto& ns : shape_corpus())
        if (ns.name == s) return ns;
    if (!fs::exists(s)) throw ConfigError("unknown shape '" + s + "' (not a corpus name or file)");
    return {fs::path(s).stem().string(), shape_from_kv(read_manifest(s), "")};
}

int cmd_gen_data(const Options& o, std::ostream& err) {
    need(o.out, "--out");
    const auto c = resolve_config(o);
    const auto records = build_dataset(c);
    save_dataset(o.out, records);
    for (const auto& r : records) err << r.name << " best_view=" << r.best_view << '\n';
    return 0;
}

int cmd_train_compress(const Options& o, std::ostream& err) {
    need(o.data, "--data");
    need(o.ckpt, "--ckpt");
    const auto c = resolve_config(o);
    const auto records = load_dataset(o.data);
    auto model = make_compressor(c);
    const auto t0 = std::chrono::steady_clock::now();
    const auto run = train_stage1(model, records, c, compressor_dir(o), [&](const TraceRow& r) {
        if (r.step % 50 == 0) err << "step " << r.step << " loss " << r.total << '\n';
    });
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    err << "trained " << run.trace.size() << " steps (total " << run.steps_done << ") in " << secs << " s\n";
    return 0;
}

int cmd_encode_latents(const Options& o, std::ostream& err) {
    need(o.data, "--data");
    need(o.ckpt, "--ckpt");
    const auto c = resolve_config(o);
    const auto model = load_stage1(c, compressor_dir(o));
    const auto latents = encode_latents(model, load_dataset(o.data));
    const fs::path out = o.out.empty() ? fs::path(o.ckpt) / "latents" : fs::path(o.out);
    save_latents(out, latents);
    err << "encoded " << latents.size() << " latents into " << out.string() << '\n';
    return 0;
}

int cmd_train_align(const Options& o, std::ostream& err) {
    need(o.ckpt, "--ckpt");
    const auto c = resolve_config(o);
    if (!fs::exists(compressor_dir(o) / "manifest.txt"))
        throw IoError("missing stage-1 checkpoint in " + compressor_dir(o).string());
    const fs::path latents = o.latents.empty() ? fs::path(o.ckpt) / "latents" : fs::path(o.latents);
    auto set = make_denoiser(c);
    const auto run = train_stage2(set, load_latents(latents), c, aligner_dir(o), [&](const AlignTraceRow& r) {
        if (r.step % 100 == 0) err << "step " << r.step << " loss " << r.loss << '\n';
    });
    err << "mode " << mode_name(set.mode()) << " final loss " << run.trace.back().loss << '\n';
    return 0;
}

int cmd_infer(const Options& o, std::ostream& err) {
    need(o.ckpt, "--ckpt");
    need(o.out, "--out");
    if (o.depth.empty() == o.shape.empty()) throw ConfigError("give exactly one of --depth or --shape");
    const auto c = resolve_config(o);
    Tensor depth;
    if (!o.depth.empty()) {
        depth = load_tensor(o.depth);
    } else {
        const auto ns = resolve_shape(o.shape);
        depth = render_depth(ns.spec, select_best_view(ns.spec, c.camera), c.camera);
    }
    const auto model = load_stage1(c, compressor_dir(o));
    const auto aligner = load_stage2(c, aligner_dir(o));
    InferenceTimings t;
    const auto mesh = infer_mesh(model, aligner.set, depth, c, stream_seed(c.seed, Stream::infer), c.eval.grid,
                                 c.align.clip ? std::optional<float>(aligner.clip) : std::nullopt, &t);
    save_obj(o.out, mesh);
    err << "vertices " << mesh.vertices.size() << " triangles " << mesh.triangles.size() << '\n'
        << "timing condition=" << t.condition_s << "s sampling=" << t.sampling_s << "s decode=" << t.decode_s
        << "s mesh=" << t.mesh_s << "s\n";
    return 0;
}

int cmd_eval(const Options& o, std::ostream& out) {
    need(o.shape, "--shape");
    const auto c = resolve_config(o);
    const auto ns = resolve_shape(o.shape);
    const std::uint64_t seed = stream_seed(c.seed, Stream::eval);
    MetricReport report;
    if (!o.mesh.empty()) {
        const auto mesh = load_obj(o.mesh);
        if (mesh.empty()) throw NumericalError("mesh " + o.mesh + " is empty");
        const auto ref = reference_for(ns.spec, c.eval.grid);
        Rng rng(seed);
        report = evaluate(mesh, voxelize_mesh(mesh, c.eval.grid), ref.mesh, ref.grid, c.eval, rng);
    } else {
        need(o.ckpt, "--ckpt or --mesh");
        need(o.data, "--data");
        const auto model = load_stage1(c, compressor_dir(o));
        const auto records = load_dataset(o.data);
        const auto it = std::find_if(records.begin(), records.end(), [&](const ShapeRecord& r) { return r.name == ns.name; });
        if (it == records.end()) throw ConfigError("shape " + ns.name + " is not in the dataset");
        report = evaluate_reconstruction(model, *it, c.eval, seed);
    }
    report.name = ns.name;
    std::string text = o.format == "json" ? report.to_json().dump() + "\n" : report.to_kv();
    if (o.out.empty()) {
        out << text;
    } else {
        std::ofstream os(o.out, std::ios::binary);
        if (!(os << text)) throw IoError("cannot write " + o.out);
    }
    return 0;
}

int cmd_selfcheck(const Options& o, std::ostream& out, std::ostream& err) {
    const auto t0 = std::chrono::steady_clock::now();
    bool ok = true;
    run_selfcheck(o.corrupt_op, [&](const CheckResult& r) {
        ok = ok && r.pass;
        out << format_check(r) << '\n';
    });
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out << (ok ? "selfcheck passed" : "selfcheck FAILED") << '\n';
    err << "selfcheck took " << secs << " s\n";
    return ok ? 0 : 2;
}

} // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"lam3d: two-stage point-cloud compressor and single-view latent diffusion"};
    app.require_subcommand(1);
    Options o;
    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", o.config, "Run configuration (INI)");
        sub->add_option("--seed", o.seed, "Override run.seed");
        sub->add_option("--out", o.out, "Output path");
        sub->add_option("--ckpt", o.ckpt, "Checkpoint root (compressor/, aligner/, latents/)");
        sub->add_option("--grid", o.grid, "Override eval.grid");
        sub->add_option("--mode", o.mode, "Override align.mode: parallel | single | deterministic");
    };
    auto* gen = app.add_subcommand("gen-data", "Sample point clouds and render views for the shape corpus");
    common(gen);
    auto* tc = app.add_subcommand("train-compress", "Train stage 1 (resumes from --ckpt)");
    common(tc);
    tc->add_option("--data", o.data, "Dataset directory from gen-data");
    auto* enc = app.add_subcommand("encode-latents", "Eval-mode mean latents with best-view depth");
    common(enc);
    enc->add_option("--data", o.data, "Dataset directory from gen-data");
    auto* ta = app.add_subcommand("train-align", "Train stage 2 denoisers");
    common(ta);
    ta->add_option("--latents", o.latents, "Latent directory (default <ckpt>/latents)");
    auto* inf = app.add_subcommand("infer", "Mesh from one depth view");
    common(inf);
    inf->add_option("--depth", o.depth, "Depth image tensor file [D,D]");
    inf->add_option("--shape", o.shape, "Corpus shape name or shape file; its best view is rendered");
    auto* ev = app.add_subcommand("eval", "Chamfer, F-score and IoU against a ground-truth shape");
    common(ev);
    ev->add_option("--shape", o.shape, "Corpus shape name or shape file");
    ev->add_option("--mesh", o.mesh, "OBJ mesh to score");
    ev->add_option("--data", o.data, "Dataset directory (scores the stage-1 reconstruction)");
    ev->add_option("--format", o.format, "kv | json")->check(CLI::IsMember({"kv", "json"}));
    auto* sc = app.add_subcommand("selfcheck", "Gradient, diffusion, metric and meshing checks");
    sc->add_option("--inject-grad-bug", o.corrupt_op, "Corrupt the backward pass of the named op (negative control)");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 1;
    }
    try {
        if (gen->parsed()) return cmd_gen_data(o, err);
        if (tc->parsed()) return cmd_train_compress(o, err);
        if (enc->parsed()) return cmd_encode_latents(o, err);
        if (ta->parsed()) return cmd_train_align(o, err);
        if (inf->parsed()) return cmd_infer(o, err);
        if (ev->parsed()) return cmd_eval(o, out);
        if (sc->parsed()) return cmd_selfcheck(o, out, err);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return 1;
    } catch (const NumericalError& e) {
        err << "numerical error: " << e.what() << '\n';
        return 2;
    } catch (const IoError& e) {
        err << "io error: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}

} // namespace lam3d
