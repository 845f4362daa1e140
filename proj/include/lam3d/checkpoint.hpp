#pragma once

// Checkpoint directory:
//   manifest.txt   key=value metadata plus param.<i>=<name> in load order
//   params.bin     one LAM3DT01 record per parameter
//   optimizer.bin  first then second Adam moment per parameter (optional)

#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include "lam3d/nn.hpp"
#include "lam3d/optim.hpp"
#include "lam3d/tensor_io.hpp"

namespace lam3d {

using Manifest = std::map<std::string, std::string>;

inline void write_manifest(const std::filesystem::path& path, const Manifest& m) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path.string());
    for (const auto& [k, v] : m) os << k << '=' << v << '\n';
    if (!os) throw IoError("failed writing " + path.string());
}

inline Manifest read_manifest(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read " + path.string());
    Manifest m;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw IoError("malformed manifest line in " + path.string());
        m[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return m;
}

inline const std::string& manifest_get(const Manifest& m, const std::string& key) {
    const auto it = m.find(key);
    if (it == m.end()) throw IoError("manifest lacks key " + key);
    return it->second;
}

inline void save_checkpoint(const std::filesystem::path& dir, const ParamList& params, Adam* optimizer,
                            Manifest meta) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string());
    {
        std::ofstream os(dir / "params.bin", std::ios::binary);
        if (!os) throw IoError("cannot write " + (dir / "params.bin").string());
        for (std::size_t i = 0; i < params.size(); ++i) {
            write_tensor(os, params[i].tensor.detach());
            meta["param." + std::to_string(i)] = params[i].name;
        }
        if (!os) throw IoError("failed writing params");
    }
    meta["param_count"] = std::to_string(params.size());
    if (optimizer) {
        std::ofstream os(dir / "optimizer.bin", std::ios::binary);
        if (!os) throw IoError("cannot write optimizer state");
        for (std::size_t i = 0; i < params.size(); ++i) {
            write_tensor(os, Tensor(params[i].tensor.shape(), optimizer->first_moments()[i]));
            write_tensor(os, Tensor(params[i].tensor.shape(), optimizer->second_moments()[i]));
        }
        meta["optimizer_steps"] = std::to_string(optimizer->steps());
    }
    write_manifest(dir / "manifest.txt", meta);
}

// Loads values into `params` (names and shapes must match) and, when given,
// the optimizer moments. Returns the manifest.
inline Manifest load_checkpoint(const std::filesystem::path& dir, ParamList& params, Adam* optimizer = nullptr) {
    if (!std::filesystem::is_directory(dir)) throw IoError("missing checkpoint " + dir.string());
    const auto meta = read_manifest(dir / "manifest.txt");
    if (std::stoul(manifest_get(meta, "param_count")) != params.size())
        throw IoError("checkpoint parameter count differs from the model");
    std::ifstream is(dir / "params.bin", std::ios::binary);
    if (!is) throw IoError("cannot read " + (dir / "params.bin").string());
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (manifest_get(meta, "param." + std::to_string(i)) != params[i].name)
            throw IoError("checkpoint parameter " + std::to_string(i) + " is not " + params[i].name);
        const auto t = read_tensor(is);
        if (t.shape() != params[i].tensor.shape()) throw IoError("shape mismatch for " + params[i].name);
        Tensor target = params[i].tensor;  // shares storage
        auto dst = target.mutable_data();
        std::copy(t.data().begin(), t.data().end(), dst.begin());
    }
    if (optimizer) {
        std::ifstream os(dir / "optimizer.bin", std::ios::binary);
        if (!os) throw IoError("checkpoint has no optimizer state");
        for (std::size_t i = 0; i < params.size(); ++i) {
            const auto m = read_tensor(os), v = read_tensor(os);
            optimizer->first_moments()[i] = m.to_vector();
            optimizer->second_moments()[i] = v.to_vector();
        }
        optimizer->set_steps(std::stol(manifest_get(meta, "optimizer_steps")));
    }
    return meta;
}

} // namespace lam3d
