#include "geofuse/checkpoint.hpp"

#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace geofuse {

namespace fs = std::filesystem;

void save_checkpoint(const std::string& dir, ModelParams& params) {
    fs::create_directories(dir);
    nlohmann::json manifest;
    manifest["schema"] = 1;
    nlohmann::json entries = nlohmann::json::object();
    ParamRefs refs = params.refs();
    int idx = 0;
    for (const auto& [path, tensor] : refs) {
        char name[32];
        std::snprintf(name, sizeof(name), "p%04d.bin", idx++);
        save_tensor_file(*tensor, (fs::path(dir) / name).string());
        entries[path] = {{"file", name}, {"shape", tensor->shape()}};
    }
    manifest["params"] = std::move(entries);
    std::ofstream out(fs::path(dir) / "manifest.json", std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint manifest in " + dir);
    out << manifest.dump(2) << '\n';
}

void load_checkpoint(const std::string& dir, ModelParams& params) {
    std::ifstream in(fs::path(dir) / "manifest.json", std::ios::binary);
    if (!in) throw std::runtime_error("no checkpoint manifest in " + dir);
    nlohmann::json manifest;
    in >> manifest;
    const auto& entries = manifest.at("params");
    ParamRefs refs = params.refs();
    for (auto& [path, tensor] : refs) {
        if (!entries.contains(path)) throw std::runtime_error("checkpoint misses parameter " + path);
        const auto& entry = entries.at(path);
        Tensor loaded = load_tensor_file((fs::path(dir) / entry.at("file").get<std::string>()).string());
        if (loaded.shape() != tensor->shape()) {
            throw_dim_error("load_checkpoint " + path, tensor->shape(), loaded.shape());
        }
        *tensor = std::move(loaded);
    }
}

}  // namespace geofuse
