#include "stitch/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace stitch {

namespace {
constexpr char kMagic[8] = {'S', 'T', 'C', 'H', 'C', 'K', 'P', 'T'};
}

double Checkpoint::meta_number(const std::string& key, double fallback) const {
    auto it = meta.find(key);
    if (it == meta.end()) return fallback;
    return std::stod(it->second);
}

void Checkpoint::save(const std::string& path) const {
    nlohmann::json manifest;
    manifest["format_version"] = format_version;
    manifest["config_hash"] = config_hash;
    manifest["meta"] = meta;
    nlohmann::json dir = nlohmann::json::array();
    uint64_t offset = 0;
    for (auto& t : tensors) {
        if ((int64_t)t.data.size() != shape_numel(t.shape))
            throw CheckpointError("tensor " + t.name + " data size does not match shape");
        dir.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
        offset += t.data.size() * sizeof(float);
    }
    manifest["tensors"] = dir;
    std::string mjson = manifest.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("cannot open for write: " + path);
    out.write(kMagic, 8);
    uint64_t mlen = mjson.size();
    out.write((const char*)&mlen, 8);
    out.write(mjson.data(), (std::streamsize)mjson.size());
    for (auto& t : tensors)
        out.write((const char*)t.data.data(), (std::streamsize)(t.data.size() * sizeof(float)));
    if (!out) throw CheckpointError("write failed: " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0)
        throw CheckpointError("not a checkpoint file: " + path);
    uint64_t mlen = 0;
    in.read((char*)&mlen, 8);
    if (!in || mlen == 0 || mlen > (1ull << 30)) throw CheckpointError("corrupt manifest length in " + path);
    std::string mjson(mlen, '\0');
    in.read(mjson.data(), (std::streamsize)mlen);
    if (!in) throw CheckpointError("truncated manifest in " + path);

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(mjson);
    } catch (const std::exception& e) {
        throw CheckpointError("corrupt manifest json in " + path + ": " + e.what());
    }

    Checkpoint ck;
    try {
        ck.format_version = manifest.at("format_version").get<int>();
        ck.config_hash = manifest.at("config_hash").get<std::string>();
        if (manifest.contains("meta"))
            ck.meta = manifest["meta"].get<std::map<std::string, std::string>>();
        uint64_t expect_offset = 0;
        for (auto& e : manifest.at("tensors")) {
            NamedTensor t;
            t.name = e.at("name").get<std::string>();
            t.shape = e.at("shape").get<Shape>();
            uint64_t offset = e.at("offset").get<uint64_t>();
            if (offset != expect_offset)
                throw CheckpointError("non-contiguous tensor offsets in " + path);
            int64_t n = shape_numel(t.shape);
            if (n < 0) throw CheckpointError("negative extent in manifest of " + path);
            t.data.resize((size_t)n);
            in.read((char*)t.data.data(), (std::streamsize)(n * sizeof(float)));
            if (!in) throw CheckpointError("truncated payload in " + path + " at tensor " + t.name);
            expect_offset = offset + (uint64_t)n * sizeof(float);
            ck.tensors.push_back(std::move(t));
        }
    } catch (const CheckpointError&) {
        throw;
    } catch (const std::exception& e) {
        throw CheckpointError("malformed manifest in " + path + ": " + e.what());
    }
    return ck;
}

}  // namespace stitch
