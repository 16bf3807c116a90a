#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include <json.hpp>

#include "qtypemix/params.hpp"

namespace qtm {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian; big-endian hosts need byte swaps");

inline std::uint64_t fnv1a(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

template <class T>
const char* precision_name() {
    if constexpr (std::is_same_v<T, float>) return "float32";
    else return "float64";
}

// Checkpoint = <path>.json manifest (names, shapes, precision, format version,
// blob size + hash) next to <path>.bin, a flat little-endian value blob in
// manifest order. Round-trips are bit-exact.
template <class T>
void save_checkpoint(const ParamSet<T>& params, const std::string& path_prefix,
                     const nlohmann::json& extra = nlohmann::json::object()) {
    std::string blob;
    nlohmann::json plist = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& e = params.entry(i);
        const std::size_t bytes = e.value.data.size() * sizeof(T);
        plist.push_back({{"name", e.name}, {"shape", e.value.shape}, {"offset", offset}});
        blob.append(reinterpret_cast<const char*>(e.value.data.data()), bytes);
        offset += bytes;
    }
    nlohmann::json manifest = {
        {"format_version", 1},
        {"precision", precision_name<T>()},
        {"blob_bytes", offset},
        {"blob_fnv1a", fnv1a(blob.data(), blob.size())},
        {"params", plist},
    };
    if (!extra.is_null() && !extra.empty()) manifest["extra"] = extra;

    std::ofstream mb(path_prefix + ".json");
    require<IoError>(mb.good(), "cannot write ", path_prefix, ".json");
    mb << manifest.dump(2) << "\n";
    std::ofstream bb(path_prefix + ".bin", std::ios::binary);
    require<IoError>(bb.good(), "cannot write ", path_prefix, ".bin");
    bb.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    require<IoError>(bb.good(), "short write to ", path_prefix, ".bin");
}

inline nlohmann::json read_checkpoint_manifest(const std::string& path_prefix) {
    std::ifstream mb(path_prefix + ".json");
    require<IoError>(mb.good(), "cannot open checkpoint manifest ", path_prefix, ".json");
    nlohmann::json manifest;
    try {
        mb >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(cat("bad checkpoint manifest ", path_prefix, ".json: ", e.what()));
    }
    return manifest;
}

// Loads values into an already-constructed ParamSet; names and shapes must
// match the manifest exactly.
template <class T>
void load_checkpoint(ParamSet<T>& params, const std::string& path_prefix) {
    nlohmann::json manifest = read_checkpoint_manifest(path_prefix);
    require<IoError>(manifest.value("format_version", 0) == 1, path_prefix,
                     ": unsupported checkpoint format_version");
    require<IoError>(manifest.value("precision", "") == precision_name<T>(), path_prefix,
                     ": precision mismatch: checkpoint is ", manifest.value("precision", "?"),
                     ", loader expects ", precision_name<T>());

    std::ifstream bb(path_prefix + ".bin", std::ios::binary);
    require<IoError>(bb.good(), "cannot open checkpoint blob ", path_prefix, ".bin");
    std::string blob((std::istreambuf_iterator<char>(bb)), std::istreambuf_iterator<char>());

    const auto want_bytes = manifest.value("blob_bytes", std::uint64_t(0));
    require<IoError>(blob.size() == want_bytes, path_prefix, ": manifest mismatch: blob has ",
                     blob.size(), " bytes, manifest says ", want_bytes);
    const auto want_hash = manifest.value("blob_fnv1a", std::uint64_t(0));
    const auto got_hash = fnv1a(blob.data(), blob.size());
    require<IoError>(got_hash == want_hash, path_prefix,
                     ": manifest mismatch: blob hash ", got_hash, " != manifest hash ", want_hash);

    const auto& plist = manifest.at("params");
    require<IoError>(plist.size() == params.size(), path_prefix, ": checkpoint has ",
                     plist.size(), " params, model has ", params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& e = params.entry(i);
        const auto& m = plist[i];
        require<IoError>(m.at("name").get<std::string>() == e.name, path_prefix, ": param ", i,
                         " is '", m.at("name").get<std::string>(), "', model expects '", e.name,
                         "'");
        auto shape = m.at("shape").get<std::vector<std::int64_t>>();
        require<IoError>(shape == e.value.shape, path_prefix, ": shape mismatch for ", e.name);
        const std::uint64_t off = m.at("offset").get<std::uint64_t>();
        const std::size_t bytes = e.value.data.size() * sizeof(T);
        require<IoError>(off + bytes <= blob.size(), path_prefix, ": blob too small for ", e.name);
        std::memcpy(e.value.data.data(), blob.data() + off, bytes);
    }
}

}  // namespace qtm
