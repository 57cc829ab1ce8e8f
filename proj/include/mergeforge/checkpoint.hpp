#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mergeforge/tensor.hpp"

namespace mergeforge {

// Checkpoint container (.ntm):
//   u64 little-endian manifest byte length
//   manifest: UTF-8 JSON terminated by '\n' (length counts the newline)
//   payload:  concatenated little-endian float32 bytes, offsets contiguous
//             in manifest order and covering the payload exactly

namespace detail {

inline void put_u32_le(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 24));
}

inline std::uint32_t get_u32_le(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

// FNV-1a over the manifest description (names, shapes, dtype, metadata).
inline std::string fingerprint(const NamedTensorMap& map) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](const std::string& s) {
        for (unsigned char c : s) {
            h ^= c;
            h *= 0x100000001b3ULL;
        }
        h ^= 0xff;
        h *= 0x100000001b3ULL;
    };
    for (const auto& [name, t] : map) {
        feed(name);
        feed(shape_to_string(t.shape));
        feed("f32");
    }
    for (const auto& [k, v] : map.metadata) {
        feed(k);
        feed(v);
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

inline void save_checkpoint(const NamedTensorMap& map, const std::string& path) {
    nlohmann::ordered_json manifest;
    manifest["format"] = "ntm";
    manifest["version"] = 1;
    manifest["metadata"] = nlohmann::ordered_json::object();
    for (const auto& [k, v] : map.metadata) manifest["metadata"][k] = v;
    manifest["tensors"] = nlohmann::ordered_json::array();

    std::uint64_t offset = 0;
    for (const auto& [name, t] : map) {
        for (std::size_t i = 0; i < t.data.size(); ++i)
            if (!std::isfinite(t.data[i]))
                throw std::runtime_error("save_checkpoint: non-finite value in tensor '" + name + "' at index " +
                                         std::to_string(i));
        nlohmann::ordered_json entry;
        entry["name"] = name;
        entry["shape"] = t.shape;
        entry["dtype"] = "f32";
        entry["offset"] = offset;
        manifest["tensors"].push_back(std::move(entry));
        offset += static_cast<std::uint64_t>(t.numel()) * 4u;
    }

    std::string text = manifest.dump();
    text.push_back('\n');

    std::vector<std::uint8_t> payload;
    payload.reserve(offset);
    for (const auto& [name, t] : map)
        for (float v : t.data) detail::put_u32_le(payload, std::bit_cast<std::uint32_t>(v));

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("save_checkpoint: cannot open '" + path + "' for writing");
    std::uint64_t len = text.size();
    std::uint8_t len_le[8];
    for (int i = 0; i < 8; ++i) len_le[i] = static_cast<std::uint8_t>(len >> (8 * i));
    f.write(reinterpret_cast<const char*>(len_le), 8);
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!payload.empty()) f.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    f.flush();
    if (!f) throw std::runtime_error("save_checkpoint: write failed for '" + path + "'");
}

inline NamedTensorMap load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_checkpoint: cannot open '" + path + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    if (bytes.size() < 8) throw std::runtime_error("load_checkpoint: '" + path + "' shorter than length prefix");
    std::uint64_t len = 0;
    for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(bytes[static_cast<std::size_t>(i)]) << (8 * i);
    if (8 + len > bytes.size())
        throw std::runtime_error("load_checkpoint: manifest length " + std::to_string(len) +
                                 " exceeds file size " + std::to_string(bytes.size()));
    if (len == 0 || bytes[static_cast<std::size_t>(8 + len - 1)] != '\n')
        throw std::runtime_error("load_checkpoint: manifest is not newline-terminated");

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + static_cast<std::ptrdiff_t>(8 + len));
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error(std::string("load_checkpoint: manifest parse error: ") + e.what());
    }
    if (!manifest.contains("format") || manifest["format"] != "ntm")
        throw std::runtime_error("load_checkpoint: missing or wrong format tag");

    const std::size_t payload_begin = static_cast<std::size_t>(8 + len);
    const std::uint64_t payload_size = bytes.size() - payload_begin;

    NamedTensorMap map;
    if (manifest.contains("metadata"))
        for (auto it = manifest["metadata"].begin(); it != manifest["metadata"].end(); ++it)
            map.metadata[it.key()] = it.value().get<std::string>();

    std::uint64_t expected_offset = 0;
    for (const auto& entry : manifest["tensors"]) {
        std::string name = entry["name"].get<std::string>();
        std::vector<std::int64_t> shape = entry["shape"].get<std::vector<std::int64_t>>();
        std::string dtype = entry["dtype"].get<std::string>();
        std::uint64_t offset = entry["offset"].get<std::uint64_t>();
        if (dtype != "f32") throw std::runtime_error("load_checkpoint: unsupported dtype '" + dtype + "' for '" + name + "'");
        if (offset != expected_offset)
            throw std::runtime_error("load_checkpoint: tensor '" + name + "' offset " + std::to_string(offset) +
                                     " leaves a gap or overlap (expected " + std::to_string(expected_offset) + ")");
        std::uint64_t nbytes = static_cast<std::uint64_t>(Tensor::numel_of(shape)) * 4u;
        if (offset + nbytes > payload_size)
            throw std::runtime_error("load_checkpoint: length mismatch, tensor '" + name + "' needs bytes up to " +
                                     std::to_string(offset + nbytes) + " but payload has " + std::to_string(payload_size));
        Tensor t(shape);
        const std::uint8_t* src = bytes.data() + payload_begin + offset;
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            float v = std::bit_cast<float>(detail::get_u32_le(src + 4 * i));
            if (!std::isfinite(v))
                throw std::runtime_error("load_checkpoint: non-finite value in tensor '" + name + "'");
            t.data[i] = v;
        }
        map.insert(name, std::move(t));
        expected_offset = offset + nbytes;
    }
    if (expected_offset != payload_size)
        throw std::runtime_error("load_checkpoint: length mismatch, manifest covers " + std::to_string(expected_offset) +
                                 " bytes but payload has " + std::to_string(payload_size));
    return map;
}

}  // namespace mergeforge
