#pragma once

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace polar {

// Shared on-disk container: magic + container version + JSON header +
// little-endian f32 blob. Used by encoder checkpoints, world files, and
// retrieval indexes.
struct BinContainer {
    nlohmann::json header;
    std::vector<float> blob;
};

void write_container(const std::string& path, const nlohmann::json& header,
                     std::span<const float> blob);

// Throws on missing file, bad magic, unsupported container version, or a
// truncated/corrupt payload.
BinContainer read_container(const std::string& path);

// FNV-1a hash of a file's bytes, as 16 hex chars. Throws if unreadable.
std::string hash_file(const std::string& path);

// Reads/writes a JSON document (used for deltas, eval suites, reports).
nlohmann::json read_json_file(const std::string& path);
void write_json_file(const std::string& path, const nlohmann::json& j);

}  // namespace polar
