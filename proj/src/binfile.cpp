#include "polar/binfile.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "polar/linalg.hpp"

static_assert(std::endian::native == std::endian::little,
              "binary containers are written little-endian; big-endian hosts are unsupported");

namespace polar {

namespace {

constexpr char kMagic[8] = {'P', 'O', 'L', 'A', 'R', 'B', 'I', 'N'};
constexpr uint32_t kContainerVersion = 1;

template <class T>
void write_pod(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::ifstream& in, const std::string& path) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw std::runtime_error("truncated file: " + path);
    return v;
}

}  // namespace

void write_container(const std::string& path, const nlohmann::json& header,
                     std::span<const float> blob) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    const std::string js = header.dump();
    out.write(kMagic, sizeof(kMagic));
    write_pod(out, kContainerVersion);
    write_pod(out, static_cast<uint64_t>(js.size()));
    out.write(js.data(), static_cast<std::streamsize>(js.size()));
    write_pod(out, static_cast<uint64_t>(blob.size()));
    out.write(reinterpret_cast<const char*>(blob.data()),
              static_cast<std::streamsize>(blob.size() * sizeof(float)));
    if (!out) throw std::runtime_error("write failed: " + path);
}

BinContainer read_container(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw std::runtime_error("not a polar container: " + path);
    }
    const auto version = read_pod<uint32_t>(in, path);
    if (version != kContainerVersion) {
        throw std::runtime_error("unsupported container version " + std::to_string(version) +
                                 " in " + path);
    }
    const auto json_len = read_pod<uint64_t>(in, path);
    std::string js(json_len, '\0');
    in.read(js.data(), static_cast<std::streamsize>(json_len));
    if (!in) throw std::runtime_error("truncated header: " + path);
    BinContainer c;
    try {
        c.header = nlohmann::json::parse(js);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("corrupt header in " + path + ": " + e.what());
    }
    const auto blob_len = read_pod<uint64_t>(in, path);
    c.blob.resize(blob_len);
    in.read(reinterpret_cast<char*>(c.blob.data()),
            static_cast<std::streamsize>(blob_len * sizeof(float)));
    if (!in) throw std::runtime_error("truncated blob: " + path);
    return c;
}

std::string hash_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path);
    uint64_t h = 0xcbf29ce484222325ULL;
    char buf[65536];
    while (in) {
        in.read(buf, sizeof(buf));
        const auto n = in.gcount();
        if (n > 0) h = fnv1a64(buf, static_cast<size_t>(n), h);
    }
    return hash_hex(h);
}

nlohmann::json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open: " + path);
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("corrupt json in " + path + ": " + e.what());
    }
}

void write_json_file(const std::string& path, const nlohmann::json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << j.dump(2) << "\n";
    if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace polar
