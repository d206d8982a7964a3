#pragma once

// TOAST1 tensor archive.
//
//   bytes 0..5   magic "TOAST1"
//   bytes 6..9   manifest length, u32 little-endian
//   manifest     UTF-8 JSON {"format_version":1,"entries":[{"name","dims","byte_offset"}...]}
//   payload      f32 little-endian, row-major, in manifest order
//
// byte_offset is relative to the start of the payload. Entries are packed
// with no gaps, so the file length is fully determined by the manifest.

#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <string>
#include <unistd.h>
#include <utility>
#include <vector>

#include "json.hpp"
#include "toast/error.hpp"
#include "toast/linalg.hpp"

namespace toast {

inline constexpr std::array<char, 6> kArchiveMagic = {'T', 'O', 'A', 'S', 'T', '1'};
inline constexpr std::uint32_t kArchiveFormatVersion = 1;

struct Tensor {
    std::vector<std::size_t> dims;
    std::vector<float> data;

    static Tensor from(const Matrix& m) { return {{m.rows(), m.cols()}, m.storage()}; }
    static Tensor from(const Vector& v) { return {{v.size()}, v}; }

    [[nodiscard]] std::size_t element_count() const noexcept {
        std::size_t n = 1;
        for (auto d : dims) n *= d;
        return n;
    }

    // Rank-2 tensors map directly; rank-1 tensors become a single row.
    [[nodiscard]] Matrix to_matrix() const {
        if (dims.size() == 2) return Matrix(dims[0], dims[1], data);
        if (dims.size() == 1) return Matrix(1, dims[0], data);
        throw ShapeError("tensor of rank " + std::to_string(dims.size()) + " is not a matrix");
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;
};

struct NamedTensor {
    std::string name;
    Tensor tensor;

    friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

struct ManifestEntry {
    std::string name;
    std::vector<std::size_t> dims;
    std::uint64_t byte_offset = 0;
};

struct ArchiveManifest {
    std::uint32_t format_version = kArchiveFormatVersion;
    std::vector<ManifestEntry> entries;
    nlohmann::json metadata;  // optional free-form object, null when absent
};

struct Archive {
    std::vector<NamedTensor> tensors;
    nlohmann::json metadata;
};

namespace detail {

inline void put_u32_le(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline std::uint32_t get_u32_le(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

// Writes `bytes` to a sibling temp file, then renames it over `path`.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    auto tmp = path;
    tmp += ".tmp." + std::to_string(::getpid());
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw Error("cannot open " + tmp.string() + " for writing");
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!os) throw Error("write failed: " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp);
        throw Error("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
    }
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InputError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline std::size_t checked_count(const std::vector<std::size_t>& dims, const std::string& name) {
    if (dims.empty()) throw InputError("tensor " + name + " has no dimensions");
    std::size_t n = 1;
    for (auto d : dims) {
        if (d == 0) throw InputError("tensor " + name + " has a zero-length dimension");
        if (n > (std::size_t{1} << 40) / d) throw InputError("tensor " + name + " is too large");
        n *= d;
    }
    return n;
}

}  // namespace detail

inline nlohmann::json manifest_to_json(const ArchiveManifest& m) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : m.entries) {
        entries.push_back({{"name", e.name}, {"dims", e.dims}, {"byte_offset", e.byte_offset}});
    }
    nlohmann::json j = {{"format_version", m.format_version}, {"entries", std::move(entries)}};
    if (!m.metadata.is_null()) j["metadata"] = m.metadata;
    return j;
}

// Serializes tensors into the exact TOAST1 byte layout.
inline std::string encode_archive(const std::vector<NamedTensor>& tensors, const nlohmann::json& metadata = nullptr) {
    ArchiveManifest manifest;
    manifest.metadata = metadata;
    std::set<std::string> seen;
    std::uint64_t offset = 0;
    for (const auto& t : tensors) {
        if (!seen.insert(t.name).second) throw InputError("duplicate tensor name: " + t.name);
        const std::size_t n = detail::checked_count(t.tensor.dims, t.name);
        if (n != t.tensor.data.size()) {
            throw ShapeError("tensor " + t.name + ": data length " + std::to_string(t.tensor.data.size()) +
                             " does not match dims");
        }
        require_finite(t.tensor.data, "tensor " + t.name);
        manifest.entries.push_back({t.name, t.tensor.dims, offset});
        offset += 4 * static_cast<std::uint64_t>(n);
    }
    const std::string manifest_text = manifest_to_json(manifest).dump();
    if (manifest_text.size() > UINT32_MAX) throw InputError("manifest too large");

    std::string out;
    out.reserve(10 + manifest_text.size() + offset);
    out.append(kArchiveMagic.data(), kArchiveMagic.size());
    detail::put_u32_le(out, static_cast<std::uint32_t>(manifest_text.size()));
    out += manifest_text;
    for (const auto& t : tensors) {
        for (float v : t.tensor.data) detail::put_u32_le(out, std::bit_cast<std::uint32_t>(v));
    }
    return out;
}

// Parses and validates TOAST1 bytes. Every structural defect is reported as InputError.
inline Archive decode_archive(const std::string& bytes) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    if (bytes.size() < kArchiveMagic.size() || std::memcmp(p, kArchiveMagic.data(), kArchiveMagic.size()) != 0) {
        throw InputError("not a TOAST archive");
    }
    if (bytes.size() < 10) throw InputError("truncated");
    const std::uint64_t manifest_len = detail::get_u32_le(p + 6);
    if (bytes.size() < 10 + manifest_len) throw InputError("truncated");

    nlohmann::json j;
    try {
        j = nlohmann::json::parse(bytes.begin() + 10, bytes.begin() + 10 + static_cast<std::ptrdiff_t>(manifest_len));
    } catch (const nlohmann::json::exception&) {
        throw InputError("bad manifest");
    }

    Archive archive;
    std::uint64_t expected_offset = 0;
    try {
        if (!j.is_object()) throw InputError("bad manifest");
        if (j.at("format_version").get<std::uint32_t>() != kArchiveFormatVersion) {
            throw InputError("unsupported archive format_version");
        }
        if (j.contains("metadata")) archive.metadata = j["metadata"];
        std::set<std::string> seen;
        for (const auto& e : j.at("entries")) {
            NamedTensor t;
            t.name = e.at("name").get<std::string>();
            t.tensor.dims = e.at("dims").get<std::vector<std::size_t>>();
            const auto off = e.at("byte_offset").get<std::uint64_t>();
            if (!seen.insert(t.name).second) throw InputError("bad manifest: duplicate name " + t.name);
            if (off != expected_offset) throw InputError("bad manifest: non-contiguous offset for " + t.name);
            const std::size_t n = detail::checked_count(t.tensor.dims, t.name);
            expected_offset += 4 * static_cast<std::uint64_t>(n);
            archive.tensors.push_back(std::move(t));
        }
    } catch (const nlohmann::json::exception&) {
        throw InputError("bad manifest");
    }

    const std::uint64_t payload_start = 10 + manifest_len;
    if (bytes.size() < payload_start + expected_offset) throw InputError("truncated");
    if (bytes.size() > payload_start + expected_offset) throw InputError("trailing bytes after payload");

    const unsigned char* cursor = p + payload_start;
    for (auto& t : archive.tensors) {
        const std::size_t n = t.tensor.element_count();
        t.tensor.data.resize(n);
        for (std::size_t i = 0; i < n; ++i, cursor += 4) {
            t.tensor.data[i] = std::bit_cast<float>(detail::get_u32_le(cursor));
        }
        require_finite(t.tensor.data, "tensor " + t.name);
    }
    return archive;
}

inline void write_archive(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors,
                          const nlohmann::json& metadata = nullptr) {
    detail::write_file_atomic(path, encode_archive(tensors, metadata));
}

inline std::vector<NamedTensor> read_archive(const std::filesystem::path& path) {
    return decode_archive(detail::read_file(path)).tensors;
}

inline Archive read_archive_with_metadata(const std::filesystem::path& path) {
    return decode_archive(detail::read_file(path));
}

// Throws InputError describing the first defect found.
inline void validate_archive(const std::filesystem::path& path) { (void)read_archive_with_metadata(path); }

inline const NamedTensor* find_tensor(const std::vector<NamedTensor>& tensors, std::string_view name) {
    for (const auto& t : tensors)
        if (t.name == name) return &t;
    return nullptr;
}

}  // namespace toast
