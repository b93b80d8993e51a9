#pragma once

#include "metricforge/common.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>

namespace metricforge {

// Tensor payloads are row-major little-endian IEEE-754 float32. A standalone
// tensor file prefixes the payload with a 24-byte header:
//
//   bytes 0-3    magic "MFT1"
//   bytes 4-7    uint32 dtype code (1 = float32)
//   bytes 8-15   uint64 rows
//   bytes 16-23  uint64 cols
//
// Checkpoints store bare payloads, one per file, with shapes in index.json.

inline constexpr std::size_t kTensorHeaderBytes = 24;
inline constexpr std::uint32_t kDtypeFloat32 = 1;

std::uint32_t crc32(std::span<const std::byte> bytes) noexcept;
std::uint32_t crc32(std::string_view bytes) noexcept;

std::string encode_payload(const Mat<float>& m);
Mat<float> decode_payload(std::string_view bytes, Index rows, Index cols);

void write_tensor_file(const std::filesystem::path& path, const Mat<float>& m);

/// Reads a standalone tensor file. Throws BadHeader on a malformed header or
/// size mismatch and NonFiniteValues when any entry is NaN or infinite.
Mat<float> read_tensor_file(const std::filesystem::path& path);

std::string read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::string_view bytes);

}  // namespace metricforge
