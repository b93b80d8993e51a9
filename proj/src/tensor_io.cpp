#include "metricforge/tensor_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace metricforge {
namespace {

static_assert(sizeof(float) == 4 && std::numeric_limits<float>::is_iec559);

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffU));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffU));
}

std::uint64_t get_le(std::string_view bytes, std::size_t offset, int width) {
  std::uint64_t v = 0;
  for (int i = 0; i < width; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[offset + i])) << (8 * i);
  }
  return v;
}

}  // namespace

std::uint32_t crc32(std::span<const std::byte> bytes) noexcept {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large buffers in chunks.
  constexpr std::size_t kChunk = 1U << 30;
  for (std::size_t off = 0; off < bytes.size(); off += kChunk) {
    const auto n = std::min(kChunk, bytes.size() - off);
    crc = ::crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + off), static_cast<uInt>(n));
  }
  return static_cast<std::uint32_t>(crc);
}

std::uint32_t crc32(std::string_view bytes) noexcept {
  return crc32(std::as_bytes(std::span<const char>(bytes.data(), bytes.size())));
}

std::string encode_payload(const Mat<float>& m) {
  std::string out;
  out.reserve(static_cast<std::size_t>(m.size()) * 4);
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) put_u32(out, std::bit_cast<std::uint32_t>(m(r, c)));
  }
  return out;
}

Mat<float> decode_payload(std::string_view bytes, Index rows, Index cols) {
  if (rows < 0 || cols < 0 ||
      bytes.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols) * 4) {
    throw Error(Errc::ShapeMismatch, "payload size does not match shape");
  }
  Mat<float> m(rows, cols);
  std::size_t off = 0;
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c, off += 4) {
      m(r, c) = std::bit_cast<float>(static_cast<std::uint32_t>(get_le(bytes, off, 4)));
    }
  }
  return m;
}

std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IoFailure, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

void write_file_bytes(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::IoFailure, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(Errc::IoFailure, "short write to " + path.string());
}

void write_tensor_file(const std::filesystem::path& path, const Mat<float>& m) {
  std::string out;
  out.reserve(kTensorHeaderBytes + static_cast<std::size_t>(m.size()) * 4);
  out.append("MFT1");
  put_u32(out, kDtypeFloat32);
  put_u64(out, static_cast<std::uint64_t>(m.rows()));
  put_u64(out, static_cast<std::uint64_t>(m.cols()));
  out.append(encode_payload(m));
  write_file_bytes(path, out);
}

Mat<float> read_tensor_file(const std::filesystem::path& path) {
  const std::string bytes = read_file_bytes(path);
  const std::string where = path.string();
  if (bytes.size() < kTensorHeaderBytes || bytes.compare(0, 4, "MFT1") != 0) {
    throw Error(Errc::BadHeader, where + ": missing MFT1 magic");
  }
  if (get_le(bytes, 4, 4) != kDtypeFloat32) {
    throw Error(Errc::BadHeader, where + ": unsupported dtype code");
  }
  const std::uint64_t rows = get_le(bytes, 8, 8);
  const std::uint64_t cols = get_le(bytes, 16, 8);
  // Guard the multiplication before trusting the header.
  if (rows == 0 || cols == 0 || rows > (1ULL << 31) || cols > (1ULL << 31) ||
      bytes.size() - kTensorHeaderBytes != rows * cols * 4) {
    throw Error(Errc::BadHeader, where + ": shape does not match payload size");
  }
  Mat<float> m = decode_payload(std::string_view(bytes).substr(kTensorHeaderBytes),
                                static_cast<Index>(rows), static_cast<Index>(cols));
  require_finite(m, where);
  return m;
}

}  // namespace metricforge
