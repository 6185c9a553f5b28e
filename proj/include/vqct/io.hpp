#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "vqct/errors.hpp"

namespace vqct::io {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

template <typename T>
void put_f32_block(std::string& out, std::span<const T> values) {
  out.reserve(out.size() + 4 * values.size());
  for (auto v : values) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

template <typename T>
std::vector<T> get_f32_block(const std::string& payload, std::size_t offset, std::size_t count) {
  if (offset > payload.size() || count > (payload.size() - offset) / 4) throw FormatError("payload truncated");
  std::vector<T> out(count);
  const auto* p = reinterpret_cast<const unsigned char*>(payload.data()) + offset;
  for (std::size_t i = 0; i < count; ++i) out[i] = static_cast<T>(std::bit_cast<float>(get_u32(p + 4 * i)));
  return out;
}

// Magic + u32 LE header length + header + payload.
struct Framed {
  std::string header;
  std::string payload;
};

inline std::string frame(const char (&magic)[9], const std::string& header, const std::string& payload) {
  std::string out(magic, 8);
  put_u32(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  out += payload;
  return out;
}

inline Framed unframe(const char (&magic)[9], const std::string& bytes, const std::string& what) {
  if (bytes.size() < 12 || bytes.compare(0, 8, magic, 8) != 0) throw FormatError("not a " + what + " file (bad magic)");
  const std::size_t hlen = get_u32(reinterpret_cast<const unsigned char*>(bytes.data()) + 8);
  if (hlen > bytes.size() - 12) throw FormatError(what + " header truncated");
  return {bytes.substr(12, hlen), bytes.substr(12 + hlen)};
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path);
}

}  // namespace vqct::io
