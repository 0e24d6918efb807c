#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "poisonlab/errors.hpp"

namespace poisonlab {

inline std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot read " + path.string());
  std::vector<unsigned char> out((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  return out;
}

inline void write_bytes(const std::filesystem::path& path,
                        const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::io, "short write to " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  auto b = read_bytes(path);
  return std::string(b.begin(), b.end());
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
  out << text;
  if (!out) fail(ErrorKind::io, "short write to " + path.string());
}

// Little-endian float32 codec, independent of host byte order so on-disk
// artifacts are portable and bit-stable.
inline void append_f32le(std::vector<unsigned char>& out, float v) {
  auto bits = std::bit_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(bits >> (8 * i)));
}

inline float read_f32le(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= std::uint32_t(p[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

inline std::vector<unsigned char> floats_to_f32le(const std::vector<float>& v) {
  std::vector<unsigned char> out;
  out.reserve(v.size() * 4);
  for (float x : v) append_f32le(out, x);
  return out;
}

inline std::vector<float> f32le_to_floats(const std::vector<unsigned char>& bytes) {
  if (bytes.size() % 4 != 0) fail(ErrorKind::format, "float32 payload not a multiple of 4 bytes");
  std::vector<float> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = read_f32le(bytes.data() + 4 * i);
  return out;
}

}  // namespace poisonlab
