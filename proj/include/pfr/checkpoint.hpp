#pragma once

// Checkpoint container: binary little-endian, magic "PF3R", version 1.
// Per tensor: u16 name length, UTF-8 name, u8 rank, u32 dims[rank],
// f32 payload row-major.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "pfr/common.hpp"

namespace pfr {

struct CheckpointTensor {
  std::vector<int> shape;
  std::vector<float> data;
};

using Checkpoint = std::map<std::string, CheckpointTensor>;

namespace detail {

template <typename U>
void put_le(std::string& out, U v) {
  for (size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(const std::string& buf, size_t& off, const char* what) {
  if (off + sizeof(U) > buf.size())
    throw FormatError(strfmt("checkpoint truncated at byte %zu while reading %s", off, what));
  U v = 0;
  for (size_t i = 0; i < sizeof(U); ++i)
    v |= static_cast<U>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
  off += sizeof(U);
  return v;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::string out;
  out += "PF3R";
  detail::put_le<uint32_t>(out, 1);
  detail::put_le<uint32_t>(out, static_cast<uint32_t>(ckpt.size()));
  for (const auto& [name, t] : ckpt) {
    if (name.size() > 0xffff) throw ValueError("checkpoint tensor name too long: " + name);
    if (static_cast<int64_t>(t.data.size()) != numel_of(t.shape))
      throw ShapeError("checkpoint tensor " + name + " data/shape mismatch");
    detail::put_le<uint16_t>(out, static_cast<uint16_t>(name.size()));
    out += name;
    detail::put_le<uint8_t>(out, static_cast<uint8_t>(t.shape.size()));
    for (int d : t.shape) detail::put_le<uint32_t>(out, static_cast<uint32_t>(d));
    size_t pos = out.size();
    out.resize(pos + t.data.size() * 4);
    std::memcpy(out.data() + pos, t.data.data(), t.data.size() * 4);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IOError("cannot open for write: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IOError("short write: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IOError("cannot open checkpoint: " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  size_t off = 0;
  if (buf.size() < 4 || buf.compare(0, 4, "PF3R") != 0)
    throw FormatError("bad checkpoint magic at byte 0 in " + path);
  off = 4;
  uint32_t version = detail::get_le<uint32_t>(buf, off, "version");
  if (version != 1) throw FormatError(strfmt("unsupported checkpoint version %u", version));
  uint32_t count = detail::get_le<uint32_t>(buf, off, "tensor count");
  Checkpoint ckpt;
  for (uint32_t i = 0; i < count; ++i) {
    uint16_t nlen = detail::get_le<uint16_t>(buf, off, "name length");
    if (off + nlen > buf.size())
      throw FormatError(strfmt("checkpoint truncated at byte %zu while reading name", off));
    std::string name = buf.substr(off, nlen);
    off += nlen;
    uint8_t rank = detail::get_le<uint8_t>(buf, off, "rank");
    CheckpointTensor t;
    int64_t n = 1;
    for (int r = 0; r < rank; ++r) {
      uint32_t d = detail::get_le<uint32_t>(buf, off, "dim");
      t.shape.push_back(static_cast<int>(d));
      n *= d;
    }
    if (off + static_cast<size_t>(n) * 4 > buf.size())
      throw FormatError(strfmt("checkpoint truncated at byte %zu while reading payload of %s", off,
                               name.c_str()));
    t.data.resize(static_cast<size_t>(n));
    std::memcpy(t.data.data(), buf.data() + off, static_cast<size_t>(n) * 4);
    off += static_cast<size_t>(n) * 4;
    ckpt.emplace(std::move(name), std::move(t));
  }
  return ckpt;
}

}  // namespace pfr
