#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "logcan/tensor.hpp"

namespace logcan {

// Malformed file contents. `offset` is the byte position of the defect.
struct FormatError : std::runtime_error {
  std::size_t offset;
  FormatError(std::size_t off, const std::string& msg)
      : std::runtime_error(msg + " (byte offset " + std::to_string(off) + ")"), offset(off) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor file format LGT1:
//   bytes 0-3  magic "LGT1"
//   byte  4    rank (1..5)
//   byte  5    dtype code: 0 = f32, 1 = f64
//   then rank little-endian u32 extents, then the row-major payload.
// Checkpoint format LGC1:
//   bytes 0-3  magic "LGC1"
//   u32 entry count, then per entry: u16 name length, UTF-8 name, an LGT1 record.

namespace detail {

inline void put_u16le(std::vector<unsigned char>& out, std::uint16_t v) {
  out.push_back(static_cast<unsigned char>(v & 0xff));
  out.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
}

inline void put_u32le(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

inline std::uint16_t get_u16le(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline std::uint32_t get_u32le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

template <class S>
constexpr unsigned char dtype_code() {
  static_assert(std::is_same_v<S, float> || std::is_same_v<S, double>,
                "LGT1 stores f32 or f64 tensors");
  return std::is_same_v<S, float> ? 0 : 1;
}

inline void need(const std::vector<unsigned char>& buf, std::size_t pos, std::size_t n,
                 const char* what) {
  if (pos + n > buf.size())
    throw FormatError(pos, std::string("truncated file: need ") + std::to_string(n) +
                               " bytes for " + what + ", have " + std::to_string(buf.size() - pos));
}

template <class S>
void encode_tensor(std::vector<unsigned char>& out, const Tensor<S>& t) {
  Tensor<S>::check_shape(t.shape);
  out.push_back('L');
  out.push_back('G');
  out.push_back('T');
  out.push_back('1');
  out.push_back(static_cast<unsigned char>(t.rank()));
  out.push_back(dtype_code<S>());
  for (index_t e : t.shape) put_u32le(out, static_cast<std::uint32_t>(e));
  const std::size_t bytes = t.data.size() * sizeof(S);
  const std::size_t base = out.size();
  out.resize(base + bytes);
  std::memcpy(out.data() + base, t.data.data(), bytes);
}

template <class S>
Tensor<S> decode_tensor(const std::vector<unsigned char>& buf, std::size_t& pos) {
  need(buf, pos, 6, "LGT1 header");
  if (std::memcmp(buf.data() + pos, "LGT1", 4) != 0)
    throw FormatError(pos, "bad magic, expected LGT1");
  const unsigned char rank = buf[pos + 4];
  if (rank < 1 || rank > kMaxRank)
    throw FormatError(pos + 4, "rank must be 1..5, got " + std::to_string(int(rank)));
  const unsigned char dtype = buf[pos + 5];
  if (dtype > 1) throw FormatError(pos + 5, "unknown dtype code " + std::to_string(int(dtype)));
  if (dtype != dtype_code<S>())
    throw FormatError(pos + 5, std::string("dtype mismatch: file holds ") +
                                   (dtype == 0 ? "f32" : "f64"));
  pos += 6;
  std::vector<index_t> shape(rank);
  for (int i = 0; i < rank; ++i) {
    need(buf, pos, 4, "extent");
    const std::uint32_t e = get_u32le(buf.data() + pos);
    if (e == 0) throw FormatError(pos, "zero extent");
    shape[i] = static_cast<index_t>(e);
    pos += 4;
  }
  const std::size_t n = static_cast<std::size_t>(numel_of(shape));
  need(buf, pos, n * sizeof(S), "payload");
  Tensor<S> t(shape);
  std::memcpy(t.data.data(), buf.data() + pos, n * sizeof(S));
  pos += n * sizeof(S);
  return t;
}

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failure on " + path);
  return buf;
}

inline void write_file(const std::string& path, const std::vector<unsigned char>& buf) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("write failure on " + path);
}

}  // namespace detail

template <class S>
void save_tensor(const Tensor<S>& t, const std::string& path) {
  std::vector<unsigned char> buf;
  detail::encode_tensor(buf, t);
  detail::write_file(path, buf);
}

template <class S>
Tensor<S> load_tensor(const std::string& path) {
  const auto buf = detail::read_file(path);
  std::size_t pos = 0;
  Tensor<S> t = detail::decode_tensor<S>(buf, pos);
  if (pos != buf.size())
    throw FormatError(pos, "trailing bytes after tensor payload");
  return t;
}

template <class S>
using NamedTensors = std::vector<std::pair<std::string, Tensor<S>>>;

template <class S>
void save_checkpoint(const NamedTensors<S>& entries, const std::string& path) {
  std::vector<unsigned char> buf;
  buf.push_back('L');
  buf.push_back('G');
  buf.push_back('C');
  buf.push_back('1');
  detail::put_u32le(buf, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    if (name.size() > 0xffff) throw IoError("checkpoint entry name too long: " + name);
    detail::put_u16le(buf, static_cast<std::uint16_t>(name.size()));
    buf.insert(buf.end(), name.begin(), name.end());
    detail::encode_tensor(buf, t);
  }
  detail::write_file(path, buf);
}

template <class S>
NamedTensors<S> load_checkpoint(const std::string& path) {
  const auto buf = detail::read_file(path);
  std::size_t pos = 0;
  detail::need(buf, pos, 8, "LGC1 header");
  if (std::memcmp(buf.data(), "LGC1", 4) != 0) throw FormatError(0, "bad magic, expected LGC1");
  pos = 4;
  const std::uint32_t count = detail::get_u32le(buf.data() + pos);
  pos += 4;
  NamedTensors<S> entries;
  entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    detail::need(buf, pos, 2, "entry name length");
    const std::uint16_t len = detail::get_u16le(buf.data() + pos);
    pos += 2;
    detail::need(buf, pos, len, "entry name");
    std::string name(reinterpret_cast<const char*>(buf.data() + pos), len);
    pos += len;
    entries.emplace_back(std::move(name), detail::decode_tensor<S>(buf, pos));
  }
  if (pos != buf.size()) throw FormatError(pos, "trailing bytes after last checkpoint entry");
  return entries;
}

}  // namespace logcan
