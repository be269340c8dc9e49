#pragma once

#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "mmfuse/tensor.hpp"

namespace mmfuse {

// MMF1 raw tensor container: little-endian header
//   magic "MMF1" | u32 rank | u64 extents... |
// followed by the row-major float64 payload.

namespace detail {

inline bool little_endian_host() {
  std::uint16_t probe = 1;
  unsigned char b;
  std::memcpy(&b, &probe, 1);
  return b == 1;
}

template <typename T>
void write_le(std::ostream& out, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if (!little_endian_host()) std::reverse(bytes, bytes + sizeof(T));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
  if (!out) throw DataError("MMF1: write failed");
}

template <typename T>
T read_le(std::istream& in) {
  unsigned char bytes[sizeof(T)];
  in.read(reinterpret_cast<char*>(bytes), sizeof(T));
  if (!in) throw DataError("MMF1: read failed or file truncated");
  if (!little_endian_host()) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

}  // namespace detail

inline void write_tensor(std::ostream& out, const Tensor& t) {
  out.write("MMF1", 4);
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) detail::write_le<std::uint64_t>(out, e);
  if (detail::little_endian_host()) {
    out.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  } else {
    for (double v : t.data()) detail::write_le<double>(out, v);
  }
  if (!out) throw DataError("MMF1: write failed");
}

inline Tensor read_tensor(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "MMF1", 4) != 0) {
    throw DataError("MMF1: bad magic, not a tensor file");
  }
  std::uint32_t rank = detail::read_le<std::uint32_t>(in);
  if (rank > 16) throw DataError("MMF1: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (std::uint32_t i = 0; i < rank; ++i) {
    std::uint64_t e = detail::read_le<std::uint64_t>(in);
    if (e == 0) throw DataError("MMF1: zero extent");
    shape[i] = static_cast<std::size_t>(e);
  }
  std::size_t n = numel(shape);
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) data[i] = detail::read_le<double>(in);
  return Tensor::from_data(std::move(shape), std::move(data));
}

inline void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("MMF1: cannot open " + path + " for writing");
  write_tensor(out, t);
}

inline Tensor load_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("MMF1: cannot open " + path);
  return read_tensor(in);
}

}  // namespace mmfuse
