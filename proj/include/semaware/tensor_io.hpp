#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <stdexcept>
#include <string>

#include "semaware/tensor.hpp"

namespace semaware {

// SAWT: "SAWT" | u32 version=1 | u32 ndim | ndim x u32 dims | float32 payload.
// SAWM: "SAWM" | u32 version=1 | records until EOF, each
//       u32 name_len | name bytes | SAWT blob.
// All integers and floats are little-endian; payload is row-major.
inline constexpr std::array<char, 4> kTensorMagic{'S', 'A', 'W', 'T'};
inline constexpr std::array<char, 4> kCheckpointMagic{'S', 'A', 'W', 'M'};
inline constexpr std::uint32_t kTensorFormatVersion = 1;
inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline bool get_u32(std::istream& is, std::uint32_t& v) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
  v = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
      (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  return true;
}

inline std::uint32_t read_u32(std::istream& is, const char* what) {
  std::uint32_t v;
  if (!get_u32(is, v)) throw FormatError(std::string("truncated stream reading ") + what);
  return v;
}

}  // namespace detail

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  os.write(kTensorMagic.data(), 4);
  detail::put_u32(os, kTensorFormatVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.dims()) detail::put_u32(os, static_cast<std::uint32_t>(d));
  for (std::size_t i = 0; i < t.size(); ++i) {
    const float f = static_cast<float>(t[i]);
    detail::put_u32(os, std::bit_cast<std::uint32_t>(f));
  }
  if (!os) throw FormatError("failed writing tensor");
}

inline Tensor<float> read_tensor(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4)) throw FormatError("truncated stream reading tensor magic");
  if (std::memcmp(magic, kTensorMagic.data(), 4) != 0) throw FormatError("bad tensor magic");
  const auto version = detail::read_u32(is, "tensor version");
  if (version != kTensorFormatVersion) {
    throw FormatError("unsupported tensor format version " + std::to_string(version));
  }
  const auto ndim = detail::read_u32(is, "tensor rank");
  if (ndim < 1 || ndim > 4) throw FormatError("tensor rank out of range: " + std::to_string(ndim));
  Shape dims(ndim);
  for (auto& d : dims) d = detail::read_u32(is, "tensor dims");
  validate_shape(dims);
  std::vector<float> data(shape_numel(dims));
  for (auto& v : data) v = std::bit_cast<float>(detail::read_u32(is, "tensor payload"));
  return Tensor<float>(std::move(dims), std::move(data));
}

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

inline Tensor<float> load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  try {
    return read_tensor(is);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

using NamedTensors = std::map<std::string, Tensor<float>>;

inline void write_checkpoint(std::ostream& os, const NamedTensors& records) {
  os.write(kCheckpointMagic.data(), 4);
  detail::put_u32(os, kCheckpointFormatVersion);
  for (const auto& [name, t] : records) {
    detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(os, t);
  }
  if (!os) throw FormatError("failed writing checkpoint");
}

inline NamedTensors read_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4)) throw FormatError("truncated checkpoint header");
  if (std::memcmp(magic, kCheckpointMagic.data(), 4) != 0) throw FormatError("bad checkpoint magic");
  const auto version = detail::read_u32(is, "checkpoint version");
  if (version != kCheckpointFormatVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  NamedTensors out;
  std::uint32_t len;
  while (detail::get_u32(is, len)) {
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw FormatError("truncated checkpoint record name");
    out.emplace(std::move(name), read_tensor(is));
  }
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const NamedTensors& records) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_checkpoint(os, records);
}

inline NamedTensors load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  try {
    return read_checkpoint(is);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace semaware
