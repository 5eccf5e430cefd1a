#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "adk/tensor.hpp"

namespace adk {

// Flat checkpoint container: header (magic, format version, precision) then
// name -> (shape, raw little-endian float payload) entries. Payloads are
// written in the tensor's scalar width; 32- and 64-bit files are distinct.
inline constexpr char kCheckpointMagic[8] = {'A', 'D', 'K', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename V>
void write_pod(std::ostream& os, V value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(V));
}

template <typename V>
V read_pod(std::istream& is) {
  V value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(V));
  if (!is) throw std::runtime_error("checkpoint: unexpected end of file");
  return value;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Tensor<T>>>& entries) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open for write: " + path);
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::write_pod<std::uint32_t>(os, kCheckpointVersion);
  detail::write_pod<std::uint32_t>(os, sizeof(T) * 8);
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, tensor] : entries) {
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(tensor.shape().size()));
    for (std::int64_t d : tensor.shape()) detail::write_pod<std::int64_t>(os, d);
    std::span<const T> data = tensor.data();
    os.write(reinterpret_cast<const char*>(data.data()),
             static_cast<std::streamsize>(data.size() * sizeof(T)));
  }
  if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

template <typename T>
std::map<std::string, Tensor<T>> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  const auto version = detail::read_pod<std::uint32_t>(is);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported format version " +
                             std::to_string(version));
  const auto precision = detail::read_pod<std::uint32_t>(is);
  if (precision != sizeof(T) * 8)
    throw std::runtime_error("checkpoint: file precision is " + std::to_string(precision) +
                             "-bit, requested " + std::to_string(sizeof(T) * 8) + "-bit");
  const auto count = detail::read_pod<std::uint32_t>(is);
  std::map<std::string, Tensor<T>> out;
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto name_len = detail::read_pod<std::uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const auto ndim = detail::read_pod<std::uint32_t>(is);
    Shape shape(ndim);
    for (auto& d : shape) d = detail::read_pod<std::int64_t>(is);
    std::vector<T> data(static_cast<std::size_t>(shape_numel(shape)));
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(T)));
    if (!is) throw std::runtime_error("checkpoint: truncated payload in " + path);
    out.emplace(std::move(name), Tensor<T>::from_vector(std::move(shape), std::move(data)));
  }
  return out;
}

}  // namespace adk
