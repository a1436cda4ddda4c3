// Named-tensor checkpoint container. Little-endian binary:
//   magic "DECOTNSR", u32 version, u32 tensor count,
//   per tensor: u32 name length, name bytes, u8 dtype (1 = f32, 2 = f64),
//               u32 rank, u64 extents..., raw values.

#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "deco/tensor.hpp"

namespace deco {

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

namespace ckptdetail {

constexpr char kMagic[8] = {'D', 'E', 'C', 'O', 'T', 'N', 'S', 'R'};

template <typename V>
void write_pod(std::ofstream& out, V v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::ifstream& in, const std::string& path) {
  V v;
  in.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!in) throw std::runtime_error("checkpoint: truncated file " + path);
  return v;
}

template <typename T>
constexpr std::uint8_t dtype_tag() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "checkpoint supports f32 and f64 tensors");
  return std::is_same_v<T, float> ? 1 : 2;
}

}  // namespace ckptdetail

template <typename T>
void save_checkpoint(const std::string& path,
                     const std::vector<NamedTensor<T>>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
  out.write(ckptdetail::kMagic, 8);
  ckptdetail::write_pod<std::uint32_t>(out, 1);
  ckptdetail::write_pod<std::uint32_t>(out, std::uint32_t(tensors.size()));
  for (const auto& [name, tensor] : tensors) {
    ckptdetail::write_pod<std::uint32_t>(out, std::uint32_t(name.size()));
    out.write(name.data(), std::streamsize(name.size()));
    ckptdetail::write_pod<std::uint8_t>(out, ckptdetail::dtype_tag<T>());
    ckptdetail::write_pod<std::uint32_t>(out,
                                         std::uint32_t(tensor.rank()));
    for (std::size_t d : tensor.shape())
      ckptdetail::write_pod<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(tensor.data()),
              std::streamsize(tensor.size() * sizeof(T)));
  }
  if (!out) throw std::runtime_error("checkpoint: short write to " + path);
}

template <typename T>
std::vector<NamedTensor<T>> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, ckptdetail::kMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  const auto version = ckptdetail::read_pod<std::uint32_t>(in, path);
  if (version != 1)
    throw std::runtime_error("checkpoint: unsupported version in " + path);
  const auto count = ckptdetail::read_pod<std::uint32_t>(in, path);

  std::vector<NamedTensor<T>> tensors;
  tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = ckptdetail::read_pod<std::uint32_t>(in, path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const auto dtype = ckptdetail::read_pod<std::uint8_t>(in, path);
    if (dtype != ckptdetail::dtype_tag<T>())
      throw std::runtime_error("checkpoint: dtype mismatch for '" + name +
                               "' in " + path +
                               " (precision config must match the file)");
    const auto rank = ckptdetail::read_pod<std::uint32_t>(in, path);
    Shape shape(rank);
    for (auto& d : shape)
      d = std::size_t(ckptdetail::read_pod<std::uint64_t>(in, path));
    Tensor<T> t(shape);
    in.read(reinterpret_cast<char*>(t.data()),
            std::streamsize(t.size() * sizeof(T)));
    if (!in) throw std::runtime_error("checkpoint: truncated file " + path);
    tensors.push_back({std::move(name), std::move(t)});
  }
  return tensors;
}

}  // namespace deco
