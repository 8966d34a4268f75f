#pragma once

#include <filesystem>
#include <iosfwd>
#include <variant>

#include "efh/numcore/tensor.hpp"

// "TNSR" tensor records:
//   magic "TNSR" | u32 version = 1 | u32 ndim | ndim x u64 dims |
//   u32 dtype (0 = f32, 1 = f64) | little-endian row-major payload

namespace efh {

using AnyTensor = std::variant<TensorF, TensorD>;

inline constexpr std::uint32_t kTnsrVersion = 1;

template <typename T>
void write_tnsr(std::ostream& os, const Tensor<T>& t);

AnyTensor read_tnsr(std::istream& is);

/// Reads a record and converts it to T if the stored dtype differs.
template <typename T>
Tensor<T> read_tnsr_as(std::istream& is);

template <typename T>
void save_tnsr(const std::filesystem::path& path, const Tensor<T>& t);

AnyTensor load_tnsr(const std::filesystem::path& path);

// Little-endian scalar helpers shared by the other binary formats.
namespace io {
void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
void write_bytes(std::ostream& os, const void* data, std::size_t n);
void read_bytes(std::istream& is, void* data, std::size_t n);
}  // namespace io

}  // namespace efh
