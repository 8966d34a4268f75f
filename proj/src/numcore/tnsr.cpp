#include "efh/numcore/tnsr.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace efh {
namespace io {
namespace {

template <typename U>
U to_little(U v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    U out = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      out = static_cast<U>((out << 8) | ((v >> (8 * i)) & 0xFF));
    }
    return out;
  }
}

}  // namespace

void write_bytes(std::ostream& os, const void* data, std::size_t n) {
  os.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!os) throw FormatError("write failed");
}

void read_bytes(std::istream& is, void* data, std::size_t n) {
  is.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) throw FormatError("unexpected end of file");
}

void write_u32(std::ostream& os, std::uint32_t v) {
  v = to_little(v);
  write_bytes(os, &v, 4);
}

void write_u64(std::ostream& os, std::uint64_t v) {
  v = to_little(v);
  write_bytes(os, &v, 8);
}

std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  read_bytes(is, &v, 4);
  return to_little(v);
}

std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  read_bytes(is, &v, 8);
  return to_little(v);
}

}  // namespace io

namespace {

constexpr char kMagic[4] = {'T', 'N', 'S', 'R'};

template <typename T>
Tensor<T> read_payload(std::istream& is, Shape shape) {
  Tensor<T> t(std::move(shape));
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  for (auto& v : t.data()) {
    Bits b = sizeof(T) == 4 ? io::read_u32(is) : io::read_u64(is);
    std::memcpy(&v, &b, sizeof(T));
  }
  return t;
}

}  // namespace

template <typename T>
void write_tnsr(std::ostream& os, const Tensor<T>& t) {
  io::write_bytes(os, kMagic, 4);
  io::write_u32(os, kTnsrVersion);
  io::write_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) io::write_u64(os, d);
  io::write_u32(os, static_cast<std::uint32_t>(dtype_of<T>()));
  if constexpr (std::endian::native == std::endian::little) {
    io::write_bytes(os, t.raw(), t.numel() * sizeof(T));
  } else {
    using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    for (T v : t.data()) {
      Bits b;
      std::memcpy(&b, &v, sizeof(T));
      if constexpr (sizeof(T) == 4) io::write_u32(os, b); else io::write_u64(os, b);
    }
  }
}

AnyTensor read_tnsr(std::istream& is) {
  char magic[4];
  io::read_bytes(is, magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad TNSR magic");
  const std::uint32_t version = io::read_u32(is);
  if (version != kTnsrVersion) throw FormatError("unsupported TNSR version " + std::to_string(version));
  const std::uint32_t ndim = io::read_u32(is);
  if (ndim > 16) throw FormatError("TNSR rank too large");
  Shape shape(ndim);
  for (auto& d : shape) d = io::read_u64(is);
  const std::uint32_t dtype = io::read_u32(is);
  if (dtype == static_cast<std::uint32_t>(DType::f32)) return read_payload<float>(is, shape);
  if (dtype == static_cast<std::uint32_t>(DType::f64)) return read_payload<double>(is, shape);
  throw FormatError("unknown TNSR dtype code " + std::to_string(dtype));
}

template <typename T>
Tensor<T> read_tnsr_as(std::istream& is) {
  AnyTensor any = read_tnsr(is);
  return std::visit([](const auto& t) { return t.template cast<T>(); }, any);
}

template <typename T>
void save_tnsr(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_tnsr(os, t);
}

AnyTensor load_tnsr(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return read_tnsr(is);
}

template void write_tnsr<float>(std::ostream&, const TensorF&);
template void write_tnsr<double>(std::ostream&, const TensorD&);
template TensorF read_tnsr_as<float>(std::istream&);
template TensorD read_tnsr_as<double>(std::istream&);
template void save_tnsr<float>(const std::filesystem::path&, const TensorF&);
template void save_tnsr<double>(const std::filesystem::path&, const TensorD&);

}  // namespace efh
