#include "efh/imgbackbone/backbone.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <istream>

#include "efh/numcore/tnsr.hpp"

namespace efh::imgbackbone {

template <typename T>
void init_backbone(ParamStore<T>& store, const Init& init, const BackboneConfig& cfg) {
  const std::size_t d = cfg.d;
  layers::init_conv(store, init, "backbone.stem", 4, 3, d);
  for (int i = 0; i < 3; ++i) {
    const std::string p = "backbone.stage" + std::to_string(i);
    layers::init_conv(store, init, p + ".conv", 3, d, d);
    layers::init_layer_norm(store, p + ".ln", d);
    layers::init_conv(store, init, p + ".down", 2, d, d);
  }
}

template <typename T>
void check_image(const Tensor<T>& image) {
  if (image.rank() != 3 || image.dim(2) != 3) {
    throw ArgumentError("image must be [H, W, 3], got " + shape_str(image.shape()));
  }
  const std::size_t h = image.dim(0), w = image.dim(1);
  if (h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0) {
    throw ArgumentError("image size " + std::to_string(h) + "x" + std::to_string(w) +
                        " is not a positive multiple of 32");
  }
}

template <typename T>
FeaturePyramid<T> extract_pyramid(DiffContext<T>& ctx, const ParamStore<T>& store,
                                  const BackboneConfig&, Var<T> image) {
  check_image(image.value());
  Var<T> x = layers::conv(ctx, store, "backbone.stem", image, 4, 4, 0);
  Var<T> out[3];
  for (int i = 0; i < 3; ++i) {
    const std::string p = "backbone.stage" + std::to_string(i);
    x = layers::conv(ctx, store, p + ".conv", x, 3, 1, 1);
    x = ops::silu(layers::layer_norm(ctx, store, p + ".ln", x));
    x = layers::conv(ctx, store, p + ".down", x, 2, 2, 0);
    out[i] = x;
  }
  return {out[0], out[1], out[2]};
}

namespace {

void skip_ppm_space(std::istream& is) {
  while (true) {
    const int c = is.peek();
    if (c == '#') {
      std::string line;
      std::getline(is, line);
    } else if (c != EOF && std::isspace(c)) {
      is.get();
    } else {
      return;
    }
  }
}

std::size_t read_ppm_int(std::istream& is) {
  skip_ppm_space(is);
  long v = -1;
  if (!(is >> v) || v <= 0) throw FormatError("malformed PPM header");
  return static_cast<std::size_t>(v);
}

}  // namespace

TensorF read_ppm(std::istream& is) {
  char magic[2];
  io::read_bytes(is, magic, 2);
  if (magic[0] != 'P' || magic[1] != '6') throw FormatError("not a binary PPM (P6) image");
  const std::size_t w = read_ppm_int(is);
  const std::size_t h = read_ppm_int(is);
  const std::size_t maxval = read_ppm_int(is);
  if (maxval > 255) throw FormatError("16-bit PPM is not supported");
  if (w > 16384 || h > 16384) throw FormatError("PPM image too large");
  if (!std::isspace(is.get())) throw FormatError("malformed PPM header");
  std::vector<unsigned char> bytes(w * h * 3);
  io::read_bytes(is, bytes.data(), bytes.size());
  TensorF img({h, w, 3});
  const float denom = static_cast<float>(maxval);
  for (std::size_t i = 0; i < bytes.size(); ++i) img[i] = static_cast<float>(bytes[i]) / denom;
  return img;
}

void write_ppm(std::ostream& os, const TensorF& image) {
  if (image.rank() != 3 || image.dim(2) != 3) throw ArgumentError("image must be [H, W, 3]");
  const std::string header =
      "P6\n" + std::to_string(image.dim(1)) + " " + std::to_string(image.dim(0)) + "\n255\n";
  io::write_bytes(os, header.data(), header.size());
  std::vector<unsigned char> bytes(image.numel());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const float v = std::clamp(image[i], 0.0f, 1.0f);
    bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
  }
  io::write_bytes(os, bytes.data(), bytes.size());
}

void save_ppm(const std::filesystem::path& path, const TensorF& image) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_ppm(os, image);
}

TensorF load_image(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open image " + path.string());
  const int first = is.peek();
  TensorF img = first == 'P' ? read_ppm(is) : read_tnsr_as<float>(is);
  if (img.rank() != 3 || img.dim(2) != 3) {
    throw FormatError(path.string() + ": image tensor must be [H, W, 3]");
  }
  return img;
}

#define EFH_INSTANTIATE(T)                                                                  \
  template void init_backbone<T>(ParamStore<T>&, const Init&, const BackboneConfig&);      \
  template void check_image<T>(const Tensor<T>&);                                          \
  template FeaturePyramid<T> extract_pyramid<T>(DiffContext<T>&, const ParamStore<T>&,     \
                                                const BackboneConfig&, Var<T>);
EFH_INSTANTIATE(float)
EFH_INSTANTIATE(double)
#undef EFH_INSTANTIATE

}  // namespace efh::imgbackbone
