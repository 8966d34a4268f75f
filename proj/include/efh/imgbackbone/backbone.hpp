#pragma once

#include <filesystem>

#include "efh/numcore/layers.hpp"

// Convolutional stand-in backbone. Parameters under "backbone.":
//   stem        4x4 stride-4 patchify conv, 3 -> d
//   stage<i>    conv3x3, channel layer norm, SiLU, 2x2 stride-2 conv
// Stages 0, 1, 2 emit strides 8, 16, 32.

namespace efh::imgbackbone {

struct BackboneConfig {
  std::size_t d = 64;
};

template <typename T>
struct FeaturePyramid {
  Var<T> p3, p4, p5;  // [H/8, W/8, d], [H/16, W/16, d], [H/32, W/32, d]
};

template <typename T>
void init_backbone(ParamStore<T>& store, const Init& init, const BackboneConfig& cfg);

/// Throws ArgumentError unless `image` is [H, W, 3] with H, W positive
/// multiples of 32.
template <typename T>
void check_image(const Tensor<T>& image);

template <typename T>
FeaturePyramid<T> extract_pyramid(DiffContext<T>& ctx, const ParamStore<T>& store,
                                  const BackboneConfig& cfg, Var<T> image);

/// Reads a binary PPM (P6, maxval <= 255) or a TNSR [H, W, 3] file into
/// values in [0, 1]. The format is chosen by the magic bytes.
TensorF load_image(const std::filesystem::path& path);
TensorF read_ppm(std::istream& is);
/// Writes [H, W, 3] values in [0, 1] as 8-bit P6.
void write_ppm(std::ostream& os, const TensorF& image);
void save_ppm(const std::filesystem::path& path, const TensorF& image);

}  // namespace efh::imgbackbone
