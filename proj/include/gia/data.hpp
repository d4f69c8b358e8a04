#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "gia/image.hpp"
#include "gia/model.hpp"
#include "gia/tensor.hpp"

namespace gia::data {

// Pixel-space images in [0,1], N x C x H x W, with class labels.
struct Dataset {
  Tensor pixels;
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
};

struct SyntheticSpec {
  std::size_t count = 64;
  std::size_t height = 32;
  std::size_t width = 32;
  double noise = 0.08;  // background noise amplitude
};

enum class ShapeClass : std::size_t { Rectangle = 0, Circle = 1, Triangle = 2 };
constexpr std::size_t kShapeClasses = 3;

// Seeded colored shapes on noisy backgrounds; class = shape kind.
Dataset synthetic_shapes(const SyntheticSpec& spec, std::uint64_t seed);

// CIFAR binary: 3073-byte records (label byte, 3 x 1024 channel-planar pixels).
constexpr std::size_t kCifarRecord = 3073;
Dataset read_cifar_binary(const std::string& path);

// Directory of P6 PPM files plus a labels file of "<file> <label>" lines.
Dataset read_image_dir(const std::string& dir, const std::string& labels_file);

struct PpmImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> rgb;
};
PpmImage read_ppm(const std::string& path);
void write_ppm(const std::string& path, const PpmImage& image);
// 3 x H x W pixel tensor clamped to [0,1] and quantized to 8 bits.
PpmImage to_ppm(const Tensor& chw);
Tensor from_ppm(const PpmImage& image);
// Row of image pairs (top: originals, bottom: reconstructions), 1px separators.
PpmImage panel(const std::vector<Tensor>& top, const std::vector<Tensor>& bottom);

// Images `indices` of a dataset as a normalized batch.
nn::Batch make_batch(const Dataset& ds, const std::vector<std::size_t>& indices, const Normalization& norm);

// Disjoint batches of size `batch` drawn by a seeded shuffle.
std::vector<std::vector<std::size_t>> sample_batches(std::size_t dataset_size, std::size_t batch, std::size_t count,
                                                     std::uint64_t seed);

}  // namespace gia::data
