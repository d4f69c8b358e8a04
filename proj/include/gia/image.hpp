#pragma once

#include <cstddef>
#include <vector>

#include "gia/tensor.hpp"

namespace gia {

// Per-channel affine map between pixel space [0,1] and the normalized space
// the model sees: normalized = (pixel - mean) / std.
struct Normalization {
  std::vector<double> mean;
  std::vector<double> stddev;

  static Normalization identity(std::size_t channels);
  // Channel mean and (biased) standard deviation of N x C x H x W pixels.
  static Normalization fit(const Tensor& pixels);

  std::size_t channels() const { return mean.size(); }
  void validate() const;
  Tensor normalize(const Tensor& pixels) const;
  Tensor denormalize(const Tensor& normalized) const;
  // Normalized-space images of pixel values 0 and 1.
  double lower(std::size_t c) const { return -mean[c] / stddev[c]; }
  double upper(std::size_t c) const { return (1.0 - mean[c]) / stddev[c]; }
  // Clamps a normalized N x C x H x W tensor to the image of [0,1].
  Tensor clamp(Tensor normalized) const;
};

// Image n of an N x C x H x W batch as a C x H x W tensor.
Tensor batch_item(const Tensor& batch, std::size_t n);

}  // namespace gia
