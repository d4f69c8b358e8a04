#include "gia/image.hpp"

#include <algorithm>
#include <cmath>

#include "gia/errors.hpp"

namespace gia {

namespace {

void require_nchw(const Tensor& t, std::size_t channels) {
  if (t.rank() != 4 || t.dim(1) != channels) {
    throw ShapeError("expected N x " + std::to_string(channels) + " x H x W, got " + shape_str(t.shape()));
  }
}

template <typename Fn>
Tensor map_channels(const Tensor& t, Fn fn) {
  Tensor out(t.shape());
  const std::size_t plane = t.dim(2) * t.dim(3);
  for (std::size_t i = 0; i < t.numel(); ++i) out[i] = fn((i / plane) % t.dim(1), t[i]);
  return out;
}

}  // namespace

Normalization Normalization::identity(std::size_t channels) {
  return {std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0)};
}

Normalization Normalization::fit(const Tensor& pixels) {
  if (pixels.rank() != 4 || pixels.numel() == 0) throw ShapeError("normalization needs a non-empty N x C x H x W batch");
  const std::size_t c = pixels.dim(1), plane = pixels.dim(2) * pixels.dim(3);
  const double count = static_cast<double>(pixels.dim(0) * plane);
  Normalization norm{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
  for (std::size_t i = 0; i < pixels.numel(); ++i) norm.mean[(i / plane) % c] += pixels[i];
  for (auto& m : norm.mean) m /= count;
  for (std::size_t i = 0; i < pixels.numel(); ++i) {
    const double d = pixels[i] - norm.mean[(i / plane) % c];
    norm.stddev[(i / plane) % c] += d * d;
  }
  for (auto& s : norm.stddev) s = std::sqrt(s / count);
  // a flat channel keeps unit scale
  for (auto& s : norm.stddev) {
    if (s < 1e-6) s = 1.0;
  }
  return norm;
}

void Normalization::validate() const {
  if (mean.empty() || mean.size() != stddev.size()) throw PreconditionError("normalization constants are incomplete");
  for (std::size_t c = 0; c < mean.size(); ++c) {
    if (!(stddev[c] > 0.0) || !std::isfinite(mean[c]) || !std::isfinite(stddev[c])) {
      throw PreconditionError("normalization constants must be finite with positive scale");
    }
  }
}

Tensor Normalization::normalize(const Tensor& pixels) const {
  require_nchw(pixels, channels());
  return map_channels(pixels, [&](std::size_t c, double v) { return (v - mean[c]) / stddev[c]; });
}

Tensor Normalization::denormalize(const Tensor& normalized) const {
  require_nchw(normalized, channels());
  return map_channels(normalized, [&](std::size_t c, double v) { return v * stddev[c] + mean[c]; });
}

Tensor Normalization::clamp(Tensor normalized) const {
  require_nchw(normalized, channels());
  return map_channels(normalized, [&](std::size_t c, double v) { return std::clamp(v, lower(c), upper(c)); });
}

Tensor batch_item(const Tensor& batch, std::size_t n) {
  if (batch.rank() != 4 || n >= batch.dim(0)) throw ShapeError("batch_item index out of range");
  const std::size_t per = batch.numel() / batch.dim(0);
  std::vector<double> data(batch.storage().begin() + static_cast<std::ptrdiff_t>(n * per),
                           batch.storage().begin() + static_cast<std::ptrdiff_t>((n + 1) * per));
  return Tensor({batch.dim(1), batch.dim(2), batch.dim(3)}, std::move(data));
}

}  // namespace gia
