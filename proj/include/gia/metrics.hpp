#pragma once

#include <cstddef>
#include <limits>
#include <vector>

#include "gia/tensor.hpp"

namespace gia::metrics {

struct SsimParams {
  std::size_t window = 7;
  double sigma = 1.5;
  double dynamic_range = 1.0;

  double c1() const { return (0.01 * dynamic_range) * (0.01 * dynamic_range); }
  double c2() const { return (0.03 * dynamic_range) * (0.03 * dynamic_range); }
};

// Normalized window x window Gaussian weights, row-major.
std::vector<double> gaussian_window(const SsimParams& params);

// Mean local SSIM over valid window positions of two C x H x W images,
// averaged over channels. Inputs are pixel-space images.
double ssim(const Tensor& a, const Tensor& b, const SsimParams& params = {});

struct Assignment {
  double mean_ssim = 0.0;
  std::vector<std::size_t> permutation;  // recon image i is matched to true image permutation[i]
  std::vector<double> per_image;         // SSIM of each matched pair, recon order
};

// Optimal one-to-one matching of reconstructions to originals (N x C x H x W,
// N <= 16) maximizing total SSIM.
Assignment best_assignment_ssim(const Tensor& recon, const Tensor& truth, const SsimParams& params = {});

// Maximum-weight perfect matching of a square score matrix (row-major).
std::vector<std::size_t> max_weight_assignment(const std::vector<double>& scores, std::size_t n);

double mse(const Tensor& a, const Tensor& b);
// 10 log10(L^2 / mse); +infinity when the images are identical.
double psnr(const Tensor& a, const Tensor& b, double dynamic_range = 1.0);

}  // namespace gia::metrics
