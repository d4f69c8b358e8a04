#include "gia/metrics.hpp"

#include <cmath>

#include "gia/errors.hpp"
#include "gia/image.hpp"

namespace gia::metrics {

std::vector<double> gaussian_window(const SsimParams& params) {
  const std::size_t k = params.window;
  const double center = static_cast<double>(k - 1) / 2.0;
  std::vector<double> w(k * k);
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      const double di = static_cast<double>(i) - center, dj = static_cast<double>(j) - center;
      w[i * k + j] = std::exp(-(di * di + dj * dj) / (2.0 * params.sigma * params.sigma));
      total += w[i * k + j];
    }
  for (auto& v : w) v /= total;
  return w;
}

double ssim(const Tensor& a, const Tensor& b, const SsimParams& params) {
  if (a.shape() != b.shape()) throw ShapeError("ssim inputs differ in shape");
  if (a.rank() != 3) throw ShapeError("ssim expects C x H x W images, got " + shape_str(a.shape()));
  const std::size_t c = a.dim(0), h = a.dim(1), w = a.dim(2), k = params.window;
  if (h < k || w < k) throw PreconditionError("ssim needs images of at least the window size");
  const auto win = gaussian_window(params);
  const double c1 = params.c1(), c2 = params.c2();
  const std::size_t oh = h - k + 1, ow = w - k + 1;

  double total = 0.0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* pa = a.data().data() + ch * h * w;
    const double* pb = b.data().data() + ch * h * w;
    double channel = 0.0;
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (std::size_t p = 0; p < k; ++p)
          for (std::size_t q = 0; q < k; ++q) {
            const double wt = win[p * k + q];
            const double va = pa[(i + p) * w + j + q], vb = pb[(i + p) * w + j + q];
            ma += wt * va;
            mb += wt * vb;
            saa += wt * va * va;
            sbb += wt * vb * vb;
            sab += wt * va * vb;
          }
        const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
        channel += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      }
    total += channel / static_cast<double>(oh * ow);
  }
  return total / static_cast<double>(c);
}

std::vector<std::size_t> max_weight_assignment(const std::vector<double>& scores, std::size_t n) {
  if (scores.size() != n * n) throw ShapeError("assignment score matrix is not n x n");
  // Hungarian method on cost = -score, 1-based potentials.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = -scores[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> assignment(n);
  for (std::size_t j = 1; j <= n; ++j) assignment[p[j] - 1] = j - 1;
  return assignment;
}

Assignment best_assignment_ssim(const Tensor& recon, const Tensor& truth, const SsimParams& params) {
  if (recon.shape() != truth.shape() || recon.rank() != 4) throw ShapeError("batch shapes differ");
  const std::size_t n = recon.dim(0);
  if (n == 0 || n > 16) throw PreconditionError("best-assignment SSIM supports 1 to 16 images");
  std::vector<Tensor> r, t;
  for (std::size_t i = 0; i < n; ++i) {
    r.push_back(batch_item(recon, i));
    t.push_back(batch_item(truth, i));
  }
  std::vector<double> scores(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) scores[i * n + j] = ssim(r[i], t[j], params);
  Assignment out;
  out.permutation = max_weight_assignment(scores, n);
  for (std::size_t i = 0; i < n; ++i) {
    out.per_image.push_back(scores[i * n + out.permutation[i]]);
    out.mean_ssim += out.per_image.back();
  }
  out.mean_ssim /= static_cast<double>(n);
  return out;
}

double mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("mse inputs differ in shape");
  if (a.numel() == 0) throw PreconditionError("mse of empty tensors");
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.numel());
}

double psnr(const Tensor& a, const Tensor& b, double dynamic_range) {
  const double e = mse(a, b);
  if (e == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(dynamic_range * dynamic_range / e);
}

}  // namespace gia::metrics
