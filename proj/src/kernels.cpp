#include "kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>

#include <Eigen/Core>

#include "gia/errors.hpp"

namespace gia::kernels {
namespace {

using Index = std::ptrdiff_t;

// Output columns [lo, hi) whose input column ow*stride + j - pad lies in [0, width).
void valid_range(Index j, Index pad, Index stride, Index width, Index out_width, Index& lo, Index& hi) {
  Index first = pad - j;  // smallest ow*stride that is in range
  lo = first <= 0 ? 0 : (first + stride - 1) / stride;
  Index last = width - 1 + pad - j;
  hi = last < 0 ? 0 : last / stride + 1;
  hi = std::min(hi, out_width);
  if (lo > hi) lo = hi;
}

struct ConvDims {
  Index n, c, h, w, k, kh, kw, oh, ow, stride, pad;
};

ConvDims dims_of(const Shape& x, const Shape& wk, const Shape& y, ad::ConvGeometry g) {
  return ConvDims{static_cast<Index>(x[0]),  static_cast<Index>(x[1]),  static_cast<Index>(x[2]),
                  static_cast<Index>(x[3]),  static_cast<Index>(wk[0]), static_cast<Index>(wk[2]),
                  static_cast<Index>(wk[3]), static_cast<Index>(y[2]),  static_cast<Index>(y[3]),
                  static_cast<Index>(g.stride), static_cast<Index>(g.pad)};
}

// Strides of `small` laid over `big`'s axes with zero on broadcast axes.
std::vector<std::size_t> broadcast_strides(const Shape& small, const Shape& big) {
  std::vector<std::size_t> strides(big.size(), 0);
  if (small.empty()) return strides;
  std::size_t s = 1;
  for (std::size_t i = big.size(); i-- > 0;) {
    strides[i] = small[i] == 1 ? 0 : s;
    s *= small[i];
  }
  return strides;
}

// Merges neighbouring axes that are all kept or all broadcast, so the inner
// loop runs over the longest contiguous stretch.
void collapse_axes(const Shape& big, const Shape& small, Shape& big_out, Shape& small_out) {
  big_out.clear();
  small_out.clear();
  int last = -1;  // 0 kept, 1 broadcast
  for (std::size_t ax = 0; ax < big.size(); ++ax) {
    if (big[ax] == 1) continue;
    const int kind = small[ax] == 1 ? 1 : 0;
    if (kind == last) {
      big_out.back() *= big[ax];
      small_out.back() *= small[ax];
    } else {
      big_out.push_back(big[ax]);
      small_out.push_back(small[ax]);
      last = kind;
    }
  }
  if (big_out.empty()) {
    big_out.push_back(1);
    small_out.push_back(1);
  }
}

// Calls fn(big_index, small_index) for every element of `big` in row-major order.
template <typename Fn>
void for_each_broadcast(const Shape& big_full, const Shape& small_full, Fn&& fn) {
  const std::size_t total = shape_numel(big_full);
  if (small_full.empty() || shape_numel(small_full) == 1) {
    for (std::size_t i = 0; i < total; ++i) fn(i, std::size_t{0});
    return;
  }
  if (total == 0) return;
  Shape big, small;
  collapse_axes(big_full, small_full, big, small);
  const auto strides = broadcast_strides(small, big);
  const std::size_t rank = big.size();
  const std::size_t inner = big[rank - 1];
  const std::size_t inner_stride = strides[rank - 1];
  std::vector<std::size_t> counter(rank, 0);
  std::size_t small_off = 0;
  for (std::size_t i = 0; i < total; i += inner) {
    if (inner_stride == 0) {
      for (std::size_t j = 0; j < inner; ++j) fn(i + j, small_off);
    } else {
      for (std::size_t j = 0; j < inner; ++j) fn(i + j, small_off + j);
    }
    // advance the odometer over all but the innermost axis
    for (std::size_t ax = rank - 1; ax-- > 0;) {
      small_off += strides[ax];
      if (++counter[ax] < big[ax]) break;
      small_off -= strides[ax] * big[ax];
      counter[ax] = 0;
    }
  }
}

// Calls fn(window_index, big_index) for every element of a window of shape
// `window` placed at `offsets` inside `big`.
template <typename Fn>
void for_each_window(const Shape& big, const Shape& window, std::span<const std::size_t> offsets, Fn&& fn) {
  const std::size_t rank = big.size();
  const std::size_t total = shape_numel(window);
  if (total == 0) return;
  if (rank == 0) {
    fn(std::size_t{0}, std::size_t{0});
    return;
  }
  std::vector<std::size_t> big_strides(rank, 1);
  for (std::size_t i = rank - 1; i-- > 0;) big_strides[i] = big_strides[i + 1] * big[i + 1];
  std::size_t base = 0;
  for (std::size_t ax = 0; ax < rank; ++ax) base += offsets[ax] * big_strides[ax];
  const std::size_t inner = window[rank - 1];
  std::vector<std::size_t> counter(rank, 0);
  std::size_t off = base;
  for (std::size_t i = 0; i < total; i += inner) {
    for (std::size_t j = 0; j < inner; ++j) fn(i + j, off + j);
    for (std::size_t ax = rank - 1; ax-- > 0;) {
      off += big_strides[ax];
      if (++counter[ax] < window[ax]) break;
      off -= big_strides[ax] * window[ax];
      counter[ax] = 0;
    }
  }
}

}  // namespace

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

bool is_pointwise(const ConvDims& d) { return d.kh == 1 && d.kw == 1 && d.stride == 1 && d.pad == 0; }

// Unfolds one image (C x H x W) into a (C*kh*kw) x (OH*OW) patch matrix.
void im2col(const double* x, const ConvDims& d, double* col) {
  const Index cols = d.oh * d.ow;
  for (Index c = 0; c < d.c; ++c)
    for (Index i = 0; i < d.kh; ++i)
      for (Index j = 0; j < d.kw; ++j) {
        double* row = col + ((c * d.kh + i) * d.kw + j) * cols;
        const double* plane = x + c * d.h * d.w;
        Index lo = 0, hi = 0;
        valid_range(j, d.pad, d.stride, d.w, d.ow, lo, hi);
        for (Index oh = 0; oh < d.oh; ++oh) {
          double* out = row + oh * d.ow;
          const Index ih = oh * d.stride + i - d.pad;
          if (ih < 0 || ih >= d.h) {
            std::fill(out, out + d.ow, 0.0);
            continue;
          }
          const double* src = plane + ih * d.w + j - d.pad;
          std::fill(out, out + lo, 0.0);
          if (d.stride == 1) {
            std::copy(src + lo, src + hi, out + lo);
          } else {
            for (Index ow = lo; ow < hi; ++ow) out[ow] = src[ow * d.stride];
          }
          std::fill(out + hi, out + d.ow, 0.0);
        }
      }
}

// Adjoint of im2col: accumulates patch-matrix entries back into the image.
void col2im(const double* col, const ConvDims& d, double* x) {
  const Index cols = d.oh * d.ow;
  for (Index c = 0; c < d.c; ++c)
    for (Index i = 0; i < d.kh; ++i)
      for (Index j = 0; j < d.kw; ++j) {
        const double* row = col + ((c * d.kh + i) * d.kw + j) * cols;
        double* plane = x + c * d.h * d.w;
        Index lo = 0, hi = 0;
        valid_range(j, d.pad, d.stride, d.w, d.ow, lo, hi);
        for (Index oh = 0; oh < d.oh; ++oh) {
          const Index ih = oh * d.stride + i - d.pad;
          if (ih < 0 || ih >= d.h) continue;
          const double* in = row + oh * d.ow;
          double* dst = plane + ih * d.w + j - d.pad;
          if (d.stride == 1) {
            for (Index ow = lo; ow < hi; ++ow) dst[ow] += in[ow];
          } else {
            for (Index ow = lo; ow < hi; ++ow) dst[ow * d.stride] += in[ow];
          }
        }
      }
}

thread_local std::vector<double> col_scratch;

double* scratch(std::size_t n) {
  if (col_scratch.size() < n) col_scratch.resize(n);
  return col_scratch.data();
}

}  // namespace

void conv2d(const Tensor& x, const Tensor& w, ad::ConvGeometry geom, Tensor& y) {
  const auto d = dims_of(x.shape(), w.shape(), y.shape(), geom);
  const Index patch = d.c * d.kh * d.kw, cols = d.oh * d.ow;
  ConstMapMat wm(w.data().data(), d.k, patch);
  double* col = is_pointwise(d) ? nullptr : scratch(static_cast<std::size_t>(patch * cols));
  for (Index n = 0; n < d.n; ++n) {
    const double* xn = x.data().data() + n * d.c * d.h * d.w;
    if (col != nullptr) im2col(xn, d, col);
    ConstMapMat cm(col != nullptr ? col : xn, patch, cols);
    MapMat ym(y.data().data() + n * d.k * cols, d.k, cols);
    ym.noalias() = wm * cm;
  }
}

void conv2d_input_grad(const Tensor& gy, const Tensor& w, ad::ConvGeometry geom, Tensor& gx) {
  const auto d = dims_of(gx.shape(), w.shape(), gy.shape(), geom);
  const Index patch = d.c * d.kh * d.kw, cols = d.oh * d.ow;
  ConstMapMat wm(w.data().data(), d.k, patch);
  if (is_pointwise(d)) {
    for (Index n = 0; n < d.n; ++n) {
      MapMat gxm(gx.data().data() + n * d.c * cols, d.c, cols);
      gxm.noalias() = wm.transpose() * ConstMapMat(gy.data().data() + n * d.k * cols, d.k, cols);
    }
    return;
  }
  std::fill(gx.storage().begin(), gx.storage().end(), 0.0);
  double* col = scratch(static_cast<std::size_t>(patch * cols));
  for (Index n = 0; n < d.n; ++n) {
    MapMat cm(col, patch, cols);
    cm.noalias() = wm.transpose() * ConstMapMat(gy.data().data() + n * d.k * cols, d.k, cols);
    col2im(col, d, gx.data().data() + n * d.c * d.h * d.w);
  }
}

void conv2d_weight_grad(const Tensor& x, const Tensor& gy, ad::ConvGeometry geom, Tensor& gw) {
  const auto d = dims_of(x.shape(), gw.shape(), gy.shape(), geom);
  const Index patch = d.c * d.kh * d.kw, cols = d.oh * d.ow;
  MapMat gwm(gw.data().data(), d.k, patch);
  gwm.setZero();
  double* col = is_pointwise(d) ? nullptr : scratch(static_cast<std::size_t>(patch * cols));
  for (Index n = 0; n < d.n; ++n) {
    const double* xn = x.data().data() + n * d.c * d.h * d.w;
    if (col != nullptr) im2col(xn, d, col);
    ConstMapMat cm(col != nullptr ? col : xn, patch, cols);
    gwm.noalias() += ConstMapMat(gy.data().data() + n * d.k * cols, d.k, cols) * cm.transpose();
  }
}

void matmul(const Tensor& a, const Tensor& b, Tensor& c) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::fill(c.storage().begin(), c.storage().end(), 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      for (std::size_t j = 0; j < n; ++j) c[i * n + j] += av * b[p * n + j];
    }
  }
}

void transpose(const Tensor& a, Tensor& out) {
  const std::size_t m = a.dim(0), n = a.dim(1);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  }
}

void broadcast_to(const Tensor& small, Tensor& big) {
  const double* s = small.data().data();
  double* b = big.data().data();
  for_each_broadcast(big.shape(), small.shape(), [&](std::size_t bi, std::size_t si) { b[bi] = s[si]; });
}

void sum_to(const Tensor& big, Tensor& small) {
  std::fill(small.storage().begin(), small.storage().end(), 0.0);
  const double* b = big.data().data();
  double* s = small.data().data();
  for_each_broadcast(big.shape(), small.shape(), [&](std::size_t bi, std::size_t si) { s[si] += b[bi]; });
}

void max_to(const Tensor& big, Tensor& small) {
  std::fill(small.storage().begin(), small.storage().end(), -std::numeric_limits<double>::infinity());
  const double* b = big.data().data();
  double* s = small.data().data();
  for_each_broadcast(big.shape(), small.shape(),
                     [&](std::size_t bi, std::size_t si) { s[si] = std::max(s[si], b[bi]); });
}

void pad(const Tensor& in, std::span<const std::size_t> before, Tensor& out) {
  std::fill(out.storage().begin(), out.storage().end(), 0.0);
  const double* ip = in.data().data();
  double* op = out.data().data();
  for_each_window(out.shape(), in.shape(), before, [&](std::size_t wi, std::size_t bi) { op[bi] = ip[wi]; });
}

void slice(const Tensor& in, std::span<const std::size_t> begin, Tensor& out) {
  const double* ip = in.data().data();
  double* op = out.data().data();
  for_each_window(in.shape(), out.shape(), begin, [&](std::size_t wi, std::size_t bi) { op[wi] = ip[bi]; });
}

void batchnorm_train(const Tensor& x, double epsilon, Tensor& out) {
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const double count = static_cast<double>(n * hw);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mean = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      const double* p = x.data().data() + (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) mean += p[i];
    }
    mean /= count;
    double var = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      const double* p = x.data().data() + (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) var += (p[i] - mean) * (p[i] - mean);
    }
    var /= count;
    const double inv = 1.0 / std::sqrt(var + epsilon);
    for (std::size_t b = 0; b < n; ++b) {
      const double* p = x.data().data() + (b * c + ch) * hw;
      double* q = out.data().data() + (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) q[i] = (p[i] - mean) * inv;
    }
  }
}

}  // namespace gia::kernels
