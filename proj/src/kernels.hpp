#pragma once

// Dense numeric kernels backing the graph primitives. Internal to the library.

#include <span>

#include "gia/autodiff.hpp"
#include "gia/tensor.hpp"

namespace gia::kernels {

void conv2d(const Tensor& x, const Tensor& w, ad::ConvGeometry geom, Tensor& y);
void conv2d_input_grad(const Tensor& gy, const Tensor& w, ad::ConvGeometry geom, Tensor& gx);
void conv2d_weight_grad(const Tensor& x, const Tensor& gy, ad::ConvGeometry geom, Tensor& gw);

void matmul(const Tensor& a, const Tensor& b, Tensor& c);
void transpose(const Tensor& a, Tensor& out);

// `big` has the full shape; `small` is broadcast-compatible (1-sized axes or rank 0).
void broadcast_to(const Tensor& small, Tensor& big);
void sum_to(const Tensor& big, Tensor& small);
void max_to(const Tensor& big, Tensor& small);

void pad(const Tensor& in, std::span<const std::size_t> before, Tensor& out);
void slice(const Tensor& in, std::span<const std::size_t> begin, Tensor& out);

void batchnorm_train(const Tensor& x, double epsilon, Tensor& out);

}  // namespace gia::kernels
