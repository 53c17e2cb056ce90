// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "sfmc/grad/tensor.hpp"

namespace sfmc::grad {

// Elementwise binary ops broadcast with NumPy rules (trailing axes aligned).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
/// Elementwise minimum; ties route the gradient to `a`.
Tensor minimum(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double offset);
Tensor pow_scalar(const Tensor& x, double exponent);
/// max(x, lo); zero gradient where clamped.
Tensor clamp_min(const Tensor& x, double lo);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
/// d|x|/dx at 0 is 0.
Tensor abs(const Tensor& x);

/// [m,k] x [k,n] -> [m,n].
Tensor matmul(const Tensor& a, const Tensor& b);

/// Cross-correlation. x [N,Cin,H,W], w [Cout,Cin,kh,kw], bias [Cout] or
/// undefined. Zero padding `pad` on both sides of each spatial axis.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride = 1,
              std::size_t pad = 0);
/// Cross-correlation, stride 1. x [N,Cin,D,H,W], w [Cout,Cin,kd,kh,kw].
Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& bias,
              std::array<std::size_t, 3> pad = {0, 0, 0});

Tensor softmax(const Tensor& x, std::size_t axis);

Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, std::size_t axis, bool keepdim = false);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, std::size_t axis, bool keepdim = false);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
/// Half-open range [begin, end) along `axis`.
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor& x, const Shape& shape);
/// Broadcasts size-1 axes (and missing leading axes) up to `shape`.
Tensor expand(const Tensor& x, const Shape& shape);

/// Bilinear sampling of field [C,H,W] at coords [2,...] (u plane first, then
/// v; pixel centers at integers). Output [C,...]. Out-of-range neighbors
/// read zero. Differentiable w.r.t. field and coordinates.
Tensor bilinear_sample(const Tensor& field, const Tensor& coords);

/// Non-overlapping k x k average pooling of x [N,C,H,W]; H, W divisible by k.
Tensor avg_pool2d(const Tensor& x, std::size_t k);

enum class UpsampleAlign {
  kCorners,  // first and last samples of input and output coincide
  kStrided,  // output pixel o sits at input o * in / out (strided-conv grid)
};

/// Bilinear resize of x [C,h,w] to [C,out_h,out_w]. kStrided extrapolates
/// linearly over the last input interval.
Tensor upsample_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w,
                         UpsampleAlign align = UpsampleAlign::kCorners);

// Kernels shared with non-graph code paths.
namespace kernels {
struct BilinearTap {
  std::array<long, 4> index;  // flat y*W+x or -1 when out of range
  std::array<double, 4> weight;
  std::array<double, 4> du;  // d weight / du
  std::array<double, 4> dv;  // d weight / dv
};
BilinearTap bilinear_tap(double u, double v, std::size_t width, std::size_t height);
}  // namespace kernels

}  // namespace sfmc::grad
