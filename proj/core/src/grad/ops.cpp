// SPDX-License-Identifier: Apache-2.0
#include "sfmc/grad/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "sfmc/error.hpp"
#include "sfmc/parallel.hpp"

namespace sfmc::grad {

namespace {

[[noreturn]] void shape_error(const std::string& op, const Shape& a, const Shape& b) {
  throw Error(ErrorCode::kShapeMismatch, op + ": " + shape_str(a) + " vs " + shape_str(b));
}

[[noreturn]] void shape_error(const std::string& op, const Shape& a, const std::string& what) {
  throw Error(ErrorCode::kShapeMismatch, op + ": " + shape_str(a) + " " + what);
}

// Per-output-axis strides of an operand broadcast into `out` (0 on
// broadcast axes).
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    std::size_t ia = in.size() - 1 - k;
    std::size_t oa = out.size() - 1 - k;
    strides[oa] = in[ia] == 1 ? 0 : stride;
    stride *= in[ia];
  }
  return strides;
}

Shape broadcast_shape(const std::string& op, const Shape& a, const Shape& b) {
  Shape out(std::max(a.size(), b.size()), 1);
  for (std::size_t k = 0; k < out.size(); ++k) {
    std::size_t ea = k < a.size() ? a[a.size() - 1 - k] : 1;
    std::size_t eb = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (ea != eb && ea != 1 && eb != 1) shape_error(op, a, b);
    out[out.size() - 1 - k] = std::max(ea, eb);
  }
  return out;
}

// Calls fn(out_index, a_index, b_index) over the broadcast output.
template <typename Fn>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, Fn&& fn) {
  const std::size_t n = numel_of(out);
  const std::size_t rank = out.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < n; ++o) {
    fn(o, ia, ib);
    for (std::size_t k = rank; k-- > 0;) {
      ++idx[k];
      ia += sa[k];
      ib += sb[k];
      if (idx[k] < out[k]) break;
      ia -= sa[k] * out[k];
      ib -= sb[k] * out[k];
      idx[k] = 0;
    }
  }
}

// f(a, b) with partials da(a, b), db(a, b).
template <typename F, typename DA, typename DB>
Tensor binary(const std::string& op, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  const Shape& sa_shape = a.shape();
  const Shape& sb_shape = b.shape();
  if (sa_shape == sb_shape) {
    const std::size_t n = a.numel();
    std::vector<double> out(n);
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i], bv[i]);
    return make_result(op, sa_shape, std::move(out), {a, b},
                       [a, b, da, db](std::span<const double> g, std::span<double* const> gi) {
                         auto av = a.values();
                         auto bv = b.values();
                         if (gi[0])
                           for (std::size_t i = 0; i < g.size(); ++i)
                             gi[0][i] += g[i] * da(av[i], bv[i]);
                         if (gi[1])
                           for (std::size_t i = 0; i < g.size(); ++i)
                             gi[1][i] += g[i] * db(av[i], bv[i]);
                       });
  }
  Shape out_shape = broadcast_shape(op, sa_shape, sb_shape);
  auto sa = broadcast_strides(sa_shape, out_shape);
  auto sb = broadcast_strides(sb_shape, out_shape);
  std::vector<double> out(numel_of(out_shape));
  {
    auto av = a.values();
    auto bv = b.values();
    for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) {
      out[o] = f(av[i], bv[j]);
    });
  }
  return make_result(
      op, out_shape, std::move(out), {a, b},
      [a, b, da, db, out_shape, sa, sb](std::span<const double> g, std::span<double* const> gi) {
        auto av = a.values();
        auto bv = b.values();
        for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) {
          if (gi[0]) gi[0][i] += g[o] * da(av[i], bv[j]);
          if (gi[1]) gi[1][j] += g[o] * db(av[i], bv[j]);
        });
      });
}

// y = f(x) with dy/dx expressed through (x, y).
template <typename F, typename D>
Tensor unary(const std::string& op, const Tensor& x, F f, D d) {
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  std::vector<double> saved = out;
  return make_result(op, x.shape(), std::move(out), {x},
                     [x, d, saved = std::move(saved)](std::span<const double> g,
                                                      std::span<double* const> gi) {
                       auto xv = x.values();
                       for (std::size_t i = 0; i < g.size(); ++i)
                         gi[0][i] += g[i] * d(xv[i], saved[i]);
                     });
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r{1, s[axis], 1};
  for (std::size_t k = 0; k < axis; ++k) r.outer *= s[k];
  for (std::size_t k = axis + 1; k < s.size(); ++k) r.inner *= s[k];
  return r;
}

void check_axis(const std::string& op, const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) shape_error(op, x.shape(), "has no axis " + std::to_string(axis));
}

// Deterministic dot product with four fixed partial sums.
double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

// Range of output positions o with 0 <= o*stride + k - pad < in.
std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t in, std::size_t k,
                                                std::size_t pad, std::size_t stride) {
  // o*stride >= pad - k
  long lo_num = static_cast<long>(pad) - static_cast<long>(k);
  long lo = lo_num <= 0 ? 0 : (lo_num + static_cast<long>(stride) - 1) / static_cast<long>(stride);
  // o*stride <= in - 1 + pad - k
  long hi_num = static_cast<long>(in) - 1 + static_cast<long>(pad) - static_cast<long>(k);
  long hi = hi_num < 0 ? -1 : hi_num / static_cast<long>(stride);
  hi = std::min<long>(hi, static_cast<long>(out) - 1);
  if (hi < lo) return {0, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi + 1)};
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; }, [](double x, double y) { return -x / (y * y); });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  return binary(
      "minimum", a, b, [](double x, double y) { return x <= y ? x : y; },
      [](double x, double y) { return x <= y ? 1.0 : 0.0; },
      [](double x, double y) { return x <= y ? 0.0 : 1.0; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor scale(const Tensor& x, double factor) {
  return unary(
      "scale", x, [factor](double v) { return v * factor; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double offset) {
  return unary(
      "add_scalar", x, [offset](double v) { return v + offset; },
      [](double, double) { return 1.0; });
}

Tensor pow_scalar(const Tensor& x, double exponent) {
  return unary(
      "pow", x, [exponent](double v) { return std::pow(v, exponent); },
      [exponent](double v, double) { return exponent * std::pow(v, exponent - 1.0); });
}

Tensor clamp_min(const Tensor& x, double lo) {
  return unary(
      "clamp_min", x, [lo](double v) { return v < lo ? lo : v; },
      [lo](double v, double) { return v < lo ? 0.0 : 1.0; });
}

Tensor relu(const Tensor& x) {
  return unary(
      "relu", x, [](double v) { return v > 0 ? v : 0.0; },
      [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      "sigmoid", x,
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& x) {
  return unary(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor abs(const Tensor& x) {
  return unary(
      "abs", x, [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

// ---------------------------------------------------------------------------
// Linear algebra and convolution

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) shape_error("matmul", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double s = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += s * bv[p * n + j];
    }
  return make_result("matmul", {m, n}, std::move(out), {a, b},
                     [a, b, m, k, n](std::span<const double> g, std::span<double* const> gi) {
                       auto av = a.values();
                       auto bv = b.values();
                       if (gi[0])
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t p = 0; p < k; ++p)
                             gi[0][i * k + p] += dot(&g[i * n], &bv[p * n], n);
                       if (gi[1])
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t p = 0; p < k; ++p) {
                             const double s = av[i * k + p];
                             for (std::size_t j = 0; j < n; ++j) gi[1][p * n + j] += s * g[i * n + j];
                           }
                     });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
              std::size_t pad) {
  if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1)) shape_error("conv2d", x.shape(), w.shape());
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != w.dim(0)))
    shape_error("conv2d bias", bias.shape(), w.shape());
  if (stride == 0) shape_error("conv2d", x.shape(), "stride must be >= 1");
  const std::size_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Co = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  if (H + 2 * pad < KH || W + 2 * pad < KW) shape_error("conv2d", x.shape(), w.shape());
  const std::size_t Ho = (H + 2 * pad - KH) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - KW) / stride + 1;

  std::vector<double> out(N * Co * Ho * Wo);
  {
    auto xv = x.values();
    auto wv = w.values();
    std::span<const double> bv = bias.defined() ? bias.values() : std::span<const double>{};
    parallel_for(N * Co, [&](std::size_t job) {
      const std::size_t n = job / Co, co = job % Co;
      double* o = &out[(n * Co + co) * Ho * Wo];
      std::fill(o, o + Ho * Wo, bv.empty() ? 0.0 : bv[co]);
      for (std::size_t ci = 0; ci < Ci; ++ci) {
        const double* in = &xv[(n * Ci + ci) * H * W];
        for (std::size_t ky = 0; ky < KH; ++ky) {
          auto [y0, y1] = valid_range(Ho, H, ky, pad, stride);
          for (std::size_t kx = 0; kx < KW; ++kx) {
            auto [x0, x1] = valid_range(Wo, W, kx, pad, stride);
            const double wk = wv[((co * Ci + ci) * KH + ky) * KW + kx];
            for (std::size_t y = y0; y < y1; ++y) {
              const double* in_row = in + (y * stride + ky - pad) * W;
              double* o_row = o + y * Wo;
              if (stride == 1) {
                const double* src = in_row + kx - pad;
                for (std::size_t xo = x0; xo < x1; ++xo) o_row[xo] += wk * src[xo];
              } else {
                for (std::size_t xo = x0; xo < x1; ++xo)
                  o_row[xo] += wk * in_row[xo * stride + kx - pad];
              }
            }
          }
        }
      }
    });
  }

  std::vector<Tensor> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return make_result(
      "conv2d", {N, Co, Ho, Wo}, std::move(out), std::move(inputs),
      [=](std::span<const double> g, std::span<double* const> gi) {
        auto xv = x.values();
        auto wv = w.values();
        if (gi[0]) {
          parallel_for(N * Ci, [&](std::size_t job) {
            const std::size_t n = job / Ci, ci = job % Ci;
            double* gin = gi[0] + (n * Ci + ci) * H * W;
            for (std::size_t co = 0; co < Co; ++co) {
              const double* go = &g[(n * Co + co) * Ho * Wo];
              for (std::size_t ky = 0; ky < KH; ++ky) {
                auto [y0, y1] = valid_range(Ho, H, ky, pad, stride);
                for (std::size_t kx = 0; kx < KW; ++kx) {
                  auto [x0, x1] = valid_range(Wo, W, kx, pad, stride);
                  const double wk = wv[((co * Ci + ci) * KH + ky) * KW + kx];
                  for (std::size_t y = y0; y < y1; ++y) {
                    double* gin_row = gin + (y * stride + ky - pad) * W;
                    const double* go_row = go + y * Wo;
                    for (std::size_t xo = x0; xo < x1; ++xo)
                      gin_row[xo * stride + kx - pad] += wk * go_row[xo];
                  }
                }
              }
            }
          });
        }
        if (gi[1]) {
          parallel_for(Co, [&](std::size_t co) {
            for (std::size_t ci = 0; ci < Ci; ++ci)
              for (std::size_t ky = 0; ky < KH; ++ky) {
                auto [y0, y1] = valid_range(Ho, H, ky, pad, stride);
                for (std::size_t kx = 0; kx < KW; ++kx) {
                  auto [x0, x1] = valid_range(Wo, W, kx, pad, stride);
                  double acc = 0.0;
                  for (std::size_t n = 0; n < N; ++n) {
                    const double* in = &xv[(n * Ci + ci) * H * W];
                    const double* go = &g[(n * Co + co) * Ho * Wo];
                    for (std::size_t y = y0; y < y1; ++y) {
                      const double* in_row = in + (y * stride + ky - pad) * W;
                      const double* go_row = go + y * Wo;
                      if (stride == 1 && x1 > x0) {
                        acc += dot(go_row + x0, in_row + x0 + kx - pad, x1 - x0);
                      } else {
                        for (std::size_t xo = x0; xo < x1; ++xo)
                          acc += go_row[xo] * in_row[xo * stride + kx - pad];
                      }
                    }
                  }
                  gi[1][((co * Ci + ci) * KH + ky) * KW + kx] += acc;
                }
              }
          });
        }
        if (gi.size() > 2 && gi[2]) {
          for (std::size_t co = 0; co < Co; ++co) {
            double acc = 0.0;
            for (std::size_t n = 0; n < N; ++n)
              for (std::size_t i = 0; i < Ho * Wo; ++i) acc += g[(n * Co + co) * Ho * Wo + i];
            gi[2][co] += acc;
          }
        }
      });
}

Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& bias,
              std::array<std::size_t, 3> pad) {
  if (x.rank() != 5 || w.rank() != 5 || x.dim(1) != w.dim(1)) shape_error("conv3d", x.shape(), w.shape());
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != w.dim(0)))
    shape_error("conv3d bias", bias.shape(), w.shape());
  const std::size_t N = x.dim(0), Ci = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const std::size_t Co = w.dim(0), KD = w.dim(2), KH = w.dim(3), KW = w.dim(4);
  const auto [pd, ph, pw] = pad;
  if (D + 2 * pd < KD || H + 2 * ph < KH || W + 2 * pw < KW) shape_error("conv3d", x.shape(), w.shape());
  const std::size_t Do = D + 2 * pd - KD + 1, Ho = H + 2 * ph - KH + 1, Wo = W + 2 * pw - KW + 1;
  const std::size_t in_vol = D * H * W, out_vol = Do * Ho * Wo;

  std::vector<double> out(N * Co * out_vol);
  {
    auto xv = x.values();
    auto wv = w.values();
    std::span<const double> bv = bias.defined() ? bias.values() : std::span<const double>{};
    parallel_for(N * Co, [&](std::size_t job) {
      const std::size_t n = job / Co, co = job % Co;
      double* o = &out[(n * Co + co) * out_vol];
      std::fill(o, o + out_vol, bv.empty() ? 0.0 : bv[co]);
      for (std::size_t ci = 0; ci < Ci; ++ci) {
        const double* in = &xv[(n * Ci + ci) * in_vol];
        for (std::size_t kd = 0; kd < KD; ++kd) {
          auto [z0, z1] = valid_range(Do, D, kd, pd, 1);
          for (std::size_t kh = 0; kh < KH; ++kh) {
            auto [y0, y1] = valid_range(Ho, H, kh, ph, 1);
            for (std::size_t kw = 0; kw < KW; ++kw) {
              auto [x0, x1] = valid_range(Wo, W, kw, pw, 1);
              const double wk = wv[(((co * Ci + ci) * KD + kd) * KH + kh) * KW + kw];
              for (std::size_t z = z0; z < z1; ++z)
                for (std::size_t y = y0; y < y1; ++y) {
                  const double* src = in + ((z + kd - pd) * H + (y + kh - ph)) * W + kw - pw;
                  double* dst = o + (z * Ho + y) * Wo;
                  for (std::size_t xo = x0; xo < x1; ++xo) dst[xo] += wk * src[xo];
                }
            }
          }
        }
      }
    });
  }

  std::vector<Tensor> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return make_result(
      "conv3d", {N, Co, Do, Ho, Wo}, std::move(out), std::move(inputs),
      [=](std::span<const double> g, std::span<double* const> gi) {
        auto xv = x.values();
        auto wv = w.values();
        if (gi[0]) {
          parallel_for(N * Ci, [&](std::size_t job) {
            const std::size_t n = job / Ci, ci = job % Ci;
            double* gin = gi[0] + (n * Ci + ci) * in_vol;
            for (std::size_t co = 0; co < Co; ++co) {
              const double* go = &g[(n * Co + co) * out_vol];
              for (std::size_t kd = 0; kd < KD; ++kd) {
                auto [z0, z1] = valid_range(Do, D, kd, pd, 1);
                for (std::size_t kh = 0; kh < KH; ++kh) {
                  auto [y0, y1] = valid_range(Ho, H, kh, ph, 1);
                  for (std::size_t kw = 0; kw < KW; ++kw) {
                    auto [x0, x1] = valid_range(Wo, W, kw, pw, 1);
                    const double wk = wv[(((co * Ci + ci) * KD + kd) * KH + kh) * KW + kw];
                    for (std::size_t z = z0; z < z1; ++z)
                      for (std::size_t y = y0; y < y1; ++y) {
                        double* dst = gin + ((z + kd - pd) * H + (y + kh - ph)) * W + kw - pw;
                        const double* src = go + (z * Ho + y) * Wo;
                        for (std::size_t xo = x0; xo < x1; ++xo) dst[xo] += wk * src[xo];
                      }
                  }
                }
              }
            }
          });
        }
        if (gi[1]) {
          parallel_for(Co, [&](std::size_t co) {
            for (std::size_t ci = 0; ci < Ci; ++ci)
              for (std::size_t kd = 0; kd < KD; ++kd) {
                auto [z0, z1] = valid_range(Do, D, kd, pd, 1);
                for (std::size_t kh = 0; kh < KH; ++kh) {
                  auto [y0, y1] = valid_range(Ho, H, kh, ph, 1);
                  for (std::size_t kw = 0; kw < KW; ++kw) {
                    auto [x0, x1] = valid_range(Wo, W, kw, pw, 1);
                    double acc = 0.0;
                    if (x1 > x0)
                      for (std::size_t n = 0; n < N; ++n) {
                        const double* in = &xv[(n * Ci + ci) * in_vol];
                        const double* go = &g[(n * Co + co) * out_vol];
                        for (std::size_t z = z0; z < z1; ++z)
                          for (std::size_t y = y0; y < y1; ++y) {
                            const double* src =
                                in + ((z + kd - pd) * H + (y + kh - ph)) * W + kw - pw;
                            acc += dot(go + (z * Ho + y) * Wo + x0, src + x0, x1 - x0);
                          }
                      }
                    gi[1][(((co * Ci + ci) * KD + kd) * KH + kh) * KW + kw] += acc;
                  }
                }
              }
          });
        }
        if (gi.size() > 2 && gi[2]) {
          for (std::size_t co = 0; co < Co; ++co) {
            double acc = 0.0;
            for (std::size_t n = 0; n < N; ++n)
              for (std::size_t i = 0; i < out_vol; ++i) acc += g[(n * Co + co) * out_vol + i];
            gi[2][co] += acc;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions and normalization

Tensor softmax(const Tensor& x, std::size_t axis) {
  check_axis("softmax", x, axis);
  const auto [outer, n, inner] = split_axis(x.shape(), axis);
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      double mx = -INFINITY;
      for (std::size_t k = 0; k < n; ++k) mx = std::max(mx, xv[base + k * inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        double e = std::exp(xv[base + k * inner] - mx);
        out[base + k * inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < n; ++k) out[base + k * inner] /= total;
    }
  std::vector<double> saved = out;
  return make_result("softmax", x.shape(), std::move(out), {x},
                     [saved = std::move(saved), outer, n, inner](std::span<const double> g,
                                                                 std::span<double* const> gi) {
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t i = 0; i < inner; ++i) {
                           const std::size_t base = o * n * inner + i;
                           double s = 0.0;
                           for (std::size_t k = 0; k < n; ++k)
                             s += g[base + k * inner] * saved[base + k * inner];
                           for (std::size_t k = 0; k < n; ++k)
                             gi[0][base + k * inner] +=
                                 saved[base + k * inner] * (g[base + k * inner] - s);
                         }
                     });
}

Tensor sum(const Tensor& x) {
  auto xv = x.values();
  double total = std::accumulate(xv.begin(), xv.end(), 0.0);
  const std::size_t n = xv.size();
  return make_result("sum", {}, {total}, {x},
                     [n](std::span<const double> g, std::span<double* const> gi) {
                       for (std::size_t i = 0; i < n; ++i) gi[0][i] += g[0];
                     });
}

Tensor sum(const Tensor& x, std::size_t axis, bool keepdim) {
  check_axis("sum", x, axis);
  const auto [outer, n, inner] = split_axis(x.shape(), axis);
  auto xv = x.values();
  std::vector<double> out(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xv[(o * n + k) * inner + i];
  Shape shape = x.shape();
  if (keepdim)
    shape[axis] = 1;
  else
    shape.erase(shape.begin() + static_cast<long>(axis));
  return make_result("sum_axis", shape, std::move(out), {x},
                     [outer, n, inner](std::span<const double> g, std::span<double* const> gi) {
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t k = 0; k < n; ++k)
                           for (std::size_t i = 0; i < inner; ++i)
                             gi[0][(o * n + k) * inner + i] += g[o * inner + i];
                     });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor mean(const Tensor& x, std::size_t axis, bool keepdim) {
  check_axis("mean", x, axis);
  return scale(sum(x, axis, keepdim), 1.0 / static_cast<double>(x.dim(axis)));
}

// ---------------------------------------------------------------------------
// Shape manipulation

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw Error(ErrorCode::kShapeMismatch, "concat: no inputs");
  check_axis("concat", parts[0], axis);
  Shape out_shape = parts[0].shape();
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = parts[0].shape();
    if (a.size() != b.size()) shape_error("concat", a, b);
    a[axis] = b[axis] = 0;
    if (a != b) shape_error("concat", p.shape(), parts[0].shape());
    out_shape[axis] += p.dim(axis);
  }
  const auto [outer, total, inner] = split_axis(out_shape, axis);
  std::vector<double> out(numel_of(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t n = p.dim(axis);
    auto pv = p.values();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(&pv[o * n * inner], n * inner, &out[(o * total + off) * inner]);
    off += n;
  }
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) sizes.push_back(p.dim(axis));
  return make_result("concat", out_shape, std::move(out), parts,
                     [outer, total, inner, offsets, sizes](std::span<const double> g,
                                                           std::span<double* const> gi) {
                       for (std::size_t p = 0; p < sizes.size(); ++p) {
                         if (!gi[p]) continue;
                         const std::size_t n = sizes[p];
                         for (std::size_t o = 0; o < outer; ++o)
                           for (std::size_t j = 0; j < n * inner; ++j)
                             gi[p][o * n * inner + j] += g[(o * total + offsets[p]) * inner + j];
                       }
                     });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  check_axis("slice", x, axis);
  if (begin > end || end > x.dim(axis))
    shape_error("slice", x.shape(),
                "range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                    std::to_string(axis));
  const auto [outer, n, inner] = split_axis(x.shape(), axis);
  const std::size_t m = end - begin;
  Shape shape = x.shape();
  shape[axis] = m;
  auto xv = x.values();
  std::vector<double> out(outer * m * inner);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(&xv[(o * n + begin) * inner], m * inner, &out[o * m * inner]);
  return make_result("slice", shape, std::move(out), {x},
                     [outer = outer, n = n, inner = inner, m, begin](std::span<const double> g,
                                                                     std::span<double* const> gi) {
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t j = 0; j < m * inner; ++j)
                           gi[0][(o * n + begin) * inner + j] += g[o * m * inner + j];
                     });
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (numel_of(shape) != x.numel()) shape_error("reshape", x.shape(), shape);
  std::vector<double> out(x.values().begin(), x.values().end());
  return make_result("reshape", shape, std::move(out), {x},
                     [](std::span<const double> g, std::span<double* const> gi) {
                       for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
                     });
}

Tensor expand(const Tensor& x, const Shape& shape) {
  Shape check = broadcast_shape("expand", x.shape(), shape);
  if (check != shape) shape_error("expand", x.shape(), shape);
  auto sx = broadcast_strides(x.shape(), shape);
  std::vector<std::size_t> zero(shape.size(), 0);
  std::vector<double> out(numel_of(shape));
  auto xv = x.values();
  for_each_broadcast(shape, sx, zero, [&](std::size_t o, std::size_t i, std::size_t) { out[o] = xv[i]; });
  return make_result("expand", shape, std::move(out), {x},
                     [shape, sx, zero](std::span<const double> g, std::span<double* const> gi) {
                       for_each_broadcast(shape, sx, zero,
                                          [&](std::size_t o, std::size_t i, std::size_t) {
                                            gi[0][i] += g[o];
                                          });
                     });
}

// ---------------------------------------------------------------------------
// Sampling

namespace kernels {

BilinearTap bilinear_tap(double u, double v, std::size_t width, std::size_t height) {
  BilinearTap tap{};
  tap.index.fill(-1);
  if (!std::isfinite(u) || !std::isfinite(v)) return tap;
  const double fu = std::floor(u), fv = std::floor(v);
  const double au = u - fu, av = v - fv;
  const long x0 = static_cast<long>(fu), y0 = static_cast<long>(fv);
  const long xs[4] = {x0, x0 + 1, x0, x0 + 1};
  const long ys[4] = {y0, y0, y0 + 1, y0 + 1};
  tap.weight = {(1 - au) * (1 - av), au * (1 - av), (1 - au) * av, au * av};
  tap.du = {-(1 - av), (1 - av), -av, av};
  tap.dv = {-(1 - au), -au, (1 - au), au};
  for (int j = 0; j < 4; ++j) {
    if (xs[j] >= 0 && ys[j] >= 0 && xs[j] < static_cast<long>(width) &&
        ys[j] < static_cast<long>(height))
      tap.index[j] = ys[j] * static_cast<long>(width) + xs[j];
  }
  return tap;
}

}  // namespace kernels

Tensor bilinear_sample(const Tensor& field, const Tensor& coords) {
  if (field.rank() != 3) shape_error("bilinear_sample", field.shape(), "field must be [C,H,W]");
  if (coords.rank() < 1 || coords.dim(0) != 2)
    shape_error("bilinear_sample", coords.shape(), "coords must be [2,...]");
  const std::size_t C = field.dim(0), H = field.dim(1), W = field.dim(2);
  const std::size_t P = coords.numel() / 2;
  Shape out_shape = coords.shape();
  out_shape[0] = C;
  std::vector<kernels::BilinearTap> taps(P);
  auto cv = coords.values();
  for (std::size_t p = 0; p < P; ++p) taps[p] = kernels::bilinear_tap(cv[p], cv[P + p], W, H);

  auto fv = field.values();
  std::vector<double> out(C * P, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    const double* f = &fv[c * H * W];
    for (std::size_t p = 0; p < P; ++p) {
      const auto& t = taps[p];
      double acc = 0.0;
      for (int j = 0; j < 4; ++j)
        if (t.index[j] >= 0) acc += t.weight[j] * f[t.index[j]];
      out[c * P + p] = acc;
    }
  }
  return make_result(
      "bilinear_sample", out_shape, std::move(out), {field, coords},
      [field, taps = std::move(taps), C, H, W, P](std::span<const double> g,
                                                  std::span<double* const> gi) {
        auto fv = field.values();
        for (std::size_t c = 0; c < C; ++c) {
          const double* f = &fv[c * H * W];
          for (std::size_t p = 0; p < P; ++p) {
            const auto& t = taps[p];
            const double gp = g[c * P + p];
            if (gp == 0.0) continue;
            for (int j = 0; j < 4; ++j) {
              if (t.index[j] < 0) continue;
              if (gi[0]) gi[0][c * H * W + t.index[j]] += gp * t.weight[j];
              if (gi[1]) {
                gi[1][p] += gp * t.du[j] * f[t.index[j]];
                gi[1][P + p] += gp * t.dv[j] * f[t.index[j]];
              }
            }
          }
        }
      });
}

Tensor avg_pool2d(const Tensor& x, std::size_t k) {
  if (x.rank() != 4 || k == 0 || x.dim(2) % k != 0 || x.dim(3) % k != 0)
    shape_error("avg_pool2d", x.shape(), "needs [N,C,H,W] with H,W divisible by " + std::to_string(k));
  const std::size_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Ho = H / k, Wo = W / k;
  const double inv = 1.0 / static_cast<double>(k * k);
  auto xv = x.values();
  std::vector<double> out(NC * Ho * Wo, 0.0);
  for (std::size_t c = 0; c < NC; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx)
        out[(c * Ho + y / k) * Wo + xx / k] += xv[(c * H + y) * W + xx] * inv;
  return make_result("avg_pool2d", {x.dim(0), x.dim(1), Ho, Wo}, std::move(out), {x},
                     [NC, H, W, Ho, Wo, k, inv](std::span<const double> g, std::span<double* const> gi) {
                       for (std::size_t c = 0; c < NC; ++c)
                         for (std::size_t y = 0; y < H; ++y)
                           for (std::size_t xx = 0; xx < W; ++xx)
                             gi[0][(c * H + y) * W + xx] += g[(c * Ho + y / k) * Wo + xx / k] * inv;
                     });
}

Tensor upsample_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w, UpsampleAlign align) {
  if (x.rank() != 3 || out_h == 0 || out_w == 0)
    shape_error("upsample_bilinear", x.shape(), "needs [C,h,w] and nonzero output size");
  const std::size_t C = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (align == UpsampleAlign::kStrided && (h < 2 || w < 2))
    shape_error("upsample_bilinear", x.shape(), "strided alignment needs at least 2x2 input");
  struct Axis {
    std::size_t i0, i1;
    double a;
  };
  auto axis_taps = [align](std::size_t in, std::size_t out) {
    std::vector<Axis> taps(out);
    for (std::size_t o = 0; o < out; ++o) {
      if (align == UpsampleAlign::kStrided) {
        // Output o sits at input o * in / out; the last interval is extended
        // linearly past the final input sample.
        const double s = static_cast<double>(o) * static_cast<double>(in) / static_cast<double>(out);
        const std::size_t i0 = std::min(static_cast<std::size_t>(std::floor(s)), in - 2);
        taps[o] = {i0, i0 + 1, s - static_cast<double>(i0)};
        continue;
      }
      double s = out > 1 ? static_cast<double>(o) * static_cast<double>(in - 1) /
                               static_cast<double>(out - 1)
                         : 0.0;
      std::size_t i0 = std::min(static_cast<std::size_t>(std::floor(s)), in - 1);
      std::size_t i1 = std::min(i0 + 1, in - 1);
      taps[o] = {i0, i1, s - static_cast<double>(i0)};
    }
    return taps;
  };
  auto ty = axis_taps(h, out_h);
  auto tx = axis_taps(w, out_w);
  auto xv = x.values();
  std::vector<double> out(C * out_h * out_w);
  for (std::size_t c = 0; c < C; ++c) {
    const double* f = &xv[c * h * w];
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const auto& yy = ty[oy];
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto& xx = tx[ox];
        const double top = (1 - xx.a) * f[yy.i0 * w + xx.i0] + xx.a * f[yy.i0 * w + xx.i1];
        const double bot = (1 - xx.a) * f[yy.i1 * w + xx.i0] + xx.a * f[yy.i1 * w + xx.i1];
        out[(c * out_h + oy) * out_w + ox] = (1 - yy.a) * top + yy.a * bot;
      }
    }
  }
  return make_result("upsample_bilinear", {C, out_h, out_w}, std::move(out), {x},
                     [C, h, w, out_h, out_w, ty, tx](std::span<const double> g,
                                                     std::span<double* const> gi) {
                       for (std::size_t c = 0; c < C; ++c) {
                         double* f = gi[0] + c * h * w;
                         for (std::size_t oy = 0; oy < out_h; ++oy) {
                           const auto& yy = ty[oy];
                           for (std::size_t ox = 0; ox < out_w; ++ox) {
                             const auto& xx = tx[ox];
                             const double gv = g[(c * out_h + oy) * out_w + ox];
                             f[yy.i0 * w + xx.i0] += gv * (1 - yy.a) * (1 - xx.a);
                             f[yy.i0 * w + xx.i1] += gv * (1 - yy.a) * xx.a;
                             f[yy.i1 * w + xx.i0] += gv * yy.a * (1 - xx.a);
                             f[yy.i1 * w + xx.i1] += gv * yy.a * xx.a;
                           }
                         }
                       }
                     });
}

}  // namespace sfmc::grad
