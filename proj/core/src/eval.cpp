// SPDX-License-Identifier: Apache-2.0
#include "sfmc/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

#include "sfmc/error.hpp"

namespace sfmc::eval {

namespace {

void same_length(std::size_t a, std::size_t b, const char* what) {
  if (a != b)
    throw Error(ErrorCode::kShapeMismatch,
                std::string(what) + ": lengths " + std::to_string(a) + " and " + std::to_string(b) + " differ");
}

}  // namespace

double median(std::vector<double> values) {
  if (values.empty()) throw Error(ErrorCode::kEmptyInput, "median of nothing");
  const std::size_t n = values.size();
  const auto mid = values.begin() + static_cast<std::ptrdiff_t>(n / 2);
  std::nth_element(values.begin(), mid, values.end());
  const double upper = *mid;
  if (n % 2 == 1) return upper;
  const double lower = *std::max_element(values.begin(), mid);
  return 0.5 * (lower + upper);
}

double alignment_scale(std::span<const double> depth, std::span<const double> truth, std::span<const double> valid) {
  same_length(depth.size(), truth.size(), "scale_align");
  same_length(depth.size(), valid.size(), "scale_align");
  std::vector<double> ratios;
  for (std::size_t p = 0; p < depth.size(); ++p)
    if (valid[p] != 0.0) ratios.push_back(truth[p] / depth[p]);
  if (ratios.empty()) throw Error(ErrorCode::kEmptySupervision, "scale alignment needs a valid pixel");
  return median(std::move(ratios));
}

std::vector<double> scale_align(std::span<const double> depth, std::span<const double> truth,
                                std::span<const double> valid) {
  const double s = alignment_scale(depth, truth, valid);
  std::vector<double> out(depth.begin(), depth.end());
  for (double& z : out) z *= s;
  return out;
}

DepthMetrics depth_metrics(std::span<const double> depth, std::span<const double> truth,
                           std::span<const double> valid, double cap) {
  same_length(depth.size(), truth.size(), "depth_metrics");
  same_length(depth.size(), valid.size(), "depth_metrics");
  DepthMetrics m;
  double abs_rel = 0, sq_rel = 0, se = 0, sl = 0;
  std::size_t d1 = 0, d2 = 0, d3 = 0, n = 0;
  for (std::size_t p = 0; p < depth.size(); ++p) {
    if (valid[p] == 0.0) continue;
    const double z = std::clamp(depth[p], kMinEvalDepth, cap);
    const double t = std::min(truth[p], cap);
    const double diff = z - t;
    abs_rel += std::abs(diff) / t;
    sq_rel += diff * diff / t;
    se += diff * diff;
    const double ld = std::log(z) - std::log(t);
    sl += ld * ld;
    const double ratio = std::max(z / t, t / z);
    if (ratio < 1.25) ++d1;
    if (ratio < 1.25 * 1.25) ++d2;
    if (ratio < 1.25 * 1.25 * 1.25) ++d3;
    ++n;
  }
  if (n == 0) throw Error(ErrorCode::kEmptySupervision, "depth metrics need a valid pixel");
  const double dn = static_cast<double>(n);
  m.abs_rel = abs_rel / dn;
  m.sq_rel = sq_rel / dn;
  m.rmse = std::sqrt(se / dn);
  m.rmse_log = std::sqrt(sl / dn);
  m.delta1 = static_cast<double>(d1) / dn;
  m.delta2 = static_cast<double>(d2) / dn;
  m.delta3 = static_cast<double>(d3) / dn;
  m.count = n;
  return m;
}

SplitMetrics split_metrics(std::span<const double> depth, std::span<const double> truth,
                           std::span<const double> dynamic, std::span<const double> valid, double cap) {
  same_length(depth.size(), dynamic.size(), "split_metrics");
  same_length(depth.size(), valid.size(), "split_metrics");
  std::vector<double> dyn(depth.size()), stat(depth.size());
  std::size_t nd = 0, ns = 0, na = 0;
  for (std::size_t p = 0; p < depth.size(); ++p) {
    if (valid[p] == 0.0) continue;
    ++na;
    if (dynamic[p] != 0.0) {
      dyn[p] = 1.0;
      ++nd;
    } else {
      stat[p] = 1.0;
      ++ns;
    }
  }
  SplitMetrics out;
  if (nd > 0) out.dynamic = depth_metrics(depth, truth, dyn, cap);
  if (ns > 0) out.static_ = depth_metrics(depth, truth, stat, cap);
  if (na > 0) out.all = depth_metrics(depth, truth, valid, cap);
  return out;
}

std::vector<double> kept_fractions(double step) {
  if (!(step > 0.0 && step < 1.0)) throw Error(ErrorCode::kInvalidConfig, "sparsification step must lie in (0,1)");
  const auto n = static_cast<std::size_t>(std::floor(1.0 / step + 1e-9));
  std::vector<double> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(1.0 - static_cast<double>(i) * step);
  return out;
}

std::size_t kept_count(double fraction, std::size_t n) {
  const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  return std::clamp<std::size_t>(k, 1, n);
}

std::vector<std::size_t> ascending_order(std::span<const double> u) {
  std::vector<std::size_t> idx(u.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return u[a] < u[b]; });
  return idx;
}

std::vector<double> sparsification_curve(std::span<const double> errors, std::span<const double> uncertainty,
                                         double step) {
  if (errors.empty()) throw Error(ErrorCode::kEmptyInput, "sparsification needs at least one pixel");
  same_length(errors.size(), uncertainty.size(), "sparsification");
  const auto order = ascending_order(uncertainty);
  // Prefix sums in sorted order, so every fraction reads one entry.
  std::vector<double> prefix(order.size() + 1, 0.0);
  for (std::size_t i = 0; i < order.size(); ++i) prefix[i + 1] = prefix[i] + errors[order[i]];
  std::vector<double> out;
  for (const double f : kept_fractions(step)) {
    const std::size_t k = kept_count(f, errors.size());
    out.push_back(prefix[k] / static_cast<double>(k));
  }
  return out;
}

SparsificationCurve sparsification(std::span<const double> errors, std::span<const double> learned,
                                   std::optional<std::span<const double>> entropy, std::uint64_t seed, double step) {
  if (errors.empty()) throw Error(ErrorCode::kEmptyInput, "sparsification needs at least one pixel");
  SparsificationCurve c;
  c.fractions = kept_fractions(step);
  c.learned = sparsification_curve(errors, learned, step);
  if (entropy) c.entropy = sparsification_curve(errors, *entropy, step);
  std::mt19937_64 rng(seed);
  std::vector<double> noise(errors.size());
  for (double& v : noise) v = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  c.random = sparsification_curve(errors, noise, step);
  c.oracle = sparsification_curve(errors, errors, step);
  return c;
}

SparsificationCurve average(const std::vector<SparsificationCurve>& curves) {
  if (curves.empty()) throw Error(ErrorCode::kEmptyInput, "no curves to average");
  SparsificationCurve out;
  out.fractions = curves.front().fractions;
  const bool with_entropy = std::all_of(curves.begin(), curves.end(), [](const auto& c) { return !c.entropy.empty(); });
  const std::size_t n = out.fractions.size();
  out.learned.assign(n, 0.0);
  out.random.assign(n, 0.0);
  out.oracle.assign(n, 0.0);
  if (with_entropy) out.entropy.assign(n, 0.0);
  for (const auto& c : curves) {
    if (c.fractions != out.fractions) throw Error(ErrorCode::kShapeMismatch, "curves use different fractions");
    for (std::size_t i = 0; i < n; ++i) {
      out.learned[i] += c.learned[i];
      out.random[i] += c.random[i];
      out.oracle[i] += c.oracle[i];
      if (with_entropy) out.entropy[i] += c.entropy[i];
    }
  }
  const double k = static_cast<double>(curves.size());
  for (auto* v : {&out.learned, &out.random, &out.oracle, &out.entropy})
    for (double& x : *v) x /= k;
  return out;
}

double area_under(const std::vector<double>& fractions, const std::vector<double>& curve) {
  same_length(fractions.size(), curve.size(), "area_under");
  double a = 0.0;
  for (std::size_t i = 0; i + 1 < curve.size(); ++i)
    a += 0.5 * (curve[i] + curve[i + 1]) * std::abs(fractions[i] - fractions[i + 1]);
  return a;
}

std::vector<double> abs_rel_errors(std::span<const double> depth, std::span<const double> truth,
                                   std::span<const double> valid, double cap) {
  same_length(depth.size(), truth.size(), "abs_rel_errors");
  same_length(depth.size(), valid.size(), "abs_rel_errors");
  std::vector<double> out;
  for (std::size_t p = 0; p < depth.size(); ++p) {
    if (valid[p] == 0.0) continue;
    const double z = std::clamp(depth[p], kMinEvalDepth, cap);
    const double t = std::min(truth[p], cap);
    out.push_back(std::abs(z - t) / t);
  }
  return out;
}

std::vector<double> gather(std::span<const double> map, std::span<const double> valid) {
  same_length(map.size(), valid.size(), "gather");
  std::vector<double> out;
  for (std::size_t p = 0; p < map.size(); ++p)
    if (valid[p] != 0.0) out.push_back(map[p]);
  return out;
}

DepthMetrics filtered_metrics(std::span<const double> depth, std::span<const double> truth,
                              std::span<const double> valid, std::span<const double> uncertainty, double keep,
                              double cap) {
  same_length(depth.size(), uncertainty.size(), "filtered_metrics");
  if (!(keep > 0.0 && keep <= 1.0)) throw Error(ErrorCode::kInvalidConfig, "keep fraction must lie in (0,1]");
  std::vector<std::size_t> pixels;
  for (std::size_t p = 0; p < depth.size(); ++p)
    if (valid[p] != 0.0) pixels.push_back(p);
  if (pixels.empty()) throw Error(ErrorCode::kEmptySupervision, "filtered metrics need a valid pixel");
  std::stable_sort(pixels.begin(), pixels.end(),
                   [&](std::size_t a, std::size_t b) { return uncertainty[a] < uncertainty[b]; });
  std::vector<double> mask(depth.size(), 0.0);
  const std::size_t k = kept_count(keep, pixels.size());
  for (std::size_t i = 0; i < k; ++i) mask[pixels[i]] = 1.0;
  return depth_metrics(depth, truth, mask, cap);
}

std::vector<double> apply_crop(std::span<const double> valid, std::size_t height, std::size_t width,
                               const std::optional<Crop>& crop) {
  same_length(valid.size(), height * width, "apply_crop");
  std::vector<double> out(valid.begin(), valid.end());
  if (!crop) return out;
  if (crop->y0 >= crop->y1 || crop->x0 >= crop->x1 || crop->y1 > height || crop->x1 > width)
    throw Error(ErrorCode::kInvalidConfig, "crop rectangle outside the image");
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      if (y < crop->y0 || y >= crop->y1 || x < crop->x0 || x >= crop->x1) out[y * width + x] = 0.0;
  return out;
}

WindowReport evaluate_window(const WindowInputs& in, const std::vector<double>& keeps, std::uint64_t seed,
                             double cap, double step) {
  WindowReport r;
  r.scale = alignment_scale(in.depth, in.truth, in.valid);
  std::vector<double> aligned(in.depth.begin(), in.depth.end());
  for (double& z : aligned) z *= r.scale;
  if (in.dynamic.empty()) {
    r.metrics.all = depth_metrics(aligned, in.truth, in.valid, cap);
  } else {
    r.metrics = split_metrics(aligned, in.truth, in.dynamic, in.valid, cap);
  }
  for (const double k : keeps)
    r.filtered.emplace_back(k, filtered_metrics(aligned, in.truth, in.valid, in.uncertainty, k, cap));
  const auto errors = abs_rel_errors(aligned, in.truth, in.valid, cap);
  const auto learned = gather(in.uncertainty, in.valid);
  std::optional<std::vector<double>> entropy;
  if (!in.entropy.empty()) entropy = gather(in.entropy, in.valid);
  r.curve = sparsification(errors, learned,
                           entropy ? std::optional<std::span<const double>>(*entropy) : std::nullopt, seed, step);
  return r;
}

DepthMetrics mean_metrics(const std::vector<DepthMetrics>& rows) {
  if (rows.empty()) throw Error(ErrorCode::kEmptyInput, "no metrics to average");
  DepthMetrics m;
  for (const auto& r : rows) {
    m.abs_rel += r.abs_rel;
    m.sq_rel += r.sq_rel;
    m.rmse += r.rmse;
    m.rmse_log += r.rmse_log;
    m.delta1 += r.delta1;
    m.delta2 += r.delta2;
    m.delta3 += r.delta3;
    m.count += r.count;
  }
  const double n = static_cast<double>(rows.size());
  for (double* v : {&m.abs_rel, &m.sq_rel, &m.rmse, &m.rmse_log, &m.delta1, &m.delta2, &m.delta3}) *v /= n;
  return m;
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
  f << kMetricsHeader << '\n';
  char buf[512];
  for (const auto& r : rows) {
    const auto& m = r.metrics;
    std::snprintf(buf, sizeof(buf), ",%zu,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g", m.count, m.abs_rel, m.sq_rel,
                  m.rmse, m.rmse_log, m.delta1, m.delta2, m.delta3);
    f << r.sample << ',' << r.split << buf << '\n';
  }
  if (!f) throw Error(ErrorCode::kIoError, "write failed: " + path.string());
}

void write_sparsification_csv(const std::filesystem::path& path, const SparsificationCurve& c) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
  f << "fraction,learned,entropy,random,oracle\n";
  char buf[256];
  for (std::size_t i = 0; i < c.fractions.size(); ++i) {
    const double e = c.entropy.empty() ? std::nan("") : c.entropy[i];
    std::snprintf(buf, sizeof(buf), "%.4f,%.10g,%.10g,%.10g,%.10g", c.fractions[i], c.learned[i], e, c.random[i],
                  c.oracle[i]);
    f << buf << '\n';
  }
  if (!f) throw Error(ErrorCode::kIoError, "write failed: " + path.string());
}

}  // namespace sfmc::eval
