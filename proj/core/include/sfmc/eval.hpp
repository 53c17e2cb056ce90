// SPDX-License-Identifier: Apache-2.0
//
// Depth evaluation: median scale alignment, the usual error/accuracy
// metrics, static/dynamic splits, and sparsification curves.
//
// Maps are flat row-major spans of equal length; masks are nonzero = valid.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace sfmc::eval {

inline constexpr double kDefaultDepthCap = 80.0;
inline constexpr double kMinEvalDepth = 1e-3;
inline constexpr double kDefaultStep = 0.05;

struct DepthMetrics {
  double abs_rel = 0.0;
  double sq_rel = 0.0;
  double rmse = 0.0;
  double rmse_log = 0.0;
  double delta1 = 0.0;
  double delta2 = 0.0;
  double delta3 = 0.0;
  std::size_t count = 0;
};

/// Mean of the two central values for even counts. Throws EmptyInput.
double median(std::vector<double> values);

/// median(Z*/Z) over valid pixels. Throws EmptySupervision on an empty mask.
double alignment_scale(std::span<const double> depth, std::span<const double> truth, std::span<const double> valid);
/// Z * alignment_scale(...).
std::vector<double> scale_align(std::span<const double> depth, std::span<const double> truth,
                                std::span<const double> valid);

/// Both maps are capped at `cap` (and the prediction floored at 1e-3).
/// Throws EmptySupervision on an empty mask.
DepthMetrics depth_metrics(std::span<const double> depth, std::span<const double> truth,
                           std::span<const double> valid, double cap = kDefaultDepthCap);

struct SplitMetrics {
  std::optional<DepthMetrics> dynamic;
  std::optional<DepthMetrics> static_;
  std::optional<DepthMetrics> all;
};

/// depth_metrics over valid&dynamic, valid&!dynamic and valid; a split with
/// no pixels is absent.
SplitMetrics split_metrics(std::span<const double> depth, std::span<const double> truth,
                           std::span<const double> dynamic, std::span<const double> valid,
                           double cap = kDefaultDepthCap);

/// Kept fractions 1, 1-step, ..., down to step.
std::vector<double> kept_fractions(double step = kDefaultStep);

/// Number of pixels kept at fraction f of n: round(f n), at least 1.
std::size_t kept_count(double fraction, std::size_t n);

/// Indices sorted by ascending u, ties by index.
std::vector<std::size_t> ascending_order(std::span<const double> u);

/// Mean error over the kept prefix of ascending u, per kept fraction. Throws
/// EmptyInput for no pixels and ShapeMismatch for unequal lengths.
std::vector<double> sparsification_curve(std::span<const double> errors, std::span<const double> uncertainty,
                                         double step = kDefaultStep);

struct SparsificationCurve {
  std::vector<double> fractions;
  std::vector<double> learned;
  std::vector<double> entropy;  // empty when no entropy map was given
  std::vector<double> random;
  std::vector<double> oracle;
};

/// All baselines for one error map. The random ordering is drawn from `seed`.
SparsificationCurve sparsification(std::span<const double> errors, std::span<const double> learned,
                                   std::optional<std::span<const double>> entropy, std::uint64_t seed,
                                   double step = kDefaultStep);

/// Pointwise mean of curves with identical fractions.
SparsificationCurve average(const std::vector<SparsificationCurve>& curves);

/// Trapezoidal area under a curve over its kept fractions.
double area_under(const std::vector<double>& fractions, const std::vector<double>& curve);

/// Per-pixel |Z - Z*| / Z* over valid pixels, in pixel order.
std::vector<double> abs_rel_errors(std::span<const double> depth, std::span<const double> truth,
                                   std::span<const double> valid, double cap = kDefaultDepthCap);
/// Values of `map` at valid pixels, in pixel order.
std::vector<double> gather(std::span<const double> map, std::span<const double> valid);

/// depth_metrics restricted to the `keep` fraction of valid pixels with the
/// smallest uncertainty (ties by index).
DepthMetrics filtered_metrics(std::span<const double> depth, std::span<const double> truth,
                              std::span<const double> valid, std::span<const double> uncertainty, double keep,
                              double cap = kDefaultDepthCap);

/// Evaluation window [y0,y1) x [x0,x1); pixels outside are invalid.
struct Crop {
  std::size_t y0 = 0, y1 = 0, x0 = 0, x1 = 0;
};
std::vector<double> apply_crop(std::span<const double> valid, std::size_t height, std::size_t width,
                               const std::optional<Crop>& crop);

// ---------------------------------------------------------------------------
// One window, the full protocol

struct WindowInputs {
  std::span<const double> depth;        // raw prediction, aligned here
  std::span<const double> truth;
  std::span<const double> valid;
  std::span<const double> dynamic;      // empty = no dynamic split
  std::span<const double> uncertainty;  // ranking key, low = confident
  std::span<const double> entropy;      // empty = no entropy baseline
};

struct WindowReport {
  double scale = 1.0;  // median alignment factor
  SplitMetrics metrics;
  std::vector<std::pair<double, DepthMetrics>> filtered;  // (keep, metrics) on the aligned depth
  SparsificationCurve curve;                              // Abs Rel of the aligned depth
};

/// Median scale alignment on `valid`, then metrics, filtered metrics and
/// sparsification curves.
WindowReport evaluate_window(const WindowInputs& in, const std::vector<double>& keeps, std::uint64_t seed,
                             double cap = kDefaultDepthCap, double step = kDefaultStep);

/// Field-wise mean of per-window metrics (count is summed).
DepthMetrics mean_metrics(const std::vector<DepthMetrics>& rows);

// ---------------------------------------------------------------------------
// Reports

struct MetricsRow {
  std::string sample;
  std::string split;  // all / static / dynamic / filtered@0.8 ...
  DepthMetrics metrics;
};

inline constexpr const char* kMetricsHeader = "sample,split,count,abs_rel,sq_rel,rmse,rmse_log,delta1,delta2,delta3";
void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows);
void write_sparsification_csv(const std::filesystem::path& path, const SparsificationCurve& curve);

}  // namespace sfmc::eval
