#pragma once

#include <filesystem>
#include <limits>
#include <optional>
#include <vector>

#include "loupe/tensor.hpp"

namespace loupe {

/// PSNR of an exact reconstruction.
inline constexpr double kInfinitePsnr = std::numeric_limits<double>::infinity();

struct SsimConfig {
  double k1 = 0.01;
  double k2 = 0.03;
  std::size_t window = 7;
  /// Dynamic range L; defaults to max - min of the ground truth (1 if flat).
  std::optional<double> dynamic_range;
};

/// 10 log10(peak^2 d / ||x - xhat||^2) with peak = max(x) unless given.
double psnr(const Tensor<double>& x, const Tensor<double>& xhat, std::optional<double> peak = std::nullopt);

/// Mean SSIM over all fully interior windows (uniform weights, population
/// statistics) of two [H, W] images.
double ssim(const Tensor<double>& x, const Tensor<double>& xhat, const SsimConfig& cfg = {});

/// Zero-sum Laplacian-of-Gaussian kernel, size x size, centered at 0.
Tensor<double> log_kernel(std::size_t size = 15, double sigma = 1.5);

/// Same-size LoG filtering with edge-replicated borders.
Tensor<double> log_filter(const Tensor<double>& image, const Tensor<double>& kernel);

/// ||LoG(x) - LoG(xhat)||_2 of two [H, W] images.
double hfen(const Tensor<double>& x, const Tensor<double>& xhat);

double mse(const Tensor<double>& x, const Tensor<double>& xhat);
double mae(const Tensor<double>& x, const Tensor<double>& xhat);

struct SliceMetrics {
  double mse = 0.0;
  double mae = 0.0;
  double hfen = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
};

struct MetricsReport {
  std::vector<SliceMetrics> slices;
  SliceMetrics volume_mean;
};

/// Per-slice metrics of two magnitude volumes [S, H, W] plus their means.
/// PSNR peak and SSIM dynamic range come from the whole ground-truth volume.
MetricsReport evaluate_pair(const Tensor<double>& x, const Tensor<double>& xhat, const SsimConfig& cfg = {});

/// Mean of each metric over several reports (e.g. all test volumes).
SliceMetrics average(const std::vector<SliceMetrics>& rows);

/// Columns slice_index,mse,mae,hfen,psnr_db,ssim; the final row is labelled
/// "mean" and holds the volume means.
void write_metrics_csv(const std::filesystem::path& path, const MetricsReport& report);

} // namespace loupe
