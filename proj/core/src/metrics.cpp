#include "loupe/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "loupe/error.hpp"

namespace loupe {
namespace {

void require_same(const Tensor<double>& a, const Tensor<double>& b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

void require_image(const Tensor<double>& a, const char* what) {
  if (a.rank() != 2) throw ShapeError(std::string(what) + ": expected an [H, W] image, got " + to_string(a.shape()));
}

double squared_error(const Tensor<double>& x, const Tensor<double>& xhat) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - xhat[i];
    acc += d * d;
  }
  return acc;
}

double value_range(const Tensor<double>& x) {
  const auto [lo, hi] = std::minmax_element(x.data().begin(), x.data().end());
  return *hi - *lo;
}

/// Summed-area table with a zero first row and column.
std::vector<double> integral(const Tensor<double>& a, const Tensor<double>* b, std::size_t h, std::size_t w) {
  std::vector<double> s((h + 1) * (w + 1), 0.0);
  for (std::size_t i = 0; i < h; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < w; ++j) {
      row += b ? a[i * w + j] * (*b)[i * w + j] : a[i * w + j];
      s[(i + 1) * (w + 1) + j + 1] = s[i * (w + 1) + j + 1] + row;
    }
  }
  return s;
}

double box(const std::vector<double>& s, std::size_t w, std::size_t i, std::size_t j, std::size_t k) {
  const std::size_t stride = w + 1;
  return s[(i + k) * stride + j + k] - s[i * stride + j + k] - s[(i + k) * stride + j] + s[i * stride + j];
}

} // namespace

double mse(const Tensor<double>& x, const Tensor<double>& xhat) {
  require_same(x, xhat, "mse");
  return squared_error(x, xhat) / static_cast<double>(x.size());
}

double mae(const Tensor<double>& x, const Tensor<double>& xhat) {
  require_same(x, xhat, "mae");
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += std::abs(x[i] - xhat[i]);
  return acc / static_cast<double>(x.size());
}

double psnr(const Tensor<double>& x, const Tensor<double>& xhat, std::optional<double> peak) {
  require_same(x, xhat, "psnr");
  const double top = peak.value_or(*std::max_element(x.data().begin(), x.data().end()));
  if (top == 0.0) throw DomainError("psnr: ground truth peak is zero");
  const double err = squared_error(x, xhat);
  if (err == 0.0) return kInfinitePsnr;
  return 10.0 * std::log10(top * top * static_cast<double>(x.size()) / err);
}

double ssim(const Tensor<double>& x, const Tensor<double>& xhat, const SsimConfig& cfg) {
  require_same(x, xhat, "ssim");
  require_image(x, "ssim");
  if (cfg.window % 2 == 0 || cfg.window == 0) throw DomainError("ssim: window size must be odd");
  if (!(cfg.k1 > 0.0) || !(cfg.k2 > 0.0)) throw DomainError("ssim: k1 and k2 must be positive");
  const std::size_t h = x.dim(0), w = x.dim(1), k = cfg.window;
  if (h < k || w < k)
    throw ShapeError("ssim: image " + std::to_string(h) + "x" + std::to_string(w) + " is smaller than the " +
                     std::to_string(k) + "x" + std::to_string(k) + " window");
  double range = cfg.dynamic_range.value_or(value_range(x));
  if (range == 0.0) range = 1.0;
  const double c1 = (cfg.k1 * range) * (cfg.k1 * range);
  const double c2 = (cfg.k2 * range) * (cfg.k2 * range);
  const auto sx = integral(x, nullptr, h, w);
  const auto sy = integral(xhat, nullptr, h, w);
  const auto sxx = integral(x, &x, h, w);
  const auto syy = integral(xhat, &xhat, h, w);
  const auto sxy = integral(x, &xhat, h, w);
  const double n = static_cast<double>(k * k);
  double total = 0.0;
  std::size_t windows = 0;
  for (std::size_t i = 0; i + k <= h; ++i)
    for (std::size_t j = 0; j + k <= w; ++j) {
      const double mx = box(sx, w, i, j, k) / n;
      const double my = box(sy, w, i, j, k) / n;
      const double vx = box(sxx, w, i, j, k) / n - mx * mx;
      const double vy = box(syy, w, i, j, k) / n - my * my;
      const double cxy = box(sxy, w, i, j, k) / n - mx * my;
      total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++windows;
    }
  return total / static_cast<double>(windows);
}

Tensor<double> log_kernel(std::size_t size, double sigma) {
  if (size % 2 == 0) throw DomainError("LoG kernel size must be odd");
  Tensor<double> k(Shape{size, size});
  const long half = static_cast<long>(size / 2);
  const double s2 = sigma * sigma;
  double mean = 0.0;
  for (long u = -half; u <= half; ++u)
    for (long v = -half; v <= half; ++v) {
      const double r2 = static_cast<double>(u * u + v * v);
      const double g = -1.0 / (std::numbers::pi * s2 * s2) * (1.0 - r2 / (2.0 * s2)) * std::exp(-r2 / (2.0 * s2));
      k[static_cast<std::size_t>((u + half) * static_cast<long>(size) + v + half)] = g;
      mean += g;
    }
  mean /= static_cast<double>(size * size);
  for (auto& v : k.data()) v -= mean;
  return k;
}

Tensor<double> log_filter(const Tensor<double>& image, const Tensor<double>& kernel) {
  require_image(image, "log_filter");
  const long h = static_cast<long>(image.dim(0)), w = static_cast<long>(image.dim(1));
  const long ks = static_cast<long>(kernel.dim(0)), half = ks / 2;
  Tensor<double> out(image.shape());
  for (long i = 0; i < h; ++i)
    for (long j = 0; j < w; ++j) {
      double acc = 0.0;
      for (long u = 0; u < ks; ++u) {
        const long si = std::clamp(i + u - half, 0L, h - 1);
        for (long v = 0; v < ks; ++v) {
          const long sj = std::clamp(j + v - half, 0L, w - 1);
          acc += kernel[static_cast<std::size_t>(u * ks + v)] * image[static_cast<std::size_t>(si * w + sj)];
        }
      }
      out[static_cast<std::size_t>(i * w + j)] = acc;
    }
  return out;
}

double hfen(const Tensor<double>& x, const Tensor<double>& xhat) {
  require_same(x, xhat, "hfen");
  require_image(x, "hfen");
  static const Tensor<double> kernel = log_kernel();
  Tensor<double> diff(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) diff[i] = x[i] - xhat[i];
  const Tensor<double> filtered = log_filter(diff, kernel);
  double acc = 0.0;
  for (double v : filtered.data()) acc += v * v;
  return std::sqrt(acc);
}

SliceMetrics average(const std::vector<SliceMetrics>& rows) {
  SliceMetrics m;
  if (rows.empty()) return m;
  for (const auto& r : rows) {
    m.mse += r.mse;
    m.mae += r.mae;
    m.hfen += r.hfen;
    m.psnr += r.psnr;
    m.ssim += r.ssim;
  }
  const double n = static_cast<double>(rows.size());
  m.mse /= n;
  m.mae /= n;
  m.hfen /= n;
  m.psnr /= n;
  m.ssim /= n;
  return m;
}

MetricsReport evaluate_pair(const Tensor<double>& x, const Tensor<double>& xhat, const SsimConfig& cfg) {
  require_same(x, xhat, "evaluate_pair");
  if (x.rank() != 3) throw ShapeError("evaluate_pair expects [S, H, W] magnitude volumes, got " + to_string(x.shape()));
  const std::size_t slices = x.dim(0), h = x.dim(1), w = x.dim(2), plane = h * w;
  const double peak = *std::max_element(x.data().begin(), x.data().end());
  SsimConfig slice_cfg = cfg;
  if (!slice_cfg.dynamic_range) slice_cfg.dynamic_range = value_range(x);
  MetricsReport report;
  for (std::size_t s = 0; s < slices; ++s) {
    Tensor<double> a(Shape{h, w}), b(Shape{h, w});
    std::copy_n(x.raw() + s * plane, plane, a.raw());
    std::copy_n(xhat.raw() + s * plane, plane, b.raw());
    SliceMetrics m;
    m.mse = mse(a, b);
    m.mae = mae(a, b);
    m.hfen = hfen(a, b);
    m.psnr = psnr(a, b, peak);
    m.ssim = ssim(a, b, slice_cfg);
    report.slices.push_back(m);
  }
  report.volume_mean = average(report.slices);
  return report;
}

void write_metrics_csv(const std::filesystem::path& path, const MetricsReport& report) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  auto row = [&](const std::string& label, const SliceMetrics& m) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%.9g,%.9g,%.9g,%.9g,%.9g\n", label.c_str(), m.mse, m.mae, m.hfen, m.psnr, m.ssim);
    out << buf;
  };
  out << "slice_index,mse,mae,hfen,psnr_db,ssim\n";
  for (std::size_t s = 0; s < report.slices.size(); ++s) row(std::to_string(s), report.slices[s]);
  row("mean", report.volume_mean);
}

} // namespace loupe
