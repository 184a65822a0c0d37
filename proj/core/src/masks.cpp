#include "loupe/masks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include "json.hpp"
#include "kernels.hpp"
#include "loupe/data.hpp"
#include "loupe/fourier.hpp"
#include "loupe/image_io.hpp"
#include "loupe/rng.hpp"

namespace loupe {

using json = nlohmann::json;

namespace {

void require_alpha(double alpha, const char* where, bool allow_one = false) {
  const bool ok = alpha > 0.0 && (allow_one ? alpha <= 1.0 : alpha < 1.0);
  if (!ok)
    throw DomainError(std::string(where) + ": alpha must lie in " + (allow_one ? "(0, 1]" : "(0, 1)") + ", got " +
                      std::to_string(alpha));
}

void require_grid(const Tensor<double>& t, const char* where) {
  if (t.rank() != 2) throw ShapeError(std::string(where) + ": expected an [H, W] grid, got " + to_string(t.shape()));
}

/// Indices sorted by descending value; equal values keep row-major order.
std::vector<std::size_t> descending_order(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  return order;
}

BinaryMask keep_top(const Tensor<double>& scores, std::size_t keep, double alpha, std::string kind) {
  Tensor<double> values(scores.shape());
  const auto order = descending_order(scores.data());
  for (std::size_t k = 0; k < keep; ++k) values[order[k]] = 1.0;
  return make_binary_mask(std::move(values), alpha, std::move(kind));
}

} // namespace

template <typename Real>
void ProbMaskParams<Real>::validate() const {
  require_alpha(alpha, "probabilistic mask");
  if (!(slope_t > 0.0) || !(slope_s > 0.0)) throw DomainError("mask slopes t and s must be positive");
  const Shape expected = line_constrained ? Shape{line_count()} : Shape{height, width};
  if (logits.value.shape() != expected)
    throw ShapeError("mask logits have shape " + to_string(logits.value.shape()) + ", expected " + to_string(expected));
}

template <typename Real>
ProbMaskParams<Real> init_prob_mask(std::size_t height, std::size_t width, double alpha, double slope_t,
                                    double slope_s, bool line_constrained, Axis readout, Rng& rng, double noise) {
  require_alpha(alpha, "init_prob_mask");
  ProbMaskParams<Real> p;
  p.height = height;
  p.width = width;
  p.slope_t = slope_t;
  p.slope_s = slope_s;
  p.alpha = alpha;
  p.line_constrained = line_constrained;
  p.readout = readout;
  const double center = std::log(alpha / (1.0 - alpha)) / slope_t;
  const Shape shape = line_constrained ? Shape{p.line_count()} : Shape{height, width};
  Tensor<Real> logits(shape);
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] = static_cast<Real>(center + rng.uniform(-noise, noise));
  p.logits = Parameter<Real>("mask.logits", std::move(logits));
  return p;
}

template <typename Real>
Tensor<double> probabilities(const ProbMaskParams<Real>& params) {
  params.validate();
  Tensor<double> logits = params.logits.value.template cast<double>();
  if (params.line_constrained) logits = expand_line_params(logits, params.height, params.width, params.readout);
  Tensor<double> out(logits.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = kernels::sigmoid(logits[i], params.slope_t);
  return out;
}

template struct ProbMaskParams<float>;
template struct ProbMaskParams<double>;
template ProbMaskParams<float> init_prob_mask<float>(std::size_t, std::size_t, double, double, double, bool, Axis, Rng&, double);
template ProbMaskParams<double> init_prob_mask<double>(std::size_t, std::size_t, double, double, double, bool, Axis, Rng&, double);
template Tensor<double> probabilities(const ProbMaskParams<float>&);
template Tensor<double> probabilities(const ProbMaskParams<double>&);

Tensor<double> renormalize(const Tensor<double>& p, double alpha) {
  require_alpha(alpha, "renormalize");
  double pbar = 0.0;
  for (double v : p.data()) pbar += v;
  pbar /= static_cast<double>(p.size());
  Tensor<double> out(p.shape());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double v = pbar >= alpha ? alpha / pbar * p[i] : 1.0 - (1.0 - alpha) / (1.0 - pbar) * (1.0 - p[i]);
    out[i] = std::clamp(v, 0.0, 1.0);
  }
  return out;
}

Tensor<double> expand_line_params(const Tensor<double>& line, std::size_t height, std::size_t width, Axis readout) {
  const std::size_t lines = readout == Axis::Rows ? width : height;
  if (line.shape() != Shape{lines})
    throw ShapeError("expected " + std::to_string(lines) + " line values for a " + std::to_string(height) + "x" +
                     std::to_string(width) + " grid, got " + to_string(line.shape()));
  Tensor<double> out(Shape{height, width});
  for (std::size_t i = 0; i < height; ++i)
    for (std::size_t j = 0; j < width; ++j) out[i * width + j] = readout == Axis::Rows ? line[j] : line[i];
  return out;
}

RelaxedMask sample_relaxed(const Tensor<double>& p_norm, double slope_s, Rng& rng) {
  RelaxedMask m{Tensor<double>(p_norm.shape())};
  for (std::size_t i = 0; i < p_norm.size(); ++i) m.values[i] = kernels::sigmoid(p_norm[i] - rng.uniform(), slope_s);
  return m;
}

std::size_t BinaryMask::sampled() const {
  return static_cast<std::size_t>(std::count(values.data().begin(), values.data().end(), 1.0));
}

BinaryMask make_binary_mask(Tensor<double> values, double alpha, std::string kind, std::uint64_t seed) {
  require_grid(values, "binary mask");
  for (double v : values.data())
    if (v != 0.0 && v != 1.0) throw DataError("binary mask values must be 0 or 1");
  BinaryMask m;
  m.values = std::move(values);
  m.alpha = alpha;
  m.kind = std::move(kind);
  m.seed = seed;
  m.achieved_sparsity = static_cast<double>(m.sampled()) / static_cast<double>(m.values.size());
  return m;
}

std::size_t sample_budget(double alpha, std::size_t n) {
  return static_cast<std::size_t>(std::ceil(alpha * static_cast<double>(n) - 1e-9));
}

BinaryMask binarize(const Tensor<double>& p_norm, double alpha, BinarizeMode mode, std::uint64_t seed) {
  require_grid(p_norm, "binarize");
  require_alpha(alpha, "binarize", true);
  const std::size_t d = p_norm.size();
  const std::size_t keep = sample_budget(alpha, d);
  if (keep > d) throw DomainError("binarize: budget exceeds grid size");
  if (mode == BinarizeMode::TopK) return keep_top(p_norm, keep, alpha, "loupe-topk");
  Rng rng(seed);
  Tensor<double> values(p_norm.shape());
  for (std::size_t i = 0; i < d; ++i) values[i] = rng.uniform() < p_norm[i] ? 1.0 : 0.0;
  return make_binary_mask(std::move(values), alpha, "loupe-bernoulli", seed);
}

BinaryMask binarize_lines(const Tensor<double>& p_norm, double alpha, Axis readout) {
  require_grid(p_norm, "binarize_lines");
  require_alpha(alpha, "binarize_lines", true);
  const std::size_t h = p_norm.dim(0), w = p_norm.dim(1);
  const std::size_t lines = readout == Axis::Rows ? w : h;
  Tensor<double> line_scores(Shape{lines});
  for (std::size_t l = 0; l < lines; ++l) {
    double acc = 0.0;
    if (readout == Axis::Rows)
      for (std::size_t i = 0; i < h; ++i) acc += p_norm[i * w + l];
    else
      for (std::size_t j = 0; j < w; ++j) acc += p_norm[l * w + j];
    line_scores[l] = acc;
  }
  const auto order = descending_order(line_scores.data());
  Tensor<double> selected(Shape{lines});
  for (std::size_t k = 0; k < sample_budget(alpha, lines); ++k) selected[order[k]] = 1.0;
  return make_binary_mask(expand_line_params(selected, h, w, readout), alpha, "loupe-lines");
}

BinaryMask gen_uniform_random(std::size_t height, std::size_t width, double alpha, std::uint64_t seed) {
  require_alpha(alpha, "uniform random mask", true);
  const std::size_t d = height * width;
  Rng rng(seed);
  const auto perm = rng.permutation(d);
  Tensor<double> values(Shape{height, width});
  for (std::size_t k = 0; k < sample_budget(alpha, d); ++k) values[perm[k]] = 1.0;
  return make_binary_mask(std::move(values), alpha, "uniform", seed);
}

Tensor<double> variable_density_profile(std::size_t height, std::size_t width, double alpha, double power) {
  require_alpha(alpha, "variable density mask", true);
  if (power < 0.0) throw DomainError("variable density power must be non-negative");
  const std::size_t d = height * width;
  const std::size_t budget = sample_budget(alpha, d);
  const double ci = static_cast<double>(height / 2), cj = static_cast<double>(width / 2);
  Tensor<double> weight(Shape{height, width});
  double r_max = 0.0;
  for (std::size_t i = 0; i < height; ++i)
    for (std::size_t j = 0; j < width; ++j)
      r_max = std::max(r_max, std::hypot(static_cast<double>(i) - ci, static_cast<double>(j) - cj));
  // One grid step past the farthest point, so every point can be drawn even
  // when the budget covers the whole grid.
  r_max += 1.0;
  std::size_t positive = 0;
  double min_positive = 1.0;
  for (std::size_t i = 0; i < height; ++i)
    for (std::size_t j = 0; j < width; ++j) {
      const double r = std::hypot(static_cast<double>(i) - ci, static_cast<double>(j) - cj);
      const double base = std::max(0.0, 1.0 - r / r_max);
      const double w = std::pow(base, power);
      weight[i * width + j] = w;
      if (w > 0.0) {
        ++positive;
        min_positive = std::min(min_positive, w);
      }
    }
  if (positive < budget)
    throw DomainError("variable density profile cannot reach " + std::to_string(budget) + " samples: only " +
                      std::to_string(positive) + " points have positive density");

  auto clipped_sum = [&](double c) {
    double s = 0.0;
    for (double w : weight.data()) s += std::min(1.0, c * w);
    return s;
  };
  double lo = 0.0, hi = 1.0 / min_positive;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (clipped_sum(mid) < static_cast<double>(budget) ? lo : hi) = mid;
  }
  // Saturated points are fixed at 1; rescale the rest so the total is exact.
  Tensor<double> rho(weight.shape());
  std::size_t saturated = 0;
  double free_mass = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    const double v = hi * weight[k];
    if (v >= 1.0) {
      rho[k] = 1.0;
      ++saturated;
    } else {
      rho[k] = v;
      free_mass += v;
    }
  }
  if (free_mass > 0.0) {
    const double factor = (static_cast<double>(budget) - static_cast<double>(saturated)) / free_mass;
    for (auto& v : rho.data())
      if (v < 1.0) v = std::min(1.0, v * factor);
  }
  return rho;
}

BinaryMask gen_variable_density(std::size_t height, std::size_t width, double alpha, double power, std::uint64_t seed) {
  const Tensor<double> rho = variable_density_profile(height, width, alpha, power);
  const std::size_t d = height * width;
  const std::size_t budget = sample_budget(alpha, d);
  // Systematic sampling over a random ordering: thresholds u, u+1, ... walk
  // the cumulative inclusion probabilities, so point k is chosen with
  // probability rho[k] and exactly `budget` points are drawn.
  Rng rng(seed);
  const auto order = rng.permutation(d);
  const double u = rng.uniform();
  Tensor<double> values(Shape{height, width});
  std::size_t chosen = 0;
  double cumulative = 0.0;
  double next = u;
  for (auto k : order) {
    cumulative += rho[k];
    if (chosen < budget && next < cumulative) {
      values[k] = 1.0;
      ++chosen;
      next += 1.0;
    }
  }
  if (chosen < budget) {
    // Rounding left the final threshold past the total mass.
    const auto by_rho = descending_order(rho.data());
    for (auto k : by_rho) {
      if (chosen == budget) break;
      if (values[k] == 0.0) {
        values[k] = 1.0;
        ++chosen;
      }
    }
  }
  return make_binary_mask(std::move(values), alpha, "variable-density", seed);
}

BinaryMask gen_cartesian_equispaced(std::size_t height, std::size_t width, double alpha, Axis phase_encode,
                                    std::size_t center_lines) {
  require_alpha(alpha, "cartesian mask", true);
  const std::size_t lines = phase_encode == Axis::Columns ? width : height;
  const std::size_t budget = sample_budget(alpha, lines);
  if (budget <= center_lines)
    throw DomainError("cartesian mask: budget of " + std::to_string(budget) + " lines does not exceed " +
                      std::to_string(center_lines) + " center lines");
  if (center_lines > lines) throw DomainError("cartesian mask: more center lines than grid lines");
  std::vector<char> selected(lines, 0);
  const std::size_t first_center = lines / 2 - std::min(lines / 2, center_lines / 2);
  for (std::size_t k = 0; k < center_lines; ++k) selected[first_center + k] = 1;
  std::vector<std::size_t> remaining;
  for (std::size_t l = 0; l < lines; ++l)
    if (!selected[l]) remaining.push_back(l);
  const std::size_t spacing = (lines - center_lines) / (budget - center_lines);
  std::size_t picked = center_lines;
  for (std::size_t k = 0; k < remaining.size() && picked < budget; k += spacing, ++picked) selected[remaining[k]] = 1;
  Tensor<double> line(Shape{lines});
  for (std::size_t l = 0; l < lines; ++l) line[l] = selected[l] ? 1.0 : 0.0;
  const Axis readout = phase_encode == Axis::Columns ? Axis::Rows : Axis::Columns;
  return make_binary_mask(expand_line_params(line, height, width, readout), alpha, "cartesian");
}

Tensor<double> mean_spectrum(const VolumeDataset& dataset) {
  const std::size_t n = dataset.slice_count(Split::Train);
  if (n == 0) throw DataError("spectrum mask needs at least one training slice");
  const Tensor<double> kspace = fourier::dft2(dataset.stack(Split::Train).cast<double>());
  const std::size_t h = dataset.height(), w = dataset.width(), plane = h * w;
  Tensor<double> acc(Shape{h, w});
  for (std::size_t s = 0; s < n; ++s) {
    const double* re = kspace.raw() + 2 * s * plane;
    const double* im = re + plane;
    for (std::size_t i = 0; i < plane; ++i) acc[i] += std::hypot(re[i], im[i]);
  }
  for (auto& v : acc.data()) v /= static_cast<double>(n);
  return fourier::fftshift(acc);
}

BinaryMask gen_spectrum(const VolumeDataset& dataset, double alpha) {
  require_alpha(alpha, "spectrum mask", true);
  const Tensor<double> spectrum = mean_spectrum(dataset);
  return keep_top(spectrum, sample_budget(alpha, spectrum.size()), alpha, "spectrum");
}

std::filesystem::path sidecar_path(const std::filesystem::path& pgm_path) {
  auto p = pgm_path;
  p.replace_extension(".json");
  return p;
}

namespace {

void write_sidecar(const std::filesystem::path& pgm_path, const json& meta) {
  std::ofstream out(sidecar_path(pgm_path));
  if (!out) throw DataError("cannot write mask sidecar for '" + pgm_path.string() + "'");
  out << meta.dump(2) << "\n";
}

json read_sidecar(const std::filesystem::path& pgm_path) {
  const auto path = sidecar_path(pgm_path);
  if (!std::filesystem::exists(path)) return json::object();
  std::ifstream in(path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("invalid mask sidecar '" + path.string() + "': " + e.what());
  }
}

} // namespace

void save_mask(const std::filesystem::path& pgm_path, const BinaryMask& mask) {
  GrayImage img;
  img.height = mask.height();
  img.width = mask.width();
  img.max_value = 255;
  img.pixels.resize(mask.values.size());
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = mask.values[i] != 0.0 ? 255 : 0;
  write_pgm(pgm_path, img);
  write_sidecar(pgm_path, {{"height", mask.height()},
                           {"width", mask.width()},
                           {"alpha", mask.alpha},
                           {"achieved_sparsity", mask.achieved_sparsity},
                           {"kind", mask.kind},
                           {"seed", mask.seed}});
}

BinaryMask load_mask(const std::filesystem::path& pgm_path) {
  const GrayImage img = read_pgm(pgm_path);
  if (img.max_value != 255) throw DataError("binary mask '" + pgm_path.string() + "' must be an 8-bit PGM");
  Tensor<double> values(Shape{img.height, img.width});
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    if (img.pixels[i] != 0 && img.pixels[i] != 255)
      throw DataError("binary mask '" + pgm_path.string() + "' contains values other than 0 and 255");
    values[i] = img.pixels[i] == 255 ? 1.0 : 0.0;
  }
  const json meta = read_sidecar(pgm_path);
  BinaryMask m = make_binary_mask(std::move(values), 0.0, meta.value("kind", std::string("external")),
                                  meta.value("seed", std::uint64_t{0}));
  m.alpha = meta.value("alpha", m.achieved_sparsity);
  return m;
}

void save_probability_mask(const std::filesystem::path& pgm_path, const Tensor<double>& p, double alpha) {
  require_grid(p, "probability mask export");
  GrayImage img;
  img.height = p.dim(0);
  img.width = p.dim(1);
  img.max_value = 65535;
  img.pixels.resize(p.size());
  double mean = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    img.pixels[i] = static_cast<std::uint16_t>(std::lround(std::clamp(p[i], 0.0, 1.0) * 65535.0));
    mean += p[i];
  }
  write_pgm(pgm_path, img);
  write_sidecar(pgm_path, {{"height", img.height},
                           {"width", img.width},
                           {"alpha", alpha},
                           {"achieved_sparsity", mean / static_cast<double>(p.size())},
                           {"kind", "probabilistic"},
                           {"seed", 0}});
}

Tensor<double> load_probability_mask(const std::filesystem::path& pgm_path) {
  const GrayImage img = read_pgm(pgm_path);
  if (img.max_value != 65535) throw DataError("probability mask '" + pgm_path.string() + "' must be a 16-bit PGM");
  Tensor<double> p(Shape{img.height, img.width});
  for (std::size_t i = 0; i < img.pixels.size(); ++i) p[i] = img.pixels[i] / 65535.0;
  return p;
}

double axis_wedge_ratio(const Tensor<double>& centered_mask, double wedge_deg) {
  require_grid(centered_mask, "axis_wedge_ratio");
  const std::size_t h = centered_mask.dim(0), w = centered_mask.dim(1);
  const double limit = wedge_deg * std::numbers::pi / 180.0;
  double kx = 0.0, ky = 0.0;
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const double v = static_cast<double>(i) - static_cast<double>(h / 2);
      const double u = static_cast<double>(j) - static_cast<double>(w / 2);
      if (u == 0.0 && v == 0.0) continue;
      const double m = centered_mask[i * w + j];
      if (std::atan2(std::abs(v), std::abs(u)) <= limit) kx += m;
      if (std::atan2(std::abs(u), std::abs(v)) <= limit) ky += m;
    }
  if (ky == 0.0) return kx > 0.0 ? std::numeric_limits<double>::infinity() : 1.0;
  return kx / ky;
}

} // namespace loupe
