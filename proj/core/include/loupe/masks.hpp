#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "loupe/autodiff.hpp"
#include "loupe/tensor.hpp"

namespace loupe {

class Rng;
struct VolumeDataset;

/// Learnable probabilistic mask: unconstrained logits squashed by a sigmoid
/// of slope t, rescaled to mean alpha and thresholded (softly, slope s)
/// against uniform draws.
template <typename Real>
struct ProbMaskParams {
  /// [H, W] logits, or [L] per phase-encode line when line_constrained.
  Parameter<Real> logits;
  std::size_t height = 0;
  std::size_t width = 0;
  double slope_t = 5.0;
  double slope_s = 200.0;
  double alpha = 0.25;
  bool line_constrained = false;
  Axis readout = Axis::Rows;

  std::size_t line_count() const { return readout == Axis::Rows ? width : height; }
  void validate() const;
};

/// Logits initialized at the constraint surface: inverse sigmoid of alpha
/// plus uniform noise in [-noise, noise].
template <typename Real>
ProbMaskParams<Real> init_prob_mask(std::size_t height, std::size_t width, double alpha, double slope_t,
                                    double slope_s, bool line_constrained, Axis readout, Rng& rng,
                                    double noise = 0.1);

/// sigmoid_t(O), broadcast along the readout axis in line mode. [H, W].
template <typename Real>
Tensor<double> probabilities(const ProbMaskParams<Real>& params);

/// Rescales P to mean alpha while keeping every entry in [0, 1]: scale down
/// by alpha/mean when mean >= alpha, otherwise scale 1 - P by
/// (1 - alpha)/(1 - mean).
Tensor<double> renormalize(const Tensor<double>& p, double alpha);

/// Broadcast of per-line logits onto an [H, W] grid.
Tensor<double> expand_line_params(const Tensor<double>& line, std::size_t height, std::size_t width, Axis readout);

struct RelaxedMask {
  Tensor<double> values; // (0, 1), DC-centered
};

/// sigmoid_s(P - U) with U ~ Uniform(0,1)^d drawn from rng.
RelaxedMask sample_relaxed(const Tensor<double>& p_norm, double slope_s, Rng& rng);

struct BinaryMask {
  Tensor<double> values; // {0, 1}, DC-centered [H, W]
  double alpha = 0.0;
  double achieved_sparsity = 0.0;
  std::string kind;
  std::uint64_t seed = 0;

  std::size_t height() const { return values.dim(0); }
  std::size_t width() const { return values.dim(1); }
  std::size_t sampled() const;
};

/// Wraps a {0,1} grid, recording sum/d as the achieved sparsity.
BinaryMask make_binary_mask(Tensor<double> values, double alpha, std::string kind, std::uint64_t seed = 0);

/// Number of samples a budget alpha buys on n points: ceil(alpha * n),
/// computed so that exact products such as 0.25 * 16 do not round up.
std::size_t sample_budget(double alpha, std::size_t n);

enum class BinarizeMode { TopK, Bernoulli };

/// TopK keeps the ceil(alpha*d) largest probabilities (ties: lower row-major
/// index first). Bernoulli keeps points where a seeded uniform is < P.
BinaryMask binarize(const Tensor<double>& p_norm, double alpha, BinarizeMode mode, std::uint64_t seed = 0);

/// Line-mode binarization: keeps the ceil(alpha*L) most probable lines.
BinaryMask binarize_lines(const Tensor<double>& p_norm, double alpha, Axis readout);

BinaryMask gen_uniform_random(std::size_t height, std::size_t width, double alpha, std::uint64_t seed);

/// Density (1 - r/r_max)^power around the DC-centered grid center, scaled so
/// the clipped inclusion probabilities sum to ceil(alpha*d), then sampled
/// without replacement with exactly that many points.
BinaryMask gen_variable_density(std::size_t height, std::size_t width, double alpha, double power, std::uint64_t seed);

/// Inclusion probabilities used by gen_variable_density (sums to the budget).
Tensor<double> variable_density_profile(std::size_t height, std::size_t width, double alpha, double power);

/// Fully sampled central lines plus equispaced remaining lines. `phase_encode`
/// names the axis indexing the lines: Columns selects whole columns.
BinaryMask gen_cartesian_equispaced(std::size_t height, std::size_t width, double alpha, Axis phase_encode,
                                    std::size_t center_lines);

/// Keeps the ceil(alpha*d) k-space points with the largest mean magnitude
/// over all training slices.
BinaryMask gen_spectrum(const VolumeDataset& dataset, double alpha);

/// Mean DC-centered magnitude spectrum of the training split.
Tensor<double> mean_spectrum(const VolumeDataset& dataset);

/// 8-bit PGM (255 = sampled) plus a JSON sidecar next to it
/// ({height, width, alpha, achieved_sparsity, kind, seed}).
void save_mask(const std::filesystem::path& pgm_path, const BinaryMask& mask);
BinaryMask load_mask(const std::filesystem::path& pgm_path);

/// 16-bit PGM scaled by 65535 plus a sidecar with kind "probabilistic".
void save_probability_mask(const std::filesystem::path& pgm_path, const Tensor<double>& p, double alpha);
Tensor<double> load_probability_mask(const std::filesystem::path& pgm_path);

std::filesystem::path sidecar_path(const std::filesystem::path& pgm_path);

/// Fraction of mask mass within +-wedge_deg of the kx (horizontal) axis
/// divided by the fraction within the same wedge around the ky axis. DC is
/// excluded.
double axis_wedge_ratio(const Tensor<double>& centered_mask, double wedge_deg = 15.0);

} // namespace loupe
