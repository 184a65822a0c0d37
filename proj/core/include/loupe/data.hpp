#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "loupe/tensor.hpp"

namespace loupe {

class Rng;

enum class Split { Train, Validation, Test };

std::string to_string(Split split);
Split parse_split(const std::string& text);

/// One normalized complex volume, shape [S, 2, H, W] (real plane, then
/// imaginary plane, per slice).
struct Volume {
  Tensor<float> data;
  Split split = Split::Train;
  std::string source;

  std::size_t slices() const { return data.dim(0); }
  std::size_t height() const { return data.dim(2); }
  std::size_t width() const { return data.dim(3); }
};

struct VolumeDataset {
  std::vector<Volume> volumes;
  /// Free-form JSON text describing how the dataset was produced.
  std::string provenance = "{}";

  std::size_t height() const;
  std::size_t width() const;
  std::size_t slice_count(Split split) const;
  /// All slices of one split stacked as [S_total, 2, H, W], in volume order.
  Tensor<float> stack(Split split) const;
  /// Throws DataError unless every volume shares H, W and is normalized.
  void validate() const;
};

enum class Anisotropy { Horizontal, Vertical, Isotropic };

std::string to_string(Anisotropy a);
Anisotropy parse_anisotropy(const std::string& text);

/// Parameters of the synthetic ellipse phantom generator.
struct PhantomSpec {
  std::size_t train_volumes = 40;
  std::size_t val_volumes = 5;
  std::size_t test_volumes = 5;
  std::size_t slices_per_volume = 5;
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t min_ellipses = 4;
  std::size_t max_ellipses = 10;
  Anisotropy anisotropy = Anisotropy::Horizontal;
  /// Major/minor axis ratio drawn uniformly from this range (anisotropic specs).
  double min_aspect = 2.0;
  double max_aspect = 4.0;
  /// Standard deviation of the ellipse orientation around the preferred axis.
  double orientation_spread_deg = 10.0;
  double min_intensity = 0.1;
  double max_intensity = 0.6;
  /// Standard deviation of additive complex Gaussian noise.
  double noise_level = 0.0;
  /// Peak amplitude (radians) of the smooth random phase field.
  double phase_amplitude = 1.0;
  std::uint64_t seed = 0;

  std::size_t total_volumes() const { return train_volumes + val_volumes + test_volumes; }
};

/// Ellipse in image coordinates normalized to [-1, 1]^2, x along columns,
/// y along rows. `angle` is the direction of the semi_major axis measured
/// from the x axis.
struct Ellipse {
  double cx = 0, cy = 0;
  double semi_major = 0, semi_minor = 0;
  double angle = 0;
  double intensity = 0;

  /// Extents of the axis-aligned bounding box.
  double width() const;
  double height() const;
  bool contains(double x, double y) const;
};

/// Draws the feature ellipses of one slice; exposed so the generator's
/// anisotropy can be checked directly.
std::vector<Ellipse> draw_ellipses(const PhantomSpec& spec, Rng& rng);

VolumeDataset gen_phantoms(const PhantomSpec& spec);

/// Divides both channels of a [S, 2, H, W] volume by its maximum magnitude.
Tensor<float> normalize_volume(const Tensor<float>& volume);

/// Largest sqrt(re^2 + im^2) over a [..., 2, H, W] tensor.
double max_magnitude(const Tensor<float>& volume);

/// Magnitude image(s): [..., 2, H, W] -> [..., H, W] in double precision.
Tensor<double> magnitude(const Tensor<float>& complex);

/// Crops the trailing two axes to (target_height, target_width) around the
/// center, offset floor((H - target) / 2).
template <typename Real>
Tensor<Real> center_crop(const Tensor<Real>& image, std::size_t target_height, std::size_t target_width);

/// Volume file pair: a JSON manifest {shape, dtype, data_file, source} and a
/// raw little-endian float32 payload in [S][channel][row][col] order.
void save_volume(const std::filesystem::path& manifest_path, const Tensor<float>& data, const std::string& source);
Volume load_volume(const std::filesystem::path& manifest_path);

/// Writes dataset.json plus one manifest/payload pair per volume.
void save_dataset(const std::filesystem::path& directory, const VolumeDataset& dataset);
/// Accepts either the dataset directory or the path of its dataset.json.
VolumeDataset load_dataset(const std::filesystem::path& path);

/// 16-bit PGM of one magnitude slice, value = round(65535 * magnitude / max).
void export_magnitude_pgm(const std::filesystem::path& path, const Tensor<double>& magnitude_slice, double max_value);

} // namespace loupe
