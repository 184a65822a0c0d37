#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "loupe/data.hpp"
#include "loupe/masks.hpp"
#include "loupe/training.hpp"

namespace loupe::cli {

/// Settings for the benchmark mask generators and for binarization.
struct MaskSettings {
  std::string kind = "uniform"; // uniform | vd | cartesian | spectrum
  double power = 3.0;           // variable-density falloff exponent
  std::size_t center_lines = 0; // fully sampled lines around DC (cartesian)
  Axis phase_encode = Axis::Columns;
  BinarizeMode binarize = BinarizeMode::TopK;
};

/// Slope values swept by `slope-grid`.
struct GridSettings {
  std::vector<double> slope_s{10.0, 50.0, 200.0};
  std::vector<double> slope_t{1.0, 5.0, 25.0};
};

/// Everything a run can be configured with. Every field has a default, and
/// the JSON form rejects keys it does not know.
struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::filesystem::path out = "out";
  /// Dataset directory or manifest; empty means synthesize from `phantom`.
  std::filesystem::path data;
  PhantomSpec phantom;
  TrainConfig train;
  bool record_time = false;
  MaskSettings mask;
  GridSettings grid;

  /// Pushes the single run seed and thread count into the nested configs.
  void propagate();
};

/// Overlays the keys present in `text` onto `config`. Throws DataError for
/// malformed JSON, unknown keys or mistyped values.
void apply_json(RunConfig& config, const std::string& text);
void apply_json_file(RunConfig& config, const std::filesystem::path& path);

/// Full configuration as JSON, with every field present.
std::string to_json(const RunConfig& config);

std::string to_string(Axis axis);
Axis parse_axis(const std::string& text);
std::string to_string(BinarizeMode mode);
BinarizeMode parse_binarize_mode(const std::string& text);

} // namespace loupe::cli
